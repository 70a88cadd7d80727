//! Seeded synthetic stand-in for a small keyword corpus.
//!
//! Both difficulties produce `[50, 13]` maps with values on the scale of
//! normalized MFCCs.
//!
//! * `easy`: each class has a fixed random prototype; samples are the
//!   prototype plus isotropic Gaussian noise. Classes are linearly separable.
//! * `hard`: every sample shares one background map and carries only a faint
//!   class prototype. The class is mostly encoded in a short oriented
//!   ripple (a "word") drawn from one of two per-class variants, placed at
//!   a random time offset with a random phase, so its mean contribution is
//!   zero and it must be detected from local correlations. The "silence"
//!   class has no ripple.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, Provenance, Sample, CLASS_NAMES, SILENCE};
use crate::models::{FEATURE_COEFFS, FEATURE_FRAMES};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Difficulty {
    Easy,
    Hard,
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        })
    }
}

impl FromStr for Difficulty {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "hard" => Ok(Difficulty::Hard),
            other => Err(format!("unknown difficulty {other:?}")),
        }
    }
}

const CELLS: usize = FEATURE_FRAMES * FEATURE_COEFFS;

const EASY_NOISE: f64 = 1.0;

const HARD_BACKGROUND: f64 = 0.5;
const HARD_PROTOTYPE: f64 = 0.03;
const HARD_RIPPLE: f64 = 1.0;
const HARD_NOISE: f64 = 0.6;
const WORD_FRAMES: usize = 16;

/// Two ripple variants per class, as (radians per frame, radians per
/// coefficient). Each sample uses one of them at random.
const RIPPLES: [[(f64, f64); 2]; 7] = [
    [(0.7, 0.0), (0.0, 2.4)],
    [(0.0, 1.4), (1.9, -1.4)],
    [(0.7, 1.4), (1.3, 0.0)],
    [(0.7, -1.4), (2.5, 1.4)],
    [(1.9, 0.0), (1.3, -2.4)],
    [(0.0, 0.0), (0.0, 0.0)],
    [(1.9, 2.4), (0.35, 0.7)],
];

fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_map(rng: &mut impl Rng) -> Vec<f64> {
    (0..CELLS).map(|_| gaussian(rng)).collect()
}

/// Generates `per_class` samples for each of the seven classes, interleaved
/// by class. A pure function of its arguments.
pub fn synth_dataset(seed_value: u64, per_class: usize, difficulty: Difficulty) -> Dataset {
    let mut proto_rng = seed::stream(seed_value, &[seed::DOMAIN_SYNTH, 0]);
    let background = random_map(&mut proto_rng);
    let prototypes: Vec<Vec<f64>> = (0..CLASS_NAMES.len()).map(|_| random_map(&mut proto_rng)).collect();
    let mut rng = seed::stream(seed_value, &[seed::DOMAIN_SYNTH, 1]);

    let mut samples = Vec::with_capacity(per_class * CLASS_NAMES.len());
    for _ in 0..per_class {
        for (label, proto) in prototypes.iter().enumerate() {
            let values: Vec<f64> = match difficulty {
                Difficulty::Easy => proto
                    .iter()
                    .map(|p| p + EASY_NOISE * gaussian(&mut rng))
                    .collect(),
                Difficulty::Hard => hard_sample(label as u8, proto, &background, &mut rng),
            };
            let features = Tensor::new(
                vec![FEATURE_FRAMES, FEATURE_COEFFS],
                values.into_iter().map(|v| v as f32).collect(),
            )
            .expect("CELLS values");
            samples.push(Sample {
                features,
                label: label as u8,
            });
        }
    }
    Dataset::new(
        samples,
        Provenance::Synthetic {
            seed: seed_value,
            difficulty,
        },
    )
}

fn hard_sample(label: u8, proto: &[f64], background: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    let mut values: Vec<f64> = background
        .iter()
        .zip(proto)
        .map(|(b, p)| HARD_BACKGROUND * b + HARD_PROTOTYPE * p + HARD_NOISE * gaussian(rng))
        .collect();
    if label != SILENCE {
        let (wt, wf) = RIPPLES[label as usize][rng.random_range(0..2)];
        let start = rng.random_range(0..=FEATURE_FRAMES - WORD_FRAMES);
        let phase = rng.random_range(0.0..2.0 * PI);
        let amp = HARD_RIPPLE * rng.random_range(0.8..1.2);
        for t in 0..WORD_FRAMES {
            let envelope = (PI * (t as f64 + 0.5) / WORD_FRAMES as f64).sin();
            for f in 0..FEATURE_COEFFS {
                let ripple = (wt * t as f64 + wf * f as f64 + phase).cos();
                values[(start + t) * FEATURE_COEFFS + f] += amp * envelope * ripple;
            }
        }
    }
    values
}
