//! Labelled feature maps: containers, loaders, splitting and partitioning.

mod corpus;
mod features;
mod synth;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::audio::AudioError;
use crate::mfcc::{MfccConfig, MfccError};
use crate::seed;
use crate::tensor::Tensor;

pub use corpus::{label_for_folder, load_wav_corpus};
pub use features::{load_features, read_features, save_features, write_features, FEATURE_MAGIC};
pub use synth::{synth_dataset, Difficulty};

pub const CLASS_NAMES: [&str; 7] = ["one", "two", "three", "four", "five", "silence", "unknown"];
pub const SILENCE: u8 = 5;
pub const UNKNOWN: u8 = 6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("corpus root {0} does not exist or is not a directory")]
    MissingRoot(PathBuf),
    #[error("no readable .wav files under {0}")]
    NoAudio(PathBuf),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Mfcc(#[from] MfccError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("feature file: {0}")]
    FeatureFormat(String),
    #[error("cannot split {samples} samples across {clients} clients")]
    TooManyClients { samples: usize, clients: usize },
    #[error("invalid data source {0:?}; expected synth:easy|hard[:N], wav:<dir> or sflf:<file>")]
    Source(String),
}

/// One utterance as a `[50, 13]` feature map with its class index.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Tensor,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Synthetic { seed: u64, difficulty: Difficulty },
    WavCorpus(PathBuf),
    FeatureFile(PathBuf),
    Derived,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, provenance: Provenance) -> Self {
        Self {
            samples,
            provenance,
        }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn class_names(&self) -> &'static [&'static str; 7] {
        &CLASS_NAMES
    }

    /// Samples per class label.
    pub fn class_counts(&self) -> [usize; 7] {
        let mut counts = [0; 7];
        for s in &self.samples {
            counts[s.label as usize] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset::new(
            indices.iter().map(|&i| self.samples[i].clone()).collect(),
            Provenance::Derived,
        )
    }

    /// Concatenates datasets in order.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Dataset>) -> Dataset {
        Dataset::new(
            parts.into_iter().flat_map(|d| d.samples.iter().cloned()).collect(),
            Provenance::Derived,
        )
    }
}

/// Stratified train/validation split.
///
/// Each class's indices are shuffled with a seeded stream and the last
/// `round(n_c * val_fraction)` go to validation. Both halves keep the
/// original sample order.
pub fn train_val_split(ds: &Dataset, val_fraction: f64, seed_value: u64) -> (Dataset, Dataset) {
    let mut is_val = vec![false; ds.len()];
    for class in 0..CLASS_NAMES.len() {
        let mut idx: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.samples[i].label as usize == class)
            .collect();
        let mut rng = seed::stream(seed_value, &[seed::DOMAIN_SPLIT, class as u64]);
        idx.shuffle(&mut rng);
        let n_val = (idx.len() as f64 * val_fraction).round() as usize;
        for &i in &idx[idx.len() - n_val.min(idx.len())..] {
            is_val[i] = true;
        }
    }
    let (val, train): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| is_val[i]);
    (ds.subset(&train), ds.subset(&val))
}

/// Seeded IID partition into `clients` disjoint shards whose sizes differ by at most one.
pub fn partition(ds: &Dataset, clients: usize, seed_value: u64) -> Result<Vec<Dataset>, DataError> {
    if clients == 0 || clients > ds.len() {
        return Err(DataError::TooManyClients {
            samples: ds.len(),
            clients,
        });
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut seed::stream(seed_value, &[seed::DOMAIN_PARTITION]));
    let base = ds.len() / clients;
    let extra = ds.len() % clients;
    let mut start = 0;
    Ok((0..clients)
        .map(|i| {
            let size = base + usize::from(i < extra);
            let shard = ds.subset(&order[start..start + size]);
            start += size;
            shard
        })
        .collect())
}

/// Where training data comes from, as written on the command line.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synth {
        difficulty: Difficulty,
        per_class: usize,
    },
    Wav(PathBuf),
    Features(PathBuf),
}

impl DataSource {
    pub fn load(&self, seed_value: u64) -> Result<Dataset, DataError> {
        match self {
            DataSource::Synth {
                difficulty,
                per_class,
            } => Ok(synth_dataset(seed_value, *per_class, *difficulty)),
            DataSource::Wav(dir) => load_wav_corpus(dir, &MfccConfig::default()),
            DataSource::Features(path) => load_features(path),
        }
    }
}

impl FromStr for DataSource {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DataError::Source(s.to_string());
        if let Some(rest) = s.strip_prefix("synth:") {
            let mut parts = rest.splitn(2, ':');
            let difficulty = parts.next().unwrap_or("").parse().map_err(|_| bad())?;
            let per_class = match parts.next() {
                Some(n) => n.parse().ok().filter(|&n: &usize| n > 0).ok_or_else(bad)?,
                None => difficulty_default_size(difficulty),
            };
            Ok(DataSource::Synth {
                difficulty,
                per_class,
            })
        } else if let Some(dir) = s.strip_prefix("wav:") {
            Ok(DataSource::Wav(dir.into()))
        } else if let Some(file) = s.strip_prefix("sflf:") {
            Ok(DataSource::Features(file.into()))
        } else {
            Err(bad())
        }
    }
}

/// 50 per class for the easy set, 1000 for the hard one.
fn difficulty_default_size(d: Difficulty) -> usize {
    match d {
        Difficulty::Easy => 50,
        Difficulty::Hard => 1000,
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Synth {
                difficulty,
                per_class,
            } => write!(f, "synth:{difficulty}:{per_class}"),
            DataSource::Wav(p) => write!(f, "wav:{}", p.display()),
            DataSource::Features(p) => write!(f, "sflf:{}", p.display()),
        }
    }
}
