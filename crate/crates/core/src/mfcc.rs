//! MFCC front-end producing the 50x13 feature maps the client models consume.
//!
//! Pipeline per frame: truncate to `fft_length` samples, Hamming window,
//! magnitude spectrum, triangular mel filterbank, `ln(max(e, 1e-12))`,
//! orthonormal DCT-II, keep the first `num_coefficients`. The whole map is
//! then normalized per coefficient with a centered sliding mean/variance
//! window of `norm_window` frames, clamped at the signal edges.
//!
//! Internals run in `f64`; the returned map is `f32`.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::tensor::Tensor;

/// Floor applied to filterbank energies before the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;
/// Floor applied to the sliding-window variance.
pub const VARIANCE_FLOOR: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MfccError {
    #[error("invalid MFCC configuration: {0}")]
    Config(String),
    #[error("audio has {samples} samples, fewer than one {frame}-sample frame")]
    TooShort { samples: usize, frame: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfccConfig {
    pub sample_rate: u32,
    pub num_coefficients: usize,
    /// Seconds.
    pub frame_length: f64,
    /// Seconds.
    pub frame_stride: f64,
    pub num_filters: usize,
    pub fft_length: usize,
    /// Frames.
    pub norm_window: usize,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            num_coefficients: 13,
            frame_length: 0.02,
            frame_stride: 0.02,
            num_filters: 32,
            fft_length: 256,
            norm_window: 101,
        }
    }
}

impl MfccConfig {
    pub fn validate(&self) -> Result<(), MfccError> {
        let fail = |msg: String| Err(MfccError::Config(msg));
        if self.sample_rate == 0 {
            return fail("sample rate must be positive".into());
        }
        if !self.fft_length.is_power_of_two() || self.fft_length < 2 {
            return fail(format!("fft_length {} is not a power of two", self.fft_length));
        }
        if self.num_coefficients == 0 || self.num_coefficients > self.num_filters {
            return fail(format!(
                "need 1 <= num_coefficients ({}) <= num_filters ({})",
                self.num_coefficients, self.num_filters
            ));
        }
        if !(self.frame_length > 0.0 && self.frame_stride > 0.0) {
            return fail("frame length and stride must be positive".into());
        }
        if self.frame_samples() == 0 || self.stride_samples() == 0 {
            return fail("frame length or stride rounds to zero samples".into());
        }
        if self.norm_window == 0 {
            return fail("norm_window must be at least one frame".into());
        }
        Ok(())
    }

    pub fn frame_samples(&self) -> usize {
        (self.frame_length * self.sample_rate as f64).round() as usize
    }

    pub fn stride_samples(&self) -> usize {
        (self.frame_stride * self.sample_rate as f64).round() as usize
    }

    pub fn spectrum_bins(&self) -> usize {
        self.fft_length / 2 + 1
    }

    /// Frames produced for `num_samples` of audio; partial tail frames are dropped.
    pub fn frame_count(&self, num_samples: usize) -> usize {
        let frame = self.frame_samples();
        if num_samples < frame {
            0
        } else {
            (num_samples - frame) / self.stride_samples() + 1
        }
    }
}

/// A `[frames, coefficients]` MFCC map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    values: Tensor,
}

impl FeatureMap {
    pub fn new(values: Tensor) -> Result<Self, MfccError> {
        if values.rank() != 2 {
            return Err(MfccError::Config(format!(
                "feature map must be rank 2, got shape {:?}",
                values.shape()
            )));
        }
        Ok(Self { values })
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn coefficients(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Left edge, center and right edge (Hz) of every filter: `num_filters + 2`
/// points equally spaced in mel between 0 Hz and Nyquist.
pub fn filter_edges(cfg: &MfccConfig) -> Vec<(f64, f64, f64)> {
    let top = hz_to_mel(cfg.sample_rate as f64 / 2.0);
    let points: Vec<f64> = (0..cfg.num_filters + 2)
        .map(|i| mel_to_hz(top * i as f64 / (cfg.num_filters + 1) as f64))
        .collect();
    points.windows(3).map(|w| (w[0], w[1], w[2])).collect()
}

fn filterbank_f64(cfg: &MfccConfig) -> Vec<Vec<f64>> {
    let bins = cfg.spectrum_bins();
    let bin_hz = cfg.sample_rate as f64 / cfg.fft_length as f64;
    filter_edges(cfg)
        .into_iter()
        .map(|(lo, center, hi)| {
            (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= center {
                        (f - lo) / (center - lo)
                    } else {
                        (hi - f) / (hi - center)
                    }
                })
                .collect()
        })
        .collect()
}

/// Triangular mel filters evaluated at the magnitude-spectrum bin
/// frequencies, shape `[num_filters, fft_length / 2 + 1]`.
pub fn mel_filterbank(cfg: &MfccConfig) -> Result<Tensor, MfccError> {
    cfg.validate()?;
    let rows = filterbank_f64(cfg);
    let data = rows.iter().flatten().map(|&v| v as f32).collect();
    Ok(Tensor::new(vec![cfg.num_filters, cfg.spectrum_bins()], data)
        .expect("filterbank dimensions are consistent"))
}

/// Reusable extractor holding the precomputed window, filterbank, DCT basis and FFT plan.
pub struct Mfcc {
    cfg: MfccConfig,
    window: Vec<f64>,
    filterbank: Vec<Vec<f64>>,
    dct: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl Mfcc {
    pub fn new(cfg: MfccConfig) -> Result<Self, MfccError> {
        cfg.validate()?;
        let n = cfg.fft_length;
        // Symmetric Hamming window over the analysed (truncated) frame.
        let window = (0..n)
            .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
            .collect();
        let filters = cfg.num_filters;
        let dct = (0..cfg.num_coefficients)
            .map(|k| {
                let norm = if k == 0 {
                    (1.0 / filters as f64).sqrt()
                } else {
                    (2.0 / filters as f64).sqrt()
                };
                (0..filters)
                    .map(|m| norm * (PI * k as f64 * (m as f64 + 0.5) / filters as f64).cos())
                    .collect()
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(n);
        Ok(Self {
            filterbank: filterbank_f64(&cfg),
            cfg,
            window,
            dct,
            fft,
        })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.cfg
    }

    /// Extracts features from 16-bit PCM samples.
    pub fn extract_pcm(&self, audio: &[i16]) -> Result<FeatureMap, MfccError> {
        let samples: Vec<f64> = audio.iter().map(|&s| s as f64 / 32768.0).collect();
        self.extract(&samples)
    }

    /// Extracts features from samples already scaled to roughly `[-1, 1]`.
    pub fn extract(&self, audio: &[f64]) -> Result<FeatureMap, MfccError> {
        let frame = self.cfg.frame_samples();
        let frames = self.cfg.frame_count(audio.len());
        if frames == 0 {
            return Err(MfccError::TooShort {
                samples: audio.len(),
                frame,
            });
        }
        let stride = self.cfg.stride_samples();
        let n = self.cfg.fft_length;
        let analysed = frame.min(n);
        let coeffs = self.cfg.num_coefficients;

        let mut cepstra = vec![0.0f64; frames * coeffs];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut log_mel = vec![0.0f64; self.cfg.num_filters];
        for t in 0..frames {
            let start = t * stride;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < analysed {
                    Complex64::new(audio[start + i] * self.window[i], 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            for (out, filter) in log_mel.iter_mut().zip(&self.filterbank) {
                let energy: f64 = filter
                    .iter()
                    .zip(&buf[..self.cfg.spectrum_bins()])
                    .map(|(w, c)| w * c.norm())
                    .sum();
                *out = energy.max(LOG_FLOOR).ln();
            }
            for (k, basis) in self.dct.iter().enumerate() {
                cepstra[t * coeffs + k] = basis.iter().zip(&log_mel).map(|(b, v)| b * v).sum();
            }
        }

        let normalized = sliding_normalize(&cepstra, frames, coeffs, self.cfg.norm_window);
        let values = Tensor::new(
            vec![frames, coeffs],
            normalized.into_iter().map(|v| v as f32).collect(),
        )
        .expect("frames * coeffs values");
        FeatureMap::new(values)
    }
}

/// Per-coefficient mean/variance normalization over a centered window of
/// `window` frames, clipped to `[0, frames)`.
fn sliding_normalize(values: &[f64], frames: usize, coeffs: usize, window: usize) -> Vec<f64> {
    let half = window / 2;
    let mut out = vec![0.0; values.len()];
    for t in 0..frames {
        let lo = t.saturating_sub(half);
        let hi = (t + half).min(frames - 1);
        let count = (hi - lo + 1) as f64;
        for c in 0..coeffs {
            let column = (lo..=hi).map(|s| values[s * coeffs + c]);
            let mean = column.clone().sum::<f64>() / count;
            let var = column.map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            out[t * coeffs + c] = (values[t * coeffs + c] - mean) / var.max(VARIANCE_FLOOR).sqrt();
        }
    }
    out
}

/// One-shot extraction from 16-bit PCM with the given configuration.
pub fn mfcc_extract(audio: &[i16], cfg: &MfccConfig) -> Result<FeatureMap, MfccError> {
    Mfcc::new(cfg.clone())?.extract_pcm(audio)
}
