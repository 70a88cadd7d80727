//! 16-bit PCM mono WAV input.

use std::path::Path;

use thiserror::Error;

/// Samples per clip fed to the front-end: one second at 16 kHz.
pub const CLIP_SAMPLES: usize = 16_000;
pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("{path}: {source}")]
    Read {
        path: String,
        #[source]
        source: hound::Error,
    },
    #[error("{path}: unsupported WAV format ({detail}); expected 16-bit PCM mono at 16 kHz")]
    Format { path: String, detail: String },
}

/// Reads a 16-bit PCM mono 16 kHz WAV file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Vec<i16>, AudioError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let reader = hound::WavReader::open(path).map_err(|source| AudioError::Read {
        path: shown.clone(),
        source,
    })?;
    let spec = reader.spec();
    let problem = if spec.sample_format != hound::SampleFormat::Int {
        Some("floating-point samples".to_string())
    } else if spec.bits_per_sample != 16 {
        Some(format!("{} bits per sample", spec.bits_per_sample))
    } else if spec.channels != 1 {
        Some(format!("{} channels", spec.channels))
    } else if spec.sample_rate != SAMPLE_RATE {
        Some(format!("{} Hz", spec.sample_rate))
    } else {
        None
    };
    if let Some(detail) = problem {
        return Err(AudioError::Format {
            path: shown,
            detail,
        });
    }
    reader
        .into_samples::<i16>()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|source| AudioError::Read {
            path: shown,
            source,
        })
}

/// Zero-pads at the end or truncates to exactly `CLIP_SAMPLES`.
pub fn fit_clip(mut samples: Vec<i16>) -> Vec<i16> {
    samples.resize(CLIP_SAMPLES, 0);
    samples
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(path: &Path, spec: hound::WavSpec, n: usize) {
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for i in 0..n {
            match spec.sample_format {
                hound::SampleFormat::Int if spec.bits_per_sample == 16 => {
                    w.write_sample(i as i16).unwrap()
                }
                hound::SampleFormat::Int => w.write_sample(i as i32).unwrap(),
                hound::SampleFormat::Float => w.write_sample(i as f32).unwrap(),
            }
        }
        w.finalize().unwrap();
    }

    fn spec() -> hound::WavSpec {
        hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        }
    }

    #[test]
    fn reads_valid_file_and_rejects_others() {
        let dir = tempfile::tempdir().unwrap();
        let ok = dir.path().join("ok.wav");
        write(&ok, spec(), 100);
        assert_eq!(read_wav(&ok).unwrap().len(), 100);

        let cases = [
            hound::WavSpec { channels: 2, ..spec() },
            hound::WavSpec { sample_rate: 8_000, ..spec() },
            hound::WavSpec { bits_per_sample: 24, ..spec() },
            hound::WavSpec {
                bits_per_sample: 32,
                sample_format: hound::SampleFormat::Float,
                ..spec()
            },
        ];
        for (i, s) in cases.into_iter().enumerate() {
            let p = dir.path().join(format!("bad{i}.wav"));
            write(&p, s, 100);
            assert!(matches!(read_wav(&p), Err(AudioError::Format { .. })), "case {i}");
        }

        let junk = dir.path().join("junk.wav");
        std::fs::write(&junk, b"not a wav file").unwrap();
        assert!(matches!(read_wav(&junk), Err(AudioError::Read { .. })));
        assert!(read_wav(dir.path().join("missing.wav")).is_err());
    }

    #[test]
    fn fit_clip_pads_and_truncates() {
        let short = fit_clip(vec![7; 8_000]);
        assert_eq!(short.len(), CLIP_SAMPLES);
        assert!(short[..8_000].iter().all(|&v| v == 7));
        assert!(short[8_000..].iter().all(|&v| v == 0));
        assert_eq!(fit_clip(vec![1; 20_000]).len(), CLIP_SAMPLES);
    }
}
