//! `SFLF` feature files: cached MFCC maps with labels.
//!
//! ```text
//! "SFLF" | count u32 | count * (label u8 | 650 * f32)
//! ```
//! little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{DataError, Dataset, Provenance, Sample, CLASS_NAMES};
use crate::models::{FEATURE_COEFFS, FEATURE_FRAMES};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: [u8; 4] = *b"SFLF";
const FEATURES_PER_SAMPLE: usize = FEATURE_FRAMES * FEATURE_COEFFS;

pub fn write_features(out: &mut impl Write, ds: &Dataset) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: "<stream>".into(),
        source,
    };
    let mut buf = Vec::with_capacity(8 + ds.len() * (1 + 4 * FEATURES_PER_SAMPLE));
    buf.extend_from_slice(&FEATURE_MAGIC);
    buf.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    for s in ds.samples() {
        if s.features.len() != FEATURES_PER_SAMPLE {
            return Err(DataError::FeatureFormat(format!(
                "sample has {} features, format stores {FEATURES_PER_SAMPLE}",
                s.features.len()
            )));
        }
        buf.push(s.label);
        for v in s.features.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(io)
}

pub fn read_features(input: &mut impl Read) -> Result<Vec<Sample>, DataError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).map_err(|source| DataError::Io {
        path: "<stream>".into(),
        source,
    })?;
    if bytes.len() < 8 || bytes[..4] != FEATURE_MAGIC {
        return Err(DataError::FeatureFormat("missing SFLF header".into()));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let record = 1 + 4 * FEATURES_PER_SAMPLE;
    let expected = count.checked_mul(record).and_then(|n| n.checked_add(8));
    if expected != Some(bytes.len()) {
        return Err(DataError::FeatureFormat(format!(
            "header announces {count} samples ({} bytes) but file has {} bytes",
            expected.map_or("overflowing".to_string(), |n| n.to_string()),
            bytes.len()
        )));
    }
    bytes[8..]
        .chunks_exact(record)
        .map(|rec| {
            let label = rec[0];
            if label as usize >= CLASS_NAMES.len() {
                return Err(DataError::FeatureFormat(format!("label {label} out of range")));
            }
            let data = rec[1..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let features = Tensor::new(vec![FEATURE_FRAMES, FEATURE_COEFFS], data)
                .expect("record length checked");
            Ok(Sample { features, label })
        })
        .collect()
}

pub fn save_features(path: impl AsRef<Path>, ds: &Dataset) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    write_features(&mut file, ds)
}

pub fn load_features(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let samples = read_features(&mut file)?;
    Ok(Dataset::new(samples, Provenance::FeatureFile(path.to_path_buf())))
}
