//! Deployment artifacts: merging the halves, int8 quantization and the
//! `SFLC` checkpoint / `SFLQ` quantized file formats.

mod files;
mod quant;

use std::path::PathBuf;

use thiserror::Error;

use crate::models::{ModelError, ModelSpec, SplitModel};
use crate::nn::NnError;

pub use files::{Checkpoint, ConfigSnapshot, MetricsSummary, CHECKPOINT_MAGIC, FORMAT_VERSION, QUANTIZED_MAGIC};
pub use quant::{quantize_int8, quantized_infer, QuantizedLayer, QuantizedModel, QuantizedTensor};

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    Version(u16),
    #[error("file truncated: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("checksum mismatch: footer says {expected:#010x}, contents hash to {computed:#010x}")]
    Crc { expected: u32, computed: u32 },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("cannot quantize non-finite weights")]
    NonFinite,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Concatenates the client and server halves into one model.
pub fn merge(split: &SplitModel) -> Result<ModelSpec, ExportError> {
    Ok(split.merge()?)
}
