//! Byte layouts of the checkpoint (`SFLC`) and quantized model (`SFLQ`)
//! files. All integers and floats are little-endian and every file ends in
//! a CRC32 of everything before it. See `docs/formats.md`.

use std::fs;
use std::path::Path;

use super::quant::{QuantizedLayer, QuantizedModel, QuantizedTensor};
use super::ExportError;
use crate::models::{self, ModelName, ModelSpec, SplitModel};
use crate::nn::{self, LayerKind};
use crate::orchestrator::{Scheme, TrainingConfig, TrainingHistory};
use crate::tensor::{element_count, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SFLC";
pub const QUANTIZED_MAGIC: [u8; 4] = *b"SFLQ";
pub const FORMAT_VERSION: u16 = 1;

const KIND_FC: u8 = 1;
const KIND_CONV: u8 = 2;
const KIND_RELU: u8 = 3;
const KIND_FLATTEN: u8 = 4;

/// The training settings a checkpoint was produced with.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigSnapshot {
    pub scheme: Scheme,
    pub epochs: u32,
    pub learning_rate: f32,
    pub momentum: f32,
    pub seed: u64,
    pub num_clients: u32,
    pub aggregate: bool,
    pub val_fraction: f64,
}

impl ConfigSnapshot {
    pub fn new(scheme: Scheme, cfg: &TrainingConfig) -> Self {
        Self {
            scheme,
            epochs: cfg.epochs,
            learning_rate: cfg.learning_rate,
            momentum: cfg.momentum,
            seed: cfg.seed,
            num_clients: cfg.num_clients as u32,
            aggregate: cfg.aggregate,
            val_fraction: cfg.val_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSummary {
    pub val_accuracy: Option<f32>,
    /// Loss of the last recorded step.
    pub final_loss: f32,
    pub steps: u64,
}

impl MetricsSummary {
    pub fn from_history(history: &TrainingHistory) -> Self {
        Self {
            val_accuracy: history.final_val_accuracy(),
            final_loss: history.rows.last().map_or(f32::NAN, |r| r.loss),
            steps: history.rows.len() as u64,
        }
    }
}

/// Float weights of a full model plus how they were trained.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelSpec,
    pub config: ConfigSnapshot,
    pub summary: MetricsSummary,
}

impl Checkpoint {
    pub fn new(model: ModelSpec, config: ConfigSnapshot, summary: MetricsSummary) -> Self {
        Self {
            model,
            config,
            summary,
        }
    }

    pub fn split_model(&self) -> SplitModel {
        self.model.split()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(CHECKPOINT_MAGIC, self.model.name);
        w.u8(self.model.split_index as u8);
        let tensors: Vec<&Tensor> = nn::params(&self.model.layers).collect();
        w.u32(tensors.len() as u32);
        for t in tensors {
            w.u8(t.rank() as u8);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            for &v in t.data() {
                w.f32(v);
            }
        }
        let c = &self.config;
        w.u8(scheme_tag(c.scheme));
        w.u32(c.epochs);
        w.f32(c.learning_rate);
        w.f32(c.momentum);
        w.u64(c.seed);
        w.u32(c.num_clients);
        w.u8(u8::from(c.aggregate));
        w.f64(c.val_fraction);
        let s = &self.summary;
        w.u8(u8::from(s.val_accuracy.is_some()));
        w.f32(s.val_accuracy.unwrap_or(0.0));
        w.f32(s.final_loss);
        w.u64(s.steps);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ExportError> {
        let (mut r, name) = Reader::open(bytes, CHECKPOINT_MAGIC)?;
        let mut spec = models::build(name);
        let split_index = usize::from(r.u8()?);
        let count = r.u32()? as usize;
        let expected = nn::params(&spec.layers).count();
        if count != expected {
            return Err(ExportError::Format(format!(
                "{name} has {expected} parameter tensors, file holds {count}"
            )));
        }
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let rank = usize::from(r.u8()?);
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n = element_count(&shape);
            r.need(n.saturating_mul(4))?;
            let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
            tensors.push(Tensor::new(shape, data)?);
        }
        nn::load_params(&mut spec.layers, &tensors)?;
        spec.split_index = split_index;
        spec.validate()?;

        let scheme = match r.u8()? {
            0 => Scheme::Sfl,
            1 => Scheme::Fl,
            2 => Scheme::Centralized,
            t => return Err(ExportError::Format(format!("unknown scheme tag {t}"))),
        };
        let config = ConfigSnapshot {
            scheme,
            epochs: r.u32()?,
            learning_rate: r.f32()?,
            momentum: r.f32()?,
            seed: r.u64()?,
            num_clients: r.u32()?,
            aggregate: r.flag()?,
            val_fraction: r.f64()?,
        };
        let has_val = r.flag()?;
        let val = r.f32()?;
        let summary = MetricsSummary {
            val_accuracy: has_val.then_some(val),
            final_loss: r.f32()?,
            steps: r.u64()?,
        };
        r.end()?;
        Ok(Self::new(spec, config, summary))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ExportError> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExportError> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}

fn scheme_tag(s: Scheme) -> u8 {
    match s {
        Scheme::Sfl => 0,
        Scheme::Fl => 1,
        Scheme::Centralized => 2,
    }
}

impl QuantizedModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(QUANTIZED_MAGIC, self.name);
        w.u16(self.layers.len() as u16);
        for layer in &self.layers {
            match layer.kind {
                LayerKind::FullyConnected { inputs, outputs } => {
                    w.u8(KIND_FC);
                    w.u32(inputs as u32);
                    w.u32(outputs as u32);
                }
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                } => {
                    w.u8(KIND_CONV);
                    for d in [in_channels, out_channels, kernel_h, kernel_w] {
                        w.u32(d as u32);
                    }
                }
                LayerKind::Relu => w.u8(KIND_RELU),
                LayerKind::Flatten => w.u8(KIND_FLATTEN),
            }
            if let Some((weights, bias)) = &layer.params {
                for q in [weights, bias] {
                    w.f32(q.scale);
                    w.u8(q.zero_point as u8);
                    w.u32(q.codes.len() as u32);
                    w.buf.extend(q.codes.iter().map(|&c| c as u8));
                }
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ExportError> {
        let (mut r, name) = Reader::open(bytes, QUANTIZED_MAGIC)?;
        let count = r.u16()?;
        let mut layers = Vec::with_capacity(usize::from(count));
        for _ in 0..count {
            let kind = match r.u8()? {
                KIND_FC => LayerKind::FullyConnected {
                    inputs: r.u32()? as usize,
                    outputs: r.u32()? as usize,
                },
                KIND_CONV => LayerKind::Conv2d {
                    in_channels: r.u32()? as usize,
                    out_channels: r.u32()? as usize,
                    kernel_h: r.u32()? as usize,
                    kernel_w: r.u32()? as usize,
                },
                KIND_RELU => LayerKind::Relu,
                KIND_FLATTEN => LayerKind::Flatten,
                t => return Err(ExportError::Format(format!("unknown layer kind {t}"))),
            };
            let params = if kind.has_params() {
                Some((
                    r.quantized(kind.weight_shape())?,
                    r.quantized(kind.bias_shape())?,
                ))
            } else {
                None
            };
            layers.push(QuantizedLayer { kind, params });
        }
        r.end()?;
        Ok(Self { name, layers })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ExportError> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExportError> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ExportError> {
    fs::write(path, bytes).map_err(|source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>, ExportError> {
    fs::read(path).map_err(|source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    /// Starts a file with its magic, version and model name.
    fn new(magic: [u8; 4], name: ModelName) -> Self {
        let mut w = Self { buf: magic.to_vec() };
        w.u16(FORMAT_VERSION);
        let name = name.as_str().as_bytes();
        w.u8(name.len() as u8);
        w.buf.extend_from_slice(name);
        w
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

struct Reader<'a> {
    body: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic, CRC and version, and reads the model name.
    fn open(bytes: &'a [u8], magic: [u8; 4]) -> Result<(Self, ModelName), ExportError> {
        if bytes.len() < 4 {
            return Err(ExportError::Truncated {
                offset: bytes.len(),
                needed: 4 - bytes.len(),
            });
        }
        let found: [u8; 4] = bytes[..4].try_into().expect("four bytes");
        if found != magic {
            return Err(ExportError::BadMagic {
                expected: magic,
                found,
            });
        }
        if bytes.len() < 10 {
            return Err(ExportError::Truncated {
                offset: bytes.len(),
                needed: 10 - bytes.len(),
            });
        }
        let (body, footer) = bytes.split_at(bytes.len() - 4);
        let expected = u32::from_le_bytes(footer.try_into().expect("four bytes"));
        let computed = crc32fast::hash(body);
        if expected != computed {
            return Err(ExportError::Crc { expected, computed });
        }
        let mut r = Self { body, pos: 4 };
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(ExportError::Version(version));
        }
        let len = usize::from(r.u8()?);
        let raw = r.take(len)?;
        let name = std::str::from_utf8(raw)
            .map_err(|_| ExportError::Format("model name is not UTF-8".into()))?
            .parse::<ModelName>()?;
        Ok((r, name))
    }

    fn need(&self, n: usize) -> Result<(), ExportError> {
        let left = self.body.len() - self.pos;
        if n > left {
            return Err(ExportError::Truncated {
                offset: self.body.len(),
                needed: n - left,
            });
        }
        Ok(())
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ExportError> {
        self.need(n)?;
        let out = &self.body[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], ExportError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, ExportError> {
        Ok(self.take(1)?[0])
    }

    fn flag(&mut self) -> Result<bool, ExportError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(ExportError::Format(format!("flag byte {v} is neither 0 nor 1"))),
        }
    }

    fn u16(&mut self) -> Result<u16, ExportError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, ExportError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, ExportError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32, ExportError> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64, ExportError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn quantized(&mut self, shape: Vec<usize>) -> Result<QuantizedTensor, ExportError> {
        let scale = self.f32()?;
        let zero_point = self.u8()? as i8;
        let count = self.u32()? as usize;
        if count != element_count(&shape) {
            return Err(ExportError::Format(format!(
                "tensor of shape {shape:?} stored with {count} codes"
            )));
        }
        let codes = self.take(count)?.iter().map(|&b| b as i8).collect();
        if !(scale.is_finite() && scale > 0.0) {
            return Err(ExportError::Format(format!("invalid scale {scale}")));
        }
        Ok(QuantizedTensor {
            shape,
            scale,
            zero_point,
            codes,
        })
    }

    fn end(&self) -> Result<(), ExportError> {
        if self.pos != self.body.len() {
            return Err(ExportError::Format(format!(
                "{} unexpected bytes before the checksum",
                self.body.len() - self.pos
            )));
        }
        Ok(())
    }
}
