//! Binary frames exchanged between client devices and the server.
//!
//! Every frame is
//!
//! ```text
//! "SFL1" | tag u8 | round u32 | client_id u16 | payload_len u32 | payload | crc32 u32
//! ```
//!
//! little-endian throughout, with the CRC-32 (IEEE) covering every byte
//! before it. Tensors inside payloads are encoded as a blob:
//! `rank u8 | dims u32 * rank | f32 * prod(dims)`.
//! See `docs/protocol.md` for the per-message payload layouts.

pub mod transport;

use thiserror::Error;

use crate::models::ModelName;
use crate::tensor::{element_count, Tensor};

pub use transport::{memory_pair, Link, MemoryTransport, TcpTransport, TrafficStats, Transport, TransportError};

pub const MAGIC: [u8; 4] = *b"SFL1";
/// Bytes before the payload.
pub const HEADER_LEN: usize = 15;
/// Header plus CRC footer.
pub const FRAME_OVERHEAD: usize = HEADER_LEN + 4;
/// Largest payload a frame may carry.
pub const MAX_PAYLOAD: usize = 1 << 31;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("CRC mismatch: frame says {expected:#010x}, computed {computed:#010x}")]
    Crc { expected: u32, computed: u32 },
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("tensor dims {dims:?} do not match {available} payload bytes")]
    DimMismatch { dims: Vec<u32>, available: usize },
    #[error("payload of {0} bytes exceeds the 2^31-byte limit")]
    PayloadTooLarge(usize),
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("malformed {tag} payload: {detail}")]
    Malformed { tag: MessageType, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    Hello = 1,
    TrainConfig = 2,
    ModelPush = 3,
    Activation = 4,
    Gradient = 5,
    ModelUpload = 6,
    RoundDone = 7,
    Bye = 8,
}

impl MessageType {
    pub fn from_tag(tag: u8) -> Option<Self> {
        use MessageType::*;
        Some(match tag {
            1 => Hello,
            2 => TrainConfig,
            3 => ModelPush,
            4 => Activation,
            5 => Gradient,
            6 => ModelUpload,
            7 => RoundDone,
            8 => Bye,
            _ => return None,
        })
    }
}

impl std::fmt::Display for MessageType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::Debug::fmt(self, f)
    }
}

/// Training parameters the server hands each client after HELLO.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionParams {
    pub model: ModelName,
    pub epochs: u32,
    pub learning_rate: f32,
    pub momentum: f32,
    pub seed: u64,
    /// Whether client halves are averaged and pushed back each epoch.
    pub aggregate: bool,
    pub steps_per_epoch: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    /// Client announces itself and the size of its private shard.
    Hello { num_samples: u32 },
    TrainConfig(SessionParams),
    /// Server sends the synchronized client-half parameters.
    ModelPush(Vec<Tensor>),
    /// Client-half output for one sample, with its label.
    Activation { label: u8, tensor: Tensor },
    /// Loss gradient with respect to the activation.
    Gradient(Tensor),
    /// Client returns its client-half parameters at the end of an epoch.
    ModelUpload(Vec<Tensor>),
    /// Server closes an epoch, reporting validation accuracy.
    RoundDone { val_accuracy: f32 },
    Bye,
}

impl Body {
    pub fn message_type(&self) -> MessageType {
        match self {
            Body::Hello { .. } => MessageType::Hello,
            Body::TrainConfig(_) => MessageType::TrainConfig,
            Body::ModelPush(_) => MessageType::ModelPush,
            Body::Activation { .. } => MessageType::Activation,
            Body::Gradient(_) => MessageType::Gradient,
            Body::ModelUpload(_) => MessageType::ModelUpload,
            Body::RoundDone { .. } => MessageType::RoundDone,
            Body::Bye => MessageType::Bye,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub round: u32,
    pub client_id: u16,
    pub body: Body,
}

impl WireMessage {
    pub fn new(round: u32, client_id: u16, body: Body) -> Self {
        Self {
            round,
            client_id,
            body,
        }
    }

    pub fn message_type(&self) -> MessageType {
        self.body.message_type()
    }
}

/// Size of a tensor blob on the wire.
pub fn tensor_blob_len(shape: &[usize]) -> usize {
    1 + 4 * shape.len() + 4 * element_count(shape)
}

pub fn encode(msg: &WireMessage) -> Result<Vec<u8>, ProtocolError> {
    let payload = encode_payload(&msg.body)?;
    if payload.len() > MAX_PAYLOAD {
        return Err(ProtocolError::PayloadTooLarge(payload.len()));
    }
    let mut frame = Vec::with_capacity(FRAME_OVERHEAD + payload.len());
    frame.extend_from_slice(&MAGIC);
    frame.push(msg.message_type() as u8);
    frame.extend_from_slice(&msg.round.to_le_bytes());
    frame.extend_from_slice(&msg.client_id.to_le_bytes());
    frame.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    frame.extend_from_slice(&payload);
    let crc = crc32fast::hash(&frame);
    frame.extend_from_slice(&crc.to_le_bytes());
    Ok(frame)
}

fn encode_payload(body: &Body) -> Result<Vec<u8>, ProtocolError> {
    let mut out = Vec::new();
    match body {
        Body::Hello { num_samples } => out.extend_from_slice(&num_samples.to_le_bytes()),
        Body::TrainConfig(p) => {
            let name = p.model.as_str().as_bytes();
            out.push(name.len() as u8);
            out.extend_from_slice(name);
            out.extend_from_slice(&p.epochs.to_le_bytes());
            out.extend_from_slice(&p.learning_rate.to_le_bytes());
            out.extend_from_slice(&p.momentum.to_le_bytes());
            out.extend_from_slice(&p.seed.to_le_bytes());
            out.push(p.aggregate as u8);
            out.extend_from_slice(&p.steps_per_epoch.to_le_bytes());
        }
        Body::ModelPush(tensors) | Body::ModelUpload(tensors) => {
            let count = u16::try_from(tensors.len()).map_err(|_| ProtocolError::Malformed {
                tag: body.message_type(),
                detail: format!("{} tensors exceed the u16 count field", tensors.len()),
            })?;
            out.extend_from_slice(&count.to_le_bytes());
            for t in tensors {
                write_tensor(&mut out, t, body.message_type())?;
            }
        }
        Body::Activation { label, tensor } => {
            out.push(*label);
            write_tensor(&mut out, tensor, MessageType::Activation)?;
        }
        Body::Gradient(tensor) => write_tensor(&mut out, tensor, MessageType::Gradient)?,
        Body::RoundDone { val_accuracy } => out.extend_from_slice(&val_accuracy.to_le_bytes()),
        Body::Bye => {}
    }
    Ok(out)
}

fn write_tensor(out: &mut Vec<u8>, t: &Tensor, tag: MessageType) -> Result<(), ProtocolError> {
    let rank = u8::try_from(t.rank()).map_err(|_| ProtocolError::Malformed {
        tag,
        detail: format!("rank {} exceeds 255", t.rank()),
    })?;
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| ProtocolError::Malformed {
            tag,
            detail: format!("dimension {d} exceeds u32"),
        })?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.reserve(4 * t.len());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Validates a frame header and returns the total frame length it announces.
pub fn frame_len(header: &[u8]) -> Result<usize, ProtocolError> {
    if header.len() < HEADER_LEN {
        return Err(ProtocolError::Truncated {
            needed: HEADER_LEN,
            available: header.len(),
        });
    }
    let magic: [u8; 4] = header[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(ProtocolError::BadMagic(magic));
    }
    let payload_len = u32::from_le_bytes(header[11..15].try_into().expect("4 bytes")) as usize;
    if payload_len > MAX_PAYLOAD {
        return Err(ProtocolError::PayloadTooLarge(payload_len));
    }
    Ok(FRAME_OVERHEAD + payload_len)
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode(bytes: &[u8]) -> Result<WireMessage, ProtocolError> {
    let (msg, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(ProtocolError::TrailingBytes(bytes.len() - used));
    }
    Ok(msg)
}

/// Decodes the frame at the start of `bytes`, returning it and its length.
pub fn decode_prefix(bytes: &[u8]) -> Result<(WireMessage, usize), ProtocolError> {
    let total = frame_len(bytes)?;
    if bytes.len() < total {
        return Err(ProtocolError::Truncated {
            needed: total,
            available: bytes.len(),
        });
    }
    let body_end = total - 4;
    let expected = u32::from_le_bytes(bytes[body_end..total].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..body_end]);
    if expected != computed {
        return Err(ProtocolError::Crc { expected, computed });
    }
    let tag = MessageType::from_tag(bytes[4]).ok_or(ProtocolError::UnknownType(bytes[4]))?;
    let round = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes"));
    let client_id = u16::from_le_bytes(bytes[9..11].try_into().expect("2 bytes"));
    let body = decode_payload(tag, &bytes[HEADER_LEN..body_end])?;
    Ok((WireMessage::new(round, client_id, body), total))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    tag: MessageType,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.buf.len() - self.pos < n {
            return Err(self.malformed(format!(
                "needs {n} more bytes at offset {}, {} remain",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ProtocolError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, ProtocolError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32, ProtocolError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> Result<Tensor, ProtocolError> {
        let rank = self.u8()? as usize;
        let dims: Vec<u32> = (0..rank).map(|_| self.u32()).collect::<Result<_, _>>()?;
        let count = if dims.is_empty() {
            Some(0)
        } else {
            dims.iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        };
        let bytes = count.and_then(|c| c.checked_mul(4));
        let bytes = match bytes {
            Some(b) if b <= self.remaining() => b,
            _ => {
                return Err(ProtocolError::DimMismatch {
                    dims,
                    available: self.remaining(),
                })
            }
        };
        let data = self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let shape = dims.iter().map(|&d| d as usize).collect();
        Tensor::new(shape, data).map_err(|e| self.malformed(e.to_string()))
    }

    fn finish(&self) -> Result<(), ProtocolError> {
        if self.remaining() != 0 {
            return Err(self.malformed(format!("{} unread payload bytes", self.remaining())));
        }
        Ok(())
    }

    fn malformed(&self, detail: String) -> ProtocolError {
        ProtocolError::Malformed {
            tag: self.tag,
            detail,
        }
    }
}

fn decode_payload(tag: MessageType, payload: &[u8]) -> Result<Body, ProtocolError> {
    let mut r = Reader {
        buf: payload,
        pos: 0,
        tag,
    };
    let body = match tag {
        MessageType::Hello => Body::Hello {
            num_samples: r.u32()?,
        },
        MessageType::TrainConfig => {
            let len = r.u8()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| r.malformed(e.to_string()))?;
            let model = name.parse().map_err(|e: crate::models::ModelError| r.malformed(e.to_string()))?;
            let epochs = r.u32()?;
            let learning_rate = r.f32()?;
            let momentum = r.f32()?;
            let seed = r.u64()?;
            let aggregate = match r.u8()? {
                0 => false,
                1 => true,
                other => return Err(r.malformed(format!("aggregate flag {other}"))),
            };
            let steps_per_epoch = r.u32()?;
            Body::TrainConfig(SessionParams {
                model,
                epochs,
                learning_rate,
                momentum,
                seed,
                aggregate,
                steps_per_epoch,
            })
        }
        MessageType::ModelPush | MessageType::ModelUpload => {
            let count = r.u16()? as usize;
            let tensors = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>, _>>()?;
            if tag == MessageType::ModelPush {
                Body::ModelPush(tensors)
            } else {
                Body::ModelUpload(tensors)
            }
        }
        MessageType::Activation => {
            let label = r.u8()?;
            let tensor = r.tensor()?;
            if r.remaining() != 0 {
                return Err(ProtocolError::DimMismatch {
                    dims: tensor.shape().iter().map(|&d| d as u32).collect(),
                    available: tensor.len() * 4 + r.remaining(),
                });
            }
            Body::Activation { label, tensor }
        }
        MessageType::Gradient => {
            let tensor = r.tensor()?;
            if r.remaining() != 0 {
                return Err(ProtocolError::DimMismatch {
                    dims: tensor.shape().iter().map(|&d| d as u32).collect(),
                    available: tensor.len() * 4 + r.remaining(),
                });
            }
            Body::Gradient(tensor)
        }
        MessageType::RoundDone => Body::RoundDone {
            val_accuracy: r.f32()?,
        },
        MessageType::Bye => Body::Bye,
    };
    r.finish()?;
    Ok(body)
}
