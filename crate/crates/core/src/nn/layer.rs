use std::fmt;

use super::NnError;
use crate::tensor::{element_count, Tensor};

/// The four layer kinds the split topologies need.
///
/// Convolutions use valid padding, stride 1 and no dilation, on rank-3
/// `[channels, height, width]` inputs (there is no batch dimension).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    FullyConnected {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
    },
    Relu,
    Flatten,
}

impl LayerKind {
    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerKind::FullyConnected { inputs, outputs } => vec![outputs, inputs],
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
            } => vec![out_channels, in_channels, kernel_h, kernel_w],
            LayerKind::Relu | LayerKind::Flatten => Vec::new(),
        }
    }

    pub fn bias_shape(&self) -> Vec<usize> {
        match *self {
            LayerKind::FullyConnected { outputs, .. } => vec![outputs],
            LayerKind::Conv2d { out_channels, .. } => vec![out_channels],
            LayerKind::Relu | LayerKind::Flatten => Vec::new(),
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerKind::FullyConnected { .. } | LayerKind::Conv2d { .. }
        )
    }

    /// Number of inputs feeding one output unit, used for weight init.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerKind::FullyConnected { inputs, .. } => inputs,
            LayerKind::Conv2d {
                in_channels,
                kernel_h,
                kernel_w,
                ..
            } => in_channels * kernel_h * kernel_w,
            LayerKind::Relu | LayerKind::Flatten => 0,
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        match *self {
            LayerKind::FullyConnected { inputs, outputs } => {
                if input != [inputs] {
                    return Err(self.mismatch(vec![inputs], input));
                }
                Ok(vec![outputs])
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
            } => {
                if input.len() != 3
                    || input[0] != in_channels
                    || input[1] < kernel_h
                    || input[2] < kernel_w
                {
                    return Err(self.mismatch(vec![in_channels, kernel_h, kernel_w], input));
                }
                Ok(vec![
                    out_channels,
                    input[1] - kernel_h + 1,
                    input[2] - kernel_w + 1,
                ])
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::Flatten => Ok(vec![element_count(input)]),
        }
    }

    fn mismatch(&self, expected: Vec<usize>, actual: &[usize]) -> NnError {
        NnError::ShapeMismatch {
            layer: self.to_string(),
            expected,
            actual: actual.to_vec(),
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerKind::FullyConnected { inputs, outputs } => write!(f, "FC({inputs}->{outputs})"),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
            } => write!(f, "Conv2d({in_channels}->{out_channels}, {kernel_h}x{kernel_w})"),
            LayerKind::Relu => f.write_str("ReLU"),
            LayerKind::Flatten => f.write_str("Flatten"),
        }
    }
}

/// A layer together with its parameters.
///
/// Parameter-free layers carry empty weight and bias tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    kind: LayerKind,
    weights: Tensor,
    bias: Tensor,
}

/// Activations retained from the forward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    input: Tensor,
}

impl Cache {
    pub fn new(input: Tensor) -> Self {
        Self { input }
    }

    pub fn input(&self) -> &Tensor {
        &self.input
    }
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

impl Layer {
    /// A layer of `kind` with zero-valued parameters.
    pub fn new(kind: LayerKind) -> Self {
        let (weights, bias) = if kind.has_params() {
            (
                Tensor::zeros(&kind.weight_shape()),
                Tensor::zeros(&kind.bias_shape()),
            )
        } else {
            (Tensor::empty(), Tensor::empty())
        };
        Self {
            kind,
            weights,
            bias,
        }
    }

    pub fn with_params(kind: LayerKind, weights: Tensor, bias: Tensor) -> Result<Self, NnError> {
        let mut layer = Self::new(kind);
        layer.set_params(weights, bias)?;
        Ok(layer)
    }

    pub fn fully_connected(inputs: usize, outputs: usize) -> Self {
        Self::new(LayerKind::FullyConnected { inputs, outputs })
    }

    pub fn conv2d(in_channels: usize, out_channels: usize, kernel_h: usize, kernel_w: usize) -> Self {
        Self::new(LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
        })
    }

    pub fn relu() -> Self {
        Self::new(LayerKind::Relu)
    }

    pub fn flatten() -> Self {
        Self::new(LayerKind::Flatten)
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn params_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.weights, &mut self.bias)
    }

    pub fn set_params(&mut self, weights: Tensor, bias: Tensor) -> Result<(), NnError> {
        if !self.kind.has_params() {
            if !weights.is_empty() || !bias.is_empty() {
                return Err(NnError::ParamMismatch {
                    layer: self.kind.to_string(),
                    expected: Vec::new(),
                    actual: if weights.is_empty() {
                        bias.shape().to_vec()
                    } else {
                        weights.shape().to_vec()
                    },
                });
            }
            return Ok(());
        }
        for (given, expected) in [
            (&weights, self.kind.weight_shape()),
            (&bias, self.kind.bias_shape()),
        ] {
            if given.shape() != expected.as_slice() {
                return Err(NnError::ParamMismatch {
                    layer: self.kind.to_string(),
                    expected,
                    actual: given.shape().to_vec(),
                });
            }
        }
        self.weights = weights;
        self.bias = bias;
        Ok(())
    }

    pub fn param_count(&self, include_bias: bool) -> usize {
        self.weights.len() + if include_bias { self.bias.len() } else { 0 }
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Cache), NnError> {
        let output = self.infer(input)?;
        Ok((output, Cache::new(input.clone())))
    }

    /// Forward pass without retaining a cache.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor, NnError> {
        let out_shape = self.kind.output_shape(input.shape())?;
        let output = match self.kind {
            LayerKind::FullyConnected { inputs, outputs } => {
                let x = input.data();
                let w = self.weights.data();
                let b = self.bias.data();
                let mut out = vec![0.0f32; outputs];
                for (o, slot) in out.iter_mut().enumerate() {
                    *slot = dot(&w[o * inputs..(o + 1) * inputs], x) + b[o];
                }
                Tensor::new(out_shape, out)?
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
            } => {
                let (h, w) = (input.shape()[1], input.shape()[2]);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let x = input.data();
                let k = self.weights.data();
                let b = self.bias.data();
                let mut out = vec![0.0f32; out_channels * oh * ow];
                for oc in 0..out_channels {
                    let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
                    for ic in 0..in_channels {
                        let kbase = (oc * in_channels + ic) * kernel_h * kernel_w;
                        let xbase = ic * h * w;
                        for i in 0..kernel_h {
                            for j in 0..kernel_w {
                                let kv = k[kbase + i * kernel_w + j];
                                for y in 0..oh {
                                    let xs = &x[xbase + (y + i) * w + j..][..ow];
                                    for (o, xv) in plane[y * ow..(y + 1) * ow].iter_mut().zip(xs) {
                                        *o += kv * xv;
                                    }
                                }
                            }
                        }
                    }
                    plane.iter_mut().for_each(|o| *o += b[oc]);
                }
                Tensor::new(out_shape, out)?
            }
            LayerKind::Relu => Tensor::new(
                out_shape,
                input.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            )?,
            LayerKind::Flatten => input.clone().reshape(&out_shape)?,
        };
        Ok(output)
    }

    pub fn backward(&self, cache: &Cache, grad_out: &Tensor) -> Result<LayerGrads, NnError> {
        let input = cache.input();
        let out_shape = self.kind.output_shape(input.shape())?;
        if grad_out.shape() != out_shape.as_slice() {
            return Err(NnError::ShapeMismatch {
                layer: format!("{} (gradient)", self.kind),
                expected: out_shape,
                actual: grad_out.shape().to_vec(),
            });
        }
        match self.kind {
            LayerKind::FullyConnected { inputs, outputs } => {
                let x = input.data();
                let g = grad_out.data();
                let w = self.weights.data();
                let mut grad_w = vec![0.0f32; outputs * inputs];
                let mut grad_in = vec![0.0f32; inputs];
                for o in 0..outputs {
                    let go = g[o];
                    let row = &w[o * inputs..(o + 1) * inputs];
                    let grow = &mut grad_w[o * inputs..(o + 1) * inputs];
                    for ((gw, xi), (gi, wi)) in grow
                        .iter_mut()
                        .zip(x)
                        .zip(grad_in.iter_mut().zip(row))
                    {
                        *gw = go * xi;
                        *gi += wi * go;
                    }
                }
                Ok(LayerGrads {
                    input: Tensor::new(input.shape().to_vec(), grad_in)?,
                    weights: Tensor::new(self.kind.weight_shape(), grad_w)?,
                    bias: Tensor::new(vec![outputs], g.to_vec())?,
                })
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
            } => {
                let (h, w) = (input.shape()[1], input.shape()[2]);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let x = input.data();
                let k = self.weights.data();
                let g = grad_out.data();
                let mut grad_k = vec![0.0f32; k.len()];
                let mut grad_b = vec![0.0f32; out_channels];
                let mut grad_in = vec![0.0f32; x.len()];
                let mut lanes = vec![0.0f32; ow];
                for oc in 0..out_channels {
                    let plane = &g[oc * oh * ow..(oc + 1) * oh * ow];
                    grad_b[oc] = plane.iter().sum();
                    for ic in 0..in_channels {
                        let kbase = (oc * in_channels + ic) * kernel_h * kernel_w;
                        let xbase = ic * h * w;
                        for i in 0..kernel_h {
                            for j in 0..kernel_w {
                                let kw = k[kbase + i * kernel_w + j];
                                lanes.fill(0.0);
                                for y in 0..oh {
                                    let xrow = xbase + (y + i) * w + j;
                                    let grow = &plane[y * ow..(y + 1) * ow];
                                    let xs = &x[xrow..xrow + ow];
                                    for ((l, gv), xv) in lanes.iter_mut().zip(grow).zip(xs) {
                                        *l += gv * xv;
                                    }
                                    for (gi, gv) in grad_in[xrow..xrow + ow].iter_mut().zip(grow) {
                                        *gi += kw * gv;
                                    }
                                }
                                grad_k[kbase + i * kernel_w + j] = lanes.iter().sum();
                            }
                        }
                    }
                }
                Ok(LayerGrads {
                    input: Tensor::new(input.shape().to_vec(), grad_in)?,
                    weights: Tensor::new(self.kind.weight_shape(), grad_k)?,
                    bias: Tensor::new(vec![out_channels], grad_b)?,
                })
            }
            LayerKind::Relu => {
                let grad_in = input
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                Ok(LayerGrads {
                    input: Tensor::new(input.shape().to_vec(), grad_in)?,
                    weights: Tensor::empty(),
                    bias: Tensor::empty(),
                })
            }
            LayerKind::Flatten => Ok(LayerGrads {
                input: grad_out.clone().reshape(input.shape())?,
                weights: Tensor::empty(),
                bias: Tensor::empty(),
            }),
        }
    }
}

/// Dot product with eight independent partial sums.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (xa, xb) in ca.zip(cb) {
        for ((l, x), y) in lanes.iter_mut().zip(xa).zip(xb) {
            *l += x * y;
        }
    }
    lanes.iter().sum::<f32>() + tail
}
