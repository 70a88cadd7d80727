//! A small deterministic neural-network engine.
//!
//! Batch size is fixed at one: every tensor flowing through a layer is a
//! single sample. Layer stacks are plain `[Layer]` slices; the free
//! functions here run them forward and backward and expose their
//! parameters in a fixed order (weights then bias, layer by layer,
//! skipping parameter-free layers) that optimizers and serializers share.

mod init;
mod layer;
mod loss;
mod optim;

use thiserror::Error;

pub use init::{init_layers, WeightInit};
pub use layer::{Cache, Layer, LayerGrads, LayerKind};
pub use loss::softmax_cross_entropy;
pub use optim::SgdState;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("{layer}: expected input shape compatible with {expected:?}, got {actual:?}")]
    ShapeMismatch {
        layer: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("{layer}: expected parameter shape {expected:?}, got {actual:?}")]
    ParamMismatch {
        layer: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} elements but data has {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("optimizer tracks {expected} tensors, got {params} parameters and {grads} gradients")]
    ParamCount {
        expected: usize,
        params: usize,
        grads: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("cache count {caches} does not match {layers} layers")]
    CacheCount { caches: usize, layers: usize },
    #[error("invalid hyperparameter: {0}")]
    Hyperparameter(String),
}

/// Runs `layers` in order, keeping one cache per layer.
pub fn forward(layers: &[Layer], input: &Tensor) -> Result<(Tensor, Vec<Cache>), NnError> {
    let mut caches = Vec::with_capacity(layers.len());
    let mut x = input.clone();
    for layer in layers {
        let (y, cache) = layer.forward(&x)?;
        caches.push(cache);
        x = y;
    }
    Ok((x, caches))
}

/// Inference-only forward pass.
pub fn infer(layers: &[Layer], input: &Tensor) -> Result<Tensor, NnError> {
    let mut x = input.clone();
    for layer in layers {
        x = layer.infer(&x)?;
    }
    Ok(x)
}

/// Back-propagates `grad_out` through `layers`, returning the gradient with
/// respect to the stack's input and the per-layer gradients in layer order.
/// Subnormal values in the gradients passed between layers are flushed to zero.
pub fn backward(
    layers: &[Layer],
    caches: &[Cache],
    grad_out: &Tensor,
) -> Result<(Tensor, Vec<LayerGrads>), NnError> {
    if caches.len() != layers.len() {
        return Err(NnError::CacheCount {
            caches: caches.len(),
            layers: layers.len(),
        });
    }
    let mut grads = Vec::with_capacity(layers.len());
    let mut g = grad_out.clone();
    for (layer, cache) in layers.iter().zip(caches).rev() {
        let mut lg = layer.backward(cache, &g)?;
        flush_subnormals(lg.input.data_mut());
        g = lg.input.clone();
        grads.push(lg);
    }
    grads.reverse();
    Ok((g, grads))
}

/// Replaces subnormal values with zero.
pub fn flush_subnormals(values: &mut [f32]) {
    for v in values {
        if v.abs() < f32::MIN_POSITIVE {
            *v = 0.0;
        }
    }
}

/// Output shape of the stack for a given input shape.
pub fn output_shape(layers: &[Layer], input: &[usize]) -> Result<Vec<usize>, NnError> {
    layers
        .iter()
        .try_fold(input.to_vec(), |shape, layer| layer.kind().output_shape(&shape))
}

pub fn param_shapes(layers: &[Layer]) -> Vec<Vec<usize>> {
    params(layers).map(|t| t.shape().to_vec()).collect()
}

pub fn params(layers: &[Layer]) -> impl Iterator<Item = &Tensor> {
    layers
        .iter()
        .filter(|l| l.kind().has_params())
        .flat_map(|l| [l.weights(), l.bias()])
}

pub fn params_mut(layers: &mut [Layer]) -> Vec<&mut Tensor> {
    let mut out = Vec::new();
    for layer in layers.iter_mut().filter(|l| l.kind().has_params()) {
        let (w, b) = layer.params_mut();
        out.push(w);
        out.push(b);
    }
    out
}

/// Parameter gradients in the same order as [`params`].
pub fn param_grads<'a>(layers: &[Layer], grads: &'a [LayerGrads]) -> Vec<&'a Tensor> {
    layers
        .iter()
        .zip(grads)
        .filter(|(l, _)| l.kind().has_params())
        .flat_map(|(_, g)| [&g.weights, &g.bias])
        .collect()
}

/// Moves the parameter gradients out of `grads`, in [`params`] order.
pub fn into_param_grads(layers: &[Layer], grads: Vec<LayerGrads>) -> Vec<Tensor> {
    layers
        .iter()
        .zip(grads)
        .filter(|(l, _)| l.kind().has_params())
        .flat_map(|(_, g)| [g.weights, g.bias])
        .collect()
}

/// Builds an optimizer whose velocity buffers mirror `layers`' parameters.
pub fn sgd_for(layers: &[Layer], learning_rate: f32, momentum: f32) -> Result<SgdState, NnError> {
    let shapes = param_shapes(layers);
    SgdState::new(learning_rate, momentum, shapes.iter().map(Vec::as_slice))
}

/// Replaces every parameter of `layers` with the given tensors, in [`params`] order.
pub fn load_params(layers: &mut [Layer], tensors: &[Tensor]) -> Result<(), NnError> {
    let expected = params(layers).count();
    if tensors.len() != expected {
        return Err(NnError::ParamCount {
            expected,
            params: tensors.len(),
            grads: tensors.len(),
        });
    }
    let mut it = tensors.iter();
    for layer in layers.iter_mut().filter(|l| l.kind().has_params()) {
        let w = it.next().cloned().unwrap_or_else(Tensor::empty);
        let b = it.next().cloned().unwrap_or_else(Tensor::empty);
        layer.set_params(w, b)?;
    }
    Ok(())
}
