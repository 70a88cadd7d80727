//! Analytic gradients against central finite differences.
//!
//! Each layer is checked on the scalar objective `L = sum(g * layer(x))` for
//! a random upstream gradient `g`. Errors are measured per gradient tensor as
//! `|analytic - numeric| / max(|analytic|, |numeric|)` in the Euclidean norm.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfl_core::nn::{softmax_cross_entropy, Layer, LayerKind};
use sfl_core::Tensor;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn relative_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (f64::from(a) - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let a_norm = analytic.iter().map(|&a| f64::from(a).powi(2)).sum::<f64>().sqrt();
    let n_norm = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = a_norm.max(n_norm);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn objective(layer: &Layer, x: &Tensor, g: &Tensor) -> f64 {
    let out = layer.infer(x).unwrap();
    out.data().iter().zip(g.data()).map(|(&o, &g)| f64::from(o) * f64::from(g)).sum()
}

/// Central differences of `f` with respect to every element of `values`.
pub fn numeric_grad(values: &mut [f32], eps: f32, mut f: impl FnMut(&[f32]) -> f64) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let orig = values[i];
            values[i] = orig + eps;
            let plus = f(values);
            values[i] = orig - eps;
            let minus = f(values);
            values[i] = orig;
            (plus - minus) / (2.0 * f64::from(eps))
        })
        .collect()
}

/// Checks input, weight and bias gradients of one layer instance.
pub fn check_layer(layer: &Layer, x: &Tensor, rng: &mut ChaCha8Rng, eps: f32) -> f64 {
    let (out, cache) = layer.forward(x).unwrap();
    let g = random_tensor(rng, out.shape());
    let grads = layer.backward(&cache, &g).unwrap();

    let mut xs = x.data().to_vec();
    let num_x = numeric_grad(&mut xs, eps, |v| {
        objective(layer, &Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap(), &g)
    });
    let mut worst = relative_error(grads.input.data(), &num_x);

    if layer.kind().has_params() {
        let (w, b) = (layer.weights().clone(), layer.bias().clone());
        let mut ws = w.data().to_vec();
        let num_w = numeric_grad(&mut ws, eps, |v| {
            let l = Layer::with_params(layer.kind(), Tensor::new(w.shape().to_vec(), v.to_vec()).unwrap(), b.clone())
                .unwrap();
            objective(&l, x, &g)
        });
        let mut bs = b.data().to_vec();
        let num_b = numeric_grad(&mut bs, eps, |v| {
            let l = Layer::with_params(layer.kind(), w.clone(), Tensor::new(b.shape().to_vec(), v.to_vec()).unwrap())
                .unwrap();
            objective(&l, x, &g)
        });
        worst = worst
            .max(relative_error(grads.weights.data(), &num_w))
            .max(relative_error(grads.bias.data(), &num_b));
    }
    worst
}

fn random_params(rng: &mut ChaCha8Rng, kind: LayerKind) -> Layer {
    let w = random_tensor(rng, &kind.weight_shape());
    let b = random_tensor(rng, &kind.bias_shape());
    Layer::with_params(kind, w, b).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    FullyConnected,
    Conv2d,
    Relu,
    SoftmaxCrossEntropy,
}

impl Op {
    pub const ALL: [Op; 4] = [Op::FullyConnected, Op::Conv2d, Op::Relu, Op::SoftmaxCrossEntropy];
}

/// Relative gradient error of `instances` random instances of `op`.
pub fn errors(op: Op, instances: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..instances).map(|_| instance_error(op, &mut rng)).collect()
}

fn instance_error(op: Op, rng: &mut ChaCha8Rng) -> f64 {
    match op {
        Op::FullyConnected => {
            let kind = LayerKind::FullyConnected {
                inputs: rng.random_range(1..12),
                outputs: rng.random_range(1..8),
            };
            let layer = random_params(rng, kind);
            let x = random_tensor(rng, &kind.weight_shape()[1..]);
            check_layer(&layer, &x, rng, 1e-2)
        }
        Op::Conv2d => {
            let (in_channels, kernel_h, kernel_w) =
                (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
            let kind = LayerKind::Conv2d {
                in_channels,
                out_channels: rng.random_range(1..4),
                kernel_h,
                kernel_w,
            };
            let layer = random_params(rng, kind);
            let shape = [in_channels, kernel_h + rng.random_range(0..5), kernel_w + rng.random_range(0..5)];
            let x = random_tensor(rng, &shape);
            check_layer(&layer, &x, rng, 1e-2)
        }
        Op::Relu => {
            let n = rng.random_range(1..40);
            // Keep inputs away from the kink so the finite difference is exact.
            let data = (0..n)
                .map(|_| {
                    let mag = rng.random_range(0.05f32..1.0);
                    if rng.random_bool(0.5) {
                        mag
                    } else {
                        -mag
                    }
                })
                .collect();
            let x = Tensor::new(vec![n], data).unwrap();
            check_layer(&Layer::relu(), &x, rng, 1e-3)
        }
        Op::SoftmaxCrossEntropy => {
            let classes = rng.random_range(2..10);
            let label = rng.random_range(0..classes);
            let scale = rng.random_range(0.5f32..4.0);
            let logits: Vec<f32> = (0..classes).map(|_| scale * rng.random_range(-1.0f32..1.0)).collect();
            let (_, grad) = softmax_cross_entropy(&Tensor::from_vec(logits.clone()), label).unwrap();
            let mut values = logits;
            let numeric = numeric_grad(&mut values, 1e-2, |v| {
                f64::from(softmax_cross_entropy(&Tensor::from_vec(v.to_vec()), label).unwrap().0)
            });
            relative_error(grad.data(), &numeric)
        }
    }
}
