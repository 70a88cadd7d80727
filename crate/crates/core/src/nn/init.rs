use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Layer;
use crate::tensor::Tensor;

/// Seeded weight initializer.
///
/// Draws each weight from `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))` using a
/// ChaCha8 stream seeded with `ChaCha8Rng::seed_from_u64(seed)` and rand's
/// `random_range` float sampling. Layers are visited in order and weights
/// are drawn in row-major order. Biases start at zero.
pub struct WeightInit {
    rng: ChaCha8Rng,
}

impl WeightInit {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn fill(&mut self, layer: &mut Layer) {
        let kind = layer.kind();
        if !kind.has_params() {
            return;
        }
        let bound = (6.0 / kind.fan_in() as f64).sqrt() as f32;
        let shape = kind.weight_shape();
        let data: Vec<f32> = (0..shape.iter().product::<usize>())
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        let weights = Tensor::new(shape, data).expect("shape built from kind");
        layer
            .set_params(weights, Tensor::zeros(&kind.bias_shape()))
            .expect("shapes built from kind");
    }
}

pub fn init_layers(layers: &mut [Layer], seed: u64) {
    let mut init = WeightInit::new(seed);
    for layer in layers {
        init.fill(layer);
    }
}
