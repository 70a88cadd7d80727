//! The three split topologies and their client/server halves.
//!
//! | model        | client              | server                                        |
//! |--------------|---------------------|-----------------------------------------------|
//! | `model1_mlp` | FC 650->25, ReLU    | FC 25->7                                      |
//! | `model2_cnn` | Conv 1->12 3x3, ReLU| Conv 12->16 3x3, ReLU, Flatten, FC 6624->128, ReLU, FC 128->7 |
//! | `model3_cnn` | Conv 1->12 3x3, ReLU| Conv 12->30 3x3, ReLU, Flatten, FC 12420->256, ReLU, FC 256->7 |
//!
//! CNN inputs are `[1, 50, 13]` (frames by coefficients); the MLP takes the
//! same map flattened to `[650]`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::nn::{self, Layer, NnError};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 7;
pub const FEATURE_FRAMES: usize = 50;
pub const FEATURE_COEFFS: usize = 13;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unknown model {0:?}; expected model1_mlp, model2_cnn or model3_cnn")]
    UnknownName(String),
    #[error("client half outputs {client:?} but server half expects {server}")]
    IncompatibleHalves { client: Vec<usize>, server: String },
    #[error("split index {split} invalid for {layers} layers")]
    SplitIndex { split: usize, layers: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelName {
    Model1Mlp,
    Model2Cnn,
    Model3Cnn,
}

impl ModelName {
    pub const ALL: [ModelName; 3] = [ModelName::Model1Mlp, ModelName::Model2Cnn, ModelName::Model3Cnn];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelName::Model1Mlp => "model1_mlp",
            ModelName::Model2Cnn => "model2_cnn",
            ModelName::Model3Cnn => "model3_cnn",
        }
    }

    pub fn is_cnn(&self) -> bool {
        !matches!(self, ModelName::Model1Mlp)
    }

    /// 0.0005 for the MLP, 0.005 for the CNNs.
    pub fn default_learning_rate(&self) -> f32 {
        if self.is_cnn() {
            0.005
        } else {
            0.0005
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        if self.is_cnn() {
            vec![1, FEATURE_FRAMES, FEATURE_COEFFS]
        } else {
            vec![FEATURE_FRAMES * FEATURE_COEFFS]
        }
    }
}

impl fmt::Display for ModelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelName {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelName::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| ModelError::UnknownName(s.to_string()))
    }
}

/// Parameter totals for a model and each of its halves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub client: usize,
    pub server: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.client + self.server
    }
}

/// A full layer stack with the index where the client half ends.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: ModelName,
    pub layers: Vec<Layer>,
    pub split_index: usize,
    pub input_shape: Vec<usize>,
}

/// A model cut into its on-device and server halves.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitModel {
    pub name: ModelName,
    pub input_shape: Vec<usize>,
    pub client: Vec<Layer>,
    pub server: Vec<Layer>,
}

/// Anything that maps a `[50, 13]` feature map to class logits.
pub trait Classifier {
    fn logits(&self, features: &Tensor) -> Result<Tensor, ModelError>;
}

impl Classifier for ModelSpec {
    fn logits(&self, features: &Tensor) -> Result<Tensor, ModelError> {
        self.infer(&self.prepare_input(features)?)
    }
}

impl Classifier for SplitModel {
    fn logits(&self, features: &Tensor) -> Result<Tensor, ModelError> {
        self.infer(&features.clone().reshape(&self.input_shape)?)
    }
}

/// Builds the named topology with zero-valued parameters.
pub fn build(name: ModelName) -> ModelSpec {
    let (layers, split_index) = match name {
        ModelName::Model1Mlp => (
            vec![
                Layer::fully_connected(FEATURE_FRAMES * FEATURE_COEFFS, 25),
                Layer::relu(),
                Layer::fully_connected(25, NUM_CLASSES),
            ],
            2,
        ),
        ModelName::Model2Cnn => (cnn_layers(16, 128), 2),
        ModelName::Model3Cnn => (cnn_layers(30, 256), 2),
    };
    ModelSpec {
        name,
        layers,
        split_index,
        input_shape: name.input_shape(),
    }
}

fn cnn_layers(server_channels: usize, hidden: usize) -> Vec<Layer> {
    let (h, w) = (FEATURE_FRAMES - 4, FEATURE_COEFFS - 4);
    vec![
        Layer::conv2d(1, 12, 3, 3),
        Layer::relu(),
        Layer::conv2d(12, server_channels, 3, 3),
        Layer::relu(),
        Layer::flatten(),
        Layer::fully_connected(server_channels * h * w, hidden),
        Layer::relu(),
        Layer::fully_connected(hidden, NUM_CLASSES),
    ]
}

/// Builds the named topology with weights drawn from [`nn::WeightInit`],
/// seeded from the initialization stream of the run seed.
pub fn build_initialized(name: ModelName, seed: u64) -> ModelSpec {
    let mut spec = build(name);
    nn::init_layers(&mut spec.layers, crate::seed::derive(seed, &[crate::seed::DOMAIN_INIT]));
    spec
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.split_index == 0 || self.split_index >= self.layers.len() {
            return Err(ModelError::SplitIndex {
                split: self.split_index,
                layers: self.layers.len(),
            });
        }
        let out = nn::output_shape(&self.layers, &self.input_shape)?;
        if out != [NUM_CLASSES] {
            return Err(NnError::ShapeMismatch {
                layer: "model output".into(),
                expected: vec![NUM_CLASSES],
                actual: out,
            }
            .into());
        }
        Ok(())
    }

    pub fn split(&self) -> SplitModel {
        SplitModel {
            name: self.name,
            input_shape: self.input_shape.clone(),
            client: self.layers[..self.split_index].to_vec(),
            server: self.layers[self.split_index..].to_vec(),
        }
    }

    pub fn param_count(&self, include_bias: bool) -> ParamCount {
        let count = |layers: &[Layer]| layers.iter().map(|l| l.param_count(include_bias)).sum();
        ParamCount {
            client: count(&self.layers[..self.split_index]),
            server: count(&self.layers[self.split_index..]),
        }
    }

    /// Shape of the activation the client half sends to the server.
    pub fn client_output_shape(&self) -> Result<Vec<usize>, ModelError> {
        Ok(nn::output_shape(
            &self.layers[..self.split_index],
            &self.input_shape,
        )?)
    }

    pub fn infer(&self, input: &Tensor) -> Result<Tensor, ModelError> {
        Ok(nn::infer(&self.layers, input)?)
    }

    /// Reshapes a `[50, 13]` feature map into this model's input layout.
    pub fn prepare_input(&self, features: &Tensor) -> Result<Tensor, ModelError> {
        Ok(features.clone().reshape(&self.input_shape)?)
    }
}

impl SplitModel {
    /// Concatenates the halves back into one stack after checking that the
    /// client output feeds the server input.
    pub fn merge(&self) -> Result<ModelSpec, ModelError> {
        let client_out = nn::output_shape(&self.client, &self.input_shape)?;
        if let Err(e) = nn::output_shape(&self.server, &client_out) {
            return Err(ModelError::IncompatibleHalves {
                client: client_out,
                server: e.to_string(),
            });
        }
        let mut layers = self.client.clone();
        layers.extend(self.server.iter().cloned());
        let spec = ModelSpec {
            name: self.name,
            layers,
            split_index: self.client.len(),
            input_shape: self.input_shape.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Runs the client half then the server half.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor, ModelError> {
        let activation = nn::infer(&self.client, input)?;
        Ok(nn::infer(&self.server, &activation)?)
    }
}
