//! Training drivers: split federated learning over the wire protocol, plus
//! the federated-averaging and centralized baselines it is compared with.
//!
//! Every driver walks the same schedule. In epoch `e` each client visits its
//! shard in the permutation drawn from the `[ORDER, e]` stream for the
//! shard's length; step `s` of the epoch involves every client whose shard
//! has more than `s` samples. Clients are always processed in id order, so
//! results do not depend on thread timing.

mod baseline;
mod metrics;
mod net;
mod node;
mod sim;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::models::{Classifier, ModelError, ModelName, SplitModel};
use crate::nn::{self, Layer, NnError, SgdState};
use crate::protocol::transport::TransportError;
use crate::protocol::MessageType;
use crate::seed;
use crate::tensor::Tensor;

pub use baseline::{centralized_train, fl_train, CentralizedTrainer};
pub use metrics::{write_metrics_csv, EpochSummary, RoundMetrics, TrainingHistory, CSV_HEADER};
pub use net::{run_client, run_server, serve_listener};
pub use node::{ClientNode, ServerNode};
pub use sim::{sfl_train, Simulation, StepPosition};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0} needs more memory than a device has; federated averaging supports model1_mlp only")]
    FlModel(ModelName),
    #[error("aggregation: {0}")]
    Aggregate(String),
    #[error("client {client}: {source}")]
    Client {
        client: u16,
        #[source]
        source: TransportError,
    },
    #[error("protocol violation by {peer}: expected {expected}, {detail}")]
    Protocol {
        peer: String,
        expected: MessageType,
        detail: String,
    },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("metrics output: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Sfl,
    Fl,
    Centralized,
}

impl Scheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::Sfl => "sfl",
            Scheme::Fl => "fl",
            Scheme::Centralized => "centralized",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sfl" => Ok(Scheme::Sfl),
            "fl" => Ok(Scheme::Fl),
            "centralized" => Ok(Scheme::Centralized),
            other => Err(format!("unknown scheme {other:?}; expected sfl, fl or centralized")),
        }
    }
}

/// How SFL messages travel between the nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    InProcess,
    /// Loopback TCP with one thread per client.
    Tcp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub model: ModelName,
    pub num_clients: usize,
    pub epochs: u32,
    pub learning_rate: f32,
    pub momentum: f32,
    pub seed: u64,
    pub val_fraction: f64,
    /// Average the client halves at every epoch boundary.
    pub aggregate: bool,
    pub transport: TransportKind,
}

impl TrainingConfig {
    pub const BATCH_SIZE: usize = 1;

    /// Three epochs, momentum 0.6, a 9:1 split and the model's default learning rate.
    pub fn new(model: ModelName) -> Self {
        Self {
            model,
            num_clients: 1,
            epochs: 3,
            learning_rate: model.default_learning_rate(),
            momentum: 0.6,
            seed: 0,
            val_fraction: 0.1,
            aggregate: true,
            transport: TransportKind::InProcess,
        }
    }

    pub fn batch_size(&self) -> usize {
        Self::BATCH_SIZE
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.num_clients == 0 || self.num_clients > u16::MAX as usize {
            return Err(TrainError::Config(format!(
                "client count must be between 1 and {}, got {}",
                u16::MAX,
                self.num_clients
            )));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(TrainError::Config(format!(
                "validation fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        SgdState::new(self.learning_rate, self.momentum, [])?;
        Ok(())
    }
}

/// A trained split model and what happened on the way.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SplitModel,
    pub history: TrainingHistory,
}

/// Element-wise mean of several parameter sets.
///
/// Each element's values are sorted before summing in `f64`, so the result
/// does not depend on the order of `sets` and averaging `W` with `-W`
/// gives exactly zero.
pub fn aggregate(sets: &[Vec<Tensor>]) -> Result<Vec<Tensor>, TrainError> {
    let first = sets
        .first()
        .ok_or_else(|| TrainError::Aggregate("no parameter sets to average".into()))?;
    for (i, set) in sets.iter().enumerate() {
        if set.len() != first.len()
            || set.iter().zip(first).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(TrainError::Aggregate(format!(
                "parameter set {i} does not match the shapes of set 0"
            )));
        }
    }
    let m = sets.len() as f64;
    let mut column = Vec::with_capacity(sets.len());
    Ok((0..first.len())
        .map(|t| {
            let data = (0..first[t].len())
                .map(|k| {
                    column.clear();
                    column.extend(sets.iter().map(|s| s[t].data()[k]));
                    column.sort_by(f32::total_cmp);
                    let sum: f64 = column.iter().map(|&v| f64::from(v)).sum();
                    (sum / m) as f32
                })
                .collect();
            Tensor::new(first[t].shape().to_vec(), data).expect("shape preserved")
        })
        .collect())
}

/// Fraction of samples whose highest logit (lowest index on ties) is the label.
/// An empty dataset scores 0.
pub fn evaluate(model: &impl Classifier, ds: &Dataset) -> Result<f32, ModelError> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for s in ds.samples() {
        if model.logits(&s.features)?.argmax() == s.label as usize {
            correct += 1;
        }
    }
    Ok(correct as f32 / ds.len() as f32)
}

/// Sample visiting order of a `len`-sample shard for one epoch. Clients
/// with shards of equal length share the permutation, so clients holding
/// identical data stay in lockstep.
pub fn epoch_order(seed_value: u64, epoch: u32, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut seed::stream(seed_value, &[seed::DOMAIN_ORDER, u64::from(epoch)]));
    order
}

/// One forward/backward/update pass of a full model on one sample.
/// Returns the loss and whether the prediction was correct.
pub(crate) fn train_full_step(
    layers: &mut [Layer],
    sgd: &mut SgdState,
    input: &Tensor,
    label: u8,
) -> Result<(f32, bool), NnError> {
    let (logits, caches) = nn::forward(layers, input)?;
    let (loss, grad) = nn::softmax_cross_entropy(&logits, label as usize)?;
    let (_, grads) = nn::backward(layers, &caches, &grad)?;
    let grads = nn::into_param_grads(layers, grads);
    apply_update(layers, sgd, &grads)?;
    Ok((loss, logits.argmax() == label as usize))
}

pub(crate) fn apply_update(layers: &mut [Layer], sgd: &mut SgdState, grads: &[Tensor]) -> Result<(), NnError> {
    let grad_refs: Vec<&Tensor> = grads.iter().collect();
    sgd.step(&mut nn::params_mut(layers), &grad_refs)
}

pub(crate) fn param_vec(layers: &[Layer]) -> Vec<Tensor> {
    nn::params(layers).cloned().collect()
}

/// Splits off a validation set, then deals the rest to `clients` shards.
pub fn prepare_shards(
    ds: &Dataset,
    clients: usize,
    val_fraction: f64,
    seed_value: u64,
) -> Result<(Vec<Dataset>, Dataset), DataError> {
    let (train, val) = crate::data::train_val_split(ds, val_fraction, seed_value);
    Ok((crate::data::partition(&train, clients, seed_value)?, val))
}
