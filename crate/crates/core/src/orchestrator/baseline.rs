//! Reference trainers: plain centralized SGD and federated averaging.

use super::metrics::{RoundMetrics, Tally, TrainingHistory};
use super::sim::StepPosition;
use super::{aggregate, epoch_order, evaluate, param_vec, train_full_step, TrainError, TrainOutcome, TrainingConfig};
use crate::data::Dataset;
use crate::models::{self, ModelSpec};
use crate::nn::{self, Layer, SgdState};
use crate::protocol::{self, Body, WireMessage};

/// Single-process SGD on the unsplit model, one sample per step.
///
/// Uses the same initialization and visiting order as the clients of a
/// split session, so it is the reference a one-client split run must
/// reproduce exactly.
pub struct CentralizedTrainer {
    spec: ModelSpec,
    sgd: SgdState,
    data: Dataset,
    validation: Dataset,
    epochs: u32,
    seed: u64,
    epoch: u32,
    step: u32,
    order: Vec<usize>,
    tally: Tally,
    history: TrainingHistory,
}

impl CentralizedTrainer {
    pub fn new(cfg: &TrainingConfig, data: Dataset, validation: Dataset) -> Result<Self, TrainError> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(TrainError::Config("training set is empty".into()));
        }
        let spec = models::build_initialized(cfg.model, cfg.seed);
        let sgd = nn::sgd_for(&spec.layers, cfg.learning_rate, cfg.momentum)?;
        Ok(Self {
            spec,
            sgd,
            data,
            validation,
            epochs: cfg.epochs,
            seed: cfg.seed,
            epoch: 0,
            step: 0,
            order: Vec::new(),
            tally: Tally::default(),
            history: TrainingHistory::default(),
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.spec.layers
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn step(&mut self) -> Result<Option<StepPosition>, TrainError> {
        if self.epoch == self.epochs {
            return Ok(None);
        }
        let (epoch, step) = (self.epoch, self.step);
        if step == 0 {
            self.order = epoch_order(self.seed, epoch, self.data.len());
            self.tally = Tally::default();
        }
        let sample = &self.data.samples()[self.order[step as usize]];
        let input = self.spec.prepare_input(&sample.features)?;
        let (loss, correct) = train_full_step(&mut self.spec.layers, &mut self.sgd, &input, sample.label)?;
        self.history.rows.push(RoundMetrics {
            epoch,
            step,
            client_id: 0,
            loss,
            train_acc: self.tally.record(correct),
            val_acc: None,
            bytes_up: 0,
            bytes_down: 0,
        });
        self.step += 1;
        if self.step as usize == self.data.len() {
            let val = if self.validation.is_empty() {
                None
            } else {
                Some(evaluate(&self.spec, &self.validation)?)
            };
            self.history.close_epoch(epoch, val);
            self.step = 0;
            self.epoch += 1;
        }
        Ok(Some(StepPosition { epoch, step }))
    }

    pub fn run(mut self) -> Result<TrainOutcome, TrainError> {
        while self.step()?.is_some() {}
        Ok(TrainOutcome {
            model: self.spec.split(),
            history: self.history,
        })
    }
}

pub fn centralized_train(cfg: &TrainingConfig, data: &Dataset, validation: &Dataset) -> Result<TrainOutcome, TrainError> {
    CentralizedTrainer::new(cfg, data.clone(), validation.clone())?.run()
}

/// Federated averaging of the full MLP.
///
/// Each epoch every client starts from the global model, trains on its own
/// shard for one pass, and the server averages the resulting models. Each
/// client's momentum buffers persist across epochs. Traffic is accounted as
/// the frames a model push and upload would occupy on the wire.
pub fn fl_train(cfg: &TrainingConfig, shards: &[Dataset], validation: &Dataset) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if cfg.model.is_cnn() {
        return Err(TrainError::FlModel(cfg.model));
    }
    if shards.len() != cfg.num_clients || shards.iter().any(Dataset::is_empty) {
        return Err(TrainError::Config(format!(
            "need {} nonempty shards, got {}",
            cfg.num_clients,
            shards.len()
        )));
    }
    let mut global = models::build_initialized(cfg.model, cfg.seed);
    let mut optimizers = shards
        .iter()
        .map(|_| nn::sgd_for(&global.layers, cfg.learning_rate, cfg.momentum))
        .collect::<Result<Vec<_>, _>>()?;
    let mut history = TrainingHistory::default();
    let mut bytes = vec![(0u64, 0u64); shards.len()];
    let model_frame = |body: Body| -> Result<u64, TrainError> {
        let frame = protocol::encode(&WireMessage::new(0, 0, body)).map_err(crate::protocol::transport::TransportError::from)?;
        Ok(frame.len() as u64)
    };

    for epoch in 0..cfg.epochs {
        let global_params = param_vec(&global.layers);
        let push = model_frame(Body::ModelPush(global_params.clone()))?;
        let mut uploads = Vec::with_capacity(shards.len());
        let mut rows = Vec::new();
        for (i, shard) in shards.iter().enumerate() {
            let id = i as u16;
            let mut local = global.layers.clone();
            let mut tally = Tally::default();
            bytes[i].1 += push;
            for (step, &idx) in epoch_order(cfg.seed, epoch, shard.len()).iter().enumerate() {
                let sample = &shard.samples()[idx];
                let input = global.prepare_input(&sample.features)?;
                let (loss, correct) = train_full_step(&mut local, &mut optimizers[i], &input, sample.label)?;
                rows.push(RoundMetrics {
                    epoch,
                    step: step as u32,
                    client_id: id,
                    loss,
                    train_acc: tally.record(correct),
                    val_acc: None,
                    bytes_up: bytes[i].0,
                    bytes_down: bytes[i].1,
                });
            }
            let params = param_vec(&local);
            bytes[i].0 += model_frame(Body::ModelUpload(params.clone()))?;
            uploads.push(params);
        }
        rows.sort_by_key(|r| (r.step, r.client_id));
        history.rows.extend(rows);
        let synced = if cfg.aggregate {
            aggregate(&uploads)?
        } else {
            uploads.swap_remove(0)
        };
        nn::load_params(&mut global.layers, &synced)?;
        let val = if validation.is_empty() {
            None
        } else {
            Some(evaluate(&global, validation)?)
        };
        history.close_epoch(epoch, val);
    }
    Ok(TrainOutcome {
        model: global.split(),
        history,
    })
}
