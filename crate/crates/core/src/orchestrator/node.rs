//! Client and server state machines of a split-learning session.
//!
//! Each node owns one end of every link it talks over and exposes one method
//! per protocol phase. The in-process simulator calls these phases on all
//! nodes from a single thread; the TCP drivers call `run` on each node in
//! its own thread or process. Both produce the same message sequence.

use log::{debug, info};

use super::metrics::{RoundMetrics, Tally, TrainingHistory};
use super::{aggregate, apply_update, epoch_order, evaluate, param_vec, TrainError, TrainingConfig};
use crate::data::Dataset;
use crate::models::{self, ModelName, SplitModel};
use crate::nn::{self, Cache, Layer, SgdState};
use crate::protocol::transport::{Link, TransportError};
use crate::protocol::{Body, MessageType, SessionParams, WireMessage};
use crate::tensor::Tensor;

fn expect(link: &mut Link, peer: u16, expected: MessageType) -> Result<WireMessage, TrainError> {
    link.expect(expected).map_err(|source| TrainError::Client {
        client: peer,
        source,
    })
}

fn send(link: &mut Link, peer: u16, msg: WireMessage) -> Result<(), TrainError> {
    link.send(&msg).map_err(|source| TrainError::Client {
        client: peer,
        source,
    })
}

fn violation(peer: impl Into<String>, expected: MessageType, detail: impl Into<String>) -> TrainError {
    TrainError::Protocol {
        peer: peer.into(),
        expected,
        detail: detail.into(),
    }
}

/// Reads a client's HELLO, returning its id and shard size.
pub(crate) fn read_hello(link: &mut Link) -> Result<(u16, u32), TrainError> {
    let msg = link.expect(MessageType::Hello)?;
    match msg.body {
        Body::Hello { num_samples } => Ok((msg.client_id, num_samples)),
        _ => unreachable!("type checked by expect"),
    }
}

/// Device side: holds a private shard and the client half.
pub struct ClientNode {
    id: u16,
    link: Link,
    data: Dataset,
    params: Option<SessionParams>,
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    sgd: Option<SgdState>,
    epoch: u32,
    order: Vec<usize>,
    pending: Option<Vec<Cache>>,
    val_history: Vec<Option<f32>>,
}

impl ClientNode {
    pub fn new(id: u16, link: Link, data: Dataset) -> Self {
        Self {
            id,
            link,
            data,
            params: None,
            input_shape: Vec::new(),
            layers: Vec::new(),
            sgd: None,
            epoch: 0,
            order: Vec::new(),
            pending: None,
            val_history: Vec::new(),
        }
    }

    pub fn id(&self) -> u16 {
        self.id
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn link(&self) -> &Link {
        &self.link
    }

    /// Validation accuracies announced by the server, one per finished epoch.
    pub fn val_history(&self) -> &[Option<f32>] {
        &self.val_history
    }

    fn session(&self) -> &SessionParams {
        self.params.as_ref().expect("configure() runs before training phases")
    }

    pub fn hello(&mut self) -> Result<(), TrainError> {
        let msg = WireMessage::new(
            0,
            self.id,
            Body::Hello {
                num_samples: self.data.len() as u32,
            },
        );
        self.send(msg)
    }

    pub fn configure(&mut self) -> Result<(), TrainError> {
        let msg = self.recv(MessageType::TrainConfig)?;
        let Body::TrainConfig(params) = msg.body else {
            unreachable!()
        };
        let split = models::build(params.model).split();
        self.sgd = Some(nn::sgd_for(&split.client, params.learning_rate, params.momentum)?);
        self.layers = split.client;
        self.input_shape = split.input_shape;
        debug!("client {}: configured for {}", self.id, params.model);
        self.params = Some(params);
        Ok(())
    }

    fn needs_push(&self, epoch: u32) -> bool {
        epoch == 0 || self.session().aggregate
    }

    pub fn begin_epoch(&mut self, epoch: u32) -> Result<(), TrainError> {
        if self.needs_push(epoch) {
            let msg = self.recv(MessageType::ModelPush)?;
            let Body::ModelPush(tensors) = msg.body else {
                unreachable!()
            };
            nn::load_params(&mut self.layers, &tensors)
                .map_err(|e| violation("server", MessageType::ModelPush, e.to_string()))?;
        }
        self.epoch = epoch;
        self.order = epoch_order(self.session().seed, epoch, self.data.len());
        Ok(())
    }

    pub fn participates(&self, step: u32) -> bool {
        (step as usize) < self.data.len()
    }

    /// Forwards the step's sample through the client half and sends the activation.
    pub fn send_activation(&mut self, step: u32) -> Result<(), TrainError> {
        let sample = &self.data.samples()[self.order[step as usize]];
        let input = sample.features.clone().reshape(&self.input_shape)?;
        let label = sample.label;
        let (activation, caches) = nn::forward(&self.layers, &input)?;
        self.pending = Some(caches);
        self.send(WireMessage::new(
            self.epoch,
            self.id,
            Body::Activation {
                label,
                tensor: activation,
            },
        ))
    }

    /// Receives the activation gradient, back-propagates and updates the client half.
    pub fn apply_gradient(&mut self) -> Result<(), TrainError> {
        let msg = self.recv(MessageType::Gradient)?;
        let Body::Gradient(grad) = msg.body else {
            unreachable!()
        };
        let caches = self
            .pending
            .take()
            .ok_or_else(|| violation("server", MessageType::Gradient, "gradient without a pending activation"))?;
        let (_, grads) = nn::backward(&self.layers, &caches, &grad)?;
        let grads = nn::into_param_grads(&self.layers, grads);
        apply_update(&mut self.layers, self.sgd.as_mut().expect("configured"), &grads)?;
        Ok(())
    }

    pub fn upload(&mut self) -> Result<(), TrainError> {
        let msg = WireMessage::new(self.epoch, self.id, Body::ModelUpload(param_vec(&self.layers)));
        self.send(msg)
    }

    pub fn await_round_done(&mut self) -> Result<Option<f32>, TrainError> {
        let msg = self.recv(MessageType::RoundDone)?;
        let Body::RoundDone { val_accuracy } = msg.body else {
            unreachable!()
        };
        let val = (!val_accuracy.is_nan()).then_some(val_accuracy);
        self.val_history.push(val);
        Ok(val)
    }

    pub fn finish(&mut self) -> Result<(), TrainError> {
        self.recv(MessageType::Bye)?;
        let msg = WireMessage::new(self.epoch, self.id, Body::Bye);
        self.send(msg)
    }

    /// Runs the whole session, blocking on the link.
    pub fn run(mut self) -> Result<Self, TrainError> {
        self.hello()?;
        self.configure()?;
        let (epochs, steps) = (self.session().epochs, self.session().steps_per_epoch);
        for epoch in 0..epochs {
            self.begin_epoch(epoch)?;
            for step in 0..steps {
                if !self.participates(step) {
                    break;
                }
                self.send_activation(step)?;
                self.apply_gradient()?;
            }
            self.upload()?;
            let val = self.await_round_done()?;
            info!("client {}: epoch {} done, validation accuracy {:?}", self.id, epoch, val);
        }
        self.finish()?;
        Ok(self)
    }

    fn send(&mut self, msg: WireMessage) -> Result<(), TrainError> {
        self.link.send(&msg).map_err(|source| TrainError::Client {
            client: self.id,
            source,
        })
    }

    fn recv(&mut self, expected: MessageType) -> Result<WireMessage, TrainError> {
        let msg = self.link.expect(expected).map_err(|source| match source {
            TransportError::Unexpected { actual, .. } => {
                violation("server", expected, format!("server sent {actual}"))
            }
            source => TrainError::Client {
                client: self.id,
                source,
            },
        })?;
        if msg.client_id != self.id {
            return Err(violation(
                "server",
                expected,
                format!("message addressed to client {}", msg.client_id),
            ));
        }
        Ok(msg)
    }
}

/// Server side: owns the server half, the synchronized client half and one link per client.
pub struct ServerNode {
    params: SessionParams,
    name: ModelName,
    input_shape: Vec<usize>,
    links: Vec<Link>,
    shard_sizes: Vec<usize>,
    client_global: Vec<Layer>,
    server: Vec<Layer>,
    sgd: SgdState,
    validation: Dataset,
    history: TrainingHistory,
    tallies: Vec<Tally>,
}

impl ServerNode {
    /// Takes links ordered by client id together with the shard sizes from
    /// their HELLOs, initializes the model and sends TRAIN_CONFIG to each.
    pub fn new(
        cfg: &TrainingConfig,
        clients: Vec<(Link, u32)>,
        validation: Dataset,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if clients.len() != cfg.num_clients {
            return Err(TrainError::Config(format!(
                "expected {} clients, got {}",
                cfg.num_clients,
                clients.len()
            )));
        }
        if let Some(i) = clients.iter().position(|(_, n)| *n == 0) {
            return Err(TrainError::Config(format!("client {i} has no training samples")));
        }
        let shard_sizes: Vec<usize> = clients.iter().map(|(_, n)| *n as usize).collect();
        let params = SessionParams {
            model: cfg.model,
            epochs: cfg.epochs,
            learning_rate: cfg.learning_rate,
            momentum: cfg.momentum,
            seed: cfg.seed,
            aggregate: cfg.aggregate,
            steps_per_epoch: *shard_sizes.iter().max().expect("at least one client") as u32,
        };
        let split = models::build_initialized(cfg.model, cfg.seed).split();
        let sgd = nn::sgd_for(&split.server, cfg.learning_rate, cfg.momentum)?;
        let mut links: Vec<Link> = clients.into_iter().map(|(l, _)| l).collect();
        for (i, link) in links.iter_mut().enumerate() {
            send(link, i as u16, WireMessage::new(0, i as u16, Body::TrainConfig(params.clone())))?;
        }
        Ok(Self {
            params,
            name: split.name,
            input_shape: split.input_shape,
            tallies: vec![Tally::default(); links.len()],
            links,
            shard_sizes,
            client_global: split.client,
            server: split.server,
            sgd,
            validation,
            history: TrainingHistory::default(),
        })
    }

    pub fn steps_per_epoch(&self) -> u32 {
        self.params.steps_per_epoch
    }

    pub fn epochs(&self) -> u32 {
        self.params.epochs
    }

    pub fn server_layers(&self) -> &[Layer] {
        &self.server
    }

    /// The synchronized client half: the initial weights, then the result of
    /// each epoch's aggregation (or client 0's upload without aggregation).
    pub fn client_layers(&self) -> &[Layer] {
        &self.client_global
    }

    pub fn link(&self, client: usize) -> &Link {
        &self.links[client]
    }

    pub fn history(&self) -> &TrainingHistory {
        &self.history
    }

    pub fn model(&self) -> SplitModel {
        SplitModel {
            name: self.name,
            input_shape: self.input_shape.clone(),
            client: self.client_global.clone(),
            server: self.server.clone(),
        }
    }

    pub fn begin_epoch(&mut self, epoch: u32) -> Result<(), TrainError> {
        self.tallies.fill(Tally::default());
        if epoch == 0 || self.params.aggregate {
            let tensors = param_vec(&self.client_global);
            for (i, link) in self.links.iter_mut().enumerate() {
                send(link, i as u16, WireMessage::new(epoch, i as u16, Body::ModelPush(tensors.clone())))?;
            }
        }
        Ok(())
    }

    /// Serves one step: every participating client in id order, then one
    /// update of the server half with the mean gradient.
    pub fn process_step(&mut self, epoch: u32, step: u32) -> Result<(), TrainError> {
        let mut acc: Option<Vec<Tensor>> = None;
        let mut count = 0usize;
        for i in 0..self.links.len() {
            if step as usize >= self.shard_sizes[i] {
                continue;
            }
            let id = i as u16;
            let msg = expect(&mut self.links[i], id, MessageType::Activation)?;
            if msg.client_id != id || msg.round != epoch {
                return Err(violation(
                    format!("client {id}"),
                    MessageType::Activation,
                    format!("got client {} round {} during round {epoch}", msg.client_id, msg.round),
                ));
            }
            let Body::Activation { label, tensor } = msg.body else {
                unreachable!()
            };
            let (logits, caches) = nn::forward(&self.server, &tensor)
                .map_err(|e| violation(format!("client {id}"), MessageType::Activation, e.to_string()))?;
            let (loss, grad) = nn::softmax_cross_entropy(&logits, label as usize)
                .map_err(|e| violation(format!("client {id}"), MessageType::Activation, e.to_string()))?;
            let (grad_activation, grads) = nn::backward(&self.server, &caches, &grad)?;
            send(&mut self.links[i], id, WireMessage::new(epoch, id, Body::Gradient(grad_activation)))?;

            let grads = nn::into_param_grads(&self.server, grads);
            match acc.as_mut() {
                None => acc = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                }
            }
            count += 1;

            let train_acc = self.tallies[i].record(logits.argmax() == label as usize);
            let stats = self.links[i].stats();
            self.history.rows.push(RoundMetrics {
                epoch,
                step,
                client_id: id,
                loss,
                train_acc,
                val_acc: None,
                bytes_up: stats.bytes_received,
                bytes_down: stats.bytes_sent,
            });
        }
        if let Some(mut acc) = acc {
            if count > 1 {
                let m = count as f32;
                for t in &mut acc {
                    t.data_mut().iter_mut().for_each(|x| *x /= m);
                }
            }
            apply_update(&mut self.server, &mut self.sgd, &acc)?;
        }
        Ok(())
    }

    /// Collects the client halves, synchronizes them, evaluates and closes the epoch.
    pub fn end_epoch(&mut self, epoch: u32) -> Result<Option<f32>, TrainError> {
        let mut uploads = Vec::with_capacity(self.links.len());
        for (i, link) in self.links.iter_mut().enumerate() {
            let msg = expect(link, i as u16, MessageType::ModelUpload)?;
            let Body::ModelUpload(tensors) = msg.body else {
                unreachable!()
            };
            uploads.push(tensors);
        }
        let synced = if self.params.aggregate {
            aggregate(&uploads)?
        } else {
            uploads.swap_remove(0)
        };
        nn::load_params(&mut self.client_global, &synced)
            .map_err(|e| violation("client 0", MessageType::ModelUpload, e.to_string()))?;

        let val = if self.validation.is_empty() {
            None
        } else {
            Some(evaluate(&self.model(), &self.validation)?)
        };
        for (i, link) in self.links.iter_mut().enumerate() {
            let body = Body::RoundDone {
                val_accuracy: val.unwrap_or(f32::NAN),
            };
            send(link, i as u16, WireMessage::new(epoch, i as u16, body))?;
        }
        self.history.close_epoch(epoch, val);
        info!("server: epoch {epoch} done, validation accuracy {val:?}");
        Ok(val)
    }

    pub fn send_bye(&mut self) -> Result<(), TrainError> {
        let round = self.params.epochs;
        for (i, link) in self.links.iter_mut().enumerate() {
            send(link, i as u16, WireMessage::new(round, i as u16, Body::Bye))?;
        }
        Ok(())
    }

    pub fn collect_bye(&mut self) -> Result<(), TrainError> {
        for (i, link) in self.links.iter_mut().enumerate() {
            expect(link, i as u16, MessageType::Bye)?;
        }
        self.history.traffic = self.links.iter().map(|l| l.stats().clone()).collect();
        Ok(())
    }

    pub fn into_outcome(self) -> super::TrainOutcome {
        super::TrainOutcome {
            model: self.model(),
            history: self.history,
        }
    }

    /// Runs the whole session, blocking on each link in turn.
    pub fn run(mut self) -> Result<super::TrainOutcome, TrainError> {
        for epoch in 0..self.params.epochs {
            self.begin_epoch(epoch)?;
            for step in 0..self.params.steps_per_epoch {
                self.process_step(epoch, step)?;
            }
            self.end_epoch(epoch)?;
        }
        self.send_bye()?;
        self.collect_bye()?;
        Ok(self.into_outcome())
    }
}
