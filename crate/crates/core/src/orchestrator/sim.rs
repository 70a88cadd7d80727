//! Single-threaded split-learning simulation over in-memory links.

use super::node::{read_hello, ClientNode, ServerNode};
use super::{net, TrainError, TrainOutcome, TrainingConfig, TransportKind};
use crate::data::Dataset;
use crate::nn::Layer;
use crate::protocol::transport::{memory_pair, Link};

/// Where a simulation stands after a call to [`Simulation::step`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepPosition {
    pub epoch: u32,
    pub step: u32,
}

/// Drives one server and `M` clients step by step from the calling thread.
pub struct Simulation {
    server: ServerNode,
    clients: Vec<ClientNode>,
    epoch: u32,
    step: u32,
    finished: bool,
}

impl Simulation {
    /// Connects the nodes and completes the handshake.
    pub fn new(cfg: &TrainingConfig, shards: Vec<Dataset>, validation: Dataset) -> Result<Self, TrainError> {
        cfg.validate()?;
        if shards.len() != cfg.num_clients {
            return Err(TrainError::Config(format!(
                "{} shards for {} clients",
                shards.len(),
                cfg.num_clients
            )));
        }
        let mut clients = Vec::with_capacity(shards.len());
        let mut server_links = Vec::with_capacity(shards.len());
        for (i, shard) in shards.into_iter().enumerate() {
            let (server_end, client_end) = memory_pair();
            let mut client = ClientNode::new(i as u16, Link::new(client_end), shard);
            client.hello()?;
            clients.push(client);
            server_links.push(Link::new(server_end));
        }
        let mut hellos = Vec::with_capacity(server_links.len());
        for mut link in server_links {
            let (_, n) = read_hello(&mut link)?;
            hellos.push((link, n));
        }
        let server = ServerNode::new(cfg, hellos, validation)?;
        for c in &mut clients {
            c.configure()?;
        }
        Ok(Self {
            server,
            clients,
            epoch: 0,
            step: 0,
            finished: false,
        })
    }

    /// Runs the next training step, handling epoch boundaries around it.
    /// Returns `None` once every epoch has finished.
    pub fn step(&mut self) -> Result<Option<StepPosition>, TrainError> {
        if self.finished {
            return Ok(None);
        }
        let (epoch, step) = (self.epoch, self.step);
        if step == 0 {
            self.server.begin_epoch(epoch)?;
            for c in &mut self.clients {
                c.begin_epoch(epoch)?;
            }
        }
        for c in self.clients.iter_mut().filter(|c| c.participates(step)) {
            c.send_activation(step)?;
        }
        self.server.process_step(epoch, step)?;
        for c in self.clients.iter_mut().filter(|c| c.participates(step)) {
            c.apply_gradient()?;
        }

        self.step += 1;
        if self.step == self.server.steps_per_epoch() {
            for c in &mut self.clients {
                c.upload()?;
            }
            self.server.end_epoch(epoch)?;
            for c in &mut self.clients {
                c.await_round_done()?;
            }
            self.step = 0;
            self.epoch += 1;
            if self.epoch == self.server.epochs() {
                self.server.send_bye()?;
                for c in &mut self.clients {
                    c.finish()?;
                }
                self.server.collect_bye()?;
                self.finished = true;
            }
        }
        Ok(Some(StepPosition { epoch, step }))
    }

    pub fn run(mut self) -> Result<TrainOutcome, TrainError> {
        while self.step()?.is_some() {}
        Ok(self.server.into_outcome())
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn server(&self) -> &ServerNode {
        &self.server
    }

    pub fn client(&self, i: usize) -> &ClientNode {
        &self.clients[i]
    }

    pub fn client_layers(&self, i: usize) -> &[Layer] {
        self.clients[i].layers()
    }

    pub fn server_layers(&self) -> &[Layer] {
        self.server.server_layers()
    }
}

/// Split federated training of `cfg.model` over one shard per client.
///
/// Each epoch the server pushes the synchronized client half (every epoch
/// with aggregation, only the first without), serves every step, and
/// averages the uploaded client halves at the end. The returned model
/// holds the last synchronized client half and the server half.
pub fn sfl_train(cfg: &TrainingConfig, shards: &[Dataset], validation: &Dataset) -> Result<TrainOutcome, TrainError> {
    match cfg.transport {
        TransportKind::InProcess => Simulation::new(cfg, shards.to_vec(), validation.clone())?.run(),
        TransportKind::Tcp => net::loopback_train(cfg, shards, validation),
    }
}
