//! TCP drivers: a server that waits for all clients before training, and a
//! client that connects to it.

use std::net::{TcpListener, TcpStream};
use std::thread;
use std::time::Duration;

use log::info;

use super::node::{read_hello, ClientNode, ServerNode};
use super::{TrainError, TrainOutcome, TrainingConfig};
use crate::data::Dataset;
use crate::protocol::transport::{Link, TcpTransport};

/// Accepts exactly `cfg.num_clients` connections, orders them by the client
/// id in their HELLO and runs the session.
pub fn serve_listener(
    listener: &TcpListener,
    cfg: &TrainingConfig,
    validation: Dataset,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut joined: Vec<(u16, Link, u32)> = Vec::with_capacity(cfg.num_clients);
    while joined.len() < cfg.num_clients {
        let (stream, peer) = listener.accept()?;
        let mut link = Link::new(TcpTransport::new(stream)?);
        let (id, n) = read_hello(&mut link)?;
        if id as usize >= cfg.num_clients || joined.iter().any(|(j, _, _)| *j == id) {
            return Err(TrainError::Config(format!(
                "client id {id} from {peer} is duplicate or outside 0..{}",
                cfg.num_clients
            )));
        }
        info!("server: client {id} joined from {peer} with {n} samples");
        joined.push((id, link, n));
    }
    joined.sort_by_key(|(id, _, _)| *id);
    let clients = joined.into_iter().map(|(_, link, n)| (link, n)).collect();
    ServerNode::new(cfg, clients, validation)?.run()
}

/// Binds `addr` and serves one session.
pub fn run_server(addr: &str, cfg: &TrainingConfig, validation: Dataset) -> Result<TrainOutcome, TrainError> {
    let listener = TcpListener::bind(addr)?;
    info!("server: listening on {}", listener.local_addr()?);
    serve_listener(&listener, cfg, validation)
}

/// Connects to a server (retrying for up to `patience`) and trains on `shard`.
pub fn run_client(addr: &str, client_id: u16, shard: Dataset, patience: Duration) -> Result<ClientNode, TrainError> {
    let deadline = std::time::Instant::now() + patience;
    let stream = loop {
        match TcpStream::connect(addr) {
            Ok(s) => break s,
            Err(e) if std::time::Instant::now() >= deadline => return Err(e.into()),
            Err(_) => thread::sleep(Duration::from_millis(50)),
        }
    };
    let link = Link::new(TcpTransport::new(stream)?);
    ClientNode::new(client_id, link, shard).run()
}

/// Runs a session over loopback TCP with one thread per client.
pub(crate) fn loopback_train(
    cfg: &TrainingConfig,
    shards: &[Dataset],
    validation: &Dataset,
) -> Result<TrainOutcome, TrainError> {
    if shards.len() != cfg.num_clients {
        return Err(TrainError::Config(format!(
            "{} shards for {} clients",
            shards.len(),
            cfg.num_clients
        )));
    }
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?.to_string();
    thread::scope(|scope| {
        let handles: Vec<_> = shards
            .iter()
            .enumerate()
            .map(|(i, shard)| {
                let addr = addr.clone();
                scope.spawn(move || run_client(&addr, i as u16, shard.clone(), Duration::from_secs(10)))
            })
            .collect();
        let outcome = serve_listener(&listener, cfg, validation.clone());
        // Closing the listener and the links unblocks every client if the server failed.
        drop(listener);
        for h in handles {
            let client = h.join().expect("client thread panicked");
            if outcome.is_ok() {
                client?;
            }
        }
        outcome
    })
}
