//! `sfl`: train, serve, join, evaluate and export split federated models.

use std::fs::File;
use std::io::BufWriter;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use sfl_core::data::{
    label_for_folder, load_wav_corpus, partition, save_features, synth_dataset, train_val_split, DataSource, Dataset,
    Difficulty, Provenance, Sample,
};
use sfl_core::export::{
    merge, quantize_int8, Checkpoint, ConfigSnapshot, MetricsSummary, QuantizedModel, CHECKPOINT_MAGIC,
    QUANTIZED_MAGIC,
};
use sfl_core::mfcc::{mfcc_extract, MfccConfig};
use sfl_core::models::{ModelName, ModelSpec};
use sfl_core::audio::{fit_clip, read_wav};
use sfl_core::orchestrator::{
    centralized_train, evaluate, fl_train, prepare_shards, run_client, serve_listener, sfl_train, write_metrics_csv,
    Scheme, TrainOutcome, TrainingConfig, TransportKind,
};

const DEFAULT_PORT: &str = "7878";

#[derive(Parser)]
#[command(name = "sfl", version, about = "Split federated learning for tiny keyword-spotting models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train in one process and write a checkpoint and a metrics CSV.
    Train(TrainArgs),
    /// Run the training server and wait for every client over TCP.
    Serve(ServeArgs),
    /// Join a server as one client with a private data shard.
    Client(ClientArgs),
    /// Report the accuracy of a checkpoint or quantized model.
    Eval(EvalArgs),
    /// Quantize a checkpoint to an int8 deployment file.
    Export(ExportArgs),
    /// Extract MFCC features from a WAV file or a folder-per-class corpus.
    Mfcc(MfccArgs),
    /// Write a synthetic dataset as a feature file.
    Synth(SynthArgs),
}

/// Settings shared by every training entry point.
#[derive(Args)]
struct Hyper {
    #[arg(long, default_value = "model1_mlp")]
    model: ModelName,
    #[arg(long, default_value_t = 3)]
    epochs: u32,
    /// Learning rate [default: 0.0005 for the MLP, 0.005 for the CNNs]
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long, default_value_t = 0.6)]
    momentum: f32,
    /// Seeds data generation, splitting, initialization and sample order.
    #[arg(long, env = "SFL_SEED", default_value_t = 0)]
    seed: u64,
    /// Fraction of each class held out for validation.
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    /// Keep client halves separate instead of averaging them every epoch.
    #[arg(long)]
    no_aggregate: bool,
}

impl Hyper {
    fn config(&self, clients: usize) -> TrainingConfig {
        let mut cfg = TrainingConfig::new(self.model);
        cfg.num_clients = clients;
        cfg.epochs = self.epochs;
        if let Some(lr) = self.lr {
            cfg.learning_rate = lr;
        }
        cfg.momentum = self.momentum;
        cfg.seed = self.seed;
        cfg.val_fraction = self.val_fraction;
        cfg.aggregate = !self.no_aggregate;
        cfg
    }
}

/// Where the trained model and its metrics go.
#[derive(Args)]
struct Outputs {
    #[arg(long, default_value = "model.sflc")]
    out: PathBuf,
    #[arg(long, default_value = "metrics.csv")]
    metrics: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Transport {
    InProcess,
    Tcp,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "sfl")]
    scheme: Scheme,
    /// synth:easy|hard[:PER_CLASS], wav:<dir> or sflf:<file>
    #[arg(long, default_value = "synth:easy")]
    data: DataSource,
    #[arg(long, default_value_t = 1)]
    clients: usize,
    /// How split-learning messages travel (ignored by the other schemes).
    #[arg(long, value_enum, default_value = "in-process")]
    transport: Transport,
    #[command(flatten)]
    hyper: Hyper,
    #[command(flatten)]
    outputs: Outputs,
}

#[derive(Args)]
struct Endpoint {
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, env = "SFL_PORT", default_value = DEFAULT_PORT)]
    port: u16,
}

impl Endpoint {
    fn addr(&self) -> String {
        format!("{}:{}", self.host, self.port)
    }
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    endpoint: Endpoint,
    /// Number of clients to wait for before training starts.
    #[arg(long, default_value_t = 1)]
    clients: usize,
    /// Dataset whose validation split the server evaluates on.
    #[arg(long, default_value = "synth:easy")]
    data: DataSource,
    #[command(flatten)]
    hyper: Hyper,
    #[command(flatten)]
    outputs: Outputs,
}

#[derive(Args)]
struct ClientArgs {
    #[command(flatten)]
    endpoint: Endpoint,
    #[arg(long)]
    id: u16,
    #[arg(long, default_value = "synth:easy")]
    data: DataSource,
    /// Split off validation and partition the rest into this many shards,
    /// keeping shard `id`. Without it the whole source is the shard.
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long, env = "SFL_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    /// Seconds to keep retrying the connection.
    #[arg(long, default_value_t = 30)]
    patience: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// A checkpoint (SFLC) or quantized model (SFLQ) file.
    model: PathBuf,
    #[arg(long, default_value = "synth:easy")]
    data: DataSource,
    /// Defaults to the seed stored in a checkpoint, else 0.
    #[arg(long, env = "SFL_SEED")]
    seed: Option<u64>,
    /// Defaults to the fraction stored in a checkpoint, else 0.1.
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Score the whole dataset instead of its validation split.
    #[arg(long)]
    all: bool,
}

#[derive(Args)]
struct ExportArgs {
    checkpoint: PathBuf,
    #[arg(long, default_value = "model.sflq")]
    out: PathBuf,
}

#[derive(Args)]
struct MfccArgs {
    /// A .wav file or a directory with one subfolder per class.
    input: PathBuf,
    #[arg(long, default_value = "features.sflf")]
    out: PathBuf,
    /// Class folder name for a single file [default: its parent folder].
    #[arg(long)]
    label: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, env = "SFL_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value = "easy")]
    difficulty: Difficulty,
    #[arg(long, default_value = "synth.sflf")]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => train(a),
        Command::Serve(a) => serve(a),
        Command::Client(a) => client(a),
        Command::Eval(a) => eval(a),
        Command::Export(a) => export(a),
        Command::Mfcc(a) => mfcc(a),
        Command::Synth(a) => synth(a),
    }
}

fn load(data: &DataSource, seed: u64) -> Result<Dataset> {
    data.load(seed).with_context(|| format!("loading {data}"))
}

fn train(a: TrainArgs) -> Result<()> {
    let clients = if a.scheme == Scheme::Centralized { 1 } else { a.clients };
    let mut cfg = a.hyper.config(clients);
    cfg.transport = match a.transport {
        Transport::InProcess => TransportKind::InProcess,
        Transport::Tcp => TransportKind::Tcp,
    };
    let ds = load(&a.data, cfg.seed)?;
    let outcome = match a.scheme {
        Scheme::Centralized => {
            let (train, val) = train_val_split(&ds, cfg.val_fraction, cfg.seed);
            centralized_train(&cfg, &train, &val)?
        }
        scheme => {
            let (shards, val) = prepare_shards(&ds, clients, cfg.val_fraction, cfg.seed)?;
            info!(
                "{} clients with {:?} samples, {} for validation",
                clients,
                shards.iter().map(Dataset::len).collect::<Vec<_>>(),
                val.len()
            );
            if scheme == Scheme::Fl {
                fl_train(&cfg, &shards, &val)?
            } else {
                sfl_train(&cfg, &shards, &val)?
            }
        }
    };
    save_outcome(a.scheme, &cfg, &outcome, &a.outputs)
}

fn save_outcome(scheme: Scheme, cfg: &TrainingConfig, outcome: &TrainOutcome, outputs: &Outputs) -> Result<()> {
    let model = merge(&outcome.model)?;
    let ck = Checkpoint::new(
        model,
        ConfigSnapshot::new(scheme, cfg),
        MetricsSummary::from_history(&outcome.history),
    );
    ck.save(&outputs.out)?;
    let file = File::create(&outputs.metrics).with_context(|| format!("creating {}", outputs.metrics.display()))?;
    write_metrics_csv(BufWriter::new(file), &outcome.history)?;
    for e in &outcome.history.epochs {
        println!(
            "epoch {}: mean loss {:.4}, train accuracy {:.4}, validation accuracy {}",
            e.epoch,
            e.mean_loss,
            e.train_acc,
            e.val_acc.map_or("n/a".to_string(), |v| v.to_string())
        );
    }
    println!("checkpoint written to {}", outputs.out.display());
    println!("metrics written to {}", outputs.metrics.display());
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let cfg = a.hyper.config(a.clients);
    let ds = load(&a.data, cfg.seed)?;
    let (_, val) = train_val_split(&ds, cfg.val_fraction, cfg.seed);
    let addr = a.endpoint.addr();
    let listener = TcpListener::bind(&addr).with_context(|| {
        format!("cannot listen on {addr}; choose a free port with --port or SFL_PORT")
    })?;
    info!("listening on {addr} for {} clients", cfg.num_clients);
    let outcome = serve_listener(&listener, &cfg, val)?;
    save_outcome(Scheme::Sfl, &cfg, &outcome, &a.outputs)
}

fn client(a: ClientArgs) -> Result<()> {
    let ds = load(&a.data, a.seed)?;
    let shard = match a.clients {
        Some(m) => {
            let (train, _) = train_val_split(&ds, a.val_fraction, a.seed);
            let mut shards = partition(&train, m, a.seed)?;
            if usize::from(a.id) >= m {
                bail!("client id {} is outside 0..{m}", a.id);
            }
            shards.swap_remove(usize::from(a.id))
        }
        None => ds,
    };
    let addr = a.endpoint.addr();
    info!("client {}: {} samples, connecting to {addr}", a.id, shard.len());
    let node = run_client(&addr, a.id, shard, Duration::from_secs(a.patience))
        .with_context(|| format!("session with {addr}"))?;
    for (epoch, val) in node.val_history().iter().enumerate() {
        println!(
            "epoch {epoch}: validation accuracy {}",
            val.map_or("n/a".to_string(), |v| v.to_string())
        );
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<(ModelSpec, Option<Checkpoint>)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let magic = bytes.get(..4).unwrap_or_default();
    if magic == CHECKPOINT_MAGIC {
        let ck = Checkpoint::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))?;
        Ok((ck.model.clone(), Some(ck)))
    } else if magic == QUANTIZED_MAGIC {
        let q = QuantizedModel::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))?;
        Ok((q.dequantized()?, None))
    } else {
        bail!("{} is neither a checkpoint nor a quantized model", path.display())
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let (model, ck) = load_model(&a.model)?;
    let seed = a.seed.or(ck.as_ref().map(|c| c.config.seed)).unwrap_or(0);
    let val_fraction = a
        .val_fraction
        .or(ck.as_ref().map(|c| c.config.val_fraction))
        .unwrap_or(0.1);
    let ds = load(&a.data, seed)?;
    let (set, what) = if a.all {
        (ds, "accuracy")
    } else {
        (train_val_split(&ds, val_fraction, seed).1, "validation accuracy")
    };
    if set.is_empty() {
        bail!("nothing to evaluate: the selected split of {} is empty", a.data);
    }
    let acc = evaluate(&model, &set)?;
    println!("{what}: {acc} ({} samples, {})", set.len(), model.name);
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let q = quantize_int8(&ck.model)?;
    q.save(&a.out)?;
    let size = |p: &Path| std::fs::metadata(p).map(|m| m.len()).unwrap_or(0);
    println!(
        "{}: {} bytes -> {}: {} bytes",
        a.checkpoint.display(),
        size(&a.checkpoint),
        a.out.display(),
        size(&a.out)
    );
    Ok(())
}

fn mfcc(a: MfccArgs) -> Result<()> {
    let cfg = MfccConfig::default();
    let ds = if a.input.is_dir() {
        load_wav_corpus(&a.input, &cfg)?
    } else {
        let folder = match &a.label {
            Some(l) => l.clone(),
            None => a
                .input
                .parent()
                .and_then(|p| p.file_name())
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string(),
        };
        let pcm = fit_clip(read_wav(&a.input)?);
        let features = mfcc_extract(&pcm, &cfg)?.into_tensor();
        let sample = Sample {
            features,
            label: label_for_folder(&folder),
        };
        Dataset::new(vec![sample], Provenance::WavCorpus(a.input.clone()))
    };
    save_features(&a.out, &ds)?;
    println!("{} feature maps written to {}", ds.len(), a.out.display());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    if a.per_class == 0 {
        bail!("--per-class must be at least 1");
    }
    let ds = synth_dataset(a.seed, a.per_class, a.difficulty);
    save_features(&a.out, &ds)?;
    println!("{} {} samples written to {}", ds.len(), a.difficulty, a.out.display());
    Ok(())
}
