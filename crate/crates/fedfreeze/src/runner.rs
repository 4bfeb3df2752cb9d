//! Experiment setup, the client loop and the end-to-end run.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use fedfreeze_core::client::{evaluate, EVAL_CHUNK};
use fedfreeze_core::codec::{encode_partial_update, deserialize_model};
use fedfreeze_core::data::{generate_blobs, partition_dirichlet, partition_iid};
use fedfreeze_core::metrics::{MetricsRecord, SelectionHistogram};
use fedfreeze_core::seed::{stream_rng, Stream};
use fedfreeze_core::{client_update, Architecture, ClientConfig, Dataset, Model, Partition, RoundPlan};
use serde::Serialize;

use crate::config::{DatasetSource, PartitionScheme, RunConfig, TransportSpec};
use crate::io;
use crate::server::{Server, ServerSettings};
use crate::transport::{
    loopback, ClientLink, Direction, Message, MessageKind, ServerLink, Tally, TcpClient, TcpHub, TrafficLedger,
};
use crate::{Error, Result};

/// Everything a run derives deterministically from its config.
pub struct Experiment {
    pub config: RunConfig,
    pub arch: Architecture,
    pub partitions: Vec<Partition>,
    pub test: Dataset,
    pub initial: Model<f32>,
}

impl Experiment {
    pub fn prepare(config: &RunConfig) -> Result<Self> {
        let arch = io::load_architecture(&config.architecture)?;
        config.validate(&arch)?;
        let data = match &config.dataset {
            DatasetSource::Blobs { spec } => generate_blobs(spec, config.seed)?,
            DatasetSource::Csv { path, classes } => io::load_csv_dataset(path, *classes)?,
        };
        if data.sample_shape() != arch.input_shape.as_slice() {
            return Err(Error::Config(format!(
                "dataset samples have shape {:?}, {} expects {:?}",
                data.sample_shape(),
                arch.name,
                arch.input_shape
            )));
        }
        let out = arch.output_shape()?;
        if out.iter().product::<usize>() != data.classes() {
            return Err(Error::Config(format!("{} has {} outputs for {} classes", arch.name, out[0], data.classes())));
        }
        let (train, test) = data.split(config.test_fraction, config.seed)?;
        let partitions = match config.partition {
            PartitionScheme::Iid => partition_iid(&train, config.clients, config.seed)?,
            PartitionScheme::Dirichlet(alpha) => partition_dirichlet(&train, config.clients, alpha, config.seed)?,
        };
        let initial = Model::new(arch.clone(), &mut stream_rng(config.seed, Stream::ModelInit, 0, 0))?;
        Ok(Self { config: config.clone(), arch, partitions, test, initial })
    }

    pub fn client_config(&self, id: u32) -> ClientConfig {
        let c = &self.config;
        let mut cfg = ClientConfig::new(id, c.layer_budget, c.seed);
        cfg.epochs = c.epochs;
        cfg.batch_size = c.batch_size;
        cfg.learning_rate = c.learning_rate;
        cfg.optimizer = c.optimizer;
        cfg
    }
}

/// Serves rounds until the server shuts the session down.
pub fn serve_client<L: ClientLink>(link: &mut L, arch: &Architecture, cfg: &ClientConfig, data: &Dataset) -> Result<()> {
    let id = link.id();
    loop {
        let msg = link.recv()?;
        match msg.kind {
            MessageKind::GlobalModel => {
                let reply = deserialize_model::<f32>(arch, &msg.payload)
                    .map_err(Error::from)
                    .and_then(|global| Ok(client_update(cfg, data, &global, msg.round)?));
                match reply {
                    Ok(update) => {
                        link.send(Message::new(MessageKind::PartialUpdate, msg.round, id, encode_partial_update(&update)))?
                    }
                    Err(e) => {
                        log::warn!("client {} round {}: {}", id, msg.round, e);
                        link.send(Message::error(msg.round, id, &e.to_string()))?;
                    }
                }
            }
            MessageKind::RoundStart | MessageKind::RoundAck => {}
            MessageKind::Shutdown => return Ok(()),
            MessageKind::Error => {
                return Err(Error::Client { client: id, round: msg.round, message: msg.text() });
            }
            MessageKind::PartialUpdate => {
                return Err(Error::Transport(format!("client {} received a partial update", id)));
            }
        }
    }
}

/// Entry point of a `client` process: connect, learn the assigned id, serve.
pub fn run_tcp_client(addr: &str, config: &RunConfig, connect_timeout: Duration) -> Result<()> {
    let exp = Experiment::prepare(config)?;
    let mut link = TcpClient::connect(addr, connect_timeout)?;
    let id = link.id();
    let partition = exp
        .partitions
        .get(id as usize)
        .ok_or_else(|| Error::Transport(format!("assigned id {} but the config has {} clients", id, exp.partitions.len())))?;
    log::info!("client {} connected to {} with {} samples", id, addr, partition.data.len());
    serve_client(&mut link, &exp.arch, &exp.client_config(id), &partition.data)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Program started for each TCP client; defaults to the current executable.
    pub client_program: Option<PathBuf>,
    /// Keep the global model after every round in the outcome.
    pub keep_round_models: bool,
    /// Skip writing artifacts.
    pub dry: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Totals {
    pub uplink: Tally,
    pub downlink: Tally,
    /// Uplink tensor bytes had every client uploaded the full model.
    pub full_model_uplink_bytes: u64,
    pub uplink_fraction: f64,
}

pub struct RunOutcome {
    /// Round 0 is the initial model.
    pub records: Vec<MetricsRecord>,
    pub final_model: Model<f32>,
    pub round_models: Vec<Model<f32>>,
    pub histogram: SelectionHistogram,
    pub ledger: TrafficLedger,
    pub totals: Totals,
    pub contributions: Vec<u64>,
}

impl RunOutcome {
    pub fn final_accuracy(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.accuracy)
    }

    pub fn initial_accuracy(&self) -> f64 {
        self.records.first().map_or(0.0, |r| r.accuracy)
    }
}

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const HISTOGRAM_FILE: &str = "selection_histogram.csv";
pub const TRAFFIC_FILE: &str = "traffic.csv";
pub const FINAL_MODEL_FILE: &str = "model_final.ffrz";

fn checkpoint_name(round: u32) -> String {
    format!("model_round_{:04}.ffrz", round)
}

/// Runs `config` to completion and writes its artifacts to the output
/// directory.
pub fn run_experiment(config: &RunConfig, opts: &RunOptions) -> Result<RunOutcome> {
    let exp = Experiment::prepare(config)?;
    let out_dir = &config.output_dir;
    if !opts.dry {
        fs::create_dir_all(out_dir).map_err(Error::file(out_dir))?;
        fs::write(out_dir.join(CONFIG_FILE), config.to_json() + "\n").map_err(Error::file(out_dir.join(CONFIG_FILE)))?;
    }
    let started = Instant::now();
    let outcome = match &config.transport {
        TransportSpec::Loopback => run_loopback(&exp, opts)?,
        TransportSpec::Tcp(addr) => run_tcp(&exp, addr, opts)?,
    };
    log::info!(
        "{}: {} rounds in {:.1}s, accuracy {:.2}% -> {:.2}%",
        config.name,
        config.rounds,
        started.elapsed().as_secs_f64(),
        outcome.initial_accuracy(),
        outcome.final_accuracy()
    );
    if !opts.dry {
        write_artifacts(&exp, &outcome, out_dir)?;
    }
    Ok(outcome)
}

fn settings(config: &RunConfig) -> ServerSettings {
    ServerSettings {
        smoothing: config.smoothing,
        quorum: config.quorum(),
        round_timeout: Duration::from_secs_f64(config.round_timeout_secs),
    }
}

fn run_loopback(exp: &Experiment, opts: &RunOptions) -> Result<RunOutcome> {
    let (hub, clients) = loopback(exp.config.clients);
    thread::scope(|scope| {
        let mut handles = Vec::new();
        for mut link in clients {
            let id = link.id();
            let cfg = exp.client_config(id);
            let data = &exp.partitions[id as usize].data;
            let arch = &exp.arch;
            handles.push(scope.spawn(move || serve_client(&mut link, arch, &cfg, data)));
        }
        let mut server = Server::new(hub, exp.initial.clone(), exp.config.layer_budget, settings(&exp.config));
        let result = drive(exp, &mut server, opts);
        server.shutdown();
        for h in handles {
            match h.join() {
                Ok(Err(e)) => log::warn!("client thread ended with: {}", e),
                Err(_) => log::warn!("client thread panicked"),
                Ok(Ok(())) => {}
            }
        }
        result
    })
}

struct Children(Vec<Child>);

impl Drop for Children {
    fn drop(&mut self) {
        for c in &mut self.0 {
            if matches!(c.try_wait(), Ok(None)) {
                let _ = c.kill();
            }
            let _ = c.wait();
        }
    }
}

fn run_tcp(exp: &Experiment, addr: &str, opts: &RunOptions) -> Result<RunOutcome> {
    let hub = TcpHub::bind(addr)?;
    let bound = hub.local_addr()?;
    let config_path = exp.config.output_dir.join(CONFIG_FILE);
    if opts.dry || !config_path.is_file() {
        return Err(Error::Config("tcp runs need the config written to the output directory".into()));
    }
    let program = match &opts.client_program {
        Some(p) => p.clone(),
        None => std::env::current_exe()?,
    };
    let mut children = Children(Vec::new());
    for _ in 0..exp.config.clients {
        let child = Command::new(&program)
            .arg("client")
            .arg("--connect")
            .arg(bound.to_string())
            .arg("--config")
            .arg(&config_path)
            .stdin(Stdio::null())
            .spawn()
            .map_err(|e| Error::Transport(format!("cannot start {}: {}", program.display(), e)))?;
        children.0.push(child);
    }
    log::info!("listening on {} for {} client processes", bound, exp.config.clients);
    let link = hub.accept(exp.config.clients, Duration::from_secs_f64(exp.config.round_timeout_secs))?;
    let mut server = Server::new(link, exp.initial.clone(), exp.config.layer_budget, settings(&exp.config));
    let result = drive(exp, &mut server, opts);
    server.shutdown();
    for (i, c) in children.0.iter_mut().enumerate() {
        let status = c.wait()?;
        if !status.success() {
            log::warn!("client process {} exited with {}", i, status);
        }
    }
    result
}

fn drive<L: ServerLink>(exp: &Experiment, server: &mut Server<L>, opts: &RunOptions) -> Result<RunOutcome> {
    let cfg = &exp.config;
    let eval = evaluate(&server.state.model, &exp.test, EVAL_CHUNK)?;
    let mut records = vec![MetricsRecord {
        round: 0,
        accuracy: eval.accuracy,
        loss: eval.loss,
        clients: Vec::new(),
        uplink_bytes: 0,
        downlink_bytes: 0,
        uplink_header_bytes: 0,
        downlink_header_bytes: 0,
        selection_counts: vec![0; exp.initial.num_units()],
        wall_time_ms: 0.0,
    }];
    let mut round_models = Vec::new();
    for t in 1..=cfg.rounds {
        let plan = RoundPlan::sample(t, cfg.rounds, cfg.clients, cfg.client_fraction, cfg.layer_budget, cfg.seed)?;
        let record = server.run_round(&plan, &exp.test)?;
        log::debug!(
            "round {}: accuracy {:.2}% loss {:.4} uplink {} B in {:.0} ms",
            t,
            record.accuracy,
            record.loss,
            record.uplink_bytes,
            record.wall_time_ms
        );
        records.push(record);
        if opts.keep_round_models {
            round_models.push(server.state.model.clone());
        }
        if !opts.dry && cfg.checkpoint_every > 0 && t % cfg.checkpoint_every == 0 {
            io::write_checkpoint(&cfg.output_dir.join(checkpoint_name(t)), &server.state.model)?;
        }
    }
    let updates: u64 = records.iter().map(|r| r.clients.len() as u64).sum();
    let full = updates * 4 * exp.initial.param_count();
    let uplink = server.ledger.total(Direction::Uplink);
    Ok(RunOutcome {
        totals: Totals {
            uplink,
            downlink: server.ledger.total(Direction::Downlink),
            full_model_uplink_bytes: full,
            uplink_fraction: if full > 0 { uplink.bytes as f64 / full as f64 } else { 0.0 },
        },
        final_model: server.state.model.clone(),
        round_models,
        records,
        histogram: server.histogram.clone(),
        ledger: server.ledger.clone(),
        contributions: server.state.contributions.clone(),
    })
}

fn write_artifacts(exp: &Experiment, outcome: &RunOutcome, dir: &Path) -> Result<()> {
    let units = exp.initial.num_units();
    io::write_metrics_csv(&dir.join(METRICS_FILE), &outcome.records, units)?;
    io::write_histogram_csv(&dir.join(HISTOGRAM_FILE), &outcome.histogram)?;
    outcome.ledger.write_csv(&dir.join(TRAFFIC_FILE))?;
    io::write_checkpoint(&dir.join(FINAL_MODEL_FILE), &outcome.final_model)?;
    let summary = serde_json::json!({
        "config": exp.config,
        "seed": exp.config.seed,
        "architecture": {
            "name": exp.arch.name,
            "parameters": exp.initial.param_count(),
            "trainable_units": units,
        },
        "clients": exp.partitions.iter().map(|p| p.sample_count()).collect::<Vec<_>>(),
        "test_samples": exp.test.len(),
        "rounds_completed": outcome.records.len() - 1,
        "initial_accuracy": outcome.initial_accuracy(),
        "final_accuracy": outcome.final_accuracy(),
        "final_loss": outcome.records.last().map(|r| r.loss),
        "traffic": outcome.totals,
        "unit_contributions": outcome.contributions,
        "selection": io::uniformity_json(&outcome.histogram),
    });
    io::write_json(&dir.join(SUMMARY_FILE), &summary)
}
