use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use fedfreeze::config::RunConfig;
use fedfreeze::runner::{run_experiment, run_tcp_client, RunOptions};
use fedfreeze::{io, report};
use fedfreeze_core::count_parameters;

#[derive(Parser)]
#[command(name = "fedfreeze", version, about = "Federated averaging with random per-client layer freezing")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Serve as one client of a TCP run.
    Client {
        #[arg(long)]
        connect: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        connect_timeout: f64,
    },
    /// Print per-layer and total parameter counts of an architecture.
    CountParams {
        /// Descriptor file or bundled name (vgg16, casa_mlp, toy_mlp).
        descriptor: String,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Monte Carlo estimate of uplink traffic under random layer selection.
    EstimateTraffic {
        descriptor: String,
        /// Layers (trainable units) each client trains per round.
        #[arg(long)]
        layers: usize,
        #[arg(long)]
        clients: usize,
        #[arg(long)]
        rounds: usize,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

fn thousands(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn count_params(descriptor: &str, format: Format) -> anyhow::Result<String> {
    let arch = io::load_architecture(descriptor)?;
    let counts = count_parameters(&arch)?;
    match format {
        Format::Json => {
            let layers: Vec<_> = counts
                .per_layer
                .iter()
                .map(|l| {
                    serde_json::json!({
                        "index": l.index,
                        "kind": l.kind,
                        "output_shape": l.output_shape,
                        "params": l.total(),
                        "trainable": l.trainable,
                        "non_trainable": l.non_trainable,
                    })
                })
                .collect();
            let doc = serde_json::json!({
                "name": arch.name,
                "total": counts.total,
                "trainable": counts.trainable,
                "non_trainable": counts.non_trainable,
                "trainable_units": counts.trainable_units,
                "layers": layers,
            });
            Ok(serde_json::to_string_pretty(&doc)? + "\n")
        }
        Format::Text => {
            let mut out = format!("{:<6} {:<12} {:<18} {:>12}\n", "layer", "kind", "output", "params");
            for l in &counts.per_layer {
                let shape = format!("{:?}", l.output_shape);
                writeln!(out, "{:<6} {:<12} {:<18} {:>12}", l.index, l.kind, shape, thousands(l.total()))?;
            }
            writeln!(out, "total params: {}", thousands(counts.total))?;
            writeln!(out, "trainable params: {}", thousands(counts.trainable))?;
            writeln!(out, "non-trainable params: {}", thousands(counts.non_trainable))?;
            writeln!(out, "trainable units: {}", counts.trainable_units)?;
            Ok(out)
        }
    }
}

/// A closed pipe (`| head`) is not an error worth reporting.
fn emit(text: String) -> anyhow::Result<()> {
    match std::io::stdout().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Run { config } => RunConfig::load(&config).and_then(|cfg| {
            let outcome = run_experiment(&cfg, &RunOptions::default())?;
            println!(
                "{}: final accuracy {:.2}% after {} rounds, uplink {:.1}% of full-model bytes; artifacts in {}",
                cfg.name,
                outcome.final_accuracy(),
                cfg.rounds,
                100.0 * outcome.totals.uplink_fraction,
                cfg.output_dir.display()
            );
            Ok(())
        }).map_err(anyhow::Error::from),
        Cmd::Client { connect, config, connect_timeout } => RunConfig::load(&config)
            .and_then(|cfg| run_tcp_client(&connect, &cfg, Duration::from_secs_f64(connect_timeout)))
            .map_err(anyhow::Error::from),
        Cmd::CountParams { descriptor, format } => count_params(&descriptor, format).and_then(emit),
        Cmd::EstimateTraffic { descriptor, layers, clients, rounds, trials, seed, format } => (|| {
            let arch = io::load_architecture(&descriptor)?;
            let rep = report::traffic_report(&arch, layers, clients, rounds, trials, seed)?;
            emit(match format {
                Format::Text => rep.to_string(),
                Format::Json => serde_json::to_string_pretty(&rep)? + "\n",
            })
        })(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::FAILURE
        }
    }
}
