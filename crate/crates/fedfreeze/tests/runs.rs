use std::path::Path;
use std::thread;
use std::time::Duration;

use fedfreeze::config::{DatasetSource, RunConfig};
use fedfreeze::io::{read_checkpoint, write_checkpoint};
use fedfreeze::runner::{self, serve_client, Experiment, RunOptions};
use fedfreeze::server::{Server, ServerSettings};
use fedfreeze::transport::{loopback, ClientLink, Direction, Message, MessageKind};
use fedfreeze::{run_experiment, Error};
use fedfreeze_core::codec::serialize_model;
use fedfreeze_core::data::BlobSpec;
use fedfreeze_core::{client_update, Architecture, LayerSpec, Model, RoundPlan};

fn config(dir: &Path, clients: usize, rounds: u32, budget: usize) -> RunConfig {
    serde_json::from_value(serde_json::json!({
        "name": "test",
        "architecture": "toy_mlp",
        "dataset": {"type": "blobs", "classes": 4, "dims": 20, "samples": 1200, "cluster_std": 0.8, "center_box": 1.0},
        "clients": clients,
        "rounds": rounds,
        "layer_budget": budget,
        "learning_rate": 0.001,
        "seed": 11,
        "output_dir": dir,
    }))
    .unwrap()
}

fn settings(quorum: usize, timeout_ms: u64) -> ServerSettings {
    ServerSettings { smoothing: false, quorum, round_timeout: Duration::from_millis(timeout_ms) }
}

#[test]
fn zero_learning_rate_single_client_keeps_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 1, 1, 6);
    cfg.learning_rate = 0.0;
    let out = run_experiment(&cfg, &RunOptions::default()).unwrap();
    let exp = Experiment::prepare(&cfg).unwrap();
    assert_eq!(out.final_model, exp.initial);
    let arch = exp.arch.clone();
    let saved = read_checkpoint(&dir.path().join(runner::FINAL_MODEL_FILE), &arch).unwrap();
    assert_eq!(saved, exp.initial);
}

#[test]
fn artifacts_are_written_and_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 4, 3, 2);
    let out = run_experiment(&cfg, &RunOptions::default()).unwrap();
    for f in [
        runner::CONFIG_FILE,
        runner::METRICS_FILE,
        runner::SUMMARY_FILE,
        runner::HISTOGRAM_FILE,
        runner::TRAFFIC_FILE,
        runner::FINAL_MODEL_FILE,
    ] {
        assert!(dir.path().join(f).is_file(), "{} missing", f);
    }
    let echo = RunConfig::load(&dir.path().join(runner::CONFIG_FILE)).unwrap();
    assert_eq!(echo, cfg);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(runner::SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(serde_json::from_value::<RunConfig>(summary["config"].clone()).unwrap(), cfg);

    let metrics = std::fs::read_to_string(dir.path().join(runner::METRICS_FILE)).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 1 + 4);
    assert!(lines[0].starts_with("t,accuracy,loss,uplink_bytes,downlink_bytes"));

    for r in &out.records[1..] {
        let up = out.ledger.round_total(r.round, Direction::Uplink);
        let down = out.ledger.round_total(r.round, Direction::Downlink);
        assert_eq!((r.uplink_bytes, r.uplink_header_bytes), (up.bytes, up.header_bytes));
        assert_eq!((r.downlink_bytes, r.downlink_header_bytes), (down.bytes, down.header_bytes));
        assert_eq!(r.downlink_bytes, 4 * 4 * out.final_model.param_count());
        assert_eq!(r.selection_counts.iter().sum::<u64>(), 4 * 2);
        let trained: u64 = r.clients.iter().flat_map(|c| c.trained_units.iter()).map(|&u| out.final_model.units()[u].param_count).sum();
        assert_eq!(r.uplink_bytes, 4 * trained);
        assert!((0.0..=100.0).contains(&r.accuracy) && r.loss >= 0.0);
    }
    for c in 0..4 {
        assert_eq!(out.histogram.client_row(c).iter().sum::<u64>(), 3 * 2);
    }
}

#[test]
fn checkpoints_follow_the_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 2, 4, 3);
    cfg.checkpoint_every = 2;
    let opts = RunOptions { keep_round_models: true, ..Default::default() };
    let out = run_experiment(&cfg, &opts).unwrap();
    let arch = out.final_model.arch().clone();
    let second = read_checkpoint(&dir.path().join("model_round_0002.ffrz"), &arch).unwrap();
    assert_eq!(second, out.round_models[1]);
    assert!(dir.path().join("model_round_0004.ffrz").is_file());
    assert!(!dir.path().join("model_round_0003.ffrz").is_file());
}

#[test]
fn same_config_gives_identical_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&config(a.path(), 3, 3, 2), &RunOptions::default()).unwrap();
    run_experiment(&config(b.path(), 3, 3, 2), &RunOptions::default()).unwrap();
    for f in [runner::METRICS_FILE, runner::HISTOGRAM_FILE, runner::TRAFFIC_FILE, runner::FINAL_MODEL_FILE] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{}", f);
    }
}

#[test]
fn invalid_configs_fail_with_named_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 2, 1, 7);
    assert!(matches!(run_experiment(&cfg, &RunOptions::default()), Err(Error::Config(m)) if m.contains("layer_budget")));
    cfg.layer_budget = 2;
    cfg.rounds = 0;
    assert!(matches!(run_experiment(&cfg, &RunOptions::default()), Err(Error::Config(_))));
    cfg.rounds = 1;
    cfg.dataset = DatasetSource::Blobs { spec: BlobSpec::new(3, 20, 100) };
    assert!(matches!(run_experiment(&cfg, &RunOptions::default()), Err(Error::Config(m)) if m.contains("classes")));
    cfg.dataset = DatasetSource::Csv { path: dir.path().join("missing.csv"), classes: None };
    assert!(matches!(run_experiment(&cfg, &RunOptions::default()), Err(Error::Config(m)) if m.contains("missing.csv")));
    cfg.architecture = dir.path().join("nope.json").to_string_lossy().into_owned();
    assert!(matches!(run_experiment(&cfg, &RunOptions::default()), Err(Error::File { .. })));
}

#[test]
fn csv_datasets_drive_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("a,b,c,label\n");
    for i in 0..60 {
        let l = i % 2;
        let s = if l == 0 { -1.0 } else { 1.0 };
        text += &format!("{},{},{},{}\n", s + 0.01 * i as f64, s, -s, l);
    }
    std::fs::write(dir.path().join("data.csv"), text).unwrap();
    let arch = Architecture::new("tiny", vec![3], vec![LayerSpec::Dense { units: 4 }, LayerSpec::Relu, LayerSpec::Dense { units: 2 }, LayerSpec::Softmax]);
    std::fs::write(dir.path().join("tiny.json"), serde_json::to_string(&arch).unwrap()).unwrap();
    std::fs::write(
        dir.path().join("run.json"),
        r#"{"architecture": "tiny.json", "dataset": {"type": "csv", "path": "data.csv"},
            "clients": 2, "rounds": 5, "layer_budget": 1, "learning_rate": 0.05, "output_dir": "OUT"}"#
            .replace("OUT", &dir.path().join("out").to_string_lossy()),
    )
    .unwrap();
    let cfg = RunConfig::load(&dir.path().join("run.json")).unwrap();
    assert!(Path::new(&cfg.architecture).is_absolute());
    let out = run_experiment(&cfg, &RunOptions::default()).unwrap();
    let (first, last) = (&out.records[0], out.records.last().unwrap());
    assert!(last.loss < first.loss, "{} -> {}", first.loss, last.loss);
    assert_eq!(last.round, 5);
}

/// Rounds with full participation and N_l = L against plain FedAvg written
/// out directly: every client trains the whole model, the server averages
/// flattened parameters by sample count.
#[test]
fn full_budget_matches_plain_fedavg() {
    let dir = tempfile::tempdir().unwrap();
    let mut layers = Vec::new();
    for _ in 0..13 {
        layers.push(LayerSpec::Dense { units: 8 });
        layers.push(LayerSpec::Relu);
    }
    layers.push(LayerSpec::Dense { units: 4 });
    layers.push(LayerSpec::Softmax);
    let arch = Architecture::new("deep", vec![20], layers);
    let arch_path = dir.path().join("deep.json");
    std::fs::write(&arch_path, serde_json::to_string(&arch).unwrap()).unwrap();
    let mut cfg = config(dir.path(), 10, 10, 14);
    cfg.architecture = arch_path.to_string_lossy().into_owned();
    let opts = RunOptions { keep_round_models: true, dry: true, ..Default::default() };
    let out = run_experiment(&cfg, &opts).unwrap();

    let exp = Experiment::prepare(&cfg).unwrap();
    let mut global = exp.initial.clone();
    for t in 1..=cfg.rounds {
        let trained: Vec<(Model<f32>, u64)> = exp
            .partitions
            .iter()
            .map(|p| {
                let u = client_update(&exp.client_config(p.client_id), &p.data, &global, t).unwrap();
                let mut m = global.clone();
                for (l, g) in u.layers {
                    m.set_layer_params(l, g).unwrap();
                }
                (m, u.sample_count)
            })
            .collect();
        let n: u64 = trained.iter().map(|(_, k)| k).sum();
        let mut next = global.clone();
        for l in 0..global.params().len() {
            for (ti, t) in next.layer_params_mut(l).iter_mut().enumerate() {
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    let s: f64 = trained.iter().map(|(m, k)| *k as f64 / n as f64 * m.layer_params(l)[ti].data()[i] as f64).sum();
                    *v = s as f32;
                }
            }
        }
        global = next;
        let got = &out.round_models[t as usize - 1];
        for (a, b) in got.params().iter().flatten().zip(global.params().iter().flatten()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-6 * x.abs().max(y.abs()).max(1.0), "round {}: {} vs {}", t, x, y);
            }
        }
        // Keep the oracle on the runner's trajectory so rounding cannot compound.
        global = got.clone();
    }
}

#[test]
fn quorum_failure_is_loud_and_partial_quorum_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 3, 2, 3);
    let exp = Experiment::prepare(&cfg).unwrap();
    let plan = RoundPlan::sample(1, 2, 3, 1.0, 3, cfg.seed).unwrap();

    // Client 2 fails every round; clients 0 and 1 serve normally.
    let run = |quorum: usize| {
        let (hub, clients) = loopback(3);
        thread::scope(|s| {
            for mut link in clients {
                let exp = &exp;
                s.spawn(move || {
                    let id = link.id();
                    if id == 2 {
                        while let Ok(m) = link.recv() {
                            match m.kind {
                                MessageKind::GlobalModel => link.send(Message::error(m.round, id, "disk on fire")).unwrap(),
                                MessageKind::Shutdown => break,
                                _ => {}
                            }
                        }
                    } else {
                        serve_client(&mut link, &exp.arch, &exp.client_config(id), &exp.partitions[id as usize].data).unwrap();
                    }
                });
            }
            let mut server = Server::new(hub, exp.initial.clone(), 3, settings(quorum, 20_000));
            let result = server.run_round(&plan, &exp.test);
            server.shutdown();
            result
        })
    };
    match run(3) {
        Err(Error::Quorum { round: 1, received: 2, sampled: 3, quorum: 3 }) => {}
        other => panic!("expected a quorum failure, got {:?}", other.map(|r| r.round)),
    }
    let record = run(2).unwrap();
    assert_eq!(record.clients.iter().map(|c| c.client).collect::<Vec<_>>(), vec![0, 1]);
}

#[test]
fn silent_clients_time_out() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 2, 1, 3);
    let exp = Experiment::prepare(&cfg).unwrap();
    let (hub, clients) = loopback(2);
    let mut server = Server::new(hub, exp.initial.clone(), 3, settings(1, 200));
    let plan = RoundPlan::sample(1, 1, 2, 1.0, 3, cfg.seed).unwrap();
    let err = server.run_round(&plan, &exp.test).unwrap_err();
    assert!(matches!(err, Error::Quorum { received: 0, .. }));
    drop(clients);
}

#[test]
fn stale_and_foreign_messages_are_ignored() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 2, 1, 6);
    let exp = Experiment::prepare(&cfg).unwrap();
    let (hub, mut clients) = loopback(2);
    let mut server = Server::new(hub, exp.initial.clone(), 6, settings(2, 5_000));
    let plan = RoundPlan::sample(1, 1, 2, 1.0, 6, cfg.seed).unwrap();
    let handle = thread::scope(|s| {
        let h = s.spawn(|| {
            for link in clients.iter_mut() {
                let id = link.id();
                assert_eq!(link.recv().unwrap().kind, MessageKind::RoundStart);
                let model = link.recv().unwrap();
                let global = fedfreeze_core::codec::deserialize_model::<f32>(&exp.arch, &model.payload).unwrap();
                let update = client_update(&exp.client_config(id), &exp.partitions[id as usize].data, &global, 1).unwrap();
                // Noise first: a message for another round and garbage bytes.
                link.send(Message::new(MessageKind::PartialUpdate, 7, id, vec![1, 2, 3])).unwrap();
                link.send(Message::new(
                    MessageKind::PartialUpdate,
                    1,
                    id,
                    fedfreeze_core::codec::encode_partial_update(&update),
                ))
                .unwrap();
            }
        });
        let r = server.run_round(&plan, &exp.test);
        h.join().unwrap();
        r
    });
    let record = handle.unwrap();
    assert_eq!(record.clients.len(), 2);
    assert_eq!(server.state.round, 1);
    assert_ne!(serialize_model(&server.state.model), serialize_model(&exp.initial));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let exp = Experiment::prepare(&config(dir.path(), 1, 1, 1)).unwrap();
    let path = dir.path().join("m.ffrz");
    write_checkpoint(&path, &exp.initial).unwrap();
    assert_eq!(read_checkpoint(&path, &exp.arch).unwrap(), exp.initial);
    std::fs::write(&path, b"FFRZ").unwrap();
    assert!(read_checkpoint(&path, &exp.arch).is_err());
}
