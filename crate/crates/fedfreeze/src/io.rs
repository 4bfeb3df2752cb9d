//! Descriptor, dataset, checkpoint and report files.

use std::fs;
use std::io::Write;
use std::path::Path;

use fedfreeze_core::codec::{deserialize_model, serialize_model};
use fedfreeze_core::metrics::{selection_uniformity, MetricsRecord, SelectionHistogram};
use fedfreeze_core::{Architecture, Dataset, Model};
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::{Error, Result};

const BUILTIN: [(&str, &str); 3] = [
    ("vgg16", include_str!("../fixtures/vgg16.json")),
    ("casa_mlp", include_str!("../fixtures/casa_mlp.json")),
    ("toy_mlp", include_str!("../fixtures/toy_mlp.json")),
];

pub fn builtin_descriptor(name: &str) -> Option<&'static str> {
    BUILTIN.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

pub fn parse_descriptor(text: &str) -> Result<Architecture> {
    let arch: Architecture = serde_json::from_str(text)?;
    arch.shapes()?;
    Ok(arch)
}

/// Loads a bundled architecture by name, or a descriptor file.
pub fn load_architecture(name_or_path: &str) -> Result<Architecture> {
    match builtin_descriptor(name_or_path) {
        Some(text) => parse_descriptor(text),
        None => {
            let text = fs::read_to_string(name_or_path).map_err(Error::file(name_or_path))?;
            parse_descriptor(&text).map_err(|e| Error::Config(format!("{}: {}", name_or_path, e)))
        }
    }
}

/// Reads a CSV with a header row, float feature columns and an integer
/// label in the last column.
pub fn load_csv_dataset(path: &Path, classes: Option<usize>) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let columns = reader.headers()?.len();
    if columns < 2 {
        return Err(Error::Config(format!("{}: need feature columns and a label column", path.display())));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let bad = |what: &str| Error::Config(format!("{}: row {}: {}", path.display(), row + 1, what));
        for field in record.iter().take(columns - 1) {
            let v: f32 = field.trim().parse().map_err(|_| bad(&format!("bad feature {:?}", field)))?;
            features.push(v);
        }
        let label = &record[columns - 1];
        labels.push(label.trim().parse::<usize>().map_err(|_| bad(&format!("bad label {:?}", label)))?);
    }
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Ok(Dataset::new(vec![columns - 1], features, labels, classes)?)
}

pub fn write_checkpoint(path: &Path, model: &Model<f32>) -> Result<()> {
    fs::write(path, serialize_model(model)).map_err(Error::file(path))
}

pub fn read_checkpoint(path: &Path, arch: &Architecture) -> Result<Model<f32>> {
    let bytes = fs::read(path).map_err(Error::file(path))?;
    Ok(deserialize_model(arch, &bytes)?)
}

/// Per-round metrics: one row per round, round 0 being the initial model.
pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord], units: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "t".to_string(),
        "accuracy".into(),
        "loss".into(),
        "uplink_bytes".into(),
        "downlink_bytes".into(),
        "header_bytes".into(),
    ];
    header.extend((0..units).map(|u| format!("layer_{}", u)));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.round.to_string(),
            format!("{:.6}", r.accuracy),
            format!("{:.8}", r.loss),
            r.uplink_bytes.to_string(),
            r.downlink_bytes.to_string(),
            (r.uplink_header_bytes + r.downlink_header_bytes).to_string(),
        ];
        row.extend(r.selection_counts.iter().map(u64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Selection counts per (client, unit) over the run.
pub fn write_histogram_csv(path: &Path, hist: &SelectionHistogram) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["client".to_string()];
    header.extend((0..hist.units()).map(|u| format!("layer_{}", u)));
    w.write_record(&header)?;
    for c in 0..hist.clients() {
        let mut row = vec![c.to_string()];
        row.extend(hist.client_row(c).iter().map(u64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path).map_err(Error::file(path))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Upper `p` quantile of chi-square with `df` degrees of freedom; NaN for df = 0.
pub fn chi_square_quantile(df: usize, p: f64) -> f64 {
    match ChiSquared::new(df as f64) {
        Ok(d) => d.inverse_cdf(p),
        Err(_) => f64::NAN,
    }
}

/// Uniformity numbers for the summary; `None` when nothing was recorded.
pub fn uniformity_json(hist: &SelectionHistogram) -> serde_json::Value {
    match selection_uniformity(hist) {
        Ok(u) => serde_json::json!({
            "frequencies": u.frequencies,
            "expected": u.expected_frequency,
            "max_abs_deviation": u.max_abs_deviation,
            "max_client_deviation": u.max_client_deviation,
            "chi_square": u.chi_square_stat,
            "degrees_of_freedom": u.degrees_of_freedom,
            "chi_square_critical_99": chi_square_quantile(u.degrees_of_freedom, 0.99),
        }),
        Err(_) => serde_json::Value::Null,
    }
}
