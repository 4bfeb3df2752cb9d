//! Run configuration, read from JSON.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fedfreeze_core::data::BlobSpec;
use fedfreeze_core::{Architecture, OptimizerKind};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Bundled architecture name (`vgg16`, `casa_mlp`, `toy_mlp`) or a
    /// descriptor file.
    pub architecture: String,
    pub dataset: DatasetSource,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    pub clients: usize,
    #[serde(default = "default_fraction")]
    pub client_fraction: f64,
    pub rounds: u32,
    /// Trainable units each client trains per round.
    pub layer_budget: usize,
    #[serde(default = "default_epochs")]
    pub epochs: u32,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub smoothing: bool,
    #[serde(default)]
    pub partition: PartitionScheme,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub transport: TransportSpec,
    /// Updates needed to aggregate a round; all sampled clients when unset.
    #[serde(default)]
    pub quorum: Option<usize>,
    #[serde(default = "default_timeout")]
    pub round_timeout_secs: f64,
    /// Write a checkpoint every this many rounds; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: u32,
}

fn default_name() -> String {
    "run".into()
}
fn default_test_fraction() -> f64 {
    0.2
}
fn default_fraction() -> f64 {
    1.0
}
fn default_epochs() -> u32 {
    1
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    0.01
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}
fn default_timeout() -> f64 {
    600.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DatasetSource {
    Blobs {
        #[serde(flatten)]
        spec: BlobSpec,
    },
    /// Header row, float feature columns, integer label in the last column.
    Csv {
        path: PathBuf,
        /// Class count; inferred as `max label + 1` when unset.
        #[serde(default)]
        classes: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PartitionScheme {
    #[default]
    Iid,
    Dirichlet(f64),
}

impl FromStr for PartitionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "iid" => Ok(PartitionScheme::Iid),
            Some(("dirichlet", alpha)) => alpha
                .parse::<f64>()
                .ok()
                .filter(|a| *a > 0.0 && a.is_finite())
                .map(PartitionScheme::Dirichlet)
                .ok_or_else(|| Error::Config(format!("bad dirichlet alpha {:?}", alpha))),
            _ => Err(Error::Config(format!("partition must be \"iid\" or \"dirichlet:<alpha>\", got {:?}", s))),
        }
    }
}

impl fmt::Display for PartitionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartitionScheme::Iid => write!(f, "iid"),
            PartitionScheme::Dirichlet(a) => write!(f, "dirichlet:{}", a),
        }
    }
}

impl TryFrom<String> for PartitionScheme {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PartitionScheme> for String {
    fn from(p: PartitionScheme) -> String {
        p.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TransportSpec {
    #[default]
    Loopback,
    /// Listen address for the server; port 0 picks a free one.
    Tcp(String),
}

impl FromStr for TransportSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "loopback" => Ok(TransportSpec::Loopback),
            Some(("tcp", addr)) if !addr.is_empty() => Ok(TransportSpec::Tcp(addr.to_string())),
            _ => Err(Error::Config(format!("transport must be \"loopback\" or \"tcp:<addr>\", got {:?}", s))),
        }
    }
}

impl fmt::Display for TransportSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransportSpec::Loopback => write!(f, "loopback"),
            TransportSpec::Tcp(addr) => write!(f, "tcp:{}", addr),
        }
    }
}

impl TryFrom<String> for TransportSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TransportSpec> for String {
    fn from(t: TransportSpec) -> String {
        t.to_string()
    }
}

impl RunConfig {
    /// Parses a config file. Relative input paths are resolved against the
    /// file's directory so the resolved config can be replayed from anywhere.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::file(path))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if crate::io::builtin_descriptor(&self.architecture).is_none() {
            let p = Path::new(&self.architecture);
            if p.is_relative() {
                self.architecture = base.join(p).to_string_lossy().into_owned();
            }
        }
        if let DatasetSource::Csv { path, .. } = &mut self.dataset {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Clients sampled per round.
    pub fn sampled_clients(&self) -> usize {
        ((self.client_fraction * self.clients as f64).round() as usize).clamp(1, self.clients.max(1))
    }

    pub fn quorum(&self) -> usize {
        self.quorum.unwrap_or_else(|| self.sampled_clients())
    }

    pub fn validate(&self, arch: &Architecture) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.clients == 0 {
            return bad("clients must be at least 1".into());
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return bad(format!("client_fraction {} outside (0, 1]", self.client_fraction));
        }
        let units = arch.num_units()?;
        if self.layer_budget == 0 || self.layer_budget > units {
            return bad(format!("layer_budget {} outside 1..={} for {}", self.layer_budget, units, arch.name));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be finite and >= 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad(format!("test_fraction {} outside [0, 1)", self.test_fraction));
        }
        let q = self.quorum();
        if q == 0 || q > self.sampled_clients() {
            return bad(format!("quorum {} outside 1..={}", q, self.sampled_clients()));
        }
        if !(self.round_timeout_secs > 0.0) {
            return bad("round_timeout_secs must be positive".into());
        }
        if let DatasetSource::Csv { path, .. } = &self.dataset {
            if !path.is_file() {
                return bad(format!("dataset file {} does not exist", path.display()));
            }
        }
        Ok(())
    }
}
