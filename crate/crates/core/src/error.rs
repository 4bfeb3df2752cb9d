use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("invalid freeze mask: {0}")]
    Mask(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("round mismatch: expected {expected}, got {got}")]
    RoundMismatch { expected: u32, got: u32 },
    #[error("training diverged for client {client} in round {round} (loss {loss})")]
    Divergence { client: u32, round: u32, loss: f64 },
    #[error("empty partition: {0}")]
    EmptyPartition(String),
    #[error("truncated input: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    Version(u16),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed encoding: {0}")]
    Malformed(String),
}
