use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("degenerate embedding: output has zero norm before normalization")]
    DegenerateEmbedding,
    #[error("zero vector passed to {0}")]
    ZeroVector(&'static str),
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("diverged: non-finite gradient")]
    Diverged,
    #[error("no candidates: every latent diverged")]
    NoCandidates,
    #[error("degenerate pseudo target: top-k features cancel out")]
    DegeneratePseudoTarget,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{0} out of range")]
    OutOfRange(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("power iteration broke down: iterate collapsed to zero")]
    Breakdown,
    #[error("unsupported document version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("report has no sweep results")]
    MissingSweep,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn check_len(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
