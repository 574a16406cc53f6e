use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid field: {0}")]
    InvalidField(String),
    #[error("node ({q}, {p}) out of range for a {m}x{m} grid")]
    Index { q: usize, p: usize, m: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("four-color tiling needs an even grid side, got {0}")]
    Tiling(usize),
    #[error("row {row} of the operator is identically zero")]
    ZeroRow { row: usize },
    #[error("grid side {m} exceeds the dense limit {limit}")]
    TooLarge { m: usize, limit: usize },
    #[error("degenerate stencil at fine node ({q}, {p}): collapsed denominator is zero")]
    DegenerateStencil { q: usize, p: usize },
    #[error("coarse grid side {0} is below the minimum of 4")]
    CoarseTooSmall(usize),
    #[error("coarse operator is singular; use a positive diagonal shift (delta > 0)")]
    SingularPropagator,
    #[error("singular coarse system with incompatible right-hand side (mean {mean:e})")]
    Compatibility { mean: f64 },
    #[error("improvement is undefined for rate {rate} and reference {reference}")]
    UndefinedImprovement { rate: f64, reference: f64 },
    #[error("geometric mean needs positive values, got {0}")]
    NonPositive(f64),
    #[error("empty input")]
    Empty,
    #[error("invalid smoother: {0}")]
    InvalidSmoother(String),
    #[error("invalid cycle: {0}")]
    InvalidCycle(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("every sample in the batch diverged")]
    AllDiverged,
    #[error("residual history has {len} entries, window needs index {last}")]
    ShortHistory { len: usize, last: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
