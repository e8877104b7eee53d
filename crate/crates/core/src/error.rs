use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("point {0:?} lies outside the domain")]
    OutOfDomain([f64; 3]),
    #[error("degenerate grid: {0}")]
    DegenerateGrid(String),
    #[error("grid spacing {spacing:.3e} m resolves the {diameter:.3e} m aperture with only {nodes:.1} nodes")]
    UnderResolved { spacing: f64, diameter: f64, nodes: f64 },
    #[error("particle starts inside conductor `{0}`")]
    StartsInConductor(String),
    #[error("trajectory did not reach the CEM ({0})")]
    NotDetected(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no signal: corrected electron count {0} is not positive")]
    NoSignal(f64),
    #[error("unresolved peak: {0}")]
    UnresolvedPeak(String),
    #[error("fit did not converge after {0} iterations")]
    FitDiverged(usize),
    #[error("optimizer found no detected ions anywhere in the coarse pass; widen the bounds")]
    NoSignalInBounds,
    #[error("field cache: {0}")]
    Cache(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
