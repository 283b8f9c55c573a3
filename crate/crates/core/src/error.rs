use thiserror::Error;

/// Errors raised by the numerical pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix not unimodular: |det| = {0}")]
    NonUnimodular(f64),
    #[error("matrix not hyperbolic: eigenvalue modulus {0} lies on the unit circle")]
    NotHyperbolic(f64),
    #[error("perturbation amplitude {amplitude} exceeds cap {cap}")]
    AmplitudeTooLarge { amplitude: f64, cap: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unsupported system: {0}")]
    Unsupported(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate cocycle: R-diagonal entry {0:e} underflowed")]
    DegenerateCocycle(f64),
    #[error("level {level} out of range (u = {u})")]
    LevelOutOfRange { level: usize, u: usize },
    #[error("frame transport did not converge: principal angle {0:e}")]
    NonConvergent(f64),
    #[error("singular matrix: smallest singular value {0:e}")]
    Singular(f64),

    #[error("splitting not dominated for any N <= {0}")]
    NotDominatedWithin(usize),

    #[error("graph dispersion {actual} exceeds bound {bound}")]
    DispersionExceeded { actual: f64, bound: f64 },
    #[error("point is not on the leaf patch (offset {0:e})")]
    NotOnLeaf(f64),

    #[error("epsilon {epsilon} must be smaller than the patch radius {radius}")]
    EpsilonTooLarge { epsilon: f64, radius: f64 },
    #[error("Bowen ball reaches the patch boundary")]
    PatchTooSmall,
    #[error("candidate spacing {spacing:e} coarser than epsilon/10 = {limit:e}")]
    ResolutionTooCoarse { spacing: f64, limit: f64 },
    #[error("candidate grid of {0} points exceeds the configured budget")]
    CandidateBudgetExceeded(usize),
    #[error("no two adjacent epsilon slopes agree within 5%: {slopes:?}")]
    NoPlateau { slopes: Vec<(f64, f64)> },
    #[error("partition mesh {mesh} coarser than the largest epsilon {epsilon}")]
    MeshTooCoarse { mesh: f64, epsilon: f64 },
    #[error("map is not volume preserving: ||det Df| - 1| reaches {0:e}")]
    NotVolumePreserving(f64),
}

pub type Result<T> = std::result::Result<T, Error>;
