use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("operator is not positive: smallest eigenvalue {min_eigenvalue:e} below -{tolerance:e}")]
    NotPositive { min_eigenvalue: f64, tolerance: f64 },
    #[error("operator is not hermitian: deviation {deviation:e}")]
    NotHermitian { deviation: f64 },
    #[error("non-finite entries encountered in {0}")]
    NonFinite(&'static str),
    #[error("state has vanishing norm ({norm:e}); history is impossible under the model")]
    ImpossibleHistory { norm: f64 },
    #[error("flash times must be strictly increasing within a type (type {kind}, index {index})")]
    NonIncreasingTimes { kind: usize, index: usize },
    #[error("time {t} precedes the initial time {t0}")]
    BeforeInitialTime { t: f64, t0: f64 },
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("bisection did not converge after {iterations} iterations")]
    BisectionFailed { iterations: usize },
    #[error("empty symmetric subspace: {particles} fermions on {sites} sites")]
    EmptySubspace { particles: usize, sites: usize },
    #[error("Hamiltonian couples the subsystems; only non-interacting systems are supported")]
    InteractingHamiltonian,
    #[error("surface sample at x = {x} lies outside the reliable window [{lo}, {hi}]")]
    OutsideQuadratureWindow { x: f64, lo: f64, hi: f64 },
    #[error("point is not on the surface (offset {offset:e})")]
    NotOnSurface { offset: f64 },
    #[error("Gaussian tail mass {tail:e} outside the sampled rapidity range")]
    TailTooHeavy { tail: f64 },
    #[error("re-synthesis residual {residual:e} exceeds tolerance {tolerance:e}")]
    ResynthesisResidual { residual: f64, tolerance: f64 },
    #[error("pseudo-inverse cutoff engaged: {dropped} directions dropped below relative cutoff")]
    IllConditioned { dropped: usize },
    #[error("probability leaked through the light cone ({leakage:e}) beyond the bound {bound:e}")]
    Leakage { leakage: f64, bound: f64 },
    #[error("quadrature did not converge: {0}")]
    Quadrature(String),
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;
