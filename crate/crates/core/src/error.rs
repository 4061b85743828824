use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate switching: alpha + xi must be positive")]
    DegenerateSwitching,

    #[error("alpha = 0: the resistant phenotype is absent at equilibrium (R-free regime)")]
    RFreeRegime,

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("homogeneous kinetics are not stable: tr(J) = {trace:.6e}, det(J) = {det:.6e}")]
    KineticInstability { trace: f64, det: f64 },

    #[error("signal relaxation slope must be negative, got {0}")]
    NonRelaxingSignal(f64),

    #[error("non-finite value encountered at t = {t}: {what}")]
    NonFinite { t: f64, what: String },

    #[error("linear solver did not converge: residual {residual:.3e} after {iterations} iterations")]
    SolverDiverged { residual: f64, iterations: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

pub type Result<T> = std::result::Result<T, Error>;
