//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {what}")]
    ShapeMismatch { what: String },

    #[error("inflowing boundary without value data: {face} (component {component})")]
    MissingBoundaryData { face: String, component: usize },

    #[error("derivative check failed for {what}: residual {residual:.3e}")]
    DerivativeMismatch { what: String, residual: f64 },

    #[error("constraint projector rejected: {what}")]
    ProjectorInvalid { what: String },

    #[error("diffusion rate bound requested but no lower-bound tensor is set")]
    MissingLambdaBound,

    #[error("metric transform matrix is singular")]
    SingularTheta,

    #[error("certificate sampling requires at least one state and one time")]
    EmptySampleSet,

    #[error("time step {dt:.3e} exceeds the stability limit {limit:.3e}")]
    CflViolation { dt: f64, limit: f64 },

    #[error("state became non-finite at t = {t}")]
    NonFiniteState { t: f64 },

    #[error("Hessian is singular; inverse propagation impossible")]
    SingularHessian,

    #[error("information matrix lost positive definiteness at t = {t}")]
    SingularInformation { t: f64 },

    #[error("trajectory too short: need {needed} samples, got {got}")]
    InsufficientTrajectory { needed: usize, got: usize },

    #[error("degenerate decay series: {reason}")]
    DegenerateSeries { reason: String },

    #[error("no closed-form control: {reason}")]
    NoClosedFormControl { reason: String },

    #[error("degenerate basis set (condition estimate {cond:.3e})")]
    DegenerateBasis { cond: f64 },

    #[error("unknown scenario `{name}`")]
    UnknownScenario { name: String },

    #[error("bad scenario parameters: {reason}")]
    BadParams { reason: String },

    #[error("bad grid: {reason}")]
    BadGrid { reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {what}")]
    Parse { what: String },
}
