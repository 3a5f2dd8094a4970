//! Error type shared by every engine module.

use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("coefficient `{name}` returned a non-finite value at t={t}, x={x:?}, u={u:?}, v={v:?}")]
    NonFiniteCoefficient {
        name: &'static str,
        t: f64,
        x: Vec<f64>,
        u: Vec<f64>,
        v: Vec<f64>,
    },
    #[error("control space dimensions differ between players: {u_dim} vs {v_dim}")]
    DimensionMismatch { u_dim: usize, v_dim: usize },
    #[error("sign condition fails at t={t}, u={u}: no zero of phi inside [-kappa|u|, kappa|u|]")]
    SignConditionViolated { t: f64, u: f64 },
    #[error("requested allocation of {requested} elements exceeds the cap of {cap}")]
    AllocationTooLarge { requested: usize, cap: usize },
    #[error("time grids do not match: {context}")]
    GridMismatch { context: String },
    #[error("control spaces do not match")]
    SpaceMismatch,
    #[error("event masks are not a partition: path {path} is covered {count} times")]
    NotAPartition { path: usize, count: usize },
    #[error("coefficient set carries no control neutralizer")]
    MissingNeutralizer,
    #[error("no zero of phi found on [-{radius}, {radius}] at t={t}, u={u}")]
    NoZeroFound { t: f64, u: f64, radius: f64 },
    #[error("strategy growth bound violated at path {path}, step {step}: gauge {gauge} > {bound}")]
    GrowthViolated {
        path: usize,
        step: usize,
        gauge: f64,
        bound: f64,
    },
    #[error("state became non-finite at path {path}, step {step}")]
    NonFiniteState { path: usize, step: usize },
    #[error("delta={delta} outside (0, {horizon})")]
    DeltaOutOfRange { delta: f64, horizon: f64 },
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
    #[error("regression normal equations are singular beyond recovery (lambda={lambda})")]
    SingularRegression { lambda: f64 },
    #[error("non-finite value in backward solve at step {step}")]
    NonFiniteValue { step: usize },
    #[error("query point (t={t}, x={x}) outside the value grid hull")]
    GridTooCoarse { t: f64, x: f64 },
    #[error("margin epsilon={epsilon} must exceed {required} (3x the grid standard error)")]
    EpsilonTooSmall { epsilon: f64, required: f64 },
    #[error("empty grid: {0}")]
    EmptyGrid(&'static str),
    #[error("dyadic level {level} exceeds the supported maximum {max}")]
    LevelTooDeep { level: usize, max: usize },
    #[error("CFL violated: requested dt={dt} exceeds the stable bound {bound}")]
    CflViolated { dt: f64, bound: f64 },
    #[error("PDE solution became non-finite at layer {layer}")]
    NonFiniteSolution { layer: usize },
    #[error("stencil point (layer={layer}, node={node}) touches the grid boundary")]
    BoundaryPoint { layer: usize, node: usize },
    #[error("plot kind does not match the task result")]
    KindMismatch,
    #[error("invalid configuration at `{field}`: {message}")]
    ConfigInvalid { field: String, message: String },
    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
