use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid control: {0}")]
    InvalidControl(String),

    #[error("action {action:?} lies outside the action box")]
    ActionOutOfBounds { action: Vec<f64> },

    #[error("integration diverged at t = {t}")]
    IntegrationDiverged { t: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid belief: {0}")]
    InvalidBelief(String),

    #[error("observation {x:?} has zero likelihood under the current belief")]
    ImpossibleObservation { x: Vec<f64> },

    #[error("filter event {index}: {source}")]
    FilterEvent {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("action-dependent hazard or jump kernel requires a regularization kernel")]
    RegularizationRequired,

    #[error("invalid regularization kernel: {0}")]
    InvalidKernel(String),

    #[error("simplex grid with {points} points exceeds the limit of {limit}")]
    GridTooLarge { points: u128, limit: u128 },

    #[error("empty control family")]
    EmptyFamily,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("config validation error: {0}")]
    ConfigValidation(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
