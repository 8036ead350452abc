use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("joint {joint} at {value} rad outside [{lower}, {upper}]")]
    JointLimit {
        joint: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("time went backwards: {now} < {last}")]
    TimeReversed { now: f64, last: f64 },
    #[error("log format: {0}")]
    Log(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
