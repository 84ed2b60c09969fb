use thiserror::Error;

use crate::panel::Arm;

/// Everything that can go wrong between ingestion and reporting.
#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate observation for user {user_id} on day {day}")]
    DuplicateObservation { user_id: String, day: u32 },

    #[error("no users to aggregate")]
    EmptyPanel,

    #[error("invalid record for user {user_id}: {reason}")]
    InvalidRecord { user_id: String, reason: String },

    #[error("experiment duration must be at least 2 days, got {0}")]
    DurationTooShort(u32),

    #[error("line {line}: {reason}")]
    MalformedCsv { line: u64, reason: String },

    #[error("estimator unavailable at t = {t}: {reason}")]
    Unavailable { t: u32, reason: String },

    #[error("offset out of range: t = {t}, k = {k}, duration = {duration}")]
    OutOfRange { t: u32, k: u32, duration: u32 },

    #[error("curve {curve} is unfittable: {points} usable points, need at least 4")]
    Unfittable { curve: String, points: usize },

    #[error("bad fit input: {0}")]
    BadFitInput(String),

    #[error("no {arm} users in the first {window} days")]
    EmptyArm { arm: Arm, window: u32 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("adjusted daily retention {value} outside [0, 1] at elapsed day {day}")]
    InvalidHazard { day: u32, value: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
