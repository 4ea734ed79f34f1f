use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("invalid value for {key}: {value} (allowed: {allowed})")]
    InvalidConfig {
        key: String,
        value: String,
        allowed: String,
    },
    #[error("no data: {0}")]
    EmptyData(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("numerical failure on task {task} at step {step}: {detail}")]
    Numerical {
        task: usize,
        step: usize,
        detail: String,
    },
}

impl Error {
    pub(crate) fn invalid(
        key: impl Into<String>,
        value: impl core::fmt::Display,
        allowed: impl Into<String>,
    ) -> Self {
        Error::InvalidConfig {
            key: key.into(),
            value: alloc::format!("{value}"),
            allowed: allowed.into(),
        }
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            actual,
        })
    }
}

pub(crate) fn check_finite(what: &'static str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(index) => Err(Error::NonFinite { what, index }),
    }
}
