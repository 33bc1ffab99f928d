//! Process exit codes and the error kinds that select them.

use std::fmt;

use gddm::diffusion::DiffusionError;
use gddm::sampler::SamplerError;

pub const OK: u8 = 0;
pub const USAGE: u8 = 1;
pub const DATA: u8 = 2;
pub const NUMERIC: u8 = 3;
pub const VERIFICATION: u8 = 4;

/// Bad flags or flag combinations, detected before any compute.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// One or more verification suites failed.
#[derive(Debug)]
pub struct VerificationFailed(pub Vec<String>);

impl fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "verification failed: {}", self.0.join(", "))
    }
}

impl std::error::Error for VerificationFailed {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Maps an error chain to an exit code. Anything unrecognised is a data or
/// format problem.
pub fn code_of(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return USAGE;
        }
        if cause.is::<VerificationFailed>() {
            return VERIFICATION;
        }
        match cause.downcast_ref::<DiffusionError>() {
            Some(DiffusionError::Diverged { .. }) => return NUMERIC,
            Some(DiffusionError::InvalidArgument(_)) => return USAGE,
            _ => {}
        }
        match cause.downcast_ref::<SamplerError>() {
            Some(SamplerError::NonFinite { .. }) => return NUMERIC,
            Some(SamplerError::InvalidArgument(_)) | Some(SamplerError::MissingTaskModel(_)) => {
                return USAGE
            }
            _ => {}
        }
    }
    DATA
}
