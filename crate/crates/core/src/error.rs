//! One error type over every module, with stable machine-readable codes and
//! process exit codes.

use thiserror::Error;

use crate::collector::CollectError;
use crate::fixtures::FixtureError;
use crate::harm::HarmError;
use crate::inventory::{InventoryError, ValidationReport};
use crate::metrics::MetricsError;
use crate::mtd::MtdError;
use crate::orchestrator::{DeployError, UnknownKind};
use crate::provider::{LatencyError, ProviderError};
use crate::vuln::VulnError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error(transparent)]
    Inventory(#[from] InventoryError),
    #[error("inventory is invalid: {} violation(s), first: {}", .0.violations.len(),
        .0.violations.first().map(|v| v.detail.as_str()).unwrap_or(""))]
    InvalidInventory(ValidationReport),
    #[error(transparent)]
    Vuln(#[from] VulnError),
    #[error(transparent)]
    Harm(#[from] HarmError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Mtd(#[from] MtdError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Latency(#[from] LatencyError),
    #[error(transparent)]
    Collect(#[from] CollectError),
    #[error(transparent)]
    Deploy(#[from] DeployError),
    #[error(transparent)]
    UnknownKind(#[from] UnknownKind),
    #[error(transparent)]
    Fixture(#[from] FixtureError),
    #[error("malformed action: {0}")]
    MalformedAction(String),
    #[error("version conflict: {0}")]
    VersionConflict(String),
    #[error("unknown version {0}")]
    UnknownVersion(u64),
    #[error("snapshot store: {0}")]
    Store(String),
    #[error("{0}")]
    Io(String),
}

/// Every code an [`Error`] can carry, in exit-code order.
pub const ERROR_CODES: &[&str] = &[
    "REFERENCES_UNKNOWN_VM",
    "SUBNET_EXHAUSTED",
    "INVALID_INVENTORY",
    "UNKNOWN_CVE",
    "MALFORMED_REPORT",
    "UNKNOWN_VM",
    "INVALID_RECORD",
    "MALFORMED_CATALOG",
    "GATE_SPEC_MISMATCH",
    "GATE_SPEC_PARSE",
    "NO_TARGET",
    "UNKNOWN_TARGET",
    "MALFORMED_HARM",
    "PATH_EXPLOSION",
    "EMPTY_POOL",
    "UNKNOWN_METRIC",
    "CONSTRAINT_VIOLATION",
    "AUTH_FAILED",
    "TOKEN_EXPIRED",
    "TOKEN_INVALID",
    "UNKNOWN_IMAGE",
    "UNKNOWN_HOST",
    "UNKNOWN_REFS",
    "CAPACITY_EXCEEDED",
    "SAME_HOST",
    "VM_BUSY",
    "ENDPOINT_UNREACHABLE",
    "PARSE_ERROR",
    "MALFORMED_LATENCY",
    "UNKNOWN_KIND",
    "DEPLOY_REJECTED",
    "STATE_MISMATCH",
    "DEPLOY_TIMEOUT",
    "FIXTURE_IO",
    "FIXTURE_PARSE",
    "MALFORMED_ACTION",
    "VERSION_CONFLICT",
    "UNKNOWN_VERSION",
    "STORE_ERROR",
    "IO_ERROR",
];

/// Exit code of the first entry in [`ERROR_CODES`]. 1 is kept for
/// unclassified failures and 2 for usage errors.
pub const FIRST_EXIT_CODE: i32 = 10;

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::Inventory(e) => e.code(),
            Error::InvalidInventory(_) => "INVALID_INVENTORY",
            Error::Vuln(e) => e.code(),
            Error::Harm(e) => e.code(),
            Error::Metrics(e) => e.code(),
            Error::Mtd(e) => e.code(),
            Error::Provider(e) => e.code(),
            Error::Latency(e) => e.code(),
            Error::Collect(e) => e.code(),
            Error::Deploy(e) => e.code(),
            Error::UnknownKind(e) => e.code(),
            Error::Fixture(e) => e.code(),
            Error::MalformedAction(_) => "MALFORMED_ACTION",
            Error::VersionConflict(_) => "VERSION_CONFLICT",
            Error::UnknownVersion(_) => "UNKNOWN_VERSION",
            Error::Store(_) => "STORE_ERROR",
            Error::Io(_) => "IO_ERROR",
        }
    }

    pub fn exit_code(&self) -> i32 {
        exit_code_for(self.code())
    }
}

pub fn exit_code_for(code: &str) -> i32 {
    ERROR_CODES
        .iter()
        .position(|c| *c == code)
        .map(|i| FIRST_EXIT_CODE + i as i32)
        .unwrap_or(1)
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn exit_codes_are_distinct_and_cover_codes() {
        let set: BTreeSet<_> = ERROR_CODES.iter().collect();
        assert_eq!(set.len(), ERROR_CODES.len());
        let samples: Vec<Error> = vec![
            MetricsError::EmptyPool.into(),
            ProviderError::AuthFailed.into(),
            ProviderError::VmBusy("x".into()).into(),
            DeployError::Rejected(ProviderError::SameHost("x".into())).into(),
            DeployError::StateMismatch(String::new()).into(),
            HarmError::NoTarget.into(),
            UnknownKind("x".into()).into(),
            Error::MalformedAction("x".into()),
        ];
        for e in samples {
            assert!(e.exit_code() >= FIRST_EXIT_CODE, "{} unmapped", e.code());
        }
        assert_eq!(exit_code_for("NOPE"), 1);
    }
}
