//! Command-line front end for GP-SSM training, prediction and evaluation.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numerical failure, 5 evaluation threshold not met.

pub mod archive;
pub mod commands;
pub mod config;
pub mod data;
pub mod hexfloat;

use std::path::Path;

use sha2::{Digest, Sha256};

use gpssm::GpssmError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
    Threshold,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Usage,
            message: msg.into(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Data,
            message: msg.into(),
        }
    }

    pub fn threshold(msg: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Threshold,
            message: msg.into(),
        }
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::data(format!("{}: {e}", path.display()))
    }

    /// An archive whose contents the model constructors reject.
    pub fn from_archive(e: GpssmError) -> Self {
        Self::data(format!("archive: {e}"))
    }

    pub fn code(&self) -> i32 {
        match self.kind {
            ErrorKind::Usage => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numerical => 4,
            ErrorKind::Threshold => 5,
        }
    }

    pub fn context(mut self, prefix: impl std::fmt::Display) -> Self {
        self.message = format!("{prefix}: {}", self.message);
        self
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<GpssmError> for CliError {
    fn from(e: GpssmError) -> Self {
        let kind = match e {
            GpssmError::Configuration(_) => ErrorKind::Usage,
            GpssmError::InvalidArgument(_) => ErrorKind::Data,
            GpssmError::SingularMatrix { .. }
            | GpssmError::DegenerateWeights { .. }
            | GpssmError::NonFiniteGradient { .. }
            | GpssmError::Numerical(_)
            | GpssmError::Resource(_) => ErrorKind::Numerical,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Short digest of a parameter vector: the first 16 hex digits of the
/// SHA-256 of its little-endian bit patterns.
pub fn theta_digest(theta: &[f64]) -> String {
    let bytes: Vec<u8> = theta.iter().flat_map(|v| v.to_bits().to_le_bytes()).collect();
    sha256_hex(&bytes)[..16].to_string()
}
