//! Diagnostics shared by the parser, verifier, passes and simulators.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    #[error("{line}:{col}: {msg}")]
    Syntax { line: u32, col: u32, msg: String },

    #[error("verification failed: {0}")]
    Verify(String),

    #[error("{0}")]
    Invalid(String),

    /// Capacity diagnostics: WRAM overflow, crossbar overflow, exhausted
    /// device pools. Drivers map these to their own exit code.
    #[error("{0}")]
    Resource(String),

    /// Runtime fault while interpreting or simulating a module.
    #[error("execution error: {0}")]
    Exec(String),

    #[error("pass '{pass}' failed: {msg}")]
    Pass { pass: String, msg: String },
}

impl Error {
    pub fn syntax(line: u32, col: u32, msg: impl Into<String>) -> Error {
        Error::Syntax { line, col, msg: msg.into() }
    }

    pub fn verify(msg: impl Into<String>) -> Error {
        Error::Verify(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Error {
        Error::Invalid(msg.into())
    }

    pub fn resource(msg: impl Into<String>) -> Error {
        Error::Resource(msg.into())
    }

    pub fn exec(msg: impl Into<String>) -> Error {
        Error::Exec(msg.into())
    }

    pub fn is_resource(&self) -> bool {
        match self {
            Error::Resource(_) => true,
            Error::Pass { msg, .. } => {
                msg.contains("WRAM overflow")
                    || msg.contains("exceeds crossbar")
                    || msg.contains("pool exhausted")
            }
            _ => false,
        }
    }
}
