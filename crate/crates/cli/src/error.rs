use std::path::PathBuf;

use ifr_core::data::ContainerError;
use ifr_core::IfrError;
use thiserror::Error;

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset not found: {}", .0.display())]
    DatasetNotFound(PathBuf),
    /// A check ran to completion and its result is out of tolerance.
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }
}

fn container_exit(_: &ContainerError) -> i32 {
    EXIT_IO
}

/// Maps an error to the process exit code: 1 for configuration problems, 2
/// for runtime and numeric failures, 3 for I/O and unreadable containers.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Config(_) => EXIT_CONFIG,
                CliError::DatasetNotFound(_) => EXIT_IO,
                CliError::CheckFailed(_) => EXIT_RUNTIME,
            };
        }
        if let Some(e) = cause.downcast_ref::<IfrError>() {
            return match e {
                IfrError::Config(_) => EXIT_CONFIG,
                IfrError::Container(c) => container_exit(c),
                IfrError::Shape { .. } | IfrError::NonFinite { .. } | IfrError::Divergence { .. } => {
                    EXIT_RUNTIME
                }
            };
        }
        if let Some(c) = cause.downcast_ref::<ContainerError>() {
            return container_exit(c);
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return EXIT_CONFIG;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_RUNTIME
}

/// Stable container failure code somewhere in the chain, if any.
pub fn container_code(err: &anyhow::Error) -> Option<&'static str> {
    err.chain().find_map(|cause| {
        cause
            .downcast_ref::<ContainerError>()
            .or_else(|| match cause.downcast_ref::<IfrError>() {
                Some(IfrError::Container(c)) => Some(c),
                _ => None,
            })
            .map(ContainerError::code)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_follow_the_cause_chain() {
        let config = anyhow::Error::new(CliError::config("x")).context("loading");
        assert_eq!(exit_code(&config), EXIT_CONFIG);
        let io = anyhow::Error::new(std::io::Error::other("disk")).context("writing");
        assert_eq!(exit_code(&io), EXIT_IO);
        let div = anyhow::Error::new(IfrError::Divergence {
            step: 3,
            detail: "blow-up".into(),
        });
        assert_eq!(exit_code(&div), EXIT_RUNTIME);
        let bad = anyhow::Error::new(IfrError::Container(ContainerError::BadMagic)).context("checkpoint");
        assert_eq!(exit_code(&bad), EXIT_IO);
        assert_eq!(container_code(&bad), Some("bad-magic"));
        let json: anyhow::Error = serde_json::from_str::<u8>("{").unwrap_err().into();
        assert_eq!(exit_code(&json), EXIT_CONFIG);
    }

    #[test]
    fn missing_dataset_is_io() {
        let e = anyhow::Error::new(CliError::DatasetNotFound("d.ifr".into()));
        assert_eq!(exit_code(&e), EXIT_IO);
        assert!(e.to_string().contains("dataset not found"));
    }
}
