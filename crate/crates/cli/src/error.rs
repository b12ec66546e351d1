//! Error categories and their process exit codes.

use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("missing file: {}", .0.display())]
    Missing(PathBuf),

    #[error("data: {0}")]
    Data(String),
}

impl CliError {
    pub fn from_io(path: &Path, e: std::io::Error) -> CliError {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Missing(path.to_path_buf())
        } else {
            CliError::Data(format!("{}: {e}", path.display()))
        }
    }
}

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_VERSION: i32 = 4;
pub const EXIT_DATA: i32 = 5;

/// Exit code of the first categorized error in the chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Config(_) => EXIT_CONFIG,
                CliError::Missing(_) => EXIT_MISSING,
                CliError::Data(_) => EXIT_DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<trajsim::Error>() {
            use trajsim::Error as E;
            return match e {
                E::Config(_) => EXIT_CONFIG,
                E::Version { .. } => EXIT_VERSION,
                E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
                E::InvalidInput(_) | E::Format(_) | E::Shape { .. } | E::Numeric(_) | E::Json(_) => EXIT_DATA,
                E::Graph(_) | E::Io(_) => EXIT_OTHER,
            };
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return EXIT_MISSING;
            }
        }
    }
    EXIT_OTHER
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categories_map_to_distinct_codes() {
        let code = |e: anyhow::Error| exit_code(&e);
        assert_eq!(code(CliError::Config("x".into()).into()), EXIT_CONFIG);
        assert_eq!(code(CliError::Missing("a".into()).into()), EXIT_MISSING);
        assert_eq!(code(trajsim::Error::Version { found: 9, expected: 1 }.into()), EXIT_VERSION);
        assert_eq!(code(trajsim::Error::InvalidInput("x".into()).into()), EXIT_DATA);
        assert_eq!(code(anyhow::anyhow!("other")), EXIT_OTHER);
        let wrapped = anyhow::Error::from(CliError::Data("x".into())).context("while embedding");
        assert_eq!(code(wrapped), EXIT_DATA);
    }
}
