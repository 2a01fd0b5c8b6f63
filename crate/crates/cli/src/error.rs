use std::path::PathBuf;

use epd_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 2: configuration, 3: invalid checkpoint contents, 4: numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Io { .. } => 2,
            Self::Core(e) => match e {
                CoreError::InvariantViolation(_)
                | CoreError::SchemaMismatch(_)
                | CoreError::InvalidParams(_)
                | CoreError::InvalidSimplex { .. }
                | CoreError::InvalidArity(_) => 3,
                CoreError::Divergence(_)
                | CoreError::NonFiniteLoss
                | CoreError::NonFiniteOutput
                | CoreError::NonFiniteState { .. } => 4,
                _ => 2,
            },
        }
    }
}

pub fn config(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

pub fn io(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_error_class() {
        assert_eq!(config("x").exit_code(), 2);
        assert_eq!(
            CliError::from(CoreError::InvalidConfig("x".into())).exit_code(),
            2
        );
        assert_eq!(
            CliError::from(CoreError::SchemaMismatch("x".into())).exit_code(),
            3
        );
        assert_eq!(
            CliError::from(CoreError::InvariantViolation("x".into())).exit_code(),
            3
        );
        assert_eq!(
            CliError::from(CoreError::Divergence("x".into())).exit_code(),
            4
        );
        assert_eq!(
            CliError::from(CoreError::NonFiniteState { step: 1 }).exit_code(),
            4
        );
    }
}
