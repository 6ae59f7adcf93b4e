use std::path::PathBuf;

use thiserror::Error;

/// Errors of the file formats, configuration and command driver.
#[derive(Debug, Error)]
pub enum ToolError {
    #[error(transparent)]
    Core(#[from] ilpforge_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Nifti {
        path: PathBuf,
        #[source]
        source: crate::nifti::NiftiError,
    },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<ToolError>,
    },
}

pub type ToolResult<T> = Result<T, ToolError>;

impl ToolError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ToolError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        ToolError::Format { path: path.into(), message: message.into() }
    }

    /// Innermost error after stripping context layers.
    pub fn root(&self) -> &ToolError {
        match self {
            ToolError::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code: 2 usage, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            ToolError::Usage(_) | ToolError::Config(_) => 2,
            ToolError::Core(e) if e.is_numeric() => 4,
            _ => 3,
        }
    }
}

/// Attaches a context label (file name, pipeline stage) to errors.
pub trait Context<T> {
    fn context(self, label: impl FnOnce() -> String) -> ToolResult<T>;
}

impl<T, E: Into<ToolError>> Context<T> for Result<T, E> {
    fn context(self, label: impl FnOnce() -> String) -> ToolResult<T> {
        self.map_err(|e| ToolError::Context { context: label(), source: Box::new(e.into()) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ilpforge_core::Error;

    #[test]
    fn exit_codes() {
        assert_eq!(ToolError::Usage("x".into()).exit_code(), 2);
        assert_eq!(ToolError::Core(Error::NoLesionVoxels).exit_code(), 3);
        assert_eq!(ToolError::Core(Error::DegenerateBandwidth).exit_code(), 4);
        let wrapped: ToolResult<()> = Err::<(), _>(Error::ZeroVariance).context(|| "stage t-test".into());
        let e = wrapped.unwrap_err();
        assert_eq!(e.exit_code(), 4);
        assert!(e.to_string().starts_with("stage t-test: ZeroVariance"));
    }
}
