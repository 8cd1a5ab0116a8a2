use std::fmt;

/// Coarse failure classes. Each maps to a distinct process exit code so that
/// ablation scripts can tell bad input apart from a diverging run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Divergence,
    Io,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Divergence => 4,
            ErrorCategory::Io => 5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Data => "data",
            ErrorCategory::Divergence => "divergence",
            ErrorCategory::Io => "io",
        }
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("quantization step must be strictly positive, found {0}")]
    NonPositiveStep(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing quantization binding for {0}")]
    MissingBinding(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("loss diverged in window {window} at iteration {iteration}: {loss}")]
    Divergence {
        window: String,
        iteration: usize,
        loss: f64,
    },
    #[error("checksum mismatch: file is corrupted")]
    Checksum,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("bad magic bytes: not a {0} file")]
    BadMagic(&'static str),
    #[error("{}: {source}", path.display())]
    File {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::MissingBinding(_) => ErrorCategory::Config,
            Error::ShapeMismatch { .. }
            | Error::InvalidShape { .. }
            | Error::NonScalarLoss(_)
            | Error::NonPositiveStep(_)
            | Error::Data(_)
            | Error::Checksum
            | Error::UnsupportedVersion(_)
            | Error::BadMagic(_) => ErrorCategory::Data,
            Error::Divergence { .. } => ErrorCategory::Divergence,
            Error::File { .. } | Error::Io(_) => ErrorCategory::Io,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categories_have_distinct_exit_codes() {
        let all = [ErrorCategory::Config, ErrorCategory::Data, ErrorCategory::Divergence, ErrorCategory::Io];
        let mut codes: Vec<i32> = all.iter().map(|c| c.exit_code()).collect();
        codes.dedup();
        assert_eq!(codes, vec![2, 3, 4, 5]);
        assert_eq!(Error::Checksum.category(), ErrorCategory::Data);
        assert_eq!(Error::config("x").category().as_str(), "config");
    }
}
