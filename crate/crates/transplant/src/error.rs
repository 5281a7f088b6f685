use std::io;
use std::path::PathBuf;

/// Errors of the std layer: everything the core reports plus file and
/// format problems.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] transplant_core::Error),

    /// A stored checksum or digest does not match the bytes.
    #[error("integrity check failed: {0}")]
    Integrity(String),

    /// Unknown magic, unsupported version or malformed structure.
    #[error("bad file format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("invalid input: {0}")]
    Input(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Process exit codes, one per error family.
pub mod exit {
    pub const INPUT: i32 = 2;
    pub const COMPATIBILITY: i32 = 3;
    pub const INTEGRITY: i32 = 4;
    pub const FORMAT: i32 = 5;
    pub const DIVERGED: i32 = 6;
    pub const STORAGE: i32 = 7;
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        use transplant_core::Error as C;
        match self {
            Error::Core(C::Compatibility(_)) => exit::COMPATIBILITY,
            Error::Core(C::Diverged { .. }) => exit::DIVERGED,
            Error::Core(_) | Error::Input(_) => exit::INPUT,
            Error::Integrity(_) => exit::INTEGRITY,
            Error::Format(_) => exit::FORMAT,
            Error::Storage { .. } => exit::STORAGE,
        }
    }

    pub(crate) fn storage(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Storage {
            path: path.into(),
            source,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_are_distinct() {
        let errs = [
            Error::Input("x".into()),
            Error::Core(transplant_core::Error::Compatibility(vec![])),
            Error::Integrity("x".into()),
            Error::Format("x".into()),
            Error::Core(transplant_core::Error::Diverged { step: 1, loss: f64::NAN }),
            Error::storage("p", io::Error::other("x")),
        ];
        let mut codes: Vec<i32> = errs.iter().map(Error::exit_code).collect();
        codes.dedup();
        assert_eq!(codes.len(), 6);
        assert!(codes.iter().all(|&c| c != 0 && c != 1));
    }
}
