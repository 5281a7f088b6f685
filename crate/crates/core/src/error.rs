use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the model, surgery and training code.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Malformed caller input: token ids, lengths, empty data, bad knobs.
    #[error("invalid input: {0}")]
    Input(String),

    /// `start + count` runs past the last layer.
    #[error("Extraction exceeds model depth: start {start} + count {count} > {depth} layers")]
    ExtractionDepth {
        start: usize,
        count: usize,
        depth: usize,
    },

    /// An integration plan that cannot be applied to the recipient.
    #[error("invalid integration plan: {0}")]
    Plan(String),

    /// Donor and recipient disagree on architecture.
    #[error("incompatible donor: {}", .0.join("; "))]
    Compatibility(Vec<String>),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn input(msg: impl Into<String>) -> Error {
    Error::Input(msg.into())
}
