use alloc::string::String;

/// Errors raised by the training and evaluation primitives.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A configuration value or network specification is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// Matrix or batch dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A non-finite value appeared in a gradient, parameter or statistic.
    #[error("numeric error{}: {message}", example.map(|i| alloc::format!(" at example {i}")).unwrap_or_default())]
    Numeric {
        /// Batch row that produced the value, when known.
        example: Option<usize>,
        message: String,
    },

    /// Privacy accounting could not produce an answer.
    #[error("accounting error: {0}")]
    Accounting(String),

    /// An inverse budget query has no solution in the searched range.
    #[error("calibration error: {0}")]
    Calibration(String),

    /// A training step failed; carries the discriminator step index.
    #[error("step {step}: {source}")]
    Step {
        step: u64,
        #[source]
        source: alloc::boxed::Box<Error>,
    },

    /// Evaluation inputs are unusable (empty sets, too few samples).
    #[error("evaluation error: {0}")]
    Eval(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn numeric(example: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Numeric { example, message: msg.into() }
    }

    pub(crate) fn at_step(self, step: u64) -> Self {
        match self {
            e @ Error::Step { .. } => e,
            e => Error::Step { step, source: alloc::boxed::Box::new(e) },
        }
    }

    /// The innermost error, skipping step annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::Step { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
