use alloc::boxed::Box;
use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Non-finite loss while estimating a flow.
    #[error("flow estimation diverged at pyramid level {level}, iteration {iteration}")]
    EstimationDiverged { level: usize, iteration: usize },

    /// Non-finite loss while refining intermediate flows.
    #[error("cycle refinement diverged at iteration {iteration}")]
    RefinementDiverged { iteration: usize },

    #[error("frame {index} is more than {max_steps} steps from every labeled anchor")]
    CoverageGap { index: usize, max_steps: usize },

    /// A failure inside the processing of one temporal gap of a sequence.
    #[error("processing frames {from}..={to} failed: {source}")]
    Gap {
        from: usize,
        to: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn in_gap(self, from: usize, to: usize) -> Self {
        Error::Gap { from, to, source: Box::new(self) }
    }

    /// True when the root cause is a diverging optimization.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::EstimationDiverged { .. } | Error::RefinementDiverged { .. } => true,
            Error::Gap { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
