use alloc::boxed::Box;
use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("shape mismatch at layer {layer}: expected input of dimension {expected}, found {found}")]
    LayerShape {
        layer: usize,
        expected: usize,
        found: usize,
    },

    #[error("forward cache does not match this network or gradient batch")]
    StaleCache,

    #[error("non-finite gradient in parameter tensor {tensor} at element {index}")]
    NonFiniteGradient { tensor: usize, index: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("feature {index} is degenerate (min == max == {value})")]
    DegenerateFeature { index: usize, value: f64 },

    #[error("negative curvature {curvature:e} detected along a solver step; Hessian is not PSD")]
    NotPsd { curvature: f64 },

    #[error("least-squares fit failed: {0}")]
    FitFailed(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("reference point ({:.3}, {:.3}, {:.3}) mm is outside the reachable workspace", point[0], point[1], point[2])]
    Unreachable { point: [f64; 3] },

    #[error("plant failure in episode {episode} at step {step}: {source}")]
    Plant {
        episode: usize,
        step: usize,
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: usize, found: usize) -> Self {
        Error::Shape {
            context,
            expected,
            found,
        }
    }

    pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
        if expected == found {
            Ok(())
        } else {
            Err(Error::shape(context, expected, found))
        }
    }
}
