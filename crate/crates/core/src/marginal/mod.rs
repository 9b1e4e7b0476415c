//! Univariate and bivariate marginal flows with exact tail splicing.
//!
//! On each tail the flow is the quantile function of a user-supplied belief.
//! Between the cut points `alpha` and `beta` a DDSF body, stored in the CDF
//! direction, maps `(alpha, beta)` onto `(a, b)`. Sampling inverts the body by
//! bisection.

mod belief;
mod flow;
mod train;

use thiserror::Error;

use crate::ddsf::DdsfError;
use crate::grad::GradError;
use crate::stats::BisectError;

pub use belief::{TailBelief, TailFamily, TailSpec};
pub use flow::{BivariateMarginalFlow, UnivariateMarginalFlow, BISECT_MAX_ITER, BISECT_TOL};
pub use train::{body_nll_tape, train_marginal, MarginalTrainConfig, MarginalTrainReport};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarginalError {
    #[error("invalid tail belief: {0}")]
    InvalidBelief(String),
    #[error("probability {0} outside [0, 1]")]
    OutOfUnitInterval(f64),
    #[error("probability {0} belongs to the body, not a tail")]
    InBody(f64),
    #[error("{0} is not in a tail region")]
    NotInTail(f64),
    #[error("{0} is outside the open body interval")]
    OutsideBody(f64),
    #[error("{0} lies on a splice point")]
    Seam(f64),
    #[error("non-finite input {0}")]
    NonFiniteInput(f64),
    #[error("body network is not strictly increasing between the cut points")]
    DegenerateBody,
    #[error("no samples fall strictly inside the body interval")]
    NoBodySamples,
    #[error("non-finite loss in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error(transparent)]
    Ddsf(#[from] DdsfError),
    #[error(transparent)]
    Bisect(#[from] BisectError),
    #[error(transparent)]
    Grad(#[from] GradError),
}
