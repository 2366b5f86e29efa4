//! Differentiable primitives recorded on a [`Graph`](crate::Graph).

mod conv;
mod linear;
mod loss;
mod norm;
mod pointwise;
mod pool;

pub use loss::softmax_rows;
pub(crate) use loss::check_labels;
pub use norm::{RunningStats, BN_EPS, BN_MOMENTUM};
