//! Dense tensors, reverse-mode differentiation, Adam, random streams and
//! small numerical helpers.

mod adam;
mod rng;
mod stats;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use rng::RandomStream;
pub use stats::{
    gaussian_log_density, gaussian_log_density_slice, log_sum_exp, mean_and_se, quantile,
    wasserstein_1d,
};
pub use tape::{finite_difference_check, finite_difference_check_multi, grad, Gradients, Tape, Var};
pub use tensor::Tensor;
