//! Shared numerical building blocks.

mod adam;
mod gradcheck;
mod linalg;
mod matrix;
mod rng;
mod special;

pub use adam::{adam_update, AdamState};
pub use gradcheck::{finite_diff_grad, relative_error, DEFAULT_STEP};
pub use linalg::{least_squares, LeastSquares, RANK_TOLERANCE};
pub use matrix::{dot, Matrix};
pub use rng::RngStream;
pub use special::{
    digamma, half_cauchy_logpdf, log_gamma, normal_logpdf, normalize_l1, student_t_logpdf,
    t_sf, t_two_sided_p, LN_2PI,
};
