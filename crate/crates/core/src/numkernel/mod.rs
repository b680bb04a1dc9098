//! Dense linear algebra and finite-difference checking.

mod gradcheck;
mod matrix;

pub use gradcheck::{
    finite_diff_grad, finite_diff_grad_five_point, grad_check, grad_check_with_floor, GradCheckReport,
};
pub use matrix::{cosine, dot, l2_norm, matmul, matmul_nt, matmul_tn, normalize_in_place, Matrix};
