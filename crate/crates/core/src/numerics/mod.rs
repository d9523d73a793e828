//! Dense linear algebra and sparse regression kernels.

mod lasso;
mod matrix;
mod stats;
mod svd;

pub use lasso::{
    fold_assignment, lambda_max, lasso_cv, lasso_fit, log_grid, CvOptions, CvReport, LassoObjective,
    LassoSolution,
};
pub use matrix::Matrix;
pub use stats::{mean, pearson, ranks, sample_std, spearman, standardize, std_error, Standardized};
pub use svd::{svd, truncate_reconstruct, variance_captured, SvdFactors};
