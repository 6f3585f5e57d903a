//! Numerical laboratory for subcritical Gaussian multiplicative chaos on
//! discretized domains: kernel construction and factorization, Gaussian field
//! sampling with exact shift (Cameron-Martin) bookkeeping, chaos measures,
//! Wick powers, and a statistical verification harness.

pub mod chaos;
pub mod domain;
pub mod error;
pub mod gaussian;
pub mod kernel;
pub mod report;
pub mod verify;
pub mod wick;

pub use chaos::{build_chaos, build_scaled_chaos, integrate, martingale_sequence, reweight_shift, ChaosMeasure};
pub use domain::{build_grid, kahan_sum, refine, Density, DomainGrid, GridSpec};
pub use error::{GmcError, Result};
pub use gaussian::{
    cameron_martin_shift, mollify_field, peyriere_sample, sample_field, shift_from_test_function,
    FieldSample, SeedRecord, ShiftVector,
};
pub use kernel::{
    eval_kernel, kahane_integral, kernel_moment, kernel_moment_scaling, mollify_kernel,
    sigma_positive_decompose, CovMatrix, GFunction, KernelSpec, Mollifier,
};
pub use report::{TestReport, Verdict};
pub use verify::{mollifier_distance_curve, run_suite, suite_names, EnsembleSpec, SuiteConfig};
pub use wick::{hermite, wick_l2_check, wick_power_field, HermiteTable};
