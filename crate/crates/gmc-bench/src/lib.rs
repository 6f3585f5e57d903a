//! Shared fixtures for the criterion benchmarks.

use gmc_core::{build_grid, eval_kernel, CovMatrix, DomainGrid, KernelSpec};

/// 1-d unit-interval grid with the Kahane-family kernel, the workhorse
/// configuration of the verification suites.
pub fn kahane_fixture(n: usize, c: f64, gamma: f64) -> (DomainGrid, CovMatrix) {
    let grid = build_grid(1, &[(0.0, 1.0)], n, None).expect("valid grid");
    let cov = eval_kernel(&KernelSpec::KahaneFamily { c, gamma }, &grid).expect("valid kernel");
    (grid, cov)
}
