//! Probabilists' Hermite polynomials, Wick powers of the field, and the
//! Wick L^2 moment identity E|Int :X^n: dmu|^2 = n! Sum K^n mu mu.
//!
//! Physicists' polynomials He relate by H_n(x) = 2^{n/2} h_n(x sqrt(2)); only
//! the probabilists' normalization is used here.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::domain::DomainGrid;
use crate::error::{GmcError, Result};
use crate::gaussian::{sample_field, FieldSample, SeedRecord};
use crate::kernel::{kernel_moment, CovMatrix};
use crate::report::TestReport;

pub const HERMITE_NMAX: usize = 12;

/// Monomial coefficients of h_0 .. h_nmax, exact integers.
/// coeffs[n][k] is the coefficient of x^k in h_n.
#[derive(Debug, Clone, PartialEq)]
pub struct HermiteTable {
    pub coeffs: Vec<Vec<i64>>,
}

impl HermiteTable {
    pub fn new(nmax: usize) -> Self {
        let mut coeffs: Vec<Vec<i64>> = Vec::with_capacity(nmax + 1);
        coeffs.push(vec![1]);
        if nmax >= 1 {
            coeffs.push(vec![0, 1]);
        }
        for n in 2..=nmax {
            // h_n = x h_{n-1} - (n-1) h_{n-2}
            let mut c = vec![0i64; n + 1];
            for (k, &v) in coeffs[n - 1].iter().enumerate() {
                c[k + 1] += v;
            }
            for (k, &v) in coeffs[n - 2].iter().enumerate() {
                c[k] -= (n - 1) as i64 * v;
            }
            coeffs.push(c);
        }
        HermiteTable { coeffs }
    }
}

/// h_n(x) by the three-term recurrence.
pub fn hermite(n: usize, x: f64) -> Result<f64> {
    if n > HERMITE_NMAX {
        return Err(GmcError::InvalidInput(format!(
            "hermite order {n} exceeds nmax {HERMITE_NMAX}"
        )));
    }
    Ok(hermite_unchecked(n, x))
}

fn hermite_unchecked(n: usize, x: f64) -> f64 {
    match n {
        0 => 1.0,
        1 => x,
        _ => {
            let mut prev = 1.0;
            let mut cur = x;
            for k in 2..=n {
                let next = x * cur - (k - 1) as f64 * prev;
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}

pub fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Wick power :X_i^n: = sigma_i^n h_n(X_i / sigma_i), 0 where sigma_i = 0.
pub fn wick_power_field(x: &FieldSample, cov: &CovMatrix, n: usize) -> Result<DVector<f64>> {
    if n > HERMITE_NMAX {
        return Err(GmcError::InvalidInput(format!(
            "wick power order {n} exceeds nmax {HERMITE_NMAX}"
        )));
    }
    let diag = cov.diag();
    Ok(DVector::from_fn(x.values.len(), |i, _| {
        let var = diag[i];
        if var <= 0.0 {
            if n == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            let sigma = var.sqrt();
            sigma.powi(n as i32) * hermite_unchecked(n, x.values[i] / sigma)
        }
    }))
}

/// Monte Carlo check of E|Sum_i :X_i^n: mu_i|^2 = n! Sum_ij K_ij^n mu_i mu_j.
pub fn wick_l2_check(
    cov: &CovMatrix,
    grid: &DomainGrid,
    n: usize,
    replicas: u64,
    seed: SeedRecord,
    z: f64,
) -> Result<TestReport> {
    if replicas < 10_000 {
        return Err(GmcError::InvalidInput(
            "wick_l2_check needs at least 10^4 replicas".into(),
        ));
    }
    let target = factorial(n) * kernel_moment(cov, grid, n as u32);
    let stats: Vec<(f64, f64)> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let x = sample_field(cov, seed.substream(r));
            let w = wick_power_field(&x, cov, n).expect("order checked above");
            let s: f64 = (0..w.len()).map(|i| w[i] * grid.cell_measure[i]).sum();
            let sq = s * s;
            (sq, sq * sq)
        })
        .collect();
    let m = replicas as f64;
    let mean = stats.iter().map(|v| v.0).sum::<f64>() / m;
    let mean2 = stats.iter().map(|v| v.1).sum::<f64>() / m;
    let se = ((mean2 - mean * mean).max(0.0) / m).sqrt();
    Ok(TestReport::statistical("wick_l2", mean, target, se, replicas, z)
        .with_meta("n", n)
        .with_meta("cells", grid.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::build_grid;
    use crate::kernel::{eval_kernel, KernelSpec};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    #[test]
    fn low_order_values() {
        assert_eq!(hermite(0, 3.7).unwrap(), 1.0);
        assert_eq!(hermite(2, 2.0).unwrap(), 3.0); // x^2 - 1
        assert_eq!(hermite(3, 1.0).unwrap(), -2.0); // x^3 - 3x
        assert!(hermite(13, 0.0).is_err());
    }

    #[test]
    fn table_matches_recurrence_and_parity() {
        let t = HermiteTable::new(HERMITE_NMAX);
        assert_eq!(t.coeffs[2], vec![-1, 0, 1]);
        assert_eq!(t.coeffs[3], vec![0, -3, 0, 1]);
        for n in 0..=HERMITE_NMAX {
            // leading coefficient 1
            assert_eq!(*t.coeffs[n].last().unwrap(), 1);
            // parity: only degrees n, n-2, ...
            for (k, &c) in t.coeffs[n].iter().enumerate() {
                if (n - k) % 2 == 1 {
                    assert_eq!(c, 0, "odd-gap coefficient at n={n}, k={k}");
                }
            }
            // evaluation by table agrees with recurrence
            for &x in &[-1.3f64, 0.0, 0.7, 2.1] {
                let poly: f64 = t.coeffs[n]
                    .iter()
                    .enumerate()
                    .map(|(k, &c)| c as f64 * x.powi(k as i32))
                    .sum();
                assert_relative_eq!(poly, hermite(n, x).unwrap(), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn generating_function_partial_sums() {
        // exp(tx - t^2/2) = Sum t^n h_n(x) / n!
        for &t in &[-1.0, -0.3, 0.5, 1.0] {
            for &x in &[-1.0, 0.0, 0.4, 1.0] {
                let closed = (t * x - t * t / 2.0f64).exp();
                let series: f64 = (0..=20)
                    .map(|n| t.powi(n as i32) * hermite_unchecked(n, x) / factorial(n))
                    .sum();
                assert!((closed - series).abs() < 1e-6, "t={t} x={x}");
            }
        }
    }

    #[test]
    fn hermite_orthogonality_monte_carlo() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        let m = 100_000;
        let draws: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for n in 0..=4usize {
            for mm in 0..=4usize {
                let prods: Vec<f64> = draws
                    .iter()
                    .map(|&z| hermite_unchecked(n, z) * hermite_unchecked(mm, z))
                    .collect();
                let mean = prods.iter().sum::<f64>() / m as f64;
                let var = prods.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>()
                    / m as f64;
                let se = (var / m as f64).sqrt();
                let target = if n == mm { factorial(n) } else { 0.0 };
                assert!(
                    (mean - target).abs() <= 4.0 * se.max(1e-9),
                    "n={n} m={mm}: {mean} vs {target} (se {se})"
                );
            }
        }
    }

    fn grid2() -> DomainGrid {
        build_grid(1, &[(0.0, 1.0)], 2, None).unwrap()
    }

    fn cov_2x2() -> CovMatrix {
        eval_kernel(
            &KernelSpec::Explicit {
                entries: vec![vec![1.0, 0.2], vec![0.2, 1.0]],
            },
            &grid2(),
        )
        .unwrap()
    }

    #[test]
    fn wick_power_low_orders() {
        let cov = cov_2x2();
        let x = sample_field(&cov, SeedRecord::new(1));
        let w0 = wick_power_field(&x, &cov, 0).unwrap();
        assert!(w0.iter().all(|&v| v == 1.0));
        let w1 = wick_power_field(&x, &cov, 1).unwrap();
        assert_eq!(w1, x.values);
        // n=2 algebraic identity: :X^2: = X^2 - K_ii
        let w2 = wick_power_field(&x, &cov, 2).unwrap();
        for i in 0..2 {
            assert_relative_eq!(
                w2[i],
                x.values[i] * x.values[i] - cov.entry(i, i),
                epsilon = 1e-13
            );
        }
    }

    #[test]
    fn wick_power_zero_variance_cells() {
        let grid = grid2();
        let cov = eval_kernel(
            &KernelSpec::Explicit {
                entries: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            },
            &grid,
        )
        .unwrap();
        let x = sample_field(&cov, SeedRecord::new(2));
        let w = wick_power_field(&x, &cov, 3).unwrap();
        assert!(w.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wick_means_vanish() {
        let cov = cov_2x2();
        let seed = SeedRecord::new(3);
        let m = 50_000;
        for n in 2..=4usize {
            let mut acc = 0.0;
            let mut acc2 = 0.0;
            for r in 0..m {
                let x = sample_field(&cov, seed.substream(r));
                let w = wick_power_field(&x, &cov, n).unwrap();
                acc += w[0];
                acc2 += w[0] * w[0];
            }
            let mean = acc / m as f64;
            let se = ((acc2 / m as f64 - mean * mean) / m as f64).sqrt();
            assert!((mean).abs() <= 3.5 * se, "n={n}: mean {mean} se {se}");
        }
    }

    #[test]
    fn wick_l2_single_cell_unit_variance() {
        // N=1, K=[[1]], mu=1, n=2: Var(h_2(Z)) = 2
        let grid = build_grid(1, &[(0.0, 1.0)], 1, None).unwrap();
        let cov = eval_kernel(
            &KernelSpec::Explicit {
                entries: vec![vec![1.0]],
            },
            &grid,
        )
        .unwrap();
        let report = wick_l2_check(&cov, &grid, 2, 50_000, SeedRecord::new(4), 3.0).unwrap();
        assert_relative_eq!(report.target, 2.0, max_relative = 1e-12);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn wick_l2_zero_kernel() {
        let grid = grid2();
        let cov = eval_kernel(
            &KernelSpec::Explicit {
                entries: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            },
            &grid,
        )
        .unwrap();
        let report = wick_l2_check(&cov, &grid, 2, 10_000, SeedRecord::new(5), 3.0).unwrap();
        assert_eq!(report.estimate, 0.0);
        assert_eq!(report.target, 0.0);
        assert!(report.passed());
    }

    #[test]
    fn wick_l2_2x2_unit_measures() {
        // mu = (1,1): target 2 (1 + 2 * 0.04 + 1) = 4.16
        let grid = build_grid(1, &[(0.0, 2.0)], 2, None).unwrap();
        let cov = eval_kernel(
            &KernelSpec::Explicit {
                entries: vec![vec![1.0, 0.2], vec![0.2, 1.0]],
            },
            &grid,
        )
        .unwrap();
        let report = wick_l2_check(&cov, &grid, 2, 100_000, SeedRecord::new(6), 3.0).unwrap();
        assert_relative_eq!(report.target, 4.16, max_relative = 1e-12);
        assert!(report.passed(), "{report:?}");
    }
}
