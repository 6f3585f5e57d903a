//! Gaussian field samples on a grid, mollified fields, and shifts realized
//! through their finite-grid kernel columns.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::DomainGrid;
use crate::error::{GmcError, Result};
use crate::kernel::{CovMatrix, Mollifier};

/// Seed plus stream index for the counter-based generator. Replicas and
/// martingale levels get disjoint streams so parallel Monte Carlo replays
/// identically regardless of scheduling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub master: u64,
    pub stream: u64,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

impl SeedRecord {
    pub fn new(master: u64) -> Self {
        SeedRecord { master, stream: 0 }
    }

    /// Child stream for replica/level `index`; collision-resistant mixing of
    /// the current stream with the index.
    pub fn substream(&self, index: u64) -> Self {
        SeedRecord {
            master: self.master,
            stream: splitmix(self.stream ^ splitmix(index.wrapping_add(1))),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        rng.set_stream(self.stream);
        rng
    }
}

/// One realization of the field on the grid. The latent standard-normal
/// coordinates are kept so coupled constructions (two mollifiers over the
/// same underlying field) stay exact.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample {
    pub values: DVector<f64>,
    pub latent: DVector<f64>,
    pub cov_ref: u64,
    pub seed: SeedRecord,
    pub shifted: bool,
    pub shift: Option<ShiftVector>,
}

/// Cameron-Martin direction generated by a grid test function f:
/// field_repr_i = Sum_j K_ij f_j mu_j and |xi|^2 = (f mu)^T K (f mu).
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftVector {
    pub test_fn: DVector<f64>,
    pub field_repr: DVector<f64>,
    pub h_norm_sq: f64,
}

pub fn sample_field(cov: &CovMatrix, seed: SeedRecord) -> FieldSample {
    let n = cov.size();
    let mut rng = seed.rng();
    let latent = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let values = &cov.factor * &latent;
    FieldSample {
        values,
        latent,
        cov_ref: cov.content_hash(),
        seed,
        shifted: false,
        shift: None,
    }
}

impl FieldSample {
    /// values must equal L * latent for unshifted samples; asserted on load.
    pub fn reconstructs_from(&self, cov: &CovMatrix) -> bool {
        if self.shifted {
            return true;
        }
        let recomputed = &cov.factor * &self.latent;
        recomputed == self.values
    }

    /// CSV export, `cell_index,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cell_index,value\n");
        for (i, v) in self.values.iter().enumerate() {
            out.push_str(&format!("{i},{v}\n"));
        }
        out
    }
}

/// Smooth a fine-grid sample onto a coarse grid with the same
/// boundary-renormalized weights used by kernel mollification. The latent
/// coordinates of `fine` are retained: applying two different mollifiers to
/// the same `fine` yields coupled realizations of one underlying field.
pub fn mollify_field(
    fine: &FieldSample,
    fine_grid: &DomainGrid,
    moll: &Mollifier,
    eps: f64,
    coarse_grid: &DomainGrid,
) -> Result<FieldSample> {
    if fine.values.len() != fine_grid.len() {
        return Err(GmcError::GridMismatch(format!(
            "sample has {} values, fine grid has {} cells",
            fine.values.len(),
            fine_grid.len()
        )));
    }
    if !fine_grid.refines(coarse_grid) {
        return Err(GmcError::GridMismatch(
            "fine grid does not refine the coarse grid".into(),
        ));
    }
    let (w, _under) = moll.weights(coarse_grid, fine_grid, eps)?;
    Ok(FieldSample {
        values: &w * &fine.values,
        latent: fine.latent.clone(),
        cov_ref: fine.cov_ref,
        seed: fine.seed,
        shifted: fine.shifted,
        shift: fine.shift.clone(),
    })
}

pub fn shift_from_test_function(
    f: &DVector<f64>,
    cov: &CovMatrix,
    grid: &DomainGrid,
) -> Result<ShiftVector> {
    if f.len() != cov.size() || f.len() != grid.len() {
        return Err(GmcError::GridMismatch("test function length mismatch".into()));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(GmcError::InvalidInput("test function must be finite".into()));
    }
    let fm = DVector::from_fn(f.len(), |i, _| f[i] * grid.cell_measure[i]);
    let field_repr = &cov.matrix * &fm;
    // via the factor: |L^T (f mu)|^2, nonnegative to roundoff
    let ltfm = cov.factor.transpose() * &fm;
    let h_norm_sq = ltfm.norm_squared();
    Ok(ShiftVector {
        test_fn: f.clone(),
        field_repr,
        h_norm_sq,
    })
}

/// X + xi, flagged as shifted; latent coordinates are not recomputed so the
/// reweight and recompute verification paths stay independent.
pub fn cameron_martin_shift(x: &FieldSample, xi: &ShiftVector) -> FieldSample {
    assert_eq!(x.values.len(), xi.field_repr.len(), "shape mismatch");
    FieldSample {
        values: &x.values + &xi.field_repr,
        latent: x.latent.clone(),
        cov_ref: x.cov_ref,
        seed: x.seed,
        shifted: true,
        shift: Some(xi.clone()),
    }
}

/// Draw (X + K(t,.), t) with t ~ mu/mu[T] independent of X: the Peyriere
/// picture of the chaos measure. The shift is generated by the normalized
/// cell indicator so field_repr_i = K_it exactly.
pub fn peyriere_sample(
    cov: &CovMatrix,
    grid: &DomainGrid,
    seed: SeedRecord,
) -> Result<(FieldSample, usize)> {
    let total = grid.total_measure();
    if !(total > 0.0) {
        return Err(GmcError::InvalidInput("grid has zero total measure".into()));
    }
    let mut rng = seed.rng();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut cell = grid.len() - 1;
    for (i, &m) in grid.cell_measure.iter().enumerate() {
        acc += m;
        if u < acc {
            cell = i;
            break;
        }
    }
    let n = cov.size();
    let latent = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let values = &cov.factor * &latent;
    let x = FieldSample {
        values,
        latent,
        cov_ref: cov.content_hash(),
        seed,
        shifted: false,
        shift: None,
    };
    let mu_t = grid.cell_measure[cell];
    let mut f = DVector::zeros(n);
    f[cell] = 1.0 / mu_t;
    let xi = shift_from_test_function(&f, cov, grid)?;
    Ok((cameron_martin_shift(&x, &xi), cell))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::build_grid;
    use crate::kernel::{eval_kernel, KernelSpec};
    use approx::assert_relative_eq;

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

    fn zero_cov(n: usize) -> CovMatrix {
        let entries = vec![vec![0.0; n]; n];
        eval_kernel(
            &KernelSpec::Explicit { entries },
            &build_grid(1, &[(0.0, 1.0)], n, None).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn zero_kernel_gives_zero_field() {
        let cov = zero_cov(4);
        let x = sample_field(&cov, SeedRecord::new(42));
        assert!(x.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sampling_is_deterministic_bitwise() {
        let cov = cov_2x2();
        let a = sample_field(&cov, SeedRecord::new(7));
        let b = sample_field(&cov, SeedRecord::new(7));
        assert_eq!(a.values, b.values);
        assert_eq!(a.latent, b.latent);
        let c = sample_field(&cov, SeedRecord::new(8));
        assert_ne!(a.values, c.values);
        assert!(a.reconstructs_from(&cov));
    }

    #[test]
    fn substreams_are_disjoint() {
        let s = SeedRecord::new(7);
        let cov = cov_2x2();
        let a = sample_field(&cov, s.substream(0));
        let b = sample_field(&cov, s.substream(1));
        assert_ne!(a.values, b.values);
    }

    #[test]
    fn sample_correlation_matches_kernel() {
        let cov = cov_2x2();
        let seed = SeedRecord::new(11);
        let m = 100_000;
        let (mut s1, mut s2, mut s12, mut q1, mut q2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for r in 0..m {
            let x = sample_field(&cov, seed.substream(r));
            s1 += x.values[0];
            s2 += x.values[1];
            s12 += x.values[0] * x.values[1];
            q1 += x.values[0] * x.values[0];
            q2 += x.values[1] * x.values[1];
        }
        let mf = m as f64;
        let corr = (s12 / mf - s1 / mf * s2 / mf)
            / ((q1 / mf - (s1 / mf).powi(2)) * (q2 / mf - (s2 / mf).powi(2))).sqrt();
        assert!((corr - 0.2).abs() < 0.012, "corr {corr}");
    }

    #[test]
    fn shift_examples() {
        let grid = grid2();
        let cov = cov_2x2();
        let zero = shift_from_test_function(&DVector::zeros(2), &cov, &grid).unwrap();
        assert!(zero.field_repr.iter().all(|&v| v == 0.0));
        assert_eq!(zero.h_norm_sq, 0.0);

        let f = DVector::from_vec(vec![1.0, 0.0]);
        let xi = shift_from_test_function(&f, &cov, &grid).unwrap();
        assert_relative_eq!(xi.field_repr[0], 0.5, max_relative = 1e-14);
        assert_relative_eq!(xi.field_repr[1], 0.1, max_relative = 1e-14);
        assert_relative_eq!(xi.h_norm_sq, 0.25, max_relative = 1e-12);
    }

    #[test]
    fn identity_kernel_unit_measure_shift() {
        let grid = build_grid(1, &[(0.0, 2.0)], 2, None).unwrap();
        // mu_i = 1 each
        let cov = eval_kernel(
            &KernelSpec::Explicit {
                entries: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            },
            &grid,
        )
        .unwrap();
        let f = DVector::from_vec(vec![0.0, 1.0]);
        let xi = shift_from_test_function(&f, &cov, &grid).unwrap();
        assert_eq!(xi.field_repr[0], 0.0);
        assert_relative_eq!(xi.field_repr[1], 1.0, max_relative = 1e-14);
        assert_relative_eq!(xi.h_norm_sq, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn cameron_martin_shift_adds_field_repr() {
        let grid = grid2();
        let cov = cov_2x2();
        let f = DVector::from_vec(vec![1.0, 0.0]);
        let xi = shift_from_test_function(&f, &cov, &grid).unwrap();
        let x = FieldSample {
            values: DVector::from_vec(vec![0.3, -0.1]),
            latent: DVector::zeros(2),
            cov_ref: cov.content_hash(),
            seed: SeedRecord::new(0),
            shifted: false,
            shift: None,
        };
        let y = cameron_martin_shift(&x, &xi);
        assert_relative_eq!(y.values[0], 0.8, max_relative = 1e-14);
        assert!(y.values[1].abs() < 1e-15);
        assert!(y.shifted);
    }

    #[test]
    fn shift_linearity() {
        let grid = grid2();
        let cov = cov_2x2();
        let f = DVector::from_vec(vec![0.7, -0.3]);
        let g = DVector::from_vec(vec![-0.2, 1.1]);
        let xi = shift_from_test_function(&f, &cov, &grid).unwrap();
        let eta = shift_from_test_function(&g, &cov, &grid).unwrap();
        let both = shift_from_test_function(&(&f + &g), &cov, &grid).unwrap();
        let x = sample_field(&cov, SeedRecord::new(3));
        let a = cameron_martin_shift(&cameron_martin_shift(&x, &xi), &eta);
        let b = cameron_martin_shift(&x, &both);
        for i in 0..2 {
            assert_relative_eq!(a.values[i], b.values[i], epsilon = 1e-15);
        }
        // twice by xi equals once by 2*xi
        let twice = cameron_martin_shift(&cameron_martin_shift(&x, &xi), &xi);
        let double = shift_from_test_function(&(2.0 * &f), &cov, &grid).unwrap();
        let once = cameron_martin_shift(&x, &double);
        for i in 0..2 {
            assert_relative_eq!(twice.values[i], once.values[i], epsilon = 1e-15);
        }
    }

    #[test]
    fn mollify_field_preserves_constants() {
        let coarse = build_grid(1, &[(0.0, 1.0)], 4, None).unwrap();
        let fine = build_grid(1, &[(0.0, 1.0)], 16, None).unwrap();
        let x = FieldSample {
            values: DVector::from_element(16, 3.5),
            latent: DVector::zeros(16),
            cov_ref: 0,
            seed: SeedRecord::new(0),
            shifted: false,
            shift: None,
        };
        let moll = Mollifier::Triangle { radius: 1.0 };
        let y = mollify_field(&x, &fine, &moll, 0.3, &coarse).unwrap();
        for v in y.values.iter() {
            assert_relative_eq!(*v, 3.5, max_relative = 1e-12);
        }
    }

    #[test]
    fn mollify_field_rejects_mismatched_grids() {
        let coarse = build_grid(1, &[(0.0, 1.0)], 3, None).unwrap();
        let fine = build_grid(1, &[(0.0, 1.0)], 16, None).unwrap();
        let x = FieldSample {
            values: DVector::zeros(16),
            latent: DVector::zeros(16),
            cov_ref: 0,
            seed: SeedRecord::new(0),
            shifted: false,
            shift: None,
        };
        let moll = Mollifier::Box { radius: 1.0 };
        assert!(mollify_field(&x, &fine, &moll, 0.3, &coarse).is_err());
    }

    #[test]
    fn peyriere_zero_kernel_returns_unshifted_values() {
        let grid = build_grid(1, &[(0.0, 1.0)], 4, None).unwrap();
        let cov = zero_cov(4);
        let (x, _t) = peyriere_sample(&cov, &grid, SeedRecord::new(5)).unwrap();
        assert!(x.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn peyriere_single_cell_always_picks_it() {
        let grid = build_grid(1, &[(0.0, 1.0)], 1, None).unwrap();
        let cov = eval_kernel(
            &KernelSpec::Explicit {
                entries: vec![vec![1.0]],
            },
            &grid,
        )
        .unwrap();
        for s in 0..20 {
            let (x, t) = peyriere_sample(&cov, &grid, SeedRecord::new(s)).unwrap();
            assert_eq!(t, 0);
            let xi = x.shift.as_ref().unwrap();
            assert_relative_eq!(xi.field_repr[0], 1.0, max_relative = 1e-14);
        }
    }

    #[test]
    fn peyriere_mean_matches_kernel_column_average() {
        let grid = grid2();
        let cov = cov_2x2();
        let seed = SeedRecord::new(19);
        let m = 50_000;
        let mut mean = DVector::zeros(2);
        for r in 0..m {
            let (x, _) = peyriere_sample(&cov, &grid, seed.substream(r)).unwrap();
            mean += &x.values;
        }
        mean /= m as f64;
        // E[X + K(t,.)] = Sum_t (mu_t/mu[T]) K(.,t) = (0.6, 0.6)
        for i in 0..2 {
            assert!((mean[i] - 0.6).abs() < 0.03, "mean {mean:?}");
        }
    }

    #[test]
    fn h_norm_two_routes_agree() {
        let grid = build_grid(1, &[(0.0, 1.0)], 8, None).unwrap();
        let cov = eval_kernel(&KernelSpec::KahaneFamily { c: 8.0, gamma: 1.0 }, &grid).unwrap();
        let f = DVector::from_fn(8, |i, _| ((i as f64) * 0.7).sin());
        let xi = shift_from_test_function(&f, &cov, &grid).unwrap();
        // direct double sum
        let mut direct = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                direct += f[i]
                    * cov.entry(i, j)
                    * f[j]
                    * grid.cell_measure[i]
                    * grid.cell_measure[j];
            }
        }
        assert_relative_eq!(xi.h_norm_sq, direct, max_relative = 1e-10);
    }
}
