//! Chaos measures: exponentially reweighted cell measures normalized so that
//! E M = mu, plus the martingale approximation over sigma-positive levels.

use nalgebra::DVector;

use crate::domain::{kahan_sum, DomainGrid};
use crate::error::{GmcError, Result};
use crate::gaussian::{sample_field, FieldSample, SeedRecord, ShiftVector};
use crate::kernel::CovMatrix;

/// Exponent magnitude beyond which weights are clamped instead of silently
/// overflowing; each clamp is counted.
pub const EXP_CLAMP: f64 = 700.0;

/// Per-cell nonnegative weights m_i = exp(c X_i - c^2 K_ii / 2) mu_i.
#[derive(Debug, Clone, PartialEq)]
pub struct ChaosMeasure {
    pub weights: DVector<f64>,
    pub grid_ref: usize,
    pub gamma_meta: Option<f64>,
    /// Variance diagonal used in the normalization.
    pub normalization: DVector<f64>,
    /// Number of cells whose exponent hit the clamp.
    pub clamp_count: usize,
}

impl ChaosMeasure {
    pub fn total_mass(&self) -> f64 {
        kahan_sum(self.weights.iter().copied())
    }

    /// Mass of a cell subset.
    pub fn mass_of(&self, cells: &[usize]) -> f64 {
        kahan_sum(cells.iter().map(|&i| self.weights[i]))
    }

    /// CSV export, `cell_index,weight`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cell_index,weight\n");
        for (i, w) in self.weights.iter().enumerate() {
            out.push_str(&format!("{i},{w}\n"));
        }
        out
    }
}

fn clamped_exp(e: f64, clamp_count: &mut usize) -> f64 {
    if e.abs() > EXP_CLAMP {
        *clamp_count += 1;
        e.clamp(-EXP_CLAMP, EXP_CLAMP).exp()
    } else {
        e.exp()
    }
}

/// m_i = exp(X_i - K_ii/2) mu_i. The normalization uses the same diagonal the
/// kernel evaluation produced (including the log diagonal cap) so E M = mu
/// holds exactly at the discrete level.
pub fn build_chaos(x: &FieldSample, cov: &CovMatrix, grid: &DomainGrid) -> Result<ChaosMeasure> {
    build_scaled_chaos(x, cov, grid, 1.0)
}

/// m_i = exp(c X_i - c^2 K_ii / 2) mu_i, the chaos associated to the scaled
/// field cY; requires |c| <= 1.
pub fn build_scaled_chaos(
    x: &FieldSample,
    cov: &CovMatrix,
    grid: &DomainGrid,
    c: f64,
) -> Result<ChaosMeasure> {
    if c.abs() > 1.0 {
        return Err(GmcError::InvalidInput(format!(
            "scale c = {c} outside [-1, 1]"
        )));
    }
    let n = grid.len();
    if x.values.len() != n || cov.size() != n {
        return Err(GmcError::GridMismatch("chaos shape mismatch".into()));
    }
    let diag = cov.diag();
    if diag.iter().any(|v| !v.is_finite()) {
        return Err(GmcError::InvalidInput(
            "covariance diagonal must be finite (log kernels need the diagonal cap)".into(),
        ));
    }
    let mut clamp_count = 0usize;
    let weights = DVector::from_fn(n, |i, _| {
        let e = c * x.values[i] - 0.5 * c * c * diag[i];
        clamped_exp(e, &mut clamp_count) * grid.cell_measure[i]
    });
    if clamp_count > 0 {
        log::warn!("chaos exponent clamped on {clamp_count} cells");
    }
    Ok(ChaosMeasure {
        weights,
        grid_ref: n,
        gamma_meta: Some(c),
        normalization: DVector::from_fn(n, |i, _| c * c * diag[i]),
        clamp_count,
    })
}

/// Kahane's martingale approximation: X_n = Sum_{k<=n} X^(k) with independent
/// level samples, M_n normalized by the accumulated diagonal. Level k draws
/// from the substream of `seed` indexed by k.
pub fn martingale_sequence(
    levels: &[CovMatrix],
    grid: &DomainGrid,
    seed: SeedRecord,
) -> Result<Vec<ChaosMeasure>> {
    let n = grid.len();
    for (k, level) in levels.iter().enumerate() {
        if level.size() != n {
            return Err(GmcError::GridMismatch(format!("level {k} size mismatch")));
        }
        if level.matrix.iter().any(|&v| v < 0.0) {
            return Err(GmcError::InvalidInput(format!(
                "level {k} is not pointwise nonnegative"
            )));
        }
    }
    let mut cum_values = DVector::zeros(n);
    let mut cum_diag = DVector::zeros(n);
    let mut out = Vec::with_capacity(levels.len());
    for (k, level) in levels.iter().enumerate() {
        let xk = sample_field(level, seed.substream(k as u64));
        cum_values += &xk.values;
        cum_diag += &level.diag();
        let mut clamp_count = 0usize;
        let weights = DVector::from_fn(n, |i, _| {
            let e = cum_values[i] - 0.5 * cum_diag[i];
            clamped_exp(e, &mut clamp_count) * grid.cell_measure[i]
        });
        out.push(ChaosMeasure {
            weights,
            grid_ref: n,
            gamma_meta: None,
            normalization: cum_diag.clone(),
            clamp_count,
        });
    }
    Ok(out)
}

/// Integral of a grid function against the measure: Sum_i f_i m_i.
pub fn integrate(m: &ChaosMeasure, f: &DVector<f64>) -> f64 {
    assert_eq!(f.len(), m.weights.len(), "shape mismatch");
    kahan_sum((0..f.len()).map(|i| f[i] * m.weights[i]))
}

/// The GMC shift covariance: M(X + xi, dt) = e^{xi(t)} M(X, dt) realized by
/// reweighting, m_i' = e^{field_repr_i} m_i.
pub fn reweight_shift(m: &ChaosMeasure, xi: &ShiftVector) -> ChaosMeasure {
    assert_eq!(xi.field_repr.len(), m.weights.len(), "shape mismatch");
    let mut clamp_count = m.clamp_count;
    let weights = DVector::from_fn(m.weights.len(), |i, _| {
        clamped_exp(xi.field_repr[i], &mut clamp_count) * m.weights[i]
    });
    ChaosMeasure {
        weights,
        grid_ref: m.grid_ref,
        gamma_meta: m.gamma_meta,
        normalization: m.normalization.clone(),
        clamp_count,
    }
}
