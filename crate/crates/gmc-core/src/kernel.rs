//! Covariance kernels on a grid: definition, evaluation, sigma-positive
//! decomposition, mollification and moment diagnostics.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{kahan_sum, DomainGrid};
use crate::error::{GmcError, Result};

/// Bounded continuous perturbation g(t,s) of a log kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GFunction {
    Zero,
    Constant { value: f64 },
}

impl GFunction {
    fn eval(&self) -> f64 {
        match self {
            GFunction::Zero => 0.0,
            GFunction::Constant { value } => *value,
        }
    }
}

/// Smoothing profile. Box and Triangle are tensor products of the unit-mass
/// 1-d profiles; Tabulated carries 1-d samples on [-r, r] (endpoints
/// included), tensorized across axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case")]
pub enum Mollifier {
    Box { radius: f64 },
    Triangle { radius: f64 },
    Tabulated { radius: f64, values: Vec<f64> },
}

impl Mollifier {
    pub fn radius(&self) -> f64 {
        match self {
            Mollifier::Box { radius }
            | Mollifier::Triangle { radius }
            | Mollifier::Tabulated { radius, .. } => *radius,
        }
    }

    /// 1-d profile value at offset u (support |u| <= radius).
    fn profile_1d(&self, u: f64) -> f64 {
        let r = self.radius();
        let a = u.abs();
        if a > r {
            return 0.0;
        }
        match self {
            Mollifier::Box { .. } => 0.5 / r,
            Mollifier::Triangle { .. } => (1.0 - a / r) / r,
            Mollifier::Tabulated { values, .. } => {
                if values.len() < 2 {
                    return 0.0;
                }
                // linear interpolation over uniform samples of [-r, r]
                let x = (u + r) / (2.0 * r) * (values.len() - 1) as f64;
                let i = (x.floor() as usize).min(values.len() - 2);
                let frac = x - i as f64;
                values[i] * (1.0 - frac) + values[i + 1] * frac
            }
        }
    }

    fn psi(&self, offset: &[f64]) -> f64 {
        offset.iter().map(|&u| self.profile_1d(u)).product()
    }

    /// Nonnegativity and unit mass (trapezoid quadrature for tabulated).
    pub fn validate(&self) -> Result<()> {
        match self {
            Mollifier::Box { radius } | Mollifier::Triangle { radius } => {
                if *radius > 0.0 {
                    Ok(())
                } else {
                    Err(GmcError::InvalidInput("mollifier radius must be > 0".into()))
                }
            }
            Mollifier::Tabulated { radius, values } => {
                if *radius <= 0.0 {
                    return Err(GmcError::InvalidInput("mollifier radius must be > 0".into()));
                }
                if values.len() < 2 {
                    return Err(GmcError::InvalidInput(
                        "tabulated mollifier needs at least 2 samples".into(),
                    ));
                }
                if values.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                    return Err(GmcError::InvalidInput(
                        "tabulated mollifier must be nonnegative and finite".into(),
                    ));
                }
                let h = 2.0 * radius / (values.len() - 1) as f64;
                let mut mass = kahan_sum(values.iter().map(|&v| v * h));
                mass -= 0.5 * h * (values[0] + values[values.len() - 1]);
                if (mass - 1.0).abs() > 1e-10 {
                    return Err(GmcError::InvalidInput(format!(
                        "tabulated mollifier mass {mass} differs from 1 by more than 1e-10"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Discretized, boundary-renormalized smoothing weights from the cells of
    /// `from` onto the centers of `to`: w[i][j] ~ psi((t_i - s_j)/eps) mu_j,
    /// each row divided by its sum. Returns the weight matrix and an
    /// under-resolution flag (eps below the source grid spacing).
    pub fn weights(
        &self,
        to: &DomainGrid,
        from: &DomainGrid,
        eps: f64,
    ) -> Result<(DMatrix<f64>, bool)> {
        if eps <= 0.0 {
            return Err(GmcError::InvalidInput("mollification eps must be > 0".into()));
        }
        self.validate()?;
        let max_h = from.spacing.iter().cloned().fold(0.0f64, f64::max);
        let under_resolved = eps < max_h;
        if under_resolved {
            log::warn!("mollifier under-resolved: eps {eps} below grid spacing {max_h}");
        }
        let mut w = DMatrix::zeros(to.len(), from.len());
        let mut offset = vec![0.0; to.dim];
        for i in 0..to.len() {
            let mut row_sum = 0.0;
            for j in 0..from.len() {
                for k in 0..to.dim {
                    offset[k] = (to.centers[i][k] - from.centers[j][k]) / eps;
                }
                let v = self.psi(&offset) * from.cell_measure[j];
                w[(i, j)] = v;
                row_sum += v;
            }
            if row_sum > 0.0 {
                for j in 0..from.len() {
                    w[(i, j)] /= row_sum;
                }
            } else {
                // support too narrow to reach any source cell: collapse to the
                // nearest one so rows always sum to 1
                let nearest = (0..from.len())
                    .min_by(|&a, &b| {
                        let da: f64 = to.centers[i]
                            .iter()
                            .zip(&from.centers[a])
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum();
                        let db: f64 = to.centers[i]
                            .iter()
                            .zip(&from.centers[b])
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                w[(i, nearest)] = 1.0;
            }
        }
        Ok((w, under_resolved))
    }
}

/// Symbolic covariance kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum KernelSpec {
    /// Entries given directly (must be symmetric).
    Explicit { entries: Vec<Vec<f64>> },
    /// gamma^2 log+ |t-s|^-1 + g(t,s), diagonal capped at the cell scale.
    LogKernel { gamma: f64, g: GFunction },
    /// gamma^2 Int_1^C e^{-u|t-s|} du/u.
    KahaneFamily { c: f64, gamma: f64 },
    /// Ordered sum of pointwise-nonnegative PSD levels.
    SigmaPositiveSum { levels: Vec<KernelSpec> },
    /// Base kernel smoothed at scale epsilon.
    Mollified {
        base: Box<KernelSpec>,
        mollifier: Mollifier,
        epsilon: f64,
    },
}

/// PSD grid evaluation of a kernel together with its Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct CovMatrix {
    pub matrix: DMatrix<f64>,
    /// Lower-triangular L with L L^T = matrix + jitter I.
    pub factor: DMatrix<f64>,
    /// Jitter actually applied (from the escalation ladder).
    pub jitter: f64,
}

impl CovMatrix {
    pub fn size(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.matrix[(i, j)]
    }

    pub fn diag(&self) -> DVector<f64> {
        self.matrix.diagonal()
    }

    /// Stable identity of the matrix contents, used to tie samples to the
    /// covariance they came from.
    pub fn content_hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for v in self.matrix.iter() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    /// Row-major CSV with header `i,j,value`.
    pub fn to_csv(&self) -> String {
        let n = self.size();
        let mut out = String::from("i,j,value\n");
        for i in 0..n {
            for j in 0..n {
                out.push_str(&format!("{i},{j},{}\n", self.matrix[(i, j)]));
            }
        }
        out
    }
}

const JITTER_LADDER: [f64; 4] = [0.0, 1e-12, 1e-10, 1e-8];

/// Lower-triangular Cholesky that tolerates positive semi-definite input:
/// pivots within `tol` of zero freeze their column to zero instead of
/// failing, so singular but valid covariances (zero kernel, rank-deficient
/// mollifications) factor exactly. Returns None on a pivot below -tol.
fn semi_cholesky(mut m: DMatrix<f64>, tol: f64) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= m[(j, k)] * m[(j, k)];
        }
        if d > tol {
            let l = d.sqrt();
            m[(j, j)] = l;
            for i in j + 1..n {
                let mut s = m[(i, j)];
                for k in 0..j {
                    s -= m[(i, k)] * m[(j, k)];
                }
                m[(i, j)] = s / l;
            }
        } else if d >= -tol {
            for i in j..n {
                m[(i, j)] = 0.0;
            }
        } else {
            return None;
        }
        for k in j + 1..n {
            m[(j, k)] = 0.0;
        }
    }
    Some(m)
}

/// Cholesky with the jitter escalation ladder (relative to max diagonal).
pub fn factorize(matrix: DMatrix<f64>) -> Result<CovMatrix> {
    let n = matrix.nrows();
    let max_diag = (0..n).map(|i| matrix[(i, i)]).fold(0.0f64, f64::max);
    let scale = if max_diag > 0.0 { max_diag } else { 1.0 };
    let tol = 1e-10 * scale * n as f64;
    for &rel in &JITTER_LADDER {
        let jitter = rel * scale;
        let mut m = matrix.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(factor) = semi_cholesky(m, tol) {
            return Ok(CovMatrix {
                matrix,
                factor,
                jitter,
            });
        }
    }
    let eig = nalgebra::SymmetricEigen::new(matrix);
    let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    Err(GmcError::NotPositiveDefinite {
        max_jitter: JITTER_LADDER[JITTER_LADDER.len() - 1] * scale,
        min_eigenvalue: min_eig,
    })
}

fn cell_scale(grid: &DomainGrid) -> f64 {
    grid.spacing.iter().cloned().fold(f64::INFINITY, f64::min)
}

fn log_plus(x: f64) -> f64 {
    if x > 1.0 {
        x.ln()
    } else {
        0.0
    }
}

/// Kernel entry at a center pair, before factorization. `i == j` takes the
/// regularized diagonal branch.
fn entry(spec: &KernelSpec, grid: &DomainGrid, i: usize, j: usize) -> Result<f64> {
    match spec {
        KernelSpec::Explicit { entries } => Ok(entries[i][j]),
        KernelSpec::LogKernel { gamma, g } => {
            let gg = gamma * gamma;
            if i == j {
                // continuum diagonal is infinite; cap at the cell
                // self-interaction scale h/2
                Ok(gg * log_plus(2.0 / cell_scale(grid)) + g.eval())
            } else {
                let r = grid.distance(i, j);
                Ok(gg * log_plus(1.0 / r) + g.eval())
            }
        }
        KernelSpec::KahaneFamily { c, gamma } => {
            let gg = gamma * gamma;
            if i == j {
                Ok(gg * c.ln())
            } else {
                Ok(gg * kahane_integral(grid.distance(i, j), 1.0, *c))
            }
        }
        KernelSpec::SigmaPositiveSum { levels } => {
            let mut acc = 0.0;
            for level in levels {
                let v = entry(level, grid, i, j)?;
                if v < 0.0 {
                    return Err(GmcError::InvalidInput(format!(
                        "sigma-positive level has negative entry {v} at ({i},{j})"
                    )));
                }
                acc += v;
            }
            Ok(acc)
        }
        KernelSpec::Mollified { .. } => unreachable!("mollified kernels are evaluated whole"),
    }
}

/// Evaluate a kernel on the grid and factorize. The upper triangle is
/// computed and mirrored so symmetry holds bitwise.
pub fn eval_kernel(spec: &KernelSpec, grid: &DomainGrid) -> Result<CovMatrix> {
    if grid.is_empty() {
        return Err(GmcError::InvalidInput("empty grid".into()));
    }
    if let KernelSpec::Mollified {
        base,
        mollifier,
        epsilon,
    } = spec
    {
        let inner = eval_kernel(base, grid)?;
        return mollify_kernel(&inner, grid, mollifier, *epsilon);
    }
    let n = grid.len();
    if let KernelSpec::Explicit { entries } = spec {
        if entries.len() != n || entries.iter().any(|row| row.len() != n) {
            return Err(GmcError::InvalidInput(format!(
                "explicit kernel size does not match grid ({n} cells)"
            )));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if entries[i][j] != entries[j][i] {
                    return Err(GmcError::InvalidInput(format!(
                        "explicit kernel not symmetric at ({i},{j})"
                    )));
                }
            }
        }
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i..n)
                .map(|j| entry(spec, grid, i, j))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut m = DMatrix::zeros(n, n);
    for (i, row) in rows.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            let j = i + off;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    factorize(m)
}

/// gamma^2-free part of the Kahane family: Int_{c0}^{c1} e^{-u r} du/u,
/// computed as Int e^{-r e^v} dv on log-u panels by adaptive Gauss-Legendre
/// to absolute tolerance 1e-10.
pub fn kahane_integral(r: f64, c0: f64, c1: f64) -> f64 {
    let f = |v: f64| (-r * v.exp()).exp();
    adaptive_gl(&f, c0.ln(), c1.ln(), 1e-10, 0)
}

const GL_ORDER: usize = 16;

fn gl_nodes() -> &'static (Vec<f64>, Vec<f64>) {
    static NODES: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    NODES.get_or_init(|| {
        // Newton iteration on P_n over [-1, 1]
        let n = GL_ORDER;
        let mut xs = Vec::with_capacity(n);
        let mut ws = Vec::with_capacity(n);
        for i in 0..n {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                let (p, dp) = legendre(n, x);
                let dx = p / dp;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            let (_, dp) = legendre(n, x);
            xs.push(x);
            ws.push(2.0 / ((1.0 - x * x) * dp * dp));
        }
        (xs, ws)
    })
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

fn gl_panel(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let (xs, ws) = gl_nodes();
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut acc = 0.0;
    for (x, w) in xs.iter().zip(ws) {
        acc += w * f(mid + half * x);
    }
    acc * half
}

fn adaptive_gl(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let whole = gl_panel(f, a, b);
    let mid = 0.5 * (a + b);
    let split = gl_panel(f, a, mid) + gl_panel(f, mid, b);
    if (whole - split).abs() <= tol || depth >= 40 {
        split
    } else {
        adaptive_gl(f, a, mid, tol / 2.0, depth + 1) + adaptive_gl(f, mid, b, tol / 2.0, depth + 1)
    }
}

/// Split a KahaneFamily kernel into martingale levels
/// p_k = gamma^2 Int_{C_{k-1}}^{C_k} e^{-u|t-s|} du/u. Cutoffs default to the
/// geometric ladder C^(k/L), which gives every level the same diagonal
/// variance gamma^2 log(C)/L.
pub fn sigma_positive_decompose(
    spec: &KernelSpec,
    grid: &DomainGrid,
    levels: usize,
    cutoffs: Option<&[f64]>,
) -> Result<Vec<CovMatrix>> {
    let (c, gamma) = match spec {
        KernelSpec::KahaneFamily { c, gamma } => (*c, *gamma),
        _ => {
            return Err(GmcError::InvalidInput(
                "sigma_positive_decompose requires a KahaneFamily kernel".into(),
            ))
        }
    };
    if levels < 1 {
        return Err(GmcError::InvalidInput("levels must be >= 1".into()));
    }
    let cuts: Vec<f64> = match cutoffs {
        Some(cs) => cs.to_vec(),
        None => (0..=levels)
            .map(|k| c.powf(k as f64 / levels as f64))
            .collect(),
    };
    if cuts.len() != levels + 1 {
        return Err(GmcError::InvalidInput(format!(
            "expected {} cutoffs, got {}",
            levels + 1,
            cuts.len()
        )));
    }
    if (cuts[0] - 1.0).abs() > 1e-12 || (cuts[levels] - c).abs() > 1e-9 * c.max(1.0) {
        return Err(GmcError::InvalidInput(
            "cutoffs must start at 1 and end at C".into(),
        ));
    }
    if cuts.windows(2).any(|w| w[1] <= w[0]) {
        return Err(GmcError::InvalidInput("cutoffs must be strictly increasing".into()));
    }

    let n = grid.len();
    let gg = gamma * gamma;
    let mut out = Vec::with_capacity(levels);
    for k in 0..levels {
        let (lo, hi) = (cuts[k], cuts[k + 1]);
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                (i..n)
                    .map(|j| {
                        if i == j {
                            gg * (hi / lo).ln()
                        } else {
                            gg * kahane_integral(grid.distance(i, j), lo, hi)
                        }
                    })
                    .collect()
            })
            .collect();
        let mut m = DMatrix::zeros(n, n);
        for (i, row) in rows.iter().enumerate() {
            for (off, &v) in row.iter().enumerate() {
                let j = i + off;
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        out.push(factorize(m)?);
    }
    Ok(out)
}

/// Smooth a covariance by the congruence W K W^T with the discretized,
/// row-normalized mollifier weights.
pub fn mollify_kernel(
    k: &CovMatrix,
    grid: &DomainGrid,
    moll: &Mollifier,
    eps: f64,
) -> Result<CovMatrix> {
    let (w, _under) = moll.weights(grid, grid, eps)?;
    factorize(congruence(&w, &k.matrix))
}

/// W K W^T with the upper triangle mirrored so the result is bitwise
/// symmetric.
pub fn congruence(w: &DMatrix<f64>, k: &DMatrix<f64>) -> DMatrix<f64> {
    let a = w * k; // n_to x n_from
    let n = w.nrows();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = a.row(i).dot(&w.row(j));
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// n-th kernel moment Sum_ij K_ij^n mu_i mu_j.
pub fn kernel_moment(k: &CovMatrix, grid: &DomainGrid, n: u32) -> f64 {
    assert!(n >= 1, "kernel moment order must be >= 1");
    let size = k.size();
    kahan_sum((0..size).flat_map(|i| {
        let k = &k;
        let grid = &grid;
        (0..size).map(move |j| k.matrix[(i, j)].powi(n as i32) * grid.cell_measure[i] * grid.cell_measure[j])
    }))
}

/// Sup over window positions of the box-smoothed n-th power of a 1-d log
/// kernel: max_(a,b) (1/eps^2) Int_[a,a+eps]x[b,b+eps] K(t,s)^n dt ds,
/// discretized on a uniform fine grid. Returns (eps, sup) pairs for the
/// ladder; callers compare against |log eps|^n.
pub fn kernel_moment_scaling(
    gamma: f64,
    g: &GFunction,
    fine_n: usize,
    n: u32,
    eps_ladder: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if fine_n < 2 {
        return Err(GmcError::InvalidInput("fine grid must have >= 2 cells".into()));
    }
    let grid = crate::domain::build_grid(1, &[(0.0, 1.0)], fine_n, None)?;
    let spec = KernelSpec::LogKernel {
        gamma,
        g: g.clone(),
    };
    let size = grid.len();
    // prefix sums of K^n over the index plane; windows then cost O(1)
    let mut prefix = vec![0.0f64; (size + 1) * (size + 1)];
    for i in 0..size {
        let mut row_acc = 0.0;
        for j in 0..size {
            let v = entry(&spec, &grid, i.min(j), i.max(j))?.powi(n as i32);
            row_acc += v;
            prefix[(i + 1) * (size + 1) + (j + 1)] =
                prefix[i * (size + 1) + (j + 1)] + row_acc;
        }
    }
    let h = grid.spacing[0];
    let mut out = Vec::with_capacity(eps_ladder.len());
    for &eps in eps_ladder {
        let w = ((eps / h).round() as usize).clamp(1, size);
        let cells = (w * w) as f64;
        let mut sup = f64::NEG_INFINITY;
        for a in 0..=(size - w) {
            for b in 0..=(size - w) {
                let s = prefix[(a + w) * (size + 1) + (b + w)]
                    - prefix[a * (size + 1) + (b + w)]
                    - prefix[(a + w) * (size + 1) + b]
                    + prefix[a * (size + 1) + b];
                let avg = s / cells;
                if avg > sup {
                    sup = avg;
                }
            }
        }
        out.push((eps, sup));
    }
    Ok(out)
}
