//! Discretization of the parameter space: axis-aligned boxes in R^d carrying
//! a finite reference measure, realized by midpoint quadrature.

use serde::{Deserialize, Serialize};

use crate::error::{GmcError, Result};

/// Reference density on the box. Kept as a serializable tag so a grid can be
/// reconstructed bit-stably from its JSON description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Density {
    /// Lebesgue measure.
    Uniform,
    /// `scale * t[axis]`, e.g. the density 2t on [0,1].
    AxisLinear { axis: usize, scale: f64 },
}

impl Density {
    pub fn eval(&self, t: &[f64]) -> f64 {
        match self {
            Density::Uniform => 1.0,
            Density::AxisLinear { axis, scale } => scale * t[*axis],
        }
    }

    pub fn tag(&self) -> String {
        match self {
            Density::Uniform => "uniform".to_string(),
            Density::AxisLinear { axis, scale } => format!("axis_linear[{axis}]*{scale}"),
        }
    }
}

/// Serializable description of a grid. Centers and measures are never stored;
/// they are recomputed on load so reconstruction is bit-stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dim: usize,
    pub bounds: Vec<(f64, f64)>,
    pub n_per_axis: usize,
    pub density: Density,
}

/// A discretized (T, mu): cell centers and midpoint-rule cell measures on an
/// axis-aligned box. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainGrid {
    pub dim: usize,
    pub bounds: Vec<(f64, f64)>,
    pub n_per_axis: usize,
    pub density: Density,
    pub centers: Vec<Vec<f64>>,
    pub cell_measure: Vec<f64>,
    pub spacing: Vec<f64>,
}

/// Compensated (Kahan) summation; measure totals must conserve to one ulp.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let y = x - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

pub fn kahan_sum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    let mut acc = KahanSum::default();
    for x in iter {
        acc.add(x);
    }
    acc.value()
}

pub fn build_grid(
    dim: usize,
    bounds: &[(f64, f64)],
    n_per_axis: usize,
    density: Option<Density>,
) -> Result<DomainGrid> {
    if dim < 1 {
        return Err(GmcError::InvalidInput("dim must be >= 1".into()));
    }
    if bounds.len() != dim {
        return Err(GmcError::InvalidInput(format!(
            "expected {dim} bounds, got {}",
            bounds.len()
        )));
    }
    if n_per_axis < 1 {
        return Err(GmcError::InvalidInput("n_per_axis must be >= 1".into()));
    }
    for &(a, b) in bounds {
        if !(b - a > 0.0) {
            return Err(GmcError::InvalidInput(format!(
                "nonpositive interval length [{a}, {b}]"
            )));
        }
    }
    let density = density.unwrap_or(Density::Uniform);

    let spacing: Vec<f64> = bounds
        .iter()
        .map(|&(a, b)| (b - a) / n_per_axis as f64)
        .collect();
    let n_cells = n_per_axis.pow(dim as u32);
    let cell_volume: f64 = spacing.iter().product();

    let mut centers = Vec::with_capacity(n_cells);
    let mut cell_measure = Vec::with_capacity(n_cells);
    for flat in 0..n_cells {
        let mut idx = flat;
        let mut center = vec![0.0; dim];
        // row-major: last axis varies fastest
        for k in (0..dim).rev() {
            let i = idx % n_per_axis;
            idx /= n_per_axis;
            center[k] = bounds[k].0 + (i as f64 + 0.5) * spacing[k];
        }
        let rho = density.eval(&center);
        if rho < 0.0 {
            return Err(GmcError::InvalidInput(format!(
                "negative density value {rho} at {center:?}"
            )));
        }
        cell_measure.push(rho * cell_volume);
        centers.push(center);
    }

    Ok(DomainGrid {
        dim,
        bounds: bounds.to_vec(),
        n_per_axis,
        density,
        centers,
        cell_measure,
        spacing,
    })
}

pub fn refine(grid: &DomainGrid, factor: usize) -> Result<DomainGrid> {
    if factor < 2 {
        return Err(GmcError::InvalidInput("refine factor must be >= 2".into()));
    }
    build_grid(
        grid.dim,
        &grid.bounds,
        grid.n_per_axis * factor,
        Some(grid.density.clone()),
    )
}

impl DomainGrid {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn total_measure(&self) -> f64 {
        kahan_sum(self.cell_measure.iter().copied())
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec {
            dim: self.dim,
            bounds: self.bounds.clone(),
            n_per_axis: self.n_per_axis,
            density: self.density.clone(),
        }
    }

    pub fn from_spec(spec: &GridSpec) -> Result<DomainGrid> {
        build_grid(
            spec.dim,
            &spec.bounds,
            spec.n_per_axis,
            Some(spec.density.clone()),
        )
    }

    /// Euclidean distance between cell centers i and j.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.centers[i]
            .iter()
            .zip(&self.centers[j])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// True when `self` is an integer refinement of `coarse` on the same box.
    pub fn refines(&self, coarse: &DomainGrid) -> bool {
        self.dim == coarse.dim
            && self.bounds == coarse.bounds
            && coarse.n_per_axis >= 1
            && self.n_per_axis % coarse.n_per_axis == 0
    }
}
