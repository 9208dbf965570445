//! Cone-weighted neighbourhood density filter.

use crate::domain::DesignDomain;
use crate::error::Result;
use crate::field::DensityField;

/// Neighbour lists with weights `r_min - dist(i, j)` between element centres.
///
/// Stored in compressed rows; every row contains its own element with weight
/// `r_min`.
#[derive(Clone, Debug)]
pub struct FilterKernel {
    r_min: f64,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    /// `h_ij * v_j`
    weights: Vec<f64>,
    /// `sum_j h_ij * v_j`
    row_sums: Vec<f64>,
}

impl FilterKernel {
    /// Builds the kernel for radius `r_min` in metres.
    pub fn new(domain: &DesignDomain, r_min: f64) -> Self {
        let grid = domain.grid();
        let h = domain.h();
        let v = domain.element_volume();
        let reach = (r_min / h).ceil() as isize;
        let mut offsets = Vec::with_capacity(grid.len() + 1);
        let mut neighbors = Vec::new();
        let mut weights = Vec::new();
        let mut row_sums = Vec::with_capacity(grid.len());
        offsets.push(0);
        for e in 0..grid.len() {
            let (i, j, k) = grid.coords(e);
            let mut sum = 0.0;
            for dk in -reach..=reach {
                for dj in -reach..=reach {
                    for di in -reach..=reach {
                        let (ni, nj, nk) = (i as isize + di, j as isize + dj, k as isize + dk);
                        if ni < 0
                            || nj < 0
                            || nk < 0
                            || ni >= grid.nx as isize
                            || nj >= grid.ny as isize
                            || nk >= grid.nz as isize
                        {
                            continue;
                        }
                        let dist = h * ((di * di + dj * dj + dk * dk) as f64).sqrt();
                        let w = r_min - dist;
                        if w > 0.0 {
                            neighbors.push(grid.index(ni as usize, nj as usize, nk as usize));
                            weights.push(w * v);
                            sum += w * v;
                        }
                    }
                }
            }
            offsets.push(neighbors.len());
            row_sums.push(sum);
        }
        Self {
            r_min,
            offsets,
            neighbors,
            weights,
            row_sums,
        }
    }

    pub fn r_min(&self) -> f64 {
        self.r_min
    }

    pub fn len(&self) -> usize {
        self.row_sums.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_sums.is_empty()
    }

    /// `(neighbour, h_ij * v_j)` pairs of element `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.offsets[i]..self.offsets[i + 1];
        self.neighbors[span.clone()].iter().copied().zip(self.weights[span].iter().copied())
    }

    /// Filters raw values: `sum_j h_ij v_j x_j / sum_j h_ij v_j`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|i| self.row(i).map(|(j, w)| w * x[j]).sum::<f64>() / self.row_sums[i])
            .collect()
    }

    /// Adjoint of [`FilterKernel::apply`]: maps d/dx_tilde to d/dx.
    pub fn apply_transpose(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for i in 0..self.len() {
            let gi = g[i] / self.row_sums[i];
            for (j, w) in self.row(i) {
                out[j] += w * gi;
            }
        }
        out
    }
}

/// Filtered field `x_tilde`; the result stays within `[min x, max x]`.
pub fn density_filter(x: &DensityField, kernel: &FilterKernel) -> Result<DensityField> {
    let mut out = kernel.apply(x.values());
    // convex combination; clamp away rounding past the bounds
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    DensityField::new(x.grid(), out)
}
