use rayon::prelude::*;

use super::grid::{DensityField, PhaseGrid};
use crate::model::{InteractionModel, PotentialParams};

/// `K(Δ)` for every cell-centre offset of a grid, so that convolutions only
/// look values up.
#[derive(Debug, Clone)]
pub struct ConvolutionTable {
    n: [usize; 2],
    width: usize,
    kernel: Vec<[f64; 2]>,
}

impl ConvolutionTable {
    pub fn new(grid: &PhaseGrid, p: &PotentialParams) -> Self {
        let n = grid.n_x;
        let width = 2 * n[1] - 1;
        let mut kernel = vec![[0.0; 2]; (2 * n[0] - 1) * width];
        for a in 0..2 * n[0] - 1 {
            for b in 0..width {
                let z = [
                    (a as f64 - (n[0] - 1) as f64) * grid.dx(0),
                    (b as f64 - (n[1] - 1) as f64) * grid.dx(1),
                ];
                let mut k = [0.0; 2];
                p.force_at(&z, &mut k);
                kernel[a * width + b] = k;
            }
        }
        ConvolutionTable { n, width, kernel }
    }

    #[inline]
    fn at(&self, target: usize, source: usize) -> [f64; 2] {
        let (t1, t2) = (target / self.n[1], target % self.n[1]);
        let (s1, s2) = (source / self.n[1], source % self.n[1]);
        let a = t1 + self.n[0] - 1 - s1;
        let b = t2 + self.n[1] - 1 - s2;
        self.kernel[a * self.width + b]
    }

    /// `out(s) = Σ_{s'} K(x_s − x_{s'}) w(s')`.
    pub fn apply(&self, weights: &[f64]) -> Vec<[f64; 2]> {
        let sources: Vec<(usize, f64)> = weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(|(s, w)| (s, *w))
            .collect();
        (0..weights.len())
            .into_par_iter()
            .map(|t| {
                let mut acc = [0.0; 2];
                for &(s, w) in &sources {
                    let k = self.at(t, s);
                    acc[0] += k[0] * w;
                    acc[1] += k[1] * w;
                }
                acc
            })
            .collect()
    }

    /// Transpose of [`Self::apply`]: `out(s') = Σ_s K(x_s − x_{s'})·w(s)`.
    pub fn apply_transpose(&self, w: &[[f64; 2]]) -> Vec<f64> {
        let sources: Vec<(usize, [f64; 2])> = w
            .iter()
            .enumerate()
            .filter(|(_, v)| v[0] != 0.0 || v[1] != 0.0)
            .map(|(s, v)| (s, *v))
            .collect();
        (0..w.len())
            .into_par_iter()
            .map(|t| {
                let mut acc = 0.0;
                for &(s, v) in &sources {
                    let k = self.at(s, t);
                    acc += k[0] * v[0] + k[1] * v[1];
                }
                acc
            })
            .collect()
    }
}

/// `(K1 ∗ ρ)(x) = Σ_cells K1(x − x̄) ρ(x̄) Δx²` at every spatial cell centre.
pub fn convolve_force(field: &DensityField, p1: &PotentialParams) -> Vec<[f64; 2]> {
    let table = ConvolutionTable::new(&field.grid, p1);
    let area = field.grid.cell_area();
    let mut rho = field.spatial_density();
    rho.iter_mut().for_each(|r| *r *= area);
    table.apply(&rho)
}

/// Acceleration field `−(K1 ∗ ρ)(x) − (1/M) Σ_m K2(x − d_m)` without friction.
pub(crate) fn interaction_field(
    grid: &PhaseGrid,
    table: Option<&ConvolutionTable>,
    rho: &[f64],
    agents: &[f64],
    model: &InteractionModel,
) -> Vec<[f64; 2]> {
    let area = grid.cell_area();
    let mut out = match table {
        Some(t) => {
            let w: Vec<f64> = rho.iter().map(|r| r * area).collect();
            let mut c = t.apply(&w);
            c.iter_mut().for_each(|v| {
                v[0] = -v[0];
                v[1] = -v[1];
            });
            c
        }
        None => vec![[0.0; 2]; rho.len()],
    };
    if !model.phi2.is_zero() {
        let inv_m = 1.0 / (agents.len() / 2) as f64;
        for (s, o) in out.iter_mut().enumerate() {
            let x = grid.spatial_center(s);
            for d in agents.chunks(2) {
                let mut k = [0.0; 2];
                model.phi2.force_at(&[x[0] - d[0], x[1] - d[1]], &mut k);
                o[0] -= inv_m * k[0];
                o[1] -= inv_m * k[1];
            }
        }
    }
    out
}

/// Pulls a cotangent of [`interaction_field`] back to the spatial density and
/// the agent positions. Returns `(ρ̄, d̄)`.
pub(crate) fn interaction_field_vjp(
    grid: &PhaseGrid,
    table: Option<&ConvolutionTable>,
    agents: &[f64],
    model: &InteractionModel,
    bar: &[[f64; 2]],
) -> (Vec<f64>, Vec<f64>) {
    let area = grid.cell_area();
    let rho_bar = match table {
        Some(t) => {
            let mut r = t.apply_transpose(bar);
            r.iter_mut().for_each(|v| *v *= -area);
            r
        }
        None => vec![0.0; bar.len()],
    };
    let mut d_bar = vec![0.0; agents.len()];
    if !model.phi2.is_zero() {
        let inv_m = 1.0 / (agents.len() / 2) as f64;
        for (s, b) in bar.iter().enumerate() {
            if b[0] == 0.0 && b[1] == 0.0 {
                continue;
            }
            let x = grid.spatial_center(s);
            for (d, db) in agents.chunks(2).zip(d_bar.chunks_mut(2)) {
                model
                    .phi2
                    .hessian_apply_add(&[x[0] - d[0], x[1] - d[1]], b, inv_m, db);
            }
        }
    }
    (rho_bar, d_bar)
}
