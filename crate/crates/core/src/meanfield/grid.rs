use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform cell-centred tensor grid on `[−L/2, L/2]² × [−V, V]²`.
///
/// Values are stored row-major in the order `(x1, x2, v1, v2)`, so the
/// velocity plane of one spatial cell is contiguous.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseGrid {
    pub half_length: f64,
    pub v_max: f64,
    pub n_x: [usize; 2],
    pub n_v: [usize; 2],
}

impl PhaseGrid {
    pub fn new(half_length: f64, v_max: f64, n_x: [usize; 2], n_v: [usize; 2]) -> Result<Self> {
        if !(half_length > 0.0 && v_max > 0.0) {
            return Err(Error::invalid("grid bounds must be positive"));
        }
        if n_x.iter().chain(&n_v).any(|&n| n < 4) {
            return Err(Error::invalid(format!(
                "grid needs at least 4 points per dimension, got n_x = {n_x:?}, n_v = {n_v:?}"
            )));
        }
        Ok(PhaseGrid {
            half_length,
            v_max,
            n_x,
            n_v,
        })
    }

    /// The experiment domain `[−100, 100]² × [−5, 5]²` with `n_x` spatial and
    /// `n_v` velocity points per dimension.
    pub fn paper(n_x: usize, n_v: usize) -> Result<Self> {
        Self::new(100.0, 5.0, [n_x, n_x], [n_v, n_v])
    }

    pub fn length(&self) -> f64 {
        2.0 * self.half_length
    }

    pub fn dx(&self, axis: usize) -> f64 {
        self.length() / self.n_x[axis] as f64
    }

    pub fn dv(&self, axis: usize) -> f64 {
        2.0 * self.v_max / self.n_v[axis] as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.dx(0) * self.dx(1)
    }

    pub fn velocity_area(&self) -> f64 {
        self.dv(0) * self.dv(1)
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_area() * self.velocity_area()
    }

    pub fn spatial_cells(&self) -> usize {
        self.n_x[0] * self.n_x[1]
    }

    pub fn velocity_cells(&self) -> usize {
        self.n_v[0] * self.n_v[1]
    }

    pub fn len(&self) -> usize {
        self.spatial_cells() * self.velocity_cells()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bytes_per_field(&self) -> u64 {
        (self.len() * std::mem::size_of::<f64>()) as u64
    }

    pub fn x_center(&self, axis: usize, i: usize) -> f64 {
        -self.half_length + (i as f64 + 0.5) * self.dx(axis)
    }

    pub fn v_center(&self, axis: usize, j: usize) -> f64 {
        -self.v_max + (j as f64 + 0.5) * self.dv(axis)
    }

    /// Velocity at the face between cells `j − 1` and `j`.
    pub fn v_face(&self, axis: usize, j: usize) -> f64 {
        -self.v_max + j as f64 * self.dv(axis)
    }

    /// Centre of spatial cell `s = i1·n_x2 + i2`.
    pub fn spatial_center(&self, s: usize) -> [f64; 2] {
        [
            self.x_center(0, s / self.n_x[1]),
            self.x_center(1, s % self.n_x[1]),
        ]
    }

    pub fn velocity_center(&self, q: usize) -> [f64; 2] {
        [
            self.v_center(0, q / self.n_v[1]),
            self.v_center(1, q % self.n_v[1]),
        ]
    }

    /// Largest stable absolute time step `dt · V / Δx ≤ 0.5` on both axes.
    pub fn max_time_step(&self) -> f64 {
        0.5 * self.dx(0).min(self.dx(1)) / self.v_max
    }

    pub fn check_cfl(&self, dt: f64) -> Result<()> {
        for axis in 0..2 {
            let number = dt * self.v_max / self.dx(axis);
            if number > 0.5 * (1.0 + 1e-12) {
                return Err(Error::Cfl(format!(
                    "dt·|V|/Δx = {dt}·{}/{} = {number:.6} > 0.5 on axis {axis}",
                    self.v_max,
                    self.dx(axis)
                )));
            }
        }
        Ok(())
    }
}

/// Nonnegative phase-space density on a [`PhaseGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    pub grid: PhaseGrid,
    pub values: Vec<f64>,
}

/// Velocity marginal used to build the initial density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VelocityProfile {
    /// Isotropic Gaussian bump centred at zero with standard deviation `width`.
    Gaussian { width: f64 },
    /// All mass in the velocity cell(s) adjacent to `v = 0`.
    AtRest,
}

impl Default for VelocityProfile {
    fn default() -> Self {
        VelocityProfile::Gaussian { width: 0.5 }
    }
}

impl DensityField {
    pub fn zeros(grid: PhaseGrid) -> Self {
        DensityField {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn from_values(grid: PhaseGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::shape(format!(
                "density has {} values, grid has {} cells",
                values.len(),
                grid.len()
            )));
        }
        Ok(DensityField { grid, values })
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Spatial density `ρ(x) = ∫ f dv`.
    pub fn spatial_density(&self) -> Vec<f64> {
        spatial_density(&self.grid, &self.values)
    }

    /// Unnormalised moments `(m, E, V)` with `E = ∫x dμ`, `V = ∫|x − E|² dμ`.
    pub fn moments(&self) -> SpatialMoments {
        SpatialMoments::of(&self.grid, &self.values)
    }
}

pub(crate) fn spatial_density(grid: &PhaseGrid, values: &[f64]) -> Vec<f64> {
    let nv = grid.velocity_cells();
    let dw = grid.velocity_area();
    values
        .chunks(nv)
        .map(|plane| plane.iter().sum::<f64>() * dw)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialMoments {
    pub mass: f64,
    pub mean: [f64; 2],
    pub variance: f64,
}

impl SpatialMoments {
    pub fn of(grid: &PhaseGrid, values: &[f64]) -> Self {
        Self::of_density(grid, &spatial_density(grid, values))
    }

    pub fn of_density(grid: &PhaseGrid, rho: &[f64]) -> Self {
        let da = grid.cell_area();
        let mut mass = 0.0;
        let mut first = [0.0; 2];
        let mut second = 0.0;
        for (s, r) in rho.iter().enumerate() {
            if *r == 0.0 {
                continue;
            }
            let x = grid.spatial_center(s);
            let w = r * da;
            mass += w;
            first[0] += w * x[0];
            first[1] += w * x[1];
            second += w * (x[0] * x[0] + x[1] * x[1]);
        }
        let e2 = first[0] * first[0] + first[1] * first[1];
        SpatialMoments {
            mass,
            mean: first,
            variance: second - 2.0 * e2 + mass * e2,
        }
    }
}

/// Uniform spatial density on `support = [x_lo, x_hi] × [y_lo, y_hi]` times
/// the velocity profile, renormalised to unit discrete mass. Cells cut by
/// the box edge receive their exact overlap fraction.
pub fn sample_initial_density(
    grid: &PhaseGrid,
    support: [[f64; 2]; 2],
    profile: VelocityProfile,
) -> Result<DensityField> {
    for axis in 0..2 {
        let [lo, hi] = support[axis];
        if !(lo < hi) || lo < -grid.half_length || hi > grid.half_length {
            return Err(Error::invalid(format!(
                "support [{lo}, {hi}] on axis {axis} is empty or outside [−{0}, {0}]",
                grid.half_length
            )));
        }
    }
    let overlap = |axis: usize, i: usize| -> f64 {
        let h = grid.dx(axis);
        let a = grid.x_center(axis, i) - 0.5 * h;
        let b = a + h;
        ((b.min(support[axis][1]) - a.max(support[axis][0])) / h).max(0.0)
    };
    let wx: Vec<Vec<f64>> = (0..2)
        .map(|axis| (0..grid.n_x[axis]).map(|i| overlap(axis, i)).collect())
        .collect();
    let velocity = velocity_weights(grid, profile)?;
    let nv = grid.velocity_cells();
    let mut values = vec![0.0; grid.len()];
    for i1 in 0..grid.n_x[0] {
        for i2 in 0..grid.n_x[1] {
            let w = wx[0][i1] * wx[1][i2];
            if w == 0.0 {
                continue;
            }
            let s = i1 * grid.n_x[1] + i2;
            for (o, v) in values[s * nv..(s + 1) * nv].iter_mut().zip(&velocity) {
                *o = w * v;
            }
        }
    }
    let total: f64 = values.iter().sum::<f64>() * grid.cell_volume();
    values.iter_mut().for_each(|v| *v /= total);
    Ok(DensityField {
        grid: *grid,
        values,
    })
}

fn velocity_weights(grid: &PhaseGrid, profile: VelocityProfile) -> Result<Vec<f64>> {
    let mut w = vec![0.0; grid.velocity_cells()];
    match profile {
        VelocityProfile::Gaussian { width } => {
            if !(width > 0.0) {
                return Err(Error::invalid("velocity profile width must be positive"));
            }
            for (q, o) in w.iter_mut().enumerate() {
                let v = grid.velocity_center(q);
                *o = (-(v[0] * v[0] + v[1] * v[1]) / (2.0 * width * width)).exp();
            }
        }
        VelocityProfile::AtRest => {
            // the cells whose closure contains v = 0 on each axis
            let near = |axis: usize| -> Vec<usize> {
                let n = grid.n_v[axis];
                if n % 2 == 1 {
                    vec![n / 2]
                } else {
                    vec![n / 2 - 1, n / 2]
                }
            };
            for j1 in near(0) {
                for j2 in near(1) {
                    w[j1 * grid.n_v[1] + j2] = 1.0;
                }
            }
        }
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initial_density_has_unit_mass_and_flat_marginal() {
        let grid = PhaseGrid::paper(25, 10).unwrap();
        let f = sample_initial_density(&grid, [[-10.0, 55.0], [-20.0, 55.0]], VelocityProfile::default())
            .unwrap();
        assert!((f.mass() - 1.0).abs() < 1e-14);
        let rho = f.spatial_density();
        // cells fully inside the box: x-centres 4·k − 96 + … with Δx = 8
        let inside: Vec<f64> = (0..grid.spatial_cells())
            .filter(|&s| {
                let i1 = s / 25;
                let i2 = s % 25;
                let a1 = -100.0 + 8.0 * i1 as f64;
                let a2 = -100.0 + 8.0 * i2 as f64;
                a1 >= -10.0 && a1 + 8.0 <= 55.0 && a2 >= -20.0 && a2 + 8.0 <= 55.0
            })
            .map(|s| rho[s])
            .collect();
        assert!(inside.len() > 10);
        for r in &inside {
            assert!((r - inside[0]).abs() <= 1e-12 * inside[0]);
        }
        let m = f.moments();
        assert!((m.mean[0] - 22.5).abs() <= grid.dx(0) / 2.0);
        assert!((m.mean[1] - 17.5).abs() <= grid.dx(1) / 2.0);
    }

    #[test]
    fn exact_overlap_gives_exact_box_moments() {
        let grid = PhaseGrid::paper(40, 8).unwrap();
        let f = sample_initial_density(&grid, [[-10.0, 55.0], [-20.0, 55.0]], VelocityProfile::AtRest).unwrap();
        let m = f.moments();
        // midpoint quadrature of a piecewise-constant density: centroid of the
        // overlap-weighted cells, computed independently
        let dx = 5.0;
        let (mut mass, mut sx) = (0.0, 0.0);
        for i in 0..40 {
            let a = -100.0 + dx * i as f64;
            let w = ((a + dx).min(55.0) - a.max(-10.0)).max(0.0) / dx;
            mass += w;
            sx += w * (a + dx / 2.0);
        }
        assert!((m.mean[0] - sx / mass).abs() < 1e-12);
    }

    #[test]
    fn cfl_guard() {
        let grid = PhaseGrid::paper(25, 10).unwrap();
        assert!(grid.check_cfl(0.8).is_ok());
        let err = grid.check_cfl(0.81).unwrap_err().to_string();
        assert!(err.contains("> 0.5"), "{err}");
    }

    #[test]
    fn support_outside_grid_is_rejected() {
        let grid = PhaseGrid::paper(25, 10).unwrap();
        assert!(sample_initial_density(&grid, [[-120.0, 0.0], [0.0, 1.0]], VelocityProfile::AtRest).is_err());
    }
}
