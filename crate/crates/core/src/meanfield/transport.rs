//! Flux-form free transport `∂_t f + v·∇_x f = 0`, one spatial axis after the other.
//! Every velocity cell carries its plane at the constant speed `v`, so each
//! sweep is a single flux-form Lax–Wendroff step limited by van Leer; with
//! `|v| dt/Δx ≤ 1/2` it is conservative and keeps the density nonnegative.
//! Nothing flows in through the boundary and outflow leaves the domain.

use rayon::prelude::*;

use serde::{Deserialize, Serialize};

use super::grid::PhaseGrid;
use super::velocity::van_leer;

/// How the spatial transport substep is discretised.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportScheme {
    /// Backtracking with Catmull–Rom cubics; undershoot is clipped to zero
    /// and the added mass reported.
    SemiLagrangian,
    /// Limited Lax–Wendroff fluxes; conservative and positive without
    /// clipping.
    #[default]
    FluxForm,
}

/// The density viewed as `[outer][n][inner]` along one spatial axis.
#[derive(Clone, Copy)]
struct AxisView {
    n: usize,
    inner: usize,
    lambda: f64,
}

fn view(grid: &PhaseGrid, axis: usize, dt: f64) -> AxisView {
    let nv = grid.velocity_cells();
    let (n, inner) = if axis == 0 {
        (grid.n_x[0], grid.n_x[1] * nv)
    } else {
        (grid.n_x[1], nv)
    };
    AxisView {
        n,
        inner,
        lambda: dt / grid.dx(axis),
    }
}

fn speeds(grid: &PhaseGrid, axis: usize) -> Vec<f64> {
    (0..grid.velocity_cells())
        .map(|q| grid.velocity_center(q)[axis])
        .collect()
}

/// Cells `j − 2 .. j + 1` around face `j`; zero outside the line.
#[inline]
fn taps(line: impl Fn(isize) -> f64, j: isize) -> [f64; 4] {
    [line(j - 2), line(j - 1), line(j), line(j + 1)]
}

#[inline]
fn face_flux(c: [f64; 4], a: f64, lambda: f64) -> f64 {
    if a >= 0.0 {
        let (psi, _, _) = van_leer(c[1] - c[0], c[2] - c[1]);
        a * c[1] + 0.5 * a * (1.0 - a * lambda) * psi
    } else {
        let (psi, _, _) = van_leer(c[3] - c[2], c[2] - c[1]);
        a * c[2] + 0.5 * (-a) * (1.0 + a * lambda) * psi
    }
}

/// `∂F_j / ∂(c_{j−2}, c_{j−1}, c_j, c_{j+1})`.
#[inline]
fn face_flux_partials(c: [f64; 4], a: f64, lambda: f64) -> [f64; 4] {
    if a >= 0.0 {
        let (_, pu, pd) = van_leer(c[1] - c[0], c[2] - c[1]);
        let cc = 0.5 * a * (1.0 - a * lambda);
        [-cc * pu, a + cc * (pu - pd), cc * pd, 0.0]
    } else {
        let (_, pu, pd) = van_leer(c[3] - c[2], c[2] - c[1]);
        let cc = 0.5 * (-a) * (1.0 + a * lambda);
        [0.0, -cc * pd, a + cc * (pd - pu), cc * pu]
    }
}

fn sweep(grid: &PhaseGrid, axis: usize, dt: f64, input: &[f64], output: &mut [f64]) {
    let AxisView { n, inner, lambda } = view(grid, axis, dt);
    let nv = grid.velocity_cells();
    let a = speeds(grid, axis);
    output.par_chunks_mut(inner).enumerate().for_each(|(row, out)| {
        let (o, i) = (row / n, (row % n) as isize);
        let base = o * n * inner;
        for (r, y) in out.iter_mut().enumerate() {
            let line = |k: isize| {
                if k < 0 || k >= n as isize {
                    0.0
                } else {
                    input[base + k as usize * inner + r]
                }
            };
            let c = taps(line, i);
            let mid = c[2];
            if mid == 0.0 && c[1] == 0.0 && line(i + 1) == 0.0 && c[0] == 0.0 && line(i + 2) == 0.0 {
                *y = 0.0;
                continue;
            }
            let aq = a[r % nv];
            let left = face_flux(c, aq, lambda);
            let right = face_flux(taps(line, i + 1), aq, lambda);
            *y = mid - lambda * (right - left);
        }
    });
}

/// Reverse of [`sweep`] at `input`: `input_bar = (∂ sweep)ᵀ output_bar`.
fn sweep_vjp(grid: &PhaseGrid, axis: usize, dt: f64, input: &[f64], output_bar: &[f64], input_bar: &mut [f64]) {
    let AxisView { n, inner, lambda } = view(grid, axis, dt);
    let nv = grid.velocity_cells();
    let a = speeds(grid, axis);
    input_bar.par_chunks_mut(inner).enumerate().for_each(|(row, ib)| {
        let (o, k) = (row / n, (row % n) as isize);
        let base = o * n * inner;
        for (r, y) in ib.iter_mut().enumerate() {
            let at = |src: &[f64], j: isize| {
                if j < 0 || j >= n as isize {
                    0.0
                } else {
                    src[base + j as usize * inner + r]
                }
            };
            let aq = a[r % nv];
            let mut acc = at(output_bar, k);
            // faces j whose stencil j − 2 ..= j + 1 contains cell k
            for j in (k - 1).max(0)..=(k + 2).min(n as isize) {
                // F_j leaves cell j − 1 and enters cell j
                let fbar = lambda * (at(output_bar, j) - at(output_bar, j - 1));
                if fbar == 0.0 {
                    continue;
                }
                let p = face_flux_partials(taps(|m| at(input, m), j), aq, lambda);
                acc += fbar * p[(k - j + 2) as usize];
            }
            *y = acc;
        }
    });
}

/// Full transport step: `output = T₂ T₁ input`, with `mid = T₁ input`.
pub(crate) fn transport(grid: &PhaseGrid, dt: f64, input: &[f64], mid: &mut [f64], output: &mut [f64]) {
    sweep(grid, 0, dt, input, mid);
    sweep(grid, 1, dt, mid, output);
}

/// Reverse of [`transport`] given its input and intermediate; `scratch` is
/// overwritten.
pub(crate) fn transport_vjp(
    grid: &PhaseGrid,
    dt: f64,
    input: &[f64],
    mid: &[f64],
    output_bar: &[f64],
    scratch: &mut [f64],
    input_bar: &mut [f64],
) {
    sweep_vjp(grid, 1, dt, mid, output_bar, scratch);
    sweep_vjp(grid, 0, dt, input, scratch, input_bar);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> PhaseGrid {
        PhaseGrid::new(10.0, 2.0, [9, 8], [5, 4]).unwrap()
    }

    fn interior_field(grid: &PhaseGrid, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nv = grid.velocity_cells();
        let mut f = vec![0.0; grid.len()];
        for i1 in 2..grid.n_x[0] - 2 {
            for i2 in 2..grid.n_x[1] - 2 {
                let s = i1 * grid.n_x[1] + i2;
                for v in &mut f[s * nv..(s + 1) * nv] {
                    *v = rng.gen_range(0.1..1.0);
                }
            }
        }
        f
    }

    #[test]
    fn conserves_mass_and_positivity_away_from_the_boundary() {
        let g = grid();
        let f = interior_field(&g, 1);
        let dt = g.max_time_step();
        let mut mid = vec![0.0; g.len()];
        let mut out = vec![0.0; g.len()];
        transport(&g, dt, &f, &mut mid, &mut out);
        let before: f64 = f.iter().sum();
        let after: f64 = out.iter().sum();
        assert!((after - before).abs() < 1e-12 * before);
        assert!(out.iter().all(|v| *v >= 0.0));
    }

    /// (max, L1) errors after carrying a Gaussian along x1 up to `t = 4`
    /// with `n` cells across the domain.
    fn translation_error(n: usize) -> (f64, f64) {
        // a velocity cell with v2 = 0 moves along x1 only
        let g = PhaseGrid::new(50.0, 1.0, [n, 4], [4, 5]).unwrap();
        let nv = g.velocity_cells();
        let q = 3 * 5 + 2;
        let v = g.velocity_center(q);
        assert_eq!(v[1], 0.0);
        let bump = |x: f64| (-(x * x) / 50.0).exp();
        let mut f = vec![0.0; g.len()];
        for s in 0..g.spatial_cells() {
            f[s * nv + q] = bump(g.spatial_center(s)[0]);
        }
        let t = 4.0;
        let steps = (t / (0.5 * g.max_time_step())).round() as usize;
        let dt = t / steps as f64;
        let mut mid = vec![0.0; g.len()];
        let mut out = vec![0.0; g.len()];
        for _ in 0..steps {
            transport(&g, dt, &f, &mut mid, &mut out);
            std::mem::swap(&mut f, &mut out);
        }
        let err: Vec<f64> = (0..g.spatial_cells())
            .map(|s| (f[s * nv + q] - bump(g.spatial_center(s)[0] - v[0] * t)).abs())
            .collect();
        let max = err.iter().copied().fold(0.0, f64::max);
        (max, err.iter().sum::<f64>() * g.dx(0) / 4.0)
    }

    #[test]
    fn smooth_profile_moves_with_its_velocity() {
        let (max_c, l1_c) = translation_error(100);
        let (max_f, l1_f) = translation_error(200);
        assert!(max_f < 1e-2, "error {max_f}");
        // limiter clipping at the peak costs some rate in the max norm only
        assert!(max_c / max_f > 2.3, "max errors {max_c} -> {max_f}");
        assert!(l1_c / l1_f > 3.4, "L1 errors {l1_c} -> {l1_f}");
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // generic values everywhere, so no difference sits on a limiter kink
        let f: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(0.1..1.0)).collect();
        let w: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dt = 0.8 * g.max_time_step();
        let objective = |x: &[f64]| -> f64 {
            let mut mid = vec![0.0; g.len()];
            let mut out = vec![0.0; g.len()];
            transport(&g, dt, x, &mut mid, &mut out);
            out.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let mut mid = vec![0.0; g.len()];
        let mut out = vec![0.0; g.len()];
        transport(&g, dt, &f, &mut mid, &mut out);
        let mut scratch = vec![0.0; g.len()];
        let mut bar = vec![0.0; g.len()];
        transport_vjp(&g, dt, &f, &mid, &w, &mut scratch, &mut bar);
        let h = 1e-7;
        for k in (0..g.len()).step_by(7) {
            let mut p = f.clone();
            let mut m = f.clone();
            p[k] += h;
            m[k] -= h;
            let fd = (objective(&p) - objective(&m)) / (2.0 * h);
            assert!((fd - bar[k]).abs() < 1e-6 * (1.0 + fd.abs()), "cell {k}: {fd} vs {}", bar[k]);
        }
    }
}
