//! Velocity-space advection `∂_t f + ∇_v·((F(x) − αv) f) = 0` on one spatial
//! cell's velocity plane: dimension-by-dimension flux-form finite volumes with
//! a Lax–Wendroff flux limited by van Leer, zero flux through the velocity
//! box, explicit substeps sized by the local Courant number.

use super::grid::PhaseGrid;

const COURANT: f64 = 0.9;
const GHOST: usize = 2;

#[inline]
pub(crate) fn van_leer(du: f64, d: f64) -> (f64, f64, f64) {
    if du * d > 0.0 {
        let s = du + d;
        let s2 = s * s;
        (2.0 * du * d / s, 2.0 * d * d / s2, 2.0 * du * du / s2)
    } else {
        (0.0, 0.0, 0.0)
    }
}

/// Face speeds `a_j = F − α v_{j−1/2}` for the interior faces `j = 1..n−1`
/// (index 0 and n are unused) and the number of substeps for a step `dt`.
fn face_speeds(grid: &PhaseGrid, axis: usize, force: f64, alpha: f64, dt: f64, a: &mut Vec<f64>) -> usize {
    let n = grid.n_v[axis];
    a.clear();
    a.resize(n + 1, 0.0);
    let mut amax: f64 = 0.0;
    for (j, aj) in a.iter_mut().enumerate().take(n).skip(1) {
        *aj = force - alpha * grid.v_face(axis, j);
        amax = amax.max(aj.abs());
    }
    let steps = (dt * amax / (COURANT * grid.dv(axis))).ceil();
    (steps as usize).max(1)
}

#[inline]
fn flux(g: &[f64], j: usize, a: f64, lambda: f64) -> f64 {
    // g is ghost-padded: cell k lives at g[k + GHOST]; face j sits between
    // cells j − 1 and j
    let c = |k: isize| g[(k + GHOST as isize) as usize];
    let j = j as isize;
    if a >= 0.0 {
        let (psi, _, _) = van_leer(c(j - 1) - c(j - 2), c(j) - c(j - 1));
        a * c(j - 1) + 0.5 * a * (1.0 - a * lambda) * psi
    } else {
        let (psi, _, _) = van_leer(c(j + 1) - c(j), c(j) - c(j - 1));
        a * c(j) + 0.5 * (-a) * (1.0 + a * lambda) * psi
    }
}

/// Scratch space reused across planes.
#[derive(Default)]
pub(crate) struct LineWork {
    line: Vec<f64>,
    fluxes: Vec<f64>,
    speeds: Vec<f64>,
    history: Vec<f64>,
    bar: Vec<f64>,
    plane: Vec<f64>,
}

fn substep(g: &mut [f64], n: usize, a: &[f64], lambda: f64, fl: &mut Vec<f64>) {
    fl.clear();
    fl.resize(n + 1, 0.0);
    for j in 1..n {
        fl[j] = flux(g, j, a[j], lambda);
    }
    for k in 0..n {
        g[k + GHOST] -= lambda * (fl[k + 1] - fl[k]);
    }
}

/// Reverse of [`substep`] at input line `g`: maps the output cotangent `gb`
/// (ghost-padded, modified in place) to the input cotangent and returns
/// `Σ_j F̄l_j ∂Fl_j/∂a_j`.
fn substep_vjp(g: &[f64], n: usize, a: &[f64], lambda: f64, gb: &mut [f64], fl_bar: &mut Vec<f64>) -> f64 {
    fl_bar.clear();
    fl_bar.resize(n + 1, 0.0);
    for j in 1..n {
        fl_bar[j] = lambda * (gb[j + GHOST] - gb[j - 1 + GHOST]);
    }
    let c = |k: isize| g[(k + GHOST as isize) as usize];
    let mut abar = 0.0;
    for j in 1..n {
        let fb = fl_bar[j];
        if fb == 0.0 {
            continue;
        }
        let aj = a[j];
        let ji = j as isize;
        let idx = |k: isize| (k + GHOST as isize) as usize;
        if aj >= 0.0 {
            let (psi, pu, pd) = van_leer(c(ji - 1) - c(ji - 2), c(ji) - c(ji - 1));
            let cc = 0.5 * aj * (1.0 - aj * lambda);
            gb[idx(ji - 1)] += fb * (aj + cc * (pu - pd));
            gb[idx(ji - 2)] -= fb * cc * pu;
            gb[idx(ji)] += fb * cc * pd;
            abar += fb * (c(ji - 1) + 0.5 * (1.0 - 2.0 * aj * lambda) * psi);
        } else {
            let (psi, pu, pd) = van_leer(c(ji + 1) - c(ji), c(ji) - c(ji - 1));
            let cc = 0.5 * (-aj) * (1.0 + aj * lambda);
            gb[idx(ji)] += fb * (aj + cc * (pd - pu));
            gb[idx(ji + 1)] += fb * cc * pu;
            gb[idx(ji - 1)] -= fb * cc * pd;
            abar += fb * (c(ji) - 0.5 * (1.0 + 2.0 * aj * lambda) * psi);
        }
    }
    abar
}

/// Offsets and stride of the lines of one sweep inside a velocity plane.
fn lines(grid: &PhaseGrid, axis: usize) -> (usize, usize, usize) {
    // (count, start step, element stride)
    let [n1, n2] = grid.n_v;
    if axis == 0 {
        (n2, 1, n2)
    } else {
        (n1, n2, 1)
    }
}

fn sweep(grid: &PhaseGrid, axis: usize, force: f64, alpha: f64, dt: f64, plane: &mut [f64], w: &mut LineWork) {
    let n = grid.n_v[axis];
    let nsub = face_speeds(grid, axis, force, alpha, dt, &mut w.speeds);
    let lambda = dt / nsub as f64 / grid.dv(axis);
    let (count, start, stride) = lines(grid, axis);
    for l in 0..count {
        let base = l * start;
        if (0..n).all(|k| plane[base + k * stride] == 0.0) {
            continue;
        }
        w.line.clear();
        w.line.resize(n + 2 * GHOST, 0.0);
        for k in 0..n {
            w.line[k + GHOST] = plane[base + k * stride];
        }
        for _ in 0..nsub {
            substep(&mut w.line, n, &w.speeds, lambda, &mut w.fluxes);
        }
        for k in 0..n {
            plane[base + k * stride] = w.line[k + GHOST];
        }
    }
}

/// Reverse of [`sweep`] given its input plane; `bar` holds the output
/// cotangent and is overwritten with the input cotangent. Returns `F̄_axis`.
fn sweep_vjp(
    grid: &PhaseGrid,
    axis: usize,
    force: f64,
    alpha: f64,
    dt: f64,
    plane: &[f64],
    bar: &mut [f64],
    w: &mut LineWork,
) -> f64 {
    let n = grid.n_v[axis];
    let padded = n + 2 * GHOST;
    let nsub = face_speeds(grid, axis, force, alpha, dt, &mut w.speeds);
    let lambda = dt / nsub as f64 / grid.dv(axis);
    let (count, start, stride) = lines(grid, axis);
    let mut force_bar = 0.0;
    for l in 0..count {
        let base = l * start;
        if (0..n).all(|k| bar[base + k * stride] == 0.0) {
            continue;
        }
        w.history.clear();
        w.history.resize(padded * nsub, 0.0);
        for k in 0..n {
            w.history[k + GHOST] = plane[base + k * stride];
        }
        for s in 1..nsub {
            let (done, next) = w.history.split_at_mut(s * padded);
            next[..padded].copy_from_slice(&done[(s - 1) * padded..]);
            substep(&mut next[..padded], n, &w.speeds, lambda, &mut w.fluxes);
        }
        w.bar.clear();
        w.bar.resize(padded, 0.0);
        for k in 0..n {
            w.bar[k + GHOST] = bar[base + k * stride];
        }
        for s in (0..nsub).rev() {
            let g = &w.history[s * padded..(s + 1) * padded];
            force_bar += substep_vjp(g, n, &w.speeds, lambda, &mut w.bar, &mut w.fluxes);
            // cotangents that landed on ghost cells belong to constants
            for k in 0..GHOST {
                w.bar[k] = 0.0;
                w.bar[n + GHOST + k] = 0.0;
            }
        }
        for k in 0..n {
            bar[base + k * stride] = w.bar[k + GHOST];
        }
    }
    force_bar
}

/// Advances one velocity plane over `dt` under the frozen interaction
/// acceleration `force` and linear friction.
pub(crate) fn advance_plane(
    grid: &PhaseGrid,
    alpha: f64,
    force: [f64; 2],
    dt: f64,
    plane: &mut [f64],
    w: &mut LineWork,
) {
    sweep(grid, 0, force[0], alpha, dt, plane, w);
    sweep(grid, 1, force[1], alpha, dt, plane, w);
}

/// Reverse of [`advance_plane`] given its input plane. `bar` enters as the
/// output cotangent and leaves as the input cotangent; the returned pair is
/// the cotangent of `force`.
pub(crate) fn advance_plane_vjp(
    grid: &PhaseGrid,
    alpha: f64,
    force: [f64; 2],
    dt: f64,
    plane: &[f64],
    bar: &mut [f64],
    w: &mut LineWork,
) -> [f64; 2] {
    let mut mid = std::mem::take(&mut w.plane);
    mid.clear();
    mid.extend_from_slice(plane);
    sweep(grid, 0, force[0], alpha, dt, &mut mid, w);
    let f2 = sweep_vjp(grid, 1, force[1], alpha, dt, &mid, bar, w);
    let f1 = sweep_vjp(grid, 0, force[0], alpha, dt, plane, bar, w);
    w.plane = mid;
    [f1, f2]
}
