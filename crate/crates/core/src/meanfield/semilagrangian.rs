//! Free transport by semi-Lagrangian backtracking. Each velocity cell shifts
//! its spatial plane by `v·dt`; the foot of the characteristic is read with
//! tensor-product Catmull–Rom cubics, and characteristics leaving the domain
//! read zero. Cubic interpolation can undershoot; the caller clips.

use rayon::prelude::*;

use super::grid::PhaseGrid;

#[derive(Debug, Clone, Copy)]
struct Stencil {
    /// Source index of the first tap is `i − offset`.
    offset: [isize; 2],
    w: [[f64; 4]; 2],
}

fn catmull_rom(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

fn stencils(grid: &PhaseGrid, dt: f64) -> Vec<Stencil> {
    (0..grid.velocity_cells())
        .map(|q| {
            let v = grid.velocity_center(q);
            let mut offset = [0; 2];
            let mut w = [[0.0; 4]; 2];
            for axis in 0..2 {
                // the foot of the characteristic through cell i sits at i − s
                let s = v[axis] * dt / grid.dx(axis);
                let m = s.floor();
                let theta = s - m;
                offset[axis] = m as isize + 2;
                w[axis] = catmull_rom(1.0 - theta);
            }
            Stencil { offset, w }
        })
        .collect()
}

/// `output = S_dt input` before any clipping.
pub(crate) fn shift(grid: &PhaseGrid, dt: f64, input: &[f64], output: &mut [f64]) {
    let nv = grid.velocity_cells();
    let [n1, n2] = grid.n_x;
    let st = stencils(grid, dt);
    let mut live = vec![false; nv];
    for plane in input.chunks(nv) {
        for (l, v) in live.iter_mut().zip(plane) {
            *l |= *v != 0.0;
        }
    }
    output
        .par_chunks_mut(nv)
        .enumerate()
        .for_each(|(s, out)| {
            let i1 = (s / n2) as isize;
            let i2 = (s % n2) as isize;
            for (q, o) in out.iter_mut().enumerate() {
                *o = 0.0;
                if !live[q] {
                    continue;
                }
                let sq = &st[q];
                let mut acc = 0.0;
                for a in 0..4 {
                    let j1 = i1 - sq.offset[0] + a as isize;
                    if j1 < 0 || j1 >= n1 as isize {
                        continue;
                    }
                    let mut row = 0.0;
                    for b in 0..4 {
                        let j2 = i2 - sq.offset[1] + b as isize;
                        if j2 < 0 || j2 >= n2 as isize {
                            continue;
                        }
                        row += sq.w[1][b] * input[(j1 as usize * n2 + j2 as usize) * nv + q];
                    }
                    acc += sq.w[0][a] * row;
                }
                *o = acc;
            }
        });
}

/// Transpose of [`shift`]: `input_bar = S_dtᵀ output_bar`.
pub(crate) fn shift_transpose(grid: &PhaseGrid, dt: f64, output_bar: &[f64], input_bar: &mut [f64]) {
    let nv = grid.velocity_cells();
    let [n1, n2] = grid.n_x;
    let st = stencils(grid, dt);
    input_bar
        .par_chunks_mut(nv)
        .enumerate()
        .for_each(|(s, inb)| {
            let j1 = (s / n2) as isize;
            let j2 = (s % n2) as isize;
            for (q, o) in inb.iter_mut().enumerate() {
                let sq = &st[q];
                let mut acc = 0.0;
                for a in 0..4 {
                    let i1 = j1 + sq.offset[0] - a as isize;
                    if i1 < 0 || i1 >= n1 as isize {
                        continue;
                    }
                    let mut row = 0.0;
                    for b in 0..4 {
                        let i2 = j2 + sq.offset[1] - b as isize;
                        if i2 < 0 || i2 >= n2 as isize {
                            continue;
                        }
                        row += sq.w[1][b] * output_bar[(i1 as usize * n2 + i2 as usize) * nv + q];
                    }
                    acc += sq.w[0][a] * row;
                }
                *o = acc;
            }
        });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn catmull_rom_partition_of_unity_and_quadratic_exactness() {
        for k in 0..=10 {
            let t = k as f64 / 10.0;
            let w = catmull_rom(t);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            // nodes −1, 0, 1, 2
            let q = |x: f64| 0.3 * x * x - 2.0 * x + 1.0;
            let interp: f64 = w.iter().zip([-1.0, 0.0, 1.0, 2.0]).map(|(a, x)| a * q(x)).sum();
            assert!((interp - q(t)).abs() < 1e-13);
        }
    }

    #[test]
    fn integer_shift_is_exact() {
        let grid = PhaseGrid::new(10.0, 2.0, [10, 10], [4, 4]).unwrap();
        // Δx = 2, so dt = 4 moves the velocity cell v = (1.5, −0.5) by (3, −1) cells
        let dt = 4.0;
        let nv = grid.velocity_cells();
        let q = 3 * 4 + 1;
        let mut input = vec![0.0; grid.len()];
        input[(4 * 10 + 5) * nv + q] = 1.0;
        let mut out = vec![0.0; grid.len()];
        shift(&grid, dt, &input, &mut out);
        let moved = (4 + 3) * 10 + (5 - 1);
        assert!((out[moved * nv + q] - 1.0).abs() < 1e-15);
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn transpose_is_adjoint() {
        let grid = PhaseGrid::new(10.0, 2.0, [7, 6], [5, 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..grid.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut sx = vec![0.0; grid.len()];
        let mut sty = vec![0.0; grid.len()];
        shift(&grid, 0.7, &x, &mut sx);
        shift_transpose(&grid, 0.7, &y, &mut sty);
        let lhs: f64 = sx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&sty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }
}
