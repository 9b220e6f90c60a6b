//! Interpolation baseline for filling a cube.
//!
//! A missing point is estimated from the lines through it along the
//! maturity, tenor and strike axes: on each line whose nearest known points
//! bracket it, a linear interpolation in the axis coordinate; the point gets
//! the average of those. Passes repeat, treating filled points as known,
//! until nothing more can be bracketed. Points still missing then take the
//! nearest known value along any axis line (ties averaged), and the whole
//! procedure repeats until the cube is full.

use crate::error::{Error, Result};
use crate::volcube::{CubeGrid, VolCube};

struct Lines<'a> {
    grid: &'a CubeGrid,
    dims: (usize, usize, usize),
}

impl<'a> Lines<'a> {
    fn axis(&self, a: usize) -> &[f64] {
        match a {
            0 => self.grid.maturities(),
            1 => self.grid.tenors(),
            _ => self.grid.strike_offsets(),
        }
    }

    /// Flat indices along axis `a` through the point `(i, j, k)`, with the
    /// point's position on that line.
    fn line(&self, a: usize, (i, j, k): (usize, usize, usize)) -> (Vec<usize>, usize) {
        let (nm, nt, ns) = self.dims;
        let flat = |i: usize, j: usize, k: usize| (i * nt + j) * ns + k;
        match a {
            0 => ((0..nm).map(|x| flat(x, j, k)).collect(), i),
            1 => ((0..nt).map(|x| flat(i, x, k)).collect(), j),
            _ => ((0..ns).map(|x| flat(i, j, x)).collect(), k),
        }
    }
}

fn bracket_estimate(lines: &Lines, known: &[Option<f64>], p: (usize, usize, usize)) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0;
    for a in 0..3 {
        let (line, pos) = lines.line(a, p);
        let coords = lines.axis(a);
        let below = (0..pos).rev().find(|&q| known[line[q]].is_some());
        let above = (pos + 1..line.len()).find(|&q| known[line[q]].is_some());
        if let (Some(lo), Some(hi)) = (below, above) {
            let (vl, vh) = (known[line[lo]].unwrap(), known[line[hi]].unwrap());
            let w = (coords[pos] - coords[lo]) / (coords[hi] - coords[lo]);
            sum += vl + w * (vh - vl);
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

fn nearest_estimate(lines: &Lines, known: &[Option<f64>], p: (usize, usize, usize)) -> Option<f64> {
    let mut best = usize::MAX;
    let mut sum = 0.0;
    let mut n = 0;
    for a in 0..3 {
        let (line, pos) = lines.line(a, p);
        for (q, &idx) in line.iter().enumerate() {
            if let Some(v) = known[idx] {
                let dist = q.abs_diff(pos);
                if dist < best {
                    best = dist;
                    sum = 0.0;
                    n = 0;
                }
                if dist == best {
                    sum += v;
                    n += 1;
                }
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Fills every missing point of `cube`; observed points are unchanged.
pub fn interpolate_cube(cube: &VolCube) -> Result<VolCube> {
    if cube.n_observed() == 0 {
        return Err(Error::InsufficientData("cannot interpolate a cube with no observed values".into()));
    }
    let grid = cube.grid();
    let lines = Lines {
        grid,
        dims: grid.dims(),
    };
    let mut known: Vec<Option<f64>> = (0..grid.len()).map(|i| cube.get(i)).collect();
    let points: Vec<(usize, usize, usize)> = (0..grid.len()).map(|i| grid.unflatten_index(i).unwrap()).collect();

    while known.iter().any(Option::is_none) {
        let mut progress = false;
        loop {
            let next: Vec<Option<f64>> = (0..known.len())
                .map(|i| known[i].or_else(|| bracket_estimate(&lines, &known, points[i])))
                .collect();
            let changed = next.iter().zip(&known).any(|(a, b)| a.is_some() && b.is_none());
            known = next;
            if !changed {
                break;
            }
            progress = true;
        }
        if known.iter().all(Option::is_some) {
            break;
        }
        let next: Vec<Option<f64>> = (0..known.len())
            .map(|i| known[i].or_else(|| nearest_estimate(&lines, &known, points[i])))
            .collect();
        let changed = next.iter().zip(&known).any(|(a, b)| a.is_some() && b.is_none());
        known = next;
        if !(changed || progress) {
            // unreachable for a non-empty cube: every point shares a line
            // chain with an observed one
            return Err(Error::InsufficientData("interpolation made no progress".into()));
        }
    }
    VolCube::full(grid.clone(), known.into_iter().map(Option::unwrap).collect())
}
