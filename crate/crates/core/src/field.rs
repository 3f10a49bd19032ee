//! The z-monotone SDF: a learnable G×G grid of height offsets defining a
//! scalar field `s(x, y, z)` that is nondecreasing in z, so its zero level
//! set is a single-valued 2.5D surface with vertical plateaus at building
//! edges.
//!
//! At a query `(x, y, z)` the field evaluates
//!
//! ```text
//! s = sum_j w_j * tanh(k * (z - h_j))
//! ```
//!
//! over the 3×3 grid window around `(x, y)`, with weights `w_j` a softmax
//! of inverse xy distance to the window's cell centers. Every term is
//! increasing in z and every weight is nonnegative, so monotonicity holds
//! structurally — no penalty or projection is needed.

use crate::heightmap::HeightMap;
use crate::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Window side length; the neighborhood is `WINDOW * WINDOW` cells.
pub const WINDOW: usize = 3;
/// Softmax score floor distance, avoids division by zero at cell centers.
pub const DIST_EPS: f64 = 1e-6;

/// Learnable z-monotone field over `[-1, 1]^2`.
#[derive(Debug, Clone)]
pub struct ZMonoField {
    /// Row-major G×G height offsets in normalized z units, index `gy * g + gx`.
    pub grid: Vec<f64>,
    g: usize,
    /// Curve sharpness `k` of the tanh basis.
    pub sharpness: f64,
}

/// The 3×3 window used for one query: cell indices plus softmax weights.
/// Weights are nonnegative and sum to 1.
#[derive(Debug, Clone)]
pub struct NeighborWeights {
    /// Bottom-left cell of the window, `(gx0, gy0)`.
    pub base: (usize, usize),
    /// Row-major over the window, index `wy * WINDOW + wx`.
    pub weights: [f64; WINDOW * WINDOW],
}

impl NeighborWeights {
    /// Grid cell of window slot `j`.
    pub fn cell(&self, j: usize) -> (usize, usize) {
        (self.base.0 + j % WINDOW, self.base.1 + j / WINDOW)
    }
}

/// Result of a height query: the root z* and whether it was clamped to a
/// domain boundary (field entirely above or below zero on the column).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeightSample {
    pub z: f64,
    pub clamped: bool,
}

impl ZMonoField {
    /// A constant field: every column's surface sits at height `h`.
    pub fn constant(g: usize, sharpness: f64, h: f64) -> Self {
        assert!(g >= WINDOW, "grid resolution must be at least {WINDOW}");
        assert!(sharpness > 0.0, "sharpness must be positive");
        ZMonoField {
            grid: vec![h; g * g],
            g,
            sharpness,
        }
    }

    pub fn from_grid(grid: Vec<f64>, g: usize, sharpness: f64) -> Self {
        assert_eq!(grid.len(), g * g);
        assert!(g >= WINDOW && sharpness > 0.0);
        ZMonoField { grid, g, sharpness }
    }

    /// Initializes each cell from a height map at the grid's own resolution:
    /// the cell's target height where valid, the ground level (minimum valid
    /// target height) elsewhere. Values are clamped to `[-1, 1]`.
    pub fn init_from_target(target: &HeightMap, sharpness: f64) -> Self {
        let g = target.res;
        let ground = target.min_valid_height().unwrap_or(0.0);
        let grid = (0..g * g)
            .map(|i| {
                let h = if target.valid[i] { target.heights[i] } else { ground };
                h.clamp(-1.0, 1.0)
            })
            .collect();
        ZMonoField::from_grid(grid, g, sharpness)
    }

    pub fn resolution(&self) -> usize {
        self.g
    }

    /// Normalized x (or y) coordinate of cell-center index `i`.
    #[inline]
    pub fn cell_center(&self, i: usize) -> f64 {
        -1.0 + (i as f64 + 0.5) * 2.0 / self.g as f64
    }

    #[inline]
    fn cell_of(&self, x: f64) -> usize {
        let i = ((x + 1.0) * 0.5 * self.g as f64).floor() as i64;
        i.clamp(0, self.g as i64 - 1) as usize
    }

    fn check_domain(&self, x: f64, y: f64) -> Result<()> {
        if !(x.is_finite() && y.is_finite()) || x.abs() > 1.0 || y.abs() > 1.0 {
            return Err(Error::OutOfDomain { x, y });
        }
        Ok(())
    }

    /// Window base so the 3×3 window always lies in bounds: centered on the
    /// containing cell, shifted inward at grid borders.
    #[inline]
    pub fn window_base(&self, x: f64, y: f64) -> (usize, usize) {
        let cx = self.cell_of(x) as i64;
        let cy = self.cell_of(y) as i64;
        let max = self.g as i64 - WINDOW as i64;
        (
            (cx - 1).clamp(0, max) as usize,
            (cy - 1).clamp(0, max) as usize,
        )
    }

    /// Softmax-of-inverse-distance weights over the 3×3 window at `(x, y)`.
    pub fn neighbor_weights(&self, x: f64, y: f64) -> Result<NeighborWeights> {
        self.check_domain(x, y)?;
        let base = self.window_base(x, y);
        let mut scores = [0.0f64; WINDOW * WINDOW];
        let mut max_score = f64::NEG_INFINITY;
        for wy in 0..WINDOW {
            let cy = self.cell_center(base.1 + wy);
            for wx in 0..WINDOW {
                let cx = self.cell_center(base.0 + wx);
                let d = ((x - cx) * (x - cx) + (y - cy) * (y - cy)).sqrt();
                let s = 1.0 / (d + DIST_EPS);
                scores[wy * WINDOW + wx] = s;
                if s > max_score {
                    max_score = s;
                }
            }
        }
        let mut weights = [0.0f64; WINDOW * WINDOW];
        let mut total = 0.0;
        for j in 0..WINDOW * WINDOW {
            let e = (scores[j] - max_score).exp();
            weights[j] = e;
            total += e;
        }
        for w in &mut weights {
            *w /= total;
        }
        Ok(NeighborWeights { base, weights })
    }

    /// Window heights `h_j` in window order for a precomputed base.
    #[inline]
    pub fn window_heights(&self, base: (usize, usize)) -> [f64; WINDOW * WINDOW] {
        let mut h = [0.0; WINDOW * WINDOW];
        for wy in 0..WINDOW {
            let row = (base.1 + wy) * self.g + base.0;
            for wx in 0..WINDOW {
                h[wy * WINDOW + wx] = self.grid[row + wx];
            }
        }
        h
    }

    /// Field value at a normalized point. Negative below the surface
    /// (inside), positive above; always in `(-1, 1)`.
    pub fn eval_sdf(&self, p: crate::Vec3) -> Result<f64> {
        if !p.z.is_finite() || p.z.abs() > 1.0 {
            return Err(Error::OutOfDomain { x: p.x, y: p.y });
        }
        let nw = self.neighbor_weights(p.x, p.y)?;
        let h = self.window_heights(nw.base);
        Ok(eval_curve(&nw.weights, &h, self.sharpness, p.z))
    }

    /// Surface height at `(x, y)`: the root of the monotone curve, found by
    /// a safeguarded Newton iteration inside a bisection bracket. Columns
    /// whose curve never crosses zero clamp to -1 or +1.
    pub fn height_of(&self, x: f64, y: f64) -> Result<HeightSample> {
        let nw = self.neighbor_weights(x, y)?;
        let h = self.window_heights(nw.base);
        Ok(solve_root(&nw.weights, &h, self.sharpness, None))
    }

    /// Gradient of the surface height with respect to each window cell's
    /// offset, `dz*/dh_j`, by implicit differentiation of the zero level
    /// set. Gradients are nonnegative and sum to 1 for interior roots;
    /// clamped columns report zeros alongside the flag.
    pub fn grad_height(&self, x: f64, y: f64) -> Result<(NeighborWeights, HeightSample, [f64; WINDOW * WINDOW])> {
        let nw = self.neighbor_weights(x, y)?;
        let h = self.window_heights(nw.base);
        let root = solve_root(&nw.weights, &h, self.sharpness, None);
        let grad = root_gradient(&nw.weights, &h, self.sharpness, root);
        Ok((nw, root, grad))
    }

    /// Samples the surface height at the cell centers of an R×R grid. All
    /// cells are valid: direct field evaluation needs no rasterization.
    pub fn height_grid(&self, r: usize) -> HeightMap {
        assert!(r >= 2);
        let mut map = HeightMap::new_filled(r, 0.0);
        for v in 0..r {
            let y = map.coord(v);
            for u in 0..r {
                let x = map.coord(u);
                map.heights[v * r + u] = self.height_of(x, y).expect("in-domain").z;
            }
        }
        map
    }

    /// Writes the versioned binary checkpoint: magic, G, window, k, then the
    /// row-major f64 grid.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io_err)?;
        w.write_all(&(self.g as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(&(WINDOW as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(&self.sharpness.to_le_bytes()).map_err(io_err)?;
        for &h in &self.grid {
            w.write_all(&h.to_le_bytes()).map_err(io_err)?;
        }
        w.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ZMonoField> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("file too short for magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {:?}, expected {:?}",
                &magic, MAGIC
            )));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)
            .map_err(|_| Error::Checkpoint("missing grid resolution".into()))?;
        let g = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf)
            .map_err(|_| Error::Checkpoint("missing window size".into()))?;
        let n = u32::from_le_bytes(u32buf) as usize;
        if n != WINDOW {
            return Err(Error::Checkpoint(format!(
                "window size {n} unsupported, expected {WINDOW}"
            )));
        }
        let mut f64buf = [0u8; 8];
        r.read_exact(&mut f64buf)
            .map_err(|_| Error::Checkpoint("missing sharpness".into()))?;
        let sharpness = f64::from_le_bytes(f64buf);
        if !(sharpness > 0.0) || g < WINDOW || g > 1 << 16 {
            return Err(Error::Checkpoint("invalid header values".into()));
        }
        let mut grid = vec![0.0f64; g * g];
        for h in grid.iter_mut() {
            r.read_exact(&mut f64buf)
                .map_err(|_| Error::Checkpoint("truncated grid payload".into()))?;
            *h = f64::from_le_bytes(f64buf);
        }
        Ok(ZMonoField::from_grid(grid, g, sharpness))
    }
}

const MAGIC: &[u8; 8] = b"ZMFLD001";

/// `sum_j w_j * tanh(k (z - h_j))`.
#[inline]
pub fn eval_curve(weights: &[f64], heights: &[f64], k: f64, z: f64) -> f64 {
    let mut s = 0.0;
    for (w, h) in weights.iter().zip(heights) {
        s += w * (k * (z - h)).tanh();
    }
    s
}

/// Curve value and derivative in z, sharing the tanh evaluations
/// (`sech^2 = 1 - tanh^2`).
#[inline]
pub fn eval_curve_with_deriv(weights: &[f64], heights: &[f64], k: f64, z: f64) -> (f64, f64) {
    let mut s = 0.0;
    let mut d = 0.0;
    for (w, h) in weights.iter().zip(heights) {
        let t = (k * (z - h)).tanh();
        s += w * t;
        d += w * (1.0 - t * t);
    }
    (s, d * k)
}

/// Root of the monotone curve on `[-1, 1]`. Monotonicity makes the bracket
/// valid whenever the endpoint signs differ; otherwise the column clamps.
/// `warm` seeds the iteration near last step's root during optimization.
pub fn solve_root(weights: &[f64], heights: &[f64], k: f64, warm: Option<f64>) -> HeightSample {
    let f_lo = eval_curve(weights, heights, k, -1.0);
    if f_lo >= 0.0 {
        return HeightSample { z: -1.0, clamped: true };
    }
    let f_hi = eval_curve(weights, heights, k, 1.0);
    if f_hi <= 0.0 {
        return HeightSample { z: 1.0, clamped: true };
    }

    let mut lo = -1.0;
    let mut hi = 1.0;
    let mut z = match warm {
        Some(w) if w > -1.0 && w < 1.0 => w,
        _ => 0.0,
    };
    // Safeguarded Newton: fall back to bisection whenever the Newton step
    // leaves the current bracket or the derivative vanishes (plateaus).
    for _ in 0..80 {
        let (f, df) = eval_curve_with_deriv(weights, heights, k, z);
        if f.abs() < 1e-13 {
            return HeightSample { z, clamped: false };
        }
        if f > 0.0 {
            hi = z;
        } else {
            lo = z;
        }
        let newton = if df > 0.0 { z - f / df } else { f64::NAN };
        z = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo < 1e-13 {
            break;
        }
    }
    HeightSample { z, clamped: false }
}

/// `dz*/dh_j = w_j sech^2(k (z*-h_j)) / sum_m w_m sech^2(k (z*-h_m))`.
pub fn root_gradient(
    weights: &[f64],
    heights: &[f64],
    k: f64,
    root: HeightSample,
) -> [f64; WINDOW * WINDOW] {
    let mut grad = [0.0f64; WINDOW * WINDOW];
    if root.clamped {
        return grad;
    }
    let mut denom = 0.0;
    for j in 0..weights.len() {
        let t = (k * (root.z - heights[j])).tanh();
        let g = weights[j] * (1.0 - t * t);
        grad[j] = g;
        denom += g;
    }
    if denom > 0.0 {
        for g in &mut grad {
            *g /= denom;
        }
    }
    grad
}
