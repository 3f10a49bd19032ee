//! Builds supervision targets from point clouds and fits the z-monotone
//! field with Adam on a three-term objective: height L1 against the target
//! map, a discrete Laplacian smoothness term, and total variation of the
//! height-grid normals.
//!
//! The whole chain is analytic: the predicted height map comes from direct
//! field evaluation, and loss gradients reach the parameter grid through
//! implicit differentiation of each column root (no differentiable mesh
//! extraction in the loop).

use crate::field::{solve_root, root_gradient, ZMonoField, WINDOW};
use crate::geom::{Frame, PointCloud};
use crate::heightmap::HeightMap;
use crate::{Error, Result, Vec3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Fixed number of row bands used for parallel gradient accumulation.
/// Results are reduced in band order, so they do not depend on the thread
/// count.
const BANDS: usize = 32;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub lr: f64,
    pub steps: usize,
    pub lambda_lap: f64,
    pub lambda_nrm: f64,
    /// Parameter grid resolution G.
    pub grid_res: usize,
    /// Supervision height-map resolution R.
    pub height_res: usize,
    /// Curve sharpness k.
    pub sharpness: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Normalization padding applied to tile/scene bounding boxes.
    pub padding: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            lr: 0.01,
            steps: 2000,
            lambda_lap: 0.5,
            lambda_nrm: 0.01,
            grid_res: 256,
            height_res: 1024,
            sharpness: 80.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            padding: 0.02,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.steps >= 1
            && self.lambda_lap >= 0.0
            && self.lambda_nrm >= 0.0
            && self.grid_res >= WINDOW
            && self.height_res >= 4
            && self.sharpness > 0.0
            && (0.0..0.5).contains(&self.padding);
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid fit configuration".into()))
        }
    }
}

/// Per-step loss traces plus summary stats.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub height_loss: Vec<f64>,
    pub laplacian_loss: Vec<f64>,
    pub normal_loss: Vec<f64>,
    pub total_loss: Vec<f64>,
    pub wall_time_s: f64,
    /// RMSE between the final predicted and target heights on valid cells,
    /// in normalized z units.
    pub final_height_rmse: f64,
}

/// Projects a normalized cloud onto an R×R grid keeping the maximum height
/// per cell. Cells that receive no point are invalid and excluded from the
/// loss.
pub fn build_target_heightmap(cloud: &PointCloud, res: usize) -> Result<HeightMap> {
    cloud.expect_frame(Frame::Normalized)?;
    let mut map = HeightMap::new_invalid(res);
    for p in &cloud.points {
        let u = map.cell_of(p.x);
        let v = map.cell_of(p.y);
        let i = map.idx(u, v);
        if !map.valid[i] || p.z > map.heights[i] {
            map.heights[i] = p.z;
            map.valid[i] = true;
        }
    }
    Ok(map)
}

/// Mean L1 difference over cells valid in both maps. Returns the loss and
/// its gradient with respect to `pred` heights (sign / |Ω| on valid cells,
/// subgradient 0 at exact ties).
pub fn loss_height(pred: &HeightMap, target: &HeightMap) -> Result<(f64, Vec<f64>)> {
    if pred.res != target.res {
        return Err(Error::Config(format!(
            "height map resolutions differ: {} vs {}",
            pred.res, target.res
        )));
    }
    let n = pred.res * pred.res;
    let mut grad = vec![0.0; n];
    let mut count = 0usize;
    let mut sum = 0.0;
    for i in 0..n {
        if pred.valid[i] && target.valid[i] {
            count += 1;
            let d = pred.heights[i] - target.heights[i];
            sum += d.abs();
            grad[i] = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
        }
    }
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    for g in &mut grad {
        *g *= inv;
    }
    Ok((sum * inv, grad))
}

/// Mean squared 4-neighbor Laplacian residual over interior cells of the
/// dense height grid, with its analytic gradient.
pub fn loss_laplacian(pred: &HeightMap) -> (f64, Vec<f64>) {
    let res = pred.res;
    assert!(res >= 3);
    let m = ((res - 2) * (res - 2)) as f64;
    let h = &pred.heights;
    let mut grad = vec![0.0; res * res];
    let mut sum = 0.0;
    for v in 1..res - 1 {
        for u in 1..res - 1 {
            let i = v * res + u;
            let mean = 0.25 * (h[i - 1] + h[i + 1] + h[i - res] + h[i + res]);
            let r = h[i] - mean;
            sum += r * r;
            let c = 2.0 * r / m;
            grad[i] += c;
            grad[i - 1] -= 0.25 * c;
            grad[i + 1] -= 0.25 * c;
            grad[i - res] -= 0.25 * c;
            grad[i + res] -= 0.25 * c;
        }
    }
    (sum / m, grad)
}

/// Unit surface normal of the height grid at an interior cell, from central
/// differences: `normalize(-dh/dx, -dh/dy, 1)`.
fn grid_normal(h: &[f64], res: usize, u: usize, v: usize, inv2d: f64) -> [f64; 3] {
    let i = v * res + u;
    let gx = -(h[i + 1] - h[i - 1]) * inv2d;
    let gy = -(h[i + res] - h[i - res]) * inv2d;
    let norm = (gx * gx + gy * gy + 1.0).sqrt();
    [gx / norm, gy / norm, 1.0 / norm]
}

/// Total variation of the height-grid normals: mean L2 difference between
/// horizontally adjacent unit normals plus the same for vertically adjacent
/// ones. Returns the loss and its gradient with respect to the heights.
pub fn loss_normal_tv(pred: &HeightMap) -> (f64, Vec<f64>) {
    let res = pred.res;
    assert!(res >= 4);
    let h = &pred.heights;
    let delta = 2.0 / res as f64;
    let inv2d = 1.0 / (2.0 * delta);

    // Normals exist on interior cells [1, res-2]^2.
    let side = res - 2;
    let mut normals = vec![[0.0f64; 3]; side * side];
    for v in 1..res - 1 {
        for u in 1..res - 1 {
            normals[(v - 1) * side + (u - 1)] = grid_normal(h, res, u, v, inv2d);
        }
    }

    let nx_pairs = ((side - 1) * side) as f64;
    let ny_pairs = (side * (side - 1)) as f64;
    let mut dl_dn = vec![[0.0f64; 3]; side * side];
    let mut sum_x = 0.0;
    let mut sum_y = 0.0;
    for vv in 0..side {
        for uu in 0..side {
            let a = vv * side + uu;
            if uu + 1 < side {
                let b = a + 1;
                let d = [
                    normals[a][0] - normals[b][0],
                    normals[a][1] - normals[b][1],
                    normals[a][2] - normals[b][2],
                ];
                let e = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                sum_x += e;
                if e > 1e-30 {
                    for c in 0..3 {
                        let g = d[c] / e / nx_pairs;
                        dl_dn[a][c] += g;
                        dl_dn[b][c] -= g;
                    }
                }
            }
            if vv + 1 < side {
                let b = a + side;
                let d = [
                    normals[a][0] - normals[b][0],
                    normals[a][1] - normals[b][1],
                    normals[a][2] - normals[b][2],
                ];
                let e = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                sum_y += e;
                if e > 1e-30 {
                    for c in 0..3 {
                        let g = d[c] / e / ny_pairs;
                        dl_dn[a][c] += g;
                        dl_dn[b][c] -= g;
                    }
                }
            }
        }
    }

    // Chain through the normalization and the central differences.
    let mut grad = vec![0.0; res * res];
    for vv in 0..side {
        for uu in 0..side {
            let (u, v) = (uu + 1, vv + 1);
            let i = v * res + u;
            let gx = -(h[i + 1] - h[i - 1]) * inv2d;
            let gy = -(h[i + res] - h[i - res]) * inv2d;
            let norm = (gx * gx + gy * gy + 1.0).sqrt();
            let n = normals[vv * side + uu];
            let dn = dl_dn[vv * side + uu];
            // dL/dg = (dL/dn - (dL/dn . n) n) / |g|
            let dot = dn[0] * n[0] + dn[1] * n[1] + dn[2] * n[2];
            let dgx = (dn[0] - dot * n[0]) / norm;
            let dgy = (dn[1] - dot * n[1]) / norm;
            grad[i + 1] += -dgx * inv2d;
            grad[i - 1] += dgx * inv2d;
            grad[i + res] += -dgy * inv2d;
            grad[i - res] += dgy * inv2d;
        }
    }
    (sum_x / nx_pairs + sum_y / ny_pairs, grad)
}

/// Hand-rolled Adam with bias correction.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(n: usize, cfg: &FitConfig) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Precomputed per-cell query data for the supervision grid. The R×R query
/// points never move during optimization, so window bases and softmax
/// weights are computed once.
struct QueryCache {
    res: usize,
    bases: Vec<(u16, u16)>,
    weights: Vec<[f64; WINDOW * WINDOW]>,
}

impl QueryCache {
    fn build(field: &ZMonoField, res: usize) -> Self {
        let probe = HeightMap::new_invalid(res);
        let mut bases = Vec::with_capacity(res * res);
        let mut weights = Vec::with_capacity(res * res);
        for v in 0..res {
            let y = probe.coord(v);
            for u in 0..res {
                let x = probe.coord(u);
                let nw = field.neighbor_weights(x, y).expect("in-domain");
                bases.push((nw.base.0 as u16, nw.base.1 as u16));
                weights.push(nw.weights);
            }
        }
        QueryCache { res, bases, weights }
    }

    fn band_ranges(&self) -> Vec<(usize, usize)> {
        let rows = self.res;
        let bands = BANDS.min(rows);
        (0..bands)
            .map(|b| {
                let lo = b * rows / bands;
                let hi = (b + 1) * rows / bands;
                (lo, hi)
            })
            .collect()
    }
}

/// One forward evaluation of all column roots, warm-started from the
/// previous step. Parallel over fixed row bands.
fn forward_roots(field: &ZMonoField, cache: &QueryCache, roots: &mut [f64], clamped: &mut [bool]) {
    let res = cache.res;
    let bands = cache.band_ranges();
    let chunks: Vec<(usize, usize)> = bands.iter().map(|&(lo, hi)| (lo * res, hi * res)).collect();
    // Split the output slices at band boundaries so each band writes its own
    // region.
    let mut root_slices: Vec<&mut [f64]> = Vec::with_capacity(chunks.len());
    let mut clamp_slices: Vec<&mut [bool]> = Vec::with_capacity(chunks.len());
    {
        let mut rest_r = roots;
        let mut rest_c = clamped;
        let mut off = 0;
        for &(lo, hi) in &chunks {
            debug_assert_eq!(lo, off);
            let (a, b) = rest_r.split_at_mut(hi - lo);
            root_slices.push(a);
            rest_r = b;
            let (a, b) = rest_c.split_at_mut(hi - lo);
            clamp_slices.push(a);
            rest_c = b;
            off = hi;
        }
    }
    chunks
        .par_iter()
        .zip(root_slices.par_iter_mut().zip(clamp_slices.par_iter_mut()))
        .for_each(|(&(lo, _hi), (band_roots, band_clamped))| {
            for (local, cell) in (lo..lo + band_roots.len()).enumerate() {
                let base = (cache.bases[cell].0 as usize, cache.bases[cell].1 as usize);
                let heights = field.window_heights(base);
                let warm = band_roots[local];
                let warm = if warm.is_finite() { Some(warm) } else { None };
                let s = solve_root(&cache.weights[cell], &heights, field.sharpness, warm);
                band_roots[local] = s.z;
                band_clamped[local] = s.clamped;
            }
        });
}

/// Scatters dL/dH_pred into the parameter grid through the per-cell root
/// gradients. Accumulation is banded and reduced in fixed order.
fn backprop_to_grid(
    field: &ZMonoField,
    cache: &QueryCache,
    roots: &[f64],
    dl_dpred: &[f64],
    grid_grad: &mut [f64],
) {
    let g = field.resolution();
    let res = cache.res;
    let bands = cache.band_ranges();
    let partials: Vec<Vec<f64>> = bands
        .par_iter()
        .map(|&(row_lo, row_hi)| {
            let mut local = vec![0.0f64; g * g];
            for cell in row_lo * res..row_hi * res {
                let dl = dl_dpred[cell];
                if dl == 0.0 {
                    continue;
                }
                let base = (cache.bases[cell].0 as usize, cache.bases[cell].1 as usize);
                let heights = field.window_heights(base);
                let root = crate::field::HeightSample {
                    z: roots[cell],
                    clamped: false,
                };
                // Clamped cells were filtered by the caller via dl == 0.
                let grad = root_gradient(&cache.weights[cell], &heights, field.sharpness, root);
                for wy in 0..WINDOW {
                    let row = (base.1 + wy) * g + base.0;
                    for wx in 0..WINDOW {
                        local[row + wx] += dl * grad[wy * WINDOW + wx];
                    }
                }
            }
            local
        })
        .collect();
    for part in partials {
        for (acc, p) in grid_grad.iter_mut().zip(part) {
            *acc += p;
        }
    }
}

/// Fits a z-monotone field to a normalized cloud. Deterministic for a given
/// configuration regardless of thread count.
pub fn fit(cloud: &PointCloud, cfg: &FitConfig) -> Result<(ZMonoField, FitReport)> {
    cfg.validate()?;
    cloud.expect_frame(Frame::Normalized)?;
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let start = Instant::now();

    let target = build_target_heightmap(cloud, cfg.height_res)?;
    let target_g = build_target_heightmap(cloud, cfg.grid_res)?;
    let mut field = ZMonoField::init_from_target(&target_g, cfg.sharpness);

    let cache = QueryCache::build(&field, cfg.height_res);
    let n_cells = cfg.height_res * cfg.height_res;
    let mut roots = vec![f64::NAN; n_cells];
    let mut clamped = vec![false; n_cells];
    let mut pred = HeightMap::new_filled(cfg.height_res, 0.0);

    let g2 = cfg.grid_res * cfg.grid_res;
    let mut adam = Adam::new(g2, cfg);
    let mut grid_grad = vec![0.0f64; g2];

    let mut report = FitReport {
        height_loss: Vec::with_capacity(cfg.steps),
        laplacian_loss: Vec::with_capacity(cfg.steps),
        normal_loss: Vec::with_capacity(cfg.steps),
        total_loss: Vec::with_capacity(cfg.steps),
        wall_time_s: 0.0,
        final_height_rmse: 0.0,
    };

    for step in 0..cfg.steps {
        forward_roots(&field, &cache, &mut roots, &mut clamped);
        pred.heights.copy_from_slice(&roots);

        let (l_h, g_h) = loss_height(&pred, &target)?;
        let (l_lap, g_lap) = loss_laplacian(&pred);
        let (l_nrm, g_nrm) = loss_normal_tv(&pred);
        let total = l_h + cfg.lambda_lap * l_lap + cfg.lambda_nrm * l_nrm;
        if !total.is_finite() {
            return Err(Error::Diverged { step });
        }
        report.height_loss.push(l_h);
        report.laplacian_loss.push(l_lap);
        report.normal_loss.push(l_nrm);
        report.total_loss.push(total);

        let mut dl_dpred = g_h;
        for i in 0..n_cells {
            dl_dpred[i] += cfg.lambda_lap * g_lap[i] + cfg.lambda_nrm * g_nrm[i];
            if clamped[i] {
                dl_dpred[i] = 0.0;
            }
        }

        grid_grad.iter_mut().for_each(|g| *g = 0.0);
        backprop_to_grid(&field, &cache, &roots, &dl_dpred, &mut grid_grad);
        adam.update(&mut field.grid, &grid_grad);
        for h in &mut field.grid {
            *h = h.clamp(-1.0, 1.0);
        }
    }

    forward_roots(&field, &cache, &mut roots, &mut clamped);
    let mut sq = 0.0;
    let mut count = 0usize;
    for i in 0..n_cells {
        if target.valid[i] {
            let d = roots[i] - target.heights[i];
            sq += d * d;
            count += 1;
        }
    }
    report.final_height_rmse = if count > 0 { (sq / count as f64).sqrt() } else { 0.0 };
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok((field, report))
}

/// Axis-aligned xy rectangle in world meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn span(&self) -> (f64, f64) {
        (self.x1 - self.x0, self.y1 - self.y0)
    }
}

/// One fitted tile of a larger scene.
#[derive(Debug)]
pub struct FittedTile {
    pub field: ZMonoField,
    pub transform: crate::geom::NormalizeTransform,
    /// Non-overlapping core region this tile owns, world meters.
    pub core: Rect,
    /// None for degenerate tiles (too few points, flat-ground fallback).
    pub report: Option<FitReport>,
}

/// Splits the cloud's xy bounding box into `tiles`×`tiles` cells, fits each
/// independently on its core region expanded by `overlap` (fraction of the
/// tile span) toward interior seams, and returns per-tile fields plus
/// transforms for the merge step. All tiles share one global z scale so
/// their meshes meet at seams.
///
/// Tiles with fewer than 100 points are degenerate: they get a flat field
/// at the scene's ground level and a warning.
pub fn fit_tiled(
    cloud: &PointCloud,
    tiles: usize,
    overlap: f64,
    cfg: &FitConfig,
) -> Result<Vec<FittedTile>> {
    cloud.expect_frame(Frame::World)?;
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if tiles == 0 {
        return Err(Error::Config("tiles must be >= 1".into()));
    }
    for (i, p) in cloud.points.iter().enumerate() {
        if !p.is_finite() {
            return Err(Error::NonFinitePoint { index: i });
        }
    }

    let (lo, hi) = cloud.bbox().unwrap();
    let ground_z = lo.z;
    let tile_w = (hi.x - lo.x) / tiles as f64;
    let tile_h = (hi.y - lo.y) / tiles as f64;

    let mut out = Vec::with_capacity(tiles * tiles);
    for ty in 0..tiles {
        for tx in 0..tiles {
            let core = Rect {
                x0: lo.x + tx as f64 * tile_w,
                y0: lo.y + ty as f64 * tile_h,
                x1: lo.x + (tx + 1) as f64 * tile_w,
                y1: lo.y + (ty + 1) as f64 * tile_h,
            };
            // Expand only toward interior seams so a single tile reproduces
            // the plain fit exactly.
            let ex = Rect {
                x0: core.x0 - if tx > 0 { overlap * tile_w } else { 0.0 },
                y0: core.y0 - if ty > 0 { overlap * tile_h } else { 0.0 },
                x1: core.x1 + if tx + 1 < tiles { overlap * tile_w } else { 0.0 },
                y1: core.y1 + if ty + 1 < tiles { overlap * tile_h } else { 0.0 },
            };
            let transform = crate::geom::normalize_transform_for_bbox(
                Vec3::new(ex.x0, ex.y0, lo.z),
                Vec3::new(ex.x1, ex.y1, hi.z),
                cfg.padding,
            );
            let pts: Vec<Vec3> = cloud
                .points
                .iter()
                .filter(|p| ex.contains(p.x, p.y))
                .copied()
                .collect();
            if pts.len() < 100 {
                log::warn!(
                    "tile ({tx}, {ty}) has only {} points; emitting flat ground",
                    pts.len()
                );
                let ground = transform.to_normalized(Vec3::new(0.0, 0.0, ground_z)).z;
                let field = ZMonoField::constant(cfg.grid_res, cfg.sharpness, ground.clamp(-1.0, 1.0));
                out.push(FittedTile {
                    field,
                    transform,
                    core,
                    report: None,
                });
                continue;
            }
            let sub = transform.apply_cloud(&PointCloud::new(pts, Frame::World));
            let (field, report) = fit(&sub, cfg)?;
            out.push(FittedTile {
                field,
                transform,
                core,
                report: Some(report),
            });
        }
    }
    Ok(out)
}
