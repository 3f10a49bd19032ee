//! Geometry metrics (Chamfer distance, precision/recall/F1 under a match
//! threshold) and image metrics (PSNR, SSIM), with exact nearest-neighbor
//! queries via a kd-tree.

use crate::geom::{Frame, PointCloud, TriMesh, Vec3};
use crate::raster::ColorImage;
use crate::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Default match-distance threshold in normalized units; the aerial 0.006
/// convention scaled by the ~6× coarser satellite ground sampling distance.
pub const DEFAULT_D_TAU: f64 = 0.036;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeoMetricReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Symmetric sum of mean nearest-neighbor distances; the convention is
    /// recorded alongside the number.
    pub chamfer: f64,
    pub chamfer_convention: String,
    pub d_tau: f64,
    pub pred_samples: usize,
    pub gt_samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImgMetricReport {
    /// dB; +inf is serialized as the 99.0 sentinel by the report writer.
    pub psnr: f64,
    pub ssim: f64,
    pub masked: bool,
}

// ---------------------------------------------------------------------------
// Mesh sampling
// ---------------------------------------------------------------------------

/// Uniform surface sampling: area-weighted triangle selection plus uniform
/// barycentric placement. Deterministic per seed.
pub fn sample_mesh(mesh: &TriMesh, n: usize, seed: u64) -> Result<PointCloud> {
    if mesh.triangles.is_empty() {
        return Err(Error::InvalidMesh("cannot sample an empty mesh".into()));
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Err(Error::InvalidMesh("mesh has zero total area".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let r = rng.gen_range(0.0..total);
        let t = cumulative
            .partition_point(|&c| c < r)
            .min(mesh.triangles.len() - 1);
        let [ia, ib, ic] = mesh.triangles[t];
        let a = mesh.vertices[ia as usize];
        let b = mesh.vertices[ib as usize];
        let c = mesh.vertices[ic as usize];
        // sqrt trick for uniform density over the triangle.
        let su = rng.gen_range(0.0f64..1.0).sqrt();
        let v = rng.gen_range(0.0f64..1.0);
        let w0 = 1.0 - su;
        let w1 = su * (1.0 - v);
        let w2 = su * v;
        points.push(a * w0 + b * w1 + c * w2);
    }
    Ok(PointCloud::new(points, mesh_frame(mesh)))
}

fn mesh_frame(mesh: &TriMesh) -> Frame {
    // Meshes within the unit cube are treated as normalized; world meshes
    // exceed it.
    match mesh.bbox() {
        Some((lo, hi))
            if lo.x >= -1.001
                && lo.y >= -1.001
                && lo.z >= -1.001
                && hi.x <= 1.001
                && hi.y <= 1.001
                && hi.z <= 1.001 =>
        {
            Frame::Normalized
        }
        _ => Frame::World,
    }
}

// ---------------------------------------------------------------------------
// Exact nearest neighbors
// ---------------------------------------------------------------------------

/// Exact 3D kd-tree; median split on the widest axis, deterministic build.
pub struct KdTree {
    points: Vec<Vec3>,
    nodes: Vec<KdNode>,
    root: Option<u32>,
}

struct KdNode {
    point: u32,
    axis: u8,
    left: Option<u32>,
    right: Option<u32>,
}

impl KdTree {
    pub fn build(points: &[Vec3]) -> Self {
        let mut idx: Vec<u32> = (0..points.len() as u32).collect();
        let mut tree = KdTree {
            points: points.to_vec(),
            nodes: Vec::with_capacity(points.len()),
            root: None,
        };
        tree.root = tree.build_rec(&mut idx);
        tree
    }

    fn build_rec(&mut self, idx: &mut [u32]) -> Option<u32> {
        if idx.is_empty() {
            return None;
        }
        let mut lo = Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = -lo;
        for &i in idx.iter() {
            lo = lo.min_components(self.points[i as usize]);
            hi = hi.max_components(self.points[i as usize]);
        }
        let ext = hi - lo;
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0u8
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let key = |p: &Vec3| match axis {
            0 => p.x,
            1 => p.y,
            _ => p.z,
        };
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| {
            let ka = key(&self.points[a as usize]);
            let kb = key(&self.points[b as usize]);
            ka.partial_cmp(&kb).unwrap().then(a.cmp(&b))
        });
        let point = idx[mid];
        let (left_idx, rest) = idx.split_at_mut(mid);
        let right_idx = &mut rest[1..];
        let left = self.build_rec(left_idx);
        let right = self.build_rec(right_idx);
        self.nodes.push(KdNode {
            point,
            axis,
            left,
            right,
        });
        Some(self.nodes.len() as u32 - 1)
    }

    /// Distance to the nearest stored point.
    pub fn nearest_distance(&self, q: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        if let Some(root) = self.root {
            self.search(root, q, &mut best);
        }
        best.sqrt()
    }

    fn search(&self, node: u32, q: Vec3, best_sq: &mut f64) {
        let n = &self.nodes[node as usize];
        let p = self.points[n.point as usize];
        let d = q - p;
        let d_sq = d.dot(d);
        if d_sq < *best_sq {
            *best_sq = d_sq;
        }
        let delta = match n.axis {
            0 => q.x - p.x,
            1 => q.y - p.y,
            _ => q.z - p.z,
        };
        let (near, far) = if delta < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        if let Some(c) = near {
            self.search(c, q, best_sq);
        }
        if let Some(c) = far {
            if delta * delta < *best_sq {
                self.search(c, q, best_sq);
            }
        }
    }
}

fn nearest_distances(from: &PointCloud, to: &PointCloud) -> Vec<f64> {
    let tree = KdTree::build(&to.points);
    from.points
        .par_iter()
        .map(|&p| tree.nearest_distance(p))
        .collect()
}

/// Symmetric-sum Chamfer distance: mean nearest-neighbor distance a→b plus
/// mean b→a. Exact (kd-tree accelerated, not approximate).
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if a.frame != b.frame {
        return Err(Error::WrongFrame {
            expected: a.frame,
            found: b.frame,
        });
    }
    let ab = nearest_distances(a, b);
    let ba = nearest_distances(b, a);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(mean(&ab) + mean(&ba))
}

/// Precision/recall/F1 at threshold `d_tau`: the fraction of predicted
/// points with a ground-truth point within `d_tau`, and vice versa.
pub fn prf(pred: &PointCloud, gt: &PointCloud, d_tau: f64) -> Result<GeoMetricReport> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if d_tau <= 0.0 {
        return Err(Error::Config("d_tau must be positive".into()));
    }
    if pred.frame != gt.frame {
        return Err(Error::WrongFrame {
            expected: gt.frame,
            found: pred.frame,
        });
    }
    let pg = nearest_distances(pred, gt);
    let gp = nearest_distances(gt, pred);
    let frac = |v: &[f64]| v.iter().filter(|&&d| d <= d_tau).count() as f64 / v.len() as f64;
    let precision = frac(&pg);
    let recall = frac(&gp);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(GeoMetricReport {
        precision,
        recall,
        f1,
        chamfer: mean(&pg) + mean(&gp),
        chamfer_convention: "sum of mean nearest-neighbor distances (pred→gt + gt→pred)".into(),
        d_tau,
        pred_samples: pred.len(),
        gt_samples: gt.len(),
    })
}

// ---------------------------------------------------------------------------
// Image metrics
// ---------------------------------------------------------------------------

fn check_dims(a: &ColorImage, b: &ColorImage, mask: Option<&[bool]>) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    if let Some(m) = mask {
        if m.len() != a.width * a.height {
            return Err(Error::Config("mask length mismatch".into()));
        }
    }
    Ok(())
}

/// Peak signal-to-noise ratio over masked pixels with MAX = 1.0; identical
/// inputs give +infinity.
pub fn psnr(a: &ColorImage, b: &ColorImage, mask: Option<&[bool]>) -> Result<f64> {
    check_dims(a, b, mask)?;
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for i in 0..a.data.len() {
        if mask.map_or(true, |m| m[i]) {
            for c in 0..3 {
                let d = a.data[i][c] as f64 - b.data[i][c] as f64;
                sum += d * d;
            }
            n += 3;
        }
    }
    if n == 0 {
        return Err(Error::Config("empty mask".into()));
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

/// Gaussian 11×11, σ = 1.5 window weights, normalized.
fn gaussian_window() -> [f64; 121] {
    let mut w = [0.0f64; 121];
    let sigma = 1.5;
    let mut total = 0.0;
    for y in 0..11 {
        for x in 0..11 {
            let dx = x as f64 - 5.0;
            let dy = y as f64 - 5.0;
            let g = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            w[y * 11 + x] = g;
            total += g;
        }
    }
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Structural similarity with the standard 11×11 Gaussian window (σ = 1.5)
/// and constants K1 = 0.01, K2 = 0.03 on a unit dynamic range, averaged
/// over valid window centers and the three channels. A window center is
/// valid when the window lies fully inside the image and (with a mask) all
/// its pixels are masked in.
pub fn ssim(a: &ColorImage, b: &ColorImage, mask: Option<&[bool]>) -> Result<f64> {
    check_dims(a, b, mask)?;
    if a.width < 11 || a.height < 11 {
        return Err(Error::Config("image smaller than the 11×11 SSIM window".into()));
    }
    let window = gaussian_window();
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);

    let mut total = 0.0f64;
    let mut count = 0usize;
    for cy in 5..a.height - 5 {
        'center: for cx in 5..a.width - 5 {
            if let Some(m) = mask {
                for wy in 0..11 {
                    for wx in 0..11 {
                        if !m[(cy + wy - 5) * a.width + (cx + wx - 5)] {
                            continue 'center;
                        }
                    }
                }
            }
            let mut ssim_rgb = 0.0;
            for ch in 0..3 {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                for wy in 0..11 {
                    for wx in 0..11 {
                        let i = (cy + wy - 5) * a.width + (cx + wx - 5);
                        let w = window[wy * 11 + wx];
                        mu_a += w * a.data[i][ch] as f64;
                        mu_b += w * b.data[i][ch] as f64;
                    }
                }
                let mut var_a = 0.0;
                let mut var_b = 0.0;
                let mut cov = 0.0;
                for wy in 0..11 {
                    for wx in 0..11 {
                        let i = (cy + wy - 5) * a.width + (cx + wx - 5);
                        let w = window[wy * 11 + wx];
                        let da = a.data[i][ch] as f64 - mu_a;
                        let db = b.data[i][ch] as f64 - mu_b;
                        var_a += w * da * da;
                        var_b += w * db * db;
                        cov += w * da * db;
                    }
                }
                ssim_rgb += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            }
            total += ssim_rgb / 3.0;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Config("no valid SSIM window centers".into()));
    }
    Ok(total / count as f64)
}

/// PSNR/SSIM pair for a rendered-vs-reference image comparison.
pub fn image_report(
    a: &ColorImage,
    b: &ColorImage,
    mask: Option<&[bool]>,
) -> Result<ImgMetricReport> {
    Ok(ImgMetricReport {
        psnr: psnr(a, b, mask)?,
        ssim: ssim(a, b, mask)?,
        masked: mask.is_some(),
    })
}

/// Finite stand-in for +inf PSNR in tabular/JSON outputs.
pub fn psnr_sentinel(psnr: f64) -> f64 {
    if psnr.is_finite() {
        psnr
    } else {
        99.0
    }
}
