//! Texture atlas construction and optimization: two-chart UV assignment,
//! least-squares baking of the atlas against posed source views, and the
//! iterative refinement loop with a pluggable view enhancer standing in
//! for an external restoration model.

use crate::camera::PinholeCamera;
use crate::fit::Rect;
use crate::geom::{TriMesh, Vec3};
use crate::raster::{rasterize, ChannelSet, ColorImage, RasterOptions};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Fill color of texels no view has ever observed.
pub const SENTINEL: [f32; 3] = [1.0, 0.0, 1.0];

/// RGB texel grid addressed by UV in [0,1]²; row 0 is v = 0 (bottom).
/// `coverage` accumulates observation weight; zero-coverage texels keep the
/// sentinel fill and are never modified by optimization.
#[derive(Debug, Clone)]
pub struct TextureAtlas {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<[f32; 3]>,
    pub coverage: Vec<f32>,
}

impl TextureAtlas {
    pub fn new(width: usize, height: usize) -> Self {
        TextureAtlas {
            width,
            height,
            rgb: vec![SENTINEL; width * height],
            coverage: vec![0.0; width * height],
        }
    }

    /// Bilinear sample at (u, v) with texel centers at half-integer
    /// coordinates; clamps at the borders.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> [f32; 3] {
        let (t, w) = self.footprint(u, v);
        let mut c = [0.0f32; 3];
        for k in 0..4 {
            for ch in 0..3 {
                c[ch] += w[k] as f32 * self.rgb[t[k]][ch];
            }
        }
        c
    }

    /// The four texels and bilinear weights under a UV sample.
    pub fn footprint(&self, u: f64, v: f64) -> ([usize; 4], [f64; 4]) {
        let fx = u * self.width as f64 - 0.5;
        let fy = v * self.height as f64 - 0.5;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let tx = fx - x0;
        let ty = fy - y0;
        let clamp_x = |x: f64| (x.max(0.0) as usize).min(self.width - 1);
        let clamp_y = |y: f64| (y.max(0.0) as usize).min(self.height - 1);
        let (x0c, x1c) = (clamp_x(x0), clamp_x(x0 + 1.0));
        let (y0c, y1c) = (clamp_y(y0), clamp_y(y0 + 1.0));
        (
            [
                y0c * self.width + x0c,
                y0c * self.width + x1c,
                y1c * self.width + x0c,
                y1c * self.width + x1c,
            ],
            [
                (1.0 - tx) * (1.0 - ty),
                tx * (1.0 - ty),
                (1.0 - tx) * ty,
                tx * ty,
            ],
        )
    }

    /// 8-bit PNG with v = 0 at the bottom of the file image.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut img = ColorImage::filled(self.width, self.height, [0.0; 3]);
        for y in 0..self.height {
            for x in 0..self.width {
                img.set(x, self.height - 1 - y, self.rgb[y * self.width + x]);
            }
        }
        img.save_png(path)
    }

    /// Raw float sidecar: magic, dimensions, then row-major RGB f32
    /// triples (v = 0 first), lossless unlike the 8-bit PNG.
    pub fn save_f32_sidecar(&self, path: impl AsRef<Path>) -> Result<()> {
        use std::io::Write;
        let path = path.as_ref();
        let mut w = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
        );
        let io_err = |e| Error::io(path, e);
        w.write_all(b"ATLF32_1").map_err(io_err)?;
        w.write_all(&(self.width as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(&(self.height as u32).to_le_bytes()).map_err(io_err)?;
        for px in &self.rgb {
            for c in px {
                w.write_all(&c.to_le_bytes()).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = ColorImage::load_png(path)?;
        let mut atlas = TextureAtlas::new(img.width, img.height);
        for y in 0..img.height {
            for x in 0..img.width {
                atlas.rgb[y * img.width + x] = img.get(x, img.height - 1 - y);
            }
        }
        Ok(atlas)
    }
}

// ---------------------------------------------------------------------------
// UV assignment
// ---------------------------------------------------------------------------

/// Two-chart UV layout: top-dominant triangles (|n_z| >= 0.5) share one
/// ground-plane-projected chart in the upper atlas half; steep triangles
/// are packed as per-triangle charts in the lower half with texel density
/// proportional to world area. Vertices are duplicated so each belongs to
/// exactly one chart; charts never overlap.
pub fn assign_uvs(mesh: &TriMesh, atlas_size: usize) -> Result<TriMesh> {
    mesh.validate()?;
    if mesh.triangles.is_empty() {
        return Err(Error::InvalidMesh("cannot chart an empty mesh".into()));
    }
    let w = atlas_size as f64;
    let h = atlas_size as f64;

    let (lo, hi) = mesh.bbox().unwrap();
    let span_x = (hi.x - lo.x).max(1e-12);
    let span_y = (hi.y - lo.y).max(1e-12);

    // Top chart occupies the upper half with a two-texel margin.
    let margin = 2.0;
    let avail_u = w - 2.0 * margin;
    let avail_v = h * 0.5 - 2.0 * margin;
    let scale_top = (avail_u / span_x).min(avail_v / span_y);
    let top_uv = |p: Vec3| -> [f64; 2] {
        [
            (margin + (p.x - lo.x) * scale_top) / w,
            (h * 0.5 + margin + (p.y - lo.y) * scale_top) / h,
        ]
    };

    let mut vertices: Vec<Vec3> = Vec::new();
    let mut uvs: Vec<[f64; 2]> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    // Shared remap for top-chart vertices.
    let mut top_remap: Vec<u32> = vec![u32::MAX; mesh.vertices.len()];

    struct Steep {
        tri: usize,
        /// Local 2D coordinates of the three corners, meters.
        pts: [[f64; 2]; 3],
        w_m: f64,
        h_m: f64,
    }
    let mut steep: Vec<Steep> = Vec::new();

    for (t, tri) in mesh.triangles.iter().enumerate() {
        let n = mesh.triangle_normal(t);
        if n.z.abs() >= 0.5 {
            let mut idx = [0u32; 3];
            for (k, &vi) in tri.iter().enumerate() {
                let vi = vi as usize;
                if top_remap[vi] == u32::MAX {
                    top_remap[vi] = vertices.len() as u32;
                    vertices.push(mesh.vertices[vi]);
                    uvs.push(top_uv(mesh.vertices[vi]));
                }
                idx[k] = top_remap[vi];
            }
            triangles.push(idx);
        } else {
            let a = mesh.vertices[tri[0] as usize];
            let b = mesh.vertices[tri[1] as usize];
            let c = mesh.vertices[tri[2] as usize];
            let e1 = (b - a).normalized();
            let e2 = n.cross(e1);
            let p1 = [(b - a).norm(), 0.0];
            let p2 = [(c - a).dot(e1), (c - a).dot(e2)];
            // Shift into the positive quadrant.
            let min_x = p2[0].min(0.0);
            let min_y = p2[1].min(0.0);
            let pts = [
                [-min_x, -min_y],
                [p1[0] - min_x, p1[1] - min_y],
                [p2[0] - min_x, p2[1] - min_y],
            ];
            let w_m = pts.iter().map(|p| p[0]).fold(0.0, f64::max);
            let h_m = pts.iter().map(|p| p[1]).fold(0.0, f64::max);
            steep.push(Steep { tri: t, pts, w_m, h_m });
        }
    }

    if !steep.is_empty() {
        // Texels per meter: fill a fraction of the lower half, shrinking
        // until the shelf packing fits.
        let lower_area = w * (h * 0.5 - margin);
        let total_area: f64 = steep.iter().map(|s| s.w_m * s.h_m).sum();
        let mut lambda = (lower_area * 0.5 / total_area.max(1e-12)).sqrt();
        let gutter = 1.0;

        let mut order: Vec<usize> = (0..steep.len()).collect();
        // Tall-first shelf packing; ties break on index for determinism.
        order.sort_by(|&a, &b| {
            steep[b]
                .h_m
                .partial_cmp(&steep[a].h_m)
                .unwrap()
                .then(a.cmp(&b))
        });

        let mut placed: Option<Vec<(f64, f64)>> = None;
        for _ in 0..40 {
            let mut origins = vec![(0.0, 0.0); steep.len()];
            let mut shelf_x = margin;
            let mut shelf_y = margin;
            let mut shelf_h = 0.0f64;
            let mut ok = true;
            for &si in &order {
                let s = &steep[si];
                let bw = s.w_m * lambda + 2.0 * gutter;
                let bh = s.h_m * lambda + 2.0 * gutter;
                if shelf_x + bw > w - margin {
                    shelf_y += shelf_h;
                    shelf_x = margin;
                    shelf_h = 0.0;
                }
                if shelf_y + bh > h * 0.5 - margin || shelf_x + bw > w - margin {
                    ok = false;
                    break;
                }
                origins[si] = (shelf_x + gutter, shelf_y + gutter);
                shelf_x += bw;
                shelf_h = shelf_h.max(bh);
            }
            if ok {
                placed = Some(origins);
                break;
            }
            lambda *= 0.8;
        }
        let origins = placed.ok_or(Error::AtlasOverflow {
            needed: steep.len(),
            available: (lower_area) as usize,
        })?;

        for (si, s) in steep.iter().enumerate() {
            let (ox, oy) = origins[si];
            let tri = mesh.triangles[s.tri];
            let mut idx = [0u32; 3];
            for k in 0..3 {
                idx[k] = vertices.len() as u32;
                vertices.push(mesh.vertices[tri[k] as usize]);
                uvs.push([
                    (ox + s.pts[k][0] * lambda) / w,
                    (oy + s.pts[k][1] * lambda) / h,
                ]);
            }
            triangles.push(idx);
        }
        // Keep the output triangle order aligned with the input mesh:
        // top triangles were emitted in input order, steep ones follow in
        // input order too (origins indexed by steep order, not shelf
        // order), which is what the loop above produces.
    }

    let mut out = TriMesh::new(vertices, triangles);
    out.uvs = Some(uvs);
    Ok(out)
}

/// Paints an atlas by rasterizing each charted triangle in UV space and
/// coloring texels from a world-space color function, then dilating chart
/// borders so bilinear lookups near seams stay in-chart.
pub fn paint_atlas(
    mesh: &TriMesh,
    atlas_size: usize,
    color: impl Fn(Vec3) -> [f32; 3],
) -> Result<TextureAtlas> {
    let uvs = mesh
        .uvs
        .as_ref()
        .ok_or_else(|| Error::InvalidMesh("mesh has no UVs".into()))?;
    let mut atlas = TextureAtlas::new(atlas_size, atlas_size);
    let w = atlas_size as f64;
    for tri in &mesh.triangles {
        let p: Vec<[f64; 2]> = tri.iter().map(|&i| uvs[i as usize]).collect();
        let world: Vec<Vec3> = tri.iter().map(|&i| mesh.vertices[i as usize]).collect();
        let to_px = |uv: [f64; 2]| [uv[0] * w, uv[1] * w];
        let a = to_px(p[0]);
        let b = to_px(p[1]);
        let c = to_px(p[2]);
        let area2 = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
        if area2 == 0.0 {
            continue;
        }
        let inv = 1.0 / area2;
        let min_x = a[0].min(b[0]).min(c[0]).floor().max(0.0) as usize;
        let max_x = (a[0].max(b[0]).max(c[0]).ceil() as usize).min(atlas_size - 1);
        let min_y = a[1].min(b[1]).min(c[1]).floor().max(0.0) as usize;
        let max_y = (a[1].max(b[1]).max(c[1]).ceil() as usize).min(atlas_size - 1);
        for py in min_y..=max_y {
            let y = py as f64 + 0.5;
            for px in min_x..=max_x {
                let x = px as f64 + 0.5;
                let l0 = ((b[0] - x) * (c[1] - y) - (c[0] - x) * (b[1] - y)) * inv;
                let l1 = ((c[0] - x) * (a[1] - y) - (a[0] - x) * (c[1] - y)) * inv;
                let l2 = ((a[0] - x) * (b[1] - y) - (b[0] - x) * (a[1] - y)) * inv;
                // Slightly permissive so border texels get painted.
                if l0 < -0.05 || l1 < -0.05 || l2 < -0.05 {
                    continue;
                }
                let wp = world[0] * l0 + world[1] * l1 + world[2] * l2;
                let i = py * atlas_size + px;
                atlas.rgb[i] = color(wp);
                atlas.coverage[i] = 1.0;
            }
        }
    }
    dilate(&mut atlas, 2);
    Ok(atlas)
}

/// Copies covered colors into adjacent uncovered texels (gutter fill).
pub fn dilate(atlas: &mut TextureAtlas, iterations: usize) {
    let w = atlas.width;
    let h = atlas.height;
    for _ in 0..iterations {
        let src = atlas.rgb.clone();
        let cov = atlas.coverage.clone();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if cov[i] > 0.0 {
                    continue;
                }
                let mut acc = [0.0f32; 3];
                let mut n = 0;
                let mut push = |xx: i64, yy: i64| {
                    if xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h {
                        let j = yy as usize * w + xx as usize;
                        if cov[j] > 0.0 {
                            for c in 0..3 {
                                acc[c] += src[j][c];
                            }
                            n += 1;
                        }
                    }
                };
                push(x as i64 - 1, y as i64);
                push(x as i64 + 1, y as i64);
                push(x as i64, y as i64 - 1);
                push(x as i64, y as i64 + 1);
                if n > 0 {
                    for c in 0..3 {
                        atlas.rgb[i][c] = acc[c] / n as f32;
                    }
                    atlas.coverage[i] = 0.5;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Baking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BakeConfig {
    pub atlas_size: usize,
    pub epochs: usize,
    /// Relaxation step size for the Jacobi-preconditioned descent;
    /// backtracking halves it whenever a step would increase the loss.
    pub lr: f64,
    /// Loss weights carried for configuration fidelity. Only the MSE term
    /// drives optimization; SSIM is reported as a metric, never
    /// differentiated.
    pub lambda_mse: f64,
    pub lambda_ssim: f64,
}

impl Default for BakeConfig {
    fn default() -> Self {
        BakeConfig {
            atlas_size: 2048,
            epochs: 100,
            lr: 1.0,
            lambda_mse: 0.8,
            lambda_ssim: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BakeResult {
    pub atlas: TextureAtlas,
    /// Mean-squared reconstruction error per epoch; non-increasing.
    pub epoch_losses: Vec<f64>,
}

/// Per-view linearized observations: each covered pixel contributes its
/// color and a 4-texel bilinear footprint.
struct Observations {
    texels: Vec<[u32; 4]>,
    weights: Vec<[f32; 4]>,
    colors: Vec<[f32; 3]>,
}

fn build_observations(
    mesh: &TriMesh,
    views: &[(ColorImage, PinholeCamera)],
    atlas: &TextureAtlas,
) -> Vec<Observations> {
    views
        .iter()
        .map(|(img, cam)| {
            let fb = rasterize(mesh, cam, ChannelSet::visibility(), &RasterOptions::default());
            let uv = fb.uv.as_ref().unwrap();
            let mut obs = Observations {
                texels: Vec::new(),
                weights: Vec::new(),
                colors: Vec::new(),
            };
            for i in 0..fb.covered.len() {
                if !fb.covered[i] {
                    continue;
                }
                let (t, w) = atlas.footprint(uv[i][0], uv[i][1]);
                obs.texels.push([t[0] as u32, t[1] as u32, t[2] as u32, t[3] as u32]);
                obs.weights
                    .push([w[0] as f32, w[1] as f32, w[2] as f32, w[3] as f32]);
                obs.colors.push(img.data[i]);
            }
            obs
        })
        .collect()
}

fn bake_loss(atlas: &TextureAtlas, observations: &[Observations]) -> (f64, usize) {
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for obs in observations {
        for p in 0..obs.colors.len() {
            let mut c = [0.0f32; 3];
            for k in 0..4 {
                let t = obs.texels[p][k] as usize;
                for ch in 0..3 {
                    c[ch] += obs.weights[p][k] * atlas.rgb[t][ch];
                }
            }
            for ch in 0..3 {
                let d = (c[ch] - obs.colors[p][ch]) as f64;
                sum += d * d;
            }
            n += 1;
        }
    }
    (if n > 0 { sum / n as f64 } else { 0.0 }, n)
}

/// Optimizes atlas texels against the views' pixels by minimizing the mean
/// squared error through the bilinear pixel→texel system, starting from
/// `initial`. Texels observed by no view keep their previous contents.
pub fn optimize_atlas(
    mesh: &TriMesh,
    views: &[(ColorImage, PinholeCamera)],
    initial: TextureAtlas,
    cfg: &BakeConfig,
) -> Result<BakeResult> {
    if views.is_empty() {
        return Err(Error::NoCoverage);
    }
    let mut atlas = initial;
    let observations = build_observations(mesh, views, &atlas);
    let total_obs: usize = observations.iter().map(|o| o.colors.len()).sum();
    if total_obs == 0 {
        return Err(Error::NoCoverage);
    }

    // Row-sum preconditioner: accumulated bilinear weight per texel. With
    // row sums of one per pixel, the preconditioned normal matrix has
    // spectral radius 1, so the unit step is stable and solves
    // pixel-exclusive texel groups exactly.
    let mut diag = vec![0.0f64; atlas.rgb.len()];
    for obs in &observations {
        for p in 0..obs.colors.len() {
            for k in 0..4 {
                diag[obs.texels[p][k] as usize] += obs.weights[p][k] as f64;
            }
        }
    }
    for (c, d) in atlas.coverage.iter_mut().zip(&diag) {
        *c += *d as f32;
    }

    let inv_n = 1.0 / total_obs as f64;
    let mut lr = cfg.lr;
    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    let (mut current_loss, _) = bake_loss(&atlas, &observations);
    losses.push(current_loss);

    let mut grad = vec![[0.0f64; 3]; atlas.rgb.len()];
    for _ in 0..cfg.epochs {
        for g in &mut grad {
            *g = [0.0; 3];
        }
        for obs in &observations {
            for p in 0..obs.colors.len() {
                let mut c = [0.0f32; 3];
                for k in 0..4 {
                    let t = obs.texels[p][k] as usize;
                    for ch in 0..3 {
                        c[ch] += obs.weights[p][k] * atlas.rgb[t][ch];
                    }
                }
                for k in 0..4 {
                    let t = obs.texels[p][k] as usize;
                    let w = obs.weights[p][k] as f64;
                    for ch in 0..3 {
                        grad[t][ch] += 2.0 * w * (c[ch] - obs.colors[p][ch]) as f64 * inv_n;
                    }
                }
            }
        }

        // Jacobi-preconditioned step with backtracking: retry at half the
        // step whenever the loss would grow, so the trace is non-increasing.
        let snapshot = atlas.rgb.clone();
        loop {
            for t in 0..atlas.rgb.len() {
                if diag[t] > 0.0 {
                    let scale = lr / (2.0 * diag[t] * inv_n);
                    for ch in 0..3 {
                        let v = snapshot[t][ch] as f64 - scale * grad[t][ch];
                        atlas.rgb[t][ch] = v.clamp(0.0, 1.0) as f32;
                    }
                }
            }
            let (new_loss, _) = bake_loss(&atlas, &observations);
            if new_loss <= current_loss || lr < 1e-6 {
                current_loss = new_loss.min(current_loss);
                if new_loss > current_loss {
                    atlas.rgb.copy_from_slice(&snapshot);
                }
                break;
            }
            lr *= 0.5;
        }
        losses.push(current_loss);
    }

    Ok(BakeResult {
        atlas,
        epoch_losses: losses,
    })
}

/// Builds the basic texture: a fresh atlas optimized to match the source
/// views (the starting point of refinement).
pub fn bake_basic(
    mesh: &TriMesh,
    views: &[(ColorImage, PinholeCamera)],
    cfg: &BakeConfig,
) -> Result<BakeResult> {
    optimize_atlas(mesh, views, TextureAtlas::new(cfg.atlas_size, cfg.atlas_size), cfg)
}

// ---------------------------------------------------------------------------
// Enhancer hook + refinement
// ---------------------------------------------------------------------------

/// Pluggable image-to-image transform applied to rendered novel views
/// before they are used as optimization targets. `Identity` passes renders
/// through (making the loop a testable fixpoint); `ExternalCommand` runs an
/// arbitrary executable with `{in}`/`{out}` path placeholders.
#[derive(Debug, Clone)]
pub enum EnhancerHook {
    Identity,
    ExternalCommand {
        /// Shell command template containing `{in}` and `{out}`.
        template: String,
        timeout: std::time::Duration,
    },
}

impl EnhancerHook {
    pub fn apply(&self, img: &ColorImage, view: usize, work_dir: &Path) -> Result<ColorImage> {
        match self {
            EnhancerHook::Identity => Ok(img.clone()),
            EnhancerHook::ExternalCommand { template, timeout } => {
                let in_path: PathBuf = work_dir.join(format!("enhance_in_{view:04}.png"));
                let out_path: PathBuf = work_dir.join(format!("enhance_out_{view:04}.png"));
                img.save_png(&in_path)?;
                let cmd = template
                    .replace("{in}", &in_path.to_string_lossy())
                    .replace("{out}", &out_path.to_string_lossy());
                let mut child = std::process::Command::new("sh")
                    .arg("-c")
                    .arg(&cmd)
                    .spawn()
                    .map_err(|e| Error::HookFailed {
                        view,
                        msg: format!("spawn failed: {e}"),
                    })?;
                let deadline = std::time::Instant::now() + *timeout;
                let status = loop {
                    match child.try_wait() {
                        Ok(Some(status)) => break status,
                        Ok(None) => {
                            if std::time::Instant::now() > deadline {
                                let _ = child.kill();
                                let _ = child.wait();
                                return Err(Error::HookFailed {
                                    view,
                                    msg: format!("timed out after {timeout:?}"),
                                });
                            }
                            std::thread::sleep(std::time::Duration::from_millis(10));
                        }
                        Err(e) => {
                            return Err(Error::HookFailed {
                                view,
                                msg: format!("wait failed: {e}"),
                            })
                        }
                    }
                };
                if !status.success() {
                    return Err(Error::HookFailed {
                        view,
                        msg: format!("command exited with {status}"),
                    });
                }
                let out = ColorImage::load_png(&out_path).map_err(|e| Error::HookFailed {
                    view,
                    msg: format!("no readable output image: {e}"),
                })?;
                if out.width != img.width || out.height != img.height {
                    return Err(Error::HookFailed {
                        view,
                        msg: format!(
                            "output is {}x{}, expected {}x{}",
                            out.width, out.height, img.width, img.height
                        ),
                    });
                }
                Ok(out)
            }
        }
    }
}

/// Refinement-loop parameters: the novel-view grid spec plus per-iteration
/// optimization epochs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefineConfig {
    pub iterations: usize,
    pub epochs_per_iteration: usize,
    /// Novel-view grid: stride and bbox margin in meters, camera altitude
    /// and downward pitch, square view resolution.
    pub grid_stride: f64,
    pub grid_margin: f64,
    pub altitude: f64,
    pub pitch_deg: f64,
    pub view_size: usize,
    pub background: [f32; 3],
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            iterations: 2,
            epochs_per_iteration: 20,
            grid_stride: 150.0,
            grid_margin: 100.0,
            altitude: 450.0,
            pitch_deg: 45.0,
            view_size: 2048,
            background: [0.0, 0.0, 0.0],
        }
    }
}

/// Novel close-range views: sites on the bbox extended by the margin at
/// the configured stride, four cardinal orientations per site, pitched
/// down toward the scene.
pub fn novel_view_grid(bbox: Rect, cfg: &RefineConfig) -> Vec<PinholeCamera> {
    let ex = Rect {
        x0: bbox.x0 - cfg.grid_margin,
        y0: bbox.y0 - cfg.grid_margin,
        x1: bbox.x1 + cfg.grid_margin,
        y1: bbox.y1 + cfg.grid_margin,
    };
    let (span_x, span_y) = ex.span();
    let n = |span: f64| ((span / cfg.grid_stride).ceil() as usize).max(1);
    let (nx, ny) = (n(span_x), n(span_y));
    let cx = 0.5 * (ex.x0 + ex.x1);
    let cy = 0.5 * (ex.y0 + ex.y1);
    let pitch = cfg.pitch_deg.to_radians();
    let azimuths = [
        Vec3::new(0.0, 1.0, 0.0),
        Vec3::new(1.0, 0.0, 0.0),
        Vec3::new(0.0, -1.0, 0.0),
        Vec3::new(-1.0, 0.0, 0.0),
    ];
    let mut cams = Vec::with_capacity(nx * ny * 4);
    for iy in 0..ny {
        for ix in 0..nx {
            let x = cx + (ix as f64 - (nx as f64 - 1.0) * 0.5) * cfg.grid_stride;
            let y = cy + (iy as f64 - (ny as f64 - 1.0) * 0.5) * cfg.grid_stride;
            let pos = Vec3::new(x, y, cfg.altitude);
            for az in azimuths {
                let forward = (az * pitch.cos() + Vec3::new(0.0, 0.0, -pitch.sin())).normalized();
                cams.push(PinholeCamera::look_at(
                    pos,
                    pos + forward,
                    Vec3::new(0.0, 0.0, 1.0),
                    cfg.view_size,
                    cfg.view_size,
                    45.0,
                    0.0,
                ));
            }
        }
    }
    cams
}

#[derive(Debug)]
pub struct RefineOutcome {
    pub atlas: TextureAtlas,
    pub completed_iterations: usize,
    /// Set when an enhancer failure aborted an iteration; the atlas is the
    /// last good state.
    pub aborted: Option<String>,
}

/// Iterative texture refinement: render novel views from the current
/// atlas, enhance them through the hook into optimization targets, and
/// re-optimize the atlas against those targets. With the identity hook the
/// loop is a fixpoint (rendered targets already match the renders).
pub fn refine(
    mesh: &TriMesh,
    atlas: TextureAtlas,
    hook: &EnhancerHook,
    cfg: &RefineConfig,
    work_dir: &Path,
) -> Result<RefineOutcome> {
    let (lo, hi) = mesh
        .bbox()
        .ok_or_else(|| Error::InvalidMesh("empty mesh".into()))?;
    let cams = novel_view_grid(
        Rect {
            x0: lo.x,
            y0: lo.y,
            x1: hi.x,
            y1: hi.y,
        },
        cfg,
    );
    let bake_cfg = BakeConfig {
        atlas_size: atlas.width,
        epochs: cfg.epochs_per_iteration,
        ..BakeConfig::default()
    };

    let mut current = atlas;
    for it in 0..cfg.iterations {
        let mut views: Vec<(ColorImage, PinholeCamera)> = Vec::with_capacity(cams.len());
        for (vi, cam) in cams.iter().enumerate() {
            let render = render_with_atlas(mesh, &current, cam, cfg.background);
            match hook.apply(&render, vi, work_dir) {
                Ok(target) => views.push((target, cam.clone())),
                Err(e) => {
                    log::warn!("enhancer failed at iteration {it}: {e}; keeping last good atlas");
                    return Ok(RefineOutcome {
                        atlas: current,
                        completed_iterations: it,
                        aborted: Some(e.to_string()),
                    });
                }
            }
        }
        let result = optimize_atlas(mesh, &views, current, &bake_cfg)?;
        current = result.atlas;
    }
    Ok(RefineOutcome {
        atlas: current,
        completed_iterations: cfg.iterations,
        aborted: None,
    })
}

/// Renders the mesh through its UVs with bilinear atlas sampling;
/// uncovered pixels take the background color.
pub fn render_with_atlas(
    mesh: &TriMesh,
    atlas: &TextureAtlas,
    cam: &PinholeCamera,
    background: [f32; 3],
) -> ColorImage {
    let fb = rasterize(mesh, cam, ChannelSet::visibility(), &RasterOptions::default());
    let uv = fb.uv.as_ref().unwrap();
    let mut img = ColorImage::filled(cam.width, cam.height, background);
    for i in 0..fb.covered.len() {
        if fb.covered[i] {
            img.data[i] = atlas.sample_bilinear(uv[i][0], uv[i][1]);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::Rect;
    use crate::synth::{gen_city, gt_mesh, CityParams};

    fn flat_terrain() -> TriMesh {
        TriMesh::new(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(100.0, 0.0, 0.0),
                Vec3::new(100.0, 100.0, 0.0),
                Vec3::new(0.0, 100.0, 0.0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
    }

    fn small_city() -> crate::synth::BoxCity {
        gen_city(&CityParams {
            bounds: Rect {
                x0: 0.0,
                y0: 0.0,
                x1: 300.0,
                y1: 300.0,
            },
            count: 4,
            side_range: (30.0, 60.0),
            height_range: (10.0, 25.0),
            min_gap: 10.0,
            seed: 5,
            ..CityParams::default()
        })
        .unwrap()
    }

    #[test]
    fn flat_terrain_gets_single_top_chart() {
        let mesh = assign_uvs(&flat_terrain(), 256).unwrap();
        let uvs = mesh.uvs.as_ref().unwrap();
        assert_eq!(mesh.vertices.len(), 4);
        // All UVs in the upper half, affine in (x, y).
        for (v, uv) in mesh.vertices.iter().zip(uvs) {
            assert!(uv[1] >= 0.5);
            let expect_u = uvs[0][0] + (v.x - mesh.vertices[0].x) / 100.0 * (uvs[1][0] - uvs[0][0]) * 100.0
                / (mesh.vertices[1].x - mesh.vertices[0].x);
            assert!((uv[0] - expect_u).abs() < 1e-9);
        }
    }

    #[test]
    fn box_city_charts_do_not_overlap() {
        let city = small_city();
        let mesh = assign_uvs(&gt_mesh(&city), 512).unwrap();
        let uvs = mesh.uvs.as_ref().unwrap();

        // Rasterized occupancy per chart id: the shared top chart is id 0,
        // every steep triangle its own id.
        let size = 512usize;
        let mut owner = vec![u32::MAX; size * size];
        let mut clashes = 0;
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let n = {
                let a = mesh.vertices[tri[0] as usize];
                let b = mesh.vertices[tri[1] as usize];
                let c = mesh.vertices[tri[2] as usize];
                (b - a).cross(c - a).normalized()
            };
            let id = if n.z.abs() >= 0.5 { 0 } else { t as u32 + 1 };
            let p: Vec<[f64; 2]> = tri
                .iter()
                .map(|&i| {
                    let uv = uvs[i as usize];
                    [uv[0] * size as f64, uv[1] * size as f64]
                })
                .collect();
            let min_x = p.iter().map(|q| q[0]).fold(f64::INFINITY, f64::min).floor() as i64;
            let max_x = p.iter().map(|q| q[0]).fold(f64::NEG_INFINITY, f64::max).ceil() as i64;
            let min_y = p.iter().map(|q| q[1]).fold(f64::INFINITY, f64::min).floor() as i64;
            let max_y = p.iter().map(|q| q[1]).fold(f64::NEG_INFINITY, f64::max).ceil() as i64;
            let area2 = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1])
                - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
            if area2 == 0.0 {
                continue;
            }
            for py in min_y.max(0)..=max_y.min(size as i64 - 1) {
                for px in min_x.max(0)..=max_x.min(size as i64 - 1) {
                    let x = px as f64 + 0.5;
                    let y = py as f64 + 0.5;
                    let inv = 1.0 / area2;
                    let l0 = ((p[1][0] - x) * (p[2][1] - y) - (p[2][0] - x) * (p[1][1] - y)) * inv;
                    let l1 = ((p[2][0] - x) * (p[0][1] - y) - (p[0][0] - x) * (p[2][1] - y)) * inv;
                    let l2 = ((p[0][0] - x) * (p[1][1] - y) - (p[1][0] - x) * (p[0][1] - y)) * inv;
                    if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                        continue;
                    }
                    let i = (py * size as i64 + px) as usize;
                    if owner[i] != u32::MAX && owner[i] != id {
                        clashes += 1;
                    }
                    owner[i] = id;
                }
            }
        }
        assert_eq!(clashes, 0);
    }

    #[test]
    fn atlas_overflow_reported() {
        let city = small_city();
        // A 16-texel atlas cannot hold per-triangle wall charts.
        match assign_uvs(&gt_mesh(&city), 16) {
            Err(Error::AtlasOverflow { .. }) => {}
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    fn nadir_cam(center: Vec3, altitude: f64, size: usize) -> PinholeCamera {
        PinholeCamera::look_at(
            Vec3::new(center.x, center.y, altitude),
            center,
            Vec3::new(0.0, 1.0, 0.0),
            size,
            size,
            30.0,
            0.0,
        )
    }

    #[test]
    fn bake_reproduces_single_view() {
        // Near-orthographic nadir view of flat textured terrain: baking
        // then re-rendering must reproduce the view almost exactly.
        let mesh = assign_uvs(&flat_terrain(), 256).unwrap();
        let cam = nadir_cam(Vec3::new(50.0, 50.0, 0.0), 400.0, 192);
        // Smooth texture: hard edges would measure bilinear resampling, not
        // the baking machinery.
        let gt_atlas = paint_atlas(&mesh, 256, |p| {
            [
                (0.5 + 0.4 * (p.x * 0.11).sin()) as f32,
                (0.5 + 0.4 * (p.y * 0.13).cos()) as f32,
                (0.5 + 0.3 * ((p.x + p.y) * 0.07).sin()) as f32,
            ]
        })
        .unwrap();
        let view = render_with_atlas(&mesh, &gt_atlas, &cam, [0.0; 3]);
        let baked = bake_basic(
            &mesh,
            &[(view.clone(), cam.clone())],
            &BakeConfig {
                atlas_size: 256,
                epochs: 40,
                ..BakeConfig::default()
            },
        )
        .unwrap();
        let rerender = render_with_atlas(&mesh, &baked.atlas, &cam, [0.0; 3]);
        let psnr = crate::metrics::psnr(&rerender, &view, None).unwrap();
        assert!(psnr > 40.0, "psnr {psnr}");
    }

    #[test]
    fn two_views_average_under_mse() {
        let mesh = assign_uvs(&flat_terrain(), 64).unwrap();
        let cam = nadir_cam(Vec3::new(50.0, 50.0, 0.0), 300.0, 160);
        let img1 = ColorImage::filled(160, 160, [1.0, 0.0, 0.0]);
        let img2 = ColorImage::filled(160, 160, [0.0, 1.0, 0.0]);
        let baked = bake_basic(
            &mesh,
            &[(img1, cam.clone()), (img2, cam.clone())],
            &BakeConfig {
                atlas_size: 64,
                epochs: 60,
                ..BakeConfig::default()
            },
        )
        .unwrap();
        // Well-covered texels converge to the average color.
        let mut checked = 0;
        for t in 0..baked.atlas.rgb.len() {
            if baked.atlas.coverage[t] > 1.0 {
                let c = baked.atlas.rgb[t];
                assert!((c[0] - 0.5).abs() < 0.05, "{c:?}");
                assert!((c[1] - 0.5).abs() < 0.05, "{c:?}");
                checked += 1;
            }
        }
        assert!(checked > 100, "only {checked} well-covered texels");
    }

    #[test]
    fn bake_loss_non_increasing_and_recovers_gt() {
        let city = small_city();
        let mesh = assign_uvs(&gt_mesh(&city), 256).unwrap();
        let gt = paint_atlas(&mesh, 256, |p| city.gt_color(p)).unwrap();
        let center = Vec3::new(150.0, 150.0, 0.0);
        let cams: Vec<PinholeCamera> = [(150.0, -60.0), (150.0, 360.0), (-60.0, 150.0), (360.0, 150.0)]
            .iter()
            .map(|&(x, y)| {
                PinholeCamera::look_at(
                    Vec3::new(x, y, 320.0),
                    center,
                    Vec3::new(0.0, 0.0, 1.0),
                    160,
                    160,
                    50.0,
                    0.0,
                )
            })
            .collect();
        let views: Vec<(ColorImage, PinholeCamera)> = cams
            .iter()
            .map(|c| (render_with_atlas(&mesh, &gt, c, [0.0; 3]), c.clone()))
            .collect();
        let baked = bake_basic(
            &mesh,
            &views,
            &BakeConfig {
                atlas_size: 256,
                epochs: 30,
                ..BakeConfig::default()
            },
        )
        .unwrap();
        for w in baked.epoch_losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss increased: {w:?}");
        }
        // Texels observed during baking match the ground-truth atlas.
        let mut err = 0.0f64;
        let mut n = 0usize;
        for t in 0..gt.rgb.len() {
            if baked.atlas.coverage[t] > 0.5 && gt.coverage[t] > 0.5 {
                for ch in 0..3 {
                    err += (baked.atlas.rgb[t][ch] - gt.rgb[t][ch]).abs() as f64;
                }
                n += 3;
            }
        }
        let mae = err / n as f64;
        assert!(mae < 0.02, "mean absolute texel error {mae}");
    }

    #[test]
    fn unobserved_texels_bit_unchanged() {
        let mesh = assign_uvs(&flat_terrain(), 64).unwrap();
        let cam = nadir_cam(Vec3::new(50.0, 50.0, 0.0), 300.0, 32);
        let img = ColorImage::filled(32, 32, [0.3, 0.3, 0.3]);
        let baked = bake_basic(
            &mesh,
            &[(img, cam)],
            &BakeConfig {
                atlas_size: 64,
                epochs: 5,
                ..BakeConfig::default()
            },
        )
        .unwrap();
        let mut untouched = 0;
        for t in 0..baked.atlas.rgb.len() {
            if baked.atlas.coverage[t] == 0.0 {
                assert_eq!(baked.atlas.rgb[t], SENTINEL);
                untouched += 1;
            }
        }
        assert!(untouched > 0);
    }

    #[test]
    fn novel_view_grid_counts() {
        let cfg = RefineConfig {
            view_size: 64,
            ..RefineConfig::default()
        };
        // 300x300 bbox + 100 margin per side = 500 span; stride 150 →
        // ceil(500/150) = 4 sites per axis, 4 orientations each.
        let cams = novel_view_grid(
            Rect {
                x0: 0.0,
                y0: 0.0,
                x1: 300.0,
                y1: 300.0,
            },
            &cfg,
        );
        assert_eq!(cams.len(), 4 * 4 * 4);
        for c in &cams {
            assert!((c.forward().z + (cfg.pitch_deg.to_radians()).sin()).abs() < 1e-9);
        }

        // A tiny bbox collapses to one site with the four cardinal yaws.
        let one = novel_view_grid(
            Rect {
                x0: 0.0,
                y0: 0.0,
                x1: 1.0,
                y1: 1.0,
            },
            &RefineConfig {
                grid_margin: 0.0,
                view_size: 64,
                ..RefineConfig::default()
            },
        );
        assert_eq!(one.len(), 4);
        let fwds: Vec<_> = one.iter().map(|c| c.forward()).collect();
        assert!((fwds[0].y - fwds[2].y.abs()).abs() < 1e-9);
        assert!((fwds[1].x - fwds[3].x.abs()).abs() < 1e-9);
    }

    #[test]
    fn identity_refine_is_fixpoint() {
        let city = small_city();
        let mesh = assign_uvs(&gt_mesh(&city), 128).unwrap();
        let atlas = paint_atlas(&mesh, 128, |p| city.gt_color(p)).unwrap();
        let before = atlas.rgb.clone();
        let dir = tempfile::tempdir().unwrap();
        let cfg = RefineConfig {
            iterations: 1,
            epochs_per_iteration: 5,
            grid_stride: 300.0,
            grid_margin: 50.0,
            altitude: 350.0,
            view_size: 96,
            ..RefineConfig::default()
        };
        let out = refine(&mesh, atlas, &EnhancerHook::Identity, &cfg, dir.path()).unwrap();
        assert_eq!(out.completed_iterations, 1);
        assert!(out.aborted.is_none());
        // Rendered targets equal the renders, so the optimization starts at
        // zero residual: covered texels must not drift.
        let mut drift = 0.0f64;
        let mut n = 0usize;
        for t in 0..before.len() {
            if out.atlas.coverage[t] > 0.0 {
                for ch in 0..3 {
                    drift += (out.atlas.rgb[t][ch] - before[t][ch]).abs() as f64;
                }
                n += 3;
            }
        }
        let mean = drift / n as f64;
        assert!(mean < 1e-3, "mean texel drift {mean}");
    }

    #[test]
    fn external_hook_runs_and_fails_cleanly() {
        let img = ColorImage::filled(16, 16, [0.25, 0.5, 0.75]);
        let dir = tempfile::tempdir().unwrap();
        let copy = EnhancerHook::ExternalCommand {
            template: "cp {in} {out}".into(),
            timeout: std::time::Duration::from_secs(10),
        };
        let out = copy.apply(&img, 0, dir.path()).unwrap();
        assert_eq!(out.width, 16);
        for (a, b) in img.data.iter().zip(&out.data) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1.0 / 255.0 + 1e-6);
            }
        }

        let fail = EnhancerHook::ExternalCommand {
            template: "false".into(),
            timeout: std::time::Duration::from_secs(10),
        };
        assert!(matches!(
            fail.apply(&img, 3, dir.path()),
            Err(Error::HookFailed { view: 3, .. })
        ));
    }

    #[test]
    fn hook_failure_keeps_last_good_atlas() {
        let city = small_city();
        let mesh = assign_uvs(&gt_mesh(&city), 64).unwrap();
        let atlas = paint_atlas(&mesh, 64, |p| city.gt_color(p)).unwrap();
        let before = atlas.rgb.clone();
        let dir = tempfile::tempdir().unwrap();
        let cfg = RefineConfig {
            iterations: 2,
            epochs_per_iteration: 3,
            grid_stride: 400.0,
            grid_margin: 0.0,
            altitude: 300.0,
            view_size: 32,
            ..RefineConfig::default()
        };
        let hook = EnhancerHook::ExternalCommand {
            template: "false".into(),
            timeout: std::time::Duration::from_secs(5),
        };
        let out = refine(&mesh, atlas, &hook, &cfg, dir.path()).unwrap();
        assert_eq!(out.completed_iterations, 0);
        assert!(out.aborted.is_some());
        assert_eq!(out.atlas.rgb, before);
    }

    #[test]
    fn atlas_png_round_trip() {
        let mut atlas = TextureAtlas::new(16, 16);
        for y in 0..16 {
            for x in 0..16 {
                atlas.rgb[y * 16 + x] = [x as f32 / 15.0, y as f32 / 15.0, 0.25];
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("atlas.png");
        atlas.save_png(&path).unwrap();
        let back = TextureAtlas::load_png(&path).unwrap();
        for (a, b) in atlas.rgb.iter().zip(&back.rgb) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1.0 / 255.0 + 1e-6);
            }
        }
    }
}

#[cfg(test)]
mod sidecar_tests {
    use super::*;

    #[test]
    fn atlas_f32_sidecar_layout() {
        let atlas = TextureAtlas::new(8, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("atlas.f32");
        atlas.save_f32_sidecar(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"ATLF32_1");
        assert_eq!(bytes.len(), 16 + 8 * 4 * 3 * 4);
        // First texel is the sentinel, exactly.
        let r = f32::from_le_bytes(bytes[16..20].try_into().unwrap());
        let g = f32::from_le_bytes(bytes[20..24].try_into().unwrap());
        let b = f32::from_le_bytes(bytes[24..28].try_into().unwrap());
        assert_eq!([r, g, b], SENTINEL);
    }
}
