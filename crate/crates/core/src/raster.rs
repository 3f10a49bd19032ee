//! Deterministic software rasterizer: depth, height, normal, and
//! visibility (UV + triangle id + barycentric) buffers from meshes, plus
//! the orthographic top-down height rasterization.
//!
//! Interpolation is perspective correct (attributes and 1/w interpolated
//! linearly in screen space), hidden surfaces are removed with a z-buffer,
//! and depth ties break toward the lower triangle id. Pixel centers sit at
//! (x + 0.5, y + 0.5); coverage is inclusive on triangle edges. Rows are
//! processed in a fixed number of bands, so output is identical for any
//! thread count.

use crate::camera::PinholeCamera;
use crate::geom::TriMesh;
use crate::heightmap::HeightMap;
use crate::{Error, Result, Vec3};
use rayon::prelude::*;
use std::path::Path;

pub use crate::texture::render_with_atlas;

/// Which per-pixel payloads [`rasterize`] fills.
#[derive(Debug, Clone, Copy, Default)]
pub struct ChannelSet {
    pub height: bool,
    pub normal: bool,
    /// UV + triangle id + barycentrics of the source triangle.
    pub visibility: bool,
}

impl ChannelSet {
    pub fn visibility() -> Self {
        ChannelSet {
            visibility: true,
            ..Default::default()
        }
    }

    pub fn all() -> Self {
        ChannelSet {
            height: true,
            normal: true,
            visibility: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RasterOptions {
    pub cull_backfaces: bool,
    pub near: f64,
    pub far: f64,
}

impl Default for RasterOptions {
    fn default() -> Self {
        RasterOptions {
            cull_backfaces: false,
            near: 0.1,
            far: 1e8,
        }
    }
}

/// Per-pixel outputs of a rasterization pass. `depth` and `tri_id` are
/// always present; other planes exist when requested.
#[derive(Debug, Clone)]
pub struct FrameBuffer {
    pub width: usize,
    pub height: usize,
    pub covered: Vec<bool>,
    /// Camera-space forward distance.
    pub depth: Vec<f64>,
    pub tri_id: Vec<u32>,
    /// World z of the visible surface.
    pub height_z: Option<Vec<f64>>,
    /// Face normal of the visible triangle.
    pub normal: Option<Vec<[f64; 3]>>,
    pub uv: Option<Vec<[f64; 2]>>,
    /// Barycentrics with respect to the visible source triangle.
    pub bary: Option<Vec<[f64; 3]>>,
}

impl FrameBuffer {
    fn new(width: usize, height: usize, channels: ChannelSet) -> Self {
        let n = width * height;
        FrameBuffer {
            width,
            height,
            covered: vec![false; n],
            depth: vec![f64::INFINITY; n],
            tri_id: vec![u32::MAX; n],
            height_z: channels.height.then(|| vec![0.0; n]),
            normal: channels.normal.then(|| vec![[0.0; 3]; n]),
            uv: channels.visibility.then(|| vec![[0.0; 2]; n]),
            bary: channels.visibility.then(|| vec![[0.0; 3]; n]),
        }
    }

    pub fn coverage_count(&self) -> usize {
        self.covered.iter().filter(|&&c| c).count()
    }
}

#[derive(Clone, Copy)]
struct ClipVertex {
    /// Camera-space position.
    cam: Vec3,
    uv: [f64; 2],
    bary: [f64; 3],
    world: Vec3,
}

fn lerp_clip(a: &ClipVertex, b: &ClipVertex, t: f64) -> ClipVertex {
    ClipVertex {
        cam: a.cam + (b.cam - a.cam) * t,
        uv: [
            a.uv[0] + (b.uv[0] - a.uv[0]) * t,
            a.uv[1] + (b.uv[1] - a.uv[1]) * t,
        ],
        bary: [
            a.bary[0] + (b.bary[0] - a.bary[0]) * t,
            a.bary[1] + (b.bary[1] - a.bary[1]) * t,
            a.bary[2] + (b.bary[2] - a.bary[2]) * t,
        ],
        world: a.world + (b.world - a.world) * t,
    }
}

/// Clips a camera-space triangle against z >= near (Sutherland–Hodgman).
fn clip_near(tri: [ClipVertex; 3], near: f64) -> Vec<ClipVertex> {
    let mut out = Vec::with_capacity(4);
    for i in 0..3 {
        let cur = tri[i];
        let prev = tri[(i + 2) % 3];
        let cur_in = cur.cam.z >= near;
        let prev_in = prev.cam.z >= near;
        if cur_in != prev_in {
            let t = (near - prev.cam.z) / (cur.cam.z - prev.cam.z);
            out.push(lerp_clip(&prev, &cur, t));
        }
        if cur_in {
            out.push(cur);
        }
    }
    out
}

/// Rasterizes the mesh into the requested channels.
pub fn rasterize(
    mesh: &TriMesh,
    cam: &PinholeCamera,
    channels: ChannelSet,
    opts: &RasterOptions,
) -> FrameBuffer {
    let width = cam.width;
    let height = cam.height;
    let mut fb = FrameBuffer::new(width, height, channels);

    // Prepared screen triangles: (id, screen vertices, 1/w, attributes,
    // face normal).
    struct ScreenTri {
        id: u32,
        sx: [f64; 3],
        sy: [f64; 3],
        inv_w: [f64; 3],
        uv_w: [[f64; 2]; 3],
        bary_w: [[f64; 3]; 3],
        world_z_w: [f64; 3],
        normal: [f64; 3],
        min_x: usize,
        max_x: usize,
        min_y: usize,
        max_y: usize,
    }

    let focal = cam.focal_px();
    let to_cam = |p: Vec3| -> Vec3 {
        let d = p - cam.position;
        Vec3::new(
            cam.rotation[0][0] * d.x + cam.rotation[0][1] * d.y + cam.rotation[0][2] * d.z,
            cam.rotation[1][0] * d.x + cam.rotation[1][1] * d.y + cam.rotation[1][2] * d.z,
            cam.rotation[2][0] * d.x + cam.rotation[2][1] * d.y + cam.rotation[2][2] * d.z,
        )
    };

    let unit_bary = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut screen_tris: Vec<ScreenTri> = Vec::new();
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let n = mesh.triangle_normal(t);
        let verts: Vec<ClipVertex> = (0..3)
            .map(|k| {
                let vi = tri[k] as usize;
                ClipVertex {
                    cam: to_cam(mesh.vertices[vi]),
                    uv: mesh.uvs.as_ref().map(|u| u[vi]).unwrap_or([0.0, 0.0]),
                    bary: unit_bary[k],
                    world: mesh.vertices[vi],
                }
            })
            .collect();
        if verts.iter().all(|v| v.cam.z < opts.near) {
            continue;
        }
        let poly = clip_near([verts[0], verts[1], verts[2]], opts.near);
        if poly.len() < 3 {
            continue;
        }
        for k in 1..poly.len() - 1 {
            let tri3 = [poly[0], poly[k], poly[k + 1]];
            let mut sx = [0.0; 3];
            let mut sy = [0.0; 3];
            let mut inv_w = [0.0; 3];
            let mut uv_w = [[0.0; 2]; 3];
            let mut bary_w = [[0.0; 3]; 3];
            let mut world_z_w = [0.0; 3];
            for (i, v) in tri3.iter().enumerate() {
                sx[i] = focal * v.cam.x / v.cam.z + cam.cx;
                sy[i] = focal * v.cam.y / v.cam.z + cam.cy;
                let iw = 1.0 / v.cam.z;
                inv_w[i] = iw;
                uv_w[i] = [v.uv[0] * iw, v.uv[1] * iw];
                bary_w[i] = [v.bary[0] * iw, v.bary[1] * iw, v.bary[2] * iw];
                world_z_w[i] = v.world.z * iw;
            }
            let area2 = (sx[1] - sx[0]) * (sy[2] - sy[0]) - (sx[2] - sx[0]) * (sy[1] - sy[0]);
            if area2 == 0.0 {
                continue;
            }
            // Outward faces project clockwise in (u right, v down) screen
            // coordinates, which makes their signed area negative.
            if opts.cull_backfaces && area2 > 0.0 {
                continue;
            }
            let min_x = sx.iter().cloned().fold(f64::INFINITY, f64::min);
            let max_x = sx.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min_y = sy.iter().cloned().fold(f64::INFINITY, f64::min);
            let max_y = sy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max_x < 0.0 || max_y < 0.0 || min_x >= width as f64 || min_y >= height as f64 {
                continue;
            }
            screen_tris.push(ScreenTri {
                id: t as u32,
                sx,
                sy,
                inv_w,
                uv_w,
                bary_w,
                world_z_w,
                normal: [n.x, n.y, n.z],
                min_x: (min_x - 0.5).floor().max(0.0) as usize,
                max_x: ((max_x + 0.5).ceil() as usize).min(width - 1),
                min_y: (min_y - 0.5).floor().max(0.0) as usize,
                max_y: ((max_y + 0.5).ceil() as usize).min(height - 1),
            });
        }
    }

    // Fixed row bands; each band scans every triangle, so band outputs are
    // independent of scheduling.
    const BANDS: usize = 16;
    let bands = BANDS.min(height.max(1));
    let band_rows: Vec<(usize, usize)> = (0..bands)
        .map(|b| (b * height / bands, (b + 1) * height / bands))
        .collect();

    struct BandOut<'a> {
        covered: &'a mut [bool],
        depth: &'a mut [f64],
        tri_id: &'a mut [u32],
        height_z: Option<&'a mut [f64]>,
        normal: Option<&'a mut [[f64; 3]]>,
        uv: Option<&'a mut [[f64; 2]]>,
        bary: Option<&'a mut [[f64; 3]]>,
    }

    fn split_bands<'a, T>(
        mut rest: &'a mut [T],
        rows: &[(usize, usize)],
        width: usize,
    ) -> Vec<&'a mut [T]> {
        let mut out = Vec::with_capacity(rows.len());
        for &(lo, hi) in rows {
            let (a, b) = rest.split_at_mut((hi - lo) * width);
            out.push(a);
            rest = b;
        }
        out
    }

    let mut outs: Vec<BandOut> = {
        let covered = split_bands(&mut fb.covered, &band_rows, width);
        let depth = split_bands(&mut fb.depth, &band_rows, width);
        let tri_id = split_bands(&mut fb.tri_id, &band_rows, width);
        let mut height_z = fb
            .height_z
            .as_mut()
            .map(|v| split_bands(v, &band_rows, width).into_iter());
        let mut normal = fb
            .normal
            .as_mut()
            .map(|v| split_bands(v, &band_rows, width).into_iter());
        let mut uv = fb
            .uv
            .as_mut()
            .map(|v| split_bands(v, &band_rows, width).into_iter());
        let mut bary = fb
            .bary
            .as_mut()
            .map(|v| split_bands(v, &band_rows, width).into_iter());
        covered
            .into_iter()
            .zip(depth)
            .zip(tri_id)
            .map(|((covered, depth), tri_id)| BandOut {
                covered,
                depth,
                tri_id,
                height_z: height_z.as_mut().and_then(|it| it.next()),
                normal: normal.as_mut().and_then(|it| it.next()),
                uv: uv.as_mut().and_then(|it| it.next()),
                bary: bary.as_mut().and_then(|it| it.next()),
            })
            .collect()
    };

    band_rows
        .par_iter()
        .zip(outs.par_iter_mut())
        .for_each(|(&(row_lo, row_hi), out)| {
            for st in &screen_tris {
                if row_hi == row_lo || st.max_y < row_lo || st.min_y >= row_hi {
                    continue;
                }
                let area2 = (st.sx[1] - st.sx[0]) * (st.sy[2] - st.sy[0])
                    - (st.sx[2] - st.sx[0]) * (st.sy[1] - st.sy[0]);
                let inv_area = 1.0 / area2;
                let y0 = st.min_y.max(row_lo);
                let y1 = st.max_y.min(row_hi - 1);
                for py in y0..=y1 {
                    let cy = py as f64 + 0.5;
                    let row = (py - row_lo) * width;
                    for px in st.min_x..=st.max_x {
                        let cx = px as f64 + 0.5;
                        let e0 = (st.sx[2] - st.sx[1]) * (cy - st.sy[1])
                            - (st.sy[2] - st.sy[1]) * (cx - st.sx[1]);
                        let e1 = (st.sx[0] - st.sx[2]) * (cy - st.sy[2])
                            - (st.sy[0] - st.sy[2]) * (cx - st.sx[2]);
                        let e2 = (st.sx[1] - st.sx[0]) * (cy - st.sy[0])
                            - (st.sy[1] - st.sy[0]) * (cx - st.sx[0]);
                        let l0 = e0 * inv_area;
                        let l1 = e1 * inv_area;
                        let l2 = e2 * inv_area;
                        if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                            continue;
                        }
                        let inv_w = l0 * st.inv_w[0] + l1 * st.inv_w[1] + l2 * st.inv_w[2];
                        let depth = 1.0 / inv_w;
                        if depth > opts.far {
                            continue;
                        }
                        let idx = row + px;
                        let better = depth < out.depth[idx]
                            || (depth == out.depth[idx] && st.id < out.tri_id[idx]);
                        if !better {
                            continue;
                        }
                        out.covered[idx] = true;
                        out.depth[idx] = depth;
                        out.tri_id[idx] = st.id;
                        if let Some(hz) = &mut out.height_z {
                            let z = l0 * st.world_z_w[0] + l1 * st.world_z_w[1]
                                + l2 * st.world_z_w[2];
                            hz[idx] = z * depth;
                        }
                        if let Some(nm) = &mut out.normal {
                            nm[idx] = st.normal;
                        }
                        if let Some(uv) = &mut out.uv {
                            let u = l0 * st.uv_w[0][0] + l1 * st.uv_w[1][0] + l2 * st.uv_w[2][0];
                            let v = l0 * st.uv_w[0][1] + l1 * st.uv_w[1][1] + l2 * st.uv_w[2][1];
                            uv[idx] = [u * depth, v * depth];
                        }
                        if let Some(ba) = &mut out.bary {
                            let b0 =
                                l0 * st.bary_w[0][0] + l1 * st.bary_w[1][0] + l2 * st.bary_w[2][0];
                            let b1 =
                                l0 * st.bary_w[0][1] + l1 * st.bary_w[1][1] + l2 * st.bary_w[2][1];
                            let b2 =
                                l0 * st.bary_w[0][2] + l1 * st.bary_w[1][2] + l2 * st.bary_w[2][2];
                            let s = b0 + b1 + b2;
                            ba[idx] = if s != 0.0 {
                                [b0 / s, b1 / s, b2 / s]
                            } else {
                                [b0 * depth, b1 * depth, b2 * depth]
                            };
                        }
                    }
                }
            }
        });

    fb
}

/// Orthographic top-down rasterization of a normalized mesh onto an R×R
/// height map, keeping the per-pixel maximum z. Uncovered pixels are
/// invalid.
pub fn ortho_height_raster(mesh: &TriMesh, res: usize) -> HeightMap {
    let mut map = HeightMap::new_invalid(res);
    let scale = res as f64 / 2.0;
    let to_px = |c: f64| (c + 1.0) * scale;
    for tri in &mesh.triangles {
        let a = mesh.vertices[tri[0] as usize];
        let b = mesh.vertices[tri[1] as usize];
        let c = mesh.vertices[tri[2] as usize];
        let (ax, ay) = (to_px(a.x), to_px(a.y));
        let (bx, by) = (to_px(b.x), to_px(b.y));
        let (cx, cy) = (to_px(c.x), to_px(c.y));
        let area2 = (bx - ax) * (cy - ay) - (cx - ax) * (by - ay);
        if area2 == 0.0 {
            continue;
        }
        let inv = 1.0 / area2;
        let min_x = ax.min(bx).min(cx).floor().max(0.0) as usize;
        let max_x = (ax.max(bx).max(cx).ceil() as usize).min(res.saturating_sub(1));
        let min_y = ay.min(by).min(cy).floor().max(0.0) as usize;
        let max_y = (ay.max(by).max(cy).ceil() as usize).min(res.saturating_sub(1));
        for py in min_y..=max_y {
            let y = py as f64 + 0.5;
            for px in min_x..=max_x {
                let x = px as f64 + 0.5;
                let l0 = ((bx - x) * (cy - y) - (cx - x) * (by - y)) * inv;
                let l1 = ((cx - x) * (ay - y) - (ax - x) * (cy - y)) * inv;
                let l2 = ((ax - x) * (by - y) - (bx - x) * (ay - y)) * inv;
                if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                    continue;
                }
                let z = l0 * a.z + l1 * b.z + l2 * c.z;
                let idx = py * res + px;
                if !map.valid[idx] || z > map.heights[idx] {
                    map.heights[idx] = z;
                    map.valid[idx] = true;
                }
            }
        }
    }
    map
}

// ---------------------------------------------------------------------------
// Float RGB images + PNG I/O
// ---------------------------------------------------------------------------

/// RGB image with float channels in [0, 1]; row 0 is the top row.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f32; 3]>,
}

impl ColorImage {
    pub fn filled(width: usize, height: usize, color: [f32; 3]) -> Self {
        ColorImage {
            width,
            height,
            data: vec![color; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: [f32; 3]) {
        self.data[y * self.width + x] = c;
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let c = self.get(x, y);
                let px = image::Rgb([
                    (c[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (c[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (c[2].clamp(0.0, 1.0) * 255.0).round() as u8,
                ]);
                img.put_pixel(x as u32, y as u32, px);
            }
        }
        img.save(path.as_ref())?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x as u32, y as u32);
                data.push([
                    p[0] as f32 / 255.0,
                    p[1] as f32 / 255.0,
                    p[2] as f32 / 255.0,
                ]);
            }
        }
        Ok(ColorImage {
            width: w,
            height: h,
            data,
        })
    }
}

/// Face normals encoded to 8-bit RGB as `n * 0.5 + 0.5`; uncovered pixels
/// are black.
pub fn normal_to_image(fb: &FrameBuffer) -> Option<ColorImage> {
    let normal = fb.normal.as_ref()?;
    let mut img = ColorImage::filled(fb.width, fb.height, [0.0; 3]);
    for i in 0..normal.len() {
        if fb.covered[i] {
            img.data[i] = [
                (normal[i][0] * 0.5 + 0.5) as f32,
                (normal[i][1] * 0.5 + 0.5) as f32,
                (normal[i][2] * 0.5 + 0.5) as f32,
            ];
        }
    }
    Some(img)
}

/// UVs encoded to the red/green channels (u, v in [0,1]); blue flags
/// coverage.
pub fn uv_to_image(fb: &FrameBuffer) -> Option<ColorImage> {
    let uv = fb.uv.as_ref()?;
    let mut img = ColorImage::filled(fb.width, fb.height, [0.0; 3]);
    for i in 0..uv.len() {
        if fb.covered[i] {
            img.data[i] = [
                uv[i][0].clamp(0.0, 1.0) as f32,
                uv[i][1].clamp(0.0, 1.0) as f32,
                1.0,
            ];
        }
    }
    Some(img)
}

/// 16-bit grayscale PNG of a scalar plane, linearly mapped from
/// [min, max] over covered pixels; uncovered pixels write 0.
pub fn save_gray16_png(
    values: &[f64],
    covered: &[bool],
    width: usize,
    height: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (v, &c) in values.iter().zip(covered) {
        if c {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(width as u32, height as u32);
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let g = if covered[i] {
                (((values[i] - lo) / span) * 65535.0).round() as u16
            } else {
                0
            };
            img.put_pixel(x as u32, y as u32, image::Luma([g]));
        }
    }
    img.save(path.as_ref())?;
    Ok(())
}

/// Raw f32 sidecar: magic, dimensions, then row-major little-endian data.
pub fn save_f32_sidecar(
    values: &[f64],
    width: usize,
    height: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    use std::io::Write;
    let path = path.as_ref();
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let io_err = |e| Error::io(path, e);
    w.write_all(b"F32SIDE1").map_err(io_err)?;
    w.write_all(&(width as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(height as u32).to_le_bytes()).map_err(io_err)?;
    for &v in values {
        w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::TriMesh;

    fn simple_cam(width: usize, height: usize) -> PinholeCamera {
        PinholeCamera::look_at(
            Vec3::new(0.0, 0.0, 10.0),
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            width,
            height,
            60.0,
            0.0,
        )
    }

    fn big_quad(z: f64) -> TriMesh {
        let mut m = TriMesh::new(
            vec![
                Vec3::new(-20.0, -20.0, z),
                Vec3::new(20.0, -20.0, z),
                Vec3::new(20.0, 20.0, z),
                Vec3::new(-20.0, 20.0, z),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        );
        m.uvs = Some(vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]);
        m
    }

    #[test]
    fn full_screen_quad_covers_all_with_constant_depth() {
        let cam = simple_cam(64, 64);
        let fb = rasterize(&big_quad(0.0), &cam, ChannelSet::all(), &RasterOptions::default());
        assert_eq!(fb.coverage_count(), 64 * 64);
        for i in 0..fb.depth.len() {
            assert!((fb.depth[i] - 10.0).abs() < 1e-9);
            assert_eq!(fb.height_z.as_ref().unwrap()[i], 0.0);
        }
    }

    #[test]
    fn nearer_triangle_wins() {
        let cam = simple_cam(32, 32);
        let mut mesh = big_quad(0.0);
        let far = big_quad(-5.0);
        let base = mesh.vertices.len() as u32;
        mesh.vertices.extend(far.vertices);
        let mut uvs = mesh.uvs.take().unwrap();
        uvs.extend(far.uvs.unwrap());
        mesh.uvs = Some(uvs);
        for t in &far.triangles {
            mesh.triangles.push([t[0] + base, t[1] + base, t[2] + base]);
        }
        let fb = rasterize(&mesh, &cam, ChannelSet::all(), &RasterOptions::default());
        for i in 0..fb.depth.len() {
            assert!(fb.tri_id[i] < 2, "far quad visible at {i}");
        }
    }

    #[test]
    fn coverage_matches_brute_force_reference() {
        // An independent per-pixel point-in-triangle rasterizer with the
        // same projection and inclusion rule.
        let cam = simple_cam(48, 48);
        let mesh = {
            let mut m = TriMesh::new(
                vec![
                    Vec3::new(-6.0, -2.0, 0.0),
                    Vec3::new(4.0, -5.0, 1.0),
                    Vec3::new(5.0, 6.0, 2.0),
                    Vec3::new(-4.0, 5.0, -1.0),
                    Vec3::new(0.0, 0.0, 3.0),
                ],
                vec![[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4], [0, 1, 2]],
            );
            m.uvs = Some(vec![[0.0, 0.0]; 5]);
            m
        };
        let fb = rasterize(&mesh, &cam, ChannelSet::visibility(), &RasterOptions::default());

        for py in 0..48 {
            for px in 0..48 {
                let cx = px as f64 + 0.5;
                let cy = py as f64 + 0.5;
                let mut best: Option<(f64, u32)> = None;
                for (t, tri) in mesh.triangles.iter().enumerate() {
                    let p: Vec<_> = tri
                        .iter()
                        .map(|&v| cam.project(mesh.vertices[v as usize]))
                        .collect();
                    let area2 = (p[1].u - p[0].u) * (p[2].v - p[0].v)
                        - (p[2].u - p[0].u) * (p[1].v - p[0].v);
                    if area2 == 0.0 {
                        continue;
                    }
                    let l0 = ((p[2].u - p[1].u) * (cy - p[1].v) - (p[2].v - p[1].v) * (cx - p[1].u))
                        / area2;
                    let l1 = ((p[0].u - p[2].u) * (cy - p[2].v) - (p[0].v - p[2].v) * (cx - p[2].u))
                        / area2;
                    let l2 = ((p[1].u - p[0].u) * (cy - p[0].v) - (p[1].v - p[0].v) * (cx - p[0].u))
                        / area2;
                    if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                        continue;
                    }
                    let inv_w = l0 / p[0].depth + l1 / p[1].depth + l2 / p[2].depth;
                    let depth = 1.0 / inv_w;
                    let better = match best {
                        None => true,
                        Some((d, id)) => depth < d || (depth == d && (t as u32) < id),
                    };
                    if better {
                        best = Some((depth, t as u32));
                    }
                }
                let i = py * 48 + px;
                match best {
                    None => assert!(!fb.covered[i], "extra coverage at ({px},{py})"),
                    Some((d, id)) => {
                        assert!(fb.covered[i], "missing coverage at ({px},{py})");
                        assert_eq!(fb.tri_id[i], id, "id mismatch at ({px},{py})");
                        assert!((fb.depth[i] - d).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn perspective_correct_uv_on_deep_edge() {
        // A quad spanning depths 5 and 50; at the screen midpoint of that
        // span the perspective-correct u is (u0/z0 + u1/z1)/(1/z0 + 1/z1)
        // with the interpolation parameter from the projected positions,
        // not the affine average.
        let cam = PinholeCamera::look_at(
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(0.0, 0.0, -1.0),
            Vec3::new(0.0, 1.0, 0.0),
            256,
            256,
            60.0,
            0.0,
        );
        let z0 = -5.0;
        let z1 = -50.0;
        let mut mesh = TriMesh::new(
            vec![
                Vec3::new(-2.0, -20.0, z0),
                Vec3::new(-2.0, 20.0, z0),
                Vec3::new(-2.0, -20.0, z1),
                Vec3::new(-2.0, 20.0, z1),
            ],
            vec![[0, 2, 3], [0, 3, 1]],
        );
        mesh.uvs = Some(vec![[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [1.0, 0.0]]);
        let fb = rasterize(&mesh, &cam, ChannelSet::visibility(), &RasterOptions::default());

        // Pick the pixel at the screen midpoint between the projections of
        // (x=-2, y=0) at both depths.
        let p0 = cam.project(Vec3::new(-2.0, 0.0, z0));
        let p1 = cam.project(Vec3::new(-2.0, 0.0, z1));
        let mid_u = 0.5 * (p0.u + p1.u);
        let mid_v = 0.5 * (p0.v + p1.v);
        let (px, py) = (mid_u as usize, mid_v as usize);
        let idx = py * 256 + px;
        assert!(fb.covered[idx]);
        let got = fb.uv.as_ref().unwrap()[idx][0];

        // Closed form: screen-space parameter t=0.5 between the two
        // projected endpoints maps to u = (t/z1) / ((1-t)/z0 + t/z1)
        // (perspective-correct), up to half-pixel discretization.
        let w0 = p0.depth;
        let w1 = p1.depth;
        let t = ((px as f64 + 0.5) - p0.u) / (p1.u - p0.u);
        let expect = (t / w1) / ((1.0 - t) / w0 + t / w1);
        let affine = t;
        assert!((got - expect).abs() < 0.01, "got {got} expect {expect}");
        assert!((got - affine).abs() > 0.1, "interpolation looks affine");
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let cam = simple_cam(96, 64);
        let mesh = big_quad(0.0);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| rasterize(&mesh, &cam, ChannelSet::all(), &RasterOptions::default()))
        };
        let a = run(1);
        let b = run(3);
        assert_eq!(a.covered, b.covered);
        assert_eq!(a.depth, b.depth);
        assert_eq!(a.tri_id, b.tri_id);
        assert_eq!(a.uv, b.uv);
    }

    #[test]
    fn triangle_order_permutation_invariant_image() {
        let cam = simple_cam(64, 64);
        let mesh = {
            let mut m = big_quad(0.0);
            let near = big_quad(2.0);
            let base = m.vertices.len() as u32;
            m.vertices.extend(near.vertices);
            let mut uvs = m.uvs.take().unwrap();
            uvs.extend(near.uvs.unwrap());
            m.uvs = Some(uvs);
            for t in &near.triangles {
                m.triangles.push([t[0] + base, t[1] + base, t[2] + base]);
            }
            m
        };
        let mut permuted = mesh.clone();
        permuted.triangles.reverse();
        let a = rasterize(&mesh, &cam, ChannelSet::all(), &RasterOptions::default());
        let b = rasterize(&permuted, &cam, ChannelSet::all(), &RasterOptions::default());
        // Triangle ids differ under permutation, but the visible surface
        // (depth and height) must not.
        assert_eq!(a.depth, b.depth);
        assert_eq!(a.height_z, b.height_z);
    }

    #[test]
    fn backface_culling_hides_underside() {
        let cam = simple_cam(32, 32);
        let mesh = big_quad(0.0);
        // Viewed from below, the +z-facing quad is a back face.
        let below = PinholeCamera::look_at(
            Vec3::new(0.0, 0.0, -10.0),
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            32,
            32,
            60.0,
            0.0,
        );
        let opts = RasterOptions {
            cull_backfaces: true,
            ..Default::default()
        };
        assert_eq!(rasterize(&mesh, &below, ChannelSet::all(), &opts).coverage_count(), 0);
        assert_eq!(rasterize(&mesh, &cam, ChannelSet::all(), &opts).coverage_count(), 32 * 32);
    }

    #[test]
    fn ortho_flat_quad_fills_domain() {
        let mesh = TriMesh::new(
            vec![
                Vec3::new(-1.0, -1.0, 0.25),
                Vec3::new(1.0, -1.0, 0.25),
                Vec3::new(1.0, 1.0, 0.25),
                Vec3::new(-1.0, 1.0, 0.25),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        );
        let map = ortho_height_raster(&mesh, 32);
        assert_eq!(map.valid_count(), 32 * 32);
        for &h in &map.heights {
            assert!((h - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn ortho_box_roof_and_transitions() {
        // A raised square patch over ground; per-pixel max keeps the roof.
        let mut vertices = vec![
            Vec3::new(-1.0, -1.0, -0.5),
            Vec3::new(1.0, -1.0, -0.5),
            Vec3::new(1.0, 1.0, -0.5),
            Vec3::new(-1.0, 1.0, -0.5),
        ];
        let mut triangles = vec![[0u32, 1, 2], [0, 2, 3]];
        let roof = [
            Vec3::new(-0.25, -0.25, 0.5),
            Vec3::new(0.25, -0.25, 0.5),
            Vec3::new(0.25, 0.25, 0.5),
            Vec3::new(-0.25, 0.25, 0.5),
        ];
        let base = vertices.len() as u32;
        vertices.extend(roof);
        triangles.push([base, base + 1, base + 2]);
        triangles.push([base, base + 2, base + 3]);
        let mesh = TriMesh::new(vertices, triangles);

        let res = 64;
        let map = ortho_height_raster(&mesh, res);
        let px = 2.0 / res as f64;
        for v in 0..res {
            for u in 0..res {
                let x = map.coord(u);
                let y = map.coord(v);
                let inside = x.abs() < 0.25 - px && y.abs() < 0.25 - px;
                let outside = x.abs() > 0.25 + px || y.abs() > 0.25 + px;
                let h = map.get(u, v);
                if inside {
                    assert!((h - 0.5).abs() < 1e-9, "roof at ({x},{y}) = {h}");
                } else if outside {
                    assert!((h + 0.5).abs() < 1e-9, "ground at ({x},{y}) = {h}");
                }
            }
        }
    }

    #[test]
    fn ortho_agrees_with_height_grid_on_extracted_mesh() {
        let mut field = crate::field::ZMonoField::constant(24, 80.0, -0.4);
        for gy in 8..16 {
            for gx in 8..16 {
                field.grid[gy * 24 + gx] = 0.3;
            }
        }
        let res = 64;
        let mesh = crate::extract::extract_height_mesh(&field, res + 1);
        let raster = ortho_height_raster(&mesh, res);
        let direct = field.height_grid(res);
        let mut total = 0.0;
        let mut n = 0;
        for i in 0..res * res {
            if raster.valid[i] {
                total += (raster.heights[i] - direct.heights[i]).abs();
                n += 1;
            }
        }
        assert!(n > (res * res) * 9 / 10);
        let mean = total / n as f64;
        assert!(mean < 2.0 / res as f64, "mean |Δ| = {mean}");
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut img = ColorImage::filled(8, 4, [0.0; 3]);
        for y in 0..4 {
            for x in 0..8 {
                img.set(x, y, [x as f32 / 7.0, y as f32 / 3.0, 0.5]);
            }
        }
        img.save_png(&path).unwrap();
        let back = ColorImage::load_png(&path).unwrap();
        assert_eq!(back.width, 8);
        assert_eq!(back.height, 4);
        for (a, b) in img.data.iter().zip(&back.data) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1.0 / 255.0 + 1e-6);
            }
        }
    }
}
