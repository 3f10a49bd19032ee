//! Synthetic oracle scenes: procedural box cities with exact ground truth
//! (height function, watertight mesh, surface colors) and satellite-MVS
//! style point sampling that reproduces the facade deficiency of top-down
//! capture (dense on rooftops and ground, empty on walls by default).

use crate::fit::Rect;
use crate::geom::{Frame, PointCloud, TriMesh, Vec3};
use crate::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Building {
    pub footprint: Rect,
    /// Absolute roof elevation, world meters.
    pub roof_z: f64,
    pub color: [f32; 3],
}

/// Flat-ground scene with axis-aligned extruded boxes. Footprints never
/// overlap; the generator keeps a positive gap between them.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxCity {
    pub bounds: Rect,
    pub ground_z: f64,
    pub boxes: Vec<Building>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct CityParams {
    pub bounds: Rect,
    pub ground_z: f64,
    pub count: usize,
    /// Footprint side range, meters.
    pub side_range: (f64, f64),
    /// Building height range above ground, meters.
    pub height_range: (f64, f64),
    /// Minimum clearance between footprints and to the scene edge.
    pub min_gap: f64,
    pub seed: u64,
}

impl Default for CityParams {
    fn default() -> Self {
        CityParams {
            bounds: Rect {
                x0: 0.0,
                y0: 0.0,
                x1: 1000.0,
                y1: 1000.0,
            },
            ground_z: 0.0,
            count: 20,
            side_range: (30.0, 80.0),
            height_range: (8.0, 18.0),
            min_gap: 8.0,
            seed: 0,
        }
    }
}

fn rects_gap(a: &Rect, b: &Rect) -> f64 {
    let dx = (a.x0 - b.x1).max(b.x0 - a.x1).max(0.0);
    let dy = (a.y0 - b.y1).max(b.y0 - a.y1).max(0.0);
    dx.max(dy)
}

const PALETTE: [[f32; 3]; 8] = [
    [0.78, 0.29, 0.24],
    [0.26, 0.46, 0.70],
    [0.36, 0.62, 0.32],
    [0.80, 0.61, 0.22],
    [0.52, 0.36, 0.63],
    [0.25, 0.60, 0.60],
    [0.72, 0.45, 0.58],
    [0.55, 0.55, 0.30],
];

/// Rejection-samples non-overlapping footprints. Deterministic per seed.
/// Gives up on a placement after a bounded number of attempts and returns
/// however many boxes fit (with a warning).
pub fn gen_city(params: &CityParams) -> Result<BoxCity> {
    let (w0, w1) = params.side_range;
    let (h0, h1) = params.height_range;
    if !(w0 > 0.0 && w1 >= w0 && h0 > 0.0 && h1 >= h0 && params.min_gap >= 0.0) {
        return Err(Error::Config("invalid city parameter ranges".into()));
    }
    let (span_x, span_y) = params.bounds.span();
    if span_x <= 2.0 * (w1 + params.min_gap) || span_y <= 2.0 * (w1 + params.min_gap) {
        return Err(Error::Config("scene bounds too small for the box sizes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut boxes: Vec<Building> = Vec::new();
    let mut attempts = 0usize;
    let max_attempts = params.count * 200;
    while boxes.len() < params.count && attempts < max_attempts {
        attempts += 1;
        let w = rng.gen_range(w0..=w1);
        let h = rng.gen_range(w0..=w1);
        let margin = params.min_gap;
        let x0 = rng.gen_range(params.bounds.x0 + margin..params.bounds.x1 - margin - w);
        let y0 = rng.gen_range(params.bounds.y0 + margin..params.bounds.y1 - margin - h);
        let rect = Rect {
            x0,
            y0,
            x1: x0 + w,
            y1: y0 + h,
        };
        if boxes.iter().all(|b| rects_gap(&b.footprint, &rect) >= params.min_gap) {
            let height = rng.gen_range(h0..=h1);
            let color = PALETTE[boxes.len() % PALETTE.len()];
            boxes.push(Building {
                footprint: rect,
                roof_z: params.ground_z + height,
                color,
            });
        }
    }
    if boxes.len() < params.count {
        log::warn!(
            "placed only {} of {} requested boxes after {} attempts",
            boxes.len(),
            params.count,
            attempts
        );
    }
    Ok(BoxCity {
        bounds: params.bounds,
        ground_z: params.ground_z,
        boxes,
        seed: params.seed,
    })
}

impl BoxCity {
    /// The exact single-valued height function: roof over footprints,
    /// ground elsewhere.
    pub fn gt_height(&self, x: f64, y: f64) -> f64 {
        let mut h = self.ground_z;
        for b in &self.boxes {
            if b.footprint.contains(x, y) && b.roof_z > h {
                h = b.roof_z;
            }
        }
        h
    }

    /// Surface color at a ground-truth surface point: roof and facade get
    /// the building color (facades darkened), the ground a world-space
    /// checker.
    pub fn gt_color(&self, p: Vec3) -> [f32; 3] {
        for b in &self.boxes {
            let f = &b.footprint;
            let eps = 1e-6;
            if p.x >= f.x0 - eps && p.x <= f.x1 + eps && p.y >= f.y0 - eps && p.y <= f.y1 + eps {
                if p.z >= b.roof_z - 1e-3 {
                    return b.color;
                }
                if p.z > self.ground_z + 1e-3 {
                    return [b.color[0] * 0.55, b.color[1] * 0.55, b.color[2] * 0.55];
                }
            }
        }
        // 10 m ground checker.
        let cx = (p.x / 10.0).floor() as i64;
        let cy = (p.y / 10.0).floor() as i64;
        if (cx + cy).rem_euclid(2) == 0 {
            [0.68, 0.68, 0.66]
        } else {
            [0.55, 0.56, 0.55]
        }
    }
}

// ---------------------------------------------------------------------------
// Exact mesh
// ---------------------------------------------------------------------------

/// Exact watertight mesh of the city: a slab whose top surface is the
/// ground/roof height function with vertical facades, closed by boundary
/// skirts and a bottom plate.
///
/// Built on the tensor grid of all footprint edge coordinates, with wall
/// quads split at every global roof level, so all coincident geometry
/// shares exact vertex keys and the result passes the index-level
/// watertight check.
pub fn gt_mesh(city: &BoxCity) -> TriMesh {
    let mut xs: Vec<f64> = vec![city.bounds.x0, city.bounds.x1];
    let mut ys: Vec<f64> = vec![city.bounds.y0, city.bounds.y1];
    for b in &city.boxes {
        xs.extend([b.footprint.x0, b.footprint.x1]);
        ys.extend([b.footprint.y0, b.footprint.y1]);
    }
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs.dedup();
    ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ys.dedup();

    let z_bottom = city.ground_z - 0.02 * (city.bounds.span().0.max(city.bounds.span().1));
    // Global z levels: bottom, ground, every distinct roof.
    let mut levels: Vec<f64> = vec![z_bottom, city.ground_z];
    levels.extend(city.boxes.iter().map(|b| b.roof_z));
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    levels.dedup();
    let level_index: HashMap<u64, usize> = levels
        .iter()
        .enumerate()
        .map(|(i, z)| (z.to_bits(), i))
        .collect();

    let nx = xs.len() - 1;
    let ny = ys.len() - 1;
    // Top level index per cell.
    let mut cell_level = vec![0usize; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let cx = 0.5 * (xs[i] + xs[i + 1]);
            let cy = 0.5 * (ys[j] + ys[j + 1]);
            let h = city.gt_height(cx, cy);
            cell_level[j * nx + i] = level_index[&h.to_bits()];
        }
    }

    let mut vertices: Vec<Vec3> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    let mut vertex_ids: HashMap<(usize, usize, usize), u32> = HashMap::new();
    let mut vid = |vertices: &mut Vec<Vec3>, ix: usize, iy: usize, iz: usize| -> u32 {
        *vertex_ids.entry((ix, iy, iz)).or_insert_with(|| {
            vertices.push(Vec3::new(xs[ix], ys[iy], levels[iz]));
            vertices.len() as u32 - 1
        })
    };

    // Horizontal faces: cell tops and the bottom plate.
    for j in 0..ny {
        for i in 0..nx {
            let top = cell_level[j * nx + i];
            let v00 = vid(&mut vertices, i, j, top);
            let v10 = vid(&mut vertices, i + 1, j, top);
            let v11 = vid(&mut vertices, i + 1, j + 1, top);
            let v01 = vid(&mut vertices, i, j + 1, top);
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
            let b00 = vid(&mut vertices, i, j, 0);
            let b10 = vid(&mut vertices, i + 1, j, 0);
            let b11 = vid(&mut vertices, i + 1, j + 1, 0);
            let b01 = vid(&mut vertices, i, j + 1, 0);
            triangles.push([b00, b11, b10]);
            triangles.push([b00, b01, b11]);
        }
    }

    // Wall between two columns sharing a grid segment. `a`/`b` are the
    // segment endpoints (grid indices); the wall spans level indices
    // (lo, hi]. Segment direction is chosen so the outward normal points
    // away from the taller column.
    let mut wall = |vertices: &mut Vec<Vec3>,
                    a: (usize, usize),
                    b: (usize, usize),
                    lo: usize,
                    hi: usize| {
        for z in lo..hi {
            let a0 = vid(vertices, a.0, a.1, z);
            let b0 = vid(vertices, b.0, b.1, z);
            let b1 = vid(vertices, b.0, b.1, z + 1);
            let a1 = vid(vertices, a.0, a.1, z + 1);
            triangles.push([a0, b0, b1]);
            triangles.push([a0, b1, a1]);
        }
    };

    // The wall normal is the segment direction rotated clockwise in the
    // xy plane. For a wall on x = xs[i] between west cell w and east cell
    // e with e taller, the normal must be -x, so the segment runs +y→-y
    // from the east side's perspective... concretely: normal(-x) needs
    // segment direction d = (0, -1) rotated +90° = ... emit with endpoints
    // ordered so that rotate_cw(b - a) points from the taller toward the
    // shorter column.
    for j in 0..ny {
        for i in 0..=nx {
            let west = if i > 0 { cell_level[j * nx + i - 1] } else { 0 };
            let east = if i < nx { cell_level[j * nx + i] } else { 0 };
            if west == east {
                continue;
            }
            let (lo, hi) = (west.min(east), west.max(east));
            // Wall plane x = xs[i], segment endpoints (i, j) -> (i, j+1).
            // rotate_cw(d) for d = (0, +1) is (+1, 0): outward +x, correct
            // when the west column is taller; otherwise flip.
            if west > east {
                wall(&mut vertices, (i, j), (i, j + 1), lo, hi);
            } else {
                wall(&mut vertices, (i, j + 1), (i, j), lo, hi);
            }
        }
    }
    for i in 0..nx {
        for j in 0..=ny {
            let south = if j > 0 { cell_level[(j - 1) * nx + i] } else { 0 };
            let north = if j < ny { cell_level[j * nx + i] } else { 0 };
            if south == north {
                continue;
            }
            let (lo, hi) = (south.min(north), south.max(north));
            // Wall plane y = ys[j], segment (i, j) -> (i+1, j):
            // rotate_cw((1, 0)) = (0, -1): outward -y, correct when the
            // north column is taller.
            if north > south {
                wall(&mut vertices, (i, j), (i + 1, j), lo, hi);
            } else {
                wall(&mut vertices, (i + 1, j), (i, j), lo, hi);
            }
        }
    }

    TriMesh::new(vertices, triangles)
}

// ---------------------------------------------------------------------------
// MVS-style sampling
// ---------------------------------------------------------------------------

/// Surface sampling densities and degradations emulating satellite MVS.
#[derive(Debug, Clone)]
pub struct MvsSamplingProfile {
    /// Points per square meter on rooftops.
    pub roof_density: f64,
    /// Points per square meter on open ground.
    pub ground_density: f64,
    /// Points per square meter on facades; 0 reproduces the top-down
    /// capture hole.
    pub facade_density: f64,
    /// Gaussian height noise, meters.
    pub sigma_z: f64,
    /// Fraction of points dropped uniformly.
    pub dropout: f64,
}

impl Default for MvsSamplingProfile {
    fn default() -> Self {
        MvsSamplingProfile {
            roof_density: 1.0,
            ground_density: 1.0,
            facade_density: 0.0,
            sigma_z: 0.2,
            dropout: 0.0,
        }
    }
}

impl MvsSamplingProfile {
    pub fn validate(&self) -> Result<()> {
        let ok = self.roof_density >= 0.0
            && self.ground_density >= 0.0
            && self.facade_density >= 0.0
            && self.sigma_z >= 0.0
            && (0.0..=1.0).contains(&self.dropout);
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid sampling profile".into()))
        }
    }
}

fn poisson_count(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as usize).unwrap_or(0)
}

/// Samples an MVS-like cloud: Poisson-count area sampling per surface at
/// the profile densities, Gaussian z-noise, uniform dropout. Each surface
/// draws from its own seeded stream, so outputs are deterministic and
/// insensitive to box order changes elsewhere.
pub fn sample_mvs(city: &BoxCity, profile: &MvsSamplingProfile, seed: u64) -> Result<PointCloud> {
    profile.validate()?;
    let mut points: Vec<Vec3> = Vec::new();
    let stream = |kind: u64, index: u64| -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(
            seed ^ kind.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03),
        )
    };

    // Ground: sample over the full bounds, rejecting footprint hits. The
    // acceptance rate keeps the density correct on open ground.
    {
        let mut rng = stream(1, 0);
        let (sx, sy) = city.bounds.span();
        let n = poisson_count(&mut rng, profile.ground_density * sx * sy);
        for _ in 0..n {
            let x = rng.gen_range(city.bounds.x0..city.bounds.x1);
            let y = rng.gen_range(city.bounds.y0..city.bounds.y1);
            let noise: f64 = if profile.sigma_z > 0.0 {
                rng.sample::<f64, _>(rand_distr::StandardNormal) * profile.sigma_z
            } else {
                0.0
            };
            if city.boxes.iter().any(|b| b.footprint.contains(x, y)) {
                continue;
            }
            points.push(Vec3::new(x, y, city.ground_z + noise));
        }
    }

    for (i, b) in city.boxes.iter().enumerate() {
        // Roof.
        let mut rng = stream(2, i as u64);
        let (w, h) = b.footprint.span();
        let n = poisson_count(&mut rng, profile.roof_density * w * h);
        for _ in 0..n {
            let x = rng.gen_range(b.footprint.x0..b.footprint.x1);
            let y = rng.gen_range(b.footprint.y0..b.footprint.y1);
            let noise: f64 = if profile.sigma_z > 0.0 {
                rng.sample::<f64, _>(rand_distr::StandardNormal) * profile.sigma_z
            } else {
                0.0
            };
            points.push(Vec3::new(x, y, b.roof_z + noise));
        }
        // Facades (default density 0).
        if profile.facade_density > 0.0 {
            let mut rng = stream(3, i as u64);
            let height = b.roof_z - city.ground_z;
            let walls = [
                (Vec3::new(b.footprint.x0, b.footprint.y0, 0.0), Vec3::new(1.0, 0.0, 0.0), w),
                (Vec3::new(b.footprint.x0, b.footprint.y1, 0.0), Vec3::new(1.0, 0.0, 0.0), w),
                (Vec3::new(b.footprint.x0, b.footprint.y0, 0.0), Vec3::new(0.0, 1.0, 0.0), h),
                (Vec3::new(b.footprint.x1, b.footprint.y0, 0.0), Vec3::new(0.0, 1.0, 0.0), h),
            ];
            for (origin, dir, len) in walls {
                let n = poisson_count(&mut rng, profile.facade_density * len * height);
                for _ in 0..n {
                    let along = rng.gen_range(0.0..len);
                    let up = rng.gen_range(0.0..height);
                    let noise: f64 = if profile.sigma_z > 0.0 {
                        rng.sample::<f64, _>(rand_distr::StandardNormal) * profile.sigma_z
                    } else {
                        0.0
                    };
                    let p = origin + dir * along;
                    points.push(Vec3::new(p.x, p.y, city.ground_z + up + noise));
                }
            }
        }
    }

    if profile.dropout > 0.0 {
        let mut rng = stream(4, 0);
        points.retain(|_| rng.gen_range(0.0..1.0) >= profile.dropout);
    }

    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(PointCloud::new(points, Frame::World))
}

// ---------------------------------------------------------------------------
// Ground-truth rendering
// ---------------------------------------------------------------------------

/// The visible ground-truth surface (top + facades) charted and painted
/// with the city's exact colors, ready for rendering.
pub fn gt_textured(
    city: &BoxCity,
    atlas_size: usize,
) -> Result<(TriMesh, crate::texture::TextureAtlas)> {
    let mesh = gt_mesh(city);
    let keep: Vec<[u32; 3]> = mesh
        .triangles
        .iter()
        .filter(|t| {
            t.iter()
                .all(|&v| mesh.vertices[v as usize].z >= city.ground_z - 1e-9)
        })
        .copied()
        .collect();
    let mut visible = TriMesh {
        vertices: mesh.vertices.clone(),
        triangles: keep,
        uvs: None,
    };
    visible.compact();
    let charted = crate::texture::assign_uvs(&visible, atlas_size)?;
    let atlas = crate::texture::paint_atlas(&charted, atlas_size, |p| city.gt_color(p))?;
    Ok((charted, atlas))
}

/// Renders ground-truth-textured views from the given cameras. Feeds the
/// texture-optimization tests with views whose exact atlas is known.
pub fn render_gt_views(
    city: &BoxCity,
    cameras: &[crate::camera::PinholeCamera],
    atlas_size: usize,
) -> Result<Vec<crate::raster::ColorImage>> {
    let (mesh, atlas) = gt_textured(city, atlas_size)?;
    Ok(cameras
        .iter()
        .map(|cam| crate::texture::render_with_atlas(&mesh, &atlas, cam, [0.0; 3]))
        .collect())
}

// ---------------------------------------------------------------------------
// Scene files
// ---------------------------------------------------------------------------

const SCENE_HEADER: &str = "BOXCITY 1";

/// Plain-text scene description; floats use the shortest round-trip
/// representation, so a write→read cycle is lossless.
pub fn write_scene(city: &BoxCity, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    writeln!(w, "{SCENE_HEADER}").map_err(io_err)?;
    writeln!(w, "seed {}", city.seed).map_err(io_err)?;
    writeln!(
        w,
        "bounds {} {} {} {}",
        city.bounds.x0, city.bounds.y0, city.bounds.x1, city.bounds.y1
    )
    .map_err(io_err)?;
    writeln!(w, "ground {}", city.ground_z).map_err(io_err)?;
    for b in &city.boxes {
        writeln!(
            w,
            "box {} {} {} {} {} {} {} {}",
            b.footprint.x0,
            b.footprint.y0,
            b.footprint.x1,
            b.footprint.y1,
            b.roof_z,
            b.color[0],
            b.color[1],
            b.color[2]
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

pub fn read_scene(path: impl AsRef<Path>) -> Result<BoxCity> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut bounds = None;
    let mut ground = None;
    let mut seed = 0u64;
    let mut boxes = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let err = |msg: &str| Error::SceneFile {
            line: i + 1,
            msg: msg.to_string(),
        };
        if i == 0 {
            if line.trim() != SCENE_HEADER {
                return Err(err("bad header, expected 'BOXCITY 1'"));
            }
            continue;
        }
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("seed") => {
                seed = tok
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| err("bad seed"))?;
            }
            Some("bounds") => {
                let v: Vec<f64> = tok.filter_map(|t| t.parse().ok()).collect();
                if v.len() != 4 {
                    return Err(err("bounds needs 4 numbers"));
                }
                bounds = Some(Rect {
                    x0: v[0],
                    y0: v[1],
                    x1: v[2],
                    y1: v[3],
                });
            }
            Some("ground") => {
                ground = Some(
                    tok.next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| err("bad ground"))?,
                );
            }
            Some("box") => {
                let v: Vec<f64> = tok.filter_map(|t| t.parse().ok()).collect();
                if v.len() != 8 {
                    return Err(err("box needs 8 numbers"));
                }
                boxes.push(Building {
                    footprint: Rect {
                        x0: v[0],
                        y0: v[1],
                        x1: v[2],
                        y1: v[3],
                    },
                    roof_z: v[4],
                    color: [v[5] as f32, v[6] as f32, v[7] as f32],
                });
            }
            Some(other) => return Err(err(&format!("unknown record '{other}'"))),
            None => continue,
        }
    }
    Ok(BoxCity {
        bounds: bounds.ok_or(Error::SceneFile {
            line: 0,
            msg: "missing bounds".into(),
        })?,
        ground_z: ground.ok_or(Error::SceneFile {
            line: 0,
            msg: "missing ground".into(),
        })?,
        boxes,
        seed,
    })
}
