//! Mesh extraction from the learned field: marching cubes over sampled SDF
//! grids, the direct 2.5D height-mesh triangulation, the naive
//! voxel-occupancy baseline, watertightness checks, and merging of tiled
//! results into one world-space mesh.

use crate::field::ZMonoField;
use crate::fit::{FittedTile, Rect};
use crate::geom::{Frame, NormalizeTransform, PointCloud, TriMesh, Vec3};
use crate::{Error, Result};
use once_cell::sync::Lazy;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Regular SDF sample grid. Samples sit at cell centers:
/// `pos(i) = lo + (i + 0.5) * (hi - lo) / res` per axis.
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    pub res: usize,
    /// Index `(i * res + j) * res + k` for sample `(i, j, k)` = (x, y, z).
    pub values: Vec<f64>,
    pub lo: Vec3,
    pub hi: Vec3,
}

impl VoxelGrid {
    pub fn position(&self, i: i64, j: i64, k: i64) -> Vec3 {
        let step = |lo: f64, hi: f64| (hi - lo) / self.res as f64;
        Vec3::new(
            self.lo.x + (i as f64 + 0.5) * step(self.lo.x, self.hi.x),
            self.lo.y + (j as f64 + 0.5) * step(self.lo.y, self.hi.y),
            self.lo.z + (k as f64 + 0.5) * step(self.lo.z, self.hi.z),
        )
    }

    /// Sample value with a virtual positive shell outside the grid, so that
    /// surfaces exiting the domain are capped and meshes close.
    #[inline]
    pub fn value_padded(&self, i: i64, j: i64, k: i64) -> f64 {
        let r = self.res as i64;
        if i < 0 || j < 0 || k < 0 || i >= r || j >= r || k >= r {
            OUTSIDE
        } else {
            self.values[((i as usize * self.res) + j as usize) * self.res + k as usize]
        }
    }
}

/// Virtual shell value; large so cap vertices hug the boundary samples.
const OUTSIDE: f64 = 1e9;

/// Samples the field on a `res^3` grid over the full normalized cube.
/// Values are nondecreasing along k for every column by construction.
pub fn sample_sdf(field: &ZMonoField, res: usize) -> VoxelGrid {
    sample_sdf_rect(field, res, Rect { x0: -1.0, y0: -1.0, x1: 1.0, y1: 1.0 })
}

/// Samples the field over a sub-rectangle of the normalized ground plane
/// (full z range). Used by the tiled marching-cubes path, which samples
/// each tile only over its core region.
pub fn sample_sdf_rect(field: &ZMonoField, res: usize, rect: Rect) -> VoxelGrid {
    assert!(res >= 8, "voxel resolution must be at least 8");
    let lo = Vec3::new(rect.x0, rect.y0, -1.0);
    let hi = Vec3::new(rect.x1, rect.y1, 1.0);
    let mut values = vec![0.0; res * res * res];
    let step_x = (hi.x - lo.x) / res as f64;
    let step_y = (hi.y - lo.y) / res as f64;
    let step_z = 2.0 / res as f64;
    for i in 0..res {
        let x = lo.x + (i as f64 + 0.5) * step_x;
        for j in 0..res {
            let y = lo.y + (j as f64 + 0.5) * step_y;
            let nw = field.neighbor_weights(x, y).expect("in-domain");
            let heights = field.window_heights(nw.base);
            let row = (i * res + j) * res;
            for k in 0..res {
                let z = -1.0 + (k as f64 + 0.5) * step_z;
                values[row + k] =
                    crate::field::eval_curve(&nw.weights, &heights, field.sharpness, z);
            }
        }
    }
    VoxelGrid { res, values, lo, hi }
}

// ---------------------------------------------------------------------------
// Marching cubes
// ---------------------------------------------------------------------------

/// Cube corner `c` has offset bits (x, y, z) = (c&1, c>>1&1, c>>2&1).
const EDGES: [(u8, u8); 12] = [
    (0, 1), (2, 3), (4, 5), (6, 7), // x-aligned
    (0, 2), (1, 3), (4, 6), (5, 7), // y-aligned
    (0, 4), (1, 5), (2, 6), (3, 7), // z-aligned
];

fn corner_offset(c: u8) -> (i64, i64, i64) {
    ((c & 1) as i64, ((c >> 1) & 1) as i64, ((c >> 2) & 1) as i64)
}

/// A face as a cyclic corner quad, counterclockwise when viewed from
/// outside the cube, plus the edge index between consecutive corners.
struct Face {
    corners: [u8; 4],
    edges: [u8; 4],
}

fn build_faces() -> Vec<Face> {
    let edge_of = |a: u8, b: u8| -> u8 {
        EDGES
            .iter()
            .position(|&(u, v)| (u, v) == (a.min(b), a.max(b)))
            .expect("corner pair is an edge") as u8
    };
    let mut faces = Vec::new();
    for axis in 0..3u8 {
        for side in 0..2u8 {
            let b = (axis + 1) % 3;
            let c = (axis + 2) % 3;
            // (b, c) in CCW order for a normal along +axis.
            let order = [(0u8, 0u8), (1, 0), (1, 1), (0, 1)];
            let mut corners = [0u8; 4];
            for (slot, &(vb, vc)) in order.iter().enumerate() {
                corners[slot] = (side << axis) | (vb << b) | (vc << c);
            }
            if side == 0 {
                corners.reverse(); // outward normal is -axis
            }
            let edges = [
                edge_of(corners[0], corners[1]),
                edge_of(corners[1], corners[2]),
                edge_of(corners[2], corners[3]),
                edge_of(corners[3], corners[0]),
            ];
            faces.push(Face { corners, edges });
        }
    }
    faces
}

/// The 256-case triangle table, generated once by tracing directed edge
/// cycles across faces. On each face, every maximal run of inside corners
/// contributes one segment directed entry→exit (walking the face's CCW
/// corner cycle); following segments across faces yields polygons whose fan
/// triangulation winds with normals toward the positive (outside) side.
/// Ambiguous faces resolve consistently because the rule is a function of
/// the face's corner signs alone.
static TRI_TABLE: Lazy<Vec<Vec<[u8; 3]>>> = Lazy::new(|| {
    let faces = build_faces();
    let mut table = Vec::with_capacity(256);
    for config in 0..256u16 {
        let inside = |c: u8| (config >> c) & 1 == 1;
        // next_edge[e] = the edge this face-segment exits through after
        // entering at cut edge e. Every cut edge is the entry of exactly
        // one segment and the exit of exactly one.
        let mut next_edge = [u8::MAX; 12];
        for face in &faces {
            for s in 0..4 {
                let a = face.corners[s];
                let b = face.corners[(s + 1) % 4];
                if !inside(a) && inside(b) {
                    // Run of inside corners starts at s+1; walk to its end.
                    let mut t = (s + 1) % 4;
                    while inside(face.corners[(t + 1) % 4]) {
                        t = (t + 1) % 4;
                    }
                    let entry = face.edges[s];
                    let exit = face.edges[t];
                    debug_assert_eq!(next_edge[entry as usize], u8::MAX);
                    next_edge[entry as usize] = exit;
                }
            }
        }
        let mut tris: Vec<[u8; 3]> = Vec::new();
        let mut visited = [false; 12];
        for start in 0..12u8 {
            if next_edge[start as usize] == u8::MAX || visited[start as usize] {
                continue;
            }
            let mut cycle = vec![start];
            visited[start as usize] = true;
            let mut cur = next_edge[start as usize];
            while cur != start {
                visited[cur as usize] = true;
                cycle.push(cur);
                cur = next_edge[cur as usize];
            }
            for i in 1..cycle.len() - 1 {
                tris.push([cycle[0], cycle[i], cycle[i + 1]]);
            }
        }
        table.push(tris);
    }
    table
});

/// Standard 256-case marching cubes with linear interpolation along edges.
/// Vertices are welded by exact edge key; winding puts normals toward
/// positive SDF values. The sample grid is virtually padded with a positive
/// shell, so surfaces exiting the domain are capped by wall polygons.
pub fn marching_cubes(grid: &VoxelGrid, iso: f64) -> TriMesh {
    let res = grid.res as i64;
    let table = &*TRI_TABLE;

    let mut vertices: Vec<Vec3> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    // Edge key: (canonical lattice sample index, axis).
    let mut edge_vertex: HashMap<(u64, u8), u32> = HashMap::new();
    let dim = (res + 2) as u64;
    let lin = |i: i64, j: i64, k: i64| -> u64 {
        (((i + 1) as u64 * dim) + (j + 1) as u64) * dim + (k + 1) as u64
    };

    let mut corner_vals = [0.0f64; 8];
    for i in -1..res {
        for j in -1..res {
            for k in -1..res {
                let mut config = 0u16;
                for c in 0..8u8 {
                    let (dx, dy, dz) = corner_offset(c);
                    let v = grid.value_padded(i + dx, j + dy, k + dz);
                    corner_vals[c as usize] = v;
                    if v < iso {
                        config |= 1 << c;
                    }
                }
                if config == 0 || config == 0xff {
                    continue;
                }
                for tri in &table[config as usize] {
                    let mut idx = [0u32; 3];
                    for (slot, &e) in tri.iter().enumerate() {
                        let (a, b) = EDGES[e as usize];
                        let (ax, ay, az) = corner_offset(a);
                        let (bx, by, bz) = corner_offset(b);
                        let pa = (i + ax, j + ay, k + az);
                        let pb = (i + bx, j + by, k + bz);
                        let axis = if ax != bx { 0u8 } else if ay != by { 1 } else { 2 };
                        let key = (lin(pa.0, pa.1, pa.2).min(lin(pb.0, pb.1, pb.2)), axis);
                        let next_id = vertices.len() as u32;
                        let id = *edge_vertex.entry(key).or_insert_with(|| {
                            let va = corner_vals[a as usize];
                            let vb = corner_vals[b as usize];
                            let t = if vb != va {
                                ((iso - va) / (vb - va)).clamp(0.0, 1.0)
                            } else {
                                0.5
                            };
                            let pos_a = grid.position(pa.0, pa.1, pa.2);
                            let pos_b = grid.position(pb.0, pb.1, pb.2);
                            vertices.push(pos_a + (pos_b - pos_a) * t);
                            next_id
                        });
                        idx[slot] = id;
                    }
                    if idx[0] != idx[1] && idx[1] != idx[2] && idx[0] != idx[2] {
                        triangles.push(idx);
                    }
                }
            }
        }
    }

    if triangles.is_empty() {
        log::warn!("marching cubes found no surface (no sign change anywhere)");
    }
    TriMesh::new(vertices, triangles)
}

/// The stair-step ablation baseline: per-column maximum-height occupancy
/// (solid below each column's highest point, empty above; columns without
/// points are ground level), converted to a ±1 pseudo-SDF and run through
/// marching cubes.
pub fn naive_mc_baseline(cloud: &PointCloud, res: usize) -> Result<TriMesh> {
    cloud.expect_frame(Frame::Normalized)?;
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let ground = cloud.points.iter().map(|p| p.z).fold(f64::INFINITY, f64::min);

    let mut col_height = vec![f64::NEG_INFINITY; res * res];
    let cell = |x: f64| -> usize {
        (((x + 1.0) * 0.5 * res as f64).floor() as i64).clamp(0, res as i64 - 1) as usize
    };
    for p in &cloud.points {
        let idx = cell(p.x) * res + cell(p.y);
        if p.z > col_height[idx] {
            col_height[idx] = p.z;
        }
    }
    for h in &mut col_height {
        if !h.is_finite() {
            *h = ground;
        }
    }

    let mut values = vec![1.0f64; res * res * res];
    let step_z = 2.0 / res as f64;
    for i in 0..res {
        for j in 0..res {
            let h = col_height[i * res + j];
            let row = (i * res + j) * res;
            for k in 0..res {
                let z = -1.0 + (k as f64 + 0.5) * step_z;
                values[row + k] = if z <= h { -1.0 } else { 1.0 };
            }
        }
    }
    let grid = VoxelGrid {
        res,
        values,
        lo: Vec3::new(-1.0, -1.0, -1.0),
        hi: Vec3::new(1.0, 1.0, 1.0),
    };
    Ok(marching_cubes(&grid, 0.0))
}

// ---------------------------------------------------------------------------
// Direct 2.5D height-mesh extraction
// ---------------------------------------------------------------------------

/// Triangulates the field's height surface over the full domain as a
/// terrain grid closed with side skirts and a bottom plate; watertight by
/// construction. UVs are the normalized ground-plane coordinates.
pub fn extract_height_mesh(field: &ZMonoField, res: usize) -> TriMesh {
    extract_height_mesh_rect(field, res, Rect { x0: -1.0, y0: -1.0, x1: 1.0, y1: 1.0 })
}

/// Height-mesh extraction restricted to a sub-rectangle of the normalized
/// domain. `res` is the vertex count per axis; rect edges carry vertices
/// exactly, which lets tile meshes meet at seams.
pub fn extract_height_mesh_rect(field: &ZMonoField, res: usize, rect: Rect) -> TriMesh {
    assert!(res >= 2);
    let z_bottom = -1.0;
    let xs: Vec<f64> = (0..res)
        .map(|i| rect.x0 + (rect.x1 - rect.x0) * i as f64 / (res - 1) as f64)
        .collect();
    let ys: Vec<f64> = (0..res)
        .map(|j| rect.y0 + (rect.y1 - rect.y0) * j as f64 / (res - 1) as f64)
        .collect();

    let mut vertices = Vec::with_capacity(res * res + 4 * res - 3);
    let mut uvs = Vec::with_capacity(res * res + 4 * res - 3);
    for j in 0..res {
        for i in 0..res {
            let h = field.height_of(xs[i], ys[j]).expect("in-domain").z;
            vertices.push(Vec3::new(xs[i], ys[j], h));
            uvs.push([(xs[i] + 1.0) * 0.5, (ys[j] + 1.0) * 0.5]);
        }
    }

    let mut triangles = Vec::new();
    let top = |i: usize, j: usize| (j * res + i) as u32;
    for j in 0..res - 1 {
        for i in 0..res - 1 {
            let v00 = top(i, j);
            let v10 = top(i + 1, j);
            let v11 = top(i + 1, j + 1);
            let v01 = top(i, j + 1);
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }

    // Boundary ring, counterclockwise viewed from above.
    let mut ring_top: Vec<u32> = Vec::with_capacity(4 * res - 4);
    for i in 0..res - 1 {
        ring_top.push(top(i, 0));
    }
    for j in 0..res - 1 {
        ring_top.push(top(res - 1, j));
    }
    for i in (1..res).rev() {
        ring_top.push(top(i, res - 1));
    }
    for j in (1..res).rev() {
        ring_top.push(top(0, j));
    }

    let ring_len = ring_top.len();
    let ring_bottom_start = vertices.len() as u32;
    for &t in &ring_top {
        let v = vertices[t as usize];
        vertices.push(Vec3::new(v.x, v.y, z_bottom));
        uvs.push([(v.x + 1.0) * 0.5, (v.y + 1.0) * 0.5]);
    }
    let center = vertices.len() as u32;
    let cx = 0.5 * (rect.x0 + rect.x1);
    let cy = 0.5 * (rect.y0 + rect.y1);
    vertices.push(Vec3::new(cx, cy, z_bottom));
    uvs.push([(cx + 1.0) * 0.5, (cy + 1.0) * 0.5]);

    for t in 0..ring_len {
        let n = (t + 1) % ring_len;
        let bt = ring_top[t];
        let bn = ring_top[n];
        let rt = ring_bottom_start + t as u32;
        let rn = ring_bottom_start + n as u32;
        // Outward-facing skirt quad.
        triangles.push([bt, rt, rn]);
        triangles.push([bt, rn, bn]);
        // Downward-facing bottom fan.
        triangles.push([center, rn, rt]);
    }

    let mut mesh = TriMesh::new(vertices, triangles);
    mesh.uvs = Some(uvs);
    mesh
}

// ---------------------------------------------------------------------------
// Watertightness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WatertightReport {
    pub boundary_edge_count: usize,
    pub non_manifold_edge_count: usize,
    pub connected_components: usize,
    pub euler_characteristic: i64,
    pub vertex_count: usize,
    pub edge_count: usize,
    pub triangle_count: usize,
}

impl WatertightReport {
    pub fn is_watertight(&self) -> bool {
        self.boundary_edge_count == 0 && self.non_manifold_edge_count == 0
    }
}

impl std::fmt::Display for WatertightReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "watertight={} boundary_edges={} non_manifold_edges={} components={} euler={}",
            self.is_watertight(),
            self.boundary_edge_count,
            self.non_manifold_edge_count,
            self.connected_components,
            self.euler_characteristic
        )
    }
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n as u32).collect(),
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            self.parent[x as usize] = self.parent[self.parent[x as usize] as usize];
            x = self.parent[x as usize];
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller root wins, keeping representatives deterministic.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Counts edges by undirected key: boundary edges have one incident face,
/// non-manifold edges three or more. Euler characteristic is V - E + F over
/// all mesh vertices.
pub fn watertight_check(mesh: &TriMesh) -> WatertightReport {
    let mut edges: HashMap<(u32, u32), u32> = HashMap::new();
    let mut uf = UnionFind::new(mesh.vertices.len());
    let mut referenced = vec![false; mesh.vertices.len()];
    for t in &mesh.triangles {
        for e in 0..3 {
            let a = t[e];
            let b = t[(e + 1) % 3];
            *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            uf.union(a, b);
            referenced[a as usize] = true;
        }
    }
    let boundary = edges.values().filter(|&&c| c == 1).count();
    let non_manifold = edges.values().filter(|&&c| c >= 3).count();
    let mut roots = std::collections::HashSet::new();
    for v in 0..mesh.vertices.len() as u32 {
        if referenced[v as usize] {
            roots.insert(uf.find(v));
        }
    }
    WatertightReport {
        boundary_edge_count: boundary,
        non_manifold_edge_count: non_manifold,
        connected_components: roots.len(),
        euler_characteristic: mesh.vertices.len() as i64 - edges.len() as i64
            + mesh.triangles.len() as i64,
        vertex_count: mesh.vertices.len(),
        edge_count: edges.len(),
        triangle_count: mesh.triangles.len(),
    }
}

// ---------------------------------------------------------------------------
// Tile merging
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeamReport {
    pub tiles: (usize, usize),
    /// 0 = seam plane normal to x, 1 = normal to y.
    pub axis: u8,
    /// Largest vertex mismatch across the seam, world units.
    pub gap: f64,
    pub stitched: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MergeReport {
    pub seams: Vec<SeamReport>,
}

impl MergeReport {
    pub fn unstitched(&self) -> impl Iterator<Item = &SeamReport> {
        self.seams.iter().filter(|s| !s.stitched)
    }
}

/// Extracts the tile's height mesh over its core region, in the tile's
/// normalized frame. `res` is the vertex count per axis.
pub fn extract_tile_mesh(tile: &FittedTile, res: usize) -> TriMesh {
    let lo = tile
        .transform
        .to_normalized(Vec3::new(tile.core.x0, tile.core.y0, 0.0));
    let hi = tile
        .transform
        .to_normalized(Vec3::new(tile.core.x1, tile.core.y1, 0.0));
    extract_height_mesh_rect(
        &tile.field,
        res,
        Rect { x0: lo.x, y0: lo.y, x1: hi.x, y1: hi.y },
    )
}

/// Un-normalizes per-tile meshes to world coordinates and joins them at
/// tile seams. Each tile mesh covers exactly its core region (clipping
/// happened at extraction), so adjacent tiles abut along shared seam
/// planes. When the two facing seam rings match within `weld_tol` the
/// interior double walls are removed and the rings welded into one
/// manifold; otherwise both tiles keep their closed skirts (the output
/// stays watertight as separate closed components) and the gap is
/// reported, not bridged.
pub fn merge_tiles(
    tiles: &[(TriMesh, NormalizeTransform, Rect)],
    weld_tol: f64,
) -> (TriMesh, MergeReport) {
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    let mut tri_tile: Vec<usize> = Vec::new();
    let mut ranges = Vec::new();
    let mut uvs: Vec<[f64; 2]> = Vec::new();
    let mut have_uvs = true;
    for (mesh, transform, _) in tiles {
        let base = vertices.len() as u32;
        ranges.push(base as usize..base as usize + mesh.vertices.len());
        vertices.extend(mesh.vertices.iter().map(|&v| transform.to_world(v)));
        match &mesh.uvs {
            Some(u) => uvs.extend_from_slice(u),
            None => have_uvs = false,
        }
        for t in &mesh.triangles {
            triangles.push([t[0] + base, t[1] + base, t[2] + base]);
            tri_tile.push(ranges.len() - 1);
        }
    }

    let mut report = MergeReport::default();
    let mut uf = UnionFind::new(vertices.len());
    let mut drop_tri = vec![false; triangles.len()];

    for a in 0..tiles.len() {
        for b in a + 1..tiles.len() {
            let ra = tiles[a].2;
            let rb = tiles[b].2;
            let tol = weld_tol.max(1e-9);
            let x_seam = (ra.x1 - rb.x0).abs() < tol && ra.y0 < rb.y1 - tol && rb.y0 < ra.y1 - tol;
            let y_seam = (ra.y1 - rb.y0).abs() < tol && ra.x0 < rb.x1 - tol && rb.x0 < ra.x1 - tol;
            let (axis, seam_coord) = if x_seam {
                (0u8, ra.x1)
            } else if y_seam {
                (1u8, ra.y1)
            } else {
                continue;
            };

            let on_plane = |v: &Vec3| {
                let c = if axis == 0 { v.x } else { v.y };
                (c - seam_coord).abs() <= weld_tol
            };
            let side_a: Vec<u32> = ranges[a]
                .clone()
                .filter(|&i| on_plane(&vertices[i]))
                .map(|i| i as u32)
                .collect();
            let side_b: Vec<u32> = ranges[b]
                .clone()
                .filter(|&i| on_plane(&vertices[i]))
                .map(|i| i as u32)
                .collect();
            if side_a.is_empty() || side_b.is_empty() {
                continue;
            }

            // Symmetric worst-case vertex mismatch across the seam.
            let nearest = |from: &[u32], to: &[u32]| -> f64 {
                from.iter()
                    .map(|&i| {
                        to.iter()
                            .map(|&j| (vertices[i as usize] - vertices[j as usize]).norm())
                            .fold(f64::INFINITY, f64::min)
                    })
                    .fold(0.0, f64::max)
            };
            let gap = nearest(&side_a, &side_b).max(nearest(&side_b, &side_a));
            let stitched = gap <= weld_tol;
            if stitched {
                // Remove both facing walls: triangles lying entirely in the
                // seam plane.
                for (t, tri) in triangles.iter().enumerate() {
                    if (tri_tile[t] == a || tri_tile[t] == b)
                        && tri.iter().all(|&v| on_plane(&vertices[v as usize]))
                    {
                        drop_tri[t] = true;
                    }
                }
                for &i in &side_b {
                    let mut best = (f64::INFINITY, 0u32);
                    for &j in &side_a {
                        let d = (vertices[i as usize] - vertices[j as usize]).norm();
                        if d < best.0 {
                            best = (d, j);
                        }
                    }
                    if best.0 <= weld_tol {
                        uf.union(i, best.1);
                    }
                }
            } else {
                log::warn!(
                    "seam between tiles {a} and {b} has gap {gap:.3e} above weld tolerance; \
                     leaving both tiles closed"
                );
            }
            report.seams.push(SeamReport {
                tiles: (a, b),
                axis,
                gap,
                stitched,
            });
        }
    }

    let mut out = TriMesh {
        vertices,
        triangles: triangles
            .into_iter()
            .enumerate()
            .filter(|(t, _)| !drop_tri[*t])
            .map(|(_, tri)| tri)
            .collect(),
        uvs: if have_uvs { Some(uvs) } else { None },
    };
    for tri in &mut out.triangles {
        for v in tri.iter_mut() {
            *v = uf.find(*v);
        }
    }
    out.drop_degenerate();
    out.compact();
    (out, report)
}
