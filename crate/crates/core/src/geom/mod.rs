//! Shared geometric primitives, coordinate normalization, and mesh/point
//! cloud file I/O.
//!
//! Coordinate convention throughout the crate: right-handed, +z up. World
//! units are meters; the normalized frame maps a scene into `[-1, 1]^3`
//! with one shared scale for x/y (ground-plane aspect is preserved) and an
//! independent scale for z.

mod obj;
mod ply;

pub use obj::{read_obj, write_obj, ObjMaterial};
pub use ply::{read_ply, write_ply};

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::ops::{Add, Div, Mul, Neg, Sub};

/// A 3D point or vector. Meters in the world frame, unitless in the
/// normalized frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3 {
            x: self.y * o.z - self.z * o.y,
            y: self.z * o.x - self.x * o.z,
            z: self.x * o.y - self.y * o.x,
        }
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        if n == 0.0 {
            Vec3::ZERO
        } else {
            self / n
        }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn min_components(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn max_components(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Which coordinate frame a cloud lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    /// World meters.
    World,
    /// Every component in `[-1, 1]`.
    Normalized,
}

#[derive(Debug, Clone)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub frame: Frame,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, frame: Frame) -> Self {
        PointCloud { points, frame }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn expect_frame(&self, expected: Frame) -> Result<()> {
        if self.frame != expected {
            return Err(Error::WrongFrame {
                expected,
                found: self.frame,
            });
        }
        Ok(())
    }

    /// Axis-aligned bounding box, `None` for an empty cloud.
    pub fn bbox(&self) -> Option<(Vec3, Vec3)> {
        let mut it = self.points.iter();
        let first = *it.next()?;
        let mut lo = first;
        let mut hi = first;
        for &p in it {
            lo = lo.min_components(p);
            hi = hi.max_components(p);
        }
        Some((lo, hi))
    }
}

/// Invertible map between world coordinates and the normalized `[-1, 1]^3`
/// frame. One scale is shared by x and y, z has its own.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizeTransform {
    pub scale_xy: f64,
    pub scale_z: f64,
    /// World-space center that maps to the origin.
    pub offset: Vec3,
}

impl NormalizeTransform {
    pub fn to_normalized(&self, p: Vec3) -> Vec3 {
        Vec3::new(
            (p.x - self.offset.x) * self.scale_xy,
            (p.y - self.offset.y) * self.scale_xy,
            (p.z - self.offset.z) * self.scale_z,
        )
    }

    pub fn to_world(&self, p: Vec3) -> Vec3 {
        Vec3::new(
            p.x / self.scale_xy + self.offset.x,
            p.y / self.scale_xy + self.offset.y,
            p.z / self.scale_z + self.offset.z,
        )
    }

    pub fn apply_cloud(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud::new(
            cloud.points.iter().map(|&p| self.to_normalized(p)).collect(),
            Frame::Normalized,
        )
    }

    pub fn invert_cloud(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud::new(
            cloud.points.iter().map(|&p| self.to_world(p)).collect(),
            Frame::World,
        )
    }
}

/// Maps a world cloud into `[-1, 1]^3`, leaving `2*padding` of empty margin
/// per side. x and y share one scale, z gets its own. Degenerate axes (zero
/// extent) map to coordinate 0 with scale 1.
pub fn normalize_cloud(
    cloud: &PointCloud,
    padding: f64,
) -> Result<(PointCloud, NormalizeTransform)> {
    cloud.expect_frame(Frame::World)?;
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if !(0.0..0.5).contains(&padding) {
        return Err(Error::Config(format!("padding {padding} outside [0, 0.5)")));
    }
    for (i, p) in cloud.points.iter().enumerate() {
        if !p.is_finite() {
            return Err(Error::NonFinitePoint { index: i });
        }
    }
    let (lo, hi) = cloud.bbox().unwrap();
    let transform = normalize_transform_for_bbox(lo, hi, padding);
    Ok((transform.apply_cloud(cloud), transform))
}

/// Builds the transform for a known world bounding box. Used directly by
/// the tiled fit, which normalizes tiles against rects larger than their
/// own point sets.
pub fn normalize_transform_for_bbox(lo: Vec3, hi: Vec3, padding: f64) -> NormalizeTransform {
    let center = (lo + hi) * 0.5;
    let half = (hi - lo) * 0.5;
    let target = 1.0 - 2.0 * padding;
    let half_xy = half.x.max(half.y);
    let scale_xy = if half_xy > 0.0 { target / half_xy } else { 1.0 };
    let scale_z = if half.z > 0.0 { target / half.z } else { 1.0 };
    NormalizeTransform {
        scale_xy,
        scale_z,
        offset: center,
    }
}

/// Indexed triangle mesh with optional per-vertex UVs.
#[derive(Debug, Clone, Default)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    pub uvs: Option<Vec<[f64; 2]>>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Self {
        TriMesh {
            vertices,
            triangles,
            uvs: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        for (i, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&v| v >= n) {
                return Err(Error::InvalidMesh(format!(
                    "triangle {i} references vertex out of range"
                )));
            }
        }
        if let Some(uvs) = &self.uvs {
            if uvs.len() != self.vertices.len() {
                return Err(Error::InvalidMesh(format!(
                    "{} uvs for {} vertices",
                    uvs.len(),
                    self.vertices.len()
                )));
            }
        }
        Ok(())
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let a = self.vertices[a as usize];
        let b = self.vertices[b as usize];
        let c = self.vertices[c as usize];
        (b - a).cross(c - a).norm() * 0.5
    }

    pub fn triangle_normal(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.triangles[t];
        let a = self.vertices[a as usize];
        let b = self.vertices[b as usize];
        let c = self.vertices[c as usize];
        (b - a).cross(c - a).normalized()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Sum of signed tetrahedron volumes; positive for a closed surface with
    /// outward winding.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|&[a, b, c]| {
                let a = self.vertices[a as usize];
                let b = self.vertices[b as usize];
                let c = self.vertices[c as usize];
                a.dot(b.cross(c)) / 6.0
            })
            .sum()
    }

    pub fn bbox(&self) -> Option<(Vec3, Vec3)> {
        let mut it = self.vertices.iter();
        let first = *it.next()?;
        let mut lo = first;
        let mut hi = first;
        for &p in it {
            lo = lo.min_components(p);
            hi = hi.max_components(p);
        }
        Some((lo, hi))
    }

    /// Applies a normalized→world transform to all vertices.
    pub fn to_world(&self, t: &NormalizeTransform) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(|&v| t.to_world(v)).collect(),
            triangles: self.triangles.clone(),
            uvs: self.uvs.clone(),
        }
    }

    /// Drops triangles whose three vertex indices are not distinct.
    pub fn drop_degenerate(&mut self) {
        self.triangles
            .retain(|t| t[0] != t[1] && t[1] != t[2] && t[0] != t[2]);
    }

    /// Removes vertices not referenced by any triangle, remapping indices.
    pub fn compact(&mut self) {
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &v in t {
                used[v as usize] = true;
            }
        }
        let mut remap = vec![u32::MAX; self.vertices.len()];
        let mut vertices = Vec::new();
        let mut uvs = self.uvs.as_ref().map(|_| Vec::new());
        for (i, &keep) in used.iter().enumerate() {
            if keep {
                remap[i] = vertices.len() as u32;
                vertices.push(self.vertices[i]);
                if let (Some(out), Some(src)) = (&mut uvs, &self.uvs) {
                    out.push(src[i]);
                }
            }
        }
        for t in &mut self.triangles {
            for v in t.iter_mut() {
                *v = remap[*v as usize];
            }
        }
        self.vertices = vertices;
        self.uvs = uvs;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_point_maps_to_origin() {
        let cloud = PointCloud::new(vec![Vec3::new(5.0, 5.0, 5.0)], Frame::World);
        let (n, t) = normalize_cloud(&cloud, 0.0).unwrap();
        assert_eq!(n.points[0], Vec3::ZERO);
        assert!(t.scale_xy > 0.0 && t.scale_z > 0.0);
        let back = t.to_world(n.points[0]);
        assert!((back - Vec3::new(5.0, 5.0, 5.0)).norm() < 1e-12);
    }

    #[test]
    fn cube_corners_map_to_unit_cube() {
        let mut pts = Vec::new();
        for &x in &[0.0, 10.0] {
            for &y in &[0.0, 10.0] {
                for &z in &[0.0, 10.0] {
                    pts.push(Vec3::new(x, y, z));
                }
            }
        }
        let cloud = PointCloud::new(pts, Frame::World);
        let (n, _) = normalize_cloud(&cloud, 0.0).unwrap();
        let (lo, hi) = n.bbox().unwrap();
        assert!((lo - Vec3::new(-1.0, -1.0, -1.0)).norm() < 1e-12);
        assert!((hi - Vec3::new(1.0, 1.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn empty_cloud_errors() {
        let cloud = PointCloud::new(vec![], Frame::World);
        assert!(matches!(normalize_cloud(&cloud, 0.0), Err(Error::EmptyCloud)));
    }

    #[test]
    fn non_finite_point_reports_index() {
        let cloud = PointCloud::new(
            vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(f64::NAN, 0.0, 0.0)],
            Frame::World,
        );
        match normalize_cloud(&cloud, 0.0) {
            Err(Error::NonFinitePoint { index }) => assert_eq!(index, 1),
            other => panic!("expected NonFinitePoint, got {other:?}"),
        }
    }

    #[test]
    fn xy_scale_is_shared() {
        // A 100 x 10 footprint: y must not be stretched to fill the square.
        let cloud = PointCloud::new(
            vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(100.0, 10.0, 5.0)],
            Frame::World,
        );
        let (n, _) = normalize_cloud(&cloud, 0.0).unwrap();
        let (lo, hi) = n.bbox().unwrap();
        assert!((hi.x - lo.x - 2.0).abs() < 1e-12);
        assert!((hi.y - lo.y - 0.2).abs() < 1e-12);
        assert!((hi.z - lo.z - 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn round_trip_identity(
            pts in prop::collection::vec((-1e4f64..1e4, -1e4f64..1e4, -500f64..500.0), 1..100),
            padding in 0.0f64..0.4,
        ) {
            let cloud = PointCloud::new(
                pts.iter().map(|&(x, y, z)| Vec3::new(x, y, z)).collect(),
                Frame::World,
            );
            let (n, t) = normalize_cloud(&cloud, padding).unwrap();
            let (lo, hi) = n.bbox().unwrap();
            let lim = 1.0 + 1e-12;
            prop_assert!(lo.x >= -lim && lo.y >= -lim && lo.z >= -lim);
            prop_assert!(hi.x <= lim && hi.y <= lim && hi.z <= lim);
            for (orig, norm) in cloud.points.iter().zip(&n.points) {
                let back = t.to_world(*norm);
                let scale = orig.norm().max(1.0);
                prop_assert!((back - *orig).norm() / scale < 1e-9);
            }
        }
    }
}
