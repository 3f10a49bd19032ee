//! Reconstruction toolkit for turning sparse, facade-deficient point clouds
//! (the kind produced by satellite multi-view stereo) into watertight 2.5D
//! city meshes with baked texture atlases.
//!
//! The pipeline has two stages. Stage one fits a z-monotone signed distance
//! field to the input cloud ([`field`], [`fit`]) and extracts a watertight
//! mesh from it ([`extract`]). Stage two bakes a texture atlas against posed
//! source views and optionally refines it with a pluggable image enhancer
//! ([`texture`], [`raster`]). [`metrics`] evaluates geometry and images,
//! [`synth`] generates procedural box-city scenes with exact ground truth,
//! and [`camera`] models the satellite-style capture geometry.

pub mod camera;
pub mod error;
pub mod extract;
pub mod field;
pub mod fit;
pub mod geom;
pub mod heightmap;
pub mod metrics;
pub mod raster;
pub mod synth;
pub mod texture;

pub use error::{Error, Result};
pub use geom::{Frame, NormalizeTransform, PointCloud, TriMesh, Vec3};
pub use heightmap::HeightMap;
