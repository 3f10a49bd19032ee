//! OBJ mesh export with optional MTL + texture atlas reference, and a
//! reader for the subset this crate writes (v/vt/f records).

use super::{TriMesh, Vec3};
use crate::{Error, Result};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Atlas reference emitted as a sibling MTL file.
#[derive(Debug, Clone)]
pub struct ObjMaterial {
    /// Material name used in both files.
    pub name: String,
    /// Atlas image path as referenced from the MTL (usually a bare filename).
    pub texture: String,
}

/// Writes `mesh` as an OBJ with v/vt/f records. When `material` is given, a
/// sibling `.mtl` file referencing the atlas image is written next to the
/// OBJ and linked via `mtllib`/`usemtl`.
pub fn write_obj(mesh: &TriMesh, path: impl AsRef<Path>, material: Option<&ObjMaterial>) -> Result<()> {
    mesh.validate()?;
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);

    if let Some(mat) = material {
        let mtl_path = path.with_extension("mtl");
        let mtl_name = mtl_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "material.mtl".into());
        writeln!(w, "mtllib {mtl_name}").map_err(io_err)?;
        let mtl = File::create(&mtl_path).map_err(|e| Error::io(&mtl_path, e))?;
        let mut mw = BufWriter::new(mtl);
        write!(
            mw,
            "newmtl {}\nKa 1.0 1.0 1.0\nKd 1.0 1.0 1.0\nmap_Kd {}\n",
            mat.name, mat.texture
        )
        .map_err(|e| Error::io(&mtl_path, e))?;
        mw.flush().map_err(|e| Error::io(&mtl_path, e))?;
    }

    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", v.x, v.y, v.z).map_err(io_err)?;
    }
    if let Some(uvs) = &mesh.uvs {
        for uv in uvs {
            writeln!(w, "vt {} {}", uv[0], uv[1]).map_err(io_err)?;
        }
    }
    if let Some(mat) = material {
        writeln!(w, "usemtl {}", mat.name).map_err(io_err)?;
    }
    // OBJ indices are 1-based. UVs are per vertex, so v and vt share indices.
    let with_uv = mesh.uvs.is_some();
    for t in &mesh.triangles {
        if with_uv {
            writeln!(
                w,
                "f {}/{} {}/{} {}/{}",
                t[0] + 1,
                t[0] + 1,
                t[1] + 1,
                t[1] + 1,
                t[2] + 1,
                t[2] + 1
            )
            .map_err(io_err)?;
        } else {
            writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Reads an OBJ written by [`write_obj`] (triangular faces, per-vertex UVs).
/// Faces with more than three vertices are fan-triangulated.
pub fn read_obj(path: impl AsRef<Path>) -> Result<TriMesh> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    let mut vertices = Vec::new();
    let mut uvs = Vec::new();
    let mut triangles = Vec::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        let mut tok = line.split_whitespace();
        let parse_err = |msg: &str| Error::ObjParse {
            line: lineno + 1,
            msg: msg.to_string(),
        };
        match tok.next() {
            Some("v") => {
                let mut next = || -> Result<f64> {
                    tok.next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| parse_err("bad vertex coordinate"))
                };
                let (x, y, z) = (next()?, next()?, next()?);
                vertices.push(Vec3::new(x, y, z));
            }
            Some("vt") => {
                let mut next = || -> Result<f64> {
                    tok.next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| parse_err("bad uv coordinate"))
                };
                let (u, v) = (next()?, next()?);
                uvs.push([u, v]);
            }
            Some("f") => {
                let mut idx = Vec::new();
                for part in tok {
                    let vi: i64 = part
                        .split('/')
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| parse_err("bad face index"))?;
                    if vi < 1 || vi as usize > vertices.len() {
                        return Err(parse_err("face index out of range"));
                    }
                    idx.push((vi - 1) as u32);
                }
                if idx.len() < 3 {
                    return Err(parse_err("face with fewer than 3 vertices"));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }

    let mut mesh = TriMesh::new(vertices, triangles);
    if !uvs.is_empty() {
        if uvs.len() != mesh.vertices.len() {
            return Err(Error::ObjParse {
                line: 0,
                msg: format!("{} uvs for {} vertices", uvs.len(), mesh.vertices.len()),
            });
        }
        mesh.uvs = Some(uvs);
    }
    Ok(mesh)
}
