//! Minimal PLY point-cloud I/O: ascii and binary_little_endian, float or
//! double x/y/z vertex properties. Extra vertex properties are parsed and
//! ignored on read, dropped on write. The writer emits
//! binary_little_endian doubles so a write→read round trip is bit exact.

use super::{Frame, PointCloud, Vec3};
use crate::{Error, Result};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq)]
enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<ScalarType> {
        match s {
            "char" | "int8" => Some(ScalarType::I8),
            "uchar" | "uint8" => Some(ScalarType::U8),
            "short" | "int16" => Some(ScalarType::I16),
            "ushort" | "uint16" => Some(ScalarType::U16),
            "int" | "int32" => Some(ScalarType::I32),
            "uint" | "uint32" => Some(ScalarType::U32),
            "float" | "float32" => Some(ScalarType::F32),
            "double" | "float64" => Some(ScalarType::F64),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn read_le(self, buf: &[u8]) -> f64 {
        match self {
            ScalarType::I8 => buf[0] as i8 as f64,
            ScalarType::U8 => buf[0] as f64,
            ScalarType::I16 => i16::from_le_bytes([buf[0], buf[1]]) as f64,
            ScalarType::U16 => u16::from_le_bytes([buf[0], buf[1]]) as f64,
            ScalarType::I32 => i32::from_le_bytes(buf[..4].try_into().unwrap()) as f64,
            ScalarType::U32 => u32::from_le_bytes(buf[..4].try_into().unwrap()) as f64,
            ScalarType::F32 => f32::from_le_bytes(buf[..4].try_into().unwrap()) as f64,
            ScalarType::F64 => f64::from_le_bytes(buf[..8].try_into().unwrap()),
        }
    }
}

struct VertexLayout {
    /// (type, byte offset within a record) per property, in file order.
    props: Vec<(ScalarType, usize)>,
    record_size: usize,
    x: usize,
    y: usize,
    z: usize,
    count: usize,
}

struct Header {
    format: PlyFormat,
    vertex: VertexLayout,
    /// Byte length of fixed-size elements listed before the vertex element.
    prefix_bytes: usize,
    /// Record counts of ascii elements before the vertex element.
    prefix_records: usize,
}

fn parse_header<R: BufRead>(reader: &mut R) -> Result<Header> {
    let mut line = String::new();
    reader
        .read_line(&mut line)
        .map_err(|e| Error::PlyHeader(e.to_string()))?;
    if line.trim_end() != "ply" {
        return Err(Error::PlyHeader("missing 'ply' magic".into()));
    }

    let mut format = None;
    // (name, count, props)
    let mut elements: Vec<(String, usize, Vec<(ScalarType, String)>)> = Vec::new();

    loop {
        line.clear();
        let n = reader
            .read_line(&mut line)
            .map_err(|e| Error::PlyHeader(e.to_string()))?;
        if n == 0 {
            return Err(Error::PlyHeader("unexpected end of header".into()));
        }
        let trimmed = line.trim_end();
        let mut tok = trimmed.split_whitespace();
        match tok.next() {
            Some("comment") | Some("obj_info") => continue,
            Some("format") => {
                let kind = tok.next().unwrap_or("");
                format = Some(match kind {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => return Err(Error::PlyUnsupported(format!("format '{other}'"))),
                });
            }
            Some("element") => {
                let name = tok
                    .next()
                    .ok_or_else(|| Error::PlyHeader("element without name".into()))?;
                let count: usize = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::PlyHeader(format!("bad count for element '{name}'")))?;
                elements.push((name.to_string(), count, Vec::new()));
            }
            Some("property") => {
                let (_, _, props) = elements
                    .last_mut()
                    .ok_or_else(|| Error::PlyHeader("property before any element".into()))?;
                let ty = tok
                    .next()
                    .ok_or_else(|| Error::PlyHeader("property without type".into()))?;
                if ty == "list" {
                    // List properties are only tolerated in elements after the
                    // vertex element (we stop reading there anyway). Mark with
                    // a sentinel name so the check below can reject them.
                    props.push((ScalarType::U8, "__list__".into()));
                    continue;
                }
                let scalar = ScalarType::parse(ty)
                    .ok_or_else(|| Error::PlyUnsupported(format!("property type '{ty}'")))?;
                let name = tok
                    .next()
                    .ok_or_else(|| Error::PlyHeader("property without name".into()))?;
                props.push((scalar, name.to_string()));
            }
            Some("end_header") => break,
            Some(other) => return Err(Error::PlyHeader(format!("unknown keyword '{other}'"))),
            None => continue,
        }
    }

    let format = format.ok_or_else(|| Error::PlyHeader("missing format line".into()))?;
    let vertex_pos = elements
        .iter()
        .position(|(name, _, _)| name == "vertex")
        .ok_or_else(|| Error::PlyHeader("no vertex element".into()))?;

    let mut prefix_bytes = 0;
    let mut prefix_records = 0;
    for (name, count, props) in &elements[..vertex_pos] {
        if props.iter().any(|(_, n)| n == "__list__") {
            return Err(Error::PlyUnsupported(format!(
                "list property in element '{name}' before vertex data"
            )));
        }
        let rec: usize = props.iter().map(|(t, _)| t.size()).sum();
        prefix_bytes += rec * count;
        prefix_records += count;
    }

    let (_, count, props) = &elements[vertex_pos];
    if props.iter().any(|(_, n)| n == "__list__") {
        return Err(Error::PlyUnsupported("list property in vertex element".into()));
    }
    let mut offset = 0;
    let mut layout_props = Vec::new();
    let mut x = None;
    let mut y = None;
    let mut z = None;
    for (i, (ty, name)) in props.iter().enumerate() {
        match name.as_str() {
            "x" => x = Some(i),
            "y" => y = Some(i),
            "z" => z = Some(i),
            _ => {}
        }
        if matches!(name.as_str(), "x" | "y" | "z")
            && !matches!(ty, ScalarType::F32 | ScalarType::F64)
        {
            return Err(Error::PlyUnsupported(format!(
                "coordinate '{name}' must be float or double"
            )));
        }
        layout_props.push((*ty, offset));
        offset += ty.size();
    }
    let (x, y, z) = match (x, y, z) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(Error::PlyHeader("vertex element lacks x/y/z".into())),
    };

    Ok(Header {
        format,
        vertex: VertexLayout {
            props: layout_props,
            record_size: offset,
            x,
            y,
            z,
            count: *count,
        },
        prefix_bytes,
        prefix_records,
    })
}

/// Reads a PLY point cloud (ascii or binary_little_endian) in the world
/// frame. Extra vertex properties are ignored.
pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let header = parse_header(&mut reader)?;

    let layout = &header.vertex;
    let mut points = Vec::with_capacity(layout.count);

    match header.format {
        PlyFormat::Ascii => {
            let mut lines = reader.lines();
            // Skip records of elements declared before the vertex element.
            for _ in 0..header.prefix_records {
                if lines.next().is_none() {
                    return Err(Error::PlyTruncated {
                        expected: layout.count,
                        actual: 0,
                    });
                }
            }
            for line in lines {
                let line = line.map_err(|e| Error::io(path, e))?;
                let trimmed = line.trim();
                if trimmed.is_empty() {
                    continue;
                }
                let vals: Vec<f64> = trimmed
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::PlyHeader(format!("bad ascii value: {e}")))?;
                if vals.len() < layout.props.len() {
                    return Err(Error::PlyTruncated {
                        expected: layout.count,
                        actual: points.len(),
                    });
                }
                points.push(Vec3::new(vals[layout.x], vals[layout.y], vals[layout.z]));
                if points.len() == layout.count {
                    break;
                }
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let mut skip = vec![0u8; header.prefix_bytes];
            reader
                .read_exact(&mut skip)
                .map_err(|_| Error::PlyTruncated {
                    expected: layout.count,
                    actual: 0,
                })?;
            let mut record = vec![0u8; layout.record_size];
            for i in 0..layout.count {
                if reader.read_exact(&mut record).is_err() {
                    return Err(Error::PlyTruncated {
                        expected: layout.count,
                        actual: i,
                    });
                }
                let get = |prop: usize| {
                    let (ty, off) = layout.props[prop];
                    ty.read_le(&record[off..])
                };
                points.push(Vec3::new(get(layout.x), get(layout.y), get(layout.z)));
            }
        }
    }

    if points.len() < layout.count {
        return Err(Error::PlyTruncated {
            expected: layout.count,
            actual: points.len(),
        });
    }
    Ok(PointCloud::new(points, Frame::World))
}

/// Writes a binary_little_endian PLY with double x/y/z properties.
pub fn write_ply(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property double x\nproperty double y\nproperty double z\nend_header\n",
        cloud.points.len()
    )
    .map_err(io_err)?;
    for p in &cloud.points {
        w.write_all(&p.x.to_le_bytes()).map_err(io_err)?;
        w.write_all(&p.y.to_le_bytes()).map_err(io_err)?;
        w.write_all(&p.z.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn binary_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pts.ply");
        let cloud = PointCloud::new(
            vec![
                Vec3::new(1.5, -2.25, 3.0e-7),
                Vec3::new(f64::MIN_POSITIVE, 1e17, -0.1),
                Vec3::new(0.1 + 0.2, 0.3, 0.7),
            ],
            Frame::World,
        );
        write_ply(&cloud, &path).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back.points.len(), 3);
        for (a, b) in cloud.points.iter().zip(&back.points) {
            assert_eq!(a.x.to_bits(), b.x.to_bits());
            assert_eq!(a.y.to_bits(), b.y.to_bits());
            assert_eq!(a.z.to_bits(), b.z.to_bits());
        }
    }

    #[test]
    fn ascii_with_comments_and_extra_props() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ply");
        let mut f = File::create(&path).unwrap();
        write!(
            f,
            "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 2\n\
             property float x\nproperty float y\nproperty float z\n\
             property uchar red\ncomment mid-header comment\nend_header\n\
             0.5 1.5 -2 255\n1 2 3 0\n"
        )
        .unwrap();
        let cloud = read_ply(&path).unwrap();
        assert_eq!(cloud.points.len(), 2);
        assert_eq!(cloud.points[0], Vec3::new(0.5, 1.5, -2.0));
        assert_eq!(cloud.points[1], Vec3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn truncated_body_names_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ply");
        let mut f = File::create(&path).unwrap();
        write!(
            f,
            "ply\nformat ascii 1.0\nelement vertex 10\n\
             property float x\nproperty float y\nproperty float z\nend_header\n"
        )
        .unwrap();
        for i in 0..7 {
            writeln!(f, "{i} 0 0").unwrap();
        }
        match read_ply(&path) {
            Err(Error::PlyTruncated { expected, actual }) => {
                assert_eq!(expected, 10);
                assert_eq!(actual, 7);
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn unsupported_format_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ply");
        std::fs::write(
            &path,
            "ply\nformat binary_big_endian 1.0\nelement vertex 0\n\
             property float x\nproperty float y\nproperty float z\nend_header\n",
        )
        .unwrap();
        assert!(matches!(read_ply(&path), Err(Error::PlyUnsupported(_))));
    }

    #[test]
    fn malformed_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        std::fs::write(&path, "not a ply\n").unwrap();
        assert!(matches!(read_ply(&path), Err(Error::PlyHeader(_))));
    }

    #[test]
    fn float32_payload_survives_round_trip() {
        // A float32 file read into f64 and written back as double must
        // preserve the float32 values exactly.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f32.ply");
        let mut f = File::create(&path).unwrap();
        write!(
            f,
            "ply\nformat binary_little_endian 1.0\nelement vertex 2\n\
             property float x\nproperty float y\nproperty float z\nend_header\n"
        )
        .unwrap();
        let vals: [f32; 6] = [0.1, 0.2, 0.3, -1.5e-3, 7.25, 1.0e8];
        for v in vals {
            f.write_all(&v.to_le_bytes()).unwrap();
        }
        drop(f);
        let cloud = read_ply(&path).unwrap();
        let path2 = dir.path().join("f32b.ply");
        write_ply(&cloud, &path2).unwrap();
        let back = read_ply(&path2).unwrap();
        assert_eq!(back.points[0].x, vals[0] as f64);
        assert_eq!(back.points[1].z, vals[5] as f64);
    }
}
