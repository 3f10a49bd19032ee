//! Round-trips an exported OBJ through a second, independently written
//! parser (no shared code with the crate's reader) and checks that vertex
//! and triangle counts survive.

use zmono_core::extract::extract_height_mesh;
use zmono_core::field::ZMonoField;
use zmono_core::geom::write_obj;

/// Deliberately minimal line-oriented OBJ reader used only as an oracle.
fn oracle_parse(text: &str) -> (usize, usize, usize) {
    let mut v = 0;
    let mut vt = 0;
    let mut tris = 0;
    for line in text.lines() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.first() {
            Some(&"v") => v += 1,
            Some(&"vt") => vt += 1,
            Some(&"f") => tris += fields.len() - 3, // fan count
            _ => {}
        }
    }
    (v, vt, tris)
}

#[test]
fn exported_obj_reimports_with_matching_counts() {
    let mut field = ZMonoField::constant(16, 80.0, -0.3);
    for gy in 6..10 {
        for gx in 6..10 {
            field.grid[gy * 16 + gx] = 0.4;
        }
    }
    let mesh = extract_height_mesh(&field, 21);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mesh.obj");
    write_obj(&mesh, &path, None).unwrap();

    let text = std::fs::read_to_string(&path).unwrap();
    let (v, vt, tris) = oracle_parse(&text);
    assert_eq!(v, mesh.vertices.len());
    assert_eq!(vt, mesh.vertices.len());
    assert_eq!(tris, mesh.triangles.len());

    // And the crate's own reader agrees with the oracle.
    let back = zmono_core::geom::read_obj(&path).unwrap();
    assert_eq!(back.vertices.len(), v);
    assert_eq!(back.triangles.len(), tris);
    for (a, b) in mesh.vertices.iter().zip(&back.vertices) {
        assert_eq!(a, b);
    }
}
