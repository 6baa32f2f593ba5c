//! Line-oriented mesh files.
//!
//! ```text
//! V T E
//! x y            (V lines)
//! i j k [tag]    (T lines, 0-based, counterclockwise)
//! a b LABEL      (E lines, LABEL in IN | G1 | G2 | HOLE)
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. The optional fourth
//! triangle column is the element subdomain tag.

use std::fmt::Write as _;
use std::path::Path;

use super::{Label, Mesh, MeshError};

pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh, MeshError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| MeshError::Io { path: path.display().to_string(), message: e.to_string() })?;
    parse_mesh(&text)
}

fn perr(line: usize, message: impl Into<String>) -> MeshError {
    MeshError::Parse { line, message: message.into() }
}

fn fields<T: std::str::FromStr>(line: usize, s: &str, min: usize, max: usize) -> Result<Vec<T>, MeshError> {
    let toks: Vec<&str> = s.split_whitespace().collect();
    if toks.len() < min || toks.len() > max {
        return Err(perr(line, format!("expected {min}..={max} fields, found {}", toks.len())));
    }
    toks.iter()
        .map(|t| t.parse::<T>().map_err(|_| perr(line, format!("cannot parse `{t}`"))))
        .collect()
}

pub fn parse_mesh(text: &str) -> Result<Mesh, MeshError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (hline, header) = lines.next().ok_or_else(|| perr(1, "missing header `V T E`"))?;
    let counts: Vec<usize> = fields(hline, header, 3, 3)?;
    let (nv, nt, ne) = (counts[0], counts[1], counts[2]);

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (ln, l) = lines.next().ok_or_else(|| perr(hline, "file ends inside vertex block"))?;
        let xy: Vec<f64> = fields(ln, l, 2, 2)?;
        if !xy.iter().all(|v| v.is_finite()) {
            return Err(perr(ln, "non-finite coordinate"));
        }
        vertices.push([xy[0], xy[1]]);
    }

    let mut triangles = Vec::with_capacity(nt);
    let mut tags = Vec::with_capacity(nt);
    let mut tri_lines = Vec::with_capacity(nt);
    for _ in 0..nt {
        let (ln, l) = lines.next().ok_or_else(|| perr(hline, "file ends inside triangle block"))?;
        let ijk: Vec<usize> = fields(ln, l, 3, 4)?;
        if let Some(&v) = ijk[..3].iter().find(|&&v| v >= nv) {
            return Err(perr(ln, format!("vertex index {v} out of range")));
        }
        let tag = ijk.get(3).copied().unwrap_or(0);
        let tag = u8::try_from(tag).map_err(|_| perr(ln, format!("tag {tag} out of range")))?;
        triangles.push([ijk[0], ijk[1], ijk[2]]);
        tags.push(tag);
        tri_lines.push(ln);
    }

    let mut edges = Vec::with_capacity(ne);
    for _ in 0..ne {
        let (ln, l) = lines.next().ok_or_else(|| perr(hline, "file ends inside edge block"))?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(perr(ln, format!("expected `a b LABEL`, found {} fields", toks.len())));
        }
        let a: usize = toks[0].parse().map_err(|_| perr(ln, format!("cannot parse `{}`", toks[0])))?;
        let b: usize = toks[1].parse().map_err(|_| perr(ln, format!("cannot parse `{}`", toks[1])))?;
        if a >= nv || b >= nv {
            return Err(perr(ln, "edge vertex out of range"));
        }
        let label: Label = toks[2].parse().map_err(|e: MeshError| perr(ln, e.to_string()))?;
        edges.push(([a, b], label));
    }
    if let Some((ln, _)) = lines.next() {
        return Err(perr(ln, "trailing content after edge block"));
    }

    Mesh::with_tags(vertices, triangles, edges, tags).map_err(|e| match e {
        MeshError::InvertedTriangle { triangle, area } => perr(
            tri_lines[triangle],
            format!("inverted triangle {triangle} (signed area {area:e})"),
        ),
        other => other,
    })
}

/// Serializes a mesh; coordinates use the shortest round-trip representation.
pub fn mesh_to_string(mesh: &Mesh) -> String {
    let mut s = String::new();
    let tagged = mesh.tags().iter().any(|&t| t != 0);
    let _ = writeln!(s, "{} {} {}", mesh.num_vertices(), mesh.num_triangles(), mesh.boundary_edges().len());
    for p in mesh.vertices() {
        let _ = writeln!(s, "{} {}", p[0], p[1]);
    }
    for (tri, tag) in mesh.triangles().iter().zip(mesh.tags()) {
        if tagged {
            let _ = writeln!(s, "{} {} {} {}", tri[0], tri[1], tri[2], tag);
        } else {
            let _ = writeln!(s, "{} {} {}", tri[0], tri[1], tri[2]);
        }
    }
    for e in mesh.boundary_edges() {
        let _ = writeln!(s, "{} {} {}", e.vertices[0], e.vertices[1], e.label);
    }
    s
}

pub fn write_mesh(path: impl AsRef<Path>, mesh: &Mesh) -> Result<(), MeshError> {
    let path = path.as_ref();
    std::fs::write(path, mesh_to_string(mesh))
        .map_err(|e| MeshError::Io { path: path.display().to_string(), message: e.to_string() })
}
