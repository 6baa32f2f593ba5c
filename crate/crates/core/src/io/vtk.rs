//! Legacy ASCII VTK unstructured grids: writer, reader and structural check.

use std::fmt::Write as _;
use std::path::Path;

use crate::mesh::Mesh;

const TRIANGLE: u8 = 5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum VtkError {
    #[error("field `{name}` has {got} values, mesh has {expected} vertices")]
    FieldLength { name: String, expected: usize, got: usize },
    #[error("field name `{0}` must be non-empty and free of whitespace")]
    FieldName(String),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

/// Nodal data attached to a snapshot.
#[derive(Debug, Clone, PartialEq)]
pub enum Field<'a> {
    Scalar(&'a str, &'a [f64]),
    Vector(&'a str, &'a [[f64; 2]]),
}

impl Field<'_> {
    fn name(&self) -> &str {
        match self {
            Field::Scalar(n, _) | Field::Vector(n, _) => n,
        }
    }

    fn len(&self) -> usize {
        match self {
            Field::Scalar(_, v) => v.len(),
            Field::Vector(_, v) => v.len(),
        }
    }
}

/// Nine significant digits with a two-digit signed exponent, as C's `%.8e`.
fn sci(x: f64) -> String {
    let s = format!("{x:.8e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mantissa}e{sign}{:02}", exp.abs())
}

pub fn vtk_to_string(mesh: &Mesh, title: &str, fields: &[Field]) -> Result<String, VtkError> {
    let n = mesh.num_vertices();
    for f in fields {
        let name = f.name();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(VtkError::FieldName(name.into()));
        }
        if f.len() != n {
            return Err(VtkError::FieldLength { name: name.into(), expected: n, got: f.len() });
        }
    }
    let title: String = title.chars().map(|c| if c == '\n' { ' ' } else { c }).take(255).collect();
    let mut s = String::new();
    let _ = writeln!(s, "# vtk DataFile Version 3.0\n{title}\nASCII\nDATASET UNSTRUCTURED_GRID");
    let _ = writeln!(s, "POINTS {n} double");
    for p in mesh.vertices() {
        let _ = writeln!(s, "{} {} {}", sci(p[0]), sci(p[1]), sci(0.0));
    }
    let t = mesh.num_triangles();
    let _ = writeln!(s, "CELLS {t} {}", 4 * t);
    for tri in mesh.triangles() {
        let _ = writeln!(s, "3 {} {} {}", tri[0], tri[1], tri[2]);
    }
    let _ = writeln!(s, "CELL_TYPES {t}");
    for _ in 0..t {
        let _ = writeln!(s, "{TRIANGLE}");
    }
    if !fields.is_empty() {
        let _ = writeln!(s, "POINT_DATA {n}");
    }
    for f in fields {
        match f {
            Field::Scalar(name, values) => {
                let _ = writeln!(s, "SCALARS {name} double 1\nLOOKUP_TABLE default");
                for v in *values {
                    let _ = writeln!(s, "{}", sci(*v));
                }
            }
            Field::Vector(name, values) => {
                let _ = writeln!(s, "VECTORS {name} double");
                for v in *values {
                    let _ = writeln!(s, "{} {} {}", sci(v[0]), sci(v[1]), sci(0.0));
                }
            }
        }
    }
    Ok(s)
}

pub fn write_vtk(path: impl AsRef<Path>, mesh: &Mesh, title: &str, fields: &[Field]) -> Result<(), VtkError> {
    let path = path.as_ref();
    let text = vtk_to_string(mesh, title, fields)?;
    std::fs::write(path, text).map_err(|e| VtkError::Io { path: path.display().to_string(), message: e.to_string() })
}

/// Contents of a file in the subset written by [`vtk_to_string`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VtkData {
    pub title: String,
    pub points: Vec<[f64; 3]>,
    pub cells: Vec<Vec<usize>>,
    pub cell_types: Vec<u8>,
    pub scalars: Vec<(String, Vec<f64>)>,
    pub vectors: Vec<(String, Vec<[f64; 3]>)>,
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn next_line(&mut self, what: &str) -> Result<&'a str, VtkError> {
        for (i, l) in self.inner.by_ref() {
            self.line = i + 1;
            if !l.trim().is_empty() {
                return Ok(l.trim());
            }
        }
        Err(VtkError::Format { line: self.line + 1, message: format!("unexpected end of file, expected {what}") })
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, VtkError> {
        Err(VtkError::Format { line: self.line, message: message.into() })
    }

    fn numbers<T: std::str::FromStr>(&mut self, what: &str, count: usize) -> Result<Vec<T>, VtkError> {
        let l = self.next_line(what)?;
        let parsed: Result<Vec<T>, _> = l.split_whitespace().map(str::parse).collect();
        match parsed {
            Ok(v) if v.len() == count => Ok(v),
            Ok(v) => self.err(format!("{what}: expected {count} values, found {}", v.len())),
            Err(_) => self.err(format!("{what}: malformed number in `{l}`")),
        }
    }

    fn header(&mut self, keyword: &str, arity: usize) -> Result<Vec<&'a str>, VtkError> {
        let l = self.next_line(keyword)?;
        let words: Vec<&str> = l.split_whitespace().collect();
        if words.first() != Some(&keyword) || words.len() != arity + 1 {
            return self.err(format!("expected `{keyword}` section with {arity} arguments, found `{l}`"));
        }
        Ok(words[1..].to_vec())
    }

    fn count(&self, word: &str) -> Result<usize, VtkError> {
        word.parse().or_else(|_| self.err(format!("bad count `{word}`")))
    }
}

/// Parses and structurally validates legacy ASCII unstructured-grid text:
/// section order, declared counts, connectivity bounds and data sizes.
pub fn read_vtk_str(text: &str) -> Result<VtkData, VtkError> {
    let mut it = Lines { inner: text.lines().enumerate(), line: 0 };
    let version = it.next_line("version line")?;
    if !version.starts_with("# vtk DataFile Version") {
        return it.err("missing `# vtk DataFile Version` header");
    }
    // the title line may be blank, so it is read raw
    let title = match it.inner.next() {
        Some((i, l)) => {
            it.line = i + 1;
            l.to_string()
        }
        None => return it.err("missing title line"),
    };
    if it.next_line("ASCII")? != "ASCII" {
        return it.err("only ASCII files are supported");
    }
    if it.next_line("DATASET")? != "DATASET UNSTRUCTURED_GRID" {
        return it.err("expected `DATASET UNSTRUCTURED_GRID`");
    }
    let words = it.header("POINTS", 2)?;
    let n = it.count(words[0])?;
    let mut data = VtkData { title, ..VtkData::default() };
    for _ in 0..n {
        let p: Vec<f64> = it.numbers("point", 3)?;
        data.points.push([p[0], p[1], p[2]]);
    }
    let words = it.header("CELLS", 2)?;
    let (t, size) = (it.count(words[0])?, it.count(words[1])?);
    let mut used = 0;
    for _ in 0..t {
        let l = it.next_line("cell")?;
        let ids: Result<Vec<usize>, _> = l.split_whitespace().map(str::parse).collect();
        let Ok(ids) = ids else { return it.err(format!("malformed cell `{l}`")) };
        if ids.is_empty() || ids[0] + 1 != ids.len() {
            return it.err(format!("cell `{l}` does not match its vertex count"));
        }
        if let Some(&bad) = ids[1..].iter().find(|&&v| v >= n) {
            return it.err(format!("cell references point {bad} of {n}"));
        }
        used += ids.len();
        data.cells.push(ids[1..].to_vec());
    }
    if used != size {
        return it.err(format!("CELLS size {size} does not match the {used} listed integers"));
    }
    let words = it.header("CELL_TYPES", 1)?;
    if it.count(words[0])? != t {
        return it.err("CELL_TYPES count differs from CELLS count");
    }
    for cell in 0..t {
        let ty: u8 = it.numbers("cell type", 1)?[0];
        let expected = match data.cells[cell].len() {
            3 => TRIANGLE,
            _ => 0,
        };
        if ty != expected {
            return it.err(format!("cell {cell} has type {ty}, expected a triangle (5)"));
        }
        data.cell_types.push(ty);
    }
    let Ok(l) = it.next_line("POINT_DATA") else { return Ok(data) };
    let words: Vec<&str> = l.split_whitespace().collect();
    if words.len() != 2 || words[0] != "POINT_DATA" || it.count(words[1])? != n {
        return it.err(format!("expected `POINT_DATA {n}`, found `{l}`"));
    }
    loop {
        let Ok(l) = it.next_line("data") else { break };
        let words: Vec<&str> = l.split_whitespace().collect();
        match words[..] {
            ["SCALARS", name, _, "1"] | ["SCALARS", name, _] => {
                if it.next_line("LOOKUP_TABLE")? != "LOOKUP_TABLE default" {
                    return it.err("expected `LOOKUP_TABLE default`");
                }
                let values = (0..n).map(|_| it.numbers::<f64>("scalar", 1).map(|v| v[0])).collect::<Result<_, _>>()?;
                data.scalars.push((name.to_string(), values));
            }
            ["VECTORS", name, _] => {
                let values = (0..n)
                    .map(|_| it.numbers::<f64>("vector", 3).map(|v| [v[0], v[1], v[2]]))
                    .collect::<Result<_, _>>()?;
                data.vectors.push((name.to_string(), values));
            }
            _ => return it.err(format!("unsupported data section `{l}`")),
        }
    }
    Ok(data)
}

pub fn read_vtk(path: impl AsRef<Path>) -> Result<VtkData, VtkError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| VtkError::Io { path: path.display().to_string(), message: e.to_string() })?;
    read_vtk_str(&text)
}

/// Structural check of a file's text.
pub fn validate_vtk(text: &str) -> Result<(), VtkError> {
    read_vtk_str(text).map(|_| ())
}
