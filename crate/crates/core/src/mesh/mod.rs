//! Planar triangulations with labeled boundary segments.
//!
//! A [`Mesh`] is an immutable value: every operation that moves vertices
//! returns a new, revalidated mesh with the same connectivity.

mod file;
mod quality;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

pub use file::{load_mesh, mesh_to_string, parse_mesh, write_mesh};
pub use quality::{triangle_angles, QualityReport};

/// Boundary segment label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    /// Inflow boundary: Dirichlet data for the concentrations.
    GammaIn,
    /// Fixed no-flux wall.
    Gamma1,
    /// Deformable boundary carrying the potential Dirichlet datum.
    Gamma2,
    /// Interior hole boundary (homogeneous Neumann, never moved).
    Hole,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::GammaIn, Label::Gamma1, Label::Gamma2, Label::Hole];

    /// Token used in mesh and config files.
    pub fn token(self) -> &'static str {
        match self {
            Label::GammaIn => "IN",
            Label::Gamma1 => "G1",
            Label::Gamma2 => "G2",
            Label::Hole => "HOLE",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Label {
    type Err = MeshError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "IN" => Ok(Label::GammaIn),
            "G1" => Ok(Label::Gamma1),
            "G2" => Ok(Label::Gamma2),
            "HOLE" => Ok(Label::Hole),
            other => Err(MeshError::UnknownLabel(other.to_string())),
        }
    }
}

/// Selector for [`Mesh::boundary_measure`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundarySelector {
    All,
    Only(Label),
}

/// A boundary edge, oriented so that the domain lies to its left
/// (the edge follows the counterclockwise order of its triangle).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryEdge {
    pub vertices: [usize; 2],
    pub label: Label,
    /// Index of the single triangle owning this edge.
    pub triangle: usize,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MeshError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("inverted triangle {triangle} (signed area {area:e})")]
    InvertedTriangle { triangle: usize, area: f64 },
    #[error("triangle {triangle} references vertex {vertex} out of range")]
    VertexOutOfRange { triangle: usize, vertex: usize },
    #[error("vertex {0} is not referenced by any triangle")]
    UnusedVertex(usize),
    #[error("boundary edge ({0}, {1}) carries no label")]
    UnlabeledEdge(usize, usize),
    #[error("labeled edge ({0}, {1}) is not on the boundary")]
    NotBoundaryEdge(usize, usize),
    #[error("edge ({0}, {1}) is labeled more than once")]
    DuplicateLabel(usize, usize),
    #[error("edge ({0}, {1}) is shared by more than two triangles")]
    NonManifoldEdge(usize, usize),
    #[error("unknown boundary label `{0}`")]
    UnknownLabel(String),
    #[error("field has {got} entries, mesh has {expected} vertices")]
    FieldLength { expected: usize, got: usize },
    #[error("element tag array has {got} entries, mesh has {expected} triangles")]
    TagLength { expected: usize, got: usize },
    #[error("sigmoid filter needs y_min < y_max (got {0} >= {1})")]
    FilterRange(f64, f64),
    #[error("{0}")]
    Geometry(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    boundary: Vec<BoundaryEdge>,
    /// Per-element subdomain tag; tag 1 marks the design subdomain.
    tags: Vec<u8>,
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

pub(crate) fn signed_area(p: [f64; 2], q: [f64; 2], r: [f64; 2]) -> f64 {
    0.5 * ((q[0] - p[0]) * (r[1] - p[1]) - (r[0] - p[0]) * (q[1] - p[1]))
}

impl Mesh {
    /// Builds and validates a mesh. Boundary edges may be given in either
    /// orientation; they are stored following their triangle's CCW order.
    pub fn new(
        vertices: Vec<[f64; 2]>,
        triangles: Vec<[usize; 3]>,
        labeled_edges: Vec<([usize; 2], Label)>,
    ) -> Result<Mesh, MeshError> {
        let ntri = triangles.len();
        Self::with_tags(vertices, triangles, labeled_edges, vec![0; ntri])
    }

    pub fn with_tags(
        vertices: Vec<[f64; 2]>,
        triangles: Vec<[usize; 3]>,
        labeled_edges: Vec<([usize; 2], Label)>,
        tags: Vec<u8>,
    ) -> Result<Mesh, MeshError> {
        if tags.len() != triangles.len() {
            return Err(MeshError::TagLength { expected: triangles.len(), got: tags.len() });
        }
        let nv = vertices.len();
        let mut used = vec![false; nv];
        // directed edge (CCW) -> owning triangle, keyed by the undirected pair
        let mut owners: HashMap<(usize, usize), Vec<(usize, [usize; 2])>> = HashMap::new();
        for (t, tri) in triangles.iter().enumerate() {
            for &v in tri {
                if v >= nv {
                    return Err(MeshError::VertexOutOfRange { triangle: t, vertex: v });
                }
                used[v] = true;
            }
            for k in 0..3 {
                let a = tri[k];
                let b = tri[(k + 1) % 3];
                owners.entry(edge_key(a, b)).or_default().push((t, [a, b]));
            }
        }
        if let Some(v) = used.iter().position(|u| !u) {
            return Err(MeshError::UnusedVertex(v));
        }
        for (t, tri) in triangles.iter().enumerate() {
            let area = signed_area(vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]);
            if !(area > 0.0) {
                return Err(MeshError::InvertedTriangle { triangle: t, area });
            }
        }
        for (&(a, b), own) in &owners {
            if own.len() > 2 {
                return Err(MeshError::NonManifoldEdge(a, b));
            }
        }

        let mut labels: HashMap<(usize, usize), Label> = HashMap::new();
        for ([a, b], label) in labeled_edges {
            let key = edge_key(a, b);
            match owners.get(&key) {
                Some(own) if own.len() == 1 => {}
                _ => return Err(MeshError::NotBoundaryEdge(a, b)),
            }
            if labels.insert(key, label).is_some() {
                return Err(MeshError::DuplicateLabel(a, b));
            }
        }
        let mut boundary = Vec::new();
        let mut keys: Vec<_> = owners.iter().filter(|(_, o)| o.len() == 1).collect();
        // deterministic order: by owning triangle then local position
        keys.sort_by_key(|(k, o)| (o[0].0, **k));
        for (key, own) in keys {
            let label = *labels.get(key).ok_or(MeshError::UnlabeledEdge(key.0, key.1))?;
            let (t, dir) = own[0];
            boundary.push(BoundaryEdge { vertices: dir, label, triangle: t });
        }

        Ok(Mesh { vertices, triangles, boundary, tags })
    }

    fn check_orientation(&self) -> Result<(), MeshError> {
        for t in 0..self.triangles.len() {
            let area = self.signed_area(t);
            if !(area > 0.0) {
                return Err(MeshError::InvertedTriangle { triangle: t, area });
            }
        }
        Ok(())
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_edges(&self) -> &[BoundaryEdge] {
        &self.boundary
    }

    pub fn tags(&self) -> &[u8] {
        &self.tags
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// Element indicator of the design subdomain (tag 1).
    pub fn subdomain_indicator(&self) -> Vec<bool> {
        self.tags.iter().map(|&t| t == 1).collect()
    }

    pub fn triangle_points(&self, t: usize) -> [[f64; 2]; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn signed_area(&self, t: usize) -> f64 {
        let [p, q, r] = self.triangle_points(t);
        signed_area(p, q, r)
    }

    /// Total area (sum of triangle areas).
    pub fn domain_volume(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.signed_area(t)).sum()
    }

    pub fn edge_length(&self, e: &BoundaryEdge) -> f64 {
        let [a, b] = e.vertices;
        dist(self.vertices[a], self.vertices[b])
    }

    /// Unit tangent (along the stored orientation) and outward unit normal.
    pub fn edge_frame(&self, e: &BoundaryEdge) -> ([f64; 2], [f64; 2]) {
        let [a, b] = e.vertices;
        let (pa, pb) = (self.vertices[a], self.vertices[b]);
        let len = dist(pa, pb);
        let t = [(pb[0] - pa[0]) / len, (pb[1] - pa[1]) / len];
        // rotate by -pi/2: the domain is on the left of a CCW edge
        (t, [t[1], -t[0]])
    }

    pub fn boundary_measure(&self, which: BoundarySelector) -> f64 {
        self.boundary
            .iter()
            .filter(|e| match which {
                BoundarySelector::All => true,
                BoundarySelector::Only(l) => e.label == l,
            })
            .map(|e| self.edge_length(e))
            .sum()
    }

    /// `sqrt(4 |Omega| / (sqrt(3) N_e))`: edge length of an equilateral
    /// triangle with the mean element area.
    pub fn characteristic_length(&self) -> f64 {
        (4.0 * self.domain_volume() / (3f64.sqrt() * self.triangles.len() as f64)).sqrt()
    }

    /// Vertex mask of nodes touched by an edge carrying any of `labels`.
    pub fn nodes_on(&self, labels: &[Label]) -> Vec<bool> {
        let mut mask = vec![false; self.vertices.len()];
        for e in self.boundary.iter().filter(|e| labels.contains(&e.label)) {
            mask[e.vertices[0]] = true;
            mask[e.vertices[1]] = true;
        }
        mask
    }

    /// Vertex mask of every boundary node.
    pub fn boundary_nodes(&self) -> Vec<bool> {
        self.nodes_on(&Label::ALL)
    }

    pub fn bounding_box(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &self.vertices {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }

    pub fn min_edge(&self) -> f64 {
        self.triangles
            .iter()
            .flat_map(|tri| {
                (0..3).map(move |k| (tri[k], tri[(k + 1) % 3]))
            })
            .map(|(a, b)| dist(self.vertices[a], self.vertices[b]))
            .fold(f64::INFINITY, f64::min)
    }

    /// Same connectivity, labels and tags with new coordinates; revalidates orientation.
    pub fn with_vertices(&self, vertices: Vec<[f64; 2]>) -> Result<Mesh, MeshError> {
        if vertices.len() != self.vertices.len() {
            return Err(MeshError::FieldLength { expected: self.vertices.len(), got: vertices.len() });
        }
        let mesh = Mesh {
            vertices,
            triangles: self.triangles.clone(),
            boundary: self.boundary.clone(),
            tags: self.tags.clone(),
        };
        mesh.check_orientation()?;
        Ok(mesh)
    }

    /// Moves every vertex by `step * field(x)`.
    pub fn deform(&self, field: &[[f64; 2]], step: f64) -> Result<Mesh, MeshError> {
        if field.len() != self.vertices.len() {
            return Err(MeshError::FieldLength { expected: self.vertices.len(), got: field.len() });
        }
        let moved = self
            .vertices
            .iter()
            .zip(field)
            .map(|(p, z)| [p[0] + step * z[0], p[1] + step * z[1]])
            .collect();
        self.with_vertices(moved)
    }

    /// Uniformly scales all coordinates.
    pub fn scaled(&self, s: f64) -> Result<Mesh, MeshError> {
        self.with_vertices(self.vertices.iter().map(|p| [s * p[0], s * p[1]]).collect())
    }

    /// Vertex adjacency lists (sorted, deduplicated).
    pub fn vertex_neighbors(&self) -> Vec<Vec<usize>> {
        let mut nb = vec![Vec::new(); self.vertices.len()];
        for tri in &self.triangles {
            for k in 0..3 {
                let a = tri[k];
                nb[a].push(tri[(k + 1) % 3]);
                nb[a].push(tri[(k + 2) % 3]);
            }
        }
        for l in &mut nb {
            l.sort_unstable();
            l.dedup();
        }
        nb
    }

    /// Triangles incident to each vertex.
    pub fn vertex_triangles(&self) -> Vec<Vec<usize>> {
        let mut vt = vec![Vec::new(); self.vertices.len()];
        for (t, tri) in self.triangles.iter().enumerate() {
            for &v in tri {
                vt[v].push(t);
            }
        }
        vt
    }

    pub fn quality(&self, theta0: f64) -> QualityReport {
        quality::assess(self, theta0)
    }

    /// Laplacian smoothing of interior vertices. Each vertex moves to the
    /// barycenter of its neighbors unless the move would invert an incident
    /// triangle. Boundary vertices never move.
    pub fn smooth_interior(&self, iterations: usize) -> Mesh {
        let on_boundary = self.boundary_nodes();
        let neighbors = self.vertex_neighbors();
        let incident = self.vertex_triangles();
        let mut pts = self.vertices.clone();
        for _ in 0..iterations {
            for v in 0..pts.len() {
                if on_boundary[v] || neighbors[v].is_empty() {
                    continue;
                }
                let n = neighbors[v].len() as f64;
                let (sx, sy) = neighbors[v]
                    .iter()
                    .fold((0.0, 0.0), |(sx, sy), &w| (sx + pts[w][0], sy + pts[w][1]));
                let target = [sx / n, sy / n];
                let old = pts[v];
                pts[v] = target;
                let ok = incident[v].iter().all(|&t| {
                    let [a, b, c] = self.triangles[t];
                    signed_area(pts[a], pts[b], pts[c]) > 0.0
                });
                if !ok {
                    pts[v] = old;
                }
            }
        }
        Mesh {
            vertices: pts,
            triangles: self.triangles.clone(),
            boundary: self.boundary.clone(),
            tags: self.tags.clone(),
        }
    }

    /// Evens out vertex spacing along boundary runs of the given labels. A
    /// vertex whose two boundary edges both carry one of `labels` and turn by
    /// at most `max_turn` radians moves to the arc-length midpoint of the
    /// path through its two boundary neighbors. With `max_turn = 0` only
    /// straight runs are touched and the boundary as a set is unchanged.
    pub fn slide_boundary(&self, labels: &[Label], max_turn: f64, iterations: usize) -> Mesh {
        let n = self.vertices.len();
        let mut ends: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut eligible = vec![0u8; n];
        for e in &self.boundary {
            let [a, b] = e.vertices;
            ends[a].push(b);
            ends[b].push(a);
            if labels.contains(&e.label) {
                eligible[a] += 1;
                eligible[b] += 1;
            }
        }
        let incident = self.vertex_triangles();
        let mut pts = self.vertices.clone();
        for _ in 0..iterations {
            for v in 0..n {
                if eligible[v] != 2 || ends[v].len() != 2 {
                    continue;
                }
                let (p, a, b) = (pts[v], pts[ends[v][0]], pts[ends[v][1]]);
                let (pa, pb) = ([a[0] - p[0], a[1] - p[1]], [b[0] - p[0], b[1] - p[1]]);
                let (la, lb) = (dist(p, a), dist(p, b));
                let cross = pa[0] * pb[1] - pa[1] * pb[0];
                let dot = pa[0] * pb[0] + pa[1] * pb[1];
                // turning angle is pi minus the angle between pa and pb
                let turn = std::f64::consts::PI - cross.abs().atan2(dot);
                let straight = cross.abs() <= 1e-12 * la * lb && dot < 0.0;
                if !(straight || (max_turn > 0.0 && turn <= max_turn)) {
                    continue;
                }
                let half = 0.5 * (la + lb);
                let target = if half <= la {
                    [p[0] + pa[0] * (la - half) / la, p[1] + pa[1] * (la - half) / la]
                } else {
                    [p[0] + pb[0] * (half - la) / lb, p[1] + pb[1] * (half - la) / lb]
                };
                let old = pts[v];
                pts[v] = if straight { [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])] } else { target };
                let ok = incident[v].iter().all(|&t| {
                    let [i, j, k] = self.triangles[t];
                    signed_area(pts[i], pts[j], pts[k]) > 0.0
                });
                if !ok {
                    pts[v] = old;
                }
            }
        }
        Mesh {
            vertices: pts,
            triangles: self.triangles.clone(),
            boundary: self.boundary.clone(),
            tags: self.tags.clone(),
        }
    }

    /// Area-weighted outward unit normal at each node on the given labels
    /// (zero elsewhere).
    pub fn nodal_normals(&self, labels: &[Label]) -> Vec<[f64; 2]> {
        let mut n = vec![[0.0; 2]; self.vertices.len()];
        for e in self.boundary.iter().filter(|e| labels.contains(&e.label)) {
            let len = self.edge_length(e);
            let (_, normal) = self.edge_frame(e);
            for &v in &e.vertices {
                n[v][0] += len * normal[0];
                n[v][1] += len * normal[1];
            }
        }
        for v in &mut n {
            let norm = v[0].hypot(v[1]);
            if norm > 0.0 {
                v[0] /= norm;
                v[1] /= norm;
            }
        }
        n
    }
}

pub(crate) fn dist(p: [f64; 2], q: [f64; 2]) -> f64 {
    (q[0] - p[0]).hypot(q[1] - p[1])
}

/// Two-branch logistic factor vanishing at `y_min` and `y_max`.
pub fn sigmoid_factor(y: f64, m: f64, y_min: f64, y_max: f64) -> f64 {
    if y < 0.5 * (y_min + y_max) {
        1.0 / (1.0 + (-m * (y - y_min)).exp())
    } else {
        1.0 / (1.0 + (m * (y - y_max)).exp())
    }
}

/// Damps the vertical component of a nodal vector field near `y_min` and
/// `y_max`; the horizontal component is left untouched.
pub fn sigmoid_filter(
    mesh: &Mesh,
    field: &[[f64; 2]],
    m: f64,
    y_min: f64,
    y_max: f64,
) -> Result<Vec<[f64; 2]>, MeshError> {
    if !(y_min < y_max) {
        return Err(MeshError::FilterRange(y_min, y_max));
    }
    if field.len() != mesh.num_vertices() {
        return Err(MeshError::FieldLength { expected: mesh.num_vertices(), got: field.len() });
    }
    Ok(mesh
        .vertices()
        .iter()
        .zip(field)
        .map(|(p, z)| [z[0], sigmoid_factor(p[1], m, y_min, y_max) * z[1]])
        .collect())
}
