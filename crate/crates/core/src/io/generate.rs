//! Structured generators for the square, comb, porous and wavy domains.
//!
//! All generators share the convention of the left edge being the inflow
//! boundary, the straight top and bottom walls of the fixed part being
//! `G1`, and the remaining (deformable) boundary being `G2`. Elements right
//! of `x = 0.7` carry subdomain tag 1 on the comb and porous domains.

use std::collections::{HashMap, VecDeque};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mesh::{Label, Mesh, MeshError};

/// Named domain families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Square,
    Comb,
    Porous,
    Wavy,
}

impl Domain {
    pub const ALL: [Domain; 4] = [Domain::Square, Domain::Comb, Domain::Porous, Domain::Wavy];

    pub fn name(self) -> &'static str {
        match self {
            Domain::Square => "square",
            Domain::Comb => "comb",
            Domain::Porous => "porous",
            Domain::Wavy => "wavy",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = MeshError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Domain::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| MeshError::Geometry(format!("unknown domain `{s}` (expected square, comb, porous or wavy)")))
    }
}

/// Builds the named domain. `resolution` is the number of vertices per side
/// for `square`, `porous` and `wavy` (across the short side) and the number
/// of cells per 0.1 length units for `comb`. `seed` only affects `porous`.
pub fn generate_domain(domain: Domain, resolution: usize, seed: u64) -> Result<Mesh, MeshError> {
    match domain {
        Domain::Square => square(resolution, 1.0),
        Domain::Comb => comb(resolution),
        Domain::Porous => porous(resolution, &PorousParams { seed, ..PorousParams::default() }),
        Domain::Wavy => wavy(resolution),
    }
}

fn check_resolution(resolution: usize) -> Result<(), MeshError> {
    if resolution < 2 {
        return Err(MeshError::Geometry(format!("resolution must be at least 2 (got {resolution})")));
    }
    Ok(())
}

/// Union-jack triangulation of a cell grid. `keep(i, j)` selects cells;
/// `point(i, j)` places grid vertex `(i, j)`. Unreferenced vertices are
/// dropped and the boundary is labeled by `label(midpoint)`.
fn grid_mesh(
    nx: usize,
    ny: usize,
    keep: impl Fn(usize, usize) -> bool,
    point: impl Fn(usize, usize) -> [f64; 2],
    label: impl Fn([f64; 2]) -> Label,
    tag: impl Fn([f64; 2]) -> u8,
    best_diagonal: bool,
) -> Result<Mesh, MeshError> {
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let pts: Vec<[f64; 2]> = (0..=ny).flat_map(|j| (0..=nx).map(move |i| (i, j))).map(|(i, j)| point(i, j)).collect();
    let mut triangles = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            if !keep(i, j) {
                continue;
            }
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            let main = if best_diagonal {
                let q = |t: [usize; 3]| crate::mesh::triangle_angles([pts[t[0]], pts[t[1]], pts[t[2]]]);
                let min_of = |x: [[usize; 3]; 2]| {
                    x.iter().flat_map(|t| q(*t)).fold(f64::INFINITY, f64::min)
                };
                min_of([[a, b, c], [a, c, d]]) >= min_of([[a, b, d], [b, c, d]])
            } else {
                (i + j) % 2 == 0
            };
            if main {
                triangles.push([a, b, c]);
                triangles.push([a, c, d]);
            } else {
                triangles.push([a, b, d]);
                triangles.push([b, c, d]);
            }
        }
    }
    finish(pts, triangles, label, tag)
}

/// Compacts vertices, finds and labels the boundary, and tags elements.
fn finish(
    pts: Vec<[f64; 2]>,
    mut triangles: Vec<[usize; 3]>,
    label: impl Fn([f64; 2]) -> Label,
    tag: impl Fn([f64; 2]) -> u8,
) -> Result<Mesh, MeshError> {
    let mut remap = vec![usize::MAX; pts.len()];
    let mut vertices = Vec::new();
    for tri in &mut triangles {
        for v in tri.iter_mut() {
            if remap[*v] == usize::MAX {
                remap[*v] = vertices.len();
                vertices.push(pts[*v]);
            }
            *v = remap[*v];
        }
    }
    let mut count: HashMap<(usize, usize), usize> = HashMap::new();
    for tri in &triangles {
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            *count.entry((a.min(b), a.max(b))).or_default() += 1;
        }
    }
    let mut edges: Vec<_> = count.into_iter().filter(|(_, n)| *n == 1).map(|(k, _)| k).collect();
    edges.sort_unstable();
    let labeled = edges
        .into_iter()
        .map(|(a, b)| {
            let mid = [0.5 * (vertices[a][0] + vertices[b][0]), 0.5 * (vertices[a][1] + vertices[b][1])];
            ([a, b], label(mid))
        })
        .collect();
    let tags = triangles
        .iter()
        .map(|t| {
            let c = [
                (vertices[t[0]][0] + vertices[t[1]][0] + vertices[t[2]][0]) / 3.0,
                (vertices[t[0]][1] + vertices[t[1]][1] + vertices[t[2]][1]) / 3.0,
            ];
            tag(c)
        })
        .collect();
    Mesh::with_tags(vertices, triangles, labeled, tags)
}

/// `[0, side]^2` with `resolution` vertices per side: left `IN`, right `G2`,
/// top and bottom `G1`.
pub fn square(resolution: usize, side: f64) -> Result<Mesh, MeshError> {
    check_resolution(resolution)?;
    if !(side > 0.0) {
        return Err(MeshError::Geometry(format!("side must be positive (got {side})")));
    }
    let n = resolution - 1;
    let h = side / n as f64;
    let tol = 1e-9 * side;
    grid_mesh(
        n,
        n,
        |_, _| true,
        |i, j| [if i == n { side } else { i as f64 * h }, if j == n { side } else { j as f64 * h }],
        |m| {
            if m[0] < tol {
                Label::GammaIn
            } else if m[0] > side - tol {
                Label::Gamma2
            } else {
                Label::Gamma1
            }
        },
        |_| 0,
        false,
    )
}

/// Outline of the comb domain, counterclockwise.
pub const COMB_OUTLINE: [[f64; 2]; 18] = [
    [0.0, 0.0],
    [0.7, 0.0],
    [1.2, 0.0],
    [1.2, 0.2],
    [0.8, 0.2],
    [0.8, 0.4],
    [1.2, 0.4],
    [1.2, 0.6],
    [0.8, 0.6],
    [0.8, 0.8],
    [1.2, 0.8],
    [1.2, 1.0],
    [0.8, 1.0],
    [0.8, 1.2],
    [1.2, 1.2],
    [1.2, 1.4],
    [0.7, 1.4],
    [0.0, 1.4],
];

fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = poly.len();
    for k in 0..n {
        let (a, b) = (poly[k], poly[(k + 1) % n]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Fixed rectangle `[0, 0.7] x [0, 1.4]` with a four-toothed comb attached on
/// the right. `resolution` cells per 0.1 length units.
pub fn comb(resolution: usize) -> Result<Mesh, MeshError> {
    check_resolution(resolution)?;
    let h = 0.1 / resolution as f64;
    let (nx, ny) = (12 * resolution, 14 * resolution);
    let tol = 1e-9;
    grid_mesh(
        nx,
        ny,
        |i, j| point_in_polygon([(i as f64 + 0.5) * h, (j as f64 + 0.5) * h], &COMB_OUTLINE),
        |i, j| [i as f64 * 0.1 / resolution as f64, j as f64 * 0.1 / resolution as f64],
        |m| {
            if m[0] < tol {
                Label::GammaIn
            } else if (m[1] < tol || m[1] > 1.4 - tol) && m[0] < 0.7 + tol {
                Label::Gamma1
            } else {
                Label::Gamma2
            }
        },
        |c| u8::from(c[0] > 0.7),
        false,
    )
}

/// Parameters of the porous domain: square of side `side` with blob-shaped
/// holes around `centers`.
#[derive(Debug, Clone, PartialEq)]
pub struct PorousParams {
    pub side: f64,
    pub centers: Vec<[f64; 2]>,
    /// Mean hole radius.
    pub radius: f64,
    /// Relative amplitude of the random radial modulation.
    pub roughness: f64,
    pub seed: u64,
}

impl Default for PorousParams {
    fn default() -> Self {
        PorousParams {
            side: 1.4,
            centers: vec![[1.05, 0.3], [1.05, 0.7], [1.05, 1.1]],
            radius: 0.11,
            roughness: 0.3,
            seed: 7,
        }
    }
}

/// Square with interior holes (labeled `HOLE`). The hole outlines are random
/// star-shaped blobs traced on the cell grid, so they are staircase curves.
pub fn porous(resolution: usize, params: &PorousParams) -> Result<Mesh, MeshError> {
    check_resolution(resolution)?;
    let side = params.side;
    let n = resolution - 1;
    let h = side / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let reach = params.radius * (1.0 + params.roughness);
    let mut blobs = Vec::new();
    for c in &params.centers {
        if c[0] - reach < 2.0 * h || c[1] - reach < 2.0 * h || c[0] + reach > side - 2.0 * h || c[1] + reach > side - 2.0 * h {
            return Err(MeshError::Geometry(format!(
                "hole at ({}, {}) with reach {reach} overlaps the outer boundary",
                c[0], c[1]
            )));
        }
        // three random harmonics, amplitudes normalized to `roughness`
        let modes: Vec<(f64, f64)> = (1..=3).map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(0.0..2.0 * PI))).collect();
        let norm: f64 = modes.iter().map(|m| m.0.abs()).sum::<f64>().max(1e-12);
        blobs.push((*c, modes, norm));
    }
    for (a, ca) in params.centers.iter().enumerate() {
        for cb in &params.centers[a + 1..] {
            if (ca[0] - cb[0]).hypot(ca[1] - cb[1]) < 2.0 * reach + 2.0 * h {
                return Err(MeshError::Geometry("holes overlap each other".into()));
            }
        }
    }
    let in_hole = |p: [f64; 2]| {
        blobs.iter().any(|(c, modes, norm)| {
            let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
            let theta = dy.atan2(dx);
            let wobble: f64 = modes.iter().enumerate().map(|(k, m)| m.0 * ((k + 2) as f64 * theta + m.1).sin()).sum::<f64>() / norm;
            dx.hypot(dy) < params.radius * (1.0 + params.roughness * wobble)
        })
    };
    let mut keep: Vec<bool> = (0..n * n)
        .map(|k| !in_hole([((k % n) as f64 + 0.5) * h, ((k / n) as f64 + 0.5) * h]))
        .collect();
    clean_cells(n, &mut keep);
    let tol = 1e-9 * side;
    grid_mesh(
        n,
        n,
        |i, j| keep[j * n + i],
        |i, j| [if i == n { side } else { i as f64 * h }, if j == n { side } else { j as f64 * h }],
        |m| {
            if m[0] < tol {
                Label::GammaIn
            } else if m[0] > side - tol {
                Label::Gamma2
            } else if m[1] < tol || m[1] > side - tol {
                Label::Gamma1
            } else {
                Label::Hole
            }
        },
        |c| u8::from(c[0] > 0.5 * side),
        false,
    )
}

/// Removes kept cells not edge-connected to the left column, then resolves
/// vertices where kept cells touch only diagonally, until stable.
fn clean_cells(n: usize, keep: &mut [bool]) {
    loop {
        let mut seen = vec![false; n * n];
        let mut queue: VecDeque<usize> = (0..n).map(|j| j * n).filter(|&k| keep[k]).collect();
        for &k in &queue {
            seen[k] = true;
        }
        while let Some(k) = queue.pop_front() {
            let (i, j) = (k % n, k / n);
            let mut nb = Vec::with_capacity(4);
            if i > 0 {
                nb.push(k - 1);
            }
            if i + 1 < n {
                nb.push(k + 1);
            }
            if j > 0 {
                nb.push(k - n);
            }
            if j + 1 < n {
                nb.push(k + n);
            }
            for m in nb {
                if keep[m] && !seen[m] {
                    seen[m] = true;
                    queue.push_back(m);
                }
            }
        }
        let mut changed = false;
        for k in 0..n * n {
            if keep[k] && !seen[k] {
                keep[k] = false;
                changed = true;
            }
        }
        // interior grid vertex (i, j) surrounded by cells (i-1|i, j-1|j)
        for j in 1..n {
            for i in 1..n {
                let (sw, se, nw, ne) = ((j - 1) * n + i - 1, (j - 1) * n + i, j * n + i - 1, j * n + i);
                if keep[sw] && keep[ne] && !keep[se] && !keep[nw] {
                    keep[ne] = false;
                    changed = true;
                } else if keep[se] && keep[nw] && !keep[sw] && !keep[ne] {
                    keep[nw] = false;
                    changed = true;
                }
            }
        }
        if !changed {
            return;
        }
    }
}

/// Right boundary of the wavy domain.
pub fn wavy_curve(y: f64) -> f64 {
    0.4 + 0.05 * (55.0 / 7.0 * PI * y).sin()
}

/// Region `0 <= x <= wavy_curve(y)`, `0 <= y <= 1.4`, meshed by a mapped grid
/// with `resolution` vertices across and the diagonal of each cell chosen to
/// maximize the smaller angle.
pub fn wavy(resolution: usize) -> Result<Mesh, MeshError> {
    check_resolution(resolution)?;
    let nx = resolution - 1;
    let ny = ((1.4 / 0.4) * nx as f64).round() as usize;
    let tol = 1e-9;
    grid_mesh(
        nx,
        ny,
        |_, _| true,
        |i, j| {
            let y = if j == ny { 1.4 } else { 1.4 * j as f64 / ny as f64 };
            [i as f64 / nx as f64 * wavy_curve(y), y]
        },
        |m| {
            if m[0] < tol {
                Label::GammaIn
            } else if m[1] < tol || m[1] > 1.4 - tol {
                Label::Gamma1
            } else {
                Label::Gamma2
            }
        },
        |_| 0,
        true,
    )
}
