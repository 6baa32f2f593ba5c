//! Descent directions from a shape gradient: Riesz representatives in the
//! H1 inner product (vector or component-wise) or in the CT+H(sym) product.
//! Displacements vanish on the fixed boundary labels.

use crate::fem::assemble::gather;
use crate::fem::{apply_dirichlet, assemble_mass, assemble_stiffness, solve_spd, CsrMatrix, Element, FemError, SolverOptions};
use crate::mesh::{Label, Mesh};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FlowError {
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error("invalid flow configuration: {0}")]
    Config(String),
    #[error("right-hand side has {got} entries for {expected} vertices")]
    Length { expected: usize, got: usize },
    #[error("flow direction is not a descent direction (dL = {0:e})")]
    NotDescent(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowKind {
    H1Vector,
    H1Scalar,
    CtHsym,
}

impl std::str::FromStr for FlowKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "h1" | "h1-vector" => Ok(FlowKind::H1Vector),
            "h1-scalar" => Ok(FlowKind::H1Scalar),
            "ct" | "ct-hsym" => Ok(FlowKind::CtHsym),
            other => Err(format!("unknown flow kind '{other}' (expected h1-vector, h1-scalar or ct-hsym)")),
        }
    }
}

impl std::fmt::Display for FlowKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FlowKind::H1Vector => "h1-vector",
            FlowKind::H1Scalar => "h1-scalar",
            FlowKind::CtHsym => "ct-hsym",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    pub kind: FlowKind,
    /// Diffusion weight of the H1 flows.
    pub eps0: f64,
    /// Cauchy-Riemann penalty of the CT flow.
    pub alpha: f64,
    pub fixed_boundary: Vec<Label>,
    /// Let fixed nodes whose fixed boundary edges are all horizontal move in
    /// x. Such edges stay on their line; only their end at G2 extends.
    pub horizontal_slip: bool,
    pub solver: SolverOptions,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            kind: FlowKind::H1Vector,
            eps0: 0.05,
            alpha: 1.0,
            fixed_boundary: vec![Label::GammaIn, Label::Gamma1, Label::Hole],
            horizontal_slip: true,
            solver: SolverOptions { tol: 1e-12, max_iter: 0 },
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        match self.kind {
            FlowKind::H1Vector | FlowKind::H1Scalar if !(self.eps0 > 0.0) => {
                Err(FlowError::Config(format!("eps0 must be positive, got {}", self.eps0)))
            }
            FlowKind::CtHsym if !(self.alpha > 0.0) => {
                Err(FlowError::Config(format!("alpha must be positive, got {}", self.alpha)))
            }
            _ => Ok(()),
        }
    }
}

/// Solves the configured flow problem for the right-hand side `rhs`, given as
/// `-dL` on each nodal basis field.
pub fn descent_direction(mesh: &Mesh, rhs: &[[f64; 2]], cfg: &FlowConfig) -> Result<Vec<[f64; 2]>, FlowError> {
    match cfg.kind {
        FlowKind::H1Vector => h1_flow(mesh, rhs, cfg),
        FlowKind::H1Scalar => scalar_h1_flow(mesh, rhs, cfg),
        FlowKind::CtHsym => ct_hsym_flow(mesh, rhs, cfg),
    }
}

fn check(mesh: &Mesh, rhs: &[[f64; 2]], cfg: &FlowConfig) -> Result<(), FlowError> {
    cfg.validate()?;
    if rhs.len() != mesh.num_vertices() {
        return Err(FlowError::Length { expected: mesh.num_vertices(), got: rhs.len() });
    }
    Ok(())
}

/// Constrained nodes per component.
fn fixed_nodes(mesh: &Mesh, cfg: &FlowConfig) -> [Vec<usize>; 2] {
    let mask = mesh.nodes_on(&cfg.fixed_boundary);
    let mut sliding = vec![cfg.horizontal_slip; mesh.num_vertices()];
    let pts = mesh.vertices();
    for e in mesh.boundary_edges().iter().filter(|e| cfg.fixed_boundary.contains(&e.label)) {
        let [a, b] = e.vertices;
        let (dx, dy) = (pts[b][0] - pts[a][0], pts[b][1] - pts[a][1]);
        if dy.abs() > 1e-12 * dx.abs() {
            sliding[a] = false;
            sliding[b] = false;
        }
    }
    let all: Vec<usize> = (0..mesh.num_vertices()).filter(|&v| mask[v]).collect();
    let x = all.iter().copied().filter(|&v| !sliding[v]).collect();
    [x, all]
}

fn h1_operator(mesh: &Mesh, eps0: f64) -> Result<CsrMatrix, FemError> {
    let a = assemble_stiffness(mesh, &vec![eps0; mesh.num_triangles()])?;
    Ok(a.add_scaled(&assemble_mass(mesh)?, 1.0))
}

/// `-dL(zeta) = rhs . zeta` must be positive for a nonzero direction.
fn certify(rhs: &[[f64; 2]], zeta: &[[f64; 2]]) -> Result<(), FlowError> {
    let gain: f64 = rhs.iter().zip(zeta).map(|(r, z)| r[0] * z[0] + r[1] * z[1]).sum();
    let nonzero = zeta.iter().any(|z| z[0] != 0.0 || z[1] != 0.0);
    if nonzero && !(gain > 0.0) {
        return Err(FlowError::NotDescent(-gain));
    }
    Ok(())
}

fn interleave(rhs: &[[f64; 2]]) -> Vec<f64> {
    rhs.iter().flat_map(|r| r.iter().copied()).collect()
}

fn deinterleave(x: &[f64]) -> Vec<[f64; 2]> {
    x.chunks(2).map(|c| [c[0], c[1]]).collect()
}

fn solve_vector_system(
    matrix: &CsrMatrix,
    rhs: &[[f64; 2]],
    fixed: &[Vec<usize>; 2],
    opts: SolverOptions,
) -> Result<Vec<[f64; 2]>, FlowError> {
    let mut dofs: Vec<usize> = fixed[0].iter().map(|&v| 2 * v).chain(fixed[1].iter().map(|&v| 2 * v + 1)).collect();
    dofs.sort_unstable();
    let (m, b) = apply_dirichlet(matrix, &interleave(rhs), &dofs, &vec![0.0; dofs.len()])?;
    let zeta = deinterleave(&solve_spd(&m, &b, opts)?);
    certify(rhs, &zeta)?;
    Ok(zeta)
}

/// Vector H1 flow `(eps0 D zeta : D theta + zeta . theta) = -dL(theta)`,
/// assembled as one 2n x 2n system with interleaved components.
pub fn h1_flow(mesh: &Mesh, rhs: &[[f64; 2]], cfg: &FlowConfig) -> Result<Vec<[f64; 2]>, FlowError> {
    check(mesh, rhs, cfg)?;
    let k = h1_operator(mesh, cfg.eps0)?;
    let n = mesh.num_vertices();
    let trip = k.triplets().flat_map(|(i, j, v)| [(2 * i, 2 * j, v), (2 * i + 1, 2 * j + 1, v)]).collect();
    let big = CsrMatrix::from_triplets(2 * n, 2 * n, trip);
    solve_vector_system(&big, rhs, &fixed_nodes(mesh, cfg), cfg.solver)
}

/// The same flow solved as two independent scalar problems.
pub fn scalar_h1_flow(mesh: &Mesh, rhs: &[[f64; 2]], cfg: &FlowConfig) -> Result<Vec<[f64; 2]>, FlowError> {
    check(mesh, rhs, cfg)?;
    let k = h1_operator(mesh, cfg.eps0)?;
    let fixed = fixed_nodes(mesh, cfg);
    let mut zeta = vec![[0.0; 2]; mesh.num_vertices()];
    for d in 0..2 {
        let b: Vec<f64> = rhs.iter().map(|r| r[d]).collect();
        let (m, b) = apply_dirichlet(&k, &b, &fixed[d], &vec![0.0; fixed[d].len()])?;
        for (z, x) in zeta.iter_mut().zip(solve_spd(&m, &b, cfg.solver)?) {
            z[d] = x;
        }
    }
    certify(rhs, &zeta)?;
    Ok(zeta)
}

/// Per basis field `nu_a e_d`: the Cauchy-Riemann image
/// `(-dx z1 + dy z2, dy z1 + dx z2)` and the strain `(e11, e22, e12)`.
fn basis_operators(el: &Element, a: usize, d: usize) -> ([f64; 2], [f64; 3]) {
    let g = el.grads[a];
    if d == 0 {
        ([-g[0], g[1]], [g[0], 0.0, 0.5 * g[1]])
    } else {
        ([g[1], g[0]], [0.0, g[1], 0.5 * g[0]])
    }
}

/// CT+H(sym) matrix with interleaved components; `alpha = None` drops the
/// Cauchy-Riemann term.
pub fn assemble_ct(mesh: &Mesh, alpha: Option<f64>) -> Result<CsrMatrix, FlowError> {
    let n = mesh.num_vertices();
    let inv_alpha = alpha.map_or(0.0, |a| 1.0 / a);
    let mut trip = Vec::with_capacity(36 * mesh.num_triangles());
    for (t, &tri) in mesh.triangles().iter().enumerate() {
        let el = Element::new(mesh, t)?;
        for a in 0..3 {
            for da in 0..2 {
                let (ba, sa) = basis_operators(&el, a, da);
                for b in 0..3 {
                    let mass = el.area * if a == b { 1.0 / 6.0 } else { 1.0 / 12.0 };
                    for db in 0..2 {
                        let (bb, sb) = basis_operators(&el, b, db);
                        let cr = ba[0] * bb[0] + ba[1] * bb[1];
                        let sym = sa[0] * sb[0] + sa[1] * sb[1] + 2.0 * sa[2] * sb[2];
                        let mut v = el.area * (inv_alpha * cr + sym);
                        if da == db {
                            v += mass;
                        }
                        trip.push((2 * tri[a] + da, 2 * tri[b] + db, v));
                    }
                }
            }
        }
    }
    Ok(CsrMatrix::from_triplets(2 * n, 2 * n, trip))
}

/// Elementwise Cauchy-Riemann image of a nodal field.
pub fn cauchy_riemann(mesh: &Mesh, zeta: &[[f64; 2]]) -> Result<Vec<[f64; 2]>, FlowError> {
    if zeta.len() != mesh.num_vertices() {
        return Err(FlowError::Length { expected: mesh.num_vertices(), got: zeta.len() });
    }
    mesh.triangles()
        .iter()
        .enumerate()
        .map(|(t, &tri)| {
            let el = Element::new(mesh, t)?;
            let z = gather(zeta, tri);
            let g1 = el.gradient([z[0][0], z[1][0], z[2][0]]);
            let g2 = el.gradient([z[0][1], z[1][1], z[2][1]]);
            Ok([-g1[0] + g2[1], g1[1] + g2[0]])
        })
        .collect()
}

/// CT+H(sym) flow
/// `(1/alpha B zeta . B theta + sym D zeta : sym D theta + zeta . theta) = -dL(theta)`.
pub fn ct_hsym_flow(mesh: &Mesh, rhs: &[[f64; 2]], cfg: &FlowConfig) -> Result<Vec<[f64; 2]>, FlowError> {
    check(mesh, rhs, cfg)?;
    let k = assemble_ct(mesh, Some(cfg.alpha))?;
    solve_vector_system(&k, rhs, &fixed_nodes(mesh, cfg), cfg.solver)
}
