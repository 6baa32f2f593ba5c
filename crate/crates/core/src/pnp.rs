//! Steady-state Poisson-Nernst-Planck forward solver.
//!
//! Concentrations are carried in Slotboom form `c = rho * exp(-z phi)`, so
//! each species solves a symmetric diffusion problem whose per-element
//! coefficient is the harmonic average of `exp(-z phi)`. The semilinear
//! Poisson equation is solved by damped Newton and the two blocks are
//! coupled by a Gummel fixed point.

use crate::fem::{
    self, apply_dirichlet, assemble_mass, assemble_stiffness, lumped_mass, solve_spd, CsrMatrix, FemError,
    SolverOptions,
};
use crate::mesh::{Label, Mesh};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PnpError {
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error("invalid problem: {0}")]
    Problem(String),
    #[error("exponent |z phi| = {value} exceeds 700 at node {node}")]
    Overflow { node: usize, value: f64 },
    #[error("Newton stalled at iteration {iteration}: residual {residual:e} not reduced after 20 halvings")]
    NewtonStalled { iteration: usize, residual: f64 },
    #[error("Newton reached {iterations} iterations with residual {residual:e}")]
    NewtonMaxIter { iterations: usize, residual: f64 },
    #[error("Gummel iteration not converged after {} sweeps (last potential increment {:e})", history.len(), history.last().map_or(f64::NAN, |r| r.phi_increment))]
    GummelNotConverged { history: Vec<GummelRecord> },
}

/// Physical data of the electrolyte.
#[derive(Debug, Clone, PartialEq)]
pub struct PnpProblem {
    pub valences: Vec<i32>,
    /// Concentrations imposed on the inflow boundary.
    pub c_inf: Vec<f64>,
    /// Potential imposed on the deformable boundary.
    pub g: f64,
    pub epsilon: f64,
}

impl PnpProblem {
    pub fn num_species(&self) -> usize {
        self.valences.len()
    }

    pub fn z(&self, i: usize) -> f64 {
        f64::from(self.valences[i])
    }

    pub fn validate(&self) -> Result<(), PnpError> {
        let bad = |m: String| Err(PnpError::Problem(m));
        if self.valences.is_empty() {
            return bad("at least one species is required".into());
        }
        if self.c_inf.len() != self.valences.len() {
            return bad(format!("{} valences but {} boundary concentrations", self.valences.len(), self.c_inf.len()));
        }
        if let Some(c) = self.c_inf.iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
            return bad(format!("boundary concentration {c} must be finite and non-negative"));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad(format!("dielectric coefficient {} must be positive", self.epsilon));
        }
        if !self.g.is_finite() {
            return bad("potential datum must be finite".into());
        }
        Ok(())
    }
}

/// Norm used for the Gummel stopping test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IncrementNorm {
    /// `sqrt(e^T (A + B) e)`.
    H1,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GummelParams {
    pub tol: f64,
    pub max_outer: usize,
    pub newton_tol: f64,
    pub newton_max: usize,
    pub max_halvings: usize,
    pub norm: IncrementNorm,
    pub linear: SolverOptions,
}

impl Default for GummelParams {
    fn default() -> Self {
        GummelParams {
            tol: 1e-6,
            max_outer: 200,
            newton_tol: 1e-10,
            newton_max: 50,
            max_halvings: 20,
            norm: IncrementNorm::H1,
            linear: SolverOptions::default(),
        }
    }
}

/// Increments of one Gummel sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GummelRecord {
    pub phi_increment: f64,
    /// Largest increment over the species.
    pub rho_increment: f64,
    pub newton_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnpState {
    pub phi: Vec<f64>,
    pub rho: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub problem: PnpProblem,
    pub converged: bool,
    pub history: Vec<GummelRecord>,
}

/// Nodewise `rho * exp(-z phi)`.
pub fn slotboom_to_concentration(rho: &[f64], phi: &[f64], z: f64) -> Result<Vec<f64>, PnpError> {
    fem_len(rho.len(), phi.len())?;
    rho.iter()
        .zip(phi)
        .enumerate()
        .map(|(node, (r, p))| Ok(r * checked_exp(-z * p, node)?))
        .collect()
}

/// Nodewise `c * exp(z phi)`.
pub fn concentration_to_slotboom(c: &[f64], phi: &[f64], z: f64) -> Result<Vec<f64>, PnpError> {
    fem_len(c.len(), phi.len())?;
    c.iter()
        .zip(phi)
        .enumerate()
        .map(|(node, (ci, p))| Ok(ci * checked_exp(z * p, node)?))
        .collect()
}

fn fem_len(expected: usize, got: usize) -> Result<(), PnpError> {
    if expected != got {
        return Err(FemError::Length { expected, got }.into());
    }
    Ok(())
}

fn checked_exp(x: f64, node: usize) -> Result<f64, PnpError> {
    if x.abs() > 700.0 || !x.is_finite() {
        return Err(PnpError::Overflow { node, value: x.abs() });
    }
    Ok(x.exp())
}

/// Degree-6 symmetric rule on the triangle (barycentric point, weight).
const DUNAVANT6: [([f64; 3], f64); 12] = {
    const A: (f64, f64, f64) = (0.501426509658179, 0.249286745170910, 0.116786275726379);
    const B: (f64, f64, f64) = (0.873821971016996, 0.063089014491502, 0.050844906370207);
    const C: (f64, f64, f64, f64) = (0.053145049844817, 0.310352451033784, 0.636502499121399, 0.082851075618374);
    [
        ([A.0, A.1, A.1], A.2),
        ([A.1, A.0, A.1], A.2),
        ([A.1, A.1, A.0], A.2),
        ([B.0, B.1, B.1], B.2),
        ([B.1, B.0, B.1], B.2),
        ([B.1, B.1, B.0], B.2),
        ([C.0, C.1, C.2], C.3),
        ([C.0, C.2, C.1], C.3),
        ([C.1, C.0, C.2], C.3),
        ([C.1, C.2, C.0], C.3),
        ([C.2, C.0, C.1], C.3),
        ([C.2, C.1, C.0], C.3),
    ]
};

/// Mean of `exp(u)` over a triangle with linear `u` given by vertex values,
/// all of which are `<= 0`. Large spreads are split into four congruent
/// children so each piece sees a spread of at most 1/2.
fn mean_exp(u: [f64; 3], depth: usize) -> f64 {
    let spread = u.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x)) - u.iter().fold(f64::INFINITY, |m, &x| m.min(x));
    if spread > 0.5 && depth < 6 {
        let m = [0.5 * (u[0] + u[1]), 0.5 * (u[1] + u[2]), 0.5 * (u[2] + u[0])];
        return 0.25
            * (mean_exp([u[0], m[0], m[2]], depth + 1)
                + mean_exp([m[0], u[1], m[1]], depth + 1)
                + mean_exp([m[2], m[1], u[2]], depth + 1)
                + mean_exp([m[0], m[1], m[2]], depth + 1));
    }
    DUNAVANT6
        .iter()
        .map(|(l, w)| w * (l[0] * u[0] + l[1] * u[1] + l[2] * u[2]).exp())
        .sum()
}

/// Per-element `(|K|^{-1} int_K exp(-s phi))^{-1}`.
pub fn harmonic_average(mesh: &Mesh, phi: &[f64], s: f64) -> Result<Vec<f64>, PnpError> {
    fem_len(mesh.num_vertices(), phi.len())?;
    mesh.triangles()
        .iter()
        .map(|tri| {
            let u = [-s * phi[tri[0]], -s * phi[tri[1]], -s * phi[tri[2]]];
            let umax = u[0].max(u[1]).max(u[2]);
            let umin = u[0].min(u[1]).min(u[2]);
            if umax - umin < 1e-14 {
                return Ok((-umax).exp());
            }
            let mean = mean_exp([u[0] - umax, u[1] - umax, u[2] - umax], 0);
            let e = (-umax).exp() / mean;
            if !e.is_finite() || e <= 0.0 {
                return Err(PnpError::Overflow { node: tri[0], value: umax.abs().max(umin.abs()) });
            }
            Ok(e)
        })
        .collect()
}

/// Stiffness matrix weighted by the harmonic average of `exp(-z phi)`.
pub fn assemble_continuity(mesh: &Mesh, phi: &[f64], z: f64) -> Result<CsrMatrix, PnpError> {
    let coef = harmonic_average(mesh, phi, -z)?;
    Ok(assemble_stiffness(mesh, &coef)?)
}

/// Mesh-dependent operators shared by all solves on one mesh.
pub struct PnpSolver<'a> {
    mesh: &'a Mesh,
    problem: PnpProblem,
    params: GummelParams,
    stiffness: CsrMatrix,
    h1: CsrMatrix,
    lumped: Vec<f64>,
    potential_nodes: Vec<usize>,
    /// Dirichlet value at each entry of `potential_nodes`.
    potential_values: Vec<f64>,
    inflow_nodes: Vec<usize>,
    potential_fixed: Vec<bool>,
}

impl<'a> PnpSolver<'a> {
    pub fn new(mesh: &'a Mesh, problem: &PnpProblem, params: GummelParams) -> Result<Self, PnpError> {
        problem.validate()?;
        let stiffness = assemble_stiffness(mesh, &vec![1.0; mesh.num_triangles()])?;
        let h1 = stiffness.add_scaled(&assemble_mass(mesh)?, 1.0);
        let potential_fixed = mesh.nodes_on(&[Label::Gamma2]);
        let inflow_fixed = mesh.nodes_on(&[Label::GammaIn]);
        let potential_nodes: Vec<usize> = (0..mesh.num_vertices()).filter(|&v| potential_fixed[v]).collect();
        let inflow_nodes: Vec<usize> = (0..mesh.num_vertices()).filter(|&v| inflow_fixed[v]).collect();
        if potential_nodes.is_empty() {
            return Err(PnpError::Problem("mesh has no G2 boundary for the potential datum".into()));
        }
        if inflow_nodes.is_empty() {
            return Err(PnpError::Problem("mesh has no IN boundary for the concentration datum".into()));
        }
        Ok(PnpSolver {
            mesh,
            problem: problem.clone(),
            params,
            stiffness,
            h1,
            lumped: lumped_mass(mesh)?,
            potential_values: vec![problem.g; potential_nodes.len()],
            potential_nodes,
            inflow_nodes,
            potential_fixed,
        })
    }

    /// Replaces the constant potential datum by nodal values; only entries
    /// at `G2` nodes are read.
    pub fn with_potential_datum(mut self, datum: &[f64]) -> Result<Self, PnpError> {
        fem_len(self.mesh.num_vertices(), datum.len())?;
        self.potential_values = self.potential_nodes.iter().map(|&v| datum[v]).collect();
        Ok(self)
    }

    pub fn mesh(&self) -> &Mesh {
        self.mesh
    }

    pub fn problem(&self) -> &PnpProblem {
        &self.problem
    }

    /// `eps A phi - m * sum_i z_i rho_i exp(-z_i phi)` with lumped source.
    pub fn poisson_residual(&self, rho: &[Vec<f64>], phi: &[f64]) -> Vec<f64> {
        let mut r = self.stiffness.mul_vec(phi);
        for (j, rj) in r.iter_mut().enumerate() {
            let src: f64 = (0..self.problem.num_species())
                .map(|i| self.problem.z(i) * rho[i][j] * (-self.problem.z(i) * phi[j]).exp())
                .sum();
            *rj = self.problem.epsilon * *rj - self.lumped[j] * src;
        }
        r
    }

    fn free_norm(&self, r: &[f64]) -> f64 {
        r.iter()
            .zip(&self.potential_fixed)
            .filter(|(_, f)| !**f)
            .map(|(x, _)| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Damped Newton for the potential with the densities frozen. Returns the
    /// potential and the number of Newton steps taken.
    pub fn newton_poisson(&self, rho: &[Vec<f64>], phi0: &[f64]) -> Result<(Vec<f64>, usize), PnpError> {
        let n = self.mesh.num_vertices();
        fem_len(n, phi0.len())?;
        for r in rho {
            fem_len(n, r.len())?;
        }
        let mut phi = phi0.to_vec();
        for (&v, &g) in self.potential_nodes.iter().zip(&self.potential_values) {
            phi[v] = g;
        }
        let mut r = self.poisson_residual(rho, &phi);
        let mut norm = self.free_norm(&r);
        let zeros = vec![0.0; self.potential_nodes.len()];
        for it in 0..self.params.newton_max {
            if norm <= self.params.newton_tol {
                return Ok((phi, it));
            }
            let reaction: Vec<(usize, usize, f64)> = (0..n)
                .map(|j| {
                    let d: f64 = (0..self.problem.num_species())
                        .map(|i| {
                            let z = self.problem.z(i);
                            z * z * rho[i][j] * (-z * phi[j]).exp()
                        })
                        .sum();
                    (j, j, self.lumped[j] * d)
                })
                .collect();
            let jac = self
                .stiffness
                .scaled(self.problem.epsilon)
                .add_scaled(&CsrMatrix::from_triplets(n, n, reaction), 1.0);
            let neg: Vec<f64> = r.iter().map(|x| -x).collect();
            let (jd, rhs) = apply_dirichlet(&jac, &neg, &self.potential_nodes, &zeros)?;
            let delta = solve_spd(&jd, &rhs, self.params.linear)?;
            let mut tau = 1.0;
            let mut accepted = None;
            for _ in 0..=self.params.max_halvings {
                let trial: Vec<f64> = phi.iter().zip(&delta).map(|(p, d)| p + tau * d).collect();
                let tr = self.poisson_residual(rho, &trial);
                let tn = self.free_norm(&tr);
                if tn < norm {
                    accepted = Some((trial, tr, tn));
                    break;
                }
                tau *= 0.5;
            }
            match accepted {
                Some((p, rr, nn)) => {
                    phi = p;
                    r = rr;
                    norm = nn;
                }
                None => return Err(PnpError::NewtonStalled { iteration: it, residual: norm }),
            }
        }
        if norm <= self.params.newton_tol {
            return Ok((phi, self.params.newton_max));
        }
        Err(PnpError::NewtonMaxIter { iterations: self.params.newton_max, residual: norm })
    }

    /// Slotboom density of species `i` for the potential `phi`.
    pub fn solve_continuity(&self, i: usize, phi: &[f64]) -> Result<Vec<f64>, PnpError> {
        let z = self.problem.z(i);
        let k = assemble_continuity(self.mesh, phi, z)?;
        let values = self
            .inflow_nodes
            .iter()
            .map(|&v| Ok(self.problem.c_inf[i] * checked_exp(z * phi[v], v)?))
            .collect::<Result<Vec<_>, PnpError>>()?;
        let (kd, rhs) = apply_dirichlet(&k, &vec![0.0; self.mesh.num_vertices()], &self.inflow_nodes, &values)?;
        Ok(solve_spd(&kd, &rhs, self.params.linear)?)
    }

    /// Continuity residual `K(phi) rho` restricted to nodes off the inflow boundary.
    pub fn continuity_residual(&self, i: usize, phi: &[f64], rho: &[f64]) -> Result<Vec<f64>, PnpError> {
        let k = assemble_continuity(self.mesh, phi, self.problem.z(i))?;
        let mut r = k.mul_vec(rho);
        for &v in &self.inflow_nodes {
            r[v] = 0.0;
        }
        Ok(r)
    }

    fn increment(&self, a: &[f64], b: &[f64]) -> f64 {
        let e: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        match self.params.norm {
            IncrementNorm::H1 => fem::dot(&e, &self.h1.mul_vec(&e)).max(0.0).sqrt(),
            IncrementNorm::Max => e.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }

    /// Gummel fixed point, optionally warm-started from `initial` (same mesh
    /// connectivity).
    pub fn solve(&self, initial: Option<&PnpState>) -> Result<PnpState, PnpError> {
        let n = self.mesh.num_vertices();
        let ns = self.problem.num_species();
        let (mut phi, mut rho) = match initial {
            Some(s) if s.phi.len() == n && s.rho.len() == ns => (s.phi.clone(), s.rho.clone()),
            _ => (vec![self.problem.g; n], self.problem.c_inf.iter().map(|&c| vec![c; n]).collect()),
        };
        let mut history = Vec::new();
        for _ in 0..self.params.max_outer {
            let (phi_new, newton_iterations) = self.newton_poisson(&rho, &phi)?;
            let rho_new = (0..ns).map(|i| self.solve_continuity(i, &phi_new)).collect::<Result<Vec<_>, _>>()?;
            let phi_increment = self.increment(&phi_new, &phi);
            let rho_increment = (0..ns).map(|i| self.increment(&rho_new[i], &rho[i])).fold(0.0, f64::max);
            history.push(GummelRecord { phi_increment, rho_increment, newton_iterations });
            log::trace!("gummel sweep {}: dphi {phi_increment:e} drho {rho_increment:e}", history.len());
            phi = phi_new;
            rho = rho_new;
            if phi_increment <= self.params.tol && rho_increment <= self.params.tol {
                let c = (0..ns)
                    .map(|i| slotboom_to_concentration(&rho[i], &phi, self.problem.z(i)))
                    .collect::<Result<Vec<_>, _>>()?;
                return Ok(PnpState { phi, rho, c, problem: self.problem.clone(), converged: true, history });
            }
        }
        Err(PnpError::GummelNotConverged { history })
    }
}

/// Convenience wrapper around [`PnpSolver::solve`].
pub fn gummel_solve(
    mesh: &Mesh,
    problem: &PnpProblem,
    params: GummelParams,
    initial: Option<&PnpState>,
) -> Result<PnpState, PnpError> {
    PnpSolver::new(mesh, problem, params)?.solve(initial)
}
