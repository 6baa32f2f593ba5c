//! Objective evaluation and the coupled adjoint system.
//!
//! The objective is `J = -int_region sum_i z_i c_i`. The adjoint unknowns
//! are one field `s_i` per species (zero on `IN`) and a potential `psi`
//! (zero on `G2`), found from one monolithic block solve.

use crate::fem::{
    apply_dirichlet, assemble_convection, assemble_mass, assemble_stiffness, assemble_weighted_stiffness, integrate,
    load_vector, solve_general, CsrMatrix, FemError, SolverOptions,
};
use crate::mesh::{Label, Mesh};
use crate::pnp::PnpState;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AdjointError {
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error("forward state is not converged")]
    Unconverged,
    #[error("state does not match the mesh ({0})")]
    Mismatch(String),
    #[error("adjoint block residual {residual:e} exceeds tolerance {tol:e}")]
    Residual { residual: f64, tol: f64 },
}

/// Region of integration of the objective.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObjectiveSpec {
    /// Element indicator; `None` integrates over the whole domain.
    pub region: Option<Vec<bool>>,
}

impl ObjectiveSpec {
    pub fn all() -> Self {
        ObjectiveSpec { region: None }
    }

    /// The design subdomain (elements tagged 1).
    pub fn subdomain(mesh: &Mesh) -> Self {
        ObjectiveSpec { region: Some(mesh.subdomain_indicator()) }
    }

    /// Whether element `t` belongs to the region.
    pub fn contains(&self, t: usize) -> bool {
        self.region.as_ref().map_or(true, |r| r[t])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointState {
    pub s: Vec<Vec<f64>>,
    pub psi: Vec<f64>,
}

fn check_state(mesh: &Mesh, state: &PnpState, spec: &ObjectiveSpec) -> Result<(), AdjointError> {
    let n = mesh.num_vertices();
    if state.phi.len() != n || state.c.iter().any(|c| c.len() != n) {
        return Err(AdjointError::Mismatch(format!("{} vertices", n)));
    }
    if state.c.len() != state.problem.num_species() {
        return Err(AdjointError::Mismatch("species count".into()));
    }
    if let Some(r) = &spec.region {
        if r.len() != mesh.num_triangles() {
            return Err(AdjointError::Mismatch(format!("region has {} entries for {} elements", r.len(), mesh.num_triangles())));
        }
    }
    Ok(())
}

/// Net weighted charge `sum_i z_i c_i` at every node.
pub fn weighted_charge(state: &PnpState) -> Vec<f64> {
    let mut q = vec![0.0; state.phi.len()];
    for (i, c) in state.c.iter().enumerate() {
        let z = state.problem.z(i);
        for (qj, cj) in q.iter_mut().zip(c) {
            *qj += z * cj;
        }
    }
    q
}

/// `J = -int_region sum_i z_i c_i`; the weighted concentration is `-J`.
pub fn objective(mesh: &Mesh, state: &PnpState, spec: &ObjectiveSpec) -> Result<f64, AdjointError> {
    check_state(mesh, state, spec)?;
    Ok(-integrate(mesh, &weighted_charge(state), spec.region.as_deref())?)
}

/// Block matrix and right-hand side of the discrete adjoint system, with
/// `s_i = 0` on `IN` and `psi = 0` on `G2` imposed. Unknowns are ordered
/// `(s_1, ..., s_N, psi)`.
pub fn assemble_adjoint(
    mesh: &Mesh,
    state: &PnpState,
    spec: &ObjectiveSpec,
) -> Result<(CsrMatrix, Vec<f64>), AdjointError> {
    if !state.converged {
        return Err(AdjointError::Unconverged);
    }
    let (matrix, rhs) = unconstrained_system(mesh, state, spec)?;
    let (nodes, values) = dirichlet_rows(mesh, state.problem.num_species());
    Ok(apply_dirichlet(&matrix, &rhs, &nodes, &values)?)
}

fn unconstrained_system(
    mesh: &Mesh,
    state: &PnpState,
    spec: &ObjectiveSpec,
) -> Result<(CsrMatrix, Vec<f64>), AdjointError> {
    check_state(mesh, state, spec)?;
    let n = mesh.num_vertices();
    let ns = state.problem.num_species();
    let a = assemble_stiffness(mesh, &vec![1.0; mesh.num_triangles()])?;
    let b = assemble_mass(mesh)?;
    // the operator s -> int grad(phi).grad(s) v is the transpose of C
    let ct = assemble_convection(mesh, &state.phi, 1.0)?.transpose();
    let ones = vec![1.0; n];
    let unit_load = load_vector(mesh, &ones, spec.region.as_deref())?;

    let mut diag = Vec::with_capacity(ns);
    let mut coupling = Vec::with_capacity(ns);
    let mut bottom = Vec::with_capacity(ns);
    for i in 0..ns {
        let z = state.problem.z(i);
        diag.push(a.add_scaled(&ct, z));
        coupling.push(b.scaled(-z));
        bottom.push(assemble_weighted_stiffness(mesh, &state.c[i])?.scaled(z));
    }
    let eps_a = a.scaled(state.problem.epsilon);
    let mut blocks: Vec<Vec<Option<&CsrMatrix>>> = vec![vec![None; ns + 1]; ns + 1];
    for i in 0..ns {
        blocks[i][i] = Some(&diag[i]);
        blocks[i][ns] = Some(&coupling[i]);
        blocks[ns][i] = Some(&bottom[i]);
    }
    blocks[ns][ns] = Some(&eps_a);
    let matrix = CsrMatrix::from_blocks(n, &blocks);

    let mut rhs = vec![0.0; (ns + 1) * n];
    for i in 0..ns {
        let z = state.problem.z(i);
        for v in 0..n {
            rhs[i * n + v] = z * unit_load[v];
        }
    }
    Ok((matrix, rhs))
}

fn dirichlet_rows(mesh: &Mesh, ns: usize) -> (Vec<usize>, Vec<f64>) {
    let n = mesh.num_vertices();
    let inflow = mesh.nodes_on(&[Label::GammaIn]);
    let potential = mesh.nodes_on(&[Label::Gamma2]);
    let mut nodes = Vec::new();
    for i in 0..ns {
        nodes.extend((0..n).filter(|&v| inflow[v]).map(|v| i * n + v));
    }
    nodes.extend((0..n).filter(|&v| potential[v]).map(|v| ns * n + v));
    let values = vec![0.0; nodes.len()];
    (nodes, values)
}

/// Solves the adjoint system; the relative block residual must not exceed `tol`.
pub fn solve_adjoint(
    mesh: &Mesh,
    state: &PnpState,
    spec: &ObjectiveSpec,
    tol: f64,
) -> Result<AdjointState, AdjointError> {
    let (matrix, rhs) = assemble_adjoint(mesh, state, spec)?;
    let n = mesh.num_vertices();
    let ns = state.problem.num_species();
    let bnorm = crate::fem::norm2(&rhs);
    if bnorm == 0.0 {
        return Ok(AdjointState { s: vec![vec![0.0; n]; ns], psi: vec![0.0; n] });
    }
    let x = solve_general(&matrix, &rhs, SolverOptions { tol, max_iter: 0 })?;
    let ax = matrix.mul_vec(&x);
    let residual = ax.iter().zip(&rhs).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt() / bnorm;
    if residual > tol {
        return Err(AdjointError::Residual { residual, tol });
    }
    Ok(AdjointState {
        s: (0..ns).map(|i| x[i * n..(i + 1) * n].to_vec()).collect(),
        psi: x[ns * n..].to_vec(),
    })
}

/// Derivative of `J` with respect to the nodal potential datum on `G2`:
/// the reaction `sum_i z_i (D_i s_i) + eps (A psi)` of the potential rows.
/// Zero away from `G2`.
pub fn potential_datum_sensitivity(
    mesh: &Mesh,
    state: &PnpState,
    adj: &AdjointState,
) -> Result<Vec<f64>, AdjointError> {
    check_state(mesh, state, &ObjectiveSpec::all())?;
    let a = assemble_stiffness(mesh, &vec![1.0; mesh.num_triangles()])?;
    let mut r: Vec<f64> = a.mul_vec(&adj.psi).iter().map(|x| state.problem.epsilon * x).collect();
    for (i, s) in adj.s.iter().enumerate() {
        let d = assemble_weighted_stiffness(mesh, &state.c[i])?.mul_vec(s);
        let z = state.problem.z(i);
        for (rv, dv) in r.iter_mut().zip(d) {
            *rv += z * dv;
        }
    }
    let on = mesh.nodes_on(&[Label::Gamma2]);
    for (v, rv) in r.iter_mut().enumerate() {
        if !on[v] {
            *rv = 0.0;
        }
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{solve_spd, max_abs_diff};
    use crate::io::generate::square;
    use crate::pnp::{gummel_solve, GummelParams, PnpProblem, PnpSolver};
    use nalgebra::{DMatrix, DVector};

    fn problem(valences: Vec<i32>, c_inf: Vec<f64>, g: f64) -> PnpProblem {
        PnpProblem { valences, c_inf, g, epsilon: 1.0 }
    }

    fn solved(mesh: &Mesh, p: &PnpProblem) -> PnpState {
        gummel_solve(mesh, p, GummelParams { tol: 1e-10, ..GummelParams::default() }, None).unwrap()
    }

    #[test]
    fn objective_values() {
        let m = square(5, 1.0).unwrap();
        let mut st = solved(&m, &problem(vec![1], vec![1.0], 0.0));
        st.c = vec![vec![1.0; 25]];
        assert!((objective(&m, &st, &ObjectiveSpec::all()).unwrap() + 1.0).abs() < 1e-12);
        st.c = vec![vec![0.0; 25]];
        assert_eq!(objective(&m, &st, &ObjectiveSpec::all()).unwrap(), 0.0);
        let mut two = solved(&m, &problem(vec![1, -1], vec![0.5, 0.5], 0.0));
        two.c = vec![vec![0.3; 25], vec![0.3; 25]];
        assert_eq!(objective(&m, &two, &ObjectiveSpec::all()).unwrap(), 0.0);
    }

    #[test]
    fn zero_valence_gives_zero_adjoint() {
        let m = square(6, 1.0).unwrap();
        let st = solved(&m, &problem(vec![0], vec![1.0], -0.3));
        let (_, rhs) = assemble_adjoint(&m, &st, &ObjectiveSpec::all()).unwrap();
        assert!(rhs.iter().all(|&x| x == 0.0));
        let adj = solve_adjoint(&m, &st, &ObjectiveSpec::all(), 1e-10).unwrap();
        assert!(adj.s[0].iter().chain(&adj.psi).all(|&x| x == 0.0));
    }

    #[test]
    fn decoupled_single_species_matches_poisson() {
        // no ions: c = 0, phi = g, so psi = 0 and s solves A s = (1, v)
        let m = square(9, 1.0).unwrap();
        let st = solved(&m, &problem(vec![1], vec![0.0], -0.4));
        assert!(st.phi.iter().all(|p| (p + 0.4).abs() < 1e-12));
        let adj = solve_adjoint(&m, &st, &ObjectiveSpec::all(), 1e-12).unwrap();
        let a = assemble_stiffness(&m, &vec![1.0; m.num_triangles()]).unwrap();
        let f = load_vector(&m, &vec![1.0; m.num_vertices()], None).unwrap();
        let inflow = m.nodes_on(&[Label::GammaIn]);
        let nodes: Vec<usize> = (0..m.num_vertices()).filter(|&v| inflow[v]).collect();
        let (ad, fd) = apply_dirichlet(&a, &f, &nodes, &vec![0.0; nodes.len()]).unwrap();
        let s = solve_spd(&ad, &fd, SolverOptions { tol: 1e-13, max_iter: 0 }).unwrap();
        assert!(max_abs_diff(&s, &adj.s[0]) < 1e-10);
        assert!(adj.psi.iter().all(|p| p.abs() < 1e-12));
    }

    #[test]
    fn matches_dense_factorization() {
        let m = square(7, 1.0).unwrap();
        let st = solved(&m, &problem(vec![1, -1], vec![0.5, 0.3], -0.5));
        let (mat, rhs) = assemble_adjoint(&m, &st, &ObjectiveSpec::all()).unwrap();
        let adj = solve_adjoint(&m, &st, &ObjectiveSpec::all(), 1e-12).unwrap();
        let nn = mat.nrows();
        let d = mat.to_dense();
        let x = DMatrix::from_fn(nn, nn, |i, j| d[i][j]).lu().solve(&DVector::from_column_slice(&rhs)).unwrap();
        let ours: Vec<f64> = adj.s.iter().flatten().chain(&adj.psi).copied().collect();
        assert!(max_abs_diff(&ours, x.as_slice()) < 1e-8);
        // boundary conditions
        let inflow = m.nodes_on(&[Label::GammaIn]);
        let right = m.nodes_on(&[Label::Gamma2]);
        for v in 0..m.num_vertices() {
            if inflow[v] {
                assert_eq!(adj.s[0][v], 0.0);
                assert_eq!(adj.s[1][v], 0.0);
            }
            if right[v] {
                assert_eq!(adj.psi[v], 0.0);
            }
        }
    }

    #[test]
    fn block_structure_and_rhs() {
        let m = square(6, 1.0).unwrap();
        let n = m.num_vertices();
        let st = solved(&m, &problem(vec![1, -1], vec![0.5, 0.5], -0.5));
        let (mat, _) = assemble_adjoint(&m, &st, &ObjectiveSpec::all()).unwrap();
        for (i, j, v) in mat.triplets() {
            if i < 2 * n && j < 2 * n && i / n != j / n {
                assert_eq!(v, 0.0, "species coupling at ({i}, {j})");
            }
        }
        let single = solved(&m, &problem(vec![1], vec![1.0], -0.5));
        let (_, rhs) = assemble_adjoint(&m, &single, &ObjectiveSpec::all()).unwrap();
        let b1 = assemble_mass(&m).unwrap().mul_vec(&vec![1.0; n]);
        let inflow = m.nodes_on(&[Label::GammaIn]);
        for v in 0..n {
            if !inflow[v] {
                assert!((rhs[v] - b1[v]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn region_support_of_rhs() {
        let m = square(9, 1.0).unwrap();
        let st = solved(&m, &problem(vec![1], vec![1.0], -0.5));
        let left: Vec<bool> = (0..m.num_triangles())
            .map(|t| m.triangle_points(t).iter().map(|p| p[0]).sum::<f64>() < 1.5)
            .collect();
        let spec = ObjectiveSpec { region: Some(left.clone()) };
        let (_, rhs) = assemble_adjoint(&m, &st, &spec).unwrap();
        let mut touched = vec![false; m.num_vertices()];
        for (t, tri) in m.triangles().iter().enumerate() {
            if left[t] {
                tri.iter().for_each(|&v| touched[v] = true);
            }
        }
        for v in 0..m.num_vertices() {
            if !touched[v] {
                assert_eq!(rhs[v], 0.0);
            }
        }
        let half = objective(&m, &st, &spec).unwrap();
        let full = objective(&m, &st, &ObjectiveSpec::all()).unwrap();
        assert!(half > full);
    }

    #[test]
    fn linear_in_rhs() {
        let m = square(6, 1.0).unwrap();
        let st = solved(&m, &problem(vec![1], vec![1.0], -0.5));
        let (mat, rhs) = assemble_adjoint(&m, &st, &ObjectiveSpec::all()).unwrap();
        let x1 = solve_general(&mat, &rhs, SolverOptions::default()).unwrap();
        let doubled: Vec<f64> = rhs.iter().map(|x| 2.0 * x).collect();
        let x2 = solve_general(&mat, &doubled, SolverOptions::default()).unwrap();
        for (a, b) in x1.iter().zip(&x2) {
            assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn unconverged_state_rejected() {
        let m = square(4, 1.0).unwrap();
        let mut st = solved(&m, &problem(vec![1], vec![1.0], -0.5));
        st.converged = false;
        assert_eq!(assemble_adjoint(&m, &st, &ObjectiveSpec::all()).unwrap_err(), AdjointError::Unconverged);
    }

    #[test]
    fn potential_datum_derivative_matches_finite_differences() {
        let m = square(21, 1.0).unwrap();
        let p = problem(vec![1, -1], vec![0.5, 0.2], -0.5);
        let params = GummelParams { tol: 1e-11, ..GummelParams::default() };
        let right: Vec<bool> = (0..m.num_triangles())
            .map(|t| m.triangle_points(t).iter().map(|q| q[0]).sum::<f64>() > 1.5)
            .collect();
        let spec = ObjectiveSpec { region: Some(right) };
        let base = solved(&m, &p);
        let adj = solve_adjoint(&m, &base, &spec, 1e-12).unwrap();
        let sens = potential_datum_sensitivity(&m, &base, &adj).unwrap();
        let bump: Vec<f64> = m.vertices().iter().map(|q| (-((q[1] - 0.75) / 0.15).powi(2)).exp()).collect();
        let predicted: f64 = sens.iter().zip(&bump).map(|(s, b)| s * b).sum();
        let h = 1e-3;
        let j_at = |t: f64| {
            let datum: Vec<f64> = bump.iter().map(|b| -0.75 + t * b).collect();
            let solver = PnpSolver::new(&m, &p, params).unwrap().with_potential_datum(&datum).unwrap();
            objective(&m, &solver.solve(Some(&base)).unwrap(), &spec).unwrap()
        };
        let fd = (j_at(h) - j_at(-h)) / (2.0 * h);
        assert!((fd - predicted).abs() <= 0.01 * fd.abs(), "fd {fd} adjoint {predicted}");
        // a uniform shift of the datum leaves the concentrations unchanged
        let total: f64 = sens.iter().sum();
        assert!(total.abs() <= 1e-3 * sens.iter().map(|x| x.abs()).sum::<f64>(), "{total}");
    }
}
