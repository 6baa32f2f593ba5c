//! Eulerian derivatives of the objective and of the augmented Lagrangian
//! `L = J + l (V - C1) + beta/2 (V - C1)^2 + gamma/2 P^2`, where `V` is the
//! domain area and `P` the boundary length.

use crate::adjoint::{weighted_charge, AdjointState, ObjectiveSpec};
use crate::fem::assemble::{dot2, gather};
use crate::fem::{Element, FemError};
use crate::mesh::{BoundarySelector, Label, Mesh};
use crate::pnp::PnpState;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ShapeGradError {
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error("field length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error("mesh has no G2 boundary")]
    NoDeformableBoundary,
    #[error("invalid constraint parameters: {0}")]
    Constraint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientForm {
    Domain,
    Boundary,
}

impl std::str::FromStr for GradientForm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "domain" => Ok(GradientForm::Domain),
            "boundary" => Ok(GradientForm::Boundary),
            other => Err(format!("unknown gradient form '{other}' (expected domain or boundary)")),
        }
    }
}

impl std::fmt::Display for GradientForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GradientForm::Domain => "domain",
            GradientForm::Boundary => "boundary",
        })
    }
}

/// A shape derivative as a linear functional on P1 vector fields.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeGradient {
    pub kind: GradientForm,
    /// Minus the derivative along each nodal basis field: entry `[v][d]`
    /// pairs with the field equal to `nu_v` in component `d`.
    pub functional: Vec<[f64; 2]>,
    /// Nodal boundary density on G2 (zero elsewhere), boundary form only.
    pub boundary_density: Option<Vec<f64>>,
}

impl ShapeGradient {
    /// Derivative along the nodal field `theta`.
    pub fn pair(&self, theta: &[[f64; 2]]) -> f64 {
        -self.functional.iter().zip(theta).map(|(g, t)| dot2(*g, *t)).sum::<f64>()
    }

    /// The same functional with the multiplier, penalty and perimeter terms added.
    pub fn augmented(&self, mesh: &Mesh, cs: &ConstraintState) -> Result<ShapeGradient, ShapeGradError> {
        let extra = constraint_functional(mesh, cs, self.kind)?;
        let functional = self.functional.iter().zip(&extra).map(|(g, e)| [g[0] - e[0], g[1] - e[1]]).collect();
        Ok(ShapeGradient { kind: self.kind, functional, boundary_density: self.boundary_density.clone() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintState {
    /// Lagrange multiplier.
    pub l: f64,
    pub beta: f64,
    /// Target volume.
    pub c1: f64,
    /// Perimeter weight.
    pub gamma: f64,
}

impl ConstraintState {
    pub fn validate(&self) -> Result<(), ShapeGradError> {
        if !(self.beta > 0.0) || !(self.c1 > 0.0) || !(self.gamma >= 0.0) || !self.l.is_finite() {
            return Err(ShapeGradError::Constraint(format!(
                "need beta > 0, C1 > 0, gamma >= 0 (got beta {}, C1 {}, gamma {})",
                self.beta, self.c1, self.gamma
            )));
        }
        Ok(())
    }

    /// Coefficient `l + beta (V - C1)` of the volume derivative.
    pub fn volume_weight(&self, volume: f64) -> f64 {
        self.l + self.beta * (volume - self.c1)
    }
}

/// Value of the augmented Lagrangian for objective value `j`.
pub fn lagrangian(j: f64, mesh: &Mesh, cs: &ConstraintState) -> f64 {
    let dv = mesh.domain_volume() - cs.c1;
    let p = mesh.boundary_measure(BoundarySelector::All);
    j + cs.l * dv + 0.5 * cs.beta * dv * dv + 0.5 * cs.gamma * p * p
}

/// Uzawa step `l <- l + beta (V - C1)`.
pub fn update_multiplier(cs: &ConstraintState, volume: f64) -> ConstraintState {
    ConstraintState { l: cs.l + cs.beta * (volume - cs.c1), ..*cs }
}

fn check_fields(mesh: &Mesh, state: &PnpState, adj: &AdjointState) -> Result<(), ShapeGradError> {
    let n = mesh.num_vertices();
    let lens = std::iter::once(state.phi.len())
        .chain(state.c.iter().map(Vec::len))
        .chain(adj.s.iter().map(Vec::len))
        .chain(std::iter::once(adj.psi.len()));
    for got in lens {
        if got != n {
            return Err(ShapeGradError::Length { expected: n, got });
        }
    }
    if adj.s.len() != state.c.len() {
        return Err(ShapeGradError::Length { expected: state.c.len(), got: adj.s.len() });
    }
    Ok(())
}

/// Per-element data of the domain form: the weight `W` of `div theta` and the
/// symmetric tensor `S` with `M(theta) grad u . grad v` summed into `M(theta) : S`.
struct ElementTerms {
    el: Element,
    w: f64,
    s: [[f64; 2]; 2],
}

fn element_terms(
    mesh: &Mesh,
    state: &PnpState,
    adj: &AdjointState,
    spec: &ObjectiveSpec,
) -> Result<Vec<ElementTerms>, ShapeGradError> {
    check_fields(mesh, state, adj)?;
    if let Some(r) = &spec.region {
        if r.len() != mesh.num_triangles() {
            return Err(ShapeGradError::Length { expected: mesh.num_triangles(), got: r.len() });
        }
    }
    let charge = weighted_charge(state);
    let eps = state.problem.epsilon;
    let mut out = Vec::with_capacity(mesh.num_triangles());
    for (t, &tri) in mesh.triangles().iter().enumerate() {
        let el = Element::new(mesh, t)?;
        let q = gather(&charge, tri);
        let psi = gather(&adj.psi, tri);
        // exact P1 x P1 quadrature of (z.c) psi
        let qpsi = (q.iter().zip(&psi).map(|(a, b)| a * b).sum::<f64>() + q.iter().sum::<f64>() * psi.iter().sum::<f64>()) / 12.0;
        let qmean = q.iter().sum::<f64>() / 3.0;
        let chi = if spec.contains(t) { 1.0 } else { 0.0 };
        let w = -qpsi - chi * qmean;

        let gphi = el.gradient(gather(&state.phi, tri));
        let mut s = [[0.0; 2]; 2];
        let mut add = |a: [f64; 2], b: [f64; 2], k: f64| {
            for i in 0..2 {
                for j in 0..2 {
                    s[i][j] += 0.5 * k * (a[i] * b[j] + a[j] * b[i]);
                }
            }
        };
        for (i, c) in state.c.iter().enumerate() {
            let cv = gather(c, tri);
            let gs = el.gradient(gather(&adj.s[i], tri));
            add(el.gradient(cv), gs, 1.0);
            add(gphi, gs, state.problem.z(i) * cv.iter().sum::<f64>() / 3.0);
        }
        add(gphi, el.gradient(psi), eps);
        out.push(ElementTerms { el, w, s });
    }
    Ok(out)
}

/// Domain form of `dJ(theta)` with element-constant `D theta`.
pub fn dj_domain(
    mesh: &Mesh,
    state: &PnpState,
    adj: &AdjointState,
    theta: &[[f64; 2]],
    spec: &ObjectiveSpec,
) -> Result<f64, ShapeGradError> {
    if theta.len() != mesh.num_vertices() {
        return Err(ShapeGradError::Length { expected: mesh.num_vertices(), got: theta.len() });
    }
    let terms = element_terms(mesh, state, adj, spec)?;
    let mut total = 0.0;
    for (tri, et) in mesh.triangles().iter().zip(&terms) {
        let th = gather(theta, *tri);
        let g0 = et.el.gradient([th[0][0], th[1][0], th[2][0]]);
        let g1 = et.el.gradient([th[0][1], th[1][1], th[2][1]]);
        // D theta rows are the component gradients
        let d = [g0, g1];
        let div = d[0][0] + d[1][1];
        let mut ms = div * (et.s[0][0] + et.s[1][1]);
        for i in 0..2 {
            for j in 0..2 {
                ms -= (d[i][j] + d[j][i]) * et.s[i][j];
            }
        }
        total += et.el.area * (et.w * div + ms);
    }
    Ok(total)
}

/// Domain-form gradient: `functional[v] = -dJ(nu_v e_d)`.
pub fn domain_gradient(
    mesh: &Mesh,
    state: &PnpState,
    adj: &AdjointState,
    spec: &ObjectiveSpec,
) -> Result<ShapeGradient, ShapeGradError> {
    let terms = element_terms(mesh, state, adj, spec)?;
    let mut functional = vec![[0.0; 2]; mesh.num_vertices()];
    for (tri, et) in mesh.triangles().iter().zip(&terms) {
        let tr = et.s[0][0] + et.s[1][1];
        for a in 0..3 {
            let g = et.el.grads[a];
            let sg = [et.s[0][0] * g[0] + et.s[0][1] * g[1], et.s[1][0] * g[0] + et.s[1][1] * g[1]];
            for d in 0..2 {
                functional[tri[a]][d] -= et.el.area * ((et.w + tr) * g[d] - 2.0 * sg[d]);
            }
        }
    }
    Ok(ShapeGradient { kind: GradientForm::Domain, functional, boundary_density: None })
}

/// Nodal density `b` on G2 with `dJ(theta) = int_G2 b theta.n ds`; zero off G2.
pub fn dj_boundary_density(
    mesh: &Mesh,
    state: &PnpState,
    adj: &AdjointState,
    spec: &ObjectiveSpec,
) -> Result<Vec<f64>, ShapeGradError> {
    check_fields(mesh, state, adj)?;
    let charge = weighted_charge(state);
    let eps = state.problem.epsilon;
    let n = mesh.num_vertices();
    let mut acc = vec![0.0; n];
    let mut weight = vec![0.0; n];
    let mut any = false;
    for e in mesh.boundary_edges().iter().filter(|e| e.label == Label::Gamma2) {
        any = true;
        let [a, b] = e.vertices;
        let len = mesh.edge_length(e);
        let (_, normal) = mesh.edge_frame(e);
        let dt = |f: &[f64]| (f[b] - f[a]) / len;
        let el = Element::new(mesh, e.triangle)?;
        let tri = mesh.triangles()[e.triangle];
        let dn = |f: &[f64]| dot2(el.gradient(gather(f, tri)), normal);
        let chi = if spec.contains(e.triangle) { 1.0 } else { 0.0 };
        let dphi_t = dt(&state.phi);
        let normal_term = -eps * dn(&state.phi) * dn(&adj.psi);
        for &v in &[a, b] {
            let mut val = normal_term - chi * charge[v];
            for (i, c) in state.c.iter().enumerate() {
                val += (dt(c) + state.problem.z(i) * c[v] * dphi_t) * dt(&adj.s[i]);
            }
            acc[v] += len * val;
            weight[v] += len;
        }
    }
    if !any {
        return Err(ShapeGradError::NoDeformableBoundary);
    }
    Ok(acc.iter().zip(&weight).map(|(s, w)| if *w > 0.0 { s / w } else { 0.0 }).collect())
}

/// Boundary-form gradient built from the G2 density with exact edge
/// integrals `int_e b nu_v n_d ds`.
pub fn boundary_gradient(
    mesh: &Mesh,
    state: &PnpState,
    adj: &AdjointState,
    spec: &ObjectiveSpec,
) -> Result<ShapeGradient, ShapeGradError> {
    let density = dj_boundary_density(mesh, state, adj, spec)?;
    Ok(ShapeGradient {
        kind: GradientForm::Boundary,
        functional: density_functional(mesh, &density, &[Label::Gamma2]),
        boundary_density: Some(density),
    })
}

/// `-int b nu_v n_d` over edges with the given labels, for P1 density `b`.
fn density_functional(mesh: &Mesh, density: &[f64], labels: &[Label]) -> Vec<[f64; 2]> {
    let mut f = vec![[0.0; 2]; mesh.num_vertices()];
    for e in mesh.boundary_edges().iter().filter(|e| labels.contains(&e.label)) {
        let [a, b] = e.vertices;
        let len = mesh.edge_length(e);
        let (_, normal) = mesh.edge_frame(e);
        let ia = len * (2.0 * density[a] + density[b]) / 6.0;
        let ib = len * (density[a] + 2.0 * density[b]) / 6.0;
        for d in 0..2 {
            f[a][d] -= ia * normal[d];
            f[b][d] -= ib * normal[d];
        }
    }
    f
}

/// Basis values of the multiplier, penalty and perimeter terms (not negated).
fn constraint_functional(mesh: &Mesh, cs: &ConstraintState, kind: GradientForm) -> Result<Vec<[f64; 2]>, ShapeGradError> {
    let n = mesh.num_vertices();
    let k = cs.volume_weight(mesh.domain_volume());
    let mut f = vec![[0.0; 2]; n];
    match kind {
        GradientForm::Domain => {
            for (t, tri) in mesh.triangles().iter().enumerate() {
                let el = Element::new(mesh, t)?;
                for a in 0..3 {
                    for d in 0..2 {
                        f[tri[a]][d] += k * el.area * el.grads[a][d];
                    }
                }
            }
        }
        GradientForm::Boundary => {
            for e in mesh.boundary_edges() {
                let len = mesh.edge_length(e);
                let (_, normal) = mesh.edge_frame(e);
                for &v in &e.vertices {
                    for d in 0..2 {
                        f[v][d] += k * 0.5 * len * normal[d];
                    }
                }
            }
        }
    }
    if cs.gamma != 0.0 {
        let p = mesh.boundary_measure(BoundarySelector::All);
        for e in mesh.boundary_edges() {
            // int_e div_G theta = (theta_b - theta_a) . t
            let (tangent, _) = mesh.edge_frame(e);
            let [a, b] = e.vertices;
            for d in 0..2 {
                f[b][d] += cs.gamma * p * tangent[d];
                f[a][d] -= cs.gamma * p * tangent[d];
            }
        }
    }
    Ok(f)
}

/// `dL(theta)` from a gradient of `J` of either form.
pub fn augmented_derivative(
    base: &ShapeGradient,
    mesh: &Mesh,
    cs: &ConstraintState,
    theta: &[[f64; 2]],
) -> Result<f64, ShapeGradError> {
    if theta.len() != mesh.num_vertices() {
        return Err(ShapeGradError::Length { expected: mesh.num_vertices(), got: theta.len() });
    }
    let extra = constraint_functional(mesh, cs, base.kind)?;
    Ok(base.pair(theta) + extra.iter().zip(theta).map(|(e, t)| dot2(*e, *t)).sum::<f64>())
}

/// First-order estimate `l0 = -int_G2 b ds / |boundary|` for a G2 density `b`.
pub fn init_multiplier(mesh: &Mesh, density: &[f64]) -> Result<f64, ShapeGradError> {
    if density.len() != mesh.num_vertices() {
        return Err(ShapeGradError::Length { expected: mesh.num_vertices(), got: density.len() });
    }
    let total = mesh.boundary_measure(BoundarySelector::All);
    if !(total > 0.0) {
        return Err(ShapeGradError::NoDeformableBoundary);
    }
    let flux: f64 = mesh
        .boundary_edges()
        .iter()
        .filter(|e| e.label == Label::Gamma2)
        .map(|e| 0.5 * mesh.edge_length(e) * (density[e.vertices[0]] + density[e.vertices[1]]))
        .sum();
    Ok(-flux / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::solve_adjoint;
    use crate::io::generate::square;
    use crate::pnp::{gummel_solve, GummelParams, PnpProblem};
    use approx::assert_relative_eq;

    fn case(m: &Mesh, valences: Vec<i32>, c_inf: Vec<f64>, g: f64) -> (PnpState, AdjointState) {
        let p = PnpProblem { valences, c_inf, g, epsilon: 1.0 };
        let st = gummel_solve(m, &p, GummelParams { tol: 1e-10, ..GummelParams::default() }, None).unwrap();
        let adj = solve_adjoint(m, &st, &ObjectiveSpec::all(), 1e-10).unwrap();
        (st, adj)
    }

    fn bump(m: &Mesh) -> Vec<[f64; 2]> {
        m.vertices()
            .iter()
            .map(|p| {
                let s = (std::f64::consts::PI * p[1]).sin().powi(2) * p[0].powi(3);
                [s, 0.3 * s]
            })
            .collect()
    }

    fn zeroed(m: &Mesh) -> (PnpState, AdjointState) {
        let (mut st, _) = case(m, vec![0], vec![1.0], 0.0);
        let n = m.num_vertices();
        st.c = vec![vec![0.0; n]];
        st.phi = vec![0.0; n];
        (st, AdjointState { s: vec![vec![0.0; n]], psi: vec![0.0; n] })
    }

    #[test]
    fn zero_and_translation() {
        let m = square(8, 1.0).unwrap();
        let (st, adj) = case(&m, vec![1, -1], vec![0.5, 0.3], -0.5);
        let spec = ObjectiveSpec::all();
        let zero = vec![[0.0; 2]; m.num_vertices()];
        assert_eq!(dj_domain(&m, &st, &adj, &zero, &spec).unwrap(), 0.0);
        let shift = vec![[0.3, -1.2]; m.num_vertices()];
        assert_eq!(dj_domain(&m, &st, &adj, &shift, &spec).unwrap(), 0.0);
        let g = domain_gradient(&m, &st, &adj, &spec).unwrap();
        assert!(g.pair(&shift).abs() < 1e-12);
    }

    #[test]
    fn functional_matches_direct_evaluation_and_is_linear() {
        let m = square(8, 1.0).unwrap();
        let (st, adj) = case(&m, vec![1], vec![1.0], -0.75);
        let spec = ObjectiveSpec::all();
        let g = domain_gradient(&m, &st, &adj, &spec).unwrap();
        let t1 = bump(&m);
        let t2: Vec<[f64; 2]> = m.vertices().iter().map(|p| [p[0] * p[1], (3.0 * p[0]).cos()]).collect();
        let d1 = dj_domain(&m, &st, &adj, &t1, &spec).unwrap();
        let d2 = dj_domain(&m, &st, &adj, &t2, &spec).unwrap();
        assert_relative_eq!(g.pair(&t1), d1, max_relative = 1e-10);
        let comb: Vec<[f64; 2]> = t1.iter().zip(&t2).map(|(a, b)| [2.5 * a[0] + b[0], 2.5 * a[1] + b[1]]).collect();
        let d = dj_domain(&m, &st, &adj, &comb, &spec).unwrap();
        assert_relative_eq!(d, 2.5 * d1 + d2, max_relative = 1e-10);
    }

    #[test]
    fn volume_derivative_identity() {
        let m = square(6, 1.0).unwrap();
        let (st, adj) = zeroed(&m);
        let base = domain_gradient(&m, &st, &adj, &ObjectiveSpec::all()).unwrap();
        assert!(base.functional.iter().all(|g| g[0] == 0.0 && g[1] == 0.0));
        let cs = ConstraintState { l: 1.0, beta: 0.0, c1: 1.0, gamma: 0.0 };
        let half: Vec<[f64; 2]> = m.vertices().iter().map(|p| [p[0] / 2.0, p[1] / 2.0]).collect();
        assert_relative_eq!(augmented_derivative(&base, &m, &cs, &half).unwrap(), 1.0, epsilon = 1e-10);
        let aug = base.augmented(&m, &cs).unwrap();
        assert_relative_eq!(aug.pair(&half), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn augmented_along_normal() {
        let m = square(9, 1.0).unwrap();
        let (st, adj) = case(&m, vec![1], vec![1.0], -0.75);
        let base = boundary_gradient(&m, &st, &adj, &ObjectiveSpec::all()).unwrap();
        let normal = m.nodal_normals(&[Label::Gamma2]);
        let cs = ConstraintState { l: 0.4, beta: 2.0, c1: 1.3, gamma: 0.0 };
        let expected = base.pair(&normal) + (0.4 + 2.0 * (1.0 - 1.3)) * 1.0;
        assert_relative_eq!(augmented_derivative(&base, &m, &cs, &normal).unwrap(), expected, epsilon = 1e-12);
        let neutral = ConstraintState { l: 0.0, beta: 2.0, c1: 1.0, gamma: 0.0 };
        assert_eq!(augmented_derivative(&base, &m, &neutral, &normal).unwrap(), base.pair(&normal));
        let zero = vec![[0.0; 2]; m.num_vertices()];
        assert_eq!(augmented_derivative(&base, &m, &cs, &zero).unwrap(), 0.0);
    }

    #[test]
    fn perimeter_term_matches_discrete_length_change() {
        let m = square(7, 1.0).unwrap();
        let (st, adj) = zeroed(&m);
        let base = domain_gradient(&m, &st, &adj, &ObjectiveSpec::all()).unwrap();
        let cs = ConstraintState { l: 0.0, beta: 0.0, c1: 1.0, gamma: 0.5 };
        let theta: Vec<[f64; 2]> = m.vertices().iter().map(|p| [p[0] * p[0], p[0] * p[1] + 0.2 * p[1].powi(3)]).collect();
        let half_sq = |mm: &Mesh| 0.25 * mm.boundary_measure(BoundarySelector::All).powi(2);
        let h = 1e-6;
        let fd = (half_sq(&m.deform(&theta, h).unwrap()) - half_sq(&m.deform(&theta, -h).unwrap())) / (2.0 * h);
        assert_relative_eq!(augmented_derivative(&base, &m, &cs, &theta).unwrap(), fd, max_relative = 1e-7);
    }

    #[test]
    fn multiplier_updates() {
        let cs = ConstraintState { l: 0.0, beta: 2.0, c1: 1.0, gamma: 0.0 };
        assert_eq!(update_multiplier(&cs, 1.0), cs);
        assert_relative_eq!(update_multiplier(&cs, 1.1).l, 0.2, epsilon = 1e-15);
        let vols = [1.2, 0.9, 1.05, 0.97];
        let mut s = cs;
        for v in vols {
            s = update_multiplier(&s, v);
        }
        let sum: f64 = vols.iter().map(|v| 2.0 * (v - 1.0)).sum();
        assert_relative_eq!(s.l, sum, epsilon = 1e-14);
        assert_eq!(s.beta, 2.0);
        assert!(ConstraintState { beta: -1.0, ..cs }.validate().is_err());
    }

    #[test]
    fn initial_multiplier() {
        let m = square(5, 1.0).unwrap();
        assert_eq!(init_multiplier(&m, &vec![0.0; 25]).unwrap(), 0.0);
        let right = m.nodes_on(&[Label::Gamma2]);
        let d: Vec<f64> = right.iter().map(|&r| if r { 3.0 } else { 0.0 }).collect();
        assert_relative_eq!(init_multiplier(&m, &d).unwrap(), -3.0 / 4.0, epsilon = 1e-14);
    }

    #[test]
    fn zero_valence_density_vanishes() {
        let m = square(6, 1.0).unwrap();
        let (st, adj) = case(&m, vec![0], vec![1.0], -0.5);
        let d = dj_boundary_density(&m, &st, &adj, &ObjectiveSpec::all()).unwrap();
        assert!(d.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn lagrangian_value() {
        let m = square(3, 2.0).unwrap();
        let cs = ConstraintState { l: 0.5, beta: 2.0, c1: 3.0, gamma: 0.1 };
        // V = 4, P = 8
        assert_relative_eq!(lagrangian(-1.0, &m, &cs), -1.0 + 0.5 + 1.0 + 0.05 * 64.0, epsilon = 1e-12);
    }
}
