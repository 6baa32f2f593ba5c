use super::{check_len, CsrMatrix, FemError};
use crate::mesh::Mesh;

/// Geometry of one P1 triangle: area and constant barycentric gradients.
#[derive(Debug, Clone, Copy)]
pub struct Element {
    pub area: f64,
    pub grads: [[f64; 2]; 3],
    points: [[f64; 2]; 3],
}

impl Element {
    pub fn new(mesh: &Mesh, t: usize) -> Result<Element, FemError> {
        let p = mesh.triangle_points(t);
        let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
        let area = 0.5 * det;
        let scale = (0..3)
            .map(|k| {
                let q = p[(k + 1) % 3];
                (q[0] - p[k][0]).powi(2) + (q[1] - p[k][1]).powi(2)
            })
            .fold(0.0, f64::max);
        if !(area > f64::EPSILON * scale) {
            return Err(FemError::DegenerateTriangle { triangle: t, area });
        }
        let grads = [
            [(p[1][1] - p[2][1]) / det, (p[2][0] - p[1][0]) / det],
            [(p[2][1] - p[0][1]) / det, (p[0][0] - p[2][0]) / det],
            [(p[0][1] - p[1][1]) / det, (p[1][0] - p[0][0]) / det],
        ];
        Ok(Element { area, grads, points: p })
    }

    /// Gradient of the P1 interpolant of the three vertex values. Built from
    /// vertex differences so constants give an exact zero.
    pub fn gradient(&self, f: [f64; 3]) -> [f64; 2] {
        let p = &self.points;
        let (e1, e2) = ([p[1][0] - p[0][0], p[1][1] - p[0][1]], [p[2][0] - p[0][0], p[2][1] - p[0][1]]);
        let (d1, d2) = (f[1] - f[0], f[2] - f[0]);
        let det = 2.0 * self.area;
        [(d1 * e2[1] - d2 * e1[1]) / det, (d2 * e1[0] - d1 * e2[0]) / det]
    }

    pub fn points(&self) -> &[[f64; 2]; 3] {
        &self.points
    }
}

pub(crate) fn dot2(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub(crate) fn gather<T: Copy>(field: &[T], tri: [usize; 3]) -> [T; 3] {
    [field[tri[0]], field[tri[1]], field[tri[2]]]
}

fn assemble_local<F>(mesh: &Mesh, mut local: F) -> Result<CsrMatrix, FemError>
where
    F: FnMut(usize, &Element, usize, usize) -> f64,
{
    let n = mesh.num_vertices();
    let mut trip = Vec::with_capacity(9 * mesh.num_triangles());
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let el = Element::new(mesh, t)?;
        for a in 0..3 {
            for b in 0..3 {
                trip.push((tri[a], tri[b], local(t, &el, a, b)));
            }
        }
    }
    Ok(CsrMatrix::from_triplets(n, n, trip))
}

/// `sum_K k_K int_K grad(nu_i) . grad(nu_j)` with one coefficient per element.
pub fn assemble_stiffness(mesh: &Mesh, coefficient: &[f64]) -> Result<CsrMatrix, FemError> {
    check_len(mesh.num_triangles(), coefficient.len())?;
    if let Some((element, &value)) = coefficient.iter().enumerate().find(|(_, c)| !(c.is_finite() && **c >= 0.0)) {
        return Err(FemError::Coefficient { element, value });
    }
    assemble_local(mesh, |t, el, a, b| coefficient[t] * el.area * dot2(el.grads[a], el.grads[b]))
}

/// Consistent P1 mass matrix.
pub fn assemble_mass(mesh: &Mesh) -> Result<CsrMatrix, FemError> {
    assemble_local(mesh, |_, el, a, b| if a == b { el.area / 6.0 } else { el.area / 12.0 })
}

/// `(C)_{ij} = z * int (grad(phi) . grad(nu_i)) nu_j`. Row index follows the
/// gradient factor, so the operator `s -> int grad(phi).grad(s) v` is `C^T`.
pub fn assemble_convection(mesh: &Mesh, phi: &[f64], z: f64) -> Result<CsrMatrix, FemError> {
    check_len(mesh.num_vertices(), phi.len())?;
    assemble_local(mesh, |t, el, a, _b| {
        let gphi = el.gradient(gather(phi, mesh.triangles()[t]));
        z * dot2(gphi, el.grads[a]) * el.area / 3.0
    })
}

/// `(D)_{ij} = int c grad(nu_i) . grad(nu_j)` for a nodal P1 weight `c`.
pub fn assemble_weighted_stiffness(mesh: &Mesh, c: &[f64]) -> Result<CsrMatrix, FemError> {
    check_len(mesh.num_vertices(), c.len())?;
    assemble_local(mesh, |t, el, a, b| {
        let cv = gather(c, mesh.triangles()[t]);
        let mean = (cv[0] + cv[1] + cv[2]) / 3.0;
        mean * el.area * dot2(el.grads[a], el.grads[b])
    })
}

/// Row sums of the consistent mass matrix (each vertex's area share).
pub fn lumped_mass(mesh: &Mesh) -> Result<Vec<f64>, FemError> {
    let mut m = vec![0.0; mesh.num_vertices()];
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let el = Element::new(mesh, t)?;
        for &v in tri {
            m[v] += el.area / 3.0;
        }
    }
    Ok(m)
}

/// `(B_region f)_i`: load vector of a nodal P1 function over the selected elements.
pub fn load_vector(mesh: &Mesh, f: &[f64], region: Option<&[bool]>) -> Result<Vec<f64>, FemError> {
    check_len(mesh.num_vertices(), f.len())?;
    if let Some(r) = region {
        check_len(mesh.num_triangles(), r.len())?;
    }
    let mut out = vec![0.0; mesh.num_vertices()];
    for (t, tri) in mesh.triangles().iter().enumerate() {
        if region.is_some_and(|r| !r[t]) {
            continue;
        }
        let el = Element::new(mesh, t)?;
        let fv = gather(f, *tri);
        let sum = fv[0] + fv[1] + fv[2];
        for a in 0..3 {
            out[tri[a]] += el.area / 12.0 * (sum + fv[a]);
        }
    }
    Ok(out)
}

/// Exact integral of a P1 field over all elements or the selected ones.
pub fn integrate(mesh: &Mesh, f: &[f64], region: Option<&[bool]>) -> Result<f64, FemError> {
    check_len(mesh.num_vertices(), f.len())?;
    if let Some(r) = region {
        check_len(mesh.num_triangles(), r.len())?;
    }
    let mut total = 0.0;
    for (t, tri) in mesh.triangles().iter().enumerate() {
        if region.is_some_and(|r| !r[t]) {
            continue;
        }
        let area = mesh.signed_area(t);
        let fv = gather(f, *tri);
        total += area * (fv[0] + fv[1] + fv[2]) / 3.0;
    }
    Ok(total)
}

/// Element-constant gradient of a P1 field.
pub fn gradient(mesh: &Mesh, f: &[f64]) -> Result<Vec<[f64; 2]>, FemError> {
    check_len(mesh.num_vertices(), f.len())?;
    (0..mesh.num_triangles())
        .map(|t| Ok(Element::new(mesh, t)?.gradient(gather(f, mesh.triangles()[t]))))
        .collect()
}

/// Imposes `x[nodes[k]] = values[k]` by row replacement and column
/// elimination: constrained rows become identity rows, and known values are
/// moved to the right-hand side of the remaining rows, so symmetric systems
/// stay symmetric.
pub fn apply_dirichlet(
    matrix: &CsrMatrix,
    rhs: &[f64],
    nodes: &[usize],
    values: &[f64],
) -> Result<(CsrMatrix, Vec<f64>), FemError> {
    let n = matrix.nrows();
    check_len(n, rhs.len())?;
    check_len(nodes.len(), values.len())?;
    let mut fixed: Vec<Option<f64>> = vec![None; n];
    for (&node, &v) in nodes.iter().zip(values) {
        let slot = fixed.get_mut(node).ok_or(FemError::NodeOutOfRange(node))?;
        match *slot {
            Some(prev) if prev != v => {
                return Err(FemError::DirichletConflict { node, first: prev, second: v })
            }
            _ => *slot = Some(v),
        }
    }
    let missing: Vec<usize> = (0..n)
        .filter(|&i| fixed[i].is_some() && matrix.row(i).all(|(j, _)| j != i))
        .collect();
    let mut a = if missing.is_empty() {
        matrix.clone()
    } else {
        let mut trip: Vec<_> = matrix.triplets().collect();
        trip.extend(missing.iter().map(|&i| (i, i, 0.0)));
        CsrMatrix::from_triplets(n, matrix.ncols(), trip)
    };
    let mut b = rhs.to_vec();
    let (row_ptr, col_idx) = (a.row_ptr().to_vec(), a.col_idx().to_vec());
    let vals = a.values_mut();
    for i in 0..n {
        for k in row_ptr[i]..row_ptr[i + 1] {
            let j = col_idx[k];
            if fixed[i].is_some() {
                vals[k] = if i == j { 1.0 } else { 0.0 };
            } else if let Some(g) = fixed[j] {
                b[i] -= vals[k] * g;
                vals[k] = 0.0;
            }
        }
    }
    for (i, f) in fixed.iter().enumerate() {
        if let Some(g) = f {
            b[i] = *g;
        }
    }
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{solve_spd, SolverOptions};
    use crate::io::generate::square;
    use crate::mesh::Label;
    use approx::assert_relative_eq;

    fn two_triangle_square() -> Mesh {
        square(2, 1.0).unwrap()
    }

    fn reference_triangle() -> Mesh {
        Mesh::new(
            vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            vec![[0, 1, 2]],
            vec![([0, 1], Label::Gamma1), ([1, 2], Label::Gamma2), ([2, 0], Label::GammaIn)],
        )
        .unwrap()
    }

    /// Three-point edge-midpoint rule, exact for quadratics.
    fn midpoint_rule(p: &[[f64; 2]; 3], f: impl Fn([f64; 3]) -> f64) -> f64 {
        let area = 0.5 * ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]));
        let pts = [[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]];
        pts.iter().map(|&l| f(l)).sum::<f64>() * area / 3.0
    }

    #[test]
    fn stiffness_matches_hand_assembly() {
        let m = two_triangle_square();
        let a = assemble_stiffness(&m, &[1.0, 1.0]).unwrap();
        // vertex order of the generator: (0,0) (1,0) (0,1) (1,1)
        let pos = |x: f64, y: f64| m.vertices().iter().position(|p| p[0] == x && p[1] == y).unwrap();
        let (v00, v10, v11, v01) = (pos(0.0, 0.0), pos(1.0, 0.0), pos(1.0, 1.0), pos(0.0, 1.0));
        // the diagonal runs through the corner carrying both right angles' neighbors
        let diag_through_origin = m.triangles().iter().all(|t| t.contains(&v00) && t.contains(&v11));
        let (p, q, r, s) = if diag_through_origin { (v00, v10, v11, v01) } else { (v10, v11, v01, v00) };
        // hand-assembled criss-cross pattern with diagonal p-r
        let expected = [
            (p, p, 1.0), (p, q, -0.5), (p, r, 0.0), (p, s, -0.5),
            (q, q, 1.0), (q, r, -0.5), (q, s, 0.0),
            (r, r, 1.0), (r, s, -0.5),
            (s, s, 1.0),
        ];
        for (i, j, v) in expected {
            assert_relative_eq!(a.get(i, j), v, epsilon = 1e-15);
            assert_relative_eq!(a.get(j, i), v, epsilon = 1e-15);
        }
        let a2 = assemble_stiffness(&m, &[2.0, 2.0]).unwrap();
        for (i, j, v) in a.triplets() {
            assert_eq!(a2.get(i, j), 2.0 * v);
        }
    }

    #[test]
    fn stiffness_kernel_contains_constants() {
        let m = square(9, 1.0).unwrap();
        let a = assemble_stiffness(&m, &vec![1.0; m.num_triangles()]).unwrap();
        let r = a.mul_vec(&vec![1.0; m.num_vertices()]);
        assert!(r.iter().all(|v| v.abs() <= 1e-12 * a.max_abs()));
        assert!(matches!(
            assemble_stiffness(&m, &vec![-1.0; m.num_triangles()]),
            Err(FemError::Coefficient { .. })
        ));
    }

    #[test]
    fn mass_reference_and_partition_of_unity() {
        let m = reference_triangle();
        let b = assemble_mass(&m).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 2.0 } else { 1.0 } * 0.5 / 12.0;
                assert_relative_eq!(b.get(i, j), e, epsilon = 1e-16);
            }
        }
        let sq = square(7, 1.0).unwrap();
        let b = assemble_mass(&sq).unwrap();
        let ones = vec![1.0; sq.num_vertices()];
        let total: f64 = b.mul_vec(&ones).iter().sum();
        assert_relative_eq!(total, sq.domain_volume(), max_relative = 1e-12);
        let lumped = lumped_mass(&sq).unwrap();
        for (l, r) in lumped.iter().zip(b.mul_vec(&ones)) {
            assert_relative_eq!(*l, r, max_relative = 1e-12);
        }
        let b2 = assemble_mass(&sq.scaled(3.0).unwrap()).unwrap();
        for (i, j, v) in b.triplets() {
            assert_relative_eq!(b2.get(i, j), 9.0 * v, max_relative = 1e-12);
        }
    }

    #[test]
    fn convection_quadrature_oracle() {
        let m = square(4, 1.0).unwrap();
        let phi: Vec<f64> = m.vertices().iter().map(|p| p[0]).collect();
        let c = assemble_convection(&m, &phi, 1.0).unwrap();
        let mut oracle = vec![vec![0.0; m.num_vertices()]; m.num_vertices()];
        for (t, tri) in m.triangles().iter().enumerate() {
            let p = m.triangle_points(t);
            // d(lambda_a)/dx by finite differences of barycentric coordinates
            let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
            let bary = |x: f64, y: f64| {
                let l1 = ((x - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (y - p[0][1])) / det;
                let l2 = ((p[1][0] - p[0][0]) * (y - p[0][1]) - (x - p[0][0]) * (p[1][1] - p[0][1])) / det;
                [1.0 - l1 - l2, l1, l2]
            };
            let (l0, l1) = (bary(0.3, 0.3), bary(0.3 + 1e-3, 0.3));
            for a in 0..3 {
                let dx = (l1[a] - l0[a]) / 1e-3;
                for b in 0..3 {
                    oracle[tri[a]][tri[b]] += midpoint_rule(&p, |l| dx * l[b]);
                }
            }
        }
        for i in 0..m.num_vertices() {
            for j in 0..m.num_vertices() {
                assert_relative_eq!(c.get(i, j), oracle[i][j], epsilon = 1e-12);
            }
        }
        let neg = assemble_convection(&m, &phi, -1.0).unwrap();
        for (i, j, v) in c.triplets() {
            assert_eq!(neg.get(i, j), -v);
        }
        let flat = assemble_convection(&m, &vec![3.0; m.num_vertices()], 1.0).unwrap();
        assert_eq!(flat.max_abs(), 0.0);
    }

    #[test]
    fn weighted_stiffness_cases() {
        let m = square(5, 1.0).unwrap();
        let unit = assemble_stiffness(&m, &vec![1.0; m.num_triangles()]).unwrap();
        let d1 = assemble_weighted_stiffness(&m, &vec![1.0; m.num_vertices()]).unwrap();
        for (i, j, v) in unit.triplets() {
            assert!((d1.get(i, j) - v).abs() <= 1e-14);
        }
        let d0 = assemble_weighted_stiffness(&m, &vec![0.0; m.num_vertices()]).unwrap();
        assert_eq!(d0.max_abs(), 0.0);

        let r = reference_triangle();
        let c: Vec<f64> = r.vertices().iter().map(|p| p[0]).collect();
        let d = assemble_weighted_stiffness(&r, &c).unwrap();
        let el = Element::new(&r, 0).unwrap();
        let p = r.triangle_points(0);
        for a in 0..3 {
            for b in 0..3 {
                let g = dot2(el.grads[a], el.grads[b]);
                let q = midpoint_rule(&p, |l| g * (l[0] * c[0] + l[1] * c[1] + l[2] * c[2]));
                assert_relative_eq!(d.get(a, b), q, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn integrate_and_gradient() {
        let m = square(6, 1.0).unwrap();
        let ones = vec![1.0; m.num_vertices()];
        assert_relative_eq!(integrate(&m, &ones, None).unwrap(), 1.0, max_relative = 1e-12);
        let x: Vec<f64> = m.vertices().iter().map(|p| p[0]).collect();
        assert_relative_eq!(integrate(&m, &x, None).unwrap(), 0.5, epsilon = 1e-12);
        let left: Vec<bool> = (0..m.num_triangles())
            .map(|t| m.triangle_points(t).iter().map(|p| p[0]).sum::<f64>() / 3.0 < 0.5)
            .collect();
        assert_relative_eq!(integrate(&m, &ones, Some(&left)).unwrap(), 0.5, max_relative = 1e-12);

        let g = gradient(&m, &vec![4.0; m.num_vertices()]).unwrap();
        assert!(g.iter().all(|v| v[0] == 0.0 && v[1] == 0.0));
        let f: Vec<f64> = m.vertices().iter().map(|p| 2.0 * p[0] + 3.0 * p[1]).collect();
        for v in gradient(&m, &f).unwrap() {
            assert!((v[0] - 2.0).abs() < 1e-13 && (v[1] - 3.0).abs() < 1e-13);
        }
    }

    #[test]
    fn dirichlet_empty_and_full() {
        let m = square(4, 1.0).unwrap();
        let a = assemble_stiffness(&m, &vec![1.0; m.num_triangles()]).unwrap();
        let b = vec![1.0; m.num_vertices()];
        let (a2, b2) = apply_dirichlet(&a, &b, &[], &[]).unwrap();
        assert_eq!(a2, a);
        assert_eq!(b2, b);

        let nodes: Vec<usize> = (0..m.num_vertices()).collect();
        let vals: Vec<f64> = nodes.iter().map(|&i| i as f64 * 0.1).collect();
        let (a3, b3) = apply_dirichlet(&a, &b, &nodes, &vals).unwrap();
        let x = solve_spd(&a3, &b3, SolverOptions::default()).unwrap();
        assert_eq!(x, vals);

        let err = apply_dirichlet(&a, &b, &[0, 0], &[1.0, 2.0]).unwrap_err();
        assert!(matches!(err, FemError::DirichletConflict { node: 0, .. }));
        assert!(apply_dirichlet(&a, &b, &[0, 0], &[1.0, 1.0]).is_ok());
    }

    #[test]
    fn laplace_with_linear_exact_solution() {
        let m = square(11, 1.0).unwrap();
        let a = assemble_stiffness(&m, &vec![1.0; m.num_triangles()]).unwrap();
        let left = m.nodes_on(&[Label::GammaIn]);
        let right = m.nodes_on(&[Label::Gamma2]);
        let mut nodes = Vec::new();
        let mut vals = Vec::new();
        for v in 0..m.num_vertices() {
            if left[v] {
                nodes.push(v);
                vals.push(0.0);
            } else if right[v] {
                nodes.push(v);
                vals.push(1.0);
            }
        }
        let (a2, b2) = apply_dirichlet(&a, &vec![0.0; m.num_vertices()], &nodes, &vals).unwrap();
        // elimination keeps the system symmetric
        for (i, j, v) in a2.triplets() {
            assert_eq!(a2.get(j, i), v);
        }
        let x = solve_spd(&a2, &b2, SolverOptions::default()).unwrap();
        for (xi, p) in x.iter().zip(m.vertices()) {
            assert!((xi - p[0]).abs() < 1e-8, "{xi} vs {}", p[0]);
        }
    }
}
