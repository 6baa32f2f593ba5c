use faer::sparse::linalg::solvers::SpSolver;
use faer::sparse::SparseColMat;

use super::{check_len, dot, norm2, CsrMatrix, FemError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Relative residual target `|b - Ax| <= tol |b|`.
    pub tol: f64,
    /// Iteration cap; zero means `10 n`.
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tol: 1e-10, max_iter: 0 }
    }
}

fn residual(a: &CsrMatrix, x: &[f64], b: &[f64]) -> Vec<f64> {
    let ax = a.mul_vec(x);
    b.iter().zip(ax).map(|(bi, ai)| bi - ai).collect()
}

/// Jacobi-preconditioned conjugate gradients for symmetric positive definite
/// systems.
pub fn solve_spd(a: &CsrMatrix, b: &[f64], opts: SolverOptions) -> Result<Vec<f64>, FemError> {
    let n = a.nrows();
    check_len(n, b.len())?;
    check_len(n, a.ncols())?;
    let bnorm = norm2(b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(x);
    }
    let max_iter = if opts.max_iter == 0 { 10 * n.max(1) } else { opts.max_iter };
    let inv_diag: Vec<f64> = a
        .diagonal()
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            if d > 0.0 {
                Ok(1.0 / d)
            } else {
                Err(FemError::Breakdown(format!("non-positive diagonal {d:e} at row {i}")))
            }
        })
        .collect::<Result<_, _>>()?;

    let mut r = b.to_vec();
    let mut zv: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    let mut p = zv.clone();
    let mut rz = dot(&r, &zv);
    let mut ap = vec![0.0; n];
    for it in 0..max_iter {
        a.mul_vec_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(FemError::Breakdown(format!("p^T A p = {pap:e} at iteration {it}")));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if norm2(&r) <= opts.tol * bnorm {
            // recursive residual can drift; confirm against the true one
            if norm2(&residual(a, &x, b)) <= 10.0 * opts.tol * bnorm {
                return Ok(x);
            }
            r = residual(a, &x, b);
        }
        for i in 0..n {
            zv[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &zv);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = zv[i] + beta * p[i];
        }
    }
    Err(FemError::NotConverged { iterations: max_iter, residual: norm2(&residual(a, &x, b)) / bnorm })
}

/// Sparse LU with a few steps of iterative refinement, for nonsymmetric
/// systems.
pub fn solve_general(a: &CsrMatrix, b: &[f64], opts: SolverOptions) -> Result<Vec<f64>, FemError> {
    let n = a.nrows();
    check_len(n, b.len())?;
    check_len(n, a.ncols())?;
    let trip: Vec<(usize, usize, f64)> = a.triplets().collect();
    let mat = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &trip)
        .map_err(|e| FemError::Breakdown(format!("{e:?}")))?;
    // the factorization panics on an exactly zero pivot instead of reporting it
    let lu = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| mat.sp_lu()))
        .map_err(|_| FemError::Breakdown("zero pivot in sparse LU".into()))?
        .map_err(|e| FemError::Breakdown(format!("{e:?}")))?;
    let solve = |rhs: &[f64]| -> Vec<f64> {
        let mut col = faer::Col::<f64>::from_fn(n, |i| rhs[i]);
        lu.solve_in_place(&mut col);
        (0..n).map(|i| col[i]).collect()
    };
    let bnorm = norm2(b);
    let mut x = solve(b);
    let mut res = norm2(&residual(a, &x, b));
    for _ in 0..5 {
        if !x.iter().all(|v| v.is_finite()) {
            return Err(FemError::Breakdown("singular or ill-conditioned matrix".into()));
        }
        if res <= opts.tol * bnorm {
            break;
        }
        let dx = solve(&residual(a, &x, b));
        let cand: Vec<f64> = x.iter().zip(&dx).map(|(xi, di)| xi + di).collect();
        let cres = norm2(&residual(a, &cand, b));
        if cres >= res {
            break;
        }
        x = cand;
        res = cres;
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(FemError::Breakdown("singular or ill-conditioned matrix".into()));
    }
    // a direct solve that misses the target by orders of magnitude is a sign of
    // near-singularity rather than rounding
    if res > 1e4 * opts.tol * bnorm {
        return Err(FemError::NotConverged { iterations: 0, residual: res / bnorm });
    }
    Ok(x)
}
