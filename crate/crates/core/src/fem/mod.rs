//! P1 Lagrange finite elements on triangles: exact element integrals,
//! sparse assembly, Dirichlet elimination and linear solvers.

pub(crate) mod assemble;
mod solve;
mod sparse;

pub use assemble::{
    apply_dirichlet, assemble_convection, assemble_mass, assemble_stiffness,
    assemble_weighted_stiffness, gradient, integrate, load_vector, lumped_mass, Element,
};
pub use solve::{solve_general, solve_spd, SolverOptions};
pub use sparse::CsrMatrix;

/// Nodal coefficients of a P1 function.
pub type ScalarField = Vec<f64>;

/// One 2-vector per mesh vertex.
pub type VectorField = Vec<[f64; 2]>;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FemError {
    #[error("degenerate triangle {triangle} (area {area:e})")]
    DegenerateTriangle { triangle: usize, area: f64 },
    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error("invalid coefficient {value} on element {element}")]
    Coefficient { element: usize, value: f64 },
    #[error("node {node} constrained to conflicting values {first} and {second}")]
    DirichletConflict { node: usize, first: f64, second: f64 },
    #[error("node index {0} out of range")]
    NodeOutOfRange(usize),
    #[error("iterative solver stopped after {iterations} iterations at relative residual {residual:e}")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("solver breakdown: {0}")]
    Breakdown(String),
}

pub(crate) fn check_len(expected: usize, got: usize) -> Result<(), FemError> {
    if expected == got {
        Ok(())
    } else {
        Err(FemError::Length { expected, got })
    }
}

/// Euclidean norm.
pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}
