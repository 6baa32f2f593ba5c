//! Shape optimization of valence-weighted ionic concentration under
//! steady-state Poisson-Nernst-Planck constraints, on 2D P1 triangle meshes.

pub mod adjoint;
pub mod driver;
pub mod fem;
pub mod flow;
pub mod io;
pub mod mesh;
pub mod pnp;
pub mod shapegrad;
