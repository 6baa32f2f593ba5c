//! Configuration files, domain generators and exporters.

pub mod config;
pub mod generate;
pub mod history;
pub mod vtk;
