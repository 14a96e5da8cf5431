pub mod calibration;
pub mod cli;
pub mod constructions;
pub mod convexify;
pub mod core;
pub mod direct_method;
pub mod regularity;
pub mod smooth;

pub use crate::core::{
    BoundaryProblem, EnergyReport, Error, Lagrangian, PiecewisePath, Result, SuperlinearBound,
};
