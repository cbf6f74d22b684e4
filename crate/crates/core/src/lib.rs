//! Dynamic generalized conditional gradient solver for sparse dynamic inverse
//! problems regularized by an optimal-transport energy.
//!
//! Measures are finite sums of atoms, each concentrated on a piecewise-linear
//! curve in the unit square. The solver alternates an insertion step (find a
//! curve on which the dual variable is large), a coefficient solve and a
//! sliding step that moves all curves at once.

pub mod error;
pub mod experiment;
pub mod forward;
pub mod geometry;
pub mod insertion;
pub mod problem;
pub mod sliding;
pub mod solver;
pub mod weights;

pub use error::{Error, Result};
pub use forward::{ForwardOperator, FrequencySchedule, MeasurementVector, Measurements};
pub use geometry::{Atom, Curve, ExtendedCurve, Point, RegParams, SparseMeasure, TimeGrid};
pub use problem::{DualVariable, Problem};
pub use solver::{solve, SolveReport, SolverConfig, Termination};
