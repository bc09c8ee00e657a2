//! Numerical laboratory for synthetic Ricci curvature on finite metric
//! measure spaces.
//!
//! Heat semigroups follow the convention `∂_t u = L u` throughout.

pub mod error;
pub mod curvature;
pub mod functionals;
pub mod geometry;
pub mod heat;
pub mod mmspace;
pub mod numeric;
pub mod quadrature;
pub mod transport;

pub use error::{Error, Result};
pub use mmspace::{FiniteMMSpace, MetricMeasure, ProbMeasure};
