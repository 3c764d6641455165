//! Spectral filtering without a full eigendecomposition.

pub mod arma;
pub mod cg;
pub mod chebyshev;

pub use arma::{arma_apply, arma_fit, ArmaFilter, ArmaHead};
pub use cg::{conjugate_gradient, CgSolution};
pub use chebyshev::{chebyshev_apply, chebyshev_fit, ChebFilter};
