//! Adaptive spectral graph attention (ASGAT) for node classification.
//!
//! Learnable spectral filters over the normalized Laplacian spectrum produce
//! per-head graph wavelets; the top-`k` wavelet coefficients of every node are
//! softmax-normalized into attention weights that aggregate features from
//! both nearby and distant nodes.
//!
//! Module map:
//!
//! - [`graph`]: graph storage, dataset I/O, Laplacian, homophily, splits
//! - [`spectral`]: Jacobi eigendecomposition and exact spectral filtering
//! - [`approx`]: Chebyshev and ARMA filtering without eigendecomposition
//! - [`autodiff`]: dense reverse-mode differentiation, filter MLP, Adam
//! - [`model`]: attention construction, ASGAT layers and network
//! - [`train`]: training loop, metrics, early stopping, grid search
//! - [`experiments`]: ablations, density sweep, filter export, heat baseline

pub mod approx;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod experiments;
pub mod graph;
pub mod linalg;
pub mod model;
pub mod spectral;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Split};
pub use linalg::{Matrix, SymMatrix};
