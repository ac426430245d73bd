//! Continuum residual networks.
//!
//! The hidden state of a residual network is modelled as a field `f(y, t)`
//! over a neuron domain `y ∈ Y` and depth `t ∈ [0, T]`, propagated by
//!
//! ```text
//! ∂ₜ f(y,t) = σ( a(y,t) − ∫_Y b(y,z,t) f(z,t) dz ),   f(·,0) = f_I.
//! ```
//!
//! - [`grid`]: quadrature over `Y` and the depth grid
//! - [`activation`]: `σ`, `σ′` and `Σ = ∫σ`
//! - [`dynamics`]: forward and tangent solvers, rank-one closed forms
//! - [`adjoint`]: backward co-state solver (exact transpose of the forward scheme)
//! - [`objective`]: classifier head, losses, gradients, finite-difference oracle
//! - [`control`]: Hamiltonian maximization and the two training loops
//! - [`stability`]: steady states, spectra, Lyapunov traces, growth fits
//! - [`io`]: CSV formats for fields, kernels, controls and trajectories

pub mod activation;
pub mod adjoint;
pub mod control;
pub mod dynamics;
pub mod error;
pub mod grid;
pub mod io;
pub mod objective;
pub mod stability;

pub use activation::Activation;
pub use error::{Error, Result};
pub use grid::{apply_kernel, inner_product, Field, Grid, Interval, KernelSlice, TimeGrid};
