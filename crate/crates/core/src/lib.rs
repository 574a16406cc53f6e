//! Geometric multigrid for doubly periodic 2D diffusion problems with random
//! coefficients, together with tools that tune the relaxation parameters of the
//! smoother.
//!
//! The crate is organised bottom-up:
//!
//! * [`problem`]: log-normal coefficient fields and the bilinear finite element
//!   9-point operator.
//! * [`smoothers`]: Jacobi, Gauss-Seidel/SOR, four-color SOR with one
//!   coefficient per color, SPAI-0, both as sweeps and as dense error
//!   propagation matrices.
//! * [`transfer`]: bilinear and Black Box prolongation, Galerkin coarsening.
//! * [`cycles`]: two-grid and V/W/F multigrid solvers.
//! * [`spectral`]: the dense two-grid error propagator, the Frobenius-power
//!   loss, spectral radius estimation and rate metrics.
//! * [`optimizer`]: gradient descent on the batched loss, local and grid
//!   search on measured multigrid rates, omega sweeps.
//! * [`bench`]: experiment configuration, ensembles, reports.
//!
//! Sample-level work is spread over a rayon pool when the `parallel` feature is
//! enabled (the default); see [`par`].

pub mod bench;
pub mod cycles;
mod dense;
pub mod error;
pub mod optimizer;
pub mod par;
pub mod problem;
pub mod smoothers;
pub mod spectral;
pub mod transfer;

pub use error::{Error, Result};
