//! Band structure of high-contrast doubly periodic elliptic operators
//! `-div(a grad u) = lambda u` in the plane, and of their mirror-reflected
//! and X-defect modifications.
//!
//! The pipeline runs bottom-up through the modules:
//!
//! - [`coeff`]: the coefficient fields;
//! - [`fem`]: bilinear finite elements with Bloch and Dirichlet sides;
//! - [`eig`]: sparse generalized Hermitian eigensolvers;
//! - [`bands`]: Brillouin-zone sweeps, gaps and the Neumann limit spectrum;
//! - [`waveguide`]: interface bands of the mirrored strip and the X-defect
//!   eigenvalue;
//! - [`cli`]: configuration, stage orchestration and report emission.

pub mod bands;
pub mod cli;
pub mod coeff;
pub mod eig;
pub mod fem;
pub mod waveguide;
