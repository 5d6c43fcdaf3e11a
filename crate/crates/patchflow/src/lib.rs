//! Lagrangian flow-map solver and verification suite for nonlinear
//! transport equations `rho_t + v . grad rho = 0` with velocity `v = k * rho`
//! for convolution kernels homogeneous of degree `1 - n`.
//!
//! The solver advances the flow map `X(alpha, t)` together with its Jacobian
//! `DX` directly, so densities, singular integrals and stability envelopes
//! can all be evaluated in Lagrangian variables without remeshing.

pub mod cli;
pub mod diagnostics;
pub mod fields;
pub mod flow;
pub mod kernels;
pub mod math;
pub mod scalar;
pub mod singular;

pub use scalar::Scalar;

/// Concrete scalar type used by the simulation stack.
pub type Real = f64;

pub type Kernel = kernels::KernelSpec<Real>;
pub type SphereIntegrals = kernels::SphereIntegrals<Real>;
