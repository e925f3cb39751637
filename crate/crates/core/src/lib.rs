//! Discrete-time optimal control on smooth manifolds.
//!
//! The crate is organised around a small set of numerical building blocks:
//!
//! * [`manifold`]: Euclidean spaces, SO(3) and products, with retractions,
//!   left-trivialised tangent coordinates and the (co)adjoint representation.
//! * [`system`]: stage maps, rollouts, transition Jacobians and the forward
//!   sensitivity recursion.
//! * [`adjoint`]: the backward costate sweep, reduced gradients and
//!   Δ-criticality certificates.
//! * [`liegroup`]: costates on Lie groups, the discrete Legendre transform
//!   and the Hamiltonian variational integrator for the rigid body.
//! * [`constraints`]: max-type penalties, LICQ, strict normality, multiplier
//!   recovery and value-function sensitivity.
//! * [`solver`]: projected-gradient and exact-penalty drivers.
//! * [`oracle`]: finite differences, Dini derivatives, feasible-set distances
//!   and the Riccati reference used by the test suite.
//! * [`cli`]: JSON problem files and CSV output for the `dgmp` binary.

pub mod adjoint;
pub mod cli;
pub mod constraints;
pub mod error;
pub mod linalg;
pub mod liegroup;
pub mod manifold;
pub mod oracle;
pub mod solver;
pub mod system;

pub use error::{Error, Result};
pub use manifold::{Cotangent, ManifoldHandle, Metric, Point, Tangent};
pub use system::{ControlSetSpec, ControlSystem, StageMap, Trajectory};
