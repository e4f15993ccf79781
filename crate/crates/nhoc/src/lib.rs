//! Simulation and force-minimizing optimal control of nonholonomic
//! mechanical systems in distribution-adapted coordinates.
//!
//! The toolkit works on a velocity-constraint distribution D spanned by an
//! adapted frame: [`geometry`] builds the induced metric, orthogonal
//! projectors, nonholonomic bracket and the Christoffel symbols of the
//! constrained Levi-Civita connection; [`dynamics`] provides the free and
//! fully actuated equations of motion plus control reconstruction;
//! [`ocp`] carries the optimal-control layer (the constrained Lagrangian
//! on the second-order manifold, its extremal equations in multiplier,
//! Lagrangian-submanifold and Hamiltonian form, and the Legendre
//! transform between them); [`solver`] integrates these flows and solves
//! two-point boundary value problems by damped-Newton shooting on the
//! initial costates; [`models`] instantiates the built-in sleigh and
//! gearbox systems and the navigation-potential obstacle variant; [`cli`]
//! is the command-line front end behind the `nhoc` binary.

pub mod cli;
pub mod dynamics;
pub mod error;
pub mod fd;
pub mod geometry;
pub mod models;
pub mod ocp;
pub mod solver;

pub use error::{Error, Result};
pub use geometry::{AdaptedState, ControlMode, MechanicalModel};
pub use ocp::{CostModel, ExtremalState, SecondOrderPoint, SigmaPoint};
pub use solver::{BoundaryConditions, Method, ShootingConfig, Trajectory};
