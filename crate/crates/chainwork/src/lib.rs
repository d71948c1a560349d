//! Differentiable 2D MLS-MPM soft-body simulation.
//!
//! `chainwork` implements the hybrid particle-grid forward cycle
//! (P2G, grid operations, G2P) together with a hand-derived reverse-mode
//! adjoint that walks the recorded tape backward, yielding exact gradients
//! of scalar objectives with respect to initial state, per-particle mass and
//! stiffness, actuation schedules, and closed-loop controller parameters.
//! On top of the gradients sit optimization drivers for controller training,
//! system identification, and stiffness co-design, plus a finite-difference
//! gradient checker.
//!
//! Start from a JSON scene ([`scene::parse_scene`]), simulate it
//! ([`forward::simulate`]), differentiate a loss through the tape
//! ([`adjoint::backprop`]), or run a full optimization
//! ([`optimize::optimize`]). The `examples/` directory has one runnable
//! program per capability; the `chainwork` binary exposes the same flows as
//! subcommands.

pub mod adjoint;
pub mod cli;
pub mod control;
pub mod forward;
pub mod io;
pub mod kernel_math;
pub mod optimize;
pub mod real;
pub mod render;
pub mod scene;

pub use real::{Mat2, Real, Vec2};
