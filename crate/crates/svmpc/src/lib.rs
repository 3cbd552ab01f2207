//! Safe-and-performant control for low-dimensional dynamical systems.
//!
//! The crate couples two layers:
//!
//! 1. An offline layer that computes a *safety value function* on a
//!    rectilinear grid by solving a Hamilton-Jacobi variational inequality
//!    backward in time until convergence ([`reachability`]). The super-zero
//!    level set of that function is the viability kernel: the set of states
//!    from which the state constraint can be satisfied forever.
//! 2. An online layer that runs receding-horizon trajectory optimization
//!    ([`trajopt`], [`mpc`]). The safety-value controller appends the
//!    terminal constraint `V_s(x(h)) >= 0` to every plan, which keeps each
//!    plan inside the viability kernel and makes replanning recursively
//!    feasible.
//!
//! The [`harness`] module drives the Dubins-car benchmark end to end:
//! scenario files, seeded start sampling, batched closed-loop rollouts, and
//! metric tables. The `svmpc` binary exposes it as `validate` /
//! `precompute` / `rollout` / `report` subcommands.

pub mod cli;
pub mod dynamics;
pub mod grid;
pub mod harness;
pub mod mpc;
pub mod reachability;
pub mod scenario;
pub mod trajopt;
pub mod valuefn;

pub use dynamics::{Control, Dynamics, State};
pub use grid::{Axis, Grid, ValueField};
pub use scenario::Scenario;
pub use valuefn::SafetyOracle;
