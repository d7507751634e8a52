//! Two compressible fluids sharing one velocity field inside a domain bounded
//! by a nonlinear Koiter shell.
//!
//! The solver follows a constructive splitting scheme: the fluid lives on a
//! fixed box containing every admissible shell position (viscosity is
//! extended degenerately outside the physical domain), time is cut into
//! windows of length `τ`, and on each window the shell and the fluid are
//! advanced separately and exchange velocities through a `δ/τ` penalty.
//! Every discrete energy inequality of the construction is checked while the
//! simulation runs.
//!
//! Module map:
//! - [`geometry`]: reference surface, flow map, coercivity factor `γ̄`.
//! - [`shell_energy`]: Koiter energy and its (discrete) derivatives.
//! - [`pressure`]: two-fluid pressure laws, hypothesis audit, Helmholtz energies.
//! - [`fluid_solver`]: fictitious-domain transport/momentum kernels.
//! - [`structure_solver`]: sub-stepped penalised shell dynamics.
//! - [`coupling`]: the window orchestrator and energy ledger.
//! - [`diagnostics_io`]: monitors, CSV/field/checkpoint files, convergence studies.
//! - [`config`]: run configuration parsing and validation.

pub mod config;
pub mod coupling;
pub mod diagnostics_io;
pub mod fluid_solver;
pub mod geometry;
pub mod par;
pub mod pressure;
pub mod shell_energy;
pub mod structure_solver;
