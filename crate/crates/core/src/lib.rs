//! Ensemble penalty finite element solver for the 2D incompressible
//! Navier-Stokes equations.
//!
//! All members of an ensemble share one coefficient matrix per timestep:
//! the implicit convection uses the ensemble mean, the member-specific
//! fluctuation is treated explicitly, and the incompressibility constraint is
//! relaxed by a penalty `div u + ε p = 0` with a single `ε`. One sparse LU
//! per step then serves every member.

pub mod assembly;
pub mod config;
pub mod ensemble;
pub mod experiments;
pub mod linalg;
pub mod mesh;
pub mod output;
pub mod sampling;
pub mod space;

pub use assembly::{OperatorSet, StepMatrix};
pub use config::SimulationConfig;
pub use ensemble::{EnergyLedger, EnsembleState};
pub use linalg::{Factorization, SparseMatrix};
pub use mesh::{Mesh, MeshQuality};
pub use space::{DiscreteField, FieldKind, TaylorHoodSpace};
