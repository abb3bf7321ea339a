pub mod cascade;
pub mod equilibrium;
pub mod error;
pub mod flowsheet;
pub mod harness;
pub mod nmpc;
pub mod pid;
pub mod steady_state;

pub use cascade::{Block, CascadeModel, CascadeState, Inputs, Integrator, Trajectory};
pub use equilibrium::{nitrate, solve_equilibrium, AqueousPoint, EquilibriumResult, Extractant};
pub use error::{Error, Result};
pub use flowsheet::{FlowSheet, InputBounds, StageFlows};
