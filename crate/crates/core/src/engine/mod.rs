//! State layout, system assembly and time stepping.

mod assembly;
mod layout;
mod reaction;
mod simulate;

pub use assembly::{
    assemble_system, default_sensors, tank_volumes, volumes_vary, AssemblyMode, SystemMatrices,
};
pub use layout::{Element, StateLayout};
pub use reaction::{
    linearized_reaction, reaction_terms, LinearReaction, OperatingPoint, ReactionConstants,
    ReactionParams,
};
pub(crate) use simulate::clamp;
pub use simulate::{
    simulate, simulate_from, step_linear, step_nonlinear, stored_mass, EngineOptions,
    InputSchedule, Trajectory, CLAMP_REPORT_THRESHOLD,
};
