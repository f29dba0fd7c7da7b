//! Disinfectant transport and control for drinking-water distribution networks.
//!
//! The crate is organised as a pipeline:
//!
//! * [`network`]: topology, hydraulic traces and initial conditions, with loaders
//!   and validation.
//! * [`transport`]: flow-regime numbers (Reynolds, dispersion, Peclet), the four
//!   finite-difference stencils and grid / time-step planning with stability
//!   guarantees.
//! * [`engine`]: state layout, system assembly (`E x' = A x + B u + f(x)`),
//!   nonlinear and linearized stepping, full simulations.
//! * [`control`]: controllability matrices, Gramians, target controllability and
//!   booster weighting.
//! * [`mpc`]: condensed receding-horizon QP with chlorine band and THM cap, plus
//!   the interior-point solver behind it.
//! * [`fixtures`]: built-in scenarios used by tests, benchmarks and the CLI.

// `!(x > 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod engine;
pub mod error;
pub mod fixtures;
pub mod linalg;
pub mod mpc;
pub mod network;
pub mod transport;

pub use error::{Error, Result};

pub use control::{
    booster_weights, controllability_matrix, controllable_decomposition, gramian, target_gramian,
    ControllabilityReport, GramianResult, TargetCategory, TargetSet, WeightMapping, WeightOptions,
    WeightSchedule,
};
pub use engine::{
    assemble_system, linearized_reaction, reaction_terms, simulate, step_linear, step_nonlinear,
    AssemblyMode, EngineOptions, InputSchedule, OperatingPoint, ReactionParams, StateLayout,
    SystemMatrices, Trajectory,
};
pub use mpc::{
    build_qp, run_mpc, solve_qp, ControlInit, ControlProblemSpec, ControlSolution, QpInstance,
    QpSolution, QpStatus,
};
pub use network::{
    load_hydraulics, load_initial_state, load_network, validate_scenario, BoosterSpec,
    HydraulicStep, HydraulicTrace, LinkSpec, NetworkTopology, NodeRef, NodeSpec, PipeSpec,
    ReservoirSpec, Species, SpeciesInitialState, TankSpec, ValidationReport,
};
pub use transport::{
    dispersion_coefficient, peclet_number, plan_grid, reynolds_number, stencil_coefficients,
    DiscretizationPlan, FlowRegime, FlowRegimeSample, PhysicalConstants, PlanOptions, Scheme,
    SchemeCoefficients, SchemeFamily, SegmentationMode, TransportMode,
};
