//! Flow-regime numbers, finite-difference stencils and grid planning.

mod plan;
mod regime;
mod stencil;

pub use plan::{
    plan_grid, DiscretizationPlan, PlanOptions, SegmentationMode, TransportMode,
    STABILITY_TOLERANCE,
};
pub use regime::{
    dispersion_coefficient, peclet_number, reynolds_number, FlowRegime, FlowRegimeSample,
    PhysicalConstants,
};
pub use stencil::{stencil_coefficients, Scheme, SchemeCoefficients, SchemeFamily};
