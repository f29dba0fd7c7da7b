use serde::{Deserialize, Serialize};

use crate::network::PipeSpec;

/// Fluid constants and regime thresholds. Defaults reproduce the reference
/// case-study values, including its low dynamic viscosity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicalConstants {
    /// kg/m³
    pub density: f64,
    /// kg/(m·s)
    pub viscosity: f64,
    /// shear velocity as a fraction of the mean velocity
    pub shear_fraction: f64,
    /// Reynolds number where laminar flow ends
    pub laminar_limit: f64,
    /// |v| below this is treated as no flow, m/s
    pub stagnant_velocity: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        PhysicalConstants {
            density: 998.4,
            viscosity: 3.6e-5,
            shear_fraction: 0.1,
            laminar_limit: 2300.0,
            stagnant_velocity: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowRegime {
    Laminar,
    TransitionalTurbulent,
}

impl FlowRegime {
    pub fn classify(reynolds: f64, constants: &PhysicalConstants) -> Self {
        if reynolds < constants.laminar_limit {
            FlowRegime::Laminar
        } else {
            FlowRegime::TransitionalTurbulent
        }
    }
}

/// Re = ρ·d·|v|/μ
pub fn reynolds_number(pipe: &PipeSpec, velocity: f64, constants: &PhysicalConstants) -> f64 {
    constants.density * pipe.diameter * velocity.abs() / constants.viscosity
}

/// Longitudinal dispersion coefficient in m²/s. Zero for a stagnant pipe.
pub fn dispersion_coefficient(
    pipe: &PipeSpec,
    velocity: f64,
    regime: FlowRegime,
    constants: &PhysicalConstants,
) -> f64 {
    let speed = velocity.abs();
    if speed < constants.stagnant_velocity {
        return 0.0;
    }
    let d = pipe.diameter;
    match regime {
        FlowRegime::Laminar => {
            let residence = pipe.length / speed;
            let x = 4.0 * pipe.diffusivity * residence / (d * d);
            // 1 - (1 - e^-x)/x, written with exp_m1 to stay accurate for small x
            let bracket = 1.0 + (-x).exp_m1() / x;
            d * d * speed * speed / (12.0 * pipe.diffusivity) * bracket
        }
        FlowRegime::TransitionalTurbulent => {
            let re = reynolds_number(pipe, velocity, constants);
            let shear = constants.shear_fraction * speed;
            0.5 * d * shear * (10.1 + 577.0 * (re / 100.0).powf(-2.2))
        }
    }
}

/// Pe = |v|·L/D, infinite when D is zero.
pub fn peclet_number(pipe: &PipeSpec, velocity: f64, dispersion: f64) -> f64 {
    if dispersion > 0.0 {
        velocity.abs() * pipe.length / dispersion
    } else {
        f64::INFINITY
    }
}

/// Regime quantities of one pipe during one hydraulic step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRegimeSample {
    pub pipe: String,
    pub step: usize,
    pub speed: f64,
    pub reynolds: f64,
    pub dispersion: f64,
    pub peclet: f64,
    pub regime: FlowRegime,
    pub dispersion_active: bool,
}

impl FlowRegimeSample {
    pub fn evaluate(
        pipe: &PipeSpec,
        step: usize,
        velocity: f64,
        peclet_threshold: f64,
        constants: &PhysicalConstants,
    ) -> Self {
        let reynolds = reynolds_number(pipe, velocity, constants);
        let regime = FlowRegime::classify(reynolds, constants);
        let dispersion = dispersion_coefficient(pipe, velocity, regime, constants);
        let peclet = peclet_number(pipe, velocity, dispersion);
        FlowRegimeSample {
            pipe: pipe.id.clone(),
            step,
            speed: velocity.abs(),
            reynolds,
            dispersion,
            peclet,
            regime,
            dispersion_active: peclet <= peclet_threshold,
        }
    }

    pub fn flowing(&self, constants: &PhysicalConstants) -> bool {
        self.speed >= constants.stagnant_velocity
    }
}
