use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::engine::layout::{Element, StateLayout};
use crate::error::{Error, Result};
use crate::network::{NetworkTopology, Species};

/// Network-wide reaction constants, as read from configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReactionConstants {
    /// mutual reaction coefficient k_r, L/(mg·s)
    pub mutual_rate: f64,
    /// reactant consumed per unit chlorine, Y_FR
    pub reactant_yield: f64,
    /// THMs formed per unit chlorine, Y_THMs
    pub thm_yield: f64,
}

impl Default for ReactionConstants {
    fn default() -> Self {
        ReactionConstants {
            mutual_rate: 0.0,
            reactant_yield: 1.0,
            thm_yield: 0.0,
        }
    }
}

/// Reaction constants plus the first-order decay rate of every pipe and tank.
#[derive(Debug, Clone, PartialEq)]
pub struct ReactionParams {
    pub mutual_rate: f64,
    pub reactant_yield: f64,
    pub thm_yield: f64,
    /// k_P per pipe, 1/s
    pub pipe_rates: Vec<f64>,
    /// k_TK per tank, 1/s
    pub tank_rates: Vec<f64>,
}

impl ReactionParams {
    pub fn new(topo: &NetworkTopology, constants: ReactionConstants) -> Result<Self> {
        let c = constants;
        if !(c.mutual_rate >= 0.0 && c.reactant_yield >= 0.0 && c.thm_yield >= 0.0) {
            return Err(Error::Validation(
                "reaction coefficient and yields must be nonnegative".into(),
            ));
        }
        let pipe_rates = topo
            .pipes()
            .iter()
            .map(|p| {
                let wall = if p.wall_rate + p.mass_transfer > 0.0 {
                    2.0 * p.wall_rate * p.mass_transfer
                        / (p.radius() * (p.wall_rate + p.mass_transfer))
                } else {
                    0.0
                };
                p.bulk_rate + wall
            })
            .collect();
        let tank_rates = topo.tanks().iter().map(|t| t.bulk_rate).collect();
        Ok(ReactionParams {
            mutual_rate: c.mutual_rate,
            reactant_yield: c.reactant_yield,
            thm_yield: c.thm_yield,
            pipe_rates,
            tank_rates,
        })
    }

    /// No decay and no mutual reaction.
    pub fn inert(topo: &NetworkTopology) -> Self {
        ReactionParams {
            mutual_rate: 0.0,
            reactant_yield: 0.0,
            thm_yield: 0.0,
            pipe_rates: vec![0.0; topo.pipes().len()],
            tank_rates: vec![0.0; topo.tanks().len()],
        }
    }

    /// Decay rate of each location; `None` where no reaction takes place
    /// (junctions, reservoirs, pumps and valves).
    pub fn location_rates(&self, layout: &StateLayout) -> Vec<Option<f64>> {
        (0..layout.locations())
            .map(|l| match layout.element(l) {
                Element::Segment(p, _) => Some(self.pipe_rates[p]),
                Element::Tank(t) => Some(self.tank_rates[t]),
                _ => None,
            })
            .collect()
    }
}

/// Reaction rates (chlorine, reactant, THMs) in mg/(L·s) at one location with
/// chlorine `c`, reactant `reactant` and decay rate `k`.
pub fn reaction_terms(c: f64, reactant: f64, k: f64, params: &ReactionParams) -> [f64; 3] {
    let mutual = params.mutual_rate * c * reactant;
    [
        -k * c - mutual,
        -params.reactant_yield * mutual,
        params.thm_yield * mutual,
    ]
}

/// Operating point for linearization: chlorine and reactant per location.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    pub chlorine: Vec<f64>,
    pub reactant: Vec<f64>,
    /// simulation time of the last refresh, s
    pub time: f64,
}

impl OperatingPoint {
    pub fn uniform(layout: &StateLayout, chlorine: f64, reactant: f64) -> Self {
        OperatingPoint {
            chlorine: vec![chlorine; layout.locations()],
            reactant: vec![reactant; layout.locations()],
            time: 0.0,
        }
    }

    /// Operating point at the state `x`, negatives clipped to zero.
    pub fn from_state(layout: &StateLayout, x: &DVector<f64>, time: f64) -> Self {
        let n = layout.locations();
        let clip = |s: Species| -> Vec<f64> {
            let base = s.index() * n;
            (0..n).map(|l| x[base + l].max(0.0)).collect()
        };
        OperatingPoint {
            chlorine: clip(Species::Chlorine),
            reactant: clip(Species::Reactant),
            time,
        }
    }
}

/// First-order expansion of the reaction rates about an operating point:
/// `R ≈ by_chlorine·c + by_reactant·c̃ + constant`, one entry per species row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearReaction {
    pub by_chlorine: [f64; 3],
    pub by_reactant: [f64; 3],
    pub constant: [f64; 3],
}

impl LinearReaction {
    pub fn evaluate(&self, c: f64, reactant: f64) -> [f64; 3] {
        std::array::from_fn(|s| {
            self.by_chlorine[s] * c + self.by_reactant[s] * reactant + self.constant[s]
        })
    }
}

/// Linearization of [`reaction_terms`] about (`c_o`, `reactant_o`) for decay
/// rate `k`. The bilinear term c·c̃ becomes c_o·c̃ + c̃_o·c − c_o·c̃_o.
pub fn linearized_reaction(
    params: &ReactionParams,
    k: f64,
    c_o: f64,
    reactant_o: f64,
) -> LinearReaction {
    let kr = params.mutual_rate;
    let weights = [-1.0, -params.reactant_yield, params.thm_yield];
    let mut lin = LinearReaction {
        by_chlorine: [0.0; 3],
        by_reactant: [0.0; 3],
        constant: [0.0; 3],
    };
    for (s, w) in weights.iter().enumerate() {
        lin.by_chlorine[s] = w * kr * reactant_o;
        lin.by_reactant[s] = w * kr * c_o;
        lin.constant[s] = -w * kr * c_o * reactant_o;
    }
    lin.by_chlorine[0] -= k;
    lin
}
