use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Finite-difference scheme applied to a pipe during one hydraulic step.
/// `Reaction` marks a stagnant pipe where only the reaction term acts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "EU")]
    ExplicitUpwind,
    #[serde(rename = "IU")]
    ImplicitUpwind,
    #[serde(rename = "LW")]
    LaxWendroff,
    #[serde(rename = "BE")]
    BackwardEuler,
    #[serde(rename = "RX")]
    Reaction,
}

impl Scheme {
    pub fn tag(self) -> &'static str {
        match self {
            Scheme::ExplicitUpwind => "EU",
            Scheme::ImplicitUpwind => "IU",
            Scheme::LaxWendroff => "LW",
            Scheme::BackwardEuler => "BE",
            Scheme::Reaction => "RX",
        }
    }

    pub fn family(self) -> Option<SchemeFamily> {
        match self {
            Scheme::ExplicitUpwind | Scheme::LaxWendroff => Some(SchemeFamily::Explicit),
            Scheme::ImplicitUpwind | Scheme::BackwardEuler => Some(SchemeFamily::Implicit),
            Scheme::Reaction => None,
        }
    }

    pub fn is_dispersive(self) -> bool {
        matches!(self, Scheme::LaxWendroff | Scheme::BackwardEuler)
    }

    /// Scheme used by `family` for a flowing pipe.
    pub fn select(family: SchemeFamily, dispersion: bool) -> Scheme {
        match (family, dispersion) {
            (SchemeFamily::Explicit, false) => Scheme::ExplicitUpwind,
            (SchemeFamily::Explicit, true) => Scheme::LaxWendroff,
            (SchemeFamily::Implicit, false) => Scheme::ImplicitUpwind,
            (SchemeFamily::Implicit, true) => Scheme::BackwardEuler,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.trim().to_ascii_uppercase().as_str() {
            "EU" => Ok(Scheme::ExplicitUpwind),
            "IU" => Ok(Scheme::ImplicitUpwind),
            "LW" | "L-W" => Ok(Scheme::LaxWendroff),
            "BE" => Ok(Scheme::BackwardEuler),
            "RX" => Ok(Scheme::Reaction),
            other => Err(Error::Validation(format!("unknown scheme id '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeFamily {
    Explicit,
    Implicit,
}

impl FromStr for SchemeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.trim().to_ascii_lowercase().as_str() {
            "explicit" => Ok(SchemeFamily::Explicit),
            "implicit" => Ok(SchemeFamily::Implicit),
            other => Err(Error::Validation(format!(
                "unknown scheme family '{other}'"
            ))),
        }
    }
}

/// Row multipliers of one scheme. `lhs` multiplies the (upstream, self,
/// downstream) values at t+Δt, `rhs` the same neighbours at t. For the first
/// segment the upstream neighbour is the upstream node; for the last segment
/// the downstream neighbour is the downstream node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchemeCoefficients {
    pub scheme: Scheme,
    pub courant: f64,
    pub dispersion_number: f64,
    pub lw_upstream: f64,
    pub lw_middle: f64,
    pub lw_downstream: f64,
    pub lhs: [f64; 3],
    pub rhs: [f64; 3],
}

/// Coefficients of `scheme` for Courant number `courant` and dispersion number
/// `alpha`. Upwind schemes ignore `alpha`.
pub fn stencil_coefficients(scheme: Scheme, courant: f64, alpha: f64) -> SchemeCoefficients {
    let l = courant;
    let lw_upstream = 0.5 * l * (1.0 + l);
    let lw_middle = 1.0 - l * l;
    let lw_downstream = -0.5 * l * (1.0 - l);
    let (lhs, rhs) = match scheme {
        Scheme::ExplicitUpwind => ([0.0, 1.0, 0.0], [l, 1.0 - l, 0.0]),
        Scheme::ImplicitUpwind => ([-l, 1.0 + l, 0.0], [0.0, 1.0, 0.0]),
        Scheme::LaxWendroff => (
            [0.0, 1.0, 0.0],
            [
                lw_upstream + alpha,
                lw_middle - 2.0 * alpha,
                lw_downstream + alpha,
            ],
        ),
        Scheme::BackwardEuler => (
            [-0.5 * l - alpha, 1.0 + 2.0 * alpha, 0.5 * l - alpha],
            [0.0, 1.0, 0.0],
        ),
        Scheme::Reaction => ([0.0, 1.0, 0.0], [0.0, 1.0, 0.0]),
    };
    SchemeCoefficients {
        scheme,
        courant,
        dispersion_number: alpha,
        lw_upstream,
        lw_middle,
        lw_downstream,
        lhs,
        rhs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lax_wendroff_unit_courant_is_a_shift() {
        let c = stencil_coefficients(Scheme::LaxWendroff, 1.0, 0.0);
        assert_eq!(
            (c.lw_upstream, c.lw_middle, c.lw_downstream),
            (1.0, 0.0, 0.0)
        );
        assert_eq!(c.rhs, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn lax_wendroff_zero_courant_is_identity() {
        let c = stencil_coefficients(Scheme::LaxWendroff, 0.0, 0.0);
        assert_eq!(
            (c.lw_upstream, c.lw_middle, c.lw_downstream),
            (0.0, 1.0, 0.0)
        );
    }

    #[test]
    fn explicit_upwind_half_courant() {
        let c = stencil_coefficients(Scheme::ExplicitUpwind, 0.5, 0.0);
        assert_eq!(c.rhs, [0.5, 0.5, 0.0]);
        assert_eq!(c.lhs, [0.0, 1.0, 0.0]);
    }

    #[test]
    fn implicit_rows_sum_to_one() {
        for scheme in [Scheme::ImplicitUpwind, Scheme::BackwardEuler] {
            let c = stencil_coefficients(scheme, 0.7, 0.3);
            assert!((c.lhs.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn unknown_scheme_id() {
        assert!("XX".parse::<Scheme>().is_err());
        assert_eq!("lw".parse::<Scheme>().unwrap(), Scheme::LaxWendroff);
    }
}
