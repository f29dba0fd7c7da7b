use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::topology::{NetworkTopology, Species};

/// Initial value for one element: a single number, or one value per pipe
/// segment in reference orientation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialValue {
    Uniform(f64),
    Segments(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    #[serde(default)]
    pub default: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub values: BTreeMap<String, InitialValue>,
}

/// Initial concentrations (mg/L) of the three species. Reservoirs always start
/// at their source concentration, so entries for them are ignored.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesInitialState {
    #[serde(default)]
    pub chlorine: InitialSection,
    #[serde(default)]
    pub reactant: InitialSection,
    #[serde(default)]
    pub thms: InitialSection,
}

impl SpeciesInitialState {
    pub fn uniform(chlorine: f64, reactant: f64, thms: f64) -> Self {
        let s = |default| InitialSection {
            default,
            values: BTreeMap::new(),
        };
        SpeciesInitialState {
            chlorine: s(chlorine),
            reactant: s(reactant),
            thms: s(thms),
        }
    }

    pub fn section(&self, species: Species) -> &InitialSection {
        match species {
            Species::Chlorine => &self.chlorine,
            Species::Reactant => &self.reactant,
            Species::Thms => &self.thms,
        }
    }

    pub fn section_mut(&mut self, species: Species) -> &mut InitialSection {
        match species {
            Species::Chlorine => &mut self.chlorine,
            Species::Reactant => &mut self.reactant,
            Species::Thms => &mut self.thms,
        }
    }

    pub fn set(&mut self, species: Species, element: &str, value: InitialValue) {
        self.section_mut(species)
            .values
            .insert(element.to_string(), value);
    }

    /// Value for a non-pipe element, or the section default.
    pub fn node_value(&self, species: Species, element: &str) -> Result<f64> {
        match self.section(species).values.get(element) {
            None => Ok(self.section(species).default),
            Some(InitialValue::Uniform(v)) => Ok(*v),
            Some(InitialValue::Segments(_)) => Err(Error::Dimension(format!(
                "{} initial value for '{element}' must be a single number",
                species.tag()
            ))),
        }
    }

    /// Per-segment values for a pipe with `segments` segments.
    pub fn pipe_values(&self, species: Species, pipe: &str, segments: usize) -> Result<Vec<f64>> {
        match self.section(species).values.get(pipe) {
            None => Ok(vec![self.section(species).default; segments]),
            Some(InitialValue::Uniform(v)) => Ok(vec![*v; segments]),
            Some(InitialValue::Segments(v)) if v.len() == segments => Ok(v.clone()),
            Some(InitialValue::Segments(v)) => Err(Error::Dimension(format!(
                "{} initial values for pipe '{pipe}': {} given, plan has {segments} segments",
                species.tag(),
                v.len()
            ))),
        }
    }

    /// Nonnegativity and referential findings.
    pub fn findings(&self, topo: &NetworkTopology) -> Vec<String> {
        let mut out = Vec::new();
        for s in Species::ALL {
            let sec = self.section(s);
            if !(sec.default >= 0.0 && sec.default.is_finite()) {
                out.push(format!(
                    "{} default initial concentration {} must be nonnegative",
                    s.tag(),
                    sec.default
                ));
            }
            for (id, v) in &sec.values {
                if topo.node(id).is_none() && topo.link(id).is_none() {
                    out.push(format!(
                        "{} initial value references unknown element '{id}'",
                        s.tag()
                    ));
                }
                let bad = match v {
                    InitialValue::Uniform(x) => !(*x >= 0.0 && x.is_finite()),
                    InitialValue::Segments(xs) => xs.iter().any(|x| !(*x >= 0.0 && x.is_finite())),
                };
                if bad {
                    out.push(format!(
                        "{} initial concentration for '{id}' must be nonnegative",
                        s.tag()
                    ));
                }
            }
        }
        out
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("initial state serializes")
    }

    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse(origin, e))
    }
}

/// Reads an initial-state file and checks it against the topology.
pub fn load_initial_state(
    path: impl AsRef<Path>,
    topo: &NetworkTopology,
) -> Result<SpeciesInitialState> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let init = SpeciesInitialState::from_toml(&text, &path.display().to_string())?;
    if let Some(f) = init.findings(topo).into_iter().next() {
        return Err(Error::Validation(f));
    }
    Ok(init)
}
