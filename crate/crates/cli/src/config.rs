//! Scenario configuration: a TOML file, optionally overridden by flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wqms_core::control::WeightOptions;
use wqms_core::engine::ReactionConstants;
use wqms_core::mpc::ControlProblemSpec;
use wqms_core::transport::PlanOptions;

use crate::CliError;

/// Environment variable holding the default config path.
pub const CONFIG_ENV: &str = "WQMS_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioPaths {
    pub network: PathBuf,
    pub hydraulics: PathBuf,
    pub initial: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<PathBuf>,
}

/// Regression tolerances for `--golden compare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GoldenConfig {
    /// where recordings live; `golden/` next to the config file when absent
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// absolute tolerance for numeric CSV cells
    pub tolerance: f64,
    /// per-column tolerances keyed by column-name prefix; the longest match wins
    pub columns: BTreeMap<String, f64>,
}

impl Default for GoldenConfig {
    fn default() -> Self {
        GoldenConfig {
            dir: None,
            tolerance: 1e-9,
            columns: BTreeMap::new(),
        }
    }
}

impl GoldenConfig {
    pub fn tolerance_for(&self, column: &str) -> f64 {
        self.columns
            .iter()
            .filter(|(prefix, _)| column.starts_with(prefix.as_str()))
            .max_by_key(|(prefix, _)| prefix.len())
            .map_or(self.tolerance, |(_, tol)| *tol)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub paths: ScenarioPaths,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// seed for randomized utilities; recorded with every run
    #[serde(default)]
    pub seed: u64,
    /// use controllability-derived weights in `control`
    #[serde(default)]
    pub weighted: bool,
    #[serde(default)]
    pub discretization: PlanOptions,
    #[serde(default)]
    pub reactions: ReactionConstants,
    #[serde(default)]
    pub control: ControlProblemSpec,
    #[serde(default)]
    pub weights: WeightOptions,
    #[serde(default)]
    pub golden: GoldenConfig,
    /// directory relative paths were resolved against
    #[serde(skip)]
    pub base: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| wqms_core::Error::io(path, e))?;
        let mut cfg: ScenarioConfig = toml::from_str(&text)
            .map_err(|e| wqms_core::Error::parse(path.display().to_string(), e))?;
        cfg.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve();
        Ok(cfg)
    }

    fn resolve(&mut self) {
        let base = self.base.clone();
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.network);
        fix(&mut self.paths.hydraulics);
        fix(&mut self.paths.initial);
        if let Some(t) = &mut self.paths.targets {
            fix(t);
        }
        fix(&mut self.output);
        if let Some(d) = &mut self.golden.dir {
            fix(d);
        }
    }

    /// Checks what can be checked before any model is built.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut bad = Vec::new();
        let mut paths = vec![
            &self.paths.network,
            &self.paths.hydraulics,
            &self.paths.initial,
        ];
        paths.extend(self.paths.targets.as_ref());
        for p in paths {
            if !p.is_file() {
                bad.push(format!("missing input file {}", p.display()));
            }
        }
        let phi = self.discretization.constants.shear_fraction;
        if !(phi > 0.0 && phi <= 1.0) {
            bad.push(format!("shear fraction {phi} outside (0, 1]"));
        }
        if !(self.golden.tolerance >= 0.0) || self.golden.columns.values().any(|t| !(*t >= 0.0)) {
            bad.push("golden tolerances must be nonnegative".into());
        }
        if let Err(e) = self.control.validate() {
            bad.push(e.to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(wqms_core::Error::Validation(bad.join("; ")).into())
        }
    }

    pub fn golden_dir(&self, command: &str) -> PathBuf {
        self.golden
            .dir
            .clone()
            .unwrap_or_else(|| self.base.join("golden"))
            .join(command)
    }

    /// The effective configuration, as written next to every run's outputs.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// A config for scenario files written side by side in one directory.
    pub fn for_directory(plan: PlanOptions, reactions: ReactionConstants, targets: bool) -> Self {
        ScenarioConfig {
            paths: ScenarioPaths {
                network: "network.toml".into(),
                hydraulics: "hydraulics.csv".into(),
                initial: "initial.toml".into(),
                targets: targets.then(|| "targets.toml".into()),
            },
            output: default_output(),
            seed: 0,
            weighted: targets,
            discretization: plan,
            reactions,
            control: ControlProblemSpec::default(),
            weights: WeightOptions::default(),
            golden: GoldenConfig::default(),
            base: PathBuf::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg: ScenarioConfig = toml::from_str(
            r#"
[paths]
network = "n.toml"
hydraulics = "h.csv"
initial = "i.toml"
"#,
        )
        .unwrap();
        assert_eq!(cfg.discretization, PlanOptions::default());
        assert_eq!(cfg.output, PathBuf::from("out"));
        assert!(!cfg.weighted);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let r: Result<ScenarioConfig, _> =
            toml::from_str("[paths]\nnetwork='a'\nhydraulics='b'\ninitial='c'\n[extra]\n");
        assert!(r.is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ScenarioConfig::for_directory(
            PlanOptions::default(),
            ReactionConstants::default(),
            true,
        );
        let back: ScenarioConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn longest_prefix_sets_the_tolerance() {
        let mut g = GoldenConfig::default();
        g.columns.insert("chlorine:".into(), 1e-6);
        g.columns.insert("chlorine:J1".into(), 1e-3);
        assert_eq!(g.tolerance_for("chlorine:J1"), 1e-3);
        assert_eq!(g.tolerance_for("chlorine:J2"), 1e-6);
        assert_eq!(g.tolerance_for("time"), 1e-9);
    }
}
