//! Experiment configuration: a TOML file with optional sections, resolved
//! against documented defaults.
//!
//! ```toml
//! seed = 7
//! output = "out"
//!
//! [entropy]
//! epsilon_grid = [0.1, 0.05, 0.025]
//!
//! [[system]]
//! name = "cat"
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cocycle::SpectrumParams;
use crate::domination::DominationParams;
use crate::entropy::{EstimatorParams, Method, DEFAULT_CANDIDATE_BUDGET};
use crate::systems::{
    catalog, integer_determinant, make_linear_system, make_perturbed_system_capped, TorusMap, DEFAULT_AMPLITUDE_CAP,
    MAX_DIM,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid value for `{key}`: {message}")]
    Validation { key: String, message: String },
}

fn invalid(key: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Validation {
        key: key.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemKind {
    Linear,
    Perturbed,
}

/// Either `"all"` or an explicit list of hierarchy levels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(try_from = "LevelsRepr", into = "LevelsRepr")]
pub enum Levels {
    #[default]
    All,
    List(Vec<usize>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LevelsRepr {
    Name(String),
    List(Vec<usize>),
}

impl TryFrom<LevelsRepr> for Levels {
    type Error = String;

    fn try_from(r: LevelsRepr) -> Result<Self, String> {
        match r {
            LevelsRepr::Name(s) if s == "all" => Ok(Levels::All),
            LevelsRepr::Name(s) => Err(format!("levels must be \"all\" or a list, got {s:?}")),
            LevelsRepr::List(v) => Ok(Levels::List(v)),
        }
    }
}

impl From<Levels> for LevelsRepr {
    fn from(l: Levels) -> Self {
        match l {
            Levels::All => LevelsRepr::Name("all".into()),
            Levels::List(v) => LevelsRepr::List(v),
        }
    }
}

impl Levels {
    /// Concrete levels given the number `u` of positive exponent clusters.
    pub fn resolve(&self, u: usize) -> Vec<usize> {
        match self {
            Levels::All => (1..=u).collect(),
            Levels::List(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub name: String,
    /// Integer matrix rows; catalog names supply their own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<i64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<SystemKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<f64>,
    #[serde(default)]
    pub levels: Levels,
}

impl SystemSpec {
    pub fn catalog(name: &str) -> Option<Self> {
        let (matrix, kind, amplitude) = match name {
            "cat" => (catalog::cat_matrix(), SystemKind::Linear, 0.0),
            "block4" => (catalog::block_matrix(), SystemKind::Linear, 0.0),
            "perturbed-cat" => (catalog::cat_matrix(), SystemKind::Perturbed, 0.05),
            _ => return None,
        };
        Some(Self {
            name: name.into(),
            matrix: Some(matrix),
            kind: Some(kind),
            amplitude: Some(amplitude),
            levels: Levels::All,
        })
    }

    pub fn build(&self, amplitude_cap: f64) -> crate::Result<TorusMap> {
        let matrix = self.matrix.clone().unwrap_or_default();
        match self.kind.unwrap_or(SystemKind::Linear) {
            SystemKind::Linear => make_linear_system(matrix),
            SystemKind::Perturbed => make_perturbed_system_capped(matrix, self.amplitude.unwrap_or(0.0), amplitude_cap),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumSection {
    pub steps: usize,
    pub transient: usize,
    pub cluster_gap: f64,
}

impl Default for SpectrumSection {
    fn default() -> Self {
        let p = SpectrumParams::default();
        Self {
            steps: p.steps,
            transient: p.transient,
            cluster_gap: p.cluster_gap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DominationSection {
    pub samples: usize,
    pub orbit_length: usize,
    pub n_max: usize,
    pub splitting_steps: usize,
}

impl Default for DominationSection {
    fn default() -> Self {
        let p = DominationParams::default();
        Self {
            samples: p.samples,
            orbit_length: p.orbit_length,
            n_max: p.n_max,
            splitting_steps: p.splitting_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntropySection {
    pub samples: usize,
    pub epsilon_grid: Vec<f64>,
    pub n_min: usize,
    pub n_max: usize,
    pub counting_n_min: usize,
    pub counting_n_max: usize,
    pub delta: f64,
    pub c_max: f64,
    pub mesh: f64,
    pub partition_samples: usize,
    pub partition_n_min: usize,
    pub partition_n_max: usize,
    pub directions: usize,
    pub candidate_budget: usize,
    pub leaf_iterations: usize,
    pub grid_nodes: usize,
    pub amplitude_cap: f64,
    /// Estimators run per row; the first one supplies `h_estimate`.
    pub methods: Vec<String>,
}

impl Default for EntropySection {
    fn default() -> Self {
        let p = EstimatorParams::default();
        Self {
            samples: p.samples,
            epsilon_grid: p.epsilon_grid,
            n_min: p.n_range.0,
            n_max: p.n_range.1,
            counting_n_min: p.counting_n_range.0,
            counting_n_max: p.counting_n_range.1,
            delta: p.delta,
            c_max: p.c_max,
            mesh: p.mesh,
            partition_samples: p.partition_samples,
            partition_n_min: p.partition_n_range.0,
            partition_n_max: p.partition_n_range.1,
            directions: p.directions,
            candidate_budget: DEFAULT_CANDIDATE_BUDGET,
            leaf_iterations: p.leaf_iterations,
            grid_nodes: p.grid_nodes,
            amplitude_cap: DEFAULT_AMPLITUDE_CAP,
            methods: vec!["volume".into(), "separated".into(), "partition".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    /// Systematic margin added to the Ruelle bound (on top of stderr).
    pub ruelle_margin: f64,
    /// Pesin gap tolerance relative to the exponent sum.
    pub pesin_tolerance: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            ruelle_margin: 0.05,
            pesin_tolerance: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output: String,
    pub spectrum: SpectrumSection,
    pub domination: DominationSection,
    pub entropy: EntropySection,
    pub verify: VerifySection,
    #[serde(rename = "system")]
    pub systems: Vec<SystemSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: "out".into(),
            spectrum: SpectrumSection::default(),
            domination: DominationSection::default(),
            entropy: EntropySection::default(),
            verify: VerifySection::default(),
            systems: ["cat", "block4", "perturbed-cat"]
                .iter()
                .filter_map(|n| SystemSpec::catalog(n))
                .collect(),
        }
    }
}

impl ExperimentConfig {
    pub fn spectrum_params(&self) -> SpectrumParams {
        SpectrumParams {
            steps: self.spectrum.steps,
            transient: self.spectrum.transient,
            seed: self.seed,
            cluster_gap: self.spectrum.cluster_gap,
        }
    }

    pub fn domination_params(&self) -> DominationParams {
        DominationParams {
            samples: self.domination.samples,
            orbit_length: self.domination.orbit_length,
            n_max: self.domination.n_max,
            splitting_steps: self.domination.splitting_steps,
            seed: self.seed,
        }
    }

    pub fn estimator_params(&self) -> EstimatorParams {
        let e = &self.entropy;
        EstimatorParams {
            samples: e.samples,
            epsilon_grid: e.epsilon_grid.clone(),
            n_range: (e.n_min, e.n_max),
            counting_n_range: (e.counting_n_min, e.counting_n_max),
            delta: e.delta,
            c_max: e.c_max,
            mesh: e.mesh,
            partition_samples: e.partition_samples,
            partition_n_range: (e.partition_n_min, e.partition_n_max),
            directions: e.directions,
            candidate_budget: e.candidate_budget,
            leaf_iterations: e.leaf_iterations,
            grid_nodes: e.grid_nodes,
            splitting_steps: self.domination.splitting_steps,
            seed: self.seed,
        }
    }

    pub fn methods(&self) -> Vec<Method> {
        self.entropy
            .methods
            .iter()
            .filter_map(|m| m.parse().ok())
            .collect()
    }

    pub fn system(&self, name: &str) -> Option<&SystemSpec> {
        self.systems.iter().find(|s| s.name == name)
    }

    /// Fills catalog matrices and checks every value.
    pub fn resolve(mut self) -> Result<Self, ConfigError> {
        for (i, spec) in self.systems.iter_mut().enumerate() {
            let key = |field: &str| format!("system[{i}].{field}");
            if spec.matrix.is_none() {
                let builtin = SystemSpec::catalog(&spec.name)
                    .ok_or_else(|| invalid(key("matrix"), format!("no matrix given and {:?} is not a catalog system", spec.name)))?;
                spec.matrix = builtin.matrix;
                spec.kind = spec.kind.or(builtin.kind);
                spec.amplitude = spec.amplitude.or(builtin.amplitude);
            }
            let kind = *spec.kind.get_or_insert(SystemKind::Linear);
            let amplitude = *spec.amplitude.get_or_insert(0.0);
            let matrix = spec.matrix.as_ref().expect("filled above");
            let d = matrix.len();
            if d == 0 || d > MAX_DIM || matrix.iter().any(|r| r.len() != d) {
                return Err(invalid(key("matrix"), format!("matrix must be square with 1..={MAX_DIM} rows")));
            }
            if integer_determinant(matrix).abs() != 1 {
                return Err(invalid(key("matrix"), "matrix not unimodular"));
            }
            if kind == SystemKind::Perturbed && d != 2 {
                return Err(invalid(key("kind"), "perturbed systems must be two-dimensional"));
            }
            if !(amplitude >= 0.0) || amplitude > self.entropy.amplitude_cap {
                return Err(invalid(key("amplitude"), format!("amplitude must lie in [0, {}]", self.entropy.amplitude_cap)));
            }
            if let Levels::List(levels) = &spec.levels {
                if levels.contains(&0) {
                    return Err(invalid(key("levels"), "levels start at 1"));
                }
            }
        }
        let mut names: Vec<&str> = self.systems.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("system.name", "system names must be unique"));
        }
        self.validate_numbers()?;
        Ok(self)
    }

    fn validate_numbers(&self) -> Result<(), ConfigError> {
        let e = &self.entropy;
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(key, "must be positive"))
            }
        };
        let at_least = |key: &str, v: usize, min: usize| {
            if v >= min {
                Ok(())
            } else {
                Err(invalid(key, format!("must be >= {min}")))
            }
        };
        at_least("spectrum.steps", self.spectrum.steps, 1)?;
        positive("spectrum.cluster_gap", self.spectrum.cluster_gap)?;
        at_least("domination.samples", self.domination.samples, 1)?;
        at_least("domination.orbit_length", self.domination.orbit_length, 1)?;
        at_least("domination.n_max", self.domination.n_max, 1)?;
        at_least("entropy.samples", e.samples, 1)?;
        at_least("entropy.partition_samples", e.partition_samples, 1)?;
        if e.epsilon_grid.is_empty() {
            return Err(invalid("entropy.epsilon_grid", "epsilon grid must not be empty"));
        }
        for &eps in &e.epsilon_grid {
            positive("entropy.epsilon_grid", eps)?;
        }
        if e.epsilon_grid.windows(2).any(|w| w[1] >= w[0]) {
            return Err(invalid("entropy.epsilon_grid", "epsilon grid must descend"));
        }
        positive("entropy.delta", e.delta)?;
        if e.delta >= 0.5 {
            return Err(invalid("entropy.delta", "must be < 0.5"));
        }
        if e.epsilon_grid[0] >= e.delta {
            return Err(invalid("entropy.epsilon_grid", "every epsilon must be smaller than delta"));
        }
        positive("entropy.c_max", e.c_max)?;
        positive("entropy.mesh", e.mesh)?;
        for (name, lo, hi) in [
            ("entropy.n", e.n_min, e.n_max),
            ("entropy.counting_n", e.counting_n_min, e.counting_n_max),
            ("entropy.partition_n", e.partition_n_min, e.partition_n_max),
        ] {
            if lo == 0 || hi < lo + 3 {
                return Err(invalid(format!("{name}_max"), "n range must start at >= 1 and hold >= 4 points"));
            }
        }
        at_least("entropy.grid_nodes", e.grid_nodes, 3)?;
        at_least("entropy.leaf_iterations", e.leaf_iterations, 1)?;
        if e.methods.is_empty() {
            return Err(invalid("entropy.methods", "at least one method is required"));
        }
        for m in &e.methods {
            if m.parse::<Method>().is_err() {
                return Err(invalid("entropy.methods", format!("unknown method {m:?}")));
            }
        }
        if !(self.verify.ruelle_margin >= 0.0) {
            return Err(invalid("verify.ruelle_margin", "must be >= 0"));
        }
        positive("verify.pesin_tolerance", self.verify.pesin_tolerance)?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let raw: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
        line: e.span().map(|s| line_of(text, s.start)).unwrap_or(0),
        message: e.message().to_string(),
    })?;
    raw.resolve()
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_config_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_resolves_defaults() {
        let cfg = parse_config_str("[[system]]\nname = \"cat\"\n").unwrap();
        assert_eq!(cfg.systems.len(), 1);
        assert_eq!(cfg.systems[0].matrix, Some(catalog::cat_matrix()));
        assert_eq!(cfg.systems[0].kind, Some(SystemKind::Linear));
        assert_eq!(cfg.entropy, EntropySection::default());
        assert_eq!(cfg.estimator_params(), EstimatorParams::default());
        assert_eq!(cfg.spectrum_params(), SpectrumParams::default());
    }

    #[test]
    fn empty_file_gives_catalog() {
        let cfg = parse_config_str("").unwrap();
        assert_eq!(cfg.systems.len(), 3);
        let none = parse_config_str("system = []\n").unwrap();
        assert!(none.systems.is_empty());
    }

    #[test]
    fn rejects_non_unimodular() {
        let text = "[[system]]\nname = \"double\"\nmatrix = [[2, 0], [0, 1]]\n";
        match parse_config_str(text) {
            Err(ConfigError::Validation { key, message }) => {
                assert_eq!(key, "system[0].matrix");
                assert_eq!(message, "matrix not unimodular");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_ascending_grid() {
        let text = "[entropy]\nepsilon_grid = [0.025, 0.05]\n";
        match parse_config_str(text) {
            Err(ConfigError::Validation { key, message }) => {
                assert_eq!(key, "entropy.epsilon_grid");
                assert_eq!(message, "epsilon grid must descend");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parse_errors_carry_lines() {
        let text = "seed = 1\n\n[entropy]\nsamples = \"many\"\n";
        match parse_config_str(text) {
            Err(ConfigError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        match parse_config_str("seed = 1\nbogus = 2\n") {
            Err(ConfigError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn levels_and_round_trip() {
        let text = "seed = 3\n[[system]]\nname = \"block4\"\nlevels = [2]\n[[system]]\nname = \"mine\"\nmatrix = [[3, 1], [2, 1]]\n";
        let cfg = parse_config_str(text).unwrap();
        assert_eq!(cfg.systems[0].levels, Levels::List(vec![2]));
        assert_eq!(cfg.systems[1].levels.resolve(1), vec![1]);
        let again = parse_config_str(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
        assert!(parse_config_str("[[system]]\nname = \"cat\"\nlevels = \"some\"\n").is_err());
    }

    #[test]
    fn other_validations_name_keys() {
        let cases = [
            ("[[system]]\nname = \"x\"\n", "system[0].matrix"),
            ("[[system]]\nname = \"perturbed-cat\"\namplitude = 0.5\n", "system[0].amplitude"),
            ("[entropy]\nmethods = [\"guess\"]\n", "entropy.methods"),
            ("[entropy]\ndelta = 0.05\n", "entropy.epsilon_grid"),
            ("[entropy]\nn_max = 3\n", "entropy.n_max"),
        ];
        for (text, expect) in cases {
            match parse_config_str(text) {
                Err(ConfigError::Validation { key, .. }) => assert_eq!(key, expect, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }
}
