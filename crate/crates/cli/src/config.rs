//! Run configuration: a TOML document with five sections, every field
//! defaulted, plus `--section.key=value` overrides.
//!
//! ```toml
//! [space]
//! cutoff = 2
//!
//! [sde]
//! dt = 1e-3
//! horizon = 1.0
//! seed = 7
//! initial = "random"     # zero | shear | random | file:<path>
//!
//! [noise]
//! alpha = 1.3
//! c = 0.05
//! kappa = { variant = "multiplier", lambda_decay = 1.0 }
//!
//! [experiment]
//! phi = "energy-bounded"
//!
//! [output]
//! dir = "spde-out"
//! workers = 0
//! ```
//!
//! The configuration hash covers every section except `output`, so the
//! output location and worker count never change stamped results.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spde_core::analysis::DEFAULT_CONSTANT_GRID;
use spde_core::{GalerkinSpace, NoiseParams};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid override '{0}', expected --section.key=value")]
    Override(String),
    #[error("{0}")]
    Constraint(String),
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpaceSection {
    pub cutoff: u32,
}

impl Default for SpaceSection {
    fn default() -> Self {
        SpaceSection { cutoff: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdeSection {
    pub dt: f64,
    pub horizon: f64,
    /// required by every stochastic subcommand
    pub seed: Option<u64>,
    pub guard: f64,
    /// zero | shear:<amplitude> | file:<path>
    pub forcing: String,
    /// zero | shear | random | file:<path>
    pub initial: String,
    /// `|Ax|` of generated initial conditions
    pub initial_amplitude: f64,
}

impl Default for SdeSection {
    fn default() -> Self {
        SdeSection {
            dt: 1e-3,
            horizon: 1.0,
            seed: None,
            guard: spde_core::sde::DEFAULT_GUARD,
            forcing: "zero".into(),
            initial: "random".into(),
            initial_amplitude: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub phi: String,
    pub t: f64,
    pub k_damp: f64,
    pub k_sweep: bool,
    pub samples: usize,
    pub inner: usize,
    /// 0 disables the finite-difference comparison of `gradient`
    pub fd_epsilon: f64,
    /// random | basis:<n> | file:<path>
    pub direction: String,
    pub directions: usize,
    pub estimate: String,
    pub gamma: f64,
    pub beta: f64,
    pub delta_lemma: f64,
    pub c_grid: Vec<f64>,
    pub c_gamma_grid: Vec<f64>,
    pub t_grid: Vec<f64>,
    pub t_pairs: Vec<[f64; 2]>,
    pub t1: f64,
    pub t2: f64,
    pub radius: f64,
    pub z_epsilon: f64,
    pub z_moment: u32,
    pub z_levels: u32,
    pub t_long: f64,
    pub burn_in: f64,
    pub stride: f64,
    pub chains: usize,
    pub invariance_t: f64,
    pub invariance_inner: usize,
    pub tolerance: f64,
    /// zero | shear | random | file:<path>
    pub target: String,
    pub epsilon: f64,
    pub control_horizon: f64,
    pub control_dt: f64,
    pub reach_samples: usize,
    pub reach_epsilon: f64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            phi: "energy-bounded".into(),
            t: 0.5,
            k_damp: 10.0,
            k_sweep: false,
            samples: 200,
            inner: 20,
            fd_epsilon: 0.0,
            direction: "random".into(),
            directions: 2,
            estimate: String::new(),
            gamma: 1.0,
            beta: 0.01,
            delta_lemma: 1.0,
            c_grid: DEFAULT_CONSTANT_GRID.to_vec(),
            c_gamma_grid: vec![1.0, 5.0, 10.0, 50.0],
            t_grid: vec![0.05, 0.1, 0.2, 0.5, 1.0],
            t_pairs: vec![[0.1, 0.2], [0.5, 0.6]],
            t1: 0.5,
            t2: 0.5,
            radius: 5.0,
            z_epsilon: 0.0,
            z_moment: 1,
            z_levels: 6,
            t_long: 500.0,
            burn_in: 50.0,
            stride: 1.0,
            chains: 1,
            invariance_t: 0.5,
            invariance_inner: 1,
            tolerance: 0.05,
            target: "zero".into(),
            epsilon: 1e-3,
            control_horizon: 3.0,
            control_dt: 1e-4,
            reach_samples: 0,
            reach_epsilon: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
    /// 0 uses every available core
    pub workers: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: "spde-out".into(),
            workers: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub space: SpaceSection,
    pub sde: SdeSection,
    pub noise: NoiseParams,
    pub experiment: ExperimentSection,
    pub output: OutputSection,
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `key` (dotted path) to `raw`, parsed as a TOML value when possible
/// and as a string otherwise.
pub fn apply_override(doc: &mut toml::Table, key: &str, raw: &str) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(format!("{key}={raw}")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Override(format!("{key}={raw}")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

/// Splits `--a.b=value` into `("a.b", "value")`.
pub fn split_override(arg: &str) -> Option<(&str, &str)> {
    let body = arg.strip_prefix("--")?;
    let (key, value) = body.split_once('=')?;
    key.contains('.').then_some((key, value))
}

impl RunConfig {
    /// Parses a document, applies overrides and validates.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for (k, v) in overrides {
            apply_override(&mut doc, k, v)?;
        }
        let cfg: RunConfig = doc.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                path: p.display().to_string(),
                source,
            })?,
            None => String::new(),
        };
        RunConfig::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 over the canonical JSON of every section but `output`.
    pub fn hash(&self) -> String {
        let canonical = serde_json::json!({
            "space": self.space,
            "sde": self.sde,
            "noise": self.noise,
            "experiment": self.experiment,
        });
        hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }

    pub fn require_seed(&self) -> Result<u64, ConfigError> {
        self.sde
            .seed
            .ok_or_else(|| ConfigError::Constraint("sde.seed is required for stochastic subcommands".into()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Constraint(m));
        GalerkinSpace::new(self.space.cutoff).map_err(|e| ConfigError::Constraint(format!("space.cutoff: {e}")))?;
        self.noise
            .validate()
            .map_err(|e| ConfigError::Constraint(format!("noise: {e}")))?;
        let s = &self.sde;
        if !(s.dt > 0.0 && s.dt.is_finite()) {
            return fail(format!("sde.dt = {} must be positive", s.dt));
        }
        if !(s.horizon > 0.0 && s.horizon.is_finite()) {
            return fail(format!("sde.horizon = {} must be positive", s.horizon));
        }
        if !(s.guard > 0.0) {
            return fail(format!("sde.guard = {} must be positive", s.guard));
        }
        if !(s.initial_amplitude >= 0.0) {
            return fail("sde.initial_amplitude must be nonnegative".into());
        }
        check_field_spec("sde.initial", &s.initial, &["zero", "shear", "random"])?;
        if s.forcing != "zero" && !s.forcing.starts_with("shear:") && !s.forcing.starts_with("file:") {
            return fail(format!("sde.forcing = '{}' must be zero, shear:<amplitude> or file:<path>", s.forcing));
        }
        let e = &self.experiment;
        if e.samples < 2 {
            return fail(format!("experiment.samples = {} must be at least 2", e.samples));
        }
        if !(e.t >= 0.0) || !(e.k_damp >= 0.0) || !(e.fd_epsilon >= 0.0) {
            return fail("experiment.t, k_damp and fd_epsilon must be nonnegative".into());
        }
        spde_core::Observable::by_name(&e.phi).map_err(|err| ConfigError::Constraint(format!("experiment.phi: {err}")))?;
        check_field_spec("experiment.target", &e.target, &["zero", "shear", "random"])?;
        if !e.direction.starts_with("basis:") {
            check_field_spec("experiment.direction", &e.direction, &["random"])?;
        }
        if !(e.epsilon > 0.0 && e.control_horizon > 0.0 && e.control_dt > 0.0) {
            return fail("experiment.epsilon, control_horizon and control_dt must be positive".into());
        }
        Ok(())
    }
}

fn check_field_spec(key: &str, value: &str, names: &[&str]) -> Result<(), ConfigError> {
    if names.contains(&value) || value.strip_prefix("file:").is_some_and(|p| !p.is_empty()) {
        Ok(())
    } else {
        Err(ConfigError::Constraint(format!(
            "{key} = '{value}' must be one of {} or file:<path>",
            names.join(", ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_resolves_defaults() {
        let c = RunConfig::parse("", &[]).unwrap();
        assert_eq!(c.space.cutoff, 2);
        assert_eq!(c.sde.dt, 1e-3);
        assert_eq!(c.noise.alpha, 1.3);
        assert_eq!(c.noise.c, 0.05);
        assert_eq!(c.sde.seed, None);
    }

    #[test]
    fn alpha_window_is_enforced() {
        let e = RunConfig::parse("[noise]\nalpha = 1.0\n", &[]).unwrap_err();
        assert!(e.to_string().contains("5/4, 3/2"), "{e}");
        assert!(RunConfig::parse("[noise]\nr = 1.6\n", &[]).is_err());
        assert!(RunConfig::parse("[noise]\ng = 0.0\n", &[]).is_err());
    }

    #[test]
    fn parse_errors_carry_line_info() {
        let e = RunConfig::parse("[space]\ncutoff = \n", &[]).unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        assert!(RunConfig::parse("[space]\nfoo = 1\n", &[]).is_err());
    }

    #[test]
    fn serialization_round_trips() {
        let doc = "[sde]\nseed = 9\ndt = 2.5e-4\n[noise.kappa]\nvariant = \"integral_kernel\"\nmodes = 3\n";
        let c = RunConfig::parse(doc, &[]).unwrap();
        let again = RunConfig::parse(&c.to_toml(), &[]).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.hash(), again.hash());
    }

    #[test]
    fn overrides_apply_and_hash_ignores_output() {
        let o = |k: &str, v: &str| (k.to_string(), v.to_string());
        let c = RunConfig::parse("", &[o("noise.alpha", "1.4"), o("sde.seed", "3"), o("experiment.phi", "norm-sq")]).unwrap();
        assert_eq!((c.noise.alpha, c.sde.seed, c.experiment.phi.as_str()), (1.4, Some(3), "norm-sq"));
        let d = RunConfig::parse("", &[o("noise.alpha", "1.4"), o("sde.seed", "3"), o("experiment.phi", "norm-sq"), o("output.workers", "4")]).unwrap();
        assert_eq!(c.hash(), d.hash());
        let e = RunConfig::parse("", &[o("noise.alpha", "1.4"), o("sde.seed", "4"), o("experiment.phi", "norm-sq")]).unwrap();
        assert_ne!(c.hash(), e.hash());
        assert_eq!(split_override("--noise.alpha=1.3"), Some(("noise.alpha", "1.3")));
        assert_eq!(split_override("--seed=3"), None);
    }
}
