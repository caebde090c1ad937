//! Experiment configuration: a TOML document, optionally patched with
//! `key.path=value` overrides before it is deserialized.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cac_core::algorithm::{SamplingMode, StepsizeSchedule, Stepsizes, Variant};
use cac_core::envs::PursuitConfig;
use cac_core::network::{Edge, WeightRule};
use cac_core::policy::Sharing;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct VariantName(pub Variant);

impl TryFrom<String> for VariantName {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse().map(Self).map_err(|e: cac_core::CacError| e.to_string())
    }
}

impl From<VariantName> for String {
    fn from(v: VariantName) -> String {
        v.0.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SamplingName(pub SamplingMode);

impl TryFrom<String> for SamplingName {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse().map(Self).map_err(|e: cac_core::CacError| e.to_string())
    }
}

impl From<SamplingName> for String {
    fn from(v: SamplingName) -> String {
        match v.0 {
            SamplingMode::Chain => "chain".into(),
            SamplingMode::Exact => "exact".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub horizon: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_variants")]
    pub variants: Vec<VariantName>,
    #[serde(default)]
    pub sampling: SamplingName,
    #[serde(default)]
    pub double_sampling: bool,
    /// Record every `metrics_stride`-th iteration; unset means
    /// `max(1, horizon / 10000)`.
    #[serde(default)]
    pub metrics_stride: Option<usize>,
    /// Attach the exact oracle (finite environments only).
    #[serde(default)]
    pub oracle: bool,
    /// Declared `R_max`; checked against the environment's rewards and used
    /// for the default critic radii. Unset means the environment's own bound.
    #[serde(default)]
    pub reward_bound: Option<f64>,
    #[serde(default)]
    pub weight_rule: WeightRule,
    pub environment: EnvironmentSpec,
    pub graph: GraphSpec,
    pub stepsizes: StepsizeSpec,
    #[serde(default)]
    pub policy: PolicySpec,
    #[serde(default)]
    pub critic: CriticSpec,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

fn default_seeds() -> Vec<u64> {
    (1..=10).collect()
}

fn default_variants() -> Vec<VariantName> {
    vec![VariantName(Variant::Cac)]
}

fn default_true() -> bool {
    true
}

fn default_discount() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvironmentSpec {
    Coordination {
        n_agents: usize,
        #[serde(default = "default_true")]
        noise: bool,
        #[serde(default = "default_discount")]
        discount: f64,
    },
    Pursuit(PursuitConfig),
    /// Random model with tabular features.
    Random {
        n_states: usize,
        action_counts: Vec<usize>,
        #[serde(default = "default_discount")]
        discount: f64,
        #[serde(default)]
        seed: u64,
    },
    Finite(FiniteSpec),
}

/// Explicit model. Tensors are flattened row-major:
/// `transition[state][joint][next]`, `rewards[agent][state][joint]`.
/// Features default to tabular; otherwise one row per state (value) or per
/// `(state, joint action)` pair (reward).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiniteSpec {
    pub n_states: usize,
    pub action_counts: Vec<usize>,
    pub transition: Vec<f64>,
    pub rewards: Vec<f64>,
    #[serde(default)]
    pub initial: Option<Vec<f64>>,
    #[serde(default = "default_discount")]
    pub discount: f64,
    #[serde(default)]
    pub value_features: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub reward_features: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    Complete,
    Ring,
    Path,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GraphKind {
    Static {
        #[serde(default)]
        topology: Option<Topology>,
        #[serde(default)]
        edges: Option<Vec<Edge>>,
    },
    Federated {
        period: usize,
    },
    Alternating,
    Custom {
        edge_sets: Vec<Vec<Edge>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    #[serde(flatten)]
    pub kind: GraphKind,
    /// Connectivity window; unset means the schedule's natural window.
    #[serde(default)]
    pub window: Option<usize>,
    /// Explicit weight matrices, one per phase of the schedule cycle.
    #[serde(default)]
    pub weights: Option<Vec<Vec<Vec<f64>>>>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StepsizeSpec {
    Constant {
        alpha: f64,
        beta: f64,
        zeta: f64,
    },
    /// Exponents 0.6 and 0.4 with the given bases.
    TwoTimescale {
        #[serde(default = "one")]
        alpha0: f64,
        #[serde(default = "one")]
        beta0: f64,
        #[serde(default = "one")]
        zeta0: f64,
    },
    Polynomial {
        alpha0: f64,
        beta0: f64,
        zeta0: f64,
        sigma1: f64,
        sigma2: f64,
    },
}

impl StepsizeSpec {
    pub fn build(&self) -> Result<Stepsizes> {
        let s = match *self {
            Self::Constant { alpha, beta, zeta } => Stepsizes::Constant { alpha, beta, zeta },
            Self::TwoTimescale {
                alpha0,
                beta0,
                zeta0,
            } => Stepsizes::Polynomial(StepsizeSchedule::two_timescale().with_bases(alpha0, beta0, zeta0)?),
            Self::Polynomial {
                alpha0,
                beta0,
                zeta0,
                sigma1,
                sigma2,
            } => Stepsizes::Polynomial(StepsizeSchedule::new(alpha0, beta0, zeta0, sigma1, sigma2)?),
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    #[serde(default = "default_sharing")]
    pub sharing: Sharing,
    #[serde(default = "default_policy_std")]
    pub init_std: f64,
}

fn default_sharing() -> Sharing {
    Sharing::Split
}

fn default_policy_std() -> f64 {
    0.01
}

impl Default for PolicySpec {
    fn default() -> Self {
        Self {
            sharing: default_sharing(),
            init_std: default_policy_std(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticSpec {
    #[serde(default)]
    pub init_std: f64,
    #[serde(default)]
    pub radius_omega: Option<f64>,
    #[serde(default)]
    pub radius_lambda: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_table(text.parse::<toml::Table>().context("config is not valid TOML")?)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Self = table.try_into().context("config does not match the schema")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and applies `key=value` overrides in order.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let mut table = read_table(path)?;
        for o in overrides {
            apply_override_str(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing config")
    }

    pub fn variants(&self) -> Vec<Variant> {
        self.variants.iter().map(|v| v.0).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("seeds must list at least one seed");
        }
        if self.variants.is_empty() {
            bail!("variants must list at least one variant");
        }
        let mut seen = Vec::new();
        for v in &self.variants {
            if seen.contains(&v.0) {
                bail!("variant {} is listed twice", v.0);
            }
            seen.push(v.0);
        }
        if self.metrics_stride == Some(0) {
            bail!("metrics_stride must be at least 1");
        }
        if let Some(b) = self.reward_bound {
            if !(b > 0.0 && b.is_finite()) {
                bail!("reward_bound must be positive and finite, got {b}");
            }
        }
        if !(self.policy.init_std >= 0.0 && self.critic.init_std >= 0.0) {
            bail!("initialization standard deviations must be non-negative");
        }
        if self.oracle && matches!(self.environment, EnvironmentSpec::Pursuit(_)) {
            bail!("the exact oracle needs a finite environment; set oracle = false for pursuit");
        }
        self.stepsizes.build()?;
        Ok(())
    }
}

pub fn read_table(path: &Path) -> Result<toml::Table> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    text.parse::<toml::Table>()
        .with_context(|| format!("{} is not valid TOML", path.display()))
}

/// Parses a literal as a TOML value, falling back to a plain string.
pub fn parse_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// `a.b.c=value`.
pub fn apply_override_str(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .with_context(|| format!("override {assignment:?} is not of the form key=value"))?;
    set_path(table, key.trim(), parse_value(value))
}

pub fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("bad override key {key:?}");
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("override {key:?}: {p:?} is not a table"),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// `"1,2,3"` or `"1..=10"` / `"1..11"`.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let spec = spec.trim();
    if let Some((a, b)) = spec.split_once("..=") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        return Ok((a..=b).collect());
    }
    if let Some((a, b)) = spec.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        return Ok((a..b).collect());
    }
    spec.split(',')
        .map(|s| s.trim().parse::<u64>().with_context(|| format!("bad seed {s:?}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
horizon = 100
seeds = [1, 2]
variants = ["cac", "iac", "mdac:5"]

[environment]
kind = "coordination"
n_agents = 3

[graph]
kind = "federated"
period = 5

[stepsizes]
kind = "constant"
alpha = 0.05
beta = 0.1
zeta = 0.1
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = ExperimentConfig::from_toml_str(BASE).unwrap();
        assert_eq!(cfg.variants(), vec![Variant::Cac, Variant::Iac, Variant::Mdac { batch: 5 }]);
        assert_eq!(cfg.graph.kind, GraphKind::Federated { period: 5 });
        assert_eq!(cfg.policy.sharing, Sharing::Split);
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn overrides_patch_nested_keys() {
        let mut t: toml::Table = BASE.parse().unwrap();
        apply_override_str(&mut t, "graph.period=2").unwrap();
        apply_override_str(&mut t, "environment.noise=false").unwrap();
        apply_override_str(&mut t, "variants=[\"cac-nps\"]").unwrap();
        apply_override_str(&mut t, "output_dir=out/x").unwrap();
        let cfg = ExperimentConfig::from_table(t).unwrap();
        assert_eq!(cfg.graph.kind, GraphKind::Federated { period: 2 });
        assert!(matches!(cfg.environment, EnvironmentSpec::Coordination { noise: false, .. }));
        assert_eq!(cfg.variants(), vec![Variant::CacNps]);
        assert_eq!(cfg.output_dir, PathBuf::from("out/x"));
    }

    #[test]
    fn rejects_swapped_exponents() {
        let mut t: toml::Table = BASE.parse().unwrap();
        let spec = "{ kind = \"polynomial\", alpha0 = 1.0, beta0 = 1.0, zeta0 = 1.0, sigma1 = 0.4, sigma2 = 0.6 }";
        apply_override_str(&mut t, &format!("stepsizes={spec}")).unwrap();
        let err = ExperimentConfig::from_table(t).unwrap_err();
        assert!(format!("{err:#}").contains("sigma"), "{err:#}");
    }

    #[test]
    fn rejects_unknown_variants_and_keys() {
        let mut t: toml::Table = BASE.parse().unwrap();
        apply_override_str(&mut t, "variants=[\"sac\"]").unwrap();
        assert!(ExperimentConfig::from_table(t).is_err());
        let mut t: toml::Table = BASE.parse().unwrap();
        apply_override_str(&mut t, "horizn=5").unwrap();
        assert!(ExperimentConfig::from_table(t).is_err());
    }

    #[test]
    fn seed_specs() {
        assert_eq!(parse_seeds("1,2, 5").unwrap(), vec![1, 2, 5]);
        assert_eq!(parse_seeds("1..=3").unwrap(), vec![1, 2, 3]);
        assert_eq!(parse_seeds("0..2").unwrap(), vec![0, 1]);
        assert!(parse_seeds("a").is_err());
    }
}
