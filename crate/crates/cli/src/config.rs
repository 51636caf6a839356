//! JSON experiment configuration.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use dc_core::objective::OptimizerConfig;
use dc_core::{MapKind, Method, TargetSpec};
use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

/// A target given either as a label such as `"funnel(2)"` or as a tagged
/// object such as `{"name": "funnel", "dim": 2}`.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct TargetEntry(pub TargetSpec);

impl<'de> Deserialize<'de> for TargetEntry {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct EntryVisitor;

        impl<'de> Visitor<'de> for EntryVisitor {
            type Value = TargetEntry;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a target label or a target object")
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Self::Value, E> {
                v.parse().map(TargetEntry).map_err(E::custom)
            }

            fn visit_map<A: MapAccess<'de>>(self, map: A) -> Result<Self::Value, A::Error> {
                TargetSpec::deserialize(de::value::MapAccessDeserializer::new(map)).map(TargetEntry)
            }
        }

        deserializer.deserialize_any(EntryVisitor)
    }
}

fn default_targets() -> Vec<TargetEntry> {
    let correlated =
        TargetSpec::Gaussian { mean: vec![0.5, -0.3], cov: vec![vec![1.0, 0.8], vec![0.8, 1.0]], evidence: 1.0 };
    vec![
        TargetEntry(TargetSpec::SkewedMixture1d),
        TargetEntry(TargetSpec::Funnel { dim: 2, scale: 1.0 }),
        TargetEntry(TargetSpec::LogitRegSmall),
        TargetEntry(correlated),
    ]
}

fn default_methods() -> Vec<Method> {
    vec![Method::Iid, Method::Anti, Method::Strat, Method::AntiStrat, Method::Qmc, Method::Lhs]
}

fn default_maps() -> Vec<MapKind> {
    vec![MapKind::Cartesian, MapKind::Elliptical]
}

fn default_m_values() -> Vec<usize> {
    vec![2, 4, 8]
}

fn default_bank_size() -> usize {
    2048
}

fn default_eval_bank_size() -> usize {
    65_536
}

fn default_kl_draws() -> usize {
    1_000_000
}

fn default_moment_samples() -> usize {
    100_000
}

fn default_samples_per_cell() -> usize {
    10_000
}

fn default_oracle_budget() -> usize {
    1 << 22
}

pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_targets")]
    pub targets: Vec<TargetEntry>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_maps")]
    pub maps: Vec<MapKind>,
    #[serde(default = "default_m_values", alias = "M_values")]
    pub m_values: Vec<usize>,
    /// Falls back to `DC_SEED`, then to `[0, 1, 2]`.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_bank_size")]
    pub bank_size: usize,
    #[serde(default = "default_eval_bank_size")]
    pub eval_bank_size: usize,
    /// Coupled draws binned for the divergence estimate.
    #[serde(default = "default_kl_draws")]
    pub kl_draws: usize,
    /// Coupled draws behind the moment errors.
    #[serde(default = "default_moment_samples")]
    pub moment_samples: usize,
    /// How many of those draws are written to `samples_<cell>.csv`; 0 disables.
    #[serde(default = "default_samples_per_cell")]
    pub samples_per_cell: usize,
    /// Importance-sampling budget for targets without a quadrature oracle.
    #[serde(default = "default_oracle_budget")]
    pub oracle_budget: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config uses defaults")
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            anyhow::anyhow!("invalid config field `{path}`: {}", e.into_inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.targets.is_empty() {
            bail!("invalid config field `targets`: at least one target is required");
        }
        let mut labels = BTreeSet::new();
        for (i, t) in self.targets.iter().enumerate() {
            let label = t.0.label();
            if !labels.insert(label.clone()) {
                bail!("invalid config field `targets[{i}]`: duplicate target `{label}`");
            }
            dc_core::targets::builtin_target(&t.0).with_context(|| format!("invalid config field `targets[{i}]`"))?;
        }
        if self.methods.is_empty() {
            bail!("invalid config field `methods`: at least one method is required");
        }
        if self.maps.is_empty() {
            bail!("invalid config field `maps`: at least one map is required");
        }
        if self.m_values.is_empty() {
            bail!("invalid config field `m_values`: at least one M is required");
        }
        for (i, &m) in self.m_values.iter().enumerate() {
            if m == 0 {
                bail!("invalid config field `m_values[{i}]`: M must be positive");
            }
            if m % 2 == 1 && self.methods.contains(&Method::Anti) {
                bail!("invalid config field `m_values[{i}]`: anti needs an even M, got {m}");
            }
        }
        if self.maps.contains(&MapKind::EllipticalAngle) {
            if let Some(t) =
                self.targets.iter().find(|t| dc_core::targets::builtin_target(&t.0).map(|t| t.dim()).ok() != Some(2))
            {
                bail!(
                    "invalid config field `maps`: elliptical_angle needs two-dimensional targets, `{}` is not",
                    t.0.label()
                );
            }
        }
        if let Some(seeds) = &self.seeds {
            if seeds.is_empty() {
                bail!("invalid config field `seeds`: at least one seed is required");
            }
        }
        for (name, v) in
            [("bank_size", self.bank_size), ("eval_bank_size", self.eval_bank_size), ("kl_draws", self.kl_draws)]
        {
            if v == 0 {
                bail!("invalid config field `{name}`: must be positive");
            }
        }
        if self.moment_samples < 100 {
            bail!("invalid config field `moment_samples`: need at least 100");
        }
        self.optimizer.validate().context("invalid config field `optimizer`")?;
        Ok(())
    }

    /// Seeds from the config, else `DC_SEED`, else the defaults.
    pub fn resolved_seeds(&self) -> anyhow::Result<Vec<u64>> {
        if let Some(s) = &self.seeds {
            return Ok(s.clone());
        }
        match std::env::var("DC_SEED") {
            Ok(v) => Ok(vec![v.trim().parse().with_context(|| format!("DC_SEED `{v}` is not an integer"))?]),
            Err(_) => Ok(DEFAULT_SEEDS.to_vec()),
        }
    }
}
