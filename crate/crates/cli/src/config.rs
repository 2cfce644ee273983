//! Scenario configuration: a TOML file with dotted section keys.
//!
//! ```toml
//! name = "baseline"
//! seeds = [1, 2, 3]
//! variant = "full"          # full | global_only | no_global
//! imp_mode = "uniform"          # uniform | two_delta
//!
//! quotas.eps_querier = 1.0      # either explicit capacities …
//! quotas.eps_global = 8.0
//! quotas.eps_imp = 2.0
//! quotas.eps_conv = 1.0
//! quotas.kappa = 2
//!
//! # derive.eps_querier = 1.0    # … or derivation inputs, never both
//! # derive.percentile = 0.85
//!
//! benign.devices = 2000
//! attacker.strategy = "random"
//! output.dir = "out"
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use budgetguard::quotas::estimate_workload_params;
use budgetguard::sim::{ReplaySpec, Scenario};
use budgetguard::workload::{
    AdvertiserSpec, AttackStrategy, AttackerSpec, BenignSpec, DEFAULT_RANDOM_FRACTION, DEFAULT_SYBILS,
};
use budgetguard::{
    derive_capacities, EngineVariant, Epsilon, EventStore, ImpSiteBudgetMode, QuotaConfig, WorkloadParams,
};
use serde::Deserialize;

use crate::error::CliError;

/// Environment variable that overrides the configured seeds with one seed.
pub const SEED_ENV: &str = "BUDGETGUARD_SEED";

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct QuotaSection {
    pub eps_querier: f64,
    pub eps_global: f64,
    pub eps_imp: f64,
    pub eps_conv: f64,
    #[serde(default = "default_kappa")]
    pub kappa: u32,
    /// Multiplier on the global capacity (attack headroom).
    #[serde(default)]
    pub global_slack: Option<f64>,
}

/// Derivation inputs: explicit workload bounds, or a percentile at which to
/// estimate them from the event stream.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DeriveSection {
    pub eps_querier: f64,
    #[serde(default = "default_kappa")]
    pub kappa: u32,
    #[serde(default)]
    pub intermediary_fraction: f64,
    pub max_conv_sites: Option<u32>,
    pub max_imp_sites: Option<u32>,
    pub max_conv_per_imp_site: Option<u32>,
    pub percentile: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BenignSection {
    pub devices: Option<u32>,
    pub days: Option<u32>,
    pub imps_per_day: Option<f64>,
    pub window: Option<u32>,
    pub histogram_dim: Option<usize>,
    pub batch_size: Option<usize>,
    pub max_value: Option<f64>,
    pub eps_per_query: Option<f64>,
    pub target_rmsre: Option<f64>,
    pub tau: Option<f64>,
    /// Number of advertisers (adv0.ex, adv1.ex, …).
    pub advertisers: Option<usize>,
    /// Daily conversion probability shared by all advertisers.
    pub conv_rate: Option<f64>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AttackerSection {
    pub strategy: String,
    pub fraction: Option<f64>,
    pub sybils: Option<usize>,
    pub controlled_sites: Vec<String>,
    pub chain_length: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ReplaySection {
    pub eps_per_query: Option<f64>,
    pub window: Option<u32>,
    pub histogram_dim: Option<usize>,
    pub batch_size: Option<usize>,
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub seed: Option<u64>,
    pub seeds: Option<Vec<u64>>,
    #[serde(default = "default_variant")]
    pub variant: String,
    #[serde(default = "default_imp_mode")]
    pub imp_mode: String,
    #[serde(default = "default_epoch_length")]
    pub epoch_length: u64,
    pub quotas: Option<QuotaSection>,
    pub derive: Option<DeriveSection>,
    #[serde(default)]
    pub benign: BenignSection,
    pub attacker: Option<AttackerSection>,
    #[serde(default)]
    pub replay: ReplaySection,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_kappa() -> u32 {
    2
}
fn default_name() -> String {
    "scenario".into()
}
fn default_variant() -> String {
    EngineVariant::Full.label().into()
}
fn default_imp_mode() -> String {
    "uniform".into()
}
fn default_epoch_length() -> u64 {
    budgetguard::event::DEFAULT_EPOCH_LENGTH
}

fn cfg_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn to_eps(name: &str, x: f64) -> Result<Epsilon, CliError> {
    Epsilon::try_from_eps(x).map_err(|e| cfg_err(format!("{name}: {e}")))
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn check(&self) -> Result<(), CliError> {
        match (&self.quotas, &self.derive) {
            (Some(_), Some(_)) => return Err(cfg_err("give either [quotas] or [derive], not both")),
            (None, None) => return Err(cfg_err("missing [quotas] or [derive]")),
            _ => {}
        }
        if self.seed.is_some() && self.seeds.is_some() {
            return Err(cfg_err("give either seed or seeds, not both"));
        }
        if self.seeds.as_ref().is_some_and(Vec::is_empty) {
            return Err(cfg_err("seeds must not be empty"));
        }
        if self.epoch_length == 0 {
            return Err(cfg_err("epoch_length must be positive"));
        }
        self.engine_variant()?;
        self.budget_mode()?;
        Ok(())
    }

    pub fn engine_variant(&self) -> Result<EngineVariant, CliError> {
        EngineVariant::parse(&self.variant).ok_or_else(|| cfg_err(format!("unknown variant {:?}", self.variant)))
    }

    pub fn budget_mode(&self) -> Result<ImpSiteBudgetMode, CliError> {
        match self.imp_mode.as_str() {
            "uniform" => Ok(ImpSiteBudgetMode::UniformHeuristic),
            "two_delta" => Ok(ImpSiteBudgetMode::TwoDeltaBound),
            other => Err(cfg_err(format!("unknown imp_mode {other:?}"))),
        }
    }

    /// Configured seeds, or the single seed from the environment override.
    pub fn seeds(&self, env_seed: Option<&str>) -> Result<Vec<u64>, CliError> {
        if let Some(s) = env_seed {
            let seed = s.trim().parse().map_err(|_| cfg_err(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
            return Ok(vec![seed]);
        }
        Ok(self.seeds.clone().or_else(|| self.seed.map(|s| vec![s])).unwrap_or_else(|| vec![0]))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output.dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    /// Quota capacities. Derivation by percentile needs `events`.
    pub fn quota_config(&self, events: Option<&EventStore>) -> Result<QuotaConfig, CliError> {
        let config = if let Some(q) = &self.quotas {
            let c = QuotaConfig {
                eps_querier: to_eps("quotas.eps_querier", q.eps_querier)?,
                eps_global: to_eps("quotas.eps_global", q.eps_global)?,
                eps_imp_quota: to_eps("quotas.eps_imp", q.eps_imp)?,
                eps_conv_quota: to_eps("quotas.eps_conv", q.eps_conv)?,
                kappa_action: q.kappa,
            };
            match q.global_slack {
                Some(s) => c.with_global_slack(s)?,
                None => c,
            }
        } else {
            let d = self.derive.as_ref().expect("checked at parse time");
            let explicit = (d.max_conv_sites, d.max_imp_sites, d.max_conv_per_imp_site);
            let mut params =
                match (explicit, d.percentile) {
                    ((Some(n), Some(m), Some(k)), None) => WorkloadParams::new(n, m, k),
                    ((None, None, None), Some(p)) => {
                        let store = events.ok_or_else(|| cfg_err("derive.percentile needs an event stream"))?;
                        estimate_workload_params(store, p)?
                    }
                    _ => return Err(cfg_err(
                        "derive needs either all of max_conv_sites/max_imp_sites/max_conv_per_imp_site or percentile",
                    )),
                };
            params.intermediary_fraction = d.intermediary_fraction;
            derive_capacities(to_eps("derive.eps_querier", d.eps_querier)?, &params, d.kappa)?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn intermediary_fraction(&self) -> f64 {
        self.derive.as_ref().map_or(0.0, |d| d.intermediary_fraction)
    }

    pub fn benign_spec(&self) -> Result<BenignSpec, CliError> {
        let b = &self.benign;
        let d = BenignSpec::default();
        let mut spec = BenignSpec {
            devices: b.devices.unwrap_or(d.devices),
            days: b.days.unwrap_or(d.days),
            imps_per_day: b.imps_per_day.unwrap_or(d.imps_per_day),
            window: b.window.unwrap_or(d.window),
            histogram_dim: b.histogram_dim.unwrap_or(d.histogram_dim),
            batch_size: b.batch_size.unwrap_or(d.batch_size),
            max_value: b.max_value.unwrap_or(d.max_value),
            eps_per_query: b.eps_per_query.or(d.eps_per_query),
            target_rmsre: b.target_rmsre.unwrap_or(d.target_rmsre),
            tau: b.tau.unwrap_or(d.tau),
            ..d
        };
        if let Some(n) = b.advertisers {
            spec.advertisers = (0..n).map(|i| AdvertiserSpec { site: format!("adv{i}.ex"), conv_rate: 0.05 }).collect();
        }
        if let Some(rate) = b.conv_rate {
            spec.advertisers.iter_mut().for_each(|a| a.conv_rate = rate);
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn attacker_spec(&self) -> Result<Option<AttackerSpec>, CliError> {
        let Some(a) = &self.attacker else { return Ok(None) };
        let strategy = match a.strategy.as_str() {
            "naive" => AttackStrategy::Naive,
            "random" => AttackStrategy::Random(a.fraction.unwrap_or(DEFAULT_RANDOM_FRACTION)),
            "omniscient" => AttackStrategy::Omniscient,
            other => return Err(cfg_err(format!("unknown attacker.strategy {other:?}"))),
        };
        if a.controlled_sites.is_empty() {
            return Err(cfg_err("attacker.controlled_sites must name at least one site"));
        }
        let controlled: BTreeSet<String> = a.controlled_sites.iter().cloned().collect();
        let mut spec = AttackerSpec::new(strategy, a.sybils.unwrap_or(DEFAULT_SYBILS), controlled);
        if let Some(len) = a.chain_length {
            spec.chain_length = len;
        }
        Ok(Some(spec))
    }

    pub fn replay_spec(&self) -> ReplaySpec {
        let r = &self.replay;
        ReplaySpec {
            eps_per_query: r.eps_per_query.unwrap_or(0.25),
            window: r.window.unwrap_or(7),
            histogram_dim: r.histogram_dim.unwrap_or(5),
            batch_size: r.batch_size.unwrap_or(100),
            tau: r.tau.unwrap_or(0.05),
        }
    }

    /// One simulation scenario per seed. Percentile derivation estimates
    /// the workload bounds from the benign stream generated for that seed.
    pub fn scenarios(&self, seeds: &[u64]) -> Result<Vec<Scenario>, CliError> {
        let benign = self.benign_spec()?;
        let attacker = self.attacker_spec()?;
        if let Some(a) = &attacker {
            a.validate(&benign)?;
        }
        seeds
            .iter()
            .map(|&seed| {
                let events = match self.derive.as_ref().and_then(|d| d.percentile) {
                    Some(_) => Some(budgetguard::sim::benign_event_store(&benign, seed)?),
                    None => None,
                };
                let config = self.quota_config(events.as_ref())?;
                let mut s = Scenario::new(&self.name, config, self.engine_variant()?, benign.clone(), seed);
                s.imp_mode = self.budget_mode()?;
                s.intermediary_fraction = self.intermediary_fraction();
                s.attacker = attacker.clone();
                Ok(s)
            })
            .collect()
    }
}
