//! Quota capacities: the five knobs, their derivation from workload
//! parameters, and estimation of those parameters from an event store.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{Event, EventStore, SiteId};
use crate::filters::{Epsilon, FilterKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuotaConfig {
    pub eps_querier: Epsilon,
    pub eps_global: Epsilon,
    pub eps_imp_quota: Epsilon,
    pub eps_conv_quota: Epsilon,
    pub kappa_action: u32,
}

impl QuotaConfig {
    /// Evaluation defaults: querier 1, global 8, imp 2, conv 1, κ = 2.
    pub fn standard() -> Self {
        QuotaConfig {
            eps_querier: Epsilon::from_eps(1.0),
            eps_global: Epsilon::from_eps(8.0),
            eps_imp_quota: Epsilon::from_eps(2.0),
            eps_conv_quota: Epsilon::from_eps(1.0),
            kappa_action: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_owned()));
        if self.kappa_action == 0 {
            return bad("kappa_action must be at least 1");
        }
        if self.eps_querier > self.eps_conv_quota {
            return bad("eps_querier must not exceed eps_conv_quota");
        }
        if self.eps_conv_quota > self.eps_imp_quota {
            return bad("eps_conv_quota must not exceed eps_imp_quota");
        }
        if self.eps_imp_quota > self.eps_global {
            return bad("eps_imp_quota must not exceed eps_global");
        }
        Ok(())
    }

    pub fn capacity_of(&self, kind: &FilterKind) -> Epsilon {
        match kind {
            FilterKind::Global => self.eps_global,
            FilterKind::Querier(_) => self.eps_querier,
            FilterKind::ConvQuota(_) => self.eps_conv_quota,
            FilterKind::ImpQuota(_) => self.eps_imp_quota,
        }
    }

    /// Scale the global capacity by an attack-headroom multiplier (≥ 1).
    pub fn with_global_slack(mut self, slack: f64) -> Result<Self> {
        if !(slack >= 1.0 && slack.is_finite()) {
            return Err(Error::InvalidConfig(format!("slack must be ≥ 1, got {slack}")));
        }
        self.eps_global = self.eps_global.scale(slack);
        Ok(self)
    }
}

/// Workload bounds a quota configuration is sized for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkloadParams {
    /// Max conversion sites per device-epoch.
    pub max_conv_sites: u32,
    /// Max impression sites per device-epoch.
    pub max_imp_sites: u32,
    /// Max conversion sites registering one impression site in a device-epoch.
    pub max_conv_per_imp_site: u32,
    /// Intermediary budget fraction.
    pub intermediary_fraction: f64,
}

impl WorkloadParams {
    pub fn new(max_conv_sites: u32, max_imp_sites: u32, max_conv_per_imp_site: u32) -> Self {
        WorkloadParams { max_conv_sites, max_imp_sites, max_conv_per_imp_site, intermediary_fraction: 0.0 }
    }
}

/// conv = (1+r)·q, imp = n·(1+r)·q, global = max(N, n·M)·(1+r)·q.
pub fn derive_capacities(eps_querier: Epsilon, params: &WorkloadParams, kappa: u32) -> Result<QuotaConfig> {
    let WorkloadParams {
        max_conv_sites: n_conv,
        max_imp_sites: m_imp,
        max_conv_per_imp_site: n_per,
        intermediary_fraction: r,
    } = *params;
    if n_conv == 0 || m_imp == 0 || n_per == 0 {
        return Err(Error::InvalidParams(format!(
            "workload bounds must be positive (N={n_conv}, M={m_imp}, n={n_per})"
        )));
    }
    if !(r >= 0.0 && r.is_finite()) {
        return Err(Error::InvalidParams(format!("intermediary fraction must be ≥ 0, got {r}")));
    }
    if kappa == 0 {
        return Err(Error::InvalidParams("kappa must be at least 1".into()));
    }
    let unit = eps_querier.scale(1.0 + r);
    let global_mult = u64::from(n_conv).max(u64::from(n_per) * u64::from(m_imp));
    Ok(QuotaConfig {
        eps_querier,
        eps_global: unit * global_mult,
        eps_imp_quota: unit * u64::from(n_per),
        eps_conv_quota: unit,
        kappa_action: kappa,
    })
}

/// Per-device-epoch workload counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DeviceEpochCounts {
    pub conv_sites: u32,
    pub imp_sites: u32,
    pub conv_per_imp_site: u32,
}

/// Count distinct conversion sites, impression sites, and the largest number of
/// conversion sites that could register one impression site, in one
/// device-epoch. A conversion registers an impression site when it shares
/// the impression's ad key (an empty conversion key matches everything).
pub fn device_epoch_counts(events: &[Event]) -> DeviceEpochCounts {
    let mut imp_keys: BTreeMap<&SiteId, BTreeSet<&str>> = BTreeMap::new();
    let mut convs: Vec<(&SiteId, &str)> = Vec::new();
    for ev in events {
        match ev {
            Event::Impression(i) => {
                imp_keys.entry(&i.site).or_default().insert(&i.ad_key);
            }
            Event::Conversion(c) => convs.push((&c.conv_site, &c.ad_key)),
        }
    }
    let conv_sites: BTreeSet<&SiteId> = convs.iter().map(|(s, _)| *s).collect();
    let conv_per_imp_site = imp_keys
        .values()
        .map(|keys| {
            convs
                .iter()
                .filter(|(_, k)| k.is_empty() || keys.contains(k))
                .map(|(s, _)| *s)
                .collect::<BTreeSet<_>>()
                .len()
        })
        .max()
        .unwrap_or(0);
    DeviceEpochCounts {
        conv_sites: conv_sites.len() as u32,
        imp_sites: imp_keys.len() as u32,
        conv_per_imp_site: conv_per_imp_site as u32,
    }
}

/// Nearest-rank percentile of `values` (need not be sorted). `p` in (0, 1].
pub fn nearest_rank(values: &[u32], p: f64) -> u32 {
    assert!(!values.is_empty() && p > 0.0 && p <= 1.0);
    let mut v = values.to_vec();
    v.sort_unstable();
    let rank = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Upper-bound estimates (Ñ, M̃, ñ) at the chosen percentile across all
/// populated device-epochs. `r` is left at 0.
pub fn estimate_workload_params(store: &EventStore, percentile: f64) -> Result<WorkloadParams> {
    if !(percentile > 0.0 && percentile <= 1.0) {
        return Err(Error::InvalidParams(format!("percentile must be in (0, 1], got {percentile}")));
    }
    if store.is_empty() {
        return Err(Error::EmptyStore);
    }
    let counts: Vec<DeviceEpochCounts> = store.device_epochs().map(|(_, _, evs)| device_epoch_counts(evs)).collect();
    let pick = |f: fn(&DeviceEpochCounts) -> u32| nearest_rank(&counts.iter().map(f).collect::<Vec<_>>(), percentile);
    Ok(WorkloadParams {
        max_conv_sites: pick(|c| c.conv_sites),
        max_imp_sites: pick(|c| c.imp_sites),
        max_conv_per_imp_site: pick(|c| c.conv_per_imp_site),
        intermediary_fraction: 0.0,
    })
}
