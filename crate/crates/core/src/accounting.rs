//! Individual privacy-loss computation per device-epoch and per
//! device-epoch-site, plus histogram attribution.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{DeviceId, EpochId, EventStore, ImpressionKey, QuerierId, SiteId, UaCtxId};
use crate::filters::Epsilon;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ReportId(pub u64);

impl fmt::Display for ReportId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Which impressions a request considers relevant, beyond its site list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchRule {
    Any,
    AdKeys(BTreeSet<String>),
}

impl MatchRule {
    pub fn ad_key(key: &str) -> Self {
        MatchRule::AdKeys([key.to_owned()].into())
    }

    pub fn matches(&self, ad_key: &str) -> bool {
        match self {
            MatchRule::Any => true,
            MatchRule::AdKeys(keys) => keys.contains(ad_key),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum AttributionPolicy {
    /// Split the conversion value equally over every matched impression.
    #[default]
    Uniform,
    /// Give the whole value to the most recent matched impression.
    LastTouch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum ImpSiteBudgetMode {
    /// Epoch loss divided equally among the sites that contributed.
    #[default]
    UniformHeuristic,
    /// Twice the epoch loss unless the request covers one epoch and one site.
    TwoDeltaBound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRequest {
    pub report_id: ReportId,
    pub device: DeviceId,
    pub querier: QuerierId,
    pub conv_site: SiteId,
    pub imp_sites: BTreeSet<SiteId>,
    pub first_epoch: EpochId,
    pub last_epoch: EpochId,
    pub requested_epsilon: Epsilon,
    pub value: f64,
    pub max_value: f64,
    pub histogram_dim: usize,
    pub matching: MatchRule,
    pub policy: AttributionPolicy,
    pub ua_ctx: UaCtxId,
}

impl ReportRequest {
    pub fn epochs(&self) -> RangeInclusive<EpochId> {
        self.first_epoch..=self.last_epoch
    }

    pub fn window_len(&self) -> u32 {
        self.last_epoch.saturating_sub(self.first_epoch) + 1
    }

    /// λ = maxValue / ε.
    pub fn noise_scale(&self) -> f64 {
        self.max_value / self.requested_epsilon.as_eps()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidRequest(m));
        if self.first_epoch > self.last_epoch {
            return bad(format!("empty epoch window [{}, {}]", self.first_epoch, self.last_epoch));
        }
        if !(self.max_value > 0.0 && self.max_value.is_finite()) {
            return bad(format!("maxValue must be positive, got {}", self.max_value));
        }
        if !(self.value >= 0.0 && self.value <= self.max_value) {
            return bad(format!("value {} outside [0, {}]", self.value, self.max_value));
        }
        if self.requested_epsilon.is_zero() {
            return bad("requested epsilon must be positive".into());
        }
        if self.histogram_dim == 0 {
            return bad("histogram dimension must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NullCause {
    QuerierBudget,
    GlobalBudget,
    ConvQuota,
    ImpQuota,
    DomainCap,
    NoMatch,
}

impl NullCause {
    pub const ALL: [NullCause; 6] = [
        NullCause::QuerierBudget,
        NullCause::GlobalBudget,
        NullCause::ConvQuota,
        NullCause::ImpQuota,
        NullCause::DomainCap,
        NullCause::NoMatch,
    ];

    pub fn label(self) -> &'static str {
        match self {
            NullCause::QuerierBudget => "querier_budget",
            NullCause::GlobalBudget => "global_budget",
            NullCause::ConvQuota => "conv_quota",
            NullCause::ImpQuota => "imp_quota",
            NullCause::DomainCap => "domain_cap",
            NullCause::NoMatch => "no_match",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.label() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpochStatus {
    Committed,
    Nulled(NullCause),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub histogram: Vec<f64>,
    pub per_epoch_status: BTreeMap<EpochId, EpochStatus>,
}

impl Report {
    pub fn null(dim: usize) -> Self {
        Report { histogram: vec![0.0; dim], per_epoch_status: BTreeMap::new() }
    }

    pub fn mass(&self) -> f64 {
        self.histogram.iter().sum()
    }

    pub fn committed_epochs(&self) -> impl Iterator<Item = EpochId> + '_ {
        self.per_epoch_status.iter().filter(|(_, s)| **s == EpochStatus::Committed).map(|(e, _)| *e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedImpression {
    pub key: ImpressionKey,
    pub bucket: usize,
    pub timestamp: u64,
}

pub type EpochMatches = BTreeMap<EpochId, Vec<MatchedImpression>>;

/// Impressions of `(request.device, epoch)` on a registered site, passing the
/// match rule, within the histogram range, and not from the request's own
/// user action.
pub fn match_impressions(store: &EventStore, request: &ReportRequest, epoch: EpochId) -> Vec<MatchedImpression> {
    store
        .impressions(&request.device, epoch)
        .filter(|(_, imp)| {
            imp.ua_ctx != request.ua_ctx
                && request.imp_sites.contains(&imp.site)
                && request.matching.matches(&imp.ad_key)
                && imp.bucket < request.histogram_dim
        })
        .map(|(seq, imp)| MatchedImpression {
            key: ImpressionKey { epoch, site: imp.site.clone(), ad_key: imp.ad_key.clone(), seq },
            bucket: imp.bucket,
            timestamp: imp.timestamp,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributedImpression {
    pub imp: MatchedImpression,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionOutcome {
    /// Only epochs with at least one matched impression appear.
    pub per_epoch: BTreeMap<EpochId, Vec<AttributedImpression>>,
    pub a_max: f64,
}

impl AttributionOutcome {
    pub fn is_relevant(&self, epoch: EpochId) -> bool {
        self.per_epoch.get(&epoch).is_some_and(|v| !v.is_empty())
    }

    /// Distinct sites with a matched impression in `epoch`.
    pub fn contributing_sites(&self, epoch: EpochId) -> BTreeSet<&SiteId> {
        self.per_epoch.get(&epoch).map(|v| v.iter().map(|a| &a.imp.key.site).collect()).unwrap_or_default()
    }

    pub fn total(&self) -> f64 {
        self.per_epoch.values().flatten().map(|a| a.value).sum()
    }
}

pub fn attribute(matched: &EpochMatches, request: &ReportRequest) -> AttributionOutcome {
    let total: usize = matched.values().map(Vec::len).sum();
    let mut per_epoch: BTreeMap<EpochId, Vec<AttributedImpression>> = BTreeMap::new();
    if total > 0 {
        let last = match request.policy {
            AttributionPolicy::Uniform => None,
            AttributionPolicy::LastTouch => matched
                .values()
                .flatten()
                .max_by(|a, b| (a.timestamp, a.key.epoch, a.key.seq).cmp(&(b.timestamp, b.key.epoch, b.key.seq)))
                .map(|m| m.key.clone()),
        };
        let share = request.value / total as f64;
        for (epoch, imps) in matched.iter().filter(|(_, v)| !v.is_empty()) {
            let attributed = imps
                .iter()
                .map(|m| {
                    let value = match &last {
                        None => share,
                        Some(k) if *k == m.key => request.value,
                        Some(_) => 0.0,
                    };
                    AttributedImpression { imp: m.clone(), value }
                })
                .collect();
            per_epoch.insert(*epoch, attributed);
        }
    }
    AttributionOutcome { per_epoch, a_max: request.value }
}

/// (value / maxValue) · ε for relevant epochs, 0 otherwise.
pub fn epoch_budget(outcome: &AttributionOutcome, request: &ReportRequest, epoch: EpochId) -> Epsilon {
    if outcome.is_relevant(epoch) {
        request.requested_epsilon.scale(request.value / request.max_value)
    } else {
        Epsilon::ZERO
    }
}

pub fn epoch_imp_site_budget(
    outcome: &AttributionOutcome,
    request: &ReportRequest,
    epoch: EpochId,
    site: &str,
    mode: ImpSiteBudgetMode,
) -> Result<Epsilon> {
    if !request.imp_sites.contains(site) {
        return Err(Error::SiteNotRegistered(site.to_owned()));
    }
    let contributing = outcome.contributing_sites(epoch);
    if !contributing.iter().any(|s| s.as_str() == site) {
        return Ok(Epsilon::ZERO);
    }
    let base = epoch_budget(outcome, request, epoch);
    Ok(match mode {
        ImpSiteBudgetMode::UniformHeuristic => base.div_ceil(contributing.len() as u64),
        // Decided from the request shape alone so an epoch's charge never
        // depends on data in other epochs.
        ImpSiteBudgetMode::TwoDeltaBound => {
            if request.window_len() > 1 || request.imp_sites.len() > 1 {
                base * 2
            } else {
                base
            }
        }
    })
}

/// Per-site loss for every contributing site of `epoch`.
pub fn per_site_budgets(
    outcome: &AttributionOutcome,
    request: &ReportRequest,
    epoch: EpochId,
    mode: ImpSiteBudgetMode,
) -> BTreeMap<SiteId, Epsilon> {
    outcome
        .contributing_sites(epoch)
        .into_iter()
        .map(|s| {
            let b = epoch_imp_site_budget(outcome, request, epoch, s, mode).expect("contributing sites are registered");
            (s.clone(), b)
        })
        .collect()
}

/// Histogram over the impressions of committed epochs.
pub fn build_histogram(
    outcome: &AttributionOutcome,
    request: &ReportRequest,
    statuses: &BTreeMap<EpochId, EpochStatus>,
) -> Report {
    let mut histogram = vec![0.0; request.histogram_dim];
    for (epoch, imps) in &outcome.per_epoch {
        if statuses.get(epoch) == Some(&EpochStatus::Committed) {
            for a in imps {
                histogram[a.imp.bucket] += a.value;
            }
        }
    }
    Report { histogram, per_epoch_status: statuses.clone() }
}
