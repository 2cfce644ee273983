//! Synthetic benign traffic and the attacker strategies that run against it.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::accounting::{AttributionPolicy, MatchRule, ReportId, ReportRequest};
use crate::engine::{Engine, SaveOutcome};
use crate::error::{Error, Result};
use crate::event::{ConversionEvent, DeviceId, EpochId, ImpressionEvent, SiteId, UaCtxId, DEFAULT_EPOCH_LENGTH};
use crate::filters::{Epsilon, FilterKind};
use crate::metrics::expected_noise_rmsre;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvertiserSpec {
    pub site: SiteId,
    /// Probability that a device with a recent impression of this
    /// advertiser converts on a given day.
    pub conv_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublisherSpec {
    pub site: SiteId,
    /// Relative share of impressions.
    pub weight: f64,
    /// Contextual bucket of impressions shown on this site.
    pub bucket: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenignSpec {
    pub devices: u32,
    pub days: u32,
    pub publishers: Vec<PublisherSpec>,
    pub advertisers: Vec<AdvertiserSpec>,
    /// Mean impressions per device per day.
    pub imps_per_day: f64,
    /// Attribution window in epochs, including the conversion's own.
    pub window: u32,
    pub histogram_dim: usize,
    pub batch_size: usize,
    pub max_value: f64,
    /// Fixed per-query ε; `None` tunes it to `target_rmsre`.
    pub eps_per_query: Option<f64>,
    pub target_rmsre: f64,
    pub tau: f64,
}

impl Default for BenignSpec {
    fn default() -> Self {
        let weights = [0.2, 0.16, 0.13, 0.11, 0.1, 0.08, 0.07, 0.06, 0.05, 0.04];
        BenignSpec {
            devices: 2000,
            days: 14,
            publishers: weights
                .iter()
                .enumerate()
                .map(|(i, w)| PublisherSpec { site: format!("pub{i}.ex"), weight: *w, bucket: i % 5 })
                .collect(),
            advertisers: (0..4).map(|i| AdvertiserSpec { site: format!("adv{i}.ex"), conv_rate: 0.05 }).collect(),
            imps_per_day: 1.0,
            window: 7,
            histogram_dim: 5,
            batch_size: 600,
            max_value: 1.0,
            eps_per_query: None,
            target_rmsre: 0.05,
            tau: 0.05,
        }
    }
}

impl BenignSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_owned()));
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if self.window == 0 || self.histogram_dim == 0 {
            return bad("window and histogram dimension must be positive");
        }
        if self.publishers.is_empty()
            || self.publishers.iter().any(|p| p.weight <= 0.0 || p.bucket >= self.histogram_dim)
        {
            return bad("publishers need positive weights and buckets inside the histogram");
        }
        if self.advertisers.iter().any(|a| !(0.0..=1.0).contains(&a.conv_rate)) {
            return bad("conversion rates must lie in [0, 1]");
        }
        if !(self.max_value > 0.0) || !(self.imps_per_day >= 0.0) {
            return bad("max value must be positive and impression rate non-negative");
        }
        if let Some(e) = self.eps_per_query {
            if !(e > 0.0) {
                return bad("per-query epsilon must be positive");
            }
        }
        Ok(())
    }

    /// Expected bucket shares of attributed conversions.
    fn bucket_shares(&self) -> Vec<f64> {
        let total: f64 = self.publishers.iter().map(|p| p.weight).sum();
        let mut shares = vec![0.0; self.histogram_dim];
        for p in &self.publishers {
            shares[p.bucket] += p.weight / total;
        }
        shares
    }

    /// Per-query ε: fixed, or the value whose pure-noise RMSRE on the
    /// expected histogram of a full batch equals `target_rmsre`.
    pub fn query_epsilon(&self) -> f64 {
        self.eps_per_query.unwrap_or_else(|| {
            let truth: Vec<f64> =
                self.bucket_shares().iter().map(|s| s * self.batch_size as f64 * self.max_value).collect();
            // expected RMSRE is linear in λ
            let per_unit_lambda = expected_noise_rmsre(&truth, 1.0, self.tau, self.batch_size);
            let lambda = self.target_rmsre / per_unit_lambda;
            self.max_value / lambda
        })
    }
}

/// A benign action in time order. Each is its own user action.
#[derive(Debug, Clone, PartialEq)]
pub enum BenignAction {
    Impression(ImpressionEvent),
    Conversion { event: ConversionEvent, first_epoch: EpochId },
}

impl BenignAction {
    pub fn device(&self) -> &str {
        match self {
            BenignAction::Impression(i) => &i.device,
            BenignAction::Conversion { event, .. } => &event.device,
        }
    }

    pub fn timestamp(&self) -> u64 {
        match self {
            BenignAction::Impression(i) => i.timestamp,
            BenignAction::Conversion { event, .. } => event.timestamp,
        }
    }
}

/// One aggregate query: a batch of conversions of one advertiser, by index
/// into [`BenignWorkload::actions`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryBatch {
    pub querier: SiteId,
    pub conversions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenignWorkload {
    pub actions: Vec<BenignAction>,
    pub queries: Vec<QueryBatch>,
    pub eps_per_query: f64,
}

/// The ad key benign impressions of an advertiser carry.
pub fn ad_key_of(advertiser: &str) -> String {
    format!("ad:{advertiser}")
}

/// Generate impressions and conversions for every device and day. Ua
/// contexts are placeholders; the driver assigns real ones.
pub fn gen_benign<R: Rng + ?Sized>(spec: &BenignSpec, rng: &mut R) -> Result<BenignWorkload> {
    spec.validate()?;
    let day = DEFAULT_EPOCH_LENGTH;
    let weights: Vec<f64> = spec.publishers.iter().map(|p| p.weight).collect();
    let pick = rand_distr::weighted::WeightedIndex::new(&weights).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let per_day = if spec.imps_per_day > 0.0 {
        Some(Poisson::new(spec.imps_per_day).map_err(|e| Error::InvalidConfig(e.to_string()))?)
    } else {
        None
    };
    let mut actions = Vec::new();
    for d in 0..spec.devices {
        let device: DeviceId = format!("dev{d}");
        // last impression day per advertiser
        let mut last_seen: BTreeMap<usize, EpochId> = BTreeMap::new();
        for epoch in 0..spec.days {
            let mut today = Vec::new();
            let n_imps = per_day.as_ref().map_or(0, |p| p.sample(rng) as u64);
            for _ in 0..n_imps {
                if spec.advertisers.is_empty() {
                    break;
                }
                let publisher = &spec.publishers[pick.sample(rng)];
                let adv = rng.random_range(0..spec.advertisers.len());
                // impressions in the first half of the day, conversions later
                let ts = epoch as u64 * day + rng.random_range(0..day / 2);
                today.push(BenignAction::Impression(ImpressionEvent {
                    device: device.clone(),
                    epoch,
                    ua_ctx: UaCtxId(0),
                    site: publisher.site.clone(),
                    ad_key: ad_key_of(&spec.advertisers[adv].site),
                    bucket: publisher.bucket,
                    timestamp: ts,
                }));
                last_seen.insert(adv, epoch);
            }
            for (a, adv) in spec.advertisers.iter().enumerate() {
                let recent = last_seen.get(&a).is_some_and(|e| epoch - e < spec.window);
                if recent && rng.random_bool(adv.conv_rate) {
                    let ts = epoch as u64 * day + day / 2 + rng.random_range(0..day / 2);
                    today.push(BenignAction::Conversion {
                        event: ConversionEvent {
                            device: device.clone(),
                            epoch,
                            ua_ctx: UaCtxId(0),
                            conv_site: adv.site.clone(),
                            queriers: [adv.site.clone()].into(),
                            value: spec.max_value,
                            max_value: spec.max_value,
                            ad_key: ad_key_of(&adv.site),
                            timestamp: ts,
                        },
                        first_epoch: (epoch + 1).saturating_sub(spec.window),
                    });
                }
            }
            actions.extend(today);
        }
    }
    // stable order: by time, then device
    actions.sort_by(|a, b| (a.timestamp(), a.device()).cmp(&(b.timestamp(), b.device())));

    let mut per_adv: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, a) in actions.iter().enumerate() {
        if let BenignAction::Conversion { event, .. } = a {
            per_adv.entry(event.conv_site.as_str()).or_default().push(i);
        }
    }
    let queries = per_adv
        .into_iter()
        .flat_map(|(adv, convs)| {
            convs
                .chunks_exact(spec.batch_size)
                .map(|c| QueryBatch { querier: adv.to_owned(), conversions: c.to_vec() })
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(BenignWorkload { actions, queries, eps_per_query: spec.query_epsilon() })
}

/// The benign report request for a generated conversion.
pub fn benign_request(
    spec: &BenignSpec,
    event: &ConversionEvent,
    first_epoch: EpochId,
    eps: f64,
    report_id: ReportId,
    publishers: &BTreeSet<SiteId>,
) -> ReportRequest {
    ReportRequest {
        report_id,
        device: event.device.clone(),
        querier: event.conv_site.clone(),
        conv_site: event.conv_site.clone(),
        imp_sites: publishers.clone(),
        first_epoch,
        last_epoch: event.epoch,
        requested_epsilon: Epsilon::from_eps(eps),
        value: event.value,
        max_value: event.max_value,
        histogram_dim: spec.histogram_dim,
        matching: MatchRule::ad_key(&event.ad_key),
        policy: AttributionPolicy::Uniform,
        ua_ctx: event.ua_ctx,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AttackStrategy {
    /// References every Sybil on every action.
    Naive,
    /// References a uniformly sampled fraction of the Sybils per action.
    Random(f64),
    /// Reads exact remaining budgets and only uses Sybils that fit.
    Omniscient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackerSpec {
    pub strategy: AttackStrategy,
    pub sybils: Vec<SiteId>,
    /// Benign sites whose user actions the attacker can hijack.
    pub controlled_sites: BTreeSet<SiteId>,
    /// Longest redirection chain attempted per action.
    pub chain_length: usize,
}

/// Ad key carried by attacker impressions.
pub const SYBIL_AD_KEY: &str = "sybil";
pub const DEFAULT_RANDOM_FRACTION: f64 = 0.35;
pub const DEFAULT_SYBILS: usize = 25;

impl AttackerSpec {
    pub fn new(strategy: AttackStrategy, sybils: usize, controlled_sites: BTreeSet<SiteId>) -> Self {
        AttackerSpec {
            strategy,
            sybils: (0..sybils).map(|i| format!("sybil{i:03}.ex")).collect(),
            controlled_sites,
            chain_length: sybils,
        }
    }

    pub fn validate(&self, benign: &BenignSpec) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_owned()));
        if let AttackStrategy::Random(f) = self.strategy {
            if !(f > 0.0 && f <= 1.0) {
                return bad("attacker fraction must be in (0, 1]");
            }
        }
        if self.sybils.is_empty() || self.chain_length == 0 {
            return bad("attacker needs at least one Sybil and a positive chain length");
        }
        let benign_sites: BTreeSet<&str> = benign
            .publishers
            .iter()
            .map(|p| p.site.as_str())
            .chain(benign.advertisers.iter().map(|a| a.site.as_str()))
            .collect();
        if self.sybils.iter().any(|s| benign_sites.contains(s.as_str())) {
            return bad("Sybil pool overlaps benign sites");
        }
        Ok(())
    }
}

/// A hijacked user action.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackContext<'a> {
    pub device: &'a str,
    pub epoch: EpochId,
    pub timestamp: u64,
    pub ua: UaCtxId,
    /// Oldest epoch the attacker's reports reach back to.
    pub first_epoch: EpochId,
    pub histogram_dim: usize,
}

/// One call the attacker made and what happened.
#[derive(Debug, Clone, PartialEq)]
pub enum AttackCall {
    SaveImpression { site: SiteId, outcome: SaveOutcome },
    MeasureConversion { request: ReportRequest, committed_epochs: usize, nulled_epochs: usize },
}

fn attack_request(
    ctx: &AttackContext<'_>,
    sybil: &str,
    imp_sites: BTreeSet<SiteId>,
    epochs: (EpochId, EpochId),
    eps: Epsilon,
    id: ReportId,
) -> ReportRequest {
    ReportRequest {
        report_id: id,
        device: ctx.device.to_owned(),
        querier: sybil.to_owned(),
        conv_site: sybil.to_owned(),
        imp_sites,
        first_epoch: epochs.0,
        last_epoch: epochs.1,
        requested_epsilon: eps,
        value: 1.0,
        max_value: 1.0,
        histogram_dim: ctx.histogram_dim,
        matching: MatchRule::ad_key(SYBIL_AD_KEY),
        policy: AttributionPolicy::Uniform,
        ua_ctx: ctx.ua,
    }
}

/// Sybil sites with attacker impressions on `(device, epoch)` outside this
/// action, that can still absorb their share of a loss of `eps`. Shrinks
/// the set until every remaining site can take the (growing) share.
fn viable_imp_sites(
    engine: &Engine,
    ctx: &AttackContext<'_>,
    epoch: EpochId,
    eps: Epsilon,
    pool: &BTreeSet<&str>,
) -> BTreeSet<SiteId> {
    let mut sites: BTreeSet<SiteId> = engine
        .store()
        .impressions(ctx.device, epoch)
        .filter(|(_, i)| i.ua_ctx != ctx.ua && i.ad_key == SYBIL_AD_KEY && pool.contains(i.site.as_str()))
        .map(|(_, i)| i.site.clone())
        .collect();
    loop {
        if sites.is_empty() {
            return sites;
        }
        let share = eps.div_ceil(sites.len() as u64);
        let before = sites.len();
        sites.retain(|s| engine.remaining(ctx.device, epoch, &FilterKind::ImpQuota(s.clone())) >= share);
        if sites.len() == before {
            return sites;
        }
    }
}

/// Run one hijacked user action: a redirection chain through Sybils, each
/// registering a fresh impression and requesting a report at ε = ε_querier.
/// Calls go through the engine's public API, so the domain cap and atomic
/// checks apply; only the omniscient strategy reads remaining budgets.
pub fn attacker_step<R: Rng + ?Sized>(
    spec: &AttackerSpec,
    engine: &mut Engine,
    ctx: &AttackContext<'_>,
    rng: &mut R,
    next_report_id: &mut u64,
) -> Result<Vec<AttackCall>> {
    let eps = engine.config().eps_querier;
    let mut calls = Vec::new();
    let mut fresh_id = || {
        let id = ReportId(*next_report_id);
        *next_report_id += 1;
        id
    };
    let save = |engine: &mut Engine, site: &str| -> Result<AttackCall> {
        let imp = ImpressionEvent {
            device: ctx.device.to_owned(),
            epoch: ctx.epoch,
            ua_ctx: ctx.ua,
            site: site.to_owned(),
            ad_key: SYBIL_AD_KEY.to_owned(),
            bucket: 0,
            timestamp: ctx.timestamp,
        };
        let outcome = engine.save_impression(ctx.device, ctx.ua, imp)?;
        Ok(AttackCall::SaveImpression { site: site.to_owned(), outcome })
    };
    let measure = |engine: &mut Engine, request: ReportRequest| -> Result<AttackCall> {
        let report = engine.measure_conversion(&request)?;
        let committed = report.committed_epochs().count();
        let nulled = report.per_epoch_status.len() - committed;
        Ok(AttackCall::MeasureConversion { request, committed_epochs: committed, nulled_epochs: nulled })
    };

    match spec.strategy {
        AttackStrategy::Naive | AttackStrategy::Random(_) => {
            let referenced: Vec<SiteId> = match spec.strategy {
                AttackStrategy::Random(f) => {
                    let k = ((f * spec.sybils.len() as f64).round() as usize).clamp(1, spec.sybils.len());
                    // the chain visits the sample in pool order
                    let mut idx: Vec<usize> =
                        (0..spec.sybils.len()).collect::<Vec<_>>().choose_multiple(rng, k).copied().collect();
                    idx.sort_unstable();
                    idx.into_iter().map(|i| spec.sybils[i].clone()).collect()
                }
                _ => spec.sybils.clone(),
            };
            let imp_sites: BTreeSet<SiteId> = referenced.iter().cloned().collect();
            for sybil in referenced.iter().take(spec.chain_length) {
                calls.push(save(engine, sybil)?);
                let req = attack_request(ctx, sybil, imp_sites.clone(), (ctx.first_epoch, ctx.epoch), eps, fresh_id());
                calls.push(measure(engine, req)?);
            }
        }
        AttackStrategy::Omniscient => {
            let pool: BTreeSet<&str> = spec.sybils.iter().map(String::as_str).collect();
            // Sybils without impressions on this device today come first, so
            // each action adds fresh stock; then those with room in the most
            // epochs; ties broken by pool order.
            let today: BTreeSet<&str> = engine
                .store()
                .impressions(ctx.device, ctx.epoch)
                .filter(|(_, i)| i.ad_key == SYBIL_AD_KEY)
                .map(|(_, i)| i.site.as_str())
                .collect();
            let room_epochs = |s: &SiteId| {
                (ctx.first_epoch..=ctx.epoch)
                    .filter(|e| {
                        let r = |k: FilterKind| engine.remaining(ctx.device, *e, &k);
                        r(FilterKind::Querier(s.clone())) >= eps && r(FilterKind::ConvQuota(s.clone())) >= eps
                    })
                    .count()
            };
            let mut order: Vec<(bool, std::cmp::Reverse<usize>, &SiteId)> = spec
                .sybils
                .iter()
                .map(|s| (today.contains(s.as_str()), std::cmp::Reverse(room_epochs(s)), s))
                .collect();
            order.sort();
            let order: Vec<SiteId> = order.into_iter().map(|(_, _, s)| s.clone()).collect();
            let mut used = 0;
            for sybil in &order {
                if used == spec.chain_length {
                    break;
                }
                let has_room = |engine: &Engine, e: EpochId| {
                    let r = |k: FilterKind| engine.remaining(ctx.device, e, &k);
                    r(FilterKind::Global) >= eps
                        && r(FilterKind::Querier(sybil.clone())) >= eps
                        && (!engine.variant().enforces_cap() || r(FilterKind::ConvQuota(sybil.clone())) >= eps)
                };
                if !engine.quota_count_check(ctx.device, ctx.ua, ctx.epoch, sybil)
                    || !(ctx.first_epoch..=ctx.epoch).any(|e| has_room(engine, e))
                {
                    continue;
                }
                used += 1;
                calls.push(save(engine, sybil)?);
                for e in ctx.first_epoch..=ctx.epoch {
                    if !has_room(engine, e) || !engine.quota_count_check(ctx.device, ctx.ua, e, sybil) {
                        continue;
                    }
                    let sites = if engine.variant().enforces_cap() {
                        viable_imp_sites(engine, ctx, e, eps, &pool)
                    } else {
                        viable_imp_sites(engine, ctx, e, Epsilon::ZERO, &pool)
                    };
                    if sites.is_empty() {
                        continue;
                    }
                    let req = attack_request(ctx, sybil, sites, (e, e), eps, fresh_id());
                    calls.push(measure(engine, req)?);
                }
            }
        }
    }
    Ok(calls)
}
