//! Scenario driver: benign workload (optionally under attack) → engine →
//! noisy aggregate queries → error, cause breakdown and ledger audit.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::accounting::{
    attribute, build_histogram, match_impressions, AttributionPolicy, EpochStatus, ImpSiteBudgetMode, MatchRule,
    Report, ReportId, ReportRequest,
};
use crate::engine::{Engine, EngineVariant, ReportLogRecord};
use crate::error::{Error, Result};
use crate::event::{Event, EventStore, SiteId};
use crate::filters::{Epsilon, FilterKind};
use crate::metrics::{
    aggregate_and_noise, cause_breakdown, cause_counts, ledger_audit, median, percentile, rmsre_tau, AdversaryView,
    QueryResult, RunSummary, Violation,
};
use crate::quotas::QuotaConfig;
use crate::rng::{substream, SimRng, Stream};
use crate::workload::{
    attacker_step, benign_request, gen_benign, AttackCall, AttackContext, AttackerSpec, BenignAction, BenignSpec,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub config: QuotaConfig,
    pub variant: EngineVariant,
    pub imp_mode: ImpSiteBudgetMode,
    pub benign: BenignSpec,
    pub attacker: Option<AttackerSpec>,
    pub seed: u64,
    /// Intermediary fraction r used when the quotas were derived.
    pub intermediary_fraction: f64,
}

impl Scenario {
    pub fn new(name: &str, config: QuotaConfig, variant: EngineVariant, benign: BenignSpec, seed: u64) -> Self {
        Scenario {
            name: name.to_owned(),
            config,
            variant,
            imp_mode: ImpSiteBudgetMode::default(),
            benign,
            attacker: None,
            seed,
            intermediary_fraction: 0.0,
        }
    }

    pub fn with_attacker(mut self, attacker: AttackerSpec) -> Self {
        self.attacker = Some(attacker);
        self
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub engine: Engine,
    pub queries: Vec<QueryResult>,
    /// Report-log records of benign reports only.
    pub benign_log: Vec<ReportLogRecord>,
    pub adversary: AdversaryView,
    pub violations: Vec<Violation>,
    pub adversarial_global: Epsilon,
    pub eps_per_query: f64,
    pub summary: RunSummary,
}

/// What the report would have been with unlimited budgets.
pub fn ideal_histogram(store: &EventStore, request: &ReportRequest) -> Vec<f64> {
    let matched =
        request.epochs().map(|e| (e, match_impressions(store, request, e))).filter(|(_, v)| !v.is_empty()).collect();
    let outcome = attribute(&matched, request);
    let all: BTreeMap<_, _> = request.epochs().map(|e| (e, EpochStatus::Committed)).collect();
    build_histogram(&outcome, request, &all).histogram
}

pub fn run_scenario(s: &Scenario) -> Result<RunOutput> {
    s.config.validate()?;
    if let Some(a) = &s.attacker {
        a.validate(&s.benign)?;
    }
    let workload = gen_benign(&s.benign, &mut substream(s.seed, Stream::Benign))?;
    let mut attack_rng = substream(s.seed, Stream::Attacker);
    let mut noise_rng = substream(s.seed, Stream::Noise);

    let mut engine = Engine::new(s.config, s.variant).with_imp_mode(s.imp_mode);
    let publishers: BTreeSet<SiteId> = s.benign.publishers.iter().map(|p| p.site.clone()).collect();
    let mut next_id = 0u64;
    let mut benign_ids = HashSet::new();
    let mut adversary = AdversaryView { intermediary_fraction: s.intermediary_fraction, ..AdversaryView::default() };
    let mut outcomes: BTreeMap<usize, Outcome> = BTreeMap::new();

    for (idx, action) in workload.actions.iter().enumerate() {
        match action {
            BenignAction::Impression(imp) => {
                let ua = engine.on_user_action(&imp.device, &imp.site);
                let mut imp = imp.clone();
                imp.ua_ctx = ua;
                engine.save_impression(&imp.device.clone(), ua, imp.clone())?;
                let Some(attacker) = s.attacker.as_ref().filter(|a| a.controlled_sites.contains(&imp.site)) else {
                    continue;
                };
                // the hijacked visit is its own user action
                let adv_ua = engine.on_user_action(&imp.device, &imp.site);
                *adversary.actions.entry(imp.device.clone()).or_insert(0) += 1;
                let ctx = AttackContext {
                    device: &imp.device,
                    epoch: imp.epoch,
                    timestamp: imp.timestamp,
                    ua: adv_ua,
                    first_epoch: (imp.epoch + 1).saturating_sub(s.benign.window),
                    histogram_dim: s.benign.histogram_dim,
                };
                for call in attacker_step(attacker, &mut engine, &ctx, &mut attack_rng, &mut next_id)? {
                    if let AttackCall::MeasureConversion { request, .. } = call {
                        adversary.reports.insert(request.report_id);
                    }
                }
            }
            BenignAction::Conversion { event, first_epoch } => {
                let ua = engine.on_user_action(&event.device, &event.conv_site);
                let mut event = event.clone();
                event.ua_ctx = ua;
                engine.record_conversion(event.clone())?;
                let id = ReportId(next_id);
                next_id += 1;
                benign_ids.insert(id);
                let req = benign_request(&s.benign, &event, *first_epoch, workload.eps_per_query, id, &publishers);
                let truth = ideal_histogram(engine.store(), &req);
                let report = engine.measure_conversion(&req)?;
                let querier = event.conv_site.clone();
                outcomes.insert(idx, Outcome { querier, id, report, truth, max_value: event.max_value });
            }
        }
    }

    let outcomes: Vec<Outcome> = workload
        .queries
        .iter()
        .flat_map(|q| q.conversions.iter())
        .map(|i| outcomes.remove(i).expect("each conversion belongs to one batch"))
        .collect();
    let mut next = 0;
    let batches: Vec<Vec<usize>> = workload
        .queries
        .iter()
        .map(|q| {
            let b = (next..next + q.conversions.len()).collect();
            next += q.conversions.len();
            b
        })
        .collect();
    let ctx = Finish {
        name: &s.name,
        seed: s.seed,
        config: &s.config,
        variant: s.variant,
        tau: s.benign.tau,
        dim: s.benign.histogram_dim,
    };
    finish(ctx, engine, &outcomes, &batches, &benign_ids, adversary, workload.eps_per_query, &mut noise_rng)
}

/// One answered benign conversion report.
#[derive(Debug, Clone)]
struct Outcome {
    querier: SiteId,
    id: ReportId,
    report: Report,
    truth: Vec<f64>,
    max_value: f64,
}

struct Finish<'a> {
    name: &'a str,
    seed: u64,
    config: &'a QuotaConfig,
    variant: EngineVariant,
    tau: f64,
    dim: usize,
}

/// Noisy aggregate answers per batch, error, causes and the ledger audit.
#[allow(clippy::too_many_arguments)]
fn finish(
    ctx: Finish<'_>,
    engine: Engine,
    outcomes: &[Outcome],
    batches: &[Vec<usize>],
    benign_ids: &HashSet<ReportId>,
    adversary: AdversaryView,
    eps_per_query: f64,
    noise_rng: &mut SimRng,
) -> Result<RunOutput> {
    let mut per_report: BTreeMap<ReportId, Vec<&ReportLogRecord>> = BTreeMap::new();
    for r in engine.report_log().iter().filter(|r| benign_ids.contains(&r.report_id)) {
        per_report.entry(r.report_id).or_default().push(r);
    }
    let mut queries = Vec::new();
    for batch in batches {
        let members: Vec<&Outcome> = batch.iter().map(|i| &outcomes[*i]).collect();
        let reports: Vec<Report> = members.iter().map(|o| o.report.clone()).collect();
        let mut truth = vec![0.0; ctx.dim];
        for o in &members {
            for (a, b) in truth.iter_mut().zip(&o.truth) {
                *a += b;
            }
        }
        let max_value = members.iter().map(|o| o.max_value).fold(0.0, f64::max);
        let estimate = aggregate_and_noise(&reports, ctx.dim, max_value / eps_per_query, noise_rng)?;
        let logs = members.iter().flat_map(|o| per_report.get(&o.id).into_iter().flatten().copied());
        queries.push(QueryResult {
            querier: members.first().map(|o| o.querier.clone()).unwrap_or_default(),
            rmsre: rmsre_tau(&truth, &estimate, ctx.tau, batch.len()),
            true_histogram: truth,
            noisy_estimate: estimate,
            batch_size: batch.len(),
            tau: ctx.tau,
            cause_counts: cause_counts(logs),
        });
    }

    let benign_log: Vec<ReportLogRecord> =
        engine.report_log().iter().filter(|r| benign_ids.contains(&r.report_id)).cloned().collect();
    let resilience = (ctx.variant == EngineVariant::Full).then_some(&adversary);
    let violations = ledger_audit(engine.ledger(), ctx.config, resilience);
    let adversarial_global: Epsilon = engine
        .ledger()
        .iter()
        .filter(|l| l.kind == FilterKind::Global && adversary.reports.contains(&l.report_id))
        .map(|l| l.amount)
        .sum();
    let rmsres: Vec<f64> = queries.iter().map(|q| q.rmsre).collect();
    let summary = RunSummary {
        scenario: ctx.name.to_owned(),
        seed: ctx.seed,
        queries: queries.len(),
        median_rmsre: median(&rmsres),
        p95_rmsre: percentile(&rmsres, 95.0),
        causes: cause_breakdown(&benign_log),
        adversarial_global_microeps: adversarial_global.micro(),
        violations: violations.len(),
    };
    Ok(RunOutput { engine, queries, benign_log, adversary, violations, adversarial_global, eps_per_query, summary })
}

/// The benign event stream `run_scenario` would generate for `seed`, with
/// placeholder ua contexts; used to estimate workload bounds before a run.
pub fn benign_event_store(spec: &BenignSpec, seed: u64) -> Result<EventStore> {
    let workload = gen_benign(spec, &mut substream(seed, Stream::Benign))?;
    let mut store = EventStore::new(crate::event::DEFAULT_EPOCH_LENGTH);
    for action in workload.actions {
        store.append(match action {
            BenignAction::Impression(i) => Event::Impression(i),
            BenignAction::Conversion { event, .. } => Event::Conversion(event),
        })?;
    }
    Ok(store)
}

/// How a recorded event stream is turned into report requests and queries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplaySpec {
    pub eps_per_query: f64,
    /// Attribution window in epochs, including the conversion's own.
    pub window: u32,
    pub histogram_dim: usize,
    pub batch_size: usize,
    pub tau: f64,
}

/// Feed a recorded stream through a fresh engine in time order. Every
/// conversion yields one report per listed querier, registering every
/// impression site seen in the stream and matching on the conversion's ad
/// key (any impression when empty). Each querier's reports are batched into
/// full chunks of `batch_size` for the noisy queries.
#[allow(clippy::too_many_arguments)]
pub fn replay_store(
    name: &str,
    store: &EventStore,
    config: QuotaConfig,
    variant: EngineVariant,
    imp_mode: ImpSiteBudgetMode,
    spec: &ReplaySpec,
    seed: u64,
) -> Result<RunOutput> {
    let engine = Engine::with_store(config, variant, EventStore::new(store.epoch_length())).with_imp_mode(imp_mode);
    replay_with(engine, name, store, spec, seed)
}

/// [`replay_store`] on an existing engine, e.g. one restored from a snapshot
/// and preloaded with earlier events.
pub fn replay_with(
    mut engine: Engine,
    name: &str,
    store: &EventStore,
    spec: &ReplaySpec,
    seed: u64,
) -> Result<RunOutput> {
    let config = *engine.config();
    let variant = engine.variant();
    config.validate()?;
    if spec.window == 0 || spec.histogram_dim == 0 || spec.batch_size == 0 || !(spec.eps_per_query > 0.0) {
        return Err(Error::InvalidConfig("replay needs positive window, histogram dimension, batch size and ε".into()));
    }
    // history already held by the engine (e.g. after a restore) counts too
    let imp_sites: BTreeSet<SiteId> = store
        .device_epochs()
        .chain(engine.store().device_epochs())
        .flat_map(|(_, _, evs)| evs.iter())
        .filter_map(|e| match e {
            Event::Impression(i) => Some(i.site.clone()),
            Event::Conversion(_) => None,
        })
        .collect();
    let mut noise_rng = substream(seed, Stream::Noise);
    let mut outcomes = Vec::new();
    let mut per_querier: BTreeMap<SiteId, Vec<usize>> = BTreeMap::new();
    let mut benign_ids = HashSet::new();
    let mut next_id = 0u64;
    for event in store.events_by_time() {
        match event {
            Event::Impression(imp) => {
                engine.save_impression(&imp.device, imp.ua_ctx, imp.clone())?;
            }
            Event::Conversion(conv) => {
                engine.record_conversion(conv.clone())?;
                for querier in &conv.queriers {
                    let id = ReportId(next_id);
                    next_id += 1;
                    benign_ids.insert(id);
                    let req = ReportRequest {
                        report_id: id,
                        device: conv.device.clone(),
                        querier: querier.clone(),
                        conv_site: conv.conv_site.clone(),
                        imp_sites: imp_sites.clone(),
                        first_epoch: (conv.epoch + 1).saturating_sub(spec.window),
                        last_epoch: conv.epoch,
                        requested_epsilon: Epsilon::from_eps(spec.eps_per_query),
                        value: conv.value,
                        max_value: conv.max_value,
                        histogram_dim: spec.histogram_dim,
                        matching: if conv.ad_key.is_empty() { MatchRule::Any } else { MatchRule::ad_key(&conv.ad_key) },
                        policy: AttributionPolicy::Uniform,
                        ua_ctx: conv.ua_ctx,
                    };
                    let truth = ideal_histogram(engine.store(), &req);
                    let report = engine.measure_conversion(&req)?;
                    per_querier.entry(querier.clone()).or_default().push(outcomes.len());
                    outcomes.push(Outcome { querier: querier.clone(), id, report, truth, max_value: conv.max_value });
                }
            }
        }
    }
    let batches: Vec<Vec<usize>> =
        per_querier.values().flat_map(|idx| idx.chunks_exact(spec.batch_size).map(<[usize]>::to_vec)).collect();
    let ctx = Finish { name, seed, config: &config, variant, tau: spec.tau, dim: spec.histogram_dim };
    finish(ctx, engine, &outcomes, &batches, &benign_ids, AdversaryView::default(), spec.eps_per_query, &mut noise_rng)
}
