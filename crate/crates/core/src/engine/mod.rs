//! The on-device budget manager: impression storage under the per-action
//! domain cap, conversion measurement, and the two-phase multi-filter
//! transaction.

pub mod cross_epoch_cap;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::accounting::{
    attribute, build_histogram, epoch_budget, match_impressions, per_site_budgets, EpochMatches, EpochStatus,
    ImpSiteBudgetMode, NullCause, Report, ReportId, ReportRequest,
};
use crate::error::{Error, Result};
use crate::event::{
    ConversionEvent, DeviceId, EpochId, Event, EventStore, ImpressionEvent, SiteId, UaCtxId, DEFAULT_EPOCH_LENGTH,
};
use crate::filters::{Epsilon, FilterKind, FilterRegistry, FilterSet};
use crate::quotas::QuotaConfig;

/// Which filters a deployment enforces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum EngineVariant {
    /// Querier, global, conv-quota and imp-quota filters plus the domain cap.
    #[default]
    Full,
    /// Querier and global filters only.
    GlobalOnly,
    /// Querier filters only.
    NoGlobal,
}

impl EngineVariant {
    pub fn label(self) -> &'static str {
        match self {
            EngineVariant::Full => "full",
            EngineVariant::GlobalOnly => "global_only",
            EngineVariant::NoGlobal => "no_global",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [EngineVariant::Full, EngineVariant::GlobalOnly, EngineVariant::NoGlobal].into_iter().find(|v| v.label() == s)
    }

    pub fn enforces_cap(self) -> bool {
        self == EngineVariant::Full
    }

    /// Charges for one epoch of a report, in check order.
    pub fn charges(
        self,
        querier: &str,
        conv_site: &str,
        epoch_loss: Epsilon,
        per_site_loss: &BTreeMap<SiteId, Epsilon>,
    ) -> Vec<(FilterKind, Epsilon)> {
        let mut out = vec![(FilterKind::Querier(querier.to_owned()), epoch_loss)];
        if self != EngineVariant::NoGlobal {
            out.push((FilterKind::Global, epoch_loss));
        }
        if self == EngineVariant::Full {
            out.push((FilterKind::ConvQuota(conv_site.to_owned()), epoch_loss));
            out.extend(per_site_loss.iter().map(|(s, l)| (FilterKind::ImpQuota(s.clone()), *l)));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaveOutcome {
    Stored,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub device: DeviceId,
    pub epoch: EpochId,
    pub report_id: ReportId,
    pub kind: FilterKind,
    pub amount: Epsilon,
    pub committed: bool,
}

/// One line of the report log: the outcome of one (report, epoch) attempt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportLogRecord {
    pub report_id: ReportId,
    pub device: DeviceId,
    pub epoch: EpochId,
    pub status: EpochStatus,
    pub epoch_loss: Epsilon,
}

pub fn write_report_log<W: Write>(records: &[ReportLogRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(["report_id", "device", "epoch", "status", "cause", "epoch_loss_microeps"]).map_err(io)?;
    for r in records {
        let (status, cause) = match r.status {
            EpochStatus::Committed => ("committed", ""),
            EpochStatus::Nulled(c) => ("nulled", c.label()),
        };
        w.write_record([
            &r.report_id.to_string(),
            r.device.as_str(),
            &r.epoch.to_string(),
            status,
            cause,
            &r.epoch_loss.micro().to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ledger<W: Write>(entries: &[LedgerEntry], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(["device", "epoch", "report_id", "filter_kind", "key", "amount_microeps", "committed"])
        .map_err(io)?;
    for e in entries {
        w.write_record([
            e.device.as_str(),
            &e.epoch.to_string(),
            &e.report_id.to_string(),
            e.kind.label(),
            e.kind.key(),
            &e.amount.micro().to_string(),
            if e.committed { "true" } else { "false" },
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Sites accessed under each (user action, epoch).
#[derive(Debug, Clone, Default)]
pub struct UaState {
    accessed: HashMap<(UaCtxId, EpochId), BTreeSet<SiteId>>,
}

impl UaState {
    pub fn accessed(&self, ua: UaCtxId, epoch: EpochId) -> Option<&BTreeSet<SiteId>> {
        self.accessed.get(&(ua, epoch))
    }

    /// |accessed ∪ {site}| ≤ κ.
    pub fn quota_count_check(&self, ua: UaCtxId, epoch: EpochId, site: &str, kappa: u32) -> bool {
        match self.accessed.get(&(ua, epoch)) {
            None => kappa >= 1,
            Some(set) => set.contains(site) || set.len() < kappa as usize,
        }
    }

    fn record(&mut self, ua: UaCtxId, epoch: EpochId, site: &str) {
        let set = self.accessed.entry((ua, epoch)).or_default();
        if !set.contains(site) {
            set.insert(site.to_owned());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (UaCtxId, EpochId, &BTreeSet<SiteId>)> {
        self.accessed.iter().map(|((u, e), s)| (*u, *e, s))
    }
}

/// Who a transaction is for, for ledger bookkeeping.
#[derive(Debug, Clone, Copy)]
pub struct TxnContext<'a> {
    pub device: &'a str,
    pub epoch: EpochId,
    pub report_id: ReportId,
}

/// Two-phase check-and-consume. Phase 1 checks every charge in order and
/// stops at the first filter that cannot absorb it, returning that filter
/// with the set untouched. Phase 2 deducts every charge and logs it.
/// Zero charges never instantiate a filter.
pub fn atomic_check_and_consume(
    fs: &mut FilterSet,
    config: &QuotaConfig,
    charges: &[(FilterKind, Epsilon)],
    ctx: TxnContext<'_>,
    ledger: &mut Vec<LedgerEntry>,
) -> std::result::Result<(), FilterKind> {
    for (kind, loss) in charges {
        if !fs.can_consume(kind, *loss, config) {
            return Err(kind.clone());
        }
    }
    for (kind, loss) in charges.iter().filter(|(_, l)| !l.is_zero()) {
        let ok = fs.get_or_init(kind, config).try_consume(*loss);
        debug_assert!(ok, "phase 1 admitted a charge phase 2 cannot apply");
        ledger.push(LedgerEntry {
            device: ctx.device.to_owned(),
            epoch: ctx.epoch,
            report_id: ctx.report_id,
            kind: kind.clone(),
            amount: *loss,
            committed: true,
        });
    }
    Ok(())
}

pub fn null_cause_of(kind: &FilterKind) -> NullCause {
    match kind {
        FilterKind::Global => NullCause::GlobalBudget,
        FilterKind::Querier(_) => NullCause::QuerierBudget,
        FilterKind::ConvQuota(_) => NullCause::ConvQuota,
        FilterKind::ImpQuota(_) => NullCause::ImpQuota,
    }
}

#[derive(Debug, Clone)]
pub struct Engine {
    pub(crate) config: QuotaConfig,
    pub(crate) variant: EngineVariant,
    pub(crate) imp_mode: ImpSiteBudgetMode,
    pub(crate) store: EventStore,
    pub(crate) registry: FilterRegistry,
    pub(crate) ua: UaState,
    pub(crate) ledger: Vec<LedgerEntry>,
    pub(crate) log: Vec<ReportLogRecord>,
    report_ua: HashMap<ReportId, UaCtxId>,
    next_ua: u64,
}

impl Engine {
    pub fn new(config: QuotaConfig, variant: EngineVariant) -> Self {
        Self::with_store(config, variant, EventStore::new(DEFAULT_EPOCH_LENGTH))
    }

    /// Start from an existing event store (e.g. ingested from CSV).
    pub fn with_store(config: QuotaConfig, variant: EngineVariant, store: EventStore) -> Self {
        let next_ua = store.max_ua_ctx().map_or(0, |m| m + 1);
        Engine {
            config,
            variant,
            imp_mode: ImpSiteBudgetMode::default(),
            store,
            registry: FilterRegistry::new(),
            ua: UaState::default(),
            ledger: Vec::new(),
            log: Vec::new(),
            report_ua: HashMap::new(),
            next_ua,
        }
    }

    pub fn with_imp_mode(mut self, mode: ImpSiteBudgetMode) -> Self {
        self.imp_mode = mode;
        self
    }

    /// Replace the filter state, e.g. from a snapshot.
    pub fn with_registry(mut self, registry: FilterRegistry) -> Self {
        self.registry = registry;
        self
    }

    pub fn config(&self) -> &QuotaConfig {
        &self.config
    }

    pub fn variant(&self) -> EngineVariant {
        self.variant
    }

    pub fn store(&self) -> &EventStore {
        &self.store
    }

    pub fn registry(&self) -> &FilterRegistry {
        &self.registry
    }

    pub fn ledger(&self) -> &[LedgerEntry] {
        &self.ledger
    }

    pub fn report_log(&self) -> &[ReportLogRecord] {
        &self.log
    }

    pub fn ua_state(&self) -> &UaState {
        &self.ua
    }

    pub fn report_ua(&self, id: ReportId) -> Option<UaCtxId> {
        self.report_ua.get(&id).copied()
    }

    /// Remaining budget of any filter (absent filters read as full).
    pub fn remaining(&self, device: &str, epoch: EpochId, kind: &FilterKind) -> Epsilon {
        self.registry.remaining(device, epoch, kind, &self.config)
    }

    pub fn on_user_action(&mut self, _device: &str, _site: &str) -> UaCtxId {
        let id = UaCtxId(self.next_ua);
        self.next_ua += 1;
        id
    }

    pub fn quota_count_check(&self, _device: &str, ua: UaCtxId, epoch: EpochId, site: &str) -> bool {
        self.ua.quota_count_check(ua, epoch, site, self.config.kappa_action)
    }

    pub fn save_impression(&mut self, device: &str, ua: UaCtxId, impression: ImpressionEvent) -> Result<SaveOutcome> {
        if impression.device != device || impression.ua_ctx != ua {
            return Err(Error::InvalidEvent("impression device/uaCtx disagree with the call".into()));
        }
        self.store.validate(&Event::Impression(impression.clone()))?;
        if self.variant.enforces_cap() {
            if !self.quota_count_check(device, ua, impression.epoch, &impression.site) {
                return Ok(SaveOutcome::Rejected);
            }
            self.ua.record(ua, impression.epoch, &impression.site);
        }
        self.store.append(Event::Impression(impression))?;
        Ok(SaveOutcome::Stored)
    }

    /// Store a conversion event (public data; consumes nothing).
    pub fn record_conversion(&mut self, conversion: ConversionEvent) -> Result<()> {
        self.store.append(Event::Conversion(conversion))
    }

    /// Per-epoch domain cap and matching. Epochs failing the cap are marked
    /// and excluded; the conversion site is recorded for the rest.
    pub(crate) fn gate_and_match(
        &mut self,
        request: &ReportRequest,
        statuses: &mut BTreeMap<EpochId, EpochStatus>,
    ) -> EpochMatches {
        let mut matched = EpochMatches::new();
        for epoch in request.epochs() {
            if self.variant.enforces_cap() {
                if !self.ua.quota_count_check(request.ua_ctx, epoch, &request.conv_site, self.config.kappa_action) {
                    statuses.insert(epoch, EpochStatus::Nulled(NullCause::DomainCap));
                    continue;
                }
                self.ua.record(request.ua_ctx, epoch, &request.conv_site);
            }
            let imps = match_impressions(&self.store, request, epoch);
            if imps.is_empty() {
                statuses.insert(epoch, EpochStatus::Nulled(NullCause::NoMatch));
            } else {
                matched.insert(epoch, imps);
            }
        }
        matched
    }

    pub fn measure_conversion(&mut self, request: &ReportRequest) -> Result<Report> {
        request.validate()?;
        self.report_ua.insert(request.report_id, request.ua_ctx);
        let mut statuses = BTreeMap::new();
        let mut matched = self.gate_and_match(request, &mut statuses);
        let outcome = attribute(&matched, request);
        let mut losses = BTreeMap::new();

        for epoch in outcome.per_epoch.keys().copied().collect::<Vec<_>>() {
            let loss = epoch_budget(&outcome, request, epoch);
            let per_site = per_site_budgets(&outcome, request, epoch, self.imp_mode);
            let charges = self.variant.charges(&request.querier, &request.conv_site, loss, &per_site);
            let fs = self.registry.get_or_init_filterset(&request.device, epoch, &self.config);
            let ctx = TxnContext { device: &request.device, epoch, report_id: request.report_id };
            let status = match atomic_check_and_consume(fs, &self.config, &charges, ctx, &mut self.ledger) {
                Ok(()) => EpochStatus::Committed,
                Err(kind) => EpochStatus::Nulled(null_cause_of(&kind)),
            };
            statuses.insert(epoch, status);
            losses.insert(epoch, loss);
        }

        matched.retain(|e, _| statuses.get(e) == Some(&EpochStatus::Committed));
        let final_outcome = attribute(&matched, request);
        let report = build_histogram(&final_outcome, request, &statuses);
        for (epoch, status) in &report.per_epoch_status {
            self.log.push(ReportLogRecord {
                report_id: request.report_id,
                device: request.device.clone(),
                epoch: *epoch,
                status: *status,
                epoch_loss: losses.get(epoch).copied().unwrap_or_default(),
            });
        }
        Ok(report)
    }
}
