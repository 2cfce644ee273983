//! Several reports on one conversion (advertiser plus intermediaries) pay the
//! shared budgets once. The first call freezes the matched impressions into an
//! attribution object and charges global and quota filters 2·a_max/λ per
//! relevant epoch; each later report pays only its own querier filter and is
//! served a histogram over a support disjoint from every earlier one.

use std::collections::{BTreeMap, BTreeSet};

use crate::accounting::{
    attribute, AttributionOutcome, AttributionPolicy, EpochStatus, ImpSiteBudgetMode, NullCause, Report, ReportId,
    ReportRequest,
};
use crate::engine::{atomic_check_and_consume, null_cause_of, Engine, EngineVariant, ReportLogRecord, TxnContext};
use crate::error::{Error, Result};
use crate::event::{DeviceId, EpochId, ImpressionKey, SiteId};
use crate::filters::{Epsilon, FilterKind};

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionObject {
    pub report_id: ReportId,
    pub device: DeviceId,
    pub policy: AttributionPolicy,
    /// λ = maxValue / ε of the creating request.
    pub noise_scale: f64,
    pub histogram_dim: usize,
    /// Charge applied to each shared filter per relevant epoch.
    pub shared_charge: Epsilon,
    /// Attribution over the impressions that survived the shared charge.
    pub frozen: AttributionOutcome,
    pub shared_status: BTreeMap<EpochId, EpochStatus>,
    pub consumed_support: BTreeSet<ImpressionKey>,
    /// Supports of every report served so far, in order.
    pub served: Vec<BTreeSet<ImpressionKey>>,
}

impl AttributionObject {
    pub fn frozen_keys(&self) -> impl Iterator<Item = &ImpressionKey> {
        self.frozen.per_epoch.values().flatten().map(|a| &a.imp.key)
    }
}

/// Shared-filter charges for one epoch, in check order (no querier filter).
fn shared_charges(
    variant: EngineVariant,
    conv_site: &str,
    charge: Epsilon,
    sites: &BTreeSet<&SiteId>,
    mode: ImpSiteBudgetMode,
) -> Vec<(FilterKind, Epsilon)> {
    let per_site: BTreeMap<SiteId, Epsilon> = sites
        .iter()
        .map(|s| {
            let share = match mode {
                ImpSiteBudgetMode::UniformHeuristic => charge.div_ceil(sites.len() as u64),
                ImpSiteBudgetMode::TwoDeltaBound => charge,
            };
            ((*s).clone(), share)
        })
        .collect();
    let mut all = variant.charges("", conv_site, charge, &per_site);
    all.remove(0);
    all
}

fn same_scale(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

#[derive(Debug, Clone, Default)]
pub struct CrossReportManager {
    objects: BTreeMap<ReportId, AttributionObject>,
}

impl CrossReportManager {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn object(&self, id: ReportId) -> Option<&AttributionObject> {
        self.objects.get(&id)
    }

    pub fn measure_conversion_shared(
        &mut self,
        engine: &mut Engine,
        request: &ReportRequest,
    ) -> Result<&AttributionObject> {
        request.validate()?;
        if self.objects.contains_key(&request.report_id) {
            return Err(Error::DuplicateObject(request.report_id.to_string()));
        }
        let mut statuses = BTreeMap::new();
        let mut matched = engine.gate_and_match(request, &mut statuses);
        let initial = attribute(&matched, request);
        // 2·a_max/λ with a_max = value and λ = maxValue/ε; doubling the
        // rounded single-report loss keeps it exactly twice the baseline charge
        let charge = request.requested_epsilon.scale(initial.a_max / request.max_value) * 2;
        let config = engine.config;
        for epoch in initial.per_epoch.keys().copied().collect::<Vec<_>>() {
            let sites = initial.contributing_sites(epoch);
            let charges = shared_charges(engine.variant, &request.conv_site, charge, &sites, engine.imp_mode);
            let fs = engine.registry.get_or_init_filterset(&request.device, epoch, &config);
            let ctx = TxnContext { device: &request.device, epoch, report_id: request.report_id };
            let status = match atomic_check_and_consume(fs, &config, &charges, ctx, &mut engine.ledger) {
                Ok(()) => EpochStatus::Committed,
                Err(kind) => EpochStatus::Nulled(null_cause_of(&kind)),
            };
            statuses.insert(epoch, status);
        }
        for (epoch, status) in &statuses {
            let relevant = initial.is_relevant(*epoch);
            engine.log.push(ReportLogRecord {
                report_id: request.report_id,
                device: request.device.clone(),
                epoch: *epoch,
                status: *status,
                epoch_loss: if relevant { charge } else { Epsilon::ZERO },
            });
        }
        matched.retain(|e, _| statuses.get(e) == Some(&EpochStatus::Committed));
        let frozen = attribute(&matched, request);
        let obj = AttributionObject {
            report_id: request.report_id,
            device: request.device.clone(),
            policy: request.policy,
            noise_scale: request.noise_scale(),
            histogram_dim: request.histogram_dim,
            shared_charge: charge,
            frozen,
            shared_status: statuses,
            consumed_support: BTreeSet::new(),
            served: Vec::new(),
        };
        Ok(self.objects.entry(request.report_id).or_insert(obj))
    }

    /// Serve one querier's report on the object created for `object_id`.
    /// Inconsistent requests get a null report and change nothing.
    pub fn get_report(
        &mut self,
        engine: &mut Engine,
        object_id: ReportId,
        request: &ReportRequest,
        support: &BTreeSet<ImpressionKey>,
    ) -> Result<Report> {
        request.validate()?;
        let obj = self.objects.get_mut(&object_id).ok_or_else(|| Error::UnknownObject(object_id.to_string()))?;
        let consistent = obj.consumed_support.is_disjoint(support)
            && same_scale(obj.noise_scale, request.noise_scale())
            && obj.policy == request.policy
            && obj.histogram_dim == request.histogram_dim
            && obj.device == request.device;
        if !consistent {
            return Ok(Report::null(request.histogram_dim));
        }

        let loss = request.requested_epsilon.scale(request.value / request.max_value);
        let config = engine.config;
        let mut statuses = BTreeMap::new();
        let mut histogram = vec![0.0; request.histogram_dim];
        for (epoch, status) in &obj.shared_status {
            if *status != EpochStatus::Committed {
                statuses.insert(*epoch, *status);
                continue;
            }
            let in_support: Vec<_> =
                obj.frozen.per_epoch[epoch].iter().filter(|a| support.contains(&a.imp.key)).collect();
            if in_support.is_empty() {
                statuses.insert(*epoch, EpochStatus::Nulled(NullCause::NoMatch));
                continue;
            }
            let fs = engine.registry.get_or_init_filterset(&request.device, *epoch, &config);
            let ctx = TxnContext { device: &request.device, epoch: *epoch, report_id: request.report_id };
            let charges = [(FilterKind::Querier(request.querier.clone()), loss)];
            let st = match atomic_check_and_consume(fs, &config, &charges, ctx, &mut engine.ledger) {
                Ok(()) => {
                    for a in in_support {
                        histogram[a.imp.bucket] += a.value;
                    }
                    EpochStatus::Committed
                }
                Err(kind) => EpochStatus::Nulled(null_cause_of(&kind)),
            };
            statuses.insert(*epoch, st);
            engine.log.push(ReportLogRecord {
                report_id: request.report_id,
                device: request.device.clone(),
                epoch: *epoch,
                status: st,
                epoch_loss: loss,
            });
        }
        obj.consumed_support.extend(support.iter().cloned());
        obj.served.push(support.clone());
        Ok(Report { histogram, per_epoch_status: statuses })
    }
}
