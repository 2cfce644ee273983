//! A rejected design kept as a negative test fixture: a per-action privacy
//! cap tracked as one accumulator across all epochs. When a report would push
//! the accumulator past the cap, the *whole* report is nulled, so the outcome
//! of one epoch depends on data in the others. The shipped engine keeps its
//! per-action limit per epoch and does not have this coupling.

use std::collections::{BTreeMap, HashMap};

use crate::accounting::{
    attribute, epoch_budget, match_impressions, EpochMatches, EpochStatus, NullCause, Report, ReportRequest,
};
use crate::error::Result;
use crate::event::UaCtxId;
use crate::filters::Epsilon;

use super::Engine;

#[derive(Debug, Clone)]
pub struct CrossEpochCapEngine {
    inner: Engine,
    action_cap: Epsilon,
    consumed: HashMap<UaCtxId, Epsilon>,
}

impl CrossEpochCapEngine {
    pub fn new(inner: Engine, action_cap: Epsilon) -> Self {
        CrossEpochCapEngine { inner, action_cap, consumed: HashMap::new() }
    }

    pub fn inner(&self) -> &Engine {
        &self.inner
    }

    pub fn inner_mut(&mut self) -> &mut Engine {
        &mut self.inner
    }

    pub fn measure_conversion(&mut self, request: &ReportRequest) -> Result<Report> {
        request.validate()?;
        let matched: EpochMatches = request
            .epochs()
            .map(|e| (e, match_impressions(self.inner.store(), request, e)))
            .filter(|(_, v)| !v.is_empty())
            .collect();
        let outcome = attribute(&matched, request);
        let total: Epsilon = request.epochs().map(|e| epoch_budget(&outcome, request, e)).sum();
        let used = self.consumed.entry(request.ua_ctx).or_default();
        if (*used + total) > self.action_cap {
            let statuses: BTreeMap<_, _> =
                request.epochs().map(|e| (e, EpochStatus::Nulled(NullCause::DomainCap))).collect();
            return Ok(Report { histogram: vec![0.0; request.histogram_dim], per_epoch_status: statuses });
        }
        *used += total;
        self.inner.measure_conversion(request)
    }
}
