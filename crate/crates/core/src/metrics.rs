//! Noisy aggregation of report batches, relative error, null-cause
//! breakdowns, and audits of the deduction ledger.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::accounting::{EpochStatus, NullCause, Report, ReportId};
use crate::engine::{LedgerEntry, ReportLogRecord};
use crate::error::{Error, Result};
use crate::event::{DeviceId, EpochId, SiteId};
use crate::filters::{Epsilon, FilterKind};
use crate::quotas::QuotaConfig;
use crate::rng::laplace;

/// Bucketwise sum of the reports plus independent Laplace(λ) noise per bucket.
pub fn aggregate_and_noise<R: Rng + ?Sized>(
    reports: &[Report],
    dim: usize,
    lambda: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParams(format!("noise scale must be positive, got {lambda}")));
    }
    let mut sum = vec![0.0; dim];
    for r in reports {
        if r.histogram.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: r.histogram.len() });
        }
        for (s, v) in sum.iter_mut().zip(&r.histogram) {
            *s += v;
        }
    }
    for s in sum.iter_mut() {
        *s += laplace(rng, lambda);
    }
    Ok(sum)
}

/// Root mean squared relative error with denominators clipped below at
/// `tau · batch_size`.
pub fn rmsre_tau(truth: &[f64], estimate: &[f64], tau: f64, batch_size: usize) -> f64 {
    assert_eq!(truth.len(), estimate.len(), "histogram dimensions differ");
    assert!(batch_size > 0, "batch size must be positive");
    let floor = tau * batch_size as f64;
    let sq: f64 = truth
        .iter()
        .zip(estimate)
        .map(|(t, e)| {
            let rel = (e - t) / t.max(floor);
            rel * rel
        })
        .sum();
    (sq / truth.len() as f64).sqrt()
}

/// Expected RMSRE of a Laplace(λ)-noised histogram with no bias.
pub fn expected_noise_rmsre(truth: &[f64], lambda: f64, tau: f64, batch_size: usize) -> f64 {
    let floor = tau * batch_size as f64;
    let mean_inv_sq = truth.iter().map(|t| t.max(floor).powi(-2)).sum::<f64>() / truth.len() as f64;
    // E[X²] = 2λ² for X ~ Laplace(λ)
    (2.0 * lambda * lambda * mean_inv_sq).sqrt()
}

/// One aggregate query's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub querier: SiteId,
    pub true_histogram: Vec<f64>,
    pub noisy_estimate: Vec<f64>,
    pub batch_size: usize,
    pub tau: f64,
    pub rmsre: f64,
    pub cause_counts: BTreeMap<String, u64>,
}

/// Label used for committed epochs in cause tables.
pub const COMMITTED: &str = "committed";

fn status_label(s: &EpochStatus) -> &'static str {
    match s {
        EpochStatus::Committed => COMMITTED,
        EpochStatus::Nulled(c) => c.label(),
    }
}

pub fn cause_counts<'a>(log: impl IntoIterator<Item = &'a ReportLogRecord>) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for r in log {
        *counts.entry(status_label(&r.status).to_owned()).or_insert(0) += 1;
    }
    counts
}

/// Fraction of (report, epoch) attempts per outcome. Every cause appears,
/// with zero if absent, so tables line up across runs.
pub fn cause_breakdown<'a>(log: impl IntoIterator<Item = &'a ReportLogRecord>) -> BTreeMap<String, f64> {
    let counts = cause_counts(log);
    let total: u64 = counts.values().sum();
    let mut out: BTreeMap<String, f64> = std::iter::once(COMMITTED)
        .chain(NullCause::ALL.iter().map(|c| c.label()))
        .map(|l| (l.to_owned(), 0.0))
        .collect();
    if total > 0 {
        for (k, v) in counts {
            out.insert(k, v as f64 / total as f64);
        }
    }
    out
}

/// Nearest-rank percentile of a sample (p in (0, 100]).
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Some(v[rank.min(v.len()) - 1])
}

pub fn median(values: &[f64]) -> Option<f64> {
    percentile(values, 50.0)
}

/// Who the adversary is, for the resilience checks of [`ledger_audit`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdversaryView {
    pub reports: HashSet<ReportId>,
    /// Adversarial user actions per device.
    pub actions: BTreeMap<DeviceId, u64>,
    /// Intermediary fraction r the quotas were derived with.
    pub intermediary_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationKind {
    /// Global deductions exceed the global capacity.
    GlobalCapacity,
    /// Adversarial global use exceeds min(M·ε_imp, N·ε_conv).
    QuotaBound,
    /// Adversarial global use exceeds (1+r)·ε_querier·κ·U.
    ActionBound,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub device: DeviceId,
    pub epoch: EpochId,
    pub kind: ViolationKind,
    pub observed: Epsilon,
    pub bound: Epsilon,
}

#[derive(Default)]
struct DeviceEpochTally {
    global: Epsilon,
    adv_global: Epsilon,
    adv_imp_keys: BTreeSet<String>,
    adv_conv_keys: BTreeSet<String>,
}

/// Check the ledger against the global capacity and, when `adversary` is
/// given, against the resilience bounds. An empty result means no violation.
pub fn ledger_audit(ledger: &[LedgerEntry], config: &QuotaConfig, adversary: Option<&AdversaryView>) -> Vec<Violation> {
    let mut tallies: BTreeMap<(&str, EpochId), DeviceEpochTally> = BTreeMap::new();
    for l in ledger.iter().filter(|l| l.committed) {
        let t = tallies.entry((l.device.as_str(), l.epoch)).or_default();
        let adversarial = adversary.is_some_and(|a| a.reports.contains(&l.report_id));
        match &l.kind {
            FilterKind::Global => {
                t.global += l.amount;
                if adversarial {
                    t.adv_global += l.amount;
                }
            }
            FilterKind::ImpQuota(s) if adversarial && !l.amount.is_zero() => {
                t.adv_imp_keys.insert(s.clone());
            }
            FilterKind::ConvQuota(s) if adversarial && !l.amount.is_zero() => {
                t.adv_conv_keys.insert(s.clone());
            }
            _ => {}
        }
    }
    let mut out = Vec::new();
    for ((device, epoch), t) in tallies {
        let mut flag = |kind, observed, bound| {
            if observed > bound {
                out.push(Violation { device: device.to_owned(), epoch, kind, observed, bound });
            }
        };
        flag(ViolationKind::GlobalCapacity, t.global, config.eps_global);
        if let Some(a) = adversary {
            let m = t.adv_imp_keys.len() as u64;
            let n = t.adv_conv_keys.len() as u64;
            let quota_bound = std::cmp::min(config.eps_imp_quota * m, config.eps_conv_quota * n);
            flag(ViolationKind::QuotaBound, t.adv_global, quota_bound);
            let u = a.actions.get(device).copied().unwrap_or(0);
            let action_bound =
                config.eps_querier.scale(1.0 + a.intermediary_fraction) * (config.kappa_action as u64 * u);
            flag(ViolationKind::ActionBound, t.adv_global, action_bound);
        }
    }
    out
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario: String,
    pub config_hash: String,
    pub seed: u64,
    pub median_rmsre: f64,
    pub p95_rmsre: f64,
    pub cause: String,
    pub fraction: f64,
}

pub const METRICS_HEADER: [&str; 7] =
    ["scenario", "config_hash", "seed", "median_rmsre", "p95_rmsre", "cause", "fraction"];

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(METRICS_HEADER).map_err(io)?;
    for r in rows {
        w.write_record([
            r.scenario.as_str(),
            &r.config_hash,
            &r.seed.to_string(),
            &format!("{:.6}", r.median_rmsre),
            &format!("{:.6}", r.p95_rmsre),
            &r.cause,
            &format!("{:.6}", r.fraction),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-run summary record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub seed: u64,
    pub queries: usize,
    pub median_rmsre: Option<f64>,
    pub p95_rmsre: Option<f64>,
    pub causes: BTreeMap<String, f64>,
    pub adversarial_global_microeps: u64,
    pub violations: usize,
}

impl RunSummary {
    pub fn metrics_rows(&self, config_hash: &str) -> Vec<MetricsRow> {
        self.causes
            .iter()
            .map(|(cause, fraction)| MetricsRow {
                scenario: self.scenario.clone(),
                config_hash: config_hash.to_owned(),
                seed: self.seed,
                median_rmsre: self.median_rmsre.unwrap_or(f64::NAN),
                p95_rmsre: self.p95_rmsre.unwrap_or(f64::NAN),
                cause: cause.clone(),
                fraction: *fraction,
            })
            .collect()
    }
}
