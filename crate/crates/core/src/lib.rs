//! Per-device, per-epoch individual-DP budget management with
//! denial-of-service resilient quotas, and a harness to exercise it.
//!
//! The pieces, bottom-up:
//!
//! * [`event`] — identifiers, events, epochs, the append-only store, CSV ingest.
//! * [`filters`] — exact micro-ε filters and the per-device-epoch registry.
//! * [`quotas`] — quota capacities and their derivation from workload bounds.
//! * [`accounting`] — per-epoch and per-site privacy loss, attribution.
//! * [`engine`] — impression storage, conversion measurement, atomic charging.
//! * [`crossreport`] — paying shared budgets once for several reports of one conversion.
//! * [`workload`], [`sim`] — synthetic benign traffic, attackers, scenario runs.
//! * [`metrics`] — noisy aggregation, RMSRE, cause breakdown, ledger audits.
//! * [`verify`] — randomized atomicity and resilience suites for a configuration.
//! * [`counterexamples`] — simulations showing per-querier accounting is unsound.

pub mod accounting;
pub mod counterexamples;
pub mod crossreport;
pub mod engine;
pub mod error;
pub mod event;
pub mod filters;
pub mod metrics;
pub mod quotas;
pub mod rng;
pub mod sim;
pub mod verify;
pub mod workload;

pub use accounting::{
    AttributionPolicy, EpochStatus, ImpSiteBudgetMode, MatchRule, NullCause, Report, ReportId, ReportRequest,
};
pub use engine::{Engine, EngineVariant, LedgerEntry, SaveOutcome};
pub use error::{Error, Result};
pub use event::{ConversionEvent, DeviceId, EpochId, Event, EventStore, ImpressionEvent, SiteId, UaCtxId};
pub use filters::{Epsilon, Filter, FilterKind, FilterRegistry, FilterSet};
pub use quotas::{derive_capacities, QuotaConfig, WorkloadParams};
