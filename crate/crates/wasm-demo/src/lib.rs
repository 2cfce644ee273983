//! Browser demo: three operations exposed to `www/index.html` as JSON-returning
//! functions. The plain-Rust versions are tested natively; the
//! `#[wasm_bindgen]` wrappers only convert errors.

use std::collections::BTreeSet;

use budgetguard::counterexamples::{adaptive_data_closed_form, adaptive_data_simulate, CxParams};
use budgetguard::event::DEFAULT_EPOCH_LENGTH as DAY;
use budgetguard::rng::{substream, Stream};
use budgetguard::sim::{replay_store, ReplaySpec};
use budgetguard::{
    derive_capacities, ConversionEvent, EngineVariant, EpochStatus, Epsilon, Event, EventStore, ImpSiteBudgetMode,
    ImpressionEvent, QuotaConfig, UaCtxId, WorkloadParams,
};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn eps(name: &str, x: f64) -> Result<Epsilon, String> {
    Epsilon::try_from_eps(x).map_err(|e| format!("{name}: {e}"))
}

/// Capacities derived from per-device-epoch workload bounds.
pub fn derive(
    eps_querier: f64,
    conv_sites: u32,
    imp_sites: u32,
    conv_per_imp_site: u32,
    kappa: u32,
    intermediary_fraction: f64,
) -> Result<Value, String> {
    let mut params = WorkloadParams::new(conv_sites, imp_sites, conv_per_imp_site);
    params.intermediary_fraction = intermediary_fraction;
    let c = derive_capacities(eps("eps_querier", eps_querier)?, &params, kappa).map_err(|e| e.to_string())?;
    Ok(json!({
        "eps_querier": c.eps_querier.as_eps(),
        "eps_global": c.eps_global.as_eps(),
        "eps_imp": c.eps_imp_quota.as_eps(),
        "eps_conv": c.eps_conv_quota.as_eps(),
        "kappa": c.kappa_action,
    }))
}

/// The two-report walkthrough: impressions from news.ex (epoch 1) and
/// blog.ex (epoch 2), then `conversions` purchases on shoes.ex in epoch 3,
/// each measured by shoes.ex and adtech.ex. Returns every filter's state and
/// each report's per-epoch outcome.
pub fn two_reports(
    config: QuotaConfig,
    eps_per_query: f64,
    value: f64,
    max_value: f64,
    conversions: u32,
) -> Result<Value, String> {
    if conversions == 0 || conversions > 100 {
        return Err("conversions must be between 1 and 100".into());
    }
    let mut store = EventStore::new(DAY);
    for (ua, epoch, site, bucket) in [(0, 1, "news.ex", 0), (1, 2, "blog.ex", 1)] {
        let imp = ImpressionEvent {
            device: "device".into(),
            epoch,
            ua_ctx: UaCtxId(ua),
            site: site.into(),
            ad_key: "shoes".into(),
            bucket,
            timestamp: epoch as u64 * DAY + 10,
        };
        store.append(Event::Impression(imp)).map_err(|e| e.to_string())?;
    }
    let queriers: BTreeSet<String> = ["shoes.ex".to_string(), "adtech.ex".to_string()].into();
    for i in 0..conversions {
        let conv = ConversionEvent {
            device: "device".into(),
            epoch: 3,
            ua_ctx: UaCtxId(2 + i as u64),
            conv_site: "shoes.ex".into(),
            queriers: queriers.clone(),
            value,
            max_value,
            ad_key: "shoes".into(),
            timestamp: 3 * DAY + 10 + i as u64,
        };
        store.append(Event::Conversion(conv)).map_err(|e| e.to_string())?;
    }
    let spec = ReplaySpec { eps_per_query, window: 3, histogram_dim: 5, batch_size: 1, tau: 0.05 };
    let out = replay_store("demo", &store, config, EngineVariant::Full, ImpSiteBudgetMode::default(), &spec, 0)
        .map_err(|e| e.to_string())?;
    let filters: Vec<Value> = out
        .engine
        .registry()
        .iter()
        .flat_map(|(device, epoch, fs)| {
            fs.entries()
                .map(|(kind, f)| {
                    json!({
                        "device": device,
                        "epoch": epoch,
                        "kind": kind.label(),
                        "key": kind.key(),
                        "capacity": f.capacity().as_eps(),
                        "consumed": f.consumed().as_eps(),
                        "remaining": f.remaining().as_eps(),
                    })
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let reports: Vec<Value> = out
        .engine
        .report_log()
        .iter()
        .map(|r| {
            let (status, cause) = match r.status {
                EpochStatus::Committed => ("committed", ""),
                EpochStatus::Nulled(c) => ("nulled", c.label()),
            };
            json!({ "report": r.report_id.to_string(), "epoch": r.epoch, "status": status, "cause": cause, "loss": r.epoch_loss.as_eps() })
        })
        .collect();
    Ok(json!({ "filters": filters, "reports": reports }))
}

/// Monte Carlo estimate of the adaptive-data construction's privacy loss
/// next to its closed form and the per-querier budget it nominally obeys.
pub fn adaptive_data(eps_querier: f64, helpers: u32, trials: u64, seed: u64) -> Result<Value, String> {
    if helpers > 200 || trials > 2_000_000 {
        return Err("at most 200 helpers and 2,000,000 trials".into());
    }
    let est = adaptive_data_simulate(
        &CxParams::new(eps_querier, helpers, trials),
        &mut substream(seed, Stream::Counterexample),
    )
    .map_err(|e| e.to_string())?;
    Ok(json!({
        "estimate": est.log_ratio,
        "stderr": est.stderr,
        "closed_form": adaptive_data_closed_form(eps_querier, helpers).log_ratio,
        "per_querier_budget": eps_querier,
        "max_querier_spend": est.max_querier_spend.as_eps(),
    }))
}

fn to_js(r: Result<Value, String>) -> Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = deriveQuotas)]
pub fn derive_quotas(
    eps_querier: f64,
    conv_sites: u32,
    imp_sites: u32,
    conv_per_imp_site: u32,
    kappa: u32,
    intermediary_fraction: f64,
) -> Result<String, JsValue> {
    to_js(derive(eps_querier, conv_sites, imp_sites, conv_per_imp_site, kappa, intermediary_fraction))
}

#[wasm_bindgen(js_name = twoReports)]
#[allow(clippy::too_many_arguments)]
pub fn two_reports_js(
    eps_querier: f64,
    eps_global: f64,
    eps_imp: f64,
    eps_conv: f64,
    eps_per_query: f64,
    value: f64,
    max_value: f64,
    conversions: u32,
) -> Result<String, JsValue> {
    let config = (|| {
        Ok::<_, String>(QuotaConfig {
            eps_querier: eps("eps_querier", eps_querier)?,
            eps_global: eps("eps_global", eps_global)?,
            eps_imp_quota: eps("eps_imp", eps_imp)?,
            eps_conv_quota: eps("eps_conv", eps_conv)?,
            kappa_action: 2,
        })
    })();
    to_js(config.and_then(|c| two_reports(c, eps_per_query, value, max_value, conversions)))
}

#[wasm_bindgen(js_name = adaptiveData)]
pub fn adaptive_data_js(eps_querier: f64, helpers: u32, trials: u32, seed: u32) -> Result<String, JsValue> {
    to_js(adaptive_data(eps_querier, helpers, trials as u64, seed as u64))
}
