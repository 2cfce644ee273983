//! Subcommand implementations. Each returns what it would print so the
//! binary stays a thin argument parser.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use budgetguard::counterexamples::{
    adaptive_data_closed_form, adaptive_data_simulate, shared_limit_lower_bound, shared_limit_simulate, CxParams,
    Variant,
};
use budgetguard::engine::{write_ledger, write_report_log};
use budgetguard::metrics::{write_metrics_csv, RunSummary};
use budgetguard::quotas::estimate_workload_params;
use budgetguard::rng::{substream, Stream};
use budgetguard::sim::{replay_store, replay_with, RunOutput, Scenario};
use budgetguard::verify::{atomicity_fuzz, audit_scenario, resilience_fuzz, SuiteReport};
use budgetguard::{derive_capacities, Engine, Epsilon, Event, EventStore, FilterRegistry, QuotaConfig, UaCtxId};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ScenarioConfig;
use crate::error::CliError;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| io_err(path, e))
}

/// First 12 hex digits of the SHA-256 of `value`'s JSON form.
pub fn short_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("configuration types serialize");
    Sha256::digest(&json).iter().take(6).map(|b| format!("{b:02x}")).collect()
}

/// Hash of a resolved scenario, independent of its seed.
pub fn config_hash(scenario: &Scenario) -> String {
    short_hash(&Scenario { seed: 0, ..scenario.clone() })
}

/// Load an event CSV, reporting the row count on stderr (a warning when
/// the file holds no events).
pub fn load_events(path: &Path, epoch_length: u64) -> Result<EventStore, CliError> {
    let (store, rows) = EventStore::from_csv(open(path)?, epoch_length).map_err(|e| io_err(path, e))?;
    if rows == 0 {
        eprintln!("warning: {} contains no events", path.display());
    } else {
        eprintln!("read {rows} event(s) from {}", path.display());
    }
    Ok(store)
}

/// Write metrics.csv, report_log.csv, ledger.csv and snapshot.csv into `dir`.
pub fn write_run(dir: &Path, out: &RunOutput, hash: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_metrics_csv(&out.summary.metrics_rows(hash), create(&dir.join("metrics.csv"))?)?;
    write_report_log(out.engine.report_log(), create(&dir.join("report_log.csv"))?)?;
    write_ledger(out.engine.ledger(), create(&dir.join("ledger.csv"))?)?;
    out.engine.registry().write_snapshot(create(&dir.join("snapshot.csv"))?)?;
    Ok(())
}

fn violations_error(runs: &[(u64, usize)]) -> Result<(), CliError> {
    let bad: Vec<String> =
        runs.iter().filter(|(_, v)| *v > 0).map(|(s, v)| format!("seed {s}: {v} violation(s)")).collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(CliError::Audit(bad.join("; ")))
    }
}

fn summary_line(s: &RunSummary, hash: &str) -> String {
    let fmt = |x: Option<f64>| x.map_or("n/a".to_owned(), |v| format!("{v:.4}"));
    format!(
        "{} seed={} config={hash} queries={} median_rmsre={} p95_rmsre={} adversarial_global={} violations={}",
        s.scenario,
        s.seed,
        s.queries,
        fmt(s.median_rmsre),
        fmt(s.p95_rmsre),
        Epsilon::from_micro(s.adversarial_global_microeps),
        s.violations
    )
}

/// Run every configured seed; one output directory per seed when there are
/// several. Outputs are written even when the audit fails.
pub fn simulate(cfg: &ScenarioConfig, out_dir: &Path, env_seed: Option<&str>) -> Result<String, CliError> {
    let seeds = cfg.seeds(env_seed)?;
    let scenarios = cfg.scenarios(&seeds)?;
    let mut lines = Vec::new();
    let mut audits = Vec::new();
    for s in &scenarios {
        let out = budgetguard::sim::run_scenario(s)?;
        let hash = config_hash(s);
        let dir = if scenarios.len() == 1 { out_dir.to_path_buf() } else { out_dir.join(format!("seed-{}", s.seed)) };
        write_run(&dir, &out, &hash)?;
        lines.push(summary_line(&out.summary, &hash));
        audits.push((s.seed, out.violations.len()));
    }
    violations_error(&audits)?;
    Ok(lines.join("\n"))
}

#[derive(Serialize)]
struct ReplayIdentity<'a> {
    name: &'a str,
    config: QuotaConfig,
    variant: &'a str,
    imp_mode: &'a str,
    replay: budgetguard::sim::ReplaySpec,
}

fn replay_hash(cfg: &ScenarioConfig, config: QuotaConfig) -> String {
    short_hash(&ReplayIdentity {
        name: &cfg.name,
        config,
        variant: &cfg.variant,
        imp_mode: &cfg.imp_mode,
        replay: cfg.replay_spec(),
    })
}

fn first_seed(cfg: &ScenarioConfig, env_seed: Option<&str>) -> Result<u64, CliError> {
    Ok(cfg.seeds(env_seed)?[0])
}

/// Feed a recorded event log through the engine.
pub fn replay(events: &Path, cfg: &ScenarioConfig, out_dir: &Path, env_seed: Option<&str>) -> Result<String, CliError> {
    let store = load_events(events, cfg.epoch_length)?;
    let config = cfg.quota_config(Some(&store))?;
    let seed = first_seed(cfg, env_seed)?;
    let out =
        replay_store(&cfg.name, &store, config, cfg.engine_variant()?, cfg.budget_mode()?, &cfg.replay_spec(), seed)?;
    let hash = replay_hash(cfg, config);
    write_run(out_dir, &out, &hash)?;
    violations_error(&[(seed, out.violations.len())])?;
    Ok(summary_line(&out.summary, &hash))
}

/// Replay a log and write only the resulting filter snapshot.
pub fn snapshot(
    events: &Path,
    cfg: &ScenarioConfig,
    out_file: &Path,
    env_seed: Option<&str>,
) -> Result<String, CliError> {
    let store = load_events(events, cfg.epoch_length)?;
    let config = cfg.quota_config(Some(&store))?;
    let seed = first_seed(cfg, env_seed)?;
    let out =
        replay_store(&cfg.name, &store, config, cfg.engine_variant()?, cfg.budget_mode()?, &cfg.replay_spec(), seed)?;
    if let Some(parent) = out_file.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    out.engine.registry().write_snapshot(create(out_file)?)?;
    Ok(format!("wrote {} filter set(s) to {}", out.engine.registry().len(), out_file.display()))
}

/// Shift every uaCtx in `store` by `offset` so ids interned from a second
/// file cannot collide with the history's.
fn shift_ua(store: &EventStore, offset: u64) -> Result<EventStore, CliError> {
    let mut shifted = EventStore::new(store.epoch_length());
    for ev in store.events_by_time() {
        let mut ev = ev.clone();
        match &mut ev {
            Event::Impression(i) => i.ua_ctx = UaCtxId(i.ua_ctx.0 + offset),
            Event::Conversion(c) => c.ua_ctx = UaCtxId(c.ua_ctx.0 + offset),
        }
        shifted.append(ev)?;
    }
    Ok(shifted)
}

/// Resume from a snapshot: the filters come from `snapshot`, the optional
/// `history` log (the events behind the snapshot) is stored without issuing
/// reports so later conversions can still attribute to it, and `events` is
/// replayed on top.
pub fn restore(
    snapshot: &Path,
    events: &Path,
    history: Option<&Path>,
    cfg: &ScenarioConfig,
    out_dir: &Path,
    env_seed: Option<&str>,
) -> Result<String, CliError> {
    let registry = FilterRegistry::read_snapshot(open(snapshot)?).map_err(|e| io_err(snapshot, e))?;
    let new_events = load_events(events, cfg.epoch_length)?;
    let history = history.map(|h| load_events(h, cfg.epoch_length)).transpose()?;
    let config = cfg.quota_config(Some(history.as_ref().unwrap_or(&new_events)))?;
    let mut engine = Engine::with_store(config, cfg.engine_variant()?, EventStore::new(cfg.epoch_length))
        .with_imp_mode(cfg.budget_mode()?)
        .with_registry(registry);
    let mut offset = 0;
    if let Some(h) = &history {
        for ev in h.events_by_time() {
            match ev {
                Event::Impression(i) => {
                    engine.save_impression(&i.device, i.ua_ctx, i.clone())?;
                }
                Event::Conversion(c) => engine.record_conversion(c.clone())?,
            }
        }
        offset = h.max_ua_ctx().map_or(0, |m| m + 1);
    }
    let store = shift_ua(&new_events, offset)?;
    let seed = first_seed(cfg, env_seed)?;
    let out = replay_with(engine, &cfg.name, &store, &cfg.replay_spec(), seed)?;
    let hash = replay_hash(cfg, config);
    write_run(out_dir, &out, &hash)?;
    violations_error(&[(seed, out.violations.len())])?;
    Ok(summary_line(&out.summary, &hash))
}

/// Sizes of the randomized suites run by [`verify_bounds`].
#[derive(Debug, Clone, Copy)]
pub struct VerifySizes {
    pub traces: u64,
    pub runs: u64,
}

fn suite_line(name: &str, r: &SuiteReport) -> String {
    let verdict = if r.passed() { "PASS" } else { "FAIL" };
    let mut line = format!("{verdict} {name}: {} case(s), {} failure(s)", r.cases, r.failures.len());
    for f in r.failures.iter().take(5) {
        line.push_str(&format!("\n  {f}"));
    }
    line
}

/// Atomicity fuzzing on the configured quotas, the ledger audit of the
/// configured scenario, and randomized resilience runs.
pub fn verify_bounds(cfg: &ScenarioConfig, sizes: VerifySizes, env_seed: Option<&str>) -> Result<String, CliError> {
    let seed = first_seed(cfg, env_seed)?;
    let scenario = cfg.scenarios(&[seed])?.remove(0);
    let atomic = atomicity_fuzz(&scenario.config, sizes.traces, seed)?;
    let (audit, _) = audit_scenario(&scenario)?;
    let resilience = resilience_fuzz(&scenario, sizes.runs, seed)?;
    let text = [suite_line("atomicity", &atomic), suite_line("audit", &audit), suite_line("resilience", &resilience)]
        .join("\n");
    if atomic.passed() && audit.passed() && resilience.passed() {
        Ok(text)
    } else {
        Err(CliError::Audit(text))
    }
}

/// Which negative construction to simulate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Construction {
    /// Data ingested in response to earlier query results.
    AdaptiveData,
    /// Helper queriers draining a shared limit.
    SharedLimit,
}

/// Simulate a construction and print a one-row CSV comparing the estimated
/// privacy loss with the closed form (adaptive data) or lower bound (shared
/// limit).
pub fn demo_counterexample(
    which: Construction,
    idp: bool,
    eps: f64,
    n: Option<u32>,
    trials: u64,
    seed: u64,
) -> Result<String, CliError> {
    let mut rng = substream(seed, Stream::Counterexample);
    let (n, est, reference, reference_kind) = match which {
        Construction::AdaptiveData => {
            let n = n.unwrap_or(10);
            let est = adaptive_data_simulate(&CxParams::new(eps, n, trials), &mut rng)?;
            (n, est, adaptive_data_closed_form(eps, n).log_ratio, "closed_form")
        }
        Construction::SharedLimit => {
            let n = n.unwrap_or_else(|| budgetguard::counterexamples::min_helpers_shared_limit(eps));
            let params =
                CxParams { variant: if idp { Variant::Idp } else { Variant::Dp }, ..CxParams::new(eps, n, trials) };
            let est = shared_limit_simulate(&params, &mut rng)?;
            (n, est, shared_limit_lower_bound(eps, n), "lower_bound")
        }
    };
    let name = match which {
        Construction::AdaptiveData => "adaptive_data",
        Construction::SharedLimit if idp => "shared_limit_idp",
        Construction::SharedLimit => "shared_limit",
    };
    Ok(format!(
        "construction,eps,helpers,trials,event,estimate,stderr,{reference_kind},max_querier_spend\n{name},{eps},{n},{trials},{},{:.6},{:.6},{:.6},{}",
        est.event,
        est.log_ratio,
        est.stderr,
        reference,
        est.max_querier_spend.as_eps()
    ))
}

/// Estimate workload bounds from an event log at `percentile` and print the
/// derived capacities as a `[quotas]` TOML fragment.
pub fn derive_quotas(
    events: &Path,
    percentile: f64,
    eps_querier: f64,
    kappa: u32,
    intermediary_fraction: f64,
    epoch_length: u64,
) -> Result<String, CliError> {
    let store = load_events(events, epoch_length)?;
    let mut params = estimate_workload_params(&store, percentile)?;
    params.intermediary_fraction = intermediary_fraction;
    let eps = Epsilon::try_from_eps(eps_querier).map_err(|e| CliError::Config(e.to_string()))?;
    let c = derive_capacities(eps, &params, kappa)?;
    Ok(format!(
        "# estimated at p{}: max_conv_sites={} max_imp_sites={} max_conv_per_imp_site={}\n[quotas]\neps_querier = {}\neps_global = {}\neps_imp = {}\neps_conv = {}\nkappa = {}",
        percentile * 100.0,
        params.max_conv_sites,
        params.max_imp_sites,
        params.max_conv_per_imp_site,
        c.eps_querier.as_eps(),
        c.eps_global.as_eps(),
        c.eps_imp_quota.as_eps(),
        c.eps_conv_quota.as_eps(),
        c.kappa_action
    ))
}

/// Resolve where outputs go: the flag, else the configured directory.
pub fn output_dir(flag: Option<PathBuf>, cfg: &ScenarioConfig) -> PathBuf {
    flag.unwrap_or_else(|| cfg.output_dir())
}
