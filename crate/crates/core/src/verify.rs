//! Randomized property suites an operator can run against a configuration:
//! transaction atomicity, the global-capacity audit, and the resilience
//! bounds under randomized attackers.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::accounting::{ImpSiteBudgetMode, ReportId};
use crate::engine::{atomic_check_and_consume, EngineVariant, LedgerEntry, TxnContext};
use crate::error::Result;
use crate::filters::{Epsilon, FilterRegistry};
use crate::metrics::Violation;
use crate::quotas::QuotaConfig;
use crate::rng::{substream, SimRng, Stream};
use crate::sim::{run_scenario, Scenario};
use crate::workload::{AttackStrategy, AttackerSpec, BenignSpec};

/// Outcome of one suite: how many cases ran and what went wrong.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SuiteReport {
    pub cases: u64,
    pub failures: Vec<String>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn snapshot(reg: &FilterRegistry) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    reg.write_snapshot(&mut buf)?;
    Ok(buf)
}

fn random_loss(rng: &mut SimRng, cap: Epsilon) -> Epsilon {
    match rng.random_range(0..6) {
        0 => Epsilon::ZERO,
        1 => cap,
        _ => Epsilon::from_micro(rng.random_range(0..=cap.micro() * 3 / 2)),
    }
}

/// Random transaction traces against `config`: a rejected transaction must
/// leave the snapshot byte-identical and the ledger unchanged; an accepted
/// one must move each charged filter by exactly its charge.
pub fn atomicity_fuzz(config: &QuotaConfig, traces: u64, seed: u64) -> Result<SuiteReport> {
    config.validate()?;
    let mut rng = substream(seed, Stream::Counterexample);
    let variants = [EngineVariant::Full, EngineVariant::GlobalOnly, EngineVariant::NoGlobal];
    let mut report = SuiteReport { cases: traces, ..SuiteReport::default() };
    for trace in 0..traces {
        let mut reg = FilterRegistry::new();
        let mut ledger: Vec<LedgerEntry> = Vec::new();
        for step in 0..rng.random_range(1..=16u64) {
            let device = ["d0", "d1"][rng.random_range(0..2)];
            let epoch = rng.random_range(0..2);
            let variant = variants[rng.random_range(0..3)];
            let loss = random_loss(&mut rng, config.eps_querier);
            let mut per_site = BTreeMap::new();
            for site in ["i0", "i1", "i2"] {
                if rng.random_bool(0.5) {
                    per_site.insert(site.to_owned(), random_loss(&mut rng, config.eps_querier));
                }
            }
            let querier = ["q0", "q1"][rng.random_range(0..2)];
            let charges = variant.charges(querier, "c0", loss, &per_site);
            reg.get_or_init_filterset(device, epoch, config);
            let before_bytes = snapshot(&reg)?;
            let before = reg.get(device, epoch).expect("initialized").clone();
            let ledger_len = ledger.len();
            let ctx = TxnContext { device, epoch, report_id: ReportId(step) };
            let outcome = atomic_check_and_consume(
                reg.get_or_init_filterset(device, epoch, config),
                config,
                &charges,
                ctx,
                &mut ledger,
            );
            let after = reg.get(device, epoch).expect("initialized");
            let ok = match outcome {
                Err(_) => snapshot(&reg)? == before_bytes && ledger.len() == ledger_len,
                Ok(()) => charges
                    .iter()
                    .all(|(k, l)| after.view(k, config).consumed() == before.view(k, config).consumed() + *l),
            };
            if !ok {
                report.failures.push(format!("trace {trace}, step {step}: {outcome:?} broke atomicity"));
            }
        }
    }
    Ok(report)
}

/// Run `base` once and report every ledger-audit violation.
pub fn audit_scenario(base: &Scenario) -> Result<(SuiteReport, Vec<Violation>)> {
    let out = run_scenario(base)?;
    let failures = out.violations.iter().map(|v| format!("{v:?}")).collect();
    Ok((SuiteReport { cases: 1, failures }, out.violations))
}

/// Short simulations of `base`'s quotas under randomized attackers (strategy,
/// Sybil count, chain length, hijacked sites, budget split mode); every run
/// is audited against the global capacity and both resilience bounds.
pub fn resilience_fuzz(base: &Scenario, runs: u64, seed: u64) -> Result<SuiteReport> {
    let mut rng = substream(seed, Stream::Attacker);
    let mut report = SuiteReport { cases: runs, ..SuiteReport::default() };
    for run in 0..runs {
        let strategy = match rng.random_range(0..3) {
            0 => AttackStrategy::Naive,
            1 => AttackStrategy::Random(rng.random_range(0.05..=1.0)),
            _ => AttackStrategy::Omniscient,
        };
        let benign = BenignSpec {
            devices: rng.random_range(20..=60),
            days: rng.random_range(2..=5),
            batch_size: 10,
            ..base.benign.clone()
        };
        let mut controlled: BTreeSet<String> =
            benign.publishers.iter().filter(|_| rng.random_bool(0.3)).map(|p| p.site.clone()).collect();
        if controlled.is_empty() {
            controlled.insert(benign.publishers[0].site.clone());
        }
        let mut attacker = AttackerSpec::new(strategy, rng.random_range(1..=30), controlled);
        attacker.chain_length = rng.random_range(1..=attacker.sybils.len());
        let mut s = Scenario::new(&format!("resilience-{run}"), base.config, EngineVariant::Full, benign, rng.random())
            .with_attacker(attacker);
        s.intermediary_fraction = base.intermediary_fraction;
        s.imp_mode = [ImpSiteBudgetMode::UniformHeuristic, ImpSiteBudgetMode::TwoDeltaBound][rng.random_range(0..2)];
        let out = run_scenario(&s)?;
        report.failures.extend(out.violations.iter().map(|v| format!("run {run}: {v:?}")));
    }
    Ok(report)
}
