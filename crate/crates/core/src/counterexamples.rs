//! Executable constructions showing that per-querier budgets alone do not
//! bound privacy loss once queriers can influence each other: either through
//! data the system later ingests (adaptive data generation) or through a
//! shared limit whose saturation is observable (adaptive query budgets).
//!
//! Every simulator runs both neighbouring worlds (the target record absent,
//! b = 0, or present, b = 1) and estimates the log ratio of the probability
//! of a distinguishing event. A log ratio above ε means the final querier's
//! view is not ε-DP even though every querier stayed within its own budget.

use rand::Rng;

use crate::error::{Error, Result};
use crate::filters::{Epsilon, Filter};
use crate::rng::{laplace, laplace_upper_tail};

/// Minimum count of tail hits needed before a counting estimate is reported.
pub const MIN_TAIL_HITS: u64 = 100;
/// Minimum number of trials per world.
pub const MIN_TRIALS: u64 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Variant {
    /// Rejections are visible to the querier as ⊥.
    #[default]
    Dp,
    /// Records whose filter is exhausted are silently dropped.
    Idp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TailMethod {
    /// Average the exact Laplace tail conditioned on every other draw.
    #[default]
    Conditional,
    /// Count tail hits directly.
    Counting,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CxParams {
    /// Per-querier capacity.
    pub eps: f64,
    /// Number of helper queriers.
    pub n: u32,
    /// Shared capacity for the shared-limit construction; defaults to the
    /// value at which the helpers exactly saturate it.
    pub eps_global: Option<f64>,
    /// Trials per world.
    pub trials: u64,
    /// Tail threshold; defaults to n + 1 (adaptive data) or n (silent drops).
    pub threshold: Option<f64>,
    pub variant: Variant,
    pub method: TailMethod,
}

impl CxParams {
    pub fn new(eps: f64, n: u32, trials: u64) -> Self {
        CxParams {
            eps,
            n,
            eps_global: None,
            trials,
            threshold: None,
            variant: Variant::Dp,
            method: TailMethod::Conditional,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidParams(format!("eps must be positive, got {}", self.eps)));
        }
        if self.trials < MIN_TRIALS {
            return Err(Error::InvalidParams(format!("need at least {MIN_TRIALS} trials, got {}", self.trials)));
        }
        Ok(())
    }

    fn validate_shared(&self) -> Result<()> {
        self.validate()?;
        let need = min_helpers_shared_limit(self.eps);
        if self.n < need {
            return Err(Error::InvalidParams(format!("shared-limit construction needs n ≥ {need}, got {}", self.n)));
        }
        Ok(())
    }
}

/// Smallest helper count for which the shared-limit construction is proven
/// to leak: ⌈4·ln2 / (1 − e^{−ε/2})²⌉.
pub fn min_helpers_shared_limit(eps: f64) -> u32 {
    (4.0 * std::f64::consts::LN_2 / (1.0 - (-eps / 2.0).exp()).powi(2)).ceil() as u32
}

/// Probability a helper's noisy reading lands on the "wrong" side of 1/2.
pub fn flip_probability(eps: f64) -> f64 {
    0.5 * (-eps / 2.0).exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedForm {
    pub p: f64,
    /// Extra loss leaked per helper querier.
    pub eps_per_helper: f64,
    pub log_ratio: f64,
}

/// Exact log ratio of the adaptive-data construction.
pub fn adaptive_data_closed_form(eps: f64, n: u32) -> ClosedForm {
    let p = flip_probability(eps);
    let e = eps.exp();
    let eps_per_helper = ((p + (1.0 - p) * e) / (p * e + 1.0 - p)).ln();
    ClosedForm { p, eps_per_helper, log_ratio: eps + n as f64 * eps_per_helper }
}

/// Lower bound on the shared-limit construction's log ratio: ε + n·(1/2 − p)².
pub fn shared_limit_lower_bound(eps: f64, n: u32) -> f64 {
    eps + n as f64 * (0.5 - flip_probability(eps)).powi(2)
}

/// Tail probability estimate for one world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailEstimate {
    pub mean: f64,
    /// Standard error of the mean.
    pub stderr: f64,
    /// Direct hit count (counting method only).
    pub hits: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    /// ln(Pr[event | b = 1] / Pr[event | b = 0]).
    pub log_ratio: f64,
    /// Delta-method standard error of `log_ratio`.
    pub stderr: f64,
    pub world0: TailEstimate,
    pub world1: TailEstimate,
    /// Largest total any single querier spent in any trial.
    pub max_querier_spend: Epsilon,
    /// Which event the estimate refers to (for constructions with several).
    pub event: &'static str,
}

impl Estimate {
    /// The same data with the roles of the two worlds exchanged.
    pub fn swapped(&self) -> Estimate {
        Estimate { log_ratio: -self.log_ratio, world0: self.world1, world1: self.world0, ..self.clone() }
    }
}

/// Wilson score interval for a binomial proportion at `z` standard normals.
pub fn wilson_interval(hits: u64, trials: u64, z: f64) -> (f64, f64) {
    let n = trials as f64;
    let phat = hits as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (phat + z2 / (2.0 * n)) / denom;
    let half = z * (phat * (1.0 - phat) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Running mean and variance (Welford).
#[derive(Debug, Default, Clone, Copy)]
struct Moments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn tail(&self, hits: Option<u64>) -> TailEstimate {
        let var = if self.n > 1 { self.m2 / (self.n - 1) as f64 } else { 0.0 };
        TailEstimate { mean: self.mean, stderr: (var / self.n as f64).sqrt(), hits }
    }
}

fn combine(w0: TailEstimate, w1: TailEstimate, spend: Epsilon, event: &'static str) -> Result<Estimate> {
    for w in [w0, w1] {
        if let Some(h) = w.hits {
            if h < MIN_TAIL_HITS {
                return Err(Error::InsufficientTailMass { hits: h, needed: MIN_TAIL_HITS });
            }
        }
        if w.mean <= 0.0 {
            return Err(Error::InsufficientTailMass { hits: 0, needed: MIN_TAIL_HITS });
        }
    }
    let rel = |w: TailEstimate| (w.stderr / w.mean).powi(2);
    Ok(Estimate {
        log_ratio: (w1.mean / w0.mean).ln(),
        stderr: (rel(w0) + rel(w1)).sqrt(),
        world0: w0,
        world1: w1,
        max_querier_spend: spend,
        event,
    })
}

/// Adaptive data generation: n helpers each read D + Lap(1/ε); the system
/// then ingests one new record per helper whose reading exceeded 1/2; the
/// final querier reads the total + Lap(1/ε) and tests it against N.
pub fn adaptive_data_simulate<R: Rng + ?Sized>(params: &CxParams, rng: &mut R) -> Result<Estimate> {
    params.validate()?;
    let eps = params.eps;
    let n = params.n;
    let threshold = params.threshold.unwrap_or(n as f64 + 1.0);
    let scale = 1.0 / eps;
    let mut worlds = [Moments::default(); 2];
    let mut hits = [0u64; 2];
    for (b, world) in worlds.iter_mut().enumerate() {
        let d = b as f64;
        for _ in 0..params.trials {
            let mut inserted = 0u32;
            for _ in 0..n {
                if d + laplace(rng, scale) > 0.5 {
                    inserted += 1;
                }
            }
            let total = d + inserted as f64;
            match params.method {
                TailMethod::Conditional => world.push(laplace_upper_tail(threshold - total, scale)),
                TailMethod::Counting => {
                    let hit = total + laplace(rng, scale) >= threshold;
                    hits[b] += hit as u64;
                    world.push(hit as u64 as f64);
                }
            }
        }
    }
    let counted = |b: usize| (params.method == TailMethod::Counting).then_some(hits[b]);
    // every querier runs exactly one ε-query
    let spend = Epsilon::from_eps(eps);
    combine(worlds[0].tail(counted(0)), worlds[1].tail(counted(1)), spend, "final_reading_at_least_threshold")
}

/// Budget split of the shared-limit construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SharedLimitSplit {
    /// Final querier's second request.
    pub eps0: Epsilon,
    /// Every helper's unconditional spend.
    pub eps1: Epsilon,
    /// A helper's conditional spend.
    pub eps2: Epsilon,
    pub eps_global: Epsilon,
}

/// ε₀ = ε/2, ε₂ = 2ε₀/n, and ε₁ chosen so that the helpers' unconditional
/// spend plus the final querier's first query plus n·ε₂ saturates the shared
/// limit; ε₁ + ε₂ is clamped to ε so no helper overspends.
pub fn shared_limit_split(eps: f64, n: u32, eps_global: Option<f64>) -> SharedLimitSplit {
    let eps0 = eps / 2.0;
    let eps2 = 2.0 * eps0 / n as f64;
    let eps_global = eps_global.unwrap_or(n as f64 * eps + (eps - eps0));
    let eps1 = ((eps_global - (eps - eps0)) / n as f64 - eps2).clamp(0.0, eps - eps2);
    SharedLimitSplit {
        eps0: Epsilon::from_eps(eps0),
        eps1: Epsilon::from_eps(eps1),
        eps2: Epsilon::from_eps(eps2),
        eps_global: Epsilon::from_eps(eps_global),
    }
}

/// Shared-limit constructions; see [`Variant`].
pub fn shared_limit_simulate<R: Rng + ?Sized>(params: &CxParams, rng: &mut R) -> Result<Estimate> {
    params.validate_shared()?;
    match params.variant {
        Variant::Dp => shared_limit_dp(params, rng),
        Variant::Idp => shared_limit_idp(params, rng),
    }
}

/// Helpers read D + Lap(1/ε₁) against a shared filter and spend ε₂ more iff
/// their reading exceeds 1/2. The final querier reads V₁ = D + Lap(1/(ε−ε₀)),
/// then requests ε₀ and sees ⊥ iff the shared filter is saturated. Both
/// events {V₁ > 1, V₂ = ⊥} and {V₁ > 1, V₂ > 1} are counted; the larger log
/// ratio is reported.
fn shared_limit_dp<R: Rng + ?Sized>(params: &CxParams, rng: &mut R) -> Result<Estimate> {
    let eps = params.eps;
    let split = shared_limit_split(eps, params.n, params.eps_global);
    let first = Epsilon::from_eps(eps).saturating_sub(split.eps0);
    let threshold = params.threshold.unwrap_or(1.0);
    let mut bot = [Moments::default(); 2];
    let mut high = [Moments::default(); 2];
    let mut bot_hits = [0u64; 2];
    let mut high_hits = [0u64; 2];
    let mut max_spend = Epsilon::ZERO;
    for b in 0..2 {
        let d = b as f64;
        for _ in 0..params.trials {
            let mut shared = Filter::new(split.eps_global);
            for _ in 0..params.n {
                let mut spent = Epsilon::ZERO;
                if shared.try_consume(split.eps1) {
                    spent += split.eps1;
                    if d + laplace(rng, 1.0 / split.eps1.as_eps()) > 0.5 && shared.try_consume(split.eps2) {
                        spent += split.eps2;
                    }
                }
                max_spend = max_spend.max(spent);
            }
            let v1_high = shared.try_consume(first) && d + laplace(rng, 1.0 / first.as_eps()) > threshold;
            let answered = shared.try_consume(split.eps0);
            let v2_high = answered && d + laplace(rng, 1.0 / split.eps0.as_eps()) > threshold;
            max_spend = max_spend.max(first + if answered { split.eps0 } else { Epsilon::ZERO });
            let ev_bot = v1_high && !answered;
            let ev_high = v1_high && v2_high;
            bot_hits[b] += ev_bot as u64;
            high_hits[b] += ev_high as u64;
            bot[b].push(ev_bot as u64 as f64);
            high[b].push(ev_high as u64 as f64);
        }
    }
    let via_bot =
        combine(bot[0].tail(Some(bot_hits[0])), bot[1].tail(Some(bot_hits[1])), max_spend, "high_then_rejected");
    let via_high =
        combine(high[0].tail(Some(high_hits[0])), high[1].tail(Some(high_hits[1])), max_spend, "high_then_high");
    match (via_bot, via_high) {
        (Ok(a), Ok(c)) => Ok(if a.log_ratio >= c.log_ratio { a } else { c }),
        (Ok(a), Err(_)) => Ok(a),
        (Err(_), Ok(c)) => Ok(c),
        (Err(e), Err(_)) => Err(e),
    }
}

/// Silent-drop variant. Records x₁..xₙ (all equal to 1) each have a shared
/// per-record filter of capacity 1.5ε. Helper k reads the target x₀ with
/// Lap(1/ε) and, iff the reading is at most 1/2, spends ε on xₖ. The final
/// querier reads x₀ + Lap(1/ε), then counts x₁..xₙ with Lap(1/ε); exhausted
/// records are dropped without notice. The event is {V₁ > 1, V₂ ≥ N}.
fn shared_limit_idp<R: Rng + ?Sized>(params: &CxParams, rng: &mut R) -> Result<Estimate> {
    let eps = params.eps;
    let n = params.n as usize;
    let eps_u = Epsilon::from_eps(eps);
    let scale = 1.0 / eps;
    let threshold = params.threshold.unwrap_or(params.n as f64);
    let record_capacity = eps_u.scale(1.5);
    let mut worlds = [Moments::default(); 2];
    let mut hits = [0u64; 2];
    let mut max_spend = Epsilon::ZERO;
    for (b, world) in worlds.iter_mut().enumerate() {
        let d = b as f64;
        for _ in 0..params.trials {
            let mut records: Vec<Filter> = (0..n).map(|_| Filter::new(record_capacity)).collect();
            for rec in records.iter_mut() {
                // one ε-read of x₀, one optional ε-spend on its own record
                if d + laplace(rng, scale) <= 0.5 {
                    rec.try_consume(eps_u);
                }
            }
            // the final querier spends ε per record; x₀'s shared filter never binds
            let counted = records.iter_mut().map(|r| r.try_consume(eps_u)).filter(|ok| *ok).count() as f64;
            max_spend = max_spend.max(eps_u);
            match params.method {
                TailMethod::Conditional => {
                    let p_v1 = laplace_upper_tail(1.0 - d, scale);
                    world.push(p_v1 * laplace_upper_tail(threshold - counted, scale));
                }
                TailMethod::Counting => {
                    let hit = d + laplace(rng, scale) > 1.0 && counted + laplace(rng, scale) >= threshold;
                    hits[b] += hit as u64;
                    world.push(hit as u64 as f64);
                }
            }
        }
    }
    let counted = |b: usize| (params.method == TailMethod::Counting).then_some(hits[b]);
    combine(worlds[0].tail(counted(0)), worlds[1].tail(counted(1)), max_spend, "high_then_count_at_least_threshold")
}
