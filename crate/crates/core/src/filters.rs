//! Pure-DP filters in exact micro-epsilon units and the per-(device, epoch)
//! filter registry.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Mul};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{DeviceId, EpochId, QuerierId, SiteId};
use crate::quotas::QuotaConfig;

/// Privacy loss in integer micro-epsilon (1 unit = 1e-6 ε).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Epsilon(u64);

impl Epsilon {
    pub const ZERO: Epsilon = Epsilon(0);
    pub const UNITS_PER_EPS: u64 = 1_000_000;

    pub const fn from_micro(units: u64) -> Self {
        Epsilon(units)
    }

    pub const fn micro(self) -> u64 {
        self.0
    }

    /// Round-to-nearest conversion from a real ε.
    pub fn try_from_eps(eps: f64) -> Result<Self> {
        if !eps.is_finite() || eps < 0.0 {
            return Err(Error::InvalidConfig(format!("epsilon must be finite and non-negative, got {eps}")));
        }
        let units = (eps * Self::UNITS_PER_EPS as f64).round();
        if units > u64::MAX as f64 {
            return Err(Error::InvalidConfig(format!("epsilon {eps} too large")));
        }
        Ok(Epsilon(units as u64))
    }

    /// Like [`Epsilon::try_from_eps`], panicking on invalid input. Meant for literals.
    pub fn from_eps(eps: f64) -> Self {
        Self::try_from_eps(eps).expect("invalid epsilon literal")
    }

    pub fn as_eps(self) -> f64 {
        self.0 as f64 / Self::UNITS_PER_EPS as f64
    }

    /// `self · factor`, rounded to the nearest unit. `factor` must be ≥ 0.
    pub fn scale(self, factor: f64) -> Self {
        debug_assert!(factor >= 0.0 && factor.is_finite());
        Epsilon((self.0 as f64 * factor).round() as u64)
    }

    /// Ceiling division, so that `k` shares always cover the whole.
    pub fn div_ceil(self, k: u64) -> Self {
        assert!(k > 0);
        Epsilon(self.0.div_ceil(k))
    }

    pub fn checked_add(self, rhs: Epsilon) -> Option<Epsilon> {
        self.0.checked_add(rhs.0).map(Epsilon)
    }

    pub fn saturating_sub(self, rhs: Epsilon) -> Epsilon {
        Epsilon(self.0.saturating_sub(rhs.0))
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }
}

impl Add for Epsilon {
    type Output = Epsilon;
    fn add(self, rhs: Epsilon) -> Epsilon {
        Epsilon(self.0.checked_add(rhs.0).expect("epsilon overflow"))
    }
}

impl AddAssign for Epsilon {
    fn add_assign(&mut self, rhs: Epsilon) {
        *self = *self + rhs;
    }
}

impl Mul<u64> for Epsilon {
    type Output = Epsilon;
    fn mul(self, k: u64) -> Epsilon {
        Epsilon(self.0.checked_mul(k).expect("epsilon overflow"))
    }
}

impl Sum for Epsilon {
    fn sum<I: Iterator<Item = Epsilon>>(iter: I) -> Epsilon {
        iter.fold(Epsilon::ZERO, Add::add)
    }
}

impl fmt::Display for Epsilon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let whole = self.0 / Self::UNITS_PER_EPS;
        let frac = self.0 % Self::UNITS_PER_EPS;
        if frac == 0 {
            write!(f, "{whole}")
        } else {
            let s = format!("{frac:06}");
            write!(f, "{whole}.{}", s.trim_end_matches('0'))
        }
    }
}

/// A pure-DP filter: accepts a loss only if it still fits under capacity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Filter {
    capacity: Epsilon,
    consumed: Epsilon,
}

impl Filter {
    pub fn new(capacity: Epsilon) -> Self {
        Filter { capacity, consumed: Epsilon::ZERO }
    }

    /// Rebuild a filter from persisted state.
    pub fn with_consumed(capacity: Epsilon, consumed: Epsilon) -> Result<Self> {
        if consumed > capacity {
            return Err(Error::InvalidConfig(format!("consumed {consumed} exceeds capacity {capacity}")));
        }
        Ok(Filter { capacity, consumed })
    }

    pub fn capacity(&self) -> Epsilon {
        self.capacity
    }

    pub fn consumed(&self) -> Epsilon {
        self.consumed
    }

    pub fn remaining(&self) -> Epsilon {
        self.capacity.saturating_sub(self.consumed)
    }

    pub fn can_consume(&self, loss: Epsilon) -> bool {
        self.consumed.checked_add(loss).is_some_and(|total| total <= self.capacity)
    }

    pub fn try_consume(&mut self, loss: Epsilon) -> bool {
        if self.can_consume(loss) {
            self.consumed += loss;
            true
        } else {
            false
        }
    }
}

/// Which filter of a device-epoch a charge applies to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FilterKind {
    Global,
    Querier(QuerierId),
    ConvQuota(SiteId),
    ImpQuota(SiteId),
}

impl FilterKind {
    pub fn label(&self) -> &'static str {
        match self {
            FilterKind::Global => "global",
            FilterKind::Querier(_) => "querier",
            FilterKind::ConvQuota(_) => "conv_quota",
            FilterKind::ImpQuota(_) => "imp_quota",
        }
    }

    pub fn key(&self) -> &str {
        match self {
            FilterKind::Global => "",
            FilterKind::Querier(s) | FilterKind::ConvQuota(s) | FilterKind::ImpQuota(s) => s,
        }
    }

    pub fn parse(label: &str, key: &str) -> Option<FilterKind> {
        Some(match label {
            "global" => FilterKind::Global,
            "querier" => FilterKind::Querier(key.to_owned()),
            "conv_quota" => FilterKind::ConvQuota(key.to_owned()),
            "imp_quota" => FilterKind::ImpQuota(key.to_owned()),
            _ => return None,
        })
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FilterKind::Global => f.write_str("global"),
            other => write!(f, "{}[{}]", other.label(), other.key()),
        }
    }
}

/// All filters of one device-epoch. Map entries appear lazily, on first
/// deduction, with the configured capacity; an absent entry behaves as a
/// fresh filter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterSet {
    pub global: Filter,
    pub per_querier: BTreeMap<QuerierId, Filter>,
    pub conv_quota: BTreeMap<SiteId, Filter>,
    pub imp_quota: BTreeMap<SiteId, Filter>,
}

impl FilterSet {
    pub fn new(config: &QuotaConfig) -> Self {
        FilterSet {
            global: Filter::new(config.eps_global),
            per_querier: BTreeMap::new(),
            conv_quota: BTreeMap::new(),
            imp_quota: BTreeMap::new(),
        }
    }

    pub fn get(&self, kind: &FilterKind) -> Option<&Filter> {
        match kind {
            FilterKind::Global => Some(&self.global),
            FilterKind::Querier(q) => self.per_querier.get(q),
            FilterKind::ConvQuota(c) => self.conv_quota.get(c),
            FilterKind::ImpQuota(i) => self.imp_quota.get(i),
        }
    }

    /// The filter for `kind`, as it is or as it would be created.
    pub fn view(&self, kind: &FilterKind, config: &QuotaConfig) -> Filter {
        self.get(kind).copied().unwrap_or_else(|| Filter::new(config.capacity_of(kind)))
    }

    pub fn can_consume(&self, kind: &FilterKind, loss: Epsilon, config: &QuotaConfig) -> bool {
        self.view(kind, config).can_consume(loss)
    }

    pub fn remaining(&self, kind: &FilterKind, config: &QuotaConfig) -> Epsilon {
        self.view(kind, config).remaining()
    }

    pub fn get_or_init(&mut self, kind: &FilterKind, config: &QuotaConfig) -> &mut Filter {
        let cap = config.capacity_of(kind);
        match kind {
            FilterKind::Global => &mut self.global,
            FilterKind::Querier(q) => self.per_querier.entry(q.clone()).or_insert_with(|| Filter::new(cap)),
            FilterKind::ConvQuota(c) => self.conv_quota.entry(c.clone()).or_insert_with(|| Filter::new(cap)),
            FilterKind::ImpQuota(i) => self.imp_quota.entry(i.clone()).or_insert_with(|| Filter::new(cap)),
        }
    }

    /// Every instantiated filter, global first, then per-querier, conv, imp.
    pub fn entries(&self) -> impl Iterator<Item = (FilterKind, &Filter)> {
        std::iter::once((FilterKind::Global, &self.global))
            .chain(self.per_querier.iter().map(|(k, f)| (FilterKind::Querier(k.clone()), f)))
            .chain(self.conv_quota.iter().map(|(k, f)| (FilterKind::ConvQuota(k.clone()), f)))
            .chain(self.imp_quota.iter().map(|(k, f)| (FilterKind::ImpQuota(k.clone()), f)))
    }

    fn insert(&mut self, kind: FilterKind, filter: Filter) {
        match kind {
            FilterKind::Global => self.global = filter,
            FilterKind::Querier(q) => {
                self.per_querier.insert(q, filter);
            }
            FilterKind::ConvQuota(c) => {
                self.conv_quota.insert(c, filter);
            }
            FilterKind::ImpQuota(i) => {
                self.imp_quota.insert(i, filter);
            }
        }
    }
}

/// Filter sets keyed by device then epoch.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FilterRegistry {
    sets: BTreeMap<DeviceId, BTreeMap<EpochId, FilterSet>>,
}

impl FilterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, device: &str, epoch: EpochId) -> Option<&FilterSet> {
        self.sets.get(device)?.get(&epoch)
    }

    /// Idempotent: creates the set with configured capacities on first use.
    pub fn get_or_init_filterset(&mut self, device: &str, epoch: EpochId, config: &QuotaConfig) -> &mut FilterSet {
        if !self.sets.contains_key(device) {
            self.sets.insert(device.to_owned(), BTreeMap::new());
        }
        self.sets.get_mut(device).expect("device present").entry(epoch).or_insert_with(|| FilterSet::new(config))
    }

    /// Remaining budget of a filter; unknown sets and filters report full capacity.
    pub fn remaining(&self, device: &str, epoch: EpochId, kind: &FilterKind, config: &QuotaConfig) -> Epsilon {
        match self.get(device, epoch) {
            Some(fs) => fs.remaining(kind, config),
            None => config.capacity_of(kind),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&DeviceId, EpochId, &FilterSet)> {
        self.sets.iter().flat_map(|(d, m)| m.iter().map(move |(e, fs)| (d, *e, fs)))
    }

    pub fn len(&self) -> usize {
        self.sets.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Write `device,epoch,filter_kind,key,capacity_microeps,consumed_microeps` records.
    pub fn write_snapshot<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| Error::Io(e.to_string());
        w.write_record(SNAPSHOT_HEADER).map_err(io)?;
        for (device, epoch, fs) in self.iter() {
            for (kind, f) in fs.entries() {
                w.write_record([
                    device.as_str(),
                    &epoch.to_string(),
                    kind.label(),
                    kind.key(),
                    &f.capacity().micro().to_string(),
                    &f.consumed().micro().to_string(),
                ])
                .map_err(io)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_snapshot<R: Read>(reader: R) -> Result<FilterRegistry> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let mut staged: BTreeMap<(DeviceId, EpochId), (Option<Filter>, Vec<(FilterKind, Filter)>)> = BTreeMap::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i as u64 + 2;
            let perr = |msg: String| Error::Parse { line, msg };
            let rec = rec.map_err(|e| perr(e.to_string()))?;
            if rec.len() != 6 {
                return Err(perr(format!("expected 6 fields, got {}", rec.len())));
            }
            let epoch: EpochId = rec[1].parse().map_err(|e| perr(format!("epoch: {e}")))?;
            let kind = FilterKind::parse(&rec[2], &rec[3])
                .ok_or_else(|| perr(format!("unknown filter kind {:?}", &rec[2])))?;
            let cap: u64 = rec[4].parse().map_err(|e| perr(format!("capacity: {e}")))?;
            let used: u64 = rec[5].parse().map_err(|e| perr(format!("consumed: {e}")))?;
            let filter = Filter::with_consumed(Epsilon(cap), Epsilon(used)).map_err(|e| perr(e.to_string()))?;
            let slot = staged.entry((rec[0].to_owned(), epoch)).or_default();
            match kind {
                FilterKind::Global => slot.0 = Some(filter),
                other => slot.1.push((other, filter)),
            }
        }
        let mut reg = FilterRegistry::new();
        for ((device, epoch), (global, rest)) in staged {
            let global = global
                .ok_or_else(|| Error::Parse { line: 0, msg: format!("no global filter for ({device}, {epoch})") })?;
            let mut fs = FilterSet {
                global,
                per_querier: BTreeMap::new(),
                conv_quota: BTreeMap::new(),
                imp_quota: BTreeMap::new(),
            };
            for (k, f) in rest {
                fs.insert(k, f);
            }
            reg.sets.entry(device).or_default().insert(epoch, fs);
        }
        Ok(reg)
    }
}

pub const SNAPSHOT_HEADER: [&str; 6] =
    ["device", "epoch", "filter_kind", "key", "capacity_microeps", "consumed_microeps"];
