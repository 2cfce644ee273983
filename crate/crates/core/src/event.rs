//! Domain identifiers, events, epoch arithmetic and the append-only event store.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type DeviceId = String;
pub type SiteId = String;
pub type QuerierId = SiteId;
pub type EpochId = u32;

/// One day, in seconds.
pub const DEFAULT_EPOCH_LENGTH: u64 = 86_400;

/// Token shared by all API calls caused by one user action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UaCtxId(pub u64);

impl fmt::Display for UaCtxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "u{}", self.0)
    }
}

pub fn epoch_of(timestamp: u64, epoch_length: u64) -> EpochId {
    assert!(epoch_length > 0, "epoch length must be positive");
    let e = timestamp / epoch_length;
    EpochId::try_from(e).expect("epoch index overflows u32")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpressionEvent {
    pub device: DeviceId,
    pub epoch: EpochId,
    pub ua_ctx: UaCtxId,
    pub site: SiteId,
    pub ad_key: String,
    pub bucket: usize,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionEvent {
    pub device: DeviceId,
    pub epoch: EpochId,
    pub ua_ctx: UaCtxId,
    pub conv_site: SiteId,
    pub queriers: BTreeSet<QuerierId>,
    pub value: f64,
    pub max_value: f64,
    /// Matching key; empty matches every impression.
    pub ad_key: String,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Event {
    Impression(ImpressionEvent),
    Conversion(ConversionEvent),
}

impl Event {
    pub fn device(&self) -> &str {
        match self {
            Event::Impression(i) => &i.device,
            Event::Conversion(c) => &c.device,
        }
    }

    pub fn epoch(&self) -> EpochId {
        match self {
            Event::Impression(i) => i.epoch,
            Event::Conversion(c) => c.epoch,
        }
    }

    pub fn timestamp(&self) -> u64 {
        match self {
            Event::Impression(i) => i.timestamp,
            Event::Conversion(c) => c.timestamp,
        }
    }

    pub fn ua_ctx(&self) -> UaCtxId {
        match self {
            Event::Impression(i) => i.ua_ctx,
            Event::Conversion(c) => c.ua_ctx,
        }
    }
}

/// Stable identity of a stored impression: its epoch, site, ad key and
/// position within its (device, epoch) sequence.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ImpressionKey {
    pub epoch: EpochId,
    pub site: SiteId,
    pub ad_key: String,
    pub seq: usize,
}

/// Append-only per-(device, epoch) event sequences.
#[derive(Debug, Clone)]
pub struct EventStore {
    epoch_length: u64,
    records: BTreeMap<DeviceId, BTreeMap<EpochId, Vec<Event>>>,
    len: usize,
    max_ua: Option<u64>,
}

impl Default for EventStore {
    fn default() -> Self {
        Self::new(DEFAULT_EPOCH_LENGTH)
    }
}

impl EventStore {
    pub fn new(epoch_length: u64) -> Self {
        assert!(epoch_length > 0, "epoch length must be positive");
        Self { epoch_length, records: BTreeMap::new(), len: 0, max_ua: None }
    }

    pub fn epoch_length(&self) -> u64 {
        self.epoch_length
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Largest user-action token seen so far, so callers can mint fresh ones.
    pub fn max_ua_ctx(&self) -> Option<u64> {
        self.max_ua
    }

    pub fn validate(&self, event: &Event) -> Result<()> {
        let expected = epoch_of(event.timestamp(), self.epoch_length);
        if event.epoch() != expected {
            return Err(Error::InvalidEvent(format!(
                "epoch {} does not match timestamp {} (expected {expected})",
                event.epoch(),
                event.timestamp()
            )));
        }
        if let Event::Conversion(c) = event {
            if !(c.max_value > 0.0 && c.max_value.is_finite()) {
                return Err(Error::InvalidEvent(format!("maxValue must be positive, got {}", c.max_value)));
            }
            if !(c.value >= 0.0 && c.value <= c.max_value) {
                return Err(Error::InvalidEvent(format!("value {} outside [0, maxValue={}]", c.value, c.max_value)));
            }
        }
        Ok(())
    }

    pub fn append(&mut self, event: Event) -> Result<()> {
        self.validate(&event)?;
        let ua = event.ua_ctx().0;
        self.max_ua = Some(self.max_ua.map_or(ua, |m| m.max(ua)));
        self.records.entry(event.device().to_owned()).or_default().entry(event.epoch()).or_default().push(event);
        self.len += 1;
        Ok(())
    }

    /// Events appended for `(device, epoch)`, in append order.
    pub fn lookup(&self, device: &str, epoch: EpochId) -> &[Event] {
        self.records.get(device).and_then(|m| m.get(&epoch)).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Impressions of `(device, epoch)` with their sequence position.
    pub fn impressions(&self, device: &str, epoch: EpochId) -> impl Iterator<Item = (usize, &ImpressionEvent)> {
        self.lookup(device, epoch).iter().enumerate().filter_map(|(i, e)| match e {
            Event::Impression(imp) => Some((i, imp)),
            Event::Conversion(_) => None,
        })
    }

    pub fn devices(&self) -> impl Iterator<Item = &DeviceId> {
        self.records.keys()
    }

    /// Every populated (device, epoch) key with its events.
    pub fn device_epochs(&self) -> impl Iterator<Item = (&DeviceId, EpochId, &[Event])> {
        self.records.iter().flat_map(|(d, m)| m.iter().map(move |(e, evs)| (d, *e, evs.as_slice())))
    }

    /// All events ordered by (timestamp, device, append order).
    pub fn events_by_time(&self) -> Vec<&Event> {
        let mut all: Vec<&Event> = self.records.values().flat_map(|m| m.values().flatten()).collect();
        all.sort_by(|a, b| a.timestamp().cmp(&b.timestamp()).then_with(|| a.device().cmp(b.device())));
        all
    }

    /// Parse the event CSV format. Returns the store and the number of rows read.
    pub fn from_csv<R: Read>(reader: R, epoch_length: u64) -> Result<(EventStore, usize)> {
        let mut store = EventStore::new(epoch_length);
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let mut interner: HashMap<(String, String), u64> = HashMap::new();
        let mut rows = 0usize;
        for result in rdr.deserialize::<CsvRow>() {
            let line_of = |e: &csv::Error| e.position().map_or(0, |p| p.line());
            let row = result.map_err(|e| Error::Parse { line: line_of(&e), msg: e.to_string() })?;
            // header is line 1
            let line = rows as u64 + 2;
            let next = interner.len() as u64;
            let ua = *interner.entry((row.device_id.clone(), row.ua_ctx.clone())).or_insert(next);
            let event = row.into_event(UaCtxId(ua), epoch_length).map_err(|msg| Error::Parse { line, msg })?;
            store.append(event).map_err(|e| Error::Parse { line, msg: e.to_string() })?;
            rows += 1;
        }
        Ok((store, rows))
    }

    /// Write every event in the CSV format, ordered by timestamp.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CSV_HEADER).map_err(|e| Error::Io(e.to_string()))?;
        for ev in self.events_by_time() {
            let rec: [String; 10] = match ev {
                Event::Impression(i) => [
                    i.timestamp.to_string(),
                    i.device.clone(),
                    "imp".into(),
                    i.site.clone(),
                    i.ua_ctx.0.to_string(),
                    i.ad_key.clone(),
                    i.bucket.to_string(),
                    String::new(),
                    String::new(),
                    String::new(),
                ],
                Event::Conversion(c) => [
                    c.timestamp.to_string(),
                    c.device.clone(),
                    "conv".into(),
                    c.conv_site.clone(),
                    c.ua_ctx.0.to_string(),
                    c.ad_key.clone(),
                    String::new(),
                    c.value.to_string(),
                    c.max_value.to_string(),
                    c.queriers.iter().cloned().collect::<Vec<_>>().join("|"),
                ],
            };
            w.write_record(&rec).map_err(|e| Error::Io(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

pub const CSV_HEADER: [&str; 10] = [
    "timestamp",
    "device_id",
    "event_type",
    "site",
    "ua_ctx",
    "ad_key",
    "bucket",
    "conv_value",
    "conv_max_value",
    "queriers",
];

#[derive(Debug, Deserialize)]
struct CsvRow {
    timestamp: u64,
    device_id: String,
    event_type: String,
    site: String,
    ua_ctx: String,
    ad_key: String,
    bucket: Option<usize>,
    conv_value: Option<f64>,
    conv_max_value: Option<f64>,
    queriers: String,
}

impl CsvRow {
    fn into_event(self, ua: UaCtxId, epoch_length: u64) -> std::result::Result<Event, String> {
        let epoch = epoch_of(self.timestamp, epoch_length);
        if self.device_id.is_empty() || self.site.is_empty() {
            return Err("device_id and site are required".into());
        }
        match self.event_type.as_str() {
            "imp" => Ok(Event::Impression(ImpressionEvent {
                device: self.device_id,
                epoch,
                ua_ctx: ua,
                site: self.site,
                ad_key: self.ad_key,
                bucket: self.bucket.ok_or("impression rows need a bucket")?,
                timestamp: self.timestamp,
            })),
            "conv" => {
                let value = self.conv_value.ok_or("conversion rows need conv_value")?;
                let max_value = self.conv_max_value.ok_or("conversion rows need conv_max_value")?;
                let mut queriers: BTreeSet<QuerierId> =
                    self.queriers.split('|').map(str::trim).filter(|q| !q.is_empty()).map(String::from).collect();
                if queriers.is_empty() {
                    queriers.insert(self.site.clone());
                }
                Ok(Event::Conversion(ConversionEvent {
                    device: self.device_id,
                    epoch,
                    ua_ctx: ua,
                    conv_site: self.site,
                    queriers,
                    value,
                    max_value,
                    ad_key: self.ad_key,
                    timestamp: self.timestamp,
                }))
            }
            other => Err(format!("unknown event_type {other:?}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn imp(device: &str, ts: u64, site: &str) -> Event {
        Event::Impression(ImpressionEvent {
            device: device.into(),
            epoch: epoch_of(ts, DEFAULT_EPOCH_LENGTH),
            ua_ctx: UaCtxId(1),
            site: site.into(),
            ad_key: "ad".into(),
            bucket: 0,
            timestamp: ts,
        })
    }

    fn conv(value: f64, max_value: f64) -> Event {
        Event::Conversion(ConversionEvent {
            device: "d1".into(),
            epoch: 0,
            ua_ctx: UaCtxId(2),
            conv_site: "shoes.ex".into(),
            queriers: ["shoes.ex".to_string()].into(),
            value,
            max_value,
            ad_key: String::new(),
            timestamp: 10,
        })
    }

    #[test]
    fn epoch_boundaries() {
        assert_eq!(epoch_of(0, 86_400), 0);
        assert_eq!(epoch_of(86_400, 86_400), 1);
        // floor oracle: 172799 = 2*86400 - 1
        assert_eq!(epoch_of(172_799, 86_400), 1);
    }

    #[test]
    fn append_and_lookup() {
        let mut s = EventStore::default();
        s.append(imp("d1", 86_400 + 5, "news.ex")).unwrap();
        assert_eq!(s.lookup("d1", 1).len(), 1);
        assert!(s.lookup("d1", 2).is_empty());
        assert!(s.lookup("d2", 1).is_empty());
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn rejects_value_above_max() {
        let mut s = EventStore::default();
        assert!(matches!(s.append(conv(200.0, 150.0)), Err(Error::InvalidEvent(_))));
        assert!(s.is_empty());
        s.append(conv(150.0, 150.0)).unwrap();
    }

    #[test]
    fn rejects_epoch_mismatch() {
        let mut s = EventStore::default();
        let mut e = imp("d1", 5, "a");
        if let Event::Impression(i) = &mut e {
            i.epoch = 3;
        }
        assert!(matches!(s.append(e), Err(Error::InvalidEvent(_))));
    }

    #[test]
    fn csv_roundtrip() {
        let text = "timestamp,device_id,event_type,site,ua_ctx,ad_key,bucket,conv_value,conv_max_value,queriers\n\
                    100,d1,imp,news.ex,a,shoes,2,,,\n\
                    90000,d1,imp,blog.ex,b,shoes,1,,,\n\
                    180000,d1,conv,shoes.ex,c,shoes,,75,150,shoes.ex|adtech.ex\n";
        let (store, rows) = EventStore::from_csv(text.as_bytes(), DEFAULT_EPOCH_LENGTH).unwrap();
        assert_eq!(rows, 3);
        assert_eq!(store.lookup("d1", 0).len(), 1);
        assert_eq!(store.lookup("d1", 2).len(), 1);
        let Event::Conversion(c) = &store.lookup("d1", 2)[0] else { panic!() };
        assert_eq!(c.queriers.len(), 2);

        let mut out = Vec::new();
        store.write_csv(&mut out).unwrap();
        let (again, n) = EventStore::from_csv(out.as_slice(), DEFAULT_EPOCH_LENGTH).unwrap();
        assert_eq!(n, 3);
        assert_eq!(again.lookup("d1", 1).len(), 1);
    }

    #[test]
    fn csv_reports_offending_line() {
        let text = "timestamp,device_id,event_type,site,ua_ctx,ad_key,bucket,conv_value,conv_max_value,queriers\n\
                    100,d1,imp,news.ex,a,shoes,2,,,\n\
                    200,d1,conv,shoes.ex,c,shoes,,200,150,\n";
        match EventStore::from_csv(text.as_bytes(), DEFAULT_EPOCH_LENGTH) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_empty_file() {
        let (store, rows) = EventStore::from_csv("".as_bytes(), DEFAULT_EPOCH_LENGTH).unwrap();
        assert_eq!(rows, 0);
        assert!(store.is_empty());
    }
}
