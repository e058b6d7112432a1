//! Domain entities and ingestion: events, ads, image features, signal
//! weighting, time windowing and sparsity filtering.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Conventional file names inside a data directory.
pub const EVENTS_FILE: &str = "events.tsv";
pub const ADS_FILE: &str = "ads.tsv";
pub const IMAGES_FILE: &str = "images.imgf";

pub const SECONDS_PER_DAY: i64 = 86_400;

/// The seven implicit behavior signals collected from the marketplace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SignalKind {
    ViewAd,
    ShowInterest,
    FollowSeller,
    FavoriteAd,
    SendMessage,
    ShowPhone,
    ContactSeller,
}

impl SignalKind {
    pub const ALL: [SignalKind; 7] = [
        SignalKind::ViewAd,
        SignalKind::ShowInterest,
        SignalKind::FollowSeller,
        SignalKind::FavoriteAd,
        SignalKind::SendMessage,
        SignalKind::ShowPhone,
        SignalKind::ContactSeller,
    ];

    pub fn token(self) -> &'static str {
        match self {
            SignalKind::ViewAd => "view_ad",
            SignalKind::ShowInterest => "show_interest",
            SignalKind::FollowSeller => "follow_seller",
            SignalKind::FavoriteAd => "favorite_ad",
            SignalKind::SendMessage => "send_message",
            SignalKind::ShowPhone => "show_phone",
            SignalKind::ContactSeller => "contact_seller",
        }
    }

    pub fn parse(token: &str) -> Option<SignalKind> {
        SignalKind::ALL.into_iter().find(|k| k.token() == token)
    }

    /// Signals close to an actual transaction; they must never be weighted
    /// below a plain ad view.
    pub fn is_conversion(self) -> bool {
        matches!(
            self,
            SignalKind::SendMessage | SignalKind::ShowPhone | SignalKind::ContactSeller
        )
    }

    fn idx(self) -> usize {
        SignalKind::ALL.iter().position(|&k| k == self).unwrap()
    }
}

/// One user action on one ad.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub user: String,
    pub item: String,
    pub signal: SignalKind,
    /// UTC seconds.
    pub ts: i64,
}

pub type EventLog = Vec<Event>;

/// An ad (classified): the content side of an item.
#[derive(Debug, Clone, PartialEq)]
pub struct Ad {
    pub item_id: String,
    pub title: String,
    pub description: String,
    pub category: String,
    pub subcategory: String,
    pub postcode: String,
    pub created_at: i64,
    pub active: bool,
}

/// Validated ad collection: unique item ids, and every subcategory label
/// always paired with the same parent category.
#[derive(Debug, Clone)]
pub struct AdCorpus {
    ads: Vec<Ad>,
    index: HashMap<String, usize>,
}

impl AdCorpus {
    pub fn from_ads(ads: Vec<Ad>) -> Result<Self> {
        let mut index = HashMap::with_capacity(ads.len());
        let mut parents: HashMap<&str, &str> = HashMap::new();
        for (i, ad) in ads.iter().enumerate() {
            if index.insert(ad.item_id.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!(
                    "duplicate item id {}",
                    ad.item_id
                )));
            }
            match parents.get(ad.subcategory.as_str()) {
                Some(&cat) if cat != ad.category => {
                    return Err(Error::InvalidInput(format!(
                        "subcategory {} appears under categories {} and {}",
                        ad.subcategory, cat, ad.category
                    )));
                }
                _ => {
                    parents.insert(&ad.subcategory, &ad.category);
                }
            }
        }
        Ok(AdCorpus { ads, index })
    }

    pub fn get(&self, item_id: &str) -> Option<&Ad> {
        self.index.get(item_id).map(|&i| &self.ads[i])
    }

    pub fn contains(&self, item_id: &str) -> bool {
        self.index.contains_key(item_id)
    }

    pub fn len(&self) -> usize {
        self.ads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ads.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Ad> {
        self.ads.iter()
    }

    pub fn ads(&self) -> &[Ad] {
        &self.ads
    }
}

/// Per-signal confidence weights used to build interaction matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalWeightConfig {
    weights: [f64; 7],
}

impl SignalWeightConfig {
    pub fn new(weights: [(SignalKind, f64); 7]) -> Result<Self> {
        let mut w = [0.0; 7];
        for (kind, v) in weights {
            w[kind.idx()] = v;
        }
        let cfg = SignalWeightConfig { weights: w };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn uniform(weight: f64) -> Result<Self> {
        SignalWeightConfig::new(SignalKind::ALL.map(|k| (k, weight)))
    }

    fn validate(&self) -> Result<()> {
        for kind in SignalKind::ALL {
            let w = self.weights[kind.idx()];
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::Config(format!(
                    "weight for {} must be positive, got {w}",
                    kind.token()
                )));
            }
        }
        let view = self.weights[SignalKind::ViewAd.idx()];
        for kind in SignalKind::ALL.into_iter().filter(|k| k.is_conversion()) {
            if self.weights[kind.idx()] < view {
                return Err(Error::Config(format!(
                    "conversion signal {} weighted below view_ad ({} < {view})",
                    kind.token(),
                    self.weights[kind.idx()]
                )));
            }
        }
        Ok(())
    }

    pub fn weight(&self, kind: SignalKind) -> f64 {
        self.weights[kind.idx()]
    }

    /// Parses a `signal=weight` file, one signal per line. Every signal
    /// must appear exactly once.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut weights = [f64::NAN; 7];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, lineno + 1, "expected signal=weight"))?;
            let kind = SignalKind::parse(key.trim()).ok_or_else(|| {
                Error::parse(path, lineno + 1, format!("unknown signal token {key:?}"))
            })?;
            let w: f64 = value.trim().parse().map_err(|_| {
                Error::parse(path, lineno + 1, format!("bad weight {value:?}"))
            })?;
            weights[kind.idx()] = w;
        }
        for kind in SignalKind::ALL {
            if weights[kind.idx()].is_nan() {
                return Err(Error::Config(format!(
                    "missing weight for {}",
                    kind.token()
                )));
            }
        }
        let cfg = SignalWeightConfig { weights };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_file(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for kind in SignalKind::ALL {
            out.push_str(&format!("{}={}\n", kind.token(), self.weights[kind.idx()]));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

impl Default for SignalWeightConfig {
    /// Weights monotone in conversion proximity; see the glossary of
    /// signals for the ordering rationale.
    fn default() -> Self {
        SignalWeightConfig::new([
            (SignalKind::ViewAd, 1.0),
            (SignalKind::ShowInterest, 2.0),
            (SignalKind::FollowSeller, 3.0),
            (SignalKind::FavoriteAd, 3.0),
            (SignalKind::SendMessage, 5.0),
            (SignalKind::ShowPhone, 5.0),
            (SignalKind::ContactSeller, 5.0),
        ])
        .expect("default weights valid")
    }
}

pub fn signal_weight(kind: SignalKind, cfg: &SignalWeightConfig) -> f64 {
    cfg.weight(kind)
}

/// Loads one event per line: `user_id<TAB>item_id<TAB>signal<TAB>ts`.
pub fn load_events(path: &Path) -> Result<EventLog> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut events = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                path,
                lineno + 1,
                format!("expected 4 tab-separated fields, got {}", fields.len()),
            ));
        }
        let signal = SignalKind::parse(fields[2]).ok_or_else(|| {
            Error::parse(
                path,
                lineno + 1,
                format!("unknown signal token {:?}", fields[2]),
            )
        })?;
        let ts: i64 = fields[3].parse().map_err(|_| {
            Error::parse(path, lineno + 1, format!("bad timestamp {:?}", fields[3]))
        })?;
        if ts < 0 {
            return Err(Error::parse(
                path,
                lineno + 1,
                format!("negative timestamp {ts}"),
            ));
        }
        events.push(Event {
            user: fields[0].to_owned(),
            item: fields[1].to_owned(),
            signal,
            ts,
        });
    }
    Ok(events)
}

pub fn write_events(path: &Path, events: &[Event]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in events {
        writeln!(w, "{}\t{}\t{}\t{}", e.user, e.item, e.signal.token(), e.ts)
            .map_err(|err| Error::io(path, err))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn escape_text(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            _ => out.push(c),
        }
    }
    out
}

fn unescape_text(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('t') => out.push('\t'),
                Some('n') => out.push('\n'),
                Some('r') => out.push('\r'),
                Some('\\') => out.push('\\'),
                Some(other) => {
                    out.push('\\');
                    out.push(other);
                }
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// Loads the ad corpus, one record per line:
/// `item_id<TAB>category<TAB>subcategory<TAB>postcode<TAB>created_at<TAB>active<TAB>title<TAB>description`.
pub fn load_corpus(path: &Path) -> Result<AdCorpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ads = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 8 {
            return Err(Error::parse(
                path,
                lineno + 1,
                format!("expected 8 tab-separated fields, got {}", fields.len()),
            ));
        }
        let created_at: i64 = fields[4].parse().map_err(|_| {
            Error::parse(path, lineno + 1, format!("bad created_at {:?}", fields[4]))
        })?;
        let active = match fields[5] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::parse(
                    path,
                    lineno + 1,
                    format!("bad active flag {other:?}"),
                ))
            }
        };
        ads.push(Ad {
            item_id: fields[0].to_owned(),
            category: fields[1].to_owned(),
            subcategory: fields[2].to_owned(),
            postcode: fields[3].to_owned(),
            created_at,
            active,
            title: unescape_text(fields[6]),
            description: unescape_text(fields[7]),
        });
    }
    AdCorpus::from_ads(ads)
}

pub fn write_corpus(path: &Path, ads: &[Ad]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ad in ads {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            ad.item_id,
            ad.category,
            ad.subcategory,
            ad.postcode,
            ad.created_at,
            if ad.active { 1 } else { 0 },
            escape_text(&ad.title),
            escape_text(&ad.description),
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Precomputed image feature vectors keyed by item id.
#[derive(Debug, Clone)]
pub struct ImageFeatures {
    dim: usize,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f32>,
}

impl ImageFeatures {
    pub fn new(dim: usize) -> Self {
        ImageFeatures {
            dim,
            ids: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
        }
    }

    pub fn push(&mut self, id: String, feature: &[f32]) -> Result<()> {
        if feature.len() != self.dim {
            return Err(Error::Dimension(format!(
                "image feature for {id} has {} components, expected {}",
                feature.len(),
                self.dim
            )));
        }
        if self.index.insert(id.clone(), self.ids.len()).is_some() {
            return Err(Error::InvalidInput(format!("duplicate image record {id}")));
        }
        self.ids.push(id);
        self.data.extend_from_slice(feature);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index
            .get(id)
            .map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids.iter().enumerate().map(|(i, id)| {
            (
                id.as_str(),
                &self.data[i * self.dim..(i + 1) * self.dim],
            )
        })
    }
}

const IMGF_MAGIC: &[u8; 4] = b"IMGF";

/// Binary image feature file: magic `IMGF`, u32 LE dimension, then records
/// of (u16 LE id length, UTF-8 id, dimension f32 LE values).
pub fn read_image_features(path: &Path) -> Result<ImageFeatures> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != IMGF_MAGIC {
        return Err(Error::parse(path, 0, "bad IMGF magic"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(io)?;
    let dim = u32::from_le_bytes(b4) as usize;
    let mut features = ImageFeatures::new(dim);
    let mut b2 = [0u8; 2];
    let mut record = 0usize;
    loop {
        match r.read_exact(&mut b2) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(Error::io(path, e)),
        }
        record += 1;
        let id_len = u16::from_le_bytes(b2) as usize;
        let mut id_bytes = vec![0u8; id_len];
        r.read_exact(&mut id_bytes).map_err(io)?;
        let id = String::from_utf8(id_bytes)
            .map_err(|_| Error::parse(path, record, "item id is not UTF-8"))?;
        let mut feature = Vec::with_capacity(dim);
        for _ in 0..dim {
            r.read_exact(&mut b4).map_err(io)?;
            feature.push(f32::from_le_bytes(b4));
        }
        features.push(id, &feature)?;
    }
    Ok(features)
}

pub fn write_image_features(path: &Path, features: &ImageFeatures) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(IMGF_MAGIC).map_err(io)?;
    w.write_all(&(features.dim() as u32).to_le_bytes()).map_err(io)?;
    for (id, feature) in features.iter() {
        let id_bytes = id.as_bytes();
        assert!(id_bytes.len() <= u16::MAX as usize, "item id too long");
        w.write_all(&(id_bytes.len() as u16).to_le_bytes()).map_err(io)?;
        w.write_all(id_bytes).map_err(io)?;
        for &v in feature {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Keeps events with `now - ts <= lookback_days * 86400`. The boundary is
/// closed: an event exactly at the cutoff stays. Order is preserved.
pub fn window(events: &[Event], lookback_days: u32, now: i64) -> EventLog {
    assert!(lookback_days > 0, "lookback_days must be positive");
    let horizon = lookback_days as i64 * SECONDS_PER_DAY;
    events
        .iter()
        .filter(|e| now - e.ts <= horizon)
        .cloned()
        .collect()
}

/// Iteratively removes events whose user or item occurs only once, until
/// every surviving user and item appears at least twice.
pub fn filter_sparse(events: &[Event]) -> EventLog {
    let mut kept: Vec<&Event> = events.iter().collect();
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for e in &kept {
            *users.entry(e.user.as_str()).or_default() += 1;
            *items.entry(e.item.as_str()).or_default() += 1;
        }
        let before = kept.len();
        kept.retain(|e| users[e.user.as_str()] >= 2 && items[e.item.as_str()] >= 2);
        if kept.len() == before {
            return kept.into_iter().cloned().collect();
        }
    }
}

/// UTC calendar day index of a timestamp (days since the epoch). Two
/// events share a day iff their indices match.
pub fn day_index(ts: i64) -> i64 {
    ts.div_euclid(SECONDS_PER_DAY)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn ev(user: &str, item: &str, signal: SignalKind, ts: i64) -> Event {
        Event {
            user: user.into(),
            item: item.into(),
            signal,
            ts,
        }
    }

    #[test]
    fn load_events_counts_and_order() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("events.tsv");
        std::fs::write(
            &path,
            "u1\ti1\tview_ad\t100\nu2\ti2\tsend_message\t200\nu1\ti2\tshow_phone\t300\n",
        )
        .unwrap();
        let log = load_events(&path).unwrap();
        assert_eq!(log.len(), 3);
        assert_eq!(log[0].user, "u1");
        assert_eq!(log[1].signal, SignalKind::SendMessage);
        assert_eq!(log[2].ts, 300);
    }

    #[test]
    fn load_events_empty_file() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("events.tsv");
        std::fs::write(&path, "").unwrap();
        assert!(load_events(&path).unwrap().is_empty());
    }

    #[test]
    fn load_events_rejects_unknown_signal_with_line_and_token() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("events.tsv");
        std::fs::write(&path, "u1\ti1\tview_ad\t100\nu1\ti1\tbuy_now\t200\n").unwrap();
        let err = load_events(&path).unwrap_err().to_string();
        assert!(err.contains(":2:"), "missing line number: {err}");
        assert!(err.contains("buy_now"), "missing token: {err}");
    }

    #[test]
    fn load_events_missing_file() {
        assert!(matches!(
            load_events(Path::new("/nonexistent/events.tsv")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn default_weights_match_fixture() {
        let cfg = SignalWeightConfig::default();
        assert_eq!(signal_weight(SignalKind::ViewAd, &cfg), 1.0);
        assert_eq!(signal_weight(SignalKind::SendMessage, &cfg), 5.0);
        let uniform = SignalWeightConfig::uniform(1.0).unwrap();
        assert_eq!(signal_weight(SignalKind::ViewAd, &uniform), 1.0);
    }

    #[test]
    fn weight_config_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("weights.cfg");
        let cfg = SignalWeightConfig::default();
        cfg.to_file(&path).unwrap();
        let back = SignalWeightConfig::from_file(&path).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn weight_config_rejects_nonpositive_and_inverted() {
        assert!(SignalWeightConfig::new([
            (SignalKind::ViewAd, 0.0),
            (SignalKind::ShowInterest, 1.0),
            (SignalKind::FollowSeller, 1.0),
            (SignalKind::FavoriteAd, 1.0),
            (SignalKind::SendMessage, 1.0),
            (SignalKind::ShowPhone, 1.0),
            (SignalKind::ContactSeller, 1.0),
        ])
        .is_err());
        // conversion signal below view_ad
        assert!(SignalWeightConfig::new([
            (SignalKind::ViewAd, 2.0),
            (SignalKind::ShowInterest, 2.0),
            (SignalKind::FollowSeller, 2.0),
            (SignalKind::FavoriteAd, 2.0),
            (SignalKind::SendMessage, 1.0),
            (SignalKind::ShowPhone, 2.0),
            (SignalKind::ContactSeller, 2.0),
        ])
        .is_err());
    }

    #[test]
    fn window_boundaries() {
        let now = 100 * SECONDS_PER_DAY;
        let log = vec![
            ev("u", "a", SignalKind::ViewAd, now - 21 * SECONDS_PER_DAY),
            ev("u", "b", SignalKind::ViewAd, now - 20 * SECONDS_PER_DAY),
            ev("u", "c", SignalKind::ViewAd, now - 1),
        ];
        let kept = window(&log, 20, now);
        let items: Vec<&str> = kept.iter().map(|e| e.item.as_str()).collect();
        assert_eq!(items, vec!["b", "c"]);
        // everything inside the window is the identity case
        assert_eq!(window(&log, 30, now), log);
    }

    #[test]
    fn filter_sparse_examples() {
        // single-event user removed
        let log = vec![ev("u1", "i1", SignalKind::ViewAd, 1)];
        assert!(filter_sparse(&log).is_empty());

        // two users with two events each on shared items: already a fixpoint
        let log = vec![
            ev("u1", "i1", SignalKind::ViewAd, 1),
            ev("u1", "i2", SignalKind::ViewAd, 2),
            ev("u2", "i1", SignalKind::ViewAd, 3),
            ev("u2", "i2", SignalKind::ViewAd, 4),
        ];
        assert_eq!(filter_sparse(&log), log);

        // chain: removing u2's only event makes i2 a singleton, which takes
        // u1's i2 event with it, leaving i1 a singleton as well
        let log = vec![
            ev("u1", "i1", SignalKind::ViewAd, 1),
            ev("u1", "i2", SignalKind::ViewAd, 2),
            ev("u2", "i2", SignalKind::ViewAd, 3),
        ];
        assert!(filter_sparse(&log).is_empty());
    }

    /// One-at-a-time reference fixpoint: remove any single event whose user
    /// or item count is 1 and recount from scratch, until none remains.
    fn filter_sparse_oracle(events: &[Event]) -> EventLog {
        let mut kept: Vec<Event> = events.to_vec();
        loop {
            let mut users: HashMap<&str, usize> = HashMap::new();
            let mut items: HashMap<&str, usize> = HashMap::new();
            for e in &kept {
                *users.entry(e.user.as_str()).or_default() += 1;
                *items.entry(e.item.as_str()).or_default() += 1;
            }
            let pos = kept
                .iter()
                .position(|e| users[e.user.as_str()] < 2 || items[e.item.as_str()] < 2);
            match pos {
                Some(i) => {
                    kept.remove(i);
                }
                None => return kept,
            }
        }
    }

    fn small_log_strategy() -> impl Strategy<Value = Vec<Event>> {
        prop::collection::vec((0..4u8, 0..4u8, 0..1000i64), 0..10).prop_map(|raw| {
            raw.into_iter()
                .map(|(u, i, ts)| ev(&format!("u{u}"), &format!("i{i}"), SignalKind::ViewAd, ts))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn filter_sparse_matches_oracle(log in small_log_strategy()) {
            prop_assert_eq!(filter_sparse(&log), filter_sparse_oracle(&log));
        }

        #[test]
        fn filter_sparse_idempotent(log in small_log_strategy()) {
            let once = filter_sparse(&log);
            prop_assert_eq!(filter_sparse(&once), once.clone());
        }

        #[test]
        fn window_subset_and_monotone(
            log in small_log_strategy(),
            d1 in 1u32..20,
            d2 in 1u32..20,
        ) {
            let now = 1000 * SECONDS_PER_DAY;
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let small = window(&log, lo, now);
            let big = window(&log, hi, now);
            for e in &small {
                prop_assert!(big.contains(e));
            }
            for e in &big {
                prop_assert!(log.contains(e));
            }
        }

        #[test]
        fn event_round_trip(log in small_log_strategy()) {
            let dir = tempdir().unwrap();
            let path = dir.path().join("e.tsv");
            write_events(&path, &log).unwrap();
            prop_assert_eq!(load_events(&path).unwrap(), log);
        }
    }

    #[test]
    fn corpus_round_trip_with_escapes() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ads.tsv");
        let ads = vec![
            Ad {
                item_id: "i1".into(),
                title: "piano\twith\nlegs \\ pedals".into(),
                description: "old\r\nbut good".into(),
                category: "hobby".into(),
                subcategory: "music".into(),
                postcode: "0150".into(),
                created_at: 1000,
                active: true,
            },
            Ad {
                item_id: "i2".into(),
                title: "plain".into(),
                description: "".into(),
                category: "hobby".into(),
                subcategory: "music".into(),
                postcode: "0151".into(),
                created_at: 2000,
                active: false,
            },
        ];
        write_corpus(&path, &ads).unwrap();
        let corpus = load_corpus(&path).unwrap();
        assert_eq!(corpus.ads(), ads.as_slice());
    }

    #[test]
    fn corpus_rejects_duplicates_and_inconsistent_parents() {
        let ad = |id: &str, cat: &str, sub: &str| Ad {
            item_id: id.into(),
            title: "t".into(),
            description: "d".into(),
            category: cat.into(),
            subcategory: sub.into(),
            postcode: "p".into(),
            created_at: 0,
            active: true,
        };
        assert!(AdCorpus::from_ads(vec![ad("i1", "a", "x"), ad("i1", "a", "x")]).is_err());
        assert!(AdCorpus::from_ads(vec![ad("i1", "a", "x"), ad("i2", "b", "x")]).is_err());
    }

    #[test]
    fn image_features_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("f.imgf");
        let mut f = ImageFeatures::new(3);
        f.push("i1".into(), &[1.0, 2.0, 3.0]).unwrap();
        f.push("i2".into(), &[-0.5, 0.0, 0.25]).unwrap();
        write_image_features(&path, &f).unwrap();
        let back = read_image_features(&path).unwrap();
        assert_eq!(back.dim(), 3);
        assert_eq!(back.get("i2").unwrap(), &[-0.5, 0.0, 0.25]);
        assert_eq!(back.len(), 2);
    }

    #[test]
    fn image_features_reject_bad_magic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("f.imgf");
        std::fs::write(&path, b"NOPE\x02\x00\x00\x00").unwrap();
        assert!(read_image_features(&path).is_err());
    }

    #[test]
    fn day_index_groups_by_utc_date() {
        assert_eq!(day_index(0), 0);
        assert_eq!(day_index(SECONDS_PER_DAY - 1), 0);
        assert_eq!(day_index(SECONDS_PER_DAY), 1);
    }
}
