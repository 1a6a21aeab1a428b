//! Behavior logs: ingestion, vocabularies, sequence construction, negative
//! sampling and synthetic generation.

mod negative;
mod sequence;
mod synthetic;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::temporal::{DatasetClock, Timestamp};

pub use negative::{sample_negative, with_negatives};
pub use sequence::{
    build_sequences, build_training_sequences, group_by_user, split_by_user_hash, BehaviorSequence,
    SequenceBuild,
};
pub use synthetic::{
    generate_synthetic, validate_synthetic, CategoryPattern, SyntheticSpec, Violation,
};

/// An identifier as it appears in the source file.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawId {
    Int(i64),
    Str(String),
}

impl fmt::Display for RawId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RawId::Int(v) => write!(f, "{v}"),
            RawId::Str(s) => f.write_str(s),
        }
    }
}

/// One line of a behavior log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventRecord {
    pub user: RawId,
    pub item: RawId,
    pub category: RawId,
    pub ts: u64,
}

/// A click with dense ids (0 is reserved for padding / unknown).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BehaviorEvent {
    pub user: u32,
    pub item: u32,
    pub category: u32,
    pub timestamp: Timestamp,
}

/// Bijection between raw ids and dense indices `1..len`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdMap {
    forward: HashMap<RawId, u32>,
    reverse: Vec<RawId>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_raw(ids: Vec<RawId>) -> Result<Self> {
        let mut map = Self::new();
        for id in ids {
            if map.forward.contains_key(&id) {
                return Err(Error::Config(format!("duplicate vocabulary entry {id}")));
            }
            map.insert(id);
        }
        Ok(map)
    }

    pub fn insert(&mut self, id: RawId) -> u32 {
        if let Some(&ix) = self.forward.get(&id) {
            return ix;
        }
        let ix = self.reverse.len() as u32 + 1;
        self.forward.insert(id.clone(), ix);
        self.reverse.push(id);
        ix
    }

    /// Dense index of a known id; unknown ids map to 0.
    pub fn index(&self, id: &RawId) -> u32 {
        self.forward.get(id).copied().unwrap_or(0)
    }

    pub fn raw(&self, index: u32) -> Option<&RawId> {
        index
            .checked_sub(1)
            .and_then(|i| self.reverse.get(i as usize))
    }

    /// Table size including the reserved index 0.
    pub fn table_size(&self) -> usize {
        self.reverse.len() + 1
    }

    pub fn raw_ids(&self) -> &[RawId] {
        &self.reverse
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    #[serde(with = "idmap_serde")]
    pub users: IdMap,
    #[serde(with = "idmap_serde")]
    pub items: IdMap,
    #[serde(with = "idmap_serde")]
    pub categories: IdMap,
    /// Category index of each item index (entry 0 is padding).
    pub item_category: Vec<u32>,
}

mod idmap_serde {
    use super::{IdMap, RawId};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &IdMap, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(m.raw_ids())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<IdMap, D::Error> {
        let ids = Vec::<RawId>::deserialize(d)?;
        IdMap::from_raw(ids).map_err(serde::de::Error::custom)
    }
}

impl Vocabulary {
    pub fn category_of(&self, item: u32) -> u32 {
        self.item_category.get(item as usize).copied().unwrap_or(0)
    }
}

/// Events plus the vocabularies and clock derived from them.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub events: Vec<BehaviorEvent>,
    pub vocab: Vocabulary,
    pub clock: DatasetClock,
    pub malformed: usize,
}

impl Dataset {
    /// Builds vocabularies in order of first appearance.
    pub fn from_records(records: &[EventRecord]) -> Self {
        let mut vocab = Vocabulary {
            item_category: vec![0],
            ..Default::default()
        };
        let mut events = Vec::with_capacity(records.len());
        for r in records {
            let user = vocab.users.insert(r.user.clone());
            let item = vocab.items.insert(r.item.clone());
            let category = vocab.categories.insert(r.category.clone());
            if item as usize == vocab.item_category.len() {
                vocab.item_category.push(category);
            }
            events.push(BehaviorEvent {
                user,
                item,
                category,
                timestamp: Timestamp(r.ts),
            });
        }
        let clock = DatasetClock::from_timestamps(events.iter().map(|e| e.timestamp))
            .unwrap_or_else(|| DatasetClock::new(Timestamp(0), Timestamp(0)));
        Self {
            events,
            vocab,
            clock,
            malformed: 0,
        }
    }

    /// Maps records through a frozen vocabulary and clock (from a
    /// checkpoint). Unknown ids become index 0.
    pub fn with_frozen(records: &[EventRecord], vocab: &Vocabulary, clock: DatasetClock) -> Self {
        let mut users = vocab.users.clone();
        let events = records
            .iter()
            .map(|r| BehaviorEvent {
                // users are never embedded, so new users are simply appended
                user: users.insert(r.user.clone()),
                item: vocab.items.index(&r.item),
                category: vocab.categories.index(&r.category),
                timestamp: Timestamp(r.ts),
            })
            .collect();
        let mut vocab = vocab.clone();
        vocab.users = users;
        Self {
            events,
            vocab,
            clock,
            malformed: 0,
        }
    }

    pub fn records(&self) -> Vec<EventRecord> {
        let raw = |m: &IdMap, i: u32| m.raw(i).cloned().unwrap_or(RawId::Int(0));
        self.events
            .iter()
            .map(|e| EventRecord {
                user: raw(&self.vocab.users, e.user),
                item: raw(&self.vocab.items, e.item),
                category: raw(&self.vocab.categories, e.category),
                ts: e.timestamp.0,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadStats {
    pub lines: usize,
    pub malformed: usize,
}

fn parse_csv(text: &str) -> (Vec<EventRecord>, LoadStats) {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    let mut stats = LoadStats {
        lines: 0,
        malformed: 0,
    };
    let to_raw = |s: &str| match s.parse::<i64>() {
        Ok(v) => RawId::Int(v),
        Err(_) => RawId::Str(s.to_string()),
    };
    for row in reader.records() {
        stats.lines += 1;
        let parsed = row.ok().and_then(|r| {
            if r.len() != 4 || r.iter().take(3).any(str::is_empty) {
                return None;
            }
            let ts = r[3].parse::<u64>().ok()?;
            Some(EventRecord {
                user: to_raw(&r[0]),
                item: to_raw(&r[1]),
                category: to_raw(&r[2]),
                ts,
            })
        });
        match parsed {
            Some(rec) => out.push(rec),
            None => stats.malformed += 1,
        }
    }
    (out, stats)
}

fn parse_jsonl(text: &str) -> (Vec<EventRecord>, LoadStats) {
    let mut out = Vec::new();
    let mut stats = LoadStats {
        lines: 0,
        malformed: 0,
    };
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        stats.lines += 1;
        match serde_json::from_str::<EventRecord>(line) {
            Ok(rec) => out.push(rec),
            Err(_) => stats.malformed += 1,
        }
    }
    (out, stats)
}

/// Reads JSONL (or CSV with a `user,item,category,ts` header) records.
/// Malformed lines are skipped; more than 1% of them is a hard failure.
pub fn read_records(path: &Path) -> Result<(Vec<EventRecord>, LoadStats)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
        || text
            .lines()
            .next()
            .is_some_and(|l| l.trim_start().starts_with("user,"));
    let (records, stats) = if is_csv {
        parse_csv(&text)
    } else {
        parse_jsonl(&text)
    };
    if stats.malformed * 100 > stats.lines {
        return Err(Error::TooManyMalformed {
            path: path.to_path_buf(),
            malformed: stats.malformed,
            total: stats.lines,
        });
    }
    if stats.malformed > 0 {
        log::warn!(
            "{}: skipped {} malformed of {} lines",
            path.display(),
            stats.malformed,
            stats.lines
        );
    }
    Ok((records, stats))
}

pub fn load_behavior_log(path: &Path) -> Result<Dataset> {
    let (records, stats) = read_records(path)?;
    let mut ds = Dataset::from_records(&records);
    ds.malformed = stats.malformed;
    Ok(ds)
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[EventRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io("<jsonl>", e))?;
    }
    Ok(())
}
