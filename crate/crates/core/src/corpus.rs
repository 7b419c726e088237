//! Item catalog and interaction-log ingestion.
//!
//! Both loaders read JSON-lines files. Rows that fail validation are
//! dropped and counted rather than aborting the load, so
//! `accepted + rejected` always equals the number of non-blank input rows.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type ItemId = String;

const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: no valid item rows ({rejected} rejected)")]
    NoValidRows { path: String, rejected: usize },
    #[error("dimension must be positive")]
    ZeroDimension,
    #[error("item {0}: {1}")]
    InvalidItem(ItemId, String),
}

/// A catalog entry. Visual content is carried as precomputed captions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: ItemId,
    pub title: String,
    pub topic_vector: Vec<f64>,
    pub traffic_weight: f64,
    #[serde(default)]
    pub frame_captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thumbnail_caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visually_interesting_score: Option<f64>,
}

impl Item {
    /// Checks the row against the catalog dimension and rescales the topic
    /// vector to unit norm.
    fn normalize(mut self, dimension: usize) -> Result<Self, String> {
        if self.item_id.is_empty() {
            return Err("empty item_id".into());
        }
        if self.topic_vector.len() != dimension {
            return Err(format!(
                "topic_vector has length {}, expected {dimension}",
                self.topic_vector.len()
            ));
        }
        if self.topic_vector.iter().any(|x| !x.is_finite()) {
            return Err("non-finite topic_vector component".into());
        }
        let norm = l2_norm(&self.topic_vector);
        if norm == 0.0 {
            return Err("zero topic_vector".into());
        }
        for x in &mut self.topic_vector {
            *x /= norm;
        }
        if !self.traffic_weight.is_finite() || self.traffic_weight < 0.0 {
            return Err(format!("invalid traffic_weight {}", self.traffic_weight));
        }
        if let Some(s) = self.visually_interesting_score {
            if !(0.0..=1.0).contains(&s) {
                return Err(format!("visually_interesting_score {s} outside [0,1]"));
            }
        }
        Ok(self)
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub accepted: usize,
    pub rejected: usize,
}

impl IngestStats {
    pub fn total(&self) -> usize {
        self.accepted + self.rejected
    }
}

#[derive(Debug, Clone)]
pub struct ItemCatalog {
    items: BTreeMap<ItemId, Item>,
    dimension: usize,
    pub ingest_stats: IngestStats,
}

impl ItemCatalog {
    /// Builds a catalog from in-memory items with the same validation and
    /// first-wins duplicate policy as [`load_items`].
    pub fn from_items(
        items: impl IntoIterator<Item = Item>,
        dimension: usize,
    ) -> Result<Self, CorpusError> {
        if dimension == 0 {
            return Err(CorpusError::ZeroDimension);
        }
        let mut catalog = ItemCatalog {
            items: BTreeMap::new(),
            dimension,
            ingest_stats: IngestStats::default(),
        };
        for item in items {
            catalog.ingest(item);
        }
        Ok(catalog)
    }

    fn ingest(&mut self, item: Item) -> bool {
        if self.items.contains_key(&item.item_id) {
            log::debug!("duplicate item_id {} rejected", item.item_id);
            self.ingest_stats.rejected += 1;
            return false;
        }
        match item.normalize(self.dimension) {
            Ok(item) => {
                self.items.insert(item.item_id.clone(), item);
                self.ingest_stats.accepted += 1;
                true
            }
            Err(reason) => {
                log::debug!("item row rejected: {reason}");
                self.ingest_stats.rejected += 1;
                false
            }
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Item> {
        self.items.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.items.contains_key(id)
    }

    /// Items in ascending `item_id` order.
    pub fn items(&self) -> impl Iterator<Item = &Item> {
        self.items.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = &ItemId> {
        self.items.keys()
    }

    /// Writes the accepted items back out as JSON-lines.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        write_jsonl(path, self.items.values())
    }
}

pub(crate) fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    rows: impl IntoIterator<Item = &'a T>,
) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for row in rows {
        serde_json::to_writer(&mut out, row).map_err(|e| io_err(e.into()))?;
        out.write_all(b"\n").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut lines = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err)?;
        if !line.trim().is_empty() {
            lines.push(line);
        }
    }
    Ok(lines)
}

/// Loads a JSON-lines item file. Topic vectors are rescaled to unit norm;
/// malformed rows, wrong dimensions and duplicate ids (first wins) are
/// rejected and counted.
pub fn load_items(path: &Path, dimension: usize) -> Result<ItemCatalog, CorpusError> {
    let mut catalog = ItemCatalog::from_items(std::iter::empty(), dimension)?;
    for line in read_lines(path)? {
        match serde_json::from_str::<Item>(&line) {
            Ok(item) => {
                catalog.ingest(item);
            }
            Err(e) => {
                log::debug!("malformed item row: {e}");
                catalog.ingest_stats.rejected += 1;
            }
        }
    }
    if catalog.is_empty() {
        return Err(CorpusError::NoValidRows {
            path: path.display().to_string(),
            rejected: catalog.ingest_stats.rejected,
        });
    }
    Ok(catalog)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: String,
    pub context_item_id: ItemId,
    pub next_item_id: ItemId,
    pub satisfied: bool,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Default)]
pub struct InteractionLog {
    pub records: Vec<InteractionRecord>,
    pub ingest_stats: IngestStats,
}

impl InteractionLog {
    pub fn from_records(records: Vec<InteractionRecord>) -> Self {
        let ingest_stats = IngestStats {
            accepted: records.len(),
            rejected: 0,
        };
        InteractionLog {
            records,
            ingest_stats,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records ordered by (timestamp, user_id); the stored order is untouched.
    pub fn sorted(&self) -> Vec<InteractionRecord> {
        let mut out = self.records.clone();
        out.sort_by(|a, b| {
            (a.timestamp, &a.user_id).cmp(&(b.timestamp, &b.user_id))
        });
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        write_jsonl(path, &self.records)
    }
}

/// Loads a JSON-lines interaction file. Records are kept in file order;
/// rows that fail to parse or reference unknown items are dropped and
/// counted.
pub fn load_interactions(path: &Path, catalog: &ItemCatalog) -> Result<InteractionLog, CorpusError> {
    let mut log = InteractionLog::default();
    for line in read_lines(path)? {
        match serde_json::from_str::<InteractionRecord>(&line) {
            Ok(r) if catalog.contains(&r.context_item_id) && catalog.contains(&r.next_item_id) => {
                log.records.push(r);
                log.ingest_stats.accepted += 1;
            }
            Ok(r) => {
                log::debug!(
                    "interaction {} -> {} references an unknown item",
                    r.context_item_id,
                    r.next_item_id
                );
                log.ingest_stats.rejected += 1;
            }
            Err(e) => {
                log::debug!("malformed interaction row: {e}");
                log.ingest_stats.rejected += 1;
            }
        }
    }
    Ok(log)
}

/// Fraction of logged next-item impressions that fall inside `subset`.
/// An empty log has coverage 0.
pub fn impression_coverage(subset: &HashSet<ItemId>, log: &InteractionLog) -> f64 {
    if log.is_empty() {
        return 0.0;
    }
    let covered = log
        .records
        .iter()
        .filter(|r| subset.contains(&r.next_item_id))
        .count();
    covered as f64 / log.len() as f64
}

/// Per-item count of next-item impressions in the log.
pub fn impression_counts(log: &InteractionLog) -> HashMap<&str, usize> {
    let mut counts = HashMap::new();
    for r in &log.records {
        *counts.entry(r.next_item_id.as_str()).or_insert(0) += 1;
    }
    counts
}

/// A single view in a raw per-user watch stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEvent {
    pub user_id: String,
    pub item_id: ItemId,
    pub satisfied: bool,
    pub timestamp: i64,
}

/// Turns raw views into (context, next) transitions. Views are ordered per
/// user by timestamp; consecutive views further apart than `session_gap_secs`
/// start a new session and do not form a transition.
pub fn sessionize(views: &[ViewEvent], session_gap_secs: i64) -> Vec<InteractionRecord> {
    let mut by_user: BTreeMap<&str, Vec<&ViewEvent>> = BTreeMap::new();
    for v in views {
        by_user.entry(v.user_id.as_str()).or_default().push(v);
    }
    let mut out = Vec::new();
    for (user, mut seq) in by_user {
        seq.sort_by_key(|v| v.timestamp);
        for pair in seq.windows(2) {
            let (prev, next) = (pair[0], pair[1]);
            if next.timestamp - prev.timestamp > session_gap_secs {
                continue;
            }
            out.push(InteractionRecord {
                user_id: user.to_string(),
                context_item_id: prev.item_id.clone(),
                next_item_id: next.item_id.clone(),
                satisfied: next.satisfied,
                timestamp: next.timestamp,
            });
        }
    }
    out
}

/// Whether `v` has unit L2 norm up to a small tolerance.
pub fn is_unit(v: &[f64]) -> bool {
    (l2_norm(v) - 1.0).abs() <= NORM_TOLERANCE
}
