//! Similar / serendipitous pair labelling, satisfaction mining and
//! fine-tuning data curation.
//!
//! Two items are *similar* at level `l` when they share the level-`l`
//! cluster, and *serendipitous* when they differ at level `l` but share the
//! broader level-`l - δ` cluster.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustertree::{ClusterTree, NodeId, TreeError};
use crate::corpus::{InteractionLog, ItemCatalog, ItemId};
use crate::persist::{self, PersistError};
use crate::planner::{assemble_prompt, Prompt, PromptOptions, PromptType};

#[derive(Debug, Error)]
pub enum SerendipityError {
    #[error("invalid level pair l={level}, delta={delta} for a {levels}-level tree")]
    InvalidLevels {
        level: usize,
        delta: usize,
        levels: usize,
    },
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error("training file {path}: {reason}")]
    TrainingFile { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SerendipityLabel {
    Similar,
    Serendipitous,
    Unrelated,
}

/// The comparison level `l` and the broadening step `δ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub level: usize,
    pub delta: usize,
}

impl Default for LevelSpec {
    fn default() -> Self {
        LevelSpec { level: 3, delta: 1 }
    }
}

impl LevelSpec {
    pub fn broad_level(&self) -> usize {
        self.level - self.delta
    }

    pub fn validate(&self, levels: usize) -> Result<(), SerendipityError> {
        if self.delta == 0 || self.delta > self.level || self.level >= levels {
            return Err(SerendipityError::InvalidLevels {
                level: self.level,
                delta: self.delta,
                levels,
            });
        }
        Ok(())
    }
}

pub fn classify_pair(
    tree: &ClusterTree,
    v: &str,
    n: &str,
    spec: LevelSpec,
) -> Result<SerendipityLabel, SerendipityError> {
    spec.validate(tree.levels())?;
    let v_path = tree.item_path(v)?;
    let n_path = tree.item_path(n)?;
    Ok(label_paths(&v_path.0, &n_path.0, spec))
}

fn label_paths(v: &[NodeId], n: &[NodeId], spec: LevelSpec) -> SerendipityLabel {
    if v[spec.level] == n[spec.level] {
        SerendipityLabel::Similar
    } else if v[spec.broad_level()] == n[spec.broad_level()] {
        SerendipityLabel::Serendipitous
    } else {
        SerendipityLabel::Unrelated
    }
}

/// Aggregated satisfaction of one context item on one target cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SatisfactionStat {
    pub context_item_id: ItemId,
    pub target_cluster_id: NodeId,
    pub positive_count: u64,
    pub total_count: u64,
    pub rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    pub levels: LevelSpec,
    /// Additive smoothing: rate = (pos + α) / (total + 2α). Zero gives the raw fraction.
    #[serde(default)]
    pub smoothing: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            levels: LevelSpec::default(),
            smoothing: 0.0,
        }
    }
}

/// Mining result plus the bookkeeping needed to audit it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MiningOutcome {
    pub stats: Vec<SatisfactionStat>,
    pub serendipitous: usize,
    pub similar: usize,
    pub unrelated: usize,
    pub self_transitions: usize,
    pub unresolved: usize,
}

pub fn smoothed_rate(positive: u64, total: u64, alpha: f64) -> f64 {
    let denom = total as f64 + 2.0 * alpha;
    if denom <= 0.0 {
        0.0
    } else {
        (positive as f64 + alpha) / denom
    }
}

/// Keeps the serendipitous transitions of the log and aggregates them per
/// (context item, level-`l` cluster of the next item). Output is sorted by
/// (context id, cluster id).
pub fn mine_pairs(
    log: &InteractionLog,
    tree: &ClusterTree,
    config: &MiningConfig,
) -> Result<MiningOutcome, SerendipityError> {
    let spec = config.levels;
    spec.validate(tree.levels())?;
    let mut out = MiningOutcome::default();
    let mut acc: BTreeMap<(&str, &str), (u64, u64)> = BTreeMap::new();
    for r in &log.records {
        if r.context_item_id == r.next_item_id {
            out.self_transitions += 1;
            continue;
        }
        let (Ok(v), Ok(n)) = (tree.item_path(&r.context_item_id), tree.item_path(&r.next_item_id)) else {
            out.unresolved += 1;
            continue;
        };
        match label_paths(&v.0, &n.0, spec) {
            SerendipityLabel::Similar => out.similar += 1,
            SerendipityLabel::Unrelated => out.unrelated += 1,
            SerendipityLabel::Serendipitous => {
                out.serendipitous += 1;
                let cluster = tree.item_ancestor(&r.next_item_id, spec.level)?;
                let slot = acc
                    .entry((r.context_item_id.as_str(), cluster.as_str()))
                    .or_insert((0, 0));
                slot.0 += r.satisfied as u64;
                slot.1 += 1;
            }
        }
    }
    out.stats = acc
        .into_iter()
        .map(|((ctx, cluster), (pos, total))| SatisfactionStat {
            context_item_id: ctx.to_string(),
            target_cluster_id: cluster.to_string(),
            positive_count: pos,
            total_count: total,
            rate: smoothed_rate(pos, total, config.smoothing),
        })
        .collect();
    Ok(out)
}

/// (positive, total) per (context, next item) pair.
pub type PairCounts = BTreeMap<(ItemId, ItemId), (u64, u64)>;

/// Pair-level view: satisfaction per individual (context, next item) pair,
/// restricted to serendipitous pairs. Returns (positive, total).
pub fn pair_rates(
    log: &InteractionLog,
    tree: &ClusterTree,
    spec: LevelSpec,
) -> Result<PairCounts, SerendipityError> {
    spec.validate(tree.levels())?;
    let mut acc = BTreeMap::new();
    for r in &log.records {
        if r.context_item_id == r.next_item_id {
            continue;
        }
        if let (Ok(v), Ok(n)) = (tree.item_path(&r.context_item_id), tree.item_path(&r.next_item_id)) {
            if label_paths(&v.0, &n.0, spec) == SerendipityLabel::Serendipitous {
                let slot: &mut (u64, u64) = acc
                    .entry((r.context_item_id.clone(), r.next_item_id.clone()))
                    .or_default();
                slot.0 += r.satisfied as u64;
                slot.1 += 1;
            }
        }
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationConfig {
    pub levels: LevelSpec,
    pub top_k: usize,
    pub min_support: u64,
    pub prompt_type: PromptType,
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig {
            levels: LevelSpec::default(),
            top_k: 10,
            min_support: 5,
            prompt_type: PromptType::VideoCot,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub context_item_id: ItemId,
    pub prompt_type: PromptType,
    pub target_cluster_id: NodeId,
    pub target_description: String,
    pub rate: f64,
    pub support: u64,
}

/// Per target cluster, keeps the `top_k` best-rated contexts with at least
/// `min_support` observations. Ranking is (rate desc, support desc, context
/// id asc). Stats whose pair is not serendipitous under `levels` are dropped.
pub fn curate_training_data(
    stats: &[SatisfactionStat],
    tree: &ClusterTree,
    config: &CurationConfig,
) -> Result<Vec<TrainingExample>, SerendipityError> {
    let spec = config.levels;
    spec.validate(tree.levels())?;
    let mut by_cluster: BTreeMap<&str, Vec<&SatisfactionStat>> = BTreeMap::new();
    for s in stats {
        if s.total_count < config.min_support || s.total_count == 0 {
            continue;
        }
        let Some(node) = tree.node(&s.target_cluster_id) else {
            log::warn!("stat references unknown cluster {}", s.target_cluster_id);
            continue;
        };
        if node.level != spec.level || tree.members(&node.node_id).is_empty() {
            continue;
        }
        let Ok(ctx_path) = tree.item_path(&s.context_item_id) else {
            continue;
        };
        let serendipitous = ctx_path.0[spec.level] != s.target_cluster_id
            && ctx_path.0[spec.broad_level()] == *tree.ancestor_at(&s.target_cluster_id, spec.broad_level())?;
        if serendipitous {
            by_cluster.entry(s.target_cluster_id.as_str()).or_default().push(s);
        }
    }
    let mut out = Vec::new();
    for (cluster, mut group) in by_cluster {
        group.sort_by(|a, b| {
            b.rate
                .total_cmp(&a.rate)
                .then(b.total_count.cmp(&a.total_count))
                .then(a.context_item_id.cmp(&b.context_item_id))
        });
        let description = &tree.node(cluster).expect("checked above").description;
        out.extend(group.into_iter().take(config.top_k).map(|s| TrainingExample {
            context_item_id: s.context_item_id.clone(),
            prompt_type: config.prompt_type,
            target_cluster_id: cluster.to_string(),
            target_description: description.clone(),
            rate: s.rate,
            support: s.total_count,
        }));
    }
    Ok(out)
}

/// One example per context item: the best-ranked of its examples. A
/// deterministic planner emits one description per context, so this is the
/// set it is evaluated against.
pub fn eval_set(examples: &[TrainingExample]) -> Vec<TrainingExample> {
    let mut best: BTreeMap<&str, &TrainingExample> = BTreeMap::new();
    for e in examples {
        let replace = match best.get(e.context_item_id.as_str()) {
            None => true,
            Some(cur) => e
                .rate
                .total_cmp(&cur.rate)
                .then(e.support.cmp(&cur.support))
                .then(cur.target_cluster_id.cmp(&e.target_cluster_id))
                .is_gt(),
        };
        if replace {
            best.insert(&e.context_item_id, e);
        }
    }
    best.into_values().cloned().collect()
}

/// Controlled-generation vocabulary: every non-empty level-`level` description.
pub fn vocabulary(tree: &ClusterTree, level: usize) -> Vec<String> {
    let mut v: Vec<String> = tree
        .nodes_at_level(level)
        .filter(|n| !tree.members(&n.node_id).is_empty())
        .map(|n| n.description.clone())
        .collect();
    v.sort();
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TrainingRecord {
    Header {
        tree_version: u64,
        level: usize,
        delta: usize,
        descriptions: Vec<String>,
    },
    Example {
        context_item_id: ItemId,
        prompt_type: PromptType,
        prompt: Prompt,
        target_cluster_id: NodeId,
        target_description: String,
        rate: f64,
        support: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingFile {
    pub tree_version: u64,
    pub levels: LevelSpec,
    pub descriptions: Vec<String>,
    pub examples: Vec<TrainingRecord>,
}

impl TrainingFile {
    pub fn training_examples(&self) -> Vec<TrainingExample> {
        self.examples
            .iter()
            .filter_map(|r| match r {
                TrainingRecord::Example {
                    context_item_id,
                    prompt_type,
                    target_cluster_id,
                    target_description,
                    rate,
                    support,
                    ..
                } => Some(TrainingExample {
                    context_item_id: context_item_id.clone(),
                    prompt_type: *prompt_type,
                    target_cluster_id: target_cluster_id.clone(),
                    target_description: target_description.clone(),
                    rate: *rate,
                    support: *support,
                }),
                TrainingRecord::Header { .. } => None,
            })
            .collect()
    }
}

/// Writes the fine-tuning file: a header with the full level-`l`
/// description vocabulary, then one record per example carrying the
/// assembled prompt. Examples whose prompt cannot be assembled are skipped;
/// the number written is returned.
pub fn export_training_file(
    examples: &[TrainingExample],
    tree: &ClusterTree,
    catalog: &ItemCatalog,
    spec: LevelSpec,
    options: &PromptOptions,
    path: &Path,
) -> Result<usize, SerendipityError> {
    spec.validate(tree.levels())?;
    let mut records = vec![TrainingRecord::Header {
        tree_version: tree.version(),
        level: spec.level,
        delta: spec.delta,
        descriptions: vocabulary(tree, spec.level),
    }];
    for e in examples {
        let Some(item) = catalog.get(&e.context_item_id) else {
            log::warn!("training example for unknown item {}", e.context_item_id);
            continue;
        };
        match assemble_prompt(item, tree, spec.level, e.prompt_type, options) {
            Ok(prompt) => records.push(TrainingRecord::Example {
                context_item_id: e.context_item_id.clone(),
                prompt_type: e.prompt_type,
                prompt,
                target_cluster_id: e.target_cluster_id.clone(),
                target_description: e.target_description.clone(),
                rate: e.rate,
                support: e.support,
            }),
            Err(err) => log::warn!("skipping training example: {err}"),
        }
    }
    let written = records.len() - 1;
    persist::write_atomic(path, |out| {
        for r in &records {
            serde_json::to_writer(&mut *out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    })?;
    Ok(written)
}

pub fn load_training_file(path: &Path) -> Result<TrainingFile, SerendipityError> {
    let bad = |reason: String| SerendipityError::TrainingFile {
        path: path.display().to_string(),
        reason,
    };
    let file = std::fs::File::open(path).map_err(|e| bad(e.to_string()))?;
    let mut header = None;
    let mut examples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| bad(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TrainingRecord =
            serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", i + 1)))?;
        match record {
            TrainingRecord::Header {
                tree_version,
                level,
                delta,
                descriptions,
            } => {
                if header.is_some() {
                    return Err(bad("more than one header".into()));
                }
                header = Some((tree_version, LevelSpec { level, delta }, descriptions));
            }
            ex => {
                if header.is_none() {
                    return Err(bad("example before header".into()));
                }
                examples.push(ex);
            }
        }
    }
    let (tree_version, levels, descriptions) = header.ok_or_else(|| bad("missing header".into()))?;
    Ok(TrainingFile {
        tree_version,
        levels,
        descriptions,
        examples,
    })
}

/// Per-cluster example counts, for auditing the curation bound.
pub fn examples_per_cluster(examples: &[TrainingExample]) -> HashMap<&str, usize> {
    let mut counts = HashMap::new();
    for e in examples {
        *counts.entry(e.target_cluster_id.as_str()).or_insert(0) += 1;
    }
    counts
}
