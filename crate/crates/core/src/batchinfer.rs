//! Coverage-targeted corpus selection and incremental batch planning.
//!
//! The corpus is the shortest popularity prefix of the catalog that reaches
//! the target impression coverage. Batch runs plan only items missing from
//! the previous cache (when it was built against the same tree) and copy the
//! rest, so an incremental run equals a from-scratch run entry for entry.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustertree::{ClusterTree, NodeId};
use crate::corpus::{impression_counts, InteractionLog, ItemCatalog, ItemId};
use crate::persist::{self, PersistError};
use crate::planner::{plan_cluster, GenerationBackend, PlanConfig, PlanResult, ResolutionMethod};

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("selected item {0} is not in the catalog")]
    UnknownItem(ItemId),
    #[error("worker count must be at least 1")]
    NoWorkers,
    #[error("cannot start worker pool: {0}")]
    Pool(String),
    #[error("plan cache is stale: built for tree version {cached}, current tree is version {current}; rerun serve-batch")]
    StaleCache { cached: u64, current: u64 },
    #[error(transparent)]
    Persist(#[from] PersistError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSelection {
    /// Popularity-descending item keys.
    pub selected: Vec<ItemId>,
    pub achieved_coverage: f64,
    pub target: f64,
    /// False when even the full catalog misses the target.
    pub reachable: bool,
}

/// Shortest prefix of the catalog, ordered by traffic weight (descending,
/// ties by item id), whose impression coverage reaches `target`.
pub fn select_corpus(catalog: &ItemCatalog, log: &InteractionLog, target: f64) -> CorpusSelection {
    let mut ranked: Vec<_> = catalog.items().collect();
    ranked.sort_by(|a, b| {
        b.traffic_weight
            .total_cmp(&a.traffic_weight)
            .then_with(|| a.item_id.cmp(&b.item_id))
    });
    let counts = impression_counts(log);
    let total = log.len();
    let coverage = |covered: usize| if total == 0 { 0.0 } else { covered as f64 / total as f64 };

    let mut covered = 0;
    let mut selected = Vec::new();
    if coverage(covered) >= target {
        return CorpusSelection {
            selected,
            achieved_coverage: coverage(covered),
            target,
            reachable: true,
        };
    }
    for item in ranked {
        selected.push(item.item_id.clone());
        covered += counts.get(item.item_id.as_str()).copied().unwrap_or(0);
        if coverage(covered) >= target {
            return CorpusSelection {
                selected,
                achieved_coverage: coverage(covered),
                target,
                reachable: true,
            };
        }
    }
    log::warn!(
        "target coverage {target} unreachable; full catalog covers {:.4}",
        coverage(covered)
    );
    CorpusSelection {
        selected,
        achieved_coverage: coverage(covered),
        target,
        reachable: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub raw_generation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved_cluster: Option<NodeId>,
    pub exact_match: bool,
    pub resolution_method: ResolutionMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CacheEntry {
    fn from_plan(plan: PlanResult) -> Self {
        CacheEntry {
            raw_generation: plan.raw_generation,
            rationale: plan.rationale,
            resolved_cluster: plan.resolved_cluster,
            exact_match: plan.exact_match,
            resolution_method: plan.resolution_method,
            error: None,
        }
    }

    fn failed(error: String) -> Self {
        CacheEntry {
            raw_generation: String::new(),
            rationale: None,
            resolved_cluster: None,
            exact_match: false,
            resolution_method: ResolutionMethod::Unresolved,
            error: Some(error),
        }
    }

    pub fn to_plan(&self, item: &str) -> PlanResult {
        PlanResult {
            context_item_id: item.to_string(),
            raw_generation: self.raw_generation.clone(),
            rationale: self.rationale.clone(),
            resolved_cluster: self.resolved_cluster.clone(),
            exact_match: self.exact_match,
            resolution_method: self.resolution_method,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: u64,
    pub processed_count: usize,
    pub reused_count: usize,
    pub failed_count: usize,
    pub pruned_count: usize,
    pub backend_calls: u64,
    pub full_rebuild: bool,
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanCache {
    pub corpus_version: u64,
    pub tree_version: u64,
    pub entries: BTreeMap<ItemId, CacheEntry>,
    pub run_log: Vec<RunRecord>,
}

impl PlanCache {
    pub fn last_run(&self) -> Option<&RunRecord> {
        self.run_log.last()
    }

    /// The planned cluster for `item`, when one was resolved.
    pub fn planned_cluster(&self, item: &str) -> Option<&NodeId> {
        self.entries.get(item).and_then(|e| e.resolved_cluster.as_ref())
    }

    pub fn ensure_tree_version(&self, current: u64) -> Result<(), BatchError> {
        if self.tree_version != current {
            return Err(BatchError::StaleCache {
                cached: self.tree_version,
                current,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchOptions {
    pub workers: usize,
    /// Drop cached entries for items no longer in the selection.
    pub compact: bool,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions {
            workers: 4,
            compact: false,
        }
    }
}

/// Plans every selected item that the previous cache does not already hold.
/// A previous cache built for a different tree version is discarded. Items
/// that fail to plan get an unresolved entry carrying the error.
pub fn run_batch(
    config: &PlanConfig,
    backend: &dyn GenerationBackend,
    tree: &ClusterTree,
    catalog: &ItemCatalog,
    selection: &[ItemId],
    previous: Option<PlanCache>,
    options: BatchOptions,
) -> Result<PlanCache, BatchError> {
    if options.workers == 0 {
        return Err(BatchError::NoWorkers);
    }
    for id in selection {
        if !catalog.contains(id) {
            return Err(BatchError::UnknownItem(id.clone()));
        }
    }
    let started = Instant::now();
    let calls_before = backend.call_count();

    let (mut cache, full_rebuild) = match previous {
        Some(prev) if prev.tree_version == tree.version() => (prev, false),
        Some(prev) => {
            log::info!(
                "tree version changed {} -> {}; rebuilding plan cache",
                prev.tree_version,
                tree.version()
            );
            let cache = PlanCache {
                corpus_version: prev.corpus_version,
                tree_version: tree.version(),
                entries: BTreeMap::new(),
                run_log: prev.run_log,
            };
            (cache, true)
        }
        None => (
            PlanCache {
                corpus_version: 0,
                tree_version: tree.version(),
                entries: BTreeMap::new(),
                run_log: Vec::new(),
            },
            true,
        ),
    };

    let mut seen = HashSet::new();
    let todo: Vec<&ItemId> = selection
        .iter()
        .filter(|id| seen.insert(id.as_str()) && !cache.entries.contains_key(id.as_str()))
        .collect();
    let reused = seen.len() - todo.len();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers)
        .build()
        .map_err(|e| BatchError::Pool(e.to_string()))?;
    let planned: Vec<(ItemId, CacheEntry)> = pool.install(|| {
        todo.par_iter()
            .map(|id| {
                let item = catalog.get(id).expect("checked above");
                let entry = match plan_cluster(backend, tree, item, config) {
                    Ok(plan) => CacheEntry::from_plan(plan),
                    Err(e) => {
                        log::warn!("{e}");
                        CacheEntry::failed(e.to_string())
                    }
                };
                ((*id).clone(), entry)
            })
            .collect()
    });
    let failed = planned.iter().filter(|(_, e)| e.error.is_some()).count();
    let processed = planned.len();
    cache.entries.extend(planned);

    let mut pruned = 0;
    if options.compact {
        let before = cache.entries.len();
        cache.entries.retain(|id, _| seen.contains(id.as_str()));
        pruned = before - cache.entries.len();
    }
    if processed > 0 || pruned > 0 || full_rebuild {
        cache.corpus_version += 1;
    }
    let run_id = cache.run_log.last().map_or(1, |r| r.run_id + 1);
    cache.run_log.push(RunRecord {
        run_id,
        processed_count: processed,
        reused_count: reused,
        failed_count: failed,
        pruned_count: pruned,
        backend_calls: backend.call_count() - calls_before,
        full_rebuild,
        wall_time_ms: started.elapsed().as_millis() as u64,
    });
    Ok(cache)
}

pub fn store_cache(cache: &PlanCache, path: &Path) -> Result<(), BatchError> {
    persist::write_json_atomic(path, cache)?;
    Ok(())
}

/// Loads a cache and refuses it when it was built for another tree version.
pub fn load_cache(path: &Path, tree_version: u64) -> Result<PlanCache, BatchError> {
    let cache = load_cache_unchecked(path)?;
    cache.ensure_tree_version(tree_version)?;
    Ok(cache)
}

pub fn load_cache_unchecked(path: &Path) -> Result<PlanCache, BatchError> {
    Ok(persist::read_json(path)?)
}
