//! Item-level retrieval: a recency-decayed co-occurrence model, queried
//! either inside the planned cluster or across the whole catalog.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batchinfer::PlanCache;
use crate::clustertree::{ClusterTree, NodeId};
use crate::corpus::{InteractionLog, ItemCatalog, ItemId};

const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot train on an empty interaction log")]
    EmptyLog,
    #[error("no plan for context item {0}; run serve-batch first")]
    NoPlan(ItemId),
    #[error("planned cluster {0} is not in the tree")]
    UnknownCluster(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Serendip,
    Exploit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub item_id: ItemId,
    pub score: f64,
    pub source: Source,
}

#[derive(Debug, Clone)]
pub struct CooccurrenceModel {
    transitions: HashMap<ItemId, HashMap<ItemId, f64>>,
    popularity_prior: HashMap<ItemId, f64>,
    /// Items by prior descending, ties by id.
    popularity_order: Vec<ItemId>,
    /// Items by id, the fallback order when the prior does not separate them.
    id_order: Vec<ItemId>,
    pub trained_at: i64,
    pub decay_per_day: f64,
}

/// Default decay: a transition loses half its weight after a week.
pub fn default_decay_per_day() -> f64 {
    std::f64::consts::LN_2 / 7.0
}

/// Each (context, next) record adds `exp(-λ · age_days)` where age is
/// measured from the newest record in the log. The popularity prior is
/// traffic weight divided by the catalog maximum.
pub fn train_cooccurrence(
    log: &InteractionLog,
    catalog: &ItemCatalog,
    decay_per_day: f64,
) -> Result<CooccurrenceModel, RetrievalError> {
    let trained_at = log
        .records
        .iter()
        .map(|r| r.timestamp)
        .max()
        .ok_or(RetrievalError::EmptyLog)?;
    let mut transitions: HashMap<ItemId, HashMap<ItemId, f64>> = HashMap::new();
    for r in &log.records {
        if r.context_item_id == r.next_item_id {
            continue;
        }
        let age_days = (trained_at - r.timestamp) as f64 / SECONDS_PER_DAY;
        *transitions
            .entry(r.context_item_id.clone())
            .or_default()
            .entry(r.next_item_id.clone())
            .or_insert(0.0) += (-decay_per_day * age_days).exp();
    }
    let max_weight = catalog.items().map(|i| i.traffic_weight).fold(0.0, f64::max);
    let popularity_prior: HashMap<ItemId, f64> = catalog
        .items()
        .map(|i| {
            let p = if max_weight > 0.0 { i.traffic_weight / max_weight } else { 0.0 };
            (i.item_id.clone(), p)
        })
        .collect();
    let id_order: Vec<ItemId> = catalog.ids().cloned().collect();
    let mut popularity_order = id_order.clone();
    popularity_order.sort_by(|a, b| popularity_prior[b].total_cmp(&popularity_prior[a]).then(a.cmp(b)));
    Ok(CooccurrenceModel {
        transitions,
        popularity_prior,
        popularity_order,
        id_order,
        trained_at,
        decay_per_day,
    })
}

impl CooccurrenceModel {
    pub fn transition_count(&self, context: &str, next: &str) -> f64 {
        self.transitions
            .get(context)
            .and_then(|m| m.get(next))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn transitions_from(&self, context: &str) -> Option<&HashMap<ItemId, f64>> {
        self.transitions.get(context)
    }

    pub fn prior(&self, item: &str) -> f64 {
        self.popularity_prior.get(item).copied().unwrap_or(0.0)
    }

    pub fn score(&self, context: &str, item: &str, beta: f64) -> f64 {
        self.transition_count(context, item) + beta * self.prior(item)
    }
}

fn rank(mut scored: Vec<(ItemId, f64)>, k: usize, source: Source) -> Vec<Recommendation> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
        .into_iter()
        .map(|(item_id, score)| Recommendation { item_id, score, source })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestrictedRecommendations {
    pub planned_cluster: NodeId,
    pub recommendations: Vec<Recommendation>,
    /// Set when the planned cluster had no candidates besides the context.
    pub empty_cluster: bool,
}

/// Top-`k` items inside the context's planned cluster, excluding the
/// context itself. Score is transition count plus `beta` times the prior;
/// ties go to the smaller item id.
pub fn recommend_restricted(
    model: &CooccurrenceModel,
    tree: &ClusterTree,
    cache: &PlanCache,
    context: &str,
    k: usize,
    beta: f64,
) -> Result<RestrictedRecommendations, RetrievalError> {
    let cluster = cache
        .planned_cluster(context)
        .ok_or_else(|| RetrievalError::NoPlan(context.to_string()))?;
    if tree.node(cluster).is_none() {
        return Err(RetrievalError::UnknownCluster(cluster.clone()));
    }
    let scored: Vec<(ItemId, f64)> = tree
        .members(cluster)
        .iter()
        .filter(|m| m.as_str() != context)
        .map(|m| (m.clone(), model.score(context, m, beta)))
        .collect();
    let empty_cluster = scored.is_empty();
    if empty_cluster {
        log::warn!("planned cluster {cluster} for {context} has no candidates");
    }
    Ok(RestrictedRecommendations {
        planned_cluster: cluster.clone(),
        recommendations: rank(scored, k, Source::Serendip),
        empty_cluster,
    })
}

/// Unrestricted top-`k` over the whole catalog with the same scoring.
///
/// Only items with an observed transition from `context` can score above
/// their prior, so the candidates are those plus the head of the prior
/// ordering; the result equals a full-catalog scan.
pub fn recommend_exploit(model: &CooccurrenceModel, context: &str, k: usize, beta: f64) -> Vec<Recommendation> {
    let observed = model.transitions_from(context);
    let n_observed = observed.map_or(0, HashMap::len);
    let fallback = if beta > 0.0 { &model.popularity_order } else { &model.id_order };
    let mut candidates: HashMap<&str, f64> = HashMap::new();
    if let Some(obs) = observed {
        for item in obs.keys() {
            candidates.insert(item, model.score(context, item, beta));
        }
    }
    for item in fallback.iter().take(k + n_observed + 1) {
        candidates
            .entry(item)
            .or_insert_with(|| model.score(context, item, beta));
    }
    let scored = candidates
        .into_iter()
        .filter(|(item, _)| *item != context)
        .map(|(item, s)| (item.to_string(), s))
        .collect();
    rank(scored, k, Source::Exploit)
}
