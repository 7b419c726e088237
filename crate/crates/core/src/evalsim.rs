//! Offline planner metrics, impression-level comparison metrics and a
//! seeded synthetic-user simulator that produces the logs they consume.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batchinfer::PlanCache;
use crate::clustertree::{cosine, ClusterTree, NodeId};
use crate::corpus::{InteractionLog, InteractionRecord, ItemCatalog, ItemId};
use crate::planner::PlanResult;
use crate::retriever::{recommend_exploit, recommend_restricted, CooccurrenceModel};
use crate::serendipity::{LevelSpec, SerendipityError, SerendipityLabel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("label {0:?} is not a cluster description at the planning level")]
    InvalidLabel(String),
    #[error("no analyzed context has a visually interesting score")]
    NoScores,
    #[error("bucket count must be at least 1")]
    NoBuckets,
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Serendipity(#[from] SerendipityError),
    #[error("cannot write {path}: {reason}")]
    Write { path: String, reason: String },
}

/// Fraction of outputs that exactly match a vocabulary description; 0 for
/// no outputs.
pub fn match_rate(outputs: &[PlanResult]) -> f64 {
    if outputs.is_empty() {
        return 0.0;
    }
    outputs.iter().filter(|o| o.exact_match).count() as f64 / outputs.len() as f64
}

fn check_label<'t>(tree: &'t ClusterTree, label: &str, level: usize) -> Result<&'t NodeId, EvalError> {
    match tree.resolve_description(label) {
        Some(node) if label.trim() == label && tree.node(node).is_some_and(|n| n.level == level) => Ok(node),
        _ => Err(EvalError::InvalidLabel(label.to_string())),
    }
}

/// Fraction of outputs whose trimmed text equals the label. Every label
/// must be a level-`level` description.
pub fn recall(outputs: &[(PlanResult, String)], tree: &ClusterTree, level: usize) -> Result<f64, EvalError> {
    for (_, label) in outputs {
        check_label(tree, label, level)?;
    }
    if outputs.is_empty() {
        return Ok(0.0);
    }
    let hits = outputs
        .iter()
        .filter(|(o, label)| o.raw_generation.trim() == label)
        .count();
    Ok(hits as f64 / outputs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub match_rate: f64,
    pub recall: f64,
    pub n_examples: usize,
    pub per_cluster_recall: BTreeMap<NodeId, f64>,
}

pub fn evaluate(outputs: &[(PlanResult, String)], tree: &ClusterTree, level: usize) -> Result<EvalReport, EvalError> {
    let plans: Vec<PlanResult> = outputs.iter().map(|(p, _)| p.clone()).collect();
    let mut per_cluster: BTreeMap<NodeId, (usize, usize)> = BTreeMap::new();
    for (o, label) in outputs {
        let node = check_label(tree, label, level)?;
        let slot = per_cluster.entry(node.clone()).or_default();
        slot.0 += (o.raw_generation.trim() == label) as usize;
        slot.1 += 1;
    }
    Ok(EvalReport {
        match_rate: match_rate(&plans),
        recall: recall(outputs, tree, level)?,
        n_examples: outputs.len(),
        per_cluster_recall: per_cluster
            .into_iter()
            .map(|(k, (hit, n))| (k, hit as f64 / n as f64))
            .collect(),
    })
}

/// One recommended item shown to a user.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Impression {
    /// Simulation step (or request id) the impression belongs to.
    #[serde(default)]
    pub step: u64,
    pub user_id: String,
    pub context_item_id: ItemId,
    pub item_id: ItemId,
    pub label: SerendipityLabel,
    pub positive: bool,
}

/// Impressions per model name.
pub type ImpressionLogs = BTreeMap<String, Vec<Impression>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelNovelty {
    pub impressions: usize,
    pub novel_impressions: usize,
    pub novel_ratio: f64,
    pub positive_feedback_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoveltyReport {
    pub models: BTreeMap<String, ModelNovelty>,
}

impl NoveltyReport {
    /// Relative change of each model's ratios against `reference`.
    pub fn gains_over(&self, reference: &str) -> BTreeMap<String, (f64, f64)> {
        let Some(base) = self.models.get(reference) else {
            return BTreeMap::new();
        };
        self.models
            .iter()
            .map(|(name, m)| {
                (
                    name.clone(),
                    (
                        m.novel_ratio / base.novel_ratio - 1.0,
                        m.positive_feedback_ratio / base.positive_feedback_ratio - 1.0,
                    ),
                )
            })
            .collect()
    }
}

/// A model's impression is novel when no other model impressed the same
/// item on the same user.
pub fn novelty_report(logs: &ImpressionLogs) -> NoveltyReport {
    let mut owners: HashMap<(&str, &str), BTreeSet<&str>> = HashMap::new();
    for (model, imps) in logs {
        for imp in imps {
            owners
                .entry((imp.user_id.as_str(), imp.item_id.as_str()))
                .or_default()
                .insert(model.as_str());
        }
    }
    let models = logs
        .iter()
        .map(|(model, imps)| {
            let novel = imps
                .iter()
                .filter(|imp| owners[&(imp.user_id.as_str(), imp.item_id.as_str())].len() == 1)
                .count();
            let positive = imps.iter().filter(|imp| imp.positive).count();
            let n = imps.len();
            let ratio = |x: usize| if n == 0 { 0.0 } else { x as f64 / n as f64 };
            (
                model.clone(),
                ModelNovelty {
                    impressions: n,
                    novel_impressions: novel,
                    novel_ratio: ratio(novel),
                    positive_feedback_ratio: ratio(positive),
                },
            )
        })
        .collect();
    NoveltyReport { models }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketGain {
    /// 1 holds the highest scores.
    pub bucket: usize,
    pub contexts: usize,
    pub min_score: f64,
    pub max_score: f64,
    pub treatment_impressions: usize,
    pub treatment_rate: f64,
    pub baseline_impressions: usize,
    pub baseline_rate: f64,
    /// treatment_rate / baseline_rate − 1; absent when the baseline rate is 0.
    pub gain: Option<f64>,
}

/// Groups context items into `n_buckets` equal-population buckets by
/// visually interesting score (bucket 1 = highest) and compares the
/// engagement rate of `treatment` impressions against `baseline` ones that
/// the treatment did not also nominate.
pub fn bucket_analysis(
    catalog: &ItemCatalog,
    logs: &ImpressionLogs,
    treatment: &str,
    baseline: &str,
    n_buckets: usize,
) -> Result<Vec<BucketGain>, EvalError> {
    if n_buckets == 0 {
        return Err(EvalError::NoBuckets);
    }
    let empty = Vec::new();
    let t_imps = logs.get(treatment).unwrap_or(&empty);
    let b_imps = logs.get(baseline).unwrap_or(&empty);
    let mut contexts: Vec<(f64, &str)> = t_imps
        .iter()
        .chain(b_imps)
        .map(|i| i.context_item_id.as_str())
        .collect::<HashSet<_>>()
        .into_iter()
        .filter_map(|c| {
            catalog
                .get(c)
                .and_then(|i| i.visually_interesting_score)
                .map(|s| (s, c))
        })
        .collect();
    if contexts.is_empty() {
        return Err(EvalError::NoScores);
    }
    contexts.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
    let n = contexts.len();
    let bucket_of: HashMap<&str, usize> = contexts
        .iter()
        .enumerate()
        .map(|(i, (_, c))| (*c, i * n_buckets / n))
        .collect();

    let tally = |imps: &[Impression]| {
        let mut acc = vec![(0usize, 0usize); n_buckets];
        for imp in imps {
            if let Some(&b) = bucket_of.get(imp.context_item_id.as_str()) {
                acc[b].0 += imp.positive as usize;
                acc[b].1 += 1;
            }
        }
        acc
    };
    // The baseline is candidates the treatment did not also nominate in the
    // same request.
    let nominated: HashSet<(u64, &str, &str, &str)> = t_imps
        .iter()
        .map(|i| (i.step, i.user_id.as_str(), i.context_item_id.as_str(), i.item_id.as_str()))
        .collect();
    let b_only: Vec<Impression> = b_imps
        .iter()
        .filter(|i| !nominated.contains(&(i.step, i.user_id.as_str(), i.context_item_id.as_str(), i.item_id.as_str())))
        .cloned()
        .collect();
    let t = tally(t_imps);
    let b = tally(&b_only);
    let rate = |(pos, total): (usize, usize)| if total == 0 { 0.0 } else { pos as f64 / total as f64 };
    Ok((0..n_buckets)
        .map(|k| {
            let members: Vec<f64> = contexts
                .iter()
                .filter(|(_, c)| bucket_of[c] == k)
                .map(|(s, _)| *s)
                .collect();
            let (tr, br) = (rate(t[k]), rate(b[k]));
            BucketGain {
                bucket: k + 1,
                contexts: members.len(),
                min_score: members.iter().cloned().fold(f64::NAN, f64::min),
                max_score: members.iter().cloned().fold(f64::NAN, f64::max),
                treatment_impressions: t[k].1,
                treatment_rate: tr,
                baseline_impressions: b[k].1,
                baseline_rate: br,
                gain: (br > 0.0 && t[k].1 > 0).then(|| tr / br - 1.0),
            }
        })
        .collect())
}

pub fn write_bucket_csv(buckets: &[BucketGain], path: &Path) -> Result<(), EvalError> {
    let fail = |e: &dyn std::fmt::Display| EvalError::Write {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| fail(&e))?;
    for b in buckets {
        w.serialize(b).map_err(|e| fail(&e))?;
    }
    w.flush().map_err(|e| fail(&e))
}

/// A recommender the simulator can query.
pub trait Recommender: Sync {
    fn name(&self) -> &str;

    fn recommend(&self, context: &str, k: usize) -> Vec<ItemId>;

    /// Whether the candidates come from the planner (receives the
    /// simulator's visual engagement boost).
    fn planner_nominated(&self) -> bool {
        false
    }
}

/// Cluster-restricted retrieval over the plan cache.
pub struct SerendipPolicy<'a> {
    pub model: &'a CooccurrenceModel,
    pub tree: &'a ClusterTree,
    pub cache: &'a PlanCache,
    pub beta: f64,
}

impl Recommender for SerendipPolicy<'_> {
    fn name(&self) -> &str {
        "serendip"
    }

    fn recommend(&self, context: &str, k: usize) -> Vec<ItemId> {
        match recommend_restricted(self.model, self.tree, self.cache, context, k, self.beta) {
            Ok(out) => out.recommendations.into_iter().map(|r| r.item_id).collect(),
            Err(_) => Vec::new(),
        }
    }

    fn planner_nominated(&self) -> bool {
        true
    }
}

/// Unrestricted co-occurrence retrieval.
pub struct ExploitPolicy<'a> {
    pub model: &'a CooccurrenceModel,
    pub beta: f64,
}

impl Recommender for ExploitPolicy<'_> {
    fn name(&self) -> &str {
        "exploit"
    }

    fn recommend(&self, context: &str, k: usize) -> Vec<ItemId> {
        recommend_exploit(self.model, context, k, self.beta)
            .into_iter()
            .map(|r| r.item_id)
            .collect()
    }
}

/// Nearest items by topic vector inside the context's own level-`level`
/// cluster; a content-similarity baseline.
pub struct SimilarContentPolicy<'a> {
    pub catalog: &'a ItemCatalog,
    pub tree: &'a ClusterTree,
    pub level: usize,
}

impl Recommender for SimilarContentPolicy<'_> {
    fn name(&self) -> &str {
        "similar_content"
    }

    fn recommend(&self, context: &str, k: usize) -> Vec<ItemId> {
        let (Some(ctx), Ok(cluster)) = (self.catalog.get(context), self.tree.item_ancestor(context, self.level)) else {
            return Vec::new();
        };
        let mut scored: Vec<(f64, &ItemId)> = self
            .tree
            .members(cluster)
            .iter()
            .filter(|m| m.as_str() != context)
            .filter_map(|m| self.catalog.get(m).map(|i| (cosine(&ctx.topic_vector, &i.topic_vector), m)))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        scored.into_iter().take(k).map(|(_, m)| m.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_users: usize,
    pub n_steps: usize,
    /// Preferred leaf clusters per user.
    pub prefs_per_user: usize,
    /// Items requested from each policy per step.
    pub k: usize,
    pub p_similar: f64,
    pub p_serendip: f64,
    pub p_unrelated: f64,
    /// Added to the engagement probability of planner-nominated items,
    /// scaled by the context's visually interesting score.
    pub visual_boost: f64,
    pub levels: LevelSpec,
    pub seed: u64,
    pub step_seconds: i64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_users: 200,
            n_steps: 10_000,
            prefs_per_user: 2,
            k: 5,
            p_similar: 0.35,
            p_serendip: 0.5,
            p_unrelated: 0.15,
            visual_boost: 0.0,
            levels: LevelSpec::default(),
            seed: 0,
            step_seconds: 60,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::InvalidConfig(m.to_string()));
        for p in [self.p_similar, self.p_serendip, self.p_unrelated] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0,1]");
            }
        }
        if self.n_users == 0 || self.prefs_per_user == 0 || self.k == 0 {
            return bad("n_users, prefs_per_user and k must be positive");
        }
        if self.visual_boost.is_nan() || self.visual_boost < 0.0 {
            return bad("visual_boost must be non-negative");
        }
        Ok(())
    }

    pub fn probability(&self, label: SerendipityLabel) -> f64 {
        match label {
            SerendipityLabel::Similar => self.p_similar,
            SerendipityLabel::Serendipitous => self.p_serendip,
            SerendipityLabel::Unrelated => self.p_unrelated,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SimOutput {
    pub interactions: InteractionLog,
    pub impressions: ImpressionLogs,
}

/// Runs the simulation. Each step draws a user and a context item from one
/// of the user's preferred leaves, collects every policy's top-`k`,
/// interleaves them from a random starting policy (an item recommended by
/// several policies is shown once and credited to each), and samples
/// engagement from the probability of the (context, item) label.
pub fn simulate(
    catalog: &ItemCatalog,
    tree: &ClusterTree,
    policies: &[&dyn Recommender],
    config: &SimConfig,
) -> Result<SimOutput, EvalError> {
    config.validate()?;
    config.levels.validate(tree.levels())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let leaves: Vec<&NodeId> = tree
        .nodes_at_level(tree.leaf_level())
        .map(|n| &n.node_id)
        .filter(|id| !tree.members(id).is_empty())
        .collect();
    let users: Vec<Vec<&NodeId>> = (0..config.n_users)
        .map(|_| {
            leaves
                .choose_multiple(&mut rng, config.prefs_per_user.min(leaves.len()))
                .copied()
                .collect()
        })
        .collect();

    // Users pick context items within a preferred leaf in proportion to
    // traffic, like organic viewing.
    let members_of: HashMap<&NodeId, &[ItemId]> = leaves.iter().map(|l| (*l, tree.members(l))).collect();
    let weights_of: HashMap<&NodeId, WeightedIndex<f64>> = leaves
        .iter()
        .map(|l| {
            let w: Vec<f64> = tree
                .members(l)
                .iter()
                .map(|m| catalog.get(m).map_or(0.0, |i| i.traffic_weight) + 1e-9)
                .collect();
            (*l, WeightedIndex::new(w).expect("non-empty positive weights"))
        })
        .collect();

    let mut out = SimOutput::default();
    for p in policies {
        out.impressions.insert(p.name().to_string(), Vec::new());
    }
    let spec = config.levels;
    for step in 0..config.n_steps {
        let u = rng.gen_range(0..users.len());
        let user_id = format!("u{u:05}");
        let leaf = users[u][rng.gen_range(0..users[u].len())];
        let context = &members_of[leaf][weights_of[leaf].sample(&mut rng)];
        let context_path = tree.item_path(context).expect("member of tree");
        let score = catalog
            .get(context)
            .and_then(|i| i.visually_interesting_score)
            .unwrap_or(0.0);

        let lists: Vec<Vec<ItemId>> = policies.iter().map(|p| p.recommend(context, config.k)).collect();
        let start = rng.gen_range(0..policies.len().max(1));
        let mut shown: Vec<(ItemId, Vec<usize>)> = Vec::new();
        let mut index: HashMap<ItemId, usize> = HashMap::new();
        let longest = lists.iter().map(Vec::len).max().unwrap_or(0);
        for rank in 0..longest {
            for offset in 0..policies.len() {
                let p = (start + offset) % policies.len();
                if let Some(item) = lists[p].get(rank) {
                    match index.get(item) {
                        Some(&pos) => shown[pos].1.push(p),
                        None => {
                            index.insert(item.clone(), shown.len());
                            shown.push((item.clone(), vec![p]));
                        }
                    }
                }
            }
        }

        let timestamp = step as i64 * config.step_seconds;
        for (item, owners) in shown {
            let item_path = tree.item_path(&item).expect("recommended items are in the tree");
            let label = if context_path.0[spec.level] == item_path.0[spec.level] {
                SerendipityLabel::Similar
            } else if context_path.0[spec.broad_level()] == item_path.0[spec.broad_level()] {
                SerendipityLabel::Serendipitous
            } else {
                SerendipityLabel::Unrelated
            };
            let mut p = config.probability(label);
            if owners.iter().any(|&o| policies[o].planner_nominated()) {
                p += config.visual_boost * score;
            }
            let positive = rng.gen::<f64>() < p.clamp(0.0, 1.0);
            out.interactions.records.push(InteractionRecord {
                user_id: user_id.clone(),
                context_item_id: context.clone(),
                next_item_id: item.clone(),
                satisfied: positive,
                timestamp,
            });
            for o in owners {
                out.impressions
                    .get_mut(policies[o].name())
                    .expect("registered above")
                    .push(Impression {
                        step: step as u64,
                        user_id: user_id.clone(),
                        context_item_id: context.clone(),
                        item_id: item.clone(),
                        label,
                        positive,
                    });
            }
        }
    }
    out.interactions.ingest_stats.accepted = out.interactions.records.len();
    Ok(out)
}
