//! Seeded synthetic catalogs and organic interaction logs with a latent
//! topic hierarchy, plus oracle labels for the stub planner backends.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::clustertree::ClusterTree;
use crate::corpus::{sessionize, InteractionLog, Item, ItemCatalog, ItemId, ViewEvent};
use crate::serendipity::{LevelSpec, TrainingExample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_items: usize,
    pub dimension: usize,
    /// Latent fan-out per level below the root.
    pub branching: Vec<usize>,
    /// Spread of item vectors around their latent leaf.
    pub item_noise: f64,
    pub traffic_sigma: f64,
    pub thumbnail_rate: f64,
    pub n_users: usize,
    pub sessions_per_user: usize,
    pub session_length: usize,
    pub session_gap_secs: i64,
    /// All sessions start within this many days.
    pub window_days: f64,
    pub p_same_leaf: f64,
    pub p_sibling: f64,
    pub satisfaction: SatisfactionModel,
    pub seed: u64,
}

/// Probability a transition is satisfying, by latent relation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SatisfactionModel {
    pub same_leaf: f64,
    pub partner_sibling: f64,
    pub other_sibling: f64,
    pub unrelated: f64,
}

impl Default for SatisfactionModel {
    fn default() -> Self {
        SatisfactionModel {
            same_leaf: 0.35,
            partner_sibling: 0.65,
            other_sibling: 0.45,
            unrelated: 0.15,
        }
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_items: 2000,
            dimension: 16,
            branching: vec![4, 4, 4],
            item_noise: 0.12,
            traffic_sigma: 1.2,
            thumbnail_rate: 0.8,
            n_users: 800,
            sessions_per_user: 6,
            session_length: 12,
            session_gap_secs: 1800,
            window_days: 14.0,
            p_same_leaf: 0.6,
            p_sibling: 0.25,
            satisfaction: SatisfactionModel::default(),
            seed: 7,
        }
    }
}

/// The latent hierarchy behind a synthetic catalog.
#[derive(Debug, Clone)]
pub struct LatentTopics {
    /// Latent leaf index per item.
    pub leaf_of: BTreeMap<ItemId, usize>,
    /// Items per latent leaf, in id order.
    pub members: Vec<Vec<ItemId>>,
    /// Latent leaves sharing a parent with each leaf, excluding itself.
    pub siblings: Vec<Vec<usize>>,
    /// The sibling each leaf's audience most likes to branch out to.
    pub partner: Vec<Option<usize>>,
}

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "zu", "ter", "van", "bri", "sol", "qua", "nex", "dor", "pel", "ri", "mo", "shi",
    "tan", "vel", "gor", "xi", "ul", "ber", "fen", "jo", "ply",
];

fn pseudo_word(rng: &mut ChaCha8Rng, taken: &mut HashSet<String>) -> String {
    loop {
        let n = rng.gen_range(2..=3);
        let w: String = (0..n).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect();
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = crate::corpus::l2_norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn mix(base: &[f64], dir: &[f64], scale: f64) -> Vec<f64> {
    let v: Vec<f64> = base.iter().zip(dir).map(|(b, d)| b + scale * d).collect();
    let n = crate::corpus::l2_norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

struct LatentNode {
    center: Vec<f64>,
    words: Vec<String>,
}

/// Generates a catalog whose topic vectors follow a latent hierarchy with
/// the configured fan-outs. Items are spread round-robin over latent leaves
/// so every leaf is populated.
pub fn generate_catalog(config: &SynthConfig) -> (ItemCatalog, LatentTopics) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dim = config.dimension;
    let mut taken = HashSet::new();
    let mut frontier = vec![LatentNode {
        center: unit_gaussian(&mut rng, dim),
        words: Vec::new(),
    }];
    let mut parent_of_leaf: Vec<usize> = Vec::new();
    for (depth, &fan) in config.branching.iter().enumerate() {
        let spread = 1.4 / (depth as f64 + 1.0);
        let mut next = Vec::new();
        parent_of_leaf.clear();
        for (p, node) in frontier.iter().enumerate() {
            for _ in 0..fan {
                let dir = unit_gaussian(&mut rng, dim);
                let mut words = node.words.clone();
                words.push(pseudo_word(&mut rng, &mut taken));
                next.push(LatentNode {
                    center: mix(&node.center, &dir, spread),
                    words,
                });
                parent_of_leaf.push(p);
            }
        }
        frontier = next;
    }
    let leaves = frontier;

    let mut siblings = vec![Vec::new(); leaves.len()];
    for (a, pa) in parent_of_leaf.iter().enumerate() {
        for (b, pb) in parent_of_leaf.iter().enumerate() {
            if a != b && pa == pb {
                siblings[a].push(b);
            }
        }
    }
    let partner: Vec<Option<usize>> = siblings.iter().map(|s| s.choose(&mut rng).copied()).collect();

    let traffic = LogNormal::new(0.0, config.traffic_sigma).expect("valid sigma");
    let width = config.n_items.max(1).to_string().len();
    let mut items = Vec::with_capacity(config.n_items);
    let mut leaf_of = BTreeMap::new();
    let mut members = vec![Vec::new(); leaves.len()];
    for i in 0..config.n_items {
        let leaf = i % leaves.len();
        let node = &leaves[leaf];
        let id = format!("v{i:0width$}");
        let noise: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let vector = mix(&node.center, &noise, config.item_noise);
        let own = pseudo_word(&mut rng, &mut taken);
        let topic = node.words.join(" ");
        let leaf_word = node.words.last().cloned().unwrap_or_default();
        let n_frames = rng.gen_range(2..=12);
        let frame_captions = (0..n_frames)
            .map(|f| format!("frame {f} shows {leaf_word} {own} scene"))
            .collect();
        let thumbnail_caption = (rng.gen::<f64>() < config.thumbnail_rate).then(|| format!("{leaf_word} {own} close up"));
        items.push(Item {
            item_id: id.clone(),
            title: format!("{topic} {own}"),
            topic_vector: vector,
            traffic_weight: traffic.sample(&mut rng),
            frame_captions,
            thumbnail_caption,
            visually_interesting_score: Some(rng.gen::<f64>()),
        });
        leaf_of.insert(id.clone(), leaf);
        members[leaf].push(id);
    }
    for m in &mut members {
        m.sort();
    }
    let catalog = ItemCatalog::from_items(items, dim).expect("dimension is positive");
    (
        catalog,
        LatentTopics {
            leaf_of,
            members,
            siblings,
            partner,
        },
    )
}

/// Organic watch sessions: each session starts at a traffic-weighted item
/// and moves to the same latent leaf, a sibling leaf (mostly the partner),
/// or anywhere, then is sessionized into transitions.
pub fn generate_interactions(catalog: &ItemCatalog, latent: &LatentTopics, config: &SynthConfig) -> InteractionLog {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let items: Vec<&Item> = catalog.items().collect();
    if items.is_empty() {
        return InteractionLog::default();
    }
    let weights: Vec<f64> = items.iter().map(|i| i.traffic_weight.max(1e-9)).collect();
    let global = WeightedIndex::new(&weights).expect("positive weights");
    let index: HashMap<&str, usize> = items.iter().enumerate().map(|(i, it)| (it.item_id.as_str(), i)).collect();
    let pick_in = |rng: &mut ChaCha8Rng, leaf: usize| -> Option<usize> {
        let m = &latent.members[leaf];
        if m.is_empty() {
            return None;
        }
        let w: Vec<f64> = m.iter().map(|id| weights[index[id.as_str()]]).collect();
        let d = WeightedIndex::new(&w).ok()?;
        Some(index[m[d.sample(rng)].as_str()])
    };
    let sat = config.satisfaction;
    let mut views = Vec::new();
    let window = (config.window_days * 86_400.0).max(1.0) as i64;
    for u in 0..config.n_users {
        let user_id = format!("u{u:05}");
        let mut starts: Vec<i64> = (0..config.sessions_per_user).map(|_| rng.gen_range(0..window)).collect();
        starts.sort_unstable();
        let mut clock = i64::MIN / 2;
        for start in starts {
            clock = start.max(clock + config.session_gap_secs + 1);
            let mut cur = global.sample(&mut rng);
            views.push(ViewEvent {
                user_id: user_id.clone(),
                item_id: items[cur].item_id.clone(),
                satisfied: true,
                timestamp: clock,
            });
            for _ in 1..config.session_length {
                let leaf = latent.leaf_of[&items[cur].item_id];
                let roll: f64 = rng.gen();
                let (next, p) = if roll < config.p_same_leaf {
                    (pick_in(&mut rng, leaf), sat.same_leaf)
                } else if roll < config.p_same_leaf + config.p_sibling && !latent.siblings[leaf].is_empty() {
                    match latent.partner[leaf] {
                        Some(partner) if rng.gen::<f64>() < 0.7 => (pick_in(&mut rng, partner), sat.partner_sibling),
                        _ => {
                            let s = *latent.siblings[leaf].choose(&mut rng).expect("non-empty");
                            let p = if Some(s) == latent.partner[leaf] {
                                sat.partner_sibling
                            } else {
                                sat.other_sibling
                            };
                            (pick_in(&mut rng, s), p)
                        }
                    }
                } else {
                    let n = global.sample(&mut rng);
                    let other = latent.leaf_of[&items[n].item_id];
                    let p = if other == leaf {
                        sat.same_leaf
                    } else if latent.siblings[leaf].contains(&other) {
                        sat.other_sibling
                    } else {
                        sat.unrelated
                    };
                    (Some(n), p)
                };
                let Some(next) = next else { continue };
                clock += rng.gen_range(30..600);
                cur = next;
                views.push(ViewEvent {
                    user_id: user_id.clone(),
                    item_id: items[cur].item_id.clone(),
                    satisfied: rng.gen::<f64>() < p,
                    timestamp: clock,
                });
            }
        }
    }
    InteractionLog::from_records(sessionize(&views, config.session_gap_secs))
}

/// Label each tree item with the description a perfect planner would emit:
/// its curated target when one exists, otherwise the first non-empty
/// level-`level` cluster (by id) that differs from its own but shares the
/// level-`level − delta` ancestor. Items without such a sibling get their
/// own cluster's description.
pub fn oracle_labels(tree: &ClusterTree, examples: &[TrainingExample], spec: LevelSpec) -> HashMap<ItemId, String> {
    let best = crate::serendipity::eval_set(examples);
    let curated: HashMap<&str, &str> = best
        .iter()
        .filter_map(|e| tree.node(&e.target_cluster_id).map(|n| (e.context_item_id.as_str(), n.description.as_str())))
        .collect();
    let mut out = HashMap::new();
    for item in tree.leaf_assignment().keys() {
        let label = match curated.get(item.as_str()) {
            Some(d) => d.to_string(),
            None => {
                let own = tree.item_ancestor(item, spec.level).expect("item in tree");
                let broad = tree.ancestor_at(own, spec.broad_level()).expect("valid level");
                let sibling = tree
                    .nodes_at_level(spec.level)
                    .filter(|n| &n.node_id != own && !tree.members(&n.node_id).is_empty())
                    .filter(|n| tree.ancestor_at(&n.node_id, spec.broad_level()).ok() == Some(broad))
                    .map(|n| &n.node_id)
                    .min();
                let node = sibling.unwrap_or(own);
                tree.node(node).expect("known node").description.clone()
            }
        };
        out.insert(item.clone(), label);
    }
    out
}
