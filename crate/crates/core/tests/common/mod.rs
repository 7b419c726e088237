#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serendip::clustertree::{build_tree, ClusterTree, NodeId, TreeConfig};
use serendip::corpus::{InteractionLog, InteractionRecord, Item, ItemCatalog};
use serendip::serendipity::{LevelSpec, SatisfactionStat, SerendipityLabel};
use serendip::synth::{self, LatentTopics, SynthConfig};

pub fn item(id: &str, v: Vec<f64>, traffic: f64) -> Item {
    Item {
        item_id: id.to_string(),
        title: format!("title {id}"),
        topic_vector: v,
        traffic_weight: traffic,
        frame_captions: (0..6).map(|f| format!("{id} frame {f}")).collect(),
        thumbnail_caption: Some(format!("{id} thumbnail")),
        visually_interesting_score: Some(0.5),
    }
}

/// Unstructured random catalog.
pub fn random_catalog(n: usize, dim: usize, seed: u64) -> ItemCatalog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..n).map(|i| {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let traffic = rng.gen_range(0.01..10.0);
        item(&format!("i{i:04}"), v, traffic)
    });
    ItemCatalog::from_items(items, dim).unwrap()
}

pub fn tree_over(catalog: &ItemCatalog, branching: &[usize], seed: u64) -> ClusterTree {
    build_tree(
        catalog,
        &TreeConfig {
            levels: branching.len() + 1,
            branching: branching.to_vec(),
            balance_tolerance: 0.25,
            seed,
            version: 1,
        },
    )
    .unwrap()
}

pub fn small_synth(n_items: usize, n_users: usize, seed: u64) -> (ItemCatalog, LatentTopics, InteractionLog) {
    let cfg = SynthConfig {
        n_items,
        n_users,
        seed,
        ..SynthConfig::default()
    };
    let (catalog, latent) = synth::generate_catalog(&cfg);
    let log = synth::generate_interactions(&catalog, &latent, &cfg);
    (catalog, latent, log)
}

/// Root-to-leaf path found by walking parent links from the leaf holding
/// `item`, independent of the tree's own path index.
pub fn walk_path(tree: &ClusterTree, item: &str) -> Vec<NodeId> {
    let mut path = vec![tree.leaf_of(item).unwrap().clone()];
    while let Some(parent) = tree.node(path.last().unwrap()).unwrap().parent.clone() {
        path.push(parent);
    }
    path.reverse();
    path
}

/// Label from explicit ancestor comparison.
pub fn oracle_label(tree: &ClusterTree, v: &str, n: &str, spec: LevelSpec) -> SerendipityLabel {
    let (pv, pn) = (walk_path(tree, v), walk_path(tree, n));
    if pv[spec.level] == pn[spec.level] {
        SerendipityLabel::Similar
    } else if pv[spec.level - spec.delta] == pn[spec.level - spec.delta] {
        SerendipityLabel::Serendipitous
    } else {
        SerendipityLabel::Unrelated
    }
}

/// Double-loop reference miner: every record against every level-`l`
/// cluster, with labels from explicit ancestor comparison.
pub fn reference_mine(log: &InteractionLog, tree: &ClusterTree, spec: LevelSpec, alpha: f64) -> Vec<SatisfactionStat> {
    let clusters: Vec<&NodeId> = tree.nodes_at_level(spec.level).map(|n| &n.node_id).collect();
    let mut acc: BTreeMap<(String, String), (u64, u64)> = BTreeMap::new();
    for r in &log.records {
        if r.context_item_id == r.next_item_id
            || !tree.contains_item(&r.context_item_id)
            || !tree.contains_item(&r.next_item_id)
        {
            continue;
        }
        for cl in &clusters {
            if walk_path(tree, &r.next_item_id)[spec.level] != **cl {
                continue;
            }
            if oracle_label(tree, &r.context_item_id, &r.next_item_id, spec) != SerendipityLabel::Serendipitous {
                continue;
            }
            let slot = acc.entry((r.context_item_id.clone(), cl.to_string())).or_insert((0, 0));
            slot.0 += r.satisfied as u64;
            slot.1 += 1;
        }
    }
    acc.into_iter()
        .map(|((c, cl), (pos, total))| SatisfactionStat {
            context_item_id: c,
            target_cluster_id: cl,
            positive_count: pos,
            total_count: total,
            rate: (pos as f64 + alpha) / (total as f64 + 2.0 * alpha),
        })
        .collect()
}

/// Textbook Levenshtein dynamic program over chars.
pub fn levenshtein_dp(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

/// Random transition log over catalog ids.
pub fn random_log(catalog: &ItemCatalog, n: usize, seed: u64) -> InteractionLog {
    let ids: Vec<&String> = catalog.ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|i| InteractionRecord {
            user_id: format!("u{}", rng.gen_range(0..50)),
            context_item_id: ids[rng.gen_range(0..ids.len())].clone(),
            next_item_id: ids[rng.gen_range(0..ids.len())].clone(),
            satisfied: rng.gen_bool(0.5),
            timestamp: i as i64 * 37,
        })
        .collect();
    InteractionLog::from_records(records)
}

pub fn count_by<T: Ord + Clone>(xs: impl IntoIterator<Item = T>) -> BTreeMap<T, usize> {
    let mut m = BTreeMap::new();
    for x in xs {
        *m.entry(x).or_insert(0) += 1;
    }
    m
}
