//! Hierarchical, traffic-balanced item clustering.
//!
//! The tree is built top-down: every internal node splits its items with
//! spherical k-means (k-means++ seeding), then a balancing pass moves items
//! between siblings until their traffic masses are within `1 + ε` of each
//! other or no move reduces the imbalance. Each node gets a title-derived
//! description that is unique across the whole tree, so a generated
//! description can be translated back into exactly one node.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{dot, l2_norm, Item, ItemCatalog, ItemId};
use crate::persist;

pub type NodeId = String;

pub const ROOT_ID: &str = "r";

const LLOYD_ITERATIONS: usize = 30;
const BALANCE_ROUNDS: usize = 20;
const REPAIR_SWEEPS: usize = 10;
const RESTARTS: usize = 4;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("cannot build a tree over an empty catalog")]
    EmptyCatalog,
    #[error("invalid tree config: {0}")]
    InvalidConfig(String),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("unknown item {0}")]
    UnknownItem(ItemId),
    #[error("level {level} out of range for node {node} at level {node_level}")]
    LevelOutOfRange {
        node: NodeId,
        level: usize,
        node_level: usize,
    },
    #[error("item {item} has dimension {got}, tree expects {expected}")]
    DimensionMismatch {
        item: ItemId,
        got: usize,
        expected: usize,
    },
    #[error("malformed tree document: {0}")]
    Malformed(String),
    #[error(transparent)]
    Persist(#[from] persist::PersistError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub levels: usize,
    /// Fan-out for each internal level, root first; length `levels - 1`.
    pub branching: Vec<usize>,
    pub balance_tolerance: f64,
    pub seed: u64,
    pub version: u64,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            levels: 4,
            branching: vec![4, 4, 4],
            balance_tolerance: 0.25,
            seed: 0,
            version: 1,
        }
    }
}

impl TreeConfig {
    pub fn validate(&self) -> Result<(), TreeError> {
        if self.levels == 0 {
            return Err(TreeError::InvalidConfig("levels must be >= 1".into()));
        }
        if self.branching.len() != self.levels - 1 {
            return Err(TreeError::InvalidConfig(format!(
                "branching has {} entries, expected {}",
                self.branching.len(),
                self.levels - 1
            )));
        }
        if self.branching.contains(&0) {
            return Err(TreeError::InvalidConfig("fan-outs must be >= 1".into()));
        }
        if self.balance_tolerance.is_nan() || self.balance_tolerance < 0.0 {
            return Err(TreeError::InvalidConfig(
                "balance_tolerance must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterNode {
    pub node_id: NodeId,
    pub level: usize,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub description: String,
    pub centroid: Vec<f64>,
    pub traffic_mass: f64,
}

/// Node keys from the root down to an item's leaf.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterPath(pub Vec<NodeId>);

impl ClusterPath {
    pub fn leaf(&self) -> &NodeId {
        self.0.last().expect("paths are never empty")
    }

    pub fn at(&self, level: usize) -> Option<&NodeId> {
        self.0.get(level)
    }
}

/// On-disk form of a tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeDocument {
    pub version: u64,
    pub levels: usize,
    #[serde(default)]
    pub balance_tolerance: f64,
    pub nodes: Vec<ClusterNode>,
    pub leaf_assignment: BTreeMap<ItemId, NodeId>,
}

#[derive(Debug, Clone)]
pub struct ClusterTree {
    version: u64,
    levels: usize,
    balance_tolerance: f64,
    nodes: BTreeMap<NodeId, ClusterNode>,
    leaf_assignment: BTreeMap<ItemId, NodeId>,
    // derived
    members: HashMap<NodeId, Vec<ItemId>>,
    item_paths: HashMap<ItemId, Vec<NodeId>>,
    by_description: HashMap<String, NodeId>,
    empty_leaves: Vec<NodeId>,
}

impl PartialEq for ClusterTree {
    fn eq(&self, other: &Self) -> bool {
        self.version == other.version
            && self.levels == other.levels
            && self.nodes == other.nodes
            && self.leaf_assignment == other.leaf_assignment
    }
}

impl ClusterTree {
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn leaf_level(&self) -> usize {
        self.levels - 1
    }

    pub fn balance_tolerance(&self) -> f64 {
        self.balance_tolerance
    }

    pub fn root(&self) -> &ClusterNode {
        &self.nodes[ROOT_ID]
    }

    pub fn node(&self, id: &str) -> Option<&ClusterNode> {
        self.nodes.get(id)
    }

    /// All nodes ordered by node key.
    pub fn nodes(&self) -> impl Iterator<Item = &ClusterNode> {
        self.nodes.values()
    }

    pub fn nodes_at_level(&self, level: usize) -> impl Iterator<Item = &ClusterNode> {
        self.nodes.values().filter(move |n| n.level == level)
    }

    pub fn leaf_assignment(&self) -> &BTreeMap<ItemId, NodeId> {
        &self.leaf_assignment
    }

    pub fn leaf_of(&self, item: &str) -> Option<&NodeId> {
        self.leaf_assignment.get(item)
    }

    /// Items under `node`, sorted by id.
    pub fn members(&self, node: &str) -> &[ItemId] {
        self.members.get(node).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn empty_leaves(&self) -> &[NodeId] {
        &self.empty_leaves
    }

    pub fn contains_item(&self, item: &str) -> bool {
        self.leaf_assignment.contains_key(item)
    }

    pub fn item_path(&self, item: &str) -> Result<ClusterPath, TreeError> {
        self.item_paths
            .get(item)
            .map(|p| ClusterPath(p.clone()))
            .ok_or_else(|| TreeError::UnknownItem(item.to_string()))
    }

    /// Ancestor of an assigned item at `level`.
    pub fn item_ancestor(&self, item: &str, level: usize) -> Result<&NodeId, TreeError> {
        let path = self
            .item_paths
            .get(item)
            .ok_or_else(|| TreeError::UnknownItem(item.to_string()))?;
        path.get(level).ok_or_else(|| TreeError::LevelOutOfRange {
            node: path.last().cloned().unwrap_or_default(),
            level,
            node_level: path.len() - 1,
        })
    }

    /// Unique ancestor of `node` at `level` (the node itself when the levels match).
    pub fn ancestor_at(&self, node: &str, level: usize) -> Result<&NodeId, TreeError> {
        let mut current = self
            .nodes
            .get(node)
            .ok_or_else(|| TreeError::UnknownNode(node.to_string()))?;
        if level > current.level {
            return Err(TreeError::LevelOutOfRange {
                node: node.to_string(),
                level,
                node_level: current.level,
            });
        }
        while current.level > level {
            let parent = current.parent.as_ref().expect("non-root nodes have parents");
            current = &self.nodes[parent];
        }
        Ok(&current.node_id)
    }

    /// Exact, case-sensitive lookup of a description after trimming
    /// surrounding whitespace. Empty clusters never resolve.
    pub fn resolve_description(&self, text: &str) -> Option<&NodeId> {
        self.by_description.get(text.trim())
    }

    /// Greedy root-to-leaf descent by cosine similarity to child centroids.
    /// Ties go to the child with smaller traffic mass, then smaller key.
    pub fn assign_item(&self, item: &Item) -> Result<ClusterPath, TreeError> {
        let dim = self.root().centroid.len();
        if item.topic_vector.len() != dim {
            return Err(TreeError::DimensionMismatch {
                item: item.item_id.clone(),
                got: item.topic_vector.len(),
                expected: dim,
            });
        }
        let mut path = vec![ROOT_ID.to_string()];
        let mut current = self.root();
        while !current.children.is_empty() {
            let best = current
                .children
                .iter()
                .map(|c| &self.nodes[c])
                .max_by(|a, b| {
                    let sa = cosine(&item.topic_vector, &a.centroid);
                    let sb = cosine(&item.topic_vector, &b.centroid);
                    sa.total_cmp(&sb)
                        .then(b.traffic_mass.total_cmp(&a.traffic_mass))
                        .then(b.node_id.cmp(&a.node_id))
                })
                .expect("children non-empty");
            path.push(best.node_id.clone());
            current = best;
        }
        Ok(ClusterPath(path))
    }

    /// Per-parent sibling balance in traffic mass and in item count.
    pub fn balance_report(&self, branching: &[usize]) -> Vec<BalanceEntry> {
        let mut out = Vec::new();
        for node in self.nodes.values() {
            if node.children.len() < 2 {
                continue;
            }
            let masses: Vec<f64> = node
                .children
                .iter()
                .map(|c| self.nodes[c].traffic_mass)
                .collect();
            let counts: Vec<f64> = node
                .children
                .iter()
                .map(|c| self.members(c).len() as f64)
                .collect();
            let fan_out = branching.get(node.level).copied().unwrap_or(node.children.len());
            out.push(BalanceEntry {
                parent: node.node_id.clone(),
                mass_ratio: spread_ratio(&masses),
                count_ratio: spread_ratio(&counts),
                exempt: self.members(&node.node_id).len() < 2 * fan_out,
            });
        }
        out
    }

    pub fn to_document(&self) -> TreeDocument {
        let mut nodes: Vec<ClusterNode> = self.nodes.values().cloned().collect();
        nodes.sort_by(|a, b| (a.level, &a.node_id).cmp(&(b.level, &b.node_id)));
        TreeDocument {
            version: self.version,
            levels: self.levels,
            balance_tolerance: self.balance_tolerance,
            nodes,
            leaf_assignment: self.leaf_assignment.clone(),
        }
    }

    /// Validates a document's structure and rebuilds the lookup indices.
    pub fn from_document(doc: TreeDocument) -> Result<Self, TreeError> {
        let malformed = |m: String| TreeError::Malformed(m);
        if doc.levels == 0 {
            return Err(malformed("levels must be >= 1".into()));
        }
        let mut nodes = BTreeMap::new();
        for n in doc.nodes {
            if n.level >= doc.levels {
                return Err(malformed(format!("node {} has level {}", n.node_id, n.level)));
            }
            if n.description.trim().is_empty() {
                return Err(malformed(format!("node {} has no description", n.node_id)));
            }
            if let Some(prev) = nodes.insert(n.node_id.clone(), n) {
                return Err(malformed(format!("duplicate node {}", prev.node_id)));
            }
        }
        let root = nodes
            .get(ROOT_ID)
            .ok_or_else(|| malformed("missing root".into()))?;
        if root.level != 0 || root.parent.is_some() {
            return Err(malformed("root must be a parentless level-0 node".into()));
        }
        for n in nodes.values() {
            if n.node_id != ROOT_ID {
                let parent = n
                    .parent
                    .as_ref()
                    .and_then(|p| nodes.get(p))
                    .ok_or_else(|| malformed(format!("node {} has no valid parent", n.node_id)))?;
                if parent.level + 1 != n.level || !parent.children.contains(&n.node_id) {
                    return Err(malformed(format!("broken parent link at {}", n.node_id)));
                }
            }
            for c in &n.children {
                match nodes.get(c) {
                    Some(child) if child.parent.as_deref() == Some(n.node_id.as_str()) => {}
                    _ => return Err(malformed(format!("broken child link {} -> {c}", n.node_id))),
                }
            }
            if n.children.is_empty() != (n.level == doc.levels - 1) {
                return Err(malformed(format!("node {} leaf/level mismatch", n.node_id)));
            }
        }
        for (item, leaf) in &doc.leaf_assignment {
            match nodes.get(leaf) {
                Some(n) if n.level == doc.levels - 1 => {}
                _ => return Err(malformed(format!("item {item} assigned to non-leaf {leaf}"))),
            }
        }
        let mut seen = HashSet::new();
        for n in nodes.values() {
            if !seen.insert(n.description.as_str()) {
                return Err(malformed(format!("duplicate description {:?}", n.description)));
            }
        }
        let mut tree = ClusterTree {
            version: doc.version,
            levels: doc.levels,
            balance_tolerance: doc.balance_tolerance,
            nodes,
            leaf_assignment: doc.leaf_assignment,
            members: HashMap::new(),
            item_paths: HashMap::new(),
            by_description: HashMap::new(),
            empty_leaves: Vec::new(),
        };
        tree.rebuild_index();
        Ok(tree)
    }

    fn rebuild_index(&mut self) {
        let mut members: HashMap<NodeId, Vec<ItemId>> = HashMap::new();
        let mut item_paths = HashMap::new();
        for (item, leaf) in &self.leaf_assignment {
            let mut path = Vec::with_capacity(self.levels);
            let mut current = &self.nodes[leaf];
            loop {
                members
                    .entry(current.node_id.clone())
                    .or_default()
                    .push(item.clone());
                path.push(current.node_id.clone());
                match &current.parent {
                    Some(p) => current = &self.nodes[p],
                    None => break,
                }
            }
            path.reverse();
            item_paths.insert(item.clone(), path);
        }
        for list in members.values_mut() {
            list.sort();
        }
        self.empty_leaves = self
            .nodes
            .values()
            .filter(|n| n.children.is_empty() && !members.contains_key(&n.node_id))
            .map(|n| n.node_id.clone())
            .collect();
        self.by_description = self
            .nodes
            .values()
            .filter(|n| members.contains_key(&n.node_id))
            .map(|n| (n.description.clone(), n.node_id.clone()))
            .collect();
        self.members = members;
        self.item_paths = item_paths;
    }

    pub fn save(&self, path: &Path) -> Result<(), TreeError> {
        persist::write_json_atomic(path, &self.to_document())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TreeError> {
        let doc: TreeDocument = persist::read_json(path)?;
        Self::from_document(doc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceEntry {
    pub parent: NodeId,
    /// max/min sibling traffic mass.
    pub mass_ratio: f64,
    /// max/min sibling item count; reported only.
    pub count_ratio: f64,
    /// Parents with fewer than `2 * fan_out` items are not held to the tolerance.
    pub exempt: bool,
}

fn spread_ratio(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::MIN, f64::max);
    let min = values.iter().cloned().fold(f64::MAX, f64::min);
    if max <= 0.0 {
        1.0
    } else if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

fn normalized_mean<'a>(vectors: impl Iterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let mut sum = vec![0.0; dim];
    for v in vectors {
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
    }
    let norm = l2_norm(&sum);
    if norm > 0.0 {
        for s in &mut sum {
            *s /= norm;
        }
    }
    sum
}

/// FNV-1a; used to derive a per-node RNG stream from the build seed so the
/// result does not depend on the order subtrees are built in.
fn node_seed(seed: u64, node_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in node_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

struct BuildCtx<'a> {
    items: Vec<&'a Item>,
    config: &'a TreeConfig,
    dim: usize,
}

struct Subtree {
    nodes: Vec<ClusterNode>,
    leaves: Vec<(usize, NodeId)>,
}

/// Splits `members` (indices into `ctx.items`) into at most `fan_out`
/// non-empty groups balanced by traffic mass.
fn split(ctx: &BuildCtx, members: &[usize], fan_out: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let k = fan_out.min(members.len()).max(1);
    if k == 1 {
        return vec![members.to_vec()];
    }
    let mut best: Option<(usize, Vec<Vec<usize>>)> = None;
    for _ in 0..RESTARTS {
        let (agree, groups) = split_once(ctx, members, k, rng);
        if best.as_ref().is_none_or(|(a, _)| agree > *a) {
            best = Some((agree, groups));
        }
        if agree == members.len() {
            break;
        }
    }
    best.expect("at least one restart").1
}

/// One seeded k-means run followed by balancing. Returns the groups and how
/// many members sit closest to their own group's centroid.
fn split_once(ctx: &BuildCtx, members: &[usize], k: usize, rng: &mut ChaCha8Rng) -> (usize, Vec<Vec<usize>>) {
    let vec_of = |i: usize| ctx.items[i].topic_vector.as_slice();

    // k-means++ seeding on cosine distance
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut chosen = HashSet::new();
    let first = members[rng.gen_range(0..members.len())];
    chosen.insert(first);
    centroids.push(vec_of(first).to_vec());
    let mut nearest: Vec<f64> = members
        .iter()
        .map(|&i| (1.0 - dot(vec_of(i), &centroids[0])).max(0.0))
        .collect();
    while centroids.len() < k {
        let total: f64 = nearest
            .iter()
            .zip(members)
            .filter(|(_, i)| !chosen.contains(*i))
            .map(|(d, _)| d * d)
            .sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (pos, &i) in members.iter().enumerate() {
                if chosen.contains(&i) {
                    continue;
                }
                let w = nearest[pos] * nearest[pos];
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total implies a candidate")
        } else {
            let rest: Vec<usize> = members.iter().copied().filter(|i| !chosen.contains(i)).collect();
            rest[rng.gen_range(0..rest.len())]
        };
        chosen.insert(pick);
        centroids.push(vec_of(pick).to_vec());
        let c = centroids.last().unwrap();
        for (pos, &i) in members.iter().enumerate() {
            nearest[pos] = nearest[pos].min((1.0 - dot(vec_of(i), c)).max(0.0));
        }
    }

    // Lloyd iterations
    let closest = |v: &[f64], centroids: &[Vec<f64>]| -> usize {
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for (g, c) in centroids.iter().enumerate() {
            let s = dot(v, c);
            if s > best_sim {
                best_sim = s;
                best = g;
            }
        }
        best
    };
    let mut assignment: Vec<usize> = members.iter().map(|&i| closest(vec_of(i), &centroids)).collect();
    for _ in 0..LLOYD_ITERATIONS {
        for (g, c) in centroids.iter_mut().enumerate() {
            let mean = normalized_mean(
                members
                    .iter()
                    .zip(&assignment)
                    .filter(|(_, &a)| a == g)
                    .map(|(&i, _)| vec_of(i)),
                ctx.dim,
            );
            if l2_norm(&mean) > 0.0 {
                *c = mean;
            }
        }
        let next: Vec<usize> = members.iter().map(|&i| closest(vec_of(i), &centroids)).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }

    // Balancing moves boundary items away from their nearest centroid. Re-centre
    // on the balanced groups and repeat, keeping the round whose groups best
    // agree with their own centroids, so greedy descent reproduces the split.
    let mut best: Option<(usize, Vec<Vec<usize>>)> = None;
    for _ in 0..BALANCE_ROUNDS {
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (&i, &g) in members.iter().zip(&assignment) {
            groups[g].push(i);
        }
        fill_empty(ctx, &mut groups, &mut centroids);
        balance(ctx, &mut groups, &centroids);
        for g in &mut groups {
            g.sort_unstable();
        }
        let recentre = |groups: &[Vec<usize>]| -> Vec<Vec<f64>> {
            groups
                .iter()
                .map(|g| normalized_mean(g.iter().map(|&i| vec_of(i)), ctx.dim))
                .collect()
        };
        centroids = recentre(&groups);
        for _ in 0..REPAIR_SWEEPS {
            if !repair(ctx, &mut groups, &centroids) {
                break;
            }
            centroids = recentre(&groups);
        }
        let agree = groups
            .iter()
            .enumerate()
            .map(|(g, m)| m.iter().filter(|&&i| closest(vec_of(i), &centroids) == g).count())
            .sum::<usize>();
        let next: Vec<usize> = members.iter().map(|&i| closest(vec_of(i), &centroids)).collect();
        let done = agree == members.len() || next == assignment;
        if best.as_ref().is_none_or(|(a, _)| agree > *a) {
            best = Some((agree, groups));
        }
        if done {
            break;
        }
        assignment = next;
    }
    best.expect("at least one round")
}

/// Moves items into the sibling whose centroid they prefer while the mass
/// ratio stays within tolerance (or does not grow), largest preference first;
/// then swaps pairs of items that prefer each other's group. Returns whether
/// anything changed.
fn repair(ctx: &BuildCtx, groups: &mut [Vec<usize>], centroids: &[Vec<f64>]) -> bool {
    let tol = ctx.config.balance_tolerance;
    let weight = |i: usize| ctx.items[i].traffic_weight;
    let mut masses: Vec<f64> = groups.iter().map(|g| g.iter().map(|&i| weight(i)).sum()).collect();
    let mut group_of: HashMap<usize, usize> = HashMap::new();
    let mut wrong: Vec<(f64, usize, usize, usize)> = Vec::new();
    for (g, members) in groups.iter().enumerate() {
        for &i in members {
            group_of.insert(i, g);
            let v = ctx.items[i].topic_vector.as_slice();
            let own = dot(v, &centroids[g]);
            let (h, sim) = centroids
                .iter()
                .enumerate()
                .map(|(h, c)| (h, dot(v, c)))
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .unwrap();
            if h != g && sim > own {
                wrong.push((sim - own, i, g, h));
            }
        }
    }
    wrong.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let mut changed = false;
    let mut pending = Vec::new();
    for &(margin, i, from, to) in &wrong {
        let before = spread_ratio(&masses);
        masses[from] -= weight(i);
        masses[to] += weight(i);
        if sizes[from] >= 2 && spread_ratio(&masses) <= (1.0 + tol).max(before) + 1e-12 {
            group_of.insert(i, to);
            sizes[from] -= 1;
            sizes[to] += 1;
            changed = true;
        } else {
            masses[from] += weight(i);
            masses[to] -= weight(i);
            pending.push((margin, i, from, to));
        }
    }
    let mut used = HashSet::new();
    for (x, &(_, i, a, b)) in pending.iter().enumerate() {
        if used.contains(&i) {
            continue;
        }
        for &(_, j, c, d) in &pending[x + 1..] {
            if c != b || d != a || used.contains(&j) {
                continue;
            }
            let before = spread_ratio(&masses);
            let shift = weight(i) - weight(j);
            masses[a] -= shift;
            masses[b] += shift;
            if spread_ratio(&masses) <= (1.0 + tol).max(before) + 1e-12 {
                group_of.insert(i, b);
                group_of.insert(j, a);
                used.insert(i);
                used.insert(j);
                changed = true;
                break;
            }
            masses[a] += shift;
            masses[b] -= shift;
        }
    }
    if changed {
        for g in groups.iter_mut() {
            g.clear();
        }
        let mut all: Vec<(usize, usize)> = group_of.into_iter().collect();
        all.sort_unstable();
        for (i, g) in all {
            groups[g].push(i);
        }
    }
    changed
}

/// Every child gets at least one item: take the worst-fitting item of the
/// largest group.
fn fill_empty(ctx: &BuildCtx, groups: &mut [Vec<usize>], centroids: &mut [Vec<f64>]) {
    let k = groups.len();
    let vec_of = |i: usize| ctx.items[i].topic_vector.as_slice();
    for g in 0..k {
        if !groups[g].is_empty() {
            continue;
        }
        let donor = (0..k)
            .max_by(|&a, &b| groups[a].len().cmp(&groups[b].len()).then(b.cmp(&a)))
            .unwrap();
        let pos = (0..groups[donor].len())
            .min_by(|&a, &b| {
                let sa = dot(vec_of(groups[donor][a]), &centroids[donor]);
                let sb = dot(vec_of(groups[donor][b]), &centroids[donor]);
                sa.total_cmp(&sb).then(a.cmp(&b))
            })
            .unwrap();
        let moved = groups[donor].remove(pos);
        groups[g].push(moved);
        centroids[g] = vec_of(moved).to_vec();
    }
}

/// Moves items from heavier to lighter siblings. Only moves with
/// `0 < w < mass_from - mass_to` are taken, each strictly lowers the sum of
/// squared masses, so the loop terminates.
fn balance(ctx: &BuildCtx, groups: &mut [Vec<usize>], centroids: &[Vec<f64>]) {
    let tol = ctx.config.balance_tolerance;
    let weight = |i: usize| ctx.items[i].traffic_weight;
    let mut masses: Vec<f64> = groups.iter().map(|g| g.iter().map(|&i| weight(i)).sum()).collect();
    loop {
        if spread_ratio(&masses) <= 1.0 + tol + 1e-12 {
            return;
        }
        let mut order: Vec<usize> = (0..groups.len()).collect();
        order.sort_by(|&a, &b| masses[b].total_cmp(&masses[a]).then(a.cmp(&b)));
        let mut moved = false;
        'pairs: for &from in &order {
            for &to in order.iter().rev() {
                if masses[to] >= masses[from] {
                    break;
                }
                if groups[from].len() < 2 {
                    continue;
                }
                // Cheapest similarity loss per unit of useful mass moved.
                let gap = masses[from] - masses[to];
                let best = groups[from]
                    .iter()
                    .enumerate()
                    .filter(|(_, &i)| weight(i) > 0.0 && weight(i) < gap)
                    .map(|(pos, &i)| {
                        let v = ctx.items[i].topic_vector.as_slice();
                        let loss = dot(v, &centroids[from]) - dot(v, &centroids[to]);
                        (pos, i, loss / weight(i).min(gap / 2.0))
                    })
                    .min_by(|a, b| a.2.total_cmp(&b.2).then(a.1.cmp(&b.1)));
                if let Some((pos, i, _)) = best {
                    groups[from].swap_remove(pos);
                    groups[to].push(i);
                    masses[from] -= weight(i);
                    masses[to] += weight(i);
                    moved = true;
                    break 'pairs;
                }
            }
        }
        if !moved {
            return;
        }
    }
}

fn build_subtree(ctx: &BuildCtx, node_id: NodeId, parent: Option<NodeId>, level: usize, members: Vec<usize>) -> Subtree {
    let leaf_level = ctx.config.levels - 1;
    let centroid = normalized_mean(members.iter().map(|&i| ctx.items[i].topic_vector.as_slice()), ctx.dim);
    if level == leaf_level {
        let mass = members.iter().map(|&i| ctx.items[i].traffic_weight).sum();
        let leaves = members.iter().map(|&i| (i, node_id.clone())).collect();
        return Subtree {
            nodes: vec![ClusterNode {
                node_id,
                level,
                parent,
                children: Vec::new(),
                description: String::new(),
                centroid,
                traffic_mass: mass,
            }],
            leaves,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(node_seed(ctx.config.seed, &node_id));
    let groups = if members.is_empty() {
        vec![Vec::new()]
    } else {
        split(ctx, &members, ctx.config.branching[level], &mut rng)
    };
    let children: Vec<NodeId> = (0..groups.len()).map(|g| format!("{node_id}.{g}")).collect();
    let subtrees: Vec<Subtree> = groups
        .into_par_iter()
        .zip(children.par_iter())
        .map(|(g, child)| build_subtree(ctx, child.clone(), Some(node_id.clone()), level + 1, g))
        .collect();
    // child roots are the first node of each subtree
    let mass = subtrees.iter().map(|s| s.nodes[0].traffic_mass).sum();
    let mut nodes = vec![ClusterNode {
        node_id,
        level,
        parent,
        children,
        description: String::new(),
        centroid,
        traffic_mass: mass,
    }];
    let mut leaves = Vec::new();
    for s in subtrees {
        nodes.extend(s.nodes);
        leaves.extend(s.leaves);
    }
    Subtree { nodes, leaves }
}

/// Builds the cluster tree. Deterministic for a given catalog and config.
pub fn build_tree(catalog: &ItemCatalog, config: &TreeConfig) -> Result<ClusterTree, TreeError> {
    config.validate()?;
    if catalog.is_empty() {
        return Err(TreeError::EmptyCatalog);
    }
    let ctx = BuildCtx {
        items: catalog.items().collect(),
        config,
        dim: catalog.dimension(),
    };
    let all: Vec<usize> = (0..ctx.items.len()).collect();
    let subtree = build_subtree(&ctx, ROOT_ID.to_string(), None, 0, all);

    let leaf_assignment: BTreeMap<ItemId, NodeId> = subtree
        .leaves
        .into_iter()
        .map(|(i, leaf)| (ctx.items[i].item_id.clone(), leaf))
        .collect();
    let mut tree = ClusterTree {
        version: config.version,
        levels: config.levels,
        balance_tolerance: config.balance_tolerance,
        nodes: subtree.nodes.into_iter().map(|n| (n.node_id.clone(), n)).collect(),
        leaf_assignment,
        members: HashMap::new(),
        item_paths: HashMap::new(),
        by_description: HashMap::new(),
        empty_leaves: Vec::new(),
    };
    tree.rebuild_index();
    for leaf in &tree.empty_leaves {
        log::warn!("leaf {leaf} is empty and excluded from description resolution");
    }

    let terms = TermStats::from_items(catalog.items());
    let mut registry = DescriptionRegistry::default();
    let mut order: Vec<(usize, NodeId)> = tree.nodes.values().map(|n| (n.level, n.node_id.clone())).collect();
    order.sort();
    for (_, id) in order {
        let members: Vec<&Item> = tree
            .members(&id)
            .iter()
            .map(|m| catalog.get(m).expect("tree built from catalog"))
            .collect();
        let raw = describe_cluster(&id, &members, &terms);
        let unique = registry.claim(&raw);
        tree.nodes.get_mut(&id).unwrap().description = unique;
    }
    tree.rebuild_index();
    Ok(tree)
}

/// Lowercased alphanumeric tokens of a title.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Corpus-wide title term frequencies.
#[derive(Debug, Clone, Default)]
pub struct TermStats {
    counts: HashMap<String, usize>,
}

impl TermStats {
    pub fn from_items<'a>(items: impl IntoIterator<Item = &'a Item>) -> Self {
        let mut counts = HashMap::new();
        for item in items {
            for t in tokenize(&item.title) {
                *counts.entry(t).or_insert(0) += 1;
            }
        }
        TermStats { counts }
    }

    pub fn count(&self, term: &str) -> usize {
        self.counts.get(term).copied().unwrap_or(0)
    }
}

/// Raw (not yet uniquified) description: the three title terms with the
/// highest in-cluster / corpus frequency ratio, best first. Ties prefer the
/// more frequent in-cluster term, then lexical order.
pub fn describe_cluster(node_id: &str, members: &[&Item], terms: &TermStats) -> String {
    if members.is_empty() {
        return format!("(empty cluster {node_id})");
    }
    let mut local: HashMap<String, usize> = HashMap::new();
    for item in members {
        for t in tokenize(&item.title) {
            *local.entry(t).or_insert(0) += 1;
        }
    }
    let mut scored: Vec<(f64, usize, String)> = local
        .into_iter()
        .map(|(t, c)| {
            let corpus = terms.count(&t).max(c);
            (c as f64 / corpus as f64, c, t)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
    let top: Vec<String> = scored.into_iter().take(3).map(|(_, _, t)| t).collect();
    if top.is_empty() {
        format!("(cluster {node_id})")
    } else {
        top.join(" ")
    }
}

/// Hands out tree-wide unique descriptions; the k-th claimant of an
/// already-used string gets the suffix `#k`.
#[derive(Debug, Default)]
pub struct DescriptionRegistry {
    claims: HashMap<String, usize>,
    used: HashSet<String>,
}

impl DescriptionRegistry {
    pub fn claim(&mut self, raw: &str) -> String {
        let n = self.claims.entry(raw.to_string()).or_insert(0);
        *n += 1;
        let mut k = *n;
        let mut candidate = if k == 1 { raw.to_string() } else { format!("{raw} #{k}") };
        while self.used.contains(&candidate) {
            k += 1;
            candidate = format!("{raw} #{k}");
        }
        self.used.insert(candidate.clone());
        candidate
    }
}
