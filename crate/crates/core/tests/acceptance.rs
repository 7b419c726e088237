//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit when
//! any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use serendip::batchinfer::{run_batch, select_corpus, BatchOptions, PlanCache};
use serendip::clustertree::{build_tree, ClusterTree, TreeConfig};
use serendip::corpus::{InteractionLog, ItemCatalog, ItemId};
use serendip::evalsim::{
    bucket_analysis, evaluate, match_rate, novelty_report, simulate, ExploitPolicy, Recommender, SerendipPolicy,
    SimConfig, SimilarContentPolicy,
};
use serendip::planner::{
    plan_cluster, GenerationBackend, NoisyStub, OracleStub, PlanConfig, PlanResult, PromptType, RecordingBackend,
    Stage,
};
use serendip::retriever::{recommend_restricted, train_cooccurrence, CooccurrenceModel};
use serendip::serendipity::{
    classify_pair, curate_training_data, eval_set, mine_pairs, vocabulary, CurationConfig, LevelSpec, MiningConfig,
    SerendipityLabel, TrainingExample,
};
use serendip::synth::{self, SynthConfig};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

struct World {
    catalog: ItemCatalog,
    log: InteractionLog,
    tree: ClusterTree,
    examples: Vec<TrainingExample>,
    labels: HashMap<ItemId, String>,
    cache: PlanCache,
    model: CooccurrenceModel,
}

fn world() -> &'static World {
    static WORLD: OnceLock<World> = OnceLock::new();
    WORLD.get_or_init(|| {
        let cfg = SynthConfig::default();
        let (catalog, latent) = synth::generate_catalog(&cfg);
        let log = synth::generate_interactions(&catalog, &latent, &cfg);
        let tree = build_tree(&catalog, &TreeConfig::default()).unwrap();
        let spec = LevelSpec::default();
        let mined = mine_pairs(&log, &tree, &MiningConfig::default()).unwrap();
        let examples = curate_training_data(&mined.stats, &tree, &CurationConfig::default()).unwrap();
        let labels = synth::oracle_labels(&tree, &examples, spec);
        let selection = select_corpus(&catalog, &log, 0.8);
        let backend = OracleStub::new(labels.clone());
        let cache = run_batch(
            &PlanConfig::default(),
            &backend,
            &tree,
            &catalog,
            &selection.selected,
            None,
            BatchOptions::default(),
        )
        .unwrap();
        let model = train_cooccurrence(&log, &catalog, serendip::retriever::default_decay_per_day()).unwrap();
        World {
            catalog,
            log,
            tree,
            examples,
            labels,
            cache,
            model,
        }
    })
}

fn valid_specs(levels: usize) -> Vec<LevelSpec> {
    let mut out = Vec::new();
    for level in 1..levels {
        for delta in 1..=level {
            out.push(LevelSpec { level, delta });
        }
    }
    out
}

/// 1. classify_pair equals explicit ancestor comparison for every pair.
fn serendipity_oracle_equivalence() -> Outcome {
    let mut checked = 0usize;
    for (seed, branching, n) in [(11u64, [3, 4, 3], 200usize), (12, [4, 4, 4], 150), (13, [2, 3, 5], 97)] {
        let catalog = common::random_catalog(n, 8, seed);
        let tree = common::tree_over(&catalog, &branching, seed);
        let ids: Vec<&ItemId> = catalog.ids().collect();
        for spec in valid_specs(tree.levels()) {
            for v in &ids {
                for w in &ids {
                    let got = classify_pair(&tree, v, w, spec).map_err(|e| e.to_string())?;
                    let want = common::oracle_label(&tree, v, w, spec);
                    ensure!(got == want, "{v},{w} at {spec:?}: got {got:?}, oracle {want:?}");
                    checked += 1;
                }
            }
        }
    }
    Ok(format!("{checked} classifications agree"))
}

/// 2. mine_pairs equals the double-loop reference miner on 10,000 events.
fn mining_equivalence() -> Outcome {
    let (catalog, _, log) = common::small_synth(600, 200, 21);
    ensure!(log.len() >= 10_000, "synthetic log too short: {}", log.len());
    let log = InteractionLog::from_records(log.records[..10_000].to_vec());
    let tree = build_tree(&catalog, &TreeConfig::default()).map_err(|e| e.to_string())?;
    let mut compared = 0;
    for alpha in [0.0, 1.0] {
        let spec = LevelSpec::default();
        let got = mine_pairs(&log, &tree, &MiningConfig { levels: spec, smoothing: alpha })
            .map_err(|e| e.to_string())?
            .stats;
        let want = common::reference_mine(&log, &tree, spec, alpha);
        ensure!(got.len() == want.len(), "alpha {alpha}: {} stats vs {} in reference", got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            ensure!(g == w, "alpha {alpha}: {g:?} != {w:?}");
        }
        compared += got.len();
    }
    Ok(format!("{compared} stats identical over 10000 events"))
}

/// 3. Curation: at most top_k per cluster, documented order, only
/// serendipitous pairs, equal to an oracle sort.
fn curation_contract() -> Outcome {
    let w = world();
    let cfg = CurationConfig::default();
    let mined = mine_pairs(&w.log, &w.tree, &MiningConfig::default()).map_err(|e| e.to_string())?;
    let mut oracle: BTreeMap<String, Vec<(String, f64, u64)>> = BTreeMap::new();
    for s in &mined.stats {
        if s.total_count >= cfg.min_support {
            oracle
                .entry(s.target_cluster_id.clone())
                .or_default()
                .push((s.context_item_id.clone(), s.rate, s.total_count));
        }
    }
    for group in oracle.values_mut() {
        group.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(b.2.cmp(&a.2)).then(a.0.cmp(&b.0)));
        group.truncate(cfg.top_k);
    }
    let mut got: BTreeMap<String, Vec<(String, f64, u64)>> = BTreeMap::new();
    for e in &w.examples {
        got.entry(e.target_cluster_id.clone())
            .or_default()
            .push((e.context_item_id.clone(), e.rate, e.support));
        let first_member = &w.tree.members(&e.target_cluster_id)[0];
        let label = classify_pair(&w.tree, &e.context_item_id, first_member, cfg.levels).map_err(|e| e.to_string())?;
        ensure!(
            label == SerendipityLabel::Serendipitous,
            "{} -> {} is {label:?}",
            e.context_item_id,
            e.target_cluster_id
        );
    }
    ensure!(got.values().all(|g| g.len() <= cfg.top_k), "a cluster exceeds top_k");
    ensure!(got == oracle, "curated examples differ from the oracle sort");
    Ok(format!("{} examples over {} clusters match the oracle", w.examples.len(), got.len()))
}

fn plan_all(backend: &dyn GenerationBackend, tree: &ClusterTree, catalog: &ItemCatalog, pairs: &[(ItemId, String)]) -> Result<Vec<(PlanResult, String)>, String> {
    let config = PlanConfig::default();
    pairs
        .iter()
        .map(|(id, label)| {
            let item = catalog.get(id).ok_or(format!("unknown {id}"))?;
            let plan = plan_cluster(backend, tree, item, &config).map_err(|e| e.to_string())?;
            Ok((plan, label.clone()))
        })
        .collect()
}

/// 4. Oracle stub gives match = recall = 1; noisy stub at q = 0.3 gives
/// both within 0.05 of 0.7 over 1,000 examples.
fn controlled_generation() -> Outcome {
    let w = world();
    let level = LevelSpec::default().level;
    let curated: Vec<(ItemId, String)> = eval_set(&w.examples)
        .into_iter()
        .map(|e| (e.context_item_id, e.target_description))
        .collect();
    ensure!(!curated.is_empty(), "empty eval set");
    let oracle = OracleStub::new(w.labels.clone());
    let outputs = plan_all(&oracle, &w.tree, &w.catalog, &curated)?;
    let report = evaluate(&outputs, &w.tree, level).map_err(|e| e.to_string())?;
    ensure!(
        report.match_rate == 1.0 && report.recall == 1.0,
        "oracle: match {} recall {}",
        report.match_rate,
        report.recall
    );

    let thousand: Vec<(ItemId, String)> = w
        .tree
        .leaf_assignment()
        .keys()
        .take(1000)
        .map(|id| (id.clone(), w.labels[id].clone()))
        .collect();
    ensure!(thousand.len() == 1000, "need 1000 examples");
    let noisy = NoisyStub::new(w.labels.clone(), vocabulary(&w.tree, level), 0.3, 2024);
    let outputs = plan_all(&noisy, &w.tree, &w.catalog, &thousand)?;
    let plans: Vec<PlanResult> = outputs.iter().map(|(p, _)| p.clone()).collect();
    let m = match_rate(&plans);
    let r = serendip::evalsim::recall(&outputs, &w.tree, level).map_err(|e| e.to_string())?;
    ensure!((m - 0.7).abs() <= 0.05, "noisy match_rate {m}");
    ensure!((r - 0.7).abs() <= 0.05, "noisy recall {r}");
    Ok(format!(
        "oracle 1.0/1.0 on {} contexts; noisy match {m:.3} recall {r:.3}",
        curated.len()
    ))
}

/// 5. Chain-of-thought makes exactly two calls per item, other prompt
/// types exactly one, over a 500-item batch.
fn cot_call_discipline() -> Outcome {
    let w = world();
    let items: Vec<ItemId> = w.tree.leaf_assignment().keys().take(500).cloned().collect();
    let mut notes = Vec::new();
    for prompt_type in PromptType::ALL {
        let backend = RecordingBackend::new(OracleStub::new(w.labels.clone()));
        let config = PlanConfig {
            prompt_type,
            ..PlanConfig::default()
        };
        let cache = run_batch(&config, &backend, &w.tree, &w.catalog, &items, None, BatchOptions::default())
            .map_err(|e| e.to_string())?;
        let expected = if prompt_type == PromptType::VideoCot { 2 } else { 1 };
        let calls = backend.call_count();
        ensure!(calls == 500 * expected, "{prompt_type:?}: {calls} calls");
        ensure!(cache.last_run().unwrap().backend_calls == calls, "run log disagrees with the counter");
        let per_item = common::count_by(backend.records().into_iter().map(|r| r.item_id));
        ensure!(
            per_item.len() == 500 && per_item.values().all(|&c| c == expected as usize),
            "{prompt_type:?}: uneven per-item calls"
        );
        let stages: BTreeSet<Stage> = backend.records().into_iter().map(|r| r.stage).collect();
        let want: BTreeSet<Stage> = if expected == 2 {
            [Stage::Summary, Stage::Cluster].into()
        } else {
            [Stage::Direct].into()
        };
        ensure!(stages == want, "{prompt_type:?}: stages {stages:?}");
        notes.push(format!("{}={calls}", prompt_type.as_str()));
    }
    Ok(notes.join(" "))
}

/// 6. select_corpus returns the minimal covering popularity prefix.
fn coverage_selection() -> Outcome {
    let (catalog, _, log) = common::small_synth(1000, 300, 61);
    let target = 0.8;
    let sel = select_corpus(&catalog, &log, target);
    let mut order: Vec<(f64, &ItemId)> = catalog.items().map(|i| (i.traffic_weight, &i.item_id)).collect();
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
    let coverage = |p: usize| {
        let set: HashSet<&str> = order[..p].iter().map(|(_, id)| id.as_str()).collect();
        log.records.iter().filter(|r| set.contains(r.next_item_id.as_str())).count() as f64 / log.len() as f64
    };
    let minimal = (0..=order.len()).find(|&p| coverage(p) >= target).ok_or("target unreachable")?;
    ensure!(sel.selected.len() == minimal, "selected {} items, minimal prefix is {minimal}", sel.selected.len());
    ensure!(
        sel.selected.iter().zip(&order).all(|(a, (_, b))| a == *b),
        "selection is not the popularity prefix"
    );
    ensure!(minimal == 0 || coverage(minimal - 1) < target, "prefix minus one still covers");
    ensure!((sel.achieved_coverage - coverage(minimal)).abs() < 1e-12, "reported coverage differs");
    Ok(format!("prefix {minimal}/1000 reaches {:.4}", sel.achieved_coverage))
}

/// 7. 800 + 200 incremental run equals a from-scratch run and calls the
/// backend for exactly the 200 new items.
fn incremental_equivalence() -> Outcome {
    let w = world();
    let items: Vec<ItemId> = w.tree.leaf_assignment().keys().take(1000).cloned().collect();
    let config = PlanConfig::default();
    let opts = BatchOptions::default();
    let full_backend = RecordingBackend::new(OracleStub::new(w.labels.clone()));
    let full = run_batch(&config, &full_backend, &w.tree, &w.catalog, &items, None, opts).map_err(|e| e.to_string())?;

    let first = OracleStub::new(w.labels.clone());
    let partial = run_batch(&config, &first, &w.tree, &w.catalog, &items[..800], None, opts).map_err(|e| e.to_string())?;
    let second = RecordingBackend::new(OracleStub::new(w.labels.clone()));
    let incremental =
        run_batch(&config, &second, &w.tree, &w.catalog, &items, Some(partial), opts).map_err(|e| e.to_string())?;

    let touched: BTreeSet<ItemId> = second.records().into_iter().map(|r| r.item_id).collect();
    let new: BTreeSet<ItemId> = items[800..].iter().cloned().collect();
    ensure!(touched == new, "incremental run called the backend for {} items", touched.len());
    ensure!(incremental.entries == full.entries, "incremental cache differs from the full run");
    let run = incremental.last_run().unwrap();
    ensure!(run.processed_count == 200 && run.reused_count == 800, "run record {run:?}");
    let (delta_calls, full_calls) = (second.call_count(), full_backend.call_count());
    ensure!(
        delta_calls as f64 <= 0.2 * full_calls as f64,
        "delta run used {delta_calls} calls vs full {full_calls}"
    );
    Ok(format!("200 items replanned, {delta_calls}/{full_calls} calls, caches identical"))
}

struct Audited<'a> {
    inner: SerendipPolicy<'a>,
    calls: std::sync::Mutex<(usize, Vec<String>)>,
}

impl Recommender for Audited<'_> {
    fn name(&self) -> &str {
        "serendip"
    }

    fn recommend(&self, context: &str, k: usize) -> Vec<ItemId> {
        let p = &self.inner;
        let Ok(out) = recommend_restricted(p.model, p.tree, p.cache, context, k, p.beta) else {
            return Vec::new();
        };
        let spec = LevelSpec::default();
        let mut guard = self.calls.lock().unwrap();
        guard.0 += 1;
        let members: HashSet<&ItemId> = p.tree.members(&out.planned_cluster).iter().collect();
        let own = p.tree.item_ancestor(context, spec.level).unwrap();
        for r in &out.recommendations {
            if !members.contains(&r.item_id) {
                guard.1.push(format!("{} outside {}", r.item_id, out.planned_cluster));
            }
            if &out.planned_cluster != own
                && classify_pair(p.tree, context, &r.item_id, spec).unwrap() == SerendipityLabel::Similar
            {
                guard.1.push(format!("{context} -> {} is similar", r.item_id));
            }
        }
        out.recommendations.into_iter().map(|r| r.item_id).collect()
    }

    fn planner_nominated(&self) -> bool {
        true
    }
}

/// 8. Every restricted recommendation lies in the planned cluster and is
/// non-similar when the plan leaves the context's own cluster.
fn restriction_guarantee() -> Outcome {
    let w = world();
    let audited = Audited {
        inner: SerendipPolicy {
            model: &w.model,
            tree: &w.tree,
            cache: &w.cache,
            beta: 0.1,
        },
        calls: std::sync::Mutex::new((0, Vec::new())),
    };
    let exploit = ExploitPolicy { model: &w.model, beta: 0.1 };
    let policies: [&dyn Recommender; 2] = [&audited, &exploit];
    let cfg = SimConfig {
        n_steps: 14_000,
        n_users: 2000,
        seed: 8,
        ..SimConfig::default()
    };
    simulate(&w.catalog, &w.tree, &policies, &cfg).map_err(|e| e.to_string())?;
    let (calls, violations) = audited.calls.into_inner().unwrap();
    ensure!(calls >= 10_000, "only {calls} restricted calls");
    ensure!(violations.is_empty(), "{} violations, first: {}", violations.len(), violations[0]);
    Ok(format!("{calls} calls, 0 violations"))
}

/// 9. Serendip's novel ratio strictly exceeds exploit's and its positive
/// feedback ratio is at least exploit's, for 5 seeds.
fn directional_novelty() -> Outcome {
    let w = world();
    let serendip = SerendipPolicy {
        model: &w.model,
        tree: &w.tree,
        cache: &w.cache,
        beta: 0.1,
    };
    let exploit = ExploitPolicy { model: &w.model, beta: 0.1 };
    let similar = SimilarContentPolicy {
        catalog: &w.catalog,
        tree: &w.tree,
        level: 3,
    };
    let policies: [&dyn Recommender; 3] = [&serendip, &exploit, &similar];
    let mut notes = Vec::new();
    for seed in 1..=5 {
        let cfg = SimConfig {
            n_steps: 10_000,
            n_users: 2000,
            seed,
            ..SimConfig::default()
        };
        ensure!(cfg.p_serendip > cfg.p_similar, "default must favor serendipity");
        let out = simulate(&w.catalog, &w.tree, &policies, &cfg).map_err(|e| e.to_string())?;
        let r = novelty_report(&out.impressions);
        let (s, e) = (&r.models["serendip"], &r.models["exploit"]);
        ensure!(
            s.novel_ratio > e.novel_ratio,
            "seed {seed}: novel {:.4} vs {:.4}",
            s.novel_ratio,
            e.novel_ratio
        );
        ensure!(
            s.positive_feedback_ratio >= e.positive_feedback_ratio,
            "seed {seed}: positive {:.4} vs {:.4}",
            s.positive_feedback_ratio,
            e.positive_feedback_ratio
        );
        notes.push(format!(
            "s{seed} novel {:.3}>{:.3} pos {:.3}>={:.3}",
            s.novel_ratio, e.novel_ratio, s.positive_feedback_ratio, e.positive_feedback_ratio
        ));
    }
    Ok(notes.join("; "))
}

/// 10. Partition, depth, unique descriptions and traffic balance on three
/// seeded catalogs.
fn tree_invariants() -> Outcome {
    let mut notes = Vec::new();
    for seed in [101u64, 202, 303] {
        let cfg = SynthConfig {
            n_items: 1500,
            seed,
            ..SynthConfig::default()
        };
        let (catalog, _) = synth::generate_catalog(&cfg);
        let config = TreeConfig {
            seed,
            ..TreeConfig::default()
        };
        let tree = build_tree(&catalog, &config).map_err(|e| e.to_string())?;

        let mut seen = HashSet::new();
        for leaf in tree.nodes_at_level(3) {
            for m in tree.members(&leaf.node_id) {
                ensure!(seen.insert(m.clone()), "{m} in two leaves");
            }
        }
        ensure!(seen.len() == catalog.len(), "leaves hold {} of {} items", seen.len(), catalog.len());
        for id in catalog.ids() {
            let path = common::walk_path(&tree, id);
            ensure!(path.len() == 4 && path[0] == "r", "{id} has path {path:?}");
        }
        ensure!(tree.nodes().all(|n| n.children.is_empty() == (n.level == 3)), "depth is not 4");
        let descriptions: HashSet<&str> = tree.nodes().map(|n| n.description.as_str()).collect();
        ensure!(descriptions.len() == tree.nodes().count(), "duplicate descriptions");

        let mut worst: f64 = 1.0;
        for node in tree.nodes().filter(|n| n.children.len() > 1) {
            let fan = config.branching[node.level];
            if tree.members(&node.node_id).len() < 2 * fan {
                continue;
            }
            let masses: Vec<f64> = node
                .children
                .iter()
                .map(|c| tree.members(c).iter().map(|m| catalog.get(m).unwrap().traffic_weight).sum())
                .collect();
            let max = masses.iter().cloned().fold(f64::MIN, f64::max);
            let min = masses.iter().cloned().fold(f64::MAX, f64::min);
            let ratio = max / min;
            worst = worst.max(ratio);
            if ratio > 1.0 + config.balance_tolerance + 1e-9 {
                // Report how far any partition could get: the child holding
                // the heaviest item weighs at least that item, and the
                // lightest child at most the average of the rest.
                let total: f64 = masses.iter().sum();
                let heaviest = tree
                    .members(&node.node_id)
                    .iter()
                    .map(|m| catalog.get(m).unwrap().traffic_weight)
                    .fold(0.0, f64::max);
                let bound = heaviest / ((total - heaviest) / (node.children.len() - 1) as f64);
                return Err(format!(
                    "seed {seed}: {} children mass ratio {ratio:.3} > {:.2}; its heaviest item alone forces \
                     any partition to a ratio >= {bound:.3}",
                    node.node_id,
                    1.0 + config.balance_tolerance
                ));
            }
        }
        notes.push(format!("seed {seed} worst ratio {worst:.3}"));
    }
    Ok(notes.join("; "))
}

/// 11. With an engagement boost proportional to the visual score, bucket
/// gains do not increase from bucket 1 to bucket 5.
fn bucket_monotonicity() -> Outcome {
    let w = world();
    let serendip = SerendipPolicy {
        model: &w.model,
        tree: &w.tree,
        cache: &w.cache,
        beta: 0.1,
    };
    let exploit = ExploitPolicy { model: &w.model, beta: 0.1 };
    let policies: [&dyn Recommender; 2] = [&serendip, &exploit];
    let cfg = SimConfig {
        n_steps: 20_000,
        n_users: 2000,
        visual_boost: 0.5,
        seed: 11,
        ..SimConfig::default()
    };
    let out = simulate(&w.catalog, &w.tree, &policies, &cfg).map_err(|e| e.to_string())?;
    let buckets = bucket_analysis(&w.catalog, &out.impressions, "serendip", "exploit", 5).map_err(|e| e.to_string())?;
    let gains: Vec<f64> = buckets.iter().map(|b| b.gain.ok_or("missing gain")).collect::<Result<_, _>>()?;
    ensure!(gains.windows(2).all(|p| p[0] >= p[1]), "gains {gains:?}");
    Ok(format!("gains {:?}", gains.iter().map(|g| format!("{g:.3}")).collect::<Vec<_>>()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 11] = [
        ("1 serendipity oracle equivalence", serendipity_oracle_equivalence, Duration::from_secs(10)),
        ("2 mining equivalence", mining_equivalence, Duration::from_secs(30)),
        ("3 curation contract", curation_contract, Duration::from_secs(5)),
        ("4 controlled generation", controlled_generation, Duration::from_secs(30)),
        ("5 cot call discipline", cot_call_discipline, Duration::from_secs(10)),
        ("6 coverage selection", coverage_selection, Duration::from_secs(10)),
        ("7 incremental equivalence", incremental_equivalence, Duration::from_secs(60)),
        ("8 restriction guarantee", restriction_guarantee, Duration::from_secs(60)),
        ("9 directional novelty", directional_novelty, Duration::from_secs(300)),
        ("10 tree invariants", tree_invariants, Duration::from_secs(60)),
        ("11 bucket monotonicity", bucket_monotonicity, Duration::from_secs(60)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let started = Instant::now();
    world();
    println!("shared fixture ready in {:.2}s", started.elapsed().as_secs_f64());
    let mut failed = 0;
    for (name, check, budget) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let elapsed = t.elapsed();
        let result = match result {
            Ok(detail) if elapsed > budget => Err(format!("{detail}; took {elapsed:.1?}, budget {budget:?}")),
            other => other,
        };
        match result {
            Ok(detail) => println!("PASS  {name} ({elapsed:.2?}): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name} ({elapsed:.2?}): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
