//! Pipeline configuration: one TOML file, every key overridable from the
//! command line with `--set section.key=value`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustertree::TreeConfig;
use crate::evalsim::SimConfig;
use crate::planner::{PlanConfig, PromptOptions, PromptType, ResolutionPolicy};
use crate::serendipity::{CurationConfig, LevelSpec, MiningConfig};
use crate::synth::SynthConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("config: {0}")]
    Parse(String),
    #[error("override {0:?} is not of the form section.key=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub items: PathBuf,
    pub interactions: PathBuf,
    pub tree: PathBuf,
    pub mining: PathBuf,
    pub training: PathBuf,
    pub cache: PathBuf,
    pub eval_report: PathBuf,
    pub bucket_csv: PathBuf,
    pub impressions: PathBuf,
    pub simulation: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            items: "data/items.jsonl".into(),
            interactions: "data/interactions.jsonl".into(),
            tree: "artifacts/tree.json".into(),
            mining: "artifacts/mining.json".into(),
            training: "artifacts/training.jsonl".into(),
            cache: "artifacts/plan_cache.json".into(),
            eval_report: "artifacts/eval.json".into(),
            bucket_csv: "artifacts/buckets.csv".into(),
            impressions: "artifacts/impressions.json".into(),
            simulation: "artifacts/simulation.json".into(),
        }
    }
}

impl Paths {
    fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.items,
            &mut self.interactions,
            &mut self.tree,
            &mut self.mining,
            &mut self.training,
            &mut self.cache,
            &mut self.eval_report,
            &mut self.bucket_csv,
            &mut self.impressions,
            &mut self.simulation,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusParams {
    pub dimension: usize,
}

impl Default for CorpusParams {
    fn default() -> Self {
        CorpusParams { dimension: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeParams {
    pub levels: usize,
    pub branching: Vec<usize>,
    pub balance_tolerance: f64,
    pub seed: u64,
}

impl Default for TreeParams {
    fn default() -> Self {
        let t = TreeConfig::default();
        TreeParams {
            levels: t.levels,
            branching: t.branching,
            balance_tolerance: t.balance_tolerance,
            seed: t.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SerendipityParams {
    pub level: usize,
    pub delta: usize,
    pub top_k: usize,
    pub min_support: u64,
    pub smoothing: f64,
}

impl Default for SerendipityParams {
    fn default() -> Self {
        let c = CurationConfig::default();
        SerendipityParams {
            level: c.levels.level,
            delta: c.levels.delta,
            top_k: c.top_k,
            min_support: c.min_support,
            smoothing: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionKind {
    Strict,
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerParams {
    pub prompt_type: PromptType,
    pub frames: usize,
    pub use_thumbnail: bool,
    pub resolution: ResolutionKind,
    pub max_edit_distance: f64,
    pub max_retries: u32,
    /// `oracle`, `noisy:<q>`, `replay:<path>` or `remote:<url>`.
    pub backend: String,
    pub backend_seed: u64,
    pub timeout_secs: u64,
}

impl Default for PlannerParams {
    fn default() -> Self {
        PlannerParams {
            prompt_type: PromptType::VideoCot,
            frames: 4,
            use_thumbnail: false,
            resolution: ResolutionKind::Nearest,
            max_edit_distance: 0.25,
            max_retries: 2,
            backend: "oracle".into(),
            backend_seed: 0,
            timeout_secs: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchParams {
    pub target_coverage: f64,
    pub workers: usize,
}

impl Default for BatchParams {
    fn default() -> Self {
        BatchParams {
            target_coverage: 0.8,
            workers: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieverParams {
    pub half_life_days: f64,
    pub beta: f64,
    pub k: usize,
}

impl Default for RetrieverParams {
    fn default() -> Self {
        RetrieverParams {
            half_life_days: 7.0,
            beta: 0.1,
            k: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParams {
    pub n_users: usize,
    pub n_steps: usize,
    pub prefs_per_user: usize,
    pub k: usize,
    pub p_similar: f64,
    pub p_serendip: f64,
    pub p_unrelated: f64,
    pub visual_boost: f64,
    pub seed: u64,
    pub n_buckets: usize,
}

impl Default for SimParams {
    fn default() -> Self {
        let s = SimConfig::default();
        SimParams {
            n_users: s.n_users,
            n_steps: s.n_steps,
            prefs_per_user: s.prefs_per_user,
            k: s.k,
            p_similar: s.p_similar,
            p_serendip: s.p_serendip,
            p_unrelated: s.p_unrelated,
            visual_boost: 0.3,
            seed: s.seed,
            n_buckets: 5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub corpus: CorpusParams,
    pub tree: TreeParams,
    pub serendipity: SerendipityParams,
    pub planner: PlannerParams,
    pub batch: BatchParams,
    pub retriever: RetrieverParams,
    pub sim: SimParams,
    /// Parameters of `gen-data`.
    pub data: SynthConfig,
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let bad = || ConfigError::Override(spec.to_string());
    let (key, raw) = spec.split_once('=').ok_or_else(bad)?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
        return Err(bad());
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(bad)?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl PipelineConfig {
    /// Reads `path` (or starts from defaults when `None`), applies the
    /// overrides and validates. Relative paths resolve against the config
    /// file's directory, or the working directory without a file.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let (mut table, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Read {
                    path: p.display().to_string(),
                    reason: e.to_string(),
                })?;
                let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
                (table, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (toml::Table::new(), PathBuf::new()),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config: PipelineConfig = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
        config.paths.rebase(&base);
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        self.tree_config(1).validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.levels()
            .validate(self.tree.levels)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.corpus.dimension == 0 {
            return invalid("corpus.dimension must be positive".into());
        }
        if self.serendipity.top_k == 0 {
            return invalid("serendipity.top_k must be positive".into());
        }
        if self.serendipity.smoothing.is_nan() || self.serendipity.smoothing < 0.0 {
            return invalid("serendipity.smoothing must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.batch.target_coverage) {
            return invalid(format!("batch.target_coverage {} outside [0,1]", self.batch.target_coverage));
        }
        if self.batch.workers == 0 {
            return invalid("batch.workers must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.planner.max_edit_distance) {
            return invalid("planner.max_edit_distance must lie in [0,1]".into());
        }
        if self.planner.prompt_type.has_visual() && !self.planner.use_thumbnail && self.planner.frames == 0 {
            return invalid("planner.frames must be positive for visual prompts".into());
        }
        if self.retriever.k == 0 {
            return invalid("retriever.k must be positive".into());
        }
        if self.retriever.half_life_days.is_nan() || self.retriever.half_life_days <= 0.0 {
            return invalid("retriever.half_life_days must be positive".into());
        }
        if self.sim.n_buckets == 0 {
            return invalid("sim.n_buckets must be positive".into());
        }
        self.sim_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        crate::planner::backend::BackendSpec::parse(&self.planner.backend)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.data.dimension != self.corpus.dimension {
            return invalid("data.dimension must equal corpus.dimension".into());
        }
        Ok(())
    }

    pub fn levels(&self) -> LevelSpec {
        LevelSpec {
            level: self.serendipity.level,
            delta: self.serendipity.delta,
        }
    }

    pub fn tree_config(&self, version: u64) -> TreeConfig {
        TreeConfig {
            levels: self.tree.levels,
            branching: self.tree.branching.clone(),
            balance_tolerance: self.tree.balance_tolerance,
            seed: self.tree.seed,
            version,
        }
    }

    pub fn mining_config(&self) -> MiningConfig {
        MiningConfig {
            levels: self.levels(),
            smoothing: self.serendipity.smoothing,
        }
    }

    pub fn curation_config(&self) -> CurationConfig {
        CurationConfig {
            levels: self.levels(),
            top_k: self.serendipity.top_k,
            min_support: self.serendipity.min_support,
            prompt_type: self.planner.prompt_type,
        }
    }

    pub fn prompt_options(&self) -> PromptOptions {
        PromptOptions {
            frames: self.planner.frames,
            use_thumbnail: self.planner.use_thumbnail,
        }
    }

    pub fn plan_config(&self) -> PlanConfig {
        PlanConfig {
            prompt_type: self.planner.prompt_type,
            prompt: self.prompt_options(),
            level: self.serendipity.level,
            resolution: match self.planner.resolution {
                ResolutionKind::Strict => ResolutionPolicy::Strict,
                ResolutionKind::Nearest => ResolutionPolicy::NearestEditDistance {
                    max_normalized_distance: self.planner.max_edit_distance,
                },
            },
            max_retries: self.planner.max_retries,
        }
    }

    pub fn decay_per_day(&self) -> f64 {
        std::f64::consts::LN_2 / self.retriever.half_life_days
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            n_users: self.sim.n_users,
            n_steps: self.sim.n_steps,
            prefs_per_user: self.sim.prefs_per_user,
            k: self.sim.k,
            p_similar: self.sim.p_similar,
            p_serendip: self.sim.p_serendip,
            p_unrelated: self.sim.p_unrelated,
            visual_boost: self.sim.visual_boost,
            levels: self.levels(),
            seed: self.sim.seed,
            ..SimConfig::default()
        }
    }
}
