//! Cluster planning via a text-generation backend.
//!
//! A prompt is assembled from an item's title, its current cluster
//! description and caption stand-ins for sampled video frames (or its
//! thumbnail). The backend's reply is then resolved against the level-`l`
//! description vocabulary to obtain a cluster id.

pub mod backend;

use std::sync::LazyLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustertree::{ClusterTree, NodeId};
use crate::corpus::{Item, ItemId};

pub use backend::{
    BackendError, BackendSpec, CallCounter, GenerationBackend, GenerationRequest, NoisyStub, OracleStub,
    RecordingBackend, ReplayBackend, ReplayRecord, Stage,
};
#[cfg(feature = "remote")]
pub use backend::RemoteBackend;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("item {item}: cannot assemble {prompt_type:?} prompt: {reason}")]
    Prompt {
        item: ItemId,
        prompt_type: PromptType,
        reason: String,
    },
    #[error("item {item}: backend failed after {attempts} attempt(s): {source}")]
    Backend {
        item: ItemId,
        attempts: u32,
        #[source]
        source: BackendError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptType {
    TextOnly,
    VideoOnly,
    VideoAndText,
    VideoCot,
}

impl PromptType {
    pub const ALL: [PromptType; 4] = [
        PromptType::TextOnly,
        PromptType::VideoOnly,
        PromptType::VideoAndText,
        PromptType::VideoCot,
    ];

    pub fn has_visual(self) -> bool {
        !matches!(self, PromptType::TextOnly)
    }

    pub fn has_text(self) -> bool {
        matches!(self, PromptType::TextOnly | PromptType::VideoAndText)
    }

    /// Backend calls needed to plan one item.
    pub fn calls_per_item(self) -> u64 {
        match self {
            PromptType::VideoCot => 2,
            _ => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PromptType::TextOnly => "text_only",
            PromptType::VideoOnly => "video_only",
            PromptType::VideoAndText => "video_and_text",
            PromptType::VideoCot => "video_cot",
        }
    }
}

impl std::str::FromStr for PromptType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PromptType::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown prompt type {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Title,
    ClusterDescription,
    FrameCaption,
    ThumbnailCaption,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextBlock {
    pub kind: BlockKind,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub prompt_type: PromptType,
    pub system_text: String,
    pub context_blocks: Vec<ContextBlock>,
    pub instruction_text: String,
}

impl Prompt {
    /// Flat text rendering for backends that take a single string.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.system_text);
        out.push_str("\n\n");
        for b in &self.context_blocks {
            let tag = match b.kind {
                BlockKind::Title => "Title",
                BlockKind::ClusterDescription => "Current cluster",
                BlockKind::FrameCaption => "Frame",
                BlockKind::ThumbnailCaption => "Thumbnail",
            };
            out.push_str(&format!("[{tag}] {}\n", b.text));
        }
        out.push('\n');
        out.push_str(&self.instruction_text);
        out
    }

    fn count(&self, kind: BlockKind) -> usize {
        self.context_blocks.iter().filter(|b| b.kind == kind).count()
    }

    pub fn frame_blocks(&self) -> usize {
        self.count(BlockKind::FrameCaption)
    }

    pub fn visual_blocks(&self) -> usize {
        self.frame_blocks() + self.count(BlockKind::ThumbnailCaption)
    }

    pub fn cluster_blocks(&self) -> usize {
        self.count(BlockKind::ClusterDescription)
    }
}

#[derive(Debug, Deserialize)]
struct Templates {
    version: u32,
    system: String,
    instruction: InstructionTemplates,
    cot: CotTemplates,
}

#[derive(Debug, Deserialize)]
struct InstructionTemplates {
    text_only: String,
    video_only: String,
    video_and_text: String,
    video_cot: String,
}

#[derive(Debug, Deserialize)]
struct CotTemplates {
    summary_stage: String,
    cluster_stage: String,
}

static TEMPLATES: LazyLock<Templates> = LazyLock::new(|| {
    toml::from_str(include_str!("../../templates/prompts.toml")).expect("bundled prompt templates parse")
});

pub fn template_version() -> u32 {
    TEMPLATES.version
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptOptions {
    /// Number of uniformly sampled frames.
    pub frames: usize,
    /// Use the thumbnail caption instead of sampled frames.
    pub use_thumbnail: bool,
}

impl Default for PromptOptions {
    fn default() -> Self {
        PromptOptions {
            frames: 4,
            use_thumbnail: false,
        }
    }
}

/// Uniformly samples `f` captions at indices `floor(i * N / f)`; with fewer
/// than `f` captions all of them are returned once.
pub fn sample_frames(item: &Item, f: usize) -> Vec<String> {
    let n = item.frame_captions.len();
    if f == 0 {
        return Vec::new();
    }
    if n <= f {
        return item.frame_captions.clone();
    }
    (0..f).map(|i| item.frame_captions[i * n / f].clone()).collect()
}

/// Builds one of the four prompt variants. Text variants carry the item's
/// own level-`level` cluster description; video variants carry sampled
/// frame captions, or the thumbnail caption when `use_thumbnail` is set.
pub fn assemble_prompt(
    item: &Item,
    tree: &ClusterTree,
    level: usize,
    prompt_type: PromptType,
    options: &PromptOptions,
) -> Result<Prompt, PlanError> {
    let fail = |reason: String| PlanError::Prompt {
        item: item.item_id.clone(),
        prompt_type,
        reason,
    };
    let mut blocks = Vec::new();
    if prompt_type.has_text() {
        blocks.push(ContextBlock {
            kind: BlockKind::Title,
            text: item.title.clone(),
        });
        let own = match tree.item_ancestor(&item.item_id, level) {
            Ok(node) => node.clone(),
            Err(_) => tree
                .assign_item(item)
                .map_err(|e| fail(e.to_string()))?
                .at(level)
                .cloned()
                .ok_or_else(|| fail(format!("tree has no level {level}")))?,
        };
        blocks.push(ContextBlock {
            kind: BlockKind::ClusterDescription,
            text: tree.node(&own).expect("ancestor exists").description.clone(),
        });
    }
    let mut visual = String::new();
    if prompt_type.has_visual() {
        if options.use_thumbnail {
            let caption = item
                .thumbnail_caption
                .as_ref()
                .ok_or_else(|| fail("no thumbnail caption".into()))?;
            blocks.push(ContextBlock {
                kind: BlockKind::ThumbnailCaption,
                text: caption.clone(),
            });
            visual.push_str("video thumbnail");
        } else {
            let frames = sample_frames(item, options.frames);
            if frames.is_empty() {
                return Err(fail("no frame captions".into()));
            }
            visual = match frames.len() {
                1 => "video frame".to_string(),
                n => format!("{n} video frames"),
            };
            blocks.extend(frames.into_iter().map(|text| ContextBlock {
                kind: BlockKind::FrameCaption,
                text,
            }));
        }
    }
    let t = &TEMPLATES.instruction;
    let instruction = match prompt_type {
        PromptType::TextOnly => &t.text_only,
        PromptType::VideoOnly => &t.video_only,
        PromptType::VideoAndText => &t.video_and_text,
        PromptType::VideoCot => &t.video_cot,
    };
    Ok(Prompt {
        prompt_type,
        system_text: TEMPLATES.system.trim().to_string(),
        context_blocks: blocks,
        instruction_text: instruction.trim().replace("{visual}", &visual),
    })
}

/// First chain-of-thought stage: asks for the content description only.
pub fn cot_summary_prompt(base: &Prompt) -> Prompt {
    Prompt {
        instruction_text: TEMPLATES
            .cot
            .summary_stage
            .trim()
            .replace("{instruction}", &base.instruction_text),
        ..base.clone()
    }
}

/// Second chain-of-thought stage: the first stage's output is inserted verbatim.
pub fn cot_cluster_prompt(base: &Prompt, summary: &str) -> Prompt {
    Prompt {
        instruction_text: TEMPLATES
            .cot
            .cluster_stage
            .trim()
            .replace("{instruction}", &base.instruction_text)
            .replace("{summary}", summary),
        ..base.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResolutionPolicy {
    Strict,
    NearestEditDistance { max_normalized_distance: f64 },
}

impl Default for ResolutionPolicy {
    fn default() -> Self {
        ResolutionPolicy::NearestEditDistance {
            max_normalized_distance: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionMethod {
    Exact,
    Fallback,
    Unresolved,
}

/// Levenshtein distance over chars divided by the longer length.
pub fn normalized_edit_distance(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 0.0;
    }
    strsim::levenshtein(a, b) as f64 / longest as f64
}

/// Translates generated text into a level-`level` cluster. Exact (trimmed,
/// case-sensitive) matches win; under the edit-distance policy the closest
/// description is accepted when within the threshold, ties going to the
/// lexicographically smaller description.
pub fn resolve_generation(
    tree: &ClusterTree,
    text: &str,
    level: usize,
    policy: ResolutionPolicy,
) -> (Option<NodeId>, ResolutionMethod) {
    if let Some(node) = tree.resolve_description(text) {
        if tree.node(node).is_some_and(|n| n.level == level) {
            return (Some(node.clone()), ResolutionMethod::Exact);
        }
    }
    let ResolutionPolicy::NearestEditDistance {
        max_normalized_distance,
    } = policy
    else {
        return (None, ResolutionMethod::Unresolved);
    };
    let trimmed = text.trim();
    let best = tree
        .nodes_at_level(level)
        .filter(|n| !tree.members(&n.node_id).is_empty())
        .map(|n| (normalized_edit_distance(trimmed, &n.description), n))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.description.cmp(&b.1.description)));
    match best {
        Some((d, node)) if d <= max_normalized_distance => {
            (Some(node.node_id.clone()), ResolutionMethod::Fallback)
        }
        _ => (None, ResolutionMethod::Unresolved),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub prompt_type: PromptType,
    #[serde(flatten)]
    pub prompt: PromptOptions,
    /// Tree level whose descriptions form the planning vocabulary.
    pub level: usize,
    pub resolution: ResolutionPolicy,
    /// Extra attempts after a transport failure.
    pub max_retries: u32,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            prompt_type: PromptType::VideoCot,
            prompt: PromptOptions::default(),
            level: 3,
            resolution: ResolutionPolicy::default(),
            max_retries: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub context_item_id: ItemId,
    pub raw_generation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved_cluster: Option<NodeId>,
    pub exact_match: bool,
    pub resolution_method: ResolutionMethod,
}

impl PlanResult {
    pub fn from_generation(
        tree: &ClusterTree,
        item: &str,
        raw: String,
        rationale: Option<String>,
        config: &PlanConfig,
    ) -> Self {
        let (resolved, method) = resolve_generation(tree, &raw, config.level, config.resolution);
        PlanResult {
            context_item_id: item.to_string(),
            raw_generation: raw,
            rationale,
            resolved_cluster: resolved,
            exact_match: method == ResolutionMethod::Exact,
            resolution_method: method,
        }
    }
}

fn generate_with_retry(
    backend: &dyn GenerationBackend,
    request: &GenerationRequest,
    max_retries: u32,
) -> Result<String, PlanError> {
    let mut attempts = 0;
    loop {
        attempts += 1;
        match backend.generate(request) {
            Ok(text) => return Ok(text),
            Err(e) if e.is_retryable() && attempts <= max_retries => {
                log::debug!("retrying {} after: {e}", request.item_id);
            }
            Err(source) => {
                return Err(PlanError::Backend {
                    item: request.item_id.to_string(),
                    attempts,
                    source,
                })
            }
        }
    }
}

/// Plans one serendipitous cluster for `item`. Chain-of-thought prompts make
/// two backend calls, everything else one. Unresolvable output is a valid
/// result, not an error.
pub fn plan_cluster(
    backend: &dyn GenerationBackend,
    tree: &ClusterTree,
    item: &Item,
    config: &PlanConfig,
) -> Result<PlanResult, PlanError> {
    plan_sample(backend, tree, item, config, 0)
}

/// `n` independent plans for the same item; samples differ only through the
/// backend (the request carries the sample index).
pub fn plan_samples(
    backend: &dyn GenerationBackend,
    tree: &ClusterTree,
    item: &Item,
    config: &PlanConfig,
    n: u32,
) -> Result<Vec<PlanResult>, PlanError> {
    (0..n).map(|s| plan_sample(backend, tree, item, config, s)).collect()
}

fn plan_sample(
    backend: &dyn GenerationBackend,
    tree: &ClusterTree,
    item: &Item,
    config: &PlanConfig,
    sample: u32,
) -> Result<PlanResult, PlanError> {
    let base = assemble_prompt(item, tree, config.level, config.prompt_type, &config.prompt)?;
    let (raw, rationale) = if config.prompt_type == PromptType::VideoCot {
        let first = cot_summary_prompt(&base);
        let summary = generate_with_retry(
            backend,
            &GenerationRequest {
                item_id: &item.item_id,
                stage: Stage::Summary,
                sample,
                prompt: &first,
            },
            config.max_retries,
        )?;
        let second = cot_cluster_prompt(&base, &summary);
        let raw = generate_with_retry(
            backend,
            &GenerationRequest {
                item_id: &item.item_id,
                stage: Stage::Cluster,
                sample,
                prompt: &second,
            },
            config.max_retries,
        )?;
        (raw, Some(summary))
    } else {
        let raw = generate_with_retry(
            backend,
            &GenerationRequest {
                item_id: &item.item_id,
                stage: Stage::Direct,
                sample,
                prompt: &base,
            },
            config.max_retries,
        )?;
        (raw, None)
    };
    Ok(PlanResult::from_generation(tree, &item.item_id, raw, rationale, config))
}
