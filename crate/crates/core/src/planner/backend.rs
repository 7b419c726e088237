//! Text-generation backends.
//!
//! The planner only needs `generate(request) -> text`. Shipped backends: an
//! oracle stub that answers with known labels, a noisy stub that corrupts
//! them with probability `q`, a replay backend over recorded generations,
//! and an HTTP JSON client.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Prompt, PromptType};
use crate::corpus::ItemId;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("no recorded generation for item {item} ({prompt_type}, {stage:?})")]
    Missing {
        item: ItemId,
        prompt_type: &'static str,
        stage: Stage,
    },
    #[error("replay file {path}: {reason}")]
    ReplayFile { path: String, reason: String },
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

/// Which call of the planning flow a request belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Single-call prompts.
    Direct,
    /// Chain-of-thought stage 1: content description.
    Summary,
    /// Chain-of-thought stage 2: cluster description.
    Cluster,
}

#[derive(Debug, Clone, Copy)]
pub struct GenerationRequest<'a> {
    pub item_id: &'a str,
    pub stage: Stage,
    pub sample: u32,
    pub prompt: &'a Prompt,
}

pub trait GenerationBackend: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError>;

    /// Identical requests yield identical texts.
    fn is_deterministic(&self) -> bool;

    fn call_count(&self) -> u64;
}

#[derive(Debug, Default)]
pub struct CallCounter(AtomicU64);

impl CallCounter {
    pub fn tick(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

fn summary_text(prompt: &Prompt) -> String {
    let captions: Vec<&str> = prompt
        .context_blocks
        .iter()
        .filter(|b| matches!(b.kind, super::BlockKind::FrameCaption | super::BlockKind::ThumbnailCaption))
        .map(|b| b.text.as_str())
        .collect();
    format!("The video shows: {}", captions.join("; "))
}

const NO_LABEL: &str = "(no label)";

/// Answers every cluster request with the item's known label.
#[derive(Debug, Default)]
pub struct OracleStub {
    labels: HashMap<ItemId, String>,
    counter: CallCounter,
}

impl OracleStub {
    pub fn new(labels: HashMap<ItemId, String>) -> Self {
        OracleStub {
            labels,
            counter: CallCounter::default(),
        }
    }

    pub fn label(&self, item: &str) -> Option<&str> {
        self.labels.get(item).map(String::as_str)
    }
}

impl GenerationBackend for OracleStub {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        self.counter.tick();
        Ok(match request.stage {
            Stage::Summary => summary_text(request.prompt),
            Stage::Direct | Stage::Cluster => self
                .labels
                .get(request.item_id)
                .cloned()
                .unwrap_or_else(|| NO_LABEL.to_string()),
        })
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn call_count(&self) -> u64 {
        self.counter.get()
    }
}

/// Like [`OracleStub`], but each cluster answer is corrupted with
/// probability `q` by a single-character substitution that lands outside
/// the vocabulary. The randomness is keyed on (seed, item, sample), so
/// answers do not depend on call order.
#[derive(Debug)]
pub struct NoisyStub {
    labels: HashMap<ItemId, String>,
    vocabulary: HashSet<String>,
    q: f64,
    seed: u64,
    counter: CallCounter,
}

impl NoisyStub {
    pub fn new(labels: HashMap<ItemId, String>, vocabulary: impl IntoIterator<Item = String>, q: f64, seed: u64) -> Self {
        NoisyStub {
            labels,
            vocabulary: vocabulary.into_iter().collect(),
            q: q.clamp(0.0, 1.0),
            seed,
            counter: CallCounter::default(),
        }
    }

    fn rng_for(&self, item: &str, sample: u32) -> ChaCha8Rng {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.seed;
        for b in item.bytes().chain(sample.to_le_bytes()) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        ChaCha8Rng::seed_from_u64(h)
    }
}

/// One substituted character, chosen so the result is not in `vocabulary`.
pub fn corrupt(text: &str, rng: &mut impl Rng, vocabulary: &HashSet<String>) -> String {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
    let chars: Vec<char> = text.chars().collect();
    if chars.is_empty() {
        return "~".to_string();
    }
    for _ in 0..32 {
        let pos = rng.gen_range(0..chars.len());
        let replacement = ALPHABET[rng.gen_range(0..ALPHABET.len())] as char;
        if replacement == chars[pos] {
            continue;
        }
        let mut out = chars.clone();
        out[pos] = replacement;
        let out: String = out.into_iter().collect();
        if !vocabulary.contains(&out) {
            return out;
        }
    }
    format!("{text}~")
}

impl GenerationBackend for NoisyStub {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        self.counter.tick();
        if request.stage == Stage::Summary {
            return Ok(summary_text(request.prompt));
        }
        let Some(label) = self.labels.get(request.item_id) else {
            return Ok(NO_LABEL.to_string());
        };
        let mut rng = self.rng_for(request.item_id, request.sample);
        if rng.gen::<f64>() < self.q {
            Ok(corrupt(label, &mut rng, &self.vocabulary))
        } else {
            Ok(label.clone())
        }
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn call_count(&self) -> u64 {
        self.counter.get()
    }
}

/// One recorded generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub item_id: ItemId,
    pub prompt_type: PromptType,
    pub stage: Stage,
    pub text: String,
}

/// Serves generations from a JSON-lines replay file.
#[derive(Debug, Default)]
pub struct ReplayBackend {
    records: HashMap<(ItemId, PromptType, Stage), String>,
    counter: CallCounter,
}

impl ReplayBackend {
    pub fn from_records(records: impl IntoIterator<Item = ReplayRecord>) -> Self {
        ReplayBackend {
            records: records
                .into_iter()
                .map(|r| ((r.item_id, r.prompt_type, r.stage), r.text))
                .collect(),
            counter: CallCounter::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let bad = |reason: String| BackendError::ReplayFile {
            path: path.display().to_string(),
            reason,
        };
        let file = std::fs::File::open(path).map_err(|e| bad(e.to_string()))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| bad(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", i + 1)))?);
        }
        Ok(Self::from_records(records))
    }
}

impl GenerationBackend for ReplayBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        self.counter.tick();
        let key = (request.item_id.to_string(), request.prompt.prompt_type, request.stage);
        self.records.get(&key).cloned().ok_or(BackendError::Missing {
            item: request.item_id.to_string(),
            prompt_type: request.prompt.prompt_type.as_str(),
            stage: request.stage,
        })
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn call_count(&self) -> u64 {
        self.counter.get()
    }
}

/// Wraps a backend and records every successful generation, producing
/// replay fixtures.
pub struct RecordingBackend<B> {
    inner: B,
    records: Mutex<Vec<ReplayRecord>>,
}

impl<B: GenerationBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        RecordingBackend {
            inner,
            records: Mutex::new(Vec::new()),
        }
    }

    /// Recorded generations, sorted for stable output.
    pub fn records(&self) -> Vec<ReplayRecord> {
        let mut out = self.records.lock().unwrap().clone();
        out.sort_by(|a, b| {
            (&a.item_id, a.prompt_type, a.stage).cmp(&(&b.item_id, b.prompt_type, b.stage))
        });
        out.dedup();
        out
    }
}

impl<B: GenerationBackend> GenerationBackend for RecordingBackend<B> {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let text = self.inner.generate(request)?;
        self.records.lock().unwrap().push(ReplayRecord {
            item_id: request.item_id.to_string(),
            prompt_type: request.prompt.prompt_type,
            stage: request.stage,
            text: text.clone(),
        });
        Ok(text)
    }

    fn is_deterministic(&self) -> bool {
        self.inner.is_deterministic()
    }

    fn call_count(&self) -> u64 {
        self.inner.call_count()
    }
}

/// Wire format of a remote generation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteRequest {
    pub prompt_type: PromptType,
    pub blocks: Vec<super::ContextBlock>,
    pub instruction: String,
}

impl RemoteRequest {
    pub fn from_prompt(prompt: &Prompt) -> Self {
        RemoteRequest {
            prompt_type: prompt.prompt_type,
            blocks: prompt.context_blocks.clone(),
            instruction: prompt.instruction_text.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteResponse {
    pub text: String,
}

/// HTTP JSON backend: POSTs a [`RemoteRequest`] and expects a [`RemoteResponse`].
#[cfg(feature = "remote")]
pub struct RemoteBackend {
    url: String,
    client: reqwest::blocking::Client,
    deterministic: bool,
    counter: CallCounter,
}

#[cfg(feature = "remote")]
impl RemoteBackend {
    pub fn new(url: impl Into<String>, timeout: std::time::Duration, deterministic: bool) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(RemoteBackend {
            url: url.into(),
            client,
            deterministic,
            counter: CallCounter::default(),
        })
    }
}

#[cfg(feature = "remote")]
impl GenerationBackend for RemoteBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        self.counter.tick();
        let body = RemoteRequest::from_prompt(request.prompt);
        let response = self
            .client
            .post(&self.url)
            .json(&body)
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        if status.is_server_error() {
            return Err(BackendError::Transport(format!("server returned {status}")));
        }
        if !status.is_success() {
            return Err(BackendError::Protocol(format!("server returned {status}")));
        }
        let parsed: RemoteResponse = response
            .json()
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        Ok(parsed.text)
    }

    fn is_deterministic(&self) -> bool {
        self.deterministic
    }

    fn call_count(&self) -> u64 {
        self.counter.get()
    }
}

/// Parsed form of a backend spec string: `oracle`, `noisy:<q>`,
/// `replay:<path>` or `remote:<url>`.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendSpec {
    Oracle,
    Noisy(f64),
    Replay(std::path::PathBuf),
    Remote(String),
}

impl BackendSpec {
    pub fn parse(spec: &str) -> Result<Self, BackendError> {
        let bad = |reason: &str| BackendError::Protocol(format!("backend spec {spec:?}: {reason}"));
        let (kind, arg) = match spec.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (spec, None),
        };
        match (kind, arg) {
            ("oracle", None) => Ok(BackendSpec::Oracle),
            ("noisy", Some(q)) => match q.parse::<f64>() {
                Ok(q) if (0.0..=1.0).contains(&q) => Ok(BackendSpec::Noisy(q)),
                _ => Err(bad("q must be a number in [0,1]")),
            },
            ("replay", Some(p)) if !p.is_empty() => Ok(BackendSpec::Replay(p.into())),
            ("remote", Some(u)) if !u.is_empty() => {
                if cfg!(feature = "remote") {
                    Ok(BackendSpec::Remote(u.to_string()))
                } else {
                    Err(bad("built without the `remote` feature"))
                }
            }
            _ => Err(bad("expected oracle, noisy:<q>, replay:<path> or remote:<url>")),
        }
    }
}
