//! Description and answer generation backends.
//!
//! [`Backend`] is the uniform contract used by both pipeline workers. Two
//! implementations ship: [`HttpBackend`] speaks chat-completions JSON with SSE
//! token streaming, and [`MockBackend`] produces seeded, clock-driven outputs
//! for testing and desk-scale benchmarking.

mod http;
mod mock;
pub mod sse;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::Clip;
use crate::prompts::Candidates;

pub use http::HttpBackend;
pub use mock::{AnswerPolicy, CannedTexts, LatencyModel, MockBackend, MockScript};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("cannot reach {endpoint}: {reason}")]
    Connectivity { endpoint: String, reason: String },
    #[error("invalid profile: {0}")]
    Profile(String),
}

/// Per-request failure. Returned as data so a worker can record it and move on.
#[derive(Debug, Error, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GenerationError {
    #[error("request timed out after {after:.3}s")]
    Timeout { after: f64 },
    #[error("no token within {after:.3}s")]
    TtftTimeout { after: f64 },
    #[error("transport error after {attempts} attempt(s): {reason}")]
    Transport { attempts: u32, reason: String },
    #[error("stream closed after partial answer {received:?}")]
    PartialAnswer { received: String },
    #[error("backend rejected request: {reason}")]
    Rejected { reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Resolution {
    pub height: u32,
    pub width: u32,
}

impl Resolution {
    pub const fn new(height: u32, width: u32) -> Self {
        Self { height, width }
    }

    pub fn area(self) -> u64 {
        self.height as u64 * self.width as u64
    }
}

impl std::fmt::Display for Resolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

fn default_chat_path() -> String {
    "/v1/chat/completions".into()
}

fn default_models_path() -> String {
    "/v1/models".into()
}

fn default_timeout() -> f64 {
    60.0
}

fn default_description_tokens() -> u32 {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendProfile {
    pub endpoint: String,
    #[serde(default = "default_chat_path")]
    pub chat_path: String,
    #[serde(default = "default_models_path")]
    pub models_path: String,
    pub model_name: String,
    pub fps: f64,
    pub resolution: Resolution,
    #[serde(default = "one")]
    pub batch_size: usize,
    #[serde(default)]
    pub quantization_label: String,
    /// Seconds.
    #[serde(default = "default_timeout")]
    pub request_timeout: f64,
    /// Context window in tokens, if known.
    #[serde(default)]
    pub context_limit: Option<usize>,
    #[serde(default = "default_description_tokens")]
    pub max_description_tokens: u32,
    /// Prometheus-style metrics path and the gauge that reports device memory in bytes.
    #[serde(default)]
    pub metrics_path: Option<String>,
    #[serde(default)]
    pub peak_memory_metric: Option<String>,
}

fn one() -> usize {
    1
}

impl BackendProfile {
    pub fn new(endpoint: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            chat_path: default_chat_path(),
            models_path: default_models_path(),
            model_name: model_name.into(),
            fps: 2.0,
            resolution: Resolution::new(768, 1024),
            batch_size: 1,
            quantization_label: "full".into(),
            request_timeout: default_timeout(),
            context_limit: None,
            max_description_tokens: default_description_tokens(),
            metrics_path: None,
            peak_memory_metric: None,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.batch_size == 0 {
            return Err(BackendError::Profile("batch_size must be at least 1".into()));
        }
        if self.fps.is_nan() || self.fps <= 0.0 {
            return Err(BackendError::Profile(format!("fps must be positive, got {}", self.fps)));
        }
        if self.request_timeout.is_nan() || self.request_timeout <= 0.0 {
            return Err(BackendError::Profile("request_timeout must be positive".into()));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.request_timeout)
    }
}

/// Timing of one generation call, in seconds.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GenerationStats {
    pub wall_time: f64,
    pub ttft: f64,
    pub output_tokens: u64,
    pub tokens_per_second: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peak_memory_bytes: Option<u64>,
}

impl GenerationStats {
    pub fn new(wall: Duration, ttft: Duration, output_tokens: u64) -> Self {
        let wall_time = wall.as_secs_f64();
        let ttft = ttft.as_secs_f64().min(wall_time);
        let tokens_per_second = if output_tokens > 0 && wall_time > 0.0 {
            output_tokens as f64 / wall_time
        } else {
            0.0
        };
        Self { wall_time, ttft, output_tokens, tokens_per_second, peak_memory_bytes: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Description {
    pub text: String,
    pub stats: GenerationStats,
}

/// Everything a reasoner call needs. Wire backends send only `prompt`; the
/// structured parts let the mock apply its answer policy without re-parsing.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerRequest {
    pub prompt: String,
    pub memory_text: String,
    pub question: String,
    pub candidates: Candidates,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamedAnswer {
    pub first_token: String,
    /// Seconds from request dispatch to the first streamed token.
    pub first_token_time: f64,
    pub final_text: String,
    pub stats: GenerationStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Support {
    Yes,
    No,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capabilities {
    pub streaming: Support,
    pub image_input: Support,
    pub context_limit: Option<usize>,
    pub models: Vec<String>,
}

pub trait Backend: Send + Sync {
    /// Identifier recorded in memory entries.
    fn id(&self) -> String;

    fn profile(&self) -> &BackendProfile;

    /// Describes up to `batch_size` clips with one shared prompt. The outer
    /// error is for broken preconditions; per-clip failures are inner errors.
    fn describe(
        &self,
        clips: &[Clip],
        prompt: &str,
    ) -> Result<Vec<Result<Description, GenerationError>>, BackendError>;

    fn answer_stream(&self, request: &AnswerRequest, max_new_tokens: u32) -> Result<StreamedAnswer, GenerationError>;

    fn probe(&self) -> Result<Capabilities, BackendError>;
}

pub(crate) fn check_describe_preconditions(
    profile: &BackendProfile,
    clips: &[Clip],
    prompt: &str,
) -> Result<(), BackendError> {
    if clips.is_empty() {
        return Err(BackendError::Precondition("no clips given".into()));
    }
    if clips.len() > profile.batch_size {
        return Err(BackendError::Precondition(format!(
            "{} clips exceed batch size {}",
            clips.len(),
            profile.batch_size
        )));
    }
    if prompt.trim().is_empty() {
        return Err(BackendError::Precondition("empty prompt".into()));
    }
    Ok(())
}

/// Rough token count used for context budgeting: whitespace-separated words
/// plus a quarter of the characters, which overestimates typical tokenizers.
pub fn estimate_tokens(text: &str) -> usize {
    let words = text.split_whitespace().count();
    words.max(text.chars().count().div_ceil(4))
}
