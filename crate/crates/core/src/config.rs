//! JSON run configuration shared by the command-line tools.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{SelectionPolicy, StreamSource};
use crate::ingest::{load_frame_manifest, segment_stream, Frame, IngestError, ReplayMode, SyntheticSource};
use crate::memory::{MemoryError, TextualMemory};
use crate::pipeline::{BackendSpec, PipelineConfig, PromptSet, SpecFactory};
use crate::prompts::{build_descriptor_prompt, DescriptorPromptTemplate, PromptError, ReasonerPromptTemplate};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

/// Where a stream's clips (or finished memory) come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceSpec {
    Synthetic(SyntheticSource),
    /// JSON list of `{timestamp, path}` frames.
    Manifest { path: PathBuf },
    /// A persisted memory JSONL file.
    Memory { path: PathBuf },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TemplatePaths {
    #[serde(default)]
    pub descriptor: Option<PathBuf>,
    #[serde(default)]
    pub reasoner: Option<PathBuf>,
}

fn default_replay() -> ReplayMode {
    ReplayMode::Realtime
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default = "default_replay")]
    pub replay: ReplayMode,
    pub descriptor: BackendSpec,
    /// Defaults to the descriptor backend (one model for both roles).
    #[serde(default)]
    pub reasoner: Option<BackendSpec>,
    #[serde(default)]
    pub templates: TemplatePaths,
    /// Stream for `run` and `serve`.
    #[serde(default)]
    pub source: Option<SourceSpec>,
    /// Streams referenced by benchmark items, by stream id.
    #[serde(default)]
    pub streams: BTreeMap<String, SourceSpec>,
    #[serde(default)]
    pub selection: SelectionPolicy,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let shown = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: shown.clone(), source })?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path: shown, source })?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        self.templates.descriptor.as_mut().map(fix);
        self.templates.reasoner.as_mut().map(fix);
        for src in self.source.iter_mut().chain(self.streams.values_mut()) {
            if let SourceSpec::Manifest { path } | SourceSpec::Memory { path } = src {
                fix(path);
            }
        }
    }

    pub fn reasoner_spec(&self) -> &BackendSpec {
        self.reasoner.as_ref().unwrap_or(&self.descriptor)
    }

    pub fn factory(&self) -> SpecFactory {
        SpecFactory::new(self.descriptor.clone(), self.reasoner_spec().clone())
    }

    pub fn prompts(&self) -> Result<PromptSet, ConfigError> {
        let descriptor = match &self.templates.descriptor {
            Some(p) => DescriptorPromptTemplate::load(p)?,
            None => DescriptorPromptTemplate::default(),
        };
        let reasoner = match &self.templates.reasoner {
            Some(p) => ReasonerPromptTemplate::load(p)?,
            None => ReasonerPromptTemplate::default(),
        };
        Ok(PromptSet { descriptor: build_descriptor_prompt(&descriptor)?, reasoner })
    }

    /// Clips at the descriptor profile's sampling rate, or a finished memory.
    pub fn load_source(&self, stream_id: &str, spec: &SourceSpec) -> Result<StreamSource, ConfigError> {
        let frames: Vec<Frame> = match spec {
            SourceSpec::Synthetic(s) => s.frames(),
            SourceSpec::Manifest { path } => load_frame_manifest(path)?,
            SourceSpec::Memory { path } => {
                let mut m = TextualMemory::load(path)?;
                m.stream_id = stream_id.to_string();
                return Ok(StreamSource::Memory(m));
            }
        };
        let clips =
            segment_stream(&frames, self.pipeline.budget.clip_duration, self.descriptor.profile().fps)?;
        Ok(StreamSource::Clips(clips))
    }
}
