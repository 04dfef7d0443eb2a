//! Streaming clip-to-text memory with latency budgets.
//!
//! A descriptor worker turns each fixed-duration clip of a stream into a text
//! description appended to an append-only [`memory`]; a QA worker answers
//! four-option questions from memory snapshots. Both run under hard budgets:
//! a clip must be described within its own duration, and an answer must
//! start within the responsiveness budget. The [`bench`] module measures all
//! of this and emits comparison tables.

pub mod backend;
pub mod bench;
pub mod clock;
pub mod config;
pub mod ingest;
pub mod memory;
pub mod pipeline;
pub mod prompts;

pub use backend::{Backend, BackendProfile, GenerationStats};
pub use clock::{Clock, VirtualClock, WallClock};
pub use ingest::{Clip, Frame, ReplayClock, ReplayMode};
pub use memory::{MemoryEntry, MemorySnapshot, TextualMemory};
pub use pipeline::{AnswerRecord, BudgetConfig, Pipeline, PipelineConfig, Query, ViolationRecord};
pub use prompts::{Candidates, OptionLetter};
