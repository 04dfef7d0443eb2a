//! Append-only, multi-producer event log and backlog reconstruction.

use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{AnswerRecord, ViolationRecord};

/// Which worker produced an event; used as a deterministic tiebreak.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lane {
    Descriptor,
    Qa,
    Producer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum PipelineEvent {
    /// Clip `k` became available at stream time `at`.
    Arrival { k: usize, at: f64 },
    /// Clip `k` left the backlog (described, failed, or skipped).
    Completion { k: usize, at: f64, gen_time: f64, failed: bool },
    Skipped { k: usize, at: f64, backlog: usize },
    /// The hand-off queue was full when clip `k` arrived.
    QueueSaturated { k: usize, at: f64 },
    Violation(ViolationRecord),
    Answer(AnswerRecord),
    Backlog { at: f64, depth: usize },
}

impl PipelineEvent {
    pub fn at(&self) -> f64 {
        match self {
            Self::Arrival { at, .. }
            | Self::Completion { at, .. }
            | Self::Skipped { at, .. }
            | Self::QueueSaturated { at, .. }
            | Self::Backlog { at, .. } => *at,
            Self::Violation(v) => v.stream_time,
            Self::Answer(a) => a.submit_time + a.total_time,
        }
    }
}

#[derive(Debug, Clone)]
struct Logged {
    lane: Lane,
    seq: u64,
    event: PipelineEvent,
}

#[derive(Debug, Default)]
pub struct EventLog {
    inner: Mutex<(u64, Vec<Logged>)>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, lane: Lane, event: PipelineEvent) {
        let mut g = self.inner.lock().unwrap();
        let seq = g.0;
        g.0 += 1;
        g.1.push(Logged { lane, seq, event });
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Events ordered by stream time, then lane, then per-lane order. With
    /// simulated clocks this order is reproducible run to run.
    pub fn sorted(&self) -> Vec<PipelineEvent> {
        let mut all = self.inner.lock().unwrap().1.clone();
        // Global seq breaks ties only within a lane, where it matches program order.
        all.sort_by(|a, b| {
            a.event.at().total_cmp(&b.event.at()).then(a.lane.cmp(&b.lane)).then(a.seq.cmp(&b.seq))
        });
        all.into_iter().map(|l| l.event).collect()
    }

    pub fn persist_jsonl(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        write_jsonl(path, &self.sorted())
    }
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> std::io::Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BacklogSample {
    pub at: f64,
    pub depth: usize,
}

/// Backlog depth (arrived minus completed) after every arrival and
/// completion event of a finished run.
///
/// Events sharing a timestamp are ordered so that the completion of clip k
/// precedes the arrival of any later clip, while a clip's own arrival (and
/// earlier ones) precede its completion.
pub fn backlog_trace(events: &[PipelineEvent]) -> Vec<BacklogSample> {
    let mut points: Vec<(f64, usize, bool)> = events
        .iter()
        .filter_map(|e| match e {
            PipelineEvent::Arrival { k, at } => Some((*at, *k, false)),
            PipelineEvent::Completion { k, at, .. } => Some((*at, *k, true)),
            _ => None,
        })
        .collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut depth: usize = 0;
    points
        .into_iter()
        .map(|(at, _, done)| {
            if done {
                depth = depth.saturating_sub(1);
            } else {
                depth += 1;
            }
            BacklogSample { at, depth }
        })
        .collect()
}
