//! The descriptor worker: clips in, memory entries out, under the clip budget.

use std::sync::atomic::Ordering;
use std::sync::mpsc::Receiver;
use std::time::Duration;

use tracing::debug;

use super::events::{EventLog, Lane, PipelineEvent};
use super::{
    ArrivalSchedule, BudgetConfig, DeviceLock, PipelineError, StatusCounters, ViolationKind, ViolationPolicy,
    ViolationRecord, Watermark,
};
use crate::backend::{Backend, Description, GenerationError};
use crate::clock::Clock;
use crate::ingest::{Clip, ClipSchedule, ReplayClock};
use crate::memory::{MemoryEntry, MemoryWriter};

/// Source of clips for the descriptor worker.
pub trait ClipFeed: Send {
    /// Next clip in stream order, blocking until it is available.
    fn next_clip(&mut self, clock: &ReplayClock) -> Option<Clip>;
}

impl ClipFeed for ClipSchedule {
    fn next_clip(&mut self, clock: &ReplayClock) -> Option<Clip> {
        self.next_blocking(clock)
    }
}

/// Clips handed over by a producer thread through a bounded queue.
pub struct QueuedFeed {
    rx: Receiver<Clip>,
}

impl QueuedFeed {
    pub fn new(rx: Receiver<Clip>) -> Self {
        Self { rx }
    }
}

impl ClipFeed for QueuedFeed {
    fn next_clip(&mut self, _clock: &ReplayClock) -> Option<Clip> {
        self.rx.recv().ok()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DescriptorSummary {
    pub clips_processed: usize,
    pub failures: usize,
    pub skipped: usize,
    pub violations: Vec<ViolationRecord>,
    pub max_backlog: usize,
}

/// Shared handles the worker reports into.
pub struct DescriptorContext<'a> {
    pub budget: &'a BudgetConfig,
    pub policy: ViolationPolicy,
    pub clock: &'a ReplayClock,
    pub arrivals: &'a ArrivalSchedule,
    pub events: &'a EventLog,
    pub watermark: &'a Watermark,
    pub counters: &'a StatusCounters,
    pub device: Option<&'a DeviceLock>,
}

fn failure_entry(clip: &Clip, backend_id: &str, gen_time: Duration, reason: String) -> MemoryEntry {
    MemoryEntry {
        clip_index: clip.index,
        clip_start: clip.start_time.as_secs_f64(),
        clip_end: clip.end_time.as_secs_f64(),
        text: String::new(),
        gen_time: gen_time.as_secs_f64(),
        output_tokens: 0,
        tokens_per_second: 0.0,
        backend_id: backend_id.to_string(),
        partial: clip.partial,
        failure: Some(reason),
    }
}

fn success_entry(clip: &Clip, backend_id: &str, gen_time: Duration, d: Description) -> MemoryEntry {
    MemoryEntry {
        clip_index: clip.index,
        clip_start: clip.start_time.as_secs_f64(),
        clip_end: clip.end_time.as_secs_f64(),
        text: d.text,
        gen_time: gen_time.as_secs_f64(),
        output_tokens: d.stats.output_tokens,
        tokens_per_second: d.stats.tokens_per_second,
        backend_id: backend_id.to_string(),
        partial: clip.partial,
        failure: None,
    }
}

/// Processes clips strictly in order, appending one entry per clip.
///
/// Description time is measured on the worker's clock around the backend
/// call. A clip whose description takes `>= s` produces a descriptor-budget
/// violation. Backend failures become failure entries and the worker moves
/// on; only internal invariant breaks (sequencing) abort it.
pub fn run_descriptor_worker(
    feed: &mut dyn ClipFeed,
    backend: &dyn Backend,
    prompt: &str,
    writer: &mut MemoryWriter,
    ctx: &DescriptorContext<'_>,
) -> Result<DescriptorSummary, PipelineError> {
    let batch_size = backend.profile().batch_size.max(1);
    let backend_id = backend.id();
    let budget = ctx.budget.clip_duration;
    let mut summary = DescriptorSummary::default();
    let mut completed = 0usize;

    let record_arrival = |clip: &Clip| {
        let at = ctx.clock.arrival(clip).as_secs_f64();
        ctx.events.push(Lane::Descriptor, PipelineEvent::Arrival { k: clip.index, at });
    };

    loop {
        // Nothing can commit before the next clip arrives.
        if let Some(next) = ctx.arrivals.next_after(completed) {
            ctx.watermark.advance(next.max(ctx.clock.now()));
        }
        let Some(first) = feed.next_clip(ctx.clock) else { break };
        record_arrival(&first);

        if let ViolationPolicy::DropToCatchUp { threshold } = ctx.policy {
            let now = ctx.clock.now();
            let depth = ctx.arrivals.arrived_by(now, usize::MAX).saturating_sub(completed);
            if depth > threshold {
                debug!(clip = first.index, depth, "skipping clip to catch up");
                writer.append(failure_entry(&first, &backend_id, Duration::ZERO, "skipped: backlog".into()), now)?;
                completed += 1;
                summary.skipped += 1;
                summary.clips_processed += 1;
                ctx.counters.completed.fetch_add(1, Ordering::SeqCst);
                let at = now.as_secs_f64();
                ctx.events.push(Lane::Descriptor, PipelineEvent::Skipped { k: first.index, at, backlog: depth });
                ctx.events.push(
                    Lane::Descriptor,
                    PipelineEvent::Completion { k: first.index, at, gen_time: 0.0, failed: true },
                );
                continue;
            }
        }

        let mut batch = vec![first];
        while batch.len() < batch_size {
            match feed.next_clip(ctx.clock) {
                Some(c) => {
                    record_arrival(&c);
                    batch.push(c);
                }
                None => break,
            }
        }

        let guard = ctx.device.map(|d| d.lock().unwrap());
        let start = ctx.clock.now();
        ctx.watermark.advance(start);
        let results = backend.describe(&batch, prompt);
        let end = ctx.clock.now();
        drop(guard);
        let gen_time = end - start;

        let results: Vec<Result<Description, GenerationError>> = match results {
            Ok(r) => r,
            Err(e) => batch.iter().map(|_| Err(GenerationError::Rejected { reason: e.to_string() })).collect(),
        };

        for (clip, result) in batch.iter().zip(results) {
            let entry = match result {
                Ok(d) => success_entry(clip, &backend_id, gen_time, d),
                Err(e) => {
                    summary.failures += 1;
                    failure_entry(clip, &backend_id, gen_time, e.to_string())
                }
            };
            let failed = entry.is_failure();
            writer.append(entry, end)?;
            completed += 1;
            summary.clips_processed += 1;
            ctx.counters.completed.fetch_add(1, Ordering::SeqCst);

            let depth = ctx.arrivals.arrived_by(end, clip.index).saturating_sub(completed);
            summary.max_backlog = summary.max_backlog.max(depth + 1);
            let at = end.as_secs_f64();
            ctx.events.push(
                Lane::Descriptor,
                PipelineEvent::Completion { k: clip.index, at, gen_time: gen_time.as_secs_f64(), failed },
            );
            ctx.events.push(Lane::Descriptor, PipelineEvent::Backlog { at, depth });
            if gen_time >= budget {
                let v = ViolationRecord {
                    kind: ViolationKind::DescriptorBudget,
                    clip_index: Some(clip.index),
                    query_id: None,
                    observed: gen_time.as_secs_f64(),
                    budget: budget.as_secs_f64(),
                    backlog_depth_at_event: depth,
                    stream_time: at,
                };
                ctx.counters.descriptor_violations.fetch_add(1, Ordering::SeqCst);
                ctx.events.push(Lane::Descriptor, PipelineEvent::Violation(v.clone()));
                summary.violations.push(v);
            }
        }
        ctx.watermark.advance(end);
    }
    ctx.watermark.finish();
    Ok(summary)
}
