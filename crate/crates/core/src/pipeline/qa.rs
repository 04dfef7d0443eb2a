use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use super::events::{EventLog, Lane, PipelineEvent};
use super::{
    AnswerRecord, ArrivalSchedule, BudgetConfig, DeviceLock, Query, StatusCounters, ViolationKind, ViolationRecord,
    Watermark,
};
use crate::backend::{estimate_tokens, AnswerRequest, Backend};
use crate::bench::parse_answer;
use crate::clock::Clock;
use crate::ingest::ReplayClock;
use crate::memory::{MemoryReader, MemorySnapshot, RenderOptions};
use crate::prompts::{build_reasoner_prompt, ReasonerPromptTemplate};

const MAX_NEW_TOKENS: u32 = 1;

/// The single QA lane. Owns the reasoner backend and its clock.
pub struct QaLane {
    pub(crate) backend: Arc<dyn Backend>,
    pub(crate) clock: ReplayClock,
    pub(crate) reader: MemoryReader,
    pub(crate) template: ReasonerPromptTemplate,
    pub(crate) budget: BudgetConfig,
    pub(crate) render: RenderOptions,
    pub(crate) context_limit: Option<usize>,
    /// Present only under simulated replay, where the descriptor runs on a
    /// separate timeline and may lag behind this lane in real time.
    pub(crate) watermark: Option<Arc<Watermark>>,
    pub(crate) device: Option<Arc<DeviceLock>>,
    pub(crate) events: Arc<EventLog>,
    pub(crate) counters: Arc<StatusCounters>,
    pub(crate) arrivals: Arc<ArrivalSchedule>,
}

struct BuiltPrompt {
    prompt: String,
    memory_text: String,
    used: usize,
    truncated: bool,
}

impl QaLane {
    fn suffix_text(&self, view: &MemorySnapshot, from: usize) -> String {
        view.entries().skip(from).map(|e| crate::memory::render_block(e, self.render)).collect::<Vec<_>>().join("\n\n")
    }

    /// Builds the prompt, dropping the oldest entries while it would not fit
    /// the reasoner's context.
    fn build(&self, view: &MemorySnapshot, query: &Query) -> Result<BuiltPrompt, String> {
        let make = |from: usize| -> Result<(String, String), String> {
            let text = self.suffix_text(view, from);
            let prompt = build_reasoner_prompt(&self.template, &text, &query.question, &query.candidates)
                .map_err(|e| e.to_string())?;
            Ok((prompt, text))
        };
        let fits = |p: &str| match self.context_limit {
            Some(limit) => estimate_tokens(p) + MAX_NEW_TOKENS as usize <= limit,
            None => true,
        };
        let n = view.len();
        let (prompt, text) = make(0)?;
        if fits(&prompt) {
            return Ok(BuiltPrompt { prompt, memory_text: text, used: n, truncated: false });
        }
        // The estimate only shrinks as entries are dropped, so bisect on the start.
        let (mut lo, mut hi) = (1, n);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if fits(&make(mid)?.0) {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        let (prompt, text) = make(lo)?;
        if !fits(&prompt) {
            return Err("question and candidates alone exceed the reasoner context".into());
        }
        Ok(BuiltPrompt { prompt, memory_text: text, used: n - lo, truncated: true })
    }

    /// Answers one query against the memory as of its submission time.
    pub fn answer(&self, query: &Query) -> AnswerRecord {
        let submit = match query.submit_time {
            Some(t) => Duration::from_secs_f64(t.max(0.0)),
            None => self.clock.now(),
        };
        self.clock.sleep_until(submit);
        if let Some(w) = &self.watermark {
            w.wait_past(submit);
        }
        let view = self.reader.snapshot().until(submit);
        let completed_at_submit = view.len();

        let mut record = AnswerRecord {
            query_id: query.query_id.clone(),
            chosen: None,
            unparseable: false,
            ttft: 0.0,
            total_time: 0.0,
            memory_length_used: 0,
            truncated: false,
            raw_first_token: String::new(),
            final_text: String::new(),
            submit_time: submit.as_secs_f64(),
            failure: None,
        };

        match self.build(&view, query) {
            Err(reason) => record.failure = Some(reason),
            Ok(built) => {
                record.memory_length_used = built.used;
                record.truncated = built.truncated;
                let request = AnswerRequest {
                    prompt: built.prompt,
                    memory_text: built.memory_text,
                    question: query.question.clone(),
                    candidates: query.candidates.clone(),
                };
                let guard = self.device.as_ref().map(|d| d.lock().unwrap());
                let result = self.backend.answer_stream(&request, MAX_NEW_TOKENS);
                drop(guard);
                match result {
                    Ok(streamed) => {
                        record.chosen = parse_answer(&streamed.first_token);
                        record.unparseable = record.chosen.is_none();
                        record.ttft = streamed.first_token_time;
                        record.raw_first_token = streamed.first_token;
                        record.final_text = streamed.final_text;
                    }
                    Err(e) => record.failure = Some(e.to_string()),
                }
            }
        }

        let end = self.clock.now();
        record.total_time = (end.saturating_sub(submit)).as_secs_f64();
        if record.failure.is_some() || record.ttft > record.total_time {
            record.ttft = record.total_time;
        }

        self.counters.answered.fetch_add(1, Ordering::SeqCst);
        self.events.push(Lane::Qa, PipelineEvent::Answer(record.clone()));
        let total = end.saturating_sub(submit);
        if total >= self.budget.response_budget {
            let depth = self.arrivals.arrived_by(submit, usize::MAX).saturating_sub(completed_at_submit);
            let v = ViolationRecord {
                kind: ViolationKind::QaBudget,
                clip_index: None,
                query_id: Some(query.query_id.clone()),
                observed: record.total_time,
                budget: self.budget.response_budget.as_secs_f64(),
                backlog_depth_at_event: depth,
                stream_time: end.as_secs_f64(),
            };
            self.counters.qa_violations.fetch_add(1, Ordering::SeqCst);
            self.events.push(Lane::Qa, PipelineEvent::Violation(v));
        }
        record
    }
}
