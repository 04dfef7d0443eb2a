//! The two-worker streaming engine.
//!
//! A descriptor worker turns clips into memory entries; a single QA lane
//! answers queries from memory snapshots. They share only the memory log and
//! the event log. Under [`ReplayMode::Simulated`] each worker runs on its own
//! virtual timeline and a watermark keeps their views consistent, so a run is
//! reproducible bit for bit.

mod descriptor;
pub mod events;
mod factory;
mod qa;

use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, Sender, SyncSender, TrySendError};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::backend::{Backend, BackendError};
use crate::clock::{secs, Clock};
use crate::ingest::{Clip, ClipSchedule, ReplayClock, ReplayMode};
use crate::memory::{memory_log, MemoryError, MemoryReader, RenderOptions, TextualMemory};
use crate::prompts::{Candidates, OptionLetter, PromptError, ReasonerPromptTemplate};

pub use descriptor::{run_descriptor_worker, ClipFeed, DescriptorContext, DescriptorSummary, QueuedFeed};
pub use factory::{BackendSpec, SpecFactory};
pub use events::{backlog_trace, write_jsonl, BacklogSample, EventLog, Lane, PipelineEvent};
pub use qa::QaLane;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("pipeline is no longer accepting queries")]
    Closed,
    #[error("{0} worker panicked")]
    WorkerPanicked(&'static str),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn default_s() -> Duration {
    Duration::from_secs(15)
}

fn default_t_r() -> Duration {
    Duration::from_secs(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetConfig {
    /// Clip duration; describing a clip must take strictly less.
    #[serde(rename = "s", with = "secs", default = "default_s")]
    pub clip_duration: Duration,
    /// Answer latency budget.
    #[serde(rename = "t_r", with = "secs", default = "default_t_r")]
    pub response_budget: Duration,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self { clip_duration: default_s(), response_budget: default_t_r() }
    }
}

impl BudgetConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.clip_duration.is_zero() || self.response_budget.is_zero() {
            return Err(PipelineError::Config("budgets must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    DescriptorBudget,
    QaBudget,
}

/// A call whose measured time reached its budget (`observed >= budget`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationRecord {
    pub kind: ViolationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
    pub observed: f64,
    pub budget: f64,
    pub backlog_depth_at_event: usize,
    /// Stream time at which the violating call finished.
    pub stream_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    #[serde(rename = "q")]
    pub question: String,
    pub candidates: Candidates,
    /// Stream time of submission in seconds; `None` means "now".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub submit_time: Option<f64>,
    /// Wall-clock submission time (Unix milliseconds), informational only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_submit_ms: Option<u64>,
}

impl Query {
    pub fn new(query_id: impl Into<String>, question: impl Into<String>, candidates: Candidates) -> Self {
        Self { query_id: query_id.into(), question: question.into(), candidates, submit_time: None, wall_submit_ms: None }
    }

    pub fn at(mut self, submit_time: f64) -> Self {
        self.submit_time = Some(submit_time);
        self
    }
}

pub(crate) fn wall_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub query_id: String,
    /// `None` when the first token was unparseable or the call failed.
    pub chosen: Option<OptionLetter>,
    pub unparseable: bool,
    /// Seconds from dispatch to first token.
    pub ttft: f64,
    /// Seconds from submission to answer (the budgeted quantity).
    pub total_time: f64,
    pub memory_length_used: usize,
    pub truncated: bool,
    pub raw_first_token: String,
    pub final_text: String,
    pub submit_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ViolationPolicy {
    /// Describe every clip regardless of backlog.
    #[default]
    RecordAndContinue,
    /// Skip clips (recording failure entries) while backlog exceeds `threshold`.
    DropToCatchUp { threshold: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    /// Descriptor and reasoner calls may run at the same time.
    #[default]
    Overlapped,
    /// A device lock serializes descriptor and reasoner calls.
    Exclusive,
}

fn default_queue() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default)]
    pub budget: BudgetConfig,
    #[serde(default)]
    pub policy: ViolationPolicy,
    #[serde(default)]
    pub execution: ExecutionMode,
    /// Capacity of the clip hand-off queue in wall-clock modes.
    #[serde(default = "default_queue")]
    pub queue_capacity: usize,
    #[serde(default)]
    pub render: RenderOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            budget: BudgetConfig::default(),
            policy: ViolationPolicy::default(),
            execution: ExecutionMode::default(),
            queue_capacity: default_queue(),
            render: RenderOptions::default(),
        }
    }
}

/// Which side of the pipeline a backend serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Descriptor,
    Reasoner,
}

/// Builds backends bound to a worker clock. `seed` varies per benchmark run.
pub trait BackendFactory: Send + Sync {
    fn build(&self, role: Role, seed: u64, clock: &ReplayClock) -> Result<Arc<dyn Backend>, BackendError>;
}

impl<F> BackendFactory for F
where
    F: Fn(Role, u64, &ReplayClock) -> Result<Arc<dyn Backend>, BackendError> + Send + Sync,
{
    fn build(&self, role: Role, seed: u64, clock: &ReplayClock) -> Result<Arc<dyn Backend>, BackendError> {
        self(role, seed, clock)
    }
}

/// Prebuilt descriptor prompt plus the reasoner template.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub descriptor: String,
    pub reasoner: ReasonerPromptTemplate,
}

impl Default for PromptSet {
    fn default() -> Self {
        let tpl = crate::prompts::DescriptorPromptTemplate::default();
        Self {
            descriptor: crate::prompts::build_descriptor_prompt(&tpl).expect("embedded template is valid"),
            reasoner: ReasonerPromptTemplate::default(),
        }
    }
}

pub enum StreamInput {
    Clips { stream_id: String, clips: Vec<Clip> },
    /// A finished memory served by the QA lane only.
    Memory(TextualMemory),
}

/// Stream times at which clips arrive, in clip order.
#[derive(Debug, Clone, Default)]
pub struct ArrivalSchedule {
    times: Vec<Duration>,
}

impl ArrivalSchedule {
    pub fn new(clips: &[Clip], clock: &ReplayClock) -> Self {
        Self { times: clips.iter().map(|c| clock.arrival(c)).collect() }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Clips arrived by `t`. A clip arriving exactly at `t` counts only if its
    /// index is at most `upto`; this orders a completion before the
    /// simultaneous arrival of later clips.
    pub fn arrived_by(&self, t: Duration, upto: usize) -> usize {
        let before = self.times.partition_point(|a| *a < t);
        let at = self.times[before..].partition_point(|a| *a == t);
        before + at.min(upto.saturating_sub(before))
    }

    /// Arrival time of the clip following the first `done` clips.
    pub fn next_after(&self, done: usize) -> Option<Duration> {
        self.times.get(done).copied()
    }
}

/// Lower bound on the descriptor's future commit times: every commit with
/// `committed_at < W` has already happened.
#[derive(Debug, Default)]
pub struct Watermark {
    at: Mutex<Duration>,
    cv: Condvar,
}

impl Watermark {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&self, t: Duration) {
        let mut at = self.at.lock().unwrap();
        if t > *at {
            *at = t;
            self.cv.notify_all();
        }
    }

    pub fn finish(&self) {
        self.advance(Duration::MAX);
    }

    pub fn get(&self) -> Duration {
        *self.at.lock().unwrap()
    }

    /// Blocks until every commit at or before `t` is final.
    pub fn wait_past(&self, t: Duration) {
        let at = self.at.lock().unwrap();
        let _g = self.cv.wait_while(at, |w| *w <= t).unwrap();
    }
}

pub type DeviceLock = Mutex<()>;

#[derive(Debug, Default)]
pub struct StatusCounters {
    pub completed: AtomicUsize,
    pub descriptor_violations: AtomicUsize,
    pub qa_violations: AtomicUsize,
    pub answered: AtomicUsize,
    pub pending_queries: AtomicUsize,
    pub finished: AtomicBool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineStatus {
    pub stream_id: String,
    pub stream_time: f64,
    pub clips_total: usize,
    pub clips_arrived: usize,
    pub clips_completed: usize,
    pub backlog: usize,
    pub budget: BudgetConfig,
    pub descriptor_violations: usize,
    pub qa_violations: usize,
    pub answered: usize,
    pub pending_queries: usize,
    pub descriptor_finished: bool,
    pub replay: ReplayMode,
    pub execution: ExecutionMode,
}

/// Everything a finished run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub memory: TextualMemory,
    pub answers: Vec<AnswerRecord>,
    pub violations: Vec<ViolationRecord>,
    pub events: Vec<PipelineEvent>,
    pub descriptor: DescriptorSummary,
    pub replay: ReplayMode,
    pub execution: ExecutionMode,
}

impl RunReport {
    pub fn backlog(&self) -> Vec<BacklogSample> {
        backlog_trace(&self.events)
    }

    /// Writes `memory.jsonl`, `answers.jsonl`, `violations.jsonl` and `events.jsonl` into `dir`.
    pub fn persist(&self, dir: impl AsRef<Path>) -> Result<(), PipelineError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.memory.persist(dir.join("memory.jsonl"))?;
        write_jsonl(dir.join("answers.jsonl"), &self.answers)?;
        write_jsonl(dir.join("violations.jsonl"), &self.violations)?;
        write_jsonl(dir.join("events.jsonl"), &self.events)?;
        Ok(())
    }
}

type QueryMsg = (Query, Sender<AnswerRecord>);

/// Pending answer for a submitted query.
pub struct QueryTicket {
    rx: Receiver<AnswerRecord>,
}

impl QueryTicket {
    pub fn wait(self) -> Result<AnswerRecord, PipelineError> {
        self.rx.recv().map_err(|_| PipelineError::Closed)
    }
}

/// A running pipeline.
pub struct Pipeline {
    stream_id: String,
    clock: ReplayClock,
    config: PipelineConfig,
    reader: MemoryReader,
    events: Arc<EventLog>,
    counters: Arc<StatusCounters>,
    arrivals: Arc<ArrivalSchedule>,
    query_tx: Option<Sender<QueryMsg>>,
    descriptor: Option<JoinHandle<(Result<DescriptorSummary, PipelineError>, Duration)>>,
    descriptor_done: Option<(DescriptorSummary, Duration)>,
    producer: Option<JoinHandle<()>>,
    qa: Option<JoinHandle<Vec<AnswerRecord>>>,
}

fn spawn<T: Send + 'static>(name: &str, f: impl FnOnce() -> T + Send + 'static) -> JoinHandle<T> {
    std::thread::Builder::new().name(name.into()).spawn(f).expect("spawn worker thread")
}

impl Pipeline {
    /// Starts both workers. In wall-clock modes a producer thread feeds clips
    /// through a bounded queue; in simulated mode the descriptor pulls them
    /// from the schedule on its own timeline.
    pub fn start(
        config: &PipelineConfig,
        input: StreamInput,
        replay: ReplayMode,
        factory: &dyn BackendFactory,
        seed: u64,
        prompts: &PromptSet,
    ) -> Result<Self, PipelineError> {
        Self::start_with_clock(config, input, ReplayClock::start(replay), factory, seed, prompts)
    }

    pub fn start_with_clock(
        config: &PipelineConfig,
        input: StreamInput,
        clock: ReplayClock,
        factory: &dyn BackendFactory,
        seed: u64,
        prompts: &PromptSet,
    ) -> Result<Self, PipelineError> {
        config.budget.validate()?;
        prompts.reasoner.validate()?;
        if config.execution == ExecutionMode::Exclusive && clock.is_simulated() {
            return Err(PipelineError::Config(
                "exclusive execution needs a shared wall clock; it cannot be combined with simulated replay".into(),
            ));
        }
        if config.queue_capacity == 0 {
            return Err(PipelineError::Config("queue capacity must be at least 1".into()));
        }
        let simulated = clock.is_simulated();
        let events = Arc::new(EventLog::new());
        let counters = Arc::new(StatusCounters::default());
        let device = (config.execution == ExecutionMode::Exclusive).then(|| Arc::new(DeviceLock::new(())));
        let watermark = Arc::new(Watermark::new());

        let (stream_id, clips, prebuilt) = match input {
            StreamInput::Clips { stream_id, clips } => (stream_id, clips, None),
            StreamInput::Memory(m) => (m.stream_id.clone(), Vec::new(), Some(m)),
        };
        let arrivals = Arc::new(ArrivalSchedule::new(&clips, &clock));
        let (mut writer, reader) = memory_log(stream_id.clone());

        let qa_clock = clock.fork();
        let reasoner = factory.build(Role::Reasoner, seed, &qa_clock)?;
        let mut descriptor = None;
        let mut descriptor_done = None;
        let mut producer = None;

        if let Some(memory) = prebuilt {
            for e in memory.entries {
                writer.append(e, Duration::ZERO)?;
            }
            drop(writer);
            watermark.finish();
            counters.finished.store(true, Ordering::SeqCst);
            descriptor_done = Some((DescriptorSummary::default(), Duration::ZERO));
        } else {
            let d_clock = clock.fork();
            let backend = factory.build(Role::Descriptor, seed, &d_clock)?;
            if prompts.descriptor.trim().is_empty() {
                return Err(PipelineError::Config("descriptor prompt is empty".into()));
            }
            let mut feed: Box<dyn ClipFeed> = if simulated {
                Box::new(ClipSchedule::new(clips))
            } else {
                let (tx, rx) = mpsc::sync_channel(config.queue_capacity);
                let (p_clock, p_events) = (clock.clone(), events.clone());
                producer = Some(spawn("oem-producer", move || produce(ClipSchedule::new(clips), &p_clock, tx, &p_events)));
                Box::new(QueuedFeed::new(rx))
            };
            let (budget, policy, prompt) = (config.budget, config.policy, prompts.descriptor.clone());
            let (events, counters, arrivals, watermark, device) =
                (events.clone(), counters.clone(), arrivals.clone(), watermark.clone(), device.clone());
            descriptor = Some(spawn("oem-descriptor", move || {
                let ctx = DescriptorContext {
                    budget: &budget,
                    policy,
                    clock: &d_clock,
                    arrivals: &arrivals,
                    events: &events,
                    watermark: &watermark,
                    counters: &counters,
                    device: device.as_deref(),
                };
                let out = run_descriptor_worker(feed.as_mut(), backend.as_ref(), &prompt, &mut writer, &ctx);
                watermark.finish();
                counters.finished.store(true, Ordering::SeqCst);
                drop(writer);
                (out, d_clock.now())
            }));
        }

        let context_limit = match reasoner.profile().context_limit {
            Some(l) => Some(l),
            None => reasoner.probe().ok().and_then(|c| c.context_limit),
        };
        let lane = QaLane {
            backend: reasoner,
            clock: qa_clock,
            reader: reader.clone(),
            template: prompts.reasoner.clone(),
            budget: config.budget,
            render: config.render,
            context_limit,
            watermark: simulated.then(|| watermark.clone()),
            device,
            events: events.clone(),
            counters: counters.clone(),
            arrivals: arrivals.clone(),
        };
        let (query_tx, query_rx) = mpsc::channel::<QueryMsg>();
        let qa = spawn("oem-qa", move || {
            let mut answered = Vec::new();
            for (query, reply) in query_rx {
                let record = lane.answer(&query);
                lane.counters.pending_queries.fetch_sub(1, Ordering::SeqCst);
                let _ = reply.send(record.clone());
                answered.push(record);
            }
            answered
        });

        info!(stream = %stream_id, mode = ?clock.mode(), execution = ?config.execution, "pipeline started");
        Ok(Self {
            stream_id,
            clock,
            config: config.clone(),
            reader,
            events,
            counters,
            arrivals,
            query_tx: Some(query_tx),
            descriptor,
            descriptor_done,
            producer,
            qa: Some(qa),
        })
    }

    pub fn stream_id(&self) -> &str {
        &self.stream_id
    }

    pub fn reader(&self) -> MemoryReader {
        self.reader.clone()
    }

    pub fn clock(&self) -> &ReplayClock {
        &self.clock
    }

    pub fn budget(&self) -> BudgetConfig {
        self.config.budget
    }

    /// Queues a query for the single QA lane. Queries are answered in
    /// submission order and never pause the descriptor.
    pub fn submit_query(&self, mut query: Query) -> Result<QueryTicket, PipelineError> {
        let tx = self.query_tx.as_ref().ok_or(PipelineError::Closed)?;
        if query.wall_submit_ms.is_none() && !self.clock.is_simulated() {
            query.wall_submit_ms = Some(wall_ms());
        }
        let (reply, rx) = mpsc::channel();
        self.counters.pending_queries.fetch_add(1, Ordering::SeqCst);
        tx.send((query, reply)).map_err(|_| PipelineError::Closed)?;
        Ok(QueryTicket { rx })
    }

    pub fn ask(&self, query: Query) -> Result<AnswerRecord, PipelineError> {
        self.submit_query(query)?.wait()
    }

    pub fn status(&self) -> PipelineStatus {
        let now = self.clock.now();
        let completed = self.counters.completed.load(Ordering::SeqCst);
        let arrived = self.arrivals.arrived_by(now, usize::MAX).max(completed);
        PipelineStatus {
            stream_id: self.stream_id.clone(),
            stream_time: now.as_secs_f64(),
            clips_total: self.arrivals.len(),
            clips_arrived: arrived,
            clips_completed: completed,
            backlog: arrived - completed,
            budget: self.config.budget,
            descriptor_violations: self.counters.descriptor_violations.load(Ordering::SeqCst),
            qa_violations: self.counters.qa_violations.load(Ordering::SeqCst),
            answered: self.counters.answered.load(Ordering::SeqCst),
            pending_queries: self.counters.pending_queries.load(Ordering::SeqCst),
            descriptor_finished: self.counters.finished.load(Ordering::SeqCst),
            replay: self.clock.mode(),
            execution: self.config.execution,
        }
    }

    /// Waits for the descriptor to finish the stream. Returns the stream
    /// time of its last commit, which is when the full memory is available.
    pub fn drain_descriptor(&mut self) -> Result<Duration, PipelineError> {
        if let Some(h) = self.descriptor.take() {
            let (summary, end) = h.join().map_err(|_| PipelineError::WorkerPanicked("descriptor"))?;
            self.descriptor_done = Some((summary?, end));
        }
        if let Some(p) = self.producer.take() {
            p.join().map_err(|_| PipelineError::WorkerPanicked("producer"))?;
        }
        Ok(self.descriptor_done.as_ref().map(|d| d.1).unwrap_or_default())
    }

    /// Stops accepting queries, waits for both workers and collects results.
    pub fn join(mut self) -> Result<RunReport, PipelineError> {
        self.drain_descriptor()?;
        drop(self.query_tx.take());
        let answers = match self.qa.take() {
            Some(h) => h.join().map_err(|_| PipelineError::WorkerPanicked("qa"))?,
            None => Vec::new(),
        };
        let events = self.events.sorted();
        let violations = events
            .iter()
            .filter_map(|e| match e {
                PipelineEvent::Violation(v) => Some(v.clone()),
                _ => None,
            })
            .collect();
        let descriptor = self.descriptor_done.take().map(|d| d.0).unwrap_or_default();
        Ok(RunReport {
            memory: self.reader.snapshot().to_memory(),
            answers,
            violations,
            events,
            descriptor,
            replay: self.clock.mode(),
            execution: self.config.execution,
        })
    }
}

impl Drop for Pipeline {
    fn drop(&mut self) {
        drop(self.query_tx.take());
        if let Some(h) = self.qa.take() {
            let _ = h.join();
        }
        if let Some(h) = self.descriptor.take() {
            if h.join().is_err() {
                warn!("descriptor worker panicked");
            }
        }
        if let Some(h) = self.producer.take() {
            let _ = h.join();
        }
    }
}

/// Releases clips on schedule into the hand-off queue. A full queue is
/// reported, then blocks ingestion until the descriptor catches up.
fn produce(mut schedule: ClipSchedule, clock: &ReplayClock, tx: SyncSender<Clip>, events: &EventLog) {
    while let Some(clip) = schedule.next_blocking(clock) {
        match tx.try_send(clip) {
            Ok(()) => {}
            Err(TrySendError::Full(clip)) => {
                events.push(Lane::Producer, PipelineEvent::QueueSaturated { k: clip.index, at: clock.now().as_secs_f64() });
                if tx.send(clip).is_err() {
                    return;
                }
            }
            Err(TrySendError::Disconnected(_)) => return,
        }
    }
}
