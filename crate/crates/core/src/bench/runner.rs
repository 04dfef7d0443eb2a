use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use tracing::warn;

use super::{BenchError, MeanStd};
use crate::ingest::{Clip, ReplayMode};
use crate::memory::TextualMemory;
use crate::pipeline::{
    write_jsonl, AnswerRecord, BackendFactory, Pipeline, PipelineConfig, PromptSet, Query, StreamInput,
};
use crate::prompts::{Candidates, OptionLetter};

/// One closed-ended question about a stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub item_id: String,
    pub stream_id: String,
    pub question: String,
    pub candidates: Candidates,
    pub correct: OptionLetter,
    /// Stream time at which the question is asked; defaults to when the
    /// whole stream has been described.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_time: Option<f64>,
}

impl BenchmarkItem {
    pub fn validate(&self) -> Result<(), String> {
        let distinct: BTreeSet<_> = self.candidates.texts().iter().map(|t| t.trim()).collect();
        if distinct.len() != 4 {
            return Err(format!("item {}: candidates are not distinct", self.item_id));
        }
        Ok(())
    }
}

/// Reads a JSONL file of items, validating each.
pub fn load_items(path: impl AsRef<Path>) -> Result<Vec<BenchmarkItem>, BenchError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut items = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |reason: String| BenchError::Parse { path: shown.clone(), line: i + 1, reason };
        let item: BenchmarkItem = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        item.validate().map_err(parse)?;
        items.push(item);
    }
    Ok(items)
}

/// Question text to correct letter, for mocks that answer from a key.
pub fn answer_key(items: &[BenchmarkItem]) -> BTreeMap<String, OptionLetter> {
    items.iter().map(|i| (i.question.clone(), i.correct)).collect()
}

#[derive(Debug, Clone)]
pub enum StreamSource {
    Clips(Vec<Clip>),
    Memory(TextualMemory),
}

#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub pipeline: PipelineConfig,
    pub replay: ReplayMode,
    pub prompts: PromptSet,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self { pipeline: PipelineConfig::default(), replay: ReplayMode::Simulated, prompts: PromptSet::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub seed: u64,
    pub item_id: String,
    pub stream_id: String,
    pub correct: OptionLetter,
    pub is_correct: bool,
    /// The item had no query time and was asked at end of stream.
    pub asked_at_end: bool,
    pub record: AnswerRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAccuracy {
    pub seed: u64,
    pub correct: usize,
    pub total: usize,
    /// Percent.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub item_id: String,
    pub stream_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub per_seed: Vec<SeedAccuracy>,
    /// Percent, sample std across seeds.
    pub accuracy: MeanStd,
    pub records: Vec<ItemResult>,
    pub audit: Vec<AuditEntry>,
}

impl BenchmarkReport {
    /// Writes `records.jsonl`, `audit.jsonl` and `accuracy.jsonl` into `dir`.
    pub fn persist(&self, dir: impl AsRef<Path>) -> Result<(), BenchError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_jsonl(dir.join("records.jsonl"), &self.records)?;
        write_jsonl(dir.join("audit.jsonl"), &self.audit)?;
        write_jsonl(dir.join("accuracy.jsonl"), &self.per_seed)?;
        Ok(())
    }
}

/// Runs every item once per seed and scores the answers. Each stream is
/// replayed through a fresh pipeline per seed; unparseable or failed
/// answers count as incorrect. Items whose stream is missing are left out
/// of the denominator and listed in the audit.
pub fn run_benchmark(
    items: &[BenchmarkItem],
    streams: &BTreeMap<String, StreamSource>,
    config: &BenchmarkConfig,
    factory: &dyn BackendFactory,
    seeds: &[u64],
) -> Result<BenchmarkReport, BenchError> {
    if seeds.is_empty() {
        return Err(BenchError::Precondition("at least one seed is required".into()));
    }
    let mut audit = Vec::new();
    let mut by_stream: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        if streams.contains_key(&item.stream_id) {
            by_stream.entry(item.stream_id.as_str()).or_default().push(i);
        } else {
            warn!(item = %item.item_id, stream = %item.stream_id, "no source for stream; item skipped");
            audit.push(AuditEntry {
                item_id: item.item_id.clone(),
                stream_id: item.stream_id.clone(),
                reason: "missing stream".into(),
            });
        }
    }

    let mut per_seed = Vec::with_capacity(seeds.len());
    let mut records = Vec::new();
    for &seed in seeds {
        let mut seed_records: Vec<(usize, ItemResult)> = Vec::new();
        for (stream_id, idxs) in &by_stream {
            let input = match &streams[*stream_id] {
                StreamSource::Clips(clips) => {
                    StreamInput::Clips { stream_id: stream_id.to_string(), clips: clips.clone() }
                }
                StreamSource::Memory(m) => {
                    let mut m = m.clone();
                    m.stream_id = stream_id.to_string();
                    StreamInput::Memory(m)
                }
            };
            let mut pipeline =
                Pipeline::start(&config.pipeline, input, config.replay, factory, seed, &config.prompts)?;

            let mut timed: Vec<usize> = idxs.iter().copied().filter(|&i| items[i].query_time.is_some()).collect();
            timed.sort_by(|&a, &b| items[a].query_time.unwrap().total_cmp(&items[b].query_time.unwrap()));
            let mut tickets = Vec::new();
            for &i in &timed {
                let item = &items[i];
                let q = Query::new(&item.item_id, &item.question, item.candidates.clone()).at(item.query_time.unwrap());
                tickets.push((i, false, pipeline.submit_query(q)?));
            }
            let end = pipeline.drain_descriptor()?.as_secs_f64();
            let last_timed = timed.last().map(|&i| items[i].query_time.unwrap()).unwrap_or(0.0);
            let at_end = end.max(last_timed);
            for &i in idxs.iter().filter(|&&i| items[i].query_time.is_none()) {
                let item = &items[i];
                let q = Query::new(&item.item_id, &item.question, item.candidates.clone()).at(at_end);
                tickets.push((i, true, pipeline.submit_query(q)?));
            }
            for (i, asked_at_end, ticket) in tickets {
                let record = ticket.wait()?;
                let item = &items[i];
                seed_records.push((
                    i,
                    ItemResult {
                        seed,
                        item_id: item.item_id.clone(),
                        stream_id: item.stream_id.clone(),
                        correct: item.correct,
                        is_correct: record.chosen == Some(item.correct),
                        asked_at_end,
                        record,
                    },
                ));
            }
            pipeline.join()?;
        }
        seed_records.sort_by_key(|(i, _)| *i);
        let total = seed_records.len();
        let correct = seed_records.iter().filter(|(_, r)| r.is_correct).count();
        let accuracy = if total == 0 { 0.0 } else { 100.0 * correct as f64 / total as f64 };
        per_seed.push(SeedAccuracy { seed, correct, total, accuracy });
        records.extend(seed_records.into_iter().map(|(_, r)| r));
    }
    let accs: Vec<f64> = per_seed.iter().map(|s| s.accuracy).collect();
    let accuracy = MeanStd::of(&accs).expect("at least one seed");
    Ok(BenchmarkReport { per_seed, accuracy, records, audit })
}
