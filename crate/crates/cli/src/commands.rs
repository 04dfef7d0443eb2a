use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use oemstream::backend::{Backend, BackendError, HttpBackend, MockBackend};
use oemstream::bench::{
    answer_key, emit_table, load_items, measure_ttft, run_benchmark, run_sweep, select_configuration,
    BenchmarkConfig, GridPoint, MetricsTable, StreamSource, SweepConfig, TableFormat, TableRows, TtftFixture,
    TtftRow,
};
use oemstream::config::{RunConfig, SourceSpec};
use oemstream::ingest::{load_frame_manifest, Frame, ReplayClock};
use oemstream::memory::TextualMemory;
use oemstream::pipeline::{Pipeline, Query, RunReport, StreamInput};
use oemstream::Candidates;
use tracing::info;

/// Writes `name.csv` and `name.md` into `out`; returns the markdown.
pub fn write_reports(table: &MetricsTable, out: &Path, name: &str) -> Result<String> {
    std::fs::create_dir_all(out)?;
    for format in [TableFormat::Csv, TableFormat::Markdown] {
        let path = out.join(format!("{name}.{}", format.extension()));
        std::fs::write(&path, emit_table(table, format)?).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(emit_table(table, TableFormat::Markdown)?)
}

fn stream_input(cfg: &RunConfig) -> Result<StreamInput> {
    let spec = cfg.source.as_ref().context("config has no `source` stream")?;
    let stream_id = "live".to_string();
    Ok(match cfg.load_source(&stream_id, spec)? {
        StreamSource::Clips(clips) => StreamInput::Clips { stream_id, clips },
        StreamSource::Memory(m) => StreamInput::Memory(m),
    })
}

pub fn start_pipeline(cfg: &RunConfig) -> Result<Pipeline> {
    let input = stream_input(cfg)?;
    let pipeline = Pipeline::start(&cfg.pipeline, input, cfg.replay, &cfg.factory(), cfg.seed, &cfg.prompts()?)?;
    Ok(pipeline)
}

pub fn read_queries(path: &Path) -> Result<Vec<Query>> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

/// Replays the configured stream, answers any queries, and persists the run.
pub fn run(cfg: &RunConfig, queries: &[Query], out: &Path) -> Result<RunReport> {
    let pipeline = start_pipeline(cfg)?;
    let mut queries = queries.to_vec();
    queries.sort_by(|a, b| a.submit_time.unwrap_or(f64::INFINITY).total_cmp(&b.submit_time.unwrap_or(f64::INFINITY)));
    let tickets = queries.into_iter().map(|q| pipeline.submit_query(q)).collect::<Result<Vec<_>, _>>()?;
    for t in tickets {
        t.wait()?;
    }
    let report = pipeline.join()?;
    report.persist(out)?;
    Ok(report)
}

pub fn summarize(report: &RunReport) -> String {
    let d = &report.descriptor;
    format!(
        "clips {} (failed {}, skipped {}), descriptor violations {}, max backlog {}, answers {}",
        d.clips_processed,
        d.failures,
        d.skipped,
        d.violations.len(),
        d.max_backlog,
        report.answers.len()
    )
}

fn bench_streams(cfg: &RunConfig) -> Result<BTreeMap<String, StreamSource>> {
    cfg.streams
        .iter()
        .map(|(id, spec)| Ok((id.clone(), cfg.load_source(id, spec)?)))
        .collect()
}

/// Accuracy benchmark over `seeds` consecutive seeds starting at the config seed.
pub fn bench(cfg: &RunConfig, items_path: &Path, seeds: u64, out: &Path) -> Result<String> {
    let items = load_items(items_path)?;
    let streams = bench_streams(cfg)?;
    let factory = cfg.factory().with_answer_key(answer_key(&items));
    let config = BenchmarkConfig { pipeline: cfg.pipeline.clone(), replay: cfg.replay, prompts: cfg.prompts()? };
    let seeds: Vec<u64> = (0..seeds).map(|i| cfg.seed + i).collect();
    let report = run_benchmark(&items, &streams, &config, &factory, &seeds)?;
    report.persist(out)?;
    if !report.audit.is_empty() {
        info!(skipped = report.audit.len(), "items without a stream are listed in audit.jsonl");
    }
    write_reports(&MetricsTable::accuracy(&report), out, "accuracy")
}

fn source_frames(cfg: &RunConfig) -> Result<Vec<Frame>> {
    match cfg.source.as_ref().context("sweep needs a `source` stream")? {
        SourceSpec::Synthetic(s) => Ok(s.frames()),
        SourceSpec::Manifest { path } => Ok(load_frame_manifest(path)?),
        SourceSpec::Memory { .. } => bail!("sweep needs frames, not a memory file"),
    }
}

fn build_point(p: &GridPoint, repeat: usize, clock: &ReplayClock) -> Result<Arc<dyn Backend>, BackendError> {
    p.profile.validate()?;
    match &p.mock {
        Some(script) => {
            let mut script = script.clone();
            script.seed = script.seed.wrapping_add(repeat as u64);
            Ok(Arc::new(MockBackend::new(p.profile.clone(), script, clock.clone())))
        }
        None => Ok(Arc::new(HttpBackend::new(p.profile.clone(), clock.clone())?)),
    }
}

/// Latency sweep over a JSON list of grid points.
pub fn sweep(cfg: &RunConfig, grid_path: &Path, repeats: usize, out: &Path) -> Result<String> {
    let text = std::fs::read_to_string(grid_path).with_context(|| format!("reading {}", grid_path.display()))?;
    let points: Vec<GridPoint> = serde_json::from_str(&text).with_context(|| format!("parsing {}", grid_path.display()))?;
    let config = SweepConfig { repeats, budget: cfg.pipeline.budget, replay: cfg.replay, prompt: cfg.prompts()?.descriptor };
    let mut table = run_sweep(&points, &source_frames(cfg)?, &config, &build_point)?;
    match select_configuration(table.sweep_rows().unwrap_or_default(), &cfg.selection) {
        Ok(i) => table = table.with_selection(i),
        Err(e) => info!(reason = %e, "no configuration selected"),
    }
    if let TableRows::Sweep(rows) = &table.rows {
        std::fs::create_dir_all(out)?;
        let mut f = std::fs::File::create(out.join("sweep_rows.jsonl"))?;
        for r in rows {
            use std::io::Write;
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
    }
    write_reports(&table, out, "sweep")
}

fn default_fixture(memory: TextualMemory) -> TtftFixture {
    TtftFixture {
        memory,
        question: "What was the person doing most recently?".into(),
        candidates: Candidates::from_texts(vec!["Cooking", "Reading", "Walking outside", "Cleaning"])
            .expect("four candidates"),
    }
}

/// Time-to-first-token campaign. Fixtures come from benchmark items when
/// given, otherwise from the configured source's memory (describing the
/// stream first if it is made of clips).
pub fn ttft(cfg: &RunConfig, n: usize, items_path: Option<&PathBuf>, out: &Path) -> Result<String> {
    let fixtures = match items_path {
        Some(path) => {
            let items = load_items(path)?;
            let streams = bench_streams(cfg)?;
            let mut memories: BTreeMap<String, TextualMemory> = BTreeMap::new();
            for (id, s) in streams {
                let m = match s {
                    StreamSource::Memory(m) => m,
                    StreamSource::Clips(clips) => {
                        let input = StreamInput::Clips { stream_id: id.clone(), clips };
                        Pipeline::start(&cfg.pipeline, input, cfg.replay, &cfg.factory(), cfg.seed, &cfg.prompts()?)?
                            .join()?
                            .memory
                    }
                };
                memories.insert(id, m);
            }
            items
                .into_iter()
                .filter_map(|it| {
                    let memory = memories.get(&it.stream_id)?.clone();
                    Some(TtftFixture { memory, question: it.question, candidates: it.candidates })
                })
                .collect()
        }
        None => {
            let memory = start_pipeline(cfg)?.join()?.memory;
            vec![default_fixture(memory)]
        }
    };
    let spec = cfg.reasoner_spec();
    let backend = spec.build(cfg.seed, &ReplayClock::start(cfg.replay), &BTreeMap::new())?;
    let result = measure_ttft(backend.as_ref(), &cfg.prompts()?.reasoner, &fixtures, n);
    if let Ok(r) = &result {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("ttft_samples.json"), serde_json::to_string(&r.samples)?)?;
    }
    let budget = cfg.pipeline.budget.response_budget.as_secs_f64();
    let row = TtftRow::from_result(spec.profile().model_name.clone(), &result, budget);
    write_reports(&MetricsTable::new(TableRows::Ttft(vec![row])), out, "ttft")
}
