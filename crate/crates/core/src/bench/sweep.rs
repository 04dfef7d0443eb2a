use std::cmp::Ordering;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use super::table::{MetricsTable, TableRows};
use super::{BenchError, MeanStd};
use crate::backend::{Backend, BackendError, BackendProfile, MockScript, Resolution};
use crate::clock::Clock;
use crate::ingest::{segment_stream, Frame, ReplayClock, ReplayMode};
use crate::pipeline::BudgetConfig;

/// Builds the backend for one repeat of a grid point.
pub type BuildBackend = dyn Fn(&GridPoint, usize, &ReplayClock) -> Result<Arc<dyn Backend>, BackendError>;

/// One configuration to measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Parameter count in billions, used by model-size selection criteria.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_size_b: Option<f64>,
    pub profile: BackendProfile,
    /// Mock behaviour for this point; ignored by real backends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<MockScript>,
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub repeats: usize,
    /// `clip_duration` sets both the clip length and the compliance bound.
    pub budget: BudgetConfig,
    pub replay: ReplayMode,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub model_name: String,
    pub model_size_b: Option<f64>,
    pub quantization: String,
    pub fps: f64,
    pub resolution: Resolution,
    pub batch_size: usize,
    pub time_per_clip: Option<MeanStd>,
    pub tokens_per_second: Option<MeanStd>,
    pub peak_memory_gb: Option<MeanStd>,
    /// Fraction of individual clip observations at or above the budget.
    pub violating_fraction: Option<f64>,
    pub compliant: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl SweepRow {
    fn from_point(p: &GridPoint) -> Self {
        Self {
            label: p.label.clone().unwrap_or_else(|| p.profile.model_name.clone()),
            model_name: p.profile.model_name.clone(),
            model_size_b: p.model_size_b,
            quantization: p.profile.quantization_label.clone(),
            fps: p.profile.fps,
            resolution: p.profile.resolution,
            batch_size: p.profile.batch_size,
            time_per_clip: None,
            tokens_per_second: None,
            peak_memory_gb: None,
            violating_fraction: None,
            compliant: false,
            failure: None,
        }
    }

    fn failed(p: &GridPoint, reason: String) -> Self {
        Self { failure: Some(reason), ..Self::from_point(p) }
    }

    fn axis_cmp(&self, o: &Self) -> Ordering {
        self.quantization
            .cmp(&o.quantization)
            .then(self.model_size_b.unwrap_or(0.0).total_cmp(&o.model_size_b.unwrap_or(0.0)))
            .then(self.model_name.cmp(&o.model_name))
            .then(self.fps.total_cmp(&o.fps))
            .then(self.resolution.area().cmp(&o.resolution.area()))
            .then(self.resolution.height.cmp(&o.resolution.height))
            .then(self.batch_size.cmp(&o.batch_size))
            .then(self.label.cmp(&o.label))
    }
}

const GIB: f64 = (1u64 << 30) as f64;

struct Observations {
    per_clip: Vec<f64>,
    tok_s: Vec<f64>,
    peak_gb: Vec<f64>,
}

fn measure_point(
    point: &GridPoint,
    frames: &[Frame],
    config: &SweepConfig,
    build: &BuildBackend,
) -> Result<Observations, String> {
    let clips =
        segment_stream(frames, config.budget.clip_duration, point.profile.fps).map_err(|e| e.to_string())?;
    if clips.is_empty() {
        return Err("no clips to describe".into());
    }
    let bs = point.profile.batch_size.max(1);
    let mut obs = Observations { per_clip: Vec::new(), tok_s: Vec::new(), peak_gb: Vec::new() };
    for repeat in 0..config.repeats {
        let clock = ReplayClock::start(config.replay);
        let backend = build(point, repeat, &clock).map_err(|e| e.to_string())?;
        let mut peak: Option<u64> = None;
        for batch in clips.chunks(bs) {
            let t0 = clock.now();
            let results = backend.describe(batch, &config.prompt).map_err(|e| e.to_string())?;
            let wall = (clock.now() - t0).as_secs_f64();
            let mut tokens = 0u64;
            for r in results {
                let d = r.map_err(|e| e.to_string())?;
                tokens += d.stats.output_tokens;
                if let Some(p) = d.stats.peak_memory_bytes {
                    peak = Some(peak.map_or(p, |q| q.max(p)));
                }
            }
            // Clips in a batch are ready together, so each waited the full call.
            obs.per_clip.extend(std::iter::repeat_n(wall, batch.len()));
            if wall > 0.0 {
                obs.tok_s.push(tokens as f64 / wall);
            }
        }
        if let Some(p) = peak {
            obs.peak_gb.push(p as f64 / GIB);
        }
    }
    Ok(obs)
}

/// Measures each grid point in turn (never concurrently) and returns one
/// row per point, sorted by the grid axes. A point whose backend fails
/// becomes a failed row.
pub fn run_sweep(
    points: &[GridPoint],
    frames: &[Frame],
    config: &SweepConfig,
    build: &BuildBackend,
) -> Result<MetricsTable, BenchError> {
    if config.repeats == 0 {
        return Err(BenchError::Precondition("repeats must be at least 1".into()));
    }
    config.budget.validate()?;
    let s = config.budget.clip_duration.as_secs_f64();
    let mut rows = Vec::with_capacity(points.len());
    for point in points {
        let row = match measure_point(point, frames, config, build) {
            Ok(obs) => {
                let time = MeanStd::of(&obs.per_clip);
                let violating = obs.per_clip.iter().filter(|t| **t >= s).count() as f64 / obs.per_clip.len() as f64;
                SweepRow {
                    time_per_clip: time,
                    tokens_per_second: MeanStd::of(&obs.tok_s),
                    peak_memory_gb: MeanStd::of(&obs.peak_gb),
                    violating_fraction: Some(violating),
                    compliant: time.is_some_and(|t| t.mean < s),
                    ..SweepRow::from_point(point)
                }
            }
            Err(reason) => {
                warn!(point = %point.profile.model_name, %reason, "sweep point failed");
                SweepRow::failed(point, reason)
            }
        };
        info!(label = %row.label, compliant = row.compliant, "sweep point done");
        rows.push(row);
    }
    rows.sort_by(SweepRow::axis_cmp);
    Ok(MetricsTable::new(TableRows::Sweep(rows)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    FpsDesc,
    ResolutionAreaDesc,
    ModelSizeDesc,
    BatchSizeDesc,
    TimePerClipAsc,
    TokensPerSecondDesc,
    PeakMemoryAsc,
}

impl Criterion {
    /// `Less` when `a` is preferred.
    fn compare(self, a: &SweepRow, b: &SweepRow) -> Ordering {
        let time = |r: &SweepRow| r.time_per_clip.map_or(f64::INFINITY, |t| t.mean);
        let tok = |r: &SweepRow| r.tokens_per_second.map_or(f64::NEG_INFINITY, |t| t.mean);
        let mem = |r: &SweepRow| r.peak_memory_gb.map_or(f64::INFINITY, |t| t.mean);
        match self {
            Self::FpsDesc => b.fps.total_cmp(&a.fps),
            Self::ResolutionAreaDesc => b.resolution.area().cmp(&a.resolution.area()),
            Self::ModelSizeDesc => b.model_size_b.unwrap_or(0.0).total_cmp(&a.model_size_b.unwrap_or(0.0)),
            Self::BatchSizeDesc => b.batch_size.cmp(&a.batch_size),
            Self::TimePerClipAsc => time(a).total_cmp(&time(b)),
            Self::TokensPerSecondDesc => tok(b).total_cmp(&tok(a)),
            Self::PeakMemoryAsc => mem(a).total_cmp(&mem(b)),
        }
    }
}

/// Ordered preference among compliant rows; earlier criteria dominate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SelectionPolicy(pub Vec<Criterion>);

impl Default for SelectionPolicy {
    /// Highest input fidelity, then fastest.
    fn default() -> Self {
        Self(vec![Criterion::FpsDesc, Criterion::ResolutionAreaDesc, Criterion::TimePerClipAsc])
    }
}

impl SelectionPolicy {
    pub fn largest_model_then_fastest() -> Self {
        Self(vec![Criterion::ModelSizeDesc, Criterion::TimePerClipAsc])
    }
}

/// Index of the preferred compliant row. Ties left after every criterion go
/// to the earlier row.
pub fn select_configuration(rows: &[SweepRow], policy: &SelectionPolicy) -> Result<usize, BenchError> {
    if rows.is_empty() {
        return Err(BenchError::Precondition("cannot select from an empty table".into()));
    }
    rows.iter()
        .enumerate()
        .filter(|(_, r)| r.compliant && r.failure.is_none())
        .min_by(|(ia, a), (ib, b)| {
            policy.0.iter().fold(Ordering::Equal, |acc, c| acc.then_with(|| c.compare(a, b))).then(ia.cmp(ib))
        })
        .map(|(i, _)| i)
        .ok_or(BenchError::NoFeasibleConfiguration)
}
