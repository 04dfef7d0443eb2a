//! Clip segmentation and replay pacing.
//!
//! A frame source (manifest file or synthetic generator) is cut into
//! consecutive, non-overlapping clips of a fixed duration. Each clip keeps
//! the source frames nearest to a uniform sampling grid. Frames are opaque
//! references: nothing in this module decodes images.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{secs, Clock, SharedClock, VirtualClock, WallClock};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("frame {index} has timestamp {current:?} not after previous {previous:?}")]
    NonMonotonic { index: usize, previous: Duration, current: Duration },
    #[error("frame {0} has an empty payload reference")]
    EmptyPayload(usize),
    #[error("invalid segmentation parameter: {0}")]
    InvalidParameter(String),
    #[error("failed to read frame manifest {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed frame manifest {path}: {source}")]
    Manifest { path: String, source: serde_json::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub index: usize,
    #[serde(with = "secs")]
    pub timestamp: Duration,
    pub payload_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    /// 1-based position in the stream.
    pub index: usize,
    #[serde(with = "secs")]
    pub start_time: Duration,
    #[serde(with = "secs")]
    pub end_time: Duration,
    #[serde(with = "secs")]
    pub duration: Duration,
    pub frames: Vec<Frame>,
    /// Final clip shorter than the nominal duration.
    pub partial: bool,
}

/// One record of a JSON frame manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestRecord {
    timestamp: f64,
    path: String,
    #[serde(default)]
    height: Option<u32>,
    #[serde(default)]
    width: Option<u32>,
}

/// Reads a manifest of `{timestamp, path}` records. Relative paths are
/// resolved against the manifest's directory.
pub fn load_frame_manifest(path: impl AsRef<Path>) -> Result<Vec<Frame>, IngestError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let raw = std::fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: shown.clone(),
        source,
    })?;
    let records: Vec<ManifestRecord> = serde_json::from_str(&raw)
        .map_err(|source| IngestError::Manifest { path: shown.clone(), source })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    records
        .into_iter()
        .enumerate()
        .map(|(index, r)| {
            let timestamp = Duration::try_from_secs_f64(r.timestamp).map_err(|_| {
                IngestError::InvalidParameter(format!("frame {index}: bad timestamp {}", r.timestamp))
            })?;
            let payload_ref = if r.path.is_empty() || Path::new(&r.path).is_absolute() {
                r.path
            } else {
                base.join(&r.path).display().to_string()
            };
            Ok(Frame { index, timestamp, payload_ref, height: r.height, width: r.width })
        })
        .collect()
}

/// Seeded synthetic frame source for tests and desk-scale replays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSource {
    #[serde(with = "secs")]
    pub duration: Duration,
    pub fps: f64,
    /// Uniform timestamp jitter as a fraction of the frame period, in `[0, 0.5)`.
    #[serde(default)]
    pub jitter: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSource {
    pub fn new(duration: Duration, fps: f64) -> Self {
        Self { duration, fps, jitter: 0.0, seed: 0 }
    }

    pub fn frames(&self) -> Vec<Frame> {
        let period_ns = 1e9 / self.fps;
        let total = self.duration.as_nanos() as f64;
        let count = (total / period_ns - 1e-6).ceil().max(0.0) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let jitter = self.jitter.clamp(0.0, 0.49);
        (0..count)
            .map(|i| {
                let offset = if jitter > 0.0 && i > 0 {
                    rng.random_range(-jitter..jitter) * period_ns
                } else {
                    0.0
                };
                let ns = (i as f64 * period_ns + offset).round().max(0.0) as u64;
                Frame {
                    index: i,
                    timestamp: Duration::from_nanos(ns),
                    payload_ref: format!("synthetic:{}:{}", self.seed, i),
                    height: None,
                    width: None,
                }
            })
            .collect()
    }
}

fn validate(frames: &[Frame]) -> Result<(), IngestError> {
    for (i, f) in frames.iter().enumerate() {
        if f.payload_ref.is_empty() {
            return Err(IngestError::EmptyPayload(i));
        }
        if i > 0 && f.timestamp <= frames[i - 1].timestamp {
            return Err(IngestError::NonMonotonic {
                index: i,
                previous: frames[i - 1].timestamp,
                current: f.timestamp,
            });
        }
    }
    Ok(())
}

fn median_period(frames: &[Frame], fps: f64) -> Duration {
    if frames.len() < 2 {
        return Duration::from_secs_f64(1.0 / fps);
    }
    let mut gaps: Vec<Duration> = frames.windows(2).map(|w| w[1].timestamp - w[0].timestamp).collect();
    gaps.sort_unstable();
    gaps[gaps.len() / 2]
}

/// Index into `frames` of the frame nearest `target`; ties go to the earlier frame.
fn nearest(frames: &[Frame], target: Duration) -> usize {
    let pos = frames.partition_point(|f| f.timestamp < target);
    if pos == 0 {
        return 0;
    }
    if pos == frames.len() {
        return frames.len() - 1;
    }
    let before = target - frames[pos - 1].timestamp;
    let after = frames[pos].timestamp - target;
    if after < before {
        pos
    } else {
        pos - 1
    }
}

/// Cuts a frame sequence into clips of duration `clip_len`, keeping the frames
/// nearest a uniform `fps` grid anchored at each clip's start.
///
/// The source span runs from 0 to one frame period past the last frame. The
/// final clip is flagged `partial` when shorter than `clip_len`; an end that
/// lands within half a frame period of the nominal boundary snaps to it.
pub fn segment_stream(frames: &[Frame], clip_len: Duration, fps: f64) -> Result<Vec<Clip>, IngestError> {
    if clip_len.is_zero() {
        return Err(IngestError::InvalidParameter("clip duration must be positive".into()));
    }
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(IngestError::InvalidParameter(format!("fps must be positive, got {fps}")));
    }
    if frames.is_empty() {
        return Ok(Vec::new());
    }
    validate(frames)?;

    let period = median_period(frames, fps);
    let last = frames[frames.len() - 1].timestamp;
    let span_end = last + period;
    let clip_ns = clip_len.as_nanos();
    let count = (last.as_nanos() / clip_ns) as usize + 1;
    let nominal_end = clip_len * count as u32;
    let final_end = if span_end + period / 2 >= nominal_end { nominal_end } else { span_end };
    let step_ns = 1e9 / fps;

    let mut clips = Vec::with_capacity(count);
    for k in 1..=count {
        let start = clip_len * (k as u32 - 1);
        let end = if k == count { final_end } else { clip_len * k as u32 };
        let lo = frames.partition_point(|f| f.timestamp < start);
        let hi = frames.partition_point(|f| f.timestamp < end);
        let in_span = &frames[lo..hi];

        let mut picked: Vec<Frame> = Vec::new();
        if !in_span.is_empty() {
            let mut last_pick = None;
            for j in 0u64.. {
                let target = start + Duration::from_nanos((j as f64 * step_ns).round() as u64);
                if target >= end {
                    break;
                }
                let idx = nearest(in_span, target);
                if last_pick != Some(idx) {
                    picked.push(in_span[idx].clone());
                    last_pick = Some(idx);
                }
            }
        }
        clips.push(Clip {
            index: k,
            start_time: start,
            end_time: end,
            duration: end - start,
            frames: picked,
            partial: end - start < clip_len,
        });
    }
    Ok(clips)
}

pub fn write_clip_manifest(clips: &[Clip], path: impl AsRef<Path>) -> std::io::Result<()> {
    let json = serde_json::to_string_pretty(clips).map_err(std::io::Error::other)?;
    std::fs::write(path, json)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayMode {
    Realtime,
    Accelerated(f64),
    AsFastAsPossible,
    /// Realtime schedule on a virtual clock: deterministic and instantaneous.
    Simulated,
}

/// Stream-time clock for a replay. Stream time equals base time multiplied
/// by the acceleration factor; everything downstream (clip arrival, latency
/// measurement, mock backend sleeps) runs on stream time.
#[derive(Clone)]
pub struct ReplayClock {
    mode: ReplayMode,
    base: SharedClock,
}

impl std::fmt::Debug for ReplayClock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReplayClock").field("mode", &self.mode).field("now", &self.now()).finish()
    }
}

impl ReplayClock {
    /// Anchors a new clock at the current instant.
    pub fn start(mode: ReplayMode) -> Self {
        let base: SharedClock = match mode {
            ReplayMode::Simulated => Arc::new(VirtualClock::new()),
            _ => Arc::new(WallClock::new()),
        };
        Self { mode, base }
    }

    pub fn with_base(mode: ReplayMode, base: SharedClock) -> Self {
        Self { mode, base }
    }

    pub fn mode(&self) -> ReplayMode {
        self.mode
    }

    fn factor(&self) -> f64 {
        match self.mode {
            ReplayMode::Accelerated(f) => f,
            _ => 1.0,
        }
    }

    /// Stream time at which `clip` becomes available.
    pub fn arrival(&self, clip: &Clip) -> Duration {
        match self.mode {
            ReplayMode::AsFastAsPossible => Duration::ZERO,
            _ => clip.end_time,
        }
    }

    /// A fresh clock of the same mode for another worker. Simulated clocks get
    /// an independent timeline; wall clocks share the origin.
    pub fn fork(&self) -> Self {
        match self.mode {
            ReplayMode::Simulated => Self {
                mode: self.mode,
                base: Arc::new(VirtualClock::starting_at(self.base.now())),
            },
            _ => self.clone(),
        }
    }

    pub fn is_simulated(&self) -> bool {
        self.mode == ReplayMode::Simulated
    }
}

impl Clock for ReplayClock {
    fn now(&self) -> Duration {
        let f = self.factor();
        let base = self.base.now();
        if f == 1.0 {
            base
        } else {
            base.mul_f64(f)
        }
    }

    fn sleep_until(&self, deadline: Duration) {
        let f = self.factor();
        let base_deadline = if f == 1.0 { deadline } else { deadline.div_f64(f) };
        self.base.sleep_until(base_deadline);
    }
}

/// Delivers clips in order, each exactly once, as they become available on a
/// replay clock.
#[derive(Debug, Clone)]
pub struct ClipSchedule {
    clips: Vec<Clip>,
    next: usize,
}

impl ClipSchedule {
    pub fn new(clips: Vec<Clip>) -> Self {
        Self { clips, next: 0 }
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn remaining(&self) -> usize {
        self.clips.len() - self.next
    }

    pub fn clips(&self) -> &[Clip] {
        &self.clips
    }

    /// Returns the next clip if it has arrived by the clock's current time.
    pub fn next_available_clip(&mut self, clock: &ReplayClock) -> Option<Clip> {
        let clip = self.clips.get(self.next)?;
        if clock.arrival(clip) <= clock.now() {
            self.next += 1;
            Some(clip.clone())
        } else {
            None
        }
    }

    /// Waits on the clock for the next clip. `None` once the stream is exhausted.
    pub fn next_blocking(&mut self, clock: &ReplayClock) -> Option<Clip> {
        let clip = self.clips.get(self.next)?.clone();
        clock.sleep_until(clock.arrival(&clip));
        self.next += 1;
        Some(clip)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(seconds: u64, fps: f64) -> Vec<Frame> {
        SyntheticSource::new(Duration::from_secs(seconds), fps).frames()
    }

    #[test]
    fn thirty_seconds_at_two_fps_gives_two_full_clips() {
        let clips = segment_stream(&dense(30, 30.0), Duration::from_secs(15), 2.0).unwrap();
        assert_eq!(clips.len(), 2);
        for c in &clips {
            assert_eq!(c.frames.len(), 30);
            assert!(!c.partial);
            assert_eq!(c.duration, Duration::from_secs(15));
        }
        assert_eq!(clips[1].start_time, clips[0].end_time);
    }

    #[test]
    fn empty_source_gives_no_clips() {
        assert!(segment_stream(&[], Duration::from_secs(15), 2.0).unwrap().is_empty());
    }

    #[test]
    fn twenty_seconds_ends_with_partial_clip() {
        let clips = segment_stream(&dense(20, 30.0), Duration::from_secs(15), 2.0).unwrap();
        assert_eq!(clips.len(), 2);
        assert!(!clips[0].partial);
        assert!(clips[1].partial);
        assert_eq!(clips[1].start_time, Duration::from_secs(15));
        assert_eq!(clips[1].end_time, Duration::from_secs(20));
        assert_eq!(clips[1].frames.len(), 10);
    }

    #[test]
    fn non_monotonic_timestamps_are_rejected() {
        let mut frames = dense(2, 10.0);
        frames.swap(3, 4);
        let err = segment_stream(&frames, Duration::from_secs(1), 2.0).unwrap_err();
        assert!(matches!(err, IngestError::NonMonotonic { index: 4, .. }));
    }

    #[test]
    fn bad_parameters_are_rejected() {
        let frames = dense(2, 10.0);
        assert!(segment_stream(&frames, Duration::ZERO, 2.0).is_err());
        assert!(segment_stream(&frames, Duration::from_secs(1), 0.0).is_err());
    }

    #[test]
    fn nearest_breaks_ties_toward_earlier_frame() {
        let frames: Vec<Frame> = [0u64, 10, 20]
            .iter()
            .enumerate()
            .map(|(i, &ms)| Frame {
                index: i,
                timestamp: Duration::from_millis(ms),
                payload_ref: "x".into(),
                height: None,
                width: None,
            })
            .collect();
        assert_eq!(nearest(&frames, Duration::from_millis(5)), 0);
        assert_eq!(nearest(&frames, Duration::from_millis(16)), 2);
    }

    fn at(mode: ReplayMode, base_secs: f64) -> ReplayClock {
        let base = Arc::new(VirtualClock::starting_at(Duration::from_secs_f64(base_secs)));
        ReplayClock::with_base(mode, base)
    }

    #[test]
    fn realtime_clip_not_ready_before_its_end() {
        let clips = segment_stream(&dense(30, 30.0), Duration::from_secs(15), 2.0).unwrap();
        let mut sched = ClipSchedule::new(clips);
        assert!(sched.next_available_clip(&at(ReplayMode::Realtime, 14.0)).is_none());
        let clip = sched.next_available_clip(&at(ReplayMode::Realtime, 15.01)).unwrap();
        assert_eq!(clip.index, 1);
        assert!(sched.next_available_clip(&at(ReplayMode::Realtime, 15.01)).is_none());
    }

    #[test]
    fn accelerated_clock_releases_two_clips_at_3_1_wall_seconds() {
        let clips = segment_stream(&dense(45, 30.0), Duration::from_secs(15), 2.0).unwrap();
        let mut sched = ClipSchedule::new(clips);
        let clock = at(ReplayMode::Accelerated(10.0), 3.1);
        assert_eq!(sched.next_available_clip(&clock).unwrap().index, 1);
        assert_eq!(sched.next_available_clip(&clock).unwrap().index, 2);
        assert!(sched.next_available_clip(&clock).is_none());
    }

    #[test]
    fn as_fast_as_possible_releases_everything() {
        let clips = segment_stream(&dense(45, 30.0), Duration::from_secs(15), 2.0).unwrap();
        let mut sched = ClipSchedule::new(clips);
        let clock = at(ReplayMode::AsFastAsPossible, 0.0);
        let got: Vec<usize> = std::iter::from_fn(|| sched.next_available_clip(&clock)).map(|c| c.index).collect();
        assert_eq!(got, vec![1, 2, 3]);
    }

    #[test]
    fn manifest_paths_resolve_relative_to_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frames.json");
        std::fs::write(&path, r#"[{"timestamp":0.0,"path":"a.jpg"},{"timestamp":0.5,"path":"/abs/b.jpg"}]"#).unwrap();
        let frames = load_frame_manifest(&path).unwrap();
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[0].payload_ref, dir.path().join("a.jpg").display().to_string());
        assert_eq!(frames[1].payload_ref, "/abs/b.jpg");
        assert_eq!(frames[1].timestamp, Duration::from_millis(500));
    }
}
