use std::time::Duration;

use oemstream::backend::{BackendProfile, LatencyModel, MockScript};
use oemstream::ingest::{segment_stream, ClipSchedule, Frame, ReplayClock, ReplayMode, SyntheticSource};
use oemstream::memory::{memory_log, MemoryEntry};
use oemstream::pipeline::{BackendSpec, Pipeline, PipelineConfig, PipelineEvent, PromptSet, Query, SpecFactory, StreamInput};
use oemstream::Candidates;
use proptest::prelude::*;

fn frames_from_gaps(gaps_ms: &[u64]) -> Vec<Frame> {
    let mut t = 0;
    gaps_ms
        .iter()
        .enumerate()
        .map(|(i, g)| {
            if i > 0 {
                t += g;
            }
            Frame {
                index: i,
                timestamp: Duration::from_millis(t),
                payload_ref: format!("f{i}"),
                height: None,
                width: None,
            }
        })
        .collect()
}

fn entry(k: usize) -> MemoryEntry {
    MemoryEntry {
        clip_index: k,
        clip_start: (k - 1) as f64 * 15.0,
        clip_end: k as f64 * 15.0,
        text: format!("entry {k}"),
        gen_time: 1.0,
        output_tokens: 1,
        tokens_per_second: 1.0,
        backend_id: "mock".into(),
        partial: false,
        failure: None,
    }
}

proptest! {
    #[test]
    fn clips_partition_the_span(gaps in prop::collection::vec(1u64..900, 1..400), clip_s in 1u64..20, fps in 0.5f64..8.0) {
        let frames = frames_from_gaps(&gaps);
        let clip_len = Duration::from_secs(clip_s);
        let clips = segment_stream(&frames, clip_len, fps).unwrap();
        prop_assert!(!clips.is_empty());
        prop_assert_eq!(clips[0].start_time, Duration::ZERO);
        for (i, c) in clips.iter().enumerate() {
            prop_assert_eq!(c.index, i + 1);
            prop_assert_eq!(c.duration, c.end_time - c.start_time);
            prop_assert!(c.duration <= clip_len);
            prop_assert_eq!(c.partial, c.duration < clip_len);
            if i + 1 < clips.len() {
                prop_assert_eq!(c.end_time, clips[i + 1].start_time);
                prop_assert!(!c.partial);
            }
        }
        prop_assert!(clips.last().unwrap().end_time > frames.last().unwrap().timestamp);
    }

    #[test]
    fn subsampling_keeps_ordered_source_frames(gaps in prop::collection::vec(1u64..900, 1..400), fps in 0.5f64..8.0) {
        let frames = frames_from_gaps(&gaps);
        let clips = segment_stream(&frames, Duration::from_secs(5), fps).unwrap();
        let mut prev: Option<usize> = None;
        for c in &clips {
            let grid = (c.duration.as_secs_f64() * fps - 1e-9).ceil() as usize;
            prop_assert!(c.frames.len() <= grid.max(1));
            for f in &c.frames {
                prop_assert!(f.timestamp >= c.start_time && f.timestamp < c.end_time);
                prop_assert_eq!(&frames[f.index], f);
                prop_assert!(prev.is_none_or(|p| f.index > p));
                prev = Some(f.index);
            }
        }
    }

    #[test]
    fn dense_sources_fill_every_grid_slot(secs in 1u64..120, src_fps in prop::sample::select(vec![4.0, 8.0, 10.0, 30.0])) {
        let frames = SyntheticSource::new(Duration::from_secs(secs), src_fps).frames();
        for fps in [1.0, 2.0] {
            for c in segment_stream(&frames, Duration::from_secs(15), fps).unwrap() {
                let want = (c.duration.as_secs_f64() * fps - 1e-9).ceil() as usize;
                prop_assert_eq!(c.frames.len(), want);
            }
        }
    }

    #[test]
    fn schedule_delivers_in_order(secs in 1u64..200) {
        let frames = SyntheticSource::new(Duration::from_secs(secs), 2.0).frames();
        let clips = segment_stream(&frames, Duration::from_secs(15), 2.0).unwrap();
        let mut schedule = ClipSchedule::new(clips.clone());
        let clock = ReplayClock::start(ReplayMode::AsFastAsPossible);
        let mut got = Vec::new();
        while let Some(c) = schedule.next_blocking(&clock) {
            got.push(c);
        }
        prop_assert_eq!(got, clips);
        prop_assert_eq!(schedule.remaining(), 0);
    }

    #[test]
    fn snapshots_are_prefixes(n in 0usize..200, cuts in prop::collection::vec(0u64..220, 0..20)) {
        let (mut writer, reader) = memory_log("s");
        let mut snaps = Vec::new();
        for k in 1..=n {
            writer.append(entry(k), Duration::from_secs(k as u64)).unwrap();
            if k % 7 == 0 {
                snaps.push(reader.snapshot());
            }
        }
        let all = reader.snapshot();
        prop_assert_eq!(all.len(), n);
        for s in snaps {
            prop_assert!(s.entries().zip(all.entries()).all(|(a, b)| a == b));
        }
        for t in cuts {
            let view = all.until(Duration::from_secs(t));
            prop_assert_eq!(view.len(), (1..=n).filter(|k| *k as u64 <= t).count());
            prop_assert!(view.entries().zip(all.entries()).all(|(a, b)| a == b));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn simulated_runs_keep_event_order(latencies in prop::collection::vec(0u64..40_000, 1..25), asks in prop::collection::vec(0u64..400, 0..6)) {
        let n = latencies.len() as u64;
        let frames = SyntheticSource::new(Duration::from_secs(15 * n), 2.0).frames();
        let clips = segment_stream(&frames, Duration::from_secs(15), 2.0).unwrap();
        let script = MockScript {
            describe_latency: LatencyModel::Scripted(latencies.iter().map(|ms| *ms as f64 / 1000.0).collect()),
            ..Default::default()
        };
        let spec = BackendSpec::Mock { profile: BackendProfile::new("mock://", "m"), script };
        let f = SpecFactory::new(spec.clone(), spec);
        let input = StreamInput::Clips { stream_id: "s".into(), clips };
        let p = Pipeline::start(&PipelineConfig::default(), input, ReplayMode::Simulated, &f, 0, &PromptSet::default()).unwrap();
        let c = Candidates::from_texts(vec!["a", "b", "c", "d"]).unwrap();
        let mut times: Vec<f64> = asks.iter().map(|t| *t as f64).collect();
        times.sort_by(f64::total_cmp);
        let tickets: Vec<_> = times.iter().enumerate()
            .map(|(i, t)| p.submit_query(Query::new(format!("q{i}"), "what?", c.clone()).at(*t)).unwrap())
            .collect();
        for t in tickets {
            t.wait().unwrap();
        }
        let report = p.join().unwrap();

        let idx: Vec<usize> = report.memory.entries.iter().map(|e| e.clip_index).collect();
        prop_assert_eq!(idx, (1..=n as usize).collect::<Vec<_>>());

        let at: Vec<f64> = report.events.iter().map(PipelineEvent::at).collect();
        prop_assert!(at.windows(2).all(|w| w[0] <= w[1]));

        let completions: Vec<usize> = report.events.iter()
            .filter_map(|e| match e { PipelineEvent::Completion { k, .. } => Some(*k), _ => None })
            .collect();
        prop_assert_eq!(completions, (1..=n as usize).collect::<Vec<_>>());

        let used: Vec<usize> = report.answers.iter().map(|a| a.memory_length_used).collect();
        prop_assert!(used.windows(2).all(|w| w[0] <= w[1]));
        for a in &report.answers {
            prop_assert!(a.ttft <= a.total_time);
        }
    }
}
