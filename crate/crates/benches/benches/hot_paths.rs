use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use oemstream::bench::parse_answer;
use oemstream::ingest::{segment_stream, SyntheticSource};
use oemstream::memory::{memory_log, MemoryEntry, RenderOptions, TextualMemory};

fn entry(k: usize) -> MemoryEntry {
    MemoryEntry {
        clip_index: k,
        clip_start: (k - 1) as f64 * 15.0,
        clip_end: k as f64 * 15.0,
        text: "I am in the kitchen. I pick up the mug next to the sink. I put down the keys on the table.".into(),
        gen_time: 9.3,
        output_tokens: 24,
        tokens_per_second: 2.6,
        backend_id: "mock:2b".into(),
        partial: false,
        failure: None,
    }
}

fn memory_paths(c: &mut Criterion) {
    c.bench_function("memory_append_1k", |b| {
        b.iter_batched(
            || memory_log("s"),
            |(mut w, r)| {
                for k in 1..=1000 {
                    w.append(entry(k), Duration::from_secs(k as u64)).unwrap();
                }
                r
            },
            BatchSize::SmallInput,
        )
    });
    let (mut w, r) = memory_log("s");
    for k in 1..=2000 {
        w.append(entry(k), Duration::from_secs(k as u64)).unwrap();
    }
    c.bench_function("memory_snapshot_2k", |b| b.iter(|| black_box(r.snapshot()).len()));
    c.bench_function("memory_snapshot_until", |b| {
        let s = r.snapshot();
        b.iter(|| s.until(black_box(Duration::from_secs(1234))).len())
    });

    let mut m = TextualMemory::new("s");
    for k in 1..=240 {
        m.append(entry(k)).unwrap();
    }
    c.bench_function("render_context_1h", |b| b.iter(|| m.render_context(RenderOptions::default()).len()));
}

fn ingest(c: &mut Criterion) {
    let frames = SyntheticSource { jitter: 0.2, seed: 3, ..SyntheticSource::new(Duration::from_secs(3600), 30.0) }.frames();
    c.bench_function("segment_1h_30fps_to_2fps", |b| {
        b.iter(|| segment_stream(black_box(&frames), Duration::from_secs(15), 2.0).unwrap().len())
    });
}

fn answers(c: &mut Criterion) {
    let raws = ["B", " (c).", "**D**", "answer", "a", "E", "\"A\"", ""];
    c.bench_function("parse_answer", |b| b.iter(|| raws.iter().filter_map(|r| parse_answer(black_box(r))).count()));
}

criterion_group!(benches, memory_paths, ingest, answers);
criterion_main!(benches);
