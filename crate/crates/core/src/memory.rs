//! Append-only textual memory.
//!
//! [`TextualMemory`] is the plain ordered log of clip descriptions. For the
//! live pipeline, [`memory_log`] splits it into one [`MemoryWriter`] and any
//! number of [`MemoryReader`]s; readers take [`MemorySnapshot`]s that never
//! change after creation.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("expected clip index {expected}, got {got}")]
    Sequencing { expected: usize, got: usize },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    Load { path: String, line: usize, reason: String },
}

/// One clip's description plus generation statistics. Times are seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    #[serde(rename = "k")]
    pub clip_index: usize,
    pub clip_start: f64,
    pub clip_end: f64,
    pub text: String,
    pub gen_time: f64,
    pub output_tokens: u64,
    pub tokens_per_second: f64,
    pub backend_id: String,
    pub partial: bool,
    /// Set when no description was produced (backend failure, timeout, skipped clip).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl MemoryEntry {
    pub fn is_failure(&self) -> bool {
        self.failure.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TextualMemory {
    pub stream_id: String,
    pub entries: Vec<MemoryEntry>,
}

impl TextualMemory {
    pub fn new(stream_id: impl Into<String>) -> Self {
        Self { stream_id: stream_id.into(), entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn next_index(&self) -> usize {
        self.entries.len() + 1
    }

    pub fn append(&mut self, entry: MemoryEntry) -> Result<(), MemoryError> {
        check_sequence(self.entries.len(), &entry)?;
        self.entries.push(entry);
        Ok(())
    }

    pub fn render_context(&self, opts: RenderOptions) -> String {
        render_entries(self.entries.iter(), opts)
    }

    /// Writes one JSON object per line.
    pub fn persist(&self, path: impl AsRef<Path>) -> Result<(), MemoryError> {
        let path = path.as_ref();
        let io_err = |source| MemoryError::Io { path: path.display().to_string(), source };
        let file = std::fs::File::create(path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        for e in &self.entries {
            let line = serde_json::to_string(e).expect("memory entries always serialize");
            writeln!(w, "{line}").map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    /// Reads a JSONL memory file. The stream id is taken from the file stem.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, MemoryError> {
        let path = path.as_ref();
        let shown = path.display().to_string();
        let file = std::fs::File::open(path).map_err(|source| MemoryError::Io { path: shown.clone(), source })?;
        let stream_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let mut mem = TextualMemory::new(stream_id);
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|source| MemoryError::Io { path: shown.clone(), source })?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: MemoryEntry = serde_json::from_str(&line).map_err(|e| MemoryError::Load {
                path: shown.clone(),
                line: line_no,
                reason: e.to_string(),
            })?;
            mem.append(entry).map_err(|e| MemoryError::Load {
                path: shown.clone(),
                line: line_no,
                reason: e.to_string(),
            })?;
        }
        Ok(mem)
    }
}

fn check_sequence(len: usize, entry: &MemoryEntry) -> Result<(), MemoryError> {
    let expected = len + 1;
    if entry.clip_index != expected {
        return Err(MemoryError::Sequencing { expected, got: entry.clip_index });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderOptions {
    /// Prefix each block with `[clip k | start–end s]`.
    pub headers: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { headers: true }
    }
}

fn fmt_secs(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Context block for a single entry.
pub fn render_block(e: &MemoryEntry, opts: RenderOptions) -> String {
    let mut out = String::new();
    if opts.headers {
        let _ = writeln!(out, "[clip {} | {}–{} s]", e.clip_index, fmt_secs(e.clip_start), fmt_secs(e.clip_end));
    }
    if e.is_failure() {
        out.push_str("(no description available)");
    } else {
        out.push_str(e.text.trim_end());
    }
    out
}

fn render_entries<'a>(entries: impl Iterator<Item = &'a MemoryEntry>, opts: RenderOptions) -> String {
    entries.map(|e| render_block(e, opts)).collect::<Vec<_>>().join("\n\n")
}

#[derive(Debug, Clone)]
struct Committed {
    entry: Arc<MemoryEntry>,
    committed_at: Duration,
}

#[derive(Debug)]
struct Shared {
    stream_id: String,
    log: Mutex<Arc<Vec<Committed>>>,
    appended: Condvar,
    closed: Mutex<bool>,
}

/// Creates a shared memory log with its unique writer.
pub fn memory_log(stream_id: impl Into<String>) -> (MemoryWriter, MemoryReader) {
    let shared = Arc::new(Shared {
        stream_id: stream_id.into(),
        log: Mutex::new(Arc::new(Vec::new())),
        appended: Condvar::new(),
        closed: Mutex::new(false),
    });
    (MemoryWriter { shared: shared.clone() }, MemoryReader { shared })
}

/// The single writer of a shared log. Not `Clone`.
#[derive(Debug)]
pub struct MemoryWriter {
    shared: Arc<Shared>,
}

impl MemoryWriter {
    /// Appends an entry, stamping it with the writer's clock time. Snapshots
    /// taken earlier keep their old contents.
    pub fn append(&mut self, entry: MemoryEntry, committed_at: Duration) -> Result<(), MemoryError> {
        let mut log = self.shared.log.lock().unwrap();
        check_sequence(log.len(), &entry)?;
        Arc::make_mut(&mut log).push(Committed { entry: Arc::new(entry), committed_at });
        drop(log);
        self.shared.appended.notify_all();
        Ok(())
    }

    pub fn reader(&self) -> MemoryReader {
        MemoryReader { shared: self.shared.clone() }
    }

    pub fn len(&self) -> usize {
        self.shared.log.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Marks the log complete; wakes any reader waiting for more entries.
    pub fn close(self) {
        drop(self);
    }
}

impl Drop for MemoryWriter {
    fn drop(&mut self) {
        *self.shared.closed.lock().unwrap() = true;
        let _guard = self.shared.log.lock().unwrap();
        self.shared.appended.notify_all();
    }
}

#[derive(Debug, Clone)]
pub struct MemoryReader {
    shared: Arc<Shared>,
}

impl MemoryReader {
    pub fn snapshot(&self) -> MemorySnapshot {
        let log = self.shared.log.lock().unwrap().clone();
        let len = log.len();
        MemorySnapshot { stream_id: self.shared.stream_id.clone(), log, len }
    }

    pub fn stream_id(&self) -> &str {
        &self.shared.stream_id
    }

    pub fn len(&self) -> usize {
        self.shared.log.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_closed(&self) -> bool {
        *self.shared.closed.lock().unwrap()
    }

    /// Blocks until the log holds more than `seen` entries, the writer is
    /// gone, or `timeout` elapses. Returns the current length.
    pub fn wait_beyond(&self, seen: usize, timeout: Duration) -> usize {
        let log = self.shared.log.lock().unwrap();
        let (log, _) = self
            .shared
            .appended
            .wait_timeout_while(log, timeout, |l| l.len() <= seen && !*self.shared.closed.lock().unwrap())
            .unwrap();
        log.len()
    }
}

/// Immutable view of the entries appended before it was taken.
#[derive(Debug, Clone)]
pub struct MemorySnapshot {
    stream_id: String,
    log: Arc<Vec<Committed>>,
    len: usize,
}

impl MemorySnapshot {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn stream_id(&self) -> &str {
        &self.stream_id
    }

    pub fn entries(&self) -> impl DoubleEndedIterator<Item = &MemoryEntry> + ExactSizeIterator {
        self.log[..self.len].iter().map(|c| c.entry.as_ref())
    }

    pub fn get(&self, i: usize) -> Option<&MemoryEntry> {
        self.log[..self.len].get(i).map(|c| c.entry.as_ref())
    }

    /// Restricts the view to entries committed at or before `t`.
    pub fn until(&self, t: Duration) -> MemorySnapshot {
        let len = self.log[..self.len].partition_point(|c| c.committed_at <= t);
        MemorySnapshot { stream_id: self.stream_id.clone(), log: self.log.clone(), len }
    }

    /// The first `n` entries of the view.
    pub fn prefix(&self, n: usize) -> MemorySnapshot {
        MemorySnapshot { stream_id: self.stream_id.clone(), log: self.log.clone(), len: n.min(self.len) }
    }

    pub fn render_context(&self, opts: RenderOptions) -> String {
        render_entries(self.entries(), opts)
    }

    pub fn to_memory(&self) -> TextualMemory {
        TextualMemory { stream_id: self.stream_id.clone(), entries: self.entries().cloned().collect() }
    }
}

/// Renders memory to reasoner context text.
pub fn render_context(view: &MemorySnapshot, opts: RenderOptions) -> String {
    view.render_context(opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn entry(k: usize) -> MemoryEntry {
        MemoryEntry {
            clip_index: k,
            clip_start: (k - 1) as f64 * 15.0,
            clip_end: k as f64 * 15.0,
            text: format!("I did thing {k}."),
            gen_time: 9.31,
            output_tokens: 290,
            tokens_per_second: 31.42,
            backend_id: "mock".into(),
            partial: false,
            failure: None,
        }
    }

    #[test]
    fn append_to_empty() {
        let mut m = TextualMemory::new("s");
        m.append(entry(1)).unwrap();
        assert_eq!(m.len(), 1);
    }

    #[test]
    fn gap_is_a_sequencing_error() {
        let mut m = TextualMemory::new("s");
        for k in 1..=3 {
            m.append(entry(k)).unwrap();
        }
        let err = m.append(entry(5)).unwrap_err();
        assert!(matches!(err, MemoryError::Sequencing { expected: 4, got: 5 }));
        assert!(m.append(entry(3)).is_err());
    }

    #[test]
    fn thousand_sequential_appends() {
        let (mut w, r) = memory_log("s");
        for k in 1..=1000 {
            w.append(entry(k), Duration::from_secs(k as u64)).unwrap();
        }
        let snap = r.snapshot();
        assert_eq!(snap.len(), 1000);
        assert!(snap.entries().enumerate().all(|(i, e)| e.clip_index == i + 1));
    }

    #[test]
    fn snapshot_is_isolated_from_later_appends() {
        let (mut w, r) = memory_log("s");
        w.append(entry(1), Duration::ZERO).unwrap();
        w.append(entry(2), Duration::ZERO).unwrap();
        let snap = r.snapshot();
        let again = r.snapshot();
        w.append(entry(3), Duration::ZERO).unwrap();
        assert_eq!(snap.len(), 2);
        assert_eq!(snap.to_memory(), again.to_memory());
        assert_eq!(r.snapshot().len(), 3);
    }

    #[test]
    fn until_filters_by_commit_time() {
        let (mut w, r) = memory_log("s");
        for k in 1..=4 {
            w.append(entry(k), Duration::from_secs(10 * k as u64)).unwrap();
        }
        assert_eq!(r.snapshot().until(Duration::from_secs(25)).len(), 2);
        assert_eq!(r.snapshot().until(Duration::from_secs(30)).len(), 3);
        assert_eq!(r.snapshot().until(Duration::from_secs(5)).len(), 0);
    }

    #[test]
    fn render_empty_is_empty_string() {
        let (_w, r) = memory_log("s");
        assert_eq!(r.snapshot().render_context(RenderOptions::default()), "");
    }

    #[test]
    fn render_orders_blocks_and_headers_show_clip_span() {
        let mut m = TextualMemory::new("s");
        for k in 1..=3 {
            m.append(entry(k)).unwrap();
        }
        let text = m.render_context(RenderOptions::default());
        for k in 1..=3u32 {
            let header = format!("[clip {k} | {}–{} s]", (k - 1) * 15, k * 15);
            assert!(text.contains(&header), "missing {header} in {text}");
        }
        assert!(text.find("thing 1").unwrap() < text.find("thing 2").unwrap());
        let bare = m.render_context(RenderOptions { headers: false });
        assert!(!bare.contains("[clip"));
    }

    #[test]
    fn persist_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stream-a.jsonl");
        let mut m = TextualMemory::new("stream-a");
        m.append(entry(1)).unwrap();
        let mut failed = entry(2);
        failed.text.clear();
        failed.failure = Some("timeout after 30s".into());
        m.append(failed).unwrap();
        m.append(entry(3)).unwrap();
        m.persist(&path).unwrap();
        assert_eq!(TextualMemory::load(&path).unwrap(), m);
    }

    #[test]
    fn jsonl_field_layout() {
        let line = serde_json::to_string(&entry(1)).unwrap();
        assert_eq!(
            line,
            r#"{"k":1,"clip_start":0.0,"clip_end":15.0,"text":"I did thing 1.","gen_time":9.31,"output_tokens":290,"tokens_per_second":31.42,"backend_id":"mock","partial":false}"#
        );
    }

    #[test]
    fn truncated_last_line_reports_its_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let mut m = TextualMemory::new("s");
        m.append(entry(1)).unwrap();
        m.append(entry(2)).unwrap();
        m.persist(&path).unwrap();
        let mut raw = std::fs::read_to_string(&path).unwrap();
        raw.push_str(r#"{"k":3,"clip_start":30.0,"clip_e"#);
        std::fs::write(&path, raw).unwrap();
        match TextualMemory::load(&path) {
            Err(MemoryError::Load { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn reader_wakes_on_append_and_on_close() {
        let (mut w, r) = memory_log("s");
        let r2 = r.clone();
        let h = std::thread::spawn(move || r2.wait_beyond(0, Duration::from_secs(5)));
        std::thread::sleep(Duration::from_millis(20));
        w.append(entry(1), Duration::ZERO).unwrap();
        assert_eq!(h.join().unwrap(), 1);
        w.close();
        assert!(r.is_closed());
        assert_eq!(r.wait_beyond(1, Duration::from_secs(5)), 1);
    }
}
