use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::runner::BenchmarkReport;
use super::sweep::SweepRow;
use super::ttft::TtftReport;
use super::{BenchError, MeanStd};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub label: String,
    pub correct: Option<usize>,
    pub total: Option<usize>,
    /// Percent.
    pub accuracy: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtftRow {
    pub label: String,
    pub ttft: Option<MeanStd>,
    /// Short failure label shown in place of a value, e.g. "OOM".
    pub failure: Option<String>,
    /// Response budget in seconds the mean is compared against.
    pub budget: f64,
}

impl TtftRow {
    pub fn from_result(label: impl Into<String>, result: &Result<TtftReport, BenchError>, budget: f64) -> Self {
        let label = label.into();
        match result {
            Ok(r) => Self { label, ttft: Some(r.ttft), failure: None, budget },
            Err(e) => Self { label, ttft: None, failure: Some(short_failure(&e.to_string())), budget },
        }
    }
}

fn short_failure(reason: &str) -> String {
    if reason.to_ascii_lowercase().contains("out of memory") || reason.contains("OOM") {
        "OOM".into()
    } else {
        "failed".into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "rows", rename_all = "snake_case")]
pub enum TableRows {
    Sweep(Vec<SweepRow>),
    Accuracy(Vec<AccuracyRow>),
    Ttft(Vec<TtftRow>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: TableRows,
    /// Index of the selected row, at most one.
    pub selection: Option<usize>,
}

impl MetricsTable {
    pub fn new(rows: TableRows) -> Self {
        Self { rows, selection: None }
    }

    pub fn with_selection(mut self, index: usize) -> Self {
        self.selection = Some(index);
        self
    }

    pub fn len(&self) -> usize {
        match &self.rows {
            TableRows::Sweep(r) => r.len(),
            TableRows::Accuracy(r) => r.len(),
            TableRows::Ttft(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sweep_rows(&self) -> Option<&[SweepRow]> {
        match &self.rows {
            TableRows::Sweep(r) => Some(r),
            _ => None,
        }
    }

    /// One row per seed followed by the mean±std summary.
    pub fn accuracy(report: &BenchmarkReport) -> Self {
        let mut rows: Vec<AccuracyRow> = report
            .per_seed
            .iter()
            .map(|s| AccuracyRow {
                label: format!("seed {}", s.seed),
                correct: Some(s.correct),
                total: Some(s.total),
                accuracy: MeanStd { mean: s.accuracy, std: 0.0, n: 1 },
            })
            .collect();
        rows.push(AccuracyRow { label: "all".into(), correct: None, total: None, accuracy: report.accuracy });
        Self::new(TableRows::Accuracy(rows))
    }

    /// Whether row `i` fails its budget predicate.
    pub fn is_violation(&self, i: usize) -> bool {
        match &self.rows {
            TableRows::Sweep(r) => r[i].failure.is_none() && !r[i].compliant,
            TableRows::Ttft(r) => r[i].ttft.is_some_and(|t| t.mean >= r[i].budget),
            TableRows::Accuracy(_) => false,
        }
    }

    fn header(&self) -> Vec<&'static str> {
        match &self.rows {
            TableRows::Sweep(_) => vec![
                "sel",
                "quant",
                "model",
                "size_b",
                "fps",
                "res",
                "bs",
                "time_per_clip_s",
                "tok_per_s",
                "peak_mem_gb",
                "clips_over_budget",
                "flag",
            ],
            TableRows::Accuracy(_) => vec!["sel", "run", "correct", "total", "accuracy_pct", "flag"],
            TableRows::Ttft(_) => vec!["sel", "model", "ttft_s", "n", "flag"],
        }
    }

    fn cells(&self) -> Vec<Vec<String>> {
        let ms = |m: &Option<MeanStd>| m.map_or_else(|| "n/a".to_string(), |m| m.to_string());
        let opt = |v: Option<usize>| v.map_or_else(String::new, |v| v.to_string());
        let flag = |i: usize| if self.is_violation(i) { "VIOLATION".to_string() } else { String::new() };
        let sel = |i: usize| if self.selection == Some(i) { "*".to_string() } else { String::new() };
        match &self.rows {
            TableRows::Sweep(rows) => rows
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let failed = r.failure.is_some();
                    let value = |m: &Option<MeanStd>| if failed { "failed".to_string() } else { ms(m) };
                    vec![
                        sel(i),
                        r.quantization.clone(),
                        r.model_name.clone(),
                        r.model_size_b.map_or_else(String::new, |s| s.to_string()),
                        r.fps.to_string(),
                        r.resolution.to_string(),
                        r.batch_size.to_string(),
                        value(&r.time_per_clip),
                        value(&r.tokens_per_second),
                        value(&r.peak_memory_gb),
                        r.violating_fraction.map_or_else(|| "n/a".into(), |f| format!("{f:.2}")),
                        if failed { "FAILED".into() } else { flag(i) },
                    ]
                })
                .collect(),
            TableRows::Accuracy(rows) => rows
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    vec![sel(i), r.label.clone(), opt(r.correct), opt(r.total), r.accuracy.to_string(), flag(i)]
                })
                .collect(),
            TableRows::Ttft(rows) => rows
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let value = match (&r.ttft, &r.failure) {
                        (Some(t), _) => t.to_string(),
                        (None, Some(f)) => f.clone(),
                        (None, None) => "n/a".into(),
                    };
                    vec![sel(i), r.label.clone(), value, opt(r.ttft.map(|t| t.n)), flag(i)]
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableFormat {
    Csv,
    Markdown,
}

impl TableFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Markdown => "md",
        }
    }
}

impl FromStr for TableFormat {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            _ => Err(BenchError::UnknownFormat(s.to_string())),
        }
    }
}

fn md_cell(s: &str) -> String {
    s.replace('|', "\\|")
}

/// Renders a table. Both formats carry the same cell strings, so numbers
/// read back from either are identical.
pub fn emit_table(table: &MetricsTable, format: TableFormat) -> Result<String, BenchError> {
    let header = table.header();
    let rows = table.cells();
    match format {
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let to_io = |e: csv::Error| BenchError::Io(std::io::Error::other(e));
            w.write_record(&header).map_err(to_io)?;
            for row in &rows {
                w.write_record(row).map_err(to_io)?;
            }
            let bytes = w.into_inner().map_err(|e| BenchError::Io(std::io::Error::other(e.to_string())))?;
            Ok(String::from_utf8(bytes).expect("cells are utf-8"))
        }
        TableFormat::Markdown => {
            let mut out = format!("| {} |\n", header.join(" | "));
            out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
            for row in &rows {
                let cells: Vec<String> = row.iter().map(|c| md_cell(c)).collect();
                out.push_str(&format!("| {} |\n", cells.join(" | ")));
            }
            Ok(out)
        }
    }
}

pub fn write_table(table: &MetricsTable, format: TableFormat, path: impl AsRef<Path>) -> Result<(), BenchError> {
    std::fs::write(path, emit_table(table, format)?)?;
    Ok(())
}
