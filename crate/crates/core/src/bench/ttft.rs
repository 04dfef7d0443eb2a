use serde::{Deserialize, Serialize};

use super::{BenchError, MeanStd};
use crate::backend::{AnswerRequest, Backend};
use crate::memory::{RenderOptions, TextualMemory};
use crate::prompts::{build_reasoner_prompt, Candidates, ReasonerPromptTemplate};

/// A memory plus one question to ask about it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtftFixture {
    pub memory: TextualMemory,
    pub question: String,
    pub candidates: Candidates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtftReport {
    pub n: usize,
    pub failures: usize,
    /// Seconds, over successful samples.
    pub ttft: MeanStd,
    pub samples: Vec<f64>,
}

/// Sends `n` single-token answer requests, cycling through `fixtures`, and
/// aggregates the time to first token.
pub fn measure_ttft(
    backend: &dyn Backend,
    template: &ReasonerPromptTemplate,
    fixtures: &[TtftFixture],
    n: usize,
) -> Result<TtftReport, BenchError> {
    if n == 0 {
        return Err(BenchError::Precondition("n_queries must be at least 1".into()));
    }
    if fixtures.is_empty() {
        return Err(BenchError::Precondition("at least one memory fixture is required".into()));
    }
    let requests = fixtures
        .iter()
        .map(|f| {
            let memory_text = f.memory.render_context(RenderOptions::default());
            let prompt = build_reasoner_prompt(template, &memory_text, &f.question, &f.candidates)
                .map_err(|e| BenchError::Precondition(e.to_string()))?;
            Ok(AnswerRequest { prompt, memory_text, question: f.question.clone(), candidates: f.candidates.clone() })
        })
        .collect::<Result<Vec<_>, BenchError>>()?;

    let mut samples = Vec::with_capacity(n);
    let mut failures = 0;
    let mut last = String::new();
    for i in 0..n {
        match backend.answer_stream(&requests[i % requests.len()], 1) {
            Ok(a) => samples.push(a.first_token_time),
            Err(e) => {
                failures += 1;
                last = e.to_string();
            }
        }
    }
    let Some(ttft) = MeanStd::of(&samples) else {
        return Err(BenchError::CampaignFailed { failures, last });
    };
    Ok(TtftReport { n, failures, ttft, samples })
}
