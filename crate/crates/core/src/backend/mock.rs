//! Deterministic mock backend.
//!
//! Latencies are "spent" by sleeping on the caller's clock, so on a virtual
//! clock a 15 s description costs nothing, while on a wall clock it really
//! takes 15 s (divided by the replay acceleration factor).

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    check_describe_preconditions, AnswerRequest, Backend, BackendError, BackendProfile, Capabilities,
    Description, GenerationError, GenerationStats, StreamedAnswer, Support,
};
use crate::clock::Clock;
use crate::ingest::{Clip, ReplayClock};
use crate::prompts::OptionLetter;

/// Per-call latency distribution, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyModel {
    Constant(f64),
    /// Normal distribution clamped at zero.
    Gaussian { mean: f64, std: f64 },
    /// Cycles through the listed values in order.
    Scripted(Vec<f64>),
}

impl LatencyModel {
    /// `n` values (n even) whose sample mean is `mean` and sample standard
    /// deviation (n-1 denominator) is `std`.
    pub fn scripted_mean_std(mean: f64, std: f64, n: usize) -> Self {
        assert!(n >= 2 && n.is_multiple_of(2), "scripted latencies need an even count");
        let half = std * ((n as f64 - 1.0) / n as f64).sqrt();
        Self::Scripted((0..n).map(|i| if i % 2 == 0 { mean + half } else { mean - half }).collect())
    }

    /// Mean of the clamped distribution (exact for constant and scripted models).
    pub fn nominal_mean(&self) -> f64 {
        match self {
            Self::Constant(v) => *v,
            Self::Gaussian { mean, .. } => *mean,
            Self::Scripted(v) => v.iter().sum::<f64>() / v.len().max(1) as f64,
        }
    }
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self::Constant(1.0)
    }
}

#[derive(Debug)]
struct Sampler {
    model: LatencyModel,
    normal: Option<Normal<f64>>,
    rng: ChaCha8Rng,
    pos: usize,
}

impl Sampler {
    fn new(model: LatencyModel, seed: u64, stream: u64) -> Self {
        let normal = match &model {
            LatencyModel::Gaussian { mean, std } => Some(Normal::new(*mean, std.max(0.0)).expect("finite std")),
            _ => None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { model, normal, rng, pos: 0 }
    }

    fn next(&mut self) -> Duration {
        let secs = match &self.model {
            LatencyModel::Constant(v) => *v,
            LatencyModel::Gaussian { .. } => self.normal.as_ref().unwrap().sample(&mut self.rng),
            LatencyModel::Scripted(values) => {
                let v = values.get(self.pos % values.len().max(1)).copied().unwrap_or(0.0);
                self.pos += 1;
                v
            }
        };
        Duration::from_secs_f64(secs.max(0.0))
    }
}

/// Source of the mock's clip descriptions.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CannedTexts {
    /// Fixed text for specific clip indices.
    #[serde(default)]
    pub script: BTreeMap<usize, String>,
}

const ROOMS: &[&str] = &["kitchen", "living room", "hallway", "garage", "bedroom", "office", "garden", "bathroom"];
const ACTIONS: &[&str] = &["pick up", "put down", "move", "wash", "open", "close", "carry", "look at"];
const OBJECTS: &[&str] = &[
    "keys", "mug", "phone", "scissors", "laptop", "wallet", "remote", "bottle", "notebook", "knife",
];
const PLACES: &[&str] = &[
    "on the table", "in the drawer", "next to the sink", "on the shelf", "in my bag", "on the sofa",
    "on the counter", "in the box",
];

impl CannedTexts {
    pub fn text_for(&self, seed: u64, clip: &Clip) -> String {
        if let Some(t) = self.script.get(&clip.index) {
            return t.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (clip.index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let room = ROOMS[rng.random_range(0..ROOMS.len())];
        let sentences = rng.random_range(1..=3);
        let mut out = format!("I am in the {room}.");
        for _ in 0..sentences {
            let action = ACTIONS[rng.random_range(0..ACTIONS.len())];
            let object = OBJECTS[rng.random_range(0..OBJECTS.len())];
            let place = PLACES[rng.random_range(0..PLACES.len())];
            out.push_str(&format!(" I {action} the {object} {place}."));
        }
        out
    }
}

/// Maps (memory, question, candidates) to an option letter.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerPolicy {
    /// First candidate (A to D) whose text occurs in the memory, ignoring case; otherwise A.
    #[default]
    Containment,
    Fixed(OptionLetter),
    /// Looks the question text up in a table; unknown questions get A.
    Keyed(BTreeMap<String, OptionLetter>),
    /// Uses the ground-truth key installed with [`MockBackend::with_answer_key`].
    AlwaysCorrect,
    /// Seeded letter drawn uniformly per (seed, question).
    UniformRandom,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn default_decode() -> f64 {
    0.03
}

fn default_context() -> usize {
    32_768
}

fn default_describe_latency() -> LatencyModel {
    LatencyModel::Constant(5.0)
}

fn default_ttft() -> LatencyModel {
    LatencyModel::Constant(0.2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_describe_latency")]
    pub describe_latency: LatencyModel,
    #[serde(default = "default_ttft")]
    pub ttft: LatencyModel,
    /// Seconds per token after the first.
    #[serde(default = "default_decode")]
    pub decode_per_token: f64,
    #[serde(default)]
    pub texts: CannedTexts,
    #[serde(default)]
    pub answer_policy: AnswerPolicy,
    #[serde(default = "default_context")]
    pub context_limit: usize,
    #[serde(default)]
    pub peak_memory_bytes: Option<u64>,
    /// Clip indices whose description fails with a transport error.
    #[serde(default)]
    pub fail_clips: BTreeSet<usize>,
    /// Reject every request with this reason (e.g. "OOM").
    #[serde(default)]
    pub reject_all: Option<String>,
}

impl Default for MockScript {
    fn default() -> Self {
        Self {
            seed: 0,
            describe_latency: default_describe_latency(),
            ttft: default_ttft(),
            decode_per_token: default_decode(),
            texts: CannedTexts::default(),
            answer_policy: AnswerPolicy::default(),
            context_limit: default_context(),
            peak_memory_bytes: None,
            fail_clips: BTreeSet::new(),
            reject_all: None,
        }
    }
}

const DESCRIBE_STREAM: u64 = 1;
const ANSWER_STREAM: u64 = 2;

/// Seeded backend whose describe and answer paths draw from separate RNG
/// streams, so interleaving the two workers never changes either's outputs.
#[derive(Debug)]
pub struct MockBackend {
    profile: BackendProfile,
    script: MockScript,
    clock: ReplayClock,
    describe_latency: Mutex<Sampler>,
    ttft: Mutex<Sampler>,
    answer_key: BTreeMap<String, OptionLetter>,
}

impl MockBackend {
    pub fn new(profile: BackendProfile, script: MockScript, clock: ReplayClock) -> Self {
        let describe_latency = Mutex::new(Sampler::new(script.describe_latency.clone(), script.seed, DESCRIBE_STREAM));
        let ttft = Mutex::new(Sampler::new(script.ttft.clone(), script.seed, ANSWER_STREAM));
        Self { profile, script, clock, describe_latency, ttft, answer_key: BTreeMap::new() }
    }

    pub fn with_answer_key(mut self, key: BTreeMap<String, OptionLetter>) -> Self {
        self.answer_key = key;
        self
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    pub fn choose(&self, request: &AnswerRequest) -> OptionLetter {
        let q = request.question.as_str();
        match &self.script.answer_policy {
            AnswerPolicy::Containment => {
                let memory = request.memory_text.to_lowercase();
                request
                    .candidates
                    .iter()
                    .find(|(_, text)| {
                        let t = text.trim().to_lowercase();
                        !t.is_empty() && memory.contains(&t)
                    })
                    .map(|(l, _)| l)
                    .unwrap_or(OptionLetter::A)
            }
            AnswerPolicy::Fixed(l) => *l,
            AnswerPolicy::Keyed(key) => key.get(q).copied().unwrap_or(OptionLetter::A),
            AnswerPolicy::AlwaysCorrect => self.answer_key.get(q).copied().unwrap_or(OptionLetter::A),
            AnswerPolicy::UniformRandom => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.script.seed ^ fnv1a(q.as_bytes()));
                OptionLetter::from_index(rng.random_range(0..4)).unwrap()
            }
        }
    }
}

fn count_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

impl Backend for MockBackend {
    fn id(&self) -> String {
        format!("mock:{}", self.profile.model_name)
    }

    fn profile(&self) -> &BackendProfile {
        &self.profile
    }

    fn describe(
        &self,
        clips: &[Clip],
        prompt: &str,
    ) -> Result<Vec<Result<Description, GenerationError>>, BackendError> {
        check_describe_preconditions(&self.profile, clips, prompt)?;
        if let Some(reason) = &self.script.reject_all {
            return Ok(clips.iter().map(|_| Err(GenerationError::Rejected { reason: reason.clone() })).collect());
        }
        let latency = self.describe_latency.lock().unwrap().next();
        let timeout = self.profile.timeout();
        let start = self.clock.now();
        if latency > timeout {
            self.clock.sleep(timeout);
            let after = (self.clock.now() - start).as_secs_f64();
            return Ok(clips.iter().map(|_| Err(GenerationError::Timeout { after })).collect());
        }
        self.clock.sleep(latency);
        let wall = self.clock.now() - start;
        Ok(clips
            .iter()
            .map(|clip| {
                if self.script.fail_clips.contains(&clip.index) {
                    return Err(GenerationError::Transport { attempts: 2, reason: "scripted failure".into() });
                }
                let text = self.script.texts.text_for(self.script.seed, clip);
                let tokens = count_tokens(&text).max(1);
                let mut stats = GenerationStats::new(wall, wall / tokens as u32, tokens);
                stats.peak_memory_bytes = self.script.peak_memory_bytes;
                Ok(Description { text, stats })
            })
            .collect())
    }

    fn answer_stream(&self, request: &AnswerRequest, max_new_tokens: u32) -> Result<StreamedAnswer, GenerationError> {
        if let Some(reason) = &self.script.reject_all {
            return Err(GenerationError::Rejected { reason: reason.clone() });
        }
        let max_new_tokens = max_new_tokens.max(1) as usize;
        let letter = self.choose(request);
        let ttft = self.ttft.lock().unwrap().next();
        let timeout = self.profile.timeout();
        let start = self.clock.now();
        if ttft > timeout {
            self.clock.sleep(timeout);
            return Err(GenerationError::TtftTimeout { after: (self.clock.now() - start).as_secs_f64() });
        }
        self.clock.sleep(ttft);
        let first_token_time = self.clock.now() - start;

        let mut tokens = vec![letter.to_string()];
        if max_new_tokens > 1 {
            tokens.extend(
                request
                    .candidates
                    .get(letter)
                    .split_whitespace()
                    .take(max_new_tokens - 1)
                    .map(str::to_string),
            );
        }
        let extra = tokens.len() as u32 - 1;
        if extra > 0 {
            self.clock.sleep(Duration::from_secs_f64(self.script.decode_per_token) * extra);
        }
        let wall = self.clock.now() - start;
        let mut stats = GenerationStats::new(wall, first_token_time, tokens.len() as u64);
        stats.peak_memory_bytes = self.script.peak_memory_bytes;
        Ok(StreamedAnswer {
            first_token: tokens[0].clone(),
            first_token_time: first_token_time.as_secs_f64(),
            final_text: tokens.join(" "),
            stats,
        })
    }

    fn probe(&self) -> Result<Capabilities, BackendError> {
        Ok(Capabilities {
            streaming: Support::Yes,
            image_input: Support::Yes,
            context_limit: Some(self.script.context_limit),
            models: vec![self.profile.model_name.clone()],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{segment_stream, ReplayMode, SyntheticSource};
    use crate::prompts::Candidates;

    fn clips(n: u64) -> Vec<Clip> {
        let frames = SyntheticSource::new(Duration::from_secs(15 * n), 4.0).frames();
        segment_stream(&frames, Duration::from_secs(15), 2.0).unwrap()
    }

    fn mock(script: MockScript, batch: usize) -> MockBackend {
        let mut profile = BackendProfile::new("mock://", "mock-2b");
        profile.batch_size = batch;
        MockBackend::new(profile, script, ReplayClock::start(ReplayMode::Simulated))
    }

    fn request(memory: &str, question: &str, cands: [&str; 4]) -> AnswerRequest {
        AnswerRequest {
            prompt: "p".into(),
            memory_text: memory.into(),
            question: question.into(),
            candidates: Candidates::from_texts(cands.to_vec()).unwrap(),
        }
    }

    #[test]
    fn same_seed_same_text_and_latency() {
        let script = MockScript {
            seed: 7,
            describe_latency: LatencyModel::Gaussian { mean: 10.0, std: 2.0 },
            ..Default::default()
        };
        let c = clips(1);
        let a = mock(script.clone(), 1).describe(&c, "prompt").unwrap();
        let b = mock(script, 1).describe(&c, "prompt").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_results_follow_input_order() {
        let mut script = MockScript::default();
        script.texts.script.insert(1, "first clip".into());
        script.texts.script.insert(2, "second clip".into());
        let out = mock(script, 2).describe(&clips(2), "prompt").unwrap();
        let texts: Vec<_> = out.into_iter().map(|r| r.unwrap().text).collect();
        assert_eq!(texts, vec!["first clip", "second clip"]);
    }

    #[test]
    fn oversize_batch_is_a_precondition_error() {
        let err = mock(MockScript::default(), 1).describe(&clips(2), "prompt").unwrap_err();
        assert!(matches!(err, BackendError::Precondition(_)));
        let err = mock(MockScript::default(), 1).describe(&clips(1), " ").unwrap_err();
        assert!(matches!(err, BackendError::Precondition(_)));
    }

    #[test]
    fn containment_policy_picks_matching_candidate() {
        let m = mock(MockScript::default(), 1);
        let req = request(
            "I put the Keys On The Table and left.",
            "Where did I put the keys?",
            ["in the car", "keys on the table", "in the drawer", "on the sofa"],
        );
        let ans = m.answer_stream(&req, 1).unwrap();
        assert_eq!(ans.first_token, "B");
        assert_eq!(ans.final_text, "B");
    }

    #[test]
    fn single_token_answer_has_ttft_equal_total() {
        let script = MockScript { ttft: LatencyModel::Constant(0.41), ..Default::default() };
        let m = mock(script, 1);
        let ans = m.answer_stream(&request("", "q", ["a", "b", "c", "d"]), 1).unwrap();
        assert_eq!(ans.final_text.split_whitespace().count(), 1);
        assert!((ans.first_token_time - 0.41).abs() < 1e-9);
        assert!(ans.stats.ttft <= ans.stats.wall_time);
    }

    #[test]
    fn longer_answers_add_decode_time() {
        let m = mock(MockScript::default(), 1);
        let ans = m.answer_stream(&request("", "q", ["red mug", "b", "c", "d"]), 3).unwrap();
        assert_eq!(ans.final_text, "A red mug");
        assert!(ans.stats.wall_time > ans.stats.ttft);
    }

    #[test]
    fn latency_over_timeout_is_a_per_clip_timeout() {
        let script = MockScript { describe_latency: LatencyModel::Constant(90.0), ..Default::default() };
        let out = mock(script, 1).describe(&clips(1), "prompt").unwrap();
        assert!(matches!(out[0], Err(GenerationError::Timeout { after }) if (after - 60.0).abs() < 1e-9));
    }

    #[test]
    fn ttft_over_timeout_fails() {
        let script = MockScript { ttft: LatencyModel::Constant(120.0), ..Default::default() };
        let err = mock(script, 1).answer_stream(&request("", "q", ["a", "b", "c", "d"]), 1).unwrap_err();
        assert!(matches!(err, GenerationError::TtftTimeout { .. }));
    }

    #[test]
    fn scripted_mean_std_is_exact() {
        let LatencyModel::Scripted(v) = LatencyModel::scripted_mean_std(14.8, 1.91, 10) else { unreachable!() };
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - 14.8).abs() < 1e-12);
        assert!((var.sqrt() - 1.91).abs() < 1e-12);
    }

    #[test]
    fn uniform_random_depends_on_seed_and_question_only() {
        let script = MockScript { answer_policy: AnswerPolicy::UniformRandom, seed: 3, ..Default::default() };
        let m = mock(script.clone(), 1);
        let r = request("", "what?", ["a", "b", "c", "d"]);
        let first = m.choose(&r);
        for _ in 0..5 {
            assert_eq!(m.choose(&r), first);
        }
        assert_eq!(mock(script, 1).choose(&r), first);
    }

    #[test]
    fn probe_reports_configured_context() {
        let script = MockScript { context_limit: 4096, ..Default::default() };
        let caps = mock(script, 1).probe().unwrap();
        assert_eq!(caps.streaming, Support::Yes);
        assert_eq!(caps.context_limit, Some(4096));
    }
}
