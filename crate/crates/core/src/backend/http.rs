//! Chat-completions client with SSE token streaming.

use std::io::{BufRead, BufReader, Cursor};
use std::path::Path;
use std::time::Duration;

use base64::Engine;
use image::{DynamicImage, ImageFormat, Rgb, RgbImage};
use reqwest::blocking::Client;
use serde_json::{json, Value};
use tracing::{debug, warn};

use super::sse::{parse_chat_chunk, SseParser};
use super::{
    check_describe_preconditions, AnswerRequest, Backend, BackendError, BackendProfile, Capabilities,
    Description, GenerationError, GenerationStats, StreamedAnswer, Support,
};
use crate::clock::Clock;
use crate::ingest::{Clip, Frame, ReplayClock};

/// Transport errors are retried once; timeouts never are.
const MAX_ATTEMPTS: u32 = 2;

#[derive(Debug)]
pub struct HttpBackend {
    profile: BackendProfile,
    client: Client,
    clock: ReplayClock,
}

#[derive(Debug, Default)]
struct StreamOutcome {
    text: String,
    first_token: Option<(String, Duration)>,
    completion_tokens: Option<u64>,
    chunks: u64,
    finished: bool,
}

fn is_timeout(err: &(dyn std::error::Error + 'static)) -> bool {
    let mut cur: Option<&(dyn std::error::Error + 'static)> = Some(err);
    while let Some(e) = cur {
        if let Some(r) = e.downcast_ref::<reqwest::Error>() {
            if r.is_timeout() {
                return true;
            }
        }
        if let Some(io) = e.downcast_ref::<std::io::Error>() {
            if matches!(io.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock) {
                return true;
            }
        }
        cur = e.source();
    }
    false
}

impl HttpBackend {
    pub fn new(profile: BackendProfile, clock: ReplayClock) -> Result<Self, BackendError> {
        profile.validate()?;
        let client = Client::builder()
            .timeout(profile.timeout())
            .build()
            .map_err(|e| BackendError::Profile(e.to_string()))?;
        Ok(Self { profile, client, clock })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.profile.endpoint.trim_end_matches('/'), path)
    }

    /// Sends a streaming chat request and reads the event stream to the end.
    /// `start` is the clock time captured immediately before dispatch.
    fn stream_chat(&self, body: &Value, start: Duration) -> Result<StreamOutcome, GenerationError> {
        let url = self.url(&self.profile.chat_path);
        let mut attempts = 0;
        let response = loop {
            attempts += 1;
            match self.client.post(&url).json(body).send() {
                Ok(r) => break r,
                Err(e) if e.is_timeout() => {
                    return Err(GenerationError::Timeout { after: (self.clock.now() - start).as_secs_f64() })
                }
                Err(e) if attempts < MAX_ATTEMPTS => {
                    warn!(error = %e, "transport error, retrying");
                }
                Err(e) => return Err(GenerationError::Transport { attempts, reason: e.to_string() }),
            }
        };
        let status = response.status();
        if !status.is_success() {
            let text = response.text().unwrap_or_default();
            return Err(GenerationError::Rejected { reason: format!("HTTP {status}: {}", text.trim()) });
        }
        let is_event_stream = response
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .is_some_and(|v| v.starts_with("text/event-stream"));

        let mut out = StreamOutcome::default();
        if !is_event_stream {
            let raw = response.text().map_err(|e| self.read_error(&e, start, &out))?;
            let chunk = parse_chat_chunk(&raw).map_err(|e| GenerationError::Rejected { reason: e.to_string() })?;
            let at = self.clock.now() - start;
            if !chunk.content.is_empty() {
                let first = chunk.content.split_whitespace().next().unwrap_or_default().to_string();
                out.first_token = Some((first, at));
            }
            out.text = chunk.content;
            out.completion_tokens = chunk.completion_tokens;
            out.chunks = 1;
            out.finished = true;
            return Ok(out);
        }

        let mut parser = SseParser::new();
        let mut reader = BufReader::new(response);
        let mut line = String::new();
        loop {
            line.clear();
            let n = reader.read_line(&mut line).map_err(|e| self.read_error(&e, start, &out))?;
            let event = if n == 0 { parser.flush() } else { parser.feed_line(line.trim_end_matches('\n')) };
            if let Some(ev) = event {
                if ev.data.trim() == "[DONE]" {
                    out.finished = true;
                    break;
                }
                match parse_chat_chunk(&ev.data) {
                    Ok(chunk) => {
                        if !chunk.content.is_empty() {
                            if out.first_token.is_none() {
                                out.first_token = Some((chunk.content.clone(), self.clock.now() - start));
                            }
                            out.text.push_str(&chunk.content);
                            out.chunks += 1;
                        }
                        if chunk.completion_tokens.is_some() {
                            out.completion_tokens = chunk.completion_tokens;
                        }
                        if chunk.finish_reason.is_some() {
                            out.finished = true;
                        }
                    }
                    Err(e) => debug!(error = %e, data = %ev.data, "skipping undecodable stream event"),
                }
            }
            if n == 0 {
                break;
            }
        }
        Ok(out)
    }

    fn read_error(&self, e: &(dyn std::error::Error + 'static), start: Duration, so_far: &StreamOutcome) -> GenerationError {
        let after = (self.clock.now() - start).as_secs_f64();
        if is_timeout(e) {
            if so_far.first_token.is_none() {
                GenerationError::TtftTimeout { after }
            } else {
                GenerationError::Timeout { after }
            }
        } else {
            GenerationError::PartialAnswer { received: so_far.text.clone() }
        }
    }

    fn frame_data_url(&self, frame: &Frame) -> Result<String, GenerationError> {
        let res = self.profile.resolution;
        let img = if Path::new(&frame.payload_ref).is_file() {
            image::open(&frame.payload_ref)
                .map_err(|e| GenerationError::Rejected { reason: format!("{}: {e}", frame.payload_ref) })?
                .resize_exact(res.width, res.height, image::imageops::FilterType::Triangle)
        } else {
            // Synthetic or remote reference: send a flat placeholder of the requested size.
            let shade = (frame.index % 200) as u8 + 28;
            DynamicImage::ImageRgb8(RgbImage::from_pixel(res.width, res.height, Rgb([shade, shade, shade])))
        };
        let mut buf = Cursor::new(Vec::new());
        img.to_rgb8()
            .write_to(&mut buf, ImageFormat::Jpeg)
            .map_err(|e| GenerationError::Rejected { reason: e.to_string() })?;
        Ok(format!("data:image/jpeg;base64,{}", base64::engine::general_purpose::STANDARD.encode(buf.get_ref())))
    }

    fn describe_one(&self, clip: &Clip, prompt: &str) -> Result<Description, GenerationError> {
        let mut content = vec![json!({"type": "text", "text": prompt})];
        for f in &clip.frames {
            content.push(json!({"type": "image_url", "image_url": {"url": self.frame_data_url(f)?}}));
        }
        let body = json!({
            "model": self.profile.model_name,
            "messages": [{"role": "user", "content": content}],
            "stream": true,
            "stream_options": {"include_usage": true},
            "max_tokens": self.profile.max_description_tokens,
            "temperature": 0,
        });
        let start = self.clock.now();
        let out = self.stream_chat(&body, start)?;
        let wall = self.clock.now() - start;
        let ttft = out.first_token.as_ref().map(|(_, t)| *t).unwrap_or(wall);
        let tokens = out.completion_tokens.unwrap_or(out.chunks);
        let mut stats = GenerationStats::new(wall, ttft, tokens);
        stats.peak_memory_bytes = self.read_peak_memory();
        Ok(Description { text: out.text.trim().to_string(), stats })
    }

    fn read_peak_memory(&self) -> Option<u64> {
        let (path, metric) = (self.profile.metrics_path.as_ref()?, self.profile.peak_memory_metric.as_ref()?);
        let body = self.client.get(self.url(path)).send().ok()?.text().ok()?;
        parse_gauge(&body, metric)
    }
}

/// Reads the first sample of `metric` from Prometheus text exposition.
fn parse_gauge(body: &str, metric: &str) -> Option<u64> {
    body.lines()
        .filter(|l| !l.starts_with('#'))
        .find_map(|l| {
            let (name, value) = l.rsplit_once(' ')?;
            let bare = name.split('{').next()?;
            (bare == metric).then(|| value.trim().parse::<f64>().ok())?
        })
        .map(|v| v as u64)
}

fn lookup_context(model: &Value) -> Option<usize> {
    ["max_model_len", "context_length", "context_window", "max_context_length"]
        .iter()
        .find_map(|k| model.get(*k).and_then(Value::as_u64))
        .map(|v| v as usize)
}

impl Backend for HttpBackend {
    fn id(&self) -> String {
        format!("http:{}", self.profile.model_name)
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
        if clips.len() == 1 {
            return Ok(vec![self.describe_one(&clips[0], prompt)]);
        }
        // Concurrent requests; servers with continuous batching fuse them.
        Ok(std::thread::scope(|s| {
            let handles: Vec<_> = clips.iter().map(|c| s.spawn(move || self.describe_one(c, prompt))).collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join().unwrap_or_else(|_| {
                        Err(GenerationError::Rejected { reason: "describe thread panicked".into() })
                    })
                })
                .collect()
        }))
    }

    fn answer_stream(&self, request: &AnswerRequest, max_new_tokens: u32) -> Result<StreamedAnswer, GenerationError> {
        let max_new_tokens = max_new_tokens.max(1);
        let body = json!({
            "model": self.profile.model_name,
            "messages": [{"role": "user", "content": request.prompt}],
            "stream": true,
            "stream_options": {"include_usage": true},
            "max_tokens": max_new_tokens,
            "temperature": 0,
        });
        let start = self.clock.now();
        let out = self.stream_chat(&body, start)?;
        let wall = self.clock.now() - start;
        let Some((first_token, first_at)) = out.first_token.clone() else {
            return if out.finished {
                Err(GenerationError::PartialAnswer { received: String::new() })
            } else {
                Err(GenerationError::TtftTimeout { after: wall.as_secs_f64() })
            };
        };
        if !out.finished {
            return Err(GenerationError::PartialAnswer { received: out.text });
        }
        let tokens = out.completion_tokens.unwrap_or(out.chunks).max(1);
        let final_text = if max_new_tokens == 1 { first_token.clone() } else { out.text.clone() };
        Ok(StreamedAnswer {
            first_token,
            first_token_time: first_at.as_secs_f64(),
            final_text,
            stats: GenerationStats::new(wall, first_at, tokens),
        })
    }

    fn probe(&self) -> Result<Capabilities, BackendError> {
        let url = self.url(&self.profile.models_path);
        let connectivity = |reason: String| BackendError::Connectivity { endpoint: self.profile.endpoint.clone(), reason };
        let resp = self.client.get(&url).send().map_err(|e| connectivity(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(connectivity(format!("HTTP {} from {url}", resp.status())));
        }
        let json: Value = resp.json().map_err(|e| connectivity(e.to_string()))?;
        let listed = json.get("data").and_then(Value::as_array).cloned().unwrap_or_default();
        let models: Vec<String> =
            listed.iter().filter_map(|m| m.get("id").and_then(Value::as_str).map(str::to_string)).collect();
        let ours = listed
            .iter()
            .find(|m| m.get("id").and_then(Value::as_str) == Some(self.profile.model_name.as_str()))
            .or(listed.first());
        let context_limit = self.profile.context_limit.or_else(|| ours.and_then(lookup_context));
        let image_input = ours
            .and_then(|m| m.get("modalities").or_else(|| m.get("capabilities")))
            .and_then(Value::as_array)
            .map(|caps| {
                let vision = caps.iter().filter_map(Value::as_str).any(|c| c == "image" || c == "vision");
                if vision { Support::Yes } else { Support::No }
            })
            .unwrap_or(Support::Unknown);
        Ok(Capabilities { streaming: Support::Unknown, image_input, context_limit, models })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauge_parsing() {
        let body = "# HELP gpu_mem bytes\n# TYPE gpu_mem gauge\ngpu_mem{device=\"0\"} 6.25e9\nother 1\n";
        assert_eq!(parse_gauge(body, "gpu_mem"), Some(6_250_000_000));
        assert_eq!(parse_gauge(body, "missing"), None);
    }
}
