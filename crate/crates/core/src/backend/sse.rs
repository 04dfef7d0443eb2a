//! Server-sent events framing and chat-completions stream chunks.

use serde::Deserialize;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SseEvent {
    pub event: Option<String>,
    pub id: Option<String>,
    pub data: String,
}

/// Line-oriented SSE decoder. Feed it lines without their terminator; a blank
/// line completes an event.
#[derive(Debug, Default)]
pub struct SseParser {
    event: Option<String>,
    id: Option<String>,
    data: Vec<String>,
}

impl SseParser {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn feed_line(&mut self, line: &str) -> Option<SseEvent> {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            return self.flush();
        }
        if line.starts_with(':') {
            return None;
        }
        let (field, value) = match line.split_once(':') {
            Some((f, v)) => (f, v.strip_prefix(' ').unwrap_or(v)),
            None => (line, ""),
        };
        match field {
            "data" => self.data.push(value.to_string()),
            "event" => self.event = Some(value.to_string()),
            "id" => self.id = Some(value.to_string()),
            _ => {}
        }
        None
    }

    /// Emits any pending event (used at end of stream).
    pub fn flush(&mut self) -> Option<SseEvent> {
        if self.data.is_empty() && self.event.is_none() {
            self.id = None;
            return None;
        }
        let ev = SseEvent { event: self.event.take(), id: self.id.take(), data: self.data.join("\n") };
        self.data.clear();
        Some(ev)
    }
}

#[derive(Debug, Deserialize)]
struct ChunkJson {
    #[serde(default)]
    choices: Vec<ChoiceJson>,
    #[serde(default)]
    usage: Option<UsageJson>,
}

#[derive(Debug, Deserialize)]
struct ChoiceJson {
    #[serde(default)]
    delta: Option<DeltaJson>,
    #[serde(default)]
    message: Option<DeltaJson>,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Debug, Deserialize)]
struct DeltaJson {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct UsageJson {
    #[serde(default)]
    completion_tokens: Option<u64>,
}

/// The parts of a streamed (or non-streamed) chat-completions payload we use.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChatChunk {
    pub content: String,
    pub finish_reason: Option<String>,
    pub completion_tokens: Option<u64>,
}

pub fn parse_chat_chunk(data: &str) -> Result<ChatChunk, serde_json::Error> {
    let json: ChunkJson = serde_json::from_str(data)?;
    let mut out = ChatChunk { completion_tokens: json.usage.and_then(|u| u.completion_tokens), ..Default::default() };
    if let Some(choice) = json.choices.into_iter().next() {
        if let Some(c) = choice.delta.or(choice.message).and_then(|d| d.content) {
            out.content = c;
        }
        out.finish_reason = choice.finish_reason;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn events_split_on_blank_lines() {
        let mut p = SseParser::new();
        let mut got = Vec::new();
        for line in ["id: 3", "event: entry", "data: {\"a\":1}", "", ": keepalive", "data: x", "data: y", ""] {
            got.extend(p.feed_line(line));
        }
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].id.as_deref(), Some("3"));
        assert_eq!(got[0].event.as_deref(), Some("entry"));
        assert_eq!(got[1].data, "x\ny");
    }

    #[test]
    fn parses_delta_and_usage() {
        let c = parse_chat_chunk(r#"{"choices":[{"delta":{"content":"B"},"finish_reason":null}]}"#).unwrap();
        assert_eq!(c.content, "B");
        let u = parse_chat_chunk(r#"{"choices":[],"usage":{"completion_tokens":12}}"#).unwrap();
        assert_eq!(u.completion_tokens, Some(12));
        let full = parse_chat_chunk(r#"{"choices":[{"message":{"content":"hi"},"finish_reason":"stop"}]}"#).unwrap();
        assert_eq!(full.content, "hi");
        assert_eq!(full.finish_reason.as_deref(), Some("stop"));
    }
}
