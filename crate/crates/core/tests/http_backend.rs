//! HttpBackend against a small in-process chat-completions server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::time::Duration;

use oemstream::backend::{AnswerRequest, GenerationError, HttpBackend, Support};
use oemstream::ingest::{segment_stream, ReplayClock, ReplayMode, SyntheticSource};
use oemstream::{Backend, BackendProfile, Candidates};
use serde_json::Value;

struct Request {
    path: String,
    body: String,
}

fn read_request(stream: &mut TcpStream) -> Option<Request> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let path = line.split_whitespace().nth(1)?.to_string();
    let mut len = 0;
    loop {
        line.clear();
        reader.read_line(&mut line).ok()?;
        if line.trim().is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().ok()?;
            }
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some(Request { path, body: String::from_utf8(body).ok()? })
}

fn respond(stream: &mut TcpStream, status: &str, content_type: &str, body: &str) {
    let _ = write!(
        stream,
        "HTTP/1.1 {status}\r\nContent-Type: {content_type}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
}

fn chunk(content: &str) -> String {
    format!("data: {{\"choices\":[{{\"delta\":{{\"content\":{content:?}}},\"finish_reason\":null}}]}}\n\n")
}

fn handle(mut stream: TcpStream, seen: Sender<Request>) {
    let Some(req) = read_request(&mut stream) else { return };
    let path = req.path.clone();
    let _ = seen.send(req);
    match path.as_str() {
        "/v1/models" => respond(
            &mut stream,
            "200 OK",
            "application/json",
            r#"{"data":[{"id":"other"},{"id":"vlm-2b","max_model_len":4096,"modalities":["text","image"]}]}"#,
        ),
        "/metrics" => respond(
            &mut stream,
            "200 OK",
            "text/plain",
            "# TYPE gpu_mem gauge\ngpu_mem{device=\"0\"} 3221225472\nother 1\n",
        ),
        "/v1/chat/completions" => {
            let _ = write!(stream, "HTTP/1.1 200 OK\r\nContent-Type: text/event-stream\r\nConnection: close\r\n\r\n");
            let _ = stream.flush();
            std::thread::sleep(Duration::from_millis(200));
            for part in ["B", " because", " the kitchen"] {
                let _ = stream.write_all(chunk(part).as_bytes());
                let _ = stream.flush();
            }
            let _ = stream.write_all(b"data: {\"choices\":[],\"usage\":{\"completion_tokens\":3}}\n\ndata: [DONE]\n\n");
        }
        "/cut/chat" => {
            let _ = write!(stream, "HTTP/1.1 200 OK\r\nContent-Type: text/event-stream\r\nConnection: close\r\n\r\n");
            let _ = stream.write_all(chunk("A").as_bytes());
        }
        "/slow/chat" => {
            std::thread::sleep(Duration::from_millis(1500));
            respond(&mut stream, "200 OK", "application/json", "{}");
        }
        _ => respond(&mut stream, "500 Internal Server Error", "text/plain", "out of memory"),
    }
}

fn serve() -> (String, Receiver<Request>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = channel();
    std::thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            let tx = tx.clone();
            std::thread::spawn(move || handle(stream, tx));
        }
    });
    (addr, rx)
}

fn backend(endpoint: &str, chat_path: &str) -> HttpBackend {
    let mut profile = BackendProfile::new(endpoint, "vlm-2b");
    profile.chat_path = chat_path.into();
    profile.request_timeout = 0.8;
    profile.batch_size = 2;
    profile.resolution = oemstream::backend::Resolution::new(32, 48);
    HttpBackend::new(profile, ReplayClock::start(ReplayMode::Realtime)).unwrap()
}

fn request() -> AnswerRequest {
    AnswerRequest {
        prompt: "Memory: ...\nQuestion: where?\nAnswer with one letter.".into(),
        memory_text: String::new(),
        question: "where?".into(),
        candidates: Candidates::from_texts(vec!["a", "b", "c", "d"]).unwrap(),
    }
}

#[test]
fn first_token_is_the_answer() {
    let (addr, seen) = serve();
    let b = backend(&addr, "/v1/chat/completions");
    let ans = b.answer_stream(&request(), 1).unwrap();
    assert_eq!(ans.first_token, "B");
    assert_eq!(ans.final_text, "B");
    assert!(ans.first_token_time >= 0.2, "ttft {}", ans.first_token_time);
    assert!(ans.stats.ttft <= ans.stats.wall_time);
    let body: Value = serde_json::from_str(&seen.recv().unwrap().body).unwrap();
    assert_eq!(body["max_tokens"], 1);
    assert_eq!(body["stream"], true);
    assert_eq!(body["model"], "vlm-2b");
}

#[test]
fn describe_sends_frames_and_reads_usage() {
    let (addr, seen) = serve();
    let mut b = backend(&addr, "/v1/chat/completions");
    let frames = SyntheticSource::new(Duration::from_secs(4), 2.0).frames();
    let clips = segment_stream(&frames, Duration::from_secs(2), 1.0).unwrap();
    let out = b.describe(&clips, "Describe the clip.").unwrap();
    assert_eq!(out.len(), 2);
    for d in &out {
        let d = d.as_ref().unwrap();
        assert_eq!(d.text, "B because the kitchen");
        assert_eq!(d.stats.output_tokens, 3);
        assert_eq!(d.stats.peak_memory_bytes, None);
    }
    let body: Value = serde_json::from_str(&seen.recv().unwrap().body).unwrap();
    let content = body["messages"][0]["content"].as_array().unwrap();
    assert_eq!(content[0]["text"], "Describe the clip.");
    assert_eq!(content.len(), 1 + clips[0].frames.len());
    assert!(content[1]["image_url"]["url"].as_str().unwrap().starts_with("data:image/jpeg;base64,"));

    b = {
        let mut p = b.profile().clone();
        p.metrics_path = Some("/metrics".into());
        p.peak_memory_metric = Some("gpu_mem".into());
        HttpBackend::new(p, ReplayClock::start(ReplayMode::Realtime)).unwrap()
    };
    let d = b.describe(&clips[..1], "Describe the clip.").unwrap().remove(0).unwrap();
    assert_eq!(d.stats.peak_memory_bytes, Some(3 << 30));
    assert!(b.describe(&clips[..0], "x").is_err());
    assert!(b.describe(&clips[..1], "  ").is_err());
}

#[test]
fn probe_reads_model_list() {
    let (addr, _seen) = serve();
    let caps = backend(&addr, "/v1/chat/completions").probe().unwrap();
    assert_eq!(caps.models, vec!["other", "vlm-2b"]);
    assert_eq!(caps.context_limit, Some(4096));
    assert_eq!(caps.image_input, Support::Yes);
    assert_eq!(caps.streaming, Support::Unknown);
}

#[test]
fn server_errors_are_rejections() {
    let (addr, _seen) = serve();
    let err = backend(&addr, "/broken").answer_stream(&request(), 1).unwrap_err();
    assert!(matches!(&err, GenerationError::Rejected { reason } if reason.contains("500") && reason.contains("out of memory")));
}

#[test]
fn truncated_stream_is_partial() {
    let (addr, _seen) = serve();
    let err = backend(&addr, "/cut/chat").answer_stream(&request(), 1).unwrap_err();
    assert_eq!(err, GenerationError::PartialAnswer { received: "A".into() });
}

#[test]
fn slow_server_times_out() {
    let (addr, _seen) = serve();
    let err = backend(&addr, "/slow/chat").answer_stream(&request(), 1).unwrap_err();
    assert!(matches!(err, GenerationError::Timeout { .. } | GenerationError::TtftTimeout { .. }), "{err:?}");
}

#[test]
fn unreachable_endpoint() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let b = backend(&format!("http://127.0.0.1:{port}"), "/v1/chat/completions");
    assert!(matches!(b.answer_stream(&request(), 1), Err(GenerationError::Transport { attempts: 2, .. })));
    assert!(b.probe().is_err());
}
