//! Exercises the OpenAI-compatible backend against a throwaway local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use ranstruct_core::llm::{BackendConfig, LlmClient, LlmError, Purpose};
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    auth: Option<String>,
    body: Value,
}

/// Serves `replies` (status, body) one connection at a time and records
/// each request.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, body) in replies {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream);
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let path = request_line.split_whitespace().nth(1).unwrap_or_default().to_string();
            let mut len = 0;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => len = value.trim().parse().unwrap(),
                    "authorization" => auth = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen { path, auth, body: serde_json::from_slice(&buf).unwrap() });
            let mut stream = reader.into_inner();
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen)
}

fn client(url: &str, retry_limit: u32) -> LlmClient {
    let cfg = BackendConfig {
        endpoint_url: url.to_string(),
        model_name: "qwen2.5".into(),
        auth_token: Some("secret-token".into()),
        retry_limit,
        base_backoff_ms: 1,
        max_new_tokens: 64,
        temperature: 0.2,
        ..BackendConfig::default()
    };
    LlmClient::from_config(cfg).unwrap()
}

fn chat_reply(text: &str) -> String {
    json!({
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {"prompt_tokens": 12, "completion_tokens": 3}
    })
    .to_string()
}

#[test]
fn chat_request_matches_wire_format() {
    let (url, seen) = serve(vec![(200, chat_reply("Four."))]);
    let c = client(&url, 0);
    let out = c.chat(&c.request("You are terse.", "What is 2+2?", Purpose::Generic)).unwrap();
    assert_eq!(out.response_text, "Four.");
    assert_eq!(out.usage.prompt_tokens, 12);
    assert_eq!(out.usage.completion_tokens, 3);
    assert_eq!(out.attempts, 1);

    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer secret-token"));
    let body = &seen[0].body;
    assert_eq!(body["model"], "qwen2.5");
    assert_eq!(body["max_tokens"], 64);
    assert!((body["temperature"].as_f64().unwrap() - 0.2).abs() < 1e-6);
    assert_eq!(body["messages"][0], json!({"role": "system", "content": "You are terse."}));
    assert_eq!(body["messages"][1], json!({"role": "user", "content": "What is 2+2?"}));
}

#[test]
fn server_errors_are_retried() {
    let (url, seen) = serve(vec![(503, "{}".into()), (429, "{}".into()), (200, chat_reply("ok"))]);
    let c = client(&url, 3);
    let out = c.chat(&c.request("", "hi", Purpose::Generic)).unwrap();
    assert_eq!(out.attempts, 3);
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert_eq!(seen[0].body["messages"].as_array().unwrap().len(), 1, "empty system prompt is omitted");
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = serve(vec![(400, r#"{"error":"bad model"}"#.into()), (200, chat_reply("unused"))]);
    let c = client(&url, 5);
    let err = c.chat(&c.request("", "hi", Purpose::Generic)).unwrap_err();
    assert!(matches!(err, LlmError::Permanent { status: 400, .. }), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn retries_stop_at_the_limit() {
    let (url, seen) = serve(vec![(500, "{}".into()); 3]);
    let c = client(&url, 2);
    let err = c.chat(&c.request("", "hi", Purpose::Generic)).unwrap_err();
    assert!(matches!(err, LlmError::RetriesExhausted { attempts: 3, .. }), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn malformed_body_is_a_decode_error() {
    let (url, _) = serve(vec![(200, r#"{"choices": []}"#.into())]);
    let c = client(&url, 0);
    assert!(matches!(c.chat(&c.request("", "hi", Purpose::Generic)), Err(LlmError::Decode(_))));
}

#[test]
fn embeddings_are_reordered_and_normalized() {
    let reply = json!({
        "data": [
            {"index": 1, "embedding": [0.0, 2.0]},
            {"index": 0, "embedding": [3.0, 4.0]}
        ]
    })
    .to_string();
    let (url, seen) = serve(vec![(200, reply)]);
    let c = client(&url, 0);
    let out = c.embed(&["first".to_string(), "second".to_string()]).unwrap();
    assert_eq!(out.vectors, vec![vec![0.6, 0.8], vec![0.0, 1.0]]);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/v1/embeddings");
    assert_eq!(seen[0].body, json!({"model": "qwen2.5", "input": ["first", "second"]}));
}
