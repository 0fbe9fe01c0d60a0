use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use cirkit::mllm::{MllmClient, MllmConfig, MllmError, PromptKind, PromptTemplate, RerankIntent};

struct Captured {
    headers: Vec<String>,
    body: serde_json::Value,
}

/// Serves one canned `(status, body, delay)` per connection, in order.
fn serve(replies: Vec<(u16, String, Duration)>) -> (String, Arc<Mutex<Vec<Captured>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body, delay) in replies {
            let Ok((stream, _)) = listener.accept() else { return };
            handle(stream, status, &body, delay, &log);
        }
    });
    (url, seen)
}

fn handle(mut stream: TcpStream, status: u16, body: &str, delay: Duration, log: &Mutex<Vec<Captured>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut headers = Vec::new();
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let line = line.trim_end().to_string();
        if line.is_empty() {
            break;
        }
        if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            len = v.trim().parse().unwrap();
        }
        headers.push(line);
    }
    let mut buf = vec![0u8; len];
    reader.read_exact(&mut buf).unwrap();
    log.lock().unwrap().push(Captured {
        headers,
        body: serde_json::from_slice(&buf).unwrap_or(serde_json::Value::Null),
    });
    thread::sleep(delay);
    let resp = format!(
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let _ = stream.write_all(resp.as_bytes());
}

fn ok(text: &str) -> (u16, String, Duration) {
    let body = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}, "finish_reason": "stop"}]});
    (200, body.to_string(), Duration::ZERO)
}

fn cfg(url: &str) -> MllmConfig {
    MllmConfig {
        endpoint_url: url.into(),
        model_name: "test-model".into(),
        timeout_secs: 2.0,
        max_retries: 2,
        backoff_base_ms: 5,
        backoff_max_ms: 20,
        api_key_env: "CIRKIT_TEST_KEY_UNSET".into(),
        ..MllmConfig::default()
    }
}

fn png() -> Vec<u8> {
    let img = image::RgbImage::from_pixel(3, 3, image::Rgb([9, 9, 9]));
    cirkit::grid::encode_png(&img).unwrap()
}

#[test]
fn rate_limit_then_success() {
    let (url, seen) = serve(vec![(429, "{}".into(), Duration::ZERO), ok("[1, 0, 3, 2]")]);
    let client = MllmClient::new(cfg(&url)).unwrap();
    let img = png();
    let tmpl = PromptTemplate::builtin(PromptKind::Rerank);
    let intent = RerankIntent::Reference { image: &img, modification: "add stripes" };
    let out = client.rerank_call("q1", intent, &img, 2, &tmpl).unwrap();
    assert_eq!(out.text, "[1, 0, 3, 2]");
    assert_eq!(out.retries, 1);

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    let body = &seen[1].body;
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["temperature"], 1.0);
    let parts = body["messages"][1]["content"].as_array().unwrap();
    assert_eq!(parts[0]["type"], "text");
    assert!(parts[0]["text"].as_str().unwrap().contains("add stripes"));
    for p in &parts[1..] {
        assert!(p["image_url"]["url"].as_str().unwrap().starts_with("data:image/png;base64,"));
    }
    assert!(seen[1].headers[0].starts_with("POST /v1/chat/completions"));
    assert!(!seen[1].headers.iter().any(|h| h.to_ascii_lowercase().starts_with("authorization")));
}

#[test]
fn api_key_comes_from_environment() {
    let (url, seen) = serve(vec![ok("A red bus.")]);
    std::env::set_var("CIRKIT_TEST_KEY_SET", "sk-test-123");
    let client = MllmClient::new(MllmConfig {
        api_key_env: "CIRKIT_TEST_KEY_SET".into(),
        ..cfg(&url)
    })
    .unwrap();
    let tmpl = PromptTemplate::builtin(PromptKind::Caption);
    let out = client.generate_target_caption("q", &png(), "make it red", &tmpl).unwrap();
    assert_eq!(out.text, "A red bus.");
    let seen = seen.lock().unwrap();
    assert!(seen[0].headers.iter().any(|h| h == "authorization: Bearer sk-test-123"));
}

#[test]
fn connection_refused_exhausts_retries() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let client = MllmClient::new(cfg(&format!("http://127.0.0.1:{port}/v1"))).unwrap();
    let tmpl = PromptTemplate::builtin(PromptKind::Caption);
    let err = client.generate_target_caption("q", &png(), "x", &tmpl).unwrap_err();
    assert!(matches!(err, MllmError::TransportError { retries: 2, .. }), "{err:?}");
}

#[test]
fn slow_server_times_out() {
    let slow = (200, "{}".to_string(), Duration::from_millis(900));
    let (url, _) = serve(vec![slow.clone(), slow]);
    let client = MllmClient::new(MllmConfig {
        timeout_secs: 0.2,
        max_retries: 1,
        ..cfg(&url)
    })
    .unwrap();
    let tmpl = PromptTemplate::builtin(PromptKind::Caption);
    let err = client.generate_target_caption("q", &png(), "x", &tmpl).unwrap_err();
    assert_eq!(err, MllmError::ApiTimeout { retries: 1 });
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = serve(vec![(400, r#"{"error":"bad image"}"#.into(), Duration::ZERO), ok("unused")]);
    let client = MllmClient::new(cfg(&url)).unwrap();
    let tmpl = PromptTemplate::builtin(PromptKind::Caption);
    let err = client.generate_target_caption("q", &png(), "x", &tmpl).unwrap_err();
    assert!(matches!(err, MllmError::HttpStatus { status: 400, retries: 0, .. }), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn structured_refusal_and_empty_reply() {
    let refusal = serde_json::json!({"choices": [{"message": {"content": null, "refusal": "I can't help with that."}}]});
    let r = (200, refusal.to_string(), Duration::ZERO);
    let (url, _) = serve(vec![r.clone(), r.clone(), r]);
    let client = MllmClient::new(cfg(&url)).unwrap();
    let tmpl = PromptTemplate::builtin(PromptKind::Caption);
    let err = client.generate_target_caption("q", &png(), "x", &tmpl).unwrap_err();
    assert!(matches!(err, MllmError::ApiRefusal { retries: 2, .. }), "{err:?}");

    let (url, _) = serve(vec![ok(""), ok("  "), ok("A cat.")]);
    let client = MllmClient::new(cfg(&url)).unwrap();
    let out = client.generate_target_caption("q", &png(), "x", &tmpl).unwrap();
    assert_eq!((out.text.as_str(), out.retries), ("A cat.", 2));
}

#[test]
fn text_refusal_with_curly_apostrophe() {
    let (url, _) = serve(vec![ok("I\u{2019}m sorry, but I can\u{2019}t assist with that."); 3]);
    let client = MllmClient::new(cfg(&url)).unwrap();
    let tmpl = PromptTemplate::builtin(PromptKind::Caption);
    assert!(matches!(
        client.generate_target_caption("q", &png(), "x", &tmpl),
        Err(MllmError::ApiRefusal { .. })
    ));
}
