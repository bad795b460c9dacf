use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use deepedit::probe::{
    ChatMessage, CompletionRequest, EndpointConfig, EndpointError, HttpEndpoint, ProbeOptions, Prober, RetryPolicy,
};

/// Serves one canned response per connection and records each request.
fn fake_server(responses: Vec<(u16, &'static str)>) -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut head = String::new();
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
                head.push_str(&line);
            }
            let mut payload = vec![0; length];
            reader.read_exact(&mut payload).unwrap();
            log.lock()
                .unwrap()
                .push(format!("{head}\n{}", String::from_utf8(payload).unwrap()));
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            reader.get_mut().write_all(reply.as_bytes()).unwrap();
        }
    });
    (url, seen)
}

const OK: &str = r#"{"choices":[{"message":{"role":"assistant","content":"Hogwarts"}}]}"#;

fn request() -> CompletionRequest {
    CompletionRequest {
        query_id: "q".into(),
        sample_index: 0,
        messages: vec![ChatMessage::user("Where did Harry Potter study?")],
        tag: None,
    }
}

fn prober(url: &str, config: impl FnOnce(&mut EndpointConfig)) -> Prober {
    let mut cfg = EndpointConfig::new(url, "test-model");
    config(&mut cfg);
    Prober::new(
        Arc::new(HttpEndpoint::from_config(&cfg).unwrap()),
        ProbeOptions {
            samples_per_query: 1,
            max_parallel: 1,
            retry: RetryPolicy {
                attempts: 3,
                base_delay: Duration::from_millis(5),
            },
            ..ProbeOptions::default()
        },
    )
}

#[test]
fn transient_failures_are_retried() {
    let (url, seen) = fake_server(vec![(503, "{}"), (429, "{}"), (200, OK)]);
    let p = prober(&url, |_| {});
    assert_eq!(p.complete(&request()).unwrap(), "Hogwarts");
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert!(seen[0].starts_with("POST /v1/chat/completions"));
    let body = seen[2].split_once("\n\n").unwrap().1;
    let json: serde_json::Value = serde_json::from_str(body).unwrap();
    assert_eq!(json["model"], "test-model");
    assert_eq!(json["temperature"], 0.7);
    assert_eq!(json["max_tokens"], 256);
    assert_eq!(json["messages"][0]["role"], "user");
}

#[test]
fn retries_stop_after_three_attempts() {
    let (url, seen) = fake_server(vec![(500, "{}"), (502, "{}"), (503, "down"), (200, OK)]);
    let p = prober(&url, |_| {});
    let err = p.complete(&request()).unwrap_err();
    assert_eq!(
        err,
        EndpointError::Status {
            status: 503,
            body: "down".into()
        }
    );
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = fake_server(vec![(400, "bad request"), (200, OK)]);
    let p = prober(&url, |_| {});
    assert!(matches!(
        p.complete(&request()),
        Err(EndpointError::Status { status: 400, .. })
    ));
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn malformed_body() {
    let (url, _) = fake_server(vec![(200, r#"{"choices":[]}"#)]);
    let p = prober(&url, |_| {});
    assert!(matches!(p.complete(&request()), Err(EndpointError::Malformed(_))));
}

#[test]
fn bearer_token_from_environment() {
    std::env::set_var("DEEPEDIT_HTTP_TEST_TOKEN", "sekrit");
    let (url, seen) = fake_server(vec![(200, OK)]);
    let p = prober(&url, |c| c.auth = Some("DEEPEDIT_HTTP_TEST_TOKEN".into()));
    p.complete(&request()).unwrap();
    let seen = seen.lock().unwrap();
    assert!(seen[0].to_ascii_lowercase().contains("authorization: bearer sekrit"));
}

#[test]
fn unreachable_server_is_a_transport_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    drop(listener);
    let p = prober(&url, |_| {});
    let err = p.complete(&request()).unwrap_err();
    assert!(matches!(err, EndpointError::Transport(_)));
    assert!(err.is_retryable());
}
