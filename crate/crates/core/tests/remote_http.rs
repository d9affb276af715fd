use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use emrkg::gateway::{BackendKind, FailureKind, Gateway, ModelBackend, RetryPolicy};
use emrkg::prompting::build_prompt;
use emrkg::remote::{Endpoint, HttpExtractiveQa, HttpGenerative, RemoteEmbedder, RemoteNer};
use emrkg::similarity::similarity;
use emrkg::terminology::NerProvider;
use emrkg::{EntityCategory, Parsed, PromptStyle, SimilarityProvider};
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    auth: Option<String>,
    body: Value,
}

struct Reply {
    status: u16,
    body: String,
    delay: Duration,
}

fn ok(body: Value) -> Reply {
    Reply { status: 200, body: body.to_string(), delay: Duration::ZERO }
}

fn status(code: u16) -> Reply {
    Reply { status: code, body: "{}".into(), delay: Duration::ZERO }
}

/// One-connection-per-request HTTP server that plays `replies` in order.
fn serve(replies: Vec<Reply>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for reply in replies {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let path = line.split_whitespace().nth(1).unwrap_or_default().to_string();
            let (mut len, mut auth) = (0, None);
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                let h = h.trim_end();
                if h.is_empty() {
                    break;
                }
                let (name, value) = h.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => len = value.trim().parse().unwrap(),
                    "authorization" => auth = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            log.lock().unwrap().push(Seen {
                path,
                auth,
                body: serde_json::from_slice(&body).unwrap_or(Value::Null),
            });
            thread::sleep(reply.delay);
            let mut stream = stream;
            let _ = write!(
                stream,
                "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                reply.status,
                reply.body.len(),
                reply.body
            );
        }
    });
    (url, seen)
}

fn endpoint(url: &str, token: Option<&str>) -> Endpoint {
    Endpoint::new(url, token.map(str::to_string), Duration::from_secs(5)).unwrap()
}

fn no_wait(max_retries: u32) -> RetryPolicy {
    RetryPolicy { max_retries, base_delay_ms: 0, max_delay_ms: 0 }
}

const CONTEXT: &str = "Taking AREDS vitamins may decrease the progression.";

fn guided_prompt() -> emrkg::Prompt {
    build_prompt(&PromptStyle::Guided, "What treats amd?", CONTEXT, EntityCategory::Treatment).unwrap()
}

#[test]
fn generate_sends_the_wire_request_with_bearer_token() {
    let (url, seen) = serve(vec![ok(json!({"text": "treat: AREDS vitamins", "token_logprobs": [-0.1, -0.3]}))]);
    let gw = Gateway::new(Arc::new(HttpGenerative::new("remote", endpoint(&url, Some("s3cret")))));
    assert_eq!(gw.backend_kind(), BackendKind::Generative);
    let prompt = guided_prompt();
    let rec = gw.query(&prompt).unwrap();

    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/generate");
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer s3cret"));
    assert_eq!(seen[0].body, json!({"prompt": prompt.text, "max_tokens": 256, "temperature": 0.0}));

    let answers = rec.parsed.answers();
    assert_eq!(answers.len(), 1);
    assert_eq!(answers[0].text, "AREDS vitamins");
    assert!((answers[0].score - (-0.2f64).exp()).abs() < 1e-12);
    assert_eq!(rec.attempts, 1);
}

#[test]
fn generate_without_logprobs_uses_the_default_score() {
    let (url, seen) = serve(vec![ok(json!({"text": "treat: fish"}))]);
    let gw = Gateway::new(Arc::new(HttpGenerative::new("remote", endpoint(&url, None))));
    let rec = gw.query(&guided_prompt()).unwrap();
    assert_eq!(rec.parsed.answers()[0].score, 0.5);
    assert_eq!(seen.lock().unwrap()[0].auth, None);
}

#[test]
fn server_errors_are_retried_until_success() {
    let (url, seen) = serve(vec![
        status(503),
        status(429),
        ok(json!({"text": "treat: fish", "token_logprobs": [0.0]})),
    ]);
    let gw = Gateway::new(Arc::new(HttpGenerative::new("remote", endpoint(&url, None)))).with_retry(no_wait(3));
    let rec = gw.query(&guided_prompt()).unwrap();
    assert_eq!(rec.attempts, 3);
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn retries_are_bounded() {
    let (url, seen) = serve(vec![status(500), status(502), status(503), status(504)]);
    let gw = Gateway::new(Arc::new(HttpGenerative::new("remote", endpoint(&url, None)))).with_retry(no_wait(2));
    let err = gw.query(&guided_prompt()).unwrap_err().to_string();
    assert!(err.contains("3 attempt"), "{err}");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = serve(vec![status(400), ok(json!({"text": "treat: fish"}))]);
    let backend = HttpGenerative::new("remote", endpoint(&url, None));
    let err = backend.call(&guided_prompt()).unwrap_err();
    assert_eq!(err.kind, FailureKind::Http(400));
    assert!(!err.retryable());
    let gw = Gateway::new(Arc::new(HttpGenerative::new("remote", endpoint(&url, None)))).with_retry(no_wait(3));
    // The second canned reply is still queued; a retry would have consumed it.
    assert!(gw.query(&guided_prompt()).is_ok());
    assert_eq!(seen.lock().unwrap().len(), 2);
}

#[test]
fn slow_replies_time_out() {
    let (url, _) = serve(vec![Reply { status: 200, body: "{}".into(), delay: Duration::from_millis(800) }]);
    let ep = Endpoint::new(&url, None, Duration::from_millis(200)).unwrap();
    let err = HttpGenerative::new("remote", ep).call(&guided_prompt()).unwrap_err();
    assert_eq!(err.kind, FailureKind::Timeout);
    assert!(err.retryable());
}

#[test]
fn malformed_bodies_are_protocol_errors() {
    let (url, _) = serve(vec![ok(json!({"completion": "x"}))]);
    let err = HttpGenerative::new("remote", endpoint(&url, None)).call(&guided_prompt()).unwrap_err();
    assert_eq!(err.kind, FailureKind::Protocol);
    assert!(!err.retryable());
}

#[test]
fn qa_sends_question_context_and_top_k() {
    let (url, seen) = serve(vec![
        ok(json!({"answers": [{"text": "AREDS vitamins", "score": 0.7}, {"text": "progression", "score": 0.1}]})),
        ok(json!({"answers": [{"text": "laser surgery", "score": 0.9}]})),
    ]);
    let gw = Gateway::new(Arc::new(HttpExtractiveQa::new("qa", endpoint(&url, Some("t")), 5)));
    assert_eq!(gw.backend_kind(), BackendKind::ExtractiveQa);
    let prompt = build_prompt(&PromptStyle::ZeroShot, "What treats amd?", CONTEXT, EntityCategory::Treatment).unwrap();
    let rec = gw.query(&prompt).unwrap();
    let texts: Vec<_> = rec.parsed.answers().iter().map(|a| a.text.as_str()).collect();
    assert_eq!(texts, ["AREDS vitamins", "progression"]);
    {
        let seen = seen.lock().unwrap();
        assert_eq!(seen[0].path, "/qa");
        assert_eq!(seen[0].body, json!({"question": "What treats amd?", "context": CONTEXT, "top_k": 5}));
    }
    // A span that is not in the context is a hallucinated answer.
    assert!(matches!(gw.query(&prompt).unwrap().parsed, Parsed::Unstructured));
}

#[test]
fn embed_client_feeds_cosine_similarity() {
    let (url, seen) = serve(vec![ok(json!({"vector": [3.0, 4.0]})), ok(json!({"vector": [4.0, 3.0]}))]);
    let emb: RemoteEmbedder<f64> = RemoteEmbedder::new(endpoint(&url, None));
    let s: f64 = similarity(&emb, "spinach and fish", "eating spinach").unwrap();
    assert!((s - 24.0 / 25.0).abs() < 1e-12);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/embed");
    assert_eq!(seen[0].body, json!({"text": "spinach and fish"}));
    assert!(emb.embed("  ").is_err());
}

#[test]
fn ner_client_returns_spans() {
    let text = "Patient has ARMD.";
    let (url, seen) = serve(vec![ok(json!({"spans": [{"text": "ARMD", "start": 12, "end": 16}]}))]);
    let spans = RemoteNer::new(endpoint(&url, None)).extract(text).unwrap();
    assert_eq!(spans.len(), 1);
    assert_eq!(&text[spans[0].start..spans[0].end], "ARMD");
    spans[0].validate(text).unwrap();
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/ner");
    assert_eq!(seen[0].body, json!({"text": text}));
}

#[test]
fn unreachable_service_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = HttpGenerative::new("remote", endpoint(&format!("http://127.0.0.1:{port}"), None))
        .call(&guided_prompt())
        .unwrap_err();
    assert_eq!(err.kind, FailureKind::Transport);
}

#[test]
fn debug_output_hides_the_token() {
    let ep = endpoint("http://localhost:9", Some("s3cret"));
    let shown = format!("{ep:?}");
    assert!(!shown.contains("s3cret"));
    assert!(shown.contains("redacted"));
}
