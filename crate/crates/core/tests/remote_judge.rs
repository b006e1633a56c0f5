use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use serde_json::Value;
use ttarag::eval::{Judge, JudgeError, JudgeKind, RemoteJudge, Verdict};

/// Serves `replies` in order, one per connection, and forwards each request
/// body it receives.
fn serve(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<Value>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/judge", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            assert!(request_line.starts_with("POST /judge"), "{request_line}");
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line.trim().is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        len = v.trim().parse().unwrap();
                    }
                }
            }
            let mut buf = vec![0u8; len];
            reader.read_exact(&mut buf).unwrap();
            tx.send(serde_json::from_slice(&buf).unwrap()).unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, rx)
}

fn golds() -> Vec<String> {
    vec!["lopuke".to_string(), "lopuk".to_string()]
}

#[test]
fn sends_the_documented_request_and_reads_verdicts() {
    let (url, rx) = serve(vec![
        (200, r#"{"verdict":"correct"}"#.into()),
        (200, r#"{"verdict":"incorrect","note":"ignored"}"#.into()),
    ]);
    let judge = RemoteJudge::new(url, Duration::from_secs(5));
    assert_eq!(judge.kind(), JudgeKind::Remote);

    let v = judge.judge("what is the zakit of kapat?", "lopuke.", &golds()).unwrap();
    assert_eq!(v, Verdict::Correct);
    let req = rx.recv().unwrap();
    assert_eq!(req["question"], "what is the zakit of kapat?");
    assert_eq!(req["prediction"], "lopuke.");
    assert_eq!(req["golds"], serde_json::json!(["lopuke", "lopuk"]));
    assert_eq!(req.as_object().unwrap().len(), 3);

    let v = judge.judge("q", "something else", &golds()).unwrap();
    assert_eq!(v, Verdict::Incorrect);
}

#[test]
fn server_errors_and_bad_bodies_are_reported() {
    let (url, _rx) = serve(vec![
        (500, r#"{"verdict":"correct"}"#.into()),
        (200, r#"{"answer":"yes"}"#.into()),
        (200, r#"{"verdict":"maybe"}"#.into()),
    ]);
    let judge = RemoteJudge::new(url, Duration::from_secs(5));
    assert!(matches!(judge.judge("q", "p", &golds()), Err(JudgeError::Transport(_))));
    assert!(matches!(judge.judge("q", "p", &golds()), Err(JudgeError::Protocol(_))));
    assert!(matches!(judge.judge("q", "p", &golds()), Err(JudgeError::Protocol(_))));
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let judge = RemoteJudge::new(format!("http://127.0.0.1:{port}/judge"), Duration::from_secs(2));
    assert!(matches!(judge.judge("q", "p", &golds()), Err(JudgeError::Transport(_))));
}
