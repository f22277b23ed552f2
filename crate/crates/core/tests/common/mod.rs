//! Shared helpers for the integration and acceptance targets.
#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use nextplace::runner::{ExperimentConfig, Predictor};
use nextplace::synthetic::{generate, to_stay_csv, SyntheticSpec};
use nextplace::{DayOfWeek, PlaceId, Stay, UserSequence};

pub struct Reply {
    pub status: u16,
    pub body: String,
    pub delay: Duration,
}

impl Reply {
    pub fn ok(content: &str) -> Self {
        Self::status(200, chat_body(content))
    }

    pub fn status(status: u16, body: String) -> Self {
        Self {
            status,
            body,
            delay: Duration::ZERO,
        }
    }

    pub fn delayed(mut self, ms: u64) -> Self {
        self.delay = Duration::from_millis(ms);
        self
    }
}

pub fn chat_body(content: &str) -> String {
    serde_json::json!({
        "id": "stub",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
    })
    .to_string()
}

type Handler = dyn Fn(usize, &str) -> Reply + Send + Sync;

/// Minimal HTTP/1.1 server answering each request through `handler(index, body)`.
pub struct StubServer {
    pub url: String,
    requests: Arc<AtomicUsize>,
    max_active: Arc<AtomicUsize>,
    bodies: Arc<Mutex<Vec<String>>>,
    auth_headers: Arc<Mutex<Vec<Option<String>>>>,
}

impl StubServer {
    pub fn start(handler: impl Fn(usize, &str) -> Reply + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub server");
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let handler: Arc<Handler> = Arc::new(handler);
        let requests = Arc::new(AtomicUsize::new(0));
        let active = Arc::new(AtomicUsize::new(0));
        let max_active = Arc::new(AtomicUsize::new(0));
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let auth_headers = Arc::new(Mutex::new(Vec::new()));
        {
            let (requests, max_active, bodies, auth_headers) =
                (requests.clone(), max_active.clone(), bodies.clone(), auth_headers.clone());
            thread::spawn(move || {
                for stream in listener.incoming() {
                    let Ok(stream) = stream else { continue };
                    let (handler, requests, active, max_active, bodies, auth_headers) = (
                        handler.clone(),
                        requests.clone(),
                        active.clone(),
                        max_active.clone(),
                        bodies.clone(),
                        auth_headers.clone(),
                    );
                    thread::spawn(move || {
                        let Some((auth, body)) = read_request(&stream) else { return };
                        let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                        max_active.fetch_max(now, Ordering::SeqCst);
                        let index = requests.fetch_add(1, Ordering::SeqCst);
                        bodies.lock().unwrap().push(body.clone());
                        auth_headers.lock().unwrap().push(auth);
                        let reply = handler(index, &body);
                        thread::sleep(reply.delay);
                        active.fetch_sub(1, Ordering::SeqCst);
                        write_response(stream, &reply);
                    });
                }
            });
        }
        Self {
            url,
            requests,
            max_active,
            bodies,
            auth_headers,
        }
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn max_active(&self) -> usize {
        self.max_active.load(Ordering::SeqCst)
    }

    pub fn bodies(&self) -> Vec<String> {
        self.bodies.lock().unwrap().clone()
    }

    pub fn auth_headers(&self) -> Vec<Option<String>> {
        self.auth_headers.lock().unwrap().clone()
    }
}

fn read_request(stream: &TcpStream) -> Option<(Option<String>, String)> {
    let mut reader = BufReader::new(stream);
    let mut content_length = 0usize;
    let mut auth = None;
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    loop {
        line.clear();
        if reader.read_line(&mut line).ok()? == 0 {
            return None;
        }
        let header = line.trim_end();
        if header.is_empty() {
            break;
        }
        if let Some((name, value)) = header.split_once(':') {
            match name.trim().to_ascii_lowercase().as_str() {
                "content-length" => content_length = value.trim().parse().ok()?,
                "authorization" => auth = Some(value.trim().to_string()),
                _ => {}
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body).ok()?;
    Some((auth, String::from_utf8_lossy(&body).into_owned()))
}

fn write_response(mut stream: TcpStream, reply: &Reply) {
    let head = format!(
        "HTTP/1.1 {} Stub\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        reply.status,
        reply.body.len()
    );
    let _ = stream.write_all(head.as_bytes());
    let _ = stream.write_all(reply.body.as_bytes());
    let _ = stream.flush();
}

/// One user whose stay `i` is at place `i`, with varied clock times.
pub fn numbered_sequence(user: &str, n: usize) -> UserSequence {
    let stays = (0..n)
        .map(|i| Stay::new((i * 37 % 1440) as u16, DayOfWeek::ALL[i % 7], 30 + i as u32, PlaceId(i as u64)).unwrap())
        .collect();
    UserSequence::from_stays(user, stays)
}

/// Writes a synthetic stay CSV with `users` users and returns its path.
pub fn write_synthetic(dir: &Path, users: usize) -> PathBuf {
    let path = dir.join("stays.csv");
    let spec = SyntheticSpec {
        users,
        ..SyntheticSpec::default()
    };
    std::fs::write(&path, to_stay_csv(&generate(&spec))).unwrap();
    path
}

/// Mock-predictor config over a synthetic dataset in `dir`.
pub fn mock_config(dir: &Path, users: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.stays_path = Some(write_synthetic(dir, users));
    cfg.output_dir = dir.join("out");
    cfg.predictor = Predictor::Mock;
    cfg
}

/// Copy of a results file with the wall-clock `timing` field removed.
pub fn strip_timing(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("timing");
            v.to_string()
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}
