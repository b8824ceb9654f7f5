// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scripted local HTTP server speaking the activation endpoint, for offline
//! resilience checks.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedReply {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: String,
    /// Hold the reply this long, to trip client timeouts.
    pub delay_ms: u64,
}

impl ScriptedReply {
    pub fn ok(body: impl Into<String>) -> Self {
        Self { status: 200, headers: Vec::new(), body: body.into(), delay_ms: 0 }
    }

    pub fn status(status: u16) -> Self {
        Self { status, headers: Vec::new(), body: String::new(), delay_ms: 0 }
    }

    pub fn rate_limited(retry_after_secs: Option<u64>) -> Self {
        let headers = retry_after_secs.map(|s| vec![("Retry-After".to_owned(), s.to_string())]).unwrap_or_default();
        Self { status: 429, headers, body: "slow down".into(), delay_ms: 0 }
    }

    pub fn stalled(delay_ms: u64, body: impl Into<String>) -> Self {
        Self { delay_ms, ..Self::ok(body) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordedRequest {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl RecordedRequest {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
    }
}

type Responder = dyn Fn(usize, &RecordedRequest) -> ScriptedReply + Send + Sync;

/// Serves until dropped. The responder sees the zero-based request index.
pub struct MockServer {
    addr: String,
    requests: Arc<Mutex<Vec<RecordedRequest>>>,
    _handle: JoinHandle<()>,
}

impl MockServer {
    pub fn start<F>(responder: F) -> std::io::Result<Self>
    where
        F: Fn(usize, &RecordedRequest) -> ScriptedReply + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = format!("http://{}", listener.local_addr()?);
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&requests);
        let responder: Arc<Responder> = Arc::new(responder);
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let (log, responder) = (Arc::clone(&log), Arc::clone(&responder));
                // One thread per connection so a stalled reply does not block retries.
                std::thread::spawn(move || {
                    let _ = serve_one(stream, &log, responder.as_ref());
                });
            }
        });
        Ok(Self { addr, requests, _handle: handle })
    }

    /// Replies from a fixed list; the last reply repeats.
    pub fn scripted(replies: Vec<ScriptedReply>) -> std::io::Result<Self> {
        assert!(!replies.is_empty(), "empty script");
        Self::start(move |i, _| replies[i.min(replies.len() - 1)].clone())
    }

    pub fn base_url(&self) -> &str {
        &self.addr
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.requests.lock().expect("poisoned").clone()
    }
}

fn serve_one(stream: TcpStream, log: &Mutex<Vec<RecordedRequest>>, responder: &Responder) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_owned();
    let path = parts.next().unwrap_or_default().to_owned();
    let mut headers = Vec::new();
    let mut len = 0usize;
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h)? == 0 || h.trim().is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            let (k, v) = (k.trim().to_owned(), v.trim().to_owned());
            if k.eq_ignore_ascii_case("content-length") {
                len = v.parse().unwrap_or(0);
            }
            headers.push((k, v));
        }
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body)?;
    let req = RecordedRequest { method, path, headers, body: String::from_utf8_lossy(&body).into() };
    let index = {
        let mut g = log.lock().expect("poisoned");
        g.push(req.clone());
        g.len() - 1
    };
    let reply = responder(index, &req);
    if reply.delay_ms > 0 {
        std::thread::sleep(std::time::Duration::from_millis(reply.delay_ms));
    }
    let mut out = format!(
        "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n",
        reply.status,
        reply.body.len()
    );
    for (k, v) in &reply.headers {
        out.push_str(&format!("{k}: {v}\r\n"));
    }
    out.push_str("\r\n");
    out.push_str(&reply.body);
    let mut stream = stream;
    stream.write_all(out.as_bytes())?;
    stream.flush()
}
