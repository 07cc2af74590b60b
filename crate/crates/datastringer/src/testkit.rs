//! In-process fixture servers and a scriptable clock.
//!
//! Everything the engine talks to over the network can be stood up
//! locally: an HTTP fixture server for dataset payloads and an SMTP
//! capture server that records full RFC 5321 transactions. Used by the
//! test suites and the runnable examples, and handy for trying out a
//! stringer configuration without touching a live API.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use chrono::{DateTime, Utc};

// ---------------------------------------------------------------------------
// HTTP fixture server
// ---------------------------------------------------------------------------

/// A canned HTTP response.
#[derive(Debug, Clone)]
pub struct FixtureResponse {
    pub status: u16,
    pub content_type: String,
    pub body: Vec<u8>,
    /// Artificial delay before responding, for timeout tests.
    pub delay: Duration,
    /// When set, respond 302 with this Location and no body.
    pub redirect_to: Option<String>,
}

impl FixtureResponse {
    pub fn json(body: impl Into<Vec<u8>>) -> FixtureResponse {
        FixtureResponse {
            status: 200,
            content_type: "application/json".into(),
            body: body.into(),
            delay: Duration::ZERO,
            redirect_to: None,
        }
    }

    pub fn csv(body: impl Into<Vec<u8>>) -> FixtureResponse {
        FixtureResponse {
            content_type: "text/csv".into(),
            ..FixtureResponse::json(body)
        }
    }

    pub fn status(status: u16) -> FixtureResponse {
        FixtureResponse {
            status,
            ..FixtureResponse::json(Vec::new())
        }
    }

    pub fn redirect(location: &str) -> FixtureResponse {
        FixtureResponse {
            status: 302,
            redirect_to: Some(location.to_string()),
            ..FixtureResponse::json(Vec::new())
        }
    }

    pub fn with_delay(mut self, delay: Duration) -> FixtureResponse {
        self.delay = delay;
        self
    }
}

/// Minimal single-threaded HTTP/1.1 server keyed on exact path+query.
pub struct FixtureServer {
    addr: SocketAddr,
    routes: Arc<Mutex<HashMap<String, FixtureResponse>>>,
    hits: Arc<Mutex<Vec<String>>>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl FixtureServer {
    pub fn start() -> FixtureServer {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind fixture server");
        listener.set_nonblocking(true).expect("nonblocking listener");
        let addr = listener.local_addr().expect("local addr");
        let routes: Arc<Mutex<HashMap<String, FixtureResponse>>> =
            Arc::new(Mutex::new(HashMap::new()));
        let hits = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));

        let thread_routes = routes.clone();
        let thread_hits = hits.clone();
        let thread_stop = stop.clone();
        let handle = std::thread::spawn(move || loop {
            if thread_stop.load(Ordering::SeqCst) {
                break;
            }
            match listener.accept() {
                Ok((stream, _)) => {
                    if let Err(e) = serve_http(stream, &thread_routes, &thread_hits) {
                        log::debug!("fixture server connection error: {e}");
                    }
                }
                Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(2));
                }
                Err(e) => {
                    log::debug!("fixture server accept error: {e}");
                    break;
                }
            }
        });

        FixtureServer {
            addr,
            routes,
            hits,
            stop,
            handle: Some(handle),
        }
    }

    /// Base URL, e.g. `http://127.0.0.1:PORT`.
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Registers the response for an exact path (including query string).
    pub fn route(&self, path_and_query: &str, response: FixtureResponse) {
        self.routes
            .lock()
            .unwrap()
            .insert(path_and_query.to_string(), response);
    }

    /// Every path+query requested so far, in arrival order.
    pub fn requests(&self) -> Vec<String> {
        self.hits.lock().unwrap().clone()
    }
}

impl Drop for FixtureServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn serve_http(
    mut stream: TcpStream,
    routes: &Mutex<HashMap<String, FixtureResponse>>,
    hits: &Mutex<Vec<String>>,
) -> std::io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    let mut parts = request_line.split_whitespace();
    let method = parts.next().unwrap_or("GET").to_string();
    let target = parts.next().unwrap_or("/").to_string();
    // Drain headers, keeping Content-Length so request bodies are read.
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 || line == "\r\n" || line == "\n" {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                content_length = value.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut request_body = vec![0u8; content_length];
    if content_length > 0 {
        use std::io::Read;
        reader.read_exact(&mut request_body)?;
    }
    let hit = if method == "GET" {
        target.clone()
    } else {
        format!("{method} {target} {}", String::from_utf8_lossy(&request_body))
    };
    hits.lock().unwrap().push(hit);

    let response = routes.lock().unwrap().get(&target).cloned();
    let (status, reason, content_type, body, location, delay) = match response {
        Some(r) => {
            let reason = match r.status {
                200 => "OK",
                302 => "Found",
                404 => "Not Found",
                500 => "Internal Server Error",
                _ => "Status",
            };
            (r.status, reason, r.content_type, r.body, r.redirect_to, r.delay)
        }
        None => (
            404,
            "Not Found",
            "text/plain".to_string(),
            b"no fixture for this path".to_vec(),
            None,
            Duration::ZERO,
        ),
    };
    if !delay.is_zero() {
        std::thread::sleep(delay);
    }
    let mut head = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: {content_type}\r\nContent-Length: {}\r\nConnection: close\r\n",
        body.len()
    );
    if let Some(location) = location {
        head.push_str(&format!("Location: {location}\r\n"));
    }
    head.push_str("\r\n");
    stream.write_all(head.as_bytes())?;
    stream.write_all(&body)?;
    stream.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// SMTP capture server
// ---------------------------------------------------------------------------

/// One captured SMTP transaction.
#[derive(Debug, Clone, PartialEq)]
pub struct CapturedMail {
    pub helo: String,
    pub mail_from: String,
    pub rcpt_to: Vec<String>,
    /// Raw RFC 5322 message as transmitted in DATA (dot-unstuffed).
    pub data: String,
}

impl CapturedMail {
    /// Value of a header, unfolding continuation lines.
    pub fn header(&self, name: &str) -> Option<String> {
        let head = self.data.split("\r\n\r\n").next()?;
        let mut value: Option<String> = None;
        for line in head.split("\r\n") {
            if let Some(v) = &mut value {
                if line.starts_with(' ') || line.starts_with('\t') {
                    v.push_str(line.trim_start());
                    continue;
                }
                break;
            }
            let Some((key, rest)) = line.split_once(':') else {
                continue;
            };
            if key.eq_ignore_ascii_case(name) {
                value = Some(rest.trim_start().to_string());
            }
        }
        value
    }

    pub fn body(&self) -> &str {
        self.data
            .split_once("\r\n\r\n")
            .map(|(_, b)| b)
            .unwrap_or("")
    }
}

/// Minimal SMTP server that accepts any transaction and records it.
pub struct SmtpCaptureServer {
    addr: SocketAddr,
    messages: Arc<Mutex<Vec<CapturedMail>>>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl SmtpCaptureServer {
    pub fn start() -> SmtpCaptureServer {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind smtp capture server");
        listener.set_nonblocking(true).expect("nonblocking listener");
        let addr = listener.local_addr().expect("local addr");
        let messages: Arc<Mutex<Vec<CapturedMail>>> = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));

        let thread_messages = messages.clone();
        let thread_stop = stop.clone();
        let handle = std::thread::spawn(move || loop {
            if thread_stop.load(Ordering::SeqCst) {
                break;
            }
            match listener.accept() {
                Ok((stream, _)) => {
                    if let Err(e) = serve_smtp(stream, &thread_messages) {
                        log::debug!("smtp capture connection error: {e}");
                    }
                }
                Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(2));
                }
                Err(e) => {
                    log::debug!("smtp capture accept error: {e}");
                    break;
                }
            }
        });

        SmtpCaptureServer {
            addr,
            messages,
            stop,
            handle: Some(handle),
        }
    }

    pub fn host(&self) -> String {
        self.addr.ip().to_string()
    }

    pub fn port(&self) -> u16 {
        self.addr.port()
    }

    pub fn messages(&self) -> Vec<CapturedMail> {
        self.messages.lock().unwrap().clone()
    }
}

impl Drop for SmtpCaptureServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn serve_smtp(stream: TcpStream, messages: &Mutex<Vec<CapturedMail>>) -> std::io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    writer.write_all(b"220 capture.local ESMTP datastringer-testkit\r\n")?;

    let mut helo = String::new();
    let mut mail_from = String::new();
    let mut rcpt_to: Vec<String> = Vec::new();

    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let trimmed = line.trim_end().to_string();
        let upper = trimmed.to_ascii_uppercase();
        if upper.starts_with("EHLO") || upper.starts_with("HELO") {
            helo = trimmed
                .split_whitespace()
                .nth(1)
                .unwrap_or_default()
                .to_string();
            if upper.starts_with("EHLO") {
                writer.write_all(b"250-capture.local\r\n250 AUTH PLAIN\r\n")?;
            } else {
                writer.write_all(b"250 capture.local\r\n")?;
            }
        } else if upper.starts_with("AUTH") {
            writer.write_all(b"235 2.7.0 Authentication successful\r\n")?;
        } else if upper.starts_with("MAIL FROM:") {
            mail_from = strip_angle_brackets(&trimmed["MAIL FROM:".len()..]);
            writer.write_all(b"250 OK\r\n")?;
        } else if upper.starts_with("RCPT TO:") {
            rcpt_to.push(strip_angle_brackets(&trimmed["RCPT TO:".len()..]));
            writer.write_all(b"250 OK\r\n")?;
        } else if upper == "DATA" {
            writer.write_all(b"354 End data with <CR><LF>.<CR><LF>\r\n")?;
            let mut data = String::new();
            loop {
                let mut data_line = String::new();
                if reader.read_line(&mut data_line)? == 0 {
                    return Ok(());
                }
                if data_line == ".\r\n" || data_line == ".\n" {
                    break;
                }
                // Dot-unstuffing per RFC 5321 §4.5.2.
                match data_line.strip_prefix('.') {
                    Some(rest) => data.push_str(rest),
                    None => data.push_str(&data_line),
                }
            }
            messages.lock().unwrap().push(CapturedMail {
                helo: helo.clone(),
                mail_from: mail_from.clone(),
                rcpt_to: rcpt_to.clone(),
                data,
            });
            mail_from.clear();
            rcpt_to.clear();
            writer.write_all(b"250 OK: queued\r\n")?;
        } else if upper == "RSET" {
            mail_from.clear();
            rcpt_to.clear();
            writer.write_all(b"250 OK\r\n")?;
        } else if upper == "QUIT" {
            writer.write_all(b"221 Bye\r\n")?;
            return Ok(());
        } else if upper == "NOOP" {
            writer.write_all(b"250 OK\r\n")?;
        } else {
            writer.write_all(b"502 Command not implemented\r\n")?;
        }
    }
}

fn strip_angle_brackets(s: &str) -> String {
    let s = s.trim();
    s.trim_start_matches('<').trim_end_matches('>').to_string()
}

// ---------------------------------------------------------------------------
// Manual clock
// ---------------------------------------------------------------------------

use crate::schedule::Clock;

/// A fully scripted clock. `sleep_until` jumps time forward: either to
/// the next scripted instant (which may overshoot the requested wake-up,
/// simulating a machine asleep past its slot) or to the requested instant
/// itself. When the script runs out, the stop flag is raised so loops
/// exit cleanly.
pub struct ManualClock {
    now: Mutex<DateTime<Utc>>,
    script: Mutex<Vec<DateTime<Utc>>>,
}

impl ManualClock {
    pub fn starting_at(start: DateTime<Utc>) -> ManualClock {
        ManualClock {
            now: Mutex::new(start),
            script: Mutex::new(Vec::new()),
        }
    }

    /// Queues instants that successive `sleep_until` calls will jump to.
    pub fn script_wakeups(&self, instants: &[DateTime<Utc>]) {
        self.script.lock().unwrap().extend_from_slice(instants);
    }

    pub fn set(&self, now: DateTime<Utc>) {
        *self.now.lock().unwrap() = now;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.now.lock().unwrap()
    }

    fn sleep_until(&self, until: DateTime<Utc>, stop: &AtomicBool) {
        let mut script = self.script.lock().unwrap();
        let mut now = self.now.lock().unwrap();
        if script.is_empty() {
            stop.store(true, Ordering::SeqCst);
            *now = (*now).max(until);
            return;
        }
        // Sleep at least as long as asked; a scripted instant past the
        // requested wake-up simulates a machine suspended through it.
        let wake = script.remove(0);
        *now = (*now).max(until).max(wake);
    }
}
