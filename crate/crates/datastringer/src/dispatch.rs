//! Alert delivery: SMTP to the local mail agent by default, plus
//! stdout/file/webhook sinks, exactly once per dedup key per sink.
//!
//! Dedup keys are recorded only after at least one sink succeeds, so a
//! draft whose every sink failed is retried on the next run
//! (at-least-once overall, at-most-once per key on success).

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine as _;
use chrono::{DateTime, Duration as ChronoDuration, SecondsFormat, Utc};
use sha2::{Digest, Sha256};

use crate::config::{SmtpAuth, SmtpSettings};
use crate::engine::{AlertDraft, DraftSeverity};
use crate::util::{write_atomic, FileLock};
use crate::value::Value;

/// Dedup entries older than this are pruned on open: bounded growth,
/// survives restarts.
pub const DEDUP_RETENTION_DAYS: i64 = 90;

/// A draft bound to its use case with a stable identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Alert {
    /// Content hash of dedup_key + headline + body; stable across
    /// re-dispatch attempts of the same draft.
    pub id: String,
    pub use_case_id: String,
    pub headline: String,
    pub body: String,
    pub metrics: BTreeMap<String, Value>,
    pub dedup_key: String,
    pub severity: DraftSeverity,
    pub created_at: DateTime<Utc>,
}

impl Alert {
    pub fn from_draft(draft: &AlertDraft, use_case_id: &str, created_at: DateTime<Utc>) -> Alert {
        let mut hasher = Sha256::new();
        hasher.update(draft.dedup_key.as_bytes());
        hasher.update(b"\n");
        hasher.update(draft.headline.as_bytes());
        hasher.update(b"\n");
        hasher.update(draft.body.as_bytes());
        Alert {
            id: hex::encode(hasher.finalize()),
            use_case_id: use_case_id.to_string(),
            headline: draft.headline.clone(),
            body: draft.body.clone(),
            metrics: draft.metrics.clone(),
            dedup_key: draft.dedup_key.clone(),
            severity: draft.severity,
            created_at,
        }
    }

    /// The JSON-lines form written by file/stdout sinks and posted by
    /// webhooks. Field order is fixed; metrics keys are sorted.
    pub fn to_json_line(&self) -> String {
        let mut out = String::from("{");
        let mut field = |name: &str, raw: &str, first: bool| {
            if !first {
                out.push(',');
            }
            out.push_str(&serde_json::to_string(name).expect("field name"));
            out.push(':');
            out.push_str(raw);
        };
        field("id", &json_str(&self.id), true);
        field("use_case_id", &json_str(&self.use_case_id), false);
        field("headline", &json_str(&self.headline), false);
        field("body", &json_str(&self.body), false);
        let mut metrics = String::from("{");
        for (i, (k, v)) in self.metrics.iter().enumerate() {
            if i > 0 {
                metrics.push(',');
            }
            metrics.push_str(&json_str(k));
            metrics.push(':');
            metrics.push_str(&v.render_json());
        }
        metrics.push('}');
        field("metrics", &metrics, false);
        field(
            "created_at",
            &json_str(&self.created_at.to_rfc3339_opts(SecondsFormat::Secs, true)),
            false,
        );
        out.push('}');
        out
    }
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization")
}

/// One delivery channel with its settings.
#[derive(Debug, Clone, PartialEq)]
pub enum SinkConfig {
    Smtp(SmtpSettings),
    Stdout,
    File { path: PathBuf },
    Webhook { url: String, body_template: Option<String> },
}

impl SinkConfig {
    pub fn name(&self) -> &'static str {
        match self {
            SinkConfig::Smtp(_) => "smtp",
            SinkConfig::Stdout => "stdout",
            SinkConfig::File { .. } => "file",
            SinkConfig::Webhook { .. } => "webhook",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DispatchError {
    #[error("dedup store {path}: {source}")]
    DedupIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Lock(#[from] crate::util::LockError),
}

/// Flat-file ledger of already-delivered dedup keys.
#[derive(Debug)]
pub struct DedupStore {
    path: PathBuf,
    entries: BTreeMap<String, DateTime<Utc>>,
}

impl DedupStore {
    /// Opens (or initializes) the ledger, pruning entries older than
    /// [`DEDUP_RETENTION_DAYS`] relative to `now`.
    pub fn open(path: impl Into<PathBuf>, now: DateTime<Utc>) -> Result<DedupStore, DispatchError> {
        let path = path.into();
        let io = |source| DispatchError::DedupIo {
            path: path.display().to_string(),
            source,
        };
        let mut entries = BTreeMap::new();
        match std::fs::read_to_string(&path) {
            Ok(text) => {
                for line in text.lines() {
                    let Some((stamp, key)) = line.split_once('\t') else {
                        continue;
                    };
                    let Ok(at) = DateTime::parse_from_rfc3339(stamp) else {
                        continue;
                    };
                    entries.insert(key.to_string(), at.with_timezone(&Utc));
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(io(e)),
        }
        let cutoff = now - ChronoDuration::days(DEDUP_RETENTION_DAYS);
        entries.retain(|_, at| *at >= cutoff);
        Ok(DedupStore { path, entries })
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Records a delivered key and persists the ledger (lock + atomic
    /// rewrite).
    pub fn record(&mut self, key: &str, now: DateTime<Utc>) -> Result<(), DispatchError> {
        self.entries.insert(key.to_string(), now);
        self.persist()
    }

    fn persist(&self) -> Result<(), DispatchError> {
        let io = |source| DispatchError::DedupIo {
            path: self.path.display().to_string(),
            source,
        };
        let _guard = FileLock::acquire(&self.path.with_extension("lock"))?;
        let mut body = String::new();
        for (key, at) in &self.entries {
            body.push_str(&at.to_rfc3339_opts(SecondsFormat::Secs, true));
            body.push('\t');
            body.push_str(key);
            body.push('\n');
        }
        write_atomic(&self.path, body.as_bytes()).map_err(io)
    }
}

/// Per-sink outcome for one alert.
#[derive(Debug, Clone, PartialEq)]
pub struct SinkResult {
    pub sink: String,
    pub outcome: Result<(), String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DeliveryOutcome {
    Delivered,
    SuppressedDuplicate,
    AllSinksFailed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeliveryRecord {
    pub alert_id: String,
    pub dedup_key: String,
    pub headline: String,
    pub severity: DraftSeverity,
    pub sink_results: Vec<SinkResult>,
    pub outcome: DeliveryOutcome,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DeliveryReport {
    pub records: Vec<DeliveryRecord>,
}

impl DeliveryReport {
    pub fn delivered(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.outcome == DeliveryOutcome::Delivered)
            .count()
    }

    pub fn suppressed(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.outcome == DeliveryOutcome::SuppressedDuplicate)
            .count()
    }

    pub fn failed(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.outcome == DeliveryOutcome::AllSinksFailed)
            .count()
    }
}

/// Delivers each not-yet-seen draft to every sink, recording per-sink
/// success or failure. Sinks run serially; multiple alerts go as
/// separate messages, never digested.
pub fn dispatch(
    drafts: &[AlertDraft],
    use_case_id: &str,
    sinks: &[SinkConfig],
    dedup: &mut DedupStore,
    now: DateTime<Utc>,
) -> Result<DeliveryReport, DispatchError> {
    let mut report = DeliveryReport::default();
    for draft in drafts {
        let alert = Alert::from_draft(draft, use_case_id, now);
        if dedup.contains(&draft.dedup_key) {
            report.records.push(DeliveryRecord {
                alert_id: alert.id,
                dedup_key: draft.dedup_key.clone(),
                headline: draft.headline.clone(),
                severity: draft.severity,
                sink_results: Vec::new(),
                outcome: DeliveryOutcome::SuppressedDuplicate,
            });
            continue;
        }
        let mut sink_results = Vec::with_capacity(sinks.len());
        for sink in sinks {
            let outcome = deliver_one(&alert, sink).map_err(|e| e.to_string());
            if let Err(e) = &outcome {
                log::warn!("sink {} failed for {}: {e}", sink.name(), draft.dedup_key);
            }
            sink_results.push(SinkResult {
                sink: sink.name().to_string(),
                outcome,
            });
        }
        let any_success = sink_results.iter().any(|r| r.outcome.is_ok());
        if any_success {
            dedup.record(&draft.dedup_key, now)?;
        }
        report.records.push(DeliveryRecord {
            alert_id: alert.id,
            dedup_key: draft.dedup_key.clone(),
            headline: draft.headline.clone(),
            severity: draft.severity,
            sink_results,
            outcome: if any_success {
                DeliveryOutcome::Delivered
            } else {
                DeliveryOutcome::AllSinksFailed
            },
        });
    }
    Ok(report)
}

fn deliver_one(alert: &Alert, sink: &SinkConfig) -> Result<(), SinkError> {
    match sink {
        SinkConfig::Smtp(settings) => send_smtp(alert, settings),
        SinkConfig::Stdout => {
            println!("{}", alert.to_json_line());
            Ok(())
        }
        SinkConfig::File { path } => write_file_sink(alert, path),
        SinkConfig::Webhook { url, body_template } => {
            post_webhook(alert, url, body_template.as_deref())
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SinkError {
    #[error("connection to {endpoint} failed: {message}")]
    Connection { endpoint: String, message: String },
    #[error("SMTP reply to {command}: {reply}")]
    SmtpReply { command: String, reply: String },
    #[error("write to {path} failed: {message}")]
    WriteFailed { path: String, message: String },
    #[error("webhook {url}: {message}")]
    Webhook { url: String, message: String },
}

// ---------------------------------------------------------------------------
// SMTP
// ---------------------------------------------------------------------------

/// One RFC 5321 transaction: EHLO, optional AUTH PLAIN, MAIL FROM, RCPT
/// TO per recipient, DATA, QUIT. The message is RFC 5322 text/plain
/// UTF-8 with Subject = headline (MIME-encoded when non-ASCII) and a
/// body of alert text, metrics table and use-case id.
pub fn send_smtp(alert: &Alert, settings: &SmtpSettings) -> Result<(), SinkError> {
    let endpoint = format!("{}:{}", settings.host, settings.port);
    let connect_err = |message: String| SinkError::Connection {
        endpoint: endpoint.clone(),
        message,
    };

    let addresses: Vec<_> = {
        use std::net::ToSocketAddrs;
        (settings.host.as_str(), settings.port)
            .to_socket_addrs()
            .map_err(|e| connect_err(e.to_string()))?
            .collect()
    };
    let stream = addresses
        .iter()
        .find_map(|addr| TcpStream::connect_timeout(addr, Duration::from_secs(10)).ok())
        .ok_or_else(|| connect_err("no reachable address".to_string()))?;
    stream
        .set_read_timeout(Some(Duration::from_secs(30)))
        .map_err(|e| connect_err(e.to_string()))?;
    stream
        .set_write_timeout(Some(Duration::from_secs(30)))
        .map_err(|e| connect_err(e.to_string()))?;
    let mut conn = SmtpConnection {
        reader: BufReader::new(stream.try_clone().map_err(|e| connect_err(e.to_string()))?),
        writer: stream,
        endpoint: endpoint.clone(),
    };

    conn.expect_reply("greeting", &[2])?;
    conn.command("EHLO localhost", &[2])?;
    if let Some(SmtpAuth { username, password }) = &settings.auth {
        let token = base64::engine::general_purpose::STANDARD
            .encode(format!("\0{username}\0{password}"));
        conn.command(&format!("AUTH PLAIN {token}"), &[2, 3])?;
    }
    conn.command(&format!("MAIL FROM:<{}>", settings.from), &[2])?;
    for recipient in &settings.to {
        conn.command(&format!("RCPT TO:<{recipient}>"), &[2])?;
    }
    conn.command("DATA", &[3])?;
    conn.write_raw(&rfc5322_message(alert, settings))?;
    conn.command(".", &[2])?;
    conn.command("QUIT", &[2])?;
    Ok(())
}

struct SmtpConnection {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    endpoint: String,
}

impl SmtpConnection {
    fn command(&mut self, command: &str, ok_classes: &[u8]) -> Result<(), SinkError> {
        self.write_raw(&format!("{command}\r\n"))?;
        self.expect_reply(command, ok_classes)
    }

    fn write_raw(&mut self, text: &str) -> Result<(), SinkError> {
        self.writer
            .write_all(text.as_bytes())
            .map_err(|e| SinkError::Connection {
                endpoint: self.endpoint.clone(),
                message: e.to_string(),
            })
    }

    /// Reads one (possibly multiline) reply and checks its status class.
    /// 4xx/5xx replies are carried verbatim.
    fn expect_reply(&mut self, command: &str, ok_classes: &[u8]) -> Result<(), SinkError> {
        let mut reply = String::new();
        loop {
            let mut line = String::new();
            let n = self
                .reader
                .read_line(&mut line)
                .map_err(|e| SinkError::Connection {
                    endpoint: self.endpoint.clone(),
                    message: e.to_string(),
                })?;
            if n == 0 {
                return Err(SinkError::Connection {
                    endpoint: self.endpoint.clone(),
                    message: "connection closed mid-reply".to_string(),
                });
            }
            let done = line.len() < 4 || line.as_bytes()[3] != b'-';
            reply.push_str(&line);
            if done {
                break;
            }
        }
        let class = reply.bytes().next().map(|b| b - b'0').unwrap_or(0);
        if ok_classes.contains(&class) {
            Ok(())
        } else {
            Err(SinkError::SmtpReply {
                command: command.to_string(),
                reply: reply.trim_end().to_string(),
            })
        }
    }
}

/// Builds the RFC 5322 message with CRLF line endings and dot-stuffing.
fn rfc5322_message(alert: &Alert, settings: &SmtpSettings) -> String {
    let mut body = alert.body.clone();
    body.push_str("\n\n-- metrics --\n");
    for (name, value) in &alert.metrics {
        body.push_str(&format!("{name}: {}\n", value.render()));
    }
    body.push_str(&format!("\nUse case: {}\nAlert id: {}\n", alert.use_case_id, alert.id));

    let mut message = String::new();
    message.push_str(&format!("From: <{}>\r\n", settings.from));
    let to_list: Vec<String> = settings.to.iter().map(|t| format!("<{t}>")).collect();
    message.push_str(&format!("To: {}\r\n", to_list.join(", ")));
    message.push_str(&format!("Subject: {}\r\n", encode_subject(&alert.headline)));
    message.push_str(&format!("Date: {}\r\n", alert.created_at.to_rfc2822()));
    message.push_str(&format!(
        "Message-ID: <{}@datastringer>\r\n",
        &alert.id[..32.min(alert.id.len())]
    ));
    message.push_str("MIME-Version: 1.0\r\n");
    message.push_str("Content-Type: text/plain; charset=utf-8\r\n");
    message.push_str("Content-Transfer-Encoding: 8bit\r\n");
    message.push_str("\r\n");
    for line in body.split('\n') {
        let line = line.strip_suffix('\r').unwrap_or(line);
        // Dot-stuffing per RFC 5321 §4.5.2.
        if line.starts_with('.') {
            message.push('.');
        }
        message.push_str(line);
        message.push_str("\r\n");
    }
    message
}

/// Pure-ASCII subjects pass through byte-for-byte; anything else becomes
/// an RFC 2047 UTF-8 encoded word.
fn encode_subject(headline: &str) -> String {
    if headline.is_ascii() {
        headline.to_string()
    } else {
        format!(
            "=?UTF-8?B?{}?=",
            base64::engine::general_purpose::STANDARD.encode(headline.as_bytes())
        )
    }
}

// ---------------------------------------------------------------------------
// File / webhook sinks
// ---------------------------------------------------------------------------

/// Appends one JSON line; a single O_APPEND write keeps lines whole.
fn write_file_sink(alert: &Alert, path: &Path) -> Result<(), SinkError> {
    let failed = |e: std::io::Error| SinkError::WriteFailed {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(failed)?;
        }
    }
    let mut line = alert.to_json_line();
    line.push('\n');
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(failed)?;
    file.write_all(line.as_bytes()).map_err(failed)?;
    Ok(())
}

/// POSTs the alert JSON (or a filled body template) with Content-Type
/// application/json.
fn post_webhook(alert: &Alert, url: &str, body_template: Option<&str>) -> Result<(), SinkError> {
    let body = match body_template {
        None => alert.to_json_line(),
        Some(template) => template
            .replace("{id}", &alert.id)
            .replace("{use_case_id}", &alert.use_case_id)
            .replace("{headline}", &alert.headline.replace('"', "\\\""))
            .replace("{dedup_key}", &alert.dedup_key),
    };
    let agent = ureq::AgentBuilder::new()
        .timeout(Duration::from_secs(30))
        .build();
    agent
        .post(url)
        .set("Content-Type", "application/json")
        .send_string(&body)
        .map(|_| ())
        .map_err(|e| SinkError::Webhook {
            url: url.to_string(),
            message: match e {
                ureq::Error::Status(code, _) => format!("HTTP {code}"),
                ureq::Error::Transport(t) => t.to_string(),
            },
        })
}
