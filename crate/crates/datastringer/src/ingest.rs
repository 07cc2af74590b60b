//! Fetching remote dataset payloads and normalizing JSON/CSV documents
//! into flat record sets.

use std::collections::BTreeMap;
use std::io::Read;
use std::time::Duration;

use percent_encoding::{utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};
use rust_decimal::Decimal;

use crate::value::{Period, Record, RecordSet, Value};

/// Everything except RFC 3986 unreserved characters gets percent-encoded.
const URL_VALUE: &AsciiSet = &NON_ALPHANUMERIC
    .remove(b'-')
    .remove(b'_')
    .remove(b'.')
    .remove(b'~');

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceFormat {
    Json,
    Csv,
}

impl SourceFormat {
    pub fn parse(s: &str) -> Option<SourceFormat> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Some(SourceFormat::Json),
            "csv" => Some(SourceFormat::Csv),
            _ => None,
        }
    }
}

/// Where and how to fetch one dataset.
#[derive(Debug, Clone)]
pub struct SourceSpec {
    /// URL with `{name}` placeholders; `{period}` is reserved for the
    /// canonical "YYYY-MM" of the period being fetched.
    pub url_template: String,
    pub format: SourceFormat,
    /// Path to the record array inside a JSON document, segments
    /// separated by "/". Absent means the document root.
    pub record_path: Option<String>,
    pub timeout: Duration,
    pub headers: BTreeMap<String, String>,
    /// CSV only: whether the first row names the columns.
    pub has_header: bool,
}

impl Default for SourceSpec {
    fn default() -> Self {
        SourceSpec {
            url_template: String::new(),
            format: SourceFormat::Json,
            record_path: None,
            timeout: Duration::from_secs(30),
            headers: BTreeMap::new(),
            has_header: true,
        }
    }
}

/// A fetched HTTP body before parsing.
#[derive(Debug, Clone)]
pub struct RawPayload {
    pub bytes: Vec<u8>,
    pub status: u16,
    pub content_type: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("unresolved placeholder {{{0}}}")]
    UnresolvedPlaceholder(String),
    #[error("malformed template: {0}")]
    MalformedTemplate(String),
    #[error("network failure fetching {url}: {message}")]
    Network { url: String, message: String },
    #[error("timeout fetching {url}")]
    Timeout { url: String },
    #[error("HTTP {status} from {url}")]
    HttpStatus { status: u16, url: String },
    #[error("redirect loop fetching {url}")]
    RedirectLoop { url: String },
    #[error("invalid JSON at line {line}, column {column}: {message}")]
    InvalidJson {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("record path {path:?}: segment {segment:?} not found")]
    RecordPathNotFound { path: String, segment: String },
    #[error("record path {0:?} does not locate an array")]
    NotAnArray(String),
    #[error("number {0:?} does not fit the exact decimal range")]
    NumberRange(String),
    #[error("source key {0:?} contains \".\", which collides with flattened paths")]
    DottedKey(String),
    #[error("ragged row at row {row}: {len} fields, expected {expected}")]
    RaggedRow {
        row: usize,
        len: usize,
        expected: usize,
    },
    #[error("unterminated quote in row starting at row {row}")]
    UnterminatedQuote { row: usize },
    #[error("payload is not valid UTF-8")]
    NotUtf8,
}

/// Replaces every `{name}` placeholder with its parameter value,
/// percent-encoded for URL safety. `{period}` is reserved and renders the
/// canonical "YYYY-MM".
pub fn render_url(
    template: &str,
    params: &BTreeMap<String, String>,
    period: Option<Period>,
) -> Result<String, IngestError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    loop {
        match rest.find(['{', '}']) {
            None => {
                out.push_str(rest);
                return Ok(out);
            }
            Some(i) => {
                let (before, brace_on) = rest.split_at(i);
                out.push_str(before);
                if brace_on.starts_with('}') {
                    return Err(IngestError::MalformedTemplate(
                        "unbalanced \"}\" without opening brace".into(),
                    ));
                }
                let after_open = &brace_on[1..];
                let Some(close) = after_open.find(['{', '}']) else {
                    return Err(IngestError::MalformedTemplate(
                        "unclosed \"{\" placeholder".into(),
                    ));
                };
                if after_open.as_bytes()[close] == b'{' {
                    return Err(IngestError::MalformedTemplate(
                        "nested \"{\" inside placeholder".into(),
                    ));
                }
                let name = &after_open[..close];
                let value = if name == "period" {
                    match period {
                        Some(p) => p.to_string(),
                        None => params
                            .get(name)
                            .cloned()
                            .ok_or_else(|| IngestError::UnresolvedPlaceholder(name.into()))?,
                    }
                } else {
                    params
                        .get(name)
                        .cloned()
                        .ok_or_else(|| IngestError::UnresolvedPlaceholder(name.into()))?
                };
                out.push_str(&utf8_percent_encode(&value, URL_VALUE).to_string());
                rest = &after_open[close + 1..];
            }
        }
    }
}

/// Blocking HTTP fetcher: bounded redirects, per-request timeout, one
/// retry on transient transport failures. Shareable across threads.
#[derive(Clone)]
pub struct Fetcher {
    agent: ureq::Agent,
}

impl Default for Fetcher {
    fn default() -> Self {
        Fetcher::new(Duration::from_secs(30))
    }
}

impl Fetcher {
    pub fn new(default_timeout: Duration) -> Fetcher {
        let agent = ureq::AgentBuilder::new()
            .redirects(5)
            .timeout(default_timeout)
            .build();
        Fetcher { agent }
    }

    /// GETs `url`, returning body bytes for 2xx responses.
    pub fn fetch(&self, source: &SourceSpec, url: &str) -> Result<RawPayload, IngestError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.fetch_once(source, url) {
                Err(IngestError::Network { .. }) if attempt == 1 => {
                    log::warn!("transient failure fetching {url}, retrying once");
                    continue;
                }
                other => return other,
            }
        }
    }

    fn fetch_once(&self, source: &SourceSpec, url: &str) -> Result<RawPayload, IngestError> {
        let mut request = self
            .agent
            .get(url)
            .timeout(source.timeout)
            .set("User-Agent", "datastringer/0.1");
        for (name, value) in &source.headers {
            request = request.set(name, value);
        }
        match request.call() {
            Ok(response) => {
                let status = response.status();
                let content_type = response.header("Content-Type").map(|s| s.to_string());
                let mut bytes = Vec::new();
                response
                    .into_reader()
                    .take(64 * 1024 * 1024)
                    .read_to_end(&mut bytes)
                    .map_err(|e| self.io_error(url, e))?;
                Ok(RawPayload {
                    bytes,
                    status,
                    content_type,
                })
            }
            Err(ureq::Error::Status(status, _)) => Err(IngestError::HttpStatus {
                status,
                url: url.to_string(),
            }),
            Err(ureq::Error::Transport(t)) => {
                let message = t.to_string();
                let lower = message.to_ascii_lowercase();
                if lower.contains("too many redirects") {
                    Err(IngestError::RedirectLoop {
                        url: url.to_string(),
                    })
                } else if lower.contains("timed out") || lower.contains("timeout") {
                    Err(IngestError::Timeout {
                        url: url.to_string(),
                    })
                } else {
                    Err(IngestError::Network {
                        url: url.to_string(),
                        message,
                    })
                }
            }
        }
    }

    fn io_error(&self, url: &str, e: std::io::Error) -> IngestError {
        if e.kind() == std::io::ErrorKind::TimedOut || e.kind() == std::io::ErrorKind::WouldBlock {
            IngestError::Timeout {
                url: url.to_string(),
            }
        } else {
            IngestError::Network {
                url: url.to_string(),
                message: e.to_string(),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

/// Parses a JSON document into a flat record set. The record array is the
/// document root unless `record_path` walks object keys to it. Nested
/// objects flatten to dotted keys; JSON numbers become exact decimals.
pub fn parse_json(bytes: &[u8], record_path: Option<&str>) -> Result<RecordSet, IngestError> {
    let doc: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| IngestError::InvalidJson {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;

    let path = record_path.unwrap_or("");
    let mut located = &doc;
    if !path.is_empty() {
        for segment in path.split('/') {
            located = located
                .as_object()
                .and_then(|o| o.get(segment))
                .ok_or_else(|| IngestError::RecordPathNotFound {
                    path: path.to_string(),
                    segment: segment.to_string(),
                })?;
        }
    }
    let array = located
        .as_array()
        .ok_or_else(|| IngestError::NotAnArray(path.to_string()))?;

    let mut records = Vec::with_capacity(array.len());
    for element in array {
        let mut record = Record::new();
        match element {
            serde_json::Value::Object(_) => flatten_into(&mut record, "", element)?,
            other => {
                record.insert("value".to_string(), scalar_value(other)?);
            }
        }
        records.push(record);
    }
    Ok(RecordSet::from_records(records))
}

fn flatten_into(
    record: &mut Record,
    prefix: &str,
    value: &serde_json::Value,
) -> Result<(), IngestError> {
    match value {
        serde_json::Value::Object(map) => {
            for (key, inner) in map {
                if key.contains('.') {
                    return Err(IngestError::DottedKey(key.clone()));
                }
                let flat_key = if prefix.is_empty() {
                    key.clone()
                } else {
                    format!("{prefix}.{key}")
                };
                match inner {
                    serde_json::Value::Object(_) => flatten_into(record, &flat_key, inner)?,
                    other => {
                        record.insert(flat_key, scalar_value(other)?);
                    }
                }
            }
            Ok(())
        }
        _ => unreachable!("flatten_into only called on objects"),
    }
}

fn scalar_value(value: &serde_json::Value) -> Result<Value, IngestError> {
    Ok(match value {
        serde_json::Value::Null => Value::Null,
        serde_json::Value::Bool(b) => Value::Bool(*b),
        serde_json::Value::Number(n) => {
            let literal = n.to_string();
            let decimal = literal
                .parse::<Decimal>()
                .or_else(|_| Decimal::from_scientific(&literal))
                .map_err(|_| IngestError::NumberRange(literal.clone()))?;
            Value::Number(decimal)
        }
        serde_json::Value::String(s) => Value::Text(s.clone()),
        // Arrays inside a record have no flat representation; keep the
        // JSON text so nothing is silently dropped.
        serde_json::Value::Array(_) => Value::Text(value.to_string()),
        serde_json::Value::Object(_) => unreachable!("objects flattened above"),
    })
}

// ---------------------------------------------------------------------------
// CSV (RFC 4180)
// ---------------------------------------------------------------------------

/// Parses RFC 4180 CSV: quoted fields, embedded commas/newlines, doubled
/// quotes. With a header the first row names the fields; otherwise
/// columns are "col1".."colN". All values stay text.
pub fn parse_csv(bytes: &[u8], has_header: bool) -> Result<RecordSet, IngestError> {
    let text = std::str::from_utf8(bytes).map_err(|_| IngestError::NotUtf8)?;
    let rows = csv_rows(text)?;
    let Some((first, rest)) = rows.split_first() else {
        return Ok(RecordSet::default());
    };

    let (field_names, data_rows): (Vec<String>, &[(usize, Vec<String>)]) = if has_header {
        (first.1.clone(), rest)
    } else {
        let names = (1..=first.1.len()).map(|i| format!("col{i}")).collect();
        (names, &rows[..])
    };

    let mut records = Vec::with_capacity(data_rows.len());
    for (row_number, fields) in data_rows {
        if fields.len() != field_names.len() {
            return Err(IngestError::RaggedRow {
                row: *row_number,
                len: fields.len(),
                expected: field_names.len(),
            });
        }
        let mut record = Record::new();
        for (name, value) in field_names.iter().zip(fields) {
            record.insert(name.clone(), Value::Text(value.clone()));
        }
        records.push(record);
    }
    Ok(RecordSet::from_records(records))
}

/// Splits CSV text into rows of unescaped fields, tagging each row with
/// its 1-based row number. Accepts both CRLF and LF terminators.
fn csv_rows(text: &str) -> Result<Vec<(usize, Vec<String>)>, IngestError> {
    enum State {
        FieldStart,
        Unquoted,
        Quoted,
        QuoteInQuoted,
    }

    let mut rows = Vec::new();
    let mut fields: Vec<String> = Vec::new();
    let mut field = String::new();
    let mut state = State::FieldStart;
    let mut row_number = 1;
    let mut row_start_number = 1;

    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        // Normalize CRLF to LF before the state machine sees it.
        let c = if c == '\r' && chars.peek() == Some(&'\n') {
            chars.next();
            '\n'
        } else {
            c
        };
        match state {
            State::FieldStart => match c {
                '"' => state = State::Quoted,
                ',' => fields.push(String::new()),
                '\n' => {
                    fields.push(String::new());
                    end_row(&mut rows, &mut fields, row_start_number);
                    row_number += 1;
                    row_start_number = row_number;
                }
                _ => {
                    field.push(c);
                    state = State::Unquoted;
                }
            },
            State::Unquoted => match c {
                ',' => {
                    fields.push(std::mem::take(&mut field));
                    state = State::FieldStart;
                }
                '\n' => {
                    fields.push(std::mem::take(&mut field));
                    end_row(&mut rows, &mut fields, row_start_number);
                    row_number += 1;
                    row_start_number = row_number;
                    state = State::FieldStart;
                }
                _ => field.push(c),
            },
            State::Quoted => match c {
                '"' => state = State::QuoteInQuoted,
                '\n' => {
                    field.push('\n');
                    row_number += 1;
                }
                _ => field.push(c),
            },
            State::QuoteInQuoted => match c {
                '"' => {
                    field.push('"');
                    state = State::Quoted;
                }
                ',' => {
                    fields.push(std::mem::take(&mut field));
                    state = State::FieldStart;
                }
                '\n' => {
                    fields.push(std::mem::take(&mut field));
                    end_row(&mut rows, &mut fields, row_start_number);
                    row_number += 1;
                    row_start_number = row_number;
                    state = State::FieldStart;
                }
                // Lenient: text after a closing quote joins the field.
                _ => {
                    field.push(c);
                    state = State::Unquoted;
                }
            },
        }
    }

    match state {
        State::Quoted => {
            return Err(IngestError::UnterminatedQuote {
                row: row_start_number,
            })
        }
        State::Unquoted | State::QuoteInQuoted => {
            fields.push(field);
            end_row(&mut rows, &mut fields, row_start_number);
        }
        State::FieldStart => {
            if !fields.is_empty() {
                fields.push(field);
                end_row(&mut rows, &mut fields, row_start_number);
            }
        }
    }
    Ok(rows)
}

fn end_row(rows: &mut Vec<(usize, Vec<String>)>, fields: &mut Vec<String>, row_number: usize) {
    rows.push((row_number, std::mem::take(fields)));
}

/// Serializes a record set back to CSV: header row of the sorted union of
/// field names, values rendered canonically, RFC 4180 quoting.
pub fn serialize_csv(record_set: &RecordSet) -> String {
    let mut names: Vec<&str> = Vec::new();
    for record in &record_set.records {
        for key in record.keys() {
            if !names.contains(&key.as_str()) {
                names.push(key);
            }
        }
    }
    names.sort_unstable();

    let mut out = String::new();
    out.push_str(
        &names
            .iter()
            .map(|n| csv_escape(n))
            .collect::<Vec<_>>()
            .join(","),
    );
    out.push('\n');
    for record in &record_set.records {
        let row: Vec<String> = names
            .iter()
            .map(|name| {
                record
                    .get(*name)
                    .map(|v| csv_escape(&v.render()))
                    .unwrap_or_default()
            })
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn csv_escape(value: &str) -> String {
    if value.contains(['"', ',', '\n', '\r']) {
        format!("\"{}\"", value.replace('"', "\"\""))
    } else {
        value.to_string()
    }
}
