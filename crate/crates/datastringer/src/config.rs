//! The use-cases configuration file that drives the whole engine.
//!
//! Two on-disk forms are accepted, discriminated by the top-level JSON
//! token:
//!
//! * extended: an object `{version, defaults, use_cases: [...]}` with
//!   named parameters;
//! * legacy: a top-level array of `{"stringer": <script name>,
//!   "parameters": [<positional strings>]}` entries, expanded to named
//!   parameters by stringer kind.
//!
//! Parameters stay strings at this layer (legacy files store numbers as
//! strings); validation coerces them per stringer kind.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use crate::ingest;
use crate::rules;
use crate::schedule;
use crate::util::{write_atomic, FileLock, LockError};

/// Built-in stringer kinds. The paper's user-authored script files map to
/// these (arbitrary code loading is out of scope); `expression_rule`
/// covers custom logic declaratively.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StringerKind {
    SnapshotDiff,
    CategoryThreshold,
    ExpressionRule,
}

impl StringerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StringerKind::SnapshotDiff => "snapshot_diff",
            StringerKind::CategoryThreshold => "category_threshold",
            StringerKind::ExpressionRule => "expression_rule",
        }
    }

    fn required_params(self) -> &'static [&'static str] {
        match self {
            StringerKind::SnapshotDiff => &["url"],
            StringerKind::CategoryThreshold => {
                &["url", "category_field", "numberOfMonths", "threshold"]
            }
            StringerKind::ExpressionRule => &["url", "rule"],
        }
    }
}

impl fmt::Display for StringerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One configured monitoring task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UseCase {
    pub id: String,
    pub stringer_kind: StringerKind,
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default)]
    pub parameters: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<String>,
    /// Sink names; empty inherits `defaults.sinks`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sinks: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub headline_template: Option<String>,
}

fn default_true() -> bool {
    true
}

impl UseCase {
    pub fn param(&self, name: &str) -> Option<&str> {
        self.parameters.get(name).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmtpAuth {
    pub username: String,
    pub password: String,
}

/// SMTP delivery settings: a local MTA by default, no auth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmtpSettings {
    #[serde(default = "default_smtp_host")]
    pub host: String,
    #[serde(default = "default_smtp_port")]
    pub port: u16,
    #[serde(default = "default_smtp_from")]
    pub from: String,
    #[serde(default)]
    pub to: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth: Option<SmtpAuth>,
}

fn default_smtp_host() -> String {
    "localhost".to_string()
}

fn default_smtp_port() -> u16 {
    25
}

fn default_smtp_from() -> String {
    "datastringer@localhost".to_string()
}

impl Default for SmtpSettings {
    fn default() -> Self {
        SmtpSettings {
            host: default_smtp_host(),
            port: default_smtp_port(),
            from: default_smtp_from(),
            to: Vec::new(),
            auth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileSinkSettings {
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WebhookSettings {
    pub url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_template: Option<String>,
}

/// Engine-wide defaults applied to use cases that do not override them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Defaults {
    /// Cron expression; daily at 12:00 when absent.
    #[serde(default = "default_schedule")]
    pub schedule: String,
    #[serde(default = "default_sinks")]
    pub sinks: Vec<String>,
    #[serde(default)]
    pub smtp: SmtpSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<FileSinkSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub webhook: Option<WebhookSettings>,
    /// "local" (cron convention) or "utc".
    #[serde(default = "default_timezone")]
    pub timezone: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parallelism: Option<usize>,
}

fn default_schedule() -> String {
    schedule::DEFAULT_SCHEDULE.to_string()
}

fn default_sinks() -> Vec<String> {
    vec!["stdout".to_string()]
}

fn default_timezone() -> String {
    "local".to_string()
}

impl Default for Defaults {
    fn default() -> Self {
        Defaults {
            schedule: default_schedule(),
            sinks: default_sinks(),
            smtp: SmtpSettings::default(),
            file: None,
            webhook: None,
            timezone: default_timezone(),
            parallelism: None,
        }
    }
}

/// The fully expanded configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigFile {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default)]
    pub defaults: Defaults,
    #[serde(default)]
    pub use_cases: Vec<UseCase>,
}

fn default_version() -> u32 {
    1
}

impl ConfigFile {
    pub fn use_case(&self, id: &str) -> Option<&UseCase> {
        self.use_cases.iter().find(|uc| uc.id == id)
    }

    /// Canonical extended-form serialization: pretty JSON, trailing newline.
    pub fn to_canonical_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("config serialization");
        text.push('\n');
        text
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Severity {
    Warning,
    Error,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Severity::Warning => f.write_str("warning"),
            Severity::Error => f.write_str("error"),
        }
    }
}

/// One validation finding. Error severity means the config must be
/// rejected for `run`.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub severity: Severity,
    /// Config location, e.g. `use_cases[crime].parameters.threshold`.
    pub path: String,
    pub message: String,
}

impl Diagnostic {
    fn error(path: impl Into<String>, message: impl Into<String>) -> Diagnostic {
        Diagnostic {
            severity: Severity::Error,
            path: path.into(),
            message: message.into(),
        }
    }

    fn warning(path: impl Into<String>, message: impl Into<String>) -> Diagnostic {
        Diagnostic {
            severity: Severity::Warning,
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}: {}", self.severity, self.path, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config file not found: {0}")]
    NotFound(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("use_cases[{index}]: unknown stringer kind {name:?}")]
    UnknownStringerKind { index: usize, name: String },
    #[error("use_cases[{index}] ({stringer}): missing positional parameter {missing:?} (expected {expected})")]
    MissingPositional {
        index: usize,
        stringer: String,
        missing: String,
        expected: usize,
    },
    #[error("use_cases[{index}] ({stringer}): {got} positional parameters, expected {expected}")]
    ExtraPositional {
        index: usize,
        stringer: String,
        got: usize,
        expected: usize,
    },
    #[error("unknown use case id {0:?}")]
    UnknownId(String),
    #[error(transparent)]
    Lock(#[from] LockError),
    #[error("writing {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

/// Legacy script names and their positional parameter mapping plus the
/// kind defaults a named-form entry would carry explicitly.
struct LegacyStringer {
    kind: StringerKind,
    positions: &'static [&'static str],
    defaults: &'static [(&'static str, &'static str)],
}

fn legacy_stringer(name: &str) -> Option<LegacyStringer> {
    let base = name.strip_suffix(".js").unwrap_or(name);
    match base {
        "crime-stringer" => Some(LegacyStringer {
            kind: StringerKind::CategoryThreshold,
            positions: &["lat", "lng", "numberOfMonths", "threshold"],
            defaults: &[
                (
                    "url",
                    "https://data.police.uk/api/crimes-street/all-crime?lat={lat}&lng={lng}&date={period}",
                ),
                ("category_field", "category"),
                ("place", "London"),
            ],
        }),
        "local-police-stringer" => Some(LegacyStringer {
            kind: StringerKind::SnapshotDiff,
            positions: &["force", "area"],
            defaults: &[("url", "https://data.police.uk/api/{force}/{area}/events")],
        }),
        _ => None,
    }
}

#[derive(Debug, Deserialize)]
struct LegacyEntry {
    stringer: String,
    #[serde(default)]
    parameters: Vec<String>,
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    enabled: Option<bool>,
    #[serde(default)]
    schedule: Option<String>,
    #[serde(default)]
    sinks: Option<Vec<String>>,
    #[serde(default)]
    headline_template: Option<String>,
}

/// Loads and fully expands a config file of either form.
pub fn load_config(path: &Path) -> Result<ConfigFile, ConfigError> {
    let text = read_config_text(path)?;
    parse_config(&text)
}

fn read_config_text(path: &Path) -> Result<String, ConfigError> {
    match std::fs::read_to_string(path) {
        Ok(text) => Ok(text),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(ConfigError::NotFound(path.display().to_string()))
        }
        Err(e) => Err(ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        }),
    }
}

/// Parses config text of either form (exposed for tests and tooling).
pub fn parse_config(text: &str) -> Result<ConfigFile, ConfigError> {
    let syntax = |e: &serde_json::Error| ConfigError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    };
    if is_legacy_form(text) {
        let entries: Vec<LegacyEntry> = serde_json::from_str(text).map_err(|e| syntax(&e))?;
        expand_legacy(entries)
    } else {
        serde_json::from_str(text).map_err(|e| syntax(&e))
    }
}

/// Legacy form is discriminated by the top-level token: an array.
fn is_legacy_form(text: &str) -> bool {
    text.trim_start().starts_with('[')
}

fn expand_legacy(entries: Vec<LegacyEntry>) -> Result<ConfigFile, ConfigError> {
    let mut use_cases = Vec::with_capacity(entries.len());
    for (index, entry) in entries.into_iter().enumerate() {
        let spec = legacy_stringer(&entry.stringer).ok_or_else(|| {
            ConfigError::UnknownStringerKind {
                index,
                name: entry.stringer.clone(),
            }
        })?;
        if entry.parameters.len() > spec.positions.len() {
            return Err(ConfigError::ExtraPositional {
                index,
                stringer: entry.stringer,
                got: entry.parameters.len(),
                expected: spec.positions.len(),
            });
        }
        if entry.parameters.len() < spec.positions.len() {
            return Err(ConfigError::MissingPositional {
                index,
                stringer: entry.stringer,
                missing: spec.positions[entry.parameters.len()].to_string(),
                expected: spec.positions.len(),
            });
        }
        let mut parameters: BTreeMap<String, String> = spec
            .positions
            .iter()
            .map(|n| n.to_string())
            .zip(entry.parameters)
            .collect();
        for (name, value) in spec.defaults {
            parameters
                .entry(name.to_string())
                .or_insert_with(|| value.to_string());
        }
        use_cases.push(UseCase {
            // Generated ids are positional; re-ordering a legacy file
            // changes them.
            id: entry.id.unwrap_or_else(|| format!("stringer-{index}")),
            stringer_kind: spec.kind,
            enabled: entry.enabled.unwrap_or(true),
            parameters,
            schedule: entry.schedule,
            sinks: entry.sinks.unwrap_or_default(),
            headline_template: entry.headline_template,
        });
    }
    Ok(ConfigFile {
        version: 1,
        defaults: Defaults::default(),
        use_cases,
    })
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

const KNOWN_SINKS: [&str; 4] = ["smtp", "stdout", "file", "webhook"];

/// Returns every invariant violation and type-coercion failure. An empty
/// list (no errors) means the config is runnable; the engine refuses
/// configs with error diagnostics.
pub fn validate(config: &ConfigFile) -> Vec<Diagnostic> {
    let mut out = Vec::new();

    if config.version != 1 {
        out.push(Diagnostic::warning(
            "version",
            format!("unknown format version {}, expected 1", config.version),
        ));
    }
    if let Err(e) = schedule::parse_cron(&config.defaults.schedule) {
        out.push(Diagnostic::error("defaults.schedule", e.to_string()));
    }
    if schedule::TimeZoneMode::parse(&config.defaults.timezone).is_none() {
        out.push(Diagnostic::error(
            "defaults.timezone",
            format!(
                "unknown timezone {:?}: expected \"local\" or \"utc\"",
                config.defaults.timezone
            ),
        ));
    }
    for sink in &config.defaults.sinks {
        validate_sink_name(sink, "defaults.sinks", config, &mut out);
    }

    let mut seen = BTreeMap::new();
    for uc in &config.use_cases {
        let at = |field: &str| format!("use_cases[{}].{field}", uc.id);

        if uc.id.is_empty()
            || !uc
                .id
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '-')
        {
            out.push(Diagnostic::error(
                at("id"),
                "id must be non-empty and match [a-z0-9_-]+",
            ));
        }
        if seen.insert(uc.id.clone(), ()).is_some() {
            out.push(Diagnostic::error(
                at("id"),
                format!("duplicate id {:?}", uc.id),
            ));
        }

        for required in uc.stringer_kind.required_params() {
            if uc.param(required).is_none() {
                out.push(Diagnostic::error(
                    format!("use_cases[{}].parameters.{required}", uc.id),
                    format!(
                        "parameter required by stringer kind {} is missing",
                        uc.stringer_kind
                    ),
                ));
            }
        }

        if let Some(schedule_text) = &uc.schedule {
            if let Err(e) = schedule::parse_cron(schedule_text) {
                out.push(Diagnostic::error(at("schedule"), e.to_string()));
            }
        }
        for sink in &uc.sinks {
            validate_sink_name(sink, &at("sinks"), config, &mut out);
        }

        validate_parameters(uc, &mut out);
    }
    out
}

fn validate_sink_name(sink: &str, path: &str, config: &ConfigFile, out: &mut Vec<Diagnostic>) {
    if !KNOWN_SINKS.contains(&sink) {
        out.push(Diagnostic::error(
            path,
            format!("unknown sink {sink:?}: expected one of {KNOWN_SINKS:?}"),
        ));
        return;
    }
    if sink == "smtp" && config.defaults.smtp.to.is_empty() {
        out.push(Diagnostic::error(
            "defaults.smtp.to",
            "smtp sink is used but no recipient addresses are configured",
        ));
    }
    if sink == "webhook" && config.defaults.webhook.is_none() {
        out.push(Diagnostic::error(
            "defaults.webhook",
            "webhook sink is used but defaults.webhook.url is not configured",
        ));
    }
}

fn validate_parameters(uc: &UseCase, out: &mut Vec<Diagnostic>) {
    let at = |param: &str| format!("use_cases[{}].parameters.{param}", uc.id);

    if let Some(months) = uc.param("numberOfMonths") {
        match months.parse::<u32>() {
            Ok(n) if n >= 1 => {}
            _ => out.push(Diagnostic::error(
                at("numberOfMonths"),
                format!("{months:?} is not a positive integer"),
            )),
        }
    }
    if let Some(threshold) = uc.param("threshold") {
        match threshold.parse::<Decimal>() {
            Ok(d) if d >= Decimal::ZERO => {}
            Ok(_) => out.push(Diagnostic::error(
                at("threshold"),
                format!("{threshold:?} must be non-negative"),
            )),
            Err(_) => out.push(Diagnostic::error(
                at("threshold"),
                format!("{threshold:?} is not a decimal number"),
            )),
        }
    }
    if let Some(direction) = uc.param("direction") {
        if !matches!(direction, "both" | "rise_only" | "fall_only") {
            out.push(Diagnostic::error(
                at("direction"),
                format!("{direction:?} is not one of both, rise_only, fall_only"),
            ));
        }
    }
    if let Some(format) = uc.param("format") {
        if ingest::SourceFormat::parse(format).is_none() {
            out.push(Diagnostic::error(
                at("format"),
                format!("{format:?} is not one of json, csv"),
            ));
        }
    }
    if let Some(has_header) = uc.param("has_header") {
        if has_header.parse::<bool>().is_err() {
            out.push(Diagnostic::error(
                at("has_header"),
                format!("{has_header:?} is not true or false"),
            ));
        }
    }
    if let Some(timeout) = uc.param("timeout_secs") {
        match timeout.parse::<u64>() {
            Ok(n) if n >= 1 => {}
            _ => out.push(Diagnostic::error(
                at("timeout_secs"),
                format!("{timeout:?} is not a positive integer"),
            )),
        }
    }
    if let Some(rule_text) = uc.param("rule") {
        if let Err(e) = rules::parse_rule(rule_text) {
            out.push(Diagnostic::error(at("rule"), e.to_string()));
        }
    }
    if let Some(template) = &uc.headline_template {
        if template.trim().is_empty() {
            out.push(Diagnostic::error(
                format!("use_cases[{}].headline_template", uc.id),
                "headline template must not be empty",
            ));
        }
    }
    if let Some(url) = uc.param("url") {
        match placeholders(url) {
            Ok(names) => {
                for name in names {
                    if name != "period" && uc.param(&name).is_none() {
                        out.push(Diagnostic::error(
                            at("url"),
                            format!("placeholder {{{name}}} is not resolvable from parameters"),
                        ));
                    }
                }
            }
            Err(e) => out.push(Diagnostic::error(at("url"), e.to_string())),
        }
    }
}

/// Placeholder names appearing in a template, or a template error.
fn placeholders(template: &str) -> Result<Vec<String>, ingest::IngestError> {
    // Rendering with a universal-lookup parameter map would be circular;
    // scan the same syntax render_url uses.
    let mut names = Vec::new();
    let mut rest = template;
    loop {
        match rest.find(['{', '}']) {
            None => return Ok(names),
            Some(i) => {
                let tail = &rest[i..];
                if tail.starts_with('}') {
                    return Err(ingest::IngestError::MalformedTemplate(
                        "unbalanced \"}\" without opening brace".into(),
                    ));
                }
                let after = &tail[1..];
                let Some(close) = after.find(['{', '}']) else {
                    return Err(ingest::IngestError::MalformedTemplate(
                        "unclosed \"{\" placeholder".into(),
                    ));
                };
                if after.as_bytes()[close] == b'{' {
                    return Err(ingest::IngestError::MalformedTemplate(
                        "nested \"{\" inside placeholder".into(),
                    ));
                }
                names.push(after[..close].to_string());
                rest = &after[close + 1..];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Editing
// ---------------------------------------------------------------------------

/// Rewrites the file with only the `enabled` flag of `id` changed,
/// preserving form (legacy stays legacy), key order and all other
/// content. Atomic: temp file + rename under an advisory lock.
pub fn set_enabled(path: &Path, id: &str, enabled: bool) -> Result<ConfigFile, ConfigError> {
    let lock_path = path.with_extension("lock");
    let _guard = FileLock::acquire(&lock_path)?;

    let text = read_config_text(path)?;
    let config = parse_config(&text)?;
    let position = config
        .use_cases
        .iter()
        .position(|uc| uc.id == id)
        .ok_or_else(|| ConfigError::UnknownId(id.to_string()))?;

    let syntax = |e: &serde_json::Error| ConfigError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    };
    let mut raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| syntax(&e))?;

    let entry = if is_legacy_form(&text) {
        raw.as_array_mut().and_then(|a| a.get_mut(position))
    } else {
        raw.get_mut("use_cases")
            .and_then(|u| u.as_array_mut())
            .and_then(|a| a.get_mut(position))
    };
    let Some(serde_json::Value::Object(object)) = entry else {
        return Err(ConfigError::UnknownId(id.to_string()));
    };
    object.insert("enabled".to_string(), serde_json::Value::Bool(enabled));

    let mut rendered = serde_json::to_string_pretty(&raw).expect("raw config serialization");
    rendered.push('\n');
    write_atomic(path, rendered.as_bytes()).map_err(|e| ConfigError::Write {
        path: path.display().to_string(),
        source: e,
    })?;

    parse_config(&rendered)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Illustration-style legacy file: the paper's two entries as a
    /// top-level array.
    pub(crate) const LEGACY_FIXTURE: &str = r#"[{
  "stringer": "local-police-stringer.js",
  "parameters": ["metropolitan", "00AGGU"]
}, {
  "stringer": "crime-stringer.js",
  "parameters": ["51.52863195218981", "-0.12342453002929688", "6", "10"]
}]"#;

    fn write_temp(text: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("use_cases.json");
        std::fs::write(&path, text).unwrap();
        (dir, path)
    }

    #[test]
    fn loads_legacy_fixture_with_paper_parameters() {
        let (_dir, path) = write_temp(LEGACY_FIXTURE);
        let config = load_config(&path).unwrap();
        assert_eq!(config.use_cases.len(), 2);

        let police = &config.use_cases[0];
        assert_eq!(police.id, "stringer-0");
        assert_eq!(police.stringer_kind, StringerKind::SnapshotDiff);
        assert!(police.enabled);
        assert_eq!(police.param("force"), Some("metropolitan"));
        assert_eq!(police.param("area"), Some("00AGGU"));

        let crime = &config.use_cases[1];
        assert_eq!(crime.id, "stringer-1");
        assert_eq!(crime.stringer_kind, StringerKind::CategoryThreshold);
        assert_eq!(crime.param("lat"), Some("51.52863195218981"));
        assert_eq!(crime.param("lng"), Some("-0.12342453002929688"));
        assert_eq!(crime.param("numberOfMonths"), Some("6"));
        assert_eq!(crime.param("threshold"), Some("10"));

        assert!(validate(&config).iter().all(|d| d.severity != Severity::Error));
    }

    #[test]
    fn empty_use_cases_is_valid() {
        let (_dir, path) = write_temp(r#"{"version": 1, "use_cases": []}"#);
        let config = load_config(&path).unwrap();
        assert!(config.use_cases.is_empty());
        assert!(validate(&config).is_empty());
        let (_dir2, path2) = write_temp("[]");
        assert!(load_config(&path2).unwrap().use_cases.is_empty());
    }

    #[test]
    fn legacy_arity_mismatch_names_missing_parameter() {
        let (_dir, path) = write_temp(
            r#"[{"stringer": "crime-stringer.js", "parameters": ["51.5", "-0.12", "6"]}]"#,
        );
        let err = load_config(&path).unwrap_err();
        match err {
            ConfigError::MissingPositional { missing, expected, .. } => {
                assert_eq!(missing, "threshold");
                assert_eq!(expected, 4);
            }
            other => panic!("expected MissingPositional, got {other:?}"),
        }
    }

    #[test]
    fn legacy_extra_positional_is_rejected() {
        let (_dir, path) = write_temp(
            r#"[{"stringer": "local-police-stringer.js", "parameters": ["a", "b", "c"]}]"#,
        );
        assert!(matches!(
            load_config(&path).unwrap_err(),
            ConfigError::ExtraPositional { got: 3, expected: 2, .. }
        ));
    }

    #[test]
    fn unknown_legacy_stringer_is_rejected() {
        let (_dir, path) =
            write_temp(r#"[{"stringer": "my-own-stringer.js", "parameters": []}]"#);
        assert!(matches!(
            load_config(&path).unwrap_err(),
            ConfigError::UnknownStringerKind { index: 0, .. }
        ));
    }

    #[test]
    fn missing_file_and_syntax_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_config(&dir.path().join("nope.json")).unwrap_err(),
            ConfigError::NotFound(_)
        ));
        let (_dir, path) = write_temp("{\n  \"version\": oops\n}");
        match load_config(&path).unwrap_err() {
            ConfigError::Syntax { line, column, .. } => {
                assert_eq!(line, 2);
                assert!(column > 0);
            }
            other => panic!("expected Syntax, got {other:?}"),
        }
    }

    #[test]
    fn legacy_expansion_is_deterministic() {
        let (_dir, path) = write_temp(LEGACY_FIXTURE);
        let a = load_config(&path).unwrap();
        let b = load_config(&path).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn extended_round_trip_preserves_value() {
        let (_dir, path) = write_temp(LEGACY_FIXTURE);
        let config = load_config(&path).unwrap();
        let serialized = config.to_canonical_json();
        let reparsed = parse_config(&serialized).unwrap();
        assert_eq!(reparsed, config);
    }

    fn extended_fixture() -> ConfigFile {
        parse_config(
            r#"{
  "version": 1,
  "defaults": {"sinks": ["stdout"]},
  "use_cases": [
    {
      "id": "crime",
      "stringer_kind": "category_threshold",
      "enabled": true,
      "parameters": {
        "url": "https://example.org/api?lat={lat}&lng={lng}&date={period}",
        "lat": "51.5",
        "lng": "-0.12",
        "numberOfMonths": "6",
        "threshold": "10",
        "category_field": "category",
        "place": "London"
      }
    }
  ]
}"#,
        )
        .unwrap()
    }

    #[test]
    fn valid_extended_config_has_no_diagnostics() {
        assert!(validate(&extended_fixture()).is_empty());
    }

    #[test]
    fn duplicate_ids_yield_one_error() {
        let mut config = extended_fixture();
        let mut dup = config.use_cases[0].clone();
        dup.enabled = false;
        config.use_cases.push(dup);
        let errors: Vec<_> = validate(&config)
            .into_iter()
            .filter(|d| d.severity == Severity::Error)
            .collect();
        assert_eq!(errors.len(), 1, "{errors:?}");
        assert!(errors[0].message.contains("duplicate"));
    }

    #[test]
    fn non_numeric_threshold_cites_parameter_path() {
        let mut config = extended_fixture();
        config.use_cases[0]
            .parameters
            .insert("threshold".into(), "abc".into());
        let diags = validate(&config);
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].severity, Severity::Error);
        assert_eq!(diags[0].path, "use_cases[crime].parameters.threshold");
    }

    #[test]
    fn numeric_coercions_are_checked() {
        let mut config = extended_fixture();
        config.use_cases[0]
            .parameters
            .insert("numberOfMonths".into(), "0".into());
        config.use_cases[0]
            .parameters
            .insert("threshold".into(), "-1".into());
        let diags = validate(&config);
        assert_eq!(diags.len(), 2);
    }

    #[test]
    fn missing_required_parameter_is_an_error() {
        let mut config = extended_fixture();
        config.use_cases[0].parameters.remove("category_field");
        let diags = validate(&config);
        assert_eq!(diags.len(), 1);
        assert_eq!(
            diags[0].path,
            "use_cases[crime].parameters.category_field"
        );
    }

    #[test]
    fn bad_schedule_and_unresolvable_placeholder() {
        let mut config = extended_fixture();
        config.use_cases[0].schedule = Some("0 25 * * *".into());
        config.use_cases[0].parameters.remove("lat");
        let diags = validate(&config);
        // missing lat (required? no — lat is not required for the kind, but
        // the url references {lat}) + bad schedule.
        assert!(diags.iter().any(|d| d.path.ends_with(".schedule")));
        assert!(diags
            .iter()
            .any(|d| d.path.ends_with(".url") && d.message.contains("{lat}")));
    }

    #[test]
    fn bad_rule_and_bad_id_are_errors() {
        let mut config = extended_fixture();
        config.use_cases[0].id = "Crime Stats".into();
        let mut rule_uc = config.use_cases[0].clone();
        rule_uc.id = "ruled".into();
        rule_uc.stringer_kind = StringerKind::ExpressionRule;
        rule_uc.parameters.insert("rule".into(), "count() >".into());
        rule_uc
            .parameters
            .insert("url".into(), "https://example.org/data".into());
        config.use_cases.push(rule_uc);
        let diags = validate(&config);
        assert!(diags.iter().any(|d| d.path == "use_cases[Crime Stats].id"));
        assert!(diags
            .iter()
            .any(|d| d.path == "use_cases[ruled].parameters.rule"));
    }

    #[test]
    fn empty_headline_template_is_an_error() {
        let mut config = extended_fixture();
        config.use_cases[0].headline_template = Some("  ".into());
        let diags = validate(&config);
        assert!(diags
            .iter()
            .any(|d| d.path == "use_cases[crime].headline_template"));
    }

    #[test]
    fn smtp_sink_without_recipients_is_an_error() {
        let mut config = extended_fixture();
        config.use_cases[0].sinks = vec!["smtp".into()];
        let diags = validate(&config);
        assert!(diags.iter().any(|d| d.path == "defaults.smtp.to"));
        config.defaults.smtp.to = vec!["desk@example.org".into()];
        assert!(validate(&config).is_empty());
    }

    #[test]
    fn unknown_sink_is_an_error() {
        let mut config = extended_fixture();
        config.defaults.sinks = vec!["pigeon".into()];
        let diags = validate(&config);
        assert!(diags.iter().any(|d| d.message.contains("pigeon")));
    }

    #[test]
    fn set_enabled_toggles_one_field() {
        let (_dir, path) = write_temp(extended_fixture().to_canonical_json().as_str());
        let config = set_enabled(&path, "crime", false).unwrap();
        assert!(!config.use_case("crime").unwrap().enabled);
        let reloaded = load_config(&path).unwrap();
        assert!(!reloaded.use_case("crime").unwrap().enabled);
        // Everything else unchanged.
        let mut expected = extended_fixture();
        expected.use_cases[0].enabled = false;
        assert_eq!(reloaded, expected);
    }

    #[test]
    fn set_enabled_is_idempotent_after_canonical_rewrite() {
        let (_dir, path) = write_temp(extended_fixture().to_canonical_json().as_str());
        set_enabled(&path, "crime", true).unwrap();
        let first = std::fs::read(&path).unwrap();
        set_enabled(&path, "crime", true).unwrap();
        let second = std::fs::read(&path).unwrap();
        assert_eq!(first, second, "file byte-identical after canonical rewrite");
    }

    #[test]
    fn set_enabled_unknown_id_leaves_file_untouched() {
        let (_dir, path) = write_temp(LEGACY_FIXTURE);
        let before = std::fs::read(&path).unwrap();
        let err = set_enabled(&path, "nope", false).unwrap_err();
        assert!(matches!(err, ConfigError::UnknownId(id) if id == "nope"));
        assert_eq!(std::fs::read(&path).unwrap(), before);
    }

    #[test]
    fn set_enabled_on_legacy_preserves_form_and_key_order() {
        let (_dir, path) = write_temp(LEGACY_FIXTURE);
        set_enabled(&path, "stringer-1", false).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.trim_start().starts_with('['), "legacy stays legacy");
        let stringer_pos = text.find("\"stringer\"").unwrap();
        let params_pos = text.find("\"parameters\"").unwrap();
        assert!(stringer_pos < params_pos, "key order preserved");
        let config = load_config(&path).unwrap();
        assert!(config.use_case("stringer-0").unwrap().enabled);
        assert!(!config.use_case("stringer-1").unwrap().enabled);
    }

    #[test]
    fn defaults_fill_in_when_absent() {
        let (_dir, path) = write_temp(r#"{"use_cases": []}"#);
        let config = load_config(&path).unwrap();
        assert_eq!(config.version, 1);
        assert_eq!(config.defaults.schedule, "0 12 * * *");
        assert_eq!(config.defaults.sinks, vec!["stdout".to_string()]);
        assert_eq!(config.defaults.smtp.host, "localhost");
        assert_eq!(config.defaults.smtp.port, 25);
        assert_eq!(config.defaults.timezone, "local");
    }
}
