//! Command surface: scaffold, validate, manage, test and run use cases.
//!
//! Exit codes are stable: 0 success, 1 validation/run failure, 2 I/O
//! failure, 3 refusal (target exists), 4 unknown id. Human-readable
//! output goes to stdout, diagnostics to stderr, machine output (test
//! and run reports) is JSON-lines on stdout.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use chrono::{DateTime, SecondsFormat, Utc};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{self, ConfigFile, Defaults, Severity, SmtpSettings, StringerKind, UseCase};
use crate::dispatch::{dispatch, Alert, DedupStore, DeliveryReport, SinkConfig};
use crate::engine::{self, StringerContext};
use crate::ingest::Fetcher;
use crate::schedule::{self, Clock, SystemClock, TimeZoneMode};
use crate::snapshot::SnapshotStore;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_REFUSED: i32 = 3;
pub const EXIT_UNKNOWN_ID: i32 = 4;

/// Fixed-instant clock, selected via the DATASTRINGER_NOW environment
/// variable (RFC 3339). Meant for reproducible `run --once` invocations;
/// in loop mode it raises stop after the first sleep.
struct FixedClock(DateTime<Utc>);

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        self.0
    }

    fn sleep_until(&self, _until: DateTime<Utc>, stop: &AtomicBool) {
        stop.store(true, Ordering::SeqCst);
    }
}

#[derive(Parser)]
#[command(
    name = "datastringer",
    version,
    about = "Config-driven dataset monitoring and alerting for journalists"
)]
struct Cli {
    /// Use-cases config file (default: <home>/use_cases.json)
    #[arg(long, global = true, env = "DATASTRINGER_CONFIG")]
    config: Option<PathBuf>,
    /// Data directory for snapshots, the dedup ledger and run state
    /// (default: ~/.datastringer)
    #[arg(long, global = true, env = "DATASTRINGER_HOME")]
    home: Option<PathBuf>,
    /// Restrict dispatch to one sink name (smtp, stdout, file, webhook)
    #[arg(long, global = true)]
    sink: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scaffold a home directory with a starter config (both example use cases)
    Init {
        /// Target directory (default: the resolved home)
        directory: Option<PathBuf>,
        /// Overwrite an existing config
        #[arg(long)]
        force: bool,
    },
    /// Check the config file; exits 0 iff there are no errors
    Validate,
    /// Show every use case with its state
    List,
    /// Turn a use case on
    Enable { id: String },
    /// Turn a use case off
    Disable { id: String },
    /// Dry-run one use case: drafts printed, nothing dispatched, nothing saved
    Test { id: String },
    /// Run enabled use cases: --once runs now and exits (the crontab
    /// entry point); without it, stay resident and follow the schedules
    Run {
        #[arg(long)]
        once: bool,
    },
    /// Manage the user crontab entry (daily at 12:00)
    Schedule {
        #[command(subcommand)]
        action: ScheduleAction,
    },
}

#[derive(Subcommand)]
enum ScheduleAction {
    Install,
    Uninstall,
}

/// Parses process arguments and runs; returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    run(cli)
}

fn run(cli: Cli) -> i32 {
    let home = resolve_home(cli.home.as_deref());
    let config_path = cli
        .config
        .clone()
        .unwrap_or_else(|| home.join("use_cases.json"));

    match cli.command {
        Command::Init { directory, force } => cmd_init(directory.as_deref().unwrap_or(&home), force),
        Command::Validate => cmd_validate(&config_path),
        Command::List => cmd_list(&config_path, &home),
        Command::Enable { id } => cmd_set_enabled(&config_path, &id, true),
        Command::Disable { id } => cmd_set_enabled(&config_path, &id, false),
        Command::Test { id } => cmd_test(&config_path, &home, &id),
        Command::Run { once } => cmd_run(&config_path, &home, cli.sink.as_deref(), once),
        Command::Schedule { action } => cmd_schedule(&config_path, action),
    }
}

fn resolve_home(flag: Option<&Path>) -> PathBuf {
    if let Some(home) = flag {
        return home.to_path_buf();
    }
    let user_home = std::env::var_os("HOME")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    user_home.join(".datastringer")
}

fn resolve_clock() -> Box<dyn Clock> {
    match std::env::var("DATASTRINGER_NOW") {
        Ok(text) => match DateTime::parse_from_rfc3339(&text) {
            Ok(t) => Box::new(FixedClock(t.with_timezone(&Utc))),
            Err(e) => {
                eprintln!("warning: ignoring invalid DATASTRINGER_NOW {text:?}: {e}");
                Box::new(SystemClock)
            }
        },
        Err(_) => Box::new(SystemClock),
    }
}

fn config_error_exit(e: &config::ConfigError) -> i32 {
    match e {
        config::ConfigError::NotFound(_) | config::ConfigError::Io { .. } => EXIT_IO,
        config::ConfigError::UnknownId(_) => EXIT_UNKNOWN_ID,
        config::ConfigError::Lock(_) | config::ConfigError::Write { .. } => EXIT_IO,
        _ => EXIT_FAILURE,
    }
}

/// Loads and validates; on error diagnostics, prints them and returns
/// the exit code instead of a config.
fn load_validated(config_path: &Path) -> Result<ConfigFile, i32> {
    let config = match config::load_config(config_path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return Err(config_error_exit(&e));
        }
    };
    let diagnostics = config::validate(&config);
    for d in &diagnostics {
        eprintln!("{d}");
    }
    if diagnostics.iter().any(|d| d.severity == Severity::Error) {
        return Err(EXIT_FAILURE);
    }
    Ok(config)
}

// ---------------------------------------------------------------------------
// init
// ---------------------------------------------------------------------------

fn starter_config() -> ConfigFile {
    let uc = |id: &str, kind: StringerKind, params: &[(&str, &str)]| UseCase {
        id: id.to_string(),
        stringer_kind: kind,
        enabled: true,
        parameters: params
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
        schedule: None,
        sinks: Vec::new(),
        headline_template: None,
    };
    ConfigFile {
        version: 1,
        defaults: Defaults {
            smtp: SmtpSettings {
                to: vec![],
                ..SmtpSettings::default()
            },
            ..Defaults::default()
        },
        use_cases: vec![
            uc(
                "local-police",
                StringerKind::SnapshotDiff,
                &[
                    ("url", "https://example.org/api/{force}/{area}/events.json"),
                    ("format", "json"),
                    ("force", "metropolitan"),
                    ("area", "00AGGU"),
                    ("key_fields", "id"),
                ],
            ),
            uc(
                "crime",
                StringerKind::CategoryThreshold,
                &[
                    (
                        "url",
                        "https://example.org/api/crimes?lat={lat}&lng={lng}&date={period}",
                    ),
                    ("format", "json"),
                    ("lat", "51.52863195218981"),
                    ("lng", "-0.12342453002929688"),
                    ("numberOfMonths", "6"),
                    ("threshold", "10"),
                    ("category_field", "category"),
                    ("place", "London"),
                ],
            ),
        ],
    }
}

fn cmd_init(directory: &Path, force: bool) -> i32 {
    let config_path = directory.join("use_cases.json");
    if config_path.exists() && !force {
        eprintln!(
            "error: {} already exists (use --force to overwrite)",
            config_path.display()
        );
        return EXIT_REFUSED;
    }
    let layout = [directory.join("snapshots")];
    for dir in &layout {
        if let Err(e) = std::fs::create_dir_all(dir) {
            eprintln!("error: creating {}: {e}", dir.display());
            return EXIT_IO;
        }
    }
    let config = starter_config();
    if let Err(e) = std::fs::write(&config_path, config.to_canonical_json()) {
        eprintln!("error: writing {}: {e}", config_path.display());
        return EXIT_IO;
    }
    println!("initialized {}", directory.display());
    println!("  config:    {}", config_path.display());
    println!("  snapshots: {}", directory.join("snapshots").display());
    println!("edit the config's placeholder URLs, then: datastringer --home {} validate", directory.display());
    EXIT_OK
}

// ---------------------------------------------------------------------------
// validate / list / enable / disable
// ---------------------------------------------------------------------------

fn cmd_validate(config_path: &Path) -> i32 {
    match load_validated(config_path) {
        Ok(_) => EXIT_OK,
        Err(code) => code,
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct RunState {
    #[serde(default)]
    use_cases: BTreeMap<String, UseCaseState>,
}

#[derive(Debug, Serialize, Deserialize)]
struct UseCaseState {
    last_run: DateTime<Utc>,
    last_alert_count: usize,
}

fn run_state_path(home: &Path) -> PathBuf {
    home.join("run_state.json")
}

fn load_run_state(home: &Path) -> RunState {
    std::fs::read(run_state_path(home))
        .ok()
        .and_then(|bytes| serde_json::from_slice(&bytes).ok())
        .unwrap_or_default()
}

fn save_run_state(home: &Path, state: &RunState) {
    let bytes = serde_json::to_vec_pretty(state).expect("run state serialization");
    if let Err(e) = crate::util::write_atomic(&run_state_path(home), &bytes) {
        eprintln!("warning: could not write run state: {e}");
    }
}

fn cmd_list(config_path: &Path, home: &Path) -> i32 {
    let config = match config::load_config(config_path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return config_error_exit(&e);
        }
    };
    let state = load_run_state(home);
    let mut rows = vec![[
        "ID".to_string(),
        "KIND".to_string(),
        "ENABLED".to_string(),
        "SCHEDULE".to_string(),
        "LAST-RUN".to_string(),
        "LAST-ALERTS".to_string(),
    ]];
    for uc in &config.use_cases {
        let uc_state = state.use_cases.get(&uc.id);
        rows.push([
            uc.id.clone(),
            uc.stringer_kind.to_string(),
            uc.enabled.to_string(),
            uc.schedule
                .clone()
                .unwrap_or_else(|| format!("{} (default)", config.defaults.schedule)),
            uc_state
                .map(|s| s.last_run.to_rfc3339_opts(SecondsFormat::Secs, true))
                .unwrap_or_else(|| "never".to_string()),
            uc_state
                .map(|s| s.last_alert_count.to_string())
                .unwrap_or_else(|| "-".to_string()),
        ]);
    }
    let widths: Vec<usize> = (0..6)
        .map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0))
        .collect();
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        println!("{}", line.join("  ").trim_end());
    }
    EXIT_OK
}

fn cmd_set_enabled(config_path: &Path, id: &str, enabled: bool) -> i32 {
    match config::set_enabled(config_path, id, enabled) {
        Ok(config) => {
            let uc = config.use_case(id).expect("id just edited");
            println!(
                "{} is now {}",
                uc.id,
                if uc.enabled { "enabled" } else { "disabled" }
            );
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            config_error_exit(&e)
        }
    }
}

// ---------------------------------------------------------------------------
// test (dry run)
// ---------------------------------------------------------------------------

fn cmd_test(config_path: &Path, home: &Path, id: &str) -> i32 {
    let config = match load_validated(config_path) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let Some(uc) = config.use_case(id) else {
        eprintln!("error: unknown use case id {id:?}");
        return EXIT_UNKNOWN_ID;
    };

    // Read-only overlay: the real store is copied into a temp dir, so
    // neither snapshots nor the dedup ledger are touched.
    let overlay = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: creating overlay dir: {e}");
            return EXIT_IO;
        }
    };
    let overlay_snapshots = overlay.path().join("snapshots");
    let real_uc_dir = home.join("snapshots").join(&uc.id);
    if real_uc_dir.is_dir() {
        if let Err(e) = copy_dir(&real_uc_dir, &overlay_snapshots.join(&uc.id)) {
            eprintln!("error: copying store overlay: {e}");
            return EXIT_IO;
        }
    }

    let clock = resolve_clock();
    let now = clock.now();
    let store = SnapshotStore::open(&overlay_snapshots);
    let fetcher = Fetcher::default();
    let ctx = StringerContext {
        now,
        store: &store,
        fetcher: &fetcher,
    };
    let mut test_uc = uc.clone();
    test_uc.enabled = true; // dry-run works on disabled use cases too

    match engine::run_use_case(&test_uc, &ctx) {
        Ok(drafts) => {
            let mut had_errors = false;
            for draft in &drafts {
                if draft.metrics.contains_key("error") {
                    had_errors = true;
                }
                println!("{}", Alert::from_draft(draft, &uc.id, now).to_json_line());
            }
            eprintln!("{} draft(s)", drafts.len());
            if had_errors {
                EXIT_FAILURE
            } else {
                EXIT_OK
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn copy_dir(from: &Path, to: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(to)?;
    for entry in std::fs::read_dir(from)? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            std::fs::copy(entry.path(), to.join(entry.file_name()))?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

fn resolve_sinks(
    config: &ConfigFile,
    uc: &UseCase,
    home: &Path,
    only: Option<&str>,
) -> Vec<SinkConfig> {
    let names = if uc.sinks.is_empty() {
        &config.defaults.sinks
    } else {
        &uc.sinks
    };
    let mut resolved = Vec::new();
    for name in names {
        if only.is_some_and(|o| o != name) {
            continue;
        }
        match name.as_str() {
            "smtp" => resolved.push(SinkConfig::Smtp(config.defaults.smtp.clone())),
            "stdout" => resolved.push(SinkConfig::Stdout),
            "file" => {
                let path = config
                    .defaults
                    .file
                    .as_ref()
                    .map(|f| {
                        let p = PathBuf::from(&f.path);
                        if p.is_absolute() {
                            p
                        } else {
                            home.join(p)
                        }
                    })
                    .unwrap_or_else(|| home.join("alerts.jsonl"));
                resolved.push(SinkConfig::File { path });
            }
            "webhook" => {
                if let Some(webhook) = &config.defaults.webhook {
                    resolved.push(SinkConfig::Webhook {
                        url: webhook.url.clone(),
                        body_template: webhook.body_template.clone(),
                    });
                }
            }
            _ => {} // validate() already rejected unknown names
        }
    }
    resolved
}

fn report_line(use_case_id: &str, at: DateTime<Utc>, drafts: usize, stories: usize, report: &DeliveryReport) -> String {
    format!(
        concat!(
            "{{\"event\":\"run\",\"use_case\":{},\"at\":{},\"drafts\":{},\"stories\":{},",
            "\"delivered\":{},\"suppressed\":{},\"failed\":{}}}"
        ),
        serde_json::to_string(use_case_id).expect("id"),
        serde_json::to_string(&at.to_rfc3339_opts(SecondsFormat::Secs, true)).expect("time"),
        drafts,
        stories,
        report.delivered(),
        report.suppressed(),
        report.failed(),
    )
}

/// Runs the given (enabled) use cases once and dispatches the drafts.
/// Returns false when anything failed hard enough to exit non-zero.
fn run_batch(
    config: &ConfigFile,
    use_cases: &[&UseCase],
    home: &Path,
    sink_filter: Option<&str>,
    now: DateTime<Utc>,
) -> bool {
    let store = SnapshotStore::open(home.join("snapshots"));
    let fetcher = Fetcher::default();
    let ctx = StringerContext {
        now,
        store: &store,
        fetcher: &fetcher,
    };
    let runs = engine::run_all(use_cases, &ctx, config.defaults.parallelism);

    let mut dedup = match DedupStore::open(home.join("dedup.keys"), now) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: {e}");
            return false;
        }
    };
    let mut state = load_run_state(home);
    let mut ok = true;
    for run in &runs {
        let uc = config.use_case(&run.use_case_id).expect("ran from config");
        let sinks = resolve_sinks(config, uc, home, sink_filter);
        let report = match dispatch(&run.drafts, &run.use_case_id, &sinks, &mut dedup, now) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("error: {e}");
                ok = false;
                continue;
            }
        };
        let stories = run
            .drafts
            .iter()
            .filter(|d| d.severity == engine::DraftSeverity::Story)
            .count();
        println!("{}", report_line(&run.use_case_id, now, run.drafts.len(), stories, &report));
        if let Some(error) = &run.error {
            eprintln!("warning: use case {} failed: {error}", run.use_case_id);
        }
        state.use_cases.insert(
            run.use_case_id.clone(),
            UseCaseState {
                last_run: now,
                last_alert_count: stories,
            },
        );
    }
    save_run_state(home, &state);
    ok
}

static STOP: AtomicBool = AtomicBool::new(false);

extern "C" fn handle_stop_signal(_sig: i32) {
    STOP.store(true, Ordering::SeqCst);
}

fn install_stop_handler() {
    // SIGINT and SIGTERM request a clean exit between (or during) sleeps.
    let handler = handle_stop_signal as extern "C" fn(i32) as usize;
    unsafe {
        libc::signal(libc::SIGINT, handler);
        libc::signal(libc::SIGTERM, handler);
    }
}

fn cmd_run(config_path: &Path, home: &Path, sink_filter: Option<&str>, once: bool) -> i32 {
    // Config errors exit before any network activity.
    let config = match load_validated(config_path) {
        Ok(c) => c,
        Err(code) => return code,
    };
    if let Err(e) = std::fs::create_dir_all(home) {
        eprintln!("error: creating {}: {e}", home.display());
        return EXIT_IO;
    }
    let clock = resolve_clock();
    let enabled: Vec<&UseCase> = config.use_cases.iter().filter(|uc| uc.enabled).collect();

    if once {
        let ok = run_batch(&config, &enabled, home, sink_filter, clock.now());
        return if ok { EXIT_OK } else { EXIT_FAILURE };
    }

    // Loop mode: follow each use case's schedule (or the default).
    let tz = TimeZoneMode::parse(&config.defaults.timezone).unwrap_or_default();
    let mut entries = Vec::new();
    for uc in &enabled {
        let text = uc.schedule.as_deref().unwrap_or(&config.defaults.schedule);
        match schedule::parse_cron(text) {
            Ok(s) => entries.push((uc.id.clone(), s)),
            Err(e) => {
                // validate() already rejected these; defensive only.
                eprintln!("warning: use case {}: {e}", uc.id);
            }
        }
    }
    install_stop_handler();
    eprintln!(
        "entering schedule loop with {} use case(s); stop with SIGINT/SIGTERM",
        entries.len()
    );
    schedule::run_loop(&entries, tz, clock.as_ref(), &STOP, |due_ids, now| {
        let due: Vec<&UseCase> = enabled
            .iter()
            .copied()
            .filter(|uc| due_ids.contains(&uc.id))
            .collect();
        run_batch(&config, &due, home, sink_filter, now);
    });
    eprintln!("stopped");
    EXIT_OK
}

// ---------------------------------------------------------------------------
// schedule install / uninstall
// ---------------------------------------------------------------------------

fn cmd_schedule(config_path: &Path, action: ScheduleAction) -> i32 {
    let crontab = match std::env::var_os("DATASTRINGER_CRONTAB") {
        // Testing hook: a stub crontab program.
        Some(program) => schedule::Crontab::with_program(program),
        None => schedule::Crontab::default(),
    };
    let binary = match std::env::current_exe() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot determine binary path: {e}");
            return EXIT_IO;
        }
    };
    let result = match action {
        ScheduleAction::Install => crontab.install(&binary, config_path).map(|line| {
            println!("installed: {line}");
        }),
        ScheduleAction::Uninstall => crontab.uninstall().map(|removed| {
            println!("removed {removed} entr{}", if removed == 1 { "y" } else { "ies" });
        }),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_IO
        }
    }
}
