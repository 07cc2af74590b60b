//! End-to-end command tests against the real binary: exit codes, env
//! overrides, dry-run immutability, loop-mode shutdown and crontab
//! registration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use datastringer::testkit::{FixtureResponse, FixtureServer};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_datastringer")
}

struct Cmd {
    inner: Command,
}

impl Cmd {
    fn new(home: &Path) -> Cmd {
        let mut inner = Command::new(bin());
        inner
            .env_remove("DATASTRINGER_CONFIG")
            .env_remove("DATASTRINGER_HOME")
            .env_remove("DATASTRINGER_NOW")
            .arg("--home")
            .arg(home);
        Cmd { inner }
    }

    fn args(mut self, args: &[&str]) -> Cmd {
        self.inner.args(args);
        self
    }

    fn env(mut self, key: &str, value: &str) -> Cmd {
        self.inner.env(key, value);
        self
    }

    fn run(mut self) -> Output {
        self.inner.output().expect("spawn datastringer")
    }
}

fn init_home() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let home = dir.path().join("home");
    let out = Cmd::new(&home).args(&["init"]).run();
    assert!(out.status.success(), "{out:?}");
    (dir, home)
}

fn crime_config(home: &Path, base_url: &str) {
    let config = format!(
        r#"{{
  "version": 1,
  "defaults": {{ "sinks": ["file"], "timezone": "utc" }},
  "use_cases": [
    {{
      "id": "crime",
      "stringer_kind": "category_threshold",
      "enabled": true,
      "parameters": {{
        "url": "{base_url}/crimes?lat={{lat}}&lng={{lng}}&date={{period}}",
        "lat": "51.52863195218981",
        "lng": "-0.12342453002929688",
        "numberOfMonths": "6",
        "threshold": "10",
        "category_field": "category",
        "place": "London"
      }}
    }}
  ]
}}
"#
    );
    fs::write(home.join("use_cases.json"), config).unwrap();
}

fn crime_payload(bicycle: usize, month: &str) -> Vec<u8> {
    let mut records = Vec::new();
    for _ in 0..bicycle {
        records.push(format!(r#"{{"category":"bicycle-theft","month":"{month}"}}"#));
    }
    for _ in 0..80 {
        records.push(format!(r#"{{"category":"burglary","month":"{month}"}}"#));
    }
    format!("[{}]", records.join(",")).into_bytes()
}

fn route_crime(server: &FixtureServer) {
    for month in ["2013-12", "2014-01", "2014-02", "2014-03", "2014-04", "2014-05"] {
        server.route(
            &format!("/crimes?lat=51.52863195218981&lng=-0.12342453002929688&date={month}"),
            FixtureResponse::json(crime_payload(100, month)),
        );
    }
    server.route(
        "/crimes?lat=51.52863195218981&lng=-0.12342453002929688&date=2014-06",
        FixtureResponse::json(crime_payload(134, "2014-06")),
    );
}

const FIXED_NOW: &str = "2014-07-15T09:00:00Z";

#[test]
fn init_validates_cleanly_and_refuses_overwrite() {
    let (_dir, home) = init_home();
    let out = Cmd::new(&home).args(&["validate"]).run();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    assert!(out.stderr.is_empty(), "{out:?}");

    // Second init refuses (exit 3); --force overwrites.
    let out = Cmd::new(&home).args(&["init"]).run();
    assert_eq!(out.status.code(), Some(3));
    let out = Cmd::new(&home).args(&["init", "--force"]).run();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn validate_exit_codes() {
    let (_dir, home) = init_home();

    // Missing file -> 2.
    let out = Cmd::new(&home)
        .args(&["--config", "/nonexistent/use_cases.json", "validate"])
        .run();
    assert_eq!(out.status.code(), Some(2));

    // Duplicate id -> 1, one diagnostic line.
    let text = fs::read_to_string(home.join("use_cases.json")).unwrap();
    let duplicated = text.replace("\"local-police\"", "\"crime\"");
    fs::write(home.join("use_cases.json"), duplicated).unwrap();
    let out = Cmd::new(&home).args(&["validate"]).run();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    assert!(stderr.contains("duplicate"), "{stderr}");
}

#[test]
fn enable_disable_and_unknown_id() {
    let (_dir, home) = init_home();
    let out = Cmd::new(&home).args(&["disable", "crime"]).run();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("disabled"));

    let out = Cmd::new(&home).args(&["enable", "crime"]).run();
    assert_eq!(out.status.code(), Some(0));

    let out = Cmd::new(&home).args(&["disable", "nope"]).run();
    assert_eq!(out.status.code(), Some(4), "{out:?}");
}

#[test]
fn list_shows_never_then_last_run() {
    let server = FixtureServer::start();
    route_crime(&server);
    let (_dir, home) = init_home();
    crime_config(&home, &server.base_url());

    let out = Cmd::new(&home).args(&["list"]).run();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("never"), "{stdout}");

    let out = Cmd::new(&home)
        .args(&["run", "--once"])
        .env("DATASTRINGER_NOW", FIXED_NOW)
        .run();
    assert_eq!(out.status.code(), Some(0), "{out:?}");

    let out = Cmd::new(&home).args(&["list"]).run();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(!stdout.contains("never"), "{stdout}");
    assert!(stdout.contains("2014-07-15T09:00:00Z"), "{stdout}");
    // One story alert recorded.
    let crime_line = stdout.lines().find(|l| l.starts_with("crime")).unwrap();
    assert!(crime_line.trim_end().ends_with('1'), "{crime_line}");
}

#[test]
fn test_subcommand_is_a_pure_dry_run() {
    let server = FixtureServer::start();
    route_crime(&server);
    let (_dir, home) = init_home();
    crime_config(&home, &server.base_url());

    let hash_home = |home: &Path| -> Vec<(PathBuf, Vec<u8>)> {
        let mut entries = Vec::new();
        fn walk(dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
            if !dir.is_dir() {
                return;
            }
            for entry in fs::read_dir(dir).unwrap() {
                let entry = entry.unwrap();
                if entry.file_type().unwrap().is_dir() {
                    walk(&entry.path(), out);
                } else {
                    out.push((entry.path(), fs::read(entry.path()).unwrap()));
                }
            }
        }
        walk(home, &mut entries);
        entries.sort();
        entries
    };

    let before = hash_home(&home);
    let out = Cmd::new(&home)
        .args(&["test", "crime"])
        .env("DATASTRINGER_NOW", FIXED_NOW)
        .run();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.contains("Bicycle theft on the rise by 34% in London"),
        "{stdout}"
    );
    let after = hash_home(&home);
    assert_eq!(before, after, "store and dedup byte-identical before/after");

    // Unknown id -> 4.
    let out = Cmd::new(&home).args(&["test", "nope"]).run();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn test_subcommand_reports_zero_drafts_on_unchanged_diff_source() {
    let server = FixtureServer::start();
    server.route("/d", FixtureResponse::json(br#"[{"id":1}]"#.to_vec()));
    let (_dir, home) = init_home();
    let config = format!(
        r#"{{"use_cases": [{{"id": "lp", "stringer_kind": "snapshot_diff",
            "parameters": {{"url": "{}/d", "key_fields": "id"}}}}]}}"#,
        server.base_url()
    );
    fs::write(home.join("use_cases.json"), config).unwrap();

    // Seed the snapshot with a real run, then dry-run the unchanged source.
    let out = Cmd::new(&home).args(&["run", "--once"]).run();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let out = Cmd::new(&home).args(&["test", "lp"]).run();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("0 draft(s)"), "{out:?}");
    assert!(out.stdout.is_empty());
}

#[test]
fn test_subcommand_prints_fetch_errors_and_exits_1() {
    let server = FixtureServer::start();
    server.route("/d", FixtureResponse::status(500));
    let (_dir, home) = init_home();
    let config = format!(
        r#"{{"use_cases": [{{"id": "lp", "stringer_kind": "snapshot_diff",
            "parameters": {{"url": "{}/d"}}}}]}}"#,
        server.base_url()
    );
    fs::write(home.join("use_cases.json"), config).unwrap();
    let out = Cmd::new(&home).args(&["test", "lp"]).run();
    assert_eq!(out.status.code(), Some(1), "{out:?}");
    assert!(String::from_utf8_lossy(&out.stdout).contains("HTTP 500"));
}

#[test]
fn run_once_with_everything_disabled_makes_no_fetches() {
    let server = FixtureServer::start();
    route_crime(&server);
    let (_dir, home) = init_home();
    crime_config(&home, &server.base_url());
    Cmd::new(&home).args(&["disable", "crime"]).run();

    let out = Cmd::new(&home)
        .args(&["run", "--once"])
        .env("DATASTRINGER_NOW", FIXED_NOW)
        .run();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    assert!(server.requests().is_empty(), "no network activity");
}

#[test]
fn config_errors_exit_1_before_any_network_activity() {
    let server = FixtureServer::start();
    route_crime(&server);
    let (_dir, home) = init_home();
    crime_config(&home, &server.base_url());
    // Corrupt the threshold.
    let text = fs::read_to_string(home.join("use_cases.json")).unwrap();
    fs::write(
        home.join("use_cases.json"),
        text.replace("\"threshold\": \"10\"", "\"threshold\": \"abc\""),
    )
    .unwrap();

    let out = Cmd::new(&home)
        .args(&["run", "--once"])
        .env("DATASTRINGER_NOW", FIXED_NOW)
        .run();
    assert_eq!(out.status.code(), Some(1));
    assert!(server.requests().is_empty(), "refused before fetching");
}

#[test]
fn environment_overrides_and_flag_precedence() {
    let server = FixtureServer::start();
    route_crime(&server);
    let (_dir, home) = init_home();
    crime_config(&home, &server.base_url());

    // DATASTRINGER_CONFIG points at a second config; the flag must win.
    let other_dir = tempfile::tempdir().unwrap();
    let env_config = other_dir.path().join("env.json");
    fs::write(&env_config, r#"{"use_cases": []}"#).unwrap();

    let mut inner = Command::new(bin());
    inner
        .env("DATASTRINGER_HOME", &home)
        .env("DATASTRINGER_CONFIG", &env_config)
        .arg("list")
        .stdout(Stdio::piped());
    let out = inner.output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(!stdout.contains("crime"), "env config (empty) used: {stdout}");

    let mut inner = Command::new(bin());
    inner
        .env("DATASTRINGER_HOME", &home)
        .env("DATASTRINGER_CONFIG", &env_config)
        .args(["--config"])
        .arg(home.join("use_cases.json"))
        .arg("list");
    let out = inner.output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("crime"), "flag beats env: {stdout}");
}

#[test]
fn sink_flag_restricts_dispatch() {
    let server = FixtureServer::start();
    route_crime(&server);
    let (_dir, home) = init_home();
    crime_config(&home, &server.base_url());

    // Config names the file sink; --sink smtp filters it out, so nothing
    // lands in alerts.jsonl and the draft is retried next run.
    let out = Cmd::new(&home)
        .args(&["--sink", "smtp", "run", "--once"])
        .env("DATASTRINGER_NOW", FIXED_NOW)
        .run();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    assert!(!home.join("alerts.jsonl").exists());

    let out = Cmd::new(&home)
        .args(&["run", "--once"])
        .env("DATASTRINGER_NOW", FIXED_NOW)
        .run();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let alerts = fs::read_to_string(home.join("alerts.jsonl")).unwrap();
    assert_eq!(alerts.lines().count(), 1);
}

#[test]
fn loop_mode_exits_cleanly_on_sigint() {
    let (_dir, home) = init_home();
    // One scheduled use case far in the future, so the loop is asleep
    // (not fetching, not exiting) when the signal arrives. The URL is
    // never touched.
    fs::write(
        home.join("use_cases.json"),
        r#"{"use_cases": [{"id": "quiet", "stringer_kind": "snapshot_diff",
            "schedule": "0 12 1 1 *",
            "parameters": {"url": "http://127.0.0.1:1/never"}}]}"#,
    )
    .unwrap();
    let mut child = Command::new(bin())
        .env_remove("DATASTRINGER_CONFIG")
        .env_remove("DATASTRINGER_NOW")
        .arg("--home")
        .arg(&home)
        .arg("run")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    std::thread::sleep(std::time::Duration::from_millis(400));
    assert!(
        child.try_wait().unwrap().is_none(),
        "loop must still be sleeping before the signal"
    );
    unsafe {
        libc::kill(child.id() as i32, libc::SIGINT);
    }
    let start = std::time::Instant::now();
    let status = loop {
        if let Some(status) = child.try_wait().unwrap() {
            break status;
        }
        assert!(
            start.elapsed() < std::time::Duration::from_secs(5),
            "child did not exit after SIGINT"
        );
        std::thread::sleep(std::time::Duration::from_millis(50));
    };
    assert_eq!(status.code(), Some(0), "clean exit 0");
}

#[test]
fn schedule_install_and_uninstall_via_stub_crontab() {
    let (_dir, home) = init_home();
    let stub_dir = tempfile::tempdir().unwrap();
    let store = stub_dir.path().join("crontab.store");
    let script = stub_dir.path().join("crontab");
    fs::write(
        &script,
        format!(
            "#!/bin/sh\nSTORE={}\nif [ \"$1\" = \"-l\" ]; then\n  [ -f \"$STORE\" ] || exit 1\n  cat \"$STORE\"\nelif [ \"$1\" = \"-\" ]; then\n  cat > \"$STORE\"\nfi\n",
            store.display()
        ),
    )
    .unwrap();
    use std::os::unix::fs::PermissionsExt;
    fs::set_permissions(&script, fs::Permissions::from_mode(0o755)).unwrap();

    let out = Cmd::new(&home)
        .args(&["schedule", "install"])
        .env("DATASTRINGER_CRONTAB", script.to_str().unwrap())
        .run();
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let installed = fs::read_to_string(&store).unwrap();
    assert!(installed.contains("# datastringer"), "{installed}");
    assert!(installed.contains("run --once --config"), "{installed}");
    assert!(installed.starts_with("0 12 * * * "), "{installed}");

    // Install twice -> still one marked line.
    Cmd::new(&home)
        .args(&["schedule", "install"])
        .env("DATASTRINGER_CRONTAB", script.to_str().unwrap())
        .run();
    let installed = fs::read_to_string(&store).unwrap();
    assert_eq!(installed.matches("# datastringer").count(), 1);

    let out = Cmd::new(&home)
        .args(&["schedule", "uninstall"])
        .env("DATASTRINGER_CRONTAB", script.to_str().unwrap())
        .run();
    assert_eq!(out.status.code(), Some(0));
    let remaining = fs::read_to_string(&store).unwrap();
    assert!(!remaining.contains("# datastringer"), "{remaining}");

    // Missing facility -> exit 2.
    let out = Cmd::new(&home)
        .args(&["schedule", "install"])
        .env("DATASTRINGER_CRONTAB", "/nonexistent/crontab")
        .run();
    assert_eq!(out.status.code(), Some(2), "{out:?}");
}
