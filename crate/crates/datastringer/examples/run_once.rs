//! A whole engine pass, library-level: load a config, run every enabled
//! use case, dispatch to a file sink, and show the run report plus the
//! JSON-lines alert log — what `datastringer run --once` does.
//!
//! ```bash
//! cargo run --example run_once
//! ```

use chrono::TimeZone;
use datastringer::config;
use datastringer::dispatch::{dispatch, DedupStore, SinkConfig};
use datastringer::engine::{run_all, DraftSeverity, StringerContext};
use datastringer::ingest::Fetcher;
use datastringer::snapshot::SnapshotStore;
use datastringer::testkit::{FixtureResponse, FixtureServer};

fn main() {
    let server = FixtureServer::start();
    server.route(
        "/events",
        FixtureResponse::json(br#"[{"id":1,"status":"open"}]"#.to_vec()),
    );
    for (month, bikes) in [
        ("2013-12", 100),
        ("2014-01", 100),
        ("2014-02", 100),
        ("2014-03", 100),
        ("2014-04", 100),
        ("2014-05", 100),
        ("2014-06", 134),
    ] {
        let mut records = Vec::new();
        for _ in 0..bikes {
            records.push(format!(r#"{{"category":"bicycle-theft","month":"{month}"}}"#));
        }
        server.route(
            &format!("/crimes?date={month}"),
            FixtureResponse::json(format!("[{}]", records.join(",")).into_bytes()),
        );
    }

    let home_dir = tempfile::tempdir().expect("temp home");
    let home = home_dir.path();
    let config_text = format!(
        r#"{{
  "defaults": {{ "sinks": ["file"], "timezone": "utc" }},
  "use_cases": [
    {{"id": "local-police", "stringer_kind": "snapshot_diff",
      "parameters": {{"url": "{base}/events", "key_fields": "id"}}}},
    {{"id": "crime", "stringer_kind": "category_threshold",
      "parameters": {{"url": "{base}/crimes?date={{period}}",
                      "numberOfMonths": "6", "threshold": "10",
                      "category_field": "category", "place": "London"}}}}
  ]
}}"#,
        base = server.base_url()
    );
    std::fs::write(home.join("use_cases.json"), config_text).unwrap();

    let config = config::load_config(&home.join("use_cases.json")).expect("load");
    let diagnostics = config::validate(&config);
    assert!(diagnostics.is_empty(), "{diagnostics:?}");

    let now = chrono::Utc.with_ymd_and_hms(2014, 7, 15, 12, 0, 0).unwrap();
    let store = SnapshotStore::open(home.join("snapshots"));
    let fetcher = Fetcher::default();
    let ctx = StringerContext {
        now,
        store: &store,
        fetcher: &fetcher,
    };

    let enabled: Vec<&config::UseCase> = config.use_cases.iter().filter(|u| u.enabled).collect();
    let runs = run_all(&enabled, &ctx, config.defaults.parallelism);

    let sink = SinkConfig::File {
        path: home.join("alerts.jsonl"),
    };
    let mut dedup = DedupStore::open(home.join("dedup.keys"), now).expect("dedup");
    for run in &runs {
        let report = dispatch(&run.drafts, &run.use_case_id, std::slice::from_ref(&sink), &mut dedup, now)
            .expect("dispatch");
        let stories = run
            .drafts
            .iter()
            .filter(|d| d.severity == DraftSeverity::Story)
            .count();
        println!(
            "{}: drafts={} stories={} delivered={} suppressed={}",
            run.use_case_id,
            run.drafts.len(),
            stories,
            report.delivered(),
            report.suppressed()
        );
    }

    println!("\nalerts.jsonl:");
    match std::fs::read_to_string(home.join("alerts.jsonl")) {
        Ok(text) => {
            for line in text.lines() {
                println!("  {line}");
            }
        }
        Err(_) => println!("  (no alerts this run — the diff use case bootstrapped silently)"),
    }
}
