//! Watches a dataset for changes: the first run stores a canonical
//! snapshot silently, later runs diff against it and report what moved.
//!
//! ```bash
//! cargo run --example snapshot_diff
//! ```

use chrono::TimeZone;
use datastringer::config::{StringerKind, UseCase};
use datastringer::engine::{run_use_case, StringerContext};
use datastringer::ingest::Fetcher;
use datastringer::snapshot::SnapshotStore;
use datastringer::testkit::{FixtureResponse, FixtureServer};

fn main() {
    let server = FixtureServer::start();
    server.route(
        "/events",
        FixtureResponse::json(
            br#"[{"id":1,"title":"Community meeting","status":"scheduled"},
                 {"id":2,"title":"Station open day","status":"scheduled"}]"#
                .to_vec(),
        ),
    );

    let uc = UseCase {
        id: "local-police".to_string(),
        stringer_kind: StringerKind::SnapshotDiff,
        enabled: true,
        parameters: [
            ("url", format!("{}/events", server.base_url())),
            ("key_fields", "id".into()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect(),
        schedule: None,
        sinks: Vec::new(),
        headline_template: None,
    };

    let store_dir = tempfile::tempdir().expect("temp dir");
    let store = SnapshotStore::open(store_dir.path());
    let fetcher = Fetcher::default();
    let ctx = StringerContext {
        now: chrono::Utc.with_ymd_and_hms(2014, 7, 15, 12, 0, 0).unwrap(),
        store: &store,
        fetcher: &fetcher,
    };

    println!("run 1 (bootstrap): {} draft(s)", run_use_case(&uc, &ctx).expect("run 1").len());

    // Upstream edits one record and drops another.
    server.route(
        "/events",
        FixtureResponse::json(
            br#"[{"id":1,"title":"Community meeting","status":"cancelled"}]"#.to_vec(),
        ),
    );
    let drafts = run_use_case(&uc, &ctx).expect("run 2");
    println!("run 2 (mutated):   {} draft(s)\n", drafts.len());
    for draft in &drafts {
        println!("  headline: {}", draft.headline);
        for line in draft.body.lines() {
            println!("    {line}");
        }
    }

    println!("\nrun 3 (unchanged): {} draft(s)", run_use_case(&uc, &ctx).expect("run 3").len());
}
