//! The monthly crime-statistics pipeline end to end, against a local
//! fixture server: fetch seven months, sort into categories, compare the
//! latest month with the six-month rolling average, and alert where the
//! change beats the threshold.
//!
//! ```bash
//! cargo run --example category_threshold
//! ```

use chrono::TimeZone;
use datastringer::config::{StringerKind, UseCase};
use datastringer::engine::{run_use_case, StringerContext};
use datastringer::ingest::Fetcher;
use datastringer::snapshot::SnapshotStore;
use datastringer::stats::{rank_categories, CategorySeries, RankBy};
use datastringer::testkit::{FixtureResponse, FixtureServer};

fn month_payload(bicycle: usize, month: &str) -> Vec<u8> {
    let mut records = Vec::new();
    for _ in 0..bicycle {
        records.push(format!(r#"{{"category":"bicycle-theft","month":"{month}"}}"#));
    }
    for _ in 0..80 {
        records.push(format!(r#"{{"category":"burglary","month":"{month}"}}"#));
    }
    for _ in 0..40 {
        records.push(format!(r#"{{"category":"robbery","month":"{month}"}}"#));
    }
    format!("[{}]", records.join(",")).into_bytes()
}

fn main() {
    let server = FixtureServer::start();
    for month in ["2013-12", "2014-01", "2014-02", "2014-03", "2014-04", "2014-05"] {
        server.route(
            &format!("/crimes?lat=51.52863195218981&lng=-0.12342453002929688&date={month}"),
            FixtureResponse::json(month_payload(100, month)),
        );
    }
    // The latest complete month: bicycle thefts jump from 100 to 134.
    server.route(
        "/crimes?lat=51.52863195218981&lng=-0.12342453002929688&date=2014-06",
        FixtureResponse::json(month_payload(134, "2014-06")),
    );

    let uc = UseCase {
        id: "crime".to_string(),
        stringer_kind: StringerKind::CategoryThreshold,
        enabled: true,
        parameters: [
            ("url", format!("{}/crimes?lat={{lat}}&lng={{lng}}&date={{period}}", server.base_url())),
            ("lat", "51.52863195218981".into()),
            ("lng", "-0.12342453002929688".into()),
            ("numberOfMonths", "6".into()),
            ("threshold", "10".into()),
            ("category_field", "category".into()),
            ("place", "London".into()),
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
        now: chrono::Utc.with_ymd_and_hms(2014, 7, 15, 9, 0, 0).unwrap(),
        store: &store,
        fetcher: &fetcher,
    };

    let drafts = run_use_case(&uc, &ctx).expect("run");
    println!("{} draft(s):\n", drafts.len());
    for draft in &drafts {
        println!("  headline: {}", draft.headline);
        println!("  dedup:    {}", draft.dedup_key);
        for line in draft.body.lines() {
            println!("    {line}");
        }
        println!();
    }

    // Re-running costs zero fetches: every month is cached as a snapshot.
    let before = server.requests().len();
    run_use_case(&uc, &ctx).expect("rerun");
    println!("fetches on first run: {before}, on second run: {}", server.requests().len() - before);

    // Ranking the categories of the latest month.
    let counts = [
        ("bicycle-theft", vec![100, 100, 100, 100, 100, 100, 134]),
        ("burglary", vec![80, 80, 80, 80, 80, 80, 80]),
        ("robbery", vec![40, 40, 40, 40, 40, 40, 40]),
    ];
    let mut periods = Vec::new();
    let mut p = datastringer::value::Period::new(2013, 12).unwrap();
    for _ in 0..7 {
        periods.push(p);
        p = p.next();
    }
    let series = CategorySeries {
        category_field: "category".into(),
        periods,
        counts: counts
            .iter()
            .map(|(n, c)| (n.to_string(), c.clone()))
            .collect(),
    };
    println!(
        "\nby latest count:      {:?}",
        rank_categories(&series, RankBy::LatestCount).unwrap()
    );
    println!(
        "by |percent change|:  {:?}",
        rank_categories(&series, RankBy::AbsPctChange { window: 6 }).unwrap()
    );
}
