//! Delivers an alert over SMTP to an in-process capture server and
//! prints the raw message that a local mail agent would relay.
//!
//! ```bash
//! cargo run --example smtp_alert
//! ```

use chrono::TimeZone;
use datastringer::config::SmtpSettings;
use datastringer::dispatch::{dispatch, DedupStore, SinkConfig};
use datastringer::engine::{AlertDraft, DraftSeverity};
use datastringer::testkit::SmtpCaptureServer;
use datastringer::value::Value;
use rust_decimal::Decimal;

fn main() {
    let server = SmtpCaptureServer::start();
    println!("capture server on {}:{}\n", server.host(), server.port());

    let mut metrics = std::collections::BTreeMap::new();
    metrics.insert("category".to_string(), Value::from("bicycle-theft"));
    metrics.insert("period".to_string(), Value::from("2014-06"));
    metrics.insert("baseline".to_string(), Value::Number(Decimal::from(100)));
    metrics.insert("latest".to_string(), Value::Number(Decimal::from(134)));
    metrics.insert("pct_change".to_string(), Value::Number(Decimal::from(34)));
    let draft = AlertDraft {
        headline: "Bicycle theft on the rise by 34% in London".to_string(),
        body: "Category: bicycle-theft\nPeriod: 2014-06\nLatest count: 134\nBaseline mean (6 periods): 100\nChange: +34.0% (threshold 10%)".to_string(),
        metrics,
        dedup_key: "crime/2014-06/bicycle-theft".to_string(),
        severity: DraftSeverity::Story,
    };

    let sink = SinkConfig::Smtp(SmtpSettings {
        host: server.host(),
        port: server.port(),
        from: "datastringer@localhost".to_string(),
        to: vec!["newsdesk@example.org".to_string()],
        auth: None,
    });

    let now = chrono::Utc.with_ymd_and_hms(2014, 7, 15, 12, 0, 0).unwrap();
    let dedup_dir = tempfile::tempdir().expect("temp dir");
    let mut dedup = DedupStore::open(dedup_dir.path().join("dedup.keys"), now).expect("dedup");

    let report = dispatch(std::slice::from_ref(&draft), "crime", std::slice::from_ref(&sink), &mut dedup, now)
        .expect("dispatch");
    println!(
        "first dispatch:  delivered={} suppressed={}",
        report.delivered(),
        report.suppressed()
    );
    let report = dispatch(&[draft], "crime", &[sink], &mut dedup, now).expect("dispatch");
    println!(
        "second dispatch: delivered={} suppressed={} (dedup)\n",
        report.delivered(),
        report.suppressed()
    );

    let messages = server.messages();
    let mail = &messages[0];
    println!("captured {} message(s)", messages.len());
    println!("MAIL FROM: {}", mail.mail_from);
    println!("RCPT TO:   {}", mail.rcpt_to.join(", "));
    println!("---");
    print!("{}", mail.data.replace("\r\n", "\n"));
}
