//! Runs the validator against a config with several deliberate mistakes
//! and prints every diagnostic.
//!
//! ```bash
//! cargo run --example validate_config
//! ```

use datastringer::config;

fn main() {
    let broken = r#"{
  "version": 1,
  "defaults": { "schedule": "0 25 * * *", "sinks": ["smtp"] },
  "use_cases": [
    {
      "id": "crime",
      "stringer_kind": "category_threshold",
      "parameters": {
        "url": "https://example.org/api?lat={lat}&date={period}",
        "numberOfMonths": "0",
        "threshold": "abc",
        "category_field": "category"
      }
    },
    {
      "id": "crime",
      "stringer_kind": "expression_rule",
      "parameters": {
        "url": "https://example.org/data",
        "rule": "count() >"
      }
    }
  ]
}"#;

    let config = config::parse_config(broken).expect("syntactically valid JSON");
    let diagnostics = config::validate(&config);

    println!("{} diagnostics:\n", diagnostics.len());
    for d in &diagnostics {
        println!("  {d}");
    }

    assert!(
        diagnostics
            .iter()
            .any(|d| d.severity == config::Severity::Error),
        "this config must be rejected for `run`"
    );
    println!("\nthe engine refuses to run a config with error diagnostics");
}
