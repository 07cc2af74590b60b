//! The rule expression language: parse, pretty-print, and evaluate
//! against per-period series.
//!
//! ```bash
//! cargo run --example rule_dsl
//! ```

use datastringer::rules::{eval_rule, parse_rule, SeriesTable};

fn main() {
    let texts = [
        "pct_change(count, 6) > 10 or pct_change(count, 6) < -10",
        "not count() > 0 and sum(v) > 1",
        "abs(pct_change(count, 3)) >= 25",
        "mean(count, 2) >= 100 AND latest(count) != 0",
    ];
    println!("parse and pretty-print (fully parenthesized):\n");
    for text in texts {
        let ast = parse_rule(text).expect("valid rule");
        println!("  {text}");
        println!("    -> {ast}");
        println!("    needs {} period(s) of data\n", ast.required_periods());
    }

    // Evaluate the crime rule against two per-category count series.
    let rule = parse_rule("pct_change(count, 6) > 10 or pct_change(count, 6) < -10").unwrap();
    let cases = [
        ("bicycle-theft", vec![100u64, 100, 100, 100, 100, 100, 134]),
        ("burglary", vec![80, 80, 80, 80, 80, 80, 80]),
    ];
    println!("evaluating {rule}:\n");
    for (category, counts) in cases {
        let table = SeriesTable::from_counts(&counts);
        let outcome = eval_rule(&rule, &table).expect("evaluable");
        println!("  {category}: fired = {}", outcome.fired);
        for (metric, value) in &outcome.bindings {
            println!("    {metric} = {}", value.normalize());
        }
    }

    // Errors are precise: position for syntax, data shape for windows.
    println!("\nerror reporting:");
    println!("  {}", parse_rule("count() >").unwrap_err());
    println!("  {}", parse_rule("median(v, 3) > 1").unwrap_err());
    let short = SeriesTable::from_counts(&[1, 2]);
    println!(
        "  {}",
        eval_rule(&parse_rule("mean(count, 6) > 0").unwrap(), &short).unwrap_err()
    );
}
