//! Cron expression parsing and next-occurrence computation.
//!
//! ```bash
//! cargo run --example cron_next
//! ```

use chrono::NaiveDate;
use datastringer::schedule::{next_after, parse_cron};

fn main() {
    let start = NaiveDate::from_ymd_opt(2014, 7, 15)
        .unwrap()
        .and_hms_opt(9, 30, 0)
        .unwrap();

    let expressions = [
        ("0 12 * * *", "every day at noon (the default)"),
        ("*/15 * * * *", "every quarter hour"),
        ("0 8 * * 1-5", "weekday mornings"),
        ("30 6 1 * *", "first of the month, 06:30"),
        ("0 0 13 * 5", "the 13th OR any Friday (both fields restricted)"),
    ];

    for (expr, label) in expressions {
        let schedule = parse_cron(expr).expect("valid cron");
        println!("{expr:<14} {label}");
        let mut t = start;
        for _ in 0..4 {
            t = next_after(&schedule, t).expect("reachable");
            println!("    {t}");
        }
        println!();
    }

    println!("errors:");
    println!("  {}", parse_cron("0 25 * * *").unwrap_err());
    println!("  {}", parse_cron("0 12 * *").unwrap_err());
    let feb30 = parse_cron("0 0 30 2 *").unwrap();
    println!("  {}", next_after(&feb30, start).unwrap_err());
}
