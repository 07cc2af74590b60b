//! Recurring execution without user intervention: classic 5-field cron
//! expressions, next-occurrence computation, a long-running loop with a
//! single catch-up run for missed slots, and user-crontab registration.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};

use chrono::{DateTime, Datelike, Duration, NaiveDate, NaiveDateTime, TimeZone, Timelike, Utc};

/// Marker comment tagging crontab lines owned by this tool.
pub const CRONTAB_MARKER: &str = "# datastringer";

/// The paper-default schedule: every day at 12:00.
pub const DEFAULT_SCHEDULE: &str = "0 12 * * *";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ScheduleError {
    #[error("expected 5 cron fields, found {0}")]
    WrongFieldCount(usize),
    #[error("{field} value {value} out of range {min}..={max}")]
    OutOfRange {
        field: &'static str,
        value: u32,
        min: u8,
        max: u8,
    },
    #[error("malformed {field} field {text:?}: {message}")]
    Malformed {
        field: &'static str,
        text: String,
        message: String,
    },
    #[error("schedule never occurs within 5 years of {0}")]
    Unreachable(NaiveDateTime),
    #[error("no crontab facility available ({0}); use the built-in loop mode (`run` without --once) instead")]
    NoCrontabFacility(String),
    #[error("crontab command failed: {0}")]
    CrontabFailed(String),
}

/// One cron field: the admitted values plus whether the field was written
/// as `*`/`*/n` (the day-of-month/day-of-week OR rule keys off that flag,
/// matching crontab convention).
#[derive(Debug, Clone, PartialEq, Eq)]
struct FieldSet {
    values: BTreeSet<u8>,
    is_star: bool,
}

impl FieldSet {
    fn contains(&self, v: u8) -> bool {
        self.values.contains(&v)
    }
}

/// A parsed 5-field cron expression.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    minutes: FieldSet,
    hours: FieldSet,
    days_of_month: FieldSet,
    months: FieldSet,
    days_of_week: FieldSet,
}

struct FieldSpec {
    name: &'static str,
    min: u8,
    max: u8,
}

const FIELDS: [FieldSpec; 5] = [
    FieldSpec { name: "minute", min: 0, max: 59 },
    FieldSpec { name: "hour", min: 0, max: 23 },
    FieldSpec { name: "day-of-month", min: 1, max: 31 },
    FieldSpec { name: "month", min: 1, max: 12 },
    FieldSpec { name: "day-of-week", min: 0, max: 7 },
];

/// Parses standard 5-field crontab syntax: numbers, ranges, lists, `*`,
/// and `/n` steps. Day-of-week 7 is normalized to 0 (Sunday).
pub fn parse_cron(text: &str) -> Result<Schedule, ScheduleError> {
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(ScheduleError::WrongFieldCount(fields.len()));
    }
    let mut parsed = Vec::with_capacity(5);
    for (text, spec) in fields.iter().zip(&FIELDS) {
        parsed.push(parse_field(text, spec)?);
    }
    let mut sets = parsed.into_iter();
    Ok(Schedule {
        minutes: sets.next().unwrap(),
        hours: sets.next().unwrap(),
        days_of_month: sets.next().unwrap(),
        months: sets.next().unwrap(),
        days_of_week: sets.next().unwrap(),
    })
}

fn parse_field(text: &str, spec: &FieldSpec) -> Result<FieldSet, ScheduleError> {
    let malformed = |message: String| ScheduleError::Malformed {
        field: spec.name,
        text: text.to_string(),
        message,
    };
    if text.is_empty() {
        return Err(malformed("empty field".into()));
    }
    let mut values = BTreeSet::new();
    let mut is_star = false;
    for item in text.split(',') {
        let (range_text, step) = match item.split_once('/') {
            Some((r, s)) => {
                let step: u32 = s
                    .parse()
                    .map_err(|_| malformed(format!("invalid step {s:?}")))?;
                if step == 0 {
                    return Err(malformed("step must be >= 1".into()));
                }
                (r, step)
            }
            None => (item, 1),
        };
        let (lo, hi) = if range_text == "*" {
            if item.starts_with('*') {
                is_star = true;
            }
            (spec.min as u32, spec.max as u32)
        } else if let Some((a, b)) = range_text.split_once('-') {
            let lo: u32 = a
                .parse()
                .map_err(|_| malformed(format!("invalid number {a:?}")))?;
            let hi: u32 = b
                .parse()
                .map_err(|_| malformed(format!("invalid number {b:?}")))?;
            if lo > hi {
                return Err(malformed(format!("range {lo}-{hi} is inverted")));
            }
            (lo, hi)
        } else {
            let v: u32 = range_text
                .parse()
                .map_err(|_| malformed(format!("invalid number {range_text:?}")))?;
            // A bare number with a step means "from v to max" (crontab
            // convention), otherwise just v.
            if item.contains('/') {
                (v, spec.max as u32)
            } else {
                (v, v)
            }
        };
        for value in (lo..=hi).step_by(step as usize) {
            if value < spec.min as u32 || value > spec.max as u32 {
                return Err(ScheduleError::OutOfRange {
                    field: spec.name,
                    value,
                    min: spec.min,
                    max: spec.max,
                });
            }
            let normalized = if spec.name == "day-of-week" && value == 7 {
                0
            } else {
                value as u8
            };
            values.insert(normalized);
        }
    }
    Ok(FieldSet { values, is_star })
}

impl Schedule {
    /// Whether the wall-clock minute `t` matches this schedule.
    pub fn matches(&self, t: NaiveDateTime) -> bool {
        self.minutes.contains(t.minute() as u8)
            && self.hours.contains(t.hour() as u8)
            && self.months.contains(t.month() as u8)
            && self.day_matches(t.date())
    }

    fn day_matches(&self, date: NaiveDate) -> bool {
        let dom_ok = self.days_of_month.contains(date.day() as u8);
        let dow_ok = self
            .days_of_week
            .contains(date.weekday().num_days_from_sunday() as u8);
        // Crontab convention: when both fields are restricted, either match fires.
        if !self.days_of_month.is_star && !self.days_of_week.is_star {
            dom_ok || dow_ok
        } else {
            dom_ok && dow_ok
        }
    }
}

/// Earliest wall-clock minute strictly after `instant` matching the
/// schedule. Errors if no occurrence exists within 5 years (e.g. Feb 30).
pub fn next_after(schedule: &Schedule, instant: NaiveDateTime) -> Result<NaiveDateTime, ScheduleError> {
    let start = truncate_to_minute(instant);
    let bound = start + Duration::days(5 * 366);
    let mut t = start + Duration::minutes(1);
    while t <= bound {
        if !schedule.months.contains(t.month() as u8) {
            let (year, month) = if t.month() == 12 {
                (t.year() + 1, 1)
            } else {
                (t.year(), t.month() + 1)
            };
            t = NaiveDate::from_ymd_opt(year, month, 1)
                .expect("first of month")
                .and_hms_opt(0, 0, 0)
                .expect("midnight");
            continue;
        }
        if !schedule.day_matches(t.date()) {
            t = (t.date() + Duration::days(1))
                .and_hms_opt(0, 0, 0)
                .expect("midnight");
            continue;
        }
        if !schedule.hours.contains(t.hour() as u8) {
            t += Duration::minutes(60 - t.minute() as i64);
            continue;
        }
        if !schedule.minutes.contains(t.minute() as u8) {
            t += Duration::minutes(1);
            continue;
        }
        return Ok(t);
    }
    Err(ScheduleError::Unreachable(instant))
}

fn truncate_to_minute(t: NaiveDateTime) -> NaiveDateTime {
    t.date()
        .and_hms_opt(t.hour(), t.minute(), 0)
        .expect("valid time")
}

// ---------------------------------------------------------------------------
// Clocks and timezone handling
// ---------------------------------------------------------------------------

/// Time source, injected so tests never sleep in real time.
pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
    /// Blocks until `until` or until `stop` is raised, whichever first.
    fn sleep_until(&self, until: DateTime<Utc>, stop: &AtomicBool);
}

/// The real wall clock.
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }

    fn sleep_until(&self, until: DateTime<Utc>, stop: &AtomicBool) {
        while !stop.load(Ordering::SeqCst) {
            let remaining = until - Utc::now();
            if remaining <= Duration::zero() {
                return;
            }
            let nap = remaining
                .to_std()
                .unwrap_or(std::time::Duration::from_millis(200))
                .min(std::time::Duration::from_millis(200));
            std::thread::sleep(nap);
        }
    }
}

/// Which wall clock cron fields refer to. Cron semantics are local time;
/// UTC is available for reproducible runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimeZoneMode {
    #[default]
    Local,
    Utc,
}

impl TimeZoneMode {
    pub fn parse(s: &str) -> Option<TimeZoneMode> {
        match s.to_ascii_lowercase().as_str() {
            "local" => Some(TimeZoneMode::Local),
            "utc" => Some(TimeZoneMode::Utc),
            _ => None,
        }
    }

    pub fn wall(&self, instant: DateTime<Utc>) -> NaiveDateTime {
        match self {
            TimeZoneMode::Local => instant.with_timezone(&chrono::Local).naive_local(),
            TimeZoneMode::Utc => instant.naive_utc(),
        }
    }

    pub fn from_wall(&self, wall: NaiveDateTime) -> DateTime<Utc> {
        match self {
            TimeZoneMode::Utc => Utc.from_utc_datetime(&wall),
            TimeZoneMode::Local => {
                let mut candidate = wall;
                // DST gaps make some wall times nonexistent; slide forward
                // in 15-minute steps until one resolves. Ambiguous times
                // take the earlier instant.
                for _ in 0..8 {
                    match chrono::Local.from_local_datetime(&candidate) {
                        chrono::LocalResult::Single(t) => return t.with_timezone(&Utc),
                        chrono::LocalResult::Ambiguous(a, _) => return a.with_timezone(&Utc),
                        chrono::LocalResult::None => candidate += Duration::minutes(15),
                    }
                }
                Utc.from_utc_datetime(&wall)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Run loop
// ---------------------------------------------------------------------------

/// Sleeps until the earliest due schedule, reports the due entries, and
/// repeats until `stop` is raised. A process suspended past several slots
/// triggers exactly one catch-up per entry: after each run, the next due
/// time is recomputed from the current instant, so a slot never runs
/// twice and backlog never replays.
pub fn run_loop(
    entries: &[(String, Schedule)],
    tz: TimeZoneMode,
    clock: &dyn Clock,
    stop: &AtomicBool,
    mut on_due: impl FnMut(&[String], DateTime<Utc>),
) {
    let mut next_due: Vec<Option<DateTime<Utc>>> = entries
        .iter()
        .map(|(id, schedule)| compute_next(schedule, tz, clock.now(), id))
        .collect();

    loop {
        if stop.load(Ordering::SeqCst) {
            return;
        }
        let Some(earliest) = next_due.iter().flatten().min().copied() else {
            return; // nothing schedulable
        };
        if clock.now() < earliest {
            clock.sleep_until(earliest, stop);
            if stop.load(Ordering::SeqCst) {
                return;
            }
        }
        let now = clock.now();
        let due: Vec<String> = entries
            .iter()
            .zip(&next_due)
            .filter(|(_, d)| d.is_some_and(|d| d <= now))
            .map(|((id, _), _)| id.clone())
            .collect();
        if due.is_empty() {
            continue;
        }
        on_due(&due, now);
        for (i, (id, schedule)) in entries.iter().enumerate() {
            if due.contains(id) {
                next_due[i] = compute_next(schedule, tz, now, id);
            }
        }
    }
}

fn compute_next(
    schedule: &Schedule,
    tz: TimeZoneMode,
    now: DateTime<Utc>,
    id: &str,
) -> Option<DateTime<Utc>> {
    match next_after(schedule, tz.wall(now)) {
        Ok(wall) => Some(tz.from_wall(wall)),
        Err(e) => {
            log::warn!("use case {id}: {e}; excluded from scheduling");
            None
        }
    }
}

// ---------------------------------------------------------------------------
// Crontab integration
// ---------------------------------------------------------------------------

/// Handle on the host crontab program (injectable for tests).
pub struct Crontab {
    program: std::ffi::OsString,
}

impl Default for Crontab {
    fn default() -> Self {
        Crontab {
            program: "crontab".into(),
        }
    }
}

impl Crontab {
    pub fn with_program(program: impl Into<std::ffi::OsString>) -> Crontab {
        Crontab {
            program: program.into(),
        }
    }

    /// Idempotently installs the daily-noon entry invoking `binary run
    /// --once --config <config>`, tagged with [`CRONTAB_MARKER`]. Returns
    /// the installed line.
    pub fn install(&self, binary: &Path, config_path: &Path) -> Result<String, ScheduleError> {
        let line = format!(
            "0 12 * * * {} run --once --config {} {CRONTAB_MARKER}",
            shell_quote(&binary.to_string_lossy()),
            shell_quote(&config_path.to_string_lossy()),
        );
        let mut lines = self.read_lines()?;
        lines.retain(|l| !l.contains(CRONTAB_MARKER));
        lines.push(line.clone());
        self.write_lines(&lines)?;
        Ok(line)
    }

    /// Removes exactly the marked lines; everything else is untouched.
    pub fn uninstall(&self) -> Result<usize, ScheduleError> {
        let mut lines = self.read_lines()?;
        let before = lines.len();
        lines.retain(|l| !l.contains(CRONTAB_MARKER));
        let removed = before - lines.len();
        if removed > 0 {
            self.write_lines(&lines)?;
        }
        Ok(removed)
    }

    /// Current marked lines, for `list`-style inspection.
    pub fn installed_lines(&self) -> Result<Vec<String>, ScheduleError> {
        Ok(self
            .read_lines()?
            .into_iter()
            .filter(|l| l.contains(CRONTAB_MARKER))
            .collect())
    }

    fn read_lines(&self) -> Result<Vec<String>, ScheduleError> {
        let output = Command::new(&self.program)
            .arg("-l")
            .stdin(Stdio::null())
            .output()
            .map_err(|e| ScheduleError::NoCrontabFacility(e.to_string()))?;
        if output.status.success() {
            let text = String::from_utf8_lossy(&output.stdout);
            Ok(text.lines().map(str::to_string).collect())
        } else {
            // `crontab -l` fails with "no crontab for <user>"; that is an
            // empty crontab, not a missing facility.
            Ok(Vec::new())
        }
    }

    fn write_lines(&self, lines: &[String]) -> Result<(), ScheduleError> {
        let mut child = Command::new(&self.program)
            .arg("-")
            .stdin(Stdio::piped())
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| ScheduleError::NoCrontabFacility(e.to_string()))?;
        let mut body = lines.join("\n");
        if !body.is_empty() {
            body.push('\n');
        }
        child
            .stdin
            .take()
            .expect("piped stdin")
            .write_all(body.as_bytes())
            .map_err(|e| ScheduleError::CrontabFailed(e.to_string()))?;
        let output = child
            .wait_with_output()
            .map_err(|e| ScheduleError::CrontabFailed(e.to_string()))?;
        if output.status.success() {
            Ok(())
        } else {
            Err(ScheduleError::CrontabFailed(
                String::from_utf8_lossy(&output.stderr).trim().to_string(),
            ))
        }
    }
}

fn shell_quote(s: &str) -> String {
    if !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '/' | '-' | ':' | '='))
    {
        s.to_string()
    } else {
        format!("'{}'", s.replace('\'', "'\\''"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(y: i32, mo: u32, d: u32, h: u32, mi: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(y, mo, d)
            .unwrap()
            .and_hms_opt(h, mi, 0)
            .unwrap()
    }

    #[test]
    fn parses_daily_noon() {
        let s = parse_cron("0 12 * * *").unwrap();
        assert_eq!(s.minutes.values, BTreeSet::from([0]));
        assert_eq!(s.hours.values, BTreeSet::from([12]));
        assert_eq!(s.days_of_month.values.len(), 31);
        assert_eq!(s.months.values.len(), 12);
        assert_eq!(s.days_of_week.values.len(), 7);
        assert!(s.days_of_month.is_star && s.days_of_week.is_star);
    }

    #[test]
    fn parses_universal_schedule() {
        let s = parse_cron("* * * * *").unwrap();
        assert_eq!(s.minutes.values.len(), 60);
        assert_eq!(s.hours.values.len(), 24);
    }

    #[test]
    fn rejects_out_of_range_hour() {
        assert_eq!(
            parse_cron("0 25 * * *").unwrap_err(),
            ScheduleError::OutOfRange {
                field: "hour",
                value: 25,
                min: 0,
                max: 23
            }
        );
    }

    #[test]
    fn rejects_wrong_field_count() {
        assert_eq!(
            parse_cron("0 12 * *").unwrap_err(),
            ScheduleError::WrongFieldCount(4)
        );
        assert_eq!(
            parse_cron("0 12 * * * *").unwrap_err(),
            ScheduleError::WrongFieldCount(6)
        );
    }

    #[test]
    fn rejects_malformed_steps_and_ranges() {
        assert!(matches!(
            parse_cron("*/0 * * * *").unwrap_err(),
            ScheduleError::Malformed { .. }
        ));
        assert!(matches!(
            parse_cron("10-5 * * * *").unwrap_err(),
            ScheduleError::Malformed { .. }
        ));
        assert!(matches!(
            parse_cron("a * * * *").unwrap_err(),
            ScheduleError::Malformed { .. }
        ));
    }

    #[test]
    fn parses_lists_ranges_steps() {
        let s = parse_cron("0,30 9-17 */2 1,6 1-5").unwrap();
        assert_eq!(s.minutes.values, BTreeSet::from([0, 30]));
        assert_eq!(s.hours.values, (9..=17).collect());
        assert_eq!(s.days_of_month.values, (1..=31).step_by(2).collect());
        assert_eq!(s.months.values, BTreeSet::from([1, 6]));
        assert_eq!(s.days_of_week.values, (1..=5).collect());
        assert!(s.days_of_month.is_star, "*/2 keeps the star flag");
        assert!(!s.days_of_week.is_star);
    }

    #[test]
    fn dow_seven_is_sunday() {
        let a = parse_cron("0 0 * * 7").unwrap();
        let b = parse_cron("0 0 * * 0").unwrap();
        assert_eq!(a.days_of_week.values, b.days_of_week.values);
    }

    #[test]
    fn next_after_daily_noon() {
        let s = parse_cron("0 12 * * *").unwrap();
        assert_eq!(
            next_after(&s, at(2024, 1, 1, 13, 0)).unwrap(),
            at(2024, 1, 2, 12, 0)
        );
        assert_eq!(
            next_after(&s, at(2024, 1, 1, 11, 59)).unwrap(),
            at(2024, 1, 1, 12, 0)
        );
    }

    #[test]
    fn next_after_is_strictly_later() {
        // Exactly at noon: the next occurrence is tomorrow's noon.
        let s = parse_cron("0 12 * * *").unwrap();
        assert_eq!(
            next_after(&s, at(2024, 1, 1, 12, 0)).unwrap(),
            at(2024, 1, 2, 12, 0)
        );
    }

    #[test]
    fn next_after_universal_is_next_minute() {
        let s = parse_cron("* * * * *").unwrap();
        let t = NaiveDate::from_ymd_opt(2024, 3, 5)
            .unwrap()
            .and_hms_opt(10, 4, 37)
            .unwrap();
        assert_eq!(next_after(&s, t).unwrap(), at(2024, 3, 5, 10, 5));
    }

    #[test]
    fn next_after_handles_month_and_year_rollover() {
        let s = parse_cron("30 6 1 * *").unwrap();
        assert_eq!(
            next_after(&s, at(2024, 12, 31, 23, 59)).unwrap(),
            at(2025, 1, 1, 6, 30)
        );
    }

    #[test]
    fn next_after_dom_dow_or_rule() {
        // Both restricted: fires on the 13th OR on Fridays.
        let s = parse_cron("0 0 13 * 5").unwrap();
        // 2024-09-05 is a Thursday; next Friday is the 6th, before the 13th.
        assert_eq!(
            next_after(&s, at(2024, 9, 5, 1, 0)).unwrap(),
            at(2024, 9, 6, 0, 0)
        );
        // Only dom restricted: must be the 13th regardless of weekday.
        let s = parse_cron("0 0 13 * *").unwrap();
        assert_eq!(
            next_after(&s, at(2024, 9, 5, 1, 0)).unwrap(),
            at(2024, 9, 13, 0, 0)
        );
    }

    #[test]
    fn unreachable_schedule_errors() {
        let s = parse_cron("0 0 30 2 *").unwrap();
        assert!(matches!(
            next_after(&s, at(2024, 1, 1, 0, 0)),
            Err(ScheduleError::Unreachable(_))
        ));
    }

    #[test]
    fn leap_day_is_reachable() {
        let s = parse_cron("0 0 29 2 *").unwrap();
        assert_eq!(
            next_after(&s, at(2023, 3, 1, 0, 0)).unwrap(),
            at(2024, 2, 29, 0, 0)
        );
    }

    /// Brute-force oracle: scan forward minute by minute testing field
    /// membership. Deliberately ignorant of next_after's skipping logic.
    fn oracle_next(schedule: &Schedule, instant: NaiveDateTime) -> Option<NaiveDateTime> {
        let start = truncate_to_minute(instant);
        let bound = start + Duration::days(5 * 366);
        let mut t = start + Duration::minutes(1);
        while t <= bound {
            if schedule.matches(t) {
                return Some(t);
            }
            t += Duration::minutes(1);
        }
        None
    }

    #[test]
    fn next_after_agrees_with_minute_scan_oracle() {
        use rand::prelude::*;
        let mut rng = rand::rngs::StdRng::seed_from_u64(2024);
        for _ in 0..150 {
            let expr = random_cron(&mut rng);
            let schedule = match parse_cron(&expr) {
                Ok(s) => s,
                Err(e) => panic!("generated invalid cron {expr:?}: {e}"),
            };
            let instant = at(
                rng.gen_range(2020..2030),
                rng.gen_range(1..13),
                rng.gen_range(1..29),
                rng.gen_range(0..24),
                rng.gen_range(0..60),
            );
            let fast = next_after(&schedule, instant).ok();
            let slow = oracle_next(&schedule, instant);
            assert_eq!(fast, slow, "cron {expr:?} after {instant}");
        }
    }

    /// Random 5-field cron expression, weighted toward stars so the
    /// minute-scan oracle stays fast.
    pub(crate) fn random_cron(rng: &mut impl rand::Rng) -> String {
        fn field<R: rand::Rng>(rng: &mut R, min: u8, max: u8) -> String {
            match rng.gen_range(0..10) {
                0..=4 => "*".to_string(),
                5 => format!("*/{}", rng.gen_range(1..=6)),
                6 => {
                    let a = rng.gen_range(min..=max);
                    let b = rng.gen_range(a..=max);
                    format!("{a}-{b}")
                }
                7 => {
                    let a = rng.gen_range(min..=max);
                    let b = rng.gen_range(a..=max);
                    format!("{a}-{b}/{}", rng.gen_range(1..=5))
                }
                _ => {
                    let n = rng.gen_range(1..=3);
                    let mut items: Vec<String> = (0..n)
                        .map(|_| rng.gen_range(min..=max).to_string())
                        .collect();
                    items.dedup();
                    items.join(",")
                }
            }
        }
        // Day-of-month capped at 28 so randomized schedules stay
        // reachable in every month.
        format!(
            "{} {} {} {} {}",
            field(rng, 0, 59),
            field(rng, 0, 23),
            field(rng, 1, 28),
            field(rng, 1, 12),
            field(rng, 0, 6),
        )
    }

    #[test]
    fn monotonicity_of_next_after() {
        use rand::prelude::*;
        let mut rng = rand::rngs::StdRng::seed_from_u64(99);
        let s = parse_cron("15 */3 * * 1-5").unwrap();
        for _ in 0..100 {
            let t1 = at(
                2024,
                rng.gen_range(1..13),
                rng.gen_range(1..28),
                rng.gen_range(0..24),
                rng.gen_range(0..60),
            );
            let t2 = t1 + Duration::minutes(rng.gen_range(0..5000));
            let n1 = next_after(&s, t1).unwrap();
            let n2 = next_after(&s, t2).unwrap();
            assert!(n1 <= n2);
            assert!(n1 > t1 && n2 > t2);
        }
    }

    mod loop_tests {
        use super::*;
        use crate::testkit::ManualClock;

        fn utc(y: i32, mo: u32, d: u32, h: u32, mi: u32) -> DateTime<Utc> {
            Utc.with_ymd_and_hms(y, mo, d, h, mi, 0).unwrap()
        }

        #[test]
        fn fires_once_when_clock_steps_past_noon() {
            let clock = ManualClock::starting_at(utc(2024, 1, 1, 9, 0));
            clock.script_wakeups(&[utc(2024, 1, 1, 12, 0)]);
            let stop = AtomicBool::new(false);
            let entries = vec![("crime".to_string(), parse_cron("0 12 * * *").unwrap())];
            let mut runs: Vec<(Vec<String>, DateTime<Utc>)> = Vec::new();
            run_loop(&entries, TimeZoneMode::Utc, &clock, &stop, |due, now| {
                runs.push((due.to_vec(), now));
            });
            assert_eq!(runs.len(), 1);
            assert_eq!(runs[0].0, vec!["crime".to_string()]);
            assert_eq!(runs[0].1, utc(2024, 1, 1, 12, 0));
        }

        #[test]
        fn three_missed_slots_catch_up_exactly_once() {
            let clock = ManualClock::starting_at(utc(2024, 1, 1, 9, 0));
            // Suspend through Jan 1, 2 and 3 noons; wake on the 4th at 03:00.
            clock.script_wakeups(&[utc(2024, 1, 4, 3, 0)]);
            let stop = AtomicBool::new(false);
            let entries = vec![("crime".to_string(), parse_cron("0 12 * * *").unwrap())];
            let mut runs = 0;
            run_loop(&entries, TimeZoneMode::Utc, &clock, &stop, |_, _| runs += 1);
            assert_eq!(runs, 1, "one catch-up, not three");
        }

        #[test]
        fn stop_during_sleep_exits_before_any_run() {
            let clock = ManualClock::starting_at(utc(2024, 1, 1, 9, 0));
            // Empty script: first sleep raises stop.
            let stop = AtomicBool::new(false);
            let entries = vec![("crime".to_string(), parse_cron("0 12 * * *").unwrap())];
            let mut runs = 0;
            run_loop(&entries, TimeZoneMode::Utc, &clock, &stop, |_, _| runs += 1);
            assert_eq!(runs, 0);
        }

        #[test]
        fn same_slot_never_runs_twice() {
            let clock = ManualClock::starting_at(utc(2024, 1, 1, 11, 0));
            // Repeated wakeups: after the Jan 1 slot runs, the next due
            // slot is Jan 2 — the Jan 1 slot must not replay.
            clock.script_wakeups(&[utc(2024, 1, 1, 12, 0), utc(2024, 1, 1, 12, 0)]);
            let stop = AtomicBool::new(false);
            let entries = vec![("crime".to_string(), parse_cron("0 12 * * *").unwrap())];
            let mut run_instants = Vec::new();
            run_loop(&entries, TimeZoneMode::Utc, &clock, &stop, |_, now| {
                run_instants.push(now);
            });
            assert_eq!(
                run_instants,
                vec![utc(2024, 1, 1, 12, 0), utc(2024, 1, 2, 12, 0)],
                "one run per distinct slot"
            );
            assert!(run_instants.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn independent_schedules_fire_independently() {
            let clock = ManualClock::starting_at(utc(2024, 1, 1, 9, 0));
            clock.script_wakeups(&[utc(2024, 1, 1, 10, 0), utc(2024, 1, 1, 12, 0)]);
            let stop = AtomicBool::new(false);
            let entries = vec![
                ("hourly".to_string(), parse_cron("0 10 * * *").unwrap()),
                ("noon".to_string(), parse_cron("0 12 * * *").unwrap()),
            ];
            let mut runs: Vec<Vec<String>> = Vec::new();
            run_loop(&entries, TimeZoneMode::Utc, &clock, &stop, |due, _| {
                runs.push(due.to_vec());
            });
            assert_eq!(runs.len(), 2);
            assert_eq!(runs[0], vec!["hourly".to_string()]);
            assert_eq!(runs[1], vec!["noon".to_string()]);
        }
    }

    mod crontab_tests {
        use super::*;
        use std::fs;

        /// Stub crontab: `-l` prints a store file, `-` replaces it.
        fn stub_crontab(dir: &Path) -> std::path::PathBuf {
            let store = dir.join("crontab.store");
            let script = dir.join("crontab");
            let body = format!(
                "#!/bin/sh\nSTORE={}\nif [ \"$1\" = \"-l\" ]; then\n  [ -f \"$STORE\" ] || exit 1\n  cat \"$STORE\"\nelif [ \"$1\" = \"-\" ]; then\n  cat > \"$STORE\"\nfi\n",
                store.display()
            );
            fs::write(&script, body).unwrap();
            use std::os::unix::fs::PermissionsExt;
            fs::set_permissions(&script, fs::Permissions::from_mode(0o755)).unwrap();
            script
        }

        #[test]
        fn install_is_idempotent() {
            let dir = tempfile::tempdir().unwrap();
            let crontab = Crontab::with_program(stub_crontab(dir.path()));
            let binary = Path::new("/usr/local/bin/datastringer");
            let config = dir.path().join("use_cases.json");
            let line = crontab.install(binary, &config).unwrap();
            assert!(line.starts_with("0 12 * * * "));
            assert!(line.ends_with(CRONTAB_MARKER));
            crontab.install(binary, &config).unwrap();
            assert_eq!(crontab.installed_lines().unwrap().len(), 1);
        }

        #[test]
        fn uninstall_removes_only_marked_lines() {
            let dir = tempfile::tempdir().unwrap();
            let script = stub_crontab(dir.path());
            fs::write(
                dir.path().join("crontab.store"),
                "0 1 * * * /usr/bin/backup\n",
            )
            .unwrap();
            let crontab = Crontab::with_program(&script);
            crontab
                .install(Path::new("/bin/ds"), Path::new("/etc/ds.json"))
                .unwrap();
            assert_eq!(crontab.uninstall().unwrap(), 1);
            assert_eq!(crontab.uninstall().unwrap(), 0);
            let store = fs::read_to_string(dir.path().join("crontab.store")).unwrap();
            assert_eq!(store, "0 1 * * * /usr/bin/backup\n");
        }

        #[test]
        fn missing_crontab_facility_is_reported() {
            let crontab = Crontab::with_program("/nonexistent/crontab-binary");
            let err = crontab
                .install(Path::new("/bin/ds"), Path::new("/etc/ds.json"))
                .unwrap_err();
            assert!(matches!(err, ScheduleError::NoCrontabFacility(_)));
        }

        #[test]
        fn paths_with_spaces_are_quoted() {
            let dir = tempfile::tempdir().unwrap();
            let crontab = Crontab::with_program(stub_crontab(dir.path()));
            let line = crontab
                .install(
                    Path::new("/opt/my tools/datastringer"),
                    Path::new("/home/u/My Config.json"),
                )
                .unwrap();
            assert!(line.contains("'/opt/my tools/datastringer'"));
            assert!(line.contains("'/home/u/My Config.json'"));
        }
    }
}
