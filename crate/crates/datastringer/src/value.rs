//! Core data model shared by every stringer: flat records, scalar values
//! with exact decimal numbers, and calendar-month periods.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Datelike, Utc};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

/// A scalar field value. Numbers are exact decimals, never binary floats,
/// so aggregation and alert thresholds reproduce across machines.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Text(String),
    Number(Decimal),
    Bool(bool),
    Null,
}

impl Value {
    pub fn as_number(&self) -> Option<Decimal> {
        match self {
            Value::Number(d) => Some(*d),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    /// Canonical rendering used for record keys, diff output and alert
    /// bodies: bare text, normalized decimals (no trailing zeros),
    /// `true`/`false`, `null`.
    pub fn render(&self) -> String {
        match self {
            Value::Text(s) => s.clone(),
            Value::Number(d) => d.normalize().to_string(),
            Value::Bool(b) => b.to_string(),
            Value::Null => "null".to_string(),
        }
    }

    /// JSON rendering with the same normalization rules. Strings are
    /// escaped exactly as serde_json would escape them.
    pub fn render_json(&self) -> String {
        match self {
            Value::Text(s) => serde_json::to_string(s).expect("string serialization"),
            Value::Number(d) => d.normalize().to_string(),
            Value::Bool(b) => b.to_string(),
            Value::Null => "null".to_string(),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Text(s.to_string())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::Text(s)
    }
}

impl From<Decimal> for Value {
    fn from(d: Decimal) -> Self {
        Value::Number(d)
    }
}

impl From<u64> for Value {
    fn from(n: u64) -> Self {
        Value::Number(Decimal::from(n))
    }
}

/// One flat record: field name to value. BTreeMap keeps fields in the
/// canonical (lexicographic) order by construction.
pub type Record = BTreeMap<String, Value>;

/// Renders a record as a compact one-line JSON object with sorted keys.
pub fn render_record(record: &Record) -> String {
    let mut out = String::from("{");
    for (i, (k, v)) in record.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&serde_json::to_string(k).expect("key serialization"));
        out.push(':');
        out.push_str(&v.render_json());
    }
    out.push('}');
    out
}

/// Normalized tabular view of one fetched dataset.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RecordSet {
    /// Flat field→value maps; fields may be absent per record but all
    /// records share the dotted-key flattening convention.
    pub records: Vec<Record>,
    pub source_url: String,
    /// Set by the fetcher, never by a parser.
    pub fetched_at: Option<DateTime<Utc>>,
    pub period: Option<Period>,
}

impl RecordSet {
    pub fn from_records(records: Vec<Record>) -> Self {
        RecordSet {
            records,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// A calendar month, the time bucket of time-sliced datasets.
/// Renders canonically as "YYYY-MM" and orders by (year, month).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Period {
    pub year: i32,
    pub month: u8,
}

impl Period {
    pub fn new(year: i32, month: u8) -> Option<Period> {
        if (1..=12).contains(&month) {
            Some(Period { year, month })
        } else {
            None
        }
    }

    /// The UTC calendar month containing `instant`.
    pub fn containing(instant: DateTime<Utc>) -> Period {
        Period {
            year: instant.year(),
            month: instant.month() as u8,
        }
    }

    /// The most recent complete calendar month relative to `instant`:
    /// published statistics lag, so a partial month is never compared
    /// against full-month baselines.
    pub fn latest_complete(instant: DateTime<Utc>) -> Period {
        Period::containing(instant).prev()
    }

    pub fn prev(self) -> Period {
        if self.month == 1 {
            Period {
                year: self.year - 1,
                month: 12,
            }
        } else {
            Period {
                year: self.year,
                month: self.month - 1,
            }
        }
    }

    pub fn next(self) -> Period {
        if self.month == 12 {
            Period {
                year: self.year + 1,
                month: 1,
            }
        } else {
            Period {
                year: self.year,
                month: self.month + 1,
            }
        }
    }

    /// The period `n` months before this one.
    pub fn minus(self, n: u32) -> Period {
        let mut p = self;
        for _ in 0..n {
            p = p.prev();
        }
        p
    }
}

impl fmt::Display for Period {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("invalid period {0:?}: expected \"YYYY-MM\"")]
pub struct PeriodParseError(String);

impl FromStr for Period {
    type Err = PeriodParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || PeriodParseError(s.to_string());
        let (y, m) = s.split_once('-').ok_or_else(err)?;
        if y.len() != 4 || m.len() != 2 {
            return Err(err());
        }
        let year: i32 = y.parse().map_err(|_| err())?;
        let month: u8 = m.parse().map_err(|_| err())?;
        Period::new(year, month).ok_or_else(err)
    }
}
