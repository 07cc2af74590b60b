//! Declarative alert-rule expressions.
//!
//! A rule is a boolean combination of comparisons between numeric metrics
//! and literals, e.g. `pct_change(count, 6) > 10 or pct_change(count, 6) < -10`.
//! Rules are evaluated against per-period numeric series, so the same rule
//! text works for any dataset that exposes the referenced fields.
//!
//! Grammar (keywords case-insensitive, whitespace insignificant):
//!
//! ```text
//! expr       := or_expr
//! or_expr    := and_expr ("or" and_expr)*
//! and_expr   := unary ("and" unary)*
//! unary      := "not" unary | "(" expr ")" | comparison
//! comparison := metric OP number          OP ∈ { > >= < <= == != }
//! metric     := count() | latest(f) | sum(f) | min(f) | max(f)
//!             | mean(f, n) | pct_change(f, n) | abs(metric)
//! ```
//!
//! Precedence: `not` binds tighter than `and`, which binds tighter than `or`.

use std::collections::BTreeMap;
use std::fmt;

use rust_decimal::Decimal;

use crate::stats;
use crate::value::{RecordSet, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Gt,
    Ge,
    Lt,
    Le,
    Eq,
    Ne,
}

impl CmpOp {
    fn as_str(self) -> &'static str {
        match self {
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
        }
    }

    fn apply(self, left: Decimal, right: Decimal) -> bool {
        match self {
            CmpOp::Gt => left > right,
            CmpOp::Ge => left >= right,
            CmpOp::Lt => left < right,
            CmpOp::Le => left <= right,
            CmpOp::Eq => left == right,
            CmpOp::Ne => left != right,
        }
    }
}

/// A numeric metric over the evaluation data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MetricExpr {
    /// Latest per-period record count.
    Count,
    /// Latest per-period value of a field.
    Latest(String),
    /// Sum of a field's per-period values over all periods.
    Sum(String),
    Min(String),
    Max(String),
    /// Mean of the last `n` per-period values.
    Mean(String, u32),
    /// Percent change of the latest value against the mean of the `n`
    /// values before it (disjoint baseline, matching the built-in
    /// category stringer).
    PctChange(String, u32),
    Abs(Box<MetricExpr>),
}

impl MetricExpr {
    /// How many periods of data this metric needs.
    pub fn required_periods(&self) -> usize {
        match self {
            MetricExpr::Count
            | MetricExpr::Latest(_)
            | MetricExpr::Sum(_)
            | MetricExpr::Min(_)
            | MetricExpr::Max(_) => 1,
            MetricExpr::Mean(_, n) => *n as usize,
            MetricExpr::PctChange(_, n) => *n as usize + 1,
            MetricExpr::Abs(inner) => inner.required_periods(),
        }
    }
}

impl fmt::Display for MetricExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricExpr::Count => write!(f, "count()"),
            MetricExpr::Latest(field) => write!(f, "latest({field})"),
            MetricExpr::Sum(field) => write!(f, "sum({field})"),
            MetricExpr::Min(field) => write!(f, "min({field})"),
            MetricExpr::Max(field) => write!(f, "max({field})"),
            MetricExpr::Mean(field, n) => write!(f, "mean({field}, {n})"),
            MetricExpr::PctChange(field, n) => write!(f, "pct_change({field}, {n})"),
            MetricExpr::Abs(inner) => write!(f, "abs({inner})"),
        }
    }
}

/// Parsed rule expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum RuleExpr {
    Or(Box<RuleExpr>, Box<RuleExpr>),
    And(Box<RuleExpr>, Box<RuleExpr>),
    Not(Box<RuleExpr>),
    Cmp(MetricExpr, CmpOp, Decimal),
}

impl RuleExpr {
    /// How many periods of data the whole rule needs.
    pub fn required_periods(&self) -> usize {
        match self {
            RuleExpr::Or(l, r) | RuleExpr::And(l, r) => {
                l.required_periods().max(r.required_periods())
            }
            RuleExpr::Not(inner) => inner.required_periods(),
            RuleExpr::Cmp(metric, _, _) => metric.required_periods(),
        }
    }
}

/// Fully parenthesized rendering; reparsing it yields the same tree.
impl fmt::Display for RuleExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RuleExpr::Or(l, r) => write!(f, "({l} or {r})"),
            RuleExpr::And(l, r) => write!(f, "({l} and {r})"),
            RuleExpr::Not(inner) => write!(f, "(not {inner})"),
            RuleExpr::Cmp(metric, op, lit) => {
                write!(f, "{metric} {} {}", op.as_str(), lit.normalize())
            }
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RuleError {
    #[error("syntax error at offset {pos}: {message}")]
    Syntax { pos: usize, message: String },
    #[error("unknown metric {name:?} at offset {pos}")]
    UnknownMetric { pos: usize, name: String },
    #[error("arity error at offset {pos}: {message}")]
    Arity { pos: usize, message: String },
    #[error("unknown field {0:?}")]
    UnknownField(String),
    #[error("insufficient data for {metric}: need {needed} periods, have {have}")]
    InsufficientData {
        metric: String,
        needed: usize,
        have: usize,
    },
    #[error("zero baseline for {metric}")]
    ZeroBaseline { metric: String },
    #[error("series lengths differ: {0}")]
    MismatchedSeries(String),
}

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(Decimal),
    Op(CmpOp),
    LParen,
    RParen,
    Comma,
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    pos: usize,
}

fn lex(text: &str) -> Result<Vec<Spanned>, RuleError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let pos = i;
        match c {
            '(' => {
                out.push(Spanned { tok: Tok::LParen, pos });
                i += 1;
            }
            ')' => {
                out.push(Spanned { tok: Tok::RParen, pos });
                i += 1;
            }
            ',' => {
                out.push(Spanned { tok: Tok::Comma, pos });
                i += 1;
            }
            '>' | '<' => {
                let op = if bytes.get(i + 1) == Some(&b'=') {
                    i += 2;
                    if c == '>' {
                        CmpOp::Ge
                    } else {
                        CmpOp::Le
                    }
                } else {
                    i += 1;
                    if c == '>' {
                        CmpOp::Gt
                    } else {
                        CmpOp::Lt
                    }
                };
                out.push(Spanned { tok: Tok::Op(op), pos });
            }
            '=' | '!' => {
                if bytes.get(i + 1) != Some(&b'=') {
                    return Err(RuleError::Syntax {
                        pos,
                        message: format!("expected {c}= operator"),
                    });
                }
                let op = if c == '=' { CmpOp::Eq } else { CmpOp::Ne };
                out.push(Spanned { tok: Tok::Op(op), pos });
                i += 2;
            }
            '-' | '0'..='9' => {
                let start = i;
                i += 1;
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                let literal = &text[start..i];
                let value: Decimal = literal.parse().map_err(|_| RuleError::Syntax {
                    pos,
                    message: format!("invalid number {literal:?}"),
                })?;
                out.push(Spanned { tok: Tok::Number(value), pos });
            }
            _ if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                i += 1;
                while i < bytes.len() {
                    let b = bytes[i] as char;
                    if b.is_ascii_alphanumeric() || b == '_' || b == '.' {
                        i += 1;
                    } else {
                        break;
                    }
                }
                out.push(Spanned {
                    tok: Tok::Ident(text[start..i].to_string()),
                    pos,
                });
            }
            _ => {
                return Err(RuleError::Syntax {
                    pos,
                    message: format!("unexpected character {c:?}"),
                })
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

struct Parser<'a> {
    toks: &'a [Spanned],
    at: usize,
    end: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.at).map(|s| &s.tok)
    }

    fn pos(&self) -> usize {
        self.toks.get(self.at).map(|s| s.pos).unwrap_or(self.end)
    }

    fn bump(&mut self) -> Option<&Spanned> {
        let s = self.toks.get(self.at);
        self.at += 1;
        s
    }

    fn keyword(&self) -> Option<String> {
        match self.peek() {
            Some(Tok::Ident(w)) => {
                let lower = w.to_ascii_lowercase();
                if matches!(lower.as_str(), "and" | "or" | "not") {
                    Some(lower)
                } else {
                    None
                }
            }
            _ => None,
        }
    }

    fn expect(&mut self, want: &Tok, what: &str) -> Result<(), RuleError> {
        let pos = self.pos();
        match self.bump() {
            Some(s) if &s.tok == want => Ok(()),
            Some(s) => Err(RuleError::Syntax {
                pos: s.pos,
                message: format!("expected {what}"),
            }),
            None => Err(RuleError::Syntax {
                pos,
                message: format!("expected {what}, found end of input"),
            }),
        }
    }

    fn parse_expr(&mut self) -> Result<RuleExpr, RuleError> {
        let mut left = self.parse_and()?;
        while self.keyword().as_deref() == Some("or") {
            self.bump();
            let right = self.parse_and()?;
            left = RuleExpr::Or(Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn parse_and(&mut self) -> Result<RuleExpr, RuleError> {
        let mut left = self.parse_unary()?;
        while self.keyword().as_deref() == Some("and") {
            self.bump();
            let right = self.parse_unary()?;
            left = RuleExpr::And(Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn parse_unary(&mut self) -> Result<RuleExpr, RuleError> {
        if self.keyword().as_deref() == Some("not") {
            self.bump();
            return Ok(RuleExpr::Not(Box::new(self.parse_unary()?)));
        }
        if self.peek() == Some(&Tok::LParen) {
            self.bump();
            let inner = self.parse_expr()?;
            self.expect(&Tok::RParen, "closing parenthesis")?;
            return Ok(inner);
        }
        self.parse_comparison()
    }

    fn parse_comparison(&mut self) -> Result<RuleExpr, RuleError> {
        let metric = self.parse_metric()?;
        let pos = self.pos();
        let op = match self.bump() {
            Some(Spanned { tok: Tok::Op(op), .. }) => *op,
            Some(s) => {
                return Err(RuleError::Syntax {
                    pos: s.pos,
                    message: "expected comparison operator".into(),
                })
            }
            None => {
                return Err(RuleError::Syntax {
                    pos,
                    message: "expected comparison operator, found end of input".into(),
                })
            }
        };
        let pos = self.pos();
        let literal = match self.bump() {
            Some(Spanned { tok: Tok::Number(n), .. }) => *n,
            Some(s) => {
                return Err(RuleError::Syntax {
                    pos: s.pos,
                    message: "expected numeric literal".into(),
                })
            }
            None => {
                return Err(RuleError::Syntax {
                    pos,
                    message: "expected numeric literal, found end of input".into(),
                })
            }
        };
        Ok(RuleExpr::Cmp(metric, op, literal))
    }

    fn parse_metric(&mut self) -> Result<MetricExpr, RuleError> {
        let pos = self.pos();
        let name = match self.bump() {
            Some(Spanned { tok: Tok::Ident(name), pos }) => (name.clone(), *pos),
            Some(s) => {
                return Err(RuleError::Syntax {
                    pos: s.pos,
                    message: "expected metric name".into(),
                })
            }
            None => {
                return Err(RuleError::Syntax {
                    pos,
                    message: "expected metric name, found end of input".into(),
                })
            }
        };
        let (name, name_pos) = name;
        let lower = name.to_ascii_lowercase();
        self.expect(&Tok::LParen, "opening parenthesis after metric name")?;
        let metric = match lower.as_str() {
            "count" => MetricExpr::Count,
            "latest" => MetricExpr::Latest(self.parse_field(&lower)?),
            "sum" => MetricExpr::Sum(self.parse_field(&lower)?),
            "min" => MetricExpr::Min(self.parse_field(&lower)?),
            "max" => MetricExpr::Max(self.parse_field(&lower)?),
            "mean" => {
                let field = self.parse_field(&lower)?;
                let window = self.parse_window(&lower)?;
                MetricExpr::Mean(field, window)
            }
            "pct_change" => {
                let field = self.parse_field(&lower)?;
                let window = self.parse_window(&lower)?;
                MetricExpr::PctChange(field, window)
            }
            "abs" => MetricExpr::Abs(Box::new(self.parse_metric()?)),
            _ => {
                return Err(RuleError::UnknownMetric {
                    pos: name_pos,
                    name,
                })
            }
        };
        self.expect(&Tok::RParen, "closing parenthesis after metric arguments")?;
        Ok(metric)
    }

    fn parse_field(&mut self, metric: &str) -> Result<String, RuleError> {
        let pos = self.pos();
        match self.bump() {
            Some(Spanned { tok: Tok::Ident(field), .. }) => Ok(field.clone()),
            _ => Err(RuleError::Arity {
                pos,
                message: format!("{metric} expects a field name"),
            }),
        }
    }

    fn parse_window(&mut self, metric: &str) -> Result<u32, RuleError> {
        if self.peek() != Some(&Tok::Comma) {
            return Err(RuleError::Arity {
                pos: self.pos(),
                message: format!("{metric} expects a field name and a window length"),
            });
        }
        self.bump();
        let pos = self.pos();
        match self.bump() {
            Some(Spanned { tok: Tok::Number(n), pos }) => {
                let n = *n;
                if n.fract() != Decimal::ZERO || n < Decimal::ONE {
                    return Err(RuleError::Arity {
                        pos: *pos,
                        message: format!("{metric} window must be a positive integer"),
                    });
                }
                u32::try_from(n.mantissa() / 10i128.pow(n.scale())).map_err(|_| RuleError::Arity {
                    pos: *pos,
                    message: format!("{metric} window out of range"),
                })
            }
            _ => Err(RuleError::Arity {
                pos,
                message: format!("{metric} expects a window length"),
            }),
        }
    }
}

/// Parses rule text into an expression tree.
pub fn parse_rule(text: &str) -> Result<RuleExpr, RuleError> {
    let toks = lex(text)?;
    let mut parser = Parser {
        toks: &toks,
        at: 0,
        end: text.len(),
    };
    let expr = parser.parse_expr()?;
    if let Some(s) = parser.toks.get(parser.at) {
        return Err(RuleError::Syntax {
            pos: s.pos,
            message: "unexpected trailing input".into(),
        });
    }
    Ok(expr)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Per-period numeric series the evaluator reads: one vector per field,
/// all the same length, ascending period order. The reserved series
/// `count` holds the per-period record count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SeriesTable {
    series: BTreeMap<String, Vec<Decimal>>,
    len: usize,
}

impl SeriesTable {
    pub fn new(series: BTreeMap<String, Vec<Decimal>>) -> Result<SeriesTable, RuleError> {
        let len = series.values().next().map(|v| v.len()).unwrap_or(0);
        for (name, values) in &series {
            if values.len() != len {
                return Err(RuleError::MismatchedSeries(format!(
                    "{name} has {} entries, expected {len}",
                    values.len()
                )));
            }
        }
        Ok(SeriesTable { series, len })
    }

    /// Table with just the reserved `count` series, e.g. one category's
    /// per-period counts.
    pub fn from_counts(counts: &[u64]) -> SeriesTable {
        let series: Vec<Decimal> = counts.iter().map(|&c| Decimal::from(c)).collect();
        let len = series.len();
        SeriesTable {
            series: BTreeMap::from([("count".to_string(), series)]),
            len,
        }
    }

    /// Builds per-period series from one record set per period: `count`
    /// is the record count, and every numeric field aggregates by sum
    /// within its period.
    pub fn from_frames(frames: &[RecordSet]) -> SeriesTable {
        let mut series: BTreeMap<String, Vec<Decimal>> = BTreeMap::new();
        let len = frames.len();
        let mut counts = Vec::with_capacity(len);
        for (i, frame) in frames.iter().enumerate() {
            counts.push(Decimal::from(frame.len() as u64));
            for record in &frame.records {
                for (field, value) in record {
                    if let Value::Number(n) = value {
                        let entry = series
                            .entry(field.clone())
                            .or_insert_with(|| vec![Decimal::ZERO; len]);
                        entry[i] += n;
                    }
                }
            }
        }
        series.insert("count".to_string(), counts);
        SeriesTable { series, len }
    }

    pub fn periods(&self) -> usize {
        self.len
    }

    fn get(&self, field: &str) -> Result<&[Decimal], RuleError> {
        self.series
            .get(field)
            .map(|v| v.as_slice())
            .ok_or_else(|| RuleError::UnknownField(field.to_string()))
    }
}

/// Result of strict rule evaluation: the verdict plus every metric value
/// computed along the way, keyed by the metric's printed form, for
/// headline templating.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub fired: bool,
    pub bindings: BTreeMap<String, Decimal>,
}

fn eval_metric(
    metric: &MetricExpr,
    data: &SeriesTable,
    bindings: &mut BTreeMap<String, Decimal>,
) -> Result<Decimal, RuleError> {
    let need = |needed: usize| -> Result<(), RuleError> {
        if data.len < needed {
            Err(RuleError::InsufficientData {
                metric: metric.to_string(),
                needed,
                have: data.len,
            })
        } else {
            Ok(())
        }
    };
    let value = match metric {
        MetricExpr::Count => {
            need(1)?;
            *data.get("count")?.last().expect("nonempty")
        }
        MetricExpr::Latest(field) => {
            need(1)?;
            *data.get(field)?.last().expect("nonempty")
        }
        MetricExpr::Sum(field) => {
            need(1)?;
            data.get(field)?.iter().copied().sum()
        }
        MetricExpr::Min(field) => {
            need(1)?;
            data.get(field)?.iter().copied().min().expect("nonempty")
        }
        MetricExpr::Max(field) => {
            need(1)?;
            data.get(field)?.iter().copied().max().expect("nonempty")
        }
        MetricExpr::Mean(field, n) => {
            need(*n as usize)?;
            let values = data.get(field)?;
            stats::rolling_mean(values, *n as usize).map_err(|_| {
                RuleError::InsufficientData {
                    metric: metric.to_string(),
                    needed: *n as usize,
                    have: values.len(),
                }
            })?
        }
        MetricExpr::PctChange(field, n) => {
            need(*n as usize + 1)?;
            let values = data.get(field)?;
            let latest = *values.last().expect("nonempty");
            let baseline_values = &values[..values.len() - 1];
            let baseline =
                stats::rolling_mean(baseline_values, *n as usize).map_err(|_| {
                    RuleError::InsufficientData {
                        metric: metric.to_string(),
                        needed: *n as usize + 1,
                        have: values.len(),
                    }
                })?;
            stats::pct_change(latest, baseline).map_err(|_| RuleError::ZeroBaseline {
                metric: metric.to_string(),
            })?
        }
        MetricExpr::Abs(inner) => eval_metric(inner, data, bindings)?.abs(),
    };
    bindings.insert(metric.to_string(), value);
    Ok(value)
}

fn eval_expr(
    expr: &RuleExpr,
    data: &SeriesTable,
    bindings: &mut BTreeMap<String, Decimal>,
) -> Result<bool, RuleError> {
    match expr {
        // Strict evaluation: both sides always run so bindings are complete.
        RuleExpr::Or(l, r) => {
            let lv = eval_expr(l, data, bindings)?;
            let rv = eval_expr(r, data, bindings)?;
            Ok(lv || rv)
        }
        RuleExpr::And(l, r) => {
            let lv = eval_expr(l, data, bindings)?;
            let rv = eval_expr(r, data, bindings)?;
            Ok(lv && rv)
        }
        RuleExpr::Not(inner) => Ok(!eval_expr(inner, data, bindings)?),
        RuleExpr::Cmp(metric, op, literal) => {
            let value = eval_metric(metric, data, bindings)?;
            Ok(op.apply(value, *literal))
        }
    }
}

/// Evaluates a rule against series data.
pub fn eval_rule(expr: &RuleExpr, data: &SeriesTable) -> Result<EvalOutcome, RuleError> {
    let mut bindings = BTreeMap::new();
    let fired = eval_expr(expr, data, &mut bindings)?;
    Ok(EvalOutcome { fired, bindings })
}
