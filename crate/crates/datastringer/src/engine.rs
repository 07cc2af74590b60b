//! Runs one use case end-to-end: fetch, normalize, consult history,
//! apply the stringer kind's logic, and produce alert drafts.
//!
//! Operational failures never abort a run silently: they become
//! info-severity drafts that travel through the same sinks as stories,
//! so an unattended engine reports its own breakage.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use rust_decimal::{Decimal, RoundingStrategy};
use sha2::{Digest, Sha256};

use crate::config::{StringerKind, UseCase};
use crate::ingest::{self, Fetcher, IngestError, SourceFormat, SourceSpec};
use crate::rules::{self, RuleExpr, SeriesTable};
// Rule parsing/evaluation is part of this engine's surface.
pub use crate::rules::{eval_rule, parse_rule, EvalOutcome, RuleError};
use crate::snapshot::{canonicalize, content_hash, diff, parse_canonical, SnapshotStore, StoreError};
use crate::stats::{self, CategoryOutcome, RuleDirection, ThresholdRule};
use crate::value::{Period, RecordSet, Value};

/// Alert weight: stories are the findings journalists asked for; info
/// drafts carry operational signals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DraftSeverity {
    Info,
    Story,
}

impl DraftSeverity {
    pub fn as_str(self) -> &'static str {
        match self {
            DraftSeverity::Info => "info",
            DraftSeverity::Story => "story",
        }
    }
}

/// A triggered finding, ready for dispatch.
#[derive(Debug, Clone, PartialEq)]
pub struct AlertDraft {
    pub headline: String,
    pub body: String,
    pub metrics: BTreeMap<String, Value>,
    pub dedup_key: String,
    pub severity: DraftSeverity,
}

impl AlertDraft {
    fn sort_key(&self) -> (String, String) {
        let category = self
            .metrics
            .get("category")
            .map(|v| v.render())
            .unwrap_or_default();
        (category, self.headline.clone())
    }
}

/// Everything a stringer needs at run time. The current period derives
/// deterministically from `now` (UTC calendar month).
pub struct StringerContext<'a> {
    pub now: DateTime<Utc>,
    pub store: &'a SnapshotStore,
    pub fetcher: &'a Fetcher,
}

impl<'a> StringerContext<'a> {
    /// The UTC calendar month containing `now`.
    pub fn current_period(&self) -> Period {
        Period::containing(self.now)
    }

    /// The most recent complete month: what "latest" means for monthly data.
    pub fn latest_period(&self) -> Period {
        Period::latest_complete(self.now)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("use case {use_case}: missing parameter {name:?}")]
    MissingParameter { use_case: String, name: String },
    #[error("use case {use_case}: parameter {name:?}: {message}")]
    InvalidParameter {
        use_case: String,
        name: String,
        message: String,
    },
    #[error("use case {use_case}: {source}")]
    Template {
        use_case: String,
        #[source]
        source: IngestError,
    },
    #[error("use case {use_case}: {source}")]
    Store {
        use_case: String,
        #[source]
        source: StoreError,
    },
}

// ---------------------------------------------------------------------------
// Parameter access
// ---------------------------------------------------------------------------

fn required<'u>(uc: &'u UseCase, name: &str) -> Result<&'u str, EngineError> {
    uc.param(name).ok_or_else(|| EngineError::MissingParameter {
        use_case: uc.id.clone(),
        name: name.to_string(),
    })
}

fn invalid(uc: &UseCase, name: &str, message: impl Into<String>) -> EngineError {
    EngineError::InvalidParameter {
        use_case: uc.id.clone(),
        name: name.to_string(),
        message: message.into(),
    }
}

fn source_spec(uc: &UseCase) -> Result<SourceSpec, EngineError> {
    let url_template = required(uc, "url")?.to_string();
    let format = match uc.param("format") {
        None => SourceFormat::Json,
        Some(f) => SourceFormat::parse(f).ok_or_else(|| invalid(uc, "format", "expected json or csv"))?,
    };
    let timeout_secs: u64 = match uc.param("timeout_secs") {
        None => 30,
        Some(t) => t
            .parse()
            .map_err(|_| invalid(uc, "timeout_secs", "expected a positive integer"))?,
    };
    let has_header = match uc.param("has_header") {
        None => true,
        Some(h) => h
            .parse()
            .map_err(|_| invalid(uc, "has_header", "expected true or false"))?,
    };
    let mut headers = BTreeMap::new();
    for (key, value) in &uc.parameters {
        if let Some(name) = key.strip_prefix("header.") {
            headers.insert(name.to_string(), value.clone());
        }
    }
    Ok(SourceSpec {
        url_template,
        format,
        record_path: uc.param("record_path").map(str::to_string),
        timeout: std::time::Duration::from_secs(timeout_secs.max(1)),
        headers,
        has_header,
    })
}

// ---------------------------------------------------------------------------
// Entry points
// ---------------------------------------------------------------------------

/// Dispatches on the stringer kind and returns drafts sorted by
/// (category, headline). Callers gate on `enabled`; a disabled use case
/// never reaches here.
pub fn run_use_case(uc: &UseCase, ctx: &StringerContext) -> Result<Vec<AlertDraft>, EngineError> {
    debug_assert!(uc.enabled, "caller must gate on enabled");
    let mut drafts = match uc.stringer_kind {
        StringerKind::SnapshotDiff => run_snapshot_diff(uc, ctx)?,
        StringerKind::CategoryThreshold => run_category_threshold(uc, ctx)?,
        StringerKind::ExpressionRule => run_expression_rule(uc, ctx)?,
    };
    drafts.sort_by_key(|d| d.sort_key());
    Ok(drafts)
}

/// Result of one use case within an engine run.
#[derive(Debug, Clone, PartialEq)]
pub struct UseCaseRun {
    pub use_case_id: String,
    pub drafts: Vec<AlertDraft>,
    /// Set when the use case failed outright; the failure is also
    /// represented as an info draft in `drafts`.
    pub error: Option<String>,
}

/// Runs every given use case, up to `parallelism` at a time (default:
/// one thread per use case, capped at 4). Results keep config order, and
/// an error in one use case never aborts the others.
pub fn run_all(
    use_cases: &[&UseCase],
    ctx: &StringerContext,
    parallelism: Option<usize>,
) -> Vec<UseCaseRun> {
    let workers = parallelism
        .unwrap_or_else(|| use_cases.len().min(4))
        .clamp(1, use_cases.len().max(1));
    let results: Mutex<Vec<Option<UseCaseRun>>> = Mutex::new(vec![None; use_cases.len()]);
    let cursor = AtomicUsize::new(0);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, Ordering::SeqCst);
                if i >= use_cases.len() {
                    break;
                }
                let uc = use_cases[i];
                let run = match run_use_case(uc, ctx) {
                    Ok(drafts) => UseCaseRun {
                        use_case_id: uc.id.clone(),
                        drafts,
                        error: None,
                    },
                    Err(e) => {
                        let message = e.to_string();
                        UseCaseRun {
                            use_case_id: uc.id.clone(),
                            drafts: vec![operational_draft(uc, ctx, &message)],
                            error: Some(message),
                        }
                    }
                };
                results.lock().unwrap()[i] = Some(run);
            });
        }
    });

    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

/// Info-severity draft describing an operational failure. Deduped per
/// use case, day and message, so a persistent breakage reports once a
/// day rather than once a run.
fn operational_draft(uc: &UseCase, ctx: &StringerContext, message: &str) -> AlertDraft {
    let digest = hex::encode(Sha256::digest(message.as_bytes()));
    let mut metrics = BTreeMap::new();
    metrics.insert("error".to_string(), Value::from(message.to_string()));
    AlertDraft {
        headline: format!("Monitoring issue in {}", uc.id),
        body: message.to_string(),
        metrics,
        dedup_key: format!(
            "{}/error/{}/{}",
            uc.id,
            ctx.now.date_naive(),
            &digest[..12]
        ),
        severity: DraftSeverity::Info,
    }
}

// ---------------------------------------------------------------------------
// snapshot_diff
// ---------------------------------------------------------------------------

/// Body lines are capped so a bulk upstream rewrite cannot produce a
/// megabyte email.
const DIFF_BODY_LINES: usize = 50;

/// Fetches the dataset, compares it with the previous version stored
/// locally, and returns the differences as one draft. First run
/// bootstraps silently: the snapshot is saved and no alert is emitted.
pub fn run_snapshot_diff(uc: &UseCase, ctx: &StringerContext) -> Result<Vec<AlertDraft>, EngineError> {
    let source = source_spec(uc)?;
    let url = ingest::render_url(&source.url_template, &uc.parameters, None).map_err(|e| {
        EngineError::Template {
            use_case: uc.id.clone(),
            source: e,
        }
    })?;

    let new_set = match fetch_and_parse(&source, &url, ctx) {
        Ok(rs) => rs,
        Err(e) => {
            // No snapshot overwrite on failure: the last good version
            // stays authoritative.
            return Ok(vec![operational_draft(uc, ctx, &e.to_string())]);
        }
    };
    let new_canonical = canonicalize(&new_set);
    let new_hash = content_hash(&new_canonical);

    let mut drafts = Vec::new();
    let previous = match ctx.store.load_previous(&uc.id, "latest") {
        Ok(p) => p,
        Err(e @ StoreError::Corrupt { .. }) | Err(e @ StoreError::CorruptMeta { .. }) => {
            drafts.push(operational_draft(uc, ctx, &e.to_string()));
            None
        }
        Err(e) => {
            return Err(EngineError::Store {
                use_case: uc.id.clone(),
                source: e,
            })
        }
    };

    let save = |rs: &RecordSet| -> Result<(), EngineError> {
        ctx.store
            .save(&uc.id, "latest", rs, ctx.now)
            .map(|_| ())
            .map_err(|e| EngineError::Store {
                use_case: uc.id.clone(),
                source: e,
            })
    };

    let Some(previous) = previous else {
        save(&new_set)?;
        return Ok(drafts); // bootstrap: no alert on the entire initial dataset
    };
    if previous.content_hash == new_hash {
        return Ok(drafts);
    }

    let old_set = match parse_canonical(&previous.payload) {
        Ok(rs) => rs,
        Err(e) => {
            drafts.push(operational_draft(
                uc,
                ctx,
                &format!("stored snapshot unreadable: {e}"),
            ));
            save(&new_set)?;
            return Ok(drafts);
        }
    };
    let key_fields: Vec<String> = uc
        .param("key_fields")
        .map(|s| {
            s.split(',')
                .map(str::trim)
                .filter(|f| !f.is_empty())
                .map(str::to_string)
                .collect()
        })
        .unwrap_or_default();
    let changes = match diff(&old_set, &new_set, &key_fields) {
        Ok(d) => d,
        Err(e) => {
            drafts.push(operational_draft(uc, ctx, &e.to_string()));
            return Ok(drafts); // keep the old snapshot; retry next run
        }
    };
    save(&new_set)?;
    if changes.is_empty() {
        return Ok(drafts);
    }

    let mut lines = Vec::new();
    for record in &changes.added {
        lines.push(format!("+ {}", crate::value::render_record(record)));
    }
    for record in &changes.removed {
        lines.push(format!("- {}", crate::value::render_record(record)));
    }
    for change in &changes.changed {
        let show = |v: &Option<Value>| match v {
            Some(v) => v.render_json(),
            None => "(absent)".to_string(),
        };
        lines.push(format!(
            "~ {}: {}: {} -> {}",
            change.record_key,
            change.field,
            show(&change.old),
            show(&change.new)
        ));
    }
    let total = lines.len();
    let mut body = lines
        .into_iter()
        .take(DIFF_BODY_LINES)
        .collect::<Vec<_>>()
        .join("\n");
    if total > DIFF_BODY_LINES {
        body.push_str(&format!("\n... +{} more", total - DIFF_BODY_LINES));
    }

    let mut bindings = BTreeMap::new();
    bindings.insert("use_case".to_string(), Value::from(uc.id.clone()));
    bindings.insert("added".to_string(), Value::from(changes.added.len() as u64));
    bindings.insert("removed".to_string(), Value::from(changes.removed.len() as u64));
    bindings.insert("changed".to_string(), Value::from(changes.changed.len() as u64));
    if let Some(place) = uc.param("place") {
        bindings.insert("place".to_string(), Value::from(place));
    }
    let template = uc
        .headline_template
        .as_deref()
        .unwrap_or("Dataset {use_case} changed: {added} added, {removed} removed, {changed} changed");
    let rendered = format_headline(template, &bindings);
    warn_unknown(&uc.id, &rendered);

    drafts.push(AlertDraft {
        headline: rendered.text,
        body,
        metrics: bindings,
        dedup_key: format!("{}/diff/{}", uc.id, new_hash),
        severity: DraftSeverity::Story,
    });
    Ok(drafts)
}

fn fetch_and_parse(
    source: &SourceSpec,
    url: &str,
    ctx: &StringerContext,
) -> Result<RecordSet, IngestError> {
    let payload = ctx.fetcher.fetch(source, url)?;
    let mut rs = match source.format {
        SourceFormat::Json => ingest::parse_json(&payload.bytes, source.record_path.as_deref())?,
        SourceFormat::Csv => ingest::parse_csv(&payload.bytes, source.has_header)?,
    };
    rs.source_url = url.to_string();
    rs.fetched_at = Some(ctx.now);
    Ok(rs)
}

// ---------------------------------------------------------------------------
// category_threshold
// ---------------------------------------------------------------------------

/// The crime-stringer pipeline: fetch each month, sort into categories,
/// compare the latest month against the rolling baseline, and alert on
/// threshold crossings. Per-period fetches are cached as snapshots keyed
/// "YYYY-MM", so historical months are fetched once, ever.
pub fn run_category_threshold(
    uc: &UseCase,
    ctx: &StringerContext,
) -> Result<Vec<AlertDraft>, EngineError> {
    let window: u32 = required(uc, "numberOfMonths")?
        .parse()
        .map_err(|_| invalid(uc, "numberOfMonths", "expected a positive integer"))?;
    if window == 0 {
        return Err(invalid(uc, "numberOfMonths", "must be >= 1"));
    }
    let threshold: Decimal = required(uc, "threshold")?
        .parse()
        .map_err(|_| invalid(uc, "threshold", "expected a decimal number"))?;
    let direction = match uc.param("direction") {
        None | Some("both") => RuleDirection::Both,
        Some("rise_only") => RuleDirection::RiseOnly,
        Some("fall_only") => RuleDirection::FallOnly,
        Some(other) => return Err(invalid(uc, "direction", format!("unknown direction {other:?}"))),
    };
    let category_field = required(uc, "category_field")?.to_string();
    let source = source_spec(uc)?;

    let latest = ctx.latest_period();
    let periods: Vec<Period> = (0..=window).rev().map(|back| latest.minus(back)).collect();

    let mut frames = Vec::with_capacity(periods.len());
    let mut drafts = Vec::new();
    for period in &periods {
        match fetch_period_cached(uc, ctx, &source, *period, &mut drafts)? {
            PeriodFetch::Data(rs) => frames.push((*period, rs)),
            PeriodFetch::Empty => {
                drafts.push(operational_draft(
                    uc,
                    ctx,
                    &format!(
                        "insufficient history: no data for {period} and no cached snapshot; skipping this run"
                    ),
                ));
                return Ok(drafts);
            }
            PeriodFetch::Skip => return Ok(drafts),
        }
    }

    let aggregates: Vec<(Period, BTreeMap<String, u64>)> = frames
        .iter()
        .map(|(p, rs)| (*p, stats::aggregate_by_category(rs, &category_field)))
        .collect();
    let series = stats::CategorySeries::from_aggregates(&category_field, &aggregates);
    let rule = ThresholdRule::new(window, threshold)
        .map_err(|e| invalid(uc, "threshold", e.to_string()))?
        .with_direction(direction);
    let outcomes = match stats::evaluate_category_series(&series, &rule) {
        Ok(o) => o,
        Err(e) => {
            drafts.push(operational_draft(uc, ctx, &e.to_string()));
            return Ok(drafts);
        }
    };

    for outcome in outcomes {
        match outcome {
            CategoryOutcome::Triggered(finding) => {
                drafts.push(threshold_draft(uc, &finding, latest, window, threshold));
            }
            CategoryOutcome::NewActivity { category, latest: latest_count } => {
                drafts.push(new_activity_draft(uc, &category, latest_count, latest));
            }
            CategoryOutcome::Quiet => {}
        }
    }
    Ok(drafts)
}

/// What loading one period produced.
enum PeriodFetch {
    Data(RecordSet),
    /// No data upstream and nothing cached: insufficient history.
    Empty,
    /// Fetch/parse failed; an explanatory info draft was already pushed.
    Skip,
}

/// Loads the cached snapshot for a period or fetches and caches it.
fn fetch_period_cached(
    uc: &UseCase,
    ctx: &StringerContext,
    source: &SourceSpec,
    period: Period,
    drafts: &mut Vec<AlertDraft>,
) -> Result<PeriodFetch, EngineError> {
    let key = period.to_string();
    match ctx.store.load_previous(&uc.id, &key) {
        Ok(Some(snapshot)) => match parse_canonical(&snapshot.payload) {
            Ok(mut rs) => {
                rs.period = Some(period);
                return Ok(PeriodFetch::Data(rs));
            }
            Err(e) => {
                drafts.push(operational_draft(
                    uc,
                    ctx,
                    &format!("cached snapshot for {period} unreadable: {e}; refetching"),
                ));
            }
        },
        Ok(None) => {}
        Err(e @ StoreError::Corrupt { .. }) | Err(e @ StoreError::CorruptMeta { .. }) => {
            drafts.push(operational_draft(
                uc,
                ctx,
                &format!("{e}; refetching {period}"),
            ));
        }
        Err(e) => {
            return Err(EngineError::Store {
                use_case: uc.id.clone(),
                source: e,
            })
        }
    }

    let url = ingest::render_url(&source.url_template, &uc.parameters, Some(period)).map_err(
        |e| EngineError::Template {
            use_case: uc.id.clone(),
            source: e,
        },
    )?;
    let mut rs = match fetch_and_parse(source, &url, ctx) {
        Ok(rs) => rs,
        Err(e) => {
            drafts.push(operational_draft(uc, ctx, &e.to_string()));
            return Ok(PeriodFetch::Skip);
        }
    };
    if rs.is_empty() {
        // An empty month with no cache reads as "not published yet":
        // nothing is saved, so the period is retried next run.
        return Ok(PeriodFetch::Empty);
    }
    rs.period = Some(period);
    ctx.store
        .save(&uc.id, &key, &rs, ctx.now)
        .map_err(|e| EngineError::Store {
            use_case: uc.id.clone(),
            source: e,
        })?;
    Ok(PeriodFetch::Data(rs))
}

fn threshold_draft(
    uc: &UseCase,
    finding: &stats::ThresholdFinding,
    period: Period,
    window: u32,
    threshold: Decimal,
) -> AlertDraft {
    let mut bindings = base_bindings(uc, &finding.category, period);
    bindings.insert("direction".to_string(), Value::from(finding.direction.as_str()));
    bindings.insert("pct_change".to_string(), Value::Number(finding.pct_change));
    bindings.insert("baseline".to_string(), Value::Number(finding.baseline));
    bindings.insert("latest".to_string(), Value::Number(finding.latest));
    bindings.insert("window".to_string(), Value::from(window as u64));
    bindings.insert("threshold".to_string(), Value::Number(threshold));

    let template = uc.headline_template.as_deref().unwrap_or(if uc.param("place").is_some() {
        "{category_title} {direction_phrase} by {pct}% in {place}"
    } else {
        "{category_title} {direction_phrase} by {pct}%"
    });
    let rendered = format_headline(template, &bindings);
    warn_unknown(&uc.id, &rendered);

    let signed_pct = format!(
        "{}{}%",
        if finding.pct_change >= Decimal::ZERO { "+" } else { "" },
        one_decimal(finding.pct_change)
    );
    let body = format!(
        "Category: {}\nPeriod: {}\nLatest count: {}\nBaseline mean ({} periods): {}\nChange: {} (threshold {}%)",
        finding.category,
        period,
        finding.latest.normalize(),
        window,
        finding.baseline.normalize(),
        signed_pct,
        threshold.normalize(),
    );

    AlertDraft {
        headline: rendered.text,
        body,
        metrics: bindings,
        dedup_key: format!("{}/{}/{}", uc.id, period, finding.category),
        severity: DraftSeverity::Story,
    }
}

fn new_activity_draft(uc: &UseCase, category: &str, latest: Decimal, period: Period) -> AlertDraft {
    let mut bindings = base_bindings(uc, category, period);
    bindings.insert("direction".to_string(), Value::from("rise"));
    bindings.insert("latest".to_string(), Value::Number(latest));
    bindings.insert("baseline".to_string(), Value::Number(Decimal::ZERO));

    let template = uc.headline_template.as_deref().unwrap_or(if uc.param("place").is_some() {
        "{category_title} newly reported in {place}"
    } else {
        "{category_title} newly reported"
    });
    let rendered = format_headline(template, &bindings);
    warn_unknown(&uc.id, &rendered);

    let body = format!(
        "Category: {category}\nPeriod: {period}\nLatest count: {} after a baseline of zero",
        latest.normalize()
    );
    AlertDraft {
        headline: rendered.text,
        body,
        metrics: bindings,
        dedup_key: format!("{}/{}/{}", uc.id, period, category),
        severity: DraftSeverity::Story,
    }
}

fn base_bindings(uc: &UseCase, category: &str, period: Period) -> BTreeMap<String, Value> {
    let mut bindings = BTreeMap::new();
    bindings.insert("use_case".to_string(), Value::from(uc.id.clone()));
    bindings.insert("category".to_string(), Value::from(category));
    bindings.insert("period".to_string(), Value::from(period.to_string()));
    if let Some(place) = uc.param("place") {
        bindings.insert("place".to_string(), Value::from(place));
    }
    bindings
}

// ---------------------------------------------------------------------------
// expression_rule
// ---------------------------------------------------------------------------

/// Evaluates a declarative rule over the fetched data. With a
/// `category_field` parameter the rule runs once per category over
/// per-period series; otherwise once over the whole dataset. The number
/// of periods fetched derives from the rule's deepest window; sources
/// without a `{period}` placeholder are fetched once.
pub fn run_expression_rule(uc: &UseCase, ctx: &StringerContext) -> Result<Vec<AlertDraft>, EngineError> {
    let rule_text = required(uc, "rule")?;
    let rule = rules::parse_rule(rule_text)
        .map_err(|e| invalid(uc, "rule", e.to_string()))?;
    let source = source_spec(uc)?;
    let latest = ctx.latest_period();
    let periodic = source.url_template.contains("{period}");

    let mut drafts = Vec::new();
    let mut frames: Vec<RecordSet> = Vec::new();
    if periodic {
        let needs = rule.required_periods() as u32;
        let periods: Vec<Period> = (0..needs).rev().map(|back| latest.minus(back)).collect();
        for period in periods {
            match fetch_period_cached(uc, ctx, &source, period, &mut drafts)? {
                PeriodFetch::Data(rs) => frames.push(rs),
                PeriodFetch::Empty => {
                    drafts.push(operational_draft(
                        uc,
                        ctx,
                        &format!("insufficient history: no data for {period}; skipping this run"),
                    ));
                    return Ok(drafts);
                }
                PeriodFetch::Skip => return Ok(drafts),
            }
        }
    } else {
        let url = ingest::render_url(&source.url_template, &uc.parameters, None).map_err(|e| {
            EngineError::Template {
                use_case: uc.id.clone(),
                source: e,
            }
        })?;
        match fetch_and_parse(&source, &url, ctx) {
            Ok(rs) => frames.push(rs),
            Err(e) => {
                drafts.push(operational_draft(uc, ctx, &e.to_string()));
                return Ok(drafts);
            }
        }
    }

    match uc.param("category_field") {
        Some(category_field) => {
            let mut categories: Vec<String> = frames
                .iter()
                .flat_map(|rs| {
                    rs.records.iter().map(|r| {
                        r.get(category_field)
                            .map(|v| v.render())
                            .unwrap_or_else(|| stats::MISSING_CATEGORY.to_string())
                    })
                })
                .collect();
            categories.sort_unstable();
            categories.dedup();

            let mut reported_errors = Vec::new();
            for category in categories {
                let filtered: Vec<RecordSet> = frames
                    .iter()
                    .map(|rs| {
                        let records = rs
                            .records
                            .iter()
                            .filter(|r| {
                                r.get(category_field)
                                    .map(|v| v.render())
                                    .unwrap_or_else(|| stats::MISSING_CATEGORY.to_string())
                                    == category
                            })
                            .cloned()
                            .collect();
                        RecordSet::from_records(records)
                    })
                    .collect();
                let table = SeriesTable::from_frames(&filtered);
                match rules::eval_rule(&rule, &table) {
                    Ok(outcome) if outcome.fired => {
                        drafts.push(rule_draft(uc, &rule, &outcome.bindings, Some(&category), latest));
                    }
                    Ok(_) => {}
                    Err(e) => {
                        let message = e.to_string();
                        if !reported_errors.contains(&message) {
                            drafts.push(operational_draft(uc, ctx, &message));
                            reported_errors.push(message);
                        }
                    }
                }
            }
        }
        None => {
            let table = SeriesTable::from_frames(&frames);
            match rules::eval_rule(&rule, &table) {
                Ok(outcome) if outcome.fired => {
                    drafts.push(rule_draft(uc, &rule, &outcome.bindings, None, latest));
                }
                Ok(_) => {}
                Err(e) => drafts.push(operational_draft(uc, ctx, &e.to_string())),
            }
        }
    }
    Ok(drafts)
}

fn rule_draft(
    uc: &UseCase,
    rule: &RuleExpr,
    bindings: &BTreeMap<String, Decimal>,
    category: Option<&str>,
    period: Period,
) -> AlertDraft {
    let mut metrics = base_bindings(uc, category.unwrap_or("all"), period);
    metrics.insert("rule".to_string(), Value::from(rule.to_string()));
    for (metric, value) in bindings {
        metrics.insert(metric.clone(), Value::Number(*value));
    }

    let template = uc.headline_template.as_deref().unwrap_or(match (category, uc.param("place")) {
        (Some(_), Some(_)) => "Rule matched for {category_title} in {place} ({period})",
        (Some(_), None) => "Rule matched for {category_title} ({period})",
        (None, Some(_)) => "Rule matched for {use_case} in {place} ({period})",
        (None, None) => "Rule matched for {use_case} ({period})",
    });
    let rendered = format_headline(template, &metrics);
    warn_unknown(&uc.id, &rendered);

    let mut body = format!("Rule: {}\nPeriod: {}", rule, period);
    if let Some(category) = category {
        body.push_str(&format!("\nCategory: {category}"));
    }
    for (metric, value) in bindings {
        body.push_str(&format!("\n{metric} = {}", value.normalize()));
    }

    AlertDraft {
        headline: rendered.text,
        body,
        metrics,
        dedup_key: format!("{}/{}/{}", uc.id, period, category.unwrap_or("all")),
        severity: DraftSeverity::Story,
    }
}

// ---------------------------------------------------------------------------
// Headline templating
// ---------------------------------------------------------------------------

/// A rendered template plus the placeholders that had no binding (left
/// verbatim in the text).
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedHeadline {
    pub text: String,
    pub unknown_placeholders: Vec<String>,
}

fn warn_unknown(use_case: &str, rendered: &RenderedHeadline) {
    for name in &rendered.unknown_placeholders {
        log::warn!("use case {use_case}: headline placeholder {{{name}}} has no binding; left verbatim");
    }
}

/// Substitutes `{placeholder}`s from the bindings. Derived placeholders:
/// `{category_title}` (category, dashes to spaces, sentence case),
/// `{direction_phrase}` ("on the rise"/"down"), `{pct}` (absolute percent,
/// half-up integer), `{pct_precise}` (one decimal). Unknown placeholders
/// stay verbatim and are reported back.
pub fn format_headline(template: &str, bindings: &BTreeMap<String, Value>) -> RenderedHeadline {
    let mut text = String::with_capacity(template.len());
    let mut unknown = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        text.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let Some(close) = after.find('}') else {
            text.push_str(&rest[open..]);
            rest = "";
            break;
        };
        let name = &after[..close];
        match derive_placeholder(name, bindings) {
            Some(value) => text.push_str(&value),
            None => {
                unknown.push(name.to_string());
                text.push_str(&rest[open..open + close + 2]);
            }
        }
        rest = &after[close + 1..];
    }
    text.push_str(rest);
    RenderedHeadline {
        text,
        unknown_placeholders: unknown,
    }
}

fn derive_placeholder(name: &str, bindings: &BTreeMap<String, Value>) -> Option<String> {
    match name {
        "category_title" => bindings.get("category").map(|v| title_case(&v.render())),
        "direction_phrase" => bindings.get("direction").map(|v| {
            match v.render().as_str() {
                "fall" => "down",
                _ => "on the rise",
            }
            .to_string()
        }),
        "pct" => bindings
            .get("pct_change")
            .and_then(Value::as_number)
            .map(|d| {
                d.abs()
                    .round_dp_with_strategy(0, RoundingStrategy::MidpointAwayFromZero)
                    .normalize()
                    .to_string()
            }),
        "pct_precise" => bindings
            .get("pct_change")
            .and_then(Value::as_number)
            .map(|d| {
                let rounded = d
                    .abs()
                    .round_dp_with_strategy(1, RoundingStrategy::MidpointAwayFromZero);
                format!("{:.1}", f64::from_str(&rounded.to_string()).unwrap_or_default())
            }),
        other => bindings.get(other).map(Value::render),
    }
}

/// "bicycle-theft" -> "Bicycle theft": dashes to spaces, sentence case.
fn title_case(category: &str) -> String {
    let spaced = category.replace('-', " ");
    let mut chars = spaced.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().collect::<String>() + chars.as_str(),
        None => spaced,
    }
}

fn one_decimal(d: Decimal) -> String {
    let rounded = d.round_dp_with_strategy(1, RoundingStrategy::MidpointAwayFromZero);
    format!("{:.1}", f64::from_str(&rounded.to_string()).unwrap_or_default())
}
