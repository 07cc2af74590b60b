//! Numeric core of the category stringer: per-category counts, rolling
//! baselines, percent change and threshold evaluation.
//!
//! All arithmetic is exact decimal so the same data produces the same
//! alerts on every machine.

use std::collections::BTreeMap;

use rust_decimal::Decimal;

use crate::value::{Period, RecordSet};

/// Records missing the category field are counted under this bucket, so
/// category counts always sum to the total record count.
pub const MISSING_CATEGORY: &str = "(missing)";

/// Per-category count vectors over an ascending run of periods. Every
/// vector has exactly one entry per period; periods where a category was
/// absent count 0.
#[derive(Debug, Clone, PartialEq)]
pub struct CategorySeries {
    pub category_field: String,
    pub periods: Vec<Period>,
    pub counts: BTreeMap<String, Vec<u64>>,
}

impl CategorySeries {
    /// Builds a series from per-period aggregates, in period order.
    pub fn from_aggregates(
        category_field: &str,
        aggregates: &[(Period, BTreeMap<String, u64>)],
    ) -> CategorySeries {
        let periods: Vec<Period> = aggregates.iter().map(|(p, _)| *p).collect();
        debug_assert!(periods.windows(2).all(|w| w[0] < w[1]), "periods ascending");
        let mut counts: BTreeMap<String, Vec<u64>> = BTreeMap::new();
        for category in aggregates.iter().flat_map(|(_, m)| m.keys()) {
            counts.entry(category.clone()).or_insert_with(|| vec![0; periods.len()]);
        }
        for (i, (_, aggregate)) in aggregates.iter().enumerate() {
            for (category, n) in aggregate {
                counts.get_mut(category).expect("category registered")[i] = *n;
            }
        }
        CategorySeries {
            category_field: category_field.to_string(),
            periods,
            counts,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Rise,
    Fall,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Rise => "rise",
            Direction::Fall => "fall",
        }
    }
}

/// Which changes may trigger an alert. The rule is two-sided by default;
/// one-sided monitoring is opt-in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RuleDirection {
    #[default]
    Both,
    RiseOnly,
    FallOnly,
}

impl RuleDirection {
    pub fn permits(self, direction: Direction) -> bool {
        matches!(
            (self, direction),
            (RuleDirection::Both, _)
                | (RuleDirection::RiseOnly, Direction::Rise)
                | (RuleDirection::FallOnly, Direction::Fall)
        )
    }
}

/// Baseline window length and percent threshold: how many periods feed
/// the rolling mean, and how far the latest value must depart from it.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdRule {
    pub number_of_periods: u32,
    pub threshold_pct: Decimal,
    pub direction: RuleDirection,
}

impl ThresholdRule {
    pub fn new(number_of_periods: u32, threshold_pct: Decimal) -> Result<ThresholdRule, StatsError> {
        if number_of_periods == 0 {
            return Err(StatsError::InvalidRule("number_of_periods must be >= 1".into()));
        }
        if threshold_pct < Decimal::ZERO {
            return Err(StatsError::InvalidRule("threshold_pct must be >= 0".into()));
        }
        Ok(ThresholdRule {
            number_of_periods,
            threshold_pct,
            direction: RuleDirection::Both,
        })
    }

    pub fn with_direction(mut self, direction: RuleDirection) -> ThresholdRule {
        self.direction = direction;
        self
    }
}

/// One triggered category: the numbers that make the headline.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdFinding {
    pub category: String,
    pub baseline: Decimal,
    pub latest: Decimal,
    pub pct_change: Decimal,
    pub direction: Direction,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StatsError {
    #[error("insufficient data: need {needed} values, have {have}")]
    InsufficientData { needed: usize, have: usize },
    #[error("zero baseline: latest {latest} against an all-zero baseline")]
    ZeroBaseline { latest: Decimal },
    #[error("invalid rule: {0}")]
    InvalidRule(String),
}

/// Counts records per distinct value of `category_field`. Records lacking
/// the field land in [`MISSING_CATEGORY`].
pub fn aggregate_by_category(records: &RecordSet, category_field: &str) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for record in &records.records {
        let category = record
            .get(category_field)
            .map(|v| v.render())
            .unwrap_or_else(|| MISSING_CATEGORY.to_string());
        *counts.entry(category).or_insert(0) += 1;
    }
    counts
}

/// Arithmetic mean of the last `n` values, exact decimal.
pub fn rolling_mean(values: &[Decimal], n: usize) -> Result<Decimal, StatsError> {
    if n == 0 {
        return Err(StatsError::InvalidRule("window must be >= 1".into()));
    }
    if values.len() < n {
        return Err(StatsError::InsufficientData {
            needed: n,
            have: values.len(),
        });
    }
    let window = &values[values.len() - n..];
    let sum: Decimal = window.iter().copied().sum();
    Ok(sum / Decimal::from(n as u64))
}

/// 100 × (latest − baseline) / baseline. A zero baseline has no percent
/// change; callers decide whether that is "new activity" or nothing.
pub fn pct_change(latest: Decimal, baseline: Decimal) -> Result<Decimal, StatsError> {
    if baseline.is_zero() {
        return Err(StatsError::ZeroBaseline { latest });
    }
    Ok(Decimal::ONE_HUNDRED * (latest - baseline) / baseline)
}

/// Applies the two-sided threshold: rise when pct ≥ x, fall when
/// pct ≤ −x, inclusive on both boundaries. A threshold of 0 therefore
/// fires on every evaluation (rise wins the pct = 0 tie).
pub fn evaluate_threshold(pct: Decimal, rule: &ThresholdRule) -> Option<Direction> {
    if pct >= rule.threshold_pct && rule.direction.permits(Direction::Rise) {
        return Some(Direction::Rise);
    }
    if pct <= -rule.threshold_pct && rule.direction.permits(Direction::Fall) {
        return Some(Direction::Fall);
    }
    None
}

/// What a category's baseline comparison produced.
#[derive(Debug, Clone, PartialEq)]
pub enum CategoryOutcome {
    /// Threshold crossed: a story-ready finding.
    Triggered(ThresholdFinding),
    /// Baseline was all zeros and the latest period has activity.
    NewActivity { category: String, latest: Decimal },
    /// Within the threshold band (or zero baseline with zero latest).
    Quiet,
}

/// Runs the full rolling-mean / percent-change / threshold pipeline for
/// every category of a series. The series must span the rule's baseline
/// window plus the latest period.
pub fn evaluate_category_series(
    series: &CategorySeries,
    rule: &ThresholdRule,
) -> Result<Vec<CategoryOutcome>, StatsError> {
    let needed = rule.number_of_periods as usize + 1;
    if series.periods.len() < needed {
        return Err(StatsError::InsufficientData {
            needed,
            have: series.periods.len(),
        });
    }
    let mut outcomes = Vec::new();
    for (category, counts) in &series.counts {
        let latest = Decimal::from(*counts.last().expect("count per period"));
        let baseline_slice = &counts[..counts.len() - 1];
        let baseline_values: Vec<Decimal> =
            baseline_slice.iter().map(|&c| Decimal::from(c)).collect();
        let baseline = rolling_mean(&baseline_values, rule.number_of_periods as usize)?;
        let outcome = match pct_change(latest, baseline) {
            Ok(pct) => match evaluate_threshold(pct, rule) {
                Some(direction) => CategoryOutcome::Triggered(ThresholdFinding {
                    category: category.clone(),
                    baseline,
                    latest,
                    pct_change: pct,
                    direction,
                }),
                None => CategoryOutcome::Quiet,
            },
            Err(StatsError::ZeroBaseline { latest }) if latest > Decimal::ZERO => {
                CategoryOutcome::NewActivity {
                    category: category.clone(),
                    latest,
                }
            }
            Err(StatsError::ZeroBaseline { .. }) => CategoryOutcome::Quiet,
            Err(e) => return Err(e),
        };
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

/// Criterion for [`rank_categories`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankBy {
    LatestCount,
    /// |percent change| of the latest value against the mean of the
    /// `window` periods before it. Zero-baseline categories with activity
    /// outrank every finite change; zero-to-zero ranks as 0.
    AbsPctChange { window: u32 },
}

/// Orders categories descending by the chosen criterion, ties broken
/// lexicographically by category name.
pub fn rank_categories(series: &CategorySeries, by: RankBy) -> Result<Vec<String>, StatsError> {
    #[derive(PartialEq, PartialOrd)]
    enum Score {
        Finite(Decimal),
        Infinite,
    }

    let mut scored: Vec<(String, Score)> = Vec::new();
    for (category, counts) in &series.counts {
        let score = match by {
            RankBy::LatestCount => {
                Score::Finite(Decimal::from(*counts.last().ok_or(StatsError::InsufficientData {
                    needed: 1,
                    have: 0,
                })?))
            }
            RankBy::AbsPctChange { window } => {
                let needed = window as usize + 1;
                if counts.len() < needed {
                    return Err(StatsError::InsufficientData {
                        needed,
                        have: counts.len(),
                    });
                }
                let latest = Decimal::from(*counts.last().expect("nonempty"));
                let baseline_values: Vec<Decimal> =
                    counts[..counts.len() - 1].iter().map(|&c| Decimal::from(c)).collect();
                let baseline = rolling_mean(&baseline_values, window as usize)?;
                match pct_change(latest, baseline) {
                    Ok(pct) => Score::Finite(pct.abs()),
                    Err(StatsError::ZeroBaseline { latest }) if latest > Decimal::ZERO => {
                        Score::Infinite
                    }
                    Err(StatsError::ZeroBaseline { .. }) => Score::Finite(Decimal::ZERO),
                    Err(e) => return Err(e),
                }
            }
        };
        scored.push((category.clone(), score));
    }
    scored.sort_by(|(name_a, score_a), (name_b, score_b)| {
        match (score_a, score_b) {
            (Score::Infinite, Score::Infinite) => name_a.cmp(name_b),
            (Score::Infinite, Score::Finite(_)) => std::cmp::Ordering::Less,
            (Score::Finite(_), Score::Infinite) => std::cmp::Ordering::Greater,
            (Score::Finite(a), Score::Finite(b)) => b.cmp(a).then_with(|| name_a.cmp(name_b)),
        }
    });
    Ok(scored.into_iter().map(|(name, _)| name).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::{Record, Value};
    use std::str::FromStr;

    fn dec(s: &str) -> Decimal {
        Decimal::from_str(s).unwrap()
    }

    fn records_with_categories(categories: &[&str]) -> RecordSet {
        let records = categories
            .iter()
            .map(|c| {
                let mut r = Record::new();
                r.insert("category".into(), Value::from(*c));
                r
            })
            .collect();
        RecordSet::from_records(records)
    }

    #[test]
    fn aggregate_counts_by_hand() {
        // 3 bicycle-theft + 2 burglary, counted by hand.
        let rs = records_with_categories(&[
            "bicycle-theft",
            "burglary",
            "bicycle-theft",
            "bicycle-theft",
            "burglary",
        ]);
        let counts = aggregate_by_category(&rs, "category");
        assert_eq!(counts.get("bicycle-theft"), Some(&3));
        assert_eq!(counts.get("burglary"), Some(&2));
        assert_eq!(counts.len(), 2);
    }

    #[test]
    fn aggregate_empty_set_is_empty_map() {
        let counts = aggregate_by_category(&RecordSet::default(), "category");
        assert!(counts.is_empty());
    }

    #[test]
    fn aggregate_missing_field_uses_reserved_bucket() {
        let rs = RecordSet::from_records(vec![Record::new()]);
        let counts = aggregate_by_category(&rs, "category");
        assert_eq!(counts.get(MISSING_CATEGORY), Some(&1));
        assert_eq!(counts.len(), 1);
    }

    #[test]
    fn conservation_over_random_record_sets() {
        // Category counts must sum to the record count, missing bucket included.
        use rand::prelude::*;
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        for _ in 0..200 {
            let n = rng.gen_range(0..40);
            let records: Vec<Record> = (0..n)
                .map(|_| {
                    let mut r = Record::new();
                    if rng.gen_bool(0.8) {
                        let c = format!("cat{}", rng.gen_range(0..5));
                        r.insert("category".into(), Value::from(c));
                    }
                    r
                })
                .collect();
            let rs = RecordSet::from_records(records);
            let counts = aggregate_by_category(&rs, "category");
            let total: u64 = counts.values().sum();
            assert_eq!(total, n as u64);
        }
    }

    #[test]
    fn rolling_mean_constant_series() {
        let values = vec![dec("10"); 6];
        assert_eq!(rolling_mean(&values, 6).unwrap(), dec("10"));
    }

    #[test]
    fn rolling_mean_by_hand() {
        // 2+4+6+8+10+12 = 42; 42/6 = 7.
        let values: Vec<Decimal> = ["2", "4", "6", "8", "10", "12"].iter().map(|s| dec(s)).collect();
        assert_eq!(rolling_mean(&values, 6).unwrap(), dec("7"));
    }

    #[test]
    fn rolling_mean_uses_last_n() {
        let values: Vec<Decimal> = ["100", "2", "4"].iter().map(|s| dec(s)).collect();
        assert_eq!(rolling_mean(&values, 2).unwrap(), dec("3"));
    }

    #[test]
    fn rolling_mean_insufficient_data() {
        let values = vec![dec("5")];
        assert_eq!(
            rolling_mean(&values, 6),
            Err(StatsError::InsufficientData { needed: 6, have: 1 })
        );
    }

    #[test]
    fn rolling_mean_translation_equivariance() {
        let values: Vec<Decimal> = ["1", "7", "3", "9"].iter().map(|s| dec(s)).collect();
        let shifted: Vec<Decimal> = values.iter().map(|v| v + dec("5")).collect();
        let m = rolling_mean(&values, 4).unwrap();
        let ms = rolling_mean(&shifted, 4).unwrap();
        assert_eq!(ms, m + dec("5"));
    }

    #[test]
    fn pct_change_headline_magnitude() {
        // (13.4 − 10) / 10 × 100 = +34, the headline magnitude.
        assert_eq!(pct_change(dec("13.4"), dec("10")).unwrap(), dec("34"));
    }

    #[test]
    fn pct_change_identity_is_zero() {
        assert_eq!(pct_change(dec("17"), dec("17")).unwrap(), Decimal::ZERO);
    }

    #[test]
    fn pct_change_zero_baseline_signals() {
        assert_eq!(
            pct_change(dec("5"), Decimal::ZERO),
            Err(StatsError::ZeroBaseline { latest: dec("5") })
        );
    }

    #[test]
    fn threshold_fires_on_rise() {
        let rule = ThresholdRule::new(6, dec("10")).unwrap();
        assert_eq!(evaluate_threshold(dec("34"), &rule), Some(Direction::Rise));
    }

    #[test]
    fn threshold_fires_symmetrically_on_fall() {
        let rule = ThresholdRule::new(6, dec("10")).unwrap();
        assert_eq!(evaluate_threshold(dec("-34"), &rule), Some(Direction::Fall));
    }

    #[test]
    fn threshold_quiet_inside_band() {
        let rule = ThresholdRule::new(6, dec("10")).unwrap();
        assert_eq!(evaluate_threshold(dec("9.999"), &rule), None);
        assert_eq!(evaluate_threshold(dec("-9.999"), &rule), None);
    }

    #[test]
    fn threshold_boundary_is_inclusive() {
        let rule = ThresholdRule::new(6, dec("10")).unwrap();
        assert_eq!(evaluate_threshold(dec("10"), &rule), Some(Direction::Rise));
        assert_eq!(evaluate_threshold(dec("-10"), &rule), Some(Direction::Fall));
    }

    #[test]
    fn threshold_respects_direction_option() {
        let rise_only = ThresholdRule::new(6, dec("10"))
            .unwrap()
            .with_direction(RuleDirection::RiseOnly);
        assert_eq!(evaluate_threshold(dec("-34"), &rise_only), None);
        assert_eq!(evaluate_threshold(dec("34"), &rise_only), Some(Direction::Rise));
        let fall_only = ThresholdRule::new(6, dec("10"))
            .unwrap()
            .with_direction(RuleDirection::FallOnly);
        assert_eq!(evaluate_threshold(dec("34"), &fall_only), None);
        assert_eq!(evaluate_threshold(dec("-34"), &fall_only), Some(Direction::Fall));
    }

    #[test]
    fn two_sided_symmetry_property() {
        use rand::prelude::*;
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        let rule = ThresholdRule::new(3, dec("12.5")).unwrap();
        for _ in 0..500 {
            let pct = Decimal::new(rng.gen_range(-40000..40000), 3);
            let pos = evaluate_threshold(pct, &rule);
            let neg = evaluate_threshold(-pct, &rule);
            assert_eq!(pos.is_some(), neg.is_some(), "pct={pct}");
            if pct != Decimal::ZERO {
                if let (Some(a), Some(b)) = (pos, neg) {
                    assert_ne!(a, b);
                }
            }
        }
    }

    fn series(entries: &[(&str, &[u64])]) -> CategorySeries {
        let len = entries[0].1.len();
        let mut periods = Vec::with_capacity(len);
        let mut p = Period::new(2014, 1).unwrap();
        for _ in 0..len {
            periods.push(p);
            p = p.next();
        }
        CategorySeries {
            category_field: "category".into(),
            periods,
            counts: entries
                .iter()
                .map(|(name, counts)| (name.to_string(), counts.to_vec()))
                .collect(),
        }
    }

    #[test]
    fn evaluate_series_matches_headline_fixture() {
        // bicycle-theft 100×6 then 134 → +34%; burglary flat.
        let s = series(&[
            ("bicycle-theft", &[100, 100, 100, 100, 100, 100, 134]),
            ("burglary", &[80, 80, 80, 80, 80, 80, 80]),
        ]);
        let rule = ThresholdRule::new(6, dec("10")).unwrap();
        let outcomes = evaluate_category_series(&s, &rule).unwrap();
        assert_eq!(outcomes.len(), 2);
        match &outcomes[0] {
            CategoryOutcome::Triggered(f) => {
                assert_eq!(f.category, "bicycle-theft");
                assert_eq!(f.pct_change, dec("34"));
                assert_eq!(f.baseline, dec("100"));
                assert_eq!(f.latest, dec("134"));
                assert_eq!(f.direction, Direction::Rise);
            }
            other => panic!("expected trigger, got {other:?}"),
        }
        assert_eq!(outcomes[1], CategoryOutcome::Quiet);
    }

    #[test]
    fn evaluate_series_new_activity_policy() {
        let s = series(&[("fresh", &[0, 0, 0, 5]), ("dead", &[0, 0, 0, 0])]);
        let rule = ThresholdRule::new(3, dec("10")).unwrap();
        let outcomes = evaluate_category_series(&s, &rule).unwrap();
        assert_eq!(
            outcomes[1],
            CategoryOutcome::NewActivity {
                category: "fresh".into(),
                latest: dec("5")
            }
        );
        assert_eq!(outcomes[0], CategoryOutcome::Quiet);
    }

    #[test]
    fn rank_by_latest_count_two_elements() {
        let s = series(&[("a", &[1, 5]), ("b", &[1, 9])]);
        assert_eq!(rank_categories(&s, RankBy::LatestCount).unwrap(), vec!["b", "a"]);
    }

    #[test]
    fn rank_ties_break_lexicographically() {
        let s = series(&[("b", &[1, 5]), ("a", &[2, 5])]);
        assert_eq!(rank_categories(&s, RankBy::LatestCount).unwrap(), vec!["a", "b"]);
    }

    #[test]
    fn rank_by_abs_pct_change_matches_brute_force() {
        // Brute-force recomputation of every pct change, then sort.
        let s = series(&[
            ("a", &[10, 10, 10, 13]), // +30%
            ("b", &[10, 10, 10, 6]),  // -40%
            ("c", &[10, 10, 10, 11]), // +10%
        ]);
        let ranked = rank_categories(&s, RankBy::AbsPctChange { window: 3 }).unwrap();

        let mut brute: Vec<(String, f64)> = s
            .counts
            .iter()
            .map(|(name, c)| {
                let baseline = (c[0] + c[1] + c[2]) as f64 / 3.0;
                let pct = 100.0 * (c[3] as f64 - baseline) / baseline;
                (name.clone(), pct.abs())
            })
            .collect();
        brute.sort_by(|(na, sa), (nb, sb)| sb.partial_cmp(sa).unwrap().then(na.cmp(nb)));
        let brute_names: Vec<String> = brute.into_iter().map(|(n, _)| n).collect();
        assert_eq!(ranked, brute_names);
    }

    #[test]
    fn rank_insufficient_periods_for_pct() {
        let s = series(&[("a", &[1, 2])]);
        assert!(matches!(
            rank_categories(&s, RankBy::AbsPctChange { window: 3 }),
            Err(StatsError::InsufficientData { .. })
        ));
    }

    #[test]
    fn rank_output_is_permutation() {
        let s = series(&[("x", &[3, 1]), ("y", &[0, 4]), ("z", &[9, 4])]);
        let mut ranked = rank_categories(&s, RankBy::LatestCount).unwrap();
        ranked.sort();
        assert_eq!(ranked, vec!["x", "y", "z"]);
    }
}
