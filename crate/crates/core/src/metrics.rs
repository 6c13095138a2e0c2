//! Confusion counts, the five binary-classification rates, fold pooling and
//! validation of published result tables.
//!
//! The positive class is always COVID-19 (binary label 1). Every rate is kept
//! as an exact integer ratio so that display rounding is exact; a rate whose
//! denominator is zero is `None` and rendered as `undefined`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Backbone, DatasetName, Error, Result};

/// Validation tolerance in percentage points.
pub const TOLERANCE_PP: f64 = 0.1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub const fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        ConfusionCounts { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts::new(self.tp + o.tp, self.tn + o.tn, self.fp + o.fp, self.fn_ + o.fn_)
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = ConfusionCounts>>(iter: I) -> Self {
        iter.fold(ConfusionCounts::default(), |a, b| a + b)
    }
}

/// An exact ratio `num / den` with `den > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rate {
    pub num: u64,
    pub den: u64,
}

impl Rate {
    fn new(num: u64, den: u64) -> Option<Rate> {
        (den > 0).then_some(Rate { num, den })
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn percent(&self) -> f64 {
        100.0 * self.value()
    }

    /// Percentage in tenths, rounded half away from zero, computed exactly.
    pub fn percent_tenths(&self) -> u64 {
        // round(num * 1000 / den) for non-negative values
        ((2000 * self.num as u128 + self.den as u128) / (2 * self.den as u128)) as u64
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.percent_tenths();
        write!(f, "{}.{}", t / 10, t % 10)
    }
}

/// Formats an optional rate as a one-decimal percentage or `undefined`.
pub fn fmt_rate(rate: Option<Rate>) -> String {
    rate.map_or_else(|| "undefined".to_string(), |r| r.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: Rate,
    pub recall: Option<Rate>,
    pub specificity: Option<Rate>,
    pub precision: Option<Rate>,
    pub f1: Option<Rate>,
}

impl MetricSet {
    /// Metrics in table column order: ACC, REC, SPE, PRE, F1.
    pub fn columns(&self) -> [Option<Rate>; 5] {
        [
            Some(self.accuracy),
            self.recall,
            self.specificity,
            self.precision,
            self.f1,
        ]
    }
}

pub const METRIC_NAMES: [&str; 5] = ["ACC", "REC", "SPE", "PRE", "F1"];

pub fn metrics_from_confusion(c: &ConfusionCounts) -> Result<MetricSet> {
    if c.total() == 0 {
        return Err(Error::EmptyInput("confusion counts are all zero".into()));
    }
    let recall = Rate::new(c.tp, c.tp + c.fn_);
    let precision = Rate::new(c.tp, c.tp + c.fp);
    // Harmonic mean of precision and recall reduces to 2tp / (2tp + fp + fn);
    // undefined when either input is undefined or both are zero.
    let f1 = match (precision, recall) {
        (Some(_), Some(_)) if c.tp > 0 => Rate::new(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        _ => None,
    };
    Ok(MetricSet {
        accuracy: Rate {
            num: c.tp + c.tn,
            den: c.total(),
        },
        recall,
        specificity: Rate::new(c.tn, c.tn + c.fp),
        precision,
        f1,
    })
}

/// Tallies predictions against ground truth. Labels are 1 = COVID-19, 0 = negative.
pub fn confusion_from_predictions(
    truth: &BTreeMap<String, u8>,
    predicted: &BTreeMap<String, u8>,
) -> Result<ConfusionCounts> {
    if truth.len() != predicted.len() || truth.keys().zip(predicted.keys()).any(|(a, b)| a != b) {
        let missing = truth.keys().find(|k| !predicted.contains_key(*k));
        let extra = predicted.keys().find(|k| !truth.contains_key(*k));
        return Err(Error::KeyMismatch(format!(
            "first unpredicted id {missing:?}, first unknown id {extra:?}"
        )));
    }
    let mut c = ConfusionCounts::default();
    for (id, &t) in truth {
        let p = predicted[id];
        match (t, p) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (0, 1) => c.fp += 1,
            (1, 0) => c.fn_ += 1,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "record {id}: labels must be 0 or 1, got truth {t} prediction {p}"
                )))
            }
        }
    }
    Ok(c)
}

/// Micro-pools five per-fold counts: counts are summed, then rates computed.
pub fn pool_folds(counts: &[ConfusionCounts]) -> Result<(ConfusionCounts, MetricSet)> {
    if counts.len() != 5 {
        return Err(Error::InvalidArgument(format!(
            "pooling needs exactly 5 folds, got {}",
            counts.len()
        )));
    }
    let pooled: ConfusionCounts = counts.iter().copied().sum();
    Ok((pooled, metrics_from_confusion(&pooled)?))
}

/// Which row of a per-model block a result belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FoldRow {
    Fold(u8),
    Pooled,
}

impl fmt::Display for FoldRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FoldRow::Fold(k) => write!(f, "{k}"),
            FoldRow::Pooled => f.write_str("pooled"),
        }
    }
}

impl std::str::FromStr for FoldRow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(FoldRow::Pooled),
            _ => match s.parse::<u8>() {
                Ok(k @ 1..=5) => Ok(FoldRow::Fold(k)),
                _ => Err(Error::InvalidArgument(format!("bad fold {s:?}"))),
            },
        }
    }
}

/// One published result row: counts plus the five percentages as printed.
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureRow {
    pub model: Backbone,
    pub dataset: DatasetName,
    pub fold: FoldRow,
    pub counts: ConfusionCounts,
    pub published: [f64; 5],
}

/// The published tables shipped with the crate.
pub const BUNDLED_FIXTURES: &str = include_str!("../fixtures/published_tables.tsv");

pub fn parse_fixtures(text: &str, origin: &str) -> Result<Vec<FixtureRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            reason,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 12 {
            return Err(err(format!("expected 12 fields, got {}", fields.len())));
        }
        let int = |s: &str| s.parse::<u64>().map_err(|e| err(format!("{s:?}: {e}")));
        let pct = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
        rows.push(FixtureRow {
            model: fields[0].parse().map_err(|e: Error| err(e.to_string()))?,
            dataset: fields[1].parse().map_err(|e: Error| err(e.to_string()))?,
            fold: fields[2].parse().map_err(|e: Error| err(e.to_string()))?,
            counts: ConfusionCounts::new(int(fields[3])?, int(fields[4])?, int(fields[5])?, int(fields[6])?),
            published: [
                pct(fields[7])?,
                pct(fields[8])?,
                pct(fields[9])?,
                pct(fields[10])?,
                pct(fields[11])?,
            ],
        });
    }
    Ok(rows)
}

pub fn load_fixtures(path: &Path) -> Result<Vec<FixtureRow>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_fixtures(&text, &path.display().to_string())
}

pub fn bundled_fixtures() -> Vec<FixtureRow> {
    parse_fixtures(BUNDLED_FIXTURES, "bundled").expect("bundled fixtures parse")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discrepancy {
    pub model: Backbone,
    pub dataset: DatasetName,
    pub fold: FoldRow,
    pub metric: &'static str,
    pub published: f64,
    /// `None` when the recomputed metric is undefined.
    pub computed: Option<f64>,
}

impl fmt::Display for Discrepancy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} fold {} {}: published {:.1}, computed {}",
            self.model,
            self.dataset,
            self.fold,
            self.metric,
            self.published,
            self.computed
                .map_or_else(|| "undefined".to_string(), |v| format!("{v:.3}"))
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub rows_checked: usize,
    pub discrepancies: Vec<Discrepancy>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.discrepancies.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "checked {} rows at +/-{TOLERANCE_PP} pp: {} discrepancies",
            self.rows_checked,
            self.discrepancies.len()
        )?;
        for d in &self.discrepancies {
            writeln!(f, "  {d}")?;
        }
        Ok(())
    }
}

/// Recomputes every fixture row from its counts and compares against the
/// printed percentages.
pub fn validate_against_published(rows: &[FixtureRow]) -> ValidationReport {
    let mut report = ValidationReport {
        rows_checked: rows.len(),
        discrepancies: Vec::new(),
    };
    for row in rows {
        let computed = metrics_from_confusion(&row.counts).ok().map(|m| m.columns());
        for (i, published) in row.published.iter().enumerate() {
            let value = computed.and_then(|c| c[i]).map(|r| r.percent());
            let ok = value.is_some_and(|v| (v - published).abs() <= TOLERANCE_PP + 1e-9);
            if !ok {
                report.discrepancies.push(Discrepancy {
                    model: row.model,
                    dataset: row.dataset,
                    fold: row.fold,
                    metric: METRIC_NAMES[i],
                    published: *published,
                    computed: value,
                });
            }
        }
    }
    report
}
