//! Confusion matrices, classification metrics, training-cost arithmetic and
//! side-by-side comparison reports.
//!
//! Class 1 is the positive class for binary metrics. A metric whose
//! denominator is zero is reported as `0.0` with its `defined` flag cleared.
//! Percent gaps are relative to the second argument: `100 * (a - b) / b`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[actual][predicted]`.
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if c == 0 || counts.iter().any(|row| row.len() != c) {
            return Err(Error::Validation(
                "confusion matrix must be square and nonempty".into(),
            ));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn from_binary(tn: u64, fp: u64, fn_: u64, tp: u64) -> Self {
        ConfusionMatrix {
            counts: vec![vec![tn, fp], vec![fn_, tp]],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, actual: usize, predicted: usize) -> u64 {
        self.counts[actual][predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.num_classes()).map(|c| self.counts[c][c]).sum()
    }

    pub fn is_binary(&self) -> bool {
        self.num_classes() == 2
    }

    /// # Panics
    /// If the matrix is not 2×2; likewise for `fp`, `fn_` and `tp`.
    pub fn tn(&self) -> u64 {
        self.binary()[0][0]
    }

    pub fn fp(&self) -> u64 {
        self.binary()[0][1]
    }

    pub fn fn_(&self) -> u64 {
        self.binary()[1][0]
    }

    pub fn tp(&self) -> u64 {
        self.binary()[1][1]
    }

    fn binary(&self) -> &[Vec<u64>] {
        assert!(
            self.is_binary(),
            "binary accessor on a {}-class matrix",
            self.num_classes()
        );
        &self.counts
    }
}

pub fn confusion_matrix(
    predicted: &[usize],
    actual: &[usize],
    num_classes: usize,
) -> Result<ConfusionMatrix> {
    if predicted.len() != actual.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} labels",
            predicted.len(),
            actual.len()
        )));
    }
    if predicted.is_empty() || num_classes == 0 {
        return Err(Error::Validation("confusion matrix of no examples".into()));
    }
    let mut counts = vec![vec![0u64; num_classes]; num_classes];
    for (i, (&p, &a)) in predicted.iter().zip(actual).enumerate() {
        if p >= num_classes || a >= num_classes {
            return Err(Error::Validation(format!(
                "example {i}: label out of range for {num_classes} classes (predicted {p}, actual {a})"
            )));
        }
        counts[a][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_defined: bool,
    pub recall_defined: bool,
    pub f1_defined: bool,
    /// Absent when the report was built from externally supplied values.
    pub confusion: Option<ConfusionMatrix>,
}

impl MetricsReport {
    /// A report carrying externally supplied values, e.g. figures from another study.
    pub fn from_values(accuracy: f64, precision: f64, recall: f64, f1: f64) -> Self {
        MetricsReport {
            accuracy,
            precision,
            recall,
            f1,
            precision_defined: true,
            recall_defined: true,
            f1_defined: true,
            confusion: None,
        }
    }

    pub fn value(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Accuracy => self.accuracy,
            Metric::Precision => self.precision,
            Metric::Recall => self.recall,
            Metric::F1 => self.f1,
        }
    }
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, false)
    } else {
        (num as f64 / den as f64, true)
    }
}

fn harmonic(p: (f64, bool), r: (f64, bool)) -> (f64, bool) {
    if p.1 && r.1 && p.0 + r.0 > 0.0 {
        (2.0 * p.0 * r.0 / (p.0 + r.0), true)
    } else {
        (0.0, false)
    }
}

/// Binary metrics with class 1 positive for 2×2 matrices, macro averages
/// otherwise.
pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    if !cm.is_binary() {
        return macro_metrics(cm);
    }
    let total = cm.total();
    if total == 0 {
        return Err(Error::Validation(
            "metrics of an empty confusion matrix".into(),
        ));
    }
    let precision = ratio(cm.tp(), cm.tp() + cm.fp());
    let recall = ratio(cm.tp(), cm.tp() + cm.fn_());
    let f1 = harmonic(precision, recall);
    Ok(MetricsReport {
        accuracy: cm.correct() as f64 / total as f64,
        precision: precision.0,
        recall: recall.0,
        f1: f1.0,
        precision_defined: precision.1,
        recall_defined: recall.1,
        f1_defined: f1.1,
        confusion: Some(cm.clone()),
    })
}

/// Unweighted mean over classes of one-vs-rest precision, recall and F1.
/// Undefined per-class values count as 0 and clear the flag.
pub fn macro_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Validation(
            "metrics of an empty confusion matrix".into(),
        ));
    }
    let c = cm.num_classes();
    let mut sums = [0.0; 3];
    let mut defined = [true; 3];
    for k in 0..c {
        let tp = cm.get(k, k);
        let predicted: u64 = (0..c).map(|a| cm.get(a, k)).sum();
        let actual: u64 = cm.counts()[k].iter().sum();
        let p = ratio(tp, predicted);
        let r = ratio(tp, actual);
        let f = harmonic(p, r);
        for (j, m) in [p, r, f].into_iter().enumerate() {
            sums[j] += m.0;
            defined[j] &= m.1;
        }
    }
    Ok(MetricsReport {
        accuracy: cm.correct() as f64 / total as f64,
        precision: sums[0] / c as f64,
        recall: sums[1] / c as f64,
        f1: sums[2] / c as f64,
        precision_defined: defined[0],
        recall_defined: defined[1],
        f1_defined: defined[2],
        confusion: Some(cm.clone()),
    })
}

pub fn accuracy_per_minute(accuracy: f64, minutes: f64) -> Result<f64> {
    if minutes.is_nan() || minutes <= 0.0 {
        return Err(Error::Validation(format!(
            "training minutes {minutes} must be positive"
        )));
    }
    Ok(accuracy / minutes)
}

/// `100 * (time_a - time_b) / time_b`.
pub fn relative_overhead(time_a: f64, time_b: f64) -> Result<f64> {
    if time_b.is_nan() || time_b <= 0.0 {
        return Err(Error::Validation(format!(
            "baseline time {time_b} must be positive"
        )));
    }
    Ok(100.0 * (time_a - time_b) / time_b)
}

/// Percent gap of `a` over `b`, `None` when `b` is zero.
pub fn percent_gap(a: f64, b: f64) -> Option<f64> {
    (b != 0.0).then(|| 100.0 * (a - b) / b)
}

/// Rounds to `decimals` places with halves going away from zero.
pub fn round_half_up(x: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    x.signum() * (x.abs() * scale + 0.5).floor() / scale
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub model_name: String,
    pub training_minutes: f64,
    pub accuracy: f64,
    pub accuracy_per_minute: f64,
}

impl TimingRecord {
    pub fn new(
        model_name: impl Into<String>,
        training_minutes: f64,
        accuracy: f64,
    ) -> Result<Self> {
        Ok(TimingRecord {
            model_name: model_name.into(),
            training_minutes,
            accuracy,
            accuracy_per_minute: accuracy_per_minute(accuracy, training_minutes)?,
        })
    }

    pub fn from_seconds(
        model_name: impl Into<String>,
        seconds: f64,
        accuracy: f64,
    ) -> Result<Self> {
        Self::new(model_name, seconds / 60.0, accuracy)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Precision,
    Recall,
    F1,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::Accuracy,
        Metric::Precision,
        Metric::Recall,
        Metric::F1,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Metric::Accuracy => "Accuracy",
            Metric::Precision => "Precision",
            Metric::Recall => "Recall",
            Metric::F1 => "F1-score",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub metrics: MetricsReport,
    pub timing: TimingRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricGap {
    pub metric: Metric,
    /// `None` when the baseline value is zero.
    pub percent: Option<f64>,
}

/// Gaps of run `a` relative to run `b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairComparison {
    pub a: String,
    pub b: String,
    pub gaps: Vec<MetricGap>,
    /// Metric with the largest absolute gap; first in table order on ties.
    pub largest: Option<MetricGap>,
    pub training_time_overhead: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub runs: Vec<RunSummary>,
    /// Every ordered pair of distinct runs.
    pub pairs: Vec<PairComparison>,
}

pub fn compare_report(runs: Vec<RunSummary>) -> Result<ComparisonReport> {
    if runs.is_empty() {
        return Err(Error::Validation(
            "comparison report needs at least one run".into(),
        ));
    }
    let mut pairs = Vec::new();
    for a in &runs {
        for b in &runs {
            if std::ptr::eq(a, b) {
                continue;
            }
            pairs.push(compare_pair(a, b));
        }
    }
    Ok(ComparisonReport { runs, pairs })
}

pub fn compare_pair(a: &RunSummary, b: &RunSummary) -> PairComparison {
    let gaps: Vec<MetricGap> = Metric::ALL
        .iter()
        .map(|&metric| MetricGap {
            metric,
            percent: percent_gap(a.metrics.value(metric), b.metrics.value(metric)),
        })
        .collect();
    let mut largest: Option<MetricGap> = None;
    for gap in &gaps {
        if let Some(p) = gap.percent {
            if largest
                .as_ref()
                .and_then(|l| l.percent)
                .is_none_or(|l| p.abs() > l.abs())
            {
                largest = Some(gap.clone());
            }
        }
    }
    PairComparison {
        a: a.name.clone(),
        b: b.name.clone(),
        gaps,
        largest,
        training_time_overhead: relative_overhead(
            a.timing.training_minutes,
            b.timing.training_minutes,
        )
        .ok(),
    }
}

impl ComparisonReport {
    pub fn pair(&self, a: &str, b: &str) -> Option<&PairComparison> {
        self.pairs.iter().find(|p| p.a == a && p.b == b)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One evaluation table per run, then a timing table and the gap table.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let mut table = 1;
        for run in &self.runs {
            let _ = writeln!(out, "Table {table}. Model evaluation for {}\n", run.name);
            let rows: Vec<Vec<String>> = Metric::ALL
                .iter()
                .map(|&m| vec![m.label().to_string(), fmt4(run.metrics.value(m))])
                .collect();
            out.push_str(&markdown_table(&["Evaluation index", "Value"], &rows));
            if let Some(cm) = run.metrics.confusion.as_ref().filter(|cm| cm.is_binary()) {
                let _ = writeln!(
                    out,
                    "\nConfusion matrix: TN {}, FP {}, FN {}, TP {}",
                    cm.tn(),
                    cm.fp(),
                    cm.fn_(),
                    cm.tp()
                );
            }
            out.push('\n');
            table += 1;
        }

        let _ = writeln!(out, "Table {table}. Model training time results\n");
        let rows: Vec<Vec<String>> = self
            .runs
            .iter()
            .map(|run| {
                vec![
                    run.name.clone(),
                    format!("{:.2}", round_half_up(run.timing.training_minutes, 2)),
                    fmt4(run.timing.accuracy),
                    fmt4(run.timing.accuracy_per_minute),
                ]
            })
            .collect();
        out.push_str(&markdown_table(
            &[
                "Model",
                "Training Time (min)",
                "Accuracy",
                "Accuracy per min",
            ],
            &rows,
        ));

        if !self.pairs.is_empty() {
            out.push_str("\nRelative gaps, 100·(A − B)/B\n\n");
            let rows: Vec<Vec<String>> = self
                .pairs
                .iter()
                .map(|p| {
                    let mut row = vec![p.a.clone(), p.b.clone()];
                    row.extend(p.gaps.iter().map(|g| fmt_pct(g.percent)));
                    row.push(
                        p.largest
                            .as_ref()
                            .map_or("n/a".into(), |g| g.metric.label().to_string()),
                    );
                    row.push(fmt_pct(p.training_time_overhead));
                    row
                })
                .collect();
            out.push_str(&markdown_table(
                &[
                    "A",
                    "B",
                    "Accuracy",
                    "Precision",
                    "Recall",
                    "F1-score",
                    "Largest gap",
                    "Training time",
                ],
                &rows,
            ));
        }
        out
    }
}

fn fmt4(x: f64) -> String {
    format!("{:.4}", round_half_up(x, 4))
}

fn fmt_pct(x: Option<f64>) -> String {
    x.map_or("n/a".into(), |v| format!("{:+.2}%", round_half_up(v, 2)))
}

fn markdown_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &mut dyn Iterator<Item = &str>| {
        let mut s = String::from("|");
        for (cell, &w) in cells.zip(&widths) {
            let pad = w - cell.chars().count();
            let _ = write!(s, " {cell}{} |", " ".repeat(pad));
        }
        s.push('\n');
        s
    };
    let mut out = line(&mut header.iter().copied());
    out.push('|');
    for &w in &widths {
        let _ = write!(out, "{}|", "-".repeat(w + 2));
    }
    out.push('\n');
    for row in rows {
        out.push_str(&line(&mut row.iter().map(String::as_str)));
    }
    out
}
