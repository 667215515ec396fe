//! Evaluation of probabilistic binary predictions.
//!
//! Conventions shared by every function here:
//! - a row is predicted positive iff `score >= threshold`;
//! - ROC-AUC gives half credit to tied positive/negative pairs;
//! - PR-AUC is average precision, `Σ (R_i − R_{i−1})·P_i` over distinct
//!   thresholds in descending order;
//! - undefined ratios are `None` and serialize as `undefined`.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{labels} labels but {scores} scores")]
    LengthMismatch { labels: usize, scores: usize },
    #[error("no observations")]
    Empty,
    #[error("label at index {0} is not 0 or 1")]
    InvalidLabel(usize),
    #[error("score at index {index} ({value}) is not a probability")]
    ScoreOutOfRange { index: usize, value: f64 },
    #[error("score at index {0} is not finite")]
    NonFiniteScore(usize),
    #[error("metric needs both classes present")]
    SingleClass,
    #[error("metric needs at least one positive")]
    NoPositives,
    #[error("need at least 2 bins, got {0}")]
    InvalidBins(usize),
    #[error("top-k fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
    #[error("invalid bootstrap settings: {0}")]
    InvalidBootstrap(String),
    #[error("{0} is undefined on the full sample")]
    Undefined(Metric),
    #[error("report parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
}

fn check(labels: &[u8], scores: &[f64]) -> Result<(), MetricsError> {
    if labels.len() != scores.len() {
        return Err(MetricsError::LengthMismatch {
            labels: labels.len(),
            scores: scores.len(),
        });
    }
    if labels.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(i) = labels.iter().position(|&l| l > 1) {
        return Err(MetricsError::InvalidLabel(i));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore(i));
    }
    Ok(())
}

fn check_probabilities(labels: &[u8], scores: &[f64]) -> Result<(), MetricsError> {
    check(labels, scores)?;
    if let Some((index, &value)) = scores
        .iter()
        .enumerate()
        .find(|(_, s)| !(0.0..=1.0).contains(*s))
    {
        return Err(MetricsError::ScoreOutOfRange { index, value });
    }
    Ok(())
}

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    (pos, labels.len() - pos)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion(labels: &[u8], scores: &[f64], threshold: f64) -> Result<ConfusionMatrix, MetricsError> {
    check(labels, scores)?;
    let mut cm = ConfusionMatrix::default();
    for (&l, &s) in labels.iter().zip(scores) {
        match (l == 1, s >= threshold) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fn_ += 1,
            (false, true) => cm.fp += 1,
            (false, false) => cm.tn += 1,
        }
    }
    Ok(cm)
}

/// Threshold metrics; `None` marks a zero denominator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivedMetrics {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn derived_metrics(cm: &ConfusionMatrix) -> DerivedMetrics {
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.fn_);
    // harmonic mean of precision and recall, written over counts
    let f1 = match (precision, recall) {
        (Some(_), Some(_)) => ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn_),
        _ => None,
    };
    DerivedMetrics {
        accuracy: ratio(cm.tp + cm.tn, cm.total()),
        precision,
        recall,
        f1,
    }
}

/// Mann–Whitney statistic with half credit for ties, via mid-ranks.
pub fn roc_auc(labels: &[u8], scores: &[f64]) -> Result<f64, MetricsError> {
    check(labels, scores)?;
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // ranks are 1-based; a tie group spanning ranks i+1..=j gets (i+1+j)/2
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0;
        let group_pos = order[i..j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum_pos += mid * group_pos as f64;
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub threshold: f64,
}

/// `(threshold, tp, fp)` after each distinct score, descending.
fn threshold_steps(labels: &[u8], scores: &[f64]) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut steps = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        steps.push((t, tp, fp));
    }
    steps
}

/// Tie-grouped ROC curve from `(0, 0)` at threshold `+inf` to `(1, 1)`.
pub fn roc_curve(labels: &[u8], scores: &[f64]) -> Result<Vec<RocPoint>, MetricsError> {
    check(labels, scores)?;
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut pts = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    pts.extend(threshold_steps(labels, scores).into_iter().map(|(t, tp, fp)| RocPoint {
        fpr: fp as f64 / neg as f64,
        tpr: tp as f64 / pos as f64,
        threshold: t,
    }));
    Ok(pts)
}

/// Trapezoidal area under a ROC polyline.
pub fn trapezoid_area(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// PR points at each distinct threshold (descending) and average precision.
pub fn pr_curve_and_auc(labels: &[u8], scores: &[f64]) -> Result<(Vec<PrPoint>, f64), MetricsError> {
    check(labels, scores)?;
    let (pos, _) = class_counts(labels);
    if pos == 0 {
        return Err(MetricsError::NoPositives);
    }
    let mut pts = Vec::new();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (t, tp, fp) in threshold_steps(labels, scores) {
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        pts.push(PrPoint {
            recall,
            precision,
            threshold: t,
        });
    }
    Ok((pts, ap))
}

/// Both curves with their areas; an area is `None` where the class mix
/// leaves it undefined (and its curve is then empty).
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSet {
    pub roc: Vec<RocPoint>,
    pub pr: Vec<PrPoint>,
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
}

pub fn curves(labels: &[u8], scores: &[f64]) -> Result<CurveSet, MetricsError> {
    check(labels, scores)?;
    let (pos, neg) = class_counts(labels);
    let (roc, roc_auc) = if pos > 0 && neg > 0 {
        (roc_curve(labels, scores)?, Some(roc_auc(labels, scores)?))
    } else {
        (Vec::new(), None)
    };
    let (pr, pr_auc) = if pos > 0 {
        let (pts, ap) = pr_curve_and_auc(labels, scores)?;
        (pts, Some(ap))
    } else {
        (Vec::new(), None)
    };
    Ok(CurveSet {
        roc,
        pr,
        roc_auc,
        pr_auc,
    })
}

/// Mean squared error of probabilities against 0/1 outcomes.
pub fn brier(labels: &[u8], scores: &[f64]) -> Result<f64, MetricsError> {
    check_probabilities(labels, scores)?;
    let sum: f64 = labels
        .iter()
        .zip(scores)
        .map(|(&l, &s)| (s - f64::from(l)).powi(2))
        .sum();
    Ok(sum / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// `None` for an empty bin.
    pub mean_predicted: Option<f64>,
    pub observed_frequency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityBins {
    pub bins: Vec<ReliabilityBin>,
    pub brier: f64,
}

pub const DEFAULT_BINS: usize = 10;

/// Equal-width bins `[i/n, (i+1)/n)`, the last one closed at 1.
pub fn bin_index(score: f64, n_bins: usize) -> usize {
    ((score * n_bins as f64).floor() as usize).min(n_bins - 1)
}

pub fn reliability_bins(labels: &[u8], scores: &[f64], n_bins: usize) -> Result<ReliabilityBins, MetricsError> {
    if n_bins < 2 {
        return Err(MetricsError::InvalidBins(n_bins));
    }
    let brier = brier(labels, scores)?;
    let mut sum_p = vec![0.0; n_bins];
    let mut sum_y = vec![0usize; n_bins];
    let mut count = vec![0usize; n_bins];
    for (&l, &s) in labels.iter().zip(scores) {
        let b = bin_index(s, n_bins);
        sum_p[b] += s;
        sum_y[b] += usize::from(l);
        count[b] += 1;
    }
    let bins = (0..n_bins)
        .map(|b| {
            let c = count[b];
            ReliabilityBin {
                lower: b as f64 / n_bins as f64,
                upper: (b + 1) as f64 / n_bins as f64,
                count: c,
                mean_predicted: (c > 0).then(|| sum_p[b] / c as f64),
                observed_frequency: (c > 0).then(|| sum_y[b] as f64 / c as f64),
            }
        })
        .collect();
    Ok(ReliabilityBins { bins, brier })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopKPoint {
    pub k_fraction: f64,
    pub captured_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopKCurve {
    pub points: Vec<TopKPoint>,
}

/// `0.05, 0.10, …, 1.00`.
pub fn default_k_grid() -> Vec<f64> {
    (1..=20).map(|i| f64::from(i) / 20.0).collect()
}

/// `⌈k·n⌉`, treating products within rounding noise of an integer as that
/// integer (`0.3 · 10` is 3, not 4).
pub fn top_count(k: f64, n: usize) -> usize {
    let x = k * n as f64;
    let r = x.round();
    let c = if (x - r).abs() <= 1e-9 * x.max(1.0) { r } else { x.ceil() };
    (c as usize).clamp(1, n)
}

pub fn topk_capture(labels: &[u8], scores: &[f64], k_grid: &[f64]) -> Result<TopKCurve, MetricsError> {
    check(labels, scores)?;
    let (pos, _) = class_counts(labels);
    if pos == 0 {
        return Err(MetricsError::NoPositives);
    }
    if let Some(&k) = k_grid.iter().find(|&&k| !(k > 0.0 && k <= 1.0)) {
        return Err(MetricsError::InvalidFraction(k));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps original index order among equal scores
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut cum = Vec::with_capacity(order.len() + 1);
    cum.push(0usize);
    for &i in &order {
        cum.push(cum.last().unwrap() + usize::from(labels[i]));
    }
    let n = labels.len();
    Ok(TopKCurve {
        points: k_grid
            .iter()
            .map(|&k| TopKPoint {
                k_fraction: k,
                captured_fraction: cum[top_count(k, n)] as f64 / pos as f64,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    RocAuc,
    PrAuc,
    Brier,
    Accuracy,
    Precision,
    Recall,
    F1,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::RocAuc,
        Metric::PrAuc,
        Metric::Brier,
        Metric::Accuracy,
        Metric::Precision,
        Metric::Recall,
        Metric::F1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::RocAuc => "roc_auc",
            Metric::PrAuc => "pr_auc",
            Metric::Brier => "brier",
            Metric::Accuracy => "accuracy",
            Metric::Precision => "precision",
            Metric::Recall => "recall",
            Metric::F1 => "f1",
        }
    }

    /// `None` when the metric is undefined on this sample. Inputs are assumed
    /// to be validated already.
    pub fn evaluate(self, labels: &[u8], scores: &[f64], threshold: f64) -> Option<f64> {
        match self {
            Metric::RocAuc => roc_auc(labels, scores).ok(),
            Metric::PrAuc => pr_curve_and_auc(labels, scores).ok().map(|(_, ap)| ap),
            Metric::Brier => brier(labels, scores).ok(),
            _ => {
                let d = derived_metrics(&confusion(labels, scores, threshold).ok()?);
                match self {
                    Metric::Accuracy => d.accuracy,
                    Metric::Precision => d.precision,
                    Metric::Recall => d.recall,
                    _ => d.f1,
                }
            }
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown metric `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
    /// Classification threshold for the threshold metrics.
    pub threshold: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            resamples: 1000,
            level: 0.95,
            seed: 0,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapInterval {
    pub metric: Metric,
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub resamples: usize,
    /// Resamples on which the metric was undefined.
    pub skipped: usize,
    pub level: f64,
    pub seed: u64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Stratified percentile bootstrap: each resample redraws the positives and
/// the negatives separately with replacement, keeping both counts. Resample
/// `b` uses a stream derived from `(seed, b)`.
pub fn bootstrap_ci(
    metric: Metric,
    labels: &[u8],
    scores: &[f64],
    cfg: &BootstrapConfig,
) -> Result<BootstrapInterval, MetricsError> {
    check(labels, scores)?;
    if cfg.resamples < 100 {
        return Err(MetricsError::InvalidBootstrap(format!(
            "need at least 100 resamples, got {}",
            cfg.resamples
        )));
    }
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(MetricsError::InvalidBootstrap(format!(
            "level {} outside (0, 1)",
            cfg.level
        )));
    }
    let point = metric
        .evaluate(labels, scores, cfg.threshold)
        .ok_or(MetricsError::Undefined(metric))?;
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();

    let draws: Vec<Option<f64>> = (0..cfg.resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = seed::stream(cfg.seed, "bootstrap", b as u64);
            let mut l = Vec::with_capacity(labels.len());
            let mut s = Vec::with_capacity(labels.len());
            for group in [&pos, &neg] {
                for _ in 0..group.len() {
                    let i = group[rng.random_range(0..group.len())];
                    l.push(labels[i]);
                    s.push(scores[i]);
                }
            }
            metric.evaluate(&l, &s, cfg.threshold)
        })
        .collect();
    let mut values: Vec<f64> = draws.iter().flatten().copied().collect();
    let skipped = draws.len() - values.len();
    if values.is_empty() {
        return Err(MetricsError::Undefined(metric));
    }
    values.sort_by(f64::total_cmp);
    let tail = (1.0 - cfg.level) / 2.0;
    Ok(BootstrapInterval {
        metric,
        point,
        lo: quantile(&values, tail),
        hi: quantile(&values, 1.0 - tail),
        resamples: cfg.resamples,
        skipped,
        level: cfg.level,
        seed: cfg.seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub threshold: f64,
    pub n_bins: usize,
    pub k_grid: Vec<f64>,
    /// `None` disables bootstrap intervals.
    pub bootstrap: Option<BootstrapConfig>,
    pub interval_metrics: Vec<Metric>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            n_bins: DEFAULT_BINS,
            k_grid: default_k_grid(),
            bootstrap: Some(BootstrapConfig::default()),
            interval_metrics: vec![Metric::RocAuc, Metric::PrAuc, Metric::Brier],
        }
    }
}

/// Every metric for one set of test predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    pub positives: usize,
    pub positive_rate: f64,
    pub threshold: f64,
    pub confusion: ConfusionMatrix,
    pub derived: DerivedMetrics,
    pub brier: f64,
    pub curves: CurveSet,
    pub reliability: ReliabilityBins,
    pub topk: Option<TopKCurve>,
    pub intervals: Vec<BootstrapInterval>,
    /// Metrics that could not be computed and why.
    pub warnings: Vec<String>,
}

/// Builds the full report. Metrics that a single-class sample leaves
/// undefined are recorded as undefined with a warning instead of failing.
pub fn evaluate(labels: &[u8], scores: &[f64], cfg: &EvalConfig) -> Result<EvalReport, MetricsError> {
    check_probabilities(labels, scores)?;
    let (pos, neg) = class_counts(labels);
    let confusion = confusion(labels, scores, cfg.threshold)?;
    let curves = curves(labels, scores)?;
    let reliability = reliability_bins(labels, scores, cfg.n_bins)?;
    let mut warnings = Vec::new();
    if pos == 0 || neg == 0 {
        warnings.push(format!(
            "single-class sample ({pos} positives, {neg} negatives): roc_auc undefined"
        ));
    }
    if pos == 0 {
        warnings.push("no positives: pr_auc and top-k capture undefined".into());
    }
    let topk = if pos > 0 {
        Some(topk_capture(labels, scores, &cfg.k_grid)?)
    } else {
        None
    };
    let mut intervals = Vec::new();
    if let Some(bcfg) = &cfg.bootstrap {
        let bcfg = BootstrapConfig {
            threshold: cfg.threshold,
            ..bcfg.clone()
        };
        for &m in &cfg.interval_metrics {
            match bootstrap_ci(m, labels, scores, &bcfg) {
                Ok(iv) => intervals.push(iv),
                Err(MetricsError::Undefined(_)) => {
                    warnings.push(format!("{m}: bootstrap interval skipped, metric undefined"))
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(EvalReport {
        n: labels.len(),
        positives: pos,
        positive_rate: pos as f64 / labels.len() as f64,
        threshold: cfg.threshold,
        confusion,
        derived: derived_metrics(&confusion),
        brier: reliability.brier,
        curves,
        reliability,
        topk,
        intervals,
        warnings,
    })
}

const REPORT_HEADER: &str = "# firerisk evaluation report v1";
const UNDEFINED: &str = "undefined";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), |x| x.to_string())
}

impl EvalReport {
    pub fn metric(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::RocAuc => self.curves.roc_auc,
            Metric::PrAuc => self.curves.pr_auc,
            Metric::Brier => Some(self.brier),
            Metric::Accuracy => self.derived.accuracy,
            Metric::Precision => self.derived.precision,
            Metric::Recall => self.derived.recall,
            Metric::F1 => self.derived.f1,
        }
    }

    /// Key/value block followed by `[section]` CSV tables.
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let _ = writeln!(o, "{REPORT_HEADER}");
        let _ = writeln!(o, "n = {}", self.n);
        let _ = writeln!(o, "positives = {}", self.positives);
        let _ = writeln!(o, "positive_rate = {}", self.positive_rate);
        let _ = writeln!(o, "threshold = {}", self.threshold);
        let c = &self.confusion;
        let _ = writeln!(o, "tp = {}\nfp = {}\nfn = {}\ntn = {}", c.tp, c.fp, c.fn_, c.tn);
        for m in [
            Metric::Accuracy,
            Metric::Precision,
            Metric::Recall,
            Metric::F1,
            Metric::RocAuc,
            Metric::PrAuc,
            Metric::Brier,
        ] {
            let _ = writeln!(o, "{} = {}", m.name(), opt(self.metric(m)));
        }
        for w in &self.warnings {
            let _ = writeln!(o, "warning = {w}");
        }
        o.push_str("\n[roc]\nfpr,tpr,threshold\n");
        for p in &self.curves.roc {
            let _ = writeln!(o, "{},{},{}", p.fpr, p.tpr, p.threshold);
        }
        o.push_str("\n[pr]\nrecall,precision,threshold\n");
        for p in &self.curves.pr {
            let _ = writeln!(o, "{},{},{}", p.recall, p.precision, p.threshold);
        }
        o.push_str("\n[reliability]\nlower,upper,count,mean_predicted,observed_frequency\n");
        for b in &self.reliability.bins {
            let _ = writeln!(
                o,
                "{},{},{},{},{}",
                b.lower,
                b.upper,
                b.count,
                opt(b.mean_predicted),
                opt(b.observed_frequency)
            );
        }
        o.push_str("\n[topk]\nk_fraction,captured_fraction\n");
        for p in self.topk.iter().flat_map(|t| &t.points) {
            let _ = writeln!(o, "{},{}", p.k_fraction, p.captured_fraction);
        }
        o.push_str("\n[bootstrap]\nmetric,point,lo,hi,resamples,skipped,level,seed\n");
        for iv in &self.intervals {
            let _ = writeln!(
                o,
                "{},{},{},{},{},{},{},{}",
                iv.metric, iv.point, iv.lo, iv.hi, iv.resamples, iv.skipped, iv.level, iv.seed
            );
        }
        o
    }

    pub fn from_text(text: &str) -> Result<Self, MetricsError> {
        ReportParser::default().parse(text)
    }
}

#[derive(Default)]
struct ReportParser {
    line: usize,
}

/// Section name and its numbered CSV lines.
type Section = (String, Vec<(usize, Vec<String>)>);

impl ReportParser {
    fn err<T>(&self, message: impl Into<String>) -> Result<T, MetricsError> {
        Err(MetricsError::Parse {
            line: self.line,
            message: message.into(),
        })
    }

    fn num<T: FromStr>(&self, s: &str) -> Result<T, MetricsError> {
        match s.trim().parse() {
            Ok(v) => Ok(v),
            Err(_) => self.err(format!("cannot parse `{s}`")),
        }
    }

    fn opt(&self, s: &str) -> Result<Option<f64>, MetricsError> {
        if s.trim() == UNDEFINED {
            Ok(None)
        } else {
            self.num(s).map(Some)
        }
    }

    fn parse(mut self, text: &str) -> Result<EvalReport, MetricsError> {
        let mut kv: Vec<(String, String)> = Vec::new();
        let mut sections: Vec<Section> = Vec::new();
        let mut lines = text.lines().enumerate().peekable();
        match lines.next() {
            Some((_, h)) if h.trim_end() == REPORT_HEADER => {}
            _ => {
                self.line = 1;
                return self.err("missing report header");
            }
        }
        for (i, raw) in lines {
            self.line = i + 1;
            let l = raw.trim_end_matches('\r');
            if l.is_empty() {
                continue;
            }
            if let Some(name) = l.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                sections.push((name.to_string(), Vec::new()));
                continue;
            }
            match sections.last_mut() {
                None => match l.split_once(" = ") {
                    Some((k, v)) => kv.push((k.to_string(), v.to_string())),
                    None => return self.err("expected `key = value`"),
                },
                Some((_, rows)) => rows.push((self.line, l.split(',').map(str::to_string).collect())),
            }
        }
        let get = |this: &Self, key: &str| -> Result<String, MetricsError> {
            match kv.iter().find(|(k, _)| k == key) {
                Some((_, v)) => Ok(v.clone()),
                None => this.err(format!("missing key `{key}`")),
            }
        };
        let table = |this: &mut Self, name: &str, width: usize| -> Result<Vec<(usize, Vec<String>)>, MetricsError> {
            let Some((_, rows)) = sections.iter().find(|(n, _)| n == name) else {
                return this.err(format!("missing section [{name}]"));
            };
            let mut out = Vec::new();
            for (k, (line, cells)) in rows.iter().enumerate() {
                this.line = *line;
                if cells.len() != width {
                    return this.err(format!("expected {width} columns"));
                }
                if k > 0 {
                    out.push((*line, cells.clone()));
                }
            }
            Ok(out)
        };

        let confusion = ConfusionMatrix {
            tp: self.num(&get(&self, "tp")?)?,
            fp: self.num(&get(&self, "fp")?)?,
            fn_: self.num(&get(&self, "fn")?)?,
            tn: self.num(&get(&self, "tn")?)?,
        };
        let derived = DerivedMetrics {
            accuracy: self.opt(&get(&self, "accuracy")?)?,
            precision: self.opt(&get(&self, "precision")?)?,
            recall: self.opt(&get(&self, "recall")?)?,
            f1: self.opt(&get(&self, "f1")?)?,
        };
        let brier: f64 = self.num(&get(&self, "brier")?)?;

        let mut roc = Vec::new();
        for (line, c) in table(&mut self, "roc", 3)? {
            self.line = line;
            roc.push(RocPoint {
                fpr: self.num(&c[0])?,
                tpr: self.num(&c[1])?,
                threshold: self.num(&c[2])?,
            });
        }
        let mut pr = Vec::new();
        for (line, c) in table(&mut self, "pr", 3)? {
            self.line = line;
            pr.push(PrPoint {
                recall: self.num(&c[0])?,
                precision: self.num(&c[1])?,
                threshold: self.num(&c[2])?,
            });
        }
        let mut bins = Vec::new();
        for (line, c) in table(&mut self, "reliability", 5)? {
            self.line = line;
            bins.push(ReliabilityBin {
                lower: self.num(&c[0])?,
                upper: self.num(&c[1])?,
                count: self.num(&c[2])?,
                mean_predicted: self.opt(&c[3])?,
                observed_frequency: self.opt(&c[4])?,
            });
        }
        let mut topk = Vec::new();
        for (line, c) in table(&mut self, "topk", 2)? {
            self.line = line;
            topk.push(TopKPoint {
                k_fraction: self.num(&c[0])?,
                captured_fraction: self.num(&c[1])?,
            });
        }
        let mut intervals = Vec::new();
        for (line, c) in table(&mut self, "bootstrap", 8)? {
            self.line = line;
            let metric = match c[0].parse::<Metric>() {
                Ok(m) => m,
                Err(e) => return self.err(e),
            };
            intervals.push(BootstrapInterval {
                metric,
                point: self.num(&c[1])?,
                lo: self.num(&c[2])?,
                hi: self.num(&c[3])?,
                resamples: self.num(&c[4])?,
                skipped: self.num(&c[5])?,
                level: self.num(&c[6])?,
                seed: self.num(&c[7])?,
            });
        }
        Ok(EvalReport {
            n: self.num(&get(&self, "n")?)?,
            positives: self.num(&get(&self, "positives")?)?,
            positive_rate: self.num(&get(&self, "positive_rate")?)?,
            threshold: self.num(&get(&self, "threshold")?)?,
            confusion,
            derived,
            brier,
            curves: CurveSet {
                roc,
                pr,
                roc_auc: self.opt(&get(&self, "roc_auc")?)?,
                pr_auc: self.opt(&get(&self, "pr_auc")?)?,
            },
            reliability: ReliabilityBins { bins, brier },
            topk: (!topk.is_empty()).then_some(TopKCurve { points: topk }),
            intervals,
            warnings: kv
                .iter()
                .filter(|(k, _)| k == "warning")
                .map(|(_, v)| v.clone())
                .collect(),
        })
    }
}
