//! Spatial-transfer and temporal-split evaluation.
//!
//! A [`SplitPlan`] lists folds, each a pair of disjoint selectors over region
//! ids or years. [`run_validation`] trains one forest per fold (or one shared
//! forest), scores the test side and aggregates the fold reports into
//! mean ± SD curves on fixed grids. SDs are across folds.

use std::collections::{BTreeSet, HashSet};
use std::fmt::{self, Write as _};

use rayon::prelude::*;
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::forest::{train_forest, Forest, ForestError, ForestParams};
use crate::metrics::{self, EvalConfig, EvalReport, Metric, MetricsError, PrPoint, RocPoint};
use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ValidationError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("plan has no folds")]
    EmptyPlan,
    #[error("fold {fold}: train and test selectors overlap on {value}")]
    Overlap { fold: usize, value: String },
    #[error("fold {fold}: selectors mix regions and years")]
    MixedSelectors { fold: usize },
    #[error("fold {fold}: unknown region `{region}`")]
    UnknownRegion { fold: usize, region: String },
    #[error("fold {fold}: {side} side is empty")]
    EmptySide { fold: usize, side: &'static str },
    #[error("fold {fold}: sample `{id}` appears on both sides")]
    IdOverlap { fold: usize, id: String },
    #[error("fold {fold}: training failed: {source}")]
    Training { fold: usize, source: ForestError },
    #[error("fold {fold}: scoring failed: {source}")]
    Scoring { fold: usize, source: ForestError },
    #[error("fold {fold}: {source}")]
    Metrics { fold: usize, source: MetricsError },
    #[error("invalid plan `{0}`")]
    PlanSyntax(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    SpatialTransfer,
    TemporalSplit,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selector {
    Regions(BTreeSet<String>),
    Years(BTreeSet<i32>),
}

impl Selector {
    fn is_empty(&self) -> bool {
        match self {
            Selector::Regions(r) => r.is_empty(),
            Selector::Years(y) => y.is_empty(),
        }
    }

    fn matches(&self, s: &crate::data::Sample) -> bool {
        match self {
            Selector::Regions(r) => r.contains(&s.region_id),
            Selector::Years(y) => y.contains(&s.year),
        }
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let items: Vec<String> = match self {
            Selector::Regions(r) => r.iter().cloned().collect(),
            Selector::Years(y) => y.iter().map(i32::to_string).collect(),
        };
        f.write_str(&items.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSpec {
    pub train: Selector,
    pub test: Selector,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub kind: SplitKind,
    pub folds: Vec<FoldSpec>,
}

fn set<T: Ord + Clone>(items: &[T]) -> BTreeSet<T> {
    items.iter().cloned().collect()
}

impl SplitPlan {
    /// One spatial fold.
    pub fn spatial<S: AsRef<str>>(train: &[S], test: &[S]) -> Self {
        let names = |xs: &[S]| xs.iter().map(|s| s.as_ref().to_string()).collect();
        SplitPlan {
            kind: SplitKind::SpatialTransfer,
            folds: vec![FoldSpec {
                train: Selector::Regions(names(train)),
                test: Selector::Regions(names(test)),
            }],
        }
    }

    /// One fold per region, testing on that region and training on the rest.
    pub fn leave_one_region_out<S: AsRef<str>>(regions: &[S]) -> Self {
        let all: BTreeSet<String> = regions.iter().map(|s| s.as_ref().to_string()).collect();
        SplitPlan {
            kind: SplitKind::SpatialTransfer,
            folds: all
                .iter()
                .map(|r| FoldSpec {
                    train: Selector::Regions(all.iter().filter(|x| *x != r).cloned().collect()),
                    test: Selector::Regions(BTreeSet::from([r.clone()])),
                })
                .collect(),
        }
    }

    pub fn temporal(train_years: &[i32], test_years: &[i32]) -> Self {
        SplitPlan {
            kind: SplitKind::TemporalSplit,
            folds: vec![FoldSpec {
                train: Selector::Years(set(train_years)),
                test: Selector::Years(set(test_years)),
            }],
        }
    }

    /// Parses `logo` (leave one region out over `regions`) or folds of the
    /// form `train=A,B;test=C` separated by `|`.
    pub fn parse_spatial(spec: &str, regions: &[String]) -> Result<Self, ValidationError> {
        let spec = spec.trim();
        if spec.eq_ignore_ascii_case("logo") {
            return Ok(Self::leave_one_region_out(regions));
        }
        let bad = || ValidationError::PlanSyntax(spec.to_string());
        let mut folds = Vec::new();
        for fold in spec.split('|') {
            let (mut train, mut test) = (None, None);
            for part in fold.split(';') {
                let (key, list) = part.split_once('=').ok_or_else(bad)?;
                let items: BTreeSet<String> = list
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect();
                match key.trim() {
                    "train" => train = Some(items),
                    "test" => test = Some(items),
                    _ => return Err(bad()),
                }
            }
            folds.push(FoldSpec {
                train: Selector::Regions(train.ok_or_else(bad)?),
                test: Selector::Regions(test.ok_or_else(bad)?),
            });
        }
        Ok(SplitPlan {
            kind: SplitKind::SpatialTransfer,
            folds,
        })
    }

    /// Checks selector kinds, emptiness and per-fold disjointness.
    pub fn check(&self) -> Result<(), ValidationError> {
        if self.folds.is_empty() {
            return Err(ValidationError::EmptyPlan);
        }
        for (fold, f) in self.folds.iter().enumerate() {
            let overlap = match (&f.train, &f.test) {
                (Selector::Regions(a), Selector::Regions(b)) if self.kind == SplitKind::SpatialTransfer => {
                    a.intersection(b).next().cloned()
                }
                (Selector::Years(a), Selector::Years(b)) if self.kind == SplitKind::TemporalSplit => {
                    a.intersection(b).next().map(i32::to_string)
                }
                _ => return Err(ValidationError::MixedSelectors { fold }),
            };
            if let Some(value) = overlap {
                return Err(ValidationError::Overlap { fold, value });
            }
            for (side, sel) in [("train", &f.train), ("test", &f.test)] {
                if sel.is_empty() {
                    return Err(ValidationError::EmptySide { fold, side });
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for SplitPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let folds: Vec<String> = self
            .folds
            .iter()
            .map(|x| format!("train={};test={}", x.train, x.test))
            .collect();
        let kind = match self.kind {
            SplitKind::SpatialTransfer => "spatial",
            SplitKind::TemporalSplit => "temporal",
        };
        write!(f, "{kind}:{}", folds.join("|"))
    }
}

/// A plan fold applied to a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterializedFold {
    pub id: usize,
    pub train: Dataset,
    pub test: Dataset,
    /// Samples selected by neither side.
    pub dropped: usize,
}

fn materialize_fold(d: &Dataset, id: usize, f: &FoldSpec) -> Result<MaterializedFold, ValidationError> {
    if let (Selector::Regions(a), Selector::Regions(b)) = (&f.train, &f.test) {
        let present: HashSet<&str> = d.samples().iter().map(|s| s.region_id.as_str()).collect();
        if let Some(region) = a.iter().chain(b).find(|r| !present.contains(r.as_str())) {
            return Err(ValidationError::UnknownRegion {
                fold: id,
                region: region.clone(),
            });
        }
    }
    let train = d.filter(|s| f.train.matches(s));
    let test = d.filter(|s| f.test.matches(s));
    for (side, part) in [("train", &train), ("test", &test)] {
        if part.is_empty() {
            return Err(ValidationError::EmptySide { fold: id, side });
        }
    }
    let dropped = d.len() - train.len() - test.len();
    Ok(MaterializedFold {
        id,
        train,
        test,
        dropped,
    })
}

pub fn materialize(d: &Dataset, plan: &SplitPlan) -> Result<Vec<MaterializedFold>, ValidationError> {
    plan.check()?;
    plan.folds
        .iter()
        .enumerate()
        .map(|(i, f)| materialize_fold(d, i, f))
        .collect()
}

/// Partitions by year; rows in neither set are dropped and counted.
pub fn temporal_split(
    d: &Dataset,
    train_years: &[i32],
    test_years: &[i32],
) -> Result<(Dataset, Dataset, usize), ValidationError> {
    let mut folds = materialize(d, &SplitPlan::temporal(train_years, test_years))?;
    let f = folds.remove(0);
    if f.dropped > 0 {
        log::info!("temporal split dropped {} samples outside the selected years", f.dropped);
    }
    Ok((f.train, f.test, f.dropped))
}

pub fn spatial_transfer_split(d: &Dataset, plan: &SplitPlan) -> Result<Vec<(Dataset, Dataset)>, ValidationError> {
    if plan.kind != SplitKind::SpatialTransfer {
        return Err(ValidationError::MixedSelectors { fold: 0 });
    }
    Ok(materialize(d, plan)?
        .into_iter()
        .map(|f| (f.train, f.test))
        .collect())
}

/// Random holdout ignoring regions and years; each sample goes to the test
/// side with probability `test_fraction`.
pub fn random_holdout(d: &Dataset, test_fraction: f64, seed: u64) -> (Dataset, Dataset) {
    use rand::Rng;
    let mut rng = seed::stream(seed, "holdout", 0);
    let flags: HashSet<String> = d
        .samples()
        .iter()
        .filter(|_| rng.random_bool(test_fraction.clamp(0.0, 1.0)))
        .map(|s| s.id.clone())
        .collect();
    (d.filter(|s| !flags.contains(&s.id)), d.filter(|s| flags.contains(&s.id)))
}

fn check_disjoint(fold: usize, train: &Dataset, test: &Dataset) -> Result<(), ValidationError> {
    let ids: HashSet<&str> = train.samples().iter().map(|s| s.id.as_str()).collect();
    match test.samples().iter().find(|s| ids.contains(s.id.as_str())) {
        Some(s) => Err(ValidationError::IdOverlap {
            fold,
            id: s.id.clone(),
        }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModelMode {
    /// A fresh forest per fold.
    #[default]
    Retrain,
    /// One forest trained on samples that are on the train side of some fold
    /// and on the test side of none.
    Shared,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationConfig {
    pub eval: EvalConfig,
    pub mode: ModelMode,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            eval: EvalConfig::default(),
            mode: ModelMode::Retrain,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    /// Rows the scoring model was trained on.
    pub train_size: usize,
    pub test_size: usize,
    pub dropped: usize,
    /// Seed of the forest that scored this fold.
    pub model_seed: u64,
    pub positive_rate: f64,
    pub report: EvalReport,
}

/// Mean and sample standard deviation over the folds where a value exists.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

/// `None` for no values; SD uses `n − 1` and is 0 for one value or for
/// identical values.
pub fn mean_sd(values: &[f64]) -> Option<Stat> {
    let n = values.len();
    let first = *values.first()?;
    if values.iter().all(|&v| v == first) {
        return Some(Stat {
            mean: first,
            sd: 0.0,
            n,
        });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    Some(Stat {
        mean,
        sd: (ss / (n - 1) as f64).sqrt(),
        n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveBand {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// Folds that contributed a curve.
    pub folds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinSummary {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_predicted: Option<Stat>,
    pub observed_frequency: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedCurves {
    pub roc: Option<CurveBand>,
    pub pr: Option<CurveBand>,
    pub reliability: Vec<BinSummary>,
    pub topk: Vec<(f64, Stat)>,
    /// Scalar metrics plus `positive_rate`, keyed by field name.
    pub scalars: Vec<(String, Option<Stat>)>,
}

pub const CURVE_POINTS: usize = 101;

pub fn curve_grid() -> Vec<f64> {
    (0..CURVE_POINTS).map(|i| i as f64 / (CURVE_POINTS - 1) as f64).collect()
}

/// TPR at `x` by linear interpolation; on a vertical segment the upper value.
pub fn roc_at(points: &[RocPoint], x: f64) -> f64 {
    let j = points.partition_point(|p| p.fpr <= x);
    if j == 0 {
        return points[0].tpr;
    }
    let a = points[j - 1];
    if a.fpr == x || j == points.len() {
        return a.tpr;
    }
    let b = points[j];
    a.tpr + (b.tpr - a.tpr) * (x - a.fpr) / (b.fpr - a.fpr)
}

/// Precision of the first step (descending threshold) reaching recall `r`.
pub fn pr_at(points: &[PrPoint], r: f64) -> f64 {
    points
        .iter()
        .find(|p| p.recall >= r)
        .or(points.last())
        .map_or(f64::NAN, |p| p.precision)
}

fn band(curves: &[Vec<f64>]) -> Option<CurveBand> {
    if curves.is_empty() {
        return None;
    }
    let grid = curve_grid();
    let stats: Vec<Stat> = (0..grid.len())
        .map(|i| mean_sd(&curves.iter().map(|c| c[i]).collect::<Vec<_>>()).expect("non-empty"))
        .collect();
    Some(CurveBand {
        mean: stats.iter().map(|s| s.mean).collect(),
        sd: stats.iter().map(|s| s.sd).collect(),
        grid,
        folds: curves.len(),
    })
}

pub fn aggregate(folds: &[FoldResult]) -> AggregatedCurves {
    let grid = curve_grid();
    let rocs: Vec<Vec<f64>> = folds
        .iter()
        .filter(|f| !f.report.curves.roc.is_empty())
        .map(|f| grid.iter().map(|&x| roc_at(&f.report.curves.roc, x)).collect())
        .collect();
    let prs: Vec<Vec<f64>> = folds
        .iter()
        .filter(|f| !f.report.curves.pr.is_empty())
        .map(|f| grid.iter().map(|&r| pr_at(&f.report.curves.pr, r)).collect())
        .collect();

    let n_bins = folds.first().map_or(0, |f| f.report.reliability.bins.len());
    let reliability = (0..n_bins)
        .map(|b| {
            let bins: Vec<_> = folds.iter().map(|f| &f.report.reliability.bins[b]).collect();
            let mp: Vec<f64> = bins.iter().filter_map(|x| x.mean_predicted).collect();
            let of: Vec<f64> = bins.iter().filter_map(|x| x.observed_frequency).collect();
            BinSummary {
                lower: bins[0].lower,
                upper: bins[0].upper,
                count: bins.iter().map(|x| x.count).sum(),
                mean_predicted: mean_sd(&mp),
                observed_frequency: mean_sd(&of),
            }
        })
        .collect();

    let curves: Vec<_> = folds.iter().filter_map(|f| f.report.topk.as_ref()).collect();
    let topk = match curves.first() {
        None => Vec::new(),
        Some(c0) => (0..c0.points.len())
            .map(|i| {
                let v: Vec<f64> = curves.iter().map(|c| c.points[i].captured_fraction).collect();
                (c0.points[i].k_fraction, mean_sd(&v).expect("non-empty"))
            })
            .collect(),
    };

    let mut scalars = vec![(
        "positive_rate".to_string(),
        mean_sd(&folds.iter().map(|f| f.positive_rate).collect::<Vec<_>>()),
    )];
    for m in Metric::ALL {
        let v: Vec<f64> = folds.iter().filter_map(|f| f.report.metric(m)).collect();
        scalars.push((m.name().to_string(), mean_sd(&v)));
    }
    AggregatedCurves {
        roc: band(&rocs),
        pr: band(&prs),
        reliability,
        topk,
        scalars,
    }
}

fn stat_cells(s: Option<Stat>) -> String {
    match s {
        Some(s) => format!("{},{}", s.mean, s.sd),
        None => "undefined,undefined".into(),
    }
}

impl AggregatedCurves {
    pub fn scalar(&self, name: &str) -> Option<Stat> {
        self.scalars.iter().find(|(k, _)| k == name).and_then(|(_, s)| *s)
    }

    /// `[section]` CSV blocks in the same layout as the fold reports.
    pub fn to_text(&self) -> String {
        let mut o = String::from("# firerisk aggregated validation v1\n\n[scalars]\nmetric,mean,sd,folds\n");
        for (k, s) in &self.scalars {
            let _ = writeln!(o, "{k},{},{}", stat_cells(*s), s.map_or(0, |s| s.n));
        }
        for (name, head, b) in [
            ("roc", "fpr,tpr_mean,tpr_sd", &self.roc),
            ("pr", "recall,precision_mean,precision_sd", &self.pr),
        ] {
            let _ = writeln!(o, "\n[{name}]\n{head}");
            if let Some(b) = b {
                for i in 0..b.grid.len() {
                    let _ = writeln!(o, "{},{},{}", b.grid[i], b.mean[i], b.sd[i]);
                }
            }
        }
        o.push_str("\n[reliability]\nlower,upper,count,mean_predicted_mean,mean_predicted_sd,observed_mean,observed_sd\n");
        for b in &self.reliability {
            let _ = writeln!(
                o,
                "{},{},{},{},{}",
                b.lower,
                b.upper,
                b.count,
                stat_cells(b.mean_predicted),
                stat_cells(b.observed_frequency)
            );
        }
        o.push_str("\n[topk]\nk_fraction,captured_mean,captured_sd\n");
        for (k, s) in &self.topk {
            let _ = writeln!(o, "{k},{},{}", s.mean, s.sd);
        }
        o
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationRun {
    pub folds: Vec<FoldResult>,
    pub aggregate: AggregatedCurves,
}

pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed::derive_seed(seed, "fold", fold as u64)
}

fn score_fold(
    fold: &MaterializedFold,
    model: &Forest,
    model_seed: u64,
    train_size: usize,
    cfg: &EvalConfig,
) -> Result<FoldResult, ValidationError> {
    let id = fold.id;
    let scores = model
        .predict_dataset(&fold.test)
        .map_err(|source| ValidationError::Scoring { fold: id, source })?;
    let labels = fold.test.labels();
    let mut eval = cfg.clone();
    if let Some(b) = &mut eval.bootstrap {
        b.seed = seed::derive_seed(b.seed, "fold-bootstrap", id as u64);
    }
    let report = metrics::evaluate(&labels, &scores, &eval).map_err(|source| ValidationError::Metrics { fold: id, source })?;
    Ok(FoldResult {
        fold: id,
        train_size,
        test_size: fold.test.len(),
        dropped: fold.dropped,
        model_seed,
        positive_rate: report.positive_rate,
        report,
    })
}

/// Runs every fold of `plan` and aggregates. Folds run in parallel; results
/// are in fold order and depend only on the inputs and `params.seed`.
pub fn run_validation(
    d: &Dataset,
    plan: &SplitPlan,
    params: &ForestParams,
    cfg: &ValidationConfig,
) -> Result<ValidationRun, ValidationError> {
    let folds = materialize(d, plan)?;
    let results = match cfg.mode {
        ModelMode::Retrain => folds
            .par_iter()
            .map(|f| {
                check_disjoint(f.id, &f.train, &f.test)?;
                let p = ForestParams {
                    seed: fold_seed(params.seed, f.id),
                    ..params.clone()
                };
                let model = train_forest(&f.train, &p).map_err(|source| ValidationError::Training { fold: f.id, source })?;
                score_fold(f, &model, p.seed, f.train.len(), &cfg.eval)
            })
            .collect::<Result<Vec<_>, _>>()?,
        ModelMode::Shared => {
            let in_test: HashSet<&str> = folds
                .iter()
                .flat_map(|f| f.test.samples().iter().map(|s| s.id.as_str()))
                .collect();
            let in_train: HashSet<&str> = folds
                .iter()
                .flat_map(|f| f.train.samples().iter().map(|s| s.id.as_str()))
                .collect();
            let shared = d.filter(|s| in_train.contains(s.id.as_str()) && !in_test.contains(s.id.as_str()));
            if shared.is_empty() {
                return Err(ValidationError::EmptySide { fold: 0, side: "shared train" });
            }
            let p = ForestParams {
                seed: seed::derive_seed(params.seed, "shared", 0),
                ..params.clone()
            };
            let model = train_forest(&shared, &p).map_err(|source| ValidationError::Training { fold: 0, source })?;
            folds
                .par_iter()
                .map(|f| {
                    check_disjoint(f.id, &shared, &f.test)?;
                    score_fold(f, &model, p.seed, shared.len(), &cfg.eval)
                })
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    let aggregate = aggregate(&results);
    Ok(ValidationRun {
        folds: results,
        aggregate,
    })
}
