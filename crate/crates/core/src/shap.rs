//! Exact Shapley explanations of tree and forest probabilities.
//!
//! The value of a coalition `S` is the cover-weighted conditional expectation
//! of the tree output: splits on features in `S` follow the input, splits on
//! other features average both children by their training cover.
//! [`brute_force_shap`] enumerates every coalition; [`tree_shap`] computes the
//! same numbers in polynomial time by tracking path weights.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::data::Dataset;
use crate::forest::{check_input, Forest, ForestError, Node, Tree};

/// Largest feature count the exponential oracle accepts.
pub const BRUTE_FORCE_MAX_FEATURES: usize = 15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapError {
    #[error(transparent)]
    Input(#[from] ForestError),
    #[error("brute-force enumeration supports at most {BRUTE_FORCE_MAX_FEATURES} features, got {0}")]
    TooManyFeatures(usize),
    #[error("coalition mask has {found} entries for {expected} features")]
    MaskLength { expected: usize, found: usize },
    #[error("no samples to explain")]
    Empty,
    #[error("beeswarm export: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapExplanation {
    /// Expected output with no feature known.
    pub base_value: f64,
    pub contributions: Vec<f64>,
    pub prediction: f64,
}

impl ShapExplanation {
    /// `|base + Σφ − prediction|`.
    pub fn efficiency_gap(&self) -> f64 {
        let sum: f64 = self.contributions.iter().sum();
        (self.base_value + sum - self.prediction).abs()
    }
}

/// Cover-weighted conditional expectation of `t` given the features marked
/// in `known`.
pub fn tree_expected_value(t: &Tree, x: &[f64], known: &[bool]) -> Result<f64, ShapError> {
    check_input(x, t.n_features())?;
    if known.len() != t.n_features() {
        return Err(ShapError::MaskLength {
            expected: t.n_features(),
            found: known.len(),
        });
    }
    Ok(expected_value(t.nodes(), 0, x, known))
}

fn expected_value(nodes: &[Node], i: usize, x: &[f64], known: &[bool]) -> f64 {
    match nodes[i] {
        Node::Leaf { value, .. } => value,
        Node::Split {
            feature,
            threshold,
            left,
            right,
            cover,
        } => {
            if known[feature] {
                let next = if x[feature] <= threshold { left } else { right };
                expected_value(nodes, next, x, known)
            } else {
                let c = cover as f64;
                nodes[left].cover() as f64 / c * expected_value(nodes, left, x, known)
                    + nodes[right].cover() as f64 / c * expected_value(nodes, right, x, known)
            }
        }
    }
}

/// Shapley values by explicit enumeration of all `2^p` coalitions.
pub fn brute_force_shap(t: &Tree, x: &[f64]) -> Result<ShapExplanation, ShapError> {
    let p = t.n_features();
    if p > BRUTE_FORCE_MAX_FEATURES {
        return Err(ShapError::TooManyFeatures(p));
    }
    check_input(x, p)?;
    let n_masks = 1usize << p;
    let mut known = vec![false; p];
    let values: Vec<f64> = (0..n_masks)
        .map(|mask| {
            for (j, k) in known.iter_mut().enumerate() {
                *k = mask & (1 << j) != 0;
            }
            expected_value(t.nodes(), 0, x, &known)
        })
        .collect();

    // |S|! (p-|S|-1)! / p!
    let mut factorial = vec![1.0f64; p + 1];
    for k in 1..=p {
        factorial[k] = factorial[k - 1] * k as f64;
    }
    let weight: Vec<f64> = (0..p)
        .map(|s| factorial[s] * factorial[p - s - 1] / factorial[p])
        .collect();

    let mut contributions = vec![0.0; p];
    for (i, phi) in contributions.iter_mut().enumerate() {
        let bit = 1usize << i;
        for mask in (0..n_masks).filter(|m| m & bit == 0) {
            let s = mask.count_ones() as usize;
            *phi += weight[s] * (values[mask | bit] - values[mask]);
        }
    }
    Ok(ShapExplanation {
        base_value: values[0],
        contributions,
        prediction: values[n_masks - 1],
    })
}

#[derive(Clone, Copy)]
struct PathElem {
    feature: Option<usize>,
    zero_fraction: f64,
    one_fraction: f64,
    weight: f64,
}

/// Appends an element to the path occupying `buf[start..]`.
fn extend_path(buf: &mut Vec<PathElem>, start: usize, zero_fraction: f64, one_fraction: f64, feature: Option<usize>) {
    let depth = buf.len() - start;
    buf.push(PathElem {
        feature,
        zero_fraction,
        one_fraction,
        weight: if depth == 0 { 1.0 } else { 0.0 },
    });
    let path = &mut buf[start..];
    let d1 = (depth + 1) as f64;
    for i in (0..depth).rev() {
        path[i + 1].weight += one_fraction * path[i].weight * (i + 1) as f64 / d1;
        path[i].weight = zero_fraction * path[i].weight * (depth - i) as f64 / d1;
    }
}

fn unwind_path(buf: &mut Vec<PathElem>, start: usize, index: usize) {
    let path = &mut buf[start..];
    let depth = path.len() - 1;
    let one = path[index].one_fraction;
    let zero = path[index].zero_fraction;
    let d1 = (depth + 1) as f64;
    let mut next_one_portion = path[depth].weight;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let tmp = path[i].weight;
            path[i].weight = next_one_portion * d1 / ((i + 1) as f64 * one);
            next_one_portion = tmp - path[i].weight * zero * (depth - i) as f64 / d1;
        } else {
            path[i].weight = path[i].weight * d1 / (zero * (depth - i) as f64);
        }
    }
    for i in index..depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero_fraction = path[i + 1].zero_fraction;
        path[i].one_fraction = path[i + 1].one_fraction;
    }
    buf.pop();
}

/// Total weight the path would carry if element `index` were unwound.
fn unwound_path_sum(path: &[PathElem], index: usize) -> f64 {
    let depth = path.len() - 1;
    let one = path[index].one_fraction;
    let zero = path[index].zero_fraction;
    let mut total = 0.0;
    if one != 0.0 {
        let mut next_one_portion = path[depth].weight;
        for i in (0..depth).rev() {
            let tmp = next_one_portion / ((i + 1) as f64 * one);
            total += tmp;
            next_one_portion = path[i].weight - tmp * zero * (depth - i) as f64;
        }
    } else {
        for i in (0..depth).rev() {
            total += path[i].weight / (zero * (depth - i) as f64);
        }
    }
    total * (depth + 1) as f64
}

struct Walker<'a> {
    nodes: &'a [Node],
    x: &'a [f64],
    phi: Vec<f64>,
    /// Paths of the active recursion frames, each a tail segment.
    buf: Vec<PathElem>,
}

impl Walker<'_> {
    /// Recurses into `node` with a fresh copy of the path at `buf[parent..]`.
    fn recurse(&mut self, node: usize, parent: usize, zero_fraction: f64, one_fraction: f64, feature: Option<usize>) {
        let start = self.buf.len();
        self.buf.extend_from_within(parent..start);
        extend_path(&mut self.buf, start, zero_fraction, one_fraction, feature);
        match self.nodes[node] {
            Node::Leaf { value, .. } => {
                let path = &self.buf[start..];
                for i in 1..path.len() {
                    let w = unwound_path_sum(path, i);
                    let el = path[i];
                    let f = el.feature.expect("only the root element lacks a feature");
                    self.phi[f] += w * (el.one_fraction - el.zero_fraction) * value;
                }
            }
            Node::Split {
                feature: split,
                threshold,
                left,
                right,
                cover,
            } => {
                let (hot, cold) = if self.x[split] <= threshold {
                    (left, right)
                } else {
                    (right, left)
                };
                let c = cover as f64;
                let hot_zero = self.nodes[hot].cover() as f64 / c;
                let cold_zero = self.nodes[cold].cover() as f64 / c;
                let mut incoming_zero = 1.0;
                let mut incoming_one = 1.0;
                if let Some(k) = self.buf[start..].iter().position(|e| e.feature == Some(split)) {
                    incoming_zero = self.buf[start + k].zero_fraction;
                    incoming_one = self.buf[start + k].one_fraction;
                    unwind_path(&mut self.buf, start, k);
                }
                self.recurse(hot, start, hot_zero * incoming_zero, incoming_one, Some(split));
                self.recurse(cold, start, cold_zero * incoming_zero, 0.0, Some(split));
            }
        }
        self.buf.truncate(start);
    }
}

/// Cover-weighted mean of the leaves: the tree's value with nothing known.
pub fn tree_base_value(t: &Tree) -> f64 {
    fn go(nodes: &[Node], i: usize) -> f64 {
        match nodes[i] {
            Node::Leaf { value, .. } => value,
            Node::Split { left, right, cover, .. } => {
                let c = cover as f64;
                nodes[left].cover() as f64 / c * go(nodes, left)
                    + nodes[right].cover() as f64 / c * go(nodes, right)
            }
        }
    }
    go(t.nodes(), 0)
}

/// Polynomial-time exact Shapley values (path-dependent TreeSHAP).
pub fn tree_shap(t: &Tree, x: &[f64]) -> Result<ShapExplanation, ShapError> {
    check_input(x, t.n_features())?;
    Ok(tree_shap_unchecked(t, x))
}

fn tree_shap_unchecked(t: &Tree, x: &[f64]) -> ShapExplanation {
    let d = t.depth() + 2;
    let mut w = Walker {
        nodes: t.nodes(),
        x,
        phi: vec![0.0; t.n_features()],
        buf: Vec::with_capacity(d * (d + 1) / 2),
    };
    w.recurse(0, 0, 1.0, 1.0, None);
    ShapExplanation {
        base_value: tree_base_value(t),
        contributions: w.phi,
        prediction: t.predict(x),
    }
}

/// Mean of the per-tree explanations; efficiency holds against
/// [`Forest::predict_proba`].
pub fn forest_shap(f: &Forest, x: &[f64]) -> Result<ShapExplanation, ShapError> {
    check_input(x, f.schema().len())?;
    let p = f.schema().len();
    let mut base = 0.0;
    let mut contributions = vec![0.0; p];
    for t in f.trees() {
        let e = tree_shap_unchecked(t, x);
        base += e.base_value;
        for (acc, v) in contributions.iter_mut().zip(&e.contributions) {
            *acc += v;
        }
    }
    let n = f.trees().len() as f64;
    contributions.iter_mut().for_each(|v| *v /= n);
    Ok(ShapExplanation {
        base_value: base / n,
        contributions,
        prediction: f.predict_unchecked(x),
    })
}

/// Explanations for every sample of `d`, in sample order.
pub fn explain_dataset(f: &Forest, d: &Dataset) -> Result<Vec<ShapExplanation>, ShapError> {
    if d.schema().names().ne(f.schema().names()) {
        return Err(ShapError::Input(ForestError::Format(
            "dataset schema does not match model schema".into(),
        )));
    }
    d.samples()
        .par_iter()
        .map(|s| forest_shap(f, &s.values))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceRow {
    pub feature: String,
    pub mean_abs_shap: f64,
    /// 1 is most important.
    pub rank: usize,
}

/// Features in rank order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTable {
    pub rows: Vec<ImportanceRow>,
}

impl ImportanceTable {
    /// Ranks by descending mean |SHAP|; ties go to the lower schema index.
    pub fn from_means(names: &[String], means: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..means.len()).collect();
        order.sort_by(|&a, &b| {
            means[b]
                .partial_cmp(&means[a])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        Self {
            rows: order
                .into_iter()
                .enumerate()
                .map(|(r, i)| ImportanceRow {
                    feature: names[i].clone(),
                    mean_abs_shap: means[i],
                    rank: r + 1,
                })
                .collect(),
        }
    }

    pub fn rank_of(&self, feature: &str) -> Option<usize> {
        self.rows.iter().find(|r| r.feature == feature).map(|r| r.rank)
    }

    /// `feature,mean_abs_shap,rank`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature,mean_abs_shap,rank\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.feature, r.mean_abs_shap, r.rank);
        }
        out
    }
}

fn mean_abs(explanations: &[ShapExplanation], p: usize) -> Vec<f64> {
    let mut sums = vec![0.0; p];
    for e in explanations {
        for (s, v) in sums.iter_mut().zip(&e.contributions) {
            *s += v.abs();
        }
    }
    let n = explanations.len() as f64;
    sums.into_iter().map(|s| s / n).collect()
}

fn schema_names(f: &Forest) -> Vec<String> {
    f.schema().names().map(str::to_string).collect()
}

pub fn importance_table(f: &Forest, d: &Dataset) -> Result<ImportanceTable, ShapError> {
    if d.is_empty() {
        return Err(ShapError::Empty);
    }
    let ex = explain_dataset(f, d)?;
    Ok(ImportanceTable::from_means(&schema_names(f), &mean_abs(&ex, f.schema().len())))
}

/// Importance table from explanations that were already computed.
pub fn importance_from_explanations(
    names: &[String],
    explanations: &[ShapExplanation],
) -> Result<ImportanceTable, ShapError> {
    if explanations.is_empty() {
        return Err(ShapError::Empty);
    }
    Ok(ImportanceTable::from_means(names, &mean_abs(explanations, names.len())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeeswarmRecord {
    pub sample_id: String,
    pub feature: String,
    pub value: f64,
    pub shap: f64,
}

/// One record per (sample, feature), samples in dataset order and features
/// in schema order.
pub fn beeswarm_export(f: &Forest, d: &Dataset) -> Result<Vec<BeeswarmRecord>, ShapError> {
    if d.is_empty() {
        return Err(ShapError::Empty);
    }
    let ex = explain_dataset(f, d)?;
    Ok(beeswarm_from_explanations(f, d, &ex))
}

pub fn beeswarm_from_explanations(
    f: &Forest,
    d: &Dataset,
    explanations: &[ShapExplanation],
) -> Vec<BeeswarmRecord> {
    let names = schema_names(f);
    d.samples()
        .iter()
        .zip(explanations)
        .flat_map(|(s, e)| {
            names.iter().enumerate().map(move |(j, name)| BeeswarmRecord {
                sample_id: s.id.clone(),
                feature: name.clone(),
                value: s.values[j],
                shap: e.contributions[j],
            })
        })
        .collect()
}

/// `sample_id,feature,value,shap`
pub fn beeswarm_to_csv(records: &[BeeswarmRecord]) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(["sample_id", "feature", "value", "shap"])
        .expect("in-memory write");
    for r in records {
        w.write_record([
            r.sample_id.as_str(),
            r.feature.as_str(),
            &r.value.to_string(),
            &r.shap.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

pub fn beeswarm_from_csv(text: &str) -> Result<Vec<BeeswarmRecord>, ShapError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| ShapError::Parse(e.to_string()))?;
    if header.iter().ne(["sample_id", "feature", "value", "shap"]) {
        return Err(ShapError::Parse(format!("unexpected header {header:?}")));
    }
    r.records()
        .enumerate()
        .map(|(k, rec)| {
            let rec = rec.map_err(|e| ShapError::Parse(e.to_string()))?;
            let num = |i: usize| {
                rec.get(i)
                    .unwrap_or("")
                    .parse::<f64>()
                    .map_err(|_| ShapError::Parse(format!("row {}: bad number in column {i}", k + 2)))
            };
            Ok(BeeswarmRecord {
                sample_id: rec.get(0).unwrap_or("").to_string(),
                feature: rec.get(1).unwrap_or("").to_string(),
                value: num(2)?,
                shap: num(3)?,
            })
        })
        .collect()
}

/// Rebuilds the importance table from beeswarm records, ranking features in
/// order of first appearance for ties.
pub fn importance_from_beeswarm(records: &[BeeswarmRecord]) -> Result<ImportanceTable, ShapError> {
    let mut names: Vec<String> = Vec::new();
    let mut sums: Vec<f64> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for r in records {
        let j = match names.iter().position(|n| *n == r.feature) {
            Some(j) => j,
            None => {
                names.push(r.feature.clone());
                sums.push(0.0);
                counts.push(0);
                names.len() - 1
            }
        };
        sums[j] += r.shap.abs();
        counts[j] += 1;
    }
    if names.is_empty() {
        return Err(ShapError::Empty);
    }
    let means: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    Ok(ImportanceTable::from_means(&names, &means))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForcePlot {
    pub base_value: f64,
    pub prediction: f64,
    /// Non-zero contributions by descending magnitude; ties by feature name.
    pub contributions: Vec<(String, f64)>,
}

impl ForcePlot {
    pub fn from_explanation(names: &[String], e: &ShapExplanation) -> Self {
        let mut contributions: Vec<(String, f64)> = names
            .iter()
            .zip(&e.contributions)
            .filter(|(_, v)| **v != 0.0)
            .map(|(n, v)| (n.clone(), *v))
            .collect();
        contributions.sort_by(|a, b| {
            b.1.abs()
                .partial_cmp(&a.1.abs())
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        Self {
            base_value: e.base_value,
            prediction: e.prediction,
            contributions,
        }
    }

    /// Comment lines carry base and prediction, then `feature,contribution`.
    pub fn to_csv(&self, sample_id: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# sample_id={sample_id}");
        let _ = writeln!(out, "# base_value={}", self.base_value);
        let _ = writeln!(out, "# prediction={}", self.prediction);
        out.push_str("feature,contribution\n");
        for (n, v) in &self.contributions {
            let _ = writeln!(out, "{n},{v}");
        }
        out
    }
}

pub fn force_decomposition(f: &Forest, x: &[f64]) -> Result<ForcePlot, ShapError> {
    let e = forest_shap(f, x)?;
    Ok(ForcePlot::from_explanation(&schema_names(f), &e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureSchema, Sample, Stratum};
    use crate::forest::{train_forest, ForestParams};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stump() -> Tree {
        Tree::from_nodes(
            vec![
                Node::Split { feature: 0, threshold: 2.5, left: 1, right: 2, cover: 4 },
                Node::Leaf { value: 0.2, cover: 2 },
                Node::Leaf { value: 0.8, cover: 2 },
            ],
            1,
        )
        .unwrap()
    }

    fn schema(p: usize) -> FeatureSchema {
        let names: Vec<String> = (0..p).map(|i| format!("f{i}")).collect();
        FeatureSchema::from_names(&names).unwrap()
    }

    fn forest(trees: Vec<Tree>) -> Forest {
        let p = trees[0].n_features();
        let mut params = ForestParams::defaults(p);
        params.n_trees = trees.len();
        Forest::from_trees(trees, params, schema(p)).unwrap()
    }

    /// Random tree of the given depth with random covers.
    pub(crate) fn random_tree(rng: &mut ChaCha8Rng, p: usize, max_depth: usize) -> Tree {
        fn build(rng: &mut ChaCha8Rng, nodes: &mut Vec<Node>, p: usize, depth: usize, cover: usize) -> usize {
            let me = nodes.len();
            if depth == 0 || cover < 2 || rng.random_bool(0.15) {
                nodes.push(Node::Leaf { value: rng.random_range(0.0..=1.0), cover });
                return me;
            }
            nodes.push(Node::Leaf { value: 0.0, cover });
            let lc = rng.random_range(1..cover);
            let feature = rng.random_range(0..p);
            let threshold = rng.random_range(-1.0..1.0);
            let left = build(rng, nodes, p, depth - 1, lc);
            let right = build(rng, nodes, p, depth - 1, cover - lc);
            nodes[me] = Node::Split { feature, threshold, left, right, cover };
            me
        }
        let mut nodes = Vec::new();
        let cover = rng.random_range(16..200);
        build(rng, &mut nodes, p, max_depth, cover);
        Tree::from_nodes(nodes, p).unwrap()
    }

    #[test]
    fn expected_value_cases() {
        let t = stump();
        assert_eq!(tree_expected_value(&t, &[1.0], &[false]).unwrap(), 0.5);
        assert_eq!(tree_expected_value(&t, &[1.0], &[true]).unwrap(), 0.2);
        let leaf = Tree::leaf(0.7, 5, 2).unwrap();
        for mask in [[false, false], [true, false], [false, true], [true, true]] {
            assert_eq!(tree_expected_value(&leaf, &[0.0, 0.0], &mask).unwrap(), 0.7);
        }
        assert!(matches!(
            tree_expected_value(&t, &[1.0, 2.0], &[true]),
            Err(ShapError::Input(ForestError::DimensionMismatch { .. }))
        ));
    }

    #[test]
    fn brute_force_cases() {
        let leaf = Tree::leaf(0.7, 5, 3).unwrap();
        let e = brute_force_shap(&leaf, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(e.contributions, vec![0.0; 3]);
        assert_eq!(e.base_value, 0.7);

        let e = brute_force_shap(&stump(), &[1.0]).unwrap();
        assert!((e.contributions[0] + 0.3).abs() < 1e-15);
        assert_eq!(e.base_value, 0.5);
        assert_eq!(e.prediction, 0.2);

        let wide = Tree::from_nodes(vec![Node::Leaf { value: 0.1, cover: 1 }], 16).unwrap();
        assert_eq!(
            brute_force_shap(&wide, &[0.0; 16]).unwrap_err(),
            ShapError::TooManyFeatures(16)
        );
    }

    #[test]
    fn tree_shap_matches_hand_cases() {
        let leaf = Tree::leaf(0.7, 5, 3).unwrap();
        assert_eq!(
            tree_shap(&leaf, &[1.0, 2.0, 3.0]).unwrap(),
            brute_force_shap(&leaf, &[1.0, 2.0, 3.0]).unwrap()
        );
        let e = tree_shap(&stump(), &[1.0]).unwrap();
        assert!((e.contributions[0] + 0.3).abs() < 1e-15);
        assert_eq!(e.base_value, 0.5);
        assert_eq!(e.prediction, 0.2);
    }

    #[test]
    fn dummy_feature_gets_exact_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let t = random_tree(&mut rng, 5, 4);
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let used = t.split_features();
            let fast = tree_shap(&t, &x).unwrap();
            let slow = brute_force_shap(&t, &x).unwrap();
            for j in (0..5).filter(|j| !used.contains(j)) {
                assert_eq!(fast.contributions[j], 0.0);
                assert_eq!(slow.contributions[j], 0.0);
            }
        }
    }

    #[test]
    fn oracle_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut worst = 0.0f64;
        for case in 0..300 {
            let p = 1 + case % 8;
            let t = random_tree(&mut rng, p, 4);
            let x: Vec<f64> = (0..p).map(|_| rng.random_range(-1.2..1.2)).collect();
            let fast = tree_shap(&t, &x).unwrap();
            let slow = brute_force_shap(&t, &x).unwrap();
            assert!((fast.base_value - slow.base_value).abs() <= 1e-12);
            assert_eq!(fast.prediction, slow.prediction);
            for (a, b) in fast.contributions.iter().zip(&slow.contributions) {
                worst = worst.max((a - b).abs());
            }
            assert!(fast.efficiency_gap() <= 1e-9);
            assert!(slow.efficiency_gap() <= 1e-9);
        }
        assert!(worst <= 1e-9, "max deviation {worst}");
    }

    #[test]
    fn symmetric_copies_share_credit() {
        // f0 and f1 are copies of one column; the tree splits on each copy with
        // mirrored structure and covers, so the copies are interchangeable.
        let t = Tree::from_nodes(
            vec![
                Node::Split { feature: 0, threshold: 0.5, left: 1, right: 4, cover: 8 },
                Node::Split { feature: 1, threshold: 0.5, left: 2, right: 3, cover: 4 },
                Node::Leaf { value: 0.0, cover: 2 },
                Node::Leaf { value: 0.5, cover: 2 },
                Node::Split { feature: 1, threshold: 0.5, left: 5, right: 6, cover: 4 },
                Node::Leaf { value: 0.5, cover: 2 },
                Node::Leaf { value: 1.0, cover: 2 },
            ],
            3,
        )
        .unwrap();
        for (v, z) in [(0.0, -1.0), (1.0, -1.0), (0.0, 1.0), (1.0, 1.0)] {
            let e = brute_force_shap(&t, &[v, v, z]).unwrap();
            assert!((e.contributions[0] - e.contributions[1]).abs() < 1e-15);
            assert_eq!(e.contributions[2], 0.0);
            assert!(e.efficiency_gap() < 1e-12);
        }
    }

    #[test]
    fn forest_explanations() {
        let t = stump();
        let single = tree_shap(&t, &[3.0]).unwrap();
        let f = forest(vec![t.clone(), t.clone(), t]);
        let e = forest_shap(&f, &[3.0]).unwrap();
        assert!((e.base_value - single.base_value).abs() < 1e-15);
        assert!((e.contributions[0] - single.contributions[0]).abs() < 1e-15);

        let f = forest(vec![Tree::leaf(0.2, 1, 2).unwrap(), Tree::leaf(0.8, 1, 2).unwrap()]);
        let e = forest_shap(&f, &[0.0, 0.0]).unwrap();
        assert_eq!(e.base_value, 0.5);
        assert_eq!(e.contributions, vec![0.0, 0.0]);
    }

    #[test]
    fn forest_shap_is_mean_of_tree_shap_and_efficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..30 {
            let trees: Vec<Tree> = (0..5).map(|_| random_tree(&mut rng, 6, 4)).collect();
            let f = forest(trees);
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let e = forest_shap(&f, &x).unwrap();
            assert!((e.base_value + e.contributions.iter().sum::<f64>() - f.predict_proba(&x).unwrap()).abs() <= 1e-9);
            for j in 0..6 {
                let mean: f64 = f.trees().iter().map(|t| tree_shap(t, &x).unwrap().contributions[j]).sum::<f64>() / 5.0;
                assert!((mean - e.contributions[j]).abs() < 1e-12);
            }
        }
    }

    fn dataset(rows: &[Vec<f64>], labels: &[u8]) -> Dataset {
        let samples = rows
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (r, &l))| Sample {
                id: format!("s{i}"),
                lon: 0.0,
                lat: 0.0,
                region_id: "A".into(),
                district_id: "1".into(),
                stratum: Stratum::Grassland,
                year: 2024,
                label: l,
                values: r.clone(),
            })
            .collect();
        Dataset::new(schema(rows[0].len()), samples).unwrap()
    }

    #[test]
    fn importance_and_exports() {
        // model that never splits on f2
        let t = Tree::from_nodes(
            vec![
                Node::Split { feature: 1, threshold: 0.0, left: 1, right: 2, cover: 10 },
                Node::Leaf { value: 0.1, cover: 6 },
                Node::Split { feature: 0, threshold: 0.0, left: 3, right: 4, cover: 4 },
                Node::Leaf { value: 0.5, cover: 1 },
                Node::Leaf { value: 0.9, cover: 3 },
            ],
            3,
        )
        .unwrap();
        let f = forest(vec![t]);
        let d = dataset(&[vec![1.0, 1.0, 5.0], vec![-1.0, -1.0, 7.0]], &[1, 0]);
        let table = importance_table(&f, &d).unwrap();
        assert_eq!(table.rank_of("f2"), Some(3));
        assert_eq!(table.rows[2].mean_abs_shap, 0.0);

        let single = dataset(&[vec![1.0, 1.0, 5.0]], &[1]);
        let e = forest_shap(&f, &[1.0, 1.0, 5.0]).unwrap();
        let t1 = importance_table(&f, &single).unwrap();
        for r in &t1.rows {
            let j = f.schema().index_of(&r.feature).unwrap();
            assert_eq!(r.mean_abs_shap, e.contributions[j].abs());
        }

        let recs = beeswarm_export(&f, &d).unwrap();
        assert_eq!(recs.len(), 6);
        let first: f64 = recs[..3].iter().map(|r| r.shap).sum();
        let e0 = forest_shap(&f, &d.samples()[0].values).unwrap();
        assert!((first - (e0.prediction - e0.base_value)).abs() < 1e-12);
        let parsed = beeswarm_from_csv(&beeswarm_to_csv(&recs)).unwrap();
        assert_eq!(parsed, recs);
        assert_eq!(importance_from_beeswarm(&parsed).unwrap(), table);

        let empty = Dataset::empty(schema(3));
        assert_eq!(importance_table(&f, &empty).unwrap_err(), ShapError::Empty);
        assert_eq!(beeswarm_export(&f, &empty).unwrap_err(), ShapError::Empty);
    }

    #[test]
    fn force_plot_cases() {
        let f = forest(vec![Tree::leaf(0.4, 3, 2).unwrap()]);
        let fp = force_decomposition(&f, &[0.0, 0.0]).unwrap();
        assert!(fp.contributions.is_empty());
        assert_eq!(fp.base_value, fp.prediction);

        let f = forest(vec![stump()]);
        let fp = force_decomposition(&f, &[1.0]).unwrap();
        assert_eq!(fp.contributions.len(), 1);
        assert_eq!(fp.contributions[0].0, "f0");
        assert!((fp.contributions[0].1 + 0.3).abs() < 1e-15);
    }

    #[test]
    fn force_order_ignores_schema_order() {
        let names = vec!["b".to_string(), "a".to_string(), "c".to_string()];
        let e = ShapExplanation { base_value: 0.5, contributions: vec![0.1, -0.1, 0.3], prediction: 0.8 };
        let fp = ForcePlot::from_explanation(&names, &e);
        let permuted = ForcePlot::from_explanation(
            &[names[2].clone(), names[0].clone(), names[1].clone()],
            &ShapExplanation { contributions: vec![0.3, 0.1, -0.1], ..e.clone() },
        );
        assert_eq!(fp, permuted);
        let order: Vec<&str> = fp.contributions.iter().map(|c| c.0.as_str()).collect();
        assert_eq!(order, ["c", "a", "b"]);
    }

    #[test]
    fn trained_forest_explanations_are_efficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows: Vec<Vec<f64>> = (0..150).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let labels: Vec<u8> = rows.iter().map(|r| u8::from(r[0] - r[2] + rng.random_range(-0.5..0.5) > 0.0)).collect();
        let d = dataset(&rows, &labels);
        let mut p = ForestParams::defaults(4);
        p.n_trees = 20;
        let f = train_forest(&d, &p).unwrap();
        for e in explain_dataset(&f, &d).unwrap() {
            assert!(e.efficiency_gap() <= 1e-9);
        }
        for t in f.trees() {
            let x = &rows[0];
            let a = tree_shap(t, x).unwrap();
            let b = brute_force_shap(t, x).unwrap();
            for (u, v) in a.contributions.iter().zip(&b.contributions) {
                assert!((u - v).abs() <= 1e-9);
            }
        }
    }
}
