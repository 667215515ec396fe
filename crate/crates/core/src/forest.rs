//! Gini CART trees and a bagged random forest emitting class-1 probabilities.
//!
//! Every node keeps its training cover (the number of training rows, bootstrap
//! duplicates included, that reached it); the Shapley code relies on it.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Feature, FeatureSchema};
use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForestError {
    #[error("no training rows")]
    EmptyData,
    #[error("training data holds a single class ({0}); a probability model would be degenerate")]
    SingleClass(u8),
    #[error("invalid forest parameters: {0}")]
    InvalidParams(String),
    #[error("expected {expected} feature values, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("feature value {index} is not finite")]
    NonFinite { index: usize },
    #[error("threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("invalid tree: {0}")]
    InvalidTree(String),
    #[error("model file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Features sampled per split.
    pub mtry: usize,
    pub bootstrap: bool,
    pub seed: u64,
}

impl ForestParams {
    pub const DEFAULT_TREES: usize = 200;
    pub const DEFAULT_MAX_DEPTH: usize = 12;
    pub const DEFAULT_MIN_LEAF: usize = 5;

    /// Conventional defaults: 200 trees, depth 12, leaves of at least 5 rows,
    /// ⌈√p⌉ features per split, bootstrap on.
    pub fn defaults(n_features: usize) -> Self {
        Self {
            n_trees: Self::DEFAULT_TREES,
            max_depth: Self::DEFAULT_MAX_DEPTH,
            min_samples_leaf: Self::DEFAULT_MIN_LEAF,
            mtry: default_mtry(n_features),
            bootstrap: true,
            seed: 0,
        }
    }

    pub fn validate(&self, n_features: usize) -> Result<(), ForestError> {
        let bad = |m: String| Err(ForestError::InvalidParams(m));
        if self.n_trees == 0 {
            return bad("n_trees must be at least 1".into());
        }
        if self.max_depth == 0 {
            return bad("max_depth must be at least 1".into());
        }
        if self.min_samples_leaf == 0 {
            return bad("min_samples_leaf must be at least 1".into());
        }
        if self.mtry == 0 || self.mtry > n_features {
            return bad(format!(
                "mtry {} outside [1, {n_features}]",
                self.mtry
            ));
        }
        Ok(())
    }
}

/// ⌈√p⌉, at least 1.
pub fn default_mtry(n_features: usize) -> usize {
    let mut m = (n_features as f64).sqrt().ceil() as usize;
    while m * m < n_features {
        m += 1;
    }
    while m > 1 && (m - 1) * (m - 1) >= n_features {
        m -= 1;
    }
    m.max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    /// `x[feature] <= threshold` goes left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        cover: usize,
    },
    /// `value` is the fraction of label-1 training rows at the leaf.
    Leaf { value: f64, cover: usize },
}

impl Node {
    pub fn cover(&self) -> usize {
        match *self {
            Node::Split { cover, .. } | Node::Leaf { cover, .. } => cover,
        }
    }
}

/// A binary tree stored as a node arena; node 0 is the root and children
/// always sit at higher indices than their parent.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
    n_features: usize,
}

impl Tree {
    pub fn from_nodes(nodes: Vec<Node>, n_features: usize) -> Result<Self, ForestError> {
        let bad = |m: String| Err(ForestError::InvalidTree(m));
        if nodes.is_empty() {
            return bad("no nodes".into());
        }
        let mut parents = vec![0usize; nodes.len()];
        for (i, node) in nodes.iter().enumerate() {
            match *node {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    cover,
                } => {
                    if feature >= n_features {
                        return bad(format!("node {i}: feature {feature} out of range"));
                    }
                    if !threshold.is_finite() {
                        return bad(format!("node {i}: non-finite threshold"));
                    }
                    for c in [left, right] {
                        if c <= i || c >= nodes.len() {
                            return bad(format!("node {i}: child index {c} invalid"));
                        }
                        parents[c] += 1;
                    }
                    if left == right {
                        return bad(format!("node {i}: identical children"));
                    }
                    let sum = nodes[left].cover() + nodes[right].cover();
                    if cover != sum {
                        return bad(format!("node {i}: cover {cover} != children {sum}"));
                    }
                }
                Node::Leaf { value, cover } => {
                    if !(0.0..=1.0).contains(&value) {
                        return bad(format!("node {i}: leaf value {value} outside [0,1]"));
                    }
                    if cover == 0 {
                        return bad(format!("node {i}: zero cover"));
                    }
                }
            }
        }
        if let Some(i) = (1..nodes.len()).find(|&i| parents[i] != 1) {
            return bad(format!("node {i} is referenced {} times", parents[i]));
        }
        Ok(Self { nodes, n_features })
    }

    /// A tree consisting of one leaf.
    pub fn leaf(value: f64, cover: usize, n_features: usize) -> Result<Self, ForestError> {
        Self::from_nodes(vec![Node::Leaf { value, cover }], n_features)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
            }
        }
        go(&self.nodes, 0)
    }

    /// Leaf value reached by plain traversal. `x` must already be validated.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value, .. } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    /// Features used by at least one split.
    pub fn split_features(&self) -> Vec<usize> {
        let mut used: Vec<usize> = self
            .nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .collect();
        used.sort_unstable();
        used.dedup();
        used
    }
}

pub(crate) fn check_input(x: &[f64], n_features: usize) -> Result<(), ForestError> {
    if x.len() != n_features {
        return Err(ForestError::DimensionMismatch {
            expected: n_features,
            found: x.len(),
        });
    }
    if let Some(index) = x.iter().position(|v| !v.is_finite()) {
        return Err(ForestError::NonFinite { index });
    }
    Ok(())
}

/// Dense row-major training matrix.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    x: Vec<f64>,
    y: Vec<u8>,
    n_features: usize,
}

impl TrainingSet {
    pub fn from_dataset(d: &Dataset) -> Self {
        let n_features = d.schema().len();
        let mut x = Vec::with_capacity(d.len() * n_features);
        for s in d.samples() {
            x.extend_from_slice(&s.values);
        }
        Self {
            x,
            y: d.labels(),
            n_features,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: &[u8]) -> Result<Self, ForestError> {
        let n_features = rows.first().map_or(0, Vec::len);
        if rows.len() != labels.len() {
            return Err(ForestError::DimensionMismatch {
                expected: rows.len(),
                found: labels.len(),
            });
        }
        let mut x = Vec::with_capacity(rows.len() * n_features);
        for r in rows {
            check_input(r, n_features)?;
            x.extend_from_slice(r);
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(ForestError::InvalidParams("labels must be 0 or 1".into()));
        }
        Ok(Self {
            x,
            y: labels.to_vec(),
            n_features,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.y[i]
    }

    #[inline]
    fn value(&self, row: usize, feature: usize) -> f64 {
        self.x[row * self.n_features + feature]
    }
}

/// Sum of squared class counts over a node size, kept as an exact fraction
/// `num / den`. Larger is purer; comparing these is equivalent to comparing
/// weighted Gini impurity with the opposite sign.
#[derive(Clone, Copy)]
struct Purity {
    num: u128,
    den: u128,
}

impl Purity {
    fn node(pos: usize, n: usize) -> Self {
        let (p, q) = (pos as u128, (n - pos) as u128);
        Self {
            num: p * p + q * q,
            den: n as u128,
        }
    }

    fn split(pos_l: usize, n_l: usize, pos_r: usize, n_r: usize) -> Self {
        let l = Self::node(pos_l, n_l);
        let r = Self::node(pos_r, n_r);
        Self {
            num: l.num * r.den + r.num * l.den,
            den: l.den * r.den,
        }
    }

    fn gt(self, other: Self) -> bool {
        self.num * other.den > other.num * self.den
    }
}

struct Candidate {
    feature: usize,
    threshold: f64,
    purity: Purity,
}

fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = lo / 2.0 + hi / 2.0;
    // adjacent floats: the midpoint can round up to `hi`, which would send
    // `hi` left as well
    if m < hi && m >= lo {
        m
    } else {
        lo
    }
}

struct Builder<'a, R> {
    data: &'a TrainingSet,
    params: &'a ForestParams,
    rng: &'a mut R,
    nodes: Vec<Node>,
    scratch: Vec<(f64, u8)>,
}

impl<R: Rng> Builder<'_, R> {
    fn leaf(&mut self, pos: usize, n: usize) -> usize {
        self.nodes.push(Node::Leaf {
            value: pos as f64 / n as f64,
            cover: n,
        });
        self.nodes.len() - 1
    }

    fn best_split(&mut self, rows: &[usize], pos: usize) -> Option<Candidate> {
        let n = rows.len();
        let p = self.data.n_features;
        let mut features = index::sample(self.rng, p, self.params.mtry).into_vec();
        features.sort_unstable();
        let min_leaf = self.params.min_samples_leaf;
        let parent = Purity::node(pos, n);
        let mut best: Option<Candidate> = None;

        for f in features {
            self.scratch.clear();
            self.scratch
                .extend(rows.iter().map(|&r| (self.data.value(r, f), self.data.y[r])));
            self.scratch.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut pos_l = 0usize;
            for i in 0..n - 1 {
                pos_l += usize::from(self.scratch[i].1);
                let (v, next) = (self.scratch[i].0, self.scratch[i + 1].0);
                if v == next {
                    continue;
                }
                let n_l = i + 1;
                let n_r = n - n_l;
                if n_l < min_leaf || n_r < min_leaf {
                    continue;
                }
                let purity = Purity::split(pos_l, n_l, pos - pos_l, n_r);
                if !purity.gt(parent) {
                    continue;
                }
                if best.as_ref().is_none_or(|b| purity.gt(b.purity)) {
                    best = Some(Candidate {
                        feature: f,
                        threshold: midpoint(v, next),
                        purity,
                    });
                }
            }
        }
        best
    }

    fn grow(&mut self, rows: &mut [usize], depth: usize) -> usize {
        let n = rows.len();
        let pos = rows.iter().filter(|&&r| self.data.y[r] == 1).count();
        if pos == 0 || pos == n || depth >= self.params.max_depth || n < 2 * self.params.min_samples_leaf {
            return self.leaf(pos, n);
        }
        let Some(split) = self.best_split(rows, pos) else {
            return self.leaf(pos, n);
        };
        let mut cut = 0;
        for i in 0..n {
            if self.data.value(rows[i], split.feature) <= split.threshold {
                rows.swap(i, cut);
                cut += 1;
            }
        }
        let me = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0, cover: n });
        let (l_rows, r_rows) = rows.split_at_mut(cut);
        let left = self.grow(l_rows, depth + 1);
        let right = self.grow(r_rows, depth + 1);
        self.nodes[me] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
            cover: n,
        };
        me
    }
}

/// Grows one greedy Gini tree on `rows` (indices into `data`, repeats allowed).
///
/// Each node samples `mtry` features from `rng`, picks the split with the
/// lowest weighted child impurity (ties: lower feature, then lower
/// threshold) and stops when the node is pure, at `max_depth`, when no split
/// reduces impurity, or when a child would hold fewer than
/// `min_samples_leaf` rows.
pub fn train_tree<R: Rng>(
    data: &TrainingSet,
    rows: &[usize],
    params: &ForestParams,
    rng: &mut R,
) -> Result<Tree, ForestError> {
    if rows.is_empty() {
        return Err(ForestError::EmptyData);
    }
    params.validate(data.n_features)?;
    let mut rows = rows.to_vec();
    let mut b = Builder {
        data,
        params,
        rng,
        nodes: Vec::new(),
        scratch: Vec::with_capacity(rows.len()),
    };
    b.grow(&mut rows, 0);
    Ok(Tree {
        nodes: b.nodes,
        n_features: data.n_features,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    trees: Vec<Tree>,
    params: ForestParams,
    schema: FeatureSchema,
}

impl Forest {
    pub fn from_trees(
        trees: Vec<Tree>,
        params: ForestParams,
        schema: FeatureSchema,
    ) -> Result<Self, ForestError> {
        if trees.is_empty() {
            return Err(ForestError::InvalidParams("a forest needs at least one tree".into()));
        }
        if let Some(t) = trees.iter().find(|t| t.n_features != schema.len()) {
            return Err(ForestError::DimensionMismatch {
                expected: schema.len(),
                found: t.n_features,
            });
        }
        Ok(Self {
            trees,
            params,
            schema,
        })
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn params(&self) -> &ForestParams {
        &self.params
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    /// Mean of the trees' leaf values.
    pub fn predict_proba(&self, x: &[f64]) -> Result<f64, ForestError> {
        check_input(x, self.schema.len())?;
        Ok(self.predict_unchecked(x))
    }

    pub(crate) fn predict_unchecked(&self, x: &[f64]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        sum / self.trees.len() as f64
    }

    /// 1 iff the probability is at least `threshold`.
    pub fn predict_label(&self, x: &[f64], threshold: f64) -> Result<u8, ForestError> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(ForestError::InvalidThreshold(threshold));
        }
        Ok(u8::from(self.predict_proba(x)? >= threshold))
    }

    /// Probabilities for every sample of `d`, in order.
    pub fn predict_dataset(&self, d: &Dataset) -> Result<Vec<f64>, ForestError> {
        if d.schema().names().ne(self.schema.names()) {
            return Err(ForestError::Format(format!(
                "dataset schema {} does not match model schema {}",
                d.schema().fingerprint(),
                self.schema.fingerprint()
            )));
        }
        d.samples()
            .par_iter()
            .map(|s| self.predict_proba(&s.values))
            .collect()
    }

    pub fn to_json(&self) -> String {
        let file = ForestFile {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            schema: self
                .schema
                .features()
                .iter()
                .map(|f| FeatureRecord {
                    name: f.name.clone(),
                    unit: f.unit.clone(),
                })
                .collect(),
            schema_fingerprint: self.schema.fingerprint(),
            params: self.params.clone(),
            trees: self
                .trees
                .iter()
                .map(|t| TreeRecord {
                    nodes: t
                        .nodes
                        .iter()
                        .enumerate()
                        .map(|(id, n)| NodeRecord::from_node(id, n))
                        .collect(),
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("forest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, ForestError> {
        let file: ForestFile =
            serde_json::from_str(text).map_err(|e| ForestError::Format(e.to_string()))?;
        if file.format != FORMAT_TAG || file.version != FORMAT_VERSION {
            return Err(ForestError::Format(format!(
                "unsupported format {} v{}",
                file.format, file.version
            )));
        }
        let schema = FeatureSchema::new(
            file.schema
                .into_iter()
                .map(|f| Feature {
                    name: f.name,
                    unit: f.unit,
                })
                .collect(),
        )
        .map_err(|e| ForestError::Format(e.to_string()))?;
        if schema.fingerprint() != file.schema_fingerprint {
            return Err(ForestError::Format("schema fingerprint mismatch".into()));
        }
        let p = schema.len();
        let trees = file
            .trees
            .into_iter()
            .enumerate()
            .map(|(t, rec)| {
                let nodes = rec
                    .nodes
                    .into_iter()
                    .enumerate()
                    .map(|(i, n)| {
                        if n.id != i {
                            return Err(ForestError::Format(format!(
                                "tree {t}: node {i} carries id {}",
                                n.id
                            )));
                        }
                        n.into_node()
                            .map_err(|m| ForestError::Format(format!("tree {t}, node {i}: {m}")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Tree::from_nodes(nodes, p)
            })
            .collect::<Result<Vec<_>, _>>()?;
        if trees.len() != file.params.n_trees {
            return Err(ForestError::Format(format!(
                "{} trees stored, params say {}",
                trees.len(),
                file.params.n_trees
            )));
        }
        Forest::from_trees(trees, file.params, schema)
    }
}

const FORMAT_TAG: &str = "firerisk-forest";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ForestFile {
    format: String,
    version: u32,
    schema: Vec<FeatureRecord>,
    schema_fingerprint: String,
    params: ForestParams,
    trees: Vec<TreeRecord>,
}

#[derive(Serialize, Deserialize)]
struct FeatureRecord {
    name: String,
    unit: String,
}

#[derive(Serialize, Deserialize)]
struct TreeRecord {
    nodes: Vec<NodeRecord>,
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    id: usize,
    kind: String,
    cover: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    feature: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    left: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    right: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    value: Option<f64>,
}

impl NodeRecord {
    fn from_node(id: usize, n: &Node) -> Self {
        match *n {
            Node::Split {
                feature,
                threshold,
                left,
                right,
                cover,
            } => Self {
                id,
                kind: "split".into(),
                cover,
                feature: Some(feature),
                threshold: Some(threshold),
                left: Some(left),
                right: Some(right),
                value: None,
            },
            Node::Leaf { value, cover } => Self {
                id,
                kind: "leaf".into(),
                cover,
                feature: None,
                threshold: None,
                left: None,
                right: None,
                value: Some(value),
            },
        }
    }

    fn into_node(self) -> Result<Node, String> {
        match self.kind.as_str() {
            "split" => match (self.feature, self.threshold, self.left, self.right) {
                (Some(feature), Some(threshold), Some(left), Some(right)) => Ok(Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    cover: self.cover,
                }),
                _ => Err("split node needs feature, threshold, left and right".into()),
            },
            "leaf" => self
                .value
                .map(|value| Node::Leaf {
                    value,
                    cover: self.cover,
                })
                .ok_or_else(|| "leaf node needs a value".to_string()),
            other => Err(format!("unknown node kind `{other}`")),
        }
    }
}

/// Trains `params.n_trees` trees in parallel. Tree `t` draws its bootstrap
/// sample and its feature subsets from a stream derived from
/// `(params.seed, t)` alone, so the result does not depend on thread count.
pub fn train_forest(data: &Dataset, params: &ForestParams) -> Result<Forest, ForestError> {
    params.validate(data.schema().len())?;
    let set = TrainingSet::from_dataset(data);
    train_forest_on(&set, data.schema().clone(), params)
}

pub fn train_forest_on(
    set: &TrainingSet,
    schema: FeatureSchema,
    params: &ForestParams,
) -> Result<Forest, ForestError> {
    if set.is_empty() {
        return Err(ForestError::EmptyData);
    }
    params.validate(set.n_features)?;
    let pos = set.y.iter().filter(|&&y| y == 1).count();
    if pos == 0 || pos == set.len() {
        return Err(ForestError::SingleClass(set.y[0]));
    }
    let n = set.len();
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = tree_stream(params.seed, t);
            let rows: Vec<usize> = if params.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            train_tree(set, &rows, params, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Forest::from_trees(trees, params.clone(), schema)
}

/// The random stream used for tree `t` of a forest seeded with `seed`.
pub fn tree_stream(seed: u64, t: usize) -> rand_chacha::ChaCha8Rng {
    seed::stream(seed, "tree", t as u64)
}

pub fn predict_proba(f: &Forest, x: &[f64]) -> Result<f64, ForestError> {
    f.predict_proba(x)
}

pub fn predict_label(f: &Forest, x: &[f64], threshold: f64) -> Result<u8, ForestError> {
    f.predict_label(x, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Sample, Stratum};
    use proptest::prelude::{any, prop_assert_eq, proptest, ProptestConfig};

    fn params(mtry: usize) -> ForestParams {
        ForestParams {
            n_trees: 1,
            max_depth: 32,
            min_samples_leaf: 1,
            mtry,
            bootstrap: false,
            seed: 3,
        }
    }

    fn dataset(rows: &[Vec<f64>], labels: &[u8]) -> Dataset {
        let p = rows[0].len();
        let names: Vec<String> = (0..p).map(|i| format!("f{i}")).collect();
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
                stratum: Stratum::Forest,
                year: 2025,
                label: l,
                values: r.clone(),
            })
            .collect();
        Dataset::new(FeatureSchema::from_names(&names).unwrap(), samples).unwrap()
    }

    fn all_rows(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    /// Exhaustive enumeration of every midpoint threshold on one feature,
    /// scoring weighted Gini impurity directly.
    fn brute_best_threshold(xs: &[f64], ys: &[u8]) -> (f64, f64) {
        let mut vals: Vec<f64> = xs.to_vec();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        let gini = |idx: &[usize]| {
            let n = idx.len() as f64;
            let p = idx.iter().filter(|&&i| ys[i] == 1).count() as f64 / n;
            1.0 - p * p - (1.0 - p) * (1.0 - p)
        };
        let mut best = (f64::INFINITY, f64::NAN);
        for w in vals.windows(2) {
            let t = (w[0] + w[1]) / 2.0;
            let l: Vec<usize> = (0..xs.len()).filter(|&i| xs[i] <= t).collect();
            let r: Vec<usize> = (0..xs.len()).filter(|&i| xs[i] > t).collect();
            let n = xs.len() as f64;
            let imp = l.len() as f64 / n * gini(&l) + r.len() as f64 / n * gini(&r);
            if imp < best.0 {
                best = (imp, t);
            }
        }
        best
    }

    #[test]
    fn pure_node_is_single_leaf() {
        let set = TrainingSet::from_rows(&[vec![1.0], vec![2.0], vec![3.0]], &[1, 1, 1]).unwrap();
        let t = train_tree(&set, &all_rows(3), &params(1), &mut tree_stream(0, 0)).unwrap();
        assert_eq!(t.nodes(), &[Node::Leaf { value: 1.0, cover: 3 }]);
    }

    #[test]
    fn four_point_split() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [0, 0, 1, 1];
        let (imp, t_oracle) = brute_best_threshold(&xs, &ys);
        assert_eq!(imp, 0.0);
        assert_eq!(t_oracle, 2.5);
        let rows: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        let set = TrainingSet::from_rows(&rows, &ys).unwrap();
        let t = train_tree(&set, &all_rows(4), &params(1), &mut tree_stream(0, 0)).unwrap();
        assert_eq!(
            t.nodes(),
            &[
                Node::Split {
                    feature: 0,
                    threshold: 2.5,
                    left: 1,
                    right: 2,
                    cover: 4
                },
                Node::Leaf { value: 0.0, cover: 2 },
                Node::Leaf { value: 1.0, cover: 2 },
            ]
        );
    }

    #[test]
    fn constant_features_give_fraction_leaf() {
        let rows = vec![vec![5.0, 1.0]; 4];
        let set = TrainingSet::from_rows(&rows, &[1, 0, 0, 0]).unwrap();
        let t = train_tree(&set, &all_rows(4), &params(2), &mut tree_stream(0, 0)).unwrap();
        assert_eq!(t.nodes(), &[Node::Leaf { value: 0.25, cover: 4 }]);
    }

    #[test]
    fn empty_rows_rejected() {
        let set = TrainingSet::from_rows(&[vec![1.0]], &[1]).unwrap();
        assert_eq!(
            train_tree(&set, &[], &params(1), &mut tree_stream(0, 0)).unwrap_err(),
            ForestError::EmptyData
        );
    }

    #[test]
    fn split_matches_exhaustive_gini_search() {
        let mut rng = tree_stream(99, 0);
        for _ in 0..200 {
            let n = rng.random_range(2..25);
            let xs: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..8u8))).collect();
            let ys: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
            let rows: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
            let set = TrainingSet::from_rows(&rows, &ys).unwrap();
            let mut p = params(1);
            p.max_depth = 1;
            let t = train_tree(&set, &all_rows(n), &p, &mut tree_stream(0, 0)).unwrap();
            let pos = ys.iter().filter(|&&y| y == 1).count() as f64 / n as f64;
            let parent = 1.0 - pos * pos - (1.0 - pos) * (1.0 - pos);
            let (imp, _) = brute_best_threshold(&xs, &ys);
            match t.nodes()[0] {
                Node::Split { threshold, .. } => {
                    assert!(imp < parent - 1e-12);
                    let l: Vec<u8> = (0..n).filter(|&i| xs[i] <= threshold).map(|i| ys[i]).collect();
                    let r: Vec<u8> = (0..n).filter(|&i| xs[i] > threshold).map(|i| ys[i]).collect();
                    let g = |v: &[u8]| {
                        let p = v.iter().filter(|&&y| y == 1).count() as f64 / v.len() as f64;
                        v.len() as f64 / n as f64 * (1.0 - p * p - (1.0 - p) * (1.0 - p))
                    };
                    assert!((g(&l) + g(&r) - imp).abs() < 1e-12);
                }
                Node::Leaf { .. } => assert!(imp >= parent - 1e-12, "missed split {imp} < {parent}"),
            }
        }
    }

    #[test]
    fn ties_prefer_lower_feature() {
        // both features separate perfectly
        let rows = vec![vec![1.0, 10.0], vec![2.0, 20.0], vec![3.0, 30.0], vec![4.0, 40.0]];
        let set = TrainingSet::from_rows(&rows, &[0, 0, 1, 1]).unwrap();
        let t = train_tree(&set, &all_rows(4), &params(2), &mut tree_stream(0, 0)).unwrap();
        assert!(matches!(t.nodes()[0], Node::Split { feature: 0, threshold, .. } if threshold == 2.5));
    }

    #[test]
    fn min_leaf_and_depth_limits() {
        let rows: Vec<Vec<f64>> = (0..8).map(|i| vec![f64::from(i)]).collect();
        let labels = [0, 1, 0, 1, 0, 1, 0, 1];
        let set = TrainingSet::from_rows(&rows, &labels).unwrap();
        let mut p = params(1);
        p.max_depth = 2;
        let t = train_tree(&set, &all_rows(8), &p, &mut tree_stream(0, 0)).unwrap();
        assert!(t.depth() <= 2);
        p.max_depth = 32;
        p.min_samples_leaf = 3;
        let t = train_tree(&set, &all_rows(8), &p, &mut tree_stream(0, 0)).unwrap();
        for n in t.nodes() {
            assert!(n.cover() >= 3);
        }
    }

    #[test]
    fn adjacent_float_midpoint_keeps_partition() {
        let lo = 1.0f64;
        let hi = f64::from_bits(lo.to_bits() + 1);
        let m = midpoint(lo, hi);
        assert!(lo <= m && m < hi);
    }

    #[test]
    fn single_class_forest_rejected() {
        let d = dataset(&[vec![1.0], vec![2.0]], &[1, 1]);
        assert_eq!(
            train_forest(&d, &params(1)).unwrap_err(),
            ForestError::SingleClass(1)
        );
    }

    #[test]
    fn forest_reduces_to_single_tree() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![f64::from(i % 7), f64::from(i % 5)]).collect();
        let labels: Vec<u8> = (0..30).map(|i| u8::from(i % 3 == 0)).collect();
        let d = dataset(&rows, &labels);
        let p = params(1);
        let f = train_forest(&d, &p).unwrap();
        let set = TrainingSet::from_dataset(&d);
        let t = train_tree(&set, &all_rows(30), &p, &mut tree_stream(p.seed, 0)).unwrap();
        assert_eq!(f.trees(), &[t]);
    }

    #[test]
    fn separable_data_fits_exactly() {
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i| vec![f64::from(i), f64::from((i * 7) % 11), f64::from(i % 2)])
            .collect();
        let labels: Vec<u8> = (0..40).map(|i| u8::from((i * 7) % 11 > 5)).collect();
        let d = dataset(&rows, &labels);
        let f = train_forest(&d, &params(3)).unwrap();
        for (r, &l) in rows.iter().zip(&labels) {
            assert_eq!(f.predict_label(r, 0.5).unwrap(), l);
        }
    }

    #[test]
    fn prediction_cases() {
        let schema = FeatureSchema::from_names(&["a"]).unwrap();
        let one = Forest::from_trees(vec![Tree::leaf(0.7, 3, 1).unwrap()], params(1), schema.clone()).unwrap();
        assert_eq!(one.predict_proba(&[123.0]).unwrap(), 0.7);
        let two = Forest::from_trees(
            vec![Tree::leaf(0.2, 1, 1).unwrap(), Tree::leaf(0.8, 1, 1).unwrap()],
            params(1),
            schema.clone(),
        )
        .unwrap();
        assert_eq!(two.predict_proba(&[0.0]).unwrap(), 0.5);
        let stump = Tree::from_nodes(
            vec![
                Node::Split { feature: 0, threshold: 2.5, left: 1, right: 2, cover: 4 },
                Node::Leaf { value: 0.0, cover: 2 },
                Node::Leaf { value: 1.0, cover: 2 },
            ],
            1,
        )
        .unwrap();
        let f = Forest::from_trees(vec![stump], params(1), schema).unwrap();
        assert_eq!(f.predict_proba(&[3.0]).unwrap(), 1.0);
        assert_eq!(f.predict_proba(&[2.5]).unwrap(), 0.0);
        assert!(matches!(
            f.predict_proba(&[1.0, 2.0]),
            Err(ForestError::DimensionMismatch { expected: 1, found: 2 })
        ));
        assert!(matches!(f.predict_proba(&[f64::NAN]), Err(ForestError::NonFinite { index: 0 })));
    }

    #[test]
    fn label_threshold_rule() {
        let schema = FeatureSchema::from_names(&["a"]).unwrap();
        let at = |v: f64| Forest::from_trees(vec![Tree::leaf(v, 1, 1).unwrap()], params(1), schema.clone()).unwrap();
        assert_eq!(at(0.5).predict_label(&[0.0], 0.5).unwrap(), 1);
        assert_eq!(at(0.49).predict_label(&[0.0], 0.5).unwrap(), 0);
        assert_eq!(at(0.0).predict_label(&[0.0], 0.0).unwrap(), 1);
        assert!(at(0.0).predict_label(&[0.0], 1.5).is_err());
    }

    #[test]
    fn malformed_trees_rejected() {
        let bad_cover = Tree::from_nodes(
            vec![
                Node::Split { feature: 0, threshold: 0.0, left: 1, right: 2, cover: 5 },
                Node::Leaf { value: 0.0, cover: 2 },
                Node::Leaf { value: 1.0, cover: 2 },
            ],
            1,
        );
        assert!(bad_cover.is_err());
        let cycle = Tree::from_nodes(
            vec![Node::Split { feature: 0, threshold: 0.0, left: 0, right: 0, cover: 1 }],
            1,
        );
        assert!(cycle.is_err());
        assert!(Tree::leaf(1.5, 1, 1).is_err());
        assert!(Tree::leaf(0.5, 0, 1).is_err());
    }

    fn random_data(seed: u64, n: usize, p: usize) -> Dataset {
        let mut rng = tree_stream(seed, 1000);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..p).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let labels: Vec<u8> = rows
            .iter()
            .map(|r| u8::from(r[0] + 0.5 * r[1] + rng.random_range(-1.0..1.0) > 0.0))
            .collect();
        dataset(&rows, &labels)
    }

    #[test]
    fn json_round_trip_and_thread_independence() {
        let d = random_data(5, 120, 4);
        let mut p = ForestParams::defaults(4);
        p.n_trees = 16;
        p.seed = 77;
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let many = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| train_forest(&d, &p)).unwrap();
        let b = many.install(|| train_forest(&d, &p)).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let back = Forest::from_json(&a.to_json()).unwrap();
        assert_eq!(back, a);
        for t in a.trees() {
            for n in t.nodes() {
                if let Node::Split { left, right, cover, .. } = *n {
                    assert_eq!(cover, t.nodes()[left].cover() + t.nodes()[right].cover());
                }
            }
        }
        let sum: f64 = a.trees().iter().map(|t| t.predict(&[0.1, -0.2, 0.3, 1.0])).sum();
        let expect = sum / a.trees().len() as f64;
        assert_eq!(a.predict_proba(&[0.1, -0.2, 0.3, 1.0]).unwrap(), expect);
    }

    #[test]
    fn corrupted_model_file_rejected() {
        let d = random_data(6, 40, 2);
        let mut p = ForestParams::defaults(2);
        p.n_trees = 2;
        let json = train_forest(&d, &p).unwrap().to_json();
        assert!(Forest::from_json(&json.replace("\"split\"", "\"twig\"")).is_err());
        assert!(Forest::from_json(&json.replace("\"n_trees\": 2", "\"n_trees\": 3")).is_err());
        assert!(Forest::from_json("{").is_err());
    }

    #[test]
    fn default_mtry_is_ceil_sqrt() {
        assert_eq!(default_mtry(1), 1);
        assert_eq!(default_mtry(4), 2);
        assert_eq!(default_mtry(5), 3);
        assert_eq!(default_mtry(11), 4);
        assert_eq!(default_mtry(16), 4);
        assert_eq!(default_mtry(17), 5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn monotone_relabel_invariance(seed in any::<u64>(), n in 4usize..30) {
            let d = random_data(seed, n, 3);
            let g = |v: f64| v.exp() * 3.0 + 1.0;
            let transformed: Vec<Vec<f64>> = d.samples().iter()
                .map(|s| vec![g(s.values[0]), s.values[1], g(s.values[2])])
                .collect();
            let d2 = dataset(&transformed, &d.labels());
            let mut p = ForestParams::defaults(3);
            p.n_trees = 5;
            p.min_samples_leaf = 2;
            // out-of-bag rows may sit between midpoints; keep every query row in-sample
            p.bootstrap = false;
            if d.positives() == 0 || d.positives() == n {
                return Ok(());
            }
            let f1 = train_forest(&d, &p).unwrap();
            let f2 = train_forest(&d2, &p).unwrap();
            for (s, t) in d.samples().iter().zip(&transformed) {
                prop_assert_eq!(f1.predict_proba(&s.values).unwrap(), f2.predict_proba(t).unwrap());
            }
        }

        #[test]
        fn distinct_rows_fit_perfectly(seed in any::<u64>(), n in 2usize..40) {
            let d = random_data(seed, n, 3);
            if d.positives() == 0 || d.positives() == n {
                return Ok(());
            }
            let p = ForestParams { n_trees: 1, max_depth: usize::MAX, min_samples_leaf: 1, mtry: 3, bootstrap: false, seed };
            let f = train_forest(&d, &p).unwrap();
            for s in d.samples() {
                prop_assert_eq!(f.predict_label(&s.values, 0.5).unwrap(), s.label);
            }
        }
    }
}
