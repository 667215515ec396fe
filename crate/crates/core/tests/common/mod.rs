#![allow(dead_code)]

use firerisk::data::{Dataset, FeatureSchema, Sample, Stratum};
use firerisk::forest::{Node, Tree};
use firerisk::geodata::Landscape;
use rand::Rng;

/// Random tree with consistent covers: each split hands a random share of
/// its cover to the left child.
pub fn random_tree<R: Rng>(rng: &mut R, p: usize, max_depth: usize) -> Tree {
    fn grow<R: Rng>(rng: &mut R, nodes: &mut Vec<Node>, p: usize, depth: usize, cover: usize) -> usize {
        let id = nodes.len();
        if depth == 0 || cover < 2 || rng.random_bool(0.2) {
            nodes.push(Node::Leaf { value: rng.random_range(0.0..=1.0), cover });
            return id;
        }
        nodes.push(Node::Leaf { value: 0.0, cover });
        let left_cover = rng.random_range(1..cover);
        let left = grow(rng, nodes, p, depth - 1, left_cover);
        let right = grow(rng, nodes, p, depth - 1, cover - left_cover);
        nodes[id] = Node::Split {
            feature: rng.random_range(0..p),
            threshold: rng.random_range(-1.0..1.0),
            left,
            right,
            cover,
        };
        id
    }
    let mut nodes = Vec::new();
    let cover = rng.random_range(2..500);
    grow(rng, &mut nodes, p, max_depth, cover);
    Tree::from_nodes(nodes, p).expect("generated tree is valid")
}

pub fn random_input<R: Rng>(rng: &mut R, p: usize) -> Vec<f64> {
    (0..p).map(|_| rng.random_range(-1.2..1.2)).collect()
}

/// P(score_pos > score_neg) + ½ P(tie) over all pairs.
pub fn pairwise_auc(labels: &[u8], scores: &[f64]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Average precision by counting predicted positives at every distinct
/// threshold, highest first.
pub fn stepwise_ap(labels: &[u8], scores: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let positives = labels.iter().filter(|&&l| l == 1).count() as f64;
    let (mut ap, mut prev) = (0.0, 0.0);
    for t in thresholds {
        let tp = labels.iter().zip(scores).filter(|(&l, &s)| l == 1 && s >= t).count() as f64;
        let fp = labels.iter().zip(scores).filter(|(&l, &s)| l == 0 && s >= t).count() as f64;
        let recall = tp / positives;
        ap += (recall - prev) * tp / (tp + fp);
        prev = recall;
    }
    ap
}

/// Truth probability at each sample's cell.
pub fn truth_scores(l: &Landscape, d: &Dataset) -> Vec<f64> {
    d.samples()
        .iter()
        .map(|s| {
            let (r, c) = l.truth.cell_at(s.lon, s.lat).expect("sample inside grid");
            l.truth.get(r, c)
        })
        .collect()
}

pub fn sample(id: &str, region: &str, year: i32, label: u8, values: Vec<f64>) -> Sample {
    Sample {
        id: id.into(),
        lon: 0.0,
        lat: 0.0,
        region_id: region.into(),
        district_id: region.into(),
        stratum: Stratum::Forest,
        year,
        label,
        values,
    }
}

pub fn dataset(names: &[&str], samples: Vec<Sample>) -> Dataset {
    Dataset::new(FeatureSchema::from_names(names).unwrap(), samples).unwrap()
}
