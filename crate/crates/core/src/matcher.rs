//! Random-forest classifier over concatenated 2D and 3D descriptors, and the
//! exhaustive query-time matching built on it.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::descfile::{DescSet2D, DescSet3D};
use crate::error::{Error, Result};
use crate::mining::TrainingSet;
use crate::par;

/// A split sends `x[feature] <= threshold` left. Leaves carry the fraction of
/// positive training samples that reached them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Node {
    Split {
        feature: u32,
        threshold: f32,
        left: u32,
        right: u32,
    },
    Leaf {
        positive_fraction: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    /// Root first.
    pub nodes: Vec<Node>,
}

impl DecisionTree {
    /// `get(f)` returns feature `f`.
    #[inline]
    fn predict_with(&self, get: impl Fn(usize) -> f32) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { positive_fraction } => return positive_fraction,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if get(feature as usize) <= threshold { left } else { right } as usize;
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left as usize).max(walk(nodes, right as usize)),
            }
        }
        walk(&self.nodes, 0)
    }

    fn validate(&self, dim: usize) -> Result<()> {
        let n = self.nodes.len();
        if n == 0 {
            return Err(Error::InvalidParameter("empty decision tree".into()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            match *node {
                Node::Leaf { positive_fraction } if !(0.0..=1.0).contains(&positive_fraction) => {
                    return Err(Error::InvalidParameter(format!("leaf {i} fraction {positive_fraction} outside [0, 1]")))
                }
                Node::Split { feature, left, right, .. }
                    if feature as usize >= dim || left as usize <= i || right as usize <= i || left as usize >= n || right as usize >= n =>
                {
                    return Err(Error::InvalidParameter(format!("malformed split node {i}")))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// `None` uses `ceil(sqrt(dim))`.
    pub features_per_split: Option<usize>,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            max_depth: 20,
            min_leaf: 5,
            features_per_split: None,
        }
    }
}

impl ForestParams {
    fn mtry(&self, dim: usize) -> usize {
        self.features_per_split
            .unwrap_or_else(|| (dim as f64).sqrt().ceil() as usize)
            .clamp(1, dim.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    pub params: ForestParams,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatcherMeta {
    pub feature_dim: usize,
    pub seed: u64,
    pub params: ForestParams,
    pub training_samples: usize,
    #[serde(default)]
    pub validation_accuracy: Option<f64>,
    #[serde(default)]
    pub grid: Vec<GridScore>,
}

/// Trained classifier mapping a 2D-then-3D feature vector to a match
/// probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorMatcher {
    pub meta: MatcherMeta,
    pub trees: Vec<DecisionTree>,
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

/// Midpoint of two consecutive distinct values, kept strictly below `hi`.
fn split_threshold(lo: f32, hi: f32) -> f32 {
    let mid = ((lo as f64 + hi as f64) * 0.5) as f32;
    if mid >= hi {
        lo
    } else {
        mid
    }
}

struct Builder<'a> {
    data: &'a TrainingSet,
    params: ForestParams,
    mtry: usize,
    nodes: Vec<Node>,
    column: Vec<(f32, bool)>,
}

struct BestSplit {
    decrease: f64,
    feature: usize,
    threshold: f32,
}

impl Builder<'_> {
    fn leaf(&mut self, samples: &[usize]) -> Node {
        let pos = samples.iter().filter(|&&i| self.data.labels[i]).count();
        Node::Leaf {
            positive_fraction: pos as f64 / samples.len().max(1) as f64,
        }
    }

    fn best_split(&mut self, samples: &[usize], rng: &mut impl Rng) -> Option<BestSplit> {
        let n = samples.len();
        let total_pos = samples.iter().filter(|&&i| self.data.labels[i]).count();
        let parent = gini(total_pos, n);
        let min_leaf = self.params.min_leaf.max(1);
        let mut best: Option<BestSplit> = None;
        for feature in index::sample(rng, self.data.dim, self.mtry) {
            self.column.clear();
            self.column
                .extend(samples.iter().map(|&i| (self.data.row(i)[feature], self.data.labels[i])));
            self.column.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut left_pos = 0;
            for k in 0..n - 1 {
                left_pos += self.column[k].1 as usize;
                let left_n = k + 1;
                let (lo, hi) = (self.column[k].0, self.column[k + 1].0);
                if left_n < min_leaf || n - left_n < min_leaf || lo == hi {
                    continue;
                }
                let child = (left_n as f64 * gini(left_pos, left_n)
                    + (n - left_n) as f64 * gini(total_pos - left_pos, n - left_n))
                    / n as f64;
                let decrease = parent - child;
                if best.as_ref().is_none_or(|b| decrease > b.decrease) {
                    best = Some(BestSplit {
                        decrease,
                        feature,
                        threshold: split_threshold(lo, hi),
                    });
                }
            }
        }
        best
    }

    /// Grows the subtree for `samples` at `slot`.
    fn grow(&mut self, samples: Vec<usize>, rng: &mut impl Rng) {
        let mut stack = vec![(samples, 0usize, 0usize)];
        self.nodes.push(Node::Leaf { positive_fraction: 0.0 });
        while let Some((samples, slot, depth)) = stack.pop() {
            let pos = samples.iter().filter(|&&i| self.data.labels[i]).count();
            let pure = pos == 0 || pos == samples.len();
            let split = if pure || depth >= self.params.max_depth || samples.len() < 2 * self.params.min_leaf.max(1) {
                None
            } else {
                self.best_split(&samples, rng)
            };
            match split {
                None => self.nodes[slot] = self.leaf(&samples),
                Some(s) => {
                    let (l, r): (Vec<usize>, Vec<usize>) =
                        samples.iter().partition(|&&i| self.data.row(i)[s.feature] <= s.threshold);
                    let left = self.nodes.len();
                    self.nodes.push(Node::Leaf { positive_fraction: 0.0 });
                    self.nodes.push(Node::Leaf { positive_fraction: 0.0 });
                    self.nodes[slot] = Node::Split {
                        feature: s.feature as u32,
                        threshold: s.threshold,
                        left: left as u32,
                        right: left as u32 + 1,
                    };
                    stack.push((r, left + 1, depth + 1));
                    stack.push((l, left, depth + 1));
                }
            }
        }
    }
}

fn train_tree(data: &TrainingSet, params: &ForestParams, seed: u64, t: usize) -> DecisionTree {
    let mut rng = par::rng_stream(seed, t as u64);
    let n = data.len();
    let samples: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    let mut b = Builder {
        data,
        params: *params,
        mtry: params.mtry(data.dim),
        nodes: Vec::new(),
        column: Vec::with_capacity(n),
    };
    b.grow(samples, &mut rng);
    DecisionTree { nodes: b.nodes }
}

/// Bootstrap-aggregated Gini trees, one independent random stream per tree.
pub fn train_forest(data: &TrainingSet, params: &ForestParams, seed: u64) -> Result<DescriptorMatcher> {
    if params.n_trees == 0 || params.max_depth == 0 {
        return Err(Error::InvalidParameter("forest needs n_trees > 0 and max_depth > 0".into()));
    }
    if data.dim == 0 || data.features.len() != data.len() * data.dim {
        return Err(Error::DimensionMismatch {
            expected: data.len() * data.dim,
            got: data.features.len(),
        });
    }
    let pos = data.positives();
    let min = params.min_leaf.max(1);
    if pos < min || data.len() - pos < min {
        return Err(Error::Precondition(format!(
            "training needs at least {min} samples of each class ({pos} positive, {} negative)",
            data.len() - pos
        )));
    }
    let trees = par::map_range(params.n_trees, |t| train_tree(data, params, seed, t));
    Ok(DescriptorMatcher {
        meta: MatcherMeta {
            feature_dim: data.dim,
            seed,
            params: *params,
            training_samples: data.len(),
            validation_accuracy: None,
            grid: Vec::new(),
        },
        trees,
    })
}

impl DescriptorMatcher {
    pub fn feature_dim(&self) -> usize {
        self.meta.feature_dim
    }

    pub fn predict(&self, feature: &[f32]) -> Result<f64> {
        if feature.len() != self.feature_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim(),
                got: feature.len(),
            });
        }
        Ok(self.predict_split(feature, &[]))
    }

    /// Probability for the concatenation `a ++ b` without building it.
    #[inline]
    pub(crate) fn predict_split(&self, a: &[f32], b: &[f32]) -> f64 {
        let na = a.len();
        let get = |f: usize| if f < na { a[f] } else { b[f - na] };
        let sum: f64 = self.trees.iter().map(|t| t.predict_with(get)).sum();
        sum / self.trees.len() as f64
    }

    pub fn accuracy(&self, data: &TrainingSet) -> Result<f64> {
        if data.dim != self.feature_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim(),
                got: data.dim,
            });
        }
        if data.is_empty() {
            return Ok(0.0);
        }
        let correct = par::map_range(data.len(), |i| (self.predict_split(data.row(i), &[]) >= 0.5) == data.labels[i])
            .into_iter()
            .filter(|&c| c)
            .count();
        Ok(correct as f64 / data.len() as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trees.is_empty() {
            return Err(Error::InvalidParameter("matcher has no trees".into()));
        }
        self.trees.iter().try_for_each(|t| t.validate(self.feature_dim()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: DescriptorMatcher = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub chosen: ForestParams,
    pub accuracy: f64,
    pub grid: Vec<GridScore>,
}

pub const HOLDOUT_FRACTION: f64 = 0.15;

/// Scores every grid point on a held-out split, picks the best (ties go to
/// fewer trees, then shallower, then earlier in the grid) and retrains it on
/// all of `data`.
pub fn validate_split(
    data: &TrainingSet,
    fraction: f64,
    grid: &[ForestParams],
    seed: u64,
) -> Result<(DescriptorMatcher, ValidationReport)> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("empty hyperparameter grid".into()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidParameter(format!("holdout fraction {fraction} outside (0, 1)")));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut par::rng_stream(seed, u64::MAX));
    let held = ((fraction * data.len() as f64).ceil() as usize).min(data.len());
    let (test_idx, train_idx) = order.split_at(held);
    let test = data.subset(test_idx);
    let train = data.subset(train_idx);
    for (name, part) in [("held-out", &test), ("training", &train)] {
        let pos = part.positives();
        if pos == 0 || pos == part.len() {
            return Err(Error::Precondition(format!("{name} split lacks one of the classes")));
        }
    }
    let mut scores = Vec::with_capacity(grid.len());
    for params in grid {
        let model = train_forest(&train, params, seed)?;
        let accuracy = model.accuracy(&test)?;
        log::info!("grid {params:?}: held-out accuracy {accuracy:.4}");
        scores.push(GridScore { params: *params, accuracy });
    }
    let best = scores
        .iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| {
            b.accuracy
                .total_cmp(&a.accuracy)
                .then(a.params.n_trees.cmp(&b.params.n_trees))
                .then(a.params.max_depth.cmp(&b.params.max_depth))
                .then(i.cmp(j))
        })
        .map(|(_, s)| s.clone())
        .expect("grid is non-empty");
    let mut model = train_forest(data, &best.params, seed)?;
    model.meta.validation_accuracy = Some(best.accuracy);
    model.meta.grid = scores.clone();
    Ok((
        model,
        ValidationReport {
            chosen: best.params,
            accuracy: best.accuracy,
            grid: scores,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchCandidate {
    pub keypoint2d: usize,
    pub keypoint3d: usize,
    pub probability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchOptions {
    pub tau: f64,
    pub top_k: usize,
    /// Keeps only the most probable candidates overall when set.
    pub max_candidates: Option<usize>,
}

impl Default for MatchOptions {
    fn default() -> Self {
        MatchOptions {
            tau: 0.5,
            top_k: 3,
            max_candidates: None,
        }
    }
}

fn by_probability(a: &MatchCandidate, b: &MatchCandidate) -> std::cmp::Ordering {
    b.probability
        .total_cmp(&a.probability)
        .then(a.keypoint2d.cmp(&b.keypoint2d))
        .then(a.keypoint3d.cmp(&b.keypoint3d))
}

/// Scores every 2D/3D pair, keeps the `top_k` 3D candidates at or above
/// `tau` per 2D keypoint and returns them by descending probability.
/// `progress(done, total)` is called once per 2D keypoint.
pub fn match_descriptors(
    matcher: &DescriptorMatcher,
    desc2d: &DescSet2D,
    desc3d: &DescSet3D,
    options: &MatchOptions,
    progress: Option<&(dyn Fn(usize, usize) + Sync)>,
) -> Result<Vec<MatchCandidate>> {
    if desc2d.dim + desc3d.dim != matcher.feature_dim() {
        return Err(Error::DimensionMismatch {
            expected: matcher.feature_dim(),
            got: desc2d.dim + desc3d.dim,
        });
    }
    let done = AtomicUsize::new(0);
    let total = desc2d.len();
    let rows = par::map_range(total, |i| {
        let a = desc2d.row(i);
        let mut row: Vec<MatchCandidate> = (0..desc3d.len())
            .filter_map(|j| {
                let p = matcher.predict_split(a, desc3d.row(j));
                (p >= options.tau).then_some(MatchCandidate {
                    keypoint2d: i,
                    keypoint3d: j,
                    probability: p,
                })
            })
            .collect();
        row.sort_by(by_probability);
        row.truncate(options.top_k);
        if let Some(cb) = progress {
            cb(done.fetch_add(1, Ordering::Relaxed) + 1, total);
        }
        row
    });
    let mut out: Vec<MatchCandidate> = rows.into_iter().flatten().collect();
    out.sort_by(by_probability);
    if let Some(cap) = options.max_candidates {
        if out.len() > cap {
            log::warn!("candidate cap {cap} hit, dropping {} matches", out.len() - cap);
            out.truncate(cap);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mining::Provenance;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dataset(n: usize, dim: usize, seed: u64, label: impl Fn(&[f32]) -> bool) -> TrainingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = TrainingSet { dim, ..Default::default() };
        for _ in 0..n {
            let x: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let l = label(&x);
            set.push(&x, l, Provenance { image: 0, key2d: 0, key3d: 0 }).unwrap();
        }
        set
    }

    /// Independent traversal: follow child links recursively.
    fn oracle(tree: &DecisionTree, x: &[f32], i: usize) -> f64 {
        match &tree.nodes[i] {
            Node::Leaf { positive_fraction } => *positive_fraction,
            Node::Split { feature, threshold, left, right } => {
                if !(x[*feature as usize] > *threshold) {
                    oracle(tree, x, *left as usize)
                } else {
                    oracle(tree, x, *right as usize)
                }
            }
        }
    }

    #[test]
    fn single_feature_separable() {
        let data = dataset(300, 4, 1, |x| x[0] >= 0.0);
        let params = ForestParams { n_trees: 10, ..Default::default() };
        let m = train_forest(&data, &params, 3).unwrap();
        assert_eq!(m.accuracy(&data).unwrap(), 1.0);
        m.validate().unwrap();
    }

    #[test]
    fn xor_needs_depth_two() {
        let data = dataset(400, 2, 2, |x| (x[0] > 0.0) != (x[1] > 0.0));
        let params = ForestParams { n_trees: 25, max_depth: 8, min_leaf: 1, features_per_split: Some(2) };
        let m = train_forest(&data, &params, 1).unwrap();
        assert!(m.accuracy(&data).unwrap() >= 0.95);
        assert!(m.trees.iter().all(|t| t.depth() >= 2));
    }

    #[test]
    fn single_class_is_rejected() {
        let data = dataset(50, 3, 2, |_| true);
        assert!(train_forest(&data, &ForestParams::default(), 0).is_err());
    }

    #[test]
    fn same_seed_same_bytes() {
        let data = dataset(200, 5, 7, |x| x[1] + x[2] > 0.1);
        let p = ForestParams { n_trees: 7, ..Default::default() };
        let a = train_forest(&data, &p, 11).unwrap().to_json().unwrap();
        let b = train_forest(&data, &p, 11).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        let c = train_forest(&data, &p, 12).unwrap().to_json().unwrap();
        assert_ne!(a, c);
    }

    fn stump(fraction_left: f64, fraction_right: f64) -> DecisionTree {
        DecisionTree {
            nodes: vec![
                Node::Split { feature: 0, threshold: 0.0, left: 1, right: 2 },
                Node::Leaf { positive_fraction: fraction_left },
                Node::Leaf { positive_fraction: fraction_right },
            ],
        }
    }

    fn forest(trees: Vec<DecisionTree>) -> DescriptorMatcher {
        DescriptorMatcher {
            meta: MatcherMeta {
                feature_dim: 2,
                seed: 0,
                params: ForestParams::default(),
                training_samples: 0,
                validation_accuracy: None,
                grid: Vec::new(),
            },
            trees,
        }
    }

    #[test]
    fn predict_is_mean_of_leaves() {
        let m = forest(vec![stump(1.0, 0.0)]);
        assert_eq!(m.predict(&[-1.0, 0.0]).unwrap(), 1.0);
        let m = forest(vec![stump(1.0, 0.0), stump(0.0, 1.0)]);
        assert_eq!(m.predict(&[-1.0, 0.0]).unwrap(), 0.5);
        assert!(m.predict(&[1.0]).is_err());
    }

    #[test]
    fn traversal_matches_oracle_and_json_round_trips() {
        let data = dataset(500, 6, 4, |x| x[0] * x[1] > 0.0 || x[5] > 0.7);
        let m = train_forest(&data, &ForestParams { n_trees: 5, ..Default::default() }, 9).unwrap();
        let back = DescriptorMatcher::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let probe = dataset(10_000, 6, 5, |_| false);
        for i in 0..probe.len() {
            let x = probe.row(i);
            let want = m.trees.iter().map(|t| oracle(t, x, 0)).sum::<f64>() / m.trees.len() as f64;
            let got = m.predict(x).unwrap();
            assert_eq!(got.to_bits(), want.to_bits());
            assert_eq!(back.predict(x).unwrap().to_bits(), got.to_bits());
        }
    }

    #[test]
    fn removing_a_tree_has_bounded_influence() {
        let data = dataset(300, 3, 6, |x| x[2] > 0.0);
        let m = train_forest(&data, &ForestParams { n_trees: 10, ..Default::default() }, 1).unwrap();
        let mut fewer = m.clone();
        fewer.trees.pop();
        for i in 0..data.len() {
            let x = data.row(i);
            let (a, b) = (m.predict(x).unwrap(), fewer.predict(x).unwrap());
            assert!((a - b).abs() <= 1.0 / 10.0 + 1e-12);
        }
    }

    #[test]
    fn threshold_stays_between_values() {
        let lo = 1.0f32;
        let hi = f32::from_bits(lo.to_bits() + 1);
        assert_eq!(split_threshold(lo, hi), lo);
        assert_eq!(split_threshold(0.0, 1.0), 0.5);
    }

    #[test]
    fn validation_selects_and_retrains() {
        let raw = dataset(800, 4, 8, |x| x[3] > -0.2);
        let keep: Vec<usize> = (0..raw.len()).filter(|&i| (raw.row(i)[3] + 0.2).abs() >= 0.1).take(600).collect();
        let data = raw.subset(&keep);
        let one = [ForestParams { n_trees: 5, ..Default::default() }];
        let (m, r) = validate_split(&data, HOLDOUT_FRACTION, &one, 1).unwrap();
        assert_eq!(r.chosen, one[0]);
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(m.meta.training_samples, 600);
        let grid = [
            ForestParams { n_trees: 9, max_depth: 6, ..Default::default() },
            ForestParams { n_trees: 3, max_depth: 6, ..Default::default() },
            ForestParams { n_trees: 3, max_depth: 4, ..Default::default() },
        ];
        let (_, r) = validate_split(&data, HOLDOUT_FRACTION, &grid, 1).unwrap();
        assert_eq!(r.chosen, grid[2]);
        let (_, again) = validate_split(&data, HOLDOUT_FRACTION, &grid, 1).unwrap();
        assert_eq!(r, again);
    }

    /// Fires only when the 2D part equals the 3D part exactly: one-hot codes
    /// over 4 slots, so the concatenation is positive iff both hot slots agree.
    fn planted() -> (DescriptorMatcher, DescSet2D, DescSet3D) {
        let mut trees = Vec::new();
        for slot in 0..4u32 {
            trees.push(DecisionTree {
                nodes: vec![
                    Node::Split { feature: slot, threshold: 0.5, left: 1, right: 2 },
                    Node::Leaf { positive_fraction: 0.0 },
                    Node::Split { feature: 4 + slot, threshold: 0.5, left: 3, right: 4 },
                    Node::Leaf { positive_fraction: 0.0 },
                    Node::Leaf { positive_fraction: 1.0 },
                ],
            });
        }
        let mut m = forest(trees);
        m.meta.feature_dim = 8;
        let onehot = |k: usize| (0..4).map(|s| (s == k) as u8 as f32).collect::<Vec<f32>>();
        let d2 = DescSet2D {
            dim: 4,
            keypoints: vec![crate::features2d::Keypoint2D { u: 0.0, v: 0.0, scale: 1.0, orientation: 0.0 }; 2],
            values: [onehot(1), onehot(3)].concat(),
        };
        let d3 = DescSet3D {
            dim: 4,
            positions: vec![crate::geometry::Vec3::zeros(); 3],
            values: [onehot(0), onehot(3), onehot(1)].concat(),
        };
        (m, d2, d3)
    }

    #[test]
    fn planted_pairs_are_found() {
        let (m, d2, d3) = planted();
        let opts = MatchOptions { tau: 0.2, ..Default::default() };
        let got = match_descriptors(&m, &d2, &d3, &opts, None).unwrap();
        let pairs: Vec<(usize, usize)> = got.iter().map(|c| (c.keypoint2d, c.keypoint3d)).collect();
        assert_eq!(pairs, vec![(0, 2), (1, 1)]);
        let none = match_descriptors(&m, &d2, &d3, &MatchOptions { tau: 1.0 + 1e-9, ..Default::default() }, None).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn top_k_and_cap_and_progress() {
        let data = dataset(400, 6, 3, |x| x[0] + x[4] > 0.0);
        let m = train_forest(&data, &ForestParams { n_trees: 8, ..Default::default() }, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d2 = DescSet2D {
            dim: 3,
            keypoints: vec![crate::features2d::Keypoint2D { u: 0.0, v: 0.0, scale: 1.0, orientation: 0.0 }; 20],
            values: (0..60).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let d3 = DescSet3D {
            dim: 3,
            positions: vec![crate::geometry::Vec3::zeros(); 30],
            values: (0..90).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let calls = AtomicUsize::new(0);
        let cb = |_: usize, total: usize| {
            assert_eq!(total, 20);
            calls.fetch_add(1, Ordering::Relaxed);
        };
        let one = match_descriptors(&m, &d2, &d3, &MatchOptions { top_k: 1, tau: 0.0, ..Default::default() }, Some(&cb)).unwrap();
        assert_eq!(calls.load(Ordering::Relaxed), 20);
        assert_eq!(one.len(), 20);
        let all = match_descriptors(&m, &d2, &d3, &MatchOptions::default(), None).unwrap();
        assert!(all.windows(2).all(|w| w[0].probability >= w[1].probability));
        let capped = match_descriptors(&m, &d2, &d3, &MatchOptions { max_candidates: Some(1000), ..Default::default() }, None).unwrap();
        assert_eq!(capped, all);
        let five = match_descriptors(&m, &d2, &d3, &MatchOptions { max_candidates: Some(5), ..Default::default() }, None).unwrap();
        assert_eq!(five[..], all[..5.min(all.len())]);
    }
}
