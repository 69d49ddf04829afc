//! LambdaMART: boosted regression trees fitted to NDCG-weighted pairwise
//! lambda gradients, with Newton leaf values.
//!
//! Trees are grown best-first on pre-binned features (at most 256 bins per
//! feature, thresholds at midpoints between observed values); a row goes
//! left when `x <= threshold`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use log::debug;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::binio::{self, BinError, BinReader, BinWriter};
use crate::corpus::TrackId;
use crate::features::{RankingExample, NUM_FEATURES};
use crate::scalar::{desc_then_key, Scalar};

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum LtrError {
    #[error("no query group has both a relevant and a non-relevant example")]
    NoValidGroup,
    #[error("non-finite value in feature {feature} of example (pid {pid}, track {track})")]
    NonFiniteFeature { pid: u64, track: u32, feature: usize },
    #[error("expected {expected} features, got {found}")]
    Dimension { expected: usize, found: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("model json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Bin(#[from] BinError),
}

impl From<std::io::Error> for LtrError {
    fn from(e: std::io::Error) -> Self {
        LtrError::Bin(BinError::Stream(e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetMetric {
    #[serde(rename = "ndcg@10")]
    Ndcg10,
    #[serde(rename = "ndcg@500")]
    Ndcg500,
}

impl TargetMetric {
    pub fn cutoff(self) -> usize {
        match self {
            TargetMetric::Ndcg10 => 10,
            TargetMetric::Ndcg500 => 500,
        }
    }
}

impl fmt::Display for TargetMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ndcg@{}", self.cutoff())
    }
}

impl FromStr for TargetMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ndcg@10" | "ndcg10" => Ok(TargetMetric::Ndcg10),
            "ndcg@500" | "ndcg500" => Ok(TargetMetric::Ndcg500),
            _ => Err(format!("unknown target metric `{s}` (ndcg@10 or ndcg@500)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LtrConfig {
    pub trees: usize,
    pub leaves: usize,
    pub shrinkage: f64,
    pub metric: TargetMetric,
    pub min_leaf: usize,
    pub max_bins: usize,
    /// Training draws no random numbers; kept so configs carry one seed
    /// for every stage.
    pub rng_seed: u64,
}

impl Default for LtrConfig {
    fn default() -> Self {
        LtrConfig {
            trees: 100,
            leaves: 50,
            shrinkage: 0.1,
            metric: TargetMetric::Ndcg10,
            min_leaf: 1,
            max_bins: 256,
            rng_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TreeNode<T> {
    Split {
        feature: u32,
        threshold: T,
        left: u32,
        right: u32,
    },
    Leaf {
        value: T,
    },
}

/// Binary tree stored as a node array; node 0 is the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree<T> {
    pub nodes: Vec<TreeNode<T>>,
}

impl<T: Scalar> RegressionTree<T> {
    pub fn leaf(value: T) -> Self {
        RegressionTree {
            nodes: vec![TreeNode::Leaf { value }],
        }
    }

    pub fn eval(&self, x: &[T]) -> T {
        let mut i = 0usize;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature as usize] <= *threshold { *left } else { *right } as usize,
            }
        }
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf { .. })).count()
    }

    /// Every node is reachable exactly once, children are in range and
    /// leaf values are finite.
    fn validate(&self, feature_count: usize) -> Result<(), String> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            if i >= self.nodes.len() || seen[i] {
                return Err(format!("node {i} out of range or reached twice"));
            }
            seen[i] = true;
            match &self.nodes[i] {
                TreeNode::Leaf { value } if !value.is_finite() => return Err(format!("leaf {i} is not finite")),
                TreeNode::Leaf { .. } => {}
                TreeNode::Split {
                    feature, left, right, ..
                } => {
                    if *feature as usize >= feature_count {
                        return Err(format!("split feature {feature} >= {feature_count}"));
                    }
                    stack.push(*left as usize);
                    stack.push(*right as usize);
                }
            }
        }
        if seen.iter().all(|&s| s) {
            Ok(())
        } else {
            Err("unreachable nodes".into())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LtrModel<T> {
    pub version: u32,
    pub feature_count: usize,
    pub shrinkage: T,
    pub target_metric: TargetMetric,
    pub trees: Vec<RegressionTree<T>>,
}

impl<T: Scalar> LtrModel<T> {
    pub fn empty(shrinkage: T, target_metric: TargetMetric) -> Self {
        LtrModel {
            version: MODEL_VERSION,
            feature_count: NUM_FEATURES,
            shrinkage,
            target_metric,
            trees: Vec::new(),
        }
    }

    fn check_dim(&self, x: &[T]) -> Result<(), LtrError> {
        if x.len() != self.feature_count {
            return Err(LtrError::Dimension {
                expected: self.feature_count,
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Sum over trees of shrinkage times the reached leaf value.
    pub fn score(&self, x: &[T]) -> Result<T, LtrError> {
        self.check_dim(x)?;
        Ok(self.trees.iter().map(|t| self.shrinkage * t.eval(x)).sum())
    }

    /// Tracks of one group by descending score, ties by track id.
    pub fn rank_group(&self, examples: &[RankingExample<T>]) -> Result<Vec<TrackId>, LtrError> {
        let mut scored = examples
            .iter()
            .map(|e| Ok((e.track, self.score(&e.features.0)?)))
            .collect::<Result<Vec<_>, LtrError>>()?;
        scored.sort_by(|a, b| desc_then_key((&a.1, &a.0), (&b.1, &b.0)));
        Ok(scored.into_iter().map(|(t, _)| t).collect())
    }

    pub fn validate(&self) -> Result<(), LtrError> {
        if self.version != MODEL_VERSION {
            return Err(LtrError::VersionMismatch {
                expected: MODEL_VERSION,
                found: self.version,
            });
        }
        if !self.shrinkage.is_finite() {
            return Err(LtrError::Invalid("shrinkage is not finite".into()));
        }
        for (i, t) in self.trees.iter().enumerate() {
            t.validate(self.feature_count).map_err(|e| LtrError::Invalid(format!("tree {i}: {e}")))?;
        }
        Ok(())
    }

    /// Binary layout: header, feature count u32, metric u8, shrinkage f64,
    /// tree count u64; per tree a node count u64 and per node either
    /// `0, value f64` (leaf) or `1, feature u32, threshold f64, left u32,
    /// right u32` (split).
    pub fn write_to<W: Write>(&self, w: &mut BinWriter<W>) -> std::io::Result<()> {
        w.header(LTR_MAGIC, MODEL_VERSION)?;
        w.u32(self.feature_count as u32)?;
        w.u8(self.target_metric as u8)?;
        w.f64(self.shrinkage.as_f64())?;
        w.len(self.trees.len())?;
        for t in &self.trees {
            w.len(t.nodes.len())?;
            for n in &t.nodes {
                match n {
                    TreeNode::Leaf { value } => {
                        w.u8(0)?;
                        w.f64(value.as_f64())?;
                    }
                    TreeNode::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        w.u8(1)?;
                        w.u32(*feature)?;
                        w.f64(threshold.as_f64())?;
                        w.u32(*left)?;
                        w.u32(*right)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut BinReader<R>) -> Result<Self, LtrError> {
        r.header(LTR_MAGIC, MODEL_VERSION, "ranking model")?;
        let feature_count = r.u32()? as usize;
        let target_metric = match r.u8()? {
            0 => TargetMetric::Ndcg10,
            1 => TargetMetric::Ndcg500,
            k => return Err(LtrError::Invalid(format!("unknown metric code {k}"))),
        };
        let shrinkage = T::of(r.f64()?);
        let n_trees = r.len(1 << 24)?;
        let mut trees = Vec::with_capacity(n_trees);
        for _ in 0..n_trees {
            let n = r.len(1 << 24)?;
            let mut nodes = Vec::with_capacity(n);
            for _ in 0..n {
                nodes.push(match r.u8()? {
                    0 => TreeNode::Leaf { value: T::of(r.f64()?) },
                    1 => TreeNode::Split {
                        feature: r.u32()?,
                        threshold: T::of(r.f64()?),
                        left: r.u32()?,
                        right: r.u32()?,
                    },
                    k => return Err(LtrError::Invalid(format!("unknown node kind {k}"))),
                });
            }
            trees.push(RegressionTree { nodes });
        }
        let m = LtrModel {
            version: MODEL_VERSION,
            feature_count,
            shrinkage,
            target_metric,
            trees,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn save_bin(&self, path: &Path) -> Result<(), LtrError> {
        let mut w = binio::create(path)?;
        self.write_to(&mut w).map_err(|source| LtrError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(binio::finish_file(w)?)
    }

    pub fn load_bin(path: &Path) -> Result<Self, LtrError> {
        let mut r = binio::open(path)?;
        let m = Self::read_from(&mut r)?;
        r.finish()?;
        Ok(m)
    }
}

impl<T: Scalar + Serialize + DeserializeOwned> LtrModel<T> {
    pub fn to_json(&self) -> Result<String, LtrError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, LtrError> {
        // read the version first so a newer layout reports a mismatch, not a
        // parse error
        #[derive(Deserialize)]
        struct Probe {
            version: u32,
        }
        let probe: Probe = serde_json::from_str(text)?;
        if probe.version != MODEL_VERSION {
            return Err(LtrError::VersionMismatch {
                expected: MODEL_VERSION,
                found: probe.version,
            });
        }
        let m: LtrModel<T> = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save_json(&self, path: &Path) -> Result<(), LtrError> {
        std::fs::write(path, self.to_json()?).map_err(|source| LtrError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load_json(path: &Path) -> Result<Self, LtrError> {
        let text = std::fs::read_to_string(path).map_err(|source| LtrError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

const LTR_MAGIC: &[u8; 8] = b"PLIRLTRM";

/// Gain of a label: 2^label - 1.
fn gain<T: Scalar>(label: u8) -> T {
    T::of(((1u64 << label.min(62)) - 1) as f64)
}

/// Discount of 0-based position `pos` under cutoff `k`.
pub fn discount<T: Scalar>(pos: usize, k: usize) -> T {
    if pos < k {
        T::one() / T::of_usize(pos + 2).log2()
    } else {
        T::zero()
    }
}

fn ideal_dcg<T: Scalar>(labels: &[u8], k: usize) -> T {
    let mut sorted = labels.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    sorted.iter().enumerate().map(|(i, &l)| gain::<T>(l) * discount(i, k)).sum()
}

/// NDCG@k of labels listed in ranked order; 0 when nothing is relevant.
pub fn ndcg_at<T: Scalar>(labels_ranked: &[u8], k: usize) -> T {
    let idcg: T = ideal_dcg(labels_ranked, k);
    if idcg == T::zero() {
        return T::zero();
    }
    let dcg: T = labels_ranked
        .iter()
        .enumerate()
        .map(|(i, &l)| gain::<T>(l) * discount(i, k))
        .sum();
    dcg / idcg
}

/// |NDCG@k change| from swapping positions `i` and `j` of a ranked list.
pub fn swap_delta_ndcg<T: Scalar>(labels_ranked: &[u8], i: usize, j: usize, k: usize) -> T {
    let idcg: T = ideal_dcg(labels_ranked, k);
    if idcg == T::zero() {
        return T::zero();
    }
    let dg = gain::<T>(labels_ranked[i]) - gain::<T>(labels_ranked[j]);
    let dd = discount::<T>(i, k) - discount::<T>(j, k);
    (dg * dd).abs() / idcg
}

/// Lambdas and second-order weights for one group, given current scores.
/// Positive lambda means the score should rise.
pub fn group_lambdas<T: Scalar>(labels: &[u8], scores: &[T], tracks: &[TrackId], k: usize) -> (Vec<T>, Vec<T>) {
    let n = labels.len();
    let mut lambda = vec![T::zero(); n];
    let mut weight = vec![T::zero(); n];
    let idcg: T = ideal_dcg(labels, k);
    if idcg == T::zero() || labels.iter().all(|&l| l == labels[0]) {
        return (lambda, weight);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| desc_then_key((&scores[a], &tracks[a]), (&scores[b], &tracks[b])));
    let mut pos = vec![0usize; n];
    for (p, &i) in order.iter().enumerate() {
        pos[i] = p;
    }
    let sigma = T::one();
    for i in 0..n {
        for j in 0..n {
            if labels[i] <= labels[j] {
                continue;
            }
            let (pi, pj) = (pos[i], pos[j]);
            if pi >= k && pj >= k {
                continue;
            }
            let dg = gain::<T>(labels[i]) - gain::<T>(labels[j]);
            let delta = (dg * (discount::<T>(pi, k) - discount::<T>(pj, k))).abs() / idcg;
            let rho = T::one() / (T::one() + (sigma * (scores[i] - scores[j])).exp());
            let l = sigma * rho * delta;
            let w = sigma * sigma * rho * (T::one() - rho) * delta;
            lambda[i] += l;
            lambda[j] -= l;
            weight[i] += w;
            weight[j] += w;
        }
    }
    (lambda, weight)
}

/// Training rows reordered so each query group is contiguous, plus the
/// binned feature matrix.
struct Dataset<T> {
    features: Vec<[T; NUM_FEATURES]>,
    labels: Vec<u8>,
    tracks: Vec<TrackId>,
    groups: Vec<std::ops::Range<usize>>,
    /// `bins[f][row]`
    bins: Vec<Vec<u8>>,
    /// Split thresholds per feature; bin `b` holds values in
    /// `(cuts[b-1], cuts[b]]`.
    cuts: Vec<Vec<T>>,
}

fn bin_cuts<T: Scalar>(values: &mut [T], max_bins: usize) -> Vec<T> {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite features"));
    let mut uniq: Vec<T> = values.to_vec();
    uniq.dedup();
    let mid = |a: T, b: T| {
        let m = (a + b) / T::of(2.0);
        if m < b {
            m
        } else {
            a
        }
    };
    if uniq.len() <= max_bins {
        return uniq.windows(2).map(|w| mid(w[0], w[1])).collect();
    }
    // quantile cut points over the value distribution
    let n = values.len();
    let mut cuts = Vec::with_capacity(max_bins - 1);
    for b in 1..max_bins {
        let v = values[(b * n / max_bins).min(n - 1)];
        let next = uniq.partition_point(|&u| u <= v);
        if next < uniq.len() {
            let c = mid(v, uniq[next]);
            if cuts.last().is_none_or(|&l| c > l) {
                cuts.push(c);
            }
        }
    }
    cuts
}

impl<T: Scalar> Dataset<T> {
    fn new(examples: &[RankingExample<T>], max_bins: usize) -> Result<Self, LtrError> {
        for e in examples {
            if let Some(f) = e.features.0.iter().position(|x| !x.is_finite()) {
                return Err(LtrError::NonFiniteFeature {
                    pid: e.pid,
                    track: e.track.0,
                    feature: f,
                });
            }
        }
        let mut by_pid: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, e) in examples.iter().enumerate() {
            by_pid.entry(e.pid).or_default().push(i);
        }
        let mut order = Vec::with_capacity(examples.len());
        let mut groups = Vec::with_capacity(by_pid.len());
        for rows in by_pid.values() {
            groups.push(order.len()..order.len() + rows.len());
            order.extend_from_slice(rows);
        }
        let features: Vec<[T; NUM_FEATURES]> = order.iter().map(|&i| examples[i].features.0).collect();
        let labels = order.iter().map(|&i| examples[i].label).collect();
        let tracks = order.iter().map(|&i| examples[i].track).collect();
        let (cuts, bins): (Vec<Vec<T>>, Vec<Vec<u8>>) = (0..NUM_FEATURES)
            .into_par_iter()
            .map(|f| {
                let mut col: Vec<T> = features.iter().map(|x| x[f]).collect();
                let cuts = bin_cuts(&mut col, max_bins);
                let bins = features
                    .iter()
                    .map(|x| cuts.partition_point(|&c| c < x[f]) as u8)
                    .collect();
                (cuts, bins)
            })
            .unzip();
        Ok(Dataset {
            features,
            labels,
            tracks,
            groups,
            bins,
            cuts,
        })
    }
}

#[derive(Clone, Copy, Debug)]
struct SplitCandidate<T> {
    gain: T,
    feature: usize,
    /// Rows with bin <= `bin` go left.
    bin: usize,
}

/// Best variance-reduction split of `rows` on the lambda target.
fn best_split<T: Scalar>(data: &Dataset<T>, rows: &[u32], target: &[T], min_leaf: usize) -> Option<SplitCandidate<T>> {
    let total: T = rows.iter().map(|&r| target[r as usize]).sum();
    let n = rows.len();
    let base = total * total / T::of_usize(n);
    let per_feature: Vec<Option<SplitCandidate<T>>> = (0..NUM_FEATURES)
        .into_par_iter()
        .map(|f| {
            let nb = data.cuts[f].len() + 1;
            if nb < 2 {
                return None;
            }
            let mut cnt = vec![0usize; nb];
            let mut sum = vec![T::zero(); nb];
            let col = &data.bins[f];
            for &r in rows {
                let b = col[r as usize] as usize;
                cnt[b] += 1;
                sum[b] += target[r as usize];
            }
            let mut best: Option<SplitCandidate<T>> = None;
            let (mut nl, mut sl) = (0usize, T::zero());
            for b in 0..nb - 1 {
                nl += cnt[b];
                sl += sum[b];
                let nr = n - nl;
                if nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let sr = total - sl;
                let g = sl * sl / T::of_usize(nl) + sr * sr / T::of_usize(nr) - base;
                if best.is_none_or(|c| g > c.gain) {
                    best = Some(SplitCandidate { gain: g, feature: f, bin: b });
                }
            }
            best
        })
        .collect();
    per_feature
        .into_iter()
        .flatten()
        .fold(None, |acc: Option<SplitCandidate<T>>, c| match acc {
            Some(a) if a.gain >= c.gain => Some(a),
            _ => Some(c),
        })
        .filter(|c| c.gain > T::zero())
}

/// Fits one tree to `lambda` with Newton leaf values; returns the tree and
/// the leaf value reached by every row.
fn fit_tree<T: Scalar>(
    data: &Dataset<T>,
    lambda: &[T],
    weight: &[T],
    max_leaves: usize,
    min_leaf: usize,
) -> (RegressionTree<T>, Vec<T>) {
    struct Open<T> {
        node: usize,
        rows: Vec<u32>,
        split: Option<SplitCandidate<T>>,
    }
    let all: Vec<u32> = (0..data.labels.len() as u32).collect();
    let mut nodes = vec![TreeNode::Leaf { value: T::zero() }];
    let mut open = vec![Open {
        split: best_split(data, &all, lambda, min_leaf),
        node: 0,
        rows: all,
    }];
    while open.len() < max_leaves {
        // highest gain first; earliest-created leaf wins ties
        let Some(pick) = open
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.split.map(|s| (i, s.gain)))
            .fold(None, |acc: Option<(usize, T)>, (i, g)| match acc {
                Some((_, bg)) if bg >= g => acc,
                _ => Some((i, g)),
            })
            .map(|(i, _)| i)
        else {
            break;
        };
        let leaf = open.swap_remove(pick);
        let s = leaf.split.expect("picked leaves have a split");
        let col = &data.bins[s.feature];
        let (l_rows, r_rows): (Vec<u32>, Vec<u32>) = leaf.rows.iter().partition(|&&r| col[r as usize] as usize <= s.bin);
        let (l, r) = (nodes.len(), nodes.len() + 1);
        nodes[leaf.node] = TreeNode::Split {
            feature: s.feature as u32,
            threshold: data.cuts[s.feature][s.bin],
            left: l as u32,
            right: r as u32,
        };
        nodes.push(TreeNode::Leaf { value: T::zero() });
        nodes.push(TreeNode::Leaf { value: T::zero() });
        let (ls, rs) = rayon::join(
            || best_split(data, &l_rows, lambda, min_leaf),
            || best_split(data, &r_rows, lambda, min_leaf),
        );
        open.push(Open {
            node: l,
            rows: l_rows,
            split: ls,
        });
        open.push(Open {
            node: r,
            rows: r_rows,
            split: rs,
        });
    }
    let mut row_values = vec![T::zero(); data.labels.len()];
    for o in open {
        let sl: T = o.rows.iter().map(|&r| lambda[r as usize]).sum();
        let sw: T = o.rows.iter().map(|&r| weight[r as usize]).sum();
        let v = if sw > T::zero() { sl / sw } else { T::zero() };
        let v = if v.is_finite() { v } else { T::zero() };
        nodes[o.node] = TreeNode::Leaf { value: v };
        for &r in &o.rows {
            row_values[r as usize] = v;
        }
    }
    (RegressionTree { nodes }, row_values)
}

fn mean_group_ndcg<T: Scalar>(data: &Dataset<T>, scores: &[T], k: usize) -> T {
    let (sum, n) = data
        .groups
        .iter()
        .filter(|g| data.labels[(*g).clone()].iter().any(|&l| l > 0))
        .fold((T::zero(), 0usize), |(s, n), g| {
            let mut idx: Vec<usize> = g.clone().collect();
            idx.sort_by(|&a, &b| desc_then_key((&scores[a], &data.tracks[a]), (&scores[b], &data.tracks[b])));
            let labels: Vec<u8> = idx.iter().map(|&i| data.labels[i]).collect();
            (s + ndcg_at::<T>(&labels, k), n + 1)
        });
    if n == 0 {
        T::zero()
    } else {
        sum / T::of_usize(n)
    }
}

/// Mean NDCG@k of `model` over the query groups of `examples` that contain
/// at least one relevant example.
pub fn mean_ndcg<T: Scalar>(model: &LtrModel<T>, examples: &[RankingExample<T>], k: usize) -> Result<T, LtrError> {
    let data = Dataset::new(examples, 2)?;
    let scores = data
        .features
        .iter()
        .map(|x| model.score(x))
        .collect::<Result<Vec<T>, _>>()?;
    Ok(mean_group_ndcg(&data, &scores, k))
}

/// Trains a LambdaMART ensemble. Deterministic: groups are processed in pid
/// order and every reduction has a fixed order.
pub fn train_lambdamart<T: Scalar>(examples: &[RankingExample<T>], cfg: &LtrConfig) -> Result<LtrModel<T>, LtrError> {
    if cfg.leaves < 2 || cfg.min_leaf == 0 || !(2..=256).contains(&cfg.max_bins) || !cfg.shrinkage.is_finite() {
        return Err(LtrError::Config(format!(
            "need leaves >= 2, min_leaf >= 1, 2 <= max_bins <= 256 and finite shrinkage (got {cfg:?})"
        )));
    }
    let data = Dataset::new(examples, cfg.max_bins)?;
    let valid = data.groups.iter().any(|g| {
        let l = &data.labels[g.clone()];
        l.iter().any(|&x| x > 0) && l.contains(&0)
    });
    if !valid {
        return Err(LtrError::NoValidGroup);
    }
    let k = cfg.metric.cutoff();
    let shrinkage = T::of(cfg.shrinkage);
    let mut model = LtrModel::empty(shrinkage, cfg.metric);
    let mut scores = vec![T::zero(); data.labels.len()];
    for it in 0..cfg.trees {
        let parts: Vec<(Vec<T>, Vec<T>)> = data
            .groups
            .par_iter()
            .map(|g| group_lambdas(&data.labels[g.clone()], &scores[g.clone()], &data.tracks[g.clone()], k))
            .collect();
        let (mut lambda, mut weight) = (Vec::with_capacity(scores.len()), Vec::with_capacity(scores.len()));
        for (l, w) in parts {
            lambda.extend(l);
            weight.extend(w);
        }
        let (tree, values) = fit_tree(&data, &lambda, &weight, cfg.leaves, cfg.min_leaf);
        scores.iter_mut().zip(&values).for_each(|(s, &v)| *s += shrinkage * v);
        model.trees.push(tree);
        if log::log_enabled!(log::Level::Debug) && (it + 1) % 10 == 0 {
            debug!("tree {}: train {} = {}", it + 1, cfg.metric, mean_group_ndcg(&data, &scores, k));
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn example(pid: u64, track: u32, label: u8, f: &[(usize, f64)]) -> RankingExample<f64> {
        let mut v = [0.0; NUM_FEATURES];
        for &(i, x) in f {
            v[i] = x;
        }
        RankingExample {
            pid,
            track: TrackId(track),
            features: FeatureVector(v),
            label,
        }
    }

    #[test]
    fn empty_and_single_leaf_models() {
        let m = LtrModel::<f64>::empty(0.1, TargetMetric::Ndcg10);
        assert_eq!(m.score(&[0.3; NUM_FEATURES]).unwrap(), 0.0);
        let mut m = m;
        m.trees.push(RegressionTree::leaf(2.5));
        assert!((m.score(&[0.0; NUM_FEATURES]).unwrap() - 0.25).abs() < 1e-15);
        assert!(matches!(m.score(&[0.0; 3]), Err(LtrError::Dimension { expected: 26, found: 3 })));
    }

    #[test]
    fn hand_built_two_leaf_tree() {
        let mut m = LtrModel::<f64>::empty(0.1, TargetMetric::Ndcg10);
        m.trees.push(RegressionTree {
            nodes: vec![
                TreeNode::Split {
                    feature: 1,
                    threshold: 0.5,
                    left: 1,
                    right: 2,
                },
                TreeNode::Leaf { value: -1.0 },
                TreeNode::Leaf { value: 1.0 },
            ],
        });
        let mut x = [0.0; NUM_FEATURES];
        x[1] = 0.7;
        assert!((m.score(&x).unwrap() - 0.1).abs() < 1e-15);
        x[1] = 0.5;
        assert!((m.score(&x).unwrap() + 0.1).abs() < 1e-15);
    }

    #[test]
    fn swap_delta_matches_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..300 {
            let n = rng.random_range(2..15);
            let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
            let k = rng.random_range(1..12);
            let mut swapped = labels.clone();
            swapped.swap(i, j);
            let direct = (ndcg_at::<f64>(&swapped, k) - ndcg_at::<f64>(&labels, k)).abs();
            assert!((swap_delta_ndcg::<f64>(&labels, i, j, k) - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn lambdas_are_antisymmetric_and_sum_to_zero() {
        let labels = [1, 0, 0, 1, 0];
        let scores = [0.2, 0.9, -0.1, 0.0, 0.5];
        let tracks: Vec<TrackId> = (0..5).map(TrackId).collect();
        let (l, w) = group_lambdas(&labels, &scores, &tracks, 10);
        assert!(l.iter().sum::<f64>().abs() < 1e-12);
        assert!(l[0] > 0.0 && l[3] > 0.0 && l[1] < 0.0);
        assert!(w.iter().all(|&x| x >= 0.0));
        let same = group_lambdas(&[1, 1], &[0.0, 1.0], &tracks[..2], 10);
        assert_eq!(same.0, vec![0.0, 0.0]);
    }

    #[test]
    fn separable_pair_is_learned() {
        let ex = vec![example(1, 0, 1, &[(1, 0.9)]), example(1, 1, 0, &[(1, 0.1)])];
        let m = train_lambdamart(&ex, &LtrConfig::default()).unwrap();
        assert!(m.score(&ex[0].features.0).unwrap() > m.score(&ex[1].features.0).unwrap());
        assert_eq!(m.rank_group(&ex).unwrap(), vec![TrackId(0), TrackId(1)]);
    }

    fn synthetic(seed: u64, groups: u64, noise: bool) -> Vec<RankingExample<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for g in 0..groups {
            for t in 0..30u32 {
                let label = (rng.random::<f64>() < 0.2) as u8;
                let signal = if noise { rng.random::<f64>() } else { label as f64 + 0.3 * rng.random::<f64>() };
                let f: Vec<(usize, f64)> = (0..NUM_FEATURES)
                    .map(|i| (i, if i == 5 { signal } else { rng.random::<f64>() }))
                    .collect();
                out.push(example(g, t, label, &f));
            }
        }
        out
    }

    #[test]
    fn more_trees_do_not_hurt_training_ndcg() {
        let ex = synthetic(4, 40, false);
        let cfg = LtrConfig {
            trees: 20,
            ..LtrConfig::default()
        };
        let full = train_lambdamart(&ex, &cfg).unwrap();
        let one = LtrModel {
            trees: full.trees[..1].to_vec(),
            ..full.clone()
        };
        let n1 = mean_ndcg(&one, &ex, 10).unwrap();
        let n20 = mean_ndcg(&full, &ex, 10).unwrap();
        assert!(n20 >= n1 && n20 >= 0.95, "{n1} -> {n20}");
    }

    #[test]
    fn noise_target_respects_leaf_bound() {
        let ex = synthetic(5, 30, true);
        let cfg = LtrConfig {
            trees: 5,
            leaves: 7,
            ..LtrConfig::default()
        };
        let m = train_lambdamart(&ex, &cfg).unwrap();
        assert!(m.trees.iter().all(|t| t.num_leaves() <= 7));
        m.validate().unwrap();
    }

    #[test]
    fn deterministic_and_round_trips() {
        let ex = synthetic(6, 10, false);
        let cfg = LtrConfig {
            trees: 5,
            ..LtrConfig::default()
        };
        let a = train_lambdamart(&ex, &cfg).unwrap();
        let b = train_lambdamart(&ex, &cfg).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(LtrModel::<f64>::from_json(&a.to_json().unwrap()).unwrap(), a);
        let mut w = BinWriter::new(Vec::new());
        a.write_to(&mut w).unwrap();
        let bytes = w.into_inner();
        assert_eq!(LtrModel::<f64>::read_from(&mut BinReader::new(&bytes[..])).unwrap(), a);
    }

    #[test]
    fn errors() {
        let one_label = vec![example(1, 0, 1, &[]), example(1, 1, 1, &[])];
        assert!(matches!(train_lambdamart(&one_label, &LtrConfig::default()), Err(LtrError::NoValidGroup)));
        let bad = vec![example(1, 0, 1, &[(3, f64::NAN)]), example(1, 1, 0, &[])];
        assert!(matches!(
            train_lambdamart(&bad, &LtrConfig::default()),
            Err(LtrError::NonFiniteFeature { feature: 3, .. })
        ));
        let json = LtrModel::<f64>::empty(0.1, TargetMetric::Ndcg10)
            .to_json()
            .unwrap()
            .replace("\"version\": 1", "\"version\": 9");
        assert!(matches!(LtrModel::<f64>::from_json(&json), Err(LtrError::VersionMismatch { found: 9, .. })));
    }

    #[test]
    fn binning_respects_bin_budget() {
        let mut v: Vec<f64> = (0..1000).map(|i| (i % 700) as f64).collect();
        let cuts = bin_cuts(&mut v, 16);
        assert!(cuts.len() <= 15 && cuts.windows(2).all(|w| w[0] < w[1]));
        let mut small = vec![3.0, 1.0, 1.0, 2.0];
        assert_eq!(bin_cuts(&mut small, 256), vec![1.5, 2.5]);
    }
}
