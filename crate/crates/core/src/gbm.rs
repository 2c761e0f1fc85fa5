//! Second-order gradient-boosted regression trees for binary classification.
//!
//! Each round computes logistic gradients `g = p - y` and hessians
//! `h = p (1 - p)` and grows one tree level by level with exact greedy split
//! search over pre-sorted feature columns. A split of a node with sums
//! `(G, H)` into `(G_L, H_L)` / `(G_R, H_R)` has gain
//!
//! ```text
//! 1/2 [ G_L^2/(H_L+lambda) + G_R^2/(H_R+lambda) - G^2/(H+lambda) ] - gamma
//! ```
//!
//! and is taken only when the gain is positive. Leaves get
//! `-learning_rate * G / (H + lambda)`.
//!
//! The `dart` booster drops each existing tree with probability
//! `dart_drop_rate` while computing the gradients of a round. With `k` trees
//! dropped, the new tree is weighted `1 / (k + learning_rate)` and the dropped
//! trees are rescaled by `k / (k + learning_rate)`.
//!
//! # `GBM1` file layout
//!
//! ```text
//! offset  size  content
//! 0       4     magic b"GBM1" (b"GBM" + format version digit)
//! 4       4     header length L, u32 little endian
//! 8       L     UTF-8 JSON header (see `ModelHeader`)
//! 8+L     16*N  nodes of all trees in order, 16 bytes each, little endian:
//!               i32 feature (-1 for a leaf), f32 threshold or leaf value,
//!               u32 left child, u32 right child (0 for leaves)
//! ```
//!
//! A row goes to the left child when `x[feature] < threshold`.

use std::io::Read;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC_PREFIX: &[u8; 3] = b"GBM";
pub const FORMAT_VERSION: u8 = 1;

/// Clamp applied to the prior when deriving the base score.
const PRIOR_CLIP: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GbmError {
    #[error("training labels contain a single class")]
    SingleClassTraining,
    #[error("training data has no rows or no features")]
    EmptyFeatures,
    #[error("{what}: expected {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("feature vector has length {got}, model expects {expected}")]
    FeatureLengthMismatch { expected: usize, got: usize },
    #[error("non-finite feature value at row {row}, column {col}")]
    NonFiniteFeature { row: usize, col: usize },
    #[error("labels must be 0 or 1")]
    BadLabel,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("model format version {found} is not supported (expected {FORMAT_VERSION})")]
    VersionMismatch { found: String },
    #[error("corrupt model: {0}")]
    CorruptModel(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GbmError {
    pub fn kind(&self) -> &'static str {
        match self {
            GbmError::SingleClassTraining => "SingleClassTraining",
            GbmError::EmptyFeatures => "EmptyFeatures",
            GbmError::LengthMismatch { .. } => "LengthMismatch",
            GbmError::FeatureLengthMismatch { .. } => "FeatureLengthMismatch",
            GbmError::NonFiniteFeature { .. } => "NonFiniteFeature",
            GbmError::BadLabel => "BadLabel",
            GbmError::InvalidConfig(_) => "InvalidConfig",
            GbmError::VersionMismatch { .. } => "VersionMismatch",
            GbmError::CorruptModel(_) => "CorruptModel",
            GbmError::Io(_) => "Io",
        }
    }
}

type Result<T> = std::result::Result<T, GbmError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Booster {
    GbTree,
    Dart,
}

impl std::str::FromStr for Booster {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gbtree" => Ok(Booster::GbTree),
            "dart" => Ok(Booster::Dart),
            other => Err(format!("unknown booster {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbmConfig {
    pub booster: Booster,
    pub max_depth: usize,
    pub rounds: usize,
    pub learning_rate: f64,
    pub subsample: f64,
    pub colsample_bytree: f64,
    /// Minimum split gain.
    pub gamma: f64,
    /// L2 regularization on leaf weights.
    pub lambda: f64,
    /// Stop once validation loss has not improved for this many rounds.
    pub early_stopping_interval: usize,
    pub dart_drop_rate: f64,
    pub seed: u64,
    /// Train on constant labels instead of failing; the clipped prior then
    /// dominates every prediction.
    #[serde(default)]
    pub allow_single_class: bool,
}

impl Default for GbmConfig {
    fn default() -> Self {
        GbmConfig {
            booster: Booster::GbTree,
            max_depth: 6,
            rounds: 100,
            learning_rate: 0.1,
            subsample: 1.0,
            colsample_bytree: 1.0,
            gamma: 0.0,
            lambda: 1.0,
            early_stopping_interval: 50,
            dart_drop_rate: 0.1,
            seed: 0,
            allow_single_class: false,
        }
    }
}

impl GbmConfig {
    /// Per-relationship spatio-semantic model settings.
    pub fn spatio_semantic() -> Self {
        GbmConfig {
            booster: Booster::Dart,
            max_depth: 10,
            rounds: 5000,
            subsample: 0.2,
            colsample_bytree: 0.2,
            gamma: 2.0,
            lambda: 1000.0,
            early_stopping_interval: 50,
            ..GbmConfig::default()
        }
    }

    /// Final aggregation model settings: gbtree, depth 8, otherwise as above.
    pub fn aggregator() -> Self {
        GbmConfig {
            booster: Booster::GbTree,
            max_depth: 8,
            ..Self::spatio_semantic()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GbmError::InvalidConfig(m.to_string()));
        if self.max_depth == 0 {
            return bad("max_depth must be positive");
        }
        if self.rounds == 0 {
            return bad("rounds must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return bad("subsample must lie in (0, 1]");
        }
        if !(self.colsample_bytree > 0.0 && self.colsample_bytree <= 1.0) {
            return bad("colsample_bytree must lie in (0, 1]");
        }
        if !(self.gamma >= 0.0 && self.lambda >= 0.0) {
            return bad("gamma and lambda must be non-negative");
        }
        if self.early_stopping_interval == 0 {
            return bad("early_stopping_interval must be positive");
        }
        if !(0.0..1.0).contains(&self.dart_drop_rate) {
            return bad("dart_drop_rate must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Row-major f32 feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    data: Vec<f32>,
    n_rows: usize,
    n_cols: usize,
}

impl DenseMatrix {
    pub fn new(data: Vec<f32>, n_cols: usize) -> Result<Self> {
        if n_cols == 0 {
            return Err(GbmError::EmptyFeatures);
        }
        if !data.len().is_multiple_of(n_cols) {
            return Err(GbmError::LengthMismatch {
                what: "matrix data",
                expected: (data.len() / n_cols + 1) * n_cols,
                got: data.len(),
            });
        }
        Ok(DenseMatrix {
            n_rows: data.len() / n_cols,
            data,
            n_cols,
        })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R], n_cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * n_cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != n_cols {
                return Err(GbmError::LengthMismatch {
                    what: "row length",
                    expected: n_cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(data, n_cols)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.n_cols + col]
    }

    fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(GbmError::NonFiniteFeature {
                row: i / self.n_cols,
                col: i % self.n_cols,
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TreeNode {
    Split {
        feature: u32,
        threshold: f32,
        left: u32,
        right: u32,
    },
    Leaf {
        value: f32,
    },
}

/// Array-encoded binary tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn leaf(value: f32) -> Self {
        RegressionTree {
            nodes: vec![TreeNode::Leaf { value }],
        }
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn predict(&self, row: &[f32]) -> f32 {
        let mut i = 0usize;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { value } => return value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if row[feature as usize] < threshold {
                        left as usize
                    } else {
                        right as usize
                    }
                }
            }
        }
    }

    pub fn num_splits(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Split { .. })).count()
    }

    /// Number of edges on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            match nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, left as usize).max(walk(nodes, right as usize)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn leaf_values(&self) -> impl Iterator<Item = f32> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            TreeNode::Leaf { value } => Some(*value),
            TreeNode::Split { .. } => None,
        })
    }
}

/// Trained ensemble: `sigmoid(base_score + sum_t weight_t * tree_t(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GbmModel {
    booster: Booster,
    base_score: f64,
    trees: Vec<RegressionTree>,
    tree_weights: Vec<f64>,
    n_features: usize,
    max_depth: usize,
    fingerprint: String,
}

pub fn sigmoid(m: f64) -> f64 {
    1.0 / (1.0 + (-m).exp())
}

fn softplus(m: f64) -> f64 {
    m.max(0.0) + (-m.abs()).exp().ln_1p()
}

/// Logistic loss of a single margin.
pub fn logistic_loss(margin: f64, label: u8) -> f64 {
    softplus(margin) - f64::from(label) * margin
}

/// First and second derivative of [`logistic_loss`] with respect to the margin.
pub fn logistic_grad_hess(margin: f64, label: u8) -> (f64, f64) {
    let p = sigmoid(margin);
    (p - f64::from(label), p * (1.0 - p))
}

pub fn mean_log_loss(margins: &[f64], labels: &[u8]) -> f64 {
    let total: f64 = margins.iter().zip(labels).map(|(&m, &y)| logistic_loss(m, y)).sum();
    total / margins.len().max(1) as f64
}

impl GbmModel {
    /// Model with no trees.
    pub fn constant(base_score: f64, n_features: usize) -> Self {
        GbmModel {
            booster: Booster::GbTree,
            base_score,
            trees: Vec::new(),
            tree_weights: Vec::new(),
            n_features,
            max_depth: 0,
            fingerprint: String::new(),
        }
    }

    /// Appends a tree (used to assemble models by hand).
    pub fn push_tree(&mut self, tree: RegressionTree, weight: f64) {
        self.max_depth = self.max_depth.max(tree.depth());
        self.trees.push(tree);
        self.tree_weights.push(weight);
    }

    pub fn with_fingerprint(mut self, fingerprint: impl Into<String>) -> Self {
        self.fingerprint = fingerprint.into();
        self
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn booster(&self) -> Booster {
        self.booster
    }

    pub fn base_score(&self) -> f64 {
        self.base_score
    }

    pub fn trees(&self) -> &[RegressionTree] {
        &self.trees
    }

    pub fn tree_weights(&self) -> &[f64] {
        &self.tree_weights
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn margin(&self, row: &[f32]) -> Result<f64> {
        if row.len() != self.n_features {
            return Err(GbmError::FeatureLengthMismatch {
                expected: self.n_features,
                got: row.len(),
            });
        }
        Ok(self.margin_unchecked(row))
    }

    fn margin_unchecked(&self, row: &[f32]) -> f64 {
        self.trees
            .iter()
            .zip(&self.tree_weights)
            .fold(self.base_score, |acc, (t, &w)| acc + w * f64::from(t.predict(row)))
    }

    /// Probability of the positive class.
    pub fn predict(&self, row: &[f32]) -> Result<f64> {
        self.margin(row).map(sigmoid)
    }

    pub fn predict_matrix(&self, m: &DenseMatrix) -> Result<Vec<f64>> {
        (0..m.n_rows()).map(|i| self.predict(m.row(i))).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = ModelHeader {
            format_version: u32::from(FORMAT_VERSION),
            booster: self.booster,
            base_score: self.base_score,
            n_features: self.n_features,
            max_depth: self.max_depth,
            fingerprint: self.fingerprint.clone(),
            trees: self
                .trees
                .iter()
                .zip(&self.tree_weights)
                .map(|(t, &weight)| TreeHeader {
                    nodes: t.nodes.len(),
                    weight,
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + header.len());
        out.extend_from_slice(MAGIC_PREFIX);
        out.push(b'0' + FORMAT_VERSION);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.trees {
            for n in &t.nodes {
                let (feature, value, left, right) = match *n {
                    TreeNode::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => (feature as i32, threshold, left, right),
                    TreeNode::Leaf { value } => (-1i32, value, 0, 0),
                };
                out.extend_from_slice(&feature.to_le_bytes());
                out.extend_from_slice(&value.to_le_bytes());
                out.extend_from_slice(&left.to_le_bytes());
                out.extend_from_slice(&right.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| GbmError::CorruptModel(m.to_string());
        if bytes.len() < 8 || &bytes[..3] != MAGIC_PREFIX {
            return Err(corrupt("missing GBM magic"));
        }
        if bytes[3] != b'0' + FORMAT_VERSION {
            return Err(GbmError::VersionMismatch {
                found: String::from_utf8_lossy(&bytes[3..4]).into_owned(),
            });
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let header_bytes = bytes.get(8..8 + header_len).ok_or_else(|| corrupt("truncated header"))?;
        let header: ModelHeader =
            serde_json::from_slice(header_bytes).map_err(|e| GbmError::CorruptModel(format!("header: {e}")))?;
        if header.format_version != u32::from(FORMAT_VERSION) {
            return Err(GbmError::VersionMismatch {
                found: header.format_version.to_string(),
            });
        }
        if !header.base_score.is_finite() {
            return Err(corrupt("base score is not finite"));
        }
        let mut offset = 8 + header_len;
        let mut trees = Vec::with_capacity(header.trees.len());
        let mut weights = Vec::with_capacity(header.trees.len());
        for th in &header.trees {
            if th.nodes == 0 || !th.weight.is_finite() {
                return Err(corrupt("empty tree or non-finite tree weight"));
            }
            let end = th
                .nodes
                .checked_mul(16)
                .and_then(|len| offset.checked_add(len))
                .ok_or_else(|| corrupt("node count overflows"))?;
            let blob = bytes.get(offset..end).ok_or_else(|| corrupt("truncated node data"))?;
            offset = end;
            let mut nodes = Vec::with_capacity(th.nodes);
            for (i, c) in blob.chunks_exact(16).enumerate() {
                let feature = i32::from_le_bytes(c[0..4].try_into().expect("4 bytes"));
                let value = f32::from_le_bytes(c[4..8].try_into().expect("4 bytes"));
                let left = u32::from_le_bytes(c[8..12].try_into().expect("4 bytes"));
                let right = u32::from_le_bytes(c[12..16].try_into().expect("4 bytes"));
                if !value.is_finite() {
                    return Err(corrupt("non-finite node value"));
                }
                nodes.push(if feature < 0 {
                    TreeNode::Leaf { value }
                } else {
                    let n = th.nodes as u32;
                    let i = i as u32;
                    if feature as usize >= header.n_features || left <= i || right <= i || left >= n || right >= n {
                        return Err(corrupt("node references out of range"));
                    }
                    TreeNode::Split {
                        feature: feature as u32,
                        threshold: value,
                        left,
                        right,
                    }
                });
            }
            let tree = RegressionTree { nodes };
            if tree.depth() > header.max_depth {
                return Err(corrupt("tree deeper than recorded max depth"));
            }
            trees.push(tree);
            weights.push(th.weight);
        }
        if offset != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(GbmModel {
            booster: header.booster,
            base_score: header.base_score,
            trees,
            tree_weights: weights,
            n_features: header.n_features,
            max_depth: header.max_depth,
            fingerprint: header.fingerprint,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    format_version: u32,
    booster: Booster,
    base_score: f64,
    n_features: usize,
    max_depth: usize,
    fingerprint: String,
    trees: Vec<TreeHeader>,
}

#[derive(Serialize, Deserialize)]
struct TreeHeader {
    nodes: usize,
    weight: f64,
}

pub fn save_model(model: &GbmModel, path: &Path) -> Result<()> {
    std::fs::write(path, model.to_bytes())?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<GbmModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    GbmModel::from_bytes(&bytes)
}

/// Per-round losses recorded during training.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainingLog {
    pub train_loss: Vec<f64>,
    pub valid_loss: Vec<f64>,
    /// Index of the round the returned model ends at, when validated.
    pub best_round: Option<usize>,
    pub stopped_early: bool,
}

pub struct Validation<'a> {
    pub features: &'a DenseMatrix,
    pub labels: &'a [u8],
}

pub fn train(
    features: &DenseMatrix,
    labels: &[u8],
    validation: Option<Validation<'_>>,
    config: &GbmConfig,
) -> Result<GbmModel> {
    train_with_log(features, labels, validation, config).map(|(m, _)| m)
}

fn check_labels(features: &DenseMatrix, labels: &[u8]) -> Result<()> {
    if labels.len() != features.n_rows() {
        return Err(GbmError::LengthMismatch {
            what: "labels",
            expected: features.n_rows(),
            got: labels.len(),
        });
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(GbmError::BadLabel);
    }
    features.check_finite()
}

pub fn train_with_log(
    features: &DenseMatrix,
    labels: &[u8],
    validation: Option<Validation<'_>>,
    config: &GbmConfig,
) -> Result<(GbmModel, TrainingLog)> {
    config.validate()?;
    if features.n_rows() < 2 || features.n_cols() == 0 {
        return Err(GbmError::EmptyFeatures);
    }
    check_labels(features, labels)?;
    if let Some(v) = &validation {
        if v.features.n_cols() != features.n_cols() {
            return Err(GbmError::LengthMismatch {
                what: "validation columns",
                expected: features.n_cols(),
                got: v.features.n_cols(),
            });
        }
        check_labels(v.features, v.labels)?;
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if (positives == 0 || positives == labels.len()) && !config.allow_single_class {
        return Err(GbmError::SingleClassTraining);
    }
    let prior = (positives as f64 / labels.len() as f64).clamp(PRIOR_CLIP, 1.0 - PRIOR_CLIP);
    let base_score = (prior / (1.0 - prior)).ln();

    let n = features.n_rows();
    let sorted = presort(features);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = GbmModel {
        booster: config.booster,
        base_score,
        trees: Vec::new(),
        tree_weights: Vec::new(),
        n_features: features.n_cols(),
        max_depth: config.max_depth,
        fingerprint: String::new(),
    };
    let mut margin = vec![base_score; n];
    let mut valid_margin = validation.as_ref().map(|v| vec![base_score; v.features.n_rows()]);
    // per-tree raw outputs, kept for dart so dropped trees can be subtracted cheaply
    let mut train_outputs: Vec<Vec<f32>> = Vec::new();
    let mut valid_outputs: Vec<Vec<f32>> = Vec::new();
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];

    for round in 0..config.rounds {
        let sampled: Vec<bool> = if config.subsample < 1.0 {
            (0..n).map(|_| rng.random::<f64>() < config.subsample).collect()
        } else {
            vec![true; n]
        };
        let n_cols = features.n_cols();
        let k_cols = ((config.colsample_bytree * n_cols as f64).round() as usize).clamp(1, n_cols);
        let mut cols: Vec<usize> = if k_cols < n_cols {
            sample(&mut rng, n_cols, k_cols).into_vec()
        } else {
            (0..n_cols).collect()
        };
        cols.sort_unstable();
        let dropped: Vec<usize> = match config.booster {
            Booster::Dart => (0..model.trees.len())
                .filter(|_| rng.random::<f64>() < config.dart_drop_rate)
                .collect(),
            Booster::GbTree => Vec::new(),
        };

        for &t in &dropped {
            let w = model.tree_weights[t];
            for (m, &f) in margin.iter_mut().zip(&train_outputs[t]) {
                *m -= w * f64::from(f);
            }
            if let Some(vm) = valid_margin.as_mut() {
                for (m, &f) in vm.iter_mut().zip(&valid_outputs[t]) {
                    *m -= w * f64::from(f);
                }
            }
        }
        for i in 0..n {
            let (g, h) = logistic_grad_hess(margin[i], labels[i]);
            grad[i] = g;
            hess[i] = h;
        }

        let tree = TreeBuilder {
            features,
            sorted: &sorted,
            grad: &grad,
            hess: &hess,
            config,
        }
        .grow(&sampled, &cols);
        let out: Vec<f32> = (0..n).map(|i| tree.predict(features.row(i))).collect();
        let vout: Vec<f32> = validation
            .as_ref()
            .map(|v| (0..v.features.n_rows()).map(|i| tree.predict(v.features.row(i))).collect())
            .unwrap_or_default();

        let new_weight = if dropped.is_empty() {
            1.0
        } else {
            let k = dropped.len() as f64;
            let factor = k / (k + config.learning_rate);
            for &t in &dropped {
                model.tree_weights[t] *= factor;
            }
            1.0 / (k + config.learning_rate)
        };
        for &t in &dropped {
            let w = model.tree_weights[t];
            for (m, &f) in margin.iter_mut().zip(&train_outputs[t]) {
                *m += w * f64::from(f);
            }
            if let Some(vm) = valid_margin.as_mut() {
                for (m, &f) in vm.iter_mut().zip(&valid_outputs[t]) {
                    *m += w * f64::from(f);
                }
            }
        }
        for (m, &f) in margin.iter_mut().zip(&out) {
            *m += new_weight * f64::from(f);
        }
        if let Some(vm) = valid_margin.as_mut() {
            for (m, &f) in vm.iter_mut().zip(&vout) {
                *m += new_weight * f64::from(f);
            }
        }
        model.trees.push(tree);
        model.tree_weights.push(new_weight);
        if config.booster == Booster::Dart {
            train_outputs.push(out);
            valid_outputs.push(vout);
        }

        log.train_loss.push(mean_log_loss(&margin, labels));
        if let (Some(v), Some(vm)) = (&validation, &valid_margin) {
            let loss = mean_log_loss(vm, v.labels);
            log.valid_loss.push(loss);
            let improved = best.as_ref().is_none_or(|(b, _, _)| loss < *b);
            if improved {
                best = Some((loss, round, model.tree_weights.clone()));
            } else if let Some((_, best_round, _)) = &best {
                if round - best_round >= config.early_stopping_interval {
                    log.stopped_early = true;
                    break;
                }
            }
        }
    }

    if let Some((_, best_round, weights)) = best {
        model.trees.truncate(best_round + 1);
        model.tree_weights = weights;
        log.best_round = Some(best_round);
    }
    Ok((model, log))
}

/// Row indices of each column sorted by value (ties by row index).
fn presort(features: &DenseMatrix) -> Vec<Vec<u32>> {
    (0..features.n_cols())
        .into_par_iter()
        .map(|c| {
            let mut idx: Vec<u32> = (0..features.n_rows() as u32).collect();
            idx.sort_by(|&a, &b| {
                features
                    .get(a as usize, c)
                    .total_cmp(&features.get(b as usize, c))
                    .then(a.cmp(&b))
            });
            idx
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct SplitCandidate {
    gain: f64,
    feature: usize,
    threshold: f32,
}

const NO_NODE: u32 = u32::MAX;

struct TreeBuilder<'a> {
    features: &'a DenseMatrix,
    sorted: &'a [Vec<u32>],
    grad: &'a [f64],
    hess: &'a [f64],
    config: &'a GbmConfig,
}

impl TreeBuilder<'_> {
    fn leaf_value(&self, g: f64, h: f64) -> f32 {
        let denom = h + self.config.lambda;
        if denom <= 0.0 {
            return 0.0;
        }
        (-self.config.learning_rate * g / denom) as f32
    }

    fn score(&self, g: f64, h: f64) -> f64 {
        let denom = h + self.config.lambda;
        if denom <= 0.0 {
            0.0
        } else {
            g * g / denom
        }
    }

    /// Best split of every active node on one feature.
    fn scan_feature(
        &self,
        feature: usize,
        node_of: &[u32],
        slot_of: &[u32],
        totals: &[(f64, f64)],
    ) -> Vec<Option<SplitCandidate>> {
        let k = totals.len();
        let mut left = vec![(0.0f64, 0.0f64); k];
        let mut last: Vec<Option<f32>> = vec![None; k];
        let mut best: Vec<Option<SplitCandidate>> = vec![None; k];
        for &row in &self.sorted[feature] {
            let row = row as usize;
            let node = node_of[row];
            if node == NO_NODE {
                continue;
            }
            let slot = slot_of[node as usize];
            if slot == NO_NODE {
                continue;
            }
            let s = slot as usize;
            let v = self.features.get(row, feature);
            if let Some(prev) = last[s] {
                if v > prev {
                    let (gl, hl) = left[s];
                    let (g, h) = totals[s];
                    let (gr, hr) = (g - gl, h - hl);
                    let gain = 0.5 * (self.score(gl, hl) + self.score(gr, hr) - self.score(g, h)) - self.config.gamma;
                    if gain > 0.0 && best[s].is_none_or(|b| gain > b.gain) {
                        best[s] = Some(SplitCandidate {
                            gain,
                            feature,
                            threshold: v,
                        });
                    }
                }
            }
            left[s].0 += self.grad[row];
            left[s].1 += self.hess[row];
            last[s] = Some(v);
        }
        best
    }

    fn grow(&self, sampled: &[bool], cols: &[usize]) -> RegressionTree {
        let n = self.features.n_rows();
        let mut node_of: Vec<u32> = sampled.iter().map(|&s| if s { 0 } else { NO_NODE }).collect();
        let mut nodes: Vec<TreeNode> = vec![TreeNode::Leaf { value: 0.0 }];
        let mut active: Vec<u32> = vec![0];
        let totals_of = |active: &[u32], node_of: &[u32], n_nodes: usize| {
            let mut t = vec![(0.0f64, 0.0f64); n_nodes];
            for i in 0..n {
                if node_of[i] != NO_NODE {
                    t[node_of[i] as usize].0 += self.grad[i];
                    t[node_of[i] as usize].1 += self.hess[i];
                }
            }
            active.iter().map(|&a| t[a as usize]).collect::<Vec<_>>()
        };

        for depth in 0..=self.config.max_depth {
            if active.is_empty() {
                break;
            }
            let totals = totals_of(&active, &node_of, nodes.len());
            let mut slot_of = vec![NO_NODE; nodes.len()];
            for (s, &a) in active.iter().enumerate() {
                slot_of[a as usize] = s as u32;
            }
            let best: Vec<Option<SplitCandidate>> = if depth < self.config.max_depth {
                let per_feature: Vec<Vec<Option<SplitCandidate>>> = cols
                    .par_iter()
                    .map(|&f| self.scan_feature(f, &node_of, &slot_of, &totals))
                    .collect();
                (0..active.len())
                    .map(|s| {
                        per_feature.iter().fold(None, |acc: Option<SplitCandidate>, cands| match (acc, cands[s]) {
                            (None, c) => c,
                            (Some(a), Some(c)) if c.gain > a.gain => Some(c),
                            (a, _) => a,
                        })
                    })
                    .collect()
            } else {
                vec![None; active.len()]
            };

            let mut next_active = Vec::new();
            for (s, &node) in active.iter().enumerate() {
                let (g, h) = totals[s];
                match best[s] {
                    Some(c) => {
                        let left = nodes.len() as u32;
                        nodes.push(TreeNode::Leaf { value: 0.0 });
                        nodes.push(TreeNode::Leaf { value: 0.0 });
                        nodes[node as usize] = TreeNode::Split {
                            feature: c.feature as u32,
                            threshold: c.threshold,
                            left,
                            right: left + 1,
                        };
                        next_active.push(left);
                        next_active.push(left + 1);
                    }
                    None => {
                        nodes[node as usize] = TreeNode::Leaf {
                            value: self.leaf_value(g, h),
                        };
                    }
                }
            }
            for (i, slot) in node_of.iter_mut().enumerate() {
                let node = *slot;
                if node == NO_NODE {
                    continue;
                }
                *slot = match nodes[node as usize] {
                    TreeNode::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } if slot_of[node as usize] != NO_NODE => {
                        if self.features.get(i, feature as usize) < threshold {
                            left
                        } else {
                            right
                        }
                    }
                    _ => NO_NODE,
                };
            }
            active = next_active;
        }
        RegressionTree { nodes }
    }
}

/// Area under the ROC curve, ties counted as one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return f64::NAN;
    }
    // average ranks over tie groups
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] == 1 {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}
