//! Pipeline orchestration: per-predicate spatio-semantic models (stage 2)
//! and the stage-3 aggregator that folds in externally produced visual scores.
//!
//! Model bank directory layout:
//!
//! ```text
//! bank/
//!   manifest.json     fingerprint, predicates, model files, skipped predicates, config
//!   pred_000.gbm      one GBM1 file per trained predicate (id zero-padded to 3 digits)
//!   ...
//! ```
//!
//! An aggregator directory has the same layout with `"kind": "aggregator"` in
//! its manifest; its fingerprint covers the prefixed input layout.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{
    extract_features, generate_candidates, label_candidates, FeatureError, FeatureLayout, LabelMatch, PairFeatureVector,
    SemanticStats,
};
use crate::gbm::{self, DenseMatrix, GbmConfig, GbmError, GbmModel, Validation};
use crate::ingest::{AnnotationSet, BoxKey, ScoreTable};
use crate::types::{Detection, PredicateId, RelationInstance, TripletVocabulary};

/// Names of the two score columns the aggregator prepends to the pair features.
pub const AGGREGATOR_PREFIX: [&str; 2] = ["stage2_score", "visual_score"];

/// Score used for a missing visual entry under [`MissingScorePolicy::Neutral`].
pub const NEUTRAL_SCORE: f64 = 0.5;

/// Deepest tree the aggregator may use.
pub const AGGREGATOR_MAX_DEPTH: usize = 8;

#[derive(Debug, Error)]
pub enum StageError {
    #[error("model layout fingerprint {found} does not match feature layout {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("image {0} appears in more than one split")]
    SplitLeakage(String),
    #[error("split proportions must be non-negative and sum to 1 (got {0:?})")]
    BadProportions([f64; 3]),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("aggregator depth {0} exceeds {AGGREGATOR_MAX_DEPTH}")]
    AggregatorTooDeep(usize),
    #[error("predicate {name}: {source}")]
    Training {
        name: String,
        #[source]
        source: GbmError,
    },
    #[error("bank manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Gbm(#[from] GbmError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl StageError {
    pub fn kind(&self) -> &'static str {
        match self {
            StageError::FingerprintMismatch { .. } => "FingerprintMismatch",
            StageError::SplitLeakage(_) => "SplitLeakage",
            StageError::BadProportions(_) => "BadProportions",
            StageError::EmptySplit(_) => "EmptySplit",
            StageError::AggregatorTooDeep(_) => "AggregatorTooDeep",
            StageError::Training { source, .. } => source.kind(),
            StageError::Manifest(_) => "CorruptManifest",
            StageError::Gbm(e) => e.kind(),
            StageError::Feature(e) => e.kind(),
            StageError::Io(_) => "Io",
            StageError::Json(_) => "Json",
        }
    }
}

type Result<T> = std::result::Result<T, StageError>;

// ---------------------------------------------------------------------------
// Splits

/// Fraction of images per split, in `stage2,stage3,validation` order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitProportions {
    pub stage2: f64,
    pub stage3: f64,
    pub validation: f64,
}

impl Default for SplitProportions {
    /// Roughly the 374,768 / 12,314 / 3,991 triplet ratio.
    fn default() -> Self {
        SplitProportions {
            stage2: 0.96,
            stage3: 0.03,
            validation: 0.01,
        }
    }
}

impl std::str::FromStr for SplitProportions {
    type Err = String;
    /// Parses `a,b,c`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad proportion {p:?}: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        match parts.as_slice() {
            &[stage2, stage3, validation] => Ok(SplitProportions {
                stage2,
                stage3,
                validation,
            }),
            _ => Err("expected three comma-separated proportions".to_string()),
        }
    }
}

/// Image-disjoint partition of a training corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    stage2: BTreeSet<String>,
    stage3: BTreeSet<String>,
    validation: BTreeSet<String>,
}

impl SplitPlan {
    pub fn new(stage2: BTreeSet<String>, stage3: BTreeSet<String>, validation: BTreeSet<String>) -> Result<Self> {
        let plan = SplitPlan {
            stage2,
            stage3,
            validation,
        };
        plan.check_disjoint()?;
        Ok(plan)
    }

    /// Shuffles the sorted image ids with a seeded generator and cuts them by
    /// proportion. Every split with a positive proportion gets at least one
    /// image when there are enough images.
    pub fn by_image<'a>(images: impl IntoIterator<Item = &'a str>, proportions: SplitProportions, seed: u64) -> Result<Self> {
        let p = [proportions.stage2, proportions.stage3, proportions.validation];
        if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(StageError::BadProportions(p));
        }
        let mut ids: Vec<String> = images.into_iter().map(str::to_string).collect::<BTreeSet<_>>().into_iter().collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = ids.len();
        let want = |frac: f64| {
            let k = (frac * n as f64).round() as usize;
            if frac > 0.0 && n >= 3 {
                k.max(1)
            } else {
                k
            }
        };
        let n_valid = want(proportions.validation).min(n);
        let n_stage3 = want(proportions.stage3).min(n - n_valid);
        let validation = ids.drain(..n_valid).collect();
        let stage3 = ids.drain(..n_stage3).collect();
        let stage2 = ids.into_iter().collect();
        Self::new(stage2, stage3, validation)
    }

    /// Hard leakage check: no image may sit in two splits.
    pub fn check_disjoint(&self) -> Result<()> {
        let sets = [&self.stage2, &self.stage3, &self.validation];
        for (i, a) in sets.iter().enumerate() {
            for b in &sets[i + 1..] {
                if let Some(img) = a.intersection(b).next() {
                    return Err(StageError::SplitLeakage(img.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn stage2(&self) -> &BTreeSet<String> {
        &self.stage2
    }

    pub fn stage3(&self) -> &BTreeSet<String> {
        &self.stage3
    }

    pub fn validation(&self) -> &BTreeSet<String> {
        &self.validation
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let plan: SplitPlan = serde_json::from_slice(&std::fs::read(path)?)?;
        plan.check_disjoint()?;
        Ok(plan)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Stage 2

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub gbm: GbmConfig,
    /// Restrict training to these predicates; all predicates when empty.
    #[serde(default)]
    pub predicates: Vec<PredicateId>,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            gbm: GbmConfig::spatio_semantic(),
            predicates: Vec::new(),
        }
    }
}

/// Feature matrix and labels of all ground-truth candidate pairs of one
/// predicate over a set of images.
pub fn build_dataset(
    annotations: &AnnotationSet,
    images: &BTreeSet<String>,
    predicate: PredicateId,
    stats: &SemanticStats,
    triplets: &TripletVocabulary,
) -> (Vec<PairFeatureVector>, Vec<u8>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for img in images {
        let cands = generate_candidates(annotations.boxes(img), predicate, triplets);
        for ((s, o), y) in label_candidates(cands, annotations.relations(img), predicate, LabelMatch::Exact) {
            xs.push(extract_features(&s, &o, stats));
            ys.push(y);
        }
    }
    (xs, ys)
}

fn to_matrix(rows: &[PairFeatureVector], n_cols: usize) -> std::result::Result<DenseMatrix, GbmError> {
    let data: Vec<f32> = rows.iter().flat_map(|r| r.as_slice().iter().copied()).collect();
    DenseMatrix::new(data, n_cols)
}

/// Stage-2 models, one per predicate, sharing one feature layout.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationshipModelBank {
    models: BTreeMap<PredicateId, GbmModel>,
    predicate_names: Vec<String>,
    fingerprint: String,
    skipped: Vec<String>,
    config: GbmConfig,
}

#[derive(Serialize, Deserialize)]
struct BankManifest {
    kind: String,
    fingerprint: String,
    predicates: Vec<String>,
    models: Vec<ManifestEntry>,
    skipped: Vec<String>,
    config: GbmConfig,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    predicate_id: PredicateId,
    predicate: String,
    file: String,
}

fn model_file(p: PredicateId) -> String {
    format!("pred_{:03}.gbm", p.0)
}

fn save_models(
    dir: &Path,
    kind: &str,
    models: &BTreeMap<PredicateId, GbmModel>,
    names: &[String],
    fingerprint: &str,
    skipped: &[String],
    config: &GbmConfig,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (&p, m) in models {
        let file = model_file(p);
        gbm::save_model(m, &dir.join(&file))?;
        entries.push(ManifestEntry {
            predicate_id: p,
            predicate: names.get(p.0).cloned().unwrap_or_default(),
            file,
        });
    }
    let manifest = BankManifest {
        kind: kind.to_string(),
        fingerprint: fingerprint.to_string(),
        predicates: names.to_vec(),
        models: entries,
        skipped: skipped.to_vec(),
        config: config.clone(),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

fn load_models(dir: &Path, kind: &str) -> Result<(BankManifest, BTreeMap<PredicateId, GbmModel>)> {
    let manifest: BankManifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    if manifest.kind != kind {
        return Err(StageError::Manifest(format!("expected a {kind} directory, found {}", manifest.kind)));
    }
    let mut models = BTreeMap::new();
    for e in &manifest.models {
        if e.file.contains(['/', '\\']) {
            return Err(StageError::Manifest(format!("model file {:?} is not a plain file name", e.file)));
        }
        let m = gbm::load_model(&dir.join(&e.file))?;
        if m.fingerprint() != manifest.fingerprint {
            return Err(StageError::FingerprintMismatch {
                expected: manifest.fingerprint.clone(),
                found: m.fingerprint().to_string(),
            });
        }
        models.insert(e.predicate_id, m);
    }
    Ok((manifest, models))
}

impl RelationshipModelBank {
    pub fn get(&self, p: PredicateId) -> Option<&GbmModel> {
        self.models.get(&p)
    }

    pub fn predicates(&self) -> impl Iterator<Item = PredicateId> + '_ {
        self.models.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Predicates without a model because their training data had no positives.
    pub fn skipped(&self) -> &[String] {
        &self.skipped
    }

    pub fn config(&self) -> &GbmConfig {
        &self.config
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_models(
            dir,
            "stage2",
            &self.models,
            &self.predicate_names,
            &self.fingerprint,
            &self.skipped,
            &self.config,
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (m, models) = load_models(dir, "stage2")?;
        Ok(RelationshipModelBank {
            models,
            predicate_names: m.predicates,
            fingerprint: m.fingerprint,
            skipped: m.skipped,
            config: m.config,
        })
    }
}

/// Trains one binary model per predicate on ground-truth box pairs of the
/// stage-2 images, early-stopping on the validation images.
pub fn train_stage2(
    annotations: &AnnotationSet,
    stats: &SemanticStats,
    triplets: &TripletVocabulary,
    split: &SplitPlan,
    config: &Stage2Config,
) -> Result<RelationshipModelBank> {
    split.check_disjoint()?;
    if split.stage2().is_empty() {
        return Err(StageError::EmptySplit("stage-2"));
    }
    config.gbm.validate()?;
    let layout = stats.layout();
    let predicates: Vec<PredicateId> = if config.predicates.is_empty() {
        triplets.predicate_ids().collect()
    } else {
        config.predicates.clone()
    };
    let name = |p: PredicateId| triplets.predicate_name(p).unwrap_or("?").to_string();

    let trained: Vec<(PredicateId, Option<GbmModel>)> = predicates
        .par_iter()
        .map(|&p| -> Result<(PredicateId, Option<GbmModel>)> {
            let (xs, ys) = build_dataset(annotations, split.stage2(), p, stats, triplets);
            if !ys.contains(&1) {
                log::warn!("predicate {}: no positive training pairs, skipped", name(p));
                return Ok((p, None));
            }
            let x = to_matrix(&xs, layout.len())?;
            let (vx, vy) = build_dataset(annotations, split.validation(), p, stats, triplets);
            let vmat = if vx.is_empty() {
                None
            } else {
                Some(to_matrix(&vx, layout.len())?)
            };
            let validation = vmat.as_ref().map(|m| Validation {
                features: m,
                labels: &vy,
            });
            let model = gbm::train(&x, &ys, validation, &config.gbm).map_err(|source| StageError::Training {
                name: name(p),
                source,
            })?;
            log::info!(
                "predicate {}: {} pairs ({} positive), {} trees",
                name(p),
                ys.len(),
                ys.iter().filter(|&&y| y == 1).count(),
                model.trees().len()
            );
            Ok((p, Some(model.with_fingerprint(layout.fingerprint()))))
        })
        .collect::<Result<_>>()?;

    let mut models = BTreeMap::new();
    let mut skipped = Vec::new();
    for (p, m) in trained {
        match m {
            Some(m) => {
                models.insert(p, m);
            }
            None => skipped.push(name(p)),
        }
    }
    Ok(RelationshipModelBank {
        models,
        predicate_names: triplets.predicates().to_vec(),
        fingerprint: layout.fingerprint().to_string(),
        skipped,
        config: config.gbm.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    /// Instances scoring below this are dropped.
    pub floor: f64,
    /// Highest-scoring instances kept per image.
    pub top_m: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            floor: 1e-3,
            top_m: 200,
        }
    }
}

fn by_score_desc(a: &RelationInstance, b: &RelationInstance) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.sort_key().cmp(&b.sort_key()))
}

/// Scores every licensed ordered pair of each image's detections with the
/// bank; output is grouped by image id and sorted by score within an image.
pub fn score_pairs(
    bank: &RelationshipModelBank,
    detections: &[Detection],
    stats: &SemanticStats,
    triplets: &TripletVocabulary,
    config: &ScoreConfig,
) -> Result<Vec<RelationInstance>> {
    let layout = stats.layout();
    if layout.fingerprint() != bank.fingerprint() {
        return Err(StageError::FingerprintMismatch {
            expected: layout.fingerprint().to_string(),
            found: bank.fingerprint().to_string(),
        });
    }
    let mut by_image: BTreeMap<&str, Vec<Detection>> = BTreeMap::new();
    for d in detections {
        by_image.entry(d.image_id.as_str()).or_default().push(d.clone());
    }
    let per_image: Vec<Vec<RelationInstance>> = by_image
        .par_iter()
        .map(|(img, dets)| -> Result<Vec<RelationInstance>> {
            let mut out = Vec::new();
            for (&p, model) in &bank.models {
                for (s, o) in generate_candidates(dets, p, triplets) {
                    let score = model.predict(extract_features(&s, &o, stats).as_slice())?;
                    if score >= config.floor {
                        out.push(RelationInstance {
                            image_id: img.to_string(),
                            subject: s,
                            object: o,
                            predicate_id: p,
                            score,
                        });
                    }
                }
            }
            out.sort_by(by_score_desc);
            out.truncate(config.top_m);
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

// ---------------------------------------------------------------------------
// Visual scores

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingScorePolicy {
    /// Substitute [`NEUTRAL_SCORE`].
    #[default]
    Neutral,
    /// Drop the instance and record it.
    Strict,
}

impl std::str::FromStr for MissingScorePolicy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "neutral" => Ok(MissingScorePolicy::Neutral),
            "strict" => Ok(MissingScorePolicy::Strict),
            other => Err(format!("unknown policy {other:?} (expected neutral or strict)")),
        }
    }
}

/// A relation instance carrying both model scores; `instance.score` is left
/// untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredInstance {
    pub instance: RelationInstance,
    pub stage2: f64,
    pub visual: f64,
}

/// Key of an instance with no visual score.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MissingScore {
    pub image_id: String,
    pub subject: String,
    pub object: String,
    pub predicate: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct JoinOutcome {
    pub joined: Vec<ScoredInstance>,
    /// Instances without a table entry (dropped under the strict policy).
    pub missing: Vec<MissingScore>,
}

pub fn join_visual_scores(
    instances: Vec<RelationInstance>,
    table: &ScoreTable,
    triplets: &TripletVocabulary,
    policy: MissingScorePolicy,
) -> JoinOutcome {
    let mut out = JoinOutcome::default();
    for inst in instances {
        let pred = triplets.predicate_name(inst.predicate_id).unwrap_or("?");
        let visual = match table.get(&inst.image_id, &inst.subject.bbox, &inst.object.bbox, pred) {
            Some(v) => v,
            None => {
                out.missing.push(MissingScore {
                    image_id: inst.image_id.clone(),
                    subject: BoxKey::from_box(&inst.subject.bbox).to_string(),
                    object: BoxKey::from_box(&inst.object.bbox).to_string(),
                    predicate: pred.to_string(),
                });
                match policy {
                    MissingScorePolicy::Neutral => NEUTRAL_SCORE,
                    MissingScorePolicy::Strict => continue,
                }
            }
        };
        out.joined.push(ScoredInstance {
            stage2: inst.score,
            visual,
            instance: inst,
        });
    }
    if !out.missing.is_empty() {
        log::warn!("{} instances had no visual score ({:?} policy)", out.missing.len(), policy);
    }
    out
}

// ---------------------------------------------------------------------------
// Stage 3

pub fn average_baseline(stage2: f64, visual: f64) -> f64 {
    (stage2 + visual) / 2.0
}

/// Instances re-scored by the mean of their two scores.
pub fn average_instances(joined: &[ScoredInstance]) -> Vec<RelationInstance> {
    rescore(joined, |j| average_baseline(j.stage2, j.visual))
}

/// Instances re-scored by their visual score alone.
pub fn visual_instances(joined: &[ScoredInstance]) -> Vec<RelationInstance> {
    rescore(joined, |j| j.visual)
}

fn rescore(joined: &[ScoredInstance], f: impl Fn(&ScoredInstance) -> f64) -> Vec<RelationInstance> {
    joined
        .iter()
        .map(|j| RelationInstance {
            score: f(j),
            ..j.instance.clone()
        })
        .collect()
}

/// One labeled aggregator training example.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorSample {
    pub predicate: PredicateId,
    pub stage2: f64,
    pub visual: f64,
    pub features: PairFeatureVector,
    pub label: u8,
}

/// Aggregator input row: `[stage2, visual, features...]`.
pub fn aggregator_row(stage2: f64, visual: f64, features: &PairFeatureVector) -> Vec<f32> {
    let mut row = Vec::with_capacity(features.as_slice().len() + 2);
    row.push(stage2 as f32);
    row.push(visual as f32);
    row.extend_from_slice(features.as_slice());
    row
}

/// Labeled stage-3 examples: ground-truth candidate pairs of `images`, scored
/// by the bank and joined with the visual table.
pub fn stage3_samples(
    bank: &RelationshipModelBank,
    annotations: &AnnotationSet,
    images: &BTreeSet<String>,
    stats: &SemanticStats,
    triplets: &TripletVocabulary,
    table: &ScoreTable,
    policy: MissingScorePolicy,
) -> Result<Vec<AggregatorSample>> {
    let mut out = Vec::new();
    let mut missing = 0usize;
    for img in images {
        for (&p, model) in &bank.models {
            let pred = triplets.predicate_name(p).unwrap_or("?");
            let cands = generate_candidates(annotations.boxes(img), p, triplets);
            for ((s, o), label) in label_candidates(cands, annotations.relations(img), p, LabelMatch::Exact) {
                let features = extract_features(&s, &o, stats);
                let stage2 = model.predict(features.as_slice())?;
                let visual = match table.get(img, &s.bbox, &o.bbox, pred) {
                    Some(v) => v,
                    None => {
                        missing += 1;
                        match policy {
                            MissingScorePolicy::Neutral => NEUTRAL_SCORE,
                            MissingScorePolicy::Strict => continue,
                        }
                    }
                };
                out.push(AggregatorSample {
                    predicate: p,
                    stage2,
                    visual,
                    features,
                    label,
                });
            }
        }
    }
    if missing > 0 {
        log::warn!("{missing} stage-3 pairs had no visual score ({policy:?} policy)");
    }
    Ok(out)
}

/// Stage-3 models, one per predicate, over `[stage2, visual, features]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorModel {
    models: BTreeMap<PredicateId, GbmModel>,
    predicate_names: Vec<String>,
    layout: FeatureLayout,
    config: GbmConfig,
}

impl AggregatorModel {
    pub fn get(&self, p: PredicateId) -> Option<&GbmModel> {
        self.models.get(&p)
    }

    pub fn layout(&self) -> &FeatureLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// Saves to a directory; the manifest fingerprint is that of the prefixed layout.
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_models(
            dir,
            "aggregator",
            &self.models,
            &self.predicate_names,
            self.layout.fingerprint(),
            &[],
            &self.config,
        )?;
        write_json(&dir.join("layout.json"), &self.layout)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (m, models) = load_models(dir, "aggregator")?;
        let layout: FeatureLayout = serde_json::from_slice(&std::fs::read(dir.join("layout.json"))?)?;
        if layout.fingerprint() != m.fingerprint {
            return Err(StageError::FingerprintMismatch {
                expected: m.fingerprint,
                found: layout.fingerprint().to_string(),
            });
        }
        Ok(AggregatorModel {
            models,
            predicate_names: m.predicates,
            layout,
            config: m.config,
        })
    }
}

/// Trains one gbtree model per predicate present in `samples`. Predicates
/// with no samples get no model and fall back to their stage-2 score.
pub fn train_aggregator(
    samples: &[AggregatorSample],
    feature_layout: &FeatureLayout,
    triplets: &TripletVocabulary,
    config: &GbmConfig,
) -> Result<AggregatorModel> {
    if config.max_depth > AGGREGATOR_MAX_DEPTH {
        return Err(StageError::AggregatorTooDeep(config.max_depth));
    }
    config.validate()?;
    let layout = feature_layout.with_prefix(&AGGREGATOR_PREFIX);
    let mut grouped: BTreeMap<PredicateId, Vec<&AggregatorSample>> = BTreeMap::new();
    for s in samples {
        if s.features.as_slice().len() != feature_layout.len() {
            return Err(GbmError::FeatureLengthMismatch {
                expected: feature_layout.len(),
                got: s.features.as_slice().len(),
            }
            .into());
        }
        grouped.entry(s.predicate).or_default().push(s);
    }
    let trained: Vec<(PredicateId, GbmModel)> = grouped
        .par_iter()
        .map(|(&p, group)| -> Result<(PredicateId, GbmModel)> {
            let data: Vec<f32> = group
                .iter()
                .flat_map(|s| aggregator_row(s.stage2, s.visual, &s.features))
                .collect();
            let labels: Vec<u8> = group.iter().map(|s| s.label).collect();
            let x = DenseMatrix::new(data, layout.len())?;
            let model = gbm::train(&x, &labels, None, config).map_err(|source| StageError::Training {
                name: triplets.predicate_name(p).unwrap_or("?").to_string(),
                source,
            })?;
            Ok((p, model.with_fingerprint(layout.fingerprint())))
        })
        .collect::<Result<_>>()?;
    Ok(AggregatorModel {
        models: trained.into_iter().collect(),
        predicate_names: triplets.predicates().to_vec(),
        layout,
        config: config.clone(),
    })
}

/// Re-scores joined instances with the aggregator.
pub fn aggregate(model: &AggregatorModel, joined: &[ScoredInstance], stats: &SemanticStats) -> Result<Vec<RelationInstance>> {
    let expected = stats.layout().with_prefix(&AGGREGATOR_PREFIX);
    if expected.fingerprint() != model.layout.fingerprint() {
        return Err(StageError::FingerprintMismatch {
            expected: expected.fingerprint().to_string(),
            found: model.layout.fingerprint().to_string(),
        });
    }
    joined
        .par_iter()
        .map(|j| {
            let score = match model.models.get(&j.instance.predicate_id) {
                Some(m) => {
                    let f = extract_features(&j.instance.subject, &j.instance.object, stats);
                    m.predict(&aggregator_row(j.stage2, j.visual, &f))?
                }
                None => j.stage2,
            };
            Ok(RelationInstance {
                score,
                ..j.instance.clone()
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bbox::BoundingBox;
    use crate::features::fit_semantic_stats;
    use crate::gbm::{GbmModel, RegressionTree};
    use crate::types::{ClassId, Triplet};

    fn vocab() -> TripletVocabulary {
        let mut t = TripletVocabulary::new();
        let p = t.intern_predicate("on");
        t.insert(Triplet {
            subject: ClassId(0),
            predicate: p,
            object: ClassId(1),
        });
        t
    }

    fn det(img: &str, k: usize, b: [f64; 4]) -> Detection {
        Detection::ground_truth(img, ClassId(k), BoundingBox::from_array(b).unwrap())
    }

    fn tiny_stats() -> SemanticStats {
        let r = RelationInstance {
            image_id: "a".into(),
            subject: det("a", 0, [0.1, 0.1, 0.3, 0.3]),
            object: det("a", 1, [0.2, 0.2, 0.6, 0.6]),
            predicate_id: PredicateId(0),
            score: 1.0,
        };
        fit_semantic_stats(&AnnotationSet::new(2, vec![], vec![r]), &vocab()).unwrap()
    }

    fn constant_bank(stats: &SemanticStats) -> RelationshipModelBank {
        let mut m = GbmModel::constant(0.0, stats.layout().len());
        m.push_tree(RegressionTree::leaf(0.0), 1.0);
        RelationshipModelBank {
            models: [(PredicateId(0), m.with_fingerprint(stats.layout().fingerprint()))].into(),
            predicate_names: vec!["on".into()],
            fingerprint: stats.layout().fingerprint().to_string(),
            skipped: vec![],
            config: GbmConfig::default(),
        }
    }

    #[test]
    fn split_by_image_is_disjoint_and_seeded() {
        let ids: Vec<String> = (0..100).map(|i| format!("img{i:03}")).collect();
        let props = SplitProportions {
            stage2: 0.5,
            stage3: 0.3,
            validation: 0.2,
        };
        let a = SplitPlan::by_image(ids.iter().map(String::as_str), props, 9).unwrap();
        let b = SplitPlan::by_image(ids.iter().map(String::as_str), props, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.stage2().len(), a.stage3().len(), a.validation().len()), (50, 30, 20));
        a.check_disjoint().unwrap();
        let small = SplitPlan::by_image(ids.iter().take(10).map(String::as_str), SplitProportions::default(), 1).unwrap();
        assert_eq!((small.stage3().len(), small.validation().len()), (1, 1));
    }

    #[test]
    fn leakage_is_rejected() {
        let s: BTreeSet<String> = ["x".to_string()].into();
        assert!(matches!(
            SplitPlan::new(s.clone(), BTreeSet::new(), s),
            Err(StageError::SplitLeakage(img)) if img == "x"
        ));
    }

    #[test]
    fn score_pairs_basics() {
        let stats = tiny_stats();
        let bank = constant_bank(&stats);
        let cfg = ScoreConfig::default();
        assert!(score_pairs(&bank, &[], &stats, &vocab(), &cfg).unwrap().is_empty());
        let dets = [det("q", 0, [0.0, 0.0, 0.2, 0.2]), det("q", 1, [0.5, 0.5, 0.9, 0.9])];
        let out = score_pairs(&bank, &dets, &stats, &vocab(), &cfg).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.5);
        assert_eq!(out[0].subject, dets[0]);

        let mut other = bank.clone();
        other.fingerprint = "deadbeef".into();
        assert!(matches!(
            score_pairs(&other, &dets, &stats, &vocab(), &cfg),
            Err(StageError::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn join_policies() {
        let inst = RelationInstance {
            image_id: "i".into(),
            subject: det("i", 0, [0.1, 0.1, 0.2, 0.2]),
            object: det("i", 1, [0.3, 0.3, 0.5, 0.5]),
            predicate_id: PredicateId(0),
            score: 0.66,
        };
        let mut table = ScoreTable::new();
        table.insert(ScoreTable::key("i", &inst.subject.bbox, &inst.object.bbox, "on"), 0.34);
        let hit = join_visual_scores(vec![inst.clone()], &table, &vocab(), MissingScorePolicy::Neutral);
        assert_eq!(hit.joined[0].visual, 0.34);
        assert_eq!(average_baseline(hit.joined[0].stage2, hit.joined[0].visual), 0.5);

        let empty = ScoreTable::new();
        let neutral = join_visual_scores(vec![inst.clone()], &empty, &vocab(), MissingScorePolicy::Neutral);
        assert_eq!(neutral.joined[0].visual, 0.5);
        let strict = join_visual_scores(vec![inst], &empty, &vocab(), MissingScorePolicy::Strict);
        assert!(strict.joined.is_empty());
        assert_eq!(strict.missing.len(), 1);
    }

    #[test]
    fn average_baseline_properties() {
        assert_eq!(average_baseline(0.3, 0.3), 0.3);
        assert_eq!(average_baseline(0.2, 0.9), average_baseline(0.9, 0.2));
    }

    #[test]
    fn aggregator_rejects_deep_trees_and_constant_labels() {
        let stats = tiny_stats();
        let layout = stats.layout();
        let deep = GbmConfig {
            max_depth: 9,
            ..GbmConfig::aggregator()
        };
        assert!(matches!(
            train_aggregator(&[], &layout, &vocab(), &deep),
            Err(StageError::AggregatorTooDeep(9))
        ));
        let f = extract_features(&det("a", 0, [0.1, 0.1, 0.3, 0.3]), &det("a", 1, [0.2, 0.2, 0.6, 0.6]), &stats);
        let samples: Vec<AggregatorSample> = (0..4)
            .map(|i| AggregatorSample {
                predicate: PredicateId(0),
                stage2: i as f64 / 4.0,
                visual: 0.5,
                features: f.clone(),
                label: 0,
            })
            .collect();
        let err = train_aggregator(&samples, &layout, &vocab(), &GbmConfig::aggregator()).unwrap_err();
        assert_eq!(err.kind(), "SingleClassTraining");
    }
}
