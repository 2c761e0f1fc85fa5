//! Synthetic rule-based corpus and the end-to-end pipeline run on it.
//!
//! Each image holds 4 to 7 boxes of six classes. Three predicates are
//! planted as geometric rules over a margin `m`:
//!
//! | predicate | licensed pairs | margin |
//! |-----------|----------------|--------|
//! | `above` | all class pairs | `delta_cy` (object center lower than subject center) |
//! | `next_to` | all class pairs | `min(0.1 - abs(delta_cy), 0.3 - abs(delta_cx))` |
//! | `holds` | person or dog holding cup or ball | `inter_over_obj - 0.5` |
//!
//! The relation holds when `m > band` and fails when `m < -band`. Inside the
//! band a latent fair coin decides. Geometry alone cannot
//! resolve the band. The synthetic visual score can: inside the band it
//! reveals the coin, outside it is only weakly informative.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BoundingBox;
use crate::eval::{map_rel, ApTable, EvalError, MapReport, MatchConfig};
use crate::features::{fit_semantic_stats, generate_candidates, FeatureError, SemanticStats};
use crate::gbm::{Booster, GbmConfig};
use crate::ingest::{AnnotationSet, ScoreTable};
use crate::sampler::{sample_images, ClassCap, ClassDistribution, SamplerConfig, SamplerError};
use crate::stages::{
    aggregate, average_instances, join_visual_scores, score_pairs, stage3_samples, train_aggregator, train_stage2,
    visual_instances, AggregatorModel, MissingScorePolicy, RelationshipModelBank, ScoreConfig, SplitPlan,
    SplitProportions, Stage2Config, StageError,
};
use crate::types::{ClassId, ClassVocabulary, Detection, PredicateId, RelationInstance, Triplet, TripletVocabulary};

pub const CLASSES: [&str; 6] = ["person", "dog", "table", "chair", "cup", "ball"];
pub const PREDICATES: [&str; 3] = ["above", "next_to", "holds"];

/// Relative draw frequency and side-length range per class.
const CLASS_SHAPES: [(f64, f64, f64); 6] = [
    (4.0, 0.15, 0.35),
    (1.5, 0.10, 0.25),
    (1.5, 0.20, 0.40),
    (1.0, 0.10, 0.25),
    (2.0, 0.04, 0.10),
    (1.0, 0.04, 0.10),
];
const HOLDERS: [usize; 2] = [0, 1];
const HELD: [usize; 2] = [4, 5];

#[derive(Debug, Error)]
pub enum DemoError {
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

impl DemoError {
    pub fn kind(&self) -> &'static str {
        match self {
            DemoError::Stage(e) => e.kind(),
            DemoError::Feature(e) => e.kind(),
            DemoError::Eval(e) => e.kind(),
            DemoError::Sampler(e) => e.kind(),
        }
    }

    pub fn module(&self) -> &'static str {
        match self {
            DemoError::Stage(_) => "stages",
            DemoError::Feature(_) => "features",
            DemoError::Eval(_) => "eval",
            DemoError::Sampler(_) => "sampler",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub num_images: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Half-width of the ambiguous margin band, per predicate.
    pub band: [f64; 3],
    /// Probability that a cup or ball is placed inside a person or dog.
    pub held_probability: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            num_images: 500,
            min_objects: 4,
            max_objects: 7,
            band: [0.02, 0.015, 0.08],
            held_probability: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub classes: ClassVocabulary,
    pub triplets: TripletVocabulary,
    pub annotations: AnnotationSet,
    /// Visual score of every licensed ground-truth pair and predicate.
    pub visual: ScoreTable,
}

pub fn vocabularies() -> (ClassVocabulary, TripletVocabulary) {
    let classes = ClassVocabulary::from_names(CLASSES).expect("distinct class names");
    let mut triplets = TripletVocabulary::new();
    for p in PREDICATES {
        triplets.intern_predicate(p);
    }
    let pid = |n: &str| triplets.predicate_id(n).expect("interned");
    let (above, next_to, holds) = (pid("above"), pid("next_to"), pid("holds"));
    for s in 0..CLASSES.len() {
        for o in 0..CLASSES.len() {
            for p in [above, next_to] {
                triplets.insert(Triplet {
                    subject: ClassId(s),
                    predicate: p,
                    object: ClassId(o),
                });
            }
        }
    }
    for s in HOLDERS {
        for o in HELD {
            triplets.insert(Triplet {
                subject: ClassId(s),
                predicate: holds,
                object: ClassId(o),
            });
        }
    }
    (classes, triplets)
}

/// The planted rule's margin for `predicate` (0 = above, 1 = next_to, 2 = holds).
pub fn rule_margin(predicate: PredicateId, s: &BoundingBox, o: &BoundingBox) -> f64 {
    let (scx, scy) = s.center();
    let (ocx, ocy) = o.center();
    match predicate.0 {
        0 => ocy - scy,
        1 => (0.1 - (ocy - scy).abs()).min(0.3 - (ocx - scx).abs()),
        _ => s.intersection_area(o) / o.area().max(1e-12) - 0.5,
    }
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

fn random_box(rng: &mut ChaCha8Rng, class: usize, inside: Option<&BoundingBox>) -> BoundingBox {
    let (_, lo, hi) = CLASS_SHAPES[class];
    let w = rng.random_range(lo..hi);
    let h = rng.random_range(lo..hi);
    let (cx, cy) = match inside {
        Some(holder) => (
            rng.random_range(holder.x_min()..holder.x_max()),
            rng.random_range(holder.y_min()..holder.y_max()),
        ),
        None => (rng.random_range(w / 2.0..1.0 - w / 2.0), rng.random_range(h / 2.0..1.0 - h / 2.0)),
    };
    let x0 = round4((cx - w / 2.0).clamp(0.0, 1.0 - w));
    let y0 = round4((cy - h / 2.0).clamp(0.0, 1.0 - h));
    BoundingBox::new(x0, y0, round4(x0 + w), round4(y0 + h)).expect("generated box is valid")
}

fn draw_class(rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = CLASS_SHAPES.iter().map(|c| c.0).sum();
    let mut u = rng.random::<f64>() * total;
    for (k, c) in CLASS_SHAPES.iter().enumerate() {
        if u < c.0 {
            return k;
        }
        u -= c.0;
    }
    CLASS_SHAPES.len() - 1
}

pub fn generate_corpus(config: &CorpusConfig) -> SyntheticCorpus {
    let (classes, triplets) = vocabularies();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let weak = Normal::new(0.0, 0.25).expect("valid normal");
    let mut boxes = Vec::new();
    let mut relations = Vec::new();
    let mut visual = ScoreTable::new();
    for i in 0..config.num_images {
        let image_id = format!("img{i:04}");
        let n = rng.random_range(config.min_objects..=config.max_objects);
        let mut dets: Vec<Detection> = Vec::with_capacity(n);
        while dets.len() < n {
            let k = draw_class(&mut rng);
            let holder = if HELD.contains(&k) && rng.random::<f64>() < config.held_probability {
                let holders: Vec<&Detection> = dets.iter().filter(|d| HOLDERS.contains(&d.class_id.0)).collect();
                (!holders.is_empty()).then(|| holders[rng.random_range(0..holders.len())].bbox)
            } else {
                None
            };
            let b = random_box(&mut rng, k, holder.as_ref());
            if dets.iter().any(|d| d.bbox == b) {
                continue;
            }
            dets.push(Detection::ground_truth(image_id.clone(), ClassId(k), b));
        }
        for p in triplets.predicate_ids() {
            let band = config.band[p.0];
            for (s, o) in generate_candidates(&dets, p, &triplets) {
                let m = rule_margin(p, &s.bbox, &o.bbox);
                let ambiguous = m.abs() <= band;
                let coin = rng.random::<bool>();
                let label = if ambiguous { coin } else { m > 0.0 };
                let sign = if label { 1.0 } else { -1.0 };
                let v: f64 = if ambiguous {
                    0.5 + sign * rng.random_range(0.25..0.45)
                } else {
                    0.5 + 0.15 * sign + weak.sample(&mut rng)
                };
                let pred = triplets.predicate_name(p).expect("known predicate");
                visual.insert(ScoreTable::key(&image_id, &s.bbox, &o.bbox, pred), round4(v.clamp(0.0, 1.0)));
                if label {
                    relations.push(RelationInstance {
                        image_id: image_id.clone(),
                        subject: s,
                        object: o,
                        predicate_id: p,
                        score: 1.0,
                    });
                }
            }
        }
        boxes.extend(dets);
    }
    SyntheticCorpus {
        annotations: AnnotationSet::new(classes.len(), boxes, relations),
        classes,
        triplets,
        visual,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoConfig {
    pub corpus: CorpusConfig,
    pub proportions: SplitProportions,
    pub stage2: GbmConfig,
    pub aggregator: GbmConfig,
    pub score: ScoreConfig,
    pub policy: MissingScorePolicy,
    pub sampler_cap: ClassCap,
    pub matching: MatchConfig,
}

impl DemoConfig {
    /// Desk-scale settings; every random stream derives from `seed`.
    pub fn with_seed(seed: u64) -> Self {
        DemoConfig {
            corpus: CorpusConfig {
                seed,
                ..CorpusConfig::default()
            },
            proportions: SplitProportions {
                stage2: 0.5,
                stage3: 0.3,
                validation: 0.2,
            },
            stage2: GbmConfig {
                booster: Booster::Dart,
                max_depth: 6,
                rounds: 200,
                learning_rate: 0.3,
                subsample: 0.8,
                colsample_bytree: 0.8,
                gamma: 0.0,
                lambda: 1.0,
                early_stopping_interval: 20,
                dart_drop_rate: 0.02,
                seed: seed.wrapping_add(1),
                allow_single_class: false,
            },
            aggregator: GbmConfig {
                booster: Booster::GbTree,
                max_depth: 4,
                rounds: 150,
                learning_rate: 0.1,
                subsample: 0.8,
                colsample_bytree: 0.8,
                gamma: 0.0,
                lambda: 1.0,
                early_stopping_interval: 20,
                dart_drop_rate: 0.0,
                seed: seed.wrapping_add(2),
                allow_single_class: false,
            },
            score: ScoreConfig::default(),
            policy: MissingScorePolicy::Neutral,
            sampler_cap: ClassCap::Finite(100),
            matching: MatchConfig::default(),
        }
    }
}

/// Column labels of the report table, in order.
pub const REPORT_COLUMNS: [&str; 4] = ["Spatio-Semantic", "Visual", "Avg.", "3rd Stage"];

#[derive(Debug, Clone)]
pub struct DemoOutcome {
    pub corpus: SyntheticCorpus,
    pub split: SplitPlan,
    pub stats: SemanticStats,
    pub sampled_images: Vec<String>,
    pub sampling: ClassDistribution,
    pub bank: RelationshipModelBank,
    pub aggregator: AggregatorModel,
    pub stage2_predictions: Vec<RelationInstance>,
    pub final_predictions: Vec<RelationInstance>,
    pub reports: [MapReport; 4],
    pub table: ApTable,
}

impl DemoOutcome {
    pub fn stage2_map(&self) -> f64 {
        self.reports[0].map
    }

    pub fn average_map(&self) -> f64 {
        self.reports[2].map
    }

    pub fn aggregate_map(&self) -> f64 {
        self.reports[3].map
    }

    /// Deterministic plain-text report.
    pub fn report_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "images: {} stage-2 / {} stage-3 / {} validation\n",
            self.split.stage2().len(),
            self.split.stage3().len(),
            self.split.validation().len()
        ));
        let probs: Vec<String> = self
            .corpus
            .classes
            .entries()
            .iter()
            .zip(self.sampling.probabilities())
            .map(|(c, p)| format!("{}={p:.4}", c.name))
            .collect();
        out.push_str(&format!("sampling distribution: {}\n", probs.join(" ")));
        out.push_str(&format!(
            "stage-2 models: {} (skipped: {})\n",
            self.bank.len(),
            if self.bank.skipped().is_empty() {
                "none".to_string()
            } else {
                self.bank.skipped().join(", ")
            }
        ));
        out.push_str(&format!("validation predictions: {}\n\n", self.stage2_predictions.len()));
        out.push_str(&self.table.to_text());
        out
    }
}

/// Runs every stage end to end on a generated corpus.
pub fn run_demo(config: &DemoConfig) -> Result<DemoOutcome, DemoError> {
    let corpus = generate_corpus(&config.corpus);
    let (ann, triplets) = (&corpus.annotations, &corpus.triplets);
    let split = SplitPlan::by_image(ann.image_ids(), config.proportions, config.corpus.seed)?;
    split.check_disjoint()?;

    let stage2_set = ann.subset(split.stage2());
    let sampler_cfg = SamplerConfig {
        cap: config.sampler_cap,
        seed: config.corpus.seed,
    };
    let sampling = crate::sampler::class_probabilities(stage2_set.class_image_counts(), &sampler_cfg)?;
    let sampled_images = sample_images(&stage2_set, &sampler_cfg, split.stage2().len())?;

    let stats = fit_semantic_stats(&stage2_set, triplets)?;
    let bank = train_stage2(
        ann,
        &stats,
        triplets,
        &split,
        &Stage2Config {
            gbm: config.stage2.clone(),
            predicates: Vec::new(),
        },
    )?;

    let samples = stage3_samples(&bank, ann, split.stage3(), &stats, triplets, &corpus.visual, config.policy)?;
    let aggregator = train_aggregator(&samples, &stats.layout(), triplets, &config.aggregator)?;

    let valid: BTreeSet<String> = split.validation().clone();
    let detections: Vec<Detection> = valid.iter().flat_map(|i| ann.boxes(i).iter().cloned()).collect();
    let gt: Vec<RelationInstance> = valid.iter().flat_map(|i| ann.relations(i).iter().cloned()).collect();
    let stage2_predictions = score_pairs(&bank, &detections, &stats, triplets, &config.score)?;
    let joined = join_visual_scores(stage2_predictions.clone(), &corpus.visual, triplets, config.policy).joined;
    let final_predictions = aggregate(&aggregator, &joined, &stats)?;

    let m = &config.matching;
    let reports = [
        map_rel(&stage2_predictions, &gt, m)?,
        map_rel(&visual_instances(&joined), &gt, m)?,
        map_rel(&average_instances(&joined), &gt, m)?,
        map_rel(&final_predictions, &gt, m)?,
    ];
    let table = ApTable::new(
        &[
            (REPORT_COLUMNS[0], &reports[0]),
            (REPORT_COLUMNS[1], &reports[1]),
            (REPORT_COLUMNS[2], &reports[2]),
            (REPORT_COLUMNS[3], &reports[3]),
        ],
        triplets,
        *m,
    );
    Ok(DemoOutcome {
        corpus,
        split,
        stats,
        sampled_images,
        sampling,
        bank,
        aggregator,
        stage2_predictions,
        final_predictions,
        reports,
        table,
    })
}
