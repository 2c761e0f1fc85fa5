//! Command-line front end. `main.rs` only parses arguments and maps
//! [`CliError`] to an exit code; everything else lives here so it can be
//! driven from tests.
//!
//! Every command that writes an artifact `<out>` also writes
//! `<out>.config.json` with the parsed arguments. The echo also records the
//! seed and crate version.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::checkpoint::{
    expand_attribute_head, read_store, transfer_head, write_store, CheckpointError, ClassMap, HeadSpec, InitSpec,
    TransferSummary, UnmappedRows,
};
use crate::demo::{run_demo, DemoConfig, DemoError};
use crate::ensemble::{weighted_nms, EnsembleError, ModelOutput, NmsConfig};
use crate::eval::{map_rel, ApTable, EvalError, MatchConfig};
use crate::features::{
    extract_features, fit_semantic_stats, generate_candidates, label_candidates, visual_crop, write_crops_jsonl,
    write_feature_matrix, FeatureError, FeatureRow, LabelMatch, SemanticStats,
};
use crate::gbm::{Booster, GbmConfig, GbmError};
use crate::ingest::{self, AnnotationSet, IngestError};
use crate::sampler::{class_probabilities, sample_images, ClassCap, SamplerConfig, SamplerError, RNG_ALGORITHM};
use crate::stages::{
    aggregate, average_instances, join_visual_scores, score_pairs, stage3_samples, train_aggregator, train_stage2,
    MissingScorePolicy, RelationshipModelBank, ScoreConfig, SplitPlan, SplitProportions, Stage2Config, StageError,
};
use crate::types::{ClassId, ClassVocabulary, PredicateId, TripletVocabulary};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Gbm(#[from] GbmError),
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Demo(#[from] DemoError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "UsageError",
            CliError::Ingest(e) => e.kind(),
            CliError::Sampler(e) => e.kind(),
            CliError::Checkpoint(e) => e.kind(),
            CliError::Ensemble(e) => e.kind(),
            CliError::Feature(e) => e.kind(),
            CliError::Gbm(e) => e.kind(),
            CliError::Stage(e) => e.kind(),
            CliError::Eval(e) => e.kind(),
            CliError::Demo(e) => e.kind(),
            CliError::Io { .. } => "Io",
            CliError::Json(_) => "Json",
        }
    }

    /// Module the error originated in.
    pub fn module(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "cli",
            CliError::Ingest(_) => "ingest",
            CliError::Sampler(_) => "sampler",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::Ensemble(_) => "ensemble",
            CliError::Feature(_) => "features",
            CliError::Gbm(_) => "gbm",
            CliError::Stage(_) => "stages",
            CliError::Eval(_) => "eval",
            CliError::Demo(e) => e.module(),
            CliError::Io { .. } | CliError::Json(_) => "cli",
        }
    }

    /// 2 for usage errors, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    /// Single-line JSON error record for stderr.
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": self.kind(),
            "module": self.module(),
            "message": self.to_string(),
        })
        .to_string()
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "vrdet", version, about = "Visual relationship detection pipeline tools")]
pub struct Cli {
    /// Seed for every random stream of the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw class-balanced image ids.
    Sample(SampleArgs),
    /// Transfer classification/regression head rows between class sets.
    Pwt(PwtArgs),
    /// Fuse detection files with weighted NMS.
    Nms(NmsArgs),
    /// Export pair feature matrices and visual crop geometry.
    Features(FeaturesArgs),
    /// Train per-predicate spatio-semantic models.
    Train(TrainArgs),
    /// Score candidate pairs of detections with a model bank.
    Score(ScoreArgs),
    /// Train the stage-3 aggregator and re-score predictions.
    Aggregate(AggregateArgs),
    /// Compute per-predicate AP and mAP.
    Eval(EvalArgs),
    /// Run the full pipeline on a generated corpus.
    Demo(DemoArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct VocabArgs {
    /// Class vocabulary CSV (`LabelName,Kind`).
    #[arg(long)]
    pub classes: PathBuf,
    /// Triplet vocabulary CSV (`LabelName1,RelationshipLabel,LabelName2`).
    #[arg(long)]
    pub triplets: PathBuf,
}

impl VocabArgs {
    fn load(&self) -> Result<(ClassVocabulary, TripletVocabulary)> {
        let classes = ingest::read_class_vocabulary(&self.classes)?;
        let triplets = ingest::read_triplet_vocabulary(&self.triplets, &classes)?;
        Ok((classes, triplets))
    }
}

#[derive(Debug, Args, Serialize)]
pub struct AnnotationArgs {
    /// Ground-truth relations CSV.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Optional ground-truth boxes CSV adding objects without relations.
    #[arg(long)]
    pub boxes: Option<PathBuf>,
}

impl AnnotationArgs {
    fn load(&self, classes: &ClassVocabulary, triplets: &TripletVocabulary) -> Result<AnnotationSet> {
        let mut set = ingest::read_relations(&self.annotations, classes, triplets)?;
        if let Some(b) = &self.boxes {
            set = set.with_boxes(ingest::read_detections(b, classes)?);
        }
        if set.duplicate_relations() > 0 {
            log::warn!("{} duplicate ground-truth relations ignored", set.duplicate_relations());
        }
        Ok(set)
    }
}

/// Overrides applied on top of a preset.
#[derive(Debug, Args, Serialize, Default)]
pub struct GbmArgs {
    #[arg(long)]
    pub booster: Option<Booster>,
    #[arg(long)]
    pub max_depth: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub subsample: Option<f64>,
    #[arg(long)]
    pub colsample: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub early_stopping: Option<usize>,
    #[arg(long)]
    pub drop_rate: Option<f64>,
    /// Train on single-class labels instead of failing.
    #[arg(long)]
    pub allow_single_class: bool,
}

impl GbmArgs {
    fn apply(&self, mut c: GbmConfig, seed: u64) -> Result<GbmConfig> {
        macro_rules! set {
            ($field:ident, $arg:ident) => {
                if let Some(v) = self.$arg {
                    c.$field = v;
                }
            };
        }
        set!(booster, booster);
        set!(max_depth, max_depth);
        set!(rounds, rounds);
        set!(learning_rate, learning_rate);
        set!(subsample, subsample);
        set!(colsample_bytree, colsample);
        set!(gamma, gamma);
        set!(lambda, lambda);
        set!(early_stopping_interval, early_stopping);
        set!(dart_drop_rate, drop_rate);
        c.allow_single_class |= self.allow_single_class;
        c.seed = seed;
        c.validate().map_err(|e| usage(e.to_string()))?;
        Ok(c)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    #[command(flatten)]
    pub vocab: VocabArgs,
    #[command(flatten)]
    pub annotations: AnnotationArgs,
    /// Per-class image cap N, or `inf`.
    #[arg(long, default_value = "3000")]
    pub cap_n: ClassCap,
    #[arg(long)]
    pub count: usize,
    /// Newline-delimited image ids; a `<out>.json` sidecar holds the distribution.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PwtArgs {
    /// Source `PWT1` store.
    #[arg(long)]
    pub src: PathBuf,
    /// Head as `WEIGHT,BIAS` or `WEIGHT,BIAS,regression`; repeatable.
    #[arg(long, required = true)]
    pub head: Vec<String>,
    /// Source class vocabulary CSV.
    #[arg(long)]
    pub src_classes: PathBuf,
    /// Task class vocabulary CSV.
    #[arg(long)]
    pub task_classes: Option<PathBuf>,
    /// JSON object `{"task class": "source class"}`.
    #[arg(long, conflicts_with = "attribute_pairs")]
    pub map: Option<PathBuf>,
    /// JSON list of `[object, attribute]` name pairs; builds an attribute head.
    #[arg(long)]
    pub attribute_pairs: Option<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    pub init_std: f32,
    #[arg(long, default_value_t = 0.0)]
    pub init_mean: f32,
    #[arg(long, default_value_t = 0.0)]
    pub init_bias: f32,
    /// Take unmapped rows from this store instead of random initialization.
    #[arg(long)]
    pub fallback: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct NmsArgs {
    /// Detection CSV with its model weight, as `PATH:WEIGHT`; repeatable.
    #[arg(long = "model", required = true)]
    pub models: Vec<String>,
    #[arg(long)]
    pub classes: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    #[arg(long, default_value_t = 0.001)]
    pub score_floor: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FeaturesArgs {
    #[command(flatten)]
    pub vocab: VocabArgs,
    #[command(flatten)]
    pub annotations: AnnotationArgs,
    /// Candidate detections; the ground-truth boxes when omitted.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// IoU a detected pair needs with a ground-truth pair to be labeled positive.
    #[arg(long, default_value_t = 0.5)]
    pub label_iou: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write visual crop geometry as JSONL.
    #[arg(long)]
    pub crops: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub vocab: VocabArgs,
    #[command(flatten)]
    pub annotations: AnnotationArgs,
    /// Existing split JSON; a fresh seeded split is made when omitted.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Split fractions as `stage2,stage3,validation` for a fresh split.
    #[arg(long, default_value = "0.96,0.03,0.01")]
    pub proportions: SplitProportions,
    /// Comma-separated predicate names to train; all when omitted.
    #[arg(long)]
    pub predicates: Option<String>,
    #[command(flatten)]
    pub gbm: GbmArgs,
    /// Output bank directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub vocab: VocabArgs,
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long, default_value_t = 1e-3)]
    pub floor: f64,
    #[arg(long, default_value_t = 200)]
    pub top_m: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AggregateArgs {
    #[command(flatten)]
    pub vocab: VocabArgs,
    #[command(flatten)]
    pub annotations: AnnotationArgs,
    #[arg(long)]
    pub bank: PathBuf,
    /// Split JSON; defaults to the one stored in the bank.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Visual score table CSV.
    #[arg(long)]
    pub visual_scores: PathBuf,
    /// Treatment of pairs missing from the score table: `neutral` or `strict`.
    #[arg(long, default_value = "neutral")]
    pub policy: MissingScorePolicy,
    /// Stage-2 predictions to re-score.
    #[arg(long)]
    pub pred: PathBuf,
    #[command(flatten)]
    pub gbm: GbmArgs,
    /// Also save the aggregator model directory here.
    #[arg(long)]
    pub model_out: Option<PathBuf>,
    /// Also write averaged-score predictions here.
    #[arg(long)]
    pub baseline_out: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub vocab: VocabArgs,
    /// Relation predictions CSV.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth relations CSV.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    /// Match regardless of predicate.
    #[arg(long)]
    pub ignore_predicate: bool,
    #[arg(long)]
    pub json_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct DemoArgs {
    /// Number of generated images.
    #[arg(long, default_value_t = 500)]
    pub images: usize,
    /// Directory that receives every demo artifact.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct RunConfig<'a, A: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    rng: &'a str,
    args: &'a A,
}

/// `<path>.config.json`, next to `path`.
pub fn config_echo_path(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{name}.config.json"))
}

fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(io_at(path))
}

fn echo_config<A: Serialize>(out: &Path, command: &str, seed: u64, args: &A) -> Result<()> {
    let cfg = RunConfig {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        rng: RNG_ALGORITHM,
        args,
    };
    write_json_file(&config_echo_path(out), &cfg)
}

/// Runs a parsed command line; text meant for the user goes to `stdout`.
pub fn run(cli: &Cli, stdout: &mut dyn std::io::Write) -> Result<()> {
    let seed = cli.seed;
    match &cli.command {
        Command::Sample(a) => cmd_sample(a, seed, stdout),
        Command::Pwt(a) => cmd_pwt(a, seed, stdout),
        Command::Nms(a) => cmd_nms(a, seed, stdout),
        Command::Features(a) => cmd_features(a, seed, stdout),
        Command::Train(a) => cmd_train(a, seed, stdout),
        Command::Score(a) => cmd_score(a, seed, stdout),
        Command::Aggregate(a) => cmd_aggregate(a, seed, stdout),
        Command::Eval(a) => cmd_eval(a, seed, stdout),
        Command::Demo(a) => cmd_demo(a, seed, stdout),
    }
}

fn say(stdout: &mut dyn std::io::Write, text: &str) -> Result<()> {
    stdout
        .write_all(text.as_bytes())
        .map_err(io_at(Path::new("<stdout>")))
}

pub fn cmd_sample(a: &SampleArgs, seed: u64, stdout: &mut dyn std::io::Write) -> Result<()> {
    let (classes, triplets) = a.vocab.load()?;
    let set = a.annotations.load(&classes, &triplets)?;
    let cfg = SamplerConfig { cap: a.cap_n, seed };
    let dist = class_probabilities(set.class_image_counts(), &cfg)?;
    let ids = sample_images(&set, &cfg, a.count)?;
    let mut text = ids.join("\n");
    text.push('\n');
    std::fs::write(&a.out, text).map_err(io_at(&a.out))?;
    let probabilities: BTreeMap<&str, f64> = classes
        .entries()
        .iter()
        .map(|c| c.name.as_str())
        .zip(dist.probabilities().iter().copied())
        .collect();
    let sidecar = serde_json::json!({
        "cap": a.cap_n,
        "seed": seed,
        "rng": RNG_ALGORITHM,
        "count": a.count,
        "probabilities": probabilities,
    });
    let name = a.out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    write_json_file(&a.out.with_file_name(format!("{name}.json")), &sidecar)?;
    echo_config(&a.out, "sample", seed, a)?;
    say(stdout, &format!("sampled {} image ids from {} images\n", ids.len(), set.num_images()))
}

fn parse_head(raw: &str) -> Result<HeadSpec> {
    let parts: Vec<&str> = raw.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [w, b] => Ok(HeadSpec::classification(*w, *b)),
        [w, b, "classification"] => Ok(HeadSpec::classification(*w, *b)),
        [w, b, "regression"] => Ok(HeadSpec::regression(*w, *b)),
        _ => Err(usage(format!(
            "--head expects WEIGHT,BIAS[,classification|regression], got {raw:?}"
        ))),
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(io_at(path))
}

pub fn cmd_pwt(a: &PwtArgs, seed: u64, stdout: &mut dyn std::io::Write) -> Result<()> {
    let heads: Vec<HeadSpec> = a.head.iter().map(|h| parse_head(h)).collect::<Result<_>>()?;
    let src = read_store(&a.src)?;
    let src_classes = ingest::read_class_vocabulary(&a.src_classes)?;
    let mut store = src.clone();
    let mut message = String::new();
    match (&a.map, &a.attribute_pairs) {
        (Some(map_path), None) => {
            let task_path = a
                .task_classes
                .as_ref()
                .ok_or_else(|| usage("--map requires --task-classes"))?;
            let task = ingest::read_class_vocabulary(task_path)?;
            let map = ClassMap::from_json_names(&read_text(map_path)?, &task, &src_classes)?;
            let fallback = a.fallback.as_ref().map(|p| read_store(p)).transpose()?;
            let mut summary: Option<TransferSummary> = None;
            for (i, head) in heads.iter().enumerate() {
                let init = InitSpec {
                    mean: a.init_mean,
                    std: a.init_std,
                    bias: a.init_bias,
                    seed: seed.wrapping_add(i as u64),
                };
                let unmapped = match &fallback {
                    Some(f) => UnmappedRows::Fallback(f),
                    None => UnmappedRows::Random(&init),
                };
                let (next, s) = transfer_head(&store, head, &map, task.len(), unmapped)?;
                store = next;
                summary = Some(s);
            }
            if let Some(s) = summary {
                log::info!("{s}");
                message = format!("{s}\n");
            }
        }
        (None, Some(pairs_path)) => {
            let names: Vec<(String, String)> = serde_json::from_str(&read_text(pairs_path)?)?;
            let task = a.task_classes.as_ref().map(|p| ingest::read_class_vocabulary(p)).transpose()?;
            let pairs: Vec<(ClassId, ClassId)> = names
                .iter()
                .enumerate()
                .map(|(i, (object, attribute))| {
                    let o = src_classes.id(object).ok_or_else(|| {
                        CheckpointError::MapOutOfRange(format!("unknown source class {object:?}"))
                    })?;
                    let attr = match &task {
                        Some(t) => t.id(attribute).ok_or_else(|| {
                            CheckpointError::MapOutOfRange(format!("unknown attribute class {attribute:?}"))
                        })?,
                        None => ClassId(i),
                    };
                    Ok((o, attr))
                })
                .collect::<std::result::Result<_, CheckpointError>>()?;
            for head in &heads {
                store = expand_attribute_head(&store, head, &pairs)?;
            }
            message = format!("expanded {} object-attribute pairs\n", pairs.len());
        }
        _ => return Err(usage("exactly one of --map or --attribute-pairs is required")),
    }
    write_store(&store, &a.out)?;
    echo_config(&a.out, "pwt", seed, a)?;
    say(stdout, &message)
}

fn parse_model_arg(raw: &str) -> Result<(PathBuf, f64)> {
    let (path, weight) = raw
        .rsplit_once(':')
        .ok_or_else(|| usage(format!("--model expects PATH:WEIGHT, got {raw:?}")))?;
    let weight: f64 = weight
        .parse()
        .map_err(|e| usage(format!("bad model weight in {raw:?}: {e}")))?;
    Ok((PathBuf::from(path), weight))
}

pub fn cmd_nms(a: &NmsArgs, seed: u64, stdout: &mut dyn std::io::Write) -> Result<()> {
    let classes = ingest::read_class_vocabulary(&a.classes)?;
    let mut outputs = Vec::new();
    for (i, raw) in a.models.iter().enumerate() {
        let (path, weight) = parse_model_arg(raw)?;
        outputs.push(ModelOutput {
            model_id: format!("m{i:03}"),
            weight,
            detections: ingest::read_detections(&path, &classes)?,
        });
    }
    let cfg = NmsConfig {
        iou_threshold: a.iou,
        score_floor: a.score_floor,
    };
    let fused = weighted_nms(&outputs, &cfg)?;
    ingest::write_detections(&a.out, &fused, &classes)?;
    echo_config(&a.out, "nms", seed, a)?;
    let total: usize = outputs.iter().map(|o| o.detections.len()).sum();
    say(stdout, &format!("fused {total} detections into {}\n", fused.len()))
}

pub fn cmd_features(a: &FeaturesArgs, seed: u64, stdout: &mut dyn std::io::Write) -> Result<()> {
    let (classes, triplets) = a.vocab.load()?;
    let set = a.annotations.load(&classes, &triplets)?;
    let stats = fit_semantic_stats(&set, &triplets)?;
    let layout = stats.layout();
    let (detections, matching) = match &a.detections {
        Some(p) => (ingest::read_detections(p, &classes)?, LabelMatch::Iou(a.label_iou)),
        None => (set.all_boxes().cloned().collect(), LabelMatch::Exact),
    };
    let mut by_image: BTreeMap<String, Vec<_>> = BTreeMap::new();
    for d in detections {
        by_image.entry(d.image_id.clone()).or_default().push(d);
    }
    let mut pairs = Vec::new();
    for (img, dets) in &by_image {
        for p in triplets.predicate_ids() {
            let cands = generate_candidates(dets, p, &triplets);
            for ((s, o), y) in label_candidates(cands, set.relations(img), p, matching) {
                let f = extract_features(&s, &o, &stats);
                pairs.push((img.clone(), p, s, o, f, y));
            }
        }
    }
    let names: Vec<String> = pairs
        .iter()
        .map(|(_, p, ..)| ingest::predicate_label(&triplets, *p))
        .collect();
    let rows: Vec<FeatureRow<'_>> = pairs
        .iter()
        .zip(&names)
        .map(|((img, _, s, o, f, y), name)| FeatureRow {
            image_id: img,
            predicate: name,
            subject: s,
            object: o,
            features: f,
            label: Some(*y),
        })
        .collect();
    write_feature_matrix(&a.out, &layout, &rows)?;
    echo_config(&a.out, "features", seed, a)?;
    if let Some(crops_path) = &a.crops {
        let mut crops = Vec::with_capacity(pairs.len());
        for (img, _, s, o, ..) in &pairs {
            crops.push((img.as_str(), &s.bbox, &o.bbox, visual_crop(&s.bbox, &o.bbox)?));
        }
        write_crops_jsonl(crops_path, &crops)?;
    }
    say(
        stdout,
        &format!("wrote {} candidate pairs x {} features (layout {})\n", rows.len(), layout.len(), layout.fingerprint()),
    )
}

fn parse_predicates(raw: &Option<String>, triplets: &TripletVocabulary) -> Result<Vec<PredicateId>> {
    let Some(raw) = raw else {
        return Ok(Vec::new());
    };
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|n| {
            triplets
                .predicate_id(n)
                .ok_or_else(|| usage(format!("unknown predicate {n:?}")))
        })
        .collect()
}

const STATS_FILE: &str = "stats.json";
const SPLIT_FILE: &str = "split.json";

pub fn cmd_train(a: &TrainArgs, seed: u64, stdout: &mut dyn std::io::Write) -> Result<()> {
    let (classes, triplets) = a.vocab.load()?;
    let set = a.annotations.load(&classes, &triplets)?;
    let split = match &a.split {
        Some(p) => SplitPlan::load(p)?,
        None => SplitPlan::by_image(set.image_ids(), a.proportions, seed)?,
    };
    let stage2_images = set.subset(split.stage2());
    let stats = fit_semantic_stats(&stage2_images, &triplets)?;
    let config = Stage2Config {
        gbm: a.gbm.apply(GbmConfig::spatio_semantic(), seed)?,
        predicates: parse_predicates(&a.predicates, &triplets)?,
    };
    let bank = train_stage2(&set, &stats, &triplets, &split, &config)?;
    bank.save(&a.out)?;
    write_json_file(&a.out.join(STATS_FILE), &stats)?;
    split.save(&a.out.join(SPLIT_FILE))?;
    echo_config(&a.out, "train", seed, a)?;
    let mut msg = format!("trained {} predicate models into {}\n", bank.len(), a.out.display());
    for s in bank.skipped() {
        msg.push_str(&format!("skipped {s}: no positive pairs\n"));
    }
    say(stdout, &msg)
}

fn load_bank(dir: &Path) -> Result<(RelationshipModelBank, SemanticStats)> {
    let bank = RelationshipModelBank::load(dir)?;
    let path = dir.join(STATS_FILE);
    let stats: SemanticStats = serde_json::from_slice(&std::fs::read(&path).map_err(io_at(&path))?)?;
    Ok((bank, stats))
}

pub fn cmd_score(a: &ScoreArgs, seed: u64, stdout: &mut dyn std::io::Write) -> Result<()> {
    let (classes, triplets) = a.vocab.load()?;
    let (bank, stats) = load_bank(&a.bank)?;
    let detections = ingest::read_detections(&a.detections, &classes)?;
    let cfg = ScoreConfig {
        floor: a.floor,
        top_m: a.top_m,
    };
    let preds = score_pairs(&bank, &detections, &stats, &triplets, &cfg)?;
    ingest::write_relation_predictions(&a.out, &preds, &classes, &triplets)?;
    echo_config(&a.out, "score", seed, a)?;
    say(stdout, &format!("scored {} relation instances\n", preds.len()))
}

pub fn cmd_aggregate(a: &AggregateArgs, seed: u64, stdout: &mut dyn std::io::Write) -> Result<()> {
    let (classes, triplets) = a.vocab.load()?;
    let set = a.annotations.load(&classes, &triplets)?;
    let (bank, stats) = load_bank(&a.bank)?;
    let split = SplitPlan::load(&a.split.clone().unwrap_or_else(|| a.bank.join(SPLIT_FILE)))?;
    let table = ingest::read_score_table(&a.visual_scores)?;
    let config = a.gbm.apply(GbmConfig::aggregator(), seed)?;
    let samples = stage3_samples(&bank, &set, split.stage3(), &stats, &triplets, &table, a.policy)?;
    let model = train_aggregator(&samples, &stats.layout(), &triplets, &config)?;
    if let Some(dir) = &a.model_out {
        model.save(dir)?;
    }
    let preds = ingest::read_relation_predictions(&a.pred, &classes, &triplets)?;
    let outcome = join_visual_scores(preds, &table, &triplets, a.policy);
    if !outcome.missing.is_empty() {
        let name = a.out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let path = a.out.with_file_name(format!("{name}.missing.jsonl"));
        let mut text = String::new();
        for m in &outcome.missing {
            text.push_str(&serde_json::to_string(m)?);
            text.push('\n');
        }
        std::fs::write(&path, text).map_err(io_at(&path))?;
    }
    let aggregated = aggregate(&model, &outcome.joined, &stats)?;
    ingest::write_relation_predictions(&a.out, &aggregated, &classes, &triplets)?;
    if let Some(p) = &a.baseline_out {
        ingest::write_relation_predictions(p, &average_instances(&outcome.joined), &classes, &triplets)?;
    }
    echo_config(&a.out, "aggregate", seed, a)?;
    say(
        stdout,
        &format!(
            "aggregator trained on {} stage-3 pairs; re-scored {} instances ({} without visual score)\n",
            samples.len(),
            aggregated.len(),
            outcome.missing.len()
        ),
    )
}

#[derive(Serialize)]
struct EvalReport<'a> {
    #[serde(rename = "mAP_rel")]
    map: f64,
    per_predicate: BTreeMap<String, Option<f64>>,
    config: &'a MatchConfig,
    predictions: usize,
    ground_truth: usize,
}

pub fn cmd_eval(a: &EvalArgs, seed: u64, stdout: &mut dyn std::io::Write) -> Result<()> {
    let (classes, triplets) = a.vocab.load()?;
    let preds = ingest::read_relation_predictions(&a.pred, &classes, &triplets)?;
    let gt_set = ingest::read_relations(&a.gt, &classes, &triplets)?;
    let gt: Vec<_> = gt_set.all_relations().cloned().collect();
    let cfg = MatchConfig {
        iou_threshold: a.iou,
        predicate_scoped: !a.ignore_predicate,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let report = map_rel(&preds, &gt, &cfg)?;
    let table = ApTable::new(&[("AP_rel", &report)], &triplets, cfg);
    if let Some(path) = &a.json_out {
        let json = EvalReport {
            map: report.map,
            per_predicate: report
                .per_predicate
                .iter()
                .map(|(p, ap)| (ingest::predicate_label(&triplets, *p), *ap))
                .collect(),
            config: &cfg,
            predictions: preds.len(),
            ground_truth: gt.len(),
        };
        write_json_file(path, &json)?;
        echo_config(path, "eval", seed, a)?;
    }
    say(stdout, &table.to_text())
}

pub fn cmd_demo(a: &DemoArgs, seed: u64, stdout: &mut dyn std::io::Write) -> Result<()> {
    let mut config = DemoConfig::with_seed(seed);
    config.corpus.num_images = a.images;
    let outcome = run_demo(&config)?;
    let text = outcome.report_text();
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir).map_err(io_at(dir))?;
        let c = &outcome.corpus;
        ingest::write_class_vocabulary(&dir.join("classes.csv"), &c.classes)?;
        ingest::write_triplet_vocabulary(&dir.join("triplets.csv"), &c.classes, &c.triplets)?;
        let relations: Vec<_> = c.annotations.all_relations().cloned().collect();
        ingest::write_relations(&dir.join("relations.csv"), &relations, &c.classes, &c.triplets)?;
        let boxes: Vec<_> = c.annotations.all_boxes().cloned().collect();
        ingest::write_ground_truth_boxes(&dir.join("boxes.csv"), &boxes, &c.classes)?;
        ingest::write_score_table(&dir.join("visual_scores.csv"), &c.visual)?;
        outcome.split.save(&dir.join(SPLIT_FILE))?;
        let mut sampled = outcome.sampled_images.join("\n");
        sampled.push('\n');
        let sampled_path = dir.join("sampled_images.txt");
        std::fs::write(&sampled_path, sampled).map_err(io_at(&sampled_path))?;
        let bank_dir = dir.join("bank");
        outcome.bank.save(&bank_dir)?;
        write_json_file(&bank_dir.join(STATS_FILE), &outcome.stats)?;
        outcome.split.save(&bank_dir.join(SPLIT_FILE))?;
        outcome.aggregator.save(&dir.join("aggregator"))?;
        ingest::write_relation_predictions(
            &dir.join("stage2_predictions.csv"),
            &outcome.stage2_predictions,
            &c.classes,
            &c.triplets,
        )?;
        ingest::write_relation_predictions(
            &dir.join("final_predictions.csv"),
            &outcome.final_predictions,
            &c.classes,
            &c.triplets,
        )?;
        let report_path = dir.join("report.txt");
        std::fs::write(&report_path, &text).map_err(io_at(&report_path))?;
        write_json_file(&dir.join("report.json"), &outcome.table)?;
        echo_config(dir, "demo", seed, &(a, &config))?;
    }
    say(stdout, &text)
}
