//! Triplet-level average precision.
//!
//! A prediction is a hit when an unmatched ground-truth instance in the same
//! image has the same predicate and class ids, and both of
//! its boxes overlap the prediction's boxes with IoU at or above the
//! threshold. Predictions are visited in descending score order (ties by
//! image id, then by the instance's sort key). Each ground-truth instance is
//! used at most once. Among several candidates the one with the largest
//! `min(subject IoU, object IoU)` is taken. Attribute objects carry the null
//! box and match each other.
//!
//! AP is the all-point area under the precision envelope.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::{iou, BoundingBox};
use crate::types::{PredicateId, RelationInstance, TripletVocabulary};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("no predicate has a defined AP (no ground truth and no predictions)")]
    NoDefinedPredicates,
    #[error("IoU threshold must lie in (0, 1], got {0}")]
    BadThreshold(f64),
}

impl EvalError {
    pub fn kind(&self) -> &'static str {
        match self {
            EvalError::NoDefinedPredicates => "NoDefinedPredicates",
            EvalError::BadThreshold(_) => "BadThreshold",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub iou_threshold: f64,
    /// Require equal predicates when matching. Turning this off evaluates
    /// subject/object localization regardless of the predicted predicate.
    pub predicate_scoped: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            iou_threshold: 0.5,
            predicate_scoped: true,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.iou_threshold > 0.0 && self.iou_threshold <= 1.0 {
            Ok(())
        } else {
            Err(EvalError::BadThreshold(self.iou_threshold))
        }
    }
}

fn box_overlap(a: &BoundingBox, b: &BoundingBox) -> f64 {
    match (a.is_null(), b.is_null()) {
        (true, true) => 1.0,
        (false, false) => iou(a, b),
        _ => 0.0,
    }
}

/// Indices of `predictions` in matching order.
pub fn ranking(predictions: &[RelationInstance]) -> Vec<usize> {
    let keys: Vec<String> = predictions.iter().map(RelationInstance::sort_key).collect();
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| {
        predictions[b]
            .score
            .total_cmp(&predictions[a].score)
            .then_with(|| predictions[a].image_id.cmp(&predictions[b].image_id))
            .then_with(|| keys[a].cmp(&keys[b]))
    });
    order
}

/// Hit flag per prediction, in the order of `predictions`.
pub fn match_instances(predictions: &[RelationInstance], ground_truth: &[RelationInstance], config: &MatchConfig) -> Vec<bool> {
    let mut by_image: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in ground_truth.iter().enumerate() {
        by_image.entry(g.image_id.as_str()).or_default().push(i);
    }
    let mut used = vec![false; ground_truth.len()];
    let mut hits = vec![false; predictions.len()];
    for i in ranking(predictions) {
        let p = &predictions[i];
        let mut best: Option<(f64, usize)> = None;
        for &g in by_image.get(p.image_id.as_str()).into_iter().flatten() {
            let gt = &ground_truth[g];
            if used[g]
                || gt.subject.class_id != p.subject.class_id
                || gt.object.class_id != p.object.class_id
                || (config.predicate_scoped && gt.predicate_id != p.predicate_id)
            {
                continue;
            }
            let q = box_overlap(&gt.subject.bbox, &p.subject.bbox).min(box_overlap(&gt.object.bbox, &p.object.bbox));
            if q >= config.iou_threshold && best.is_none_or(|(b, _)| q > b) {
                best = Some((q, g));
            }
        }
        if let Some((_, g)) = best {
            used[g] = true;
            hits[i] = true;
        }
    }
    hits
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// `(recall, precision)` after each prediction in ranking order.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
}

/// All-point AP from hit flags in ranking order and the ground-truth count.
pub fn average_precision(ranked_hits: &[bool], n_gt: usize) -> PrCurve {
    let mut points = Vec::with_capacity(ranked_hits.len());
    let mut tp = 0usize;
    for (k, &hit) in ranked_hits.iter().enumerate() {
        tp += hit as usize;
        let recall = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
        points.push((recall, tp as f64 / (k + 1) as f64));
    }
    if n_gt == 0 {
        return PrCurve { points, ap: 0.0 };
    }
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    let mut next_recall = points.last().map_or(0.0, |p| p.0);
    for &(r, p) in points.iter().rev() {
        if r < next_recall {
            ap += (next_recall - r) * envelope;
            next_recall = r;
        }
        envelope = envelope.max(p);
    }
    ap += next_recall * envelope;
    PrCurve { points, ap }
}

/// AP of one predicate; `None` when it has neither ground truth nor
/// predictions.
pub fn ap_rel(
    predictions: &[RelationInstance],
    ground_truth: &[RelationInstance],
    predicate: PredicateId,
    config: &MatchConfig,
) -> Option<PrCurve> {
    let preds: Vec<RelationInstance> = predictions.iter().filter(|p| p.predicate_id == predicate).cloned().collect();
    let gts: Vec<RelationInstance> = ground_truth.iter().filter(|g| g.predicate_id == predicate).cloned().collect();
    if preds.is_empty() && gts.is_empty() {
        return None;
    }
    let hits = match_instances(&preds, &gts, config);
    let ranked: Vec<bool> = ranking(&preds).into_iter().map(|i| hits[i]).collect();
    Some(average_precision(&ranked, gts.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapReport {
    /// AP per predicate seen in either input; `None` when undefined.
    pub per_predicate: BTreeMap<PredicateId, Option<f64>>,
    pub map: f64,
}

pub fn map_rel(
    predictions: &[RelationInstance],
    ground_truth: &[RelationInstance],
    config: &MatchConfig,
) -> Result<MapReport, EvalError> {
    config.validate()?;
    let predicates: BTreeSet<PredicateId> = predictions
        .iter()
        .chain(ground_truth)
        .map(|r| r.predicate_id)
        .collect();
    let per_predicate: BTreeMap<PredicateId, Option<f64>> = predicates
        .into_iter()
        .map(|p| (p, ap_rel(predictions, ground_truth, p, config).map(|c| c.ap)))
        .collect();
    let defined: Vec<f64> = per_predicate.values().flatten().copied().collect();
    if defined.is_empty() {
        return Err(EvalError::NoDefinedPredicates);
    }
    Ok(MapReport {
        map: defined.iter().sum::<f64>() / defined.len() as f64,
        per_predicate,
    })
}

/// Per-predicate AP of several pipeline variants side by side.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApTable {
    pub columns: Vec<String>,
    pub rows: Vec<ApRow>,
    #[serde(rename = "mAP_rel")]
    pub map: Vec<f64>,
    pub config: MatchConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApRow {
    pub predicate: String,
    pub ap: Vec<Option<f64>>,
}

impl ApTable {
    pub fn new(columns: &[(&str, &MapReport)], triplets: &TripletVocabulary, config: MatchConfig) -> Self {
        let predicates: BTreeSet<PredicateId> = columns
            .iter()
            .flat_map(|(_, r)| r.per_predicate.keys().copied())
            .collect();
        let rows = predicates
            .into_iter()
            .map(|p| ApRow {
                predicate: triplets
                    .predicate_name(p)
                    .map(str::to_string)
                    .unwrap_or_else(|| p.to_string()),
                ap: columns
                    .iter()
                    .map(|(_, r)| r.per_predicate.get(&p).copied().flatten())
                    .collect(),
            })
            .collect();
        ApTable {
            columns: columns.iter().map(|(c, _)| c.to_string()).collect(),
            rows,
            map: columns.iter().map(|(_, r)| r.map).collect(),
            config,
        }
    }

    pub fn to_text(&self) -> String {
        let first = self.rows.iter().map(|r| r.predicate.len()).chain([9]).max().unwrap_or(9);
        let widths: Vec<usize> = self.columns.iter().map(|c| c.len().max(6)).collect();
        let mut out = format!("{:<first$}", "Predicate");
        for (c, w) in self.columns.iter().zip(&widths) {
            out.push_str(&format!("  {c:>w$}"));
        }
        out.push('\n');
        let line = |out: &mut String, name: &str, vals: &mut dyn Iterator<Item = Option<f64>>| {
            out.push_str(&format!("{name:<first$}"));
            for (v, w) in vals.zip(&widths) {
                match v {
                    Some(v) => out.push_str(&format!("  {v:>w$.4}")),
                    None => out.push_str(&format!("  {:>w$}", "-")),
                }
            }
            out.push('\n');
        };
        for r in &self.rows {
            line(&mut out, &r.predicate, &mut r.ap.iter().copied());
        }
        line(&mut out, "mAP_rel", &mut self.map.iter().copied().map(Some));
        out
    }
}
