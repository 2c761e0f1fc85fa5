//! Weighted non-maximum suppression across several detectors.
//!
//! Detections are pooled per `(image, class)`. The most confident unconsumed
//! box seeds a cluster that absorbs every unconsumed box with IoU at least the
//! threshold against the seed. Each cluster emits one detection:
//!
//! * coordinates: average of members weighted by `model weight * confidence`
//! * confidence: mean member confidence weighted by model weight
//!
//! Model weights are relative; they are divided by the largest weight first.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::{iou, BoundingBox};
use crate::types::{ClassId, Detection};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnsembleError {
    #[error("no model outputs given")]
    EmptyInput,
    #[error("model {0:?} has non-positive weight {1}")]
    BadWeight(String, f64),
    #[error("iou threshold must lie in (0, 1], got {0}")]
    BadThreshold(f64),
}

impl EnsembleError {
    pub fn kind(&self) -> &'static str {
        match self {
            EnsembleError::EmptyInput => "EmptyInput",
            EnsembleError::BadWeight(..) => "BadWeight",
            EnsembleError::BadThreshold(_) => "BadThreshold",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub model_id: String,
    pub weight: f64,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmsConfig {
    pub iou_threshold: f64,
    /// Clusters whose combined confidence falls below this are dropped.
    pub score_floor: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig {
            iou_threshold: 0.5,
            score_floor: 0.001,
        }
    }
}

/// A detection tagged with its model and normalized model weight.
#[derive(Debug, Clone)]
struct Member<'a> {
    model_id: &'a str,
    weight: f64,
    det: &'a Detection,
}

/// Seed order: confidence descending, then model id, then box coordinates.
fn seed_order(a: &Member<'_>, b: &Member<'_>) -> Ordering {
    b.det
        .confidence
        .total_cmp(&a.det.confidence)
        .then_with(|| a.model_id.cmp(b.model_id))
        .then_with(|| a.det.bbox.lexicographic_cmp(&b.det.bbox))
}

/// Output order: confidence descending, then image, class, box.
pub(crate) fn output_order(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| a.image_id.cmp(&b.image_id))
        .then_with(|| a.class_id.cmp(&b.class_id))
        .then_with(|| a.bbox.lexicographic_cmp(&b.bbox))
}

fn validate<'a>(outputs: &'a [ModelOutput], config: &NmsConfig) -> Result<Vec<Member<'a>>, EnsembleError> {
    if outputs.is_empty() {
        return Err(EnsembleError::EmptyInput);
    }
    if !(config.iou_threshold > 0.0 && config.iou_threshold <= 1.0) {
        return Err(EnsembleError::BadThreshold(config.iou_threshold));
    }
    for o in outputs {
        if !(o.weight > 0.0 && o.weight.is_finite()) {
            return Err(EnsembleError::BadWeight(o.model_id.clone(), o.weight));
        }
    }
    let max_weight = outputs.iter().map(|o| o.weight).fold(0.0, f64::max);
    Ok(outputs
        .iter()
        .flat_map(|o| {
            let weight = o.weight / max_weight;
            o.detections.iter().map(move |det| Member {
                model_id: &o.model_id,
                weight,
                det,
            })
        })
        .collect())
}

/// Combines one cluster, members given in seed order.
fn fuse(members: &[&Member<'_>]) -> Detection {
    let seed = members[0].det;
    let mut coord_w = 0.0;
    let mut coords = [0.0f64; 4];
    let mut weight_sum = 0.0;
    let mut conf_sum = 0.0;
    for m in members {
        let w = m.weight * m.det.confidence;
        coord_w += w;
        for (acc, v) in coords.iter_mut().zip(m.det.bbox.to_array()) {
            *acc += w * v;
        }
        weight_sum += m.weight;
        conf_sum += m.weight * m.det.confidence;
    }
    let bbox = if coord_w > 0.0 {
        let c = coords.map(|v| v / coord_w);
        // a convex combination of valid boxes is valid up to rounding
        let clamp = |v: f64| v.clamp(0.0, 1.0);
        let (x0, y0) = (clamp(c[0]), clamp(c[1]));
        BoundingBox::new(x0, y0, clamp(c[2]).max(x0), clamp(c[3]).max(y0)).expect("clamped box is valid")
    } else {
        seed.bbox
    };
    Detection {
        image_id: seed.image_id.clone(),
        class_id: seed.class_id,
        bbox,
        confidence: (conf_sum / weight_sum).clamp(0.0, 1.0),
    }
}

/// Fuses detections from several models; output sorted by confidence descending.
pub fn weighted_nms(outputs: &[ModelOutput], config: &NmsConfig) -> Result<Vec<Detection>, EnsembleError> {
    let members = validate(outputs, config)?;
    let mut buckets: BTreeMap<(&str, ClassId), Vec<Member<'_>>> = BTreeMap::new();
    for m in members {
        buckets.entry((m.det.image_id.as_str(), m.det.class_id)).or_default().push(m);
    }
    let mut out = Vec::new();
    for (_, mut bucket) in buckets {
        bucket.sort_by(seed_order);
        // candidates ordered by x_min so each seed only scans boxes that can overlap it
        let mut by_x: Vec<usize> = (0..bucket.len()).collect();
        by_x.sort_by(|&a, &b| bucket[a].det.bbox.x_min().total_cmp(&bucket[b].det.bbox.x_min()).then(a.cmp(&b)));
        let mut consumed = vec![false; bucket.len()];
        for seed in 0..bucket.len() {
            if consumed[seed] {
                continue;
            }
            consumed[seed] = true;
            let seed_box = bucket[seed].det.bbox;
            let end = by_x.partition_point(|&i| bucket[i].det.bbox.x_min() < seed_box.x_max());
            let mut cluster: Vec<usize> = by_x[..end]
                .iter()
                .copied()
                .filter(|&i| {
                    !consumed[i]
                        && bucket[i].det.bbox.x_max() > seed_box.x_min()
                        && iou(&seed_box, &bucket[i].det.bbox) >= config.iou_threshold
                })
                .collect();
            for &i in &cluster {
                consumed[i] = true;
            }
            cluster.push(seed);
            cluster.sort_unstable();
            let members: Vec<&Member<'_>> = cluster.iter().map(|&i| &bucket[i]).collect();
            let fused = fuse(&members);
            if fused.confidence >= config.score_floor {
                out.push(fused);
            }
        }
    }
    out.sort_by(output_order);
    Ok(out)
}

/// Exhaustive reference implementation of [`weighted_nms`] used for testing.
///
/// No bucketing and no spatial pruning: every step scans all detections of
/// all images for the globally best unconsumed seed, then compares it against
/// every other detection.
pub mod oracle {
    use super::*;

    pub fn brute_force_nms_oracle(outputs: &[ModelOutput], config: &NmsConfig) -> Result<Vec<Detection>, EnsembleError> {
        let members = validate(outputs, config)?;
        let n = members.len();
        let mut consumed = vec![false; n];
        let mut out = Vec::new();
        loop {
            let mut seed: Option<usize> = None;
            for i in 0..n {
                if consumed[i] {
                    continue;
                }
                seed = match seed {
                    Some(s) if seed_order(&members[s], &members[i]) != Ordering::Greater => Some(s),
                    _ => Some(i),
                };
            }
            let Some(s) = seed else { break };
            let mut cluster = vec![s];
            for j in 0..n {
                if j == s || consumed[j] {
                    continue;
                }
                let same_bucket = members[j].det.image_id == members[s].det.image_id
                    && members[j].det.class_id == members[s].det.class_id;
                if same_bucket && iou(&members[s].det.bbox, &members[j].det.bbox) >= config.iou_threshold {
                    cluster.push(j);
                }
            }
            for &j in &cluster {
                consumed[j] = true;
            }
            cluster.sort_by(|&a, &b| seed_order(&members[a], &members[b]));
            let refs: Vec<&Member<'_>> = cluster.iter().map(|&i| &members[i]).collect();
            let fused = fuse(&refs);
            if fused.confidence >= config.score_floor {
                out.push(fused);
            }
        }
        out.sort_by(output_order);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(image: &str, class: usize, b: [f64; 4], conf: f64) -> Detection {
        Detection::new(image, ClassId(class), BoundingBox::from_array(b).unwrap(), conf)
    }

    fn model(id: &str, weight: f64, detections: Vec<Detection>) -> ModelOutput {
        ModelOutput {
            model_id: id.into(),
            weight,
            detections,
        }
    }

    #[test]
    fn singleton_unchanged() {
        let d = det("a", 0, [0.1, 0.2, 0.3, 0.4], 0.9);
        let out = weighted_nms(&[model("m", 1.0, vec![d.clone()])], &NmsConfig::default()).unwrap();
        assert_eq!(out, vec![d]);
    }

    #[test]
    fn identical_boxes_average_confidence() {
        let b = [0.1, 0.1, 0.5, 0.5];
        let out = weighted_nms(
            &[
                model("a", 1.0, vec![det("i", 0, b, 0.8)]),
                model("b", 1.0, vec![det("i", 0, b, 0.6)]),
            ],
            &NmsConfig::default(),
        )
        .unwrap();
        assert_eq!(out.len(), 1);
        assert!((out[0].confidence - 0.7).abs() < 1e-12);
        for (x, y) in out[0].bbox.to_array().iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn coordinates_weighted_by_model_and_confidence() {
        // weights 1 and 0.5 relative, confidences 0.8 and 0.4 -> coordinate weights 0.8 and 0.2
        let out = weighted_nms(
            &[
                model("a", 2.0, vec![det("i", 0, [0.0, 0.0, 0.5, 0.5], 0.8)]),
                model("b", 1.0, vec![det("i", 0, [0.05, 0.0, 0.55, 0.5], 0.4)]),
            ],
            &NmsConfig::default(),
        )
        .unwrap();
        assert_eq!(out.len(), 1);
        assert!((out[0].bbox.x_min() - 0.01).abs() < 1e-12);
        assert!((out[0].bbox.x_max() - 0.51).abs() < 1e-12);
        // (1 * 0.8 + 0.5 * 0.4) / 1.5
        assert!((out[0].confidence - 1.0 / 1.5).abs() < 1e-12);
    }

    #[test]
    fn low_overlap_and_other_classes_not_merged() {
        let out = weighted_nms(
            &[model(
                "a",
                1.0,
                vec![
                    det("i", 0, [0.0, 0.0, 0.2, 0.2], 0.9),
                    det("i", 0, [0.15, 0.15, 0.35, 0.35], 0.8),
                    det("i", 1, [0.0, 0.0, 0.2, 0.2], 0.7),
                    det("j", 0, [0.0, 0.0, 0.2, 0.2], 0.6),
                ],
            )],
            &NmsConfig::default(),
        )
        .unwrap();
        assert_eq!(out.len(), 4);
        let confs: Vec<f64> = out.iter().map(|d| d.confidence).collect();
        assert_eq!(confs, vec![0.9, 0.8, 0.7, 0.6]);
    }

    #[test]
    fn score_floor_drops_clusters() {
        let cfg = NmsConfig {
            score_floor: 0.5,
            ..NmsConfig::default()
        };
        let out = weighted_nms(&[model("a", 1.0, vec![det("i", 0, [0.0, 0.0, 0.2, 0.2], 0.3)])], &cfg).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn errors() {
        assert_eq!(weighted_nms(&[], &NmsConfig::default()), Err(EnsembleError::EmptyInput));
        assert_eq!(
            oracle::brute_force_nms_oracle(&[], &NmsConfig::default()),
            Err(EnsembleError::EmptyInput)
        );
        assert!(matches!(
            weighted_nms(&[model("a", 0.0, vec![])], &NmsConfig::default()),
            Err(EnsembleError::BadWeight(..))
        ));
        let cfg = NmsConfig {
            iou_threshold: 0.0,
            ..NmsConfig::default()
        };
        assert!(matches!(weighted_nms(&[model("a", 1.0, vec![])], &cfg), Err(EnsembleError::BadThreshold(_))));
    }

    #[test]
    fn oracle_singleton_and_empty_bucket() {
        let d = det("a", 0, [0.1, 0.2, 0.3, 0.4], 0.9);
        let out = oracle::brute_force_nms_oracle(&[model("m", 1.0, vec![d.clone()])], &NmsConfig::default()).unwrap();
        assert_eq!(out, vec![d]);
        let out = oracle::brute_force_nms_oracle(&[model("m", 1.0, vec![]), model("n", 2.0, vec![])], &NmsConfig::default())
            .unwrap();
        assert!(out.is_empty());
    }
}
