//! Candidate pairs and the features computed from them, including visual crop geometry.
//!
//! # Feature layout
//!
//! For a vocabulary with `P` predicates every [`PairFeatureVector`] has
//! `36 + 5P` slots, named by [`FeatureLayout::names`]:
//!
//! | slots | names |
//! |-------|-------|
//! | subject geometry | `subj_cx subj_cy subj_w subj_h subj_area subj_aspect subj_x_min subj_y_min subj_x_max subj_y_max` |
//! | object geometry | same with the `obj_` prefix |
//! | pair geometry | `delta_cx delta_cy iou center_distance log_area_ratio union_area union_w union_h` |
//! | overlap | `inter_over_subj inter_over_obj` |
//! | class semantics | `subj_log_images obj_log_images log_cooccurrence log_pair_triplets` |
//! | ordering | `subj_left_of_obj subj_above_obj` (sign of the object-minus-subject center offset, -1/0/1) |
//! | per predicate `p` | `triplet_prior[p] subj_as_subject[p] subj_as_object[p] obj_as_subject[p] obj_as_object[p]` |
//!
//! Counts are Laplace smoothed (+1 per cell). Log slots are natural logs of
//! smoothed counts; histogram slots are smoothed, normalized frequencies.
//! The layout fingerprint is a SHA-256 prefix over the slot names.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bbox::{center_distance, iou, union_box, BoundingBox};
use crate::ingest::AnnotationSet;
use crate::types::{ClassId, Detection, PredicateId, RelationInstance, TripletVocabulary};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("annotation set has no relations")]
    EmptyAnnotations,
    #[error("union box has zero area")]
    ZeroAreaCrop,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FeatureError {
    pub fn kind(&self) -> &'static str {
        match self {
            FeatureError::EmptyAnnotations => "EmptyAnnotations",
            FeatureError::ZeroAreaCrop => "ZeroAreaCrop",
            FeatureError::Io(_) => "Io",
        }
    }
}

/// Corpus statistics fitted on a training annotation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticStats {
    num_classes: usize,
    predicates: Vec<String>,
    /// `n_k`
    class_images: Vec<u64>,
    /// `[class][predicate]` count of relations with the class as subject.
    as_subject: Vec<Vec<u64>>,
    /// `[class][predicate]` count of relations with the class as object.
    as_object: Vec<Vec<u64>>,
    /// `[a][b]` images containing both classes; `[a][a]` images with two or more boxes of `a`.
    cooccurrence: Vec<Vec<u64>>,
    /// `[subject][object][predicate]`
    triplets: Vec<Vec<Vec<u64>>>,
}

impl SemanticStats {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_predicates(&self) -> usize {
        self.predicates.len()
    }

    pub fn predicates(&self) -> &[String] {
        &self.predicates
    }

    pub fn class_images(&self, k: ClassId) -> u64 {
        self.class_images[k.0]
    }

    pub fn raw_cooccurrence(&self, a: ClassId, b: ClassId) -> u64 {
        self.cooccurrence[a.0][b.0]
    }

    pub fn smoothed_cooccurrence(&self, a: ClassId, b: ClassId) -> f64 {
        self.raw_cooccurrence(a, b) as f64 + 1.0
    }

    pub fn triplet_count(&self, s: ClassId, p: PredicateId, o: ClassId) -> u64 {
        self.triplets[s.0][o.0][p.0]
    }

    /// Smoothed `P(predicate | subject class, object class)`.
    pub fn triplet_prior(&self, s: ClassId, p: PredicateId, o: ClassId) -> f64 {
        smoothed(&self.triplets[s.0][o.0], p.0)
    }

    /// Smoothed predicate histogram of class `k` in the subject role.
    pub fn subject_histogram(&self, k: ClassId) -> Vec<f64> {
        (0..self.num_predicates()).map(|p| smoothed(&self.as_subject[k.0], p)).collect()
    }

    /// Smoothed predicate histogram of class `k` in the object role.
    pub fn object_histogram(&self, k: ClassId) -> Vec<f64> {
        (0..self.num_predicates()).map(|p| smoothed(&self.as_object[k.0], p)).collect()
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout::new(&self.predicates)
    }
}

fn smoothed(counts: &[u64], p: usize) -> f64 {
    let total: u64 = counts.iter().sum();
    (counts[p] as f64 + 1.0) / (total as f64 + counts.len() as f64)
}

pub fn fit_semantic_stats(train: &AnnotationSet, triplets: &TripletVocabulary) -> Result<SemanticStats, FeatureError> {
    if train.all_relations().next().is_none() {
        return Err(FeatureError::EmptyAnnotations);
    }
    let k = train.num_classes();
    let p = triplets.predicates().len();
    let mut stats = SemanticStats {
        num_classes: k,
        predicates: triplets.predicates().to_vec(),
        class_images: train.class_image_counts().iter().map(|&c| c as u64).collect(),
        as_subject: vec![vec![0; p]; k],
        as_object: vec![vec![0; p]; k],
        cooccurrence: vec![vec![0; k]; k],
        triplets: vec![vec![vec![0; p]; k]; k],
    };
    for r in train.all_relations() {
        let (s, o, pr) = (r.subject.class_id.0, r.object.class_id.0, r.predicate_id.0);
        stats.as_subject[s][pr] += 1;
        stats.as_object[o][pr] += 1;
        stats.triplets[s][o][pr] += 1;
    }
    for image in train.image_ids() {
        let mut per_class = vec![0u32; k];
        for d in train.boxes(image) {
            per_class[d.class_id.0] += 1;
        }
        for a in 0..k {
            if per_class[a] == 0 {
                continue;
            }
            for b in 0..k {
                let together = if a == b { per_class[a] >= 2 } else { per_class[b] > 0 };
                if together {
                    stats.cooccurrence[a][b] += 1;
                }
            }
        }
    }
    Ok(stats)
}

/// Ordered pairs `(s, o)`, `s != o`, licensed for `predicate` by the vocabulary.
pub fn generate_candidates(
    detections: &[Detection],
    predicate: PredicateId,
    triplets: &TripletVocabulary,
) -> Vec<(Detection, Detection)> {
    let mut out = Vec::new();
    for (i, s) in detections.iter().enumerate() {
        for (j, o) in detections.iter().enumerate() {
            if i != j && triplets.contains(s.class_id, predicate, o.class_id) {
                out.push((s.clone(), o.clone()));
            }
        }
    }
    out
}

/// How candidate boxes are compared with ground-truth boxes when labeling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LabelMatch {
    /// Candidates built from ground-truth boxes: boxes must be identical.
    Exact,
    /// Candidates from predicted boxes: both IoUs must reach the threshold.
    Iou(f64),
}

impl LabelMatch {
    fn boxes_match(&self, a: &BoundingBox, b: &BoundingBox) -> bool {
        match *self {
            LabelMatch::Exact => a == b,
            LabelMatch::Iou(t) => iou(a, b) >= t,
        }
    }
}

/// Labels each candidate 1 when a ground-truth relation with the same
/// predicate and classes matches both of its boxes.
pub fn label_candidates(
    candidates: Vec<(Detection, Detection)>,
    ground_truth: &[RelationInstance],
    predicate: PredicateId,
    matching: LabelMatch,
) -> Vec<((Detection, Detection), u8)> {
    candidates
        .into_iter()
        .map(|(s, o)| {
            let hit = ground_truth.iter().any(|g| {
                g.predicate_id == predicate
                    && g.subject.class_id == s.class_id
                    && g.object.class_id == o.class_id
                    && matching.boxes_match(&g.subject.bbox, &s.bbox)
                    && matching.boxes_match(&g.object.bbox, &o.bbox)
            });
            ((s, o), hit as u8)
        })
        .collect()
}

/// Named, fingerprinted slot list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    names: Vec<String>,
    fingerprint: String,
}

const BOX_SLOTS: [&str; 10] = ["cx", "cy", "w", "h", "area", "aspect", "x_min", "y_min", "x_max", "y_max"];
const PAIR_SLOTS: [&str; 16] = [
    "delta_cx",
    "delta_cy",
    "iou",
    "center_distance",
    "log_area_ratio",
    "union_area",
    "union_w",
    "union_h",
    "inter_over_subj",
    "inter_over_obj",
    "subj_log_images",
    "obj_log_images",
    "log_cooccurrence",
    "log_pair_triplets",
    // subject/object left-right and above-below ordering signs
    "subj_left_of_obj",
    "subj_above_obj",
];
const PER_PREDICATE: [&str; 5] = [
    "triplet_prior",
    "subj_as_subject",
    "subj_as_object",
    "obj_as_subject",
    "obj_as_object",
];

/// Number of slots that do not depend on the predicate list.
pub const FIXED_SLOTS: usize = 2 * BOX_SLOTS.len() + PAIR_SLOTS.len();

impl FeatureLayout {
    pub fn new(predicates: &[String]) -> Self {
        let mut names: Vec<String> = Vec::new();
        for prefix in ["subj", "obj"] {
            names.extend(BOX_SLOTS.iter().map(|s| format!("{prefix}_{s}")));
        }
        names.extend(PAIR_SLOTS.iter().map(|s| s.to_string()));
        for group in PER_PREDICATE {
            names.extend(predicates.iter().map(|p| format!("{group}[{p}]")));
        }
        let fingerprint = fingerprint(&names);
        FeatureLayout { names, fingerprint }
    }

    /// Prepends extra named slots (used by the aggregation stage).
    pub fn with_prefix(&self, extra: &[&str]) -> Self {
        let names: Vec<String> = extra.iter().map(|s| s.to_string()).chain(self.names.iter().cloned()).collect();
        let fingerprint = fingerprint(&names);
        FeatureLayout { names, fingerprint }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

fn fingerprint(names: &[String]) -> String {
    let mut h = Sha256::new();
    for n in names {
        h.update(n.as_bytes());
        h.update([0u8]);
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Feature values in [`FeatureLayout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct PairFeatureVector(pub Vec<f32>);

impl PairFeatureVector {
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

const EPS: f64 = 1e-6;

fn box_features(b: &BoundingBox, out: &mut Vec<f64>) {
    let (cx, cy) = b.center();
    out.extend([
        cx,
        cy,
        b.width(),
        b.height(),
        b.area(),
        (b.width() + EPS) / (b.height() + EPS),
        b.x_min(),
        b.y_min(),
        b.x_max(),
        b.y_max(),
    ]);
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn extract_features(subject: &Detection, object: &Detection, stats: &SemanticStats) -> PairFeatureVector {
    let (s, o) = (&subject.bbox, &object.bbox);
    let (sc, oc) = (subject.class_id, object.class_id);
    let mut v: Vec<f64> = Vec::with_capacity(FIXED_SLOTS + 5 * stats.num_predicates());
    box_features(s, &mut v);
    box_features(o, &mut v);
    let (scx, scy) = s.center();
    let (ocx, ocy) = o.center();
    let u = union_box(s, o);
    let inter = s.intersection_area(o);
    let pair_triplets: u64 = (0..stats.num_predicates())
        .map(|p| stats.triplet_count(sc, PredicateId(p), oc))
        .sum();
    v.extend([
        ocx - scx,
        ocy - scy,
        iou(s, o),
        center_distance(s, o),
        ((s.area() + EPS) / (o.area() + EPS)).ln(),
        u.area(),
        u.width(),
        u.height(),
        inter / (s.area() + EPS),
        inter / (o.area() + EPS),
        (stats.class_images(sc) as f64 + 1.0).ln(),
        (stats.class_images(oc) as f64 + 1.0).ln(),
        stats.smoothed_cooccurrence(sc, oc).ln(),
        (pair_triplets as f64 + 1.0).ln(),
        sign(ocx - scx),
        sign(ocy - scy),
    ]);
    v.extend((0..stats.num_predicates()).map(|p| stats.triplet_prior(sc, PredicateId(p), oc)));
    v.extend(stats.subject_histogram(sc));
    v.extend(stats.object_histogram(sc));
    v.extend(stats.subject_histogram(oc));
    v.extend(stats.object_histogram(oc));
    PairFeatureVector(v.into_iter().map(|x| x as f32).collect())
}

/// Crop rectangle and the regions kept unmasked inside it, in crop-local
/// coordinates. Everything outside the keep regions is blacked out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub crop: BoundingBox,
    pub keep_regions: Vec<BoundingBox>,
}

impl CropSpec {
    /// Fraction of the crop left visible.
    pub fn keep_area_fraction(&self) -> f64 {
        match self.keep_regions.as_slice() {
            [a] => a.area(),
            [a, b] => a.area() + b.area() - a.intersection_area(b),
            _ => 0.0,
        }
    }
}

pub fn visual_crop(subject: &BoundingBox, object: &BoundingBox) -> Result<CropSpec, FeatureError> {
    let crop = union_box(subject, object);
    if crop.area() <= 0.0 {
        return Err(FeatureError::ZeroAreaCrop);
    }
    let local = |b: &BoundingBox| {
        let fx = |x: f64| ((x - crop.x_min()) / crop.width()).clamp(0.0, 1.0);
        let fy = |y: f64| ((y - crop.y_min()) / crop.height()).clamp(0.0, 1.0);
        BoundingBox::new(fx(b.x_min()), fy(b.y_min()), fx(b.x_max()), fy(b.y_max())).expect("rescaled box stays ordered")
    };
    let mut keep_regions = vec![local(subject)];
    if subject != object {
        keep_regions.push(local(object));
    }
    Ok(CropSpec { crop, keep_regions })
}

/// One row of an exported feature matrix.
#[derive(Debug, Clone)]
pub struct FeatureRow<'a> {
    pub image_id: &'a str,
    pub predicate: &'a str,
    pub subject: &'a Detection,
    pub object: &'a Detection,
    pub features: &'a PairFeatureVector,
    pub label: Option<u8>,
}

/// Writes a columnar CSV: `ImageID,Predicate,SubjectClass,ObjectClass,Label`
/// followed by one column per layout slot. `Label` is empty when unknown.
pub fn write_feature_matrix(path: &Path, layout: &FeatureLayout, rows: &[FeatureRow<'_>]) -> Result<(), FeatureError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = ["ImageID", "Predicate", "SubjectClass", "ObjectClass", "Label"].join(",");
    for n in layout.names() {
        header.push(',');
        header.push_str(n);
    }
    writeln!(w, "{header}")?;
    for r in rows {
        let mut line = format!(
            "{},{},{},{},{}",
            r.image_id,
            r.predicate,
            r.subject.class_id,
            r.object.class_id,
            r.label.map(|l| l.to_string()).unwrap_or_default()
        );
        for v in r.features.as_slice() {
            line.push(',');
            line.push_str(&v.to_string());
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct CropRecord<'a> {
    image_id: &'a str,
    subject: BoundingBox,
    object: BoundingBox,
    #[serde(flatten)]
    crop: &'a CropSpec,
}

/// One JSON object per line: `{"image_id", "subject", "object", "crop", "keep_regions"}`.
pub fn write_crops_jsonl(path: &Path, crops: &[(&str, &BoundingBox, &BoundingBox, CropSpec)]) -> Result<(), FeatureError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (image_id, s, o, crop) in crops {
        let rec = CropRecord {
            image_id,
            subject: **s,
            object: **o,
            crop,
        };
        serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::other)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Distinct predicates present in a set of relations.
pub fn predicates_in(relations: &[RelationInstance]) -> BTreeSet<PredicateId> {
    relations.iter().map(|r| r.predicate_id).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ClassVocabulary, Triplet};

    fn bb(c: [f64; 4]) -> BoundingBox {
        BoundingBox::from_array(c).unwrap()
    }

    // classes: man 0, camera 1, table 2; predicates: holds 0, on 1
    fn vocab() -> TripletVocabulary {
        let mut t = TripletVocabulary::new();
        let holds = t.intern_predicate("holds");
        let on = t.intern_predicate("on");
        t.insert(Triplet {
            subject: ClassId(0),
            predicate: holds,
            object: ClassId(1),
        });
        t.insert(Triplet {
            subject: ClassId(1),
            predicate: on,
            object: ClassId(2),
        });
        t
    }

    fn rel(image: &str, s: (usize, [f64; 4]), p: usize, o: (usize, [f64; 4])) -> RelationInstance {
        RelationInstance {
            image_id: image.into(),
            subject: Detection::ground_truth(image, ClassId(s.0), bb(s.1)),
            object: Detection::ground_truth(image, ClassId(o.0), bb(o.1)),
            predicate_id: PredicateId(p),
            score: 1.0,
        }
    }

    fn fixture() -> AnnotationSet {
        let man = (0, [0.1, 0.1, 0.4, 0.9]);
        let cam = (1, [0.3, 0.3, 0.45, 0.4]);
        let table = (2, [0.0, 0.6, 1.0, 1.0]);
        AnnotationSet::new(
            3,
            vec![],
            vec![
                rel("a", man, 0, cam),
                rel("a", cam, 1, table),
                rel("b", man, 0, cam),
            ],
        )
    }

    #[test]
    fn triplet_counts_and_smoothing() {
        let _ = ClassVocabulary::default();
        let stats = fit_semantic_stats(&fixture(), &vocab()).unwrap();
        assert_eq!(stats.triplet_count(ClassId(0), PredicateId(0), ClassId(1)), 2);
        // table never appears with man in image b, but does in a
        assert_eq!(stats.raw_cooccurrence(ClassId(0), ClassId(2)), 1);
        assert_eq!(stats.raw_cooccurrence(ClassId(0), ClassId(1)), 2);
        assert_eq!(stats.raw_cooccurrence(ClassId(0), ClassId(0)), 0);
        assert_eq!(stats.smoothed_cooccurrence(ClassId(0), ClassId(0)), 1.0);
        // man is the subject of "holds" twice; P = 2
        let h = stats.subject_histogram(ClassId(0));
        assert_eq!(h, vec![3.0 / 4.0, 1.0 / 4.0]);
        let sum: f64 = stats.object_histogram(ClassId(1)).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(matches!(
            fit_semantic_stats(&AnnotationSet::new(3, vec![], vec![]), &vocab()),
            Err(FeatureError::EmptyAnnotations)
        ));
    }

    #[test]
    fn candidates_follow_vocabulary() {
        let t = vocab();
        let man = Detection::ground_truth("a", ClassId(0), bb([0.0, 0.0, 0.2, 0.2]));
        let man2 = Detection::ground_truth("a", ClassId(0), bb([0.5, 0.0, 0.7, 0.2]));
        let cam = Detection::ground_truth("a", ClassId(1), bb([0.1, 0.1, 0.2, 0.2]));
        let table = Detection::ground_truth("a", ClassId(2), bb([0.0, 0.5, 1.0, 1.0]));
        let c = generate_candidates(&[man.clone(), cam.clone(), table.clone()], PredicateId(0), &t);
        assert_eq!(c, vec![(man.clone(), cam.clone())]);
        assert_eq!(generate_candidates(&[man.clone(), man2, cam.clone()], PredicateId(0), &t).len(), 2);
        assert!(generate_candidates(&[man, table], PredicateId(0), &t).is_empty());
    }

    #[test]
    fn labels_are_predicate_scoped() {
        let set = fixture();
        let gt = set.relations("a");
        let man = gt[0].subject.clone();
        let cam = gt[0].object.clone();
        let far_cam = Detection::ground_truth("a", ClassId(1), bb([0.8, 0.0, 0.9, 0.1]));
        let labeled = label_candidates(
            vec![(man.clone(), cam.clone()), (man.clone(), far_cam)],
            gt,
            PredicateId(0),
            LabelMatch::Exact,
        );
        assert_eq!(labeled[0].1, 1);
        assert_eq!(labeled[1].1, 0);
        let other_pred = label_candidates(vec![(man, cam)], gt, PredicateId(1), LabelMatch::Exact);
        assert_eq!(other_pred[0].1, 0);
    }

    #[test]
    fn iou_label_matching() {
        let set = fixture();
        let gt = set.relations("a");
        let mut man = gt[0].subject.clone();
        man.bbox = bb([0.11, 0.1, 0.4, 0.9]);
        let cam = gt[0].object.clone();
        let c = vec![(man, cam)];
        assert_eq!(label_candidates(c.clone(), gt, PredicateId(0), LabelMatch::Exact)[0].1, 0);
        assert_eq!(label_candidates(c, gt, PredicateId(0), LabelMatch::Iou(0.5))[0].1, 1);
    }

    #[test]
    fn feature_slots() {
        let stats = fit_semantic_stats(&fixture(), &vocab()).unwrap();
        let layout = stats.layout();
        let a = Detection::ground_truth("x", ClassId(0), bb([0.0, 0.0, 0.2, 0.2]));
        let b = Detection::ground_truth("x", ClassId(1), bb([0.1, 0.1, 0.3, 0.3]));
        let f = extract_features(&a, &b, &stats);
        assert_eq!(f.0.len(), layout.len());
        assert_eq!(layout.len(), FIXED_SLOTS + 5 * 2);
        let iou_slot = layout.index_of("iou").unwrap();
        assert!((f.0[iou_slot] as f64 - 1.0 / 7.0).abs() < 1e-7);
        let same = extract_features(&a, &a, &stats);
        assert_eq!(same.0[iou_slot], 1.0);
        assert_eq!(same.0[layout.index_of("delta_cx").unwrap()], 0.0);
        assert_eq!(same.0[layout.index_of("delta_cy").unwrap()], 0.0);
        // man and man never co-occur as two boxes
        assert_eq!(same.0[layout.index_of("log_cooccurrence").unwrap()], 0.0);
        assert!(f.0.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn fingerprint_depends_on_predicates() {
        let a = FeatureLayout::new(&["on".into()]);
        let b = FeatureLayout::new(&["under".into()]);
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a, FeatureLayout::new(&["on".into()]));
        assert_eq!(a.with_prefix(&["s"]).len(), a.len() + 1);
    }

    #[test]
    fn crops() {
        let s = bb([0.0, 0.0, 0.4, 0.4]);
        let o = bb([0.6, 0.6, 1.0, 1.0]);
        let c = visual_crop(&s, &o).unwrap();
        assert_eq!(c.crop, BoundingBox::UNIT);
        assert_eq!(c.keep_regions, vec![s, o]);

        let same = visual_crop(&s, &s).unwrap();
        assert_eq!(same.crop, s);
        assert_eq!(same.keep_regions, vec![BoundingBox::UNIT]);

        let inner = bb([0.1, 0.1, 0.2, 0.3]);
        let nested = visual_crop(&s, &inner).unwrap();
        assert_eq!(nested.crop, s);
        assert_eq!(nested.keep_regions[0], BoundingBox::UNIT);
        assert!((nested.keep_area_fraction() - 1.0).abs() < 1e-12);

        let p = bb([0.5, 0.5, 0.5, 0.5]);
        assert!(matches!(visual_crop(&p, &p), Err(FeatureError::ZeroAreaCrop)));
    }
}
