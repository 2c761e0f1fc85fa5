//! Generators and independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vrdet::bbox::{iou, BoundingBox};
use vrdet::checkpoint::{Tensor, TensorStore};
use vrdet::ensemble::ModelOutput;
use vrdet::gbm::DenseMatrix;
use vrdet::types::{ClassId, Detection, PredicateId, RelationInstance};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_box(rng: &mut impl Rng) -> BoundingBox {
    let x0 = rng.random_range(0.0..0.8);
    let y0 = rng.random_range(0.0..0.8);
    let w = rng.random_range(0.02..0.2);
    let h = rng.random_range(0.02..0.2);
    BoundingBox::new(x0, y0, x0 + w, y0 + h).unwrap()
}

fn jitter(rng: &mut impl Rng, b: &BoundingBox, amount: f64) -> BoundingBox {
    let mut c = b.to_array();
    for v in &mut c {
        *v = (*v + rng.random_range(-amount..amount)).clamp(0.0, 1.0);
    }
    let (x0, x1) = (c[0].min(c[2]), c[0].max(c[2]));
    let (y0, y1) = (c[1].min(c[3]), c[1].max(c[3]));
    BoundingBox::new(x0, y0, x1, y1).unwrap()
}

// ---------------------------------------------------------------------------
// Weighted NMS

/// Up to 30 boxes over 3 models in 2 images and 2 classes, drawn around a
/// few cluster centers so that many boxes overlap.
pub fn random_nms_case(rng: &mut impl Rng) -> Vec<ModelOutput> {
    let centers: Vec<BoundingBox> = (0..rng.random_range(1..6)).map(|_| random_box(rng)).collect();
    let total = rng.random_range(1..=30);
    let mut outputs: Vec<ModelOutput> = (0..3)
        .map(|m| ModelOutput {
            model_id: format!("model{m}"),
            weight: rng.random_range(0.2..2.0),
            detections: Vec::new(),
        })
        .collect();
    for _ in 0..total {
        let c = &centers[rng.random_range(0..centers.len())];
        let d = Detection::new(
            format!("img{}", rng.random_range(0..2)),
            ClassId(rng.random_range(0..2)),
            jitter(rng, c, 0.03),
            // coarse confidences make ties likely
            (rng.random_range(1..=20) as f64) / 20.0,
        );
        let m = rng.random_range(0..3);
        outputs[m].detections.push(d);
    }
    outputs
}

struct Member {
    det: Detection,
    model: String,
    weight: f64,
}

fn seed_before(a: &Member, b: &Member) -> bool {
    if a.det.confidence != b.det.confidence {
        return a.det.confidence > b.det.confidence;
    }
    if a.model != b.model {
        return a.model < b.model;
    }
    let (x, y) = (a.det.bbox.to_array(), b.det.bbox.to_array());
    x < y
}

/// Straight-line weighted NMS written from the documented rule.
pub fn naive_weighted_nms(outputs: &[ModelOutput], threshold: f64, floor: f64) -> Vec<Detection> {
    let max_w = outputs.iter().map(|o| o.weight).fold(0.0, f64::max);
    let mut pool: Vec<Member> = outputs
        .iter()
        .flat_map(|o| {
            o.detections.iter().map(move |d| Member {
                det: d.clone(),
                model: o.model_id.clone(),
                weight: o.weight / max_w,
            })
        })
        .collect();
    let mut out = Vec::new();
    while !pool.is_empty() {
        let mut s = 0;
        for i in 1..pool.len() {
            if seed_before(&pool[i], &pool[s]) {
                s = i;
            }
        }
        let seed = pool.swap_remove(s);
        let (mut cluster, rest): (Vec<Member>, Vec<Member>) = pool.into_iter().partition(|m| {
            m.det.image_id == seed.det.image_id && m.det.class_id == seed.det.class_id && iou(&m.det.bbox, &seed.det.bbox) >= threshold
        });
        pool = rest;
        cluster.push(seed);
        let wc: f64 = cluster.iter().map(|m| m.weight * m.det.confidence).sum();
        let w: f64 = cluster.iter().map(|m| m.weight).sum();
        let mut coords = [0.0; 4];
        for m in &cluster {
            for (c, v) in coords.iter_mut().zip(m.det.bbox.to_array()) {
                *c += m.weight * m.det.confidence * v;
            }
        }
        let conf = (wc / w).clamp(0.0, 1.0);
        if conf >= floor {
            let seed = cluster.last().unwrap();
            let c = coords.map(|v| v / wc);
            out.push(Detection::new(
                seed.det.image_id.clone(),
                seed.det.class_id,
                BoundingBox::new(c[0], c[1], c[2].max(c[0]), c[3].max(c[1])).unwrap(),
                conf,
            ));
        }
    }
    out
}

/// Same multiset of detections up to `tol` on every number.
pub fn same_detections(a: &[Detection], b: &[Detection], tol: f64) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let key = |d: &Detection| (d.image_id.clone(), d.class_id, d.bbox.to_array().map(|v| (v * 1e9).round() as i64));
    let mut a: Vec<&Detection> = a.iter().collect();
    let mut b: Vec<&Detection> = b.iter().collect();
    a.sort_by_key(|d| key(d));
    b.sort_by_key(|d| key(d));
    a.iter().zip(&b).all(|(x, y)| {
        x.image_id == y.image_id
            && x.class_id == y.class_id
            && (x.confidence - y.confidence).abs() <= tol
            && x.bbox.to_array().iter().zip(y.bbox.to_array()).all(|(p, q)| (p - q).abs() <= tol)
    })
}

// ---------------------------------------------------------------------------
// Checkpoints

/// Store with two backbone tensors, an `[classes, dim]` classification head
/// and a `[4 * classes, dim]` box head.
pub fn random_store(rng: &mut impl Rng, classes: usize, dim: usize) -> TensorStore {
    let t = |shape: Vec<usize>, rng: &mut dyn rand::RngCore| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
    };
    let mut s = TensorStore::new();
    s.insert("backbone.conv1.weight", t(vec![8, 3, 3, 3], rng)).unwrap();
    s.insert("backbone.fc.weight", t(vec![dim, 16], rng)).unwrap();
    s.insert("cls_score.weight", t(vec![classes, dim], rng)).unwrap();
    s.insert("cls_score.bias", t(vec![classes], rng)).unwrap();
    s.insert("bbox_pred.weight", t(vec![4 * classes, dim], rng)).unwrap();
    s.insert("bbox_pred.bias", t(vec![4 * classes], rng)).unwrap();
    s
}

// ---------------------------------------------------------------------------
// Boosting

/// Uniform `[0,1)^3` features with label `x0 > 0.5`.
pub fn threshold_data(n: usize, seed: u64) -> (DenseMatrix, Vec<u8>) {
    let mut r = rng(seed);
    let mut data = Vec::with_capacity(3 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let row: [f32; 3] = [r.random(), r.random(), r.random()];
        labels.push(u8::from(row[0] > 0.5));
        data.extend_from_slice(&row);
    }
    (DenseMatrix::new(data, 3).unwrap(), labels)
}

/// AUC by counting concordant positive/negative pairs.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

// ---------------------------------------------------------------------------
// Evaluation

fn rel(image: &str, s: (usize, BoundingBox), o: (usize, BoundingBox), p: usize, score: f64) -> RelationInstance {
    RelationInstance {
        image_id: image.into(),
        subject: Detection::ground_truth(image, ClassId(s.0), s.1),
        object: Detection::ground_truth(image, ClassId(o.0), o.1),
        predicate_id: PredicateId(p),
        score,
    }
}

/// Up to 4 ground-truth instances on pairwise disjoint boxes and up to 6
/// predictions derived from them, with tied scores likely.
pub fn random_eval_case(rng: &mut impl Rng) -> (Vec<RelationInstance>, Vec<RelationInstance>) {
    // disjoint cells of a 4x4 grid
    let mut cells: Vec<usize> = (0..16).collect();
    let cell_box = |c: usize, rng: &mut dyn rand::RngCore| {
        let (cx, cy) = ((c % 4) as f64 * 0.25, (c / 4) as f64 * 0.25);
        let x0 = cx + rng.random_range(0.0..0.05);
        let y0 = cy + rng.random_range(0.0..0.05);
        BoundingBox::new(x0, y0, x0 + rng.random_range(0.1..0.19), y0 + rng.random_range(0.1..0.19)).unwrap()
    };
    let n_gt = rng.random_range(0..=4);
    let mut gt = Vec::new();
    for _ in 0..n_gt {
        let a = cells.swap_remove(rng.random_range(0..cells.len()));
        let b = cells.swap_remove(rng.random_range(0..cells.len()));
        let image = if rng.random_bool(0.3) { "b" } else { "a" };
        gt.push(rel(
            image,
            (rng.random_range(0..2), cell_box(a, rng)),
            (rng.random_range(0..2), cell_box(b, rng)),
            rng.random_range(0..2),
            1.0,
        ));
    }
    let n_pred = rng.random_range(0..=6);
    let mut preds = Vec::new();
    for _ in 0..n_pred {
        let score = rng.random_range(1..=5) as f64 / 5.0;
        if !gt.is_empty() && rng.random_bool(0.7) {
            let g: &RelationInstance = &gt[rng.random_range(0..gt.len())];
            let mut p = g.clone();
            p.score = score;
            match rng.random_range(0..5) {
                0 => p.subject.bbox = jitter(rng, &g.subject.bbox, 0.01),
                1 => p.object.bbox = cell_box(cells[0], rng),
                2 => p.predicate_id = PredicateId(1 - g.predicate_id.0),
                _ => {}
            }
            preds.push(p);
        } else {
            let image = if rng.random_bool(0.3) { "b" } else { "a" };
            preds.push(rel(
                image,
                (rng.random_range(0..2), random_box(rng)),
                (rng.random_range(0..2), random_box(rng)),
                rng.random_range(0..2),
                score,
            ));
        }
    }
    (preds, gt)
}

fn compatible(p: &RelationInstance, g: &RelationInstance, threshold: f64) -> bool {
    p.image_id == g.image_id
        && p.predicate_id == g.predicate_id
        && p.subject.class_id == g.subject.class_id
        && p.object.class_id == g.object.class_id
        && iou(&p.subject.bbox, &g.subject.bbox) >= threshold
        && iou(&p.object.bbox, &g.object.bbox) >= threshold
}

/// Largest matching between predictions and ground truth, by exhaustive search.
fn max_matching(preds: &[&RelationInstance], gt: &[&RelationInstance], used: &mut Vec<bool>, threshold: f64) -> usize {
    let Some((first, rest)) = preds.split_first() else {
        return 0;
    };
    let mut best = max_matching(rest, gt, used, threshold);
    for g in 0..gt.len() {
        if !used[g] && compatible(first, gt[g], threshold) {
            used[g] = true;
            best = best.max(1 + max_matching(rest, gt, used, threshold));
            used[g] = false;
        }
    }
    best
}

/// AP of one predicate where the true-positive count at rank `k` is the best
/// achievable matching of the top `k` predictions. Ties in score are broken
/// by the same (image, sort key) order the evaluator documents.
pub fn oracle_ap(preds: &[RelationInstance], gt: &[RelationInstance], predicate: PredicateId, threshold: f64) -> Option<f64> {
    let mut p: Vec<&RelationInstance> = preds.iter().filter(|r| r.predicate_id == predicate).collect();
    let g: Vec<&RelationInstance> = gt.iter().filter(|r| r.predicate_id == predicate).collect();
    if p.is_empty() && g.is_empty() {
        return None;
    }
    if g.is_empty() {
        return Some(0.0);
    }
    p.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| (a.image_id.as_str(), a.sort_key()).cmp(&(b.image_id.as_str(), b.sort_key())))
    });
    let mut curve = Vec::new();
    for k in 1..=p.len() {
        let tp = max_matching(&p[..k], &g, &mut vec![false; g.len()], threshold);
        curve.push((tp as f64 / g.len() as f64, tp as f64 / k as f64));
    }
    // sum over recall steps of the best precision at or beyond that recall
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..curve.len() {
        let (r, _) = curve[i];
        if r > prev_recall {
            let best = curve[i..].iter().map(|c| c.1).fold(0.0, f64::max);
            ap += (r - prev_recall) * best;
            prev_recall = r;
        }
    }
    Some(ap)
}
