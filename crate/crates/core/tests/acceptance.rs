//! Acceptance criteria, one `[PASS]`/`[FAIL]` line each. Exits nonzero if
//! any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::Rng;
use sha2::{Digest, Sha256};

use vrdet::bbox::BoundingBox;
use vrdet::checkpoint::{
    expand_attribute_head, induced_pair_map, partial_weight_transfer, ClassMap, HeadSpec, InitSpec, TensorStore,
};
use vrdet::demo::{run_demo, DemoConfig};
use vrdet::ensemble::{oracle::brute_force_nms_oracle, weighted_nms, ModelOutput, NmsConfig};
use vrdet::eval::{ap_rel, MatchConfig};
use vrdet::gbm::{roc_auc, train, train_with_log, Booster, GbmConfig};
use vrdet::ingest::{read_class_vocabulary, AnnotationSet};
use vrdet::sampler::{class_probabilities, ClassBalancedSampler, ClassCap, SamplerConfig};
use vrdet::types::{ClassId, Detection, PredicateId, RelationInstance};

type Check = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Check);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn sampler() -> Check {
    let p = class_probabilities(&[5000, 2000, 500], &SamplerConfig { cap: ClassCap::Finite(1000), seed: 0 })
        .map_err(|e| e.to_string())?;
    ensure(p.probabilities() == [0.4, 0.4, 0.2], format!("exact distribution {:?}", p.probabilities()))?;

    // disjoint per-class image sets with the same counts
    let b = BoundingBox::new(0.1, 0.1, 0.3, 0.3).unwrap();
    let mut boxes = Vec::new();
    for (k, &n) in [5000usize, 2000, 500].iter().enumerate() {
        boxes.extend((0..n).map(|i| Detection::ground_truth(format!("c{k}_{i}"), ClassId(k), b)));
    }
    let set = AnnotationSet::new(3, boxes, vec![]);
    let mut s = ClassBalancedSampler::new(&set, &SamplerConfig { cap: ClassCap::Finite(1000), seed: 11 })
        .map_err(|e| e.to_string())?;
    let m = 30_000;
    let mut counts = [0usize; 3];
    for _ in 0..m {
        let (_, image) = s.next_pair();
        let k: usize = image[1..2].parse().unwrap();
        counts[k] += 1;
    }
    let freq = counts.map(|c| c as f64 / m as f64);
    let worst = freq.iter().zip([0.4, 0.4, 0.2]).map(|(f, p)| (f - p).abs()).fold(0.0, f64::max);
    ensure(worst <= 0.01, format!("empirical {freq:?}"))?;
    Ok(format!("p=[0.4,0.4,0.2] exact, MC max deviation {worst:.4}"))
}

fn sha(t: &vrdet::checkpoint::Tensor) -> [u8; 32] {
    let mut h = Sha256::new();
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    h.finalize().into()
}

fn pwt() -> Check {
    let source = read_class_vocabulary(&fixture("source_classes_80.csv")).map_err(|e| e.to_string())?;
    let task = read_class_vocabulary(&fixture("task_classes_57.csv")).map_err(|e| e.to_string())?;
    let json = std::fs::read_to_string(fixture("class_map_44.json")).map_err(|e| e.to_string())?;
    let map = ClassMap::from_json_names(&json, &task, &source).map_err(|e| e.to_string())?;
    ensure(source.len() == 80 && task.len() == 57 && map.len() == 44, "fixture sizes")?;

    let dim = 512;
    let src = common::random_store(&mut common::rng(3), 80, dim);
    let head = HeadSpec::classification("cls_score.weight", "cls_score.bias");
    let init = InitSpec { mean: 0.0, std: 0.01, bias: 0.0, seed: 5 };
    let out = partial_weight_transfer(&src, &head, &map, 57, &init).map_err(|e| e.to_string())?;

    let w_src = src.get("cls_score.weight").unwrap().data();
    let w = out.get("cls_score.weight").unwrap().data();
    let b_src = src.get("cls_score.bias").unwrap().data();
    let b = out.get("cls_score.bias").unwrap().data();
    let mut unmapped = Vec::new();
    for t in 0..57 {
        let row = &w[t * dim..(t + 1) * dim];
        match map.get(ClassId(t)) {
            Some(s) => {
                let src_row = &w_src[s.0 * dim..(s.0 + 1) * dim];
                ensure(
                    row.iter().zip(src_row).all(|(a, b)| a.to_bits() == b.to_bits())
                        && b[t].to_bits() == b_src[s.0].to_bits(),
                    format!("mapped row {t} differs"),
                )?;
            }
            None => {
                unmapped.extend(row.iter().map(|&v| v as f64));
                ensure(b[t] == init.bias, format!("unmapped bias {t}"))?;
            }
        }
    }
    let n = unmapped.len() as f64;
    let mean = unmapped.iter().sum::<f64>() / n;
    let var = unmapped.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sigma = init.std as f64;
    let mean_tol = 3.0 * sigma / n.sqrt();
    let var_tol = 3.0 * sigma * sigma * (2.0 / (n - 1.0)).sqrt();
    ensure((mean - init.mean as f64).abs() <= mean_tol, format!("unmapped mean {mean}"))?;
    ensure((var - sigma * sigma).abs() <= var_tol, format!("unmapped variance {var}"))?;

    for (name, t) in src.iter() {
        if name != head.weight && name != head.bias {
            ensure(out.get(name).map(sha) == Some(sha(t)), format!("non-head tensor {name} changed"))?;
        }
    }
    let bytes = out.to_bytes();
    let back = TensorStore::from_bytes(&bytes).map_err(|e| e.to_string())?;
    ensure(back.to_bytes() == bytes && back == out, "PWT1 round trip")?;
    Ok(format!("44 rows bitwise, 13 rows mean {mean:.2e} sd {:.5}, round trip exact", var.sqrt()))
}

fn nms() -> Check {
    let cfg = NmsConfig::default();
    let mut r = common::rng(21);
    for case in 0..200 {
        let outputs = common::random_nms_case(&mut r);
        let fast = weighted_nms(&outputs, &cfg).map_err(|e| e.to_string())?;
        let slow = brute_force_nms_oracle(&outputs, &cfg).map_err(|e| e.to_string())?;
        let naive = common::naive_weighted_nms(&outputs, cfg.iou_threshold, cfg.score_floor);
        ensure(fast == slow, format!("case {case}: differs from the exhaustive oracle"))?;
        ensure(common::same_detections(&fast, &naive, 1e-12), format!("case {case}: differs from the naive oracle"))?;
    }
    let b = BoundingBox::new(0.2, 0.2, 0.6, 0.6).unwrap();
    let model = |id: &str, c: f64| ModelOutput {
        model_id: id.into(),
        weight: 1.0,
        detections: vec![Detection::new("img", ClassId(0), b, c)],
    };
    let fused = weighted_nms(&[model("a", 0.8), model("b", 0.6)], &cfg).map_err(|e| e.to_string())?;
    ensure(fused.len() == 1 && (fused[0].confidence - 0.7).abs() <= 1e-12, format!("fixture gave {fused:?}"))?;
    let moved = fused[0].bbox.to_array().iter().zip(b.to_array()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    ensure(moved <= 1e-12, format!("fixture box moved by {moved}"))?;
    Ok("200 random instances match both oracles, fixture confidence 0.7".into())
}

fn gbm() -> Check {
    let (x, y) = common::threshold_data(2000, 1);
    let (xt, yt) = common::threshold_data(2000, 2);
    let cfg = GbmConfig {
        max_depth: 3,
        rounds: 50,
        learning_rate: 0.3,
        ..GbmConfig::default()
    };
    let (model, log) = train_with_log(&x, &y, None, &cfg).map_err(|e| e.to_string())?;
    let auc = roc_auc(&model.predict_matrix(&xt).map_err(|e| e.to_string())?, &yt);
    ensure(auc >= 0.99, format!("held-out AUC {auc}"))?;
    ensure(
        log.train_loss.windows(2).all(|w| w[1] <= w[0] + 1e-12),
        "training loss increased",
    )?;

    for booster in [Booster::GbTree, Booster::Dart] {
        let c = GbmConfig {
            booster,
            subsample: 0.7,
            colsample_bytree: 0.7,
            seed: 9,
            ..cfg.clone()
        };
        let a = train(&x, &y, None, &c).map_err(|e| e.to_string())?.to_bytes();
        let b = train(&x, &y, None, &c).map_err(|e| e.to_string())?.to_bytes();
        ensure(a == b, format!("{booster:?} bytes differ across seeded runs"))?;
    }

    let heavy = train(&x, &y, None, &GbmConfig { lambda: 1e12, ..cfg.clone() }).map_err(|e| e.to_string())?;
    let max_leaf = heavy
        .trees()
        .iter()
        .flat_map(|t| t.leaf_values())
        .map(|v| v.abs())
        .fold(0.0f32, f32::max);
    ensure(max_leaf < 1e-6, format!("max leaf {max_leaf}"))?;
    Ok(format!("AUC {auc:.4}, loss monotone, bytes stable, max leaf at lambda=1e12 {max_leaf:.1e}"))
}

fn gt_rel(s: BoundingBox, o: BoundingBox, p: usize, score: f64) -> RelationInstance {
    RelationInstance {
        image_id: "img".into(),
        subject: Detection::ground_truth("img", ClassId(0), s),
        object: Detection::ground_truth("img", ClassId(1), o),
        predicate_id: PredicateId(p),
        score,
    }
}

fn evaluator() -> Check {
    let cfg = MatchConfig::default();
    let s = BoundingBox::new(0.1, 0.1, 0.3, 0.3).unwrap();
    let o = BoundingBox::new(0.5, 0.5, 0.9, 0.9).unwrap();
    let elsewhere = BoundingBox::new(0.6, 0.0, 0.8, 0.2).unwrap();
    let gt = vec![gt_rel(s, o, 0, 1.0)];
    let ap = |preds: &[RelationInstance]| ap_rel(preds, &gt, PredicateId(0), &cfg).map(|c| c.ap);

    let one = ap(&[gt_rel(s, o, 0, 0.9)]);
    let half = ap(&[gt_rel(s, elsewhere, 0, 0.9), gt_rel(s, o, 0, 0.4)]);
    let zero = ap(&[]);
    let close = |v: Option<f64>, want: f64| v.is_some_and(|v| (v - want).abs() <= 1e-12);
    ensure(close(one, 1.0), format!("single hit gave {one:?}"))?;
    ensure(close(half, 0.5), format!("miss then hit gave {half:?}"))?;
    ensure(close(zero, 0.0), format!("no predictions gave {zero:?}"))?;

    let mut r = common::rng(77);
    let mut partial = 0;
    for case in 0..500 {
        let (preds, gt) = common::random_eval_case(&mut r);
        for p in 0..2 {
            let got = ap_rel(&preds, &gt, PredicateId(p), &cfg).map(|c| c.ap);
            let want = common::oracle_ap(&preds, &gt, PredicateId(p), cfg.iou_threshold);
            let same = match (got, want) {
                (None, None) => true,
                (Some(a), Some(b)) => (a - b).abs() <= 1e-12,
                _ => false,
            };
            ensure(same, format!("case {case} predicate {p}: {got:?} vs oracle {want:?}"))?;
            partial += usize::from(want.is_some_and(|a| a > 0.0 && a < 1.0));
        }
    }
    Ok(format!("fixtures 1.0/0.5/0.0 exact, 500 cases match exhaustive matching ({partial} with fractional AP)"))
}

fn demo() -> Check {
    let outcome = run_demo(&DemoConfig::with_seed(7)).map_err(|e| e.to_string())?;
    let (s2, avg, agg) = (outcome.stage2_map(), outcome.average_map(), outcome.aggregate_map());
    ensure(outcome.corpus.annotations.num_images() == 500, "corpus size")?;
    ensure(s2 >= 0.90, format!("stage-2 mAP {s2:.4}"))?;
    ensure(agg >= avg, format!("aggregate {agg:.4} below average {avg:.4}"))?;
    Ok(format!("stage-2 {s2:.4}, average {avg:.4}, aggregate {agg:.4}"))
}

fn attribute_expansion() -> Check {
    let mut r = common::rng(99);
    let heads = [
        HeadSpec::classification("cls_score.weight", "cls_score.bias"),
        HeadSpec::regression("bbox_pred.weight", "bbox_pred.bias"),
    ];
    let init = InitSpec::default();
    for case in 0..100 {
        let classes = r.random_range(1..20);
        let dim = r.random_range(1..24);
        let src = common::random_store(&mut r, classes, dim);
        let pairs: Vec<(ClassId, ClassId)> = (0..r.random_range(1..30))
            .map(|_| (ClassId(r.random_range(0..classes)), ClassId(r.random_range(0..50))))
            .collect();
        for head in &heads {
            let a = expand_attribute_head(&src, head, &pairs).map_err(|e| e.to_string())?;
            let b = partial_weight_transfer(&src, head, &induced_pair_map(&pairs), pairs.len(), &init)
                .map_err(|e| e.to_string())?;
            ensure(a.to_bytes() == b.to_bytes(), format!("case {case} head {}", head.weight))?;
        }
    }
    Ok("100 random stores, both heads bitwise equal".into())
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("1 sampler", Duration::from_secs(5), sampler),
        ("2 partial weight transfer", Duration::from_secs(1), pwt),
        ("3 weighted nms", Duration::from_secs(5), nms),
        ("4 gradient boosting", Duration::from_secs(60), gbm),
        ("5 evaluator", Duration::from_secs(10), evaluator),
        ("6 end-to-end demo", Duration::from_secs(300), demo),
        ("7 attribute expansion", Duration::MAX, attribute_expansion),
    ];
    let mut failed = BTreeMap::new();
    for (name, limit, check) in criteria {
        let start = Instant::now();
        let result = check();
        let took = start.elapsed();
        let result = match result {
            Ok(msg) if took > limit => Err(format!("{msg}; took {took:.2?}, limit {limit:?}")),
            other => other,
        };
        match result {
            Ok(msg) => println!("[PASS] {name}: {msg} ({took:.2?})"),
            Err(msg) => {
                println!("[FAIL] {name}: {msg} ({took:.2?})");
                failed.insert(name, msg);
            }
        }
    }
    println!("{} passed, {} failed", 7 - failed.len(), failed.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
