//! Triplet AP on a small hand-made case: one duplicate, one wrong predicate.

use vrdet::bbox::BoundingBox;
use vrdet::eval::{ap_rel, map_rel, MatchConfig};
use vrdet::types::{ClassId, Detection, PredicateId, RelationInstance};

fn rel(s: BoundingBox, o: BoundingBox, predicate: usize, score: f64) -> RelationInstance {
    RelationInstance {
        image_id: "img".into(),
        subject: Detection::new("img", ClassId(0), s, 1.0),
        object: Detection::new("img", ClassId(1), o, 1.0),
        predicate_id: PredicateId(predicate),
        score,
    }
}

fn main() -> anyhow::Result<()> {
    let a = BoundingBox::new(0.1, 0.1, 0.3, 0.3)?;
    let b = BoundingBox::new(0.5, 0.5, 0.8, 0.8)?;
    let c = BoundingBox::new(0.1, 0.6, 0.3, 0.9)?;
    let gt = vec![rel(a, b, 0, 1.0), rel(c, b, 0, 1.0), rel(a, c, 1, 1.0)];
    let preds = vec![
        rel(a, b, 0, 0.9),
        rel(a, b, 0, 0.8), // duplicate of a matched instance
        rel(c, b, 0, 0.6),
        rel(a, c, 0, 0.5), // right boxes, wrong predicate
        rel(a, c, 1, 0.4),
    ];
    let cfg = MatchConfig::default();
    for p in 0..2 {
        let curve = ap_rel(&preds, &gt, PredicateId(p), &cfg).expect("predicate present");
        println!("predicate {p}: AP {:.4}, points {:?}", curve.ap, curve.points);
    }
    println!("mAP_rel {:.4}", map_rel(&preds, &gt, &cfg)?.map);
    Ok(())
}
