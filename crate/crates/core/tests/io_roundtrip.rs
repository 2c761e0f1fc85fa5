mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vrdet::bbox::BoundingBox;
use vrdet::checkpoint::{partial_weight_transfer, read_store, write_store, ClassMap, HeadSpec, InitSpec, TensorStore};
use vrdet::ingest::{
    read_class_vocabulary, read_detections, read_relation_predictions, read_relations, read_score_table,
    read_triplet_vocabulary, write_class_vocabulary, write_detections, write_relation_predictions, write_relations,
    write_score_table, write_triplet_vocabulary, ScoreTable,
};
use vrdet::types::{ClassId, ClassVocabulary, Detection, PredicateId, RelationInstance, Triplet, TripletVocabulary};

fn vocab() -> (ClassVocabulary, TripletVocabulary) {
    let mut classes = ClassVocabulary::from_names(["Man", "Guitar", "Table"]).unwrap();
    let wooden = classes.push("Wooden", true).unwrap();
    let mut triplets = TripletVocabulary::new();
    let plays = triplets.intern_predicate("plays");
    let is = triplets.intern_predicate("is");
    triplets.insert(Triplet { subject: ClassId(0), predicate: plays, object: ClassId(1) });
    triplets.insert(Triplet { subject: ClassId(2), predicate: is, object: wooden });
    (classes, triplets)
}

fn random_relations(r: &mut impl Rng, scored: bool) -> Vec<RelationInstance> {
    (0..r.random_range(0..25))
        .map(|_| {
            let image = format!("img{}", r.random_range(0..4));
            let score = if scored { r.random::<f64>() } else { 1.0 };
            let conf = if scored { r.random::<f64>() } else { 1.0 };
            let (s, o, p, obox) = if r.random_bool(0.5) {
                (0, 1, 0, common::random_box(r))
            } else {
                (2, 3, 1, BoundingBox::NULL)
            };
            RelationInstance {
                subject: Detection::new(image.clone(), ClassId(s), common::random_box(r), conf),
                object: Detection::new(image.clone(), ClassId(o), obox, conf),
                image_id: image,
                predicate_id: PredicateId(p),
                score,
            }
        })
        .collect()
}

#[test]
fn vocabularies_round_trip() {
    let (classes, triplets) = vocab();
    let dir = tempfile::tempdir().unwrap();
    let (c, t) = (dir.path().join("classes.csv"), dir.path().join("triplets.csv"));
    write_class_vocabulary(&c, &classes).unwrap();
    write_triplet_vocabulary(&t, &classes, &triplets).unwrap();
    let classes2 = read_class_vocabulary(&c).unwrap();
    assert_eq!(classes2, classes);
    assert_eq!(read_triplet_vocabulary(&t, &classes2).unwrap(), triplets);
}

#[test]
fn store_corruption_is_reported() {
    let store = common::random_store(&mut common::rng(1), 4, 3);
    let bytes = store.to_bytes();
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert_eq!(TensorStore::from_bytes(&bad).unwrap_err().kind(), "BadMagic");
    assert_eq!(TensorStore::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err().kind(), "TruncatedFile");
    let mut long = bytes.clone();
    long.push(0);
    assert_eq!(TensorStore::from_bytes(&long).unwrap_err().kind(), "TrailingBytes");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn relations_round_trip(seed in any::<u64>()) {
        let (classes, triplets) = vocab();
        let rels = random_relations(&mut ChaCha8Rng::seed_from_u64(seed), false);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rel.csv");
        write_relations(&path, &rels, &classes, &triplets).unwrap();
        let set = read_relations(&path, &classes, &triplets).unwrap();
        let mut want = rels.clone();
        want.sort_by_key(|r| r.sort_key());
        want.dedup();
        let mut got: Vec<RelationInstance> = set.all_relations().cloned().collect();
        got.sort_by_key(|r| r.sort_key());
        prop_assert_eq!(got, want);
    }

    #[test]
    fn predictions_round_trip(seed in any::<u64>()) {
        let (classes, triplets) = vocab();
        let rels = random_relations(&mut ChaCha8Rng::seed_from_u64(seed), true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pred.csv");
        write_relation_predictions(&path, &rels, &classes, &triplets).unwrap();
        prop_assert_eq!(read_relation_predictions(&path, &classes, &triplets).unwrap(), rels);
    }

    #[test]
    fn detections_round_trip(seed in any::<u64>()) {
        let (classes, _) = vocab();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let dets: Vec<Detection> = (0..r.random_range(0..30))
            .map(|i| Detection::new(format!("i{i}"), ClassId(r.random_range(0..3)), common::random_box(&mut r), r.random()))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.csv");
        write_detections(&path, &dets, &classes).unwrap();
        prop_assert_eq!(read_detections(&path, &classes).unwrap(), dets);
    }

    #[test]
    fn score_table_round_trips(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut table = ScoreTable::new();
        for _ in 0..r.random_range(0..40) {
            let key = ScoreTable::key(&format!("img{}", r.random_range(0..5)), &common::random_box(&mut r), &common::random_box(&mut r), "plays");
            table.insert(key, r.random());
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        write_score_table(&path, &table).unwrap();
        prop_assert_eq!(read_score_table(&path).unwrap(), table);
    }

    #[test]
    fn store_round_trips(seed in any::<u64>(), classes in 1usize..12, dim in 1usize..16) {
        let store = common::random_store(&mut ChaCha8Rng::seed_from_u64(seed), classes, dim);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.pwt");
        write_store(&store, &path).unwrap();
        let back = read_store(&path).unwrap();
        prop_assert_eq!(back.to_bytes(), store.to_bytes());
        prop_assert_eq!(std::fs::read(&path).unwrap(), store.to_bytes());
    }

    #[test]
    fn transfer_copies_mapped_rows(seed in any::<u64>(), source in 1usize..15, task in 1usize..15, dim in 1usize..10) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let src = common::random_store(&mut r, source, dim);
        let mut map = ClassMap::new();
        for t in 0..task {
            if r.random_bool(0.6) {
                map.insert(ClassId(t), ClassId(r.random_range(0..source)));
            }
        }
        let head = HeadSpec::regression("bbox_pred.weight", "bbox_pred.bias");
        let init = InitSpec { seed, ..InitSpec::default() };
        let out = partial_weight_transfer(&src, &head, &map, task, &init).unwrap();
        prop_assert_eq!(out.to_bytes(), partial_weight_transfer(&src, &head, &map, task, &init).unwrap().to_bytes());
        let (w, ws) = (out.get("bbox_pred.weight").unwrap().data(), src.get("bbox_pred.weight").unwrap().data());
        prop_assert_eq!(w.len(), 4 * task * dim);
        for (t, s) in map.iter() {
            let got = &w[4 * t.0 * dim..4 * (t.0 + 1) * dim];
            let want = &ws[4 * s.0 * dim..4 * (s.0 + 1) * dim];
            prop_assert!(got.iter().zip(want).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        prop_assert_eq!(out.get("cls_score.weight"), src.get("cls_score.weight"));
    }

    #[test]
    fn identity_transfer_is_a_no_op(seed in any::<u64>(), classes in 1usize..12, dim in 1usize..10) {
        let src = common::random_store(&mut ChaCha8Rng::seed_from_u64(seed), classes, dim);
        let head = HeadSpec::classification("cls_score.weight", "cls_score.bias");
        let out = partial_weight_transfer(&src, &head, &ClassMap::identity(classes), classes, &InitSpec::default()).unwrap();
        prop_assert_eq!(out.to_bytes(), src.to_bytes());
    }
}
