//! Builds one head row per (object, attribute) pair, each starting from the
//! object's source row.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vrdet::checkpoint::{expand_attribute_head, induced_pair_map, partial_weight_transfer, HeadSpec, InitSpec, Tensor, TensorStore};
use vrdet::ingest::read_class_vocabulary;
use vrdet::types::ClassId;

fn main() -> anyhow::Result<()> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let source = read_class_vocabulary(&fixtures.join("source_classes_80.csv"))?;
    let task = read_class_vocabulary(&fixtures.join("task_classes_57.csv"))?;
    let names: Vec<(String, String)> = serde_json::from_str(&std::fs::read_to_string(fixtures.join("attribute_pairs.json"))?)?;
    let pairs: Vec<(ClassId, ClassId)> = names
        .iter()
        .map(|(o, a)| Ok((source.id(o).ok_or_else(|| anyhow::anyhow!("unknown object {o}"))?, task.id(a).ok_or_else(|| anyhow::anyhow!("unknown attribute {a}"))?)))
        .collect::<anyhow::Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dim = 32;
    let mut src = TensorStore::new();
    let w: Vec<f32> = (0..source.len() * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    src.insert("cls_score.weight", Tensor::new(vec![source.len(), dim], w)?)?;
    src.insert("cls_score.bias", Tensor::new(vec![source.len()], vec![0.0; source.len()])?)?;

    let head = HeadSpec::classification("cls_score.weight", "cls_score.bias");
    let expanded = expand_attribute_head(&src, &head, &pairs)?;
    let via_map = partial_weight_transfer(&src, &head, &induced_pair_map(&pairs), pairs.len(), &InitSpec::default())?;
    for (i, (o, a)) in names.iter().enumerate() {
        println!("row {i}: {o} is {a}");
    }
    println!("head shape {:?}", expanded.get("cls_score.weight").unwrap().shape());
    println!("identical to transfer under the induced map: {}", expanded.to_bytes() == via_map.to_bytes());
    Ok(())
}
