//! Partial weight transfer of a detector head from 80 source classes to a
//! 57-class task, 44 of which map onto a source class.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vrdet::checkpoint::{transfer_head, ClassMap, HeadSpec, InitSpec, Tensor, TensorStore, UnmappedRows};
use vrdet::ingest::read_class_vocabulary;

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> anyhow::Result<Tensor> {
    let n = shape.iter().product();
    Ok(Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?)
}

fn main() -> anyhow::Result<()> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let source = read_class_vocabulary(&fixtures.join("source_classes_80.csv"))?;
    let task = read_class_vocabulary(&fixtures.join("task_classes_57.csv"))?;
    let map = ClassMap::from_json_names(&std::fs::read_to_string(fixtures.join("class_map_44.json"))?, &task, &source)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let dim = 64;
    let mut src = TensorStore::new();
    src.insert("backbone.weight", random_tensor(&mut rng, vec![dim, dim])?)?;
    src.insert("cls_score.weight", random_tensor(&mut rng, vec![source.len(), dim])?)?;
    src.insert("cls_score.bias", random_tensor(&mut rng, vec![source.len()])?)?;

    let head = HeadSpec::classification("cls_score.weight", "cls_score.bias");
    let init = InitSpec::default();
    let (out, summary) = transfer_head(&src, &head, &map, task.len(), UnmappedRows::Random(&init))?;
    println!("{summary}");

    let row = |store: &TensorStore, k: usize| store.get("cls_score.weight").unwrap().data()[k * dim..(k + 1) * dim].to_vec();
    let person = source.id("person").expect("person is a source class").0;
    for name in ["Man", "Woman", "Boy", "Girl"] {
        let t = task.id(name).expect("task class").0;
        println!("{name:>6} copies person row: {}", row(&out, t) == row(&src, person));
    }
    println!("PWT1 size: {} bytes", out.to_bytes().len());
    Ok(())
}
