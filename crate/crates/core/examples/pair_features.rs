//! Spatio-semantic features and the visual-model crop of one candidate pair.

use vrdet::demo::{generate_corpus, CorpusConfig};
use vrdet::features::{extract_features, fit_semantic_stats, generate_candidates, visual_crop};

fn main() -> anyhow::Result<()> {
    let corpus = generate_corpus(&CorpusConfig {
        num_images: 100,
        ..CorpusConfig::default()
    });
    let stats = fit_semantic_stats(&corpus.annotations, &corpus.triplets)?;
    let layout = stats.layout();
    println!("{} features, layout fingerprint {}", layout.len(), layout.fingerprint());

    let image = corpus.annotations.image_ids().next().expect("non-empty corpus").to_string();
    let above = corpus.triplets.predicate_id("above").expect("demo predicate");
    let cands = generate_candidates(corpus.annotations.boxes(&image), above, &corpus.triplets);
    let (s, o) = cands.first().ok_or_else(|| anyhow::anyhow!("no candidate pairs in {image}"))?;
    let f = extract_features(s, o, &stats);
    println!(
        "{image}: {} above {}",
        corpus.classes.name(s.class_id).unwrap_or("?"),
        corpus.classes.name(o.class_id).unwrap_or("?")
    );
    for (name, v) in layout.names().iter().zip(f.as_slice()).take(20) {
        println!("  {name:<28} {v:.4}");
    }
    let crop = visual_crop(&s.bbox, &o.bbox)?;
    println!("crop {:?}, visible fraction {:.3}", crop.crop.to_array(), crop.keep_area_fraction());
    Ok(())
}
