//! Capped class-balanced image sampling on a synthetic corpus.

use vrdet::demo::{generate_corpus, CorpusConfig};
use vrdet::sampler::{class_probabilities, sample_images, ClassCap, SamplerConfig};

fn main() -> anyhow::Result<()> {
    let counts = [5000, 2000, 500];
    for cap in [ClassCap::Infinite, ClassCap::Finite(3000), ClassCap::Finite(1000), ClassCap::Finite(500)] {
        let p = class_probabilities(&counts, &SamplerConfig { cap, seed: 0 })?;
        println!("cap {cap:?}: {:?}", p.probabilities());
    }

    let corpus = generate_corpus(&CorpusConfig {
        num_images: 200,
        ..CorpusConfig::default()
    });
    let cfg = SamplerConfig {
        cap: ClassCap::Finite(60),
        seed: 42,
    };
    let ann = &corpus.annotations;
    let p = class_probabilities(ann.class_image_counts(), &cfg)?;
    for (k, entry) in corpus.classes.entries().iter().enumerate() {
        println!("{:>8}: {:>3} images, p = {:.3}", entry.name, ann.class_image_counts()[k], p.probabilities()[k]);
    }
    println!("first draws: {:?}", sample_images(ann, &cfg, 8)?);
    Ok(())
}
