//! Class-balanced image sampling.
//!
//! With per-class image counts `n_k` and a cap `N`, class `k` is drawn with
//! probability `min(n_k, N) / sum_i min(n_i, N)`. An infinite cap gives the
//! original frequency distribution. Images are then drawn in two stages:
//! class first, then an image uniformly among those containing the class.
//! This realizes the target distribution exactly when class image sets are
//! disjoint; images holding several classes are over-represented otherwise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::AnnotationSet;
use crate::types::ClassId;

/// Identifier of the generator behind every seeded stream in this crate.
pub const RNG_ALGORITHM: &str = "chacha8";

pub const DEFAULT_CAP: u64 = 3000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SamplerError {
    #[error("every class has zero images")]
    AllClassesEmpty,
    #[error("class cap must be at least 1")]
    ZeroCap,
    #[error("sample count must be at least 1")]
    ZeroCount,
}

impl SamplerError {
    pub fn kind(&self) -> &'static str {
        match self {
            SamplerError::AllClassesEmpty => "AllClassesEmpty",
            SamplerError::ZeroCap => "ZeroCap",
            SamplerError::ZeroCount => "ZeroCount",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassCap {
    Finite(u64),
    Infinite,
}

impl ClassCap {
    fn apply(self, n: u64) -> u64 {
        match self {
            ClassCap::Finite(cap) => n.min(cap),
            ClassCap::Infinite => n,
        }
    }
}

impl std::str::FromStr for ClassCap {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinite" | "infinity" | "none" => Ok(ClassCap::Infinite),
            v => v
                .parse::<u64>()
                .map(ClassCap::Finite)
                .map_err(|e| format!("cap must be a positive integer or `inf`: {e}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub cap: ClassCap,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            cap: ClassCap::Finite(DEFAULT_CAP),
            seed: 0,
        }
    }
}

impl SamplerConfig {
    fn validate(&self) -> Result<(), SamplerError> {
        match self.cap {
            ClassCap::Finite(0) => Err(SamplerError::ZeroCap),
            _ => Ok(()),
        }
    }
}

/// Probability of each class, summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution(Vec<f64>);

impl ClassDistribution {
    pub fn probabilities(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, k: ClassId) -> f64 {
        self.0.get(k.0).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }
}

pub fn class_probabilities(counts: &[usize], config: &SamplerConfig) -> Result<ClassDistribution, SamplerError> {
    config.validate()?;
    let capped: Vec<u64> = counts.iter().map(|&n| config.cap.apply(n as u64)).collect();
    let total: u64 = capped.iter().sum();
    if total == 0 {
        return Err(SamplerError::AllClassesEmpty);
    }
    let total = total as f64;
    Ok(ClassDistribution(capped.into_iter().map(|c| c as f64 / total).collect()))
}

/// Seeded two-stage sampler over an annotation set.
#[derive(Debug, Clone)]
pub struct ClassBalancedSampler {
    distribution: ClassDistribution,
    cumulative: Vec<f64>,
    images: Vec<Vec<String>>,
    rng: ChaCha8Rng,
}

impl ClassBalancedSampler {
    pub fn new(annotations: &AnnotationSet, config: &SamplerConfig) -> Result<Self, SamplerError> {
        let distribution = class_probabilities(annotations.class_image_counts(), config)?;
        let images: Vec<Vec<String>> = (0..annotations.num_classes())
            .map(|k| {
                annotations
                    .images_with_class(ClassId(k))
                    .into_iter()
                    .map(str::to_string)
                    .collect()
            })
            .collect();
        let mut acc = 0.0;
        let cumulative = distribution
            .probabilities()
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(ClassBalancedSampler {
            distribution,
            cumulative,
            images,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        })
    }

    pub fn distribution(&self) -> &ClassDistribution {
        &self.distribution
    }

    fn draw_class(&mut self) -> usize {
        let u: f64 = self.rng.random::<f64>() * self.cumulative.last().copied().unwrap_or(1.0);
        let mut k = self.cumulative.partition_point(|&c| c <= u);
        // rounding can push u past the last bucket or onto an empty class
        k = k.min(self.cumulative.len() - 1);
        while self.images[k].is_empty() {
            k = if k == 0 { self.cumulative.len() - 1 } else { k - 1 };
        }
        k
    }

    /// Draws one `(class, image)` pair.
    pub fn next_pair(&mut self) -> (ClassId, &str) {
        let k = self.draw_class();
        let idx = self.rng.random_range(0..self.images[k].len());
        (ClassId(k), self.images[k][idx].as_str())
    }
}

impl Iterator for ClassBalancedSampler {
    type Item = String;
    fn next(&mut self) -> Option<String> {
        Some(self.next_pair().1.to_string())
    }
}

/// Draws `count` image ids i.i.d. under the capped class distribution.
pub fn sample_images(annotations: &AnnotationSet, config: &SamplerConfig, count: usize) -> Result<Vec<String>, SamplerError> {
    if count == 0 {
        return Err(SamplerError::ZeroCount);
    }
    let sampler = ClassBalancedSampler::new(annotations, config)?;
    Ok(sampler.take(count).collect())
}
