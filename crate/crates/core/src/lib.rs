//! Visual relationship detection as a chain of small, separately testable
//! stages:
//!
//! * [`sampler`]: class-capped image sampling for detector training.
//! * [`checkpoint`]: the `PWT1` tensor store and head surgery between class
//!   vocabularies.
//! * [`ensemble`]: weighted non-maximum suppression over several detectors.
//! * [`features`]: corpus statistics and spatio-semantic pair features.
//! * [`gbm`]: gradient boosted trees (gbtree and DART) with the `GBM1` format.
//! * [`stages`]: per-predicate stage-2 models and the stage-3 aggregator.
//! * [`eval`]: triplet AP and mAP.
//! * [`ingest`]: CSV readers and writers for every on-disk table.
//! * [`demo`]: a seeded synthetic corpus that exercises the whole chain.
//! * [`cli`]: the `vrdet` command line.
//!
//! Each capability has a runnable example under `examples/`; see the README
//! for the list.
//!
//! All randomness comes from [`rand_chacha::ChaCha8Rng`] seeded from a `u64`,
//! so every output is reproducible from its inputs and seed.

pub mod bbox;
pub mod checkpoint;
pub mod cli;
pub mod demo;
pub mod ensemble;
pub mod eval;
pub mod features;
pub mod gbm;
pub mod ingest;
pub mod sampler;
pub mod stages;
pub mod types;

pub use bbox::BoundingBox;
pub use types::{ClassId, ClassVocabulary, Detection, PredicateId, RelationInstance, Triplet, TripletVocabulary};
