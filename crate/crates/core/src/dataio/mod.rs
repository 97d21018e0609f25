//! Feature fixtures, synthetic data, batching and Emodality shuffling.

mod batch;
mod fixture;
mod synthetic;

pub use batch::{emodality_shuffle, make_batches, PairBatch, ShuffledPair};
pub use fixture::{load_fixture, meta_path, write_fixture, Dataset, DatasetMeta, FeatureRecord};
pub use synthetic::{gen_synthetic, SyntheticData, SyntheticSpec};
