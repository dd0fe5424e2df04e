//! Feature ingestion: containers, per-vector standardization, the FVAT file
//! format and the synthetic domain-shift benchmark.

mod format;
mod sequence;
mod synthetic;

pub use format::{
    decode_fvat, decode_text, encode_fvat, encode_text, load_features, save_features,
    save_features_text, FVAT_MAGIC, FVAT_VERSION,
};
pub use sequence::{zscore_normalize, Dataset, Domain, FeatureSequence, SIGMA_FLOOR};
pub use synthetic::{gen_synthetic, DomainSplits, SyntheticBenchmark, SyntheticConfig};
