//! Dataset model, record files, vocabularies and the synthetic generator.

mod dataset;
pub mod synth;
mod vocab;

pub use dataset::{
    build_soft_target, load_dataset, write_dataset, DatasetBundle, FeatureRef, FeatureStore,
    SampleRecord, DEFAULT_MAX_Q_LEN,
};
pub use synth::{gen_synthetic, ChannelLayout, RuleTable, SynthRule, SynthShape};
pub use vocab::{tokenize, tokenize_and_pad, Labels, Vocabulary, PAD, PAD_TOKEN, UNK, UNK_TOKEN};
