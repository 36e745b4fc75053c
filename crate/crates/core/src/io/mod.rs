//! File formats: CoNLL data, checkpoints and config files.

pub mod checkpoint;
pub mod config;
pub mod conll;

pub use checkpoint::{
    checkpoint_to_state, load_checkpoint, save_checkpoint, state_to_checkpoint, Checkpoint, CheckpointConfigs, TensorEntry,
    TrainingMetadata,
};
pub use config::{parse_config, parse_config_str, RunConfig};
pub use conll::{corpus_stats, parse_conll, parse_conll_str, parse_tokens, write_conll, Corpus, CorpusStats, Sentence};
