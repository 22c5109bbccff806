//! A small decoder-only language model for exercising the layer end to end.

pub mod corpus;
pub mod eval;
pub mod model;
pub mod optim;
pub mod train;

pub use corpus::{gen_corpus, held_out, CorpusConfig, MarkovCorpus, Split, TokenStream};
pub use eval::{evaluate_ppl, mean_nll, CachedModel, CycleOracle, MarkovOracle, SequenceScorer, UniformScorer};
pub use model::{build_model, Batch, Forward, LayerPosition, ModelConfig, ModelGrads, Param, TransformerLm};
pub use optim::{clip_factor, schedule, Adam, AdamSettings};
pub use train::{train, StepRecord, TrainConfig, Trainer};
