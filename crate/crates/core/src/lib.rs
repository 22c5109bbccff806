//! Latent n-gram augmentation for transformer language models.
//!
//! Uni-gram embeddings are quantized per head against a product-quantization
//! [`Codebook`], adjacent latent IDs are combined into bigram IDs, each head
//! hashes those into a bounded vocabulary with its own universal hash, and
//! the hashed IDs index a trainable [`BigramTable`]. The layer output is the
//! per-head concatenation of the layer-normalized uni-gram and bigram
//! streams.

pub mod autodiff;
pub mod checkpoint;
pub mod codebook;
pub mod error;
pub mod gradcheck;
pub mod hash;
pub mod latent;
pub mod layer;
pub mod lm;
pub mod table;
pub mod tensor;
mod wire;

pub use autodiff::{Gradients, SparseRows, Tape, Var};
pub use checkpoint::{checkpoint_bytes, read_checkpoint, write_checkpoint};
pub use codebook::{Codebook, LatentSequence};
pub use error::{Error, Result};
pub use gradcheck::{finite_diff_check, finite_diff_check_sparse};
pub use hash::{bigram_ids, make_hash_family, BigramSequence, HashFamily, HeadHash};
pub use latent::{
    bench_latent_paths, build_cache, inspect_clusters, write_bench_table, BenchRow, BenchSettings, ClusterReport, LatentCache,
};
pub use layer::{sub_seed, LayerNormParams, Mode, NGrammerConfig, NGrammerGrads, NGrammerState, NGrammerVars};
pub use table::{BigramTable, SparseGrad, ADAGRAD_EPS};
pub use tensor::Tensor;
pub use wire::fnv1a64;
