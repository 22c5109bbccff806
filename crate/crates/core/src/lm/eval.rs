//! Perplexity evaluation.

use crate::error::{Error, Result};
use crate::latent::LatentCache;
use crate::lm::corpus::MarkovCorpus;
use crate::lm::model::TransformerLm;

/// Anything that assigns next-token log-likelihoods to token sequences.
pub trait SequenceScorer {
    fn vocab(&self) -> usize;

    /// Negative log-likelihood in nats of every `seq[i]`, `i >= 1`, given
    /// `seq[..i]`, concatenated over the sequences.
    fn token_nll(&self, seqs: &[Vec<u32>]) -> Result<Vec<f64>>;
}

/// `exp` of the mean per-token negative log-likelihood over `split`.
pub fn evaluate_ppl(scorer: &dyn SequenceScorer, split: &[Vec<u32>]) -> Result<f64> {
    Ok(mean_nll(scorer, split)?.exp())
}

/// Mean per-token negative log-likelihood in nats.
pub fn mean_nll(scorer: &dyn SequenceScorer, split: &[Vec<u32>]) -> Result<f64> {
    let targets: usize = split.iter().map(|s| s.len().saturating_sub(1)).sum();
    if targets == 0 {
        return Err(Error::Data("evaluation split has no predictable tokens".into()));
    }
    let nll = scorer.token_nll(split)?;
    debug_assert_eq!(nll.len(), targets);
    Ok(nll.iter().sum::<f64>() / nll.len() as f64)
}

/// Every token equally likely.
#[derive(Debug, Clone, Copy)]
pub struct UniformScorer {
    pub vocab: usize,
}

impl SequenceScorer for UniformScorer {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn token_nll(&self, seqs: &[Vec<u32>]) -> Result<Vec<f64>> {
        let h = (self.vocab as f64).ln();
        Ok(seqs.iter().flat_map(|s| std::iter::repeat_n(h, s.len().saturating_sub(1))).collect())
    }
}

/// Certain that token `t` is followed by `(t + 1) mod vocab`.
#[derive(Debug, Clone, Copy)]
pub struct CycleOracle {
    pub vocab: usize,
}

impl SequenceScorer for CycleOracle {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn token_nll(&self, seqs: &[Vec<u32>]) -> Result<Vec<f64>> {
        let v = self.vocab as u32;
        Ok(seqs
            .iter()
            .flat_map(|s| s.windows(2).map(move |w| if w[1] == (w[0] + 1) % v { 0.0 } else { f64::INFINITY }))
            .collect())
    }
}

/// The generating chain itself. The first prediction of each window, which
/// has only one token of context, uses the stationary order-1 conditional.
#[derive(Debug, Clone, Copy)]
pub struct MarkovOracle<'a> {
    pub corpus: &'a MarkovCorpus,
}

impl SequenceScorer for MarkovOracle<'_> {
    fn vocab(&self) -> usize {
        self.corpus.vocab()
    }

    fn token_nll(&self, seqs: &[Vec<u32>]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for s in seqs {
            for i in 1..s.len() {
                let p = if i == 1 {
                    self.corpus.order1_row(s[0])[s[1] as usize]
                } else {
                    self.corpus.row(s[i - 2], s[i - 1])[s[i] as usize]
                };
                out.push(-p.ln());
            }
        }
        Ok(out)
    }
}

impl SequenceScorer for TransformerLm {
    fn vocab(&self) -> usize {
        self.config().vocab
    }

    fn token_nll(&self, seqs: &[Vec<u32>]) -> Result<Vec<f64>> {
        self.token_nll_with(seqs, None)
    }
}

/// A frozen model whose N-Grammer latents come from a token cache.
#[derive(Debug, Clone, Copy)]
pub struct CachedModel<'a> {
    pub model: &'a TransformerLm,
    pub cache: &'a LatentCache,
}

impl SequenceScorer for CachedModel<'_> {
    fn vocab(&self) -> usize {
        self.model.config().vocab
    }

    fn token_nll(&self, seqs: &[Vec<u32>]) -> Result<Vec<f64>> {
        self.model.token_nll_with(seqs, Some(self.cache))
    }
}
