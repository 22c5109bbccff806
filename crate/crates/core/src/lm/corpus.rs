//! Seeded order-2 Markov corpora with analytic entropy rates.
//!
//! Tokens are partitioned into groups and the next-token distribution is
//! indexed by the groups of the previous two tokens. The chain is genuinely
//! second order, but its state space is `groups^2` rather than `vocab^2`,
//! which keeps the transition structure small enough to analyze exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub vocab: usize,
    /// Token groups; the chain state is the group pair of the last two tokens.
    pub groups: usize,
    /// Dirichlet concentration of each transition row.
    pub alpha: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab: 256,
            groups: 32,
            alpha: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MarkovCorpus {
    vocab: usize,
    groups: usize,
    group_of: Vec<usize>,
    /// `groups^2` rows of `vocab` probabilities, indexed by `a * groups + b`.
    rows: Vec<f64>,
    cdf: Vec<f64>,
    /// Stationary distribution over group pairs.
    stationary: Vec<f64>,
    entropy_rate: f64,
    order1_entropy: f64,
}

fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&q| q > 0.0).map(|&q| -q * q.ln()).sum()
}

/// Seeded corpus with Dirichlet(`alpha`) rows and a random balanced group map.
pub fn gen_corpus(cfg: &CorpusConfig) -> Result<MarkovCorpus> {
    let CorpusConfig {
        vocab,
        groups,
        alpha,
        seed,
    } = *cfg;
    if vocab < 2 {
        return Err(Error::Config(format!("corpus vocab must be >= 2, got {vocab}")));
    }
    if groups == 0 || groups > vocab {
        return Err(Error::Config(format!("corpus groups must be in 1..={vocab}, got {groups}")));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("dirichlet alpha must be positive, got {alpha}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..vocab).collect();
    for i in (1..vocab).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let mut group_of = vec![0; vocab];
    for (i, &t) in perm.iter().enumerate() {
        group_of[t] = i % groups;
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let mut rows = Vec::with_capacity(groups * groups * vocab);
    for _ in 0..groups * groups {
        let mut row: Vec<f64> = (0..vocab).map(|_| gamma.sample(&mut rng)).collect();
        let mut total: f64 = row.iter().sum();
        if total == 0.0 {
            // Every draw underflowed; fall back to a single certain token.
            row[rng.random_range(0..vocab)] = 1.0;
            total = 1.0;
        }
        rows.extend(row.iter().map(|w| w / total));
    }
    MarkovCorpus::from_parts(vocab, group_of, rows)
}

impl MarkovCorpus {
    /// Chain from an explicit group map and `groups^2 x vocab` row table.
    pub fn from_parts(vocab: usize, group_of: Vec<usize>, rows: Vec<f64>) -> Result<Self> {
        if vocab < 2 || group_of.len() != vocab {
            return Err(Error::dim("corpus group map", &[group_of.len()], &[vocab]));
        }
        let groups = group_of.iter().max().map_or(0, |g| g + 1);
        if rows.len() != groups * groups * vocab {
            return Err(Error::dim("corpus rows", &[rows.len()], &[groups * groups, vocab]));
        }
        for (s, row) in rows.chunks(vocab).enumerate() {
            let total: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::Data(format!("transition row {s} is not a distribution (sum {total})")));
            }
        }
        let mut cdf = Vec::with_capacity(rows.len());
        for row in rows.chunks(vocab) {
            let mut acc = 0.0;
            for &p in row {
                acc += p;
                cdf.push(acc);
            }
        }
        let mut corpus = Self {
            vocab,
            groups,
            group_of,
            rows,
            cdf,
            stationary: Vec::new(),
            entropy_rate: 0.0,
            order1_entropy: 0.0,
        };
        corpus.stationary = corpus.solve_stationary();
        corpus.entropy_rate = (0..groups * groups)
            .map(|s| corpus.stationary[s] * entropy(corpus.row_of_state(s)))
            .sum();
        corpus.order1_entropy = corpus.compute_order1_entropy();
        Ok(corpus)
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn group_of(&self, token: u32) -> usize {
        self.group_of[token as usize]
    }

    fn row_of_state(&self, s: usize) -> &[f64] {
        &self.rows[s * self.vocab..(s + 1) * self.vocab]
    }

    /// Next-token distribution after `prev2, prev1`.
    pub fn row(&self, prev2: u32, prev1: u32) -> &[f64] {
        self.row_of_state(self.state(prev2, prev1))
    }

    fn state(&self, prev2: u32, prev1: u32) -> usize {
        self.group_of(prev2) * self.groups + self.group_of(prev1)
    }

    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    /// `H(X_t | X_{t-2}, X_{t-1})` in nats under the stationary distribution.
    pub fn entropy_rate(&self) -> f64 {
        self.entropy_rate
    }

    /// `H(X_t | X_{t-1})`: the best any order-1 predictor can do.
    pub fn order1_entropy(&self) -> f64 {
        self.order1_entropy
    }

    /// Group-pair transition: `(a, b) -> (b, c)` with the mass of tokens in group `c`.
    fn pair_transitions(&self) -> Vec<f64> {
        let g = self.groups;
        let mut mass = vec![0.0; g * g * g];
        for s in 0..g * g {
            for (t, &p) in self.row_of_state(s).iter().enumerate() {
                mass[s * g + self.group_of[t]] += p;
            }
        }
        mass
    }

    fn solve_stationary(&self) -> Vec<f64> {
        let g = self.groups;
        let n = g * g;
        let mass = self.pair_transitions();
        let mut pi = vec![1.0 / n as f64; n];
        let mut next = vec![0.0; n];
        // Lazy iteration converges for periodic chains too.
        for _ in 0..100_000 {
            next.iter_mut().zip(&pi).for_each(|(x, p)| *x = 0.5 * p);
            for s in 0..n {
                let b = s % g;
                for c in 0..g {
                    next[b * g + c] += 0.5 * pi[s] * mass[s * g + c];
                }
            }
            let total: f64 = next.iter().sum();
            let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a / total - b).abs()).sum();
            pi.iter_mut().zip(&next).for_each(|(p, x)| *p = x / total);
            if diff < 1e-15 {
                break;
            }
        }
        pi
    }

    fn compute_order1_entropy(&self) -> f64 {
        let (g, v) = (self.groups, self.vocab);
        // joint[a][y] = P(group(X_{t-2}) = a, X_{t-1} = y)
        let mut joint = vec![0.0; g * v];
        for s in 0..g * g {
            let a = s % g;
            for (y, &p) in self.row_of_state(s).iter().enumerate() {
                joint[a * v + y] += self.stationary[s] * p;
            }
        }
        let mut h = 0.0;
        let mut cond = vec![0.0; v];
        for y in 0..v {
            let py: f64 = (0..g).map(|a| joint[a * v + y]).sum();
            if py <= 0.0 {
                continue;
            }
            cond.fill(0.0);
            for a in 0..g {
                let w = joint[a * v + y] / py;
                if w > 0.0 {
                    let row = self.row_of_state(a * g + self.group_of[y]);
                    cond.iter_mut().zip(row).for_each(|(c, r)| *c += w * r);
                }
            }
            h += py * entropy(&cond);
        }
        h
    }

    /// `P(X_t | X_{t-1} = prev)` under the stationary chain.
    pub fn order1_row(&self, prev: u32) -> Vec<f64> {
        let (g, v) = (self.groups, self.vocab);
        let b = self.group_of(prev);
        let prev = prev as usize;
        let mut weights = vec![0.0; g];
        for a in 0..g {
            for s0 in 0..g {
                let s = s0 * g + a;
                weights[a] += self.stationary[s] * self.rows[s * v + prev];
            }
        }
        let total: f64 = weights.iter().sum();
        let mut out = vec![0.0; v];
        for (a, w) in weights.iter().enumerate() {
            if *w > 0.0 {
                let row = self.row_of_state(a * g + b);
                out.iter_mut().zip(row).for_each(|(o, r)| *o += w / total * r);
            }
        }
        out
    }

    fn sample_row(&self, state: usize, u: f64) -> u32 {
        let cdf = &self.cdf[state * self.vocab..(state + 1) * self.vocab];
        let i = cdf.partition_point(|&c| c <= u);
        i.min(self.vocab - 1) as u32
    }
}

/// Which half of the seed partition a stream belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    HeldOut,
}

/// An endless sample path of a [`MarkovCorpus`].
#[derive(Debug, Clone)]
pub struct TokenStream {
    rng: ChaCha8Rng,
    prev2: u32,
    prev1: u32,
}

const BURN_IN: usize = 1000;

impl TokenStream {
    pub fn new(corpus: &MarkovCorpus, seed: u64, split: Split) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(match split {
            Split::Train => 0,
            Split::HeldOut => 1,
        });
        let prev2 = rng.random_range(0..corpus.vocab) as u32;
        let prev1 = rng.random_range(0..corpus.vocab) as u32;
        let mut s = Self { rng, prev2, prev1 };
        for _ in 0..BURN_IN {
            s.next_token(corpus);
        }
        s
    }

    pub fn next_token(&mut self, corpus: &MarkovCorpus) -> u32 {
        let u: f64 = self.rng.random();
        let t = corpus.sample_row(corpus.state(self.prev2, self.prev1), u);
        self.prev2 = self.prev1;
        self.prev1 = t;
        t
    }

    pub fn take(&mut self, corpus: &MarkovCorpus, n: usize) -> Vec<u32> {
        (0..n).map(|_| self.next_token(corpus)).collect()
    }

    /// `count` consecutive windows of `len` tokens.
    pub fn sequences(&mut self, corpus: &MarkovCorpus, count: usize, len: usize) -> Vec<Vec<u32>> {
        (0..count).map(|_| self.take(corpus, len)).collect()
    }
}

/// The fixed evaluation split: `count` windows of `len` tokens.
pub fn held_out(corpus: &MarkovCorpus, seed: u64, count: usize, len: usize) -> Vec<Vec<u32>> {
    TokenStream::new(corpus, seed, Split::HeldOut).sequences(corpus, count, len)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(vocab: usize, groups: usize, seed: u64) -> MarkovCorpus {
        gen_corpus(&CorpusConfig {
            vocab,
            groups,
            alpha: 0.5,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn rows_are_distributions() {
        let c = small(64, 8, 1);
        for s in 0..64 {
            let total: f64 = c.row_of_state(s).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        let pi_total: f64 = c.stationary().iter().sum();
        assert!((pi_total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_permutation_has_zero_entropy() {
        let v = 5;
        // Every state maps to token (b + 1) mod v, with b the previous token.
        let group_of: Vec<usize> = (0..v).collect();
        let mut rows = vec![0.0; v * v * v];
        for a in 0..v {
            for b in 0..v {
                rows[(a * v + b) * v + (b + 1) % v] = 1.0;
            }
        }
        let c = MarkovCorpus::from_parts(v, group_of, rows).unwrap();
        assert_eq!(c.entropy_rate(), 0.0);
        let mut s = TokenStream::new(&c, 3, Split::Train);
        let t = s.take(&c, 10);
        assert!(t.windows(2).all(|w| w[1] == (w[0] + 1) % v as u32));
    }

    #[test]
    fn default_corpus_has_order_gap() {
        let c = gen_corpus(&CorpusConfig::default()).unwrap();
        assert!(c.order1_entropy() - c.entropy_rate() >= 0.3, "{} {}", c.order1_entropy(), c.entropy_rate());
        let uniform = (256f64).ln();
        assert!(c.order1_entropy() < uniform);
    }

    #[test]
    fn stationary_is_fixed_point() {
        let c = small(16, 3, 2);
        let mass = c.pair_transitions();
        let g = 3;
        let mut next = vec![0.0; g * g];
        for s in 0..g * g {
            for cc in 0..g {
                next[(s % g) * g + cc] += c.stationary[s] * mass[s * g + cc];
            }
        }
        for (a, b) in next.iter().zip(c.stationary()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empirical_transitions_within_three_sigma() {
        let c = small(4, 2, 5);
        let mut stream = TokenStream::new(&c, 9, Split::Train);
        let toks = stream.take(&c, 1_000_000);
        let mut counts = vec![0u64; 4 * 4 * 4];
        for w in toks.windows(3) {
            counts[c.state(w[0], w[1]) * 4 + w[2] as usize] += 1;
        }
        for s in 0..4 {
            let n: u64 = counts[s * 4..(s + 1) * 4].iter().sum();
            for t in 0..4 {
                let p = c.row_of_state(s)[t];
                let mean = n as f64 * p;
                let sigma = (n as f64 * p * (1.0 - p)).sqrt().max(1e-9);
                let got = counts[s * 4 + t] as f64;
                assert!((got - mean).abs() <= 3.0 * sigma + 1e-9, "state {s} token {t}: {got} vs {mean}");
            }
        }
    }

    #[test]
    fn splits_differ_and_repeat() {
        let c = small(32, 4, 6);
        let a = held_out(&c, 1, 3, 10);
        assert_eq!(a, held_out(&c, 1, 3, 10));
        let mut train = TokenStream::new(&c, 1, Split::Train);
        assert_ne!(train.sequences(&c, 3, 10), a);
    }

    #[test]
    fn order1_row_is_distribution() {
        let c = small(16, 4, 7);
        for t in 0..16 {
            let total: f64 = c.order1_row(t).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_configs() {
        let cfg = CorpusConfig {
            vocab: 1,
            ..CorpusConfig::default()
        };
        assert!(gen_corpus(&cfg).is_err());
        let cfg = CorpusConfig {
            groups: 0,
            ..CorpusConfig::default()
        };
        assert!(gen_corpus(&cfg).is_err());
    }
}
