//! The N-Grammer layer: quantize, form bigrams, hash, look up, normalize, concatenate.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::codebook::{Codebook, LatentSequence};
use crate::error::{Error, Result};
use crate::hash::{bigram_ids, make_hash_family, HashFamily};
use crate::latent::LatentCache;
use crate::table::{BigramTable, SparseGrad};
use crate::tensor::Tensor;
use crate::wire::{expect_magic, get_f64s, get_u32, put_f64s, put_len};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NGrammerConfig {
    /// Clusters per head.
    pub k: usize,
    /// Rows of the bigram table.
    pub v: usize,
    pub heads: usize,
    /// Per-head uni-gram width.
    pub dim: usize,
    /// Per-head bigram width.
    pub bigram_dim: usize,
    pub seed: u64,
    pub eps_ln: f64,
    pub kmeans_lr: f64,
}

impl Default for NGrammerConfig {
    fn default() -> Self {
        Self {
            k: 64,
            v: 4096,
            heads: 4,
            dim: 12,
            bigram_dim: 4,
            seed: 0,
            eps_ln: 1e-5,
            kmeans_lr: 1e-3,
        }
    }
}

impl NGrammerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k == 0 || self.v == 0 || self.heads == 0 || self.dim == 0 || self.bigram_dim == 0 {
            return bad(format!(
                "ngrammer extents must be >= 1 (k={}, v={}, heads={}, dim={}, bigram_dim={})",
                self.k, self.v, self.heads, self.dim, self.bigram_dim
            ));
        }
        if self.k > u32::MAX as usize {
            return bad(format!("k={} does not fit latent IDs", self.k));
        }
        if !(self.eps_ln > 0.0 && self.eps_ln.is_finite()) {
            return bad(format!("eps_ln must be positive, got {}", self.eps_ln));
        }
        if !(self.kmeans_lr >= 0.0 && self.kmeans_lr.is_finite()) {
            return bad(format!("kmeans_lr must be >= 0, got {}", self.kmeans_lr));
        }
        Ok(())
    }

    /// `heads * dim`, the width entering the layer.
    pub fn input_width(&self) -> usize {
        self.heads * self.dim
    }

    /// `heads * (dim + bigram_dim)`, the width leaving it.
    pub fn output_width(&self) -> usize {
        self.heads * (self.dim + self.bigram_dim)
    }

    /// Share of the output width taken by bigram features.
    pub fn bigram_fraction(&self) -> f64 {
        self.bigram_dim as f64 / (self.dim + self.bigram_dim) as f64
    }
}

/// SplitMix64 finalizer over `seed + stream`, for deriving independent seeds.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const HASH_STREAM: u64 = 1;
const TABLE_STREAM: u64 = 2;
const CODEBOOK_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// The codebook takes one k-means step per forward pass.
    Training,
    /// The codebook is fixed and latents may be cached.
    Frozen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNormParams {
    pub fn new(n: usize) -> Self {
        Self {
            gain: vec![1.0; n],
            bias: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.gain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gain.is_empty()
    }
}

/// Tape handles for the layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct NGrammerVars {
    pub table: Var,
    pub uni_gain: Var,
    pub uni_bias: Var,
    pub bi_gain: Var,
    pub bi_bias: Var,
}

/// Gradients of the layer's parameters after a backward pass.
#[derive(Debug, Clone)]
pub struct NGrammerGrads {
    pub table: SparseGrad,
    pub uni_gain: Vec<f64>,
    pub uni_bias: Vec<f64>,
    pub bi_gain: Vec<f64>,
    pub bi_bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct NGrammerState {
    config: NGrammerConfig,
    codebook: Option<Codebook>,
    hash: HashFamily,
    table: BigramTable,
    ln_uni: LayerNormParams,
    ln_bi: LayerNormParams,
    mode: Mode,
}

impl NGrammerState {
    /// Fresh layer in training mode. The codebook is created from the
    /// first batch that passes through [`forward`](Self::forward).
    pub fn new(config: NGrammerConfig) -> Result<Self> {
        config.validate()?;
        let hash = make_hash_family(config.k, config.v, config.heads, sub_seed(config.seed, HASH_STREAM))?;
        let table = BigramTable::init(
            config.v,
            config.heads,
            config.bigram_dim,
            sub_seed(config.seed, TABLE_STREAM),
            None,
        )?;
        Ok(Self {
            ln_uni: LayerNormParams::new(config.dim),
            ln_bi: LayerNormParams::new(config.bigram_dim),
            config,
            codebook: None,
            hash,
            table,
            mode: Mode::Training,
        })
    }

    /// Reassembles a layer from stored parts, checking they agree with `config`.
    pub fn from_parts(
        config: NGrammerConfig,
        codebook: Option<Codebook>,
        hash: HashFamily,
        table: BigramTable,
        ln_uni: LayerNormParams,
        ln_bi: LayerNormParams,
        mode: Mode,
    ) -> Result<Self> {
        config.validate()?;
        let c = &config;
        if let Some(cb) = &codebook {
            if (cb.k(), cb.heads(), cb.dim()) != (c.k, c.heads, c.dim) {
                return Err(Error::dim("codebook", &[cb.k(), cb.heads(), cb.dim()], &[c.k, c.heads, c.dim]));
            }
        }
        if (hash.k(), hash.v(), hash.heads().len()) != (c.k, c.v, c.heads) {
            return Err(Error::dim("hash family", &[hash.k(), hash.v(), hash.heads().len()], &[c.k, c.v, c.heads]));
        }
        if (table.v(), table.heads(), table.dim()) != (c.v, c.heads, c.bigram_dim) {
            return Err(Error::dim("bigram table", &[table.v(), table.heads(), table.dim()], &[c.v, c.heads, c.bigram_dim]));
        }
        for (p, n) in [(&ln_uni, c.dim), (&ln_bi, c.bigram_dim)] {
            if p.gain.len() != n || p.bias.len() != n {
                return Err(Error::dim("layer norm", &[p.gain.len(), p.bias.len()], &[n, n]));
            }
        }
        let mut state = Self {
            config,
            codebook,
            hash,
            table,
            ln_uni,
            ln_bi,
            mode: Mode::Training,
        };
        if mode == Mode::Frozen {
            state.freeze()?;
        }
        Ok(state)
    }

    pub fn config(&self) -> &NGrammerConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn codebook(&self) -> Option<&Codebook> {
        self.codebook.as_ref()
    }

    pub fn hash(&self) -> &HashFamily {
        &self.hash
    }

    pub fn table(&self) -> &BigramTable {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut BigramTable {
        &mut self.table
    }

    pub fn ln_uni(&self) -> &LayerNormParams {
        &self.ln_uni
    }

    pub fn ln_bi(&self) -> &LayerNormParams {
        &self.ln_bi
    }

    /// Dense parameters in a fixed order: uni gain, uni bias, bi gain, bi bias.
    pub fn dense_params_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [
            &mut self.ln_uni.gain,
            &mut self.ln_uni.bias,
            &mut self.ln_bi.gain,
            &mut self.ln_bi.bias,
        ]
    }

    /// Replaces the codebook; it must match the configured extents and is
    /// frozen if the layer is.
    pub fn set_codebook(&mut self, codebook: Codebook) -> Result<()> {
        let c = &self.config;
        if (codebook.k(), codebook.heads(), codebook.dim()) != (c.k, c.heads, c.dim) {
            return Err(Error::dim(
                "set_codebook",
                &[codebook.k(), codebook.heads(), codebook.dim()],
                &[c.k, c.heads, c.dim],
            ));
        }
        self.codebook = Some(if self.mode == Mode::Frozen {
            codebook.freeze()
        } else {
            codebook
        });
        Ok(())
    }

    /// Initializes the codebook from a batch `(n, heads, dim)` if it does not exist yet.
    pub fn prime_codebook(&mut self, x: &Tensor) -> Result<()> {
        if self.codebook.is_none() {
            let x = self.as_heads(x)?;
            let seed = sub_seed(self.config.seed, CODEBOOK_STREAM);
            self.codebook = Some(Codebook::init_from_batch(&x, self.config.k, seed)?);
        }
        Ok(())
    }

    /// Switches to frozen mode. Fails if no codebook has been learned.
    pub fn freeze(&mut self) -> Result<()> {
        match self.codebook.as_mut() {
            Some(cb) => cb.freeze_in_place(),
            None => return Err(Error::State("cannot freeze an N-Grammer layer without a codebook".into())),
        }
        self.mode = Mode::Frozen;
        Ok(())
    }

    fn as_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (h, d) = (self.config.heads, self.config.dim);
        let shape = x.shape();
        let ok = match shape {
            [_, w] => *w == h * d,
            [_, hh, dd] => (*hh, *dd) == (h, d),
            _ => false,
        };
        if !ok {
            return Err(Error::dim("ngrammer input", shape, &[h, d]));
        }
        let n = shape[0];
        x.clone().reshape([n, h, d])
    }

    fn codebook_ref(&self) -> Result<&Codebook> {
        self.codebook
            .as_ref()
            .ok_or_else(|| Error::State("N-Grammer codebook has not been initialized".into()))
    }

    /// Latents for `x` without touching the codebook.
    pub fn assign_latents(&self, x: &Tensor) -> Result<LatentSequence> {
        let x = self.as_heads(x)?;
        self.codebook_ref()?.assign(&x)
    }

    /// Latents for `x`; in training mode this is the k-means step on `x`.
    pub fn update_latents(&mut self, x: &Tensor) -> Result<LatentSequence> {
        match self.mode {
            Mode::Frozen => self.assign_latents(x),
            Mode::Training => {
                self.prime_codebook(x)?;
                let x = self.as_heads(x)?;
                let lr = self.config.kmeans_lr;
                self.codebook.as_mut().expect("primed above").kmeans_step(&x, lr)
            }
        }
    }

    /// Hashed bigram-table rows for latents of back-to-back sequences of
    /// `seq_len` positions each. Bigrams never cross a sequence boundary.
    pub fn vocab_ids(&self, z: &LatentSequence, seq_len: usize) -> Result<Vec<usize>> {
        if seq_len == 0 || !z.len().is_multiple_of(seq_len) {
            return Err(Error::dim("vocab_ids", &[z.len()], &[seq_len]));
        }
        let mut ids = Vec::with_capacity(z.len() * z.heads());
        for s in 0..z.len() / seq_len {
            let b = bigram_ids(&z.slice(s * seq_len, (s + 1) * seq_len), self.config.k)?;
            ids.extend(self.hash.hash_to_vocab(&b)?);
        }
        Ok(ids)
    }

    /// Puts the layer's parameters on the tape.
    pub fn register(&self, tape: &mut Tape) -> Result<NGrammerVars> {
        let leaf = |tape: &mut Tape, v: &[f64]| tape.leaf(Tensor::new([v.len()], v.to_vec()).expect("1-d"));
        Ok(NGrammerVars {
            table: tape.sparse_leaf(self.table.as_tensor())?,
            uni_gain: leaf(tape, &self.ln_uni.gain),
            uni_bias: leaf(tape, &self.ln_uni.bias),
            bi_gain: leaf(tape, &self.ln_bi.gain),
            bi_bias: leaf(tape, &self.ln_bi.bias),
        })
    }

    /// `concat_last(LN(x), LN(y))` for given latents.
    ///
    /// `x` is `(n, heads * dim)` or `(n, heads, dim)` holding `n / seq_len`
    /// sequences; the output is `(n, heads, dim + bigram_dim)`.
    pub fn forward_with_latents(
        &self,
        tape: &mut Tape,
        vars: &NGrammerVars,
        x: Var,
        z: &LatentSequence,
        seq_len: usize,
    ) -> Result<Var> {
        let (h, d) = (self.config.heads, self.config.dim);
        let n = tape.shape(x).first().copied().unwrap_or(0);
        if z.len() != n || z.heads() != h {
            return Err(Error::dim("ngrammer latents", &[z.len(), z.heads()], &[n, h]));
        }
        let ids = self.vocab_ids(z, seq_len)?;
        let xh = tape.reshape(x, &[n, h, d])?;
        let uni = tape.layer_norm(xh, vars.uni_gain, vars.uni_bias, self.config.eps_ln)?;
        let y = self.table.lookup_with(tape, vars.table, &ids)?.output;
        let bi = tape.layer_norm(y, vars.bi_gain, vars.bi_bias, self.config.eps_ln)?;
        tape.concat_last(&[uni, bi])
    }

    fn checked_input(&self, tape: &Tape, x: Var) -> Result<Tensor> {
        let value = tape.value(x);
        if !value.is_finite() {
            return Err(Error::Numeric("non-finite input to the N-Grammer layer".into()));
        }
        self.as_heads(value)
    }

    /// Registers parameters and runs the layer, taking a k-means step first
    /// in training mode.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, seq_len: usize) -> Result<(Var, NGrammerVars)> {
        let input = self.checked_input(tape, x)?;
        let n = input.shape()[0];
        if seq_len == 0 || n % seq_len != 0 {
            return Err(Error::dim("ngrammer forward", &[n], &[seq_len]));
        }
        let z = self.update_latents(&input)?;
        let vars = self.register(tape)?;
        let out = self.forward_with_latents(tape, &vars, x, &z, seq_len)?;
        Ok((out, vars))
    }

    /// Runs the layer against the current codebook without updating it.
    pub fn forward_eval(&self, tape: &mut Tape, x: Var, seq_len: usize) -> Result<(Var, NGrammerVars)> {
        let input = self.checked_input(tape, x)?;
        let z = self.codebook_ref()?.assign(&input)?;
        let vars = self.register(tape)?;
        let out = self.forward_with_latents(tape, &vars, x, &z, seq_len)?;
        Ok((out, vars))
    }

    /// Frozen-mode forward pass reading latents from `cache` by token ID.
    /// `x` must be the embedding rows of `tokens`.
    pub fn forward_cached(
        &self,
        tape: &mut Tape,
        x: Var,
        tokens: &[u32],
        cache: &LatentCache,
        seq_len: usize,
    ) -> Result<(Var, NGrammerVars)> {
        let z = self.cached_latents(tokens, cache)?;
        let n = tape.shape(x).first().copied().unwrap_or(0);
        if tokens.len() != n {
            return Err(Error::dim("forward_cached", &[tokens.len()], &[n]));
        }
        let vars = self.register(tape)?;
        let out = self.forward_with_latents(tape, &vars, x, &z, seq_len)?;
        Ok((out, vars))
    }

    /// Latents of `tokens` from the cache, after checking it matches the codebook.
    pub fn cached_latents(&self, tokens: &[u32], cache: &LatentCache) -> Result<LatentSequence> {
        if self.mode != Mode::Frozen {
            return Err(Error::State("cached latents require a frozen N-Grammer layer".into()));
        }
        cache.check_fresh(self.codebook_ref()?)?;
        cache.latents_for(tokens)
    }

    pub fn collect_grads(&self, grads: &Gradients, vars: &NGrammerVars) -> NGrammerGrads {
        let dense = |v: Var, n: usize| grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        NGrammerGrads {
            table: self.table.sparse_grad(grads, vars.table),
            uni_gain: dense(vars.uni_gain, self.config.dim),
            uni_bias: dense(vars.uni_bias, self.config.dim),
            bi_gain: dense(vars.bi_gain, self.config.bigram_dim),
            bi_bias: dense(vars.bi_bias, self.config.bigram_dim),
        }
    }
}

const LN_MAGIC: &[u8; 8] = b"NGRAMLN1";

impl LayerNormParams {
    /// `NGRAMLN1`, `d, d_b` as u32 LE, then uni gain, uni bias, bi gain,
    /// bi bias as f64 LE.
    pub fn write_pair(w: &mut impl Write, uni: &LayerNormParams, bi: &LayerNormParams) -> Result<()> {
        w.write_all(LN_MAGIC)?;
        put_len(w, "layer norm", uni.len())?;
        put_len(w, "layer norm", bi.len())?;
        for v in [&uni.gain, &uni.bias, &bi.gain, &bi.bias] {
            put_f64s(w, v)?;
        }
        Ok(())
    }

    pub fn read_pair(r: &mut impl Read) -> Result<(LayerNormParams, LayerNormParams)> {
        expect_magic(r, LN_MAGIC, "layer norm")?;
        let d = get_u32(r)? as usize;
        let db = get_u32(r)? as usize;
        let uni = LayerNormParams {
            gain: get_f64s(r, d)?,
            bias: get_f64s(r, d)?,
        };
        let bi = LayerNormParams {
            gain: get_f64s(r, db)?,
            bias: get_f64s(r, db)?,
        };
        Ok((uni, bi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, finite_diff_check_sparse};
    use crate::latent::build_cache;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(h: usize, d: usize, db: usize, k: usize, v: usize) -> NGrammerConfig {
        NGrammerConfig {
            k,
            v,
            heads: h,
            dim: d,
            bigram_dim: db,
            seed: 7,
            ..NGrammerConfig::default()
        }
    }

    fn frozen_layer(cfg: NGrammerConfig, seed: u64) -> NGrammerState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = NGrammerState::new(cfg.clone()).unwrap();
        let centers = Tensor::randn([cfg.k, cfg.heads, cfg.dim], 1.0, &mut rng).into_data();
        s.set_codebook(Codebook::from_centers(cfg.k, cfg.heads, cfg.dim, centers).unwrap())
            .unwrap();
        s.freeze().unwrap();
        s
    }

    #[test]
    fn output_shape() {
        let cfg = config(2, 8, 4, 3, 11);
        let mut s = NGrammerState::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::randn([3, 2, 8], 1.0, &mut rng));
        let (w, _) = s.forward(&mut tape, x, 3).unwrap();
        assert_eq!(tape.shape(w), &[3, 2, 12]);
        assert_eq!(s.config().output_width(), 24);
        assert!(s.codebook().is_some());
        assert!((config(8, 112, 16, 4, 4).bigram_fraction() - 0.125).abs() < 1e-15);
    }

    #[test]
    fn zero_table_gives_zero_bigram_half() {
        let cfg = config(2, 8, 4, 4, 13);
        let mut s = frozen_layer(cfg.clone(), 2);
        s.table_mut().weights_mut().fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn([5, 2, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let (w, _) = s.forward(&mut tape, xv, 5).unwrap();
        let g = tape.constant(Tensor::full([8], 1.0));
        let b = tape.constant(Tensor::zeros([8]));
        let xr = tape.reshape(xv, &[5, 2, 8]).unwrap();
        let ln = tape.layer_norm(xr, g, b, 1e-5).unwrap();
        let out = tape.value(w).data();
        let ln = tape.value(ln).data();
        for n in 0..10 {
            assert_eq!(&out[n * 12..n * 12 + 8], &ln[n * 8..(n + 1) * 8]);
            assert!(out[n * 12 + 8..(n + 1) * 12].iter().all(|&v| v == 0.0));
        }
    }

    fn sum_sq_through(s: &NGrammerState, tape: &mut Tape, x: Var, z: &LatentSequence, table: Option<Var>) -> Result<Var> {
        let mut vars = s.register(tape)?;
        if let Some(t) = table {
            vars.table = t;
        }
        let w = s.forward_with_latents(tape, &vars, x, z, 4)?;
        tape.sum_squares(w)
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let mut cfg = config(2, 6, 3, 5, 17);
        cfg.seed = 11;
        let mut s = frozen_layer(cfg, 4);
        // Non-trivial LN parameters so their gradients are exercised too.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for p in s.dense_params_mut() {
            for v in p.iter_mut() {
                *v += 0.3 * rand::Rng::random::<f64>(&mut rng);
            }
        }
        let x = Tensor::randn([4, 2, 6], 1.0, &mut rng);
        let z = s.assign_latents(&x).unwrap();

        let err = finite_diff_check(|tape, xv| sum_sq_through(&s, tape, xv, &z, None), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "x: {err}");

        let table = s.table().as_tensor();
        let err = finite_diff_check_sparse(
            |tape, tv| {
                let xv = tape.constant(x.clone());
                sum_sq_through(&s, tape, xv, &z, Some(tv))
            },
            &table,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "table: {err}");

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let vars = s.register(&mut tape).unwrap();
        let w = s.forward_with_latents(&mut tape, &vars, xv, &z, 4).unwrap();
        let loss = tape.sum_squares(w).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = s.collect_grads(&grads, &vars);
        let base = tape.value(loss).item().unwrap();
        let h = 1e-6;
        for (i, analytic) in g.uni_gain.iter().chain(&g.bi_bias).enumerate() {
            let mut p = s.clone();
            let [ug, _, _, bb] = p.dense_params_mut();
            if i < 6 {
                ug[i] += h;
            } else {
                bb[i - 6] += h;
            }
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let l = sum_sq_through(&p, &mut t, xv, &z, None).unwrap();
            let numeric = (t.value(l).item().unwrap() - base) / h;
            assert!((numeric - analytic).abs() / numeric.abs().max(1.0) < 1e-4, "ln param {i}");
        }
    }

    #[test]
    fn bigram_stream_is_causal() {
        let cfg = config(2, 4, 3, 6, 31);
        let s = frozen_layer(cfg, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let emb = Tensor::randn([20, 8], 1.0, &mut rng);
        let run = |tokens: &[usize]| {
            let mut tape = Tape::new();
            let t = tape.constant(emb.clone());
            let x = tape.embedding_gather(t, tokens).unwrap();
            let (w, _) = s.forward_eval(&mut tape, x, tokens.len()).unwrap();
            tape.value(w).data().to_vec()
        };
        let tokens: Vec<usize> = (0..10).map(|i| (i * 7 + 3) % 20).collect();
        let base = run(&tokens);
        let width = 2 * 7;
        for i in 0..9 {
            let mut t = tokens.clone();
            t[i + 1] = (t[i + 1] + 1) % 20;
            let out = run(&t);
            assert_eq!(&out[..(i + 1) * width], &base[..(i + 1) * width], "perturbing {}", i + 1);
        }
    }

    #[test]
    fn centers_carry_no_gradient() {
        let cfg = config(2, 4, 3, 6, 31);
        let s = frozen_layer(cfg.clone(), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn([6, 8], 1.0, &mut rng);
        let eval = |s: &NGrammerState| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let (w, _) = s.forward_eval(&mut tape, xv, 6).unwrap();
            tape.value(w).data().to_vec()
        };
        let base = eval(&s);
        let z = s.assign_latents(&x).unwrap();
        let mut moved = s.codebook().unwrap().centers().to_vec();
        for c in moved.iter_mut() {
            *c += 1e-7;
        }
        let mut p = s.clone();
        p.set_codebook(Codebook::from_centers(cfg.k, 2, 4, moved).unwrap()).unwrap();
        assert_eq!(p.assign_latents(&x).unwrap(), z);
        assert_eq!(eval(&p), base);
    }

    #[test]
    fn frozen_forward_is_deterministic_and_never_updates() {
        let cfg = config(2, 4, 3, 6, 31);
        let mut s = frozen_layer(cfg, 10);
        let before = s.codebook().unwrap().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn([8, 2, 4], 1.0, &mut rng);
        let mut outs = Vec::new();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let (w, _) = s.forward(&mut tape, xv, 4).unwrap();
            outs.push(tape.value(w).clone());
        }
        assert_eq!(outs[0], outs[1]);
        assert_eq!(s.codebook().unwrap(), &before);
    }

    #[test]
    fn training_forward_moves_codebook() {
        let cfg = config(2, 4, 3, 3, 31);
        let mut s = NGrammerState::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::randn([8, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        s.forward(&mut tape, xv, 8).unwrap();
        let counts: u64 = s.codebook().unwrap().counts().iter().sum();
        assert_eq!(counts, 16);
    }

    #[test]
    fn cached_forward_matches_and_detects_staleness() {
        let cfg = config(2, 4, 3, 6, 31);
        let s = frozen_layer(cfg.clone(), 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let emb = Tensor::randn([20, 8], 1.0, &mut rng);
        let cache = build_cache(&emb, s.codebook().unwrap()).unwrap();
        let tokens: Vec<u32> = (0..12).map(|i| (i * 5 + 1) % 20).collect();
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let run = |cached: bool| {
            let mut tape = Tape::new();
            let t = tape.constant(emb.clone());
            let x = tape.embedding_gather(t, &ids).unwrap();
            let (w, _) = if cached {
                s.forward_cached(&mut tape, x, &tokens, &cache, 6).unwrap()
            } else {
                s.forward_eval(&mut tape, x, 6).unwrap()
            };
            tape.value(w).clone()
        };
        assert_eq!(run(true), run(false));

        let other = frozen_layer(cfg, 99);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([12, 8]));
        assert!(matches!(
            other.forward_cached(&mut tape, x, &tokens, &cache, 6),
            Err(Error::Staleness { .. })
        ));
        let training = NGrammerState::new(config(2, 4, 3, 6, 31)).unwrap();
        assert!(matches!(training.cached_latents(&tokens, &cache), Err(Error::State(_))));
    }

    #[test]
    fn bad_inputs_rejected() {
        let cfg = config(2, 4, 3, 2, 31);
        let mut s = NGrammerState::new(cfg).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([4, 7]));
        assert!(matches!(s.forward(&mut tape, x, 4), Err(Error::Dimension { .. })));
        let mut nan = Tensor::zeros([4, 8]);
        nan.data_mut()[3] = f64::NAN;
        let x = tape.leaf(nan);
        assert!(matches!(s.forward(&mut tape, x, 4), Err(Error::Numeric(_))));
        let x = tape.leaf(Tensor::from_fn([4, 8], |i| i as f64));
        assert!(s.forward(&mut tape, x, 3).is_err());
        assert!(s.freeze().is_err());
        let mut bad = config(2, 4, 3, 2, 31);
        bad.v = 0;
        assert!(matches!(NGrammerState::new(bad), Err(Error::Config(_))));
    }

    #[test]
    fn bigrams_do_not_cross_sequences() {
        let cfg = config(1, 2, 2, 4, 97);
        let s = frozen_layer(cfg, 15);
        let z = LatentSequence::new(4, 1, vec![1, 2, 3, 0]).unwrap();
        let ids = s.vocab_ids(&z, 2).unwrap();
        let h = &s.hash().heads()[0];
        let expect: Vec<usize> = [1u64, 2 + 4, 3, 12].iter().map(|&b| h.apply(b, 97) as usize).collect();
        assert_eq!(ids, expect);
    }

    #[test]
    fn ln_segment_round_trip() {
        let uni = LayerNormParams {
            gain: vec![1.5, 2.0],
            bias: vec![0.1, -0.2],
        };
        let bi = LayerNormParams {
            gain: vec![3.0],
            bias: vec![4.0],
        };
        let mut buf = Vec::new();
        LayerNormParams::write_pair(&mut buf, &uni, &bi).unwrap();
        assert_eq!(&buf[..8], b"NGRAMLN1");
        assert_eq!(buf.len(), 8 + 8 + 6 * 8);
        let (u, b) = LayerNormParams::read_pair(&mut buf.as_slice()).unwrap();
        assert_eq!((u, b), (uni, bi));
    }
}
