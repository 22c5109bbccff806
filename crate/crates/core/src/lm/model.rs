//! Decoder-only transformer with an optional N-Grammer layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_rows, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::latent::LatentCache;
use crate::layer::{sub_seed, NGrammerConfig, NGrammerGrads, NGrammerState, NGrammerVars};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

/// Where the N-Grammer layer sits in the stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LayerPosition {
    /// On the token embeddings, before block 0.
    #[default]
    Embedding,
    /// After block `n` (1-based).
    AfterBlock(usize),
}

impl LayerPosition {
    /// `embedding`, `begin` (after block 1), `mid` (after block `ceil(L/2)`)
    /// or `end` (after block `L`).
    pub fn named(name: &str, layers: usize) -> Result<Self> {
        match name {
            "embedding" | "default" => Ok(Self::Embedding),
            "begin" => Ok(Self::AfterBlock(1)),
            "mid" => Ok(Self::AfterBlock(layers.div_ceil(2).max(1))),
            "end" => Ok(Self::AfterBlock(layers)),
            other => Err(Error::Config(format!("unknown layer position {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    /// Width from the N-Grammer output onward, or everywhere without it.
    pub width: usize,
    /// Attention heads.
    pub heads: usize,
    pub ffn_mult: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub init_std: f64,
    pub ngrammer: Option<NGrammerConfig>,
    pub position: LayerPosition,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            width: 64,
            heads: 4,
            ffn_mult: 2,
            vocab: 256,
            seq_len: 32,
            init_std: 0.02,
            ngrammer: None,
            position: LayerPosition::Embedding,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.width == 0 || self.heads == 0 || self.ffn_mult == 0 || self.seq_len == 0 {
            return bad("model layers, width, heads, ffn_mult and seq_len must be >= 1".into());
        }
        if self.vocab < 2 {
            return bad(format!("model vocab must be >= 2, got {}", self.vocab));
        }
        if !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} is not divisible by {} heads", self.width, self.heads));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad(format!("init_std must be positive, got {}", self.init_std));
        }
        if let Some(ng) = &self.ngrammer {
            ng.validate()?;
            if ng.output_width() != self.width {
                return bad(format!(
                    "ngrammer output width {}x({}+{}) = {} differs from model width {}",
                    ng.heads,
                    ng.dim,
                    ng.bigram_dim,
                    ng.output_width(),
                    self.width
                ));
            }
            if let LayerPosition::AfterBlock(n) = self.position {
                if n == 0 || n > self.layers {
                    return bad(format!("ngrammer position after block {n} outside 1..={}", self.layers));
                }
                if ng.input_width() % self.heads != 0 {
                    return bad(format!(
                        "upstream width {} is not divisible by {} heads",
                        ng.input_width(),
                        self.heads
                    ));
                }
            }
        }
        Ok(())
    }

    /// Width of the token embeddings.
    pub fn embedding_width(&self) -> usize {
        self.ngrammer.as_ref().map_or(self.width, NGrammerConfig::input_width)
    }

    /// Width entering block `i` (0-based).
    pub fn block_width(&self, i: usize) -> usize {
        match (&self.ngrammer, self.position) {
            (Some(ng), LayerPosition::AfterBlock(n)) if i < n => ng.input_width(),
            _ => self.width,
        }
    }

    /// Blocks run before the N-Grammer layer.
    fn ngrammer_after(&self) -> Option<usize> {
        self.ngrammer.as_ref().map(|_| match self.position {
            LayerPosition::Embedding => 0,
            LayerPosition::AfterBlock(n) => n,
        })
    }
}

/// A named dense parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, Copy)]
struct BlockLayout {
    width: usize,
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_gate: usize,
    w_up: usize,
    w_down: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    tok: usize,
    pos: usize,
    blocks: Vec<BlockLayout>,
    lnf_g: usize,
    lnf_b: usize,
    out: usize,
}

/// Parameter names and shapes, in storage order.
fn param_specs(cfg: &ModelConfig) -> (Vec<(String, Vec<usize>)>, Layout) {
    let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| {
        specs.push((name, shape));
        specs.len() - 1
    };
    let tok = push("tok_emb".into(), vec![cfg.vocab, cfg.embedding_width()]);
    let pos_width = if cfg.ngrammer_after() == Some(0) {
        cfg.width
    } else {
        cfg.embedding_width()
    };
    let pos = push("pos_emb".into(), vec![cfg.seq_len, pos_width]);
    let mut blocks = Vec::with_capacity(cfg.layers);
    for i in 0..cfg.layers {
        let w = cfg.block_width(i);
        let f = cfg.ffn_mult * w;
        let p = |s: &str| format!("block{i}.{s}");
        blocks.push(BlockLayout {
            width: w,
            ln1_g: push(p("ln1.gain"), vec![w]),
            ln1_b: push(p("ln1.bias"), vec![w]),
            wq: push(p("attn.wq"), vec![w, w]),
            wk: push(p("attn.wk"), vec![w, w]),
            wv: push(p("attn.wv"), vec![w, w]),
            wo: push(p("attn.wo"), vec![w, w]),
            ln2_g: push(p("ln2.gain"), vec![w]),
            ln2_b: push(p("ln2.bias"), vec![w]),
            w_gate: push(p("ffn.gate"), vec![w, f]),
            w_up: push(p("ffn.up"), vec![w, f]),
            w_down: push(p("ffn.down"), vec![f, w]),
        });
    }
    let lnf_g = push("final_ln.gain".into(), vec![cfg.width]);
    let lnf_b = push("final_ln.bias".into(), vec![cfg.width]);
    let out = push("out_proj".into(), vec![cfg.width, cfg.vocab]);
    (
        specs,
        Layout {
            tok,
            pos,
            blocks,
            lnf_g,
            lnf_b,
            out,
        },
    )
}

/// Next-token prediction inputs: `batch` rows of `len` tokens and their
/// shifted-by-one targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub len: usize,
    pub inputs: Vec<u32>,
    pub targets: Vec<usize>,
}

impl Batch {
    /// Each sequence of `len + 1` tokens yields `len` predictions.
    pub fn from_sequences(seqs: &[Vec<u32>]) -> Result<Self> {
        let first = seqs.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        if first.len() < 2 {
            return Err(Error::Data("sequences need at least 2 tokens".into()));
        }
        let len = first.len() - 1;
        let mut inputs = Vec::with_capacity(seqs.len() * len);
        let mut targets = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            if s.len() != len + 1 {
                return Err(Error::dim("batch", &[s.len()], &[len + 1]));
            }
            inputs.extend_from_slice(&s[..len]);
            targets.extend(s[1..].iter().map(|&t| t as usize));
        }
        Ok(Self {
            batch: seqs.len(),
            len,
            inputs,
            targets,
        })
    }
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    pub loss: Var,
    pub params: Vec<Var>,
    pub ngrammer: Option<NGrammerVars>,
}

/// Gradients of every trainable parameter.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    /// Aligned with [`TransformerLm::params`].
    pub dense: Vec<Vec<f64>>,
    pub ngrammer: Option<NGrammerGrads>,
}

impl ModelGrads {
    pub fn norm(&self) -> f64 {
        let mut ss: f64 = self.dense.iter().flatten().map(|g| g * g).sum();
        if let Some(ng) = &self.ngrammer {
            ss += ng.table.sum_squares();
            ss += [&ng.uni_gain, &ng.uni_bias, &ng.bi_gain, &ng.bi_bias]
                .iter()
                .flat_map(|v| v.iter())
                .map(|g| g * g)
                .sum::<f64>();
        }
        ss.sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.dense.iter_mut().flatten().for_each(|g| *g *= factor);
        if let Some(ng) = &mut self.ngrammer {
            ng.table.scale(factor);
            for v in [&mut ng.uni_gain, &mut ng.uni_bias, &mut ng.bi_gain, &mut ng.bi_bias] {
                v.iter_mut().for_each(|g| *g *= factor);
            }
        }
    }
}

enum LayerAccess<'a> {
    Update(&'a mut NGrammerState),
    Eval(&'a NGrammerState, Option<&'a LatentCache>),
}

#[derive(Debug, Clone)]
pub struct TransformerLm {
    config: ModelConfig,
    params: Vec<Param>,
    layout: Layout,
    ngrammer: Option<NGrammerState>,
}

/// Fresh model; all parameters are drawn from seeded streams, so equal
/// `(cfg, seed)` give identical models. The N-Grammer hash family and table
/// are seeded from both `seed` and the layer's own `seed` field.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<TransformerLm> {
    cfg.validate()?;
    let (specs, layout) = param_specs(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 0));
    let params = specs
        .into_iter()
        .map(|(name, shape)| {
            let value = if name.ends_with(".gain") {
                Tensor::full(shape, 1.0)
            } else if name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else {
                Tensor::randn(shape, cfg.init_std, &mut rng)
            };
            Param { name, value }
        })
        .collect();
    let ngrammer = match &cfg.ngrammer {
        Some(ng) => {
            let mut ng = ng.clone();
            ng.seed ^= sub_seed(seed, 1);
            Some(NGrammerState::new(ng)?)
        }
        None => None,
    };
    Ok(TransformerLm {
        config: cfg.clone(),
        params,
        layout,
        ngrammer,
    })
}

impl TransformerLm {
    /// Reassembles a model from stored parameters, checking names and shapes.
    pub fn from_parts(cfg: &ModelConfig, params: Vec<Param>, ngrammer: Option<NGrammerState>) -> Result<Self> {
        cfg.validate()?;
        let (specs, layout) = param_specs(cfg);
        if specs.len() != params.len() {
            return Err(Error::Format {
                what: "model parameters",
                detail: format!("expected {} tensors, found {}", specs.len(), params.len()),
            });
        }
        for ((name, shape), p) in specs.iter().zip(&params) {
            if name != &p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::Format {
                    what: "model parameters",
                    detail: format!("expected {name} {shape:?}, found {} {:?}", p.name, p.value.shape()),
                });
            }
        }
        match (&cfg.ngrammer, &ngrammer) {
            (Some(c), Some(s)) if c.k == s.config().k
                && c.v == s.config().v
                && c.heads == s.config().heads
                && c.dim == s.config().dim
                && c.bigram_dim == s.config().bigram_dim => {}
            (None, None) => {}
            _ => {
                return Err(Error::Config("N-Grammer state does not match the model config".into()));
            }
        }
        Ok(Self {
            config: cfg.clone(),
            params,
            layout,
            ngrammer,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Mutable views of every dense parameter alongside the N-Grammer layer.
    pub fn split_params_mut(&mut self) -> (Vec<&mut [f64]>, Option<&mut NGrammerState>) {
        let dense = self.params.iter_mut().map(|p| p.value.data_mut()).collect();
        (dense, self.ngrammer.as_mut())
    }

    pub fn ngrammer(&self) -> Option<&NGrammerState> {
        self.ngrammer.as_ref()
    }

    pub fn ngrammer_mut(&mut self) -> Option<&mut NGrammerState> {
        self.ngrammer.as_mut()
    }

    /// Token embedding table `(vocab, embedding_width)`.
    pub fn token_embeddings(&self) -> &Tensor {
        &self.params[self.layout.tok].value
    }

    /// Trainable scalars: dense parameters plus the bigram table and layer norms.
    pub fn num_params(&self) -> usize {
        let dense: usize = self.params.iter().map(|p| p.value.numel()).sum();
        dense
            + self.ngrammer.as_ref().map_or(0, |ng| {
                let c = ng.config();
                c.v * c.heads * c.bigram_dim + 2 * (c.dim + c.bigram_dim)
            })
    }

    /// Freezes the N-Grammer codebook if there is one.
    pub fn freeze(&mut self) -> Result<()> {
        match &mut self.ngrammer {
            Some(ng) => ng.freeze(),
            None => Ok(()),
        }
    }

    /// Gives the N-Grammer layer a codebook drawn from the token embedding
    /// rows if it has none. Only meaningful at the embedding position.
    pub fn prime_codebook_from_embeddings(&mut self) -> Result<()> {
        let emb = self.params[self.layout.tok].value.clone();
        match &mut self.ngrammer {
            Some(ng) => ng.prime_codebook(&emb),
            None => Ok(()),
        }
    }

    /// Forward pass that takes the per-step k-means update when the layer
    /// is in training mode.
    pub fn forward_train(&mut self, tape: &mut Tape, batch: &Batch) -> Result<Forward> {
        let access = self.ngrammer.as_mut().map(LayerAccess::Update);
        run(&self.config, &self.params, &self.layout, access, tape, batch)
    }

    /// Forward pass that leaves every parameter and the codebook untouched.
    /// With a cache the latents are read by token ID instead of assigned.
    pub fn forward_eval(&self, tape: &mut Tape, batch: &Batch, cache: Option<&LatentCache>) -> Result<Forward> {
        if cache.is_some() && self.config.ngrammer_after() != Some(0) {
            return Err(Error::Config(
                "latent caching needs an N-Grammer layer at the embedding position".into(),
            ));
        }
        let access = self.ngrammer.as_ref().map(|ng| LayerAccess::Eval(ng, cache));
        run(&self.config, &self.params, &self.layout, access, tape, batch)
    }

    pub fn collect_grads(&self, grads: &Gradients, fwd: &Forward) -> ModelGrads {
        let dense = fwd
            .params
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| grads.get(v).map_or_else(|| vec![0.0; p.value.numel()], <[f64]>::to_vec))
            .collect();
        let ngrammer = match (&self.ngrammer, &fwd.ngrammer) {
            (Some(ng), Some(vars)) => Some(ng.collect_grads(grads, vars)),
            _ => None,
        };
        ModelGrads { dense, ngrammer }
    }

    /// Per-target negative log-likelihoods in nats, sequence by sequence.
    pub fn token_nll_with(&self, seqs: &[Vec<u32>], cache: Option<&LatentCache>) -> Result<Vec<f64>> {
        const EVAL_BATCH: usize = 16;
        let mut out = Vec::new();
        for chunk in seqs.chunks(EVAL_BATCH) {
            let batch = Batch::from_sequences(chunk)?;
            let mut tape = Tape::new();
            let fwd = self.forward_eval(&mut tape, &batch, cache)?;
            let logp = log_softmax_rows(tape.value(fwd.logits));
            let v = self.config.vocab;
            out.extend(batch.targets.iter().enumerate().map(|(i, &t)| -logp[i * v + t]));
        }
        Ok(out)
    }
}

fn run(
    cfg: &ModelConfig,
    params: &[Param],
    layout: &Layout,
    mut layer: Option<LayerAccess<'_>>,
    tape: &mut Tape,
    batch: &Batch,
) -> Result<Forward> {
    let (b, l) = (batch.batch, batch.len);
    if l == 0 || l > cfg.seq_len {
        return Err(Error::dim("sequence length", &[l], &[cfg.seq_len]));
    }
    if let Some(&bad) = batch.inputs.iter().find(|&&t| t as usize >= cfg.vocab) {
        return Err(Error::Index {
            id: bad as usize,
            extent: cfg.vocab,
        });
    }
    if let Some(&bad) = batch.targets.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::Index {
            id: bad,
            extent: cfg.vocab,
        });
    }
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.value.clone())).collect();
    let n = b * l;
    let ids: Vec<usize> = batch.inputs.iter().map(|&t| t as usize).collect();
    let mut x = tape.embedding_gather(vars[layout.tok], &ids)?;
    let after = cfg.ngrammer_after();
    let mut ng_vars = None;

    let mut apply_layer = |tape: &mut Tape, x: Var| -> Result<Var> {
        let (out, v) = match layer.as_mut().expect("layer present when configured") {
            LayerAccess::Update(ng) => ng.forward(tape, x, l)?,
            LayerAccess::Eval(ng, None) => ng.forward_eval(tape, x, l)?,
            LayerAccess::Eval(ng, Some(cache)) => ng.forward_cached(tape, x, &batch.inputs, cache, l)?,
        };
        ng_vars = Some(v);
        tape.reshape(out, &[n, cfg.width])
    };

    if after == Some(0) {
        x = apply_layer(tape, x)?;
    }
    // Position embeddings go in after an embedding-position N-Grammer so
    // the layer sees pure token embeddings and its latents are cacheable.
    let pos_rows: Vec<usize> = (0..l).collect();
    let pos = tape.embedding_gather(vars[layout.pos], &pos_rows)?;
    let w0 = tape.shape(x)[1];
    let x3 = tape.reshape(x, &[b, l, w0])?;
    let x3 = tape.add_broadcast(x3, pos)?;
    x = tape.reshape(x3, &[n, w0])?;

    for (i, blk) in layout.blocks.iter().enumerate() {
        x = block(tape, &vars, blk, x, b, l, cfg.heads)?;
        if after == Some(i + 1) {
            x = apply_layer(tape, x)?;
        }
    }
    let x = tape.layer_norm(x, vars[layout.lnf_g], vars[layout.lnf_b], LN_EPS)?;
    let logits = tape.matmul(x, vars[layout.out])?;
    let loss = tape.cross_entropy_with_logits(logits, &batch.targets)?;
    Ok(Forward {
        logits,
        loss,
        params: vars,
        ngrammer: ng_vars,
    })
}

fn split_heads(tape: &mut Tape, x: Var, b: usize, l: usize, heads: usize, dh: usize) -> Result<Var> {
    let x = tape.reshape(x, &[b, l, heads, dh])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[b * heads, l, dh])
}

fn block(tape: &mut Tape, vars: &[Var], p: &BlockLayout, x: Var, b: usize, l: usize, heads: usize) -> Result<Var> {
    let w = p.width;
    let dh = w / heads;

    let a = tape.layer_norm(x, vars[p.ln1_g], vars[p.ln1_b], LN_EPS)?;
    let q = tape.matmul(a, vars[p.wq])?;
    let k = tape.matmul(a, vars[p.wk])?;
    let v = tape.matmul(a, vars[p.wv])?;
    let q = split_heads(tape, q, b, l, heads, dh)?;
    let k = split_heads(tape, k, b, l, heads, dh)?;
    let v = split_heads(tape, v, b, l, heads, dh)?;
    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let probs = tape.causal_softmax(scores)?;
    let ctx = tape.batch_matmul(probs, v, false)?;
    let ctx = tape.reshape(ctx, &[b, heads, l, dh])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b * l, w])?;
    let attn = tape.matmul(ctx, vars[p.wo])?;
    let h = tape.add(x, attn)?;

    let a = tape.layer_norm(h, vars[p.ln2_g], vars[p.ln2_b], LN_EPS)?;
    let gate = tape.matmul(a, vars[p.w_gate])?;
    let gate = tape.gelu(gate)?;
    let up = tape.matmul(a, vars[p.w_up])?;
    let hidden = tape.mul(gate, up)?;
    let down = tape.matmul(hidden, vars[p.w_down])?;
    tape.add(h, down)
}
