//! Trainable bigram embedding table `(v, heads, dim)` with sparse Adagrad.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wire;

const MAGIC: &[u8; 8] = b"NGRAMTB1";

pub const ADAGRAD_EPS: f64 = 1e-10;

/// Gradient of a table, one `dim`-vector per touched `(row, head)` slot.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseGrad {
    dim: usize,
    entries: BTreeMap<(usize, usize), Vec<f64>>,
}

impl SparseGrad {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Adds `g` into the `(row, head)` entry.
    pub fn accumulate(&mut self, row: usize, head: usize, g: &[f64]) {
        let slot = self
            .entries
            .entry((row, head))
            .or_insert_with(|| vec![0.0; self.dim]);
        for (s, v) in slot.iter_mut().zip(g) {
            *s += v;
        }
    }

    pub fn get(&self, row: usize, head: usize) -> Option<&[f64]> {
        self.entries.get(&(row, head)).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), &[f64])> {
        self.entries.iter().map(|(&k, g)| (k, g.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn sum_squares(&self) -> f64 {
        self.entries.values().flatten().map(|g| g * g).sum()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.entries.values_mut().flatten() {
            *g *= factor;
        }
    }
}

/// The table's leaf on a tape together with the looked-up embeddings.
#[derive(Debug, Clone, Copy)]
pub struct TableLookup {
    pub table: Var,
    pub output: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BigramTable {
    v: usize,
    heads: usize,
    dim: usize,
    weights: Vec<f64>,
    accum: Vec<f64>,
}

impl BigramTable {
    /// `N(0, scale^2)` weights, `scale` defaulting to `dim^-1/2`, zero accumulators.
    pub fn init(v: usize, heads: usize, dim: usize, seed: u64, scale: Option<f64>) -> Result<Self> {
        if v == 0 || heads == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "bigram table extents must be >= 1 (got {v}x{heads}x{dim})"
            )));
        }
        let scale = scale.unwrap_or(1.0 / (dim as f64).sqrt());
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("table init scale {scale} must be > 0")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = Tensor::randn([v * heads * dim], scale, &mut rng).into_data();
        Ok(Self {
            v,
            heads,
            dim,
            weights,
            accum: vec![0.0; v * heads * dim],
        })
    }

    pub fn from_weights(v: usize, heads: usize, dim: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != v * heads * dim {
            return Err(Error::dim("bigram_table", &[v, heads, dim], &[weights.len()]));
        }
        Ok(Self {
            v,
            heads,
            dim,
            accum: vec![0.0; weights.len()],
            weights,
        })
    }

    pub fn v(&self) -> usize {
        self.v
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn accumulators(&self) -> &[f64] {
        &self.accum
    }

    /// Weights of one `(row, head)` slot.
    pub fn slot(&self, row: usize, head: usize) -> &[f64] {
        let off = (row * self.heads + head) * self.dim;
        &self.weights[off..off + self.dim]
    }

    /// Weights as a `(v * heads, dim)` tensor, the layout the tape gathers from.
    pub fn as_tensor(&self) -> Tensor {
        Tensor::new([self.v * self.heads, self.dim], self.weights.clone())
            .expect("table extents are consistent")
    }

    fn flat_ids(&self, ids: &[usize]) -> Result<Vec<usize>> {
        if !ids.len().is_multiple_of(self.heads) {
            return Err(Error::dim("lookup", &[ids.len()], &[self.heads]));
        }
        ids.iter()
            .enumerate()
            .map(|(n, &id)| {
                if id >= self.v {
                    Err(Error::Index { id, extent: self.v })
                } else {
                    Ok(id * self.heads + n % self.heads)
                }
            })
            .collect()
    }

    /// `y[i, j] = weights[ids[i, j], j]` for row-major `ids (l, heads)`,
    /// recorded on the tape. The output has shape `(l, heads, dim)`.
    pub fn lookup(&self, tape: &mut Tape, ids: &[usize]) -> Result<TableLookup> {
        let table = tape.sparse_leaf(self.as_tensor())?;
        self.lookup_with(tape, table, ids)
    }

    /// Lookup against a table leaf already on the tape.
    pub fn lookup_with(&self, tape: &mut Tape, table: Var, ids: &[usize]) -> Result<TableLookup> {
        let flat = self.flat_ids(ids)?;
        let rows = tape.embedding_gather(table, &flat)?;
        let output = tape.reshape(rows, &[ids.len() / self.heads, self.heads, self.dim])?;
        Ok(TableLookup { table, output })
    }

    /// Converts the tape gradient of the table leaf into `(row, head)` entries.
    pub fn sparse_grad(&self, grads: &Gradients, table: Var) -> SparseGrad {
        let mut out = SparseGrad::new(self.dim);
        if let Some(rows) = grads.sparse(table) {
            for (flat, g) in rows.iter() {
                out.accumulate(flat / self.heads, flat % self.heads, g);
            }
        }
        out
    }

    /// Per touched slot: `acc += g*g; w -= lr * g / sqrt(acc + eps)`.
    ///
    /// Checks every gradient before writing anything; slots not present in
    /// `grad` keep both weights and accumulators.
    pub fn adagrad_update(&mut self, grad: &SparseGrad, lr: f64, eps: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) || !(eps > 0.0) {
            return Err(Error::Config(format!("adagrad needs lr >= 0 and eps > 0 (lr={lr}, eps={eps})")));
        }
        if grad.dim != self.dim {
            return Err(Error::dim("adagrad_update", &[grad.dim], &[self.dim]));
        }
        for (&(row, head), g) in &grad.entries {
            if row >= self.v || head >= self.heads {
                return Err(Error::Index {
                    id: row,
                    extent: self.v,
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for bigram table row {row}, head {head}"
                )));
            }
        }
        for (&(row, head), g) in &grad.entries {
            let off = (row * self.heads + head) * self.dim;
            for (i, gi) in g.iter().enumerate() {
                let a = &mut self.accum[off + i];
                *a += gi * gi;
                self.weights[off + i] -= lr * gi / (*a + eps).sqrt();
            }
        }
        Ok(())
    }

    /// `NGRAMTB1`, `v, h, d` as u32 LE, then weights and accumulators as f64 LE.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        for extent in [self.v, self.heads, self.dim] {
            wire::put_len(w, "bigram table", extent)?;
        }
        wire::put_f64s(w, &self.weights)?;
        wire::put_f64s(w, &self.accum)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        wire::expect_magic(r, MAGIC, "bigram table")?;
        let v = wire::get_u32(r)? as usize;
        let heads = wire::get_u32(r)? as usize;
        let dim = wire::get_u32(r)? as usize;
        let n = v * heads * dim;
        let weights = wire::get_f64s(r, n)?;
        let accum = wire::get_f64s(r, n)?;
        if accum.iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::Format {
                what: "bigram table",
                detail: "negative adagrad accumulator".into(),
            });
        }
        Ok(Self {
            v,
            heads,
            dim,
            weights,
            accum,
        })
    }
}
