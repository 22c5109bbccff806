//! Per-head product-quantization codebook trained by mini-batch k-means.
//!
//! Every head `j` owns `k` code-words of dimension `d`. A uni-gram
//! embedding slice `x[i, j]` is mapped to the index of its nearest code-word
//! (squared Euclidean distance, ties to the smallest index). Training moves
//! each assigned code-word toward its sample with a fixed step size and no
//! smoothing of either centers or counts.

use std::io::{Read, Write};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wire;

const MAGIC: &[u8; 8] = b"NGRAMCB1";

/// Discrete latent IDs `z` of shape `(len, heads)`, each below `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentSequence {
    len: usize,
    heads: usize,
    ids: Vec<u32>,
}

impl LatentSequence {
    pub fn new(len: usize, heads: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != len * heads {
            return Err(Error::dim("latent_sequence", &[len, heads], &[ids.len()]));
        }
        Ok(Self { len, heads, ids })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn get(&self, pos: usize, head: usize) -> u32 {
        self.ids[pos * self.heads + head]
    }

    /// Row-major `(len, heads)` IDs.
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// Positions `start..end` as their own sequence.
    pub fn slice(&self, start: usize, end: usize) -> LatentSequence {
        LatentSequence {
            len: end - start,
            heads: self.heads,
            ids: self.ids[start * self.heads..end * self.heads].to_vec(),
        }
    }
}

/// Code-words `(k, heads, dim)` and per-code-word assignment counts `(k, heads)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    heads: usize,
    dim: usize,
    centers: Vec<f64>,
    counts: Vec<u64>,
    frozen: bool,
}

fn split_shape(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [l, h, d] => Ok((l, h, d)),
        _ => Err(Error::dim("codebook input (l, h, d)", x.shape(), &[])),
    }
}

impl Codebook {
    /// Builds a codebook from explicit `(k, heads, dim)` centers.
    pub fn from_centers(k: usize, heads: usize, dim: usize, centers: Vec<f64>) -> Result<Self> {
        if centers.len() != k * heads * dim {
            return Err(Error::dim("codebook", &[k, heads, dim], &[centers.len()]));
        }
        if centers.iter().any(|c| !c.is_finite()) {
            return Err(Error::Numeric("codebook centers must be finite".into()));
        }
        Ok(Self {
            k,
            heads,
            dim,
            centers,
            counts: vec![0; k * heads],
            frozen: false,
        })
    }

    /// Seeds each head's `k` centers with distinct positions of `x (l, h, d)`
    /// sampled without replacement.
    pub fn init_from_batch(x: &Tensor, k: usize, seed: u64) -> Result<Self> {
        let (l, heads, dim) = split_shape(x)?;
        if k == 0 {
            return Err(Error::Config("codebook needs k >= 1".into()));
        }
        if l < k {
            return Err(Error::InsufficientData { needed: k, got: l });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = x.data();
        let mut centers = vec![0.0; k * heads * dim];
        for j in 0..heads {
            let picks = index::sample(&mut rng, l, k);
            for (c, pos) in picks.iter().enumerate() {
                let src = &data[(pos * heads + j) * dim..(pos * heads + j + 1) * dim];
                centers[(c * heads + j) * dim..(c * heads + j + 1) * dim].copy_from_slice(src);
            }
        }
        Self::from_centers(k, heads, dim, centers)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Code-word `c` of head `j`.
    pub fn center(&self, c: usize, j: usize) -> &[f64] {
        let off = (c * self.heads + j) * self.dim;
        &self.centers[off..off + self.dim]
    }

    pub fn count(&self, c: usize, j: usize) -> u64 {
        self.counts[c * self.heads + j]
    }

    /// Marks the codebook immutable. Idempotent.
    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn freeze_in_place(&mut self) {
        self.frozen = true;
    }

    /// Nearest code-word of head `j` for one `dim`-vector.
    pub fn nearest(&self, j: usize, v: &[f64]) -> u32 {
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for c in 0..self.k {
            let center = self.center(c, j);
            let mut dist = 0.0;
            for (a, b) in v.iter().zip(center) {
                let t = a - b;
                dist += t * t;
            }
            if dist < best_dist {
                best_dist = dist;
                best = c;
            }
        }
        best as u32
    }

    /// Nearest code-word per head for one token's `(heads * dim)` row.
    pub fn assign_row(&self, row: &[f64], out: &mut [u32]) {
        for (j, z) in out.iter_mut().enumerate() {
            *z = self.nearest(j, &row[j * self.dim..(j + 1) * self.dim]);
        }
    }

    /// `z[i, j] = argmin_c ||x[i, j] - center(c, j)||^2` for `x (l, heads, dim)`.
    pub fn assign(&self, x: &Tensor) -> Result<LatentSequence> {
        let (l, heads, dim) = split_shape(x)?;
        if heads != self.heads || dim != self.dim {
            return Err(Error::dim("assign", x.shape(), &[self.k, self.heads, self.dim]));
        }
        let row = heads * dim;
        let mut ids = vec![0u32; l * heads];
        if row > 0 {
            for (i, chunk) in x.data().chunks(row).enumerate() {
                self.assign_row(chunk, &mut ids[i * heads..(i + 1) * heads]);
            }
        }
        LatentSequence::new(l, heads, ids)
    }

    /// One mini-batch k-means step.
    ///
    /// The returned assignments use the centers as they were on entry. Then,
    /// sample by sample in position order, the assigned center moves
    /// `c += lr * (x - c)` and its count is incremented.
    pub fn kmeans_step(&mut self, x: &Tensor, lr: f64) -> Result<LatentSequence> {
        if self.frozen {
            return Err(Error::State("k-means step on a frozen codebook".into()));
        }
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("k-means learning rate {lr} must be >= 0")));
        }
        let z = self.assign(x)?;
        let (heads, dim) = (self.heads, self.dim);
        let data = x.data();
        for i in 0..z.len() {
            for j in 0..heads {
                let c = z.get(i, j) as usize;
                let sample = &data[(i * heads + j) * dim..(i * heads + j + 1) * dim];
                let off = (c * heads + j) * dim;
                for (cv, sv) in self.centers[off..off + dim].iter_mut().zip(sample) {
                    *cv += lr * (sv - *cv);
                }
                self.counts[c * heads + j] += 1;
            }
        }
        Ok(z)
    }

    /// Sum over positions and heads of the squared distance to the assigned center.
    pub fn quantization_error(&self, x: &Tensor) -> Result<f64> {
        let z = self.assign(x)?;
        let (heads, dim) = (self.heads, self.dim);
        let data = x.data();
        let mut total = 0.0;
        for i in 0..z.len() {
            for j in 0..heads {
                let c = self.center(z.get(i, j) as usize, j);
                let s = &data[(i * heads + j) * dim..(i * heads + j + 1) * dim];
                total += s.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
        }
        Ok(total)
    }

    /// `NGRAMCB1`, then `k, h, d` as u32 LE, centers as f64 LE in `(k, h, d)`
    /// order, then counts as u64 LE.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        for extent in [self.k, self.heads, self.dim] {
            wire::put_len(w, "codebook", extent)?;
        }
        wire::put_f64s(w, &self.centers)?;
        for &c in &self.counts {
            wire::put_u64(w, c)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(20 + self.centers.len() * 8 + self.counts.len() * 8);
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Reads a codebook segment. The frozen flag is not serialized; the
    /// result is unfrozen.
    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        wire::expect_magic(r, MAGIC, "codebook")?;
        let k = wire::get_u32(r)? as usize;
        let heads = wire::get_u32(r)? as usize;
        let dim = wire::get_u32(r)? as usize;
        let centers = wire::get_f64s(r, k * heads * dim)?;
        let mut counts = Vec::with_capacity(k * heads);
        for _ in 0..k * heads {
            counts.push(wire::get_u64(r)?);
        }
        let mut cb = Self::from_centers(k, heads, dim, centers)?;
        cb.counts = counts;
        Ok(cb)
    }

    /// FNV-1a 64 over the serialized bytes.
    pub fn fingerprint(&self) -> u64 {
        wire::fnv1a64(&self.to_bytes())
    }
}
