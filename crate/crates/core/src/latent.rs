//! Serving-side token-to-latent cache and cluster inspection.
//!
//! Once the codebook is frozen the latent IDs of a token depend only on its
//! embedding row, so the whole vocabulary can be assigned once (cost
//! `vocab * k`) and every later lookup is a table read.

use std::fmt::Write as _;
use std::hint::black_box;
use std::io::{BufRead, Write};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codebook::{Codebook, LatentSequence};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-token latent IDs for a frozen codebook.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentCache {
    vocab: usize,
    heads: usize,
    k: usize,
    fingerprint: u64,
    latents: Vec<u32>,
}

/// Assigns every row of `embeddings (vocab, heads * dim)` against a frozen codebook.
pub fn build_cache(embeddings: &Tensor, codebook: &Codebook) -> Result<LatentCache> {
    if !codebook.is_frozen() {
        return Err(Error::State("latent cache requires a frozen codebook".into()));
    }
    let (heads, dim) = (codebook.heads(), codebook.dim());
    let vocab = match *embeddings.shape() {
        [vocab, w] if w == heads * dim => vocab,
        _ => return Err(Error::dim("build_cache", embeddings.shape(), &[heads * dim])),
    };
    let mut latents = vec![0u32; vocab * heads];
    for t in 0..vocab {
        codebook.assign_row(embeddings.row(t), &mut latents[t * heads..(t + 1) * heads]);
    }
    Ok(LatentCache {
        vocab,
        heads,
        k: codebook.k(),
        fingerprint: codebook.fingerprint(),
        latents,
    })
}

impl LatentCache {
    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Latent IDs of one token, one per head.
    pub fn get(&self, token: usize) -> Option<&[u32]> {
        (token < self.vocab).then(|| &self.latents[token * self.heads..(token + 1) * self.heads])
    }

    /// Fails unless the cache was built from exactly this codebook.
    pub fn check_fresh(&self, codebook: &Codebook) -> Result<()> {
        let current = codebook.fingerprint();
        if current != self.fingerprint {
            return Err(Error::Staleness {
                cache: self.fingerprint,
                codebook: current,
            });
        }
        Ok(())
    }

    /// Latents of a token sequence, read from the cache.
    pub fn latents_for(&self, tokens: &[u32]) -> Result<LatentSequence> {
        let mut ids = Vec::with_capacity(tokens.len() * self.heads);
        for &t in tokens {
            let z = self.get(t as usize).ok_or(Error::Index {
                id: t as usize,
                extent: self.vocab,
            })?;
            ids.extend_from_slice(z);
        }
        LatentSequence::new(tokens.len(), self.heads, ids)
    }

    /// Header `NGRAM-CACHE v1 <vocab> <h> <k> <fingerprint-hex>`, then one
    /// line per token: `token_id<TAB>z_0 z_1 ... z_{h-1}`.
    pub fn write_text(&self, w: &mut impl Write) -> Result<()> {
        writeln!(
            w,
            "NGRAM-CACHE v1 {} {} {} {:016x}",
            self.vocab, self.heads, self.k, self.fingerprint
        )?;
        let mut line = String::new();
        for t in 0..self.vocab {
            line.clear();
            let _ = write!(line, "{t}\t");
            for (j, z) in self.latents[t * self.heads..(t + 1) * self.heads].iter().enumerate() {
                if j > 0 {
                    line.push(' ');
                }
                let _ = write!(line, "{z}");
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_text(r: impl BufRead) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "latent cache",
            detail,
        };
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))??;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.len() != 6 || fields[0] != "NGRAM-CACHE" || fields[1] != "v1" {
            return Err(bad(format!("bad header {header:?}")));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("{s:?}: {e}")));
        let (vocab, heads, k) = (num(fields[2])?, num(fields[3])?, num(fields[4])?);
        let fingerprint = u64::from_str_radix(fields[5], 16).map_err(|e| bad(format!("fingerprint: {e}")))?;
        let mut latents = Vec::with_capacity(vocab * heads);
        for t in 0..vocab {
            let line = lines.next().ok_or_else(|| bad(format!("missing line for token {t}")))??;
            let (id, rest) = line
                .split_once('\t')
                .ok_or_else(|| bad(format!("line {} has no tab", t + 2)))?;
            if num(id)? != t {
                return Err(bad(format!("expected token {t}, found {id}")));
            }
            let zs: Vec<u32> = rest
                .split(' ')
                .map(|s| s.parse::<u32>().map_err(|e| bad(format!("{s:?}: {e}"))))
                .collect::<Result<_>>()?;
            if zs.len() != heads || zs.iter().any(|&z| z as usize >= k) {
                return Err(bad(format!("token {t}: expected {heads} latents below {k}")));
            }
            latents.extend(zs);
        }
        Ok(Self {
            vocab,
            heads,
            k,
            fingerprint,
            latents,
        })
    }
}

/// Inverted index from `(head, cluster)` to the tokens assigned there.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterReport {
    heads: usize,
    k: usize,
    buckets: Vec<Vec<Vec<String>>>,
}

pub fn inspect_clusters(cache: &LatentCache, token_strings: &[String]) -> Result<ClusterReport> {
    if token_strings.len() != cache.vocab() {
        return Err(Error::Data(format!(
            "{} token strings for a vocabulary of {}",
            token_strings.len(),
            cache.vocab()
        )));
    }
    let mut buckets = vec![vec![Vec::new(); cache.k()]; cache.heads()];
    for (t, name) in token_strings.iter().enumerate() {
        for (j, &z) in cache.get(t).expect("t < vocab").iter().enumerate() {
            buckets[j][z as usize].push(name.clone());
        }
    }
    Ok(ClusterReport {
        heads: cache.heads(),
        k: cache.k(),
        buckets,
    })
}

impl ClusterReport {
    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn bucket(&self, head: usize, cluster: usize) -> &[String] {
        &self.buckets[head][cluster]
    }

    /// Tokens-per-cluster counts for one head.
    pub fn histogram(&self, head: usize) -> Vec<usize> {
        self.buckets[head].iter().map(Vec::len).collect()
    }

    pub fn nonempty_clusters(&self, head: usize) -> usize {
        self.buckets[head].iter().filter(|b| !b.is_empty()).count()
    }

    /// The `n` most populated clusters of a head, largest first, ties by index.
    pub fn top_clusters(&self, head: usize, n: usize) -> Vec<(usize, &[String])> {
        let mut order: Vec<usize> = (0..self.k).filter(|&c| !self.buckets[head][c].is_empty()).collect();
        order.sort_by(|&a, &b| self.buckets[head][b].len().cmp(&self.buckets[head][a].len()).then(a.cmp(&b)));
        order
            .into_iter()
            .take(n)
            .map(|c| (c, self.buckets[head][c].as_slice()))
            .collect()
    }

    /// Tab-separated `head, cluster, count, comma-joined tokens` under a
    /// header row; the top `n` clusters per head, or every nonempty cluster
    /// when `top` is `None`.
    pub fn write_tsv(&self, w: &mut impl Write, top: Option<usize>) -> Result<()> {
        writeln!(w, "head\tcluster\tcount\ttokens")?;
        for head in 0..self.heads {
            let rows = self.top_clusters(head, top.unwrap_or(self.k));
            for (c, tokens) in rows {
                writeln!(w, "{head}\t{c}\t{}\t{}", tokens.len(), tokens.join(","))?;
            }
        }
        Ok(())
    }
}

/// Per-token latent retrieval cost at one codebook size.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub k: usize,
    pub assign_ns: f64,
    pub cached_ns: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct BenchSettings {
    pub vocab: usize,
    pub heads: usize,
    pub dim: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            vocab: 4096,
            heads: 4,
            dim: 16,
            repeats: 5,
            seed: 0,
        }
    }
}

/// Times on-the-fly assignment against cached lookup for each `k`.
///
/// For each `k` a random frozen codebook and embedding table are built and
/// the cache is checked against direct assignment on the benchmark tokens
/// before anything is timed. Each reported figure is the fastest of
/// `repeats` passes.
pub fn bench_latent_paths(k_values: &[usize], tokens: usize, settings: BenchSettings) -> Result<Vec<BenchRow>> {
    let BenchSettings {
        vocab,
        heads,
        dim,
        repeats,
        seed,
    } = settings;
    if vocab == 0 || tokens == 0 || repeats == 0 {
        return Err(Error::Config("benchmark needs vocab, tokens and repeats >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embeddings = Tensor::randn([vocab, heads * dim], 1.0, &mut rng);
    let ids: Vec<usize> = (0..tokens).map(|_| rng.random_range(0..vocab)).collect();
    // Cached lookups are a few nanoseconds each; time many more of them.
    let lookup_passes = 64;

    let mut rows = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let centers = Tensor::randn([k, heads, dim], 1.0, &mut rng).into_data();
        let codebook = Codebook::from_centers(k, heads, dim, centers)?.freeze();
        let cache = build_cache(&embeddings, &codebook)?;

        let mut direct = vec![0u32; heads];
        for &t in &ids {
            codebook.assign_row(embeddings.row(t), &mut direct);
            if cache.get(t) != Some(direct.as_slice()) {
                return Err(Error::State(format!("cache disagrees with assignment for token {t} at k={k}")));
            }
        }

        let mut assign_best = f64::INFINITY;
        let mut cached_best = f64::INFINITY;
        let mut out = vec![0u32; heads];
        for _ in 0..repeats {
            let start = Instant::now();
            for &t in &ids {
                codebook.assign_row(black_box(embeddings.row(t)), &mut out);
                black_box(&out);
            }
            assign_best = assign_best.min(start.elapsed().as_nanos() as f64 / tokens as f64);

            let start = Instant::now();
            let mut acc = 0u32;
            for _ in 0..lookup_passes {
                for &t in &ids {
                    let z = cache.get(black_box(t)).expect("token in vocab");
                    acc = acc.wrapping_add(z[0]);
                }
            }
            black_box(acc);
            cached_best = cached_best.min(start.elapsed().as_nanos() as f64 / (tokens * lookup_passes) as f64);
        }
        rows.push(BenchRow {
            k,
            assign_ns: assign_best,
            cached_ns: cached_best,
        });
    }
    Ok(rows)
}

/// Tab-separated timing table with a header row.
pub fn write_bench_table(w: &mut impl Write, rows: &[BenchRow]) -> Result<()> {
    writeln!(w, "k\tassign_ns_per_token\tcached_ns_per_token")?;
    for r in rows {
        writeln!(w, "{}\t{:.2}\t{:.2}", r.k, r.assign_ns, r.cached_ns)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(vocab: usize, k: usize, seed: u64) -> (Tensor, Codebook) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = Tensor::randn([vocab, 3 * 4], 1.0, &mut rng);
        let cb = Codebook::from_centers(k, 3, 4, Tensor::randn([k, 3, 4], 1.0, &mut rng).into_data())
            .unwrap()
            .freeze();
        (emb, cb)
    }

    #[test]
    fn cache_matches_assign_for_every_token() {
        let (emb, cb) = setup(200, 16, 1);
        let cache = build_cache(&emb, &cb).unwrap();
        let x = emb.clone().reshape([200, 3, 4]).unwrap();
        let z = cb.assign(&x).unwrap();
        for t in 0..200 {
            assert_eq!(cache.get(t).unwrap(), &z.ids()[t * 3..(t + 1) * 3]);
        }
        cache.check_fresh(&cb).unwrap();
    }

    #[test]
    fn empty_vocab_and_determinism() {
        let (_, cb) = setup(1, 4, 2);
        let cache = build_cache(&Tensor::zeros([0, 12]), &cb).unwrap();
        assert_eq!(cache.vocab(), 0);
        assert_eq!(cache.fingerprint(), cb.fingerprint());
        let (emb, cb) = setup(50, 8, 3);
        let mut a = Vec::new();
        let mut b = Vec::new();
        build_cache(&emb, &cb).unwrap().write_text(&mut a).unwrap();
        build_cache(&emb, &cb).unwrap().write_text(&mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unfrozen_codebook_rejected() {
        let cb = Codebook::from_centers(2, 1, 1, vec![0.0, 1.0]).unwrap();
        assert!(matches!(build_cache(&Tensor::zeros([3, 1]), &cb), Err(Error::State(_))));
    }

    #[test]
    fn text_format_round_trip() {
        let (emb, cb) = setup(5, 8, 4);
        let cache = build_cache(&emb, &cb).unwrap();
        let mut buf = Vec::new();
        cache.write_text(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let first = text.lines().next().unwrap();
        assert_eq!(first, format!("NGRAM-CACHE v1 5 3 8 {:016x}", cb.fingerprint()));
        let line = text.lines().nth(1).unwrap();
        let z = cache.get(0).unwrap();
        assert_eq!(line, format!("0\t{} {} {}", z[0], z[1], z[2]));
        assert_eq!(LatentCache::read_text(buf.as_slice()).unwrap(), cache);
        assert!(LatentCache::read_text(&b"NGRAM-CACHE v2 0 1 1 0\n"[..]).is_err());
    }

    #[test]
    fn fingerprint_catches_any_byte_flip() {
        let (_, cb) = setup(1, 3, 5);
        let bytes = cb.to_bytes();
        let base = crate::wire::fnv1a64(&bytes);
        for i in 0..bytes.len() {
            for bit in [0x01u8, 0x80] {
                let mut m = bytes.clone();
                m[i] ^= bit;
                assert_ne!(crate::wire::fnv1a64(&m), base, "byte {i}");
            }
        }
        let mut moved = cb.centers().to_vec();
        moved[0] += 1e-12;
        let other = Codebook::from_centers(3, 3, 4, moved).unwrap().freeze();
        let cache = build_cache(&Tensor::zeros([0, 12]), &cb).unwrap();
        assert!(matches!(cache.check_fresh(&other), Err(Error::Staleness { .. })));
    }

    #[test]
    fn report_partitions_vocab() {
        let (emb, cb) = setup(64, 8, 6);
        let cache = build_cache(&emb, &cb).unwrap();
        let names: Vec<String> = (0..64).map(|t| format!("t{t}")).collect();
        let report = inspect_clusters(&cache, &names).unwrap();
        for head in 0..3 {
            assert_eq!(report.histogram(head).iter().sum::<usize>(), 64);
            let mut all: Vec<&String> = (0..8).flat_map(|c| report.bucket(head, c)).collect();
            all.sort();
            all.dedup();
            assert_eq!(all.len(), 64);
        }
        let top = report.top_clusters(0, 2);
        assert!(top.len() <= 2 && (top.len() < 2 || top[0].1.len() >= top[1].1.len()));
        let mut tsv = Vec::new();
        report.write_tsv(&mut tsv, None).unwrap();
        let text = String::from_utf8(tsv).unwrap();
        let counted: usize = text.lines().skip(1).map(|l| l.split('\t').nth(2).unwrap().parse::<usize>().unwrap()).sum();
        assert_eq!(counted, 64 * 3);
        assert!(inspect_clusters(&cache, &names[..10]).is_err());
    }

    #[test]
    fn bench_produces_rows() {
        let rows = bench_latent_paths(
            &[4, 32],
            200,
            BenchSettings {
                vocab: 64,
                heads: 2,
                dim: 4,
                repeats: 1,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.assign_ns > 0.0 && r.cached_ns >= 0.0));
        let mut out = Vec::new();
        write_bench_table(&mut out, &rows).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 3);
    }
}
