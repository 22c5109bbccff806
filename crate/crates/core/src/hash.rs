//! Latent bigram IDs and the per-head universal hash into the bigram vocabulary.
//!
//! Position 0 keeps its uni-gram latent; every later position combines the
//! previous latent, `b[i] = z[i] + k * z[i - 1]`. Each head then hashes its
//! bigram IDs with its own `((r * b + s) mod p) mod v`, where the prime `p`
//! lies in `(k^2, 2k^2]`.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codebook::LatentSequence;
use crate::error::{Error, Result};
use crate::wire;

const MAGIC: &[u8; 8] = b"NGRAMHF1";

/// Largest supported codebook size; keeps `2k^2` inside `u64`.
pub const MAX_K: usize = 1 << 31;

/// Bigram IDs `b` of shape `(len, heads)`, each below `k^2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BigramSequence {
    len: usize,
    heads: usize,
    ids: Vec<u64>,
}

impl BigramSequence {
    pub fn new(len: usize, heads: usize, ids: Vec<u64>) -> Result<Self> {
        if ids.len() != len * heads {
            return Err(Error::dim("bigram_sequence", &[len, heads], &[ids.len()]));
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

    pub fn get(&self, pos: usize, head: usize) -> u64 {
        self.ids[pos * self.heads + head]
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }
}

/// Bigram IDs for one sequence of latents.
pub fn bigram_ids(z: &LatentSequence, k: usize) -> Result<BigramSequence> {
    if let Some(&bad) = z.ids().iter().find(|&&id| id as usize >= k) {
        return Err(Error::Range {
            value: bad as u64,
            bound: k as u64,
        });
    }
    let (len, heads) = (z.len(), z.heads());
    let k = k as u64;
    let mut ids = Vec::with_capacity(len * heads);
    for i in 0..len {
        for j in 0..heads {
            let cur = z.get(i, j) as u64;
            ids.push(if i == 0 {
                cur
            } else {
                cur + k * z.get(i - 1, j) as u64
            });
        }
    }
    BigramSequence::new(len, heads, ids)
}

/// Hash parameters of one head: `((multiplier * b + offset) mod prime) mod v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadHash {
    pub prime: u64,
    pub multiplier: u64,
    pub offset: u64,
}

impl HeadHash {
    #[inline]
    pub fn apply(&self, b: u64, v: u64) -> u64 {
        let mixed = (self.multiplier as u128 * b as u128 + self.offset as u128) % self.prime as u128;
        (mixed as u64) % v
    }
}

/// One seeded universal hash per head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashFamily {
    k: usize,
    v: usize,
    seed: u64,
    heads: Vec<HeadHash>,
}

/// Draws a hash family; head `j` uses its own ChaCha stream of `seed`.
///
/// The prime is uniform over the primes in `(k^2, 2k^2]` (rejection sampling
/// on uniform integers), the multiplier uniform in `1..p` and the offset
/// uniform in `0..p-1`.
pub fn make_hash_family(k: usize, v: usize, heads: usize, seed: u64) -> Result<HashFamily> {
    if k == 0 || v == 0 || heads == 0 {
        return Err(Error::Config(format!(
            "hash family needs k, v, h >= 1 (got k={k}, v={v}, h={heads})"
        )));
    }
    if k > MAX_K {
        return Err(Error::Config(format!("k={k} exceeds the supported maximum {MAX_K}")));
    }
    let k2 = (k as u64) * (k as u64);
    let params = (0..heads)
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(j as u64);
            let prime = loop {
                let cand = rng.random_range(k2 + 1..=2 * k2);
                if is_prime(cand) {
                    break cand;
                }
            };
            let multiplier = rng.random_range(1..prime);
            let offset = rng.random_range(0..prime - 1);
            HeadHash {
                prime,
                multiplier,
                offset,
            }
        })
        .collect();
    Ok(HashFamily {
        k,
        v,
        seed,
        heads: params,
    })
}

impl HashFamily {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn v(&self) -> usize {
        self.v
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn heads(&self) -> &[HeadHash] {
        &self.heads
    }

    /// `id[i, j] = ((r_j * b[i, j] + s_j) mod p_j) mod v`, row-major `(len, heads)`.
    pub fn hash_to_vocab(&self, b: &BigramSequence) -> Result<Vec<usize>> {
        if b.heads() != self.heads.len() {
            return Err(Error::dim("hash_to_vocab", &[b.len(), b.heads()], &[self.heads.len()]));
        }
        let v = self.v as u64;
        let mut out = Vec::with_capacity(b.ids().len());
        for i in 0..b.len() {
            for (j, hh) in self.heads.iter().enumerate() {
                let id = b.get(i, j);
                if id >= hh.prime {
                    return Err(Error::Range {
                        value: id,
                        bound: hh.prime,
                    });
                }
                out.push(hh.apply(id, v) as usize);
            }
        }
        Ok(out)
    }

    /// `NGRAMHF1`, then `k, v, h, seed` and per head `p, r, s`, all u64 LE.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        for x in [self.k as u64, self.v as u64, self.heads.len() as u64, self.seed] {
            wire::put_u64(w, x)?;
        }
        for hh in &self.heads {
            for x in [hh.prime, hh.multiplier, hh.offset] {
                wire::put_u64(w, x)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        wire::expect_magic(r, MAGIC, "hash family")?;
        let k = wire::get_u64(r)? as usize;
        let v = wire::get_u64(r)? as usize;
        let h = wire::get_u64(r)? as usize;
        let seed = wire::get_u64(r)?;
        let mut heads = Vec::with_capacity(h);
        for _ in 0..h {
            let prime = wire::get_u64(r)?;
            let multiplier = wire::get_u64(r)?;
            let offset = wire::get_u64(r)?;
            if !is_prime(prime) || multiplier == 0 || multiplier >= prime || offset > prime - 2 {
                return Err(Error::Format {
                    what: "hash family",
                    detail: format!("invalid head parameters p={prime} r={multiplier} s={offset}"),
                });
            }
            heads.push(HeadHash {
                prime,
                multiplier,
                offset,
            });
        }
        Ok(Self { k, v, seed, heads })
    }
}

fn mul_mod(a: u64, b: u64, m: u64) -> u64 {
    ((a as u128 * b as u128) % m as u128) as u64
}

fn pow_mod(mut base: u64, mut exp: u64, m: u64) -> u64 {
    let mut acc = 1 % m;
    base %= m;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base, m);
        }
        base = mul_mod(base, base, m);
        exp >>= 1;
    }
    acc
}

/// Deterministic Miller-Rabin, exact for all `u64`.
pub fn is_prime(n: u64) -> bool {
    const BASES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    if n < 2 {
        return false;
    }
    for p in BASES {
        if n.is_multiple_of(p) {
            return n == p;
        }
    }
    let mut d = n - 1;
    let mut s = 0;
    while d.is_multiple_of(2) {
        d /= 2;
        s += 1;
    }
    'witness: for a in BASES {
        let mut x = pow_mod(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mul_mod(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(z: &[u32]) -> LatentSequence {
        LatentSequence::new(z.len(), 1, z.to_vec()).unwrap()
    }

    #[test]
    fn bigram_examples() {
        assert_eq!(bigram_ids(&seq(&[2, 7, 0, 15]), 16).unwrap().ids(), &[2, 39, 112, 15]);
        assert_eq!(bigram_ids(&seq(&[0, 0, 0]), 16).unwrap().ids(), &[0, 0, 0]);
        assert_eq!(bigram_ids(&seq(&[9]), 16).unwrap().ids(), &[9]);
        assert!(matches!(
            bigram_ids(&seq(&[1, 16]), 16),
            Err(Error::Range { value: 16, bound: 16 })
        ));
    }

    #[test]
    fn primes_for_k4_in_window() {
        let allowed = [17u64, 19, 23, 29, 31];
        // trial division over the window agrees with Miller-Rabin
        let scanned: Vec<u64> = (17..=32u64).filter(|&n| (2..n).all(|d| n % d != 0)).collect();
        assert_eq!(scanned, allowed);
        for seed in 0..50 {
            let fam = make_hash_family(4, 7, 3, seed).unwrap();
            for hh in fam.heads() {
                assert!(allowed.contains(&hh.prime), "{}", hh.prime);
                assert!(hh.multiplier >= 1 && hh.multiplier < hh.prime);
                assert!(hh.offset <= hh.prime - 2);
            }
        }
    }

    #[test]
    fn family_is_deterministic_and_heads_differ() {
        assert_eq!(make_hash_family(32, 1024, 8, 5).unwrap(), make_hash_family(32, 1024, 8, 5).unwrap());
        for seed in 0..100 {
            let fam = make_hash_family(64, 4096, 8, seed).unwrap();
            let first = fam.heads()[0];
            assert!(fam.heads().iter().any(|hh| *hh != first), "seed {seed}");
        }
    }

    #[test]
    fn hash_examples() {
        let fam = HashFamily {
            k: 4,
            v: 7,
            seed: 0,
            heads: vec![HeadHash {
                prime: 17,
                multiplier: 5,
                offset: 3,
            }],
        };
        let b = BigramSequence::new(1, 1, vec![10]).unwrap();
        assert_eq!(fam.hash_to_vocab(&b).unwrap(), vec![2]);

        let ident = HeadHash {
            prime: 31,
            multiplier: 1,
            offset: 0,
        };
        assert_eq!(ident.apply(0, 5), 0);
        let wide = HeadHash {
            prime: 29,
            multiplier: 11,
            offset: 4,
        };
        for b in 0..16 {
            assert_eq!(wide.apply(b, 64), (11 * b + 4) % 29);
        }
        let too_big = BigramSequence::new(1, 1, vec![17]).unwrap();
        assert!(matches!(fam.hash_to_vocab(&too_big), Err(Error::Range { .. })));
    }

    #[test]
    fn miller_rabin_against_trial_division() {
        for n in 0..5000u64 {
            let trial = n >= 2 && (2..).take_while(|d| d * d <= n).all(|d| n % d != 0);
            assert_eq!(is_prime(n), trial, "{n}");
        }
        assert!(is_prime(18_446_744_073_709_551_557)); // largest u64 prime
        assert!(!is_prime(3_215_031_751)); // strong pseudoprime to bases 2,3,5,7
    }

    #[test]
    fn serialization_round_trip() {
        let fam = make_hash_family(8, 100, 3, 42).unwrap();
        let mut buf = Vec::new();
        fam.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"NGRAMHF1");
        assert_eq!(buf.len(), 8 + 4 * 8 + 3 * 3 * 8);
        assert_eq!(HashFamily::read_from(&mut buf.as_slice()).unwrap(), fam);
    }

    proptest! {
        #[test]
        fn bigram_decodes_to_latent_pairs(k in 1usize..300, z in proptest::collection::vec(0u32..300, 1..40)) {
            let z: Vec<u32> = z.into_iter().map(|v| v % k as u32).collect();
            let b = bigram_ids(&seq(&z), k).unwrap();
            for i in 1..z.len() {
                let id = b.get(i, 0);
                prop_assert!(id < (k * k) as u64);
                prop_assert_eq!(id % k as u64, z[i] as u64);
                prop_assert_eq!(id / k as u64, z[i - 1] as u64);
            }
            prop_assert!(b.get(0, 0) < k as u64);
        }

        #[test]
        fn hash_output_in_vocab(k in 1usize..200, v in 1usize..5000, seed: u64, b in 0u64..40_000) {
            let fam = make_hash_family(k, v, 2, seed).unwrap();
            let b = b % (k * k) as u64;
            let seq = BigramSequence::new(1, 2, vec![b, b]).unwrap();
            for id in fam.hash_to_vocab(&seq).unwrap() {
                prop_assert!(id < v);
            }
        }
    }
}
