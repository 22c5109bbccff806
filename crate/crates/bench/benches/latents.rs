use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use ngrammer::{build_cache, Codebook, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 4096;
const HEADS: usize = 4;
const DIM: usize = 16;
const TOKENS: usize = 2048;

fn latent_paths(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let emb = Tensor::randn([VOCAB, HEADS * DIM], 1.0, &mut rng);
    let tokens: Vec<u32> = (0..TOKENS).map(|_| rng.random_range(0..VOCAB as u32)).collect();
    let mut rows = Vec::with_capacity(TOKENS * HEADS * DIM);
    for &t in &tokens {
        let t = t as usize;
        rows.extend_from_slice(&emb.data()[t * HEADS * DIM..(t + 1) * HEADS * DIM]);
    }
    let x = Tensor::new([TOKENS, HEADS, DIM], rows).unwrap();

    let mut group = c.benchmark_group("latents");
    group.throughput(Throughput::Elements(TOKENS as u64));
    for k in [256usize, 1024, 4096] {
        let centers = Tensor::randn([k * HEADS * DIM], 1.0, &mut rng).data().to_vec();
        let cb = Codebook::from_centers(k, HEADS, DIM, centers).unwrap().freeze();
        let cache = build_cache(&emb, &cb).unwrap();
        group.bench_with_input(BenchmarkId::new("assign", k), &k, |b, _| {
            b.iter(|| cb.assign(black_box(&x)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("cached", k), &k, |b, _| {
            b.iter(|| cache.latents_for(black_box(&tokens)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, latent_paths);
criterion_main!(benches);
