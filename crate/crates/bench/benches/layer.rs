use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ngrammer::autodiff::Tape;
use ngrammer::{NGrammerConfig, NGrammerState, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEQ_LEN: usize = 32;
const BATCH: usize = 8;

fn layer(c: &mut Criterion) {
    let cfg = NGrammerConfig::default();
    let n = SEQ_LEN * BATCH;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn([n, cfg.heads * cfg.dim], 1.0, &mut rng);
    let mut state = NGrammerState::new(cfg).unwrap();
    state.prime_codebook(&x).unwrap();
    state.freeze().unwrap();

    c.bench_function("layer/forward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            state.forward_eval(&mut tape, xv, SEQ_LEN).unwrap().0
        })
    });
    c.bench_function("layer/forward_backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let (out, _) = state.forward_eval(&mut tape, xv, SEQ_LEN).unwrap();
            let loss = tape.sum(out).unwrap();
            black_box(tape.backward(loss).unwrap())
        })
    });
}

criterion_group!(benches, layer);
criterion_main!(benches);
