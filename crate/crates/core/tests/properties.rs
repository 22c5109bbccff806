use ngrammer::autodiff::Tape;
use ngrammer::{finite_diff_check, make_hash_family, BigramTable, Codebook, SparseGrad, Tensor, ADAGRAD_EPS};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn codebook(k: usize, heads: usize, dim: usize, seed: u64) -> Codebook {
    let centers = tensor(&[k * heads * dim], seed).into_data();
    Codebook::from_centers(k, heads, dim, centers).unwrap()
}

fn brute_nearest(cb: &Codebook, j: usize, v: &[f64]) -> u32 {
    let mut best = (f64::INFINITY, 0);
    for c in 0..cb.k() {
        let d: f64 = cb.center(c, j).iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, c as u32);
        }
    }
    best.1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn assignment_matches_brute_force(k in 1usize..=64, heads in 1usize..4, dim in 1usize..6, l in 1usize..20, seed: u64) {
        let cb = codebook(k, heads, dim, seed);
        let x = tensor(&[l, heads, dim], seed ^ 1);
        let z = cb.assign(&x).unwrap();
        for i in 0..l {
            for j in 0..heads {
                let row = &x.data()[(i * heads + j) * dim..(i * heads + j + 1) * dim];
                prop_assert_eq!(z.get(i, j), brute_nearest(&cb, j, row));
            }
        }
    }

    #[test]
    fn assignment_is_permutation_equivariant(l in 2usize..30, seed: u64, shift in 1usize..29) {
        let (heads, dim) = (2, 3);
        let cb = codebook(7, heads, dim, seed);
        let x = tensor(&[l, heads, dim], seed ^ 2);
        let perm: Vec<usize> = (0..l).map(|i| (i * (shift % l).max(1) + 1) % l).collect();
        // Only proper permutations are meaningful here.
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        prop_assume!(sorted == (0..l).collect::<Vec<_>>());
        let width = heads * dim;
        let mut permuted = Vec::with_capacity(l * width);
        for &p in &perm {
            permuted.extend_from_slice(&x.data()[p * width..(p + 1) * width]);
        }
        let xp = Tensor::new([l, heads, dim], permuted).unwrap();
        let (z, zp) = (cb.assign(&x).unwrap(), cb.assign(&xp).unwrap());
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..heads {
                prop_assert_eq!(zp.get(i, j), z.get(p, j));
            }
        }
    }

    #[test]
    fn heads_are_independent(seed: u64, head in 0usize..3, bump in -5.0f64..5.0) {
        let (l, heads, dim) = (6, 3, 4);
        let cb = codebook(5, heads, dim, seed);
        let x = tensor(&[l, heads, dim], seed ^ 3);
        let mut y = x.clone();
        for i in 0..l {
            for e in 0..dim {
                y.data_mut()[(i * heads + head) * dim + e] += bump;
            }
        }
        let (zx, zy) = (cb.assign(&x).unwrap(), cb.assign(&y).unwrap());
        for i in 0..l {
            for j in (0..heads).filter(|&j| j != head) {
                prop_assert_eq!(zx.get(i, j), zy.get(i, j));
            }
        }
    }

    #[test]
    fn kmeans_reduces_quantization_error(seed: u64, k in 2usize..8) {
        let x = tensor(&[64, 2, 3], seed);
        let mut cb = Codebook::init_from_batch(&x, k, seed ^ 4).unwrap();
        let before = cb.quantization_error(&x).unwrap();
        for _ in 0..30 {
            cb.kmeans_step(&x, 0.05).unwrap();
        }
        let after = cb.quantization_error(&x).unwrap();
        prop_assert!(after <= before + 1e-12, "{before} -> {after}");
    }

    #[test]
    fn gather_equals_one_hot_matmul(rows in 1usize..=16, width in 1usize..6, ids in proptest::collection::vec(0usize..16, 1..12), seed: u64) {
        let ids: Vec<usize> = ids.into_iter().map(|i| i % rows).collect();
        let table = tensor(&[rows, width], seed);
        let mut one_hot = Tensor::zeros([ids.len(), rows]);
        for (i, &id) in ids.iter().enumerate() {
            one_hot.data_mut()[i * rows + id] = 1.0;
        }
        let mut tape = Tape::new();
        let t = tape.constant(table);
        let oh = tape.constant(one_hot);
        let g = tape.embedding_gather(t, &ids).unwrap();
        let m = tape.matmul(oh, t).unwrap();
        prop_assert_eq!(tape.value(g).data(), tape.value(m).data());
    }

    #[test]
    fn adagrad_touches_only_graded_slots(v in 1usize..20, heads in 1usize..4, slots in proptest::collection::vec((0usize..20, 0usize..4), 0..8), seed: u64) {
        let dim = 3;
        let mut table = BigramTable::init(v, heads, dim, seed, None).unwrap();
        let before = table.clone();
        let mut grad = SparseGrad::new(dim);
        for &(r, h) in &slots {
            grad.accumulate(r % v, h % heads, &[0.5, -1.0, 2.0]);
        }
        table.adagrad_update(&grad, 0.1, ADAGRAD_EPS).unwrap();
        for r in 0..v {
            for h in 0..heads {
                let touched = grad.get(r, h).is_some();
                prop_assert_eq!(table.slot(r, h) != before.slot(r, h), touched);
            }
        }
    }

    #[test]
    fn repeated_adagrad_steps_shrink(g in -10.0f64..10.0, lr in 0.01f64..1.0) {
        prop_assume!(g.abs() > 1e-3);
        let mut table = BigramTable::from_weights(1, 1, 1, vec![0.0]).unwrap();
        let mut grad = SparseGrad::new(1);
        grad.accumulate(0, 0, &[g]);
        let mut last = f64::INFINITY;
        for _ in 0..20 {
            let w = table.weights()[0];
            table.adagrad_update(&grad, lr, ADAGRAD_EPS).unwrap();
            let step = (table.weights()[0] - w).abs();
            prop_assert!(step <= last);
            last = step;
        }
    }

    #[test]
    fn hashes_land_in_range(k in 1usize..200, v in 1usize..5000, seed: u64, b in 0u64..40_000) {
        let family = make_hash_family(k, v, 2, seed).unwrap();
        let b = b % (k * k) as u64;
        for hh in family.heads() {
            prop_assert!(hh.apply(b, v as u64) < v as u64);
        }
    }

    #[test]
    fn layer_norm_standardizes(n in 2usize..32, seed: u64, scale in 0.1f64..100.0) {
        let mut x = tensor(&[3, n], seed);
        for v in x.data_mut() {
            *v *= scale;
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(Tensor::full([n], 1.0));
        let b = tape.constant(Tensor::zeros([n]));
        let y = tape.layer_norm(xv, g, b, 1e-5).unwrap();
        let y = tape.value(y).data().to_vec();
        for r in 0..3 {
            let row = &y[r * n..(r + 1) * n];
            let src = &x.data()[r * n..(r + 1) * n];
            let mu_x = src.iter().sum::<f64>() / n as f64;
            let var_x = src.iter().map(|v| (v - mu_x) * (v - mu_x)).sum::<f64>() / n as f64;
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - var_x / (var_x + 1e-5)).abs() < 1e-9);
        }
    }
}

fn mixed(tape: &mut Tape, y: ngrammer::Var, seed: u64) -> ngrammer::Result<ngrammer::Var> {
    let w = tape.constant(tensor(tape.shape(y), seed));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn op_gradients_match_finite_differences(r in 1usize..5, c in 1usize..6, seed: u64) {
        let x = tensor(&[r, c], seed);
        let other = tensor(&[r, c], seed ^ 9);
        let checks: Vec<(&str, Box<dyn Fn(&mut Tape, ngrammer::Var) -> ngrammer::Result<ngrammer::Var>>)> = vec![
            ("softmax", Box::new(|t, v| { let y = t.softmax(v)?; mixed(t, y, 1) })),
            ("gelu", Box::new(|t, v| { let y = t.gelu(v)?; mixed(t, y, 2) })),
            ("add", Box::new(|t, v| { let o = t.constant(other.clone()); let y = t.add(v, o)?; mixed(t, y, 3) })),
            ("scale", Box::new(|t, v| { let y = t.scale(v, 0.37)?; mixed(t, y, 4) })),
            ("concat", Box::new(|t, v| { let o = t.constant(other.clone()); let y = t.concat_last(&[v, o, v])?; mixed(t, y, 5) })),
            ("cross_entropy", Box::new(move |t, v| { let targets: Vec<usize> = (0..r).map(|i| i % c).collect(); t.cross_entropy_with_logits(v, &targets) })),
            ("reshape_transpose", Box::new(move |t, v| { let y = t.reshape(v, &[c, r])?; let y = t.transpose(y)?; mixed(t, y, 6) })),
        ];
        for (name, f) in &checks {
            let err = finite_diff_check(|t, v| f(t, v), &x, 1e-5).unwrap();
            prop_assert!(err < 1e-6, "{name}: {err}");
        }
    }
}
