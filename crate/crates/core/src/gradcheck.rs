//! Central-difference gradient checking against the tape.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar function with central differences
/// `(f(x + h e_i) - f(x - h e_i)) / 2h`.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check(f, x, h, false)
}

/// Like [`finite_diff_check`], but `x` enters the tape as a sparse
/// embedding table, so `f` may only read it through `embedding_gather`.
pub fn finite_diff_check_sparse<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check(f, x, h, true)
}

fn check<F>(f: F, x: &Tensor, h: f64, sparse: bool) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0 && h <= 1e-3) {
        return Err(Error::Config(format!("finite difference step {h} outside (0, 1e-3]")));
    }
    let analytic = analytic_grad(&f, x, sparse)?;
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&f, &probe, sparse)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&f, &probe, sparse)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

fn enter(tape: &mut Tape, x: &Tensor, sparse: bool) -> Result<Var> {
    if sparse {
        tape.sparse_leaf(x.clone())
    } else {
        Ok(tape.leaf(x.clone()))
    }
}

fn eval<F>(f: &F, x: &Tensor, sparse: bool) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = enter(&mut tape, x, sparse)?;
    let out = f(&mut tape, v)?;
    let value = tape
        .value(out)
        .item()
        .ok_or_else(|| Error::dim("finite_diff_check", tape.shape(out), &[1]))?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("function value {value} is not finite")));
    }
    Ok(value)
}

/// Tape gradient of `f` at `x`, densified for sparse leaves.
pub fn analytic_grad<F>(f: &F, x: &Tensor, sparse: bool) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = enter(&mut tape, x, sparse)?;
    let out = f(&mut tape, v)?;
    let grads = tape.backward(out)?;
    if sparse {
        let rows = x.shape()[0];
        Ok(grads
            .sparse(v)
            .map(|g| g.to_dense(rows))
            .unwrap_or_else(|| vec![0.0; x.numel()]))
    } else {
        Ok(grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn sum_gradient_is_exact() {
        let x = Tensor::randn([3, 4], 1.0, &mut rng(1));
        let err = finite_diff_check(|t, v| t.sum(v), &x, 1e-4).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::new([1], vec![3.0]).unwrap();
        let f = |t: &mut Tape, v| t.sum_squares(v);
        let g = analytic_grad(&f, &x, false).unwrap();
        assert_eq!(g, vec![6.0]);
        let err = finite_diff_check(f, &x, 1e-4).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn layer_norm_sum_of_squares() {
        let x = Tensor::randn([4, 8], 1.0, &mut rng(2));
        let f = |t: &mut Tape, v| {
            let g = t.constant(Tensor::from_fn([8], |i| 0.5 + 0.1 * i as f64));
            let b = t.constant(Tensor::from_fn([8], |i| 0.05 * i as f64));
            let y = t.layer_norm(v, g, b, 1e-5)?;
            t.sum_squares(y)
        };
        let err = finite_diff_check(f, &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rejects_bad_step_and_nonfinite() {
        let x = Tensor::zeros([2]);
        assert!(finite_diff_check(|t, v| t.sum(v), &x, 0.1).is_err());
        let blowup = |t: &mut Tape, v| t.scale(v, f64::INFINITY).and_then(|s| t.sum(s));
        assert!(matches!(
            finite_diff_check(blowup, &Tensor::full([2], 1.0), 1e-4),
            Err(Error::Numeric(_))
        ));
    }
}
