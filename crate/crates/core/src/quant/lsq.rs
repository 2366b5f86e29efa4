//! Uniform quantizer with a learned step size.

use crate::error::{Error, Result};
use crate::graph::{Backward, BackwardCtx, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Integer code range `[qn, qp]` for `bits`.
pub fn lsq_bounds(bits: u8, signed: bool) -> (i64, i64) {
    assert!((1..=31).contains(&bits), "bits out of range");
    if signed {
        (-(1i64 << (bits - 1)), (1i64 << (bits - 1)) - 1)
    } else {
        (0, (1i64 << bits) - 1)
    }
}

/// Gradient scale `1 / sqrt(count · Qp)` applied to the step-size gradient.
pub fn lsq_grad_scale(count: usize, qp: i64) -> f64 {
    1.0 / ((count as f64) * (qp.max(1) as f64)).sqrt()
}

#[derive(Clone, Copy, Debug)]
pub struct LsqOptions {
    pub qn: i64,
    pub qp: i64,
    /// Multiplier on the step-size gradient (1 disables scaling).
    pub grad_scale: f64,
    /// When false the rounding is skipped, leaving `clip(x/s)·s`.
    pub round: bool,
}

struct LsqRule<T> {
    step: T,
    opts: LsqOptions,
}

impl<T: Scalar> Backward<T> for LsqRule<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (qn, qp) = (T::of(self.opts.qn as f64), T::of(self.opts.qp as f64));
        let x = ctx.inputs[0].data();
        let g = ctx.grad.data();
        let mut dx = vec![T::zero(); x.len()];
        let mut ds = T::zero();
        for ((d, &v), &gi) in dx.iter_mut().zip(x).zip(g) {
            let u = v / self.step;
            if u < qn {
                ds += gi * qn;
            } else if u > qp {
                ds += gi * qp;
            } else {
                *d = gi;
                if self.opts.round {
                    ds += gi * (u.round() - u);
                }
            }
        }
        let ds = ds * T::of(self.opts.grad_scale);
        vec![
            ctx.needs[0].then(|| Tensor::from_parts(ctx.inputs[0].shape().to_vec(), dx)),
            ctx.needs[1].then(|| Tensor::scalar(ds)),
        ]
    }
}

impl<T: Scalar> Graph<T> {
    /// `round(clip(x/s, qn, qp)) · s` with a one-element step `s > 0`.
    pub fn lsq(&mut self, x: Var, step: Var, opts: LsqOptions) -> Result<Var> {
        const OP: &str = "lsq";
        if self.value(step).numel() != 1 {
            return Err(Error::shape(OP, &[1], self.shape(step)));
        }
        let s = self.value(step).item();
        if !(s > T::zero()) {
            return Err(Error::invalid(OP, format!("step size must be positive, got {s}")));
        }
        let (qn, qp) = (T::of(opts.qn as f64), T::of(opts.qp as f64));
        let out = self.value(x).map(|v| {
            let u = (v / s).max(qn).min(qp);
            let u = if opts.round { u.round() } else { u };
            u * s
        });
        self.push(OP, out, vec![x, step], Box::new(LsqRule { step: s, opts }))
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::params::ParamStore;

    fn opts(bits: u8, signed: bool) -> LsqOptions {
        let (qn, qp) = lsq_bounds(bits, signed);
        LsqOptions { qn, qp, grad_scale: 1.0, round: true }
    }

    #[test]
    fn bounds() {
        assert_eq!(lsq_bounds(2, false), (0, 3));
        assert_eq!(lsq_bounds(2, true), (-2, 1));
        assert_eq!(lsq_bounds(8, true), (-128, 127));
    }

    #[test]
    fn grid_points_are_fixed() {
        let mut g = Graph::<f64>::new();
        let s = 0.375;
        let x = g.constant(Tensor::from_f64(&[4], &[-2.0 * s, -s, 0.0, s]).unwrap());
        let st = g.constant(Tensor::scalar(s));
        let y = g.lsq(x, st, opts(2, true)).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn clips_to_rails() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[2], &[100.0, -100.0]).unwrap());
        let st = g.constant(Tensor::scalar(0.5));
        let y = g.lsq(x, st, opts(3, false)).unwrap();
        assert_eq!(g.value(y).data(), &[3.5, 0.0]);
        let y = g.lsq(x, st, opts(3, true)).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, -2.0]);
    }

    #[test]
    fn rejects_non_positive_step() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[2]));
        let st = g.constant(Tensor::scalar(0.0));
        assert!(g.lsq(x, st, opts(2, true)).is_err());
    }

    #[test]
    fn cardinality() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[9], &[-4.0, -1.3, -0.2, 0.0, 0.4, 0.9, 1.6, 2.2, 9.0]).unwrap());
        let st = g.constant(Tensor::scalar(0.3));
        let y = g.lsq(x, st, opts(2, true)).unwrap();
        let set: BTreeSet<_> = g.value(y).data().iter().map(|v| v.to_bits()).collect();
        assert!(set.len() <= 4);
    }

    #[test]
    fn step_gradient_follows_learned_step_rule() {
        let mut g = Graph::<f64>::new();
        let mut store = ParamStore::new();
        let s = 0.5;
        let xs = [0.3, -0.8, -5.0, 5.0];
        let x = g.input(Tensor::from_f64(&[4], &xs).unwrap());
        let st = g.input(Tensor::scalar(s));
        let (qn, qp) = lsq_bounds(2, true);
        let scale = lsq_grad_scale(4, qp);
        let y = g.lsq(x, st, LsqOptions { qn, qp, grad_scale: scale, round: true }).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l, &mut store).unwrap();
        let expect: f64 = (0.6f64.round() - 0.6) + ((-1.6f64).round() + 1.6) + qn as f64 + qp as f64;
        assert!((g.grad(st).unwrap().item() - expect * scale).abs() < 1e-12);
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 0.0, 0.0]);
    }
}
