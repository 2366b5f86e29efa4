//! Min-logit ensemble targets and temperature-scaled KL losses for mutual
//! learning between the combined teacher and the student.

use crate::error::{Error, Result};
use crate::graph::{Backward, BackwardCtx, Graph, Var};
use crate::ops::{check_labels, softmax_rows};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn rows<T: Scalar>(op: &'static str, z: &Tensor<T>) -> Result<(usize, usize)> {
    match z.shape() {
        &[n, m] => Ok((n, m)),
        s => Err(Error::invalid(op, format!("expected [N, m] logits, got {s:?}"))),
    }
}

/// Per sample, shifts both logit rows so the label entry is zero and takes
/// the elementwise minimum. The result is a plain tensor (no gradient).
pub fn min_logit_ensemble<T: Scalar>(zt: &Tensor<T>, zs: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    const OP: &str = "min_logit_ensemble";
    if zt.shape() != zs.shape() {
        return Err(Error::shape(OP, zt.shape(), zs.shape()));
    }
    let (n, m) = rows(OP, zt)?;
    check_labels(OP, labels, n, m)?;
    let mut out = Vec::with_capacity(n * m);
    for (b, &c) in labels.iter().enumerate() {
        let t = &zt.data()[b * m..(b + 1) * m];
        let s = &zs.data()[b * m..(b + 1) * m];
        out.extend(t.iter().zip(s).map(|(&x, &y)| (x - t[c]).min(y - s[c])));
    }
    Tensor::new(&[n, m], out)
}

/// Row-wise `softmax(z / temperature)`.
pub fn soft_logits<T: Scalar>(z: &Tensor<T>, temperature: T) -> Result<Tensor<T>> {
    if !(temperature > T::zero()) {
        return Err(Error::invalid("soft_logits", format!("temperature must be positive, got {temperature}")));
    }
    rows("soft_logits", z)?;
    Ok(softmax_rows(z, temperature))
}

/// Batch mean of `KL(p ‖ q)` over `[N, m]` probability rows, with `0·ln 0 = 0`.
pub fn kl_divergence<T: Scalar>(p: &Tensor<T>, q: &Tensor<T>) -> Result<T> {
    if p.shape() != q.shape() {
        return Err(Error::shape("kl_divergence", p.shape(), q.shape()));
    }
    let (n, _) = rows("kl_divergence", p)?;
    let total: T = p
        .data()
        .iter()
        .zip(q.data())
        .filter(|(&a, _)| a > T::zero())
        .map(|(&a, &b)| a * (a.ln() - b.ln()))
        .sum();
    Ok(total / T::of(n as f64))
}

/// Mean of row-wise softmaxes at one temperature.
pub fn average_soft_targets<T: Scalar>(logits: &[&Tensor<T>], temperature: T) -> Result<Tensor<T>> {
    let Some(first) = logits.first() else {
        return Err(Error::invalid("average_soft_targets", "no logits to average"));
    };
    let mut acc = Tensor::zeros(first.shape());
    for z in logits {
        if z.shape() != first.shape() {
            return Err(Error::shape("average_soft_targets", first.shape(), z.shape()));
        }
        acc.add_assign(&soft_logits(z, temperature)?);
    }
    Ok(acc.scale(T::one() / T::of(logits.len() as f64)))
}

struct SoftKlRule<T> {
    target: Tensor<T>,
    probs: Tensor<T>,
    temperature: T,
}

impl<T: Scalar> Backward<T> for SoftKlRule<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let n = self.probs.shape()[0];
        let c = ctx.grad.item() * self.temperature / T::of(n as f64);
        let d = self
            .probs
            .zip_map(&self.target, |p, t| c * (p - t))
            .expect("shapes fixed at record time");
        vec![Some(d)]
    }
}

impl<T: Scalar> Graph<T> {
    /// `𝒯² · KL(target ‖ softmax(z/𝒯))`, batch mean. `target` holds fixed
    /// probability rows.
    pub fn soft_kl(&mut self, z: Var, target: &Tensor<T>, temperature: T) -> Result<Var> {
        const OP: &str = "soft_kl";
        if self.shape(z) != target.shape() {
            return Err(Error::shape(OP, target.shape(), self.shape(z)));
        }
        let probs = soft_logits(self.value(z), temperature)?;
        let kl = kl_divergence(target, &probs)?;
        let out = Tensor::scalar(temperature * temperature * kl);
        let rule = SoftKlRule {
            target: target.clone(),
            probs,
            temperature,
        };
        self.push(OP, out, vec![z], Box::new(rule))
    }

    /// Mutual losses against the min-logit target: `(L_T, L_S)` where each
    /// is `𝒯²·KL(p̄ ‖ p)` for the teacher and student logits respectively.
    pub fn mutual_kl_losses(&mut self, zbar: &Tensor<T>, zt: Var, zs: Var, temperature: T) -> Result<(Var, Var)> {
        let target = soft_logits(zbar, temperature)?;
        let lt = self.soft_kl(zt, &target, temperature)?;
        let ls = self.soft_kl(zs, &target, temperature)?;
        Ok((lt, ls))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;

    use super::*;
    use crate::params::ParamStore;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn worked_example() {
        let z = min_logit_ensemble(&t(&[1, 3], &[2.0, 5.0, 1.0]), &t(&[1, 3], &[3.0, 4.0, 2.0]), &[1]).unwrap();
        assert_eq!(z.data(), &[-3.0, 0.0, -4.0]);
    }

    #[test]
    fn identical_inputs_shift_only() {
        let a = t(&[2, 3], &[0.5, -1.0, 2.0, 3.0, 3.5, -2.0]);
        let z = min_logit_ensemble(&a, &a, &[2, 0]).unwrap();
        assert_eq!(z.data(), &[-1.5, -3.0, 0.0, 0.0, 0.5, -5.0]);
    }

    #[test]
    fn label_out_of_range() {
        let a = t(&[1, 3], &[0.0; 3]);
        assert!(matches!(min_logit_ensemble(&a, &a, &[3]), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn softmax_cases() {
        let p = soft_logits(&t(&[1, 2], &[0.0, 3f64.ln()]), 1.0).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-15 && (p.data()[1] - 0.75).abs() < 1e-15);
        let p = soft_logits(&t(&[1, 3], &[4.0, -7.0, 12.0]), 1e6).unwrap();
        assert!(p.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-5));
        assert!(soft_logits(&p, 0.0).is_err());
    }

    #[test]
    fn closed_form_kl() {
        let kl = kl_divergence(&t(&[1, 2], &[0.75, 0.25]), &t(&[1, 2], &[0.25, 0.75])).unwrap();
        assert!((kl - 0.5 * 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn temperature_squared_scaling() {
        // fixed distributions injected as logits scaled with 𝒯
        let zbar = t(&[1, 2], &[0.75f64.ln(), 0.25f64.ln()]);
        let zs = t(&[1, 2], &[0.25f64.ln(), 0.75f64.ln()]);
        let loss = |temp: f64| {
            let mut g = Graph::new();
            let target = soft_logits(&zbar.scale(temp), temp).unwrap();
            let z = g.constant(zs.scale(temp));
            let l = g.soft_kl(z, &target, temp).unwrap();
            g.value(l).item()
        };
        assert!((loss(1.0) - 0.5 * 3f64.ln()).abs() < 1e-12);
        assert!((loss(2.0) - 4.0 * loss(1.0)).abs() < 1e-12);
    }

    #[test]
    fn detached_target_blocks_cross_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let zt = g.input(Tensor::randn(&[3, 4], &mut rng));
        let zs = g.input(Tensor::randn(&[3, 4], &mut rng));
        let zbar = min_logit_ensemble(g.value(zt), g.value(zs), &[0, 1, 3]).unwrap();
        let (_, ls) = g.mutual_kl_losses(&zbar, zt, zs, 4.0).unwrap();
        g.backward(ls, &mut ParamStore::new()).unwrap();
        assert!(g.grad(zt).is_none_or(|d| d.data().iter().all(|&v| v == 0.0)));
        assert!(g.grad(zs).unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn average_targets_rows_sum_to_one() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
        let b = t(&[2, 3], &[3.0, 2.0, 1.0, 5.0, -5.0, 0.0]);
        let p = average_soft_targets(&[&a, &b], 2.0).unwrap();
        for r in 0..2 {
            let s: f64 = p.data()[r * 3..r * 3 + 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
        assert_eq!(p.data()[0], p.data()[2]);
    }

    proptest! {
        #[test]
        fn ensemble_properties(seed in any::<u64>(), shift_t in -50.0f64..50.0, shift_s in -50.0f64..50.0) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let zt: Tensor<f64> = Tensor::randn(&[4, 5], &mut rng).scale(3.0);
            let zs: Tensor<f64> = Tensor::randn(&[4, 5], &mut rng).scale(3.0);
            let labels = [0, 4, 2, 2];
            let z = min_logit_ensemble(&zt, &zs, &labels).unwrap();
            for (b, &c) in labels.iter().enumerate() {
                prop_assert_eq!(z.data()[b * 5 + c], 0.0);
                for i in 0..5 {
                    let v = z.data()[b * 5 + i];
                    prop_assert!(v <= zt.data()[b * 5 + i] - zt.data()[b * 5 + c]);
                    prop_assert!(v <= zs.data()[b * 5 + i] - zs.data()[b * 5 + c]);
                }
            }
            let moved = min_logit_ensemble(&zt.map(|v| v + shift_t), &zs.map(|v| v + shift_s), &labels).unwrap();
            prop_assert!(moved.max_abs_diff(&z) <= 1e-12);
        }

        #[test]
        fn kl_non_negative(seed in any::<u64>()) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let p = soft_logits(&Tensor::<f64>::randn(&[3, 6], &mut rng), 1.0).unwrap();
            let q = soft_logits(&Tensor::<f64>::randn(&[3, 6], &mut rng), 1.0).unwrap();
            prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
            prop_assert!(kl_divergence(&p, &p).unwrap().abs() <= 1e-9);
        }
    }
}
