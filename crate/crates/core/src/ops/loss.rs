use crate::error::{Error, Result};
use crate::graph::{Backward, BackwardCtx, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-wise `softmax(z / temperature)` of a `[N, m]` tensor, max-subtracted.
pub fn softmax_rows<T: Scalar>(z: &Tensor<T>, temperature: T) -> Tensor<T> {
    let m = *z.shape().last().expect("softmax on empty shape");
    let mut out = Vec::with_capacity(z.numel());
    for row in z.data().chunks_exact(m) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut total = T::zero();
        for &v in row {
            let e = ((v - max) / temperature).exp();
            total += e;
            out.push(e);
        }
        for p in &mut out[start..] {
            *p /= total;
        }
    }
    Tensor::from_parts(z.shape().to_vec(), out)
}

pub(crate) fn check_labels(op: &'static str, labels: &[usize], n: usize, m: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape(op, &[n], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= m) {
        return Err(Error::LabelOutOfRange {
            op,
            label: bad,
            classes: m,
        });
    }
    Ok(())
}

struct CrossEntropyRule<T> {
    probs: Tensor<T>,
    labels: Vec<usize>,
}

impl<T: Scalar> Backward<T> for CrossEntropyRule<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let n = self.labels.len();
        let m = self.probs.shape()[1];
        let scale = ctx.grad.item() / T::of(n as f64);
        let mut g = self.probs.data().to_vec();
        for (i, &c) in self.labels.iter().enumerate() {
            g[i * m + c] -= T::one();
        }
        for v in &mut g {
            *v *= scale;
        }
        vec![Some(Tensor::from_parts(vec![n, m], g))]
    }
}

impl<T: Scalar> Graph<T> {
    /// Batch mean of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        const OP: &str = "softmax_cross_entropy";
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::invalid(OP, format!("expected [N, m] logits, got {shape:?}")));
        }
        let (n, m) = (shape[0], shape[1]);
        check_labels(OP, labels, n, m)?;
        let z = self.value(logits);
        let mut total = T::zero();
        for (row, &c) in z.data().chunks_exact(m).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += lse - row[c];
        }
        let probs = softmax_rows(z, T::one());
        let out = Tensor::scalar(total / T::of(n as f64));
        let rule = CrossEntropyRule {
            probs,
            labels: labels.to_vec(),
        };
        self.push(OP, out, vec![logits], Box::new(rule))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_m() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[3, 4]));
        let l = g.softmax_cross_entropy(z, &[0, 1, 3]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_zero() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::from_f64(&[1, 3], &[0.0, 30.0, 0.0]).unwrap());
        let l = g.softmax_cross_entropy(z, &[1]).unwrap();
        assert!(g.value(l).item() < 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            g.softmax_cross_entropy(z, &[3]),
            Err(Error::LabelOutOfRange { label: 3, .. })
        ));
    }

    #[test]
    fn softmax_closed_form() {
        let z = Tensor::<f64>::from_f64(&[1, 2], &[0.0, 3f64.ln()]).unwrap();
        let p = softmax_rows(&z, 1.0);
        assert!((p.data()[0] - 0.25).abs() < 1e-15);
        assert!((p.data()[1] - 0.75).abs() < 1e-15);
    }
}
