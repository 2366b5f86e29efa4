//! Batch normalization over `[N, C, ...]` inputs.

use crate::error::{Error, Result};
use crate::graph::{Backward, BackwardCtx, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Mutable running statistics updated by a training-mode forward.
pub struct RunningStats<'a, T> {
    pub mean: &'a mut Tensor<T>,
    pub var: &'a mut Tensor<T>,
}

struct BatchNormRule<T> {
    n: usize,
    c: usize,
    spatial: usize,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    train: bool,
}

impl<T: Scalar> Backward<T> for BatchNormRule<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let dy = ctx.grad.data();
        let gamma = ctx.inputs[1].data();
        let (n, c, s) = (self.n, self.c, self.spatial);
        let m = T::of((n * s) as f64);
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * s;
                for i in off..off + s {
                    dbeta[ch] += dy[i];
                    dgamma[ch] += dy[i] * self.xhat[i];
                }
            }
        }
        let dx = ctx.needs[0].then(|| {
            let mut dx = vec![T::zero(); dy.len()];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * s;
                    let k = gamma[ch] * self.inv_std[ch];
                    for i in off..off + s {
                        dx[i] = if self.train {
                            k / m * (m * dy[i] - dbeta[ch] - self.xhat[i] * dgamma[ch])
                        } else {
                            k * dy[i]
                        };
                    }
                }
            }
            Tensor::from_parts(ctx.inputs[0].shape().to_vec(), dx)
        });
        vec![
            dx,
            ctx.needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
            ctx.needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
        ]
    }
}

impl<T: Scalar> Graph<T> {
    /// Per-channel normalization. Training mode uses batch statistics and
    /// updates `running` by exponential moving average; eval mode reads it.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: RunningStats<'_, T>,
        train: bool,
    ) -> Result<Var> {
        const OP: &str = "batch_norm";
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(Error::invalid(OP, format!("need [N, C, ...], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        for v in [gamma, beta] {
            if self.shape(v) != [c] {
                return Err(Error::shape(OP, &[c], self.shape(v)));
            }
        }
        if running.mean.shape() != [c] || running.var.shape() != [c] {
            return Err(Error::shape(OP, &[c], running.mean.shape()));
        }
        if train && n < 2 {
            return Err(Error::invalid(OP, "training mode needs batch size >= 2"));
        }

        let x = self.value(input).data();
        let eps = T::of(BN_EPS);
        let count = n * spatial;
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        if train {
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * spatial;
                    mean[ch] += x[off..off + spatial].iter().copied().sum::<T>();
                }
            }
            let cnt = T::of(count as f64);
            for m in &mut mean {
                *m /= cnt;
            }
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * spatial;
                    var[ch] += x[off..off + spatial]
                        .iter()
                        .map(|&v| (v - mean[ch]) * (v - mean[ch]))
                        .sum::<T>();
                }
            }
            for v in &mut var {
                *v /= cnt;
            }
            let mom = T::of(BN_MOMENTUM);
            let unbias = T::of(count as f64 / (count as f64 - 1.0).max(1.0));
            for ch in 0..c {
                let rm = &mut running.mean.data_mut()[ch];
                *rm = (T::one() - mom) * *rm + mom * mean[ch];
                let rv = &mut running.var.data_mut()[ch];
                *rv = (T::one() - mom) * *rv + mom * var[ch] * unbias;
            }
        } else {
            mean.copy_from_slice(running.mean.data());
            var.copy_from_slice(running.var.data());
        }

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * spatial;
                for i in off..off + spatial {
                    xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                    y[i] = gm[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let out = Tensor::from_parts(shape, y);
        let rule = BatchNormRule {
            n,
            c,
            spatial,
            xhat: if self.any_requires_grad(&[input, gamma, beta]) { xhat } else { Vec::new() },
            inv_std,
            train,
        };
        self.push(OP, out, vec![input, gamma, beta], Box::new(rule))
    }
}
