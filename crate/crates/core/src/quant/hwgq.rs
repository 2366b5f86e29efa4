//! σ-scaled Gaussian quantizer with clipped straight-through gradient.

use crate::error::{Error, Result};
use crate::graph::{Backward, BackwardCtx, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::levels::GaussianLevels;

/// Population standard deviation over every element.
pub fn tensor_std<T: Scalar>(x: &Tensor<T>) -> T {
    let n = T::of(x.numel() as f64);
    let mean = x.sum() / n;
    let var = x.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    var.sqrt()
}

/// Quantizes `x` onto `σ·levels`, σ being the tensor's own std.
/// Returns the quantized tensor and σ. A zero σ yields all zeros.
pub fn hwgq_forward<T: Scalar>(x: &Tensor<T>, levels: &GaussianLevels) -> Result<(Tensor<T>, T)> {
    if x.numel() == 0 {
        return Err(Error::invalid("hwgq_forward", "empty tensor"));
    }
    let sigma = tensor_std(x);
    if sigma == T::zero() {
        return Ok((Tensor::zeros(x.shape()), sigma));
    }
    let values: Vec<T> = levels.levels.iter().map(|&q| sigma * T::of(q)).collect();
    let bounds: Vec<T> = levels.thresholds.iter().map(|&t| sigma * T::of(t)).collect();
    let out = x.map(|v| values[bounds.partition_point(|&t| v > t)]);
    Ok((out, sigma))
}

/// Pass-through interval `[lo, hi]` of the clipped straight-through estimator.
pub fn ste_range<T: Scalar>(levels: &GaussianLevels, sigma: T) -> (T, T) {
    let hi = sigma * T::of(levels.max_level());
    let lo = if levels.half_wave { T::zero() } else { -hi };
    (lo, hi)
}

/// Straight-through gradient: `upstream` where `x` lies in the representable
/// range, zero elsewhere (and everywhere when σ = 0).
pub fn hwgq_backward<T: Scalar>(
    upstream: &Tensor<T>,
    x: &Tensor<T>,
    sigma: T,
    levels: &GaussianLevels,
) -> Result<Tensor<T>> {
    if upstream.shape() != x.shape() {
        return Err(Error::shape("hwgq_backward", x.shape(), upstream.shape()));
    }
    if sigma == T::zero() {
        return Ok(Tensor::zeros(x.shape()));
    }
    let (lo, hi) = ste_range(levels, sigma);
    upstream.zip_map(x, |g, v| if v >= lo && v <= hi { g } else { T::zero() })
}

struct HwgqRule<T> {
    sigma: T,
    levels: std::sync::Arc<GaussianLevels>,
}

impl<T: Scalar> Backward<T> for HwgqRule<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = hwgq_backward(ctx.grad, ctx.inputs[0], self.sigma, &self.levels)
            .expect("shapes fixed at record time");
        vec![Some(g)]
    }
}

impl<T: Scalar> Graph<T> {
    pub fn hwgq(&mut self, x: Var, levels: &std::sync::Arc<GaussianLevels>) -> Result<Var> {
        let (out, sigma) = hwgq_forward(self.value(x), levels)?;
        let rule = HwgqRule {
            sigma,
            levels: levels.clone(),
        };
        let output = self.push("hwgq", out, vec![x], Box::new(rule))?;
        if let Some(taps) = &mut self.hwgq_taps {
            taps.push(crate::graph::HwgqTap {
                input: x,
                output,
                sigma,
                levels: levels.clone(),
            });
        }
        Ok(output)
    }
}
