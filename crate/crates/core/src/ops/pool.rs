use crate::error::{Error, Result};
use crate::graph::{Backward, BackwardCtx, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

struct MaxPoolRule {
    in_shape: Vec<usize>,
    argmax: Vec<usize>,
}

impl<T: Scalar> Backward<T> for MaxPoolRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let mut dx = vec![T::zero(); self.in_shape.iter().product()];
        for (&src, &g) in self.argmax.iter().zip(ctx.grad.data()) {
            dx[src] += g;
        }
        vec![Some(Tensor::from_parts(self.in_shape.clone(), dx))]
    }
}

struct AvgPoolRule {
    in_shape: Vec<usize>,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl<T: Scalar> Backward<T> for AvgPoolRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (h, w) = (self.in_shape[2], self.in_shape[3]);
        let planes = self.in_shape[0] * self.in_shape[1];
        let inv = T::one() / T::of((self.k * self.k) as f64);
        let dy = ctx.grad.data();
        let mut dx = vec![T::zero(); planes * h * w];
        for p in 0..planes {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let g = dy[(p * self.ho + oy) * self.wo + ox] * inv;
                    for i in 0..self.k {
                        let row = (p * h + oy * self.stride + i) * w + ox * self.stride;
                        for v in &mut dx[row..row + self.k] {
                            *v += g;
                        }
                    }
                }
            }
        }
        vec![Some(Tensor::from_parts(self.in_shape.clone(), dx))]
    }
}

fn pool_geometry(op: &'static str, shape: &[usize], k: usize, stride: usize) -> Result<(usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::invalid(op, format!("expected [N,C,H,W], got {shape:?}")));
    }
    if k == 0 || stride == 0 || shape[2] < k || shape[3] < k {
        return Err(Error::invalid(op, format!("window {k}/stride {stride} does not fit {shape:?}")));
    }
    if !(shape[2] - k).is_multiple_of(stride) || !(shape[3] - k).is_multiple_of(stride) {
        return Err(Error::invalid(op, "non-integral output extent"));
    }
    Ok(((shape[2] - k) / stride + 1, (shape[3] - k) / stride + 1))
}

impl<T: Scalar> Graph<T> {
    /// Max pooling without padding. Ties route gradient to the lowest linear index.
    pub fn max_pool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let (ho, wo) = pool_geometry("max_pool2d", &shape, k, stride)?;
        let (h, w) = (shape[2], shape[3]);
        let planes = shape[0] * shape[1];
        let x = self.value(input).data();
        let mut y = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = (p * h + oy * stride) * w + ox * stride;
                    for i in 0..k {
                        for j in 0..k {
                            let idx = (p * h + oy * stride + i) * w + ox * stride + j;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    y.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::from_parts(vec![shape[0], shape[1], ho, wo], y);
        self.push("max_pool2d", out, vec![input], Box::new(MaxPoolRule { in_shape: shape, argmax }))
    }

    pub fn avg_pool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let (ho, wo) = pool_geometry("avg_pool2d", &shape, k, stride)?;
        let (h, w) = (shape[2], shape[3]);
        let planes = shape[0] * shape[1];
        let x = self.value(input).data();
        let inv = T::one() / T::of((k * k) as f64);
        let mut y = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for i in 0..k {
                        let row = (p * h + oy * stride + i) * w + ox * stride;
                        acc += x[row..row + k].iter().copied().sum::<T>();
                    }
                    y.push(acc * inv);
                }
            }
        }
        let out = Tensor::from_parts(vec![shape[0], shape[1], ho, wo], y);
        let rule = AvgPoolRule { in_shape: shape, k, stride, ho, wo };
        self.push("avg_pool2d", out, vec![input], Box::new(rule))
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 || shape[2] != shape[3] {
            return Err(Error::invalid("global_avg_pool", format!("expected square [N,C,H,W], got {shape:?}")));
        }
        let pooled = self.avg_pool2d(input, shape[2], 1)?;
        self.reshape(pooled, &[shape[0], shape[1]])
    }
}
