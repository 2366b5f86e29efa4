use crate::error::{Error, Result};
use crate::graph::{Backward, BackwardCtx, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

struct AddRule;

impl<T: Scalar> Backward<T> for AddRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]
    }
}

struct SubRule;

impl<T: Scalar> Backward<T> for SubRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|g| -g))]
    }
}

struct MulRule;

impl<T: Scalar> Backward<T> for MulRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        vec![
            ctx.needs[0].then(|| ctx.grad.zip_map(b, |g, y| g * y).unwrap()),
            ctx.needs[1].then(|| ctx.grad.zip_map(a, |g, x| g * x).unwrap()),
        ]
    }
}

struct ScaleRule<T>(T);

impl<T: Scalar> Backward<T> for ScaleRule<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(ctx.grad.scale(self.0))]
    }
}

struct ReluRule;

impl<T: Scalar> Backward<T> for ReluRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = ctx
            .grad
            .zip_map(ctx.inputs[0], |g, x| if x > T::zero() { g } else { T::zero() })
            .unwrap();
        vec![Some(g)]
    }
}

struct SumRule {
    shape: Vec<usize>,
    scale: f64,
}

impl<T: Scalar> Backward<T> for SumRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = ctx.grad.item() * T::of(self.scale);
        vec![Some(Tensor::full(&self.shape, g))]
    }
}

struct ReshapeRule {
    shape: Vec<usize>,
}

impl<T: Scalar> Backward<T> for ReshapeRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(Tensor::from_parts(
            self.shape.clone(),
            ctx.grad.data().to_vec(),
        ))]
    }
}

impl<T: Scalar> Graph<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", out, vec![a, b], Box::new(AddRule))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push("sub", out, vec![a, b], Box::new(SubRule))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", out, vec![a, b], Box::new(MulRule))
    }

    pub fn scalar_mul(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).scale(c);
        self.push("scalar_mul", out, vec![a], Box::new(ScaleRule(c)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push("relu", out, vec![a], Box::new(ReluRule))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, vec![a], Box::new(SumRule { shape, scale: 1.0 }))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = self.value(a).numel();
        let out = Tensor::scalar(self.value(a).sum() / T::of(n as f64));
        let scale = 1.0 / n as f64;
        self.push("mean", out, vec![a], Box::new(SumRule { shape, scale }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let old = self.shape(a).to_vec();
        let out = self.value(a).reshape(shape)?;
        self.push("reshape", out, vec![a], Box::new(ReshapeRule { shape: old }))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        self.reshape(a, &[n, rest])
    }

    /// `Σ c_i · x_i` over one-element tensors; terms with `c_i == 0` are skipped.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, c) in terms {
            if c == T::zero() {
                continue;
            }
            let scaled = if c == T::one() { v } else { self.scalar_mul(v, c)? };
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled)?,
            });
        }
        match acc {
            Some(v) => Ok(v),
            None => Ok(self.constant(Tensor::scalar(T::zero()))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[3], &[-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let mut store = ParamStore::new();
        let x = g.input(Tensor::from_f64(&[2, 2], &[1.0, -2.0, 3.0, 0.5]).unwrap());
        let s = g.sum(x).unwrap();
        g.backward(s, &mut store).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn zero_scaled_loss_gives_zero_grads() {
        let mut g = Graph::<f64>::new();
        let mut store = ParamStore::new();
        let x = g.input(Tensor::from_f64(&[3], &[1.0, -2.0, 3.0]).unwrap());
        let y = g.mul(x, x).unwrap();
        let r = g.relu(y).unwrap();
        let s = g.sum(r).unwrap();
        let z = g.scalar_mul(s, 0.0).unwrap();
        g.backward(z, &mut store).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let mut g = Graph::<f64>::new();
        let mut store = ParamStore::new();
        let x = g.input(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        assert!(matches!(
            g.backward(x, &mut store),
            Err(Error::NonScalarLoss(_))
        ));
        let s = g.sum(x).unwrap();
        g.backward(s, &mut store).unwrap();
        assert_eq!(g.backward(s, &mut store), Err(Error::BackwardTwice));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
    }
}
