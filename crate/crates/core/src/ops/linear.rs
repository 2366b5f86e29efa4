use crate::error::{Error, Result};
use crate::graph::{Backward, BackwardCtx, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

struct LinearRule {
    n: usize,
    d: usize,
    m: usize,
}

impl<T: Scalar> Backward<T> for LinearRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (n, d, m) = (self.n, self.d, self.m);
        let dy = ctx.grad.data();
        let dx = ctx.needs[0].then(|| {
            let mut dx = vec![T::zero(); n * d];
            T::gemm(n, m, d, T::one(), dy, m, 1, ctx.inputs[1].data(), d, 1, T::zero(), &mut dx);
            Tensor::from_parts(vec![n, d], dx)
        });
        let dw = ctx.needs[1].then(|| {
            let mut dw = vec![T::zero(); m * d];
            T::gemm(m, n, d, T::one(), dy, 1, m, ctx.inputs[0].data(), d, 1, T::zero(), &mut dw);
            Tensor::from_parts(vec![m, d], dw)
        });
        let db = ctx.needs[2].then(|| {
            let mut db = vec![T::zero(); m];
            for row in dy.chunks_exact(m) {
                for (acc, &g) in db.iter_mut().zip(row) {
                    *acc += g;
                }
            }
            Tensor::from_parts(vec![m], db)
        });
        vec![dx, dw, db]
    }
}

impl<T: Scalar> Graph<T> {
    /// `x [N,D] · weight[M,D]ᵀ + bias[M]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "linear";
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(OP, &[xs[0], ws.get(1).copied().unwrap_or(0)], &xs));
        }
        let (n, d, m) = (xs[0], xs[1], ws[0]);
        if self.shape(bias) != [m] {
            return Err(Error::shape(OP, &[m], self.shape(bias)));
        }
        let mut y = Vec::with_capacity(n * m);
        for _ in 0..n {
            y.extend_from_slice(self.value(bias).data());
        }
        T::gemm(n, d, m, T::one(), self.value(input).data(), d, 1, self.value(weight).data(), 1, d, T::one(), &mut y);
        let out = Tensor::from_parts(vec![n, m], y);
        self.push(OP, out, vec![input, weight, bias], Box::new(LinearRule { n, d, m }))
    }
}
