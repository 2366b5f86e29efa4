//! Importance-weighted fusion of teacher activations into shared knowledge.
//!
//! Each fusion layer `k` owns a vector of raw logits `ρ^k` (one per teacher).
//! The mixing weights are `π^k = softmax(ρ^k)`, so they stay on the simplex
//! by construction; `π` itself is never stored.

use crate::error::{Error, Result};
use crate::graph::{Backward, BackwardCtx, Graph, Var};
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::quant::Precision;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Max-subtracted softmax of a logit vector.
pub fn importance_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&r| (r - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Learnable per-layer, per-teacher importance logits.
#[derive(Clone, Debug)]
pub struct ImportanceFactors {
    layers: Vec<ParamId>,
    teachers: usize,
}

impl ImportanceFactors {
    /// Registers zero logits (uniform `π = 1/n`) for each fusion layer.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        teachers: usize,
        fusion_layers: usize,
    ) -> Result<Self> {
        if teachers == 0 {
            return Err(Error::invalid("importance_factors", "need at least one teacher"));
        }
        let layers = (0..fusion_layers)
            .map(|k| {
                store.add(
                    format!("{prefix}.rho.{k}"),
                    Tensor::zeros(&[teachers]),
                    ParamRole::Importance,
                    Precision::Full,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ImportanceFactors { layers, teachers })
    }

    pub fn teachers(&self) -> usize {
        self.teachers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn logits_id(&self, layer: usize) -> ParamId {
        self.layers[layer]
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.layers
    }

    /// Current `π^k`.
    pub fn weights<T: Scalar>(&self, store: &ParamStore<T>, layer: usize) -> Vec<T> {
        importance_softmax(store.value(self.layers[layer]).data())
    }

    /// `π` for every layer as `f64`, indexed `[layer][teacher]`.
    pub fn snapshot<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<Vec<f64>> {
        (0..self.layers.len())
            .map(|k| self.weights(store, k).into_iter().map(|p| p.as_f64()).collect())
            .collect()
    }
}

/// Checks `Σ π = 1 ± tol` and `π ∈ [0, 1]` for every layer.
pub fn check_simplex(snapshot: &[Vec<f64>], tol: f64) -> Result<()> {
    for (k, pi) in snapshot.iter().enumerate() {
        let total: f64 = pi.iter().sum();
        if (total - 1.0).abs() > tol || pi.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::invalid(
                "importance_factors",
                format!("layer {k} weights {pi:?} leave the simplex (sum {total})"),
            ));
        }
    }
    Ok(())
}

struct FuseRule<T> {
    pi: Vec<T>,
}

impl<T: Scalar> Backward<T> for FuseRule<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let grad = ctx.grad;
        let acts = &ctx.inputs[1..];
        let mut out = Vec::with_capacity(ctx.inputs.len());
        let drho = ctx.needs[0].then(|| {
            let dots: Vec<T> = acts
                .iter()
                .map(|a| a.data().iter().zip(grad.data()).map(|(&x, &g)| x * g).sum::<T>())
                .collect();
            let mean: T = self.pi.iter().zip(&dots).map(|(&p, &d)| p * d).sum();
            let d: Vec<T> = self.pi.iter().zip(&dots).map(|(&p, &d)| p * (d - mean)).collect();
            Tensor::from_parts(vec![self.pi.len()], d)
        });
        out.push(drho);
        for (i, &p) in self.pi.iter().enumerate() {
            out.push(ctx.needs[i + 1].then(|| grad.scale(p)));
        }
        out
    }
}

impl<T: Scalar> Graph<T> {
    /// `Σ_i softmax(rho)_i · acts[i]`, summed in ascending teacher order.
    pub fn fuse(&mut self, rho: Var, acts: &[Var]) -> Result<Var> {
        const OP: &str = "fuse";
        if acts.is_empty() {
            return Err(Error::invalid(OP, "no activations to fuse"));
        }
        if self.shape(rho) != [acts.len()] {
            return Err(Error::shape(OP, &[acts.len()], self.shape(rho)));
        }
        let shape = self.shape(acts[0]).to_vec();
        for &a in &acts[1..] {
            if self.shape(a) != shape.as_slice() {
                return Err(Error::shape(OP, &shape, self.shape(a)));
            }
        }
        let pi = importance_softmax(self.value(rho).data());
        let mut acc = self.value(acts[0]).scale(pi[0]);
        for (&a, &p) in acts[1..].iter().zip(&pi[1..]) {
            for (o, &v) in acc.data_mut().iter_mut().zip(self.value(a).data()) {
                *o += p * v;
            }
        }
        let mut inputs = Vec::with_capacity(acts.len() + 1);
        inputs.push(rho);
        inputs.extend_from_slice(acts);
        self.push(OP, acc, inputs, Box::new(FuseRule { pi }))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;

    use super::*;

    fn fuse_values(rho: &[f64], acts: &[Tensor<f64>]) -> Tensor<f64> {
        let mut g = Graph::new();
        let r = g.constant(Tensor::from_f64(&[rho.len()], rho).unwrap());
        let vs: Vec<Var> = acts.iter().map(|a| g.constant(a.clone())).collect();
        let f = g.fuse(r, &vs).unwrap();
        g.value(f).clone()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, &mut rng)
    }

    #[test]
    fn uniform_logits_average() {
        let x = random(&[2, 3], 1);
        let y = random(&[2, 3], 2);
        let f = fuse_values(&[0.0, 0.0], &[x.clone(), y.clone()]);
        for ((&a, &b), &c) in x.data().iter().zip(y.data()).zip(f.data()) {
            assert!((0.5 * a + 0.5 * b - c).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_logits_select_one_teacher() {
        let x = random(&[4], 3);
        let y = random(&[4], 4);
        let f = fuse_values(&[20.0, -20.0], &[x.clone(), y]);
        for (&a, &c) in x.data().iter().zip(f.data()) {
            assert!((a - c).abs() <= 1e-8 * a.abs().max(1.0));
        }
    }

    #[test]
    fn three_teacher_weights_match_direct_softmax() {
        let acts: Vec<_> = (0..3).map(|s| random(&[5], 10 + s)).collect();
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        let w: Vec<f64> = e.iter().map(|v| v / z).collect();
        let f = fuse_values(&[1.0, 2.0, 3.0], &acts);
        for j in 0..5 {
            let oracle: f64 = (0..3).map(|i| w[i] * acts[i].data()[j]).sum();
            assert!((f.data()[j] - oracle).abs() < 1e-14);
        }
    }

    #[test]
    fn gradients_for_equal_logits_and_duplicate_inputs() {
        let mut store = ParamStore::new();
        let mut g = Graph::<f64>::new();
        let x = random(&[3, 2], 5);
        let r = g.input(Tensor::zeros(&[2]));
        let a = g.input(x.clone());
        let b = g.input(x);
        let f = g.fuse(r, &[a, b]).unwrap();
        let l = g.sum(f).unwrap();
        g.backward(l, &mut store).unwrap();
        assert!(g.grad(a).unwrap().data().iter().all(|&v| v == 0.5));
        assert!(g.grad(r).unwrap().data().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn errors() {
        let mut g = Graph::<f64>::new();
        let r = g.constant(Tensor::zeros(&[2]));
        assert!(g.fuse(r, &[]).is_err());
        let a = g.constant(Tensor::zeros(&[3]));
        let b = g.constant(Tensor::zeros(&[4]));
        assert!(matches!(g.fuse(r, &[a, b]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn factors_start_uniform() {
        let mut store = ParamStore::<f64>::new();
        let f = ImportanceFactors::new(&mut store, "t", 3, 2).unwrap();
        let snap = f.snapshot(&store);
        assert_eq!(snap.len(), 2);
        for pi in &snap {
            for &p in pi {
                assert!((p - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        check_simplex(&snap, 1e-12).unwrap();
        assert!(check_simplex(&[vec![0.7, 0.7]], 1e-9).is_err());
    }

    proptest! {
        #[test]
        fn convex_combination(seed in any::<u64>(), n in 1usize..5, rho in proptest::collection::vec(-5.0f64..5.0, 5)) {
            let acts: Vec<_> = (0..n).map(|i| random(&[6], seed.wrapping_add(i as u64))).collect();
            let f = fuse_values(&rho[..n], &acts);
            for j in 0..6 {
                let lo = acts.iter().map(|a| a.data()[j]).fold(f64::INFINITY, f64::min);
                let hi = acts.iter().map(|a| a.data()[j]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(f.data()[j] >= lo - 1e-12 && f.data()[j] <= hi + 1e-12);
            }
        }
    }
}
