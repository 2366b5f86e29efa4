//! Intermediate-feature distillation between fused teacher features and
//! student features: attention transfer and FitNet hints.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Backward, BackwardCtx, Graph, Var};
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::quant::Precision;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureLossKind {
    Attention,
    FitNet,
}

struct AttentionMapRule {
    n: usize,
    c: usize,
    spatial: usize,
}

impl<T: Scalar> Backward<T> for AttentionMapRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let f = ctx.inputs[0];
        let dq = ctx.grad.data();
        let two = T::of(2.0);
        let mut df = vec![T::zero(); f.numel()];
        for b in 0..self.n {
            for ch in 0..self.c {
                let off = (b * self.c + ch) * self.spatial;
                for s in 0..self.spatial {
                    df[off + s] = two * f.data()[off + s] * dq[b * self.spatial + s];
                }
            }
        }
        vec![Some(Tensor::from_parts(f.shape().to_vec(), df))]
    }
}

fn l2(v: &[impl Scalar]) -> f64 {
    v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
}

struct AttentionDistanceRule<T> {
    n: usize,
    /// Per sample: normalized maps and the two norms, or `None` if skipped.
    saved: Vec<Option<(Vec<T>, Vec<T>, T, T, T)>>,
}

impl<T: Scalar> Backward<T> for AttentionDistanceRule<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let hw = ctx.inputs[0].shape()[1];
        let upstream = ctx.grad.item() / T::of(self.n as f64);
        let mut dt = vec![T::zero(); self.n * hw];
        let mut ds = vec![T::zero(); self.n * hw];
        for (b, saved) in self.saved.iter().enumerate() {
            let Some((a, s, nt, ns, dist)) = saved else { continue };
            if *dist == T::zero() {
                continue;
            }
            let dd: Vec<T> = a.iter().zip(s).map(|(&x, &y)| (x - y) / *dist * upstream).collect();
            let a_dd: T = a.iter().zip(&dd).map(|(&x, &d)| x * d).sum();
            let s_dd: T = s.iter().zip(&dd).map(|(&y, &d)| y * d).sum();
            for i in 0..hw {
                dt[b * hw + i] = (dd[i] - a[i] * a_dd) / *nt;
                ds[b * hw + i] = -(dd[i] - s[i] * s_dd) / *ns;
            }
        }
        let shape = ctx.inputs[0].shape().to_vec();
        vec![
            ctx.needs[0].then(|| Tensor::from_parts(shape.clone(), dt)),
            ctx.needs[1].then(|| Tensor::from_parts(shape, ds)),
        ]
    }
}

struct L2DistanceRule<T> {
    n: usize,
    dists: Vec<T>,
}

impl<T: Scalar> Backward<T> for L2DistanceRule<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let per = a.numel() / self.n;
        let upstream = ctx.grad.item() / T::of(self.n as f64);
        let mut da = vec![T::zero(); a.numel()];
        for (s, &d) in self.dists.iter().enumerate() {
            if d == T::zero() {
                continue;
            }
            for i in s * per..(s + 1) * per {
                da[i] = (a.data()[i] - b.data()[i]) / d * upstream;
            }
        }
        let shape = a.shape().to_vec();
        let db = ctx.needs[1].then(|| Tensor::from_parts(shape.clone(), da.iter().map(|&v| -v).collect()));
        vec![ctx.needs[0].then(|| Tensor::from_parts(shape, da)), db]
    }
}

impl<T: Scalar> Graph<T> {
    /// `[N,c,h,w] -> [N, h·w]`: channel-wise sum of squares.
    pub fn attention_map(&mut self, f: Var) -> Result<Var> {
        let shape = self.shape(f).to_vec();
        if shape.len() != 4 {
            return Err(Error::invalid("attention_map", format!("expected [N,c,h,w], got {shape:?}")));
        }
        let (n, c, spatial) = (shape[0], shape[1], shape[2] * shape[3]);
        let x = self.value(f).data();
        let mut q = vec![T::zero(); n * spatial];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * spatial;
                for s in 0..spatial {
                    q[b * spatial + s] += x[off + s] * x[off + s];
                }
            }
        }
        let out = Tensor::from_parts(vec![n, spatial], q);
        self.push("attention_map", out, vec![f], Box::new(AttentionMapRule { n, c, spatial }))
    }

    /// Batch mean of `‖q_t/‖q_t‖ − q_s/‖q_s‖‖₂` over `[N, D]` maps. Samples
    /// with an all-zero map contribute nothing.
    pub fn attention_distance(&mut self, qt: Var, qs: Var) -> Result<Var> {
        const OP: &str = "attention_distance";
        let shape = self.shape(qt).to_vec();
        if shape.len() != 2 || self.shape(qs) != shape.as_slice() {
            return Err(Error::shape(OP, &shape, self.shape(qs)));
        }
        let (n, d) = (shape[0], shape[1]);
        let mut total = T::zero();
        let mut saved = Vec::with_capacity(n);
        for b in 0..n {
            let t = &self.value(qt).data()[b * d..(b + 1) * d];
            let s = &self.value(qs).data()[b * d..(b + 1) * d];
            let (nt, ns) = (T::of(l2(t)), T::of(l2(s)));
            if nt == T::zero() || ns == T::zero() {
                log::warn!("attention map of sample {b} has zero norm; skipping it");
                saved.push(None);
                continue;
            }
            let a: Vec<T> = t.iter().map(|&v| v / nt).collect();
            let bn: Vec<T> = s.iter().map(|&v| v / ns).collect();
            let dist = a
                .iter()
                .zip(&bn)
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum::<T>()
                .sqrt();
            total += dist;
            saved.push(Some((a, bn, nt, ns, dist)));
        }
        let out = Tensor::scalar(total / T::of(n as f64));
        self.push(OP, out, vec![qt, qs], Box::new(AttentionDistanceRule { n, saved }))
    }

    /// Batch mean of the per-sample (non-squared) l2 distance.
    pub fn l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "l2_distance";
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(OP, self.shape(a), self.shape(b)));
        }
        let n = self.shape(a)[0];
        let per = self.value(a).numel() / n;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let dists: Vec<T> = (0..n)
            .map(|s| {
                av[s * per..(s + 1) * per]
                    .iter()
                    .zip(&bv[s * per..(s + 1) * per])
                    .map(|(&x, &y)| (x - y) * (x - y))
                    .sum::<T>()
                    .sqrt()
            })
            .collect();
        let out = Tensor::scalar(dists.iter().copied().sum::<T>() / T::of(n as f64));
        self.push(OP, out, vec![a, b], Box::new(L2DistanceRule { n, dists }))
    }

    /// Attention-transfer distance between two feature maps.
    pub fn attention_loss(&mut self, ft: Var, fs: Var) -> Result<Var> {
        let qt = self.attention_map(ft)?;
        let qs = self.attention_map(fs)?;
        self.attention_distance(qt, qs)
    }

    /// FitNet hint: `‖F_T − r(F_S)‖₂` with `r` a 1×1 convolution.
    pub fn fitnet_loss(&mut self, ft: Var, fs: Var, adapter: Var) -> Result<Var> {
        let adapted = self.conv2d(fs, adapter, 1, 0)?;
        if self.shape(adapted) != self.shape(ft) {
            return Err(Error::shape("fitnet_loss", self.shape(ft), self.shape(adapted)));
        }
        self.l2_distance(ft, adapted)
    }
}

/// Selected feature loss plus the FitNet adapters it owns.
#[derive(Clone, Debug)]
pub struct FeatureDistiller {
    pub kind: FeatureLossKind,
    adapters: Vec<ParamId>,
}

impl FeatureDistiller {
    /// For FitNet, registers one 1×1 adapter per fusion layer mapping
    /// student channels to teacher channels. Square adapters start at the
    /// identity; others are He-uniform.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        kind: FeatureLossKind,
        store: &mut ParamStore<T>,
        prefix: &str,
        student_channels: &[usize],
        teacher_channels: &[usize],
        precision: Precision,
        rng: &mut R,
    ) -> Result<Self> {
        if student_channels.len() != teacher_channels.len() {
            return Err(Error::invalid("feature_distiller", "fusion layer count differs"));
        }
        let mut adapters = Vec::new();
        if kind == FeatureLossKind::FitNet {
            for (k, (&cs, &ct)) in student_channels.iter().zip(teacher_channels).enumerate() {
                let w = if cs == ct {
                    let mut w = Tensor::zeros(&[ct, cs, 1, 1]);
                    for i in 0..ct {
                        w.data_mut()[i * cs + i] = T::one();
                    }
                    w
                } else {
                    Tensor::uniform(&[ct, cs, 1, 1], (6.0 / cs as f64).sqrt(), rng)
                };
                adapters.push(store.add(format!("{prefix}.adapter.{k}"), w, ParamRole::Adapter, precision)?);
            }
        }
        Ok(FeatureDistiller { kind, adapters })
    }

    pub fn adapters(&self) -> &[ParamId] {
        &self.adapters
    }

    /// Loss for one fusion layer.
    pub fn layer_loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        layer: usize,
        ft: Var,
        fs: Var,
    ) -> Result<Var> {
        match self.kind {
            FeatureLossKind::Attention => g.attention_loss(ft, fs),
            FeatureLossKind::FitNet => {
                let r = g.param(store, self.adapters[layer]);
                g.fitnet_loss(ft, fs, r)
            }
        }
    }

    /// `Σ_k D(F_k^T, F_k^S)` over the fusion layers.
    pub fn feature_distill_loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        teacher: &[Var],
        student: &[Var],
    ) -> Result<Var> {
        if teacher.len() != student.len() || teacher.is_empty() {
            return Err(Error::invalid(
                "feature_distill_loss",
                format!("index sets differ: {} teacher vs {} student features", teacher.len(), student.len()),
            ));
        }
        if self.kind == FeatureLossKind::FitNet && self.adapters.len() != teacher.len() {
            return Err(Error::invalid("feature_distill_loss", "adapter count differs from fusion layers"));
        }
        let mut total: Option<Var> = None;
        for (k, (&ft, &fs)) in teacher.iter().zip(student).enumerate() {
            let term = self.layer_loss(g, store, k, ft, fs)?;
            total = Some(match total {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        Ok(total.expect("non-empty"))
    }
}
