use rand::Rng;

use crate::error::{Error, Result};
use crate::fusion::ImportanceFactors;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::quant::{Precision, QuantMode, Scheme};
use crate::scalar::Scalar;

use super::network::{Backbone, Classifier, ForwardOutput};
use super::spec::NetworkSpec;

/// Teachers of a shared architecture at their own precisions, one set of
/// importance factors per fusion layer, and a single shared classifier.
#[derive(Clone, Debug)]
pub struct TeacherEnsemble {
    pub teachers: Vec<Backbone>,
    pub head: Classifier,
    pub importance: ImportanceFactors,
}

/// Collaborative forward results. `pre_fusion[k][i]` is teacher `i`'s own
/// (quantized) output at fusion layer `k`.
#[derive(Clone, Debug)]
pub struct CollaborativeOutput {
    pub fused: Vec<Var>,
    pub logits: Var,
    pub pre_fusion: Vec<Vec<Var>>,
}

impl TeacherEnsemble {
    /// Teacher `i` is registered under `teacher{i}`, the shared head under
    /// `teachers`, and importance logits under `teachers.rho.{k}`.
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        spec: &NetworkSpec,
        precisions: &[Precision],
        scheme: Scheme,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        if precisions.is_empty() {
            return Err(Error::invalid("teacher_ensemble", "empty ensemble"));
        }
        let teachers = precisions
            .iter()
            .enumerate()
            .map(|(i, &p)| Backbone::build(spec, p, scheme, store, &format!("teacher{i}"), rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Classifier::build(spec, store, "teachers", rng)?;
        let importance = ImportanceFactors::new(store, "teachers", precisions.len(), spec.fusion_indices.len())?;
        Ok(TeacherEnsemble {
            teachers,
            head,
            importance,
        })
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    pub fn spec(&self) -> &NetworkSpec {
        self.teachers[0].spec()
    }

    /// Segment-wise forward: at each fusion layer the teachers' outputs are
    /// mixed by `softmax(ρ)` and the mixture feeds every teacher's next
    /// segment. The shared head maps the last mixture to logits.
    pub fn collaborative_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
        train: bool,
        mode: QuantMode,
    ) -> Result<CollaborativeOutput> {
        let segments = self.teachers[0].segments();
        let mut fused = Vec::with_capacity(segments.len());
        let mut pre_fusion = Vec::with_capacity(segments.len());
        let mut cur = x;
        for (k, seg) in segments.into_iter().enumerate() {
            let mut acts = Vec::with_capacity(self.teachers.len());
            for t in &self.teachers {
                let outs = t.run(g, store, cur, seg.clone(), train, mode)?;
                acts.push(*outs.last().expect("segments are non-empty"));
            }
            let shape = g.shape(acts[0]).to_vec();
            if let Some(&bad) = acts.iter().find(|&&a| g.shape(a) != shape.as_slice()) {
                return Err(Error::shape("collaborative_forward", &shape, g.shape(bad)));
            }
            let rho = g.param(store, self.importance.logits_id(k));
            cur = g.fuse(rho, &acts)?;
            fused.push(cur);
            pre_fusion.push(acts);
        }
        let logits = self.head.forward(g, store, cur)?;
        Ok(CollaborativeOutput {
            fused,
            logits,
            pre_fusion,
        })
    }

    /// Teacher `i` run alone end to end, finished by the shared head.
    pub fn teacher_forward<T: Scalar>(
        &self,
        i: usize,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
        train: bool,
        mode: QuantMode,
    ) -> Result<ForwardOutput> {
        let t = self
            .teachers
            .get(i)
            .ok_or_else(|| Error::invalid("teacher_forward", format!("no teacher {i}")))?;
        let features = t.features(g, store, x, train, mode)?;
        let logits = self.head.forward(g, store, *features.last().expect("validated"))?;
        Ok(ForwardOutput { features, logits })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::tensor::Tensor;

    fn setup(precisions: &[Precision]) -> (TeacherEnsemble, ParamStore<f64>) {
        let spec = NetworkSpec::conv_blocks([1, 8, 8], &[4, 4, 4], 3);
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let e = TeacherEnsemble::build(&spec, precisions, Scheme::Hwgq, &mut store, &mut rng).unwrap();
        (e, store)
    }

    fn input(seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[4, 1, 8, 8], &mut rng)
    }

    #[test]
    fn one_hot_importance_reproduces_standalone_teacher() {
        let (e, mut store) = setup(&[Precision::Bits(2), Precision::Bits(4)]);
        for k in 0..e.importance.num_layers() {
            let id = e.importance.logits_id(k);
            store.value_mut(id).data_mut().copy_from_slice(&[-1e4, 0.0]);
        }
        let x = input(1);
        let mut g1 = Graph::new();
        let mut s1 = store.clone();
        let v = g1.constant(x.clone());
        let c = e.collaborative_forward(&mut g1, &mut s1, v, true, QuantMode::Quantize).unwrap();
        let mut g2 = Graph::new();
        let mut s2 = store.clone();
        let v = g2.constant(x);
        let t = e.teacher_forward(1, &mut g2, &mut s2, v, true, QuantMode::Quantize).unwrap();
        assert_eq!(g1.value(c.logits), g2.value(t.logits));
        for (a, b) in c.fused.iter().zip(&t.features) {
            assert_eq!(g1.value(*a), g2.value(*b));
        }
    }

    #[test]
    fn single_teacher_collapses() {
        let (e, mut store) = setup(&[Precision::Bits(2)]);
        let x = input(2);
        let mut g1 = Graph::new();
        let v = g1.constant(x.clone());
        let c = e.collaborative_forward(&mut g1, &mut store.clone(), v, true, QuantMode::Quantize).unwrap();
        let mut g2 = Graph::new();
        let v = g2.constant(x);
        let t = e.teacher_forward(0, &mut g2, &mut store, v, true, QuantMode::Quantize).unwrap();
        assert_eq!(g1.value(c.logits), g2.value(t.logits));
    }

    #[test]
    fn duplicate_teachers_fuse_to_either() {
        let (e, mut store) = setup(&[Precision::Bits(3), Precision::Bits(3)]);
        let names: Vec<String> = store
            .iter()
            .filter(|(_, p)| p.name.starts_with("teacher0."))
            .map(|(_, p)| p.name.clone())
            .collect();
        for n in names {
            let v = store.value(store.find(&n).unwrap()).clone();
            store.assign(&n.replacen("teacher0.", "teacher1.", 1), v).unwrap();
        }
        let mut g = Graph::new();
        let v = g.constant(input(3));
        let c = e.collaborative_forward(&mut g, &mut store, v, true, QuantMode::Quantize).unwrap();
        for (k, f) in c.fused.iter().enumerate() {
            let a = g.value(c.pre_fusion[k][0]);
            assert_eq!(g.value(c.pre_fusion[k][1]), a);
            assert!(g.value(*f).max_abs_diff(a) <= 1e-12);
        }
    }

    #[test]
    fn gradients_reach_every_teacher() {
        let (e, mut store) = setup(&[Precision::Bits(2), Precision::Bits(4), Precision::Bits(8)]);
        let mut g = Graph::new();
        let v = g.constant(input(4));
        let c = e.collaborative_forward(&mut g, &mut store, v, true, QuantMode::Quantize).unwrap();
        let l = g.softmax_cross_entropy(c.logits, &[0, 1, 2, 0]).unwrap();
        g.backward(l, &mut store).unwrap();
        for i in 0..3 {
            let id = store.find(&format!("teacher{i}.layer0.weight")).unwrap();
            assert!(store.grad(id).unwrap().data().iter().any(|&v| v != 0.0), "teacher {i}");
        }
    }

    #[test]
    fn empty_ensemble_is_rejected() {
        let spec = NetworkSpec::conv_blocks([1, 8, 8], &[4, 4, 4], 3);
        let mut store = ParamStore::<f64>::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert!(TeacherEnsemble::build(&spec, &[], Scheme::Hwgq, &mut store, &mut rng).is_err());
    }
}
