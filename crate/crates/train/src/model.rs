//! Networks of one experiment and assembly of the weighted training loss.

use cmtkd_core::distill::FeatureDistiller;
use cmtkd_core::logits::{average_soft_targets, min_logit_ensemble};
use cmtkd_core::net::{Network, NetworkSpec, TeacherEnsemble};
use cmtkd_core::quant::{Precision, QuantMode, Scheme};
use cmtkd_core::{Graph, ParamStore, Scalar, Tensor, Var};

use crate::config::{ExperimentConfig, Preset};
use crate::error::{Error, Result};
use crate::optim::Hyper;
use crate::rng::stream;

pub const STUDENT_PREFIX: &str = "student";
pub const ADAPTER_PREFIX: &str = "distill";

/// Registry prefix of the `i`-th pretrained, frozen teacher.
pub fn fixed_prefix(i: usize) -> String {
    format!("fixed{i}")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub temperature: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        LossWeights {
            alpha: cfg.alpha,
            beta: cfg.beta,
            gamma: cfg.gamma(),
            temperature: cfg.temperature,
        }
    }

    /// `α(ce_S + ce_T) + β(kl_S + kl_T) + γ·feat` on plain numbers.
    pub fn combine(&self, v: &LossValues) -> f64 {
        self.alpha * (v.ce_s + v.ce_t) + self.beta * (v.kl_s + v.kl_t) + self.gamma * v.feat
    }
}

/// Graph nodes of every loss component. Components a preset excludes are
/// constant zeros.
#[derive(Clone, Debug)]
pub struct LossParts<T> {
    pub total: Var,
    pub ce_s: Var,
    pub ce_t: Var,
    pub kl_s: Var,
    pub kl_t: Var,
    pub feat: Var,
    pub student_logits: Var,
    pub teacher_logits: Option<Var>,
    /// The min-logit target used by the mutual terms.
    pub min_logit: Option<Tensor<T>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub ce_s: f64,
    pub ce_t: f64,
    pub kl_s: f64,
    pub kl_t: f64,
    pub feat: f64,
}

impl<T: Scalar> LossParts<T> {
    pub fn values(&self, g: &Graph<T>) -> LossValues {
        let v = |x: Var| g.value(x).item().as_f64();
        LossValues {
            total: v(self.total),
            ce_s: v(self.ce_s),
            ce_t: v(self.ce_t),
            kl_s: v(self.kl_s),
            kl_t: v(self.kl_t),
            feat: v(self.feat),
        }
    }
}

/// Everything trained (or consulted) in one run. All parameters live in a
/// single [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub preset: Preset,
    pub spec: NetworkSpec,
    pub student: Network,
    /// Jointly trained teachers (collaborative presets).
    pub ensemble: Option<TeacherEnsemble>,
    /// Pretrained teachers whose outputs are fixed targets.
    pub fixed: Vec<Network>,
    pub distiller: Option<FeatureDistiller>,
    pub weights: LossWeights,
}

impl Model {
    /// Registers every network of `cfg`'s preset. Initial values come from
    /// named sub-streams of `seed`, so the student's initialisation does not
    /// depend on which teachers exist.
    pub fn build<T: Scalar>(
        cfg: &ExperimentConfig,
        spec: &NetworkSpec,
        store: &mut ParamStore<T>,
        seed: u64,
    ) -> Result<Self> {
        let scheme = cfg.quantizer;
        let student = Network::build(
            spec,
            cfg.student_precision(),
            scheme,
            store,
            STUDENT_PREFIX,
            &mut stream(seed, "init.student"),
        )?;
        let ensemble = if cfg.preset.collaborative() {
            let mut rng = stream(seed, "init.teachers");
            Some(TeacherEnsemble::build(spec, &cfg.teacher_precisions(), scheme, store, &mut rng)?)
        } else {
            None
        };
        let distiller = if cfg.preset.feature_loss() {
            let channels = spec.fusion_channels()?;
            Some(FeatureDistiller::new(
                cfg.feat_loss,
                store,
                ADAPTER_PREFIX,
                &channels,
                &channels,
                cfg.student_precision(),
                &mut stream(seed, "init.adapters"),
            )?)
        } else {
            None
        };
        let fixed = Self::fixed_precisions(cfg)
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                let name = fixed_prefix(i);
                Network::build(spec, p, scheme, store, &name, &mut stream(seed, &format!("init.{name}")))
                    .map_err(Error::from)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Model {
            preset: cfg.preset,
            spec: spec.clone(),
            student,
            ensemble,
            fixed,
            distiller,
            weights: LossWeights::from_config(cfg),
        })
    }

    /// A lone network trained with cross-entropy, registered under `prefix`.
    pub fn standalone<T: Scalar>(
        spec: &NetworkSpec,
        precision: Precision,
        scheme: Scheme,
        prefix: &str,
        store: &mut ParamStore<T>,
        seed: u64,
    ) -> Result<Self> {
        let student = Network::build(spec, precision, scheme, store, prefix, &mut stream(seed, &format!("init.{prefix}")))?;
        Ok(Model {
            preset: Preset::Single,
            spec: spec.clone(),
            student,
            ensemble: None,
            fixed: Vec::new(),
            distiller: None,
            weights: LossWeights {
                alpha: 1.0,
                beta: 0.0,
                gamma: 0.0,
                temperature: 1.0,
            },
        })
    }

    /// Precisions of the pretrained teachers a preset consults.
    pub fn fixed_precisions(cfg: &ExperimentConfig) -> Vec<Precision> {
        match cfg.preset {
            Preset::KdFp => vec![Precision::Full],
            Preset::AverageTeacher => cfg.teacher_precisions(),
            _ => Vec::new(),
        }
    }

    /// Optimizer groups: pretrained teachers are frozen, the rest follows
    /// [`Hyper::default_for`].
    pub fn hyper<T: Scalar>(&self, store: &ParamStore<T>, pi_lr_scale: f64) -> Vec<Hyper> {
        let frozen: Vec<String> = (0..self.fixed.len()).map(|i| format!("{}.", fixed_prefix(i))).collect();
        store
            .iter()
            .map(|(_, p)| {
                if frozen.iter().any(|f| p.name.starts_with(f.as_str())) {
                    Hyper::FROZEN
                } else {
                    Hyper::default_for(p, pi_lr_scale)
                }
            })
            .collect()
    }

    pub fn set_lsq_grad_scaling(&mut self, on: bool) {
        let ens = self.ensemble.iter_mut().flat_map(|e| e.teachers.iter_mut());
        let fixed = self.fixed.iter_mut().map(|n| &mut n.backbone);
        for b in std::iter::once(&mut self.student.backbone).chain(ens).chain(fixed) {
            b.quantizers_mut().for_each(|q| q.set_lsq_grad_scaling(on));
        }
    }

    /// Soft targets from the pretrained teachers, evaluated in inference mode.
    fn fixed_targets<T: Scalar>(&self, store: &mut ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut logits = Vec::with_capacity(self.fixed.len());
        for net in &self.fixed {
            let mut g = Graph::inference();
            let v = g.constant(x.clone());
            let out = net.forward(&mut g, store, v, false, QuantMode::Quantize)?;
            logits.push(g.value(out.logits).clone());
        }
        let refs: Vec<&Tensor<T>> = logits.iter().collect();
        Ok(average_soft_targets(&refs, T::of(self.weights.temperature))?)
    }

    /// Records the full loss on `g` for input `x` (`[N, C, H, W]`).
    pub fn loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
        labels: &[usize],
        train: bool,
        mode: QuantMode,
    ) -> Result<LossParts<T>> {
        self.loss_with_target(g, store, x, labels, train, mode, None)
    }

    /// As [`Model::loss`], but a given `zbar` replaces the min-logit target.
    /// The target never carries gradient, so holding it fixed lets finite
    /// differences see the same function backward differentiates.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_with_target<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
        labels: &[usize],
        train: bool,
        mode: QuantMode,
        zbar: Option<&Tensor<T>>,
    ) -> Result<LossParts<T>> {
        let w = self.weights;
        let temp = T::of(w.temperature);
        let student = self.student.forward(g, store, x, train, mode)?;
        let zs = student.logits;
        let ce_s = g.softmax_cross_entropy(zs, labels)?;
        let zero = g.constant(Tensor::scalar(T::zero()));
        let (mut ce_t, mut kl_s, mut kl_t, mut feat) = (zero, zero, zero, zero);
        let mut teacher_logits = None;
        let mut min_logit = None;
        if !self.fixed.is_empty() {
            let input = g.value(x).clone();
            let target = self.fixed_targets(store, &input)?;
            kl_s = g.soft_kl(zs, &target, temp)?;
        }
        if let Some(ens) = &self.ensemble {
            let c = ens.collaborative_forward(g, store, x, train, mode)?;
            teacher_logits = Some(c.logits);
            ce_t = g.softmax_cross_entropy(c.logits, labels)?;
            if self.preset.mutual_learning() {
                let target = match zbar {
                    Some(t) => t.clone(),
                    None => min_logit_ensemble(g.value(c.logits), g.value(zs), labels)?,
                };
                (kl_t, kl_s) = g.mutual_kl_losses(&target, c.logits, zs, temp)?;
                min_logit = Some(target);
            }
            if let Some(d) = &self.distiller {
                feat = d.feature_distill_loss(g, store, &c.fused, &student.features)?;
            }
        }
        let (a, b, c) = (T::of(w.alpha), T::of(w.beta), T::of(w.gamma));
        let total = g.weighted_sum(&[(ce_s, a), (ce_t, a), (kl_s, b), (kl_t, b), (feat, c)])?;
        Ok(LossParts {
            total,
            ce_s,
            ce_t,
            kl_s,
            kl_t,
            feat,
            student_logits: zs,
            teacher_logits,
            min_logit,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(preset: &str, teachers: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml(&format!(
            r#"
            preset = "{preset}"
            teacher_bits = {teachers}
            student_bits = 2
            epochs = 1
            batch_size = 4
            base_lr = 0.1
            data_path = "."
            [arch]
            widths = [4, 4]
            "#
        ))
        .unwrap()
    }

    fn run(c: &ExperimentConfig) -> (LossValues, usize) {
        let spec = c.network_spec([1, 8, 8], 3).unwrap();
        let mut store = ParamStore::<f64>::new();
        let model = Model::build(c, &spec, &mut store, 5).unwrap();
        let mut rng = stream(1, "x");
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[4, 1, 8, 8], &mut rng));
        let parts = model.loss(&mut g, &mut store, x, &[0, 1, 2, 1], true, QuantMode::Quantize).unwrap();
        (parts.values(&g), store.len())
    }

    #[test]
    fn presets_isolate_components() {
        let (v, _) = run(&cfg("single", "[]"));
        assert_eq!((v.ce_t, v.kl_s, v.kl_t, v.feat), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(v.total, v.ce_s);
        let (v, _) = run(&cfg("cmtkd_no_ml", "[4, 8]"));
        assert_eq!((v.kl_s, v.kl_t), (0.0, 0.0));
        assert!(v.feat > 0.0 && v.ce_t > 0.0);
        let (v, _) = run(&cfg("cmtkd_no_att", "[4, 8]"));
        assert_eq!(v.feat, 0.0);
        assert!(v.kl_s > 0.0 && v.kl_t > 0.0);
        let (v, _) = run(&cfg("average_teacher", "[4, 8]"));
        assert!(v.kl_s > 0.0);
        assert_eq!((v.ce_t, v.kl_t, v.feat), (0.0, 0.0, 0.0));
    }

    #[test]
    fn total_matches_weighted_components() {
        for preset in ["cmtkd", "cmtkd_no_att", "cmtkd_no_ml", "kd_fp", "single"] {
            let c = cfg(preset, "[4, 8]");
            let (v, _) = run(&c);
            let w = LossWeights::from_config(&c);
            assert!((v.total - w.combine(&v)).abs() <= 1e-9 * v.total.abs().max(1.0), "{preset}");
        }
    }

    #[test]
    fn fixed_teachers_are_frozen() {
        let c = cfg("kd_fp", "[]");
        let spec = c.network_spec([1, 8, 8], 3).unwrap();
        let mut store = ParamStore::<f64>::new();
        let model = Model::build(&c, &spec, &mut store, 1).unwrap();
        let hyper = model.hyper(&store, 0.1);
        for (id, p) in store.iter() {
            if p.name.starts_with("fixed0.") {
                assert_eq!(hyper[id.index()], Hyper::FROZEN, "{}", p.name);
            }
        }
        assert!(store.find("fixed0.head.weight").is_some());
    }

    #[test]
    fn combine_arithmetic() {
        let w = LossWeights {
            alpha: 1.0,
            beta: 0.5,
            gamma: 100.0,
            temperature: 4.0,
        };
        let v = LossValues {
            total: 0.0,
            ce_s: 1.0,
            ce_t: 2.0,
            kl_s: 3.0,
            kl_t: 4.0,
            feat: 0.05,
        };
        assert!((w.combine(&v) - 11.5).abs() < 1e-12);
    }
}
