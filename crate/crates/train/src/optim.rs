//! SGD with momentum, per-parameter hyper-parameters and learning-rate schedules.

use cmtkd_core::quant::Precision;
use cmtkd_core::{Param, ParamRole, ParamStore, Scalar, Tensor};

use crate::config::ScheduleKind;

/// Weight decay for weights of a network at `precision`.
pub fn weight_decay_for(precision: Precision) -> f64 {
    match precision.bits() {
        Some(b) if b <= 2 => 25e-6,
        _ => 1e-4,
    }
}

/// Per-parameter multipliers. `lr_scale = 0` freezes the entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hyper {
    pub lr_scale: f64,
    pub weight_decay: f64,
}

impl Hyper {
    pub const FROZEN: Hyper = Hyper {
        lr_scale: 0.0,
        weight_decay: 0.0,
    };

    /// Default grouping: weights, biases and adapters decay according to the
    /// owning network's precision; importance logits train at `pi_lr_scale`;
    /// BN affine terms and step sizes do not decay; buffers never train.
    pub fn default_for<T>(p: &Param<T>, pi_lr_scale: f64) -> Self {
        match p.role {
            ParamRole::Buffer => Hyper::FROZEN,
            ParamRole::Weight | ParamRole::Bias | ParamRole::Adapter => Hyper {
                lr_scale: 1.0,
                weight_decay: weight_decay_for(p.precision),
            },
            ParamRole::Importance => Hyper {
                lr_scale: pi_lr_scale,
                weight_decay: 0.0,
            },
            ParamRole::BnScale | ParamRole::BnShift | ParamRole::StepSize => Hyper {
                lr_scale: 1.0,
                weight_decay: 0.0,
            },
        }
    }
}

/// Smallest learned step size kept after an update.
pub const MIN_STEP_SIZE: f64 = 1e-8;

/// `g ← g + λw;  v ← μv + g;  w ← w − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    hyper: Vec<Hyper>,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, hyper: Vec<Hyper>) -> Self {
        let n = hyper.len();
        Sgd {
            momentum,
            hyper,
            velocity: vec![None; n],
        }
    }

    pub fn hyper(&self) -> &[Hyper] {
        &self.hyper
    }

    /// Applies one update; entries without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        assert_eq!(store.len(), self.hyper.len(), "optimizer built for another store");
        let mu = T::of(self.momentum);
        for (id, p) in store.iter_mut() {
            let h = self.hyper[id.index()];
            if h.lr_scale == 0.0 {
                continue;
            }
            let Some(grad) = &p.grad else { continue };
            let wd = T::of(h.weight_decay);
            let g = grad.zip_map(&p.value, |g, w| g + wd * w).expect("grad matches value");
            let v = match self.velocity[id.index()].take() {
                Some(v) => v.zip_map(&g, |v, g| mu * v + g).expect("velocity matches value"),
                None => g,
            };
            let step = T::of(lr * h.lr_scale);
            for (w, &dv) in p.value.data_mut().iter_mut().zip(v.data()) {
                *w -= step * dv;
            }
            if p.role == ParamRole::StepSize {
                let floor = T::of(MIN_STEP_SIZE);
                p.value.data_mut().iter_mut().for_each(|s| *s = s.max(floor));
            }
            self.velocity[id.index()] = Some(v);
        }
    }
}

/// Learning rate at a (possibly fractional) epoch position.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub epochs: usize,
    pub milestones: Vec<usize>,
}

impl Schedule {
    pub fn lr(&self, epoch: f64) -> f64 {
        match self.kind {
            ScheduleKind::Step => {
                let passed = self.milestones.iter().filter(|&&m| epoch >= m as f64).count();
                self.base_lr / 10f64.powi(passed as i32)
            }
            ScheduleKind::Cosine => {
                self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch / self.epochs as f64).cos())
            }
        }
    }
}
