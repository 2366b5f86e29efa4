//! One optimisation step and accuracy evaluation.

use cmtkd_core::quant::QuantMode;
use cmtkd_core::{Graph, ParamStore, Scalar, Tensor};

use crate::data::{sequential, Batch, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::model::{LossValues, Model};
use crate::optim::Sgd;

/// Steps in a row that may be skipped for non-finite values before aborting.
pub const MAX_CONSECUTIVE_SKIPS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: LossValues,
    /// `π` per fusion layer after the update (empty without an ensemble).
    pub pi: Vec<Vec<f64>>,
    pub grad_norm: f64,
    pub skipped: bool,
}

#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar> {
    pub model: Model,
    pub store: ParamStore<T>,
    pub opt: Sgd<T>,
    pub consecutive_skips: usize,
    pub total_skips: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model, store: ParamStore<T>, momentum: f64, pi_lr_scale: f64) -> Self {
        let hyper = model.hyper(&store, pi_lr_scale);
        Trainer {
            model,
            store,
            opt: Sgd::new(momentum, hyper),
            consecutive_skips: 0,
            total_skips: 0,
        }
    }

    pub fn pi_snapshot(&self) -> Vec<Vec<f64>> {
        self.model
            .ensemble
            .as_ref()
            .map(|e| e.importance.snapshot(&self.store))
            .unwrap_or_default()
    }

    /// Forward, backward and update on one batch. A non-finite loss or
    /// gradient leaves every parameter and buffer untouched.
    pub fn train_step(&mut self, batch: &Batch<T>, lr: f64) -> Result<StepReport> {
        let backup = self.store.clone();
        self.store.zero_grad();
        match self.forward_backward(batch) {
            Ok((loss, grad_norm)) if loss.total.is_finite() && grad_norm.is_finite() => {
                self.opt.step(&mut self.store, lr);
                self.consecutive_skips = 0;
                Ok(StepReport {
                    loss,
                    pi: self.pi_snapshot(),
                    grad_norm,
                    skipped: false,
                })
            }
            Ok(_) | Err(Error::Core(cmtkd_core::Error::NonFinite { .. })) => {
                self.store = backup;
                self.consecutive_skips += 1;
                self.total_skips += 1;
                log::warn!("non-finite loss or gradient; step skipped ({} in a row)", self.consecutive_skips);
                if self.consecutive_skips > MAX_CONSECUTIVE_SKIPS {
                    return Err(Error::Aborted(format!("{} consecutive non-finite steps", self.consecutive_skips)));
                }
                Ok(StepReport {
                    loss: LossValues {
                        total: f64::NAN,
                        ..Default::default()
                    },
                    pi: self.pi_snapshot(),
                    grad_norm: f64::NAN,
                    skipped: true,
                })
            }
            Err(e) => Err(e),
        }
    }

    fn forward_backward(&mut self, batch: &Batch<T>) -> Result<(LossValues, f64)> {
        let mut g = Graph::new();
        let x = g.constant(batch.images.clone());
        let parts = self
            .model
            .loss(&mut g, &mut self.store, x, &batch.labels, true, QuantMode::Quantize)?;
        g.backward(parts.total, &mut self.store)?;
        let sq: f64 = self
            .store
            .iter()
            .filter_map(|(_, p)| p.grad.as_ref())
            .flat_map(|t| t.data().iter().map(|v| v.as_f64().powi(2)))
            .sum();
        Ok((parts.values(&g), sq.sqrt()))
    }
}

/// Which logits are scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Student,
    CombinedTeacher,
}

/// Percentages in `[0, 100]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Accuracy {
    pub top1: f64,
    pub top5: f64,
    /// Fewer than five classes, so top-5 is trivially 100.
    pub top5_trivial: bool,
}

/// `(top-1 hit, top-k hit)` for one logit row. A tie with the label's
/// logit does not push the label down the ranking.
pub fn topk_hits<T: Scalar>(row: &[T], label: usize, k: usize) -> (bool, bool) {
    let target = row[label];
    let above = row.iter().filter(|&&v| v > target).count();
    (above == 0, above < k)
}

/// Counts `(top-1, top-5)` hits over a batch of logits.
pub fn count_hits<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (usize, usize) {
    let m = logits.shape()[1];
    let mut hits = (0, 0);
    for (row, &l) in logits.data().chunks(m).zip(labels) {
        let (a, b) = topk_hits(row, l, 5);
        hits.0 += a as usize;
        hits.1 += b as usize;
    }
    hits
}

/// Eval-mode accuracy of the chosen head on `data`.
pub fn evaluate<T: Scalar>(
    model: &Model,
    store: &mut ParamStore<T>,
    data: &Dataset,
    norm: &Normalization,
    batch_size: usize,
    head: Head,
) -> Result<Accuracy> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let (mut h1, mut h5) = (0, 0);
    for idx in sequential(data.len(), batch_size) {
        let batch = data.batch::<T>(&idx, norm, None)?;
        let mut g = Graph::inference();
        let x = g.constant(batch.images);
        let logits = match head {
            Head::Student => model.student.forward(&mut g, store, x, false, QuantMode::Quantize)?.logits,
            Head::CombinedTeacher => {
                let ens = model
                    .ensemble
                    .as_ref()
                    .ok_or_else(|| Error::Config("no teacher ensemble to evaluate".into()))?;
                ens.collaborative_forward(&mut g, store, x, false, QuantMode::Quantize)?.logits
            }
        };
        let (a, b) = count_hits(g.value(logits), &batch.labels);
        h1 += a;
        h5 += b;
    }
    let n = data.len() as f64;
    let top5_trivial = data.classes < 5;
    if top5_trivial {
        log::warn!("{} classes: top-5 accuracy is trivially 100%", data.classes);
    }
    Ok(Accuracy {
        top1: 100.0 * h1 as f64 / n,
        top5: 100.0 * h5 as f64 / n,
        top5_trivial,
    })
}
