//! End-to-end runs: training with logging and checkpoints, and checkpoint
//! evaluation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use cmtkd_core::{ParamStore, Scalar};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_header, Checkpoint, Header, RecordedMetrics};
use crate::config::{Dtype, ExperimentConfig, Preset};
use crate::data::{epoch_order, Augment, Dataset, Normalization, Splits};
use crate::error::{Error, Result};
use crate::metrics::{MetricsRow, MetricsWriter};
use crate::model::{fixed_prefix, Model};
use crate::optim::Schedule;
use crate::rng::{stream, RngState};
use crate::trainer::{evaluate, Accuracy, Head, StepReport, Trainer};

pub const METRICS_FILE: &str = "metrics.csv";
pub const PI_FILE: &str = "pi.csv";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.toml";

/// Passed to the per-step hook of [`train_epochs`].
pub struct StepEvent<'a, T: Scalar> {
    pub trainer: &'a mut Trainer<T>,
    /// 1-based count of optimisation steps taken so far.
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub report: StepReport,
    pub epoch_end: bool,
    pub order: &'a ChaCha8Rng,
    pub augment: &'a ChaCha8Rng,
}

/// Data and schedule shared by every training loop of a run.
pub struct LoopSettings<'a> {
    pub train: &'a Dataset,
    pub norm: &'a Normalization,
    pub batch_size: usize,
    pub augment: bool,
    pub schedule: Schedule,
}

/// Runs `schedule.epochs` epochs. Batch order and augmentation draw from
/// the streams `{prefix}.order` and `{prefix}.augment` of `seed`.
pub fn train_epochs<T: Scalar>(
    trainer: &mut Trainer<T>,
    settings: &LoopSettings<'_>,
    seed: u64,
    prefix: &str,
    mut hook: impl FnMut(StepEvent<'_, T>) -> Result<()>,
) -> Result<usize> {
    let mut order = stream(seed, &format!("{prefix}.order"));
    let mut aug_rng = stream(seed, &format!("{prefix}.augment"));
    let mut step = 0;
    for epoch in 0..settings.schedule.epochs {
        let batches = epoch_order(settings.train.len(), settings.batch_size, &mut order);
        if batches.is_empty() {
            return Err(Error::Data("training split too small for one batch".into()));
        }
        let n = batches.len();
        for (b, idx) in batches.iter().enumerate() {
            let aug: Option<Vec<Augment>> = settings
                .augment
                .then(|| idx.iter().map(|_| Augment::sample(&mut aug_rng)).collect());
            let batch = settings.train.batch::<T>(idx, settings.norm, aug.as_deref())?;
            let lr = settings.schedule.lr(epoch as f64 + b as f64 / n as f64);
            let report = trainer.train_step(&batch, lr)?;
            step += 1;
            hook(StepEvent {
                trainer,
                step,
                epoch,
                lr,
                report,
                epoch_end: b + 1 == n,
                order: &order,
                augment: &aug_rng,
            })?;
        }
    }
    Ok(step)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub preset: Preset,
    pub seed: u64,
    pub steps: usize,
    pub skipped_steps: usize,
    pub best_epoch: usize,
    /// Accuracies recorded alongside the best checkpoint.
    pub best: RecordedMetrics,
    pub final_top1_student: f64,
    pub final_top5_student: f64,
    pub final_top1_combined_teacher: Option<f64>,
    pub seconds: f64,
}

fn schedule(cfg: &ExperimentConfig, epochs: usize) -> Schedule {
    Schedule {
        kind: cfg.schedule,
        base_lr: cfg.base_lr,
        epochs,
        milestones: cfg.milestones.clone(),
    }
}

/// Trains each pretrained teacher with cross-entropy and copies its values
/// into `store`.
fn pretrain_fixed<T: Scalar>(
    cfg: &ExperimentConfig,
    model: &Model,
    splits: &Splits,
    norm: &Normalization,
    store: &mut ParamStore<T>,
) -> Result<()> {
    for (i, net) in model.fixed.iter().enumerate() {
        let prefix = fixed_prefix(i);
        let mut s = ParamStore::new();
        let solo = Model::standalone(&model.spec, net.backbone.precision(), cfg.quantizer, &prefix, &mut s, cfg.seed)?;
        let mut tr = Trainer::new(solo, s, cfg.momentum, cfg.pi_lr_scale);
        let settings = LoopSettings {
            train: &splits.train,
            norm,
            batch_size: cfg.batch_size,
            augment: cfg.augment,
            schedule: schedule(cfg, cfg.teacher_epochs()),
        };
        train_epochs(&mut tr, &settings, cfg.seed, &format!("pretrain.{prefix}"), |_| Ok(()))?;
        let acc = evaluate(&tr.model, &mut tr.store, &splits.test, norm, cfg.eval_batch_size, Head::Student)?;
        log::info!("pretrained teacher {i} ({}): top-1 {:.2}%", net.backbone.precision(), acc.top1);
        for (_, p) in tr.store.iter() {
            store.assign(&p.name, p.value.clone())?;
        }
    }
    Ok(())
}

fn score(preset: Preset, m: &RecordedMetrics) -> f64 {
    match (preset, m.top1_combined_teacher) {
        (Preset::CombinedTeacherEval, Some(t)) => t,
        _ => m.top1_student,
    }
}

/// Trains `cfg` on `splits`, writing logs, the best checkpoint and a summary
/// into `out`.
pub fn run_with_splits<T: Scalar>(cfg: &ExperimentConfig, splits: &Splits, out: &Path) -> Result<RunSummary> {
    let start = Instant::now();
    std::fs::create_dir_all(out).map_err(Error::io(out))?;
    let config_path = out.join(CONFIG_FILE);
    std::fs::write(&config_path, cfg.to_toml()).map_err(Error::io(&config_path))?;
    let input = splits.train.input_shape();
    let spec = cfg.network_spec(input, splits.train.classes)?;
    let norm = Normalization::fit(&splits.train)?;
    let mut store = ParamStore::<T>::new();
    let model = Model::build(cfg, &spec, &mut store, cfg.seed)?;
    if !model.fixed.is_empty() {
        pretrain_fixed(cfg, &model, splits, &norm, &mut store)?;
    }
    let has_teacher = model.ensemble.is_some();
    let mut trainer = Trainer::new(model, store, cfg.momentum, cfg.pi_lr_scale);
    let mut writer = MetricsWriter::create(&out.join(METRICS_FILE), &out.join(PI_FILE), spec.fusion_indices.clone())?;
    writer.write_pi(0, &trainer.pi_snapshot())?;
    let settings = LoopSettings {
        train: &splits.train,
        norm: &norm,
        batch_size: cfg.batch_size,
        augment: cfg.augment,
        schedule: schedule(cfg, cfg.epochs),
    };
    let mut best: Option<(usize, RecordedMetrics)> = None;
    let mut last = (Accuracy { top1: 0.0, top5: 0.0, top5_trivial: false }, None::<Accuracy>);
    let steps = train_epochs(&mut trainer, &settings, cfg.seed, "data", |ev| {
        let mut row = MetricsRow::new(ev.step, ev.epoch, ev.lr, &ev.report.loss);
        writer.write_pi(ev.step, &ev.report.pi)?;
        if ev.epoch_end {
            let tr = ev.trainer;
            let bs = cfg.eval_batch_size;
            let student = evaluate(&tr.model, &mut tr.store, &splits.test, &norm, bs, Head::Student)?;
            let teacher = if has_teacher {
                Some(evaluate(&tr.model, &mut tr.store, &splits.test, &norm, bs, Head::CombinedTeacher)?)
            } else {
                None
            };
            row.top1_student = Some(student.top1);
            row.top5_student = Some(student.top5);
            row.top1_combined_teacher = teacher.map(|t| t.top1);
            log::info!(
                "epoch {} step {}: loss {:.4}, student top-1 {:.2}%{}",
                ev.epoch,
                ev.step,
                ev.report.loss.total,
                student.top1,
                teacher.map(|t| format!(", combined teacher top-1 {:.2}%", t.top1)).unwrap_or_default()
            );
            let metrics = RecordedMetrics {
                top1_student: student.top1,
                top5_student: student.top5,
                top1_combined_teacher: teacher.map(|t| t.top1),
                top5_combined_teacher: teacher.map(|t| t.top5),
            };
            if best.as_ref().is_none_or(|(_, b)| score(cfg.preset, &metrics) > score(cfg.preset, b)) {
                let header = Header {
                    config: cfg.to_toml(),
                    dtype: cfg.dtype,
                    epoch: ev.epoch,
                    step: ev.step,
                    input,
                    classes: splits.train.classes,
                    normalization: norm.clone(),
                    rng_order: RngState::capture(ev.order),
                    rng_augment: RngState::capture(ev.augment),
                    metrics,
                    arrays: Vec::new(),
                };
                Checkpoint::capture(header, &tr.store).save(&out.join(CHECKPOINT_FILE))?;
                best = Some((ev.epoch, metrics));
            }
            last = (student, teacher);
        }
        writer.write_step(&row)?;
        if ev.epoch_end {
            writer.flush()?;
        }
        Ok(())
    })?;
    writer.flush()?;
    let (best_epoch, best) = best.expect("at least one epoch ran");
    let summary = RunSummary {
        preset: cfg.preset,
        seed: cfg.seed,
        steps,
        skipped_steps: trainer.total_skips,
        best_epoch,
        best,
        final_top1_student: last.0.top1,
        final_top5_student: last.0.top5,
        final_top1_combined_teacher: last.1.map(|t| t.top1),
        seconds: start.elapsed().as_secs_f64(),
    };
    let report_path = out.join(REPORT_FILE);
    let json = serde_json::to_string_pretty(&summary).expect("summary serialises");
    std::fs::write(&report_path, json).map_err(Error::io(&report_path))?;
    Ok(summary)
}

/// Loads the configured data and trains at the configured scalar type.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let splits = Splits::load(&cfg.data_path)?;
    match cfg.dtype {
        Dtype::F32 => run_with_splits::<f32>(cfg, &splits, out),
        Dtype::F64 => run_with_splits::<f64>(cfg, &splits, out),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1_student: f64,
    pub top5_student: f64,
    pub top1_combined_teacher: Option<f64>,
    pub top5_combined_teacher: Option<f64>,
    pub top5_trivial: bool,
    pub recorded: RecordedMetrics,
}

impl EvalReport {
    /// Whether the evaluation reproduces the recorded accuracies exactly.
    pub fn matches_recorded(&self) -> bool {
        self.top1_student == self.recorded.top1_student
            && self.top5_student == self.recorded.top5_student
            && self.top1_combined_teacher == self.recorded.top1_combined_teacher
            && self.top5_combined_teacher == self.recorded.top5_combined_teacher
    }
}

fn evaluate_typed<T: Scalar>(bytes: &[u8], test: &Dataset) -> Result<EvalReport> {
    let ck = Checkpoint::<T>::from_bytes(bytes)?;
    let h = &ck.header;
    let cfg = ExperimentConfig::from_toml(&h.config)?;
    if (test.input_shape(), test.classes) != (h.input, h.classes) {
        return Err(Error::Data("evaluation data does not match the checkpoint's input shape".into()));
    }
    let spec = cfg.network_spec(h.input, h.classes)?;
    let mut store = ParamStore::<T>::new();
    let model = Model::build(&cfg, &spec, &mut store, cfg.seed)?;
    ck.restore(&mut store)?;
    let bs = cfg.eval_batch_size;
    let s = evaluate(&model, &mut store, test, &h.normalization, bs, Head::Student)?;
    let t = match model.ensemble {
        Some(_) => Some(evaluate(&model, &mut store, test, &h.normalization, bs, Head::CombinedTeacher)?),
        None => None,
    };
    Ok(EvalReport {
        top1_student: s.top1,
        top5_student: s.top5,
        top1_combined_teacher: t.map(|a| a.top1),
        top5_combined_teacher: t.map(|a| a.top5),
        top5_trivial: s.top5_trivial,
        recorded: h.metrics,
    })
}

/// Evaluates a checkpoint on `data`: a dataset file, or a directory whose
/// test split is used.
pub fn evaluate_checkpoint(checkpoint: &Path, data: &Path) -> Result<EvalReport> {
    let bytes = std::fs::read(checkpoint).map_err(Error::io(checkpoint))?;
    let (header, _) = read_header(&bytes)?;
    let test_path: PathBuf = if data.is_dir() { Splits::test_path(data) } else { data.to_path_buf() };
    let test = Dataset::load(&test_path)?;
    match header.dtype {
        Dtype::F32 => evaluate_typed::<f32>(&bytes, &test),
        Dtype::F64 => evaluate_typed::<f64>(&bytes, &test),
    }
}
