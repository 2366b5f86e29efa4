//! Per-step CSV logs: loss components and accuracies, and importance factors.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LossValues;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    #[serde(rename = "ce_S")]
    pub ce_s: f64,
    #[serde(rename = "ce_T")]
    pub ce_t: f64,
    #[serde(rename = "kl_S")]
    pub kl_s: f64,
    #[serde(rename = "kl_T")]
    pub kl_t: f64,
    pub feat: f64,
    /// Filled on the last step of each epoch.
    pub top1_student: Option<f64>,
    pub top5_student: Option<f64>,
    pub top1_combined_teacher: Option<f64>,
}

impl MetricsRow {
    pub fn new(step: usize, epoch: usize, lr: f64, loss: &LossValues) -> Self {
        MetricsRow {
            step,
            epoch,
            lr,
            loss_total: loss.total,
            ce_s: loss.ce_s,
            ce_t: loss.ce_t,
            kl_s: loss.kl_s,
            kl_t: loss.kl_t,
            feat: loss.feat,
            top1_student: None,
            top5_student: None,
            top1_combined_teacher: None,
        }
    }

    pub fn loss(&self) -> LossValues {
        LossValues {
            total: self.loss_total,
            ce_s: self.ce_s,
            ce_t: self.ce_t,
            kl_s: self.kl_s,
            kl_t: self.kl_t,
            feat: self.feat,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiRow {
    pub step: usize,
    pub layer_index: usize,
    pub teacher_index: usize,
    pub pi_value: f64,
}

pub struct MetricsWriter {
    metrics: csv::Writer<File>,
    pi: csv::Writer<File>,
    /// Network layer index of each fusion point.
    fusion_layers: Vec<usize>,
}

impl MetricsWriter {
    pub fn create(metrics: &Path, pi: &Path, fusion_layers: Vec<usize>) -> Result<Self> {
        let open = |p: &Path| File::create(p).map(csv::Writer::from_writer).map_err(Error::io(p));
        let mut w = MetricsWriter {
            metrics: open(metrics)?,
            pi: open(pi)?,
            fusion_layers,
        };
        // Headers must exist even for runs without an ensemble.
        w.pi.write_record(["step", "layer_index", "teacher_index", "pi_value"])?;
        Ok(w)
    }

    pub fn write_step(&mut self, row: &MetricsRow) -> Result<()> {
        self.metrics.serialize(row)?;
        Ok(())
    }

    pub fn write_pi(&mut self, step: usize, pi: &[Vec<f64>]) -> Result<()> {
        for (k, layer) in pi.iter().enumerate() {
            for (i, &v) in layer.iter().enumerate() {
                let row = PiRow {
                    step,
                    layer_index: self.fusion_layers[k],
                    teacher_index: i,
                    pi_value: v,
                };
                self.pi.write_record([
                    row.step.to_string(),
                    row.layer_index.to_string(),
                    row.teacher_index.to_string(),
                    format!("{:?}", row.pi_value),
                ])?;
            }
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.metrics.flush().map_err(|e| Error::Csv(e.into()))?;
        self.pi.flush().map_err(|e| Error::Csv(e.into()))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn read_pi(path: &Path) -> Result<Vec<PiRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
