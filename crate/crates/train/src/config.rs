//! Experiment configuration, read from TOML.

use std::fmt;
use std::path::{Path, PathBuf};

use cmtkd_core::distill::FeatureLossKind;
use cmtkd_core::net::{LayerSpec, NetworkSpec};
use cmtkd_core::quant::{Precision, Scheme, MAX_BITS};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Student alone, cross-entropy only.
    Single,
    /// Student distilled from a pretrained full-precision network.
    KdFp,
    /// Student distilled from the averaged soft targets of pretrained teachers.
    AverageTeacher,
    Cmtkd,
    CmtkdNoAtt,
    CmtkdNoMl,
    /// Trains like `cmtkd`; model selection uses the combined teacher.
    CombinedTeacherEval,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::Single,
        Preset::KdFp,
        Preset::AverageTeacher,
        Preset::Cmtkd,
        Preset::CmtkdNoAtt,
        Preset::CmtkdNoMl,
        Preset::CombinedTeacherEval,
    ];

    /// Jointly trained teacher ensemble with fusion.
    pub fn collaborative(self) -> bool {
        matches!(
            self,
            Preset::Cmtkd | Preset::CmtkdNoAtt | Preset::CmtkdNoMl | Preset::CombinedTeacherEval
        )
    }

    pub fn feature_loss(self) -> bool {
        matches!(self, Preset::Cmtkd | Preset::CmtkdNoMl | Preset::CombinedTeacherEval)
    }

    pub fn mutual_learning(self) -> bool {
        matches!(self, Preset::Cmtkd | Preset::CmtkdNoAtt | Preset::CombinedTeacherEval)
    }

    /// Needs teachers trained before the student starts.
    pub fn pretrained_teachers(self) -> bool {
        matches!(self, Preset::KdFp | Preset::AverageTeacher)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        write!(f, "{}", s.as_str().expect("string"))
    }
}

/// A bit-width in config files: an integer, or `"fp"` for full precision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BitWidth(pub Precision);

impl Serialize for BitWidth {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.0 {
            Precision::Full => s.serialize_str("fp"),
            Precision::Bits(b) => s.serialize_u8(b),
        }
    }
}

impl<'de> Deserialize<'de> for BitWidth {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(b) if (1..=MAX_BITS as i64).contains(&b) => Ok(BitWidth(Precision::Bits(b as u8))),
            Raw::Int(32) => Ok(BitWidth(Precision::Full)),
            Raw::Str(s) if matches!(s.as_str(), "fp" | "full" | "fp32") => Ok(BitWidth(Precision::Full)),
            Raw::Int(b) => Err(serde::de::Error::custom(format!("bit-width {b} outside 1..={MAX_BITS}"))),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("unknown bit-width {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Step,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

/// Network shape. `widths` builds `(conv, conv, pool)` blocks; `layers`
/// gives the layer list explicitly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    #[serde(default)]
    pub widths: Option<Vec<usize>>,
    #[serde(default)]
    pub layers: Option<Vec<LayerSpec>>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            widths: Some(vec![8, 16, 16]),
            layers: None,
        }
    }
}

fn d_alpha() -> f64 {
    1.0
}
fn d_beta() -> f64 {
    0.5
}
fn d_temperature() -> f64 {
    4.0
}
fn d_momentum() -> f64 {
    0.9
}
fn d_pi_lr_scale() -> f64 {
    0.1
}
fn d_true() -> bool {
    true
}
fn d_eval_batch() -> usize {
    250
}
fn d_quantizer() -> Scheme {
    Scheme::Hwgq
}
fn d_feat() -> FeatureLossKind {
    FeatureLossKind::Attention
}
fn d_schedule() -> ScheduleKind {
    ScheduleKind::Cosine
}
fn d_dtype() -> Dtype {
    Dtype::F32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    #[serde(default)]
    pub teacher_bits: Vec<BitWidth>,
    pub student_bits: BitWidth,
    #[serde(default = "d_quantizer")]
    pub quantizer: Scheme,
    #[serde(default = "d_feat")]
    pub feat_loss: FeatureLossKind,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_beta")]
    pub beta: f64,
    /// Defaults to 100 for attention and 1 for FitNet.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "d_temperature")]
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    #[serde(default = "d_schedule")]
    pub schedule: ScheduleKind,
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    /// Learning-rate multiplier for importance logits.
    #[serde(default = "d_pi_lr_scale")]
    pub pi_lr_scale: f64,
    /// Overrides the fusion points implied by `arch`.
    #[serde(default)]
    pub fusion_indices: Option<Vec<usize>>,
    /// Directory holding `train.cmtd` and `test.cmtd`.
    pub data_path: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_dtype")]
    pub dtype: Dtype,
    #[serde(default = "d_true")]
    pub augment: bool,
    /// Epochs for pretraining fixed teachers (`kd_fp`, `average_teacher`);
    /// defaults to `epochs`.
    #[serde(default)]
    pub teacher_epochs: Option<usize>,
    #[serde(default = "d_eval_batch")]
    pub eval_batch_size: usize,
    #[serde(default)]
    pub arch: ArchConfig,
}

impl ExperimentConfig {
    /// Reads a config file; a relative `data_path` is resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let mut cfg = Self::from_toml(&text)?;
        if cfg.data_path.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data_path = dir.join(&cfg.data_path);
            }
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn gamma(&self) -> f64 {
        self.gamma.unwrap_or(match self.feat_loss {
            FeatureLossKind::Attention => 100.0,
            FeatureLossKind::FitNet => 1.0,
        })
    }

    pub fn teacher_precisions(&self) -> Vec<Precision> {
        self.teacher_bits.iter().map(|b| b.0).collect()
    }

    pub fn student_precision(&self) -> Precision {
        self.student_bits.0
    }

    pub fn teacher_epochs(&self) -> usize {
        self.teacher_epochs.unwrap_or(self.epochs)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma())] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 2 || self.eval_batch_size == 0 {
            return bad("batch_size must be at least 2 (batch norm)".into());
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) || !(self.pi_lr_scale >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !self.milestones.windows(2).all(|w| w[0] < w[1]) {
            return bad(format!("milestones {:?} must be strictly increasing", self.milestones));
        }
        if (self.preset.collaborative() || self.preset == Preset::AverageTeacher)
            && self.teacher_bits.is_empty() {
                return bad(format!("preset {} needs at least one teacher bit-width", self.preset));
            }
        if self.preset.collaborative() && self.teacher_bits.len() < 2 {
            log::warn!("a single teacher gives fusion nothing to weigh");
        }
        let student = self.student_precision().bits().unwrap_or(u8::MAX);
        for b in &self.teacher_bits {
            if b.0.bits().unwrap_or(u8::MAX) < student {
                log::warn!("teacher precision {} is below the student's {}", b.0, self.student_precision());
            }
        }
        if self.arch.widths.is_some() == self.arch.layers.is_some() {
            return bad("arch needs exactly one of `widths` or `layers`".into());
        }
        if self.arch.layers.is_some() && self.fusion_indices.is_none() {
            return bad("an explicit layer list needs `fusion_indices`".into());
        }
        Ok(())
    }

    /// Concrete architecture for inputs of shape `[C, H, W]` and `classes`.
    pub fn network_spec(&self, input: [usize; 3], classes: usize) -> Result<NetworkSpec> {
        let mut spec = match (&self.arch.widths, &self.arch.layers) {
            (Some(w), None) => NetworkSpec::conv_blocks(input, w, classes),
            (None, Some(layers)) => NetworkSpec {
                input,
                layers: layers.clone(),
                fusion_indices: Vec::new(),
                num_classes: classes,
            },
            _ => return Err(Error::Config("arch needs exactly one of `widths` or `layers`".into())),
        };
        if let Some(f) = &self.fusion_indices {
            spec.fusion_indices = f.clone();
        }
        spec.validate()?;
        Ok(spec)
    }
}
