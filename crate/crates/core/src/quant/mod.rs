//! Low bit-width quantizers for weights and activations.
//!
//! Two schemes are provided: HWGQ, which snaps onto σ-scaled precomputed
//! Gaussian-optimal levels, and LSQ, whose step size is a trained parameter.
//! Activation quantizers are half-wave (they subsume the ReLU); weight
//! quantizers are full-wave.

mod hwgq;
mod levels;
mod lsq;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use hwgq::{hwgq_backward, hwgq_forward, ste_range, tensor_std};
pub use levels::{design_gaussian_levels, gaussian_mse, GaussianLevels, MAX_BITS};
pub use lsq::{lsq_bounds, lsq_grad_scale, LsqOptions};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Numeric precision of a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Precision {
    Full,
    Bits(u8),
}

impl Precision {
    pub fn bits(self) -> Option<u8> {
        match self {
            Precision::Full => None,
            Precision::Bits(b) => Some(b),
        }
    }

    pub fn is_full(self) -> bool {
        self == Precision::Full
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::Full => write!(f, "fp"),
            Precision::Bits(b) => write!(f, "{b}-bit"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Hwgq,
    Lsq,
}

/// How quantizers behave during a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum QuantMode {
    #[default]
    Quantize,
    /// Every quantizer becomes its unquantized counterpart (ReLU for
    /// activations, identity for weights).
    Identity,
    /// LSQ skips rounding but keeps its clip rails and step size, so its
    /// step-size gradient becomes exact. HWGQ behaves as in `Identity`.
    Relaxed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantRole {
    Weight,
    Activation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantizerSpec {
    pub scheme: Scheme,
    pub bits: u8,
    pub half_wave: bool,
}

#[derive(Clone, Debug)]
pub enum QuantKind {
    FullPrecision,
    Hwgq(Arc<GaussianLevels>),
    Lsq {
        step: ParamId,
        qn: i64,
        qp: i64,
        scale_grad: bool,
    },
}

/// A quantizer attached to one tensor of one layer.
#[derive(Clone, Debug)]
pub struct Quantizer {
    pub role: QuantRole,
    pub kind: QuantKind,
}

impl Quantizer {
    pub fn full_precision(role: QuantRole) -> Self {
        Quantizer {
            role,
            kind: QuantKind::FullPrecision,
        }
    }

    /// Builds the quantizer for `role` at `precision`. LSQ registers its step
    /// size under `name`, initialised from the Gaussian-optimal step scaled
    /// by `init_std`.
    pub fn build<T: Scalar>(
        role: QuantRole,
        precision: Precision,
        scheme: Scheme,
        store: &mut ParamStore<T>,
        name: &str,
        init_std: f64,
    ) -> Result<Self> {
        let Some(bits) = precision.bits() else {
            return Ok(Self::full_precision(role));
        };
        let half_wave = role == QuantRole::Activation;
        let kind = match scheme {
            Scheme::Hwgq => QuantKind::Hwgq(design_gaussian_levels(bits, half_wave)?),
            Scheme::Lsq => {
                let design = design_gaussian_levels(bits, half_wave)?;
                let init = design.step * init_std.max(1e-3);
                let step = store.add(name, Tensor::scalar(T::of(init)), ParamRole::StepSize, precision)?;
                let (qn, qp) = lsq_bounds(bits, !half_wave);
                QuantKind::Lsq {
                    step,
                    qn,
                    qp,
                    scale_grad: true,
                }
            }
        };
        Ok(Quantizer { role, kind })
    }

    pub fn half_wave(&self) -> bool {
        self.role == QuantRole::Activation
    }

    pub fn spec(&self) -> Option<QuantizerSpec> {
        match &self.kind {
            QuantKind::FullPrecision => None,
            QuantKind::Hwgq(l) => Some(QuantizerSpec {
                scheme: Scheme::Hwgq,
                bits: l.bits,
                half_wave: l.half_wave,
            }),
            QuantKind::Lsq { qn, qp, .. } => Some(QuantizerSpec {
                scheme: Scheme::Lsq,
                bits: ((qp - qn + 1) as f64).log2().round() as u8,
                half_wave: self.half_wave(),
            }),
        }
    }

    fn passthrough<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        if self.half_wave() {
            g.relu(x)
        } else {
            Ok(x)
        }
    }

    pub fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: QuantMode,
    ) -> Result<Var> {
        match (&self.kind, mode) {
            (QuantKind::FullPrecision, _) | (_, QuantMode::Identity) => self.passthrough(g, x),
            (QuantKind::Hwgq(_), QuantMode::Relaxed) => self.passthrough(g, x),
            (QuantKind::Hwgq(levels), QuantMode::Quantize) => g.hwgq(x, levels),
            (QuantKind::Lsq { step, qn, qp, scale_grad }, _) => {
                let shape = g.shape(x);
                let count = match self.role {
                    QuantRole::Weight => shape.iter().product(),
                    QuantRole::Activation => shape[1..].iter().product(),
                };
                let grad_scale = if *scale_grad { lsq_grad_scale(count, *qp) } else { 1.0 };
                let s = g.param(store, *step);
                let opts = LsqOptions {
                    qn: *qn,
                    qp: *qp,
                    grad_scale,
                    round: mode == QuantMode::Quantize,
                };
                g.lsq(x, s, opts)
            }
        }
    }

    /// Turns the LSQ gradient scale on or off. No-op for other kinds.
    pub fn set_lsq_grad_scaling(&mut self, on: bool) {
        if let QuantKind::Lsq { scale_grad, .. } = &mut self.kind {
            *scale_grad = on;
        }
    }
}

/// Which weighted layers (convolutions, then the classifier head) quantize
/// their weights and their output activations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerPlan {
    pub weights: Vec<bool>,
    pub activations: Vec<bool>,
}

impl LayerPlan {
    /// First and last layers keep full-precision weights; every convolution
    /// output is quantized; the logits are not.
    pub fn standard(num_conv: usize) -> Self {
        let total = num_conv + 1;
        LayerPlan {
            weights: (0..total).map(|l| l != 0 && l != total - 1).collect(),
            activations: (0..total).map(|l| l < num_conv).collect(),
        }
    }

    pub fn full_precision(num_conv: usize) -> Self {
        LayerPlan {
            weights: vec![false; num_conv + 1],
            activations: vec![false; num_conv + 1],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn quantizes(&self, layer: usize, role: QuantRole) -> bool {
        match role {
            QuantRole::Weight => self.weights[layer],
            QuantRole::Activation => self.activations[layer],
        }
    }
}

/// Applies `quantizer` to a layer tensor unless the plan keeps that layer
/// in full precision, in which case activations pass through ReLU and
/// weights pass through unchanged.
pub fn quantize_layer<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    quantizer: &Quantizer,
    plan: &LayerPlan,
    layer: usize,
    mode: QuantMode,
) -> Result<Var> {
    if layer >= plan.len() {
        return Err(Error::invalid("quantize_layer", format!("layer {layer} outside plan of {}", plan.len())));
    }
    if plan.quantizes(layer, quantizer.role) {
        quantizer.apply(g, store, x, mode)
    } else {
        Quantizer::full_precision(quantizer.role).apply(g, store, x, mode)
    }
}
