use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::RunningStats;
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::quant::{quantize_layer, LayerPlan, Precision, QuantMode, QuantRole, Quantizer, Scheme};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::spec::{LayerSpec, NetworkSpec};

#[derive(Clone, Debug)]
struct ConvUnit {
    plan_index: usize,
    stride: usize,
    padding: usize,
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    weight_q: Quantizer,
    act_q: Quantizer,
}

#[derive(Clone, Debug)]
enum Unit {
    Conv(ConvUnit),
    MaxPool { size: usize, stride: usize },
    AvgPool { size: usize, stride: usize },
}

fn he_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    Tensor::uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

fn pool_units(layers: &[LayerSpec]) -> Vec<Unit> {
    layers
        .iter()
        .map(|l| match *l {
            LayerSpec::MaxPool { size, stride } => Unit::MaxPool { size, stride },
            LayerSpec::AvgPool { size, stride } => Unit::AvgPool { size, stride },
            LayerSpec::Conv { .. } => unreachable!("validated: no conv in the head"),
        })
        .collect()
}

fn run_pool<T: Scalar>(g: &mut Graph<T>, unit: &Unit, x: Var) -> Result<Var> {
    match *unit {
        Unit::MaxPool { size, stride } => g.max_pool2d(x, size, stride),
        Unit::AvgPool { size, stride } => g.avg_pool2d(x, size, stride),
        Unit::Conv(_) => unreachable!("not a pool"),
    }
}

/// Convolutional trunk of one network: every layer up to and including the
/// last fusion index.
#[derive(Clone, Debug)]
pub struct Backbone {
    spec: NetworkSpec,
    precision: Precision,
    plan: LayerPlan,
    units: Vec<Unit>,
}

impl Backbone {
    /// Registers parameters under `prefix`: He-uniform conv weights, BN with
    /// `γ = 1, β = 0`, and quantizers according to the standard layer plan.
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        spec: &NetworkSpec,
        precision: Precision,
        scheme: Scheme,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let plan = LayerPlan::standard(spec.num_conv());
        let mut channels = spec.input[0];
        let mut units = Vec::new();
        let mut conv_index = 0;
        for (l, layer) in spec.layers[..=spec.last_fusion()].iter().enumerate() {
            let unit = match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let p = format!("{prefix}.layer{l}");
                    let fan_in = channels * kernel * kernel;
                    let w = he_uniform(&[out_channels, channels, kernel, kernel], fan_in, rng);
                    let weight = store.add(format!("{p}.weight"), w, ParamRole::Weight, precision)?;
                    let c = [out_channels];
                    let gamma = store.add(format!("{p}.bn.gamma"), Tensor::ones(&c), ParamRole::BnScale, precision)?;
                    let beta = store.add(format!("{p}.bn.beta"), Tensor::zeros(&c), ParamRole::BnShift, precision)?;
                    let running_mean =
                        store.add(format!("{p}.bn.running_mean"), Tensor::zeros(&c), ParamRole::Buffer, precision)?;
                    let running_var =
                        store.add(format!("{p}.bn.running_var"), Tensor::ones(&c), ParamRole::Buffer, precision)?;
                    let wp = if plan.quantizes(conv_index, QuantRole::Weight) { precision } else { Precision::Full };
                    let ap = if plan.quantizes(conv_index, QuantRole::Activation) { precision } else { Precision::Full };
                    let w_std = (2.0 / fan_in as f64).sqrt();
                    let weight_q = Quantizer::build(QuantRole::Weight, wp, scheme, store, &format!("{p}.wq.step"), w_std)?;
                    let act_q = Quantizer::build(QuantRole::Activation, ap, scheme, store, &format!("{p}.aq.step"), 1.0)?;
                    channels = out_channels;
                    conv_index += 1;
                    Unit::Conv(ConvUnit {
                        plan_index: conv_index - 1,
                        stride,
                        padding,
                        weight,
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                        weight_q,
                        act_q,
                    })
                }
                LayerSpec::MaxPool { size, stride } => Unit::MaxPool { size, stride },
                LayerSpec::AvgPool { size, stride } => Unit::AvgPool { size, stride },
            };
            units.push(unit);
        }
        Ok(Backbone {
            spec: spec.clone(),
            precision,
            plan,
            units,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Layer ranges between consecutive fusion points; the first starts at
    /// the input and each ends at (and includes) a fusion index.
    pub fn segments(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.spec
            .fusion_indices
            .iter()
            .map(|&k| {
                let r = start..k + 1;
                start = k + 1;
                r
            })
            .collect()
    }

    /// Mutable access to every quantizer, e.g. to toggle LSQ gradient scaling.
    pub fn quantizers_mut(&mut self) -> impl Iterator<Item = &mut Quantizer> {
        self.units.iter_mut().flat_map(|u| match u {
            Unit::Conv(c) => vec![&mut c.weight_q, &mut c.act_q],
            _ => vec![],
        })
    }

    /// Runs `layers` on `x`, returning every layer output in order.
    pub fn run<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
        layers: Range<usize>,
        train: bool,
        mode: QuantMode,
    ) -> Result<Vec<Var>> {
        if layers.end > self.units.len() {
            return Err(Error::invalid("backbone", format!("layer range {layers:?} beyond {}", self.units.len())));
        }
        let mut outs = Vec::with_capacity(layers.len());
        let mut cur = x;
        for unit in &self.units[layers] {
            cur = match unit {
                Unit::Conv(c) => {
                    let w = g.param(store, c.weight);
                    let wq = quantize_layer(g, store, w, &c.weight_q, &self.plan, c.plan_index, mode)?;
                    let y = g.conv2d(cur, wq, c.stride, c.padding)?;
                    let gamma = g.param(store, c.gamma);
                    let beta = g.param(store, c.beta);
                    let (mean, var) = store.pair_mut(c.running_mean, c.running_var);
                    let y = g.batch_norm(y, gamma, beta, RunningStats { mean, var }, train)?;
                    quantize_layer(g, store, y, &c.act_q, &self.plan, c.plan_index, mode)?
                }
                pool => run_pool(g, pool, cur)?,
            };
            outs.push(cur);
        }
        Ok(outs)
    }

    /// Full trunk forward, returning the features at each fusion index.
    pub fn features<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
        train: bool,
        mode: QuantMode,
    ) -> Result<Vec<Var>> {
        let outs = self.run(g, store, x, 0..self.units.len(), train, mode)?;
        Ok(self.spec.fusion_indices.iter().map(|&k| outs[k]).collect())
    }

    /// Outputs of every conv unit (post activation), for inspection.
    pub fn activations<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
        train: bool,
        mode: QuantMode,
    ) -> Result<Vec<Var>> {
        let outs = self.run(g, store, x, 0..self.units.len(), train, mode)?;
        Ok(self
            .units
            .iter()
            .zip(outs)
            .filter(|(u, _)| matches!(u, Unit::Conv(_)))
            .map(|(_, v)| v)
            .collect())
    }
}

/// Full-precision classifier: trailing pools, global average pool, linear.
#[derive(Clone, Debug)]
pub struct Classifier {
    pools: Vec<Unit>,
    weight: ParamId,
    bias: ParamId,
}

impl Classifier {
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        spec: &NetworkSpec,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let d = spec.feature_dim()?;
        let m = spec.num_classes;
        let weight = store.add(format!("{prefix}.head.weight"), he_uniform(&[m, d], d, rng), ParamRole::Weight, Precision::Full)?;
        let bias = store.add(format!("{prefix}.head.bias"), Tensor::zeros(&[m]), ParamRole::Bias, Precision::Full)?;
        Ok(Classifier {
            pools: pool_units(&spec.layers[spec.last_fusion() + 1..]),
            weight,
            bias,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, features: Var) -> Result<Var> {
        let mut cur = features;
        for p in &self.pools {
            cur = run_pool(g, p, cur)?;
        }
        let pooled = g.global_avg_pool(cur)?;
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(pooled, w, b)
    }
}

/// A standalone network: trunk plus its own classifier.
#[derive(Clone, Debug)]
pub struct Network {
    pub backbone: Backbone,
    pub head: Classifier,
}

/// Captured features at each fusion index and the logits.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub features: Vec<Var>,
    pub logits: Var,
}

impl Network {
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        spec: &NetworkSpec,
        precision: Precision,
        scheme: Scheme,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let backbone = Backbone::build(spec, precision, scheme, store, prefix, rng)?;
        let head = Classifier::build(spec, store, prefix, rng)?;
        Ok(Network { backbone, head })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
        train: bool,
        mode: QuantMode,
    ) -> Result<ForwardOutput> {
        let features = self.backbone.features(g, store, x, train, mode)?;
        let last = *features.last().expect("validated: at least one fusion index");
        let logits = self.head.forward(g, store, last)?;
        Ok(ForwardOutput { features, logits })
    }
}
