use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_kernel() -> usize {
    3
}

fn default_one() -> usize {
    1
}

/// One architecture entry. A `conv` entry is a full conv → BN → activation
/// unit; the activation is the (possibly quantized) half-wave nonlinearity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        #[serde(default = "default_kernel")]
        kernel: usize,
        #[serde(default = "default_one")]
        stride: usize,
        #[serde(default = "default_one")]
        padding: usize,
    },
    MaxPool {
        size: usize,
        stride: usize,
    },
    AvgPool {
        size: usize,
        stride: usize,
    },
}

impl LayerSpec {
    pub fn conv(out_channels: usize) -> Self {
        LayerSpec::Conv {
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. })
    }

    /// Output `[C, H, W]` for a `[C, H, W]` input.
    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let [c, h, w] = input;
        let (out_c, k, stride, pad) = match *self {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => (out_channels, kernel, stride, padding),
            LayerSpec::MaxPool { size, stride } | LayerSpec::AvgPool { size, stride } => (c, size, stride, 0),
        };
        if out_c == 0 || k == 0 || stride == 0 {
            return Err(Error::InvalidSpec(format!("{self:?} has a zero extent")));
        }
        let extent = |n: usize| -> Result<usize> {
            let padded = n + 2 * pad;
            if padded < k || !(padded - k).is_multiple_of(stride) {
                return Err(Error::InvalidSpec(format!("{self:?} does not tile a {n}-wide input")));
            }
            Ok((padded - k) / stride + 1)
        };
        Ok([out_c, extent(h)?, extent(w)?])
    }
}

/// Architecture shared by every teacher and the student.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// `[C, H, W]` of one input image.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    /// Layer indices whose conv outputs are fused and distilled.
    pub fusion_indices: Vec<usize>,
    pub num_classes: usize,
}

impl NetworkSpec {
    /// Conv blocks `(conv, conv, 2×2 max-pool)`, one per width, with fusion
    /// at each block's last conv. The final pool belongs to the classifier.
    pub fn conv_blocks(input: [usize; 3], widths: &[usize], num_classes: usize) -> Self {
        let mut layers = Vec::new();
        let mut fusion_indices = Vec::new();
        for &w in widths {
            layers.push(LayerSpec::conv(w));
            layers.push(LayerSpec::conv(w));
            fusion_indices.push(layers.len() - 1);
            layers.push(LayerSpec::MaxPool { size: 2, stride: 2 });
        }
        NetworkSpec {
            input,
            layers,
            fusion_indices,
            num_classes,
        }
    }

    /// Shape after each layer.
    pub fn shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut cur = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            cur = l.output_shape(cur)?;
            out.push(cur);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.contains(&0) {
            return Err(Error::InvalidSpec(format!("input shape {:?} has a zero extent", self.input)));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidSpec("num_classes must be positive".into()));
        }
        if self.fusion_indices.is_empty() {
            return Err(Error::InvalidSpec("at least one fusion index is required".into()));
        }
        self.shapes()?;
        if !self.fusion_indices.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidSpec(format!(
                "fusion indices {:?} must be strictly increasing",
                self.fusion_indices
            )));
        }
        for &k in &self.fusion_indices {
            match self.layers.get(k) {
                Some(l) if l.is_conv() => {}
                _ => return Err(Error::InvalidSpec(format!("fusion index {k} is not a conv layer"))),
            }
        }
        let last = self.last_fusion();
        if self.layers[last + 1..].iter().any(LayerSpec::is_conv) {
            return Err(Error::InvalidSpec(format!(
                "conv layers after the last fusion index {last} would bypass the shared head"
            )));
        }
        Ok(())
    }

    pub fn last_fusion(&self) -> usize {
        *self.fusion_indices.last().expect("validated")
    }

    /// Number of conv layers; the classifier counts as one more weighted layer.
    pub fn num_conv(&self) -> usize {
        self.layers.iter().filter(|l| l.is_conv()).count()
    }

    /// Channels of the features captured at each fusion index.
    pub fn fusion_channels(&self) -> Result<Vec<usize>> {
        let shapes = self.shapes()?;
        Ok(self.fusion_indices.iter().map(|&k| shapes[k][0]).collect())
    }

    /// Input width of the classifier.
    pub fn feature_dim(&self) -> Result<usize> {
        Ok(self.shapes()?.last().map_or(self.input[0], |s| s[0]))
    }
}
