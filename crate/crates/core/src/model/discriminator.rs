use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, BatchNorm2d, Conv2d, Init, Mode, ParamStore};

const KERNEL: usize = 4;

/// Conditional patch discriminator: the occluded image and a candidate are
/// concatenated and scored on a grid of overlapping patches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchDiscriminatorConfig {
    /// Channels of the condition plus the candidate.
    pub in_channels: usize,
    pub base_width: usize,
    /// Stride-2 layers; 3 yields the 70×70 receptive field.
    pub strided_layers: usize,
    pub max_width: usize,
}

impl Default for PatchDiscriminatorConfig {
    fn default() -> Self {
        Self {
            in_channels: 6,
            base_width: 64,
            strided_layers: 3,
            max_width: 512,
        }
    }
}

impl PatchDiscriminatorConfig {
    pub fn tiny() -> Self {
        Self {
            base_width: 8,
            max_width: 64,
            ..Self::default()
        }
    }

    /// (stride) of every convolution in order.
    fn strides(&self) -> Vec<usize> {
        let mut s = vec![2; self.strided_layers];
        s.extend([1, 1]);
        s
    }

    /// Input pixels seen by one output cell.
    pub fn receptive_field(&self) -> usize {
        self.strides().iter().rev().fold(1, |rf, &s| (rf - 1) * s + KERNEL)
    }

    /// Score-grid side for a square input of side `size`.
    pub fn output_size(&self, size: usize) -> usize {
        self.strides().iter().fold(size, |n, &s| (n + 2 - KERNEL) / s + 1)
    }
}

struct Layer {
    conv: Conv2d,
    bn: Option<BatchNorm2d>,
}

pub struct PatchDiscriminator {
    cfg: PatchDiscriminatorConfig,
    layers: Vec<Layer>,
    score: Conv2d,
}

impl PatchDiscriminator {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &PatchDiscriminatorConfig) -> Result<Self> {
        if cfg.in_channels == 0 || cfg.base_width == 0 || cfg.in_channels % 2 != 0 {
            return Err(Error::Config("discriminator needs an even, nonzero channel count".into()));
        }
        let strides = cfg.strides();
        let mut layers = Vec::new();
        let mut in_ch = cfg.in_channels;
        let mut width = cfg.base_width;
        for (i, &stride) in strides[..strides.len() - 1].iter().enumerate() {
            let name = format!("{prefix}.layer{i}");
            let conv = Conv2d::new(store, &format!("{name}.conv"), in_ch, width, KERNEL, stride, 1, i == 0, Init::Normal(0.02))?;
            let bn = if i == 0 {
                None
            } else {
                Some(BatchNorm2d::new(store, &format!("{name}.bn"), width)?)
            };
            layers.push(Layer { conv, bn });
            in_ch = width;
            width = (width * 2).min(cfg.max_width);
        }
        let score = Conv2d::new(store, &format!("{prefix}.score"), in_ch, 1, KERNEL, 1, 1, true, Init::Normal(0.02))?;
        Ok(Self {
            cfg: cfg.clone(),
            layers,
            score,
        })
    }

    pub fn config(&self) -> &PatchDiscriminatorConfig {
        &self.cfg
    }

    /// Patch logits, N×1×G×G. Probabilities are `sigmoid(logits)`.
    pub fn forward(&self, condition: &Tensor, candidate: &Tensor, mode: Mode) -> Result<Tensor> {
        if condition.dims() != candidate.dims() {
            return Err(Error::Shape(format!(
                "condition {:?} and candidate {:?} differ",
                condition.dims(),
                candidate.dims()
            )));
        }
        let x = Tensor::cat(&[condition, candidate], 1)?;
        if x.dims()[1] != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "discriminator expects {} channels, got {}",
                self.cfg.in_channels,
                x.dims()[1]
            )));
        }
        let mut y = x;
        for l in &self.layers {
            y = l.conv.forward(&y)?;
            if let Some(bn) = &l.bn {
                y = bn.forward(&y, mode)?;
            }
            y = leaky_relu(&y, 0.2)?;
        }
        self.score.forward(&y)
    }
}
