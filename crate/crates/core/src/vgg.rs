//! VGG-style convolutional feature stack with torchvision parameter names
//! (`features.<idx>.weight`), so converted VGG16 checkpoints load directly.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{max_pool, Conv2d, Init, ParamStore};

/// One block of 3×3 convolutions followed by 2×2 max pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VggStage {
    pub width: usize,
    pub convs: usize,
}

pub fn vgg16_stages() -> Vec<VggStage> {
    [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)]
        .into_iter()
        .map(|(width, convs)| VggStage { width, convs })
        .collect()
}

pub struct VggFeatures {
    stages: Vec<Vec<Conv2d>>,
}

impl VggFeatures {
    pub fn new(store: &mut ParamStore, prefix: &str, in_channels: usize, stages: &[VggStage]) -> Result<Self> {
        if stages.is_empty() || stages.iter().any(|s| s.width == 0 || s.convs == 0) {
            return Err(Error::Config("feature stack needs nonempty stages".into()));
        }
        let mut idx = 0;
        let mut in_ch = in_channels;
        let mut built = Vec::with_capacity(stages.len());
        for stage in stages {
            let mut convs = Vec::with_capacity(stage.convs);
            for _ in 0..stage.convs {
                let name = format!("{prefix}.{idx}");
                convs.push(Conv2d::new(
                    store,
                    &name,
                    in_ch,
                    stage.width,
                    3,
                    1,
                    1,
                    true,
                    Init::Kaiming { fan_in: in_ch * 9 },
                )?);
                in_ch = stage.width;
                // conv + relu
                idx += 2;
            }
            // max pool
            idx += 1;
            built.push(convs);
        }
        Ok(Self { stages: built })
    }

    pub fn stage_widths(&self) -> Vec<usize> {
        self.stages
            .iter()
            .map(|s| s.last().expect("nonempty stage").out_channels())
            .collect()
    }

    /// Last ReLU activation of every stage (before its pooling).
    pub fn taps(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.stages.len());
        let mut y = x.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                y = max_pool(&y, 2)?;
            }
            for conv in stage {
                y = conv.forward(&y)?.relu()?;
            }
            out.push(y.clone());
        }
        Ok(out)
    }

    /// Full stack including the final pooling.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = self.taps(x)?.pop().expect("nonempty");
        max_pool(&last, 2)
    }
}
