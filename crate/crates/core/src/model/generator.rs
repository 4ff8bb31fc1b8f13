use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::encoder_decoder::{check_divisible, resnet_name_map, EncoderDecoder, EncoderDecoderConfig};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Mode, ParamStore};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Shared layout of the coarse and refinement networks (weights are separate).
    pub network: EncoderDecoderConfig,
    /// torchvision ResNet-34 safetensors used for the first three encoder stages.
    pub pretrained_encoder: Option<std::path::PathBuf>,
}

/// The three maps of one generator pass. `refined` is exactly
/// `coarse + residual`; no clamping is applied here.
#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    pub coarse: Tensor,
    pub residual: Tensor,
    pub refined: Tensor,
}

/// Coarse network followed by a residual refinement network.
pub struct Generator {
    coarse: EncoderDecoder,
    refine: EncoderDecoder,
}

impl Generator {
    pub fn new(store: &mut ParamStore, cfg: &GeneratorConfig) -> Result<Self> {
        if cfg.network.in_channels != 4 || cfg.network.out_channels != 3 {
            return Err(Error::Config("generator networks map 4 channels to 3".into()));
        }
        let coarse = EncoderDecoder::new(store, "coarse", &cfg.network)?;
        let refine = EncoderDecoder::new(store, "refine", &cfg.network)?;
        if let Some(path) = &cfg.pretrained_encoder {
            let tensors = crate::nn::read_safetensors(path, store.device())?;
            for prefix in ["coarse", "refine"] {
                let n = store.load_tensors(&tensors, false, resnet_name_map(prefix))?;
                log::info!("initialised {n} {prefix} encoder tensors from {}", path.display());
            }
        }
        Ok(Self { coarse, refine })
    }

    pub fn coarse_network(&self) -> &EncoderDecoder {
        &self.coarse
    }

    pub fn refine_network(&self) -> &EncoderDecoder {
        &self.refine
    }

    /// `R_coarse` in `[0, 1]` from the 4-channel occluded image + mask input.
    pub fn coarse_forward(&self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let (_, c, h, w) = input.dims4()?;
        if c != 4 {
            return Err(Error::Shape(format!("generator input needs 4 channels, got {c}")));
        }
        check_divisible(h, w)?;
        sigmoid(&self.coarse.forward(input, mode)?)
    }

    /// Predicts the residual from `R_coarse ⊕ M` and adds it back.
    pub fn refine_forward(&self, coarse: &Tensor, mask: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let (n, c, h, w) = coarse.dims4()?;
        if c != 3 || mask.dims() != [n, 1, h, w] {
            return Err(Error::Shape(format!(
                "refinement expects N×3×H×W and N×1×H×W, got {:?} and {:?}",
                coarse.dims(),
                mask.dims()
            )));
        }
        let residual = self.refine.forward(&Tensor::cat(&[coarse, mask], 1)?, mode)?;
        let refined = (coarse + &residual)?;
        Ok((residual, refined))
    }

    pub fn forward(&self, input: &Tensor, mask: &Tensor, mode: Mode) -> Result<GeneratorOutput> {
        let coarse = self.coarse_forward(input, mode)?;
        let (residual, refined) = self.refine_forward(&coarse, mask, mode)?;
        Ok(GeneratorOutput {
            coarse,
            residual,
            refined,
        })
    }
}
