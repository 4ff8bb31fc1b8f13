//! Coarse-to-fine generator and the conditional patch discriminators.

mod discriminator;
mod encoder_decoder;
mod generator;

use candle_core::Tensor;

pub use discriminator::{PatchDiscriminator, PatchDiscriminatorConfig};
pub use encoder_decoder::{check_divisible, resnet_name_map, EncoderDecoder, EncoderDecoderConfig, DOWNSAMPLING, STAGES};
pub use generator::{Generator, GeneratorConfig, GeneratorOutput};

use crate::error::{Error, Result};

/// `R ⊙ M + I ⊙ (1 − M)`: reconstructed content inside the hole, the input
/// image everywhere else. `mask` is N×1×H×W and broadcast over channels.
pub fn compose_discriminator_input(reconstruction: &Tensor, input: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = reconstruction.dims4()?;
    if input.dims() != reconstruction.dims() || mask.dims() != [n, 1, h, w] {
        return Err(Error::Shape(format!(
            "compose expects R, I of equal shape and an N×1×H×W mask; got {:?}, {:?}, {:?}",
            reconstruction.dims(),
            input.dims(),
            mask.dims()
        )));
    }
    let m = mask.broadcast_as((n, c, h, w))?;
    let keep = m.affine(-1.0, 1.0)?;
    Ok(((reconstruction * &m)? + (input * &keep)?)?)
}
