use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Init, Mode, ParamStore};

/// Number of encoder stages, each linked to its mirror decoder stage.
pub const STAGES: usize = 6;
/// Total spatial reduction between input and bridge.
pub const DOWNSAMPLING: usize = 32;

/// Encoder-decoder layout. The encoder is a 3×3 stem followed by six
/// residual stages: stage 1 at full resolution, stages 2-4 downsampled by
/// a strided first block (ResNet-34 `layer2`..`layer4`), stages 5-6 by
/// 2×2 max pooling. A bridge sits on the deepest features and six decoder
/// stages climb back up, each concatenating its mirror encoder stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderDecoderConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stem_width: usize,
    pub stage_widths: Vec<usize>,
    pub stage_blocks: Vec<usize>,
    pub bridge_width: usize,
    /// 3×3 conv-BN-ReLU layers per decoder stage.
    pub decoder_convs: usize,
}

impl Default for EncoderDecoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            out_channels: 3,
            stem_width: 64,
            stage_widths: vec![64, 128, 256, 512, 512, 512],
            stage_blocks: vec![3, 4, 6, 3, 3, 3],
            bridge_width: 512,
            decoder_convs: 3,
        }
    }
}

impl EncoderDecoderConfig {
    /// A narrow variant for tests and CPU smoke runs.
    pub fn tiny() -> Self {
        Self {
            stem_width: 8,
            stage_widths: vec![8, 12, 16, 24, 24, 24],
            stage_blocks: vec![1, 1, 1, 1, 1, 1],
            bridge_width: 24,
            decoder_convs: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.len() != STAGES || self.stage_blocks.len() != STAGES {
            return Err(Error::Config(format!(
                "encoder needs exactly {STAGES} stage widths and block counts"
            )));
        }
        if self.stage_blocks.iter().any(|&b| b == 0)
            || self.stage_widths.iter().any(|&w| w == 0)
            || self.stem_width == 0
            || self.bridge_width == 0
            || self.decoder_convs == 0
        {
            return Err(Error::Config("encoder widths, blocks and decoder convs must be positive".into()));
        }
        Ok(())
    }
}

pub fn check_divisible(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height % DOWNSAMPLING != 0 || width % DOWNSAMPLING != 0 {
        return Err(Error::Indivisible {
            height,
            width,
            multiple: DOWNSAMPLING,
        });
    }
    Ok(())
}

struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBnRelu {
    fn new(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                in_ch,
                out_ch,
                3,
                1,
                1,
                true,
                Init::Kaiming { fan_in: in_ch * 9 },
            )?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_ch)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, mode)?.relu()?)
    }
}

/// ResNet basic block; parameter names follow torchvision.
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, stride: usize) -> Result<Self> {
        let conv = |store: &mut ParamStore, n: &str, i: usize, k: usize, s: usize, p: usize| {
            Conv2d::new(store, &format!("{name}.{n}"), i, out_ch, k, s, p, false, Init::Kaiming { fan_in: i * k * k })
        };
        let conv1 = conv(store, "conv1", in_ch, 3, stride, 1)?;
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), out_ch)?;
        let conv2 = conv(store, "conv2", out_ch, 3, 1, 1)?;
        let bn2 = BatchNorm2d::new(store, &format!("{name}.bn2"), out_ch)?;
        let downsample = if stride != 1 || in_ch != out_ch {
            Some((
                conv(store, "downsample.0", in_ch, 1, stride, 0)?,
                BatchNorm2d::new(store, &format!("{name}.downsample.1"), out_ch)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, mode)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, mode)?;
        let shortcut = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, mode)?,
            None => x.clone(),
        };
        Ok((y + shortcut)?.relu()?)
    }
}

enum Downsample {
    None,
    Strided,
    MaxPool,
}

struct EncoderStage {
    pool_first: bool,
    blocks: Vec<BasicBlock>,
}

impl EncoderStage {
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut y = if self.pool_first { crate::nn::max_pool(x, 2)? } else { x.clone() };
        for b in &self.blocks {
            y = b.forward(&y, mode)?;
        }
        Ok(y)
    }
}

struct DecoderStage {
    skip_channels: usize,
    convs: Vec<ConvBnRelu>,
    upsample: bool,
}

pub struct EncoderDecoder {
    cfg: EncoderDecoderConfig,
    stem: ConvBnRelu,
    stages: Vec<EncoderStage>,
    bridge: Vec<ConvBnRelu>,
    decoder: Vec<DecoderStage>,
    head: Conv2d,
}

impl EncoderDecoder {
    /// Registers parameters under `prefix` (e.g. `coarse`).
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &EncoderDecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let stem = ConvBnRelu::new(store, &format!("{prefix}.stem"), cfg.in_channels, cfg.stem_width)?;

        let mut stages = Vec::with_capacity(STAGES);
        let mut in_ch = cfg.stem_width;
        for (i, (&width, &blocks)) in cfg.stage_widths.iter().zip(&cfg.stage_blocks).enumerate() {
            let down = match i {
                0 => Downsample::None,
                1..=3 => Downsample::Strided,
                _ => Downsample::MaxPool,
            };
            let mut list = Vec::with_capacity(blocks);
            for b in 0..blocks {
                let stride = if b == 0 && matches!(down, Downsample::Strided) { 2 } else { 1 };
                let name = format!("{prefix}.encoder.layer{}.{b}", i + 1);
                list.push(BasicBlock::new(store, &name, if b == 0 { in_ch } else { width }, width, stride)?);
            }
            stages.push(EncoderStage {
                pool_first: matches!(down, Downsample::MaxPool),
                blocks: list,
            });
            in_ch = width;
        }

        let bridge = vec![
            ConvBnRelu::new(store, &format!("{prefix}.bridge.0"), in_ch, cfg.bridge_width)?,
            ConvBnRelu::new(store, &format!("{prefix}.bridge.1"), cfg.bridge_width, cfg.bridge_width)?,
        ];

        // Decoder stage k mirrors encoder stage k, deepest first.
        let mut decoder = Vec::with_capacity(STAGES);
        let mut prev = cfg.bridge_width;
        for k in (0..STAGES).rev() {
            let skip = cfg.stage_widths[k];
            let out = if k == 0 { cfg.stem_width } else { cfg.stage_widths[k - 1] };
            let mut convs = Vec::with_capacity(cfg.decoder_convs);
            for j in 0..cfg.decoder_convs {
                let name = format!("{prefix}.decoder.stage{}.{j}", k + 1);
                let i = if j == 0 { prev + skip } else { out };
                convs.push(ConvBnRelu::new(store, &name, i, out)?);
            }
            decoder.push(DecoderStage {
                skip_channels: skip,
                convs,
                upsample: k > 0,
            });
            prev = out;
        }

        // Linear output layer: small init so the refinement residual starts near zero.
        let head = Conv2d::new(
            store,
            &format!("{prefix}.head"),
            prev,
            cfg.out_channels,
            3,
            1,
            1,
            true,
            Init::Normal(1e-3),
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            stages,
            bridge,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &EncoderDecoderConfig {
        &self.cfg
    }

    /// Count of decoder stages that fuse an encoder feature map.
    pub fn skip_connections(&self) -> usize {
        self.decoder.iter().filter(|d| d.skip_channels > 0).count()
    }

    /// Final output convolution, exposed so tests can pin it.
    pub fn head(&self) -> &Conv2d {
        &self.head
    }

    /// Encoder feature maps, shallowest first, followed by the bridge output.
    pub fn encode(&self, x: &Tensor, mode: Mode) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!("expected {} input channels, got {c}", self.cfg.in_channels)));
        }
        check_divisible(h, w)?;
        let mut feats = Vec::with_capacity(STAGES + 1);
        let mut y = self.stem.forward(x, mode)?;
        for s in &self.stages {
            y = s.forward(&y, mode)?;
            feats.push(y.clone());
        }
        for b in &self.bridge {
            y = b.forward(&y, mode)?;
        }
        feats.push(y);
        Ok(feats)
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut feats = self.encode(x, mode)?;
        let mut y = feats.pop().expect("bridge output");
        for stage in &self.decoder {
            let skip = feats.pop().expect("one skip per decoder stage");
            y = Tensor::cat(&[&y, &skip], 1)?;
            for conv in &stage.convs {
                y = conv.forward(&y, mode)?;
            }
            if stage.upsample {
                let (_, _, h, w) = y.dims4()?;
                y = y.upsample_nearest2d(h * 2, w * 2)?;
            }
        }
        self.head.forward(&y)
    }
}

/// Maps torchvision ResNet-34 names (`layer1.0.conv1.weight`, ...) for the
/// first three residual stages onto an encoder registered under `prefix`.
pub fn resnet_name_map(prefix: &str) -> impl Fn(&str) -> Option<String> + '_ {
    move |name: &str| {
        ["layer1.", "layer2.", "layer3."]
            .iter()
            .any(|l| name.starts_with(l))
            .then(|| format!("{prefix}.encoder.{name}"))
    }
}
