//! U-Net style expansive path over the encoder's stage features, and the
//! assembled segmentation model.

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, MitEncoder, StageFeatures, NUM_STAGES};
use crate::error::{shape_err, Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvTranspose2d, VarPath, VarStore};
use crate::tensor::{no_grad, Conv2dSpec, Element, Tensor};

pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    /// Fixed bilinear ×2 (half-pixel centers).
    #[default]
    Bilinear,
    /// Learned 2×2 stride-2 transposed convolution.
    Transposed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub channels: Vec<usize>,
    pub num_classes: usize,
    pub head_kernel: usize,
    pub upsample: UpsampleMode,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            channels: vec![256, 128, 64, 32],
            num_classes: NUM_CLASSES,
            head_kernel: 3,
            upsample: UpsampleMode::Bilinear,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != NUM_STAGES {
            return Err(Error::Config(format!(
                "decoder needs {NUM_STAGES} blocks, got {}",
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("decoder channels must be >= 1".into()));
        }
        if self.num_classes != NUM_CLASSES {
            return Err(Error::Config(format!(
                "num_classes must be {NUM_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.head_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "head kernel must be odd, got {}",
                self.head_kernel
            )));
        }
        Ok(())
    }
}

fn same_conv<T: Element>(vp: &VarPath<T>, cin: usize, cout: usize, k: usize, bias: bool) -> Conv2d<T> {
    let spec = Conv2dSpec {
        stride: 1,
        padding: k / 2,
        groups: 1,
    };
    Conv2d::new(vp, cin, cout, k, spec, bias)
}

/// `up ×2 → concat skip → (conv3×3 → BN → ReLU) × 2`.
pub struct DecoderBlock<T: Element = f32> {
    pub up: Option<ConvTranspose2d<T>>,
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
}

impl<T: Element> DecoderBlock<T> {
    pub fn new(
        vp: &VarPath<T>,
        cin: usize,
        skip: usize,
        cout: usize,
        mode: UpsampleMode,
    ) -> Self {
        let up = (mode == UpsampleMode::Transposed)
            .then(|| ConvTranspose2d::new(&vp.pp("up"), cin, cin, 2));
        DecoderBlock {
            up,
            conv1: same_conv(&vp.pp("conv1"), cin + skip, cout, 3, false),
            bn1: BatchNorm2d::new(&vp.pp("bn1"), cout),
            conv2: same_conv(&vp.pp("conv2"), cout, cout, 3, false),
            bn2: BatchNorm2d::new(&vp.pp("bn2"), cout),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, skip: Option<&Tensor<T>>, training: bool) -> Result<Tensor<T>> {
        let up = match &self.up {
            Some(t) => t.forward(x)?,
            None => x.upsample2x_bilinear()?,
        };
        let merged = match skip {
            Some(s) => {
                if s.shape()[0] != up.shape()[0] || s.shape()[2..] != up.shape()[2..] {
                    return Err(shape_err!(
                        "decoder skip {:?} does not match upsampled {:?}",
                        s.shape(),
                        up.shape()
                    ));
                }
                Tensor::concat(&[&up, s], 1)?
            }
            None => up,
        };
        let y = self.bn1.forward(&self.conv1.forward(&merged)?, training)?.relu();
        Ok(self.bn2.forward(&self.conv2.forward(&y)?, training)?.relu())
    }
}

/// Class logits, bilinear ×2, softmax over channels.
pub struct SegmentationHead<T: Element = f32> {
    pub conv: Conv2d<T>,
}

impl<T: Element> SegmentationHead<T> {
    pub fn new(vp: &VarPath<T>, cin: usize, classes: usize, kernel: usize) -> Self {
        SegmentationHead {
            conv: same_conv(vp, cin, classes, kernel, true),
        }
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.conv.forward(x)?.upsample2x_bilinear()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.logits(x)?.softmax(1)
    }
}

pub struct UnetDecoder<T: Element = f32> {
    pub config: DecoderConfig,
    pub blocks: Vec<DecoderBlock<T>>,
    pub head: SegmentationHead<T>,
}

impl<T: Element> UnetDecoder<T> {
    /// `encoder_widths` are the stage widths, finest first.
    pub fn new(vp: &VarPath<T>, config: &DecoderConfig, encoder_widths: &[usize]) -> Result<Self> {
        config.validate()?;
        if encoder_widths.len() != NUM_STAGES {
            return Err(Error::Config("decoder needs four encoder widths".into()));
        }
        let mut cin = encoder_widths[NUM_STAGES - 1];
        let mut blocks = Vec::with_capacity(NUM_STAGES);
        for (i, &cout) in config.channels.iter().enumerate() {
            // block i pairs with stage 3 - i; the last block has no skip
            let skip = if i + 1 < NUM_STAGES { encoder_widths[NUM_STAGES - 2 - i] } else { 0 };
            blocks.push(DecoderBlock::new(
                &vp.pp(&format!("block{}", i + 1)),
                cin,
                skip,
                cout,
                config.upsample,
            ));
            cin = cout;
        }
        let head = SegmentationHead::new(&vp.pp("head"), cin, config.num_classes, config.head_kernel);
        Ok(UnetDecoder {
            config: config.clone(),
            blocks,
            head,
        })
    }

    pub fn logits(&self, feats: &StageFeatures<T>, training: bool) -> Result<Tensor<T>> {
        let s = &feats.stages;
        if s.len() != NUM_STAGES {
            return Err(shape_err!("decoder expects {NUM_STAGES} stage features, got {}", s.len()));
        }
        let mut x = s[NUM_STAGES - 1].clone();
        for (i, block) in self.blocks.iter().enumerate() {
            let skip = (i + 1 < NUM_STAGES).then(|| &s[NUM_STAGES - 2 - i]);
            x = block.forward(&x, skip, training)?;
        }
        self.head.logits(&x)
    }

    pub fn forward(&self, feats: &StageFeatures<T>, training: bool) -> Result<Tensor<T>> {
        self.logits(feats, training)?.softmax(1)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub encoder: usize,
    pub decoder: usize,
    pub total: usize,
}

/// Encoder + decoder with its own parameter store. Encoder tensors live
/// under `enc.`, decoder tensors under `dec.`.
pub struct MiTUNet<T: Element = f32> {
    pub config: ModelConfig,
    pub vars: VarStore<T>,
    pub encoder: MitEncoder<T>,
    pub decoder: UnetDecoder<T>,
}

impl<T: Element> MiTUNet<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let vars = VarStore::new(seed);
        let encoder = MitEncoder::new(&vars.path("enc"), &config.encoder)?;
        let decoder = UnetDecoder::new(&vars.path("dec"), &config.decoder, &config.encoder.widths)?;
        Ok(MiTUNet {
            config: config.clone(),
            vars,
            encoder,
            decoder,
        })
    }

    pub fn count_parameters(&self) -> ParamCount {
        let encoder = self.vars.count_params("enc.");
        let decoder = self.vars.count_params("dec.");
        ParamCount {
            encoder,
            decoder,
            total: self.vars.count_params(""),
        }
    }

    pub fn logits(&self, image: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        let feats = self.encoder.forward(image)?;
        self.decoder.logits(&feats, training)
    }

    /// Class probabilities `[B, 3, H, W]`.
    pub fn forward(&self, image: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        self.logits(image, training)?.softmax(1)
    }

    /// Eval-mode label maps, one `H·W` vector per batch item.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Vec<Vec<u8>>> {
        let probs = no_grad(|| self.forward(image, false))?;
        Ok(argmax_channels(&probs))
    }
}

/// Per-pixel argmax over axis 1 of `[B, C, H, W]`; ties go to the lowest
/// class index.
pub fn argmax_channels<T: Element>(probs: &Tensor<T>) -> Vec<Vec<u8>> {
    let s = probs.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let d = probs.data();
    (0..b)
        .map(|bi| {
            (0..hw)
                .map(|p| {
                    let mut best = 0usize;
                    for ch in 1..c {
                        if d[(bi * c + ch) * hw + p] > d[(bi * c + best) * hw + p] {
                            best = ch;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect()
}
