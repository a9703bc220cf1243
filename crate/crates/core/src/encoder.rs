//! Four-stage hierarchical mix-transformer encoder.
//!
//! Each stage merges overlapping patches with a strided convolution, runs a
//! stack of pre-norm transformer blocks (spatial-reduction self-attention
//! followed by a Mix-FFN with a 3×3 depthwise convolution) and closes with a
//! layer norm. There are no positional embeddings anywhere; the depthwise
//! convolution supplies position information.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv2d, LayerNorm, Linear, VarPath};
use crate::tensor::{conv_out_len, Conv2dSpec, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchMergeConfig {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub sr_ratios: Vec<usize>,
    pub mlp_ratio: usize,
    pub patch_merge: Vec<PatchMergeConfig>,
}

pub const NUM_STAGES: usize = 4;

impl Default for EncoderConfig {
    /// MiT-B0 scale.
    fn default() -> Self {
        let first = PatchMergeConfig { kernel: 7, stride: 4, padding: 3 };
        let rest = PatchMergeConfig { kernel: 3, stride: 2, padding: 1 };
        EncoderConfig {
            in_channels: 3,
            widths: vec![32, 64, 160, 256],
            depths: vec![2, 2, 2, 2],
            heads: vec![1, 2, 5, 8],
            sr_ratios: vec![8, 4, 2, 1],
            mlp_ratio: 4,
            patch_merge: vec![first, rest, rest, rest],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let lens = [
            self.widths.len(),
            self.depths.len(),
            self.heads.len(),
            self.sr_ratios.len(),
            self.patch_merge.len(),
        ];
        if lens.iter().any(|&l| l != NUM_STAGES) {
            return Err(Error::Config(format!(
                "encoder needs {NUM_STAGES} entries per stage list, got {lens:?}"
            )));
        }
        if self.in_channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("in_channels and mlp_ratio must be >= 1".into()));
        }
        for i in 0..NUM_STAGES {
            let (c, h, r) = (self.widths[i], self.heads[i], self.sr_ratios[i]);
            if h == 0 || c == 0 || c % h != 0 {
                return Err(Error::Config(format!(
                    "stage {}: width {c} not divisible by {h} heads",
                    i + 1
                )));
            }
            if r == 0 {
                return Err(Error::Config(format!("stage {}: sr ratio must be >= 1", i + 1)));
            }
            let pm = self.patch_merge[i];
            if pm.stride == 0 || pm.kernel <= pm.stride {
                return Err(Error::Config(format!(
                    "stage {}: patch merge kernel {} must exceed stride {}",
                    i + 1,
                    pm.kernel,
                    pm.stride
                )));
            }
        }
        Ok(())
    }

    /// Spatial size of every stage output for an `h×w` input, or a shape
    /// error when the input is not compatible with the stage strides and
    /// reduction ratios.
    pub fn stage_sizes(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let total: usize = self.patch_merge.iter().map(|p| p.stride).product();
        if h == 0 || w == 0 || !h.is_multiple_of(total) || !w.is_multiple_of(total) {
            return Err(shape_err!(
                "input {h}x{w} must be a positive multiple of {total} on both sides"
            ));
        }
        let mut sizes = Vec::with_capacity(NUM_STAGES);
        let (mut ch, mut cw) = (h, w);
        for (i, pm) in self.patch_merge.iter().enumerate() {
            let (Some(nh), Some(nw)) = (
                conv_out_len(ch, pm.kernel, pm.stride, pm.padding),
                conv_out_len(cw, pm.kernel, pm.stride, pm.padding),
            ) else {
                return Err(shape_err!("stage {}: {ch}x{cw} smaller than patch kernel", i + 1));
            };
            let r = self.sr_ratios[i];
            if nh % r != 0 || nw % r != 0 {
                return Err(Error::Config(format!(
                    "stage {}: sr ratio {r} does not divide the {nh}x{nw} token grid",
                    i + 1
                )));
            }
            sizes.push((nh, nw));
            (ch, cw) = (nh, nw);
        }
        Ok(sizes)
    }
}

/// `[B, N, C]` tokens on an `h×w` grid → `[B, C, h, w]`.
pub fn tokens_to_grid<T: Element>(t: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = t.shape();
    if s.len() != 3 || s[1] != h * w {
        return Err(shape_err!("tokens {s:?} do not fill a {h}x{w} grid"));
    }
    t.reshape(&[s[0], h, w, s[2]])?.permute(&[0, 3, 1, 2])
}

/// `[B, C, h, w]` → `[B, h·w, C]`.
pub fn grid_to_tokens<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(shape_err!("expected [B, C, H, W], got {s:?}"));
    }
    x.permute(&[0, 2, 3, 1])?.reshape(&[s[0], s[2] * s[3], s[1]])
}

/// Strided convolution with `K > S` followed by a channel layer norm.
pub struct OverlapPatchMerge<T: Element = f32> {
    pub proj: Conv2d<T>,
    pub norm: LayerNorm<T>,
}

impl<T: Element> OverlapPatchMerge<T> {
    pub fn new(vp: &VarPath<T>, cin: usize, cout: usize, cfg: PatchMergeConfig) -> Self {
        let spec = Conv2dSpec {
            stride: cfg.stride,
            padding: cfg.padding,
            groups: 1,
        };
        OverlapPatchMerge {
            proj: Conv2d::new(&vp.pp("proj"), cin, cout, cfg.kernel, spec, true),
            norm: LayerNorm::new(&vp.pp("norm"), cout),
        }
    }

    /// Returns normalized tokens `[B, h·w, C_out]` and the grid size.
    pub fn forward_tokens(&self, x: &Tensor<T>) -> Result<(Tensor<T>, usize, usize)> {
        let y = self.proj.forward(x)?;
        let (h, w) = (y.shape()[2], y.shape()[3]);
        Ok((self.norm.forward(&grid_to_tokens(&y)?)?, h, w))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (t, h, w) = self.forward_tokens(x)?;
        tokens_to_grid(&t, h, w)
    }
}

/// Multi-head scaled dot-product self-attention whose keys and values come
/// from a token grid reduced by an `r×r` stride-`r` convolution.
pub struct EfficientSelfAttention<T: Element = f32> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub proj: Linear<T>,
    pub reduction: Option<(Conv2d<T>, LayerNorm<T>)>,
    pub heads: usize,
    pub sr_ratio: usize,
}

impl<T: Element> EfficientSelfAttention<T> {
    pub fn new(vp: &VarPath<T>, dim: usize, heads: usize, sr_ratio: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {dim} not divisible by {heads} heads")));
        }
        let reduction = (sr_ratio > 1).then(|| {
            let spec = Conv2dSpec {
                stride: sr_ratio,
                padding: 0,
                groups: 1,
            };
            (
                Conv2d::new(&vp.pp("sr"), dim, dim, sr_ratio, spec, true),
                LayerNorm::new(&vp.pp("sr_norm"), dim),
            )
        });
        Ok(EfficientSelfAttention {
            query: Linear::new(&vp.pp("q"), dim, dim, true),
            key: Linear::new(&vp.pp("k"), dim, dim, true),
            value: Linear::new(&vp.pp("v"), dim, dim, true),
            proj: Linear::new(&vp.pp("proj"), dim, dim, true),
            reduction,
            heads,
            sr_ratio,
        })
    }

    fn split_heads(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        let s = t.shape();
        let d = s[2] / self.heads;
        t.reshape(&[s[0], s[1], self.heads, d])?.permute(&[0, 2, 1, 3])
    }

    /// Output tokens and the attention weights `[B, heads, N, N_kv]`.
    pub fn forward_with_weights(
        &self,
        x: &Tensor<T>,
        h: usize,
        w: usize,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let s = x.shape().to_vec();
        if s.len() != 3 || s[1] != h * w {
            return Err(shape_err!("attention: tokens {s:?} do not fill {h}x{w}"));
        }
        if !h.is_multiple_of(self.sr_ratio) || !w.is_multiple_of(self.sr_ratio) {
            return Err(Error::Config(format!(
                "sr ratio {} does not divide the {h}x{w} grid",
                self.sr_ratio
            )));
        }
        let (b, n, c) = (s[0], s[1], s[2]);
        let d = c / self.heads;
        let q = self.split_heads(&self.query.forward(x)?)?;
        let kv_in = match &self.reduction {
            Some((conv, norm)) => {
                let reduced = conv.forward(&tokens_to_grid(x, h, w)?)?;
                norm.forward(&grid_to_tokens(&reduced)?)?
            }
            None => x.clone(),
        };
        let k = self.split_heads(&self.key.forward(&kv_in)?)?;
        let v = self.split_heads(&self.value.forward(&kv_in)?)?;
        let scores = q.matmul_t(&k)?.scale(T::cast(1.0 / (d as f64).sqrt()));
        let weights = scores.softmax(3)?;
        let out = weights
            .matmul(&v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, n, c])?;
        Ok((self.proj.forward(&out)?, weights))
    }

    pub fn forward(&self, x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        Ok(self.forward_with_weights(x, h, w)?.0)
    }
}

/// `Linear(C→eC) → DWConv3×3 → GELU → Linear(eC→C)`.
pub struct MixFfn<T: Element = f32> {
    pub fc1: Linear<T>,
    pub dwconv: Conv2d<T>,
    pub fc2: Linear<T>,
}

impl<T: Element> MixFfn<T> {
    pub fn new(vp: &VarPath<T>, dim: usize, expansion: usize) -> Self {
        let hidden = dim * expansion;
        let spec = Conv2dSpec {
            stride: 1,
            padding: 1,
            groups: hidden,
        };
        MixFfn {
            fc1: Linear::new(&vp.pp("fc1"), dim, hidden, true),
            dwconv: Conv2d::new(&vp.pp("dwconv"), hidden, hidden, 3, spec, true),
            fc2: Linear::new(&vp.pp("fc2"), hidden, dim, true),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        let hidden = self.fc1.forward(x)?;
        let grid = self.dwconv.forward(&tokens_to_grid(&hidden, h, w)?)?;
        self.fc2.forward(&grid_to_tokens(&grid)?.gelu())
    }
}

/// Pre-norm residual block: `x + Attn(LN(x))`, then `x + MixFFN(LN(x))`.
pub struct TransformerBlock<T: Element = f32> {
    pub norm1: LayerNorm<T>,
    pub attn: EfficientSelfAttention<T>,
    pub norm2: LayerNorm<T>,
    pub ffn: MixFfn<T>,
}

impl<T: Element> TransformerBlock<T> {
    pub fn new(
        vp: &VarPath<T>,
        dim: usize,
        heads: usize,
        sr_ratio: usize,
        expansion: usize,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: LayerNorm::new(&vp.pp("norm1"), dim),
            attn: EfficientSelfAttention::new(&vp.pp("attn"), dim, heads, sr_ratio)?,
            norm2: LayerNorm::new(&vp.pp("norm2"), dim),
            ffn: MixFfn::new(&vp.pp("ffn"), dim, expansion),
        })
    }

    pub fn forward(&self, x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        let x = x.add(&self.attn.forward(&self.norm1.forward(x)?, h, w)?)?;
        x.add(&self.ffn.forward(&self.norm2.forward(&x)?, h, w)?)
    }
}

pub struct Stage<T: Element = f32> {
    pub merge: OverlapPatchMerge<T>,
    pub blocks: Vec<TransformerBlock<T>>,
    pub norm: LayerNorm<T>,
}

/// Multi-resolution encoder outputs, finest first.
pub struct StageFeatures<T: Element = f32> {
    pub stages: Vec<Tensor<T>>,
}

impl<T: Element> StageFeatures<T> {
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.stages.iter().map(|t| t.shape().to_vec()).collect()
    }
}

pub struct MitEncoder<T: Element = f32> {
    pub config: EncoderConfig,
    pub stages: Vec<Stage<T>>,
}

impl<T: Element> MitEncoder<T> {
    pub fn new(vp: &VarPath<T>, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut cin = config.in_channels;
        for i in 0..NUM_STAGES {
            let sp = vp.pp(&format!("stage{}", i + 1));
            let dim = config.widths[i];
            let merge = OverlapPatchMerge::new(&sp.pp("patch_merge"), cin, dim, config.patch_merge[i]);
            let blocks = (0..config.depths[i])
                .map(|j| {
                    TransformerBlock::new(
                        &sp.pp(&format!("block{}", j + 1)),
                        dim,
                        config.heads[i],
                        config.sr_ratios[i],
                        config.mlp_ratio,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let norm = LayerNorm::new(&sp.pp("norm"), dim);
            stages.push(Stage { merge, blocks, norm });
            cin = dim;
        }
        Ok(MitEncoder {
            config: config.clone(),
            stages,
        })
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<StageFeatures<T>> {
        let s = image.shape();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(shape_err!(
                "encoder expects [B, {}, H, W], got {s:?}",
                self.config.in_channels
            ));
        }
        self.config.stage_sizes(s[2], s[3])?;
        let mut x = image.clone();
        let mut outs = Vec::with_capacity(NUM_STAGES);
        for stage in &self.stages {
            let (mut t, h, w) = stage.merge.forward_tokens(&x)?;
            for block in &stage.blocks {
                t = block.forward(&t, h, w)?;
            }
            x = tokens_to_grid(&stage.norm.forward(&t)?, h, w)?;
            outs.push(x.clone());
        }
        Ok(StageFeatures { stages: outs })
    }
}
