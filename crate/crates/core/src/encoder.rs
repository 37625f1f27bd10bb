//! Hierarchical Mix-Transformer encoder.
//!
//! Four stages, each an overlapped patch merge (strided conv whose kernel
//! exceeds its stride) followed by pre-norm transformer blocks. Attention
//! shortens keys and values with a `r × r` strided conv so the score matrix
//! is `N × N/r²`; the feed-forward path mixes in a depthwise 3×3 conv, which
//! is the only source of positional information.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Conv2d, LayerNorm, Linear};
use crate::params::{Init, ParamStore};
use crate::tensor::{Conv2dGeometry, Scalar, Tensor};

/// Hyperparameters of one encoder stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Spatial reduction `r`; keys and values are shortened by `R = r²`.
    pub sr_ratio: usize,
    pub patch_kernel: usize,
    pub patch_stride: usize,
    pub patch_pad: usize,
    pub mlp_expansion: usize,
}

impl StageConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Sequence reduction factor `R = r²`.
    pub fn reduction(&self) -> usize {
        self.sr_ratio * self.sr_ratio
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("sr_ratio", self.sr_ratio),
            ("patch_kernel", self.patch_kernel),
            ("patch_stride", self.patch_stride),
            ("mlp_expansion", self.mlp_expansion),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.patch_kernel <= self.patch_stride {
            return Err(Error::Config(format!(
                "patches do not overlap: kernel {} <= stride {}",
                self.patch_kernel, self.patch_stride
            )));
        }
        Ok(())
    }

    fn merge_geometry(&self) -> Conv2dGeometry {
        Conv2dGeometry::new(self.patch_stride, self.patch_pad, 1)
    }
}

/// Four-stage encoder description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub variant_name: String,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub stages: Vec<StageConfig>,
}

fn default_in_channels() -> usize {
    3
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 {
            return Err(Error::Config(format!(
                "encoder needs exactly 4 stages, got {}",
                self.stages.len()
            )));
        }
        let mut total = 1;
        for (i, (s, want)) in self.stages.iter().zip([4, 8, 16, 32]).enumerate() {
            s.validate()
                .map_err(|e| Error::Config(format!("stage {}: {e}", i + 1)))?;
            total *= s.patch_stride;
            // floor((H + 2p - k)/s) + 1 == H/s for every H divisible by s
            let exact = 2 * s.patch_pad < s.patch_kernel && s.patch_kernel <= 2 * s.patch_pad + s.patch_stride;
            if total != want || !exact {
                return Err(Error::Config(format!(
                    "stage {} must reduce resolution to 1/{want} (kernel {}, stride {}, pad {})",
                    i + 1,
                    s.patch_kernel,
                    s.patch_stride,
                    s.patch_pad
                )));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.embed_dim).collect()
    }

    /// Overall downsampling of the last stage.
    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.patch_stride).product()
    }
}

/// Encoder outputs at strides 4, 8, 16 and 32, each `[C_i, h_i, w_i]`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<T: Scalar = f32> {
    levels: [Tensor<T>; 4],
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn new(levels: [Tensor<T>; 4]) -> Result<Self> {
        for pair in levels.windows(2) {
            let (a, b) = (pair[0].shape(), pair[1].shape());
            if a.len() != 3 || b.len() != 3 || a[1] != 2 * b[1] || a[2] != 2 * b[2] {
                return Err(Error::Geometry(format!(
                    "pyramid levels {a:?} -> {b:?} do not halve"
                )));
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[Tensor<T>; 4] {
        &self.levels
    }

    /// Level `i` in 1..=4.
    pub fn level(&self, i: usize) -> &Tensor<T> {
        &self.levels[i - 1]
    }
}

#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub proj: Conv2d,
    pub norm: LayerNorm,
    pub cfg: StageConfig,
}

impl PatchMerge {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, in_ch: usize, cfg: &StageConfig) -> Result<Self> {
        cfg.validate()?;
        let proj = Conv2d::new(init, &format!("{name}.proj"), in_ch, cfg.embed_dim, cfg.patch_kernel, cfg.merge_geometry(), true);
        let norm = LayerNorm::new(init, &format!("{name}.norm"), cfg.embed_dim, 1);
        Ok(Self { proj, norm, cfg: cfg.clone() })
    }

    /// `[C_in,H,W] → ([h·w, C_i], h, w)`.
    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, usize, usize)> {
        let map = self.proj.forward(p, x)?;
        let (h, w) = (map.shape()[1], map.shape()[2]);
        let tokens = self.norm.forward(p, &map.map_to_tokens()?)?;
        Ok((tokens, h, w))
    }
}

/// Multi-head attention whose keys and values come from a spatially
/// reduced copy of the token map.
#[derive(Debug, Clone)]
pub struct EfficientSelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub sr: Option<(Conv2d, LayerNorm)>,
    pub dim: usize,
    pub heads: usize,
    pub sr_ratio: usize,
}

impl EfficientSelfAttention {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, dim: usize, heads: usize, sr_ratio: usize) -> Self {
        let q = Linear::new(init, &format!("{name}.q"), dim, dim);
        let k = Linear::new(init, &format!("{name}.k"), dim, dim);
        let v = Linear::new(init, &format!("{name}.v"), dim, dim);
        let proj = Linear::new(init, &format!("{name}.proj"), dim, dim);
        let sr = (sr_ratio > 1).then(|| {
            let geom = Conv2dGeometry::new(sr_ratio, 0, 1);
            (
                Conv2d::new(init, &format!("{name}.sr"), dim, dim, sr_ratio, geom, true),
                LayerNorm::new(init, &format!("{name}.sr_norm"), dim, 1),
            )
        });
        Self { q, k, v, proj, sr, dim, heads, sr_ratio }
    }

    /// Tokens from which keys and values are projected: `[N/R, C]`.
    pub fn reduced_tokens<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        if x.shape() != [h * w, self.dim] {
            return Err(Error::Geometry(format!(
                "attention expects [{}, {}] tokens for a {h}x{w} map, got {:?}",
                h * w,
                self.dim,
                x.shape()
            )));
        }
        if !h.is_multiple_of(self.sr_ratio) || !w.is_multiple_of(self.sr_ratio) {
            return Err(Error::Geometry(format!(
                "map {h}x{w} is not divisible by reduction ratio r={}",
                self.sr_ratio
            )));
        }
        match &self.sr {
            None => Ok(x.clone()),
            Some((conv, norm)) => {
                let reduced = conv.forward(p, &x.tokens_to_map(h, w)?)?;
                norm.forward(p, &reduced.map_to_tokens()?)
            }
        }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        let kv_src = self.reduced_tokens(p, x, h, w)?;
        let q = self.q.forward(p, x)?;
        let k = self.k.forward(p, &kv_src)?;
        let v = self.v.forward(p, &kv_src)?;
        let d = self.dim / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let qh = q.narrow(1, hd * d, d)?;
            let kh = k.narrow(1, hd * d, d)?;
            let vh = v.narrow(1, hd * d, d)?;
            let attn = qh.matmul(&kh.t()?)?.scale(scale).softmax(1)?;
            heads.push(attn.matmul(&vh)?);
        }
        let merged = if heads.len() == 1 {
            heads.pop().expect("one head")
        } else {
            Tensor::concat(&heads, 1)?
        };
        self.proj.forward(p, &merged)
    }
}

/// MLP → depthwise 3×3 conv → GELU → MLP.
#[derive(Debug, Clone)]
pub struct MixFfn {
    pub fc1: Linear,
    pub dwconv: Conv2d,
    pub fc2: Linear,
    pub hidden: usize,
}

impl MixFfn {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, dim: usize, expansion: usize) -> Self {
        let hidden = dim * expansion;
        Self {
            fc1: Linear::new(init, &format!("{name}.fc1"), dim, hidden),
            dwconv: Conv2d::new(init, &format!("{name}.dwconv"), hidden, hidden, 3, Conv2dGeometry::new(1, 1, hidden), true),
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, dim),
            hidden,
        }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        if x.rank() != 2 || x.shape()[0] != h * w {
            return Err(Error::Geometry(format!(
                "mix-ffn got {:?} tokens for a {h}x{w} map",
                x.shape()
            )));
        }
        let hidden = self.fc1.forward(p, x)?;
        let mixed = self.dwconv.forward(p, &hidden.tokens_to_map(h, w)?)?.gelu();
        self.fc2.forward(p, &mixed.map_to_tokens()?)
    }
}

/// Pre-norm residual block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: EfficientSelfAttention,
    pub norm2: LayerNorm,
    pub ffn: MixFfn,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cfg: &StageConfig) -> Self {
        Self {
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), cfg.embed_dim, 1),
            attn: EfficientSelfAttention::new(init, &format!("{name}.attn"), cfg.embed_dim, cfg.heads, cfg.sr_ratio),
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), cfg.embed_dim, 1),
            ffn: MixFfn::new(init, &format!("{name}.ffn"), cfg.embed_dim, cfg.mlp_expansion),
        }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        let x = x.add(&self.attn.forward(p, &self.norm1.forward(p, x)?, h, w)?)?;
        x.add(&self.ffn.forward(p, &self.norm2.forward(p, &x)?, h, w)?)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderStage {
    pub merge: PatchMerge,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct MixTransformer {
    pub cfg: EncoderConfig,
    pub stages: Vec<EncoderStage>,
}

impl MixTransformer {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut in_ch = cfg.in_channels;
        let mut stages = Vec::with_capacity(4);
        for (i, s) in cfg.stages.iter().enumerate() {
            let name = format!("encoder.stage{}", i + 1);
            let merge = PatchMerge::new(init, &format!("{name}.patch"), in_ch, s)?;
            let blocks = (0..s.depth)
                .map(|b| TransformerBlock::new(init, &format!("{name}.block{b}"), s))
                .collect();
            let norm = LayerNorm::new(init, &format!("{name}.norm"), s.embed_dim, 1);
            stages.push(EncoderStage { merge, blocks, norm });
            in_ch = s.embed_dim;
        }
        Ok(Self { cfg: cfg.clone(), stages })
    }

    pub fn encode<T: Scalar>(&self, p: &ParamStore<T>, image: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        let stride = self.cfg.total_stride();
        if image.rank() != 3 || image.shape()[0] != self.cfg.in_channels {
            return Err(Error::Geometry(format!(
                "encoder expects a [{}, H, W] image, got {:?}",
                self.cfg.in_channels,
                image.shape()
            )));
        }
        let (h, w) = (image.shape()[1], image.shape()[2]);
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::Geometry(format!(
                "input {h}x{w} is not divisible by {stride}; pad the image to a multiple of {stride}"
            )));
        }
        let mut x = image.clone();
        let mut levels = Vec::with_capacity(4);
        for stage in &self.stages {
            let (mut tokens, h, w) = stage.merge.forward(p, &x)?;
            for block in &stage.blocks {
                tokens = block.forward(p, &tokens, h, w)?;
            }
            x = stage.norm.forward(p, &tokens)?.tokens_to_map(h, w)?;
            levels.push(x.clone());
        }
        let levels: [Tensor<T>; 4] = levels.try_into().expect("four stages");
        FeaturePyramid::new(levels)
    }
}
