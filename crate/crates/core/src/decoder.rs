//! All-MLP decode head, FCN auxiliary head and the full segmentation model.

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, FeaturePyramid, MixTransformer};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, LayerNorm, Linear};
use crate::params::{Init, ParamStore};
use crate::tensor::{Conv2dGeometry, ResizeMode, Rng, Scalar, Tensor};

/// Resampling convention for every feature and logit upsample.
pub const UPSAMPLE_MODE: ResizeMode = ResizeMode::HalfPixel;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Common channel width `C` the pyramid levels are projected to.
    pub unify_dim: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// Layer norm + ReLU after the fusion linear. Off gives the bare
    /// four-linear head.
    #[serde(default = "default_true")]
    pub fuse_norm_act: bool,
    /// Width of the FCN auxiliary head on level 2; `None` disables it.
    #[serde(default)]
    pub aux_channels: Option<usize>,
}

fn default_classes() -> usize {
    crate::NUM_CLASSES
}

fn default_true() -> bool {
    true
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.unify_dim == 0 {
            return Err(Error::Config("decoder unify_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.aux_channels == Some(0) {
            return Err(Error::Config("aux_channels must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder + decoder description; this is what a variant file holds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()
    }
}

/// Intermediate values of one decode, exposed for inspection.
#[derive(Debug, Clone)]
pub struct DecodeTrace<T: Scalar> {
    /// Per level, after the `C_i → C` projection, `[C, h_i, w_i]`.
    pub unified: Vec<Tensor<T>>,
    /// Per level, resampled to the level-1 grid.
    pub upsampled: Vec<Tensor<T>>,
    /// `[4C, h_1, w_1]`
    pub concat: Tensor<T>,
    /// After fusion (and norm + ReLU when enabled), `[C, h_1, w_1]`.
    pub fused: Tensor<T>,
    /// `[N_cls, h_1, w_1]`
    pub logits: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct AllMlpHead {
    pub unify: Vec<Linear>,
    pub fuse: Linear,
    pub fuse_norm: Option<LayerNorm>,
    pub classifier: Linear,
    pub cfg: DecoderConfig,
}

impl AllMlpHead {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, in_dims: &[usize], cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.unify_dim;
        let unify = in_dims
            .iter()
            .enumerate()
            .map(|(i, &d)| Linear::new(init, &format!("decoder.unify{}", i + 1), d, c))
            .collect();
        let fuse = Linear::new(init, "decoder.fuse", in_dims.len() * c, c);
        let fuse_norm = cfg
            .fuse_norm_act
            .then(|| LayerNorm::new(init, "decoder.fuse_norm", c, 1));
        let classifier = Linear::new(init, "decoder.classifier", c, cfg.num_classes);
        Ok(Self { unify, fuse, fuse_norm, classifier, cfg: cfg.clone() })
    }

    /// Decode an arbitrary number of levels; level 0 fixes the output grid.
    pub fn decode_levels<T: Scalar>(&self, p: &ParamStore<T>, levels: &[Tensor<T>]) -> Result<DecodeTrace<T>> {
        if levels.len() != self.unify.len() {
            return Err(Error::Config(format!(
                "decoder built for {} levels, got {}",
                self.unify.len(),
                levels.len()
            )));
        }
        let (h1, w1) = (levels[0].shape()[1], levels[0].shape()[2]);
        let mut unified = Vec::with_capacity(levels.len());
        let mut upsampled = Vec::with_capacity(levels.len());
        for (lin, f) in self.unify.iter().zip(levels) {
            if f.rank() != 3 || f.shape()[0] != lin.in_dim {
                return Err(Error::Config(format!(
                    "decoder level expects {} channels, got {:?}",
                    lin.in_dim,
                    f.shape()
                )));
            }
            let (h, w) = (f.shape()[1], f.shape()[2]);
            let u = lin.forward(p, &f.map_to_tokens()?)?.tokens_to_map(h, w)?;
            upsampled.push(u.bilinear_resize(h1, w1, UPSAMPLE_MODE)?);
            unified.push(u);
        }
        let concat = Tensor::concat(&upsampled, 0)?;
        let mut fused = self.fuse.forward(p, &concat.map_to_tokens()?)?;
        if let Some(norm) = &self.fuse_norm {
            fused = norm.forward(p, &fused)?.relu();
        }
        let logits = self.classifier.forward(p, &fused)?.tokens_to_map(h1, w1)?;
        Ok(DecodeTrace {
            unified,
            upsampled,
            concat,
            fused: fused.tokens_to_map(h1, w1)?,
            logits,
        })
    }

    pub fn decode<T: Scalar>(&self, p: &ParamStore<T>, pyr: &FeaturePyramid<T>) -> Result<Tensor<T>> {
        Ok(self.decode_levels(p, pyr.levels())?.logits)
    }
}

/// 3×3 conv → channel layer norm → ReLU → 1×1 conv classifier.
#[derive(Debug, Clone)]
pub struct FcnHead {
    pub conv: Conv2d,
    pub norm: LayerNorm,
    pub classifier: Conv2d,
}

impl FcnHead {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, in_ch: usize, channels: usize, num_classes: usize) -> Self {
        Self {
            conv: Conv2d::new(init, "aux.conv", in_ch, channels, 3, Conv2dGeometry::new(1, 1, 1), true),
            norm: LayerNorm::new(init, "aux.norm", channels, 0),
            classifier: Conv2d::new(init, "aux.classifier", channels, num_classes, 1, Conv2dGeometry::default(), true),
        }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, f2: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.norm.forward(p, &self.conv.forward(p, f2)?)?.relu();
        self.classifier.forward(p, &x)
    }
}

/// Main and optional auxiliary logits at full input resolution.
#[derive(Debug, Clone)]
pub struct SegOutput<T: Scalar> {
    pub logits: Tensor<T>,
    pub aux_logits: Option<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct SegModel<T: Scalar = f32> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    pub encoder: MixTransformer,
    pub decoder: AllMlpHead,
    pub aux: Option<FcnHead>,
}

impl<T: Scalar> SegModel<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = Rng::new(seed);
        let mut init = Init { store: &mut params, rng: &mut rng };
        let encoder = MixTransformer::new(&mut init, &cfg.encoder)?;
        let decoder = AllMlpHead::new(&mut init, &cfg.encoder.dims(), &cfg.decoder)?;
        let aux = cfg
            .decoder
            .aux_channels
            .map(|ch| FcnHead::new(&mut init, cfg.encoder.stages[1].embed_dim, ch, cfg.decoder.num_classes));
        Ok(Self { cfg: cfg.clone(), params, encoder, decoder, aux })
    }

    /// Build the layer structure for `cfg` and adopt externally supplied
    /// parameters, which must match by name and shape.
    pub fn from_params(cfg: &ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match the model's {}",
                params.len(),
                model.params.len()
            )));
        }
        for ((want_name, want), (name, got)) in model.params.iter().zip(params.iter()) {
            if want_name != name || want.shape() != got.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} {:?} does not match expected {want_name} {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.decoder.num_classes
    }

    pub fn encode(&self, image: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        self.encoder.encode(&self.params, image)
    }

    /// Logits on the stride-4 grid.
    pub fn decode(&self, pyr: &FeaturePyramid<T>) -> Result<Tensor<T>> {
        self.decoder.decode(&self.params, pyr)
    }

    pub fn forward_full(&self, image: &Tensor<T>) -> Result<SegOutput<T>> {
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let pyr = self.encode(image)?;
        let logits = self.decode(&pyr)?.bilinear_resize(h, w, UPSAMPLE_MODE)?;
        let aux_logits = match &self.aux {
            Some(head) => Some(head.forward(&self.params, pyr.level(2))?.bilinear_resize(h, w, UPSAMPLE_MODE)?),
            None => None,
        };
        Ok(SegOutput { logits, aux_logits })
    }

    /// Per-pixel argmax of the main head.
    pub fn predict_labels(&self, image: &Tensor<T>) -> Result<Vec<usize>> {
        crate::tensor::no_grad(|| self.forward_full(image)?.logits.argmax_axis0())
    }
}
