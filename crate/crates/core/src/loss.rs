//! Per-pixel class-weighted cross-entropy, online hard example mining and the
//! main + auxiliary loss composition.

use serde::{Deserialize, Serialize};

use crate::data::LabelMap;
use crate::decoder::SegOutput;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const IGNORE_INDEX: u8 = 255;

/// Per-class loss multipliers, normalized to mean 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    /// Effective-number smoothing; `None` for inverse-frequency weights.
    pub beta: Option<f64>,
}

fn normalize_with_fill(raw: Vec<Option<f64>>) -> Vec<f64> {
    let max = raw.iter().flatten().copied().fold(f64::MIN, f64::max);
    let filled: Vec<f64> = raw.into_iter().map(|w| w.unwrap_or(max)).collect();
    let mean = filled.iter().sum::<f64>() / filled.len() as f64;
    filled.into_iter().map(|w| w / mean).collect()
}

fn require_counts(counts: &[u64]) -> Result<()> {
    if counts.is_empty() || counts.iter().all(|&c| c == 0) {
        return Err(Error::Data(
            "class-balanced weights need at least one labelled pixel".into(),
        ));
    }
    Ok(())
}

/// Effective-number weighting: `(1 − β) / (1 − βⁿ)` per class, absent
/// classes take the largest weight, then mean-normalized.
pub fn class_balanced_weights(counts: &[u64], beta: f64) -> Result<ClassWeights> {
    require_counts(counts)?;
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::Config(format!("beta must lie in [0, 1), got {beta}")));
    }
    let raw = counts
        .iter()
        .map(|&n| {
            (n > 0).then(|| {
                // (1-β)/(1-β^n) with β^n computed as exp(n·ln β) to stay stable for huge n
                let bn = if beta == 0.0 { 0.0 } else { (n as f64 * beta.ln()).exp() };
                (1.0 - beta) / (1.0 - bn)
            })
        })
        .collect();
    Ok(ClassWeights {
        weights: normalize_with_fill(raw),
        beta: Some(beta),
    })
}

/// `w_c ∝ total / (K · n_c)`, absent classes take the largest weight.
pub fn inverse_frequency_weights(counts: &[u64]) -> Result<ClassWeights> {
    require_counts(counts)?;
    let total: u64 = counts.iter().sum();
    let k = counts.len() as f64;
    let raw = counts
        .iter()
        .map(|&n| (n > 0).then(|| total as f64 / (k * n as f64)))
        .collect();
    Ok(ClassWeights {
        weights: normalize_with_fill(raw),
        beta: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OhemConfig {
    /// Pixels whose true-class probability is below this are always kept.
    pub thresh: f64,
    /// Lower bound on the number of kept pixels.
    pub min_kept: usize,
}

impl Default for OhemConfig {
    fn default() -> Self {
        Self {
            thresh: 0.5,
            min_kept: 10_000,
        }
    }
}

impl OhemConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.thresh > 0.0 && self.thresh < 1.0) {
            return Err(Error::Config(format!("ohem thresh must lie in (0, 1), got {}", self.thresh)));
        }
        if self.min_kept == 0 {
            return Err(Error::Config("ohem min_kept must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub main_weight: f64,
    pub aux_weight: f64,
    pub ignore_index: u8,
    pub class_weights: Option<ClassWeights>,
    pub ohem: Option<OhemConfig>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            main_weight: 1.0,
            aux_weight: 0.4,
            ignore_index: IGNORE_INDEX,
            class_weights: None,
            ohem: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.main_weight >= 0.0 && self.aux_weight >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if let Some(o) = &self.ohem {
            o.validate()?;
        }
        Ok(())
    }
}

/// Result of [`pixel_ce`].
#[derive(Debug, Clone)]
pub struct PixelLoss<T: Scalar> {
    /// `[H, W]`, zero on ignored pixels.
    pub per_pixel: Tensor<T>,
    /// Softmax probability of the true class; 0 on ignored pixels.
    pub true_prob: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Weighted softmax cross-entropy per pixel of `[K, H, W]` logits.
pub fn pixel_ce<T: Scalar>(
    logits: &Tensor<T>,
    labels: &LabelMap,
    weights: Option<&[f64]>,
    ignore_index: u8,
) -> Result<PixelLoss<T>> {
    if logits.rank() != 3 || logits.shape()[1..] != [labels.height(), labels.width()] {
        return Err(Error::dim(
            "pixel_ce",
            format!(
                "logits {:?} do not match a {}x{} label map",
                logits.shape(),
                labels.height(),
                labels.width()
            ),
        ));
    }
    let k = logits.shape()[0];
    if let Some(w) = weights {
        if w.len() != k {
            return Err(Error::Config(format!("{} class weights for {k} classes", w.len())));
        }
    }
    let plane = labels.len();
    let mut targets: Vec<Option<usize>> = Vec::with_capacity(plane);
    for (i, &id) in labels.ids().iter().enumerate() {
        if id == ignore_index {
            targets.push(None);
        } else if (id as usize) < k {
            targets.push(Some(id as usize));
        } else {
            return Err(Error::Data(format!(
                "label id {id} at pixel {i} is outside 0..{k} and is not the ignore id {ignore_index}"
            )));
        }
    }

    let z = logits.data();
    let mut loss = vec![T::zero(); plane];
    let mut true_prob = vec![0.0; plane];
    let weight_of = |c: usize| weights.map_or(1.0, |w| w[c]);
    for (p, t) in targets.iter().enumerate() {
        let Some(y) = *t else { continue };
        let mx = (0..k).map(|c| z[c * plane + p].as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + (0..k).map(|c| (z[c * plane + p].as_f64() - mx).exp()).sum::<f64>().ln();
        let nll = lse - z[y * plane + p].as_f64();
        loss[p] = T::of(weight_of(y) * nll);
        true_prob[p] = (-nll).exp();
    }

    let weights_owned: Option<Vec<f64>> = weights.map(<[f64]>::to_vec);
    let valid: Vec<bool> = targets.iter().map(Option::is_some).collect();
    let per_pixel = Tensor::from_op(
        vec![labels.height(), labels.width()],
        loss,
        vec![logits.clone()],
        move |ctx| {
            let z = ctx.inputs[0].data();
            let mut gz = vec![T::zero(); z.len()];
            for (p, t) in targets.iter().enumerate() {
                let Some(y) = *t else { continue };
                let g = ctx.grad[p];
                if g == T::zero() {
                    continue;
                }
                let scale = g * T::of(weights_owned.as_ref().map_or(1.0, |w| w[y]));
                let mx = (0..k).map(|c| z[c * plane + p]).fold(T::neg_infinity(), T::max);
                let total: T = (0..k).map(|c| (z[c * plane + p] - mx).exp()).sum();
                for c in 0..k {
                    let prob = (z[c * plane + p] - mx).exp() / total;
                    let onehot = if c == y { T::one() } else { T::zero() };
                    gz[c * plane + p] = scale * (prob - onehot);
                }
            }
            vec![Some(gz)]
        },
    );
    Ok(PixelLoss { per_pixel, true_prob, valid })
}

/// Keep every valid pixel whose true-class probability is below `thresh`;
/// top up with the highest-loss remaining valid pixels (ties by index) until
/// `min(min_kept, #valid)` are kept.
pub fn ohem_select(per_pixel_loss: &[f64], true_prob: &[f64], cfg: &OhemConfig, valid: &[bool]) -> Vec<bool> {
    let mut keep: Vec<bool> = valid
        .iter()
        .zip(true_prob)
        .map(|(&v, &p)| v && p < cfg.thresh)
        .collect();
    let kept = keep.iter().filter(|&&k| k).count();
    let n_valid = valid.iter().filter(|&&v| v).count();
    let target = cfg.min_kept.min(n_valid);
    if kept < target {
        let mut rest: Vec<usize> = (0..valid.len()).filter(|&i| valid[i] && !keep[i]).collect();
        rest.sort_by(|&a, &b| per_pixel_loss[b].total_cmp(&per_pixel_loss[a]).then(a.cmp(&b)));
        for &i in rest.iter().take(target - kept) {
            keep[i] = true;
        }
    }
    keep
}

/// Scalar training objective and its parts.
#[derive(Debug, Clone)]
pub struct LossTotal<T: Scalar> {
    pub value: Tensor<T>,
    pub main: f64,
    pub aux: Option<f64>,
    pub kept: usize,
    /// Set when no pixel survived selection; the main term is then 0.
    pub degenerate: bool,
}

fn masked_mean<T: Scalar>(x: &Tensor<T>, mask: &[bool]) -> Result<(Tensor<T>, usize)> {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Ok((Tensor::scalar(T::zero()), 0));
    }
    let inv = T::of(1.0 / n as f64);
    let w: Vec<T> = mask.iter().map(|&m| if m { inv } else { T::zero() }).collect();
    Ok((x.weighted_sum(&w)?, n))
}

/// `main_weight · mean(main over kept) + aux_weight · mean(aux over valid)`.
pub fn total_loss<T: Scalar>(
    main: &PixelLoss<T>,
    aux: Option<&PixelLoss<T>>,
    keep: &[bool],
    cfg: &LossConfig,
) -> Result<LossTotal<T>> {
    if keep.len() != main.valid.len() {
        return Err(Error::dim("total_loss", "keep mask size differs from the loss map"));
    }
    if keep.iter().zip(&main.valid).any(|(&k, &v)| k && !v) {
        return Err(Error::Contract("keep mask selects ignored pixels".into()));
    }
    let (main_mean, kept) = masked_mean(&main.per_pixel, keep)?;
    let degenerate = kept == 0;
    if degenerate {
        log::warn!("no pixels kept for the main loss; contributing 0");
    }
    let mut value = main_mean.scale(cfg.main_weight);
    let mut aux_value = None;
    if let Some(aux) = aux {
        let (aux_mean, _) = masked_mean(&aux.per_pixel, &aux.valid)?;
        aux_value = Some(aux_mean.item().as_f64());
        value = value.add(&aux_mean.scale(cfg.aux_weight))?;
    }
    Ok(LossTotal {
        main: main_mean.item().as_f64(),
        value,
        aux: aux_value,
        kept,
        degenerate,
    })
}

/// Full objective for one model output against one label map.
pub fn segmentation_loss<T: Scalar>(out: &SegOutput<T>, labels: &LabelMap, cfg: &LossConfig) -> Result<LossTotal<T>> {
    let weights = cfg.class_weights.as_ref().map(|w| w.weights.as_slice());
    let main = pixel_ce(&out.logits, labels, weights, cfg.ignore_index)?;
    let keep = match &cfg.ohem {
        Some(ohem) => {
            let losses = main.per_pixel.to_f64_vec();
            ohem_select(&losses, &main.true_prob, ohem, &main.valid)
        }
        None => main.valid.clone(),
    };
    let aux = match &out.aux_logits {
        Some(a) => Some(pixel_ce(a, labels, weights, cfg.ignore_index)?),
        None => None,
    };
    total_loss(&main, aux.as_ref(), &keep, cfg)
}
