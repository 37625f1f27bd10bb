//! Training-time augmentation: resize, random crop, horizontal flip,
//! photometric distortion, normalization and padding.

use serde::{Deserialize, Serialize};

use super::{LabelMap, Sample};
use crate::error::{Error, Result};
use crate::loss::IGNORE_INDEX;
use crate::tensor::{no_grad, ResizeMode, Rng, Tensor};

/// Photometric jitter ranges, in 0..255 pixel units and degrees of hue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhotometricSpec {
    pub brightness_delta: f32,
    pub contrast_range: [f32; 2],
    pub saturation_range: [f32; 2],
    pub hue_delta: f32,
    /// Probability of applying each of the four distortions.
    pub prob: f64,
}

impl Default for PhotometricSpec {
    fn default() -> Self {
        Self {
            brightness_delta: 32.0,
            contrast_range: [0.5, 1.5],
            saturation_range: [0.5, 1.5],
            hue_delta: 18.0,
            prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugSpec {
    /// Random crop size `[h, w]`; `None` keeps the full (resized) image.
    pub crop: Option<[usize; 2]>,
    /// Random resize factor range.
    pub scale_range: [f64; 2],
    /// Draw one factor for both axes instead of one per axis.
    pub keep_aspect: bool,
    pub flip_prob: f64,
    pub photometric: Option<PhotometricSpec>,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    /// Output extents are padded up to a multiple of this.
    pub pad_divisor: usize,
}

impl Default for AugSpec {
    fn default() -> Self {
        Self {
            crop: None,
            scale_range: [0.5, 2.0],
            keep_aspect: true,
            flip_prob: 0.5,
            photometric: Some(PhotometricSpec::default()),
            mean: [123.675, 116.28, 103.53],
            std: [58.395, 57.12, 57.375],
            pad_divisor: 32,
        }
    }
}

impl AugSpec {
    /// Only normalization and padding.
    pub fn identity() -> Self {
        Self {
            scale_range: [1.0, 1.0],
            flip_prob: 0.0,
            photometric: None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!("scale_range {lo}..{hi} must be positive and ordered")));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("flip_prob must lie in [0, 1]".into()));
        }
        if self.pad_divisor == 0 || !self.pad_divisor.is_multiple_of(32) {
            return Err(Error::Config(format!("pad_divisor {} must be a positive multiple of 32", self.pad_divisor)));
        }
        if let Some([ch, cw]) = self.crop {
            if ch == 0 || cw == 0 || ch % self.pad_divisor != 0 || cw % self.pad_divisor != 0 {
                return Err(Error::Config(format!(
                    "crop {ch}x{cw} must be a positive multiple of {}",
                    self.pad_divisor
                )));
            }
        }
        if self.std.iter().any(|s| *s <= 0.0) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        if let Some(p) = &self.photometric {
            if p.contrast_range[0] > p.contrast_range[1] || p.saturation_range[0] > p.saturation_range[1] || p.contrast_range[0] < 0.0 || p.saturation_range[0] < 0.0 {
                return Err(Error::Config("photometric ranges must be ordered and non-negative".into()));
            }
        }
        Ok(())
    }
}

/// Planar RGB buffer used inside the pipeline.
struct Planes {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Planes {
    fn from_tensor(t: &Tensor<f32>) -> Self {
        Self { h: t.shape()[1], w: t.shape()[2], data: t.to_vec() }
    }

    fn into_tensor(self) -> Tensor<f32> {
        Tensor::new(&[3, self.h, self.w], self.data).expect("planar shape")
    }
}

fn nearest_index(d: usize, input: usize, output: usize) -> usize {
    (((d as f64 + 0.5) * input as f64 / output as f64) as usize).min(input - 1)
}

fn resize_label(l: &LabelMap, oh: usize, ow: usize) -> LabelMap {
    let mut ids = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = nearest_index(y, l.height(), oh);
        for x in 0..ow {
            ids.push(l.get(sy, nearest_index(x, l.width(), ow)));
        }
    }
    LabelMap { h: oh, w: ow, ids }
}

fn pad_planes(p: &Planes, oh: usize, ow: usize, value: f32) -> Planes {
    let mut data = vec![value; 3 * oh * ow];
    for c in 0..3 {
        for y in 0..p.h {
            let src = (c * p.h + y) * p.w;
            let dst = (c * oh + y) * ow;
            data[dst..dst + p.w].copy_from_slice(&p.data[src..src + p.w]);
        }
    }
    Planes { h: oh, w: ow, data }
}

fn pad_label(l: &LabelMap, oh: usize, ow: usize) -> LabelMap {
    let mut ids = vec![IGNORE_INDEX; oh * ow];
    for y in 0..l.h {
        ids[y * ow..y * ow + l.w].copy_from_slice(&l.ids[y * l.w..(y + 1) * l.w]);
    }
    LabelMap { h: oh, w: ow, ids }
}

fn crop_planes(p: &Planes, y0: usize, x0: usize, ch: usize, cw: usize) -> Planes {
    let mut data = Vec::with_capacity(3 * ch * cw);
    for c in 0..3 {
        for y in y0..y0 + ch {
            let row = (c * p.h + y) * p.w;
            data.extend_from_slice(&p.data[row + x0..row + x0 + cw]);
        }
    }
    Planes { h: ch, w: cw, data }
}

fn crop_label(l: &LabelMap, y0: usize, x0: usize, ch: usize, cw: usize) -> LabelMap {
    let mut ids = Vec::with_capacity(ch * cw);
    for y in y0..y0 + ch {
        ids.extend_from_slice(&l.ids[y * l.w + x0..y * l.w + x0 + cw]);
    }
    LabelMap { h: ch, w: cw, ids }
}

fn flip_planes(p: &mut Planes) {
    for row in p.data.chunks_mut(p.w) {
        row.reverse();
    }
}

fn flip_label(l: &mut LabelMap) {
    let w = l.w;
    for row in l.ids.chunks_mut(w) {
        row.reverse();
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

fn map_hsv(p: &mut Planes, f: impl Fn(f32, f32, f32) -> (f32, f32, f32)) {
    let n = p.h * p.w;
    for i in 0..n {
        let (h, s, v) = rgb_to_hsv(p.data[i], p.data[n + i], p.data[2 * n + i]);
        let (h, s, v) = f(h, s, v);
        let (r, g, b) = hsv_to_rgb(h, s, v);
        p.data[i] = r;
        p.data[n + i] = g;
        p.data[2 * n + i] = b;
    }
}

fn photometric(p: &mut Planes, spec: &PhotometricSpec, rng: &mut Rng) {
    let mut order = [0usize, 1, 2, 3];
    rng.shuffle(&mut order);
    for op in order {
        let apply = rng.bernoulli(spec.prob);
        match op {
            0 => {
                let delta = rng.range(-spec.brightness_delta as f64, spec.brightness_delta as f64) as f32;
                if apply {
                    p.data.iter_mut().for_each(|v| *v += delta);
                }
            }
            1 => {
                let [lo, hi] = spec.contrast_range;
                let alpha = rng.range(lo as f64, hi as f64) as f32;
                if apply {
                    p.data.iter_mut().for_each(|v| *v *= alpha);
                }
            }
            2 => {
                let [lo, hi] = spec.saturation_range;
                let alpha = rng.range(lo as f64, hi as f64) as f32;
                if apply {
                    map_hsv(p, |h, s, v| (h, (s * alpha).clamp(0.0, 1.0), v));
                }
            }
            _ => {
                let delta = rng.range(-spec.hue_delta as f64, spec.hue_delta as f64) as f32;
                if apply {
                    map_hsv(p, |h, s, v| (h + delta, s, v));
                }
            }
        }
        p.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 255.0));
    }
}

/// Per-channel `(x − mean) / std` of a `[3,H,W]` image.
pub fn normalize_image(img: &Tensor<f32>, mean: &[f32; 3], std: &[f32; 3]) -> Tensor<f32> {
    let plane = img.shape()[1] * img.shape()[2];
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let c = i / plane;
            (v - mean[c]) / std[c]
        })
        .collect();
    Tensor::new(img.shape(), data).expect("same shape")
}

/// Pad bottom/right so both extents are multiples of `divisor`.
pub fn pad_to_multiple(s: &Sample, divisor: usize) -> Sample {
    let up = |n: usize| n.div_ceil(divisor) * divisor;
    let (oh, ow) = (up(s.height()), up(s.width()));
    if (oh, ow) == (s.height(), s.width()) {
        return s.clone();
    }
    let img = pad_planes(&Planes::from_tensor(&s.image), oh, ow, 0.0).into_tensor();
    Sample { id: s.id.clone(), image: img, label: pad_label(&s.label, oh, ow) }
}

/// Resize → crop → flip → photometric → normalize → pad, deterministic in `rng`.
pub fn augment(s: &Sample, spec: &AugSpec, rng: &mut Rng) -> Result<Sample> {
    spec.validate()?;
    let (h, w) = (s.height(), s.width());

    let [lo, hi] = spec.scale_range;
    let sy = rng.range(lo, hi);
    let sx = if spec.keep_aspect { sy } else { rng.range(lo, hi) };
    let oh = ((h as f64 * sy).round() as usize).max(1);
    let ow = ((w as f64 * sx).round() as usize).max(1);
    let (mut img, mut label) = if (oh, ow) == (h, w) {
        (Planes::from_tensor(&s.image), s.label.clone())
    } else {
        let t = no_grad(|| s.image.bilinear_resize(oh, ow, ResizeMode::HalfPixel))?;
        (Planes::from_tensor(&t), resize_label(&s.label, oh, ow))
    };

    if let Some([ch, cw]) = spec.crop {
        if img.h < ch || img.w < cw {
            let (ph, pw) = (img.h.max(ch), img.w.max(cw));
            img = pad_planes(&img, ph, pw, 0.0);
            label = pad_label(&label, ph, pw);
        }
        let y0 = rng.below(img.h - ch + 1);
        let x0 = rng.below(img.w - cw + 1);
        img = crop_planes(&img, y0, x0, ch, cw);
        label = crop_label(&label, y0, x0, ch, cw);
    }

    if rng.bernoulli(spec.flip_prob) {
        flip_planes(&mut img);
        flip_label(&mut label);
    }

    if let Some(p) = &spec.photometric {
        photometric(&mut img, p, rng);
    }

    let normalized = normalize_image(&img.into_tensor(), &spec.mean, &spec.std);
    let out = Sample { id: s.id.clone(), image: normalized, label };
    Ok(pad_to_multiple(&out, spec.pad_divisor))
}
