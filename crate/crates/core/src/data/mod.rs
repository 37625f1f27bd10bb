//! Dataset ingestion, label maps and the class-distribution analyzer.
//!
//! On-disk layout:
//!
//! ```text
//! root/images/<split>/<stem>.png       8-bit RGB
//! root/annotations/<split>/<stem>.png  8-bit single channel, value = class id, 255 = ignore
//! ```

mod augment;
pub mod synthetic;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{ColorType, GrayImage, ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, ItemError, Result};
use crate::loss::IGNORE_INDEX;
use crate::tensor::Tensor;
use crate::NUM_CLASSES;

pub use augment::{augment, normalize_image, pad_to_multiple, AugSpec, PhotometricSpec};

/// Per-pixel class ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    h: usize,
    w: usize,
    ids: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, ids: Vec<u8>) -> Result<Self> {
        if h == 0 || w == 0 || ids.len() != h * w {
            return Err(Error::Data(format!(
                "label map {h}x{w} needs {} ids, got {}",
                h * w,
                ids.len()
            )));
        }
        Ok(Self { h, w, ids })
    }

    pub fn filled(h: usize, w: usize, id: u8) -> Self {
        Self { h, w, ids: vec![id; h * w] }
    }

    pub fn from_predictions(h: usize, w: usize, classes: &[usize]) -> Result<Self> {
        let ids = classes
            .iter()
            .map(|&c| {
                u8::try_from(c)
                    .ok()
                    .filter(|&c| c != IGNORE_INDEX)
                    .ok_or_else(|| Error::Data(format!("predicted class {c} does not fit a label map")))
            })
            .collect::<Result<_>>()?;
        Self::new(h, w, ids)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.ids[y * self.w + x]
    }

    /// First id that is neither a valid class nor the ignore id.
    pub fn invalid_id(&self, num_classes: usize) -> Option<u8> {
        self.ids
            .iter()
            .copied()
            .find(|&id| id != IGNORE_INDEX && id as usize >= num_classes)
    }
}

/// An image with its label map. `image` is `[3, H, W]`.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub label: LabelMap,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, label: LabelMap) -> Result<Self> {
        let id = id.into();
        if image.rank() != 3 || image.shape()[0] != 3 || image.shape()[1] != label.height() || image.shape()[2] != label.width() {
            return Err(Error::Data(format!(
                "sample {id}: image {:?} does not match label {}x{}",
                image.shape(),
                label.height(),
                label.width()
            )));
        }
        if let Some(bad) = label.invalid_id(NUM_CLASSES) {
            return Err(Error::Data(format!(
                "sample {id}: label id {bad} is outside 0..{NUM_CLASSES} and not {IGNORE_INDEX}"
            )));
        }
        Ok(Self { id, image, label })
    }

    pub fn height(&self) -> usize {
        self.label.height()
    }

    pub fn width(&self) -> usize {
        self.label.width()
    }
}

pub fn images_dir(root: &Path, split: &str) -> PathBuf {
    root.join("images").join(split)
}

pub fn annotations_dir(root: &Path, split: &str) -> PathBuf {
    root.join("annotations").join(split)
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32;
        }
    }
    Tensor::new(&[3, h, w], data).expect("rgb shape")
}

/// `[3,H,W]` values in 0..=255 to an RGB image, rounding and clamping.
pub fn tensor_to_rgb(t: &Tensor<f32>) -> RgbImage {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let d = t.data();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| d[(c * h + y as usize) * w + x as usize].round().clamp(0.0, 255.0) as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.into(), source: e })?;
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

pub fn read_label(path: &Path) -> Result<LabelMap> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.into(), source: e })?;
    if img.color() != ColorType::L8 {
        return Err(Error::Data(format!(
            "{}: label must be single-channel 8-bit, found {:?}",
            path.display(),
            img.color()
        )));
    }
    let g = img.into_luma8();
    LabelMap::new(g.height() as usize, g.width() as usize, g.into_raw())
}

pub fn write_label(path: &Path, label: &LabelMap) -> Result<()> {
    let img = GrayImage::from_raw(label.width() as u32, label.height() as u32, label.ids().to_vec())
        .expect("label buffer size");
    img.save(path).map_err(|e| Error::Image { path: path.into(), source: e })
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path).map_err(|e| Error::Image { path: path.into(), source: e })
}

/// Store samples in the dataset layout under `root/{images,annotations}/split`.
pub fn write_dataset(root: &Path, split: &str, samples: &[Sample]) -> Result<()> {
    let (idir, adir) = (images_dir(root, split), annotations_dir(root, split));
    for d in [&idir, &adir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for s in samples {
        write_rgb(&idir.join(format!("{}.png", s.id)), &tensor_to_rgb(&s.image))?;
        write_label(&adir.join(format!("{}.png", s.id)), &s.label)?;
    }
    Ok(())
}

/// Load every image/label pair of a split, ordered by stem.
///
/// All problems are collected and reported together.
pub fn load_dataset(root: &Path, split: &str) -> Result<Vec<Sample>> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset root {} is not a directory", root.display())));
    }
    let images = png_stems(&images_dir(root, split))?;
    let labels = png_stems(&annotations_dir(root, split))?;
    let mut errors = Vec::new();
    for (stem, path) in &labels {
        if !images.contains_key(stem) {
            errors.push(ItemError { path: path.clone(), reason: "annotation has no matching image".into() });
        }
    }
    let mut samples = Vec::with_capacity(images.len());
    for (stem, ipath) in &images {
        let Some(lpath) = labels.get(stem) else {
            errors.push(ItemError { path: ipath.clone(), reason: "image has no matching annotation".into() });
            continue;
        };
        let loaded = read_image(ipath).and_then(|img| {
            let label = read_label(lpath)?;
            Sample::new(stem.clone(), img, label)
        });
        match loaded {
            Ok(s) => samples.push(s),
            Err(e) => errors.push(ItemError { path: lpath.clone(), reason: e.to_string() }),
        }
    }
    if errors.is_empty() {
        Ok(samples)
    } else {
        Err(Error::Load(errors))
    }
}

/// Pixel counts per class over non-ignored pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassHistogram {
    pub counts: Vec<u64>,
    pub total: u64,
}

pub fn class_pixel_distribution<'a>(labels: impl IntoIterator<Item = &'a LabelMap>) -> ClassHistogram {
    let mut counts = vec![0u64; NUM_CLASSES];
    for label in labels {
        for &id in label.ids() {
            if (id as usize) < NUM_CLASSES {
                counts[id as usize] += 1;
            }
        }
    }
    let total = counts.iter().sum();
    ClassHistogram { counts, total }
}
