use std::path::Path;

use image::{Rgb, RgbImage};

use super::create_dir;
use crate::data::{class_pixel_distribution, load_dataset, synthetic, write_dataset, ClassHistogram};
use crate::error::{Error, Result};
use crate::eval::{count_cost, CostReport};
use crate::palette::{class_name, Palette};
use crate::variants::load_variant;

pub const HISTOGRAM_CSV: &str = "class_distribution.csv";
pub const HISTOGRAM_PNG: &str = "class_distribution.png";

const BAR_W: u32 = 20;
const GAP: u32 = 6;
const MARGIN: u32 = 12;
const PLOT_H: u32 = 200;

/// `class_id,class_name,pixels,fraction` rows.
pub fn write_histogram_csv(h: &ClassHistogram, path: &Path) -> Result<()> {
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["class_id", "class_name", "pixels", "fraction"]).map_err(err)?;
    for (c, &n) in h.counts.iter().enumerate() {
        let frac = if h.total == 0 { 0.0 } else { n as f64 / h.total as f64 };
        w.write_record([c.to_string(), class_name(c), n.to_string(), format!("{frac:.6}")])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One palette-coloured bar per class, heights relative to the largest.
pub fn render_histogram(h: &ClassHistogram, palette: &Palette) -> RgbImage {
    let k = h.counts.len() as u32;
    let width = 2 * MARGIN + k * BAR_W + k.saturating_sub(1) * GAP;
    let height = PLOT_H + 2 * MARGIN;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let max = h.counts.iter().copied().max().unwrap_or(0).max(1);
    let base = MARGIN + PLOT_H;
    for (c, &n) in h.counts.iter().enumerate() {
        let bar = ((n as f64 / max as f64) * PLOT_H as f64).round() as u32;
        let bar = if n > 0 { bar.max(1) } else { 0 };
        let x0 = MARGIN + c as u32 * (BAR_W + GAP);
        let color = Rgb(palette.color(c as u8));
        for x in x0..x0 + BAR_W {
            for y in base - bar..base {
                img.put_pixel(x, y, color);
            }
        }
    }
    for x in MARGIN / 2..width - MARGIN / 2 {
        img.put_pixel(x, base, Rgb([0, 0, 0]));
    }
    img
}

pub fn cmd_analyze(data: &Path, split: &str, out: &Path) -> Result<ClassHistogram> {
    let samples = load_dataset(data, split)?;
    let hist = class_pixel_distribution(samples.iter().map(|s| &s.label));
    create_dir(out)?;
    write_histogram_csv(&hist, &out.join(HISTOGRAM_CSV))?;
    let png = out.join(HISTOGRAM_PNG);
    render_histogram(&hist, &Palette::cityscapes())
        .save(&png)
        .map_err(|e| Error::Image { path: png.clone(), source: e })?;
    Ok(hist)
}

pub fn cmd_cost(variant: &str, h: usize, w: usize) -> Result<CostReport> {
    count_cost(&load_variant(variant)?, h, w)
}

/// Write a synthetic block-mosaic split and return the number of samples.
pub fn cmd_synth(root: &Path, split: &str, spec: &synthetic::SyntheticSpec) -> Result<usize> {
    if spec.count == 0 || spec.height == 0 || spec.width == 0 || spec.block == 0 || spec.classes.is_empty() {
        return Err(Error::Config("synthetic spec needs positive count, extents, block and a class pool".into()));
    }
    if let Some(c) = spec.classes.iter().find(|&&c| c as usize >= crate::NUM_CLASSES) {
        return Err(Error::Config(format!("synthetic class {c} is outside 0..{}", crate::NUM_CLASSES)));
    }
    let samples = synthetic::generate(spec)?;
    write_dataset(root, split, &samples)?;
    Ok(samples.len())
}
