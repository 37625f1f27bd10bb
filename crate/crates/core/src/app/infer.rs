use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use super::{create_dir, prepare_input, resolve_out_dir};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{load_dataset, read_image, tensor_to_rgb, write_label, write_rgb, LabelMap, Sample};
use crate::decoder::SegModel;
use crate::error::{Error, Result};
use crate::eval::{multi_scale_predict, ConfusionMatrix, IoUReport};
use crate::palette::Palette;
use crate::tensor::Tensor;

pub fn load_model(path: &Path) -> Result<(Checkpoint, SegModel<f32>)> {
    let ck = Checkpoint::load(path)?;
    let model = ck.build_model()?;
    Ok((ck, model))
}

/// Class probabilities `[K,H,W]` for a raw 0..255 image.
pub fn score_image(
    model: &SegModel<f32>,
    run: Option<&RunConfig>,
    image: &Tensor<f32>,
    scales: &[f64],
    flip: bool,
) -> Result<Tensor<f32>> {
    multi_scale_predict(model, &prepare_input(image, run), scales, flip)
}

pub fn predict_label(
    model: &SegModel<f32>,
    run: Option<&RunConfig>,
    image: &Tensor<f32>,
    scales: &[f64],
    flip: bool,
) -> Result<LabelMap> {
    let scores = score_image(model, run, image, scales, flip)?;
    let (h, w) = (scores.shape()[1], scores.shape()[2]);
    LabelMap::from_predictions(h, w, &scores.argmax_axis0()?)
}

/// Confusion matrix of `model` over `samples`.
pub fn evaluate(
    model: &SegModel<f32>,
    run: Option<&RunConfig>,
    samples: &[Sample],
    scales: &[f64],
    flip: bool,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.num_classes());
    for s in samples {
        let pred = predict_label(model, run, &s.image, scales, flip)?;
        cm.update(&pred, &s.label)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Default)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    /// Dataset root; defaults to the one recorded in the checkpoint.
    pub data: Option<PathBuf>,
    pub split: Option<String>,
    pub scales: Option<Vec<f64>>,
    pub flip: Option<bool>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: IoUReport,
    pub confusion: ConfusionMatrix,
    pub out_dir: PathBuf,
    pub samples: usize,
}

pub const IOU_CSV: &str = "iou.csv";
pub const SUMMARY_TXT: &str = "summary.txt";

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalOutcome> {
    let (ck, model) = load_model(&args.checkpoint)?;
    let run = ck.run.as_ref();
    let root = args
        .data
        .clone()
        .or_else(|| run.map(|r| r.data.root.clone()))
        .ok_or_else(|| Error::Config("no dataset given and none recorded in the checkpoint".into()))?;
    let split = args
        .split
        .clone()
        .or_else(|| run.map(|r| r.data.val_split.clone()))
        .unwrap_or_else(|| "val".into());
    let scales = args
        .scales
        .clone()
        .or_else(|| run.map(|r| r.eval.scales.clone()))
        .unwrap_or_else(|| vec![1.0]);
    if scales.is_empty() || scales.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Config("scales must be a non-empty list of positive numbers".into()));
    }
    let flip = args.flip.or_else(|| run.map(|r| r.eval.flip)).unwrap_or(false);
    let samples = load_dataset(&root, &split)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("split {split} under {} has no samples", root.display())));
    }

    let cm = evaluate(&model, run, &samples, &scales, flip)?;
    let report = cm.iou_report();
    let default_dir = args.checkpoint.parent().unwrap_or(Path::new(".")).join("eval");
    let out = resolve_out_dir(args.out.as_deref(), &default_dir);
    create_dir(&out)?;
    report.write_csv(&out.join(IOU_CSV))?;
    let mut summary = report.summary();
    summary.push_str(&format!(
        "split: {split} ({} images)\nscales: {scales:?}\nflip: {flip}\n",
        samples.len()
    ));
    let path = out.join(SUMMARY_TXT);
    std::fs::write(&path, summary).map_err(|e| Error::io(&path, e))?;
    Ok(EvalOutcome { report, confusion: cm, out_dir: out, samples: samples.len() })
}

#[derive(Debug, Clone, Default)]
pub struct PredictArgs {
    pub checkpoint: PathBuf,
    pub image: PathBuf,
    /// Label-map PNG to write.
    pub out: PathBuf,
    pub overlay: Option<PathBuf>,
    pub palette: Option<PathBuf>,
    pub scales: Option<Vec<f64>>,
    pub flip: bool,
}

/// Blend palette colours over the image: `(1 − alpha)·image + alpha·colour`.
pub fn overlay(image: &RgbImage, label: &LabelMap, palette: &Palette, alpha: f32) -> RgbImage {
    RgbImage::from_fn(image.width(), image.height(), |x, y| {
        let base = image.get_pixel(x, y).0;
        let c = palette.color(label.get(y as usize, x as usize));
        let mix = |i: usize| ((1.0 - alpha) * base[i] as f32 + alpha * c[i] as f32).round() as u8;
        Rgb([mix(0), mix(1), mix(2)])
    })
}

pub fn cmd_predict(args: &PredictArgs) -> Result<LabelMap> {
    let palette = match &args.palette {
        Some(p) => Palette::load(p)?,
        None => Palette::cityscapes(),
    };
    let (ck, model) = load_model(&args.checkpoint)?;
    let image = read_image(&args.image)?;
    let scales = args.scales.clone().unwrap_or_else(|| vec![1.0]);
    let label = predict_label(&model, ck.run.as_ref(), &image, &scales, args.flip)?;
    for p in std::iter::once(&args.out).chain(args.overlay.as_ref()) {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
    }
    write_label(&args.out, &label)?;
    if let Some(p) = &args.overlay {
        write_rgb(p, &overlay(&tensor_to_rgb(&image), &label, &palette, 0.5))?;
    }
    Ok(label)
}
