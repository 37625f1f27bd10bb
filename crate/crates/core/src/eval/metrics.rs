use std::io::Write;
use std::path::Path;

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::loss::IGNORE_INDEX;
use crate::palette::class_name;

/// Pixel counts indexed `[ground truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { k: num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn set(&mut self, gt: usize, pred: usize, v: u64) {
        self.counts[gt * self.k + pred] = v;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Add every non-ignored pixel of `gt` at `(gt, pred)`.
    pub fn update(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::dim(
                "update_cm",
                format!(
                    "prediction {}x{} vs ground truth {}x{}",
                    pred.height(),
                    pred.width(),
                    gt.height(),
                    gt.width()
                ),
            ));
        }
        for (&p, &g) in pred.ids().iter().zip(gt.ids()) {
            if g == IGNORE_INDEX {
                continue;
            }
            let (g, p) = (g as usize, p as usize);
            if g >= self.k || p >= self.k {
                return Err(Error::Data(format!("class pair ({g}, {p}) outside {} classes", self.k)));
            }
            self.counts[g * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::dim("merge", format!("{} vs {} classes", self.k, other.k)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn iou_report(&self) -> IoUReport {
        let k = self.k;
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..k).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..k).map(|g| self.get(g, c)).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
        IoUReport { per_class_iou: per_class, miou }
    }
}

/// Per-class IoU (absent when a class has empty union) and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct IoUReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
}

impl IoUReport {
    pub fn is_empty(&self) -> bool {
        self.miou.is_none()
    }

    /// `class_id,class_name,iou` rows; absent classes have an empty iou cell.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let werr = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
        w.write_record(["class_id", "class_name", "iou"]).map_err(werr)?;
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            let v = iou.map(|v| format!("{v:.6}")).unwrap_or_default();
            w.write_record([c.to_string(), class_name(c), v]).map_err(werr)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        match self.miou {
            Some(m) => s.push_str(&format!("mIoU: {m:.4}\n")),
            None => s.push_str("mIoU: n/a (no class present)\n"),
        }
        let present = self.per_class_iou.iter().flatten().count();
        s.push_str(&format!("classes evaluated: {present}/{}\n", self.per_class_iou.len()));
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            if let Some(v) = iou {
                s.push_str(&format!("  {:>2} {:<14} {v:.4}\n", c, class_name(c)));
            }
        }
        s
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.summary().as_bytes()).map_err(|e| Error::io(path, e))
    }
}
