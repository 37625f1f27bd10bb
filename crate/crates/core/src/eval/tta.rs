use crate::decoder::{SegModel, UPSAMPLE_MODE};
use crate::error::{Error, Result};
use crate::tensor::{no_grad, Scalar, Tensor};

/// One resized (and optionally mirrored) pass: class probabilities at the
/// original `H × W`.
fn scale_pass<T: Scalar>(model: &SegModel<T>, image: &Tensor<T>, scale: f64, flip: bool) -> Result<Tensor<T>> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let sh = ((h as f64 * scale).round() as usize).max(1);
    let sw = ((w as f64 * scale).round() as usize).max(1);
    let mut x = image.bilinear_resize(sh, sw, UPSAMPLE_MODE)?;
    if flip {
        x = x.flip_last();
    }
    let stride = model.cfg.encoder.total_stride();
    let (ph, pw) = (sh.div_ceil(stride) * stride, sw.div_ceil(stride) * stride);
    if (ph, pw) != (sh, sw) {
        x = x.pad_bottom_right(ph - sh, pw - sw, T::zero())?;
    }
    let mut logits = model.forward_full(&x)?.logits;
    if (ph, pw) != (sh, sw) {
        logits = logits.crop_top_left(sh, sw)?;
    }
    let mut probs = logits.softmax(0)?;
    if flip {
        probs = probs.flip_last();
    }
    probs.bilinear_resize(h, w, UPSAMPLE_MODE)
}

/// Mean of softmax score maps over every scale (and its mirror when `flip`).
pub fn multi_scale_predict<T: Scalar>(model: &SegModel<T>, image: &Tensor<T>, scales: &[f64], flip: bool) -> Result<Tensor<T>> {
    if scales.is_empty() {
        return Err(Error::Config("multi-scale prediction needs at least one scale".into()));
    }
    if let Some(s) = scales.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::Config(format!("scale {s} must be positive")));
    }
    if image.rank() != 3 {
        return Err(Error::dim("multi_scale_predict", format!("expected [3,H,W], got {:?}", image.shape())));
    }
    no_grad(|| {
        let mut acc: Option<Vec<T>> = None;
        let mut n = 0usize;
        let mut shape = Vec::new();
        for &s in scales {
            for mirrored in [false, true] {
                if mirrored && !flip {
                    continue;
                }
                let p = scale_pass(model, image, s, mirrored)?;
                shape = p.shape().to_vec();
                match acc.as_mut() {
                    None => acc = Some(p.to_vec()),
                    Some(a) => a.iter_mut().zip(p.data()).for_each(|(x, y)| *x += *y),
                }
                n += 1;
            }
        }
        let inv = T::of(n as f64);
        let data = acc.expect("at least one pass").into_iter().map(|v| v / inv).collect();
        Tensor::new(&shape, data)
    })
}
