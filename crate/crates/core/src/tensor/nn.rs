//! Neural-network primitives: softmax, GELU, grouped conv2d, layer norm and
//! bilinear resampling.

use super::kernels::{mm_nn, mm_nt, mm_tn};
use super::ops::split_axis;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Stride, zero padding and group count of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Default for Conv2dGeometry {
    fn default() -> Self {
        Self {
            stride: 1,
            pad: 0,
            groups: 1,
        }
    }
}

impl Conv2dGeometry {
    pub fn new(stride: usize, pad: usize, groups: usize) -> Self {
        Self { stride, pad, groups }
    }

    /// floor((n + 2·pad − k) / stride) + 1, or `None` when the window does not fit.
    pub fn output_extent(&self, n: usize, k: usize) -> Option<usize> {
        if self.stride == 0 || n + 2 * self.pad < k {
            return None;
        }
        Some((n + 2 * self.pad - k) / self.stride + 1)
    }
}

/// Sampling convention for [`Tensor::bilinear_resize`].
///
/// With `align_corners` the corner pixel centres of input and output
/// coincide: `src = dst·(in−1)/(out−1)`. Without it, pixel areas are aligned:
/// `src = (dst+0.5)·in/out − 0.5`, clamped at 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeMode {
    AlignCorners,
    HalfPixel,
}

struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

fn resize_taps(input: usize, output: usize, mode: ResizeMode) -> Taps {
    let mut taps = Taps {
        lo: Vec::with_capacity(output),
        hi: Vec::with_capacity(output),
        frac: Vec::with_capacity(output),
    };
    for d in 0..output {
        let src = match mode {
            ResizeMode::AlignCorners => {
                if output > 1 {
                    d as f64 * (input as f64 - 1.0) / (output as f64 - 1.0)
                } else {
                    0.0
                }
            }
            ResizeMode::HalfPixel => {
                ((d as f64 + 0.5) * input as f64 / output as f64 - 0.5).max(0.0)
            }
        };
        let lo = (src.floor() as usize).min(input - 1);
        let hi = (lo + 1).min(input - 1);
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.frac.push(if hi == lo { 0.0 } else { src - lo as f64 });
    }
    taps
}

fn check_finite<T: Scalar>(x: &[T], op: &str) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{op} received a non-finite input")));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::dim("softmax", format!("axis {axis} out of range for {:?}", self.shape())));
        }
        check_finite(self.data(), "softmax")?;
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let mx = (0..n).map(|i| x[idx(i)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for i in 0..n {
                    let e = (x[idx(i)] - mx).exp();
                    y[idx(i)] = e;
                    total += e;
                }
                for i in 0..n {
                    y[idx(i)] = y[idx(i)] / total;
                }
            }
        }
        Ok(Self::from_op(self.shape().to_vec(), y, vec![self.clone()], move |ctx| {
            let (y, g) = (ctx.output, ctx.grad);
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let idx = |i: usize| (o * n + i) * inner + j;
                    let dot: T = (0..n).map(|i| g[idx(i)] * y[idx(i)]).sum();
                    for i in 0..n {
                        gx[idx(i)] = y[idx(i)] * (g[idx(i)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Exact GELU, x·Φ(x) with Φ(x) = ½(1 + erf(x/√2)).
    pub fn gelu(&self) -> Self {
        let frac_1_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
        let half = T::of(0.5);
        let data = self
            .data()
            .iter()
            .map(|&x| x * half * (T::one() + (x * frac_1_sqrt2).erf()))
            .collect();
        Self::from_op(self.shape().to_vec(), data, vec![self.clone()], move |ctx| {
            let inv_sqrt_2pi = T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
            let x = ctx.inputs[0].data();
            let gx = x
                .iter()
                .zip(ctx.grad)
                .map(|(&x, &g)| {
                    let cdf = half * (T::one() + (x * frac_1_sqrt2).erf());
                    let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                    g * (cdf + x * pdf)
                })
                .collect();
            vec![Some(gx)]
        })
    }

    /// Grouped 2-D cross-correlation of a `[C_in,H,W]` map with a
    /// `[C_out, C_in/groups, kh, kw]` kernel, zero padded.
    pub fn conv2d(&self, weight: &Self, bias: Option<&Self>, geom: Conv2dGeometry) -> Result<Self> {
        if self.rank() != 3 || weight.rank() != 4 {
            return Err(Error::dim(
                "conv2d",
                format!("input {:?} / weight {:?} are not [C,H,W] / [O,I,kh,kw]", self.shape(), weight.shape()),
            ));
        }
        let (cin, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (cout, cig, kh, kw) = (weight.shape()[0], weight.shape()[1], weight.shape()[2], weight.shape()[3]);
        let g = geom.groups;
        if g == 0 || cin % g != 0 || cout % g != 0 || cin / g != cig {
            return Err(Error::dim(
                "conv2d",
                format!("{cin} input / {cout} output channels incompatible with {g} groups and weight {:?}", weight.shape()),
            ));
        }
        let (Some(oh), Some(ow)) = (geom.output_extent(h, kh), geom.output_extent(w, kw)) else {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}x{kw} with {geom:?} does not fit a {h}x{w} input"),
            ));
        };
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::dim("conv2d", format!("bias {:?} for {cout} outputs", b.shape())));
            }
        }
        let cog = cout / g;
        let kk = cig * kh * kw;
        let plane = oh * ow;
        let im = Im2col { cin, h, w, cig, kh, kw, oh, ow, stride: geom.stride, pad: geom.pad };

        let mut out = vec![T::zero(); cout * plane];
        let mut cols = vec![T::zero(); kk * plane];
        for grp in 0..g {
            im.gather(self.data(), grp, &mut cols);
            let wg = &weight.data()[grp * cog * kk..(grp + 1) * cog * kk];
            mm_nn(cog, kk, plane, wg, &cols, &mut out[grp * cog * plane..(grp + 1) * cog * plane]);
        }
        if let Some(b) = bias {
            for (o, bv) in b.data().iter().enumerate() {
                out[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += *bv);
            }
        }

        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        Ok(Self::from_op(vec![cout, oh, ow], out, inputs, move |ctx| {
            let (x, wt) = (&ctx.inputs[0], &ctx.inputs[1]);
            let gy = ctx.grad;
            let mut gx = x.requires_grad().then(|| vec![T::zero(); cin * h * w]);
            let mut gw = wt.requires_grad().then(|| vec![T::zero(); cout * kk]);
            let mut cols = vec![T::zero(); kk * plane];
            let mut gcols = vec![T::zero(); kk * plane];
            for grp in 0..g {
                let gy_g = &gy[grp * cog * plane..(grp + 1) * cog * plane];
                if let Some(gw) = gw.as_mut() {
                    im.gather(x.data(), grp, &mut cols);
                    mm_nt(cog, plane, kk, gy_g, &cols, &mut gw[grp * cog * kk..(grp + 1) * cog * kk]);
                }
                if let Some(gx) = gx.as_mut() {
                    gcols.iter_mut().for_each(|v| *v = T::zero());
                    let wg = &wt.data()[grp * cog * kk..(grp + 1) * cog * kk];
                    mm_tn(kk, cog, plane, wg, gy_g, &mut gcols);
                    im.scatter(&gcols, grp, gx);
                }
            }
            let mut grads = vec![gx, gw];
            if ctx.inputs.len() == 3 {
                grads.push(ctx.inputs[2].requires_grad().then(|| {
                    (0..cout).map(|o| gy[o * plane..(o + 1) * plane].iter().copied().sum()).collect()
                }));
            }
            grads
        }))
    }

    /// Normalize every slice along `axis` to zero mean and unit variance,
    /// then apply the per-position affine `gamma`, `beta`.
    pub fn layer_norm(&self, axis: usize, gamma: &Self, beta: &Self, eps: f64) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::dim("layer_norm", format!("axis {axis} out of range for {:?}", self.shape())));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        if gamma.shape() != [n] || beta.shape() != [n] {
            return Err(Error::dim(
                "layer_norm",
                format!("gamma {:?} / beta {:?} do not match extent {n}", gamma.shape(), beta.shape()),
            ));
        }
        let eps = T::of(eps);
        let nf = T::of(n as f64);
        let x = self.data();
        let (gm, bt) = (gamma.data(), beta.data());
        let slices = outer * inner;
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); slices];
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let mean = (0..n).map(|i| x[idx(i)]).sum::<T>() / nf;
                let var = (0..n).map(|i| (x[idx(i)] - mean).powi(2)).sum::<T>() / nf;
                let r = T::one() / (var + eps).sqrt();
                rstd[o * inner + j] = r;
                for i in 0..n {
                    let xh = (x[idx(i)] - mean) * r;
                    xhat[idx(i)] = xh;
                    y[idx(i)] = gm[i] * xh + bt[i];
                }
            }
        }
        Ok(Self::from_op(
            self.shape().to_vec(),
            y,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |ctx| {
                let g = ctx.grad;
                let gm = ctx.inputs[1].data();
                let mut gx = vec![T::zero(); g.len()];
                let mut ggamma = vec![T::zero(); n];
                let mut gbeta = vec![T::zero(); n];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * n + i) * inner + j;
                        let r = rstd[o * inner + j];
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for i in 0..n {
                            let d = g[idx(i)] * gm[i];
                            mean_d += d;
                            mean_dx += d * xhat[idx(i)];
                            ggamma[i] += g[idx(i)] * xhat[idx(i)];
                            gbeta[i] += g[idx(i)];
                        }
                        mean_d = mean_d / nf;
                        mean_dx = mean_dx / nf;
                        for i in 0..n {
                            let d = g[idx(i)] * gm[i];
                            gx[idx(i)] = r * (d - mean_d - xhat[idx(i)] * mean_dx);
                        }
                    }
                }
                vec![Some(gx), Some(ggamma), Some(gbeta)]
            },
        ))
    }

    /// Bilinear resampling of a `[C,H,W]` map to `[C,out_h,out_w]`.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<Self> {
        if self.rank() != 3 || out_h == 0 || out_w == 0 {
            return Err(Error::dim(
                "bilinear_resize",
                format!("cannot resize {:?} to {out_h}x{out_w}", self.shape()),
            ));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if (h, w) == (out_h, out_w) {
            return self.reshape(&[c, h, w]);
        }
        let ty = resize_taps(h, out_h, mode);
        let tx = resize_taps(w, out_w, mode);
        let x = self.data();
        let mut y = vec![T::zero(); c * out_h * out_w];
        for ch in 0..c {
            let src = &x[ch * h * w..(ch + 1) * h * w];
            for oy in 0..out_h {
                let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], T::of(ty.frac[oy]));
                for ox in 0..out_w {
                    let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], T::of(tx.frac[ox]));
                    let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                    y[(ch * out_h + oy) * out_w + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        Ok(Self::from_op(vec![c, out_h, out_w], y, vec![self.clone()], move |ctx| {
            let mut gx = vec![T::zero(); c * h * w];
            for ch in 0..c {
                let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
                for oy in 0..out_h {
                    let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], T::of(ty.frac[oy]));
                    for ox in 0..out_w {
                        let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], T::of(tx.frac[ox]));
                        let g = ctx.grad[(ch * out_h + oy) * out_w + ox];
                        dst[y0 * w + x0] += g * (T::one() - fy) * (T::one() - fx);
                        dst[y0 * w + x1] += g * (T::one() - fy) * fx;
                        dst[y1 * w + x0] += g * fy * (T::one() - fx);
                        dst[y1 * w + x1] += g * fy * fx;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }
}

#[derive(Clone, Copy)]
struct Im2col {
    cin: usize,
    h: usize,
    w: usize,
    cig: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Im2col {
    #[inline]
    fn source(&self, oy: usize, ki: usize, ox: usize, kj: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ki).checked_sub(self.pad)?;
        let ix = (ox * self.stride + kj).checked_sub(self.pad)?;
        (iy < self.h && ix < self.w).then_some((iy, ix))
    }

    fn gather<T: Scalar>(&self, x: &[T], grp: usize, cols: &mut [T]) {
        debug_assert!(self.cin >= (grp + 1) * self.cig);
        let plane = self.oh * self.ow;
        for ci in 0..self.cig {
            let chan = &x[(grp * self.cig + ci) * self.h * self.w..][..self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((ci * self.kh + ki) * self.kw + kj) * plane;
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            cols[row + oy * self.ow + ox] = match self.source(oy, ki, ox, kj) {
                                Some((iy, ix)) => chan[iy * self.w + ix],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn scatter<T: Scalar>(&self, cols: &[T], grp: usize, gx: &mut [T]) {
        let plane = self.oh * self.ow;
        for ci in 0..self.cig {
            let chan = &mut gx[(grp * self.cig + ci) * self.h * self.w..][..self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((ci * self.kh + ki) * self.kw + kj) * plane;
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some((iy, ix)) = self.source(oy, ki, ox, kj) {
                                chan[iy * self.w + ix] += cols[row + oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn softmax_values() {
        close(&t(&[2], &[0.0, 0.0]).softmax(0).unwrap().to_vec(), &[0.5, 0.5], 1e-15);
        // exp(k-3)/Σ, evaluated by hand: 0.0900306, 0.2447285, 0.6652410
        close(
            &t(&[3], &[1.0, 2.0, 3.0]).softmax(0).unwrap().to_vec(),
            &[0.09003057, 0.24472847, 0.66524096],
            1e-7,
        );
    }

    #[test]
    fn softmax_shift_invariant() {
        let x = t(&[2, 3], &[0.3, -1.2, 2.0, 5.0, 5.5, -3.0]);
        let shifted = t(&[2, 3], &[100.3, 98.8, 102.0, 105.0, 105.5, 97.0]);
        close(&x.softmax(1).unwrap().to_vec(), &shifted.softmax(1).unwrap().to_vec(), 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = t(&[2], &[f64::NAN, 0.0]);
        assert!(matches!(x.softmax(0), Err(Error::Numeric(_))));
    }

    #[test]
    fn gelu_values() {
        let y = t(&[3], &[0.0, 10.0, 1.0]).gelu().to_vec();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 10.0).abs() < 1e-6);
        // 1·Φ(1) = 0.8413447460685429
        assert!((y[2] - 0.841345).abs() < 1e-6);
    }

    #[test]
    fn conv_identity_1x1() {
        let x = t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let w = t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]);
        let y = x.conv2d(&w, None, Conv2dGeometry::default()).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn depthwise_zero_kernel() {
        let x = t(&[3, 4, 4], &vec![1.5; 48]);
        let w = Tensor::<f64>::zeros(&[3, 1, 3, 3]);
        let y = x.conv2d(&w, None, Conv2dGeometry::new(1, 1, 3)).unwrap();
        assert_eq!(y.shape(), &[3, 4, 4]);
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conv_window_means() {
        let x = t(&[1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let w = t(&[1, 1, 2, 2], &[0.25; 4]);
        let y = x.conv2d(&w, None, Conv2dGeometry::default()).unwrap();
        // (1+2+4+5)/4, (2+3+5+6)/4, (4+5+7+8)/4, (5+6+8+9)/4
        assert_eq!(y.to_vec(), vec![3.0, 4.0, 6.0, 7.0]);
    }

    #[test]
    fn conv_rejects_bad_geometry() {
        let x = Tensor::<f64>::zeros(&[3, 2, 2]);
        let w = Tensor::<f64>::zeros(&[4, 3, 3, 3]);
        assert!(x.conv2d(&w, None, Conv2dGeometry::default()).is_err());
        let w = Tensor::<f64>::zeros(&[4, 1, 1, 1]);
        assert!(x.conv2d(&w, None, Conv2dGeometry::new(1, 0, 2)).is_err());
    }

    #[test]
    fn layer_norm_values() {
        let one = Tensor::<f64>::ones(&[2]);
        let zero = Tensor::<f64>::zeros(&[2]);
        let y = t(&[2], &[1.0, 3.0]).layer_norm(0, &one, &zero, 0.0).unwrap();
        close(&y.to_vec(), &[-1.0, 1.0], 1e-15);

        let one = Tensor::<f64>::ones(&[4]);
        let zero = Tensor::<f64>::zeros(&[4]);
        let y = t(&[2, 4], &[3.0; 8]).layer_norm(1, &one, &zero, 1e-5).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn resize_hand_values() {
        let x = t(&[1, 1, 2], &[0.0, 2.0]);
        let y = x.bilinear_resize(1, 3, ResizeMode::AlignCorners).unwrap();
        close(&y.to_vec(), &[0.0, 1.0, 2.0], 1e-15);
        let y = x.bilinear_resize(1, 4, ResizeMode::HalfPixel).unwrap();
        // src = -0.25→0, 0.25, 0.75, 1.25→clamped tap
        close(&y.to_vec(), &[0.0, 0.5, 1.5, 2.0], 1e-15);
    }

    #[test]
    fn resize_constant_and_identity() {
        let x = t(&[2, 3, 2], &[0.5, 1.0, -2.0, 3.0, 4.0, 0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        assert_eq!(x.bilinear_resize(3, 2, ResizeMode::HalfPixel).unwrap().to_vec(), x.to_vec());
        let c = Tensor::<f64>::full(&[1, 3, 5], 7.25);
        for mode in [ResizeMode::HalfPixel, ResizeMode::AlignCorners] {
            let y = c.bilinear_resize(7, 2, mode).unwrap();
            close(&y.to_vec(), &[7.25; 14], 1e-12);
        }
    }

    #[test]
    fn output_extent_floor_formula() {
        let g = Conv2dGeometry::new(4, 3, 1);
        assert_eq!(g.output_extent(64, 7), Some(16));
        let g = Conv2dGeometry::new(2, 1, 1);
        assert_eq!(g.output_extent(16, 3), Some(8));
        assert_eq!(Conv2dGeometry::new(1, 0, 1).output_extent(2, 3), None);
    }
}
