//! Shape manipulation, elementwise arithmetic, reductions and matmul.

use super::kernels::{mm_nn, mm_nt, mm_tn};
use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

/// (outer, extent, inner) decomposition of `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tensor<T> {
    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "add")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| *a + *b).collect();
        Ok(Self::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            |ctx| vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())],
        ))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "sub")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| *a - *b).collect();
        Ok(Self::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            |ctx| {
                vec![
                    Some(ctx.grad.to_vec()),
                    Some(ctx.grad.iter().map(|g| -*g).collect()),
                ]
            },
        ))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "mul")?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| *a * *b).collect();
        Ok(Self::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            |ctx| {
                let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let ga = ctx.inputs[0]
                    .requires_grad()
                    .then(|| ctx.grad.iter().zip(b).map(|(g, v)| *g * *v).collect());
                let gb = ctx.inputs[1]
                    .requires_grad()
                    .then(|| ctx.grad.iter().zip(a).map(|(g, v)| *g * *v).collect());
                vec![ga, gb]
            },
        ))
    }

    pub fn scale(&self, c: f64) -> Self {
        let c = T::of(c);
        let data = self.data().iter().map(|v| *v * c).collect();
        Self::from_op(self.shape().to_vec(), data, vec![self.clone()], move |ctx| {
            vec![Some(ctx.grad.iter().map(|g| *g * c).collect())]
        })
    }

    /// Adds `bias` (length `shape[axis]`) broadcast along every other axis.
    pub fn add_bias(&self, bias: &Self, axis: usize) -> Result<Self> {
        if axis >= self.rank() || bias.numel() != self.shape()[axis] || bias.rank() != 1 {
            return Err(Error::dim(
                "add_bias",
                format!(
                    "bias {:?} does not match axis {axis} of {:?}",
                    bias.shape(),
                    self.shape()
                ),
            ));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let b = bias.data();
        let mut data = self.to_vec();
        for o in 0..outer {
            for (i, &bv) in b.iter().enumerate() {
                let base = (o * n + i) * inner;
                data[base..base + inner].iter_mut().for_each(|v| *v += bv);
            }
        }
        Ok(Self::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            move |ctx| {
                let gb = ctx.inputs[1].requires_grad().then(|| {
                    let mut gb = vec![T::zero(); n];
                    for o in 0..outer {
                        for (i, acc) in gb.iter_mut().enumerate() {
                            let base = (o * n + i) * inner;
                            *acc += ctx.grad[base..base + inner].iter().copied().sum::<T>();
                        }
                    }
                    gb
                });
                vec![Some(ctx.grad.to_vec()), gb]
            },
        ))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(Error::dim(
                "matmul",
                format!("cannot multiply {:?} by {:?}", self.shape(), other.shape()),
            ));
        }
        let (m, k, n) = (self.shape()[0], self.shape()[1], other.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        mm_nn(m, k, n, self.data(), other.data(), &mut out);
        Ok(Self::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            move |ctx| {
                let (a, b) = (&ctx.inputs[0], &ctx.inputs[1]);
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![T::zero(); m * k];
                    mm_nt(m, n, k, ctx.grad, b.data(), &mut ga);
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![T::zero(); k * n];
                    mm_tn(k, m, n, a.data(), ctx.grad, &mut gb);
                    gb
                });
                vec![ga, gb]
            },
        ))
    }

    /// Transpose of a rank-2 tensor.
    pub fn t(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::dim("transpose", format!("expected rank 2, got {:?}", self.shape())));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        Ok(Self::from_op(
            vec![c, r],
            transpose2(r, c, self.data()),
            vec![self.clone()],
            move |ctx| vec![Some(transpose2(c, r, ctx.grad))],
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(), shape),
            ));
        }
        Ok(Self::from_op(shape.to_vec(), self.to_vec(), vec![self.clone()], |ctx| {
            vec![Some(ctx.grad.to_vec())]
        }))
    }

    /// `[C,H,W]` feature map to `[H·W, C]` tokens.
    pub fn map_to_tokens(&self) -> Result<Self> {
        if self.rank() != 3 {
            return Err(Error::dim("map_to_tokens", format!("expected [C,H,W], got {:?}", self.shape())));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        self.reshape(&[c, h * w])?.t()
    }

    /// `[H·W, C]` tokens to a `[C,H,W]` feature map.
    pub fn tokens_to_map(&self, h: usize, w: usize) -> Result<Self> {
        if self.rank() != 2 || self.shape()[0] != h * w {
            return Err(Error::dim(
                "tokens_to_map",
                format!("{:?} tokens do not tile a {h}x{w} map", self.shape()),
            ));
        }
        let c = self.shape()[1];
        self.t()?.reshape(&[c, h, w])
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || len == 0 || start + len > self.shape()[axis] {
            return Err(Error::dim(
                "narrow",
                format!("range {start}..{} out of axis {axis} of {:?}", start + len, self.shape()),
            ));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let total = self.numel();
        Ok(Self::from_op(shape, data, vec![self.clone()], move |ctx| {
            let mut g = vec![T::zero(); total];
            for o in 0..outer {
                let dst = (o * n + start) * inner;
                let src = o * len * inner;
                g[dst..dst + len * inner].copy_from_slice(&ctx.grad[src..src + len * inner]);
            }
            vec![Some(g)]
        }))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        if axis >= first.rank() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for {:?}", first.shape())));
        }
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim(
                    "concat",
                    format!("{:?} incompatible with {:?} on axis {axis}", p.shape(), first.shape()),
                ));
            }
        }
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total_axis: usize = extents.iter().sum();
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for (p, &e) in parts.iter().zip(&extents) {
                let base = o * e * inner;
                data.extend_from_slice(&p.data()[base..base + e * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total_axis;
        Ok(Self::from_op(shape, data, parts.to_vec(), move |ctx| {
            let mut grads: Vec<Vec<T>> = extents
                .iter()
                .map(|&e| Vec::with_capacity(outer * e * inner))
                .collect();
            let mut cursor = 0;
            for _ in 0..outer {
                for (g, &e) in grads.iter_mut().zip(&extents) {
                    g.extend_from_slice(&ctx.grad[cursor..cursor + e * inner]);
                    cursor += e * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    pub fn sum(&self) -> Self {
        let s = self.data().iter().copied().sum::<T>();
        let n = self.numel();
        Self::from_op(Vec::new(), vec![s], vec![self.clone()], move |ctx| {
            vec![Some(vec![ctx.grad[0]; n])]
        })
    }

    pub fn mean(&self) -> Self {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    /// Σ xᵢ·wᵢ with constant weights; used for masked means.
    pub fn weighted_sum(&self, weights: &[T]) -> Result<Self> {
        if weights.len() != self.numel() {
            return Err(Error::dim(
                "weighted_sum",
                format!("{} weights for {} elements", weights.len(), self.numel()),
            ));
        }
        let s = self.data().iter().zip(weights).map(|(a, b)| *a * *b).sum::<T>();
        let w = weights.to_vec();
        Ok(Self::from_op(Vec::new(), vec![s], vec![self.clone()], move |ctx| {
            vec![Some(w.iter().map(|v| *v * ctx.grad[0]).collect())]
        }))
    }

    pub fn relu(&self) -> Self {
        let data = self.data().iter().map(|v| v.max(T::zero())).collect();
        Self::from_op(self.shape().to_vec(), data, vec![self.clone()], |ctx| {
            let x = ctx.inputs[0].data();
            vec![Some(
                ctx.grad
                    .iter()
                    .zip(x)
                    .map(|(g, v)| if *v > T::zero() { *g } else { T::zero() })
                    .collect(),
            )]
        })
    }

    /// Mirror the last axis.
    pub fn flip_last(&self) -> Self {
        let w = *self.shape().last().unwrap_or(&1);
        let flip = move |src: &[T]| -> Vec<T> {
            let mut out = Vec::with_capacity(src.len());
            for row in src.chunks(w) {
                out.extend(row.iter().rev());
            }
            out
        };
        let data = flip(self.data());
        Self::from_op(self.shape().to_vec(), data, vec![self.clone()], move |ctx| {
            vec![Some(flip(ctx.grad))]
        })
    }

    /// Pad a `[C,H,W]` map on the bottom and right with `value`.
    pub fn pad_bottom_right(&self, bottom: usize, right: usize, value: T) -> Result<Self> {
        if self.rank() != 3 {
            return Err(Error::dim("pad", format!("expected [C,H,W], got {:?}", self.shape())));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (oh, ow) = (h + bottom, w + right);
        let mut data = vec![value; c * oh * ow];
        for ch in 0..c {
            for y in 0..h {
                let src = (ch * h + y) * w;
                let dst = (ch * oh + y) * ow;
                data[dst..dst + w].copy_from_slice(&self.data()[src..src + w]);
            }
        }
        Ok(Self::from_op(vec![c, oh, ow], data, vec![self.clone()], move |ctx| {
            let mut g = Vec::with_capacity(c * h * w);
            for ch in 0..c {
                for y in 0..h {
                    let src = (ch * oh + y) * ow;
                    g.extend_from_slice(&ctx.grad[src..src + w]);
                }
            }
            vec![Some(g)]
        }))
    }

    /// Keep the top-left `h × w` window of a `[C,H,W]` map.
    pub fn crop_top_left(&self, h: usize, w: usize) -> Result<Self> {
        if self.rank() != 3 || h == 0 || w == 0 || h > self.shape()[1] || w > self.shape()[2] {
            return Err(Error::dim("crop", format!("cannot crop {:?} to {h}x{w}", self.shape())));
        }
        self.narrow(1, 0, h)?.narrow(2, 0, w)
    }

    pub fn argmax_axis0(&self) -> Result<Vec<usize>> {
        if self.rank() < 1 {
            return Err(Error::dim("argmax", "scalar has no class axis"));
        }
        let c = self.shape()[0];
        let plane = self.numel() / c;
        let d = self.data();
        Ok((0..plane)
            .map(|p| {
                let mut best = 0;
                for k in 1..c {
                    if d[k * plane + p] > d[best * plane + p] {
                        best = k;
                    }
                }
                best
            })
            .collect())
    }
}

pub(crate) fn transpose2<T: Scalar>(r: usize, c: usize, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_hand_values() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let a = t(&[2, 2], &[1.5, -2.0, 0.25, 4.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(a.matmul(&eye).unwrap().to_vec(), a.to_vec());
        let zero = Tensor::<f64>::zeros(&[2, 2]);
        assert_eq!(a.matmul(&zero).unwrap().to_vec(), vec![0.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn narrow_concat_inverse() {
        let x = t(&[2, 5], &(0..10).map(|v| v as f64).collect::<Vec<_>>());
        let a = x.narrow(1, 0, 2).unwrap();
        let b = x.narrow(1, 2, 3).unwrap();
        assert_eq!(a.to_vec(), vec![0.0, 1.0, 5.0, 6.0]);
        let back = Tensor::concat(&[a, b], 1).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn tokens_map_round_trip() {
        let m = t(&[2, 2, 3], &(0..12).map(|v| v as f64).collect::<Vec<_>>());
        let tok = m.map_to_tokens().unwrap();
        assert_eq!(tok.shape(), &[6, 2]);
        assert_eq!(&tok.to_vec()[..4], &[0.0, 6.0, 1.0, 7.0]);
        assert_eq!(tok.tokens_to_map(2, 3).unwrap().to_vec(), m.to_vec());
    }

    #[test]
    fn add_bias_axis0() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        let b = t(&[2], &[1.0, -1.0]);
        assert_eq!(
            x.add_bias(&b, 0).unwrap().to_vec(),
            vec![1.0, 1.0, 1.0, -1.0, -1.0, -1.0]
        );
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let m = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let p = m.pad_bottom_right(1, 2, 0.0).unwrap();
        assert_eq!(p.shape(), &[1, 3, 4]);
        assert_eq!(p.crop_top_left(2, 2).unwrap().to_vec(), m.to_vec());
    }

    #[test]
    fn flip_is_involution() {
        let m = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(m.flip_last().to_vec(), vec![3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
        assert_eq!(m.flip_last().flip_last().to_vec(), m.to_vec());
    }
}
