//! Parameterized building blocks: linear, conv2d and layer norm.

use crate::error::Result;
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Conv2dGeometry, Scalar, Tensor};

pub const LN_EPS: f64 = 1e-6;

/// Token-wise affine map, `[N, in] → [N, out]`, weight stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = init.trunc_normal(format!("{name}.weight"), &[in_dim, out_dim], 0.02);
        let bias = init.constant(format!("{name}.bias"), &[out_dim], 0.0);
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(p.get(self.weight))?.add_bias(p.get(self.bias), 1)
    }
}

/// 2-D convolution over `[C,H,W]` maps, weight `[out, in/groups, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: Conv2dGeometry,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl Conv2d {
    /// He-normal on fan-out, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        geom: Conv2dGeometry,
        bias: bool,
    ) -> Self {
        let fan_out = kernel * kernel * out_ch / geom.groups;
        let std = (2.0 / fan_out as f64).sqrt();
        let weight = init.normal(format!("{name}.weight"), &[out_ch, in_ch / geom.groups, kernel, kernel], std);
        let bias = bias.then(|| init.constant(format!("{name}.bias"), &[out_ch], 0.0));
        Self { weight, bias, geom, in_ch, out_ch, kernel }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(p.get(self.weight), self.bias.map(|b| p.get(b)), self.geom)
    }
}

/// Layer norm over one axis with learned affine.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub axis: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, dim: usize, axis: usize) -> Self {
        let gamma = init.constant(format!("{name}.weight"), &[dim], 1.0);
        let beta = init.constant(format!("{name}.bias"), &[dim], 0.0);
        Self { gamma, beta, axis }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(self.axis, p.get(self.gamma), p.get(self.beta), LN_EPS)
    }
}
