//! Analytic parameter and multiply-accumulate (MAC) accounting.
//!
//! Formula sheet (one MAC = one multiply + one add = 2 FLOPs):
//!
//! | layer | MACs |
//! |---|---|
//! | conv2d | `C_out · C_in/g · kh · kw · H' · W'` |
//! | linear | `in · out · tokens` |
//! | attention scores `QKᵀ` | `N · N/R · C` (summed over heads, `C = heads · d_head`) |
//! | attention apply `AV` | `N · N/R · C` |
//!
//! Norms, activations, softmax, bilinear resampling and bias additions are
//! not counted. The auxiliary head is excluded from MACs (it only runs in
//! training) but its weights are included in the parameter count.

use crate::decoder::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub variant: String,
    pub input_hw: (usize, usize),
    pub params: u64,
    pub macs: u64,
    /// Score + apply MACs of every attention layer.
    pub attention_macs: u64,
    pub breakdown: Vec<(String, u64)>,
}

impl CostReport {
    pub fn flops(&self) -> u64 {
        2 * self.macs
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# cost report: 1 MAC = 2 FLOPs\nvariant: {}\ninput: {}x{}\nparams: {} ({:.3}M)\nMACs: {} ({:.3}G)\nFLOPs: {} ({:.3}G)\nattention MACs: {}\n",
            self.variant,
            self.input_hw.0,
            self.input_hw.1,
            self.params,
            self.params as f64 / 1e6,
            self.macs,
            self.macs as f64 / 1e9,
            self.flops(),
            self.flops() as f64 / 1e9,
            self.attention_macs,
        );
        s.push_str("breakdown:\n");
        for (name, m) in &self.breakdown {
            s.push_str(&format!("  {name:<18} {m}\n"));
        }
        s
    }
}

pub fn conv_macs(c_out: usize, c_in: usize, groups: usize, k: usize, out_h: usize, out_w: usize) -> u64 {
    (c_out * (c_in / groups) * k * k * out_h * out_w) as u64
}

pub fn linear_macs(in_dim: usize, out_dim: usize, tokens: usize) -> u64 {
    (in_dim * out_dim * tokens) as u64
}

/// `QKᵀ` MACs for `n` queries against `n_kv` keys of width `dim`.
pub fn attention_score_macs(n: usize, n_kv: usize, dim: usize) -> u64 {
    (n * n_kv * dim) as u64
}

/// `AV` MACs, same shape as the scores.
pub fn attention_apply_macs(n: usize, n_kv: usize, dim: usize) -> u64 {
    (n * n_kv * dim) as u64
}

/// Score + apply MACs of one attention layer on an `h × w` map with
/// reduction ratio `r` (`R = r²`).
pub fn reduced_attention_macs(h: usize, w: usize, r: usize, dim: usize) -> Result<u64> {
    if r == 0 || !h.is_multiple_of(r) || !w.is_multiple_of(r) {
        return Err(Error::Geometry(format!("map {h}x{w} is not divisible by r={r}")));
    }
    let n = h * w;
    let n_kv = (h / r) * (w / r);
    Ok(attention_score_macs(n, n_kv, dim) + attention_apply_macs(n, n_kv, dim))
}

fn conv_params(c_out: usize, c_in: usize, groups: usize, k: usize, bias: bool) -> u64 {
    (c_out * (c_in / groups) * k * k + if bias { c_out } else { 0 }) as u64
}

fn linear_params(i: usize, o: usize) -> u64 {
    (i * o + o) as u64
}

fn norm_params(d: usize) -> u64 {
    2 * d as u64
}

pub fn count_cost(cfg: &ModelConfig, h: usize, w: usize) -> Result<CostReport> {
    cfg.validate()?;
    let stride = cfg.encoder.total_stride();
    if h == 0 || w == 0 || !h.is_multiple_of(stride) || !w.is_multiple_of(stride) {
        return Err(Error::Geometry(format!("input {h}x{w} must be a positive multiple of {stride}")));
    }
    let mut params = 0u64;
    let mut breakdown = Vec::new();
    let mut attention_total = 0u64;
    let (mut cur_h, mut cur_w, mut in_ch) = (h, w, cfg.encoder.in_channels);
    let mut level_tokens = Vec::new();

    for (i, s) in cfg.encoder.stages.iter().enumerate() {
        let c = s.embed_dim;
        cur_h /= s.patch_stride;
        cur_w /= s.patch_stride;
        let n = cur_h * cur_w;
        let hidden = c * s.mlp_expansion;
        let r = s.sr_ratio;
        let n_kv = (cur_h / r) * (cur_w / r);

        let mut macs = conv_macs(c, in_ch, 1, s.patch_kernel, cur_h, cur_w);
        params += conv_params(c, in_ch, 1, s.patch_kernel, true) + norm_params(c);

        let mut attn = 0;
        for _ in 0..s.depth {
            // q, k, v, out projections
            macs += linear_macs(c, c, n) * 2 + linear_macs(c, c, n_kv) * 2;
            params += 4 * linear_params(c, c) + 2 * norm_params(c);
            if r > 1 {
                macs += conv_macs(c, c, 1, r, cur_h / r, cur_w / r);
                params += conv_params(c, c, 1, r, true) + norm_params(c);
            }
            attn += reduced_attention_macs(cur_h, cur_w, r, c)?;
            macs += linear_macs(c, hidden, n) + conv_macs(hidden, hidden, hidden, 3, cur_h, cur_w) + linear_macs(hidden, c, n);
            params += linear_params(c, hidden) + conv_params(hidden, hidden, hidden, 3, true) + linear_params(hidden, c);
        }
        macs += attn;
        attention_total += attn;
        params += norm_params(c);
        breakdown.push((format!("encoder.stage{}", i + 1), macs));
        level_tokens.push(n);
        in_ch = c;
    }

    let d = &cfg.decoder;
    let cdim = d.unify_dim;
    let n1 = level_tokens[0];
    let mut dec = 0u64;
    for (s, &n) in cfg.encoder.stages.iter().zip(&level_tokens) {
        dec += linear_macs(s.embed_dim, cdim, n);
        params += linear_params(s.embed_dim, cdim);
    }
    dec += linear_macs(4 * cdim, cdim, n1) + linear_macs(cdim, d.num_classes, n1);
    params += linear_params(4 * cdim, cdim) + linear_params(cdim, d.num_classes);
    if d.fuse_norm_act {
        params += norm_params(cdim);
    }
    breakdown.push(("decoder".to_string(), dec));

    if let Some(ch) = d.aux_channels {
        let c2 = cfg.encoder.stages[1].embed_dim;
        params += conv_params(ch, c2, 1, 3, true) + norm_params(ch) + conv_params(d.num_classes, ch, 1, 1, true);
    }

    let macs = breakdown.iter().map(|(_, m)| m).sum();
    Ok(CostReport {
        variant: cfg.encoder.variant_name.clone(),
        input_hw: (h, w),
        params,
        macs,
        attention_macs: attention_total,
        breakdown,
    })
}
