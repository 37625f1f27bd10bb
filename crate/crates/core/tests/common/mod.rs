//! Shared oracles and finite-difference machinery for the integration tests.
#![allow(dead_code)]

use mitseg::data::LabelMap;
use mitseg::decoder::{ModelConfig, SegModel};
use mitseg::encoder::EfficientSelfAttention;
use mitseg::layers::LN_EPS;
use mitseg::loss::{pixel_ce, segmentation_loss, LossConfig};
use mitseg::params::{Init, ParamStore};
use mitseg::tensor::{no_grad, Conv2dGeometry, ResizeMode};
use mitseg::{Result, Rng, Tensor};

pub type T64 = Tensor<f64>;

pub fn rand_vec(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.range(-scale, scale)).collect()
}

pub fn rand_param(rng: &mut Rng, shape: &[usize], scale: f64) -> T64 {
    let n = shape.iter().product();
    Tensor::param(shape, rand_vec(rng, n, scale)).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
pub fn rand_param_off_zero(rng: &mut Rng, shape: &[usize]) -> T64 {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.range(0.1, 1.0);
            if rng.bernoulli(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::param(shape, data).unwrap()
}

/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞)` with a tiny floor for all-zero gradients.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(n).map(|v| v.abs()).fold(0.0, f64::max).max(1e-10);
    diff / scale
}

/// Largest relative error between backward-pass and central-difference
/// gradients of `Σ R ⊙ f(inputs)` for a fixed random projection `R`.
pub fn check_op<F>(inputs: &[T64], f: F) -> f64
where
    F: Fn(&[T64]) -> Result<T64>,
{
    let h = 1e-6;
    let out = f(inputs).unwrap();
    let mut rng = Rng::new(0xfeed);
    let proj = rand_vec(&mut rng, out.numel(), 1.0);
    let objective = |xs: &[T64]| f(xs).unwrap().weighted_sum(&proj).unwrap();
    inputs.iter().for_each(|x| x.zero_grad());
    objective(inputs).backward().unwrap();
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        if !x.requires_grad() {
            continue;
        }
        let analytic = x.grad().unwrap_or_else(|| vec![0.0; x.numel()]);
        let mut numeric = vec![0.0; x.numel()];
        for j in 0..x.numel() {
            let eval_at = |d: f64| {
                let mut data = x.to_vec();
                data[j] += d;
                let mut xs = inputs.to_vec();
                xs[i] = Tensor::new(x.shape(), data).unwrap();
                no_grad(|| objective(&xs).item())
            };
            numeric[j] = (eval_at(h) - eval_at(-h)) / (2.0 * h);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Every differentiable primitive with a representative configuration.
pub fn op_suite() -> Vec<(&'static str, f64)> {
    let mut rng = Rng::new(11);
    let mut r = |shape: &[usize]| rand_param(&mut rng, shape, 1.0);
    let mut out = Vec::new();
    let (a, b) = (r(&[3, 4]), r(&[3, 4]));
    out.push(("add", check_op(&[a.clone(), b.clone()], |x| x[0].add(&x[1]))));
    out.push(("sub", check_op(&[a.clone(), b.clone()], |x| x[0].sub(&x[1]))));
    out.push(("mul", check_op(&[a.clone(), b.clone()], |x| x[0].mul(&x[1]))));
    out.push(("scale", check_op(std::slice::from_ref(&a), |x| Ok(x[0].scale(-1.7)))));
    let bias3 = r(&[3]);
    let bias4 = r(&[4]);
    out.push(("add_bias axis 0", check_op(&[a.clone(), bias3], |x| x[0].add_bias(&x[1], 0))));
    out.push(("add_bias axis 1", check_op(&[a.clone(), bias4], |x| x[0].add_bias(&x[1], 1))));
    let m = r(&[4, 5]);
    out.push(("matmul", check_op(&[a.clone(), m], |x| x[0].matmul(&x[1]))));
    out.push(("transpose", check_op(std::slice::from_ref(&a), |x| x[0].t())));
    out.push(("reshape", check_op(std::slice::from_ref(&a), |x| x[0].reshape(&[2, 6]))));
    let map = r(&[3, 2, 4]);
    out.push(("map_to_tokens", check_op(std::slice::from_ref(&map), |x| x[0].map_to_tokens())));
    let tok = r(&[8, 3]);
    out.push(("tokens_to_map", check_op(&[tok], |x| x[0].tokens_to_map(2, 4))));
    out.push(("narrow", check_op(std::slice::from_ref(&map), |x| x[0].narrow(2, 1, 2))));
    let map2 = r(&[2, 2, 4]);
    out.push(("concat", check_op(&[map.clone(), map2], |x| Tensor::concat(&[x[0].clone(), x[1].clone()], 0))));
    out.push(("sum", check_op(std::slice::from_ref(&a), |x| Ok(x[0].sum()))));
    out.push(("mean", check_op(std::slice::from_ref(&a), |x| Ok(x[0].mean()))));
    let w: Vec<f64> = (0..12).map(|i| i as f64 * 0.1 - 0.5).collect();
    out.push(("weighted_sum", check_op(std::slice::from_ref(&a), move |x| x[0].weighted_sum(&w))));
    let off = rand_param_off_zero(&mut Rng::new(5), &[4, 5]);
    out.push(("relu", check_op(&[off], |x| Ok(x[0].relu()))));
    out.push(("flip_last", check_op(std::slice::from_ref(&map), |x| Ok(x[0].flip_last()))));
    out.push(("pad_bottom_right", check_op(std::slice::from_ref(&map), |x| x[0].pad_bottom_right(2, 1, 0.3))));
    out.push(("crop_top_left", check_op(std::slice::from_ref(&map), |x| x[0].crop_top_left(1, 3))));
    out.push(("softmax axis 0", check_op(std::slice::from_ref(&map), |x| x[0].softmax(0))));
    out.push(("softmax axis 1", check_op(std::slice::from_ref(&a), |x| x[0].softmax(1))));
    out.push(("gelu", check_op(&[r(&[3, 5]).scale(2.0).into_leaf(true)], |x| Ok(x[0].gelu()))));

    let img = r(&[4, 7, 6]);
    let (wt, bs) = (r(&[6, 4, 3, 3]), r(&[6]));
    out.push((
        "conv2d 3x3 stride 2 pad 1",
        check_op(&[img.clone(), wt, bs], |x| x[0].conv2d(&x[1], Some(&x[2]), Conv2dGeometry::new(2, 1, 1))),
    ));
    let wg = r(&[4, 2, 3, 3]);
    out.push((
        "conv2d grouped",
        check_op(&[img.clone(), wg], |x| x[0].conv2d(&x[1], None, Conv2dGeometry::new(1, 1, 2))),
    ));
    let wd = r(&[4, 1, 3, 3]);
    out.push((
        "conv2d depthwise",
        check_op(&[img.clone(), wd], |x| x[0].conv2d(&x[1], None, Conv2dGeometry::new(1, 1, 4))),
    ));
    let wo = r(&[5, 4, 7, 7]);
    out.push((
        "conv2d 7x7 stride 4 pad 3",
        check_op(&[img.clone(), wo], |x| x[0].conv2d(&x[1], None, Conv2dGeometry::new(4, 3, 1))),
    ));
    let (g4, b4) = (r(&[4]), r(&[4]));
    out.push(("layer_norm axis 1", check_op(&[r(&[5, 4]), g4.clone(), b4.clone()], |x| x[0].layer_norm(1, &x[1], &x[2], LN_EPS))));
    out.push(("layer_norm axis 0", check_op(&[img.clone(), g4, b4], |x| x[0].layer_norm(0, &x[1], &x[2], LN_EPS))));
    out.push((
        "bilinear up half-pixel",
        check_op(std::slice::from_ref(&map), |x| x[0].bilinear_resize(5, 9, ResizeMode::HalfPixel)),
    ));
    out.push((
        "bilinear down half-pixel",
        check_op(std::slice::from_ref(&img), |x| x[0].bilinear_resize(3, 4, ResizeMode::HalfPixel)),
    ));
    out.push((
        "bilinear align-corners",
        check_op(std::slice::from_ref(&map), |x| x[0].bilinear_resize(4, 7, ResizeMode::AlignCorners)),
    ));
    let logits = r(&[19, 3, 4]).scale(3.0).into_leaf(true);
    let labels = LabelMap::new(3, 4, vec![0, 5, 18, 255, 3, 3, 7, 255, 1, 0, 12, 9]).unwrap();
    let weights: Vec<f64> = (0..19).map(|c| 0.5 + 0.05 * c as f64).collect();
    out.push((
        "pixel cross-entropy",
        check_op(&[logits], move |x| Ok(pixel_ce(&x[0], &labels, Some(&weights), 255)?.per_pixel)),
    ));
    out
}

pub fn nano() -> ModelConfig {
    mitseg::variants::load_variant("nano").unwrap()
}

/// Give every parameter of `store` non-trivial random values (incl. biases
/// and norm affines).
pub fn randomize(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut rng = Rng::new(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get(id);
        let is_gamma = store.name(id).contains("norm") && store.name(id).ends_with(".weight");
        let data = rand_vec(&mut rng, p.numel(), scale)
            .into_iter()
            .map(|v| if is_gamma { 1.0 + v } else { v })
            .collect();
        store.set_data(id, data).unwrap();
    }
}

/// End-to-end check of the nano model with the auxiliary head on a 32×32
/// input; `per_tensor` entries of every parameter tensor are probed.
pub fn end_to_end_check(per_tensor: usize) -> (f64, usize) {
    let cfg = nano();
    let mut model = SegModel::<f64>::new(&cfg, 3).unwrap();
    randomize(&mut model.params, 21, 0.3);
    let mut rng = Rng::new(99);
    let image = Tensor::new(&[3, 32, 32], rand_vec(&mut rng, 3 * 32 * 32, 1.0)).unwrap();
    let ids: Vec<u8> = (0..32 * 32)
        .map(|_| if rng.bernoulli(0.1) { 255 } else { rng.below(19) as u8 })
        .collect();
    let labels = LabelMap::new(32, 32, ids).unwrap();
    let loss_cfg = LossConfig { ohem: None, ..LossConfig::default() };
    let loss_of = |m: &SegModel<f64>| segmentation_loss(&m.forward_full(&image).unwrap(), &labels, &loss_cfg).unwrap();

    let l = loss_of(&model);
    l.value.backward().unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut probed = 0;
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let p = model.params.get(id).clone();
        let analytic_all = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        let mut picks = Rng::derive(7, &[id.index() as u64]);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for _ in 0..per_tensor.min(p.numel()) {
            let j = picks.below(p.numel());
            let eval_at = |d: f64| {
                let mut data = p.to_vec();
                data[j] += d;
                let mut m = model.clone();
                m.params.set_data(id, data).unwrap();
                no_grad(|| loss_of(&m).value.item())
            };
            numeric.push((eval_at(h) - eval_at(-h)) / (2.0 * h));
            analytic.push(analytic_all[j]);
            probed += 1;
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    (worst, probed)
}

/// Textbook reduced attention with explicit loops; shares nothing with the
/// library implementation except the parameter values it reads.
pub fn attention_oracle(attn: &EfficientSelfAttention, p: &ParamStore<f64>, x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let c = attn.dim;
    let n = h * w;
    let r = attn.sr_ratio;
    let get = |id: mitseg::params::ParamId| p.get(id).to_vec();

    let kv_src: Vec<f64> = match &attn.sr {
        None => x.to_vec(),
        Some((conv, norm)) => {
            let wt = get(conv.weight);
            let bias = get(conv.bias.unwrap());
            let (hr, wr) = (h / r, w / r);
            let mut red = vec![0.0; hr * wr * c];
            for i in 0..hr {
                for j in 0..wr {
                    for o in 0..c {
                        let mut s = bias[o];
                        for ci in 0..c {
                            for ky in 0..r {
                                for kx in 0..r {
                                    let tok = (i * r + ky) * w + (j * r + kx);
                                    s += wt[((o * c + ci) * r + ky) * r + kx] * x[tok * c + ci];
                                }
                            }
                        }
                        red[(i * wr + j) * c + o] = s;
                    }
                }
            }
            let (g, b) = (get(norm.gamma), get(norm.beta));
            for t in 0..hr * wr {
                let row = &mut red[t * c..(t + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                for (k, v) in row.iter_mut().enumerate() {
                    *v = (*v - mean) / (var + LN_EPS).sqrt() * g[k] + b[k];
                }
            }
            red
        }
    };
    let nk = kv_src.len() / c;
    let linear = |lin: &mitseg::layers::Linear, src: &[f64], rows: usize| {
        let (wt, b) = (get(lin.weight), get(lin.bias));
        let mut y = vec![0.0; rows * c];
        for t in 0..rows {
            for o in 0..c {
                y[t * c + o] = b[o] + (0..c).map(|i| src[t * c + i] * wt[i * c + o]).sum::<f64>();
            }
        }
        y
    };
    let q = linear(&attn.q, x, n);
    let k = linear(&attn.k, &kv_src, nk);
    let v = linear(&attn.v, &kv_src, nk);
    let d = c / attn.heads;
    let mut merged = vec![0.0; n * c];
    for hd in 0..attn.heads {
        for t in 0..n {
            let scores: Vec<f64> = (0..nk)
                .map(|s| (0..d).map(|e| q[t * c + hd * d + e] * k[s * c + hd * d + e]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = scores.iter().copied().fold(f64::MIN, f64::max);
            let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = ex.iter().sum();
            for e in 0..d {
                merged[t * c + hd * d + e] = (0..nk).map(|s| ex[s] / z * v[s * c + hd * d + e]).sum();
            }
        }
    }
    linear(&attn.proj, &merged, n)
}

/// Build an attention layer with fully random parameters.
pub fn random_attention(dim: usize, heads: usize, r: usize, seed: u64) -> (EfficientSelfAttention, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed);
    let attn = EfficientSelfAttention::new(&mut Init { store: &mut store, rng: &mut rng }, "attn", dim, heads, r);
    randomize(&mut store, seed ^ 0x55, 0.5);
    (attn, store)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
