mod common;

use common::*;
use mitseg::decoder::{AllMlpHead, DecoderConfig, SegModel};
use mitseg::encoder::{FeaturePyramid, MixFfn, TransformerBlock};
use mitseg::params::{Init, ParamStore};
use mitseg::tensor::{no_grad, ResizeMode};
use mitseg::{Rng, Tensor};

fn tokens(rng: &mut Rng, n: usize, c: usize) -> Vec<f64> {
    rand_vec(rng, n * c, 1.0)
}

#[test]
fn dense_attention_matches_oracle_over_random_trials() {
    let mut rng = Rng::new(2024);
    for trial in 0..50 {
        let heads = [1, 2, 4][trial % 3];
        let dim = heads * (2 + rng.below(4));
        let (h, w) = (1 + rng.below(5), 1 + rng.below(5));
        let (attn, p) = random_attention(dim, heads, 1, trial as u64);
        let x = tokens(&mut rng, h * w, dim);
        let got = no_grad(|| attn.forward(&p, &Tensor::new(&[h * w, dim], x.clone()).unwrap(), h, w)).unwrap();
        let want = attention_oracle(&attn, &p, &x, h, w);
        let err = max_abs_diff(&got.to_vec(), &want);
        assert!(err < 1e-5, "trial {trial}: {err:e}");
    }
}

#[test]
fn reduced_attention_matches_brute_force() {
    let mut rng = Rng::new(7);
    for r in [2usize, 4] {
        for trial in 0..10 {
            let heads = 1 + trial % 2;
            let dim = 4 * heads;
            let (h, w) = (r * (1 + rng.below(3)), r * (1 + rng.below(3)));
            let (attn, p) = random_attention(dim, heads, r, 100 + trial as u64);
            let x = tokens(&mut rng, h * w, dim);
            let got = no_grad(|| attn.forward(&p, &Tensor::new(&[h * w, dim], x.clone()).unwrap(), h, w)).unwrap();
            let want = attention_oracle(&attn, &p, &x, h, w);
            let err = max_abs_diff(&got.to_vec(), &want);
            assert!(err < 1e-5, "r={r} trial {trial}: {err:e}");
            assert_eq!(attn.reduced_tokens(&p, &Tensor::new(&[h * w, dim], x).unwrap(), h, w).unwrap().shape(), [h * w / (r * r), dim]);
        }
    }
}

#[test]
fn reduction_rejects_non_divisible_maps() {
    let (attn, p) = random_attention(4, 1, 4, 1);
    let x = Tensor::<f64>::zeros(&[6 * 6, 4]);
    let err = attn.forward(&p, &x, 6, 6).unwrap_err().to_string();
    assert!(err.contains("6x6") && err.contains("r=4"), "{err}");
}

/// Depthwise 3×3 conv written out by hand, zero padding.
fn depthwise_oracle(x: &[f64], wt: &[f64], b: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let mut s = b[ch];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            s += wt[ch * 9 + ky * 3 + kx] * x[(ch * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(ch * h + y) * w + xx] = s;
            }
        }
    }
    out
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
}

fn linear_oracle(x: &[f64], wt: &[f64], b: &[f64], rows: usize, i: usize, o: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * o];
    for t in 0..rows {
        for k in 0..o {
            y[t * o + k] = b[k] + (0..i).map(|j| x[t * i + j] * wt[j * o + k]).sum::<f64>();
        }
    }
    y
}

#[test]
fn mix_ffn_matches_composition() {
    let (dim, exp, h, w) = (3, 2, 4, 5);
    let mut store = ParamStore::new();
    let mut rng = Rng::new(3);
    let ffn = MixFfn::new(&mut Init { store: &mut store, rng: &mut rng }, "ffn", dim, exp);
    randomize(&mut store, 8, 0.6);
    let x = rand_vec(&mut rng, h * w * dim, 1.0);
    let got = no_grad(|| ffn.forward(&store, &Tensor::new(&[h * w, dim], x.clone()).unwrap(), h, w)).unwrap();

    let g = |id| store.get(id).to_vec();
    let hid = dim * exp;
    let a = linear_oracle(&x, &g(ffn.fc1.weight), &g(ffn.fc1.bias), h * w, dim, hid);
    // tokens [HW, hid] → map [hid, H, W]
    let map: Vec<f64> = (0..hid * h * w).map(|i| a[(i % (h * w)) * hid + i / (h * w)]).collect();
    let conv = depthwise_oracle(&map, &g(ffn.dwconv.weight), &g(ffn.dwconv.bias.unwrap()), hid, h, w);
    let act: Vec<f64> = (0..h * w * hid).map(|i| gelu(conv[(i % hid) * h * w + i / hid])).collect();
    let want = linear_oracle(&act, &g(ffn.fc2.weight), &g(ffn.fc2.bias), h * w, hid, dim);
    assert!(max_abs_diff(&got.to_vec(), &want) < 1e-10);
}

#[test]
fn block_is_two_pre_norm_residuals() {
    let cfg = nano().encoder.stages[1].clone();
    let mut store = ParamStore::new();
    let mut rng = Rng::new(4);
    let block = TransformerBlock::new(&mut Init { store: &mut store, rng: &mut rng }, "blk", &cfg);
    randomize(&mut store, 9, 0.4);
    let (h, w) = (4, 4);
    let x = Tensor::new(&[h * w, cfg.embed_dim], rand_vec(&mut rng, h * w * cfg.embed_dim, 1.0)).unwrap();
    no_grad(|| {
        let got = block.forward(&store, &x, h, w).unwrap();
        let y = x.add(&block.attn.forward(&store, &block.norm1.forward(&store, &x).unwrap(), h, w).unwrap()).unwrap();
        let z = y.add(&block.ffn.forward(&store, &block.norm2.forward(&store, &y).unwrap(), h, w).unwrap()).unwrap();
        assert_eq!(got.to_vec(), z.to_vec());
    });
}

fn decoder_fixture(fuse_norm_act: bool) -> (AllMlpHead, ParamStore<f64>, Vec<Tensor<f64>>) {
    let dims = [3, 4, 5, 6];
    let cfg = DecoderConfig { unify_dim: 4, num_classes: 19, fuse_norm_act, aux_channels: None };
    let mut store = ParamStore::new();
    let mut rng = Rng::new(10);
    let head = AllMlpHead::new(&mut Init { store: &mut store, rng: &mut rng }, &dims, &cfg).unwrap();
    randomize(&mut store, 12, 0.5);
    let levels = (0..4)
        .map(|i| {
            let s = 8 >> i;
            Tensor::new(&[dims[i], s, s], rand_vec(&mut rng, dims[i] * s * s, 1.0)).unwrap()
        })
        .collect();
    (head, store, levels)
}

#[test]
fn decoder_without_norm_matches_four_linear_oracle() {
    let (head, p, levels) = decoder_fixture(false);
    let trace = no_grad(|| head.decode_levels(&p, &levels)).unwrap();
    let g = |id| p.get(id).to_vec();
    let c = 4;
    let (h1, w1) = (8, 8);
    let mut concat = vec![0.0; 4 * c * h1 * w1];
    for (i, f) in levels.iter().enumerate() {
        let (ci, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
        let fd = f.to_vec();
        let tok: Vec<f64> = (0..h * w * ci).map(|k| fd[(k % ci) * h * w + k / ci]).collect();
        let u = linear_oracle(&tok, &g(head.unify[i].weight), &g(head.unify[i].bias), h * w, ci, c);
        let umap = Tensor::new(&[c, h, w], (0..c * h * w).map(|k| u[(k % (h * w)) * c + k / (h * w)]).collect()).unwrap();
        let up = umap.bilinear_resize(h1, w1, ResizeMode::HalfPixel).unwrap().to_vec();
        concat[i * c * h1 * w1..(i + 1) * c * h1 * w1].copy_from_slice(&up);
    }
    let n = h1 * w1;
    let ctok: Vec<f64> = (0..n * 4 * c).map(|k| concat[(k % (4 * c)) * n + k / (4 * c)]).collect();
    let fused = linear_oracle(&ctok, &g(head.fuse.weight), &g(head.fuse.bias), n, 4 * c, c);
    let logits = linear_oracle(&fused, &g(head.classifier.weight), &g(head.classifier.bias), n, c, 19);
    let want: Vec<f64> = (0..19 * n).map(|k| logits[(k % n) * 19 + k / n]).collect();
    assert!(max_abs_diff(&trace.logits.to_vec(), &want) < 1e-10);
    assert_eq!(trace.concat.shape(), [16, 8, 8]);
}

#[test]
fn fusion_weights_permute_with_level_order() {
    // Swapping two levels together with their unify weights and the
    // matching column blocks of the fusion weight leaves the logits unchanged.
    let c = 4;
    let dims = [4, 4, 4, 4];
    let cfg = DecoderConfig { unify_dim: c, num_classes: 19, fuse_norm_act: true, aux_channels: None };
    let mut store = ParamStore::new();
    let mut rng = Rng::new(31);
    let head = AllMlpHead::new(&mut Init { store: &mut store, rng: &mut rng }, &dims, &cfg).unwrap();
    randomize(&mut store, 32, 0.5);
    let lv: Vec<Tensor<f64>> = (0..4)
        .map(|_| Tensor::new(&[4, 4, 4], rand_vec(&mut rng, 64, 1.0)).unwrap())
        .collect();
    let base = no_grad(|| head.decode_levels(&store, &lv)).unwrap().logits.to_vec();

    let (a, b) = (1usize, 3usize);
    let mut swapped = store.clone();
    for suffix in ["weight", "bias"] {
        let na = format!("decoder.unify{}.{suffix}", a + 1);
        let nb = format!("decoder.unify{}.{suffix}", b + 1);
        let va = store.get(store.find(&na).unwrap()).to_vec();
        let vb = store.get(store.find(&nb).unwrap()).to_vec();
        swapped.set_by_name(&na, vb).unwrap();
        swapped.set_by_name(&nb, va).unwrap();
    }
    // fusion weight is [4C, C]; rows of block a and b exchange
    let fw = store.get(head.fuse.weight).to_vec();
    let mut nw = fw.clone();
    for k in 0..c {
        for o in 0..c {
            nw[((a * c + k) * c) + o] = fw[((b * c + k) * c) + o];
            nw[((b * c + k) * c) + o] = fw[((a * c + k) * c) + o];
        }
    }
    swapped.set_data(head.fuse.weight, nw).unwrap();
    let mut lv2 = lv.clone();
    lv2.swap(a, b);
    let after = no_grad(|| head.decode_levels(&swapped, &lv2)).unwrap().logits.to_vec();
    assert!(max_abs_diff(&base, &after) < 1e-12);
}

#[test]
fn every_parameter_receives_gradient() {
    let mut model = SegModel::<f64>::new(&nano(), 5).unwrap();
    randomize(&mut model.params, 6, 0.3);
    let mut rng = Rng::new(1);
    let image = Tensor::new(&[3, 64, 64], rand_vec(&mut rng, 3 * 64 * 64, 1.0)).unwrap();
    let labels = mitseg::data::LabelMap::new(64, 64, (0..64 * 64).map(|_| rng.below(19) as u8).collect()).unwrap();
    let cfg = mitseg::loss::LossConfig { ohem: None, ..Default::default() };
    let out = model.forward_full(&image).unwrap();
    mitseg::loss::segmentation_loss(&out, &labels, &cfg).unwrap().value.backward().unwrap();
    for (name, p) in model.params.iter() {
        let g = p.grad().unwrap_or_default();
        assert!(g.iter().any(|v| *v != 0.0), "{name} has zero gradient");
    }
}

#[test]
fn pyramid_extents_for_each_builtin_variant() {
    for name in mitseg::variants::builtin_names() {
        let cfg = mitseg::variants::load_variant(name).unwrap();
        if cfg.encoder.stages.iter().map(|s| s.depth * s.embed_dim).sum::<usize>() > 2000 {
            continue; // the large variants are covered by the cost tests
        }
        let model = SegModel::<f32>::new(&cfg, 0).unwrap();
        let pyr: FeaturePyramid<f32> = no_grad(|| model.encode(&Tensor::zeros(&[3, 64, 96]))).unwrap();
        for (i, f) in pyr.levels().iter().enumerate() {
            let s = 4 << i;
            assert_eq!(f.shape(), [cfg.encoder.stages[i].embed_dim, 64 / s, 96 / s], "{name} level {}", i + 1);
        }
    }
}
