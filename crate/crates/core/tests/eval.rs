mod common;

use common::*;
use mitseg::data::LabelMap;
use mitseg::decoder::{SegModel, UPSAMPLE_MODE};
use mitseg::eval::{count_cost, multi_scale_predict, reduced_attention_macs, ConfusionMatrix};
use mitseg::tensor::no_grad;
use mitseg::{Rng, Tensor};
use proptest::prelude::*;

fn map(h: usize, w: usize, ids: &[u8]) -> LabelMap {
    LabelMap::new(h, w, ids.to_vec()).unwrap()
}

#[test]
fn two_by_two_block_in_nineteen_classes() {
    let mut cm = ConfusionMatrix::new(19);
    cm.update(&map(1, 6, &[0, 0, 1, 0, 1, 1]), &map(1, 6, &[0, 0, 0, 1, 1, 1])).unwrap();
    assert_eq!([cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)], [2, 1, 1, 2]);
    let r = cm.iou_report();
    assert_eq!(r.per_class_iou[0], Some(0.5));
    assert_eq!(r.per_class_iou[1], Some(0.5));
    assert!(r.per_class_iou[2..].iter().all(Option::is_none));
    assert_eq!(r.miou, Some(0.5));
}

#[test]
fn three_class_hand_fixture() {
    // gt:   0 0 0 0 1 1 2 2 2 255
    // pred: 0 0 1 2 1 1 2 2 0 5
    let gt = map(2, 5, &[0, 0, 0, 0, 1, 1, 2, 2, 2, 255]);
    let pred = map(2, 5, &[0, 0, 1, 2, 1, 1, 2, 2, 0, 5]);
    let mut cm = ConfusionMatrix::new(19);
    cm.update(&pred, &gt).unwrap();
    assert_eq!(cm.total(), 9);
    let r = cm.iou_report();
    // class 0: tp 2, fn 2, fp 1; class 1: tp 2, fp 1; class 2: tp 2, fn 1, fp 1
    assert_eq!(r.per_class_iou[0], Some(2.0 / 5.0));
    assert_eq!(r.per_class_iou[1], Some(2.0 / 3.0));
    assert_eq!(r.per_class_iou[2], Some(2.0 / 4.0));
    assert_eq!(r.per_class_iou[5], None);
    assert_eq!(r.miou, Some((2.0 / 5.0 + 2.0 / 3.0 + 2.0 / 4.0) / 3.0));
}

#[test]
fn reports_are_written() {
    let mut cm = ConfusionMatrix::new(19);
    cm.update(&map(1, 2, &[0, 1]), &map(1, 2, &[0, 0])).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let r = cm.iou_report();
    r.write_csv(&dir.path().join("iou.csv")).unwrap();
    r.write_summary(&dir.path().join("summary.txt")).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("iou.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "class_id,class_name,iou");
    assert_eq!(lines[1], "0,road,0.500000");
    assert_eq!(lines[2], "1,sidewalk,0.000000");
    assert_eq!(lines[3], "2,building,");
    assert_eq!(lines.len(), 20);
    assert!(std::fs::read_to_string(dir.path().join("summary.txt")).unwrap().contains("mIoU: 0.2500"));
}

proptest! {
    #[test]
    fn miou_invariant_under_relabeling(
        pairs in prop::collection::vec((0u8..19, 0u8..19, any::<bool>()), 1..80),
        perm_seed in any::<u64>(),
    ) {
        let n = pairs.len();
        let gt: Vec<u8> = pairs.iter().map(|p| if p.2 { 255 } else { p.0 }).collect();
        let pred: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        let mut perm: Vec<u8> = (0..19).collect();
        Rng::new(perm_seed).shuffle(&mut perm);
        let relabel = |v: &[u8]| v.iter().map(|&c| if c == 255 { 255 } else { perm[c as usize] }).collect::<Vec<_>>();
        let mut a = ConfusionMatrix::new(19);
        a.update(&map(1, n, &pred), &map(1, n, &gt)).unwrap();
        let mut b = ConfusionMatrix::new(19);
        b.update(&map(1, n, &relabel(&pred)), &map(1, n, &relabel(&gt))).unwrap();
        prop_assert_eq!(a.total(), gt.iter().filter(|&&g| g != 255).count() as u64);
        let (ra, rb) = (a.iou_report(), b.iou_report());
        match (ra.miou, rb.miou) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
            (x, y) => prop_assert_eq!(x, y),
        }
        for iou in ra.per_class_iou.iter().flatten() {
            prop_assert!((0.0..=1.0).contains(iou));
        }
    }
}

fn model_and_image(seed: u64, h: usize, w: usize) -> (SegModel<f64>, Tensor<f64>) {
    let mut model = SegModel::<f64>::new(&nano(), seed).unwrap();
    randomize(&mut model.params, seed + 1, 0.3);
    let mut rng = Rng::new(seed + 2);
    let image = Tensor::new(&[3, h, w], rand_vec(&mut rng, 3 * h * w, 1.0)).unwrap();
    (model, image)
}

#[test]
fn single_scale_is_plain_softmax() {
    let (model, image) = model_and_image(1, 64, 64);
    let plain = no_grad(|| model.forward_full(&image).unwrap().logits.softmax(0).unwrap());
    let ms = multi_scale_predict(&model, &image, &[1.0], false).unwrap();
    assert_eq!(ms.to_vec(), plain.to_vec());
    let twice = multi_scale_predict(&model, &image, &[1.0, 1.0], false).unwrap();
    assert_eq!(twice.to_vec(), ms.to_vec());
}

/// One explicit pass: resize, optional mirror, pad to 32, forward, crop,
/// softmax, mirror back, resize back.
fn explicit_pass(model: &SegModel<f64>, image: &Tensor<f64>, scale: f64, flip: bool) -> Vec<f64> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (sh, sw) = ((h as f64 * scale).round() as usize, (w as f64 * scale).round() as usize);
    no_grad(|| {
        let mut x = image.bilinear_resize(sh, sw, UPSAMPLE_MODE).unwrap();
        if flip {
            x = x.flip_last();
        }
        let (ph, pw) = (sh.div_ceil(32) * 32, sw.div_ceil(32) * 32);
        let x = x.pad_bottom_right(ph - sh, pw - sw, 0.0).unwrap();
        let logits = model.forward_full(&x).unwrap().logits.crop_top_left(sh, sw).unwrap();
        let mut p = logits.softmax(0).unwrap();
        if flip {
            p = p.flip_last();
        }
        p.bilinear_resize(h, w, UPSAMPLE_MODE).unwrap().to_vec()
    })
}

#[test]
fn two_scales_average_explicit_passes() {
    let (model, image) = model_and_image(3, 64, 96);
    let got = multi_scale_predict(&model, &image, &[0.5, 1.0], false).unwrap();
    let (a, b) = (explicit_pass(&model, &image, 0.5, false), explicit_pass(&model, &image, 1.0, false));
    let want: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x + y) / 2.0).collect();
    assert!(max_abs_diff(&got.to_vec(), &want) < 1e-12);
    // scores stay a distribution per pixel
    let plane = 64 * 96;
    for p in 0..plane {
        let s: f64 = (0..19).map(|c| got.data()[c * plane + p]).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}

#[test]
fn odd_scale_pads_and_crops() {
    let (model, image) = model_and_image(4, 64, 64);
    let got = multi_scale_predict(&model, &image, &[0.75], true).unwrap();
    let (a, b) = (explicit_pass(&model, &image, 0.75, false), explicit_pass(&model, &image, 0.75, true));
    let want: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x + y) / 2.0).collect();
    assert_eq!(got.shape(), [19, 64, 64]);
    assert!(max_abs_diff(&got.to_vec(), &want) < 1e-12);
}

#[test]
fn flip_on_symmetric_input() {
    let (model, image) = model_and_image(5, 64, 64);
    // mirror the left half onto the right
    let mut d = image.to_vec();
    for c in 0..3 {
        for y in 0..64 {
            for x in 32..64 {
                d[(c * 64 + y) * 64 + x] = d[(c * 64 + y) * 64 + 63 - x];
            }
        }
    }
    let sym = Tensor::new(&[3, 64, 64], d).unwrap();
    let flipped = multi_scale_predict(&model, &sym, &[1.0], true).unwrap();
    // the mirrored pass sees the same pixels, so the flip-averaged map is
    // the mean of the plain map and its mirror image
    let plain = multi_scale_predict(&model, &sym, &[1.0], false).unwrap();
    let mirror = plain.flip_last();
    let want: Vec<f64> = plain.data().iter().zip(mirror.data()).map(|(a, b)| (a + b) / 2.0).collect();
    assert!(max_abs_diff(&flipped.to_vec(), &want) < 1e-5);
    assert!(max_abs_diff(&flipped.to_vec(), &flipped.flip_last().to_vec()) < 1e-5);
}

#[test]
fn cost_ordering_and_param_count() {
    let mut prev = 0;
    for name in ["b0", "b2", "b5"] {
        let cfg = mitseg::variants::load_variant(name).unwrap();
        let r = count_cost(&cfg, 512, 512).unwrap();
        assert!(r.macs > prev, "{name}");
        prev = r.macs;
    }
    for name in ["nano", "b0"] {
        let cfg = mitseg::variants::load_variant(name).unwrap();
        let model = SegModel::<f32>::new(&cfg, 0).unwrap();
        assert_eq!(count_cost(&cfg, 64, 64).unwrap().params, model.params.numel() as u64, "{name}");
    }
}

#[test]
fn attention_macs_scale_with_reduction() {
    let dense = reduced_attention_macs(64, 64, 1, 32).unwrap();
    for (r, div) in [(2, 4), (4, 16), (8, 64)] {
        assert_eq!(reduced_attention_macs(64, 64, r, 32).unwrap() * div, dense);
    }
}
