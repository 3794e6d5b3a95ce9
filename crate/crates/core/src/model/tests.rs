use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use triad_tensor::{Tape, Tensor};

use super::*;

fn tiny(arch: Arch) -> EncoderConfig {
    EncoderConfig {
        arch,
        feature_size: 4,
        depths: [1, 1, 1, 1],
        heads: [1, 1, 2, 2],
        window: 2,
        patch: 2,
        in_channels: 1,
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect())
}

#[test]
fn bottleneck_width_follows_feature_size() {
    for (c, b) in [(48, 768), (96, 1536), (192, 3072)] {
        assert_eq!(EncoderConfig::with_feature_size(c).bottleneck_channels(), b);
    }
}

#[test]
fn head_divisibility() {
    let cfg = |heads| EncoderConfig { feature_size: 12, depths: [1; 4], heads, ..Default::default() };
    assert!(cfg([1, 2, 3, 4]).validate().is_ok());
    assert!(cfg([1, 2, 4, 8]).validate().is_ok());
    assert!(matches!(cfg([1, 2, 5, 8]).validate(), Err(ModelError::Config(_))));
    assert!(matches!(build_encoder(&cfg([1, 2, 5, 8]), 0), Err(ModelError::Config(_))));
    assert!(EncoderConfig::default().validate().is_ok());
}

#[test]
fn builds_are_deterministic() {
    let cfg = tiny(Arch::Swin);
    assert_eq!(build_encoder(&cfg, 5).unwrap(), build_encoder(&cfg, 5).unwrap());
    assert_ne!(build_encoder(&cfg, 5).unwrap(), build_encoder(&cfg, 6).unwrap());
    assert!(build_encoder(&cfg, 5).unwrap().names().all(|n| n.starts_with(ENCODER_PREFIX)));
}

#[test]
fn init_rules() {
    let p = build_encoder(&EncoderConfig { feature_size: 8, heads: [1, 2, 4, 8], ..Default::default() }, 1).unwrap();
    let qkv = p.get("encoder.layers1.blocks.0.attn.qkv.weight").unwrap();
    let std = (qkv.data().iter().map(|x| x * x).sum::<f32>() / qkv.numel() as f32).sqrt();
    assert!((0.015..0.02).contains(&std), "truncated-normal std {std}");
    assert!(qkv.data().iter().all(|x| x.abs() <= 0.04));
    assert!(p.get("encoder.layers1.blocks.0.attn.qkv.bias").unwrap().data().iter().all(|&x| x == 0.0));
    assert!(p.get("encoder.layers2.blocks.1.norm1.weight").unwrap().data().iter().all(|&x| x == 1.0));
    let conv = p.get("encoder.layers1c.conv1.weight").unwrap();
    let bound = 1.0 / (8.0f32 * 27.0).sqrt();
    assert!(conv.data().iter().all(|x| x.abs() <= bound));
}

fn shapes(p: &Pyramid<'_, f32>) -> Vec<Vec<usize>> {
    p.levels.iter().map(|l| l.shape().to_vec()).collect()
}

#[test]
fn pyramid_schedule_for_both_architectures() {
    for arch in [Arch::Swin, Arch::Conv] {
        let cfg = EncoderConfig { feature_size: 12, heads: [1, 2, 3, 4], window: 4, arch, ..Default::default() };
        let params = build_encoder(&cfg, 0).unwrap();
        let tape = Tape::<f32>::inference();
        let p = params.bind(&tape, |_| false);
        let x = tape.constant(randn(&[2, 1, 64, 64, 64], 1));
        let pyr = encoder_forward(&cfg, &p, &x).unwrap();
        let want: Vec<Vec<usize>> = (0..5).map(|k| vec![2, 12 << k, 32 >> k, 32 >> k, 32 >> k]).collect();
        assert_eq!(shapes(&pyr), want, "{arch:?}");
        assert_eq!(pyr.bottleneck().shape(), &[2, 192, 2, 2, 2]);
        assert!(pyr.levels.iter().all(|l| l.value().all_finite()));
    }
}

#[test]
fn non_divisible_input_names_the_axis() {
    let cfg = tiny(Arch::Swin);
    let params = build_encoder(&cfg, 0).unwrap();
    let tape = Tape::<f32>::inference();
    let p = params.bind(&tape, |_| false);
    let x = tape.constant(Tensor::zeros(&[1, 1, 50, 64, 64]));
    match encoder_forward(&cfg, &p, &x) {
        Err(ModelError::Shape(msg)) => assert!(msg.contains("axis 0"), "{msg}"),
        other => panic!("unexpected {:?}", other.map(|_| ())),
    }
    let x2 = tape.constant(Tensor::zeros(&[1, 2, 32, 32, 32]));
    assert!(matches!(encoder_forward(&cfg, &p, &x2), Err(ModelError::Config(_))));
}

#[test]
fn forward_is_deterministic() {
    let cfg = tiny(Arch::Swin);
    let params = build_encoder(&cfg, 3).unwrap();
    let x = randn(&[1, 1, 32, 32, 32], 4);
    let run = || {
        let tape = Tape::<f32>::inference();
        let p = params.bind(&tape, |_| false);
        let pyr = encoder_forward(&cfg, &p, &tape.constant(x.clone())).unwrap();
        pyr.bottleneck().value().clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn recon_decoder_shapes_and_mismatch() {
    let cfg = EncoderConfig { feature_size: 12, heads: [1, 2, 3, 4], ..Default::default() };
    let dec = build_recon_decoder(&cfg, 0).unwrap();
    let tape = Tape::<f32>::inference();
    let p = dec.bind(&tape, |_| false);
    let z = tape.constant(randn(&[2, 192, 2, 2, 2], 0));
    assert_eq!(recon_decoder_forward(&p, &z).unwrap().shape(), &[2, 1, 64, 64, 64]);
    let wrong = tape.constant(randn(&[1, 384, 1, 1, 1], 0));
    assert!(matches!(recon_decoder_forward(&p, &wrong), Err(ModelError::Config(_))));
}

#[test]
fn seg_head_shapes_and_zero_params() {
    let cfg = tiny(Arch::Swin);
    let mut params = build_encoder(&cfg, 0).unwrap();
    params.extend(build_seg_decoder(&cfg, 2, 1).unwrap());
    let tape = Tape::<f32>::inference();
    let p = params.bind(&tape, |_| false);
    let x = tape.constant(randn(&[1, 1, 32, 32, 32], 2));
    let pyr = encoder_forward(&cfg, &p, &x).unwrap();
    let logits = seg_decoder_forward(&p, &x, &pyr, 2).unwrap();
    assert_eq!(logits.shape(), &[1, 2, 32, 32, 32]);
    assert!(matches!(seg_decoder_forward(&p, &x, &pyr, 1), Err(ModelError::Config(_))));
    assert!(matches!(build_seg_decoder(&cfg, 1, 0), Err(ModelError::Config(_))));

    let mut zero = params.clone();
    for (_, t) in zero.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let tape = Tape::<f32>::inference();
    let p = zero.bind(&tape, |_| false);
    let pyr = encoder_forward(&cfg, &p, &x.detach_to(&tape)).unwrap();
    let logits = seg_decoder_forward(&p, &x.detach_to(&tape), &pyr, 2).unwrap();
    assert!(logits.value().data().iter().all(|&v| v == 0.0));
    let probs = triad_tensor::softmax_channels(logits.value().data(), 1, 2, 32 * 32 * 32);
    assert!(probs.iter().all(|&q| q == 0.5));
}

/// Re-creates a constant on another tape.
trait DetachTo<'a> {
    fn detach_to<'t>(&self, tape: &'t Tape<f32>) -> triad_tensor::Var<'t, f32>;
}

impl DetachTo<'_> for triad_tensor::Var<'_, f32> {
    fn detach_to<'t>(&self, tape: &'t Tape<f32>) -> triad_tensor::Var<'t, f32> {
        tape.constant(self.value().clone())
    }
}

#[test]
fn cls_head_shapes_and_pooling() {
    let cfg = EncoderConfig::default();
    let head = build_cls_head(&cfg, 3, DEFAULT_CLS_HIDDEN, 0).unwrap();
    let tape = Tape::<f32>::inference();
    let p = head.bind(&tape, |_| false);
    let z = tape.constant(randn(&[3, 768, 3, 3, 3], 0));
    assert_eq!(cls_head_forward(&p, &z, 3).unwrap().shape(), &[3, 3]);
    // a constant map pools to the same constant as its 1^3 version
    let mut vals = Vec::new();
    for s in 0..2 {
        for c in 0..768 {
            vals.push((s * 768 + c) as f32 * 1e-3);
        }
    }
    let small = tape.constant(Tensor::from_vec(&[2, 768, 1, 1, 1], vals.clone()));
    let big: Vec<f32> = vals.iter().flat_map(|&v| std::iter::repeat_n(v, 27)).collect();
    let big = tape.constant(Tensor::from_vec(&[2, 768, 3, 3, 3], big));
    let a = cls_head_forward(&p, &small, 3).unwrap();
    let b = cls_head_forward(&p, &big, 3).unwrap();
    for (x, y) in a.value().data().iter().zip(b.value().data()) {
        assert!((x - y).abs() < 1e-5);
    }
    assert!(cls_head_forward(&p, &z, 1).is_err());
}

#[test]
fn reg_head_starts_at_identity() {
    let cfg = EncoderConfig { in_channels: 2, ..tiny(Arch::Swin) };
    assert!(matches!(build_reg_head(&tiny(Arch::Swin), 0), Err(ModelError::Config(_))));
    let mut params = build_encoder(&cfg, 0).unwrap();
    params.extend(build_reg_head(&cfg, 1).unwrap());
    let tape = Tape::<f32>::inference();
    let p = params.bind(&tape, |_| false);
    let x = tape.constant(randn(&[1, 2, 32, 32, 32], 5));
    let pyr = encoder_forward(&cfg, &p, &x).unwrap();
    let field = reg_head_forward(&p, &x, &pyr).unwrap();
    assert_eq!(field.shape(), &[1, 3, 32, 32, 32]);
    assert!(field.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn transfer_rules() {
    let cfg = tiny(Arch::Swin);
    let mut src = build_encoder(&cfg, 1).unwrap();
    src.extend(build_recon_decoder(&cfg, 1).unwrap());
    let mut dst = build_encoder(&cfg, 2).unwrap();
    dst.extend(build_seg_decoder(&cfg, 2, 2).unwrap());
    let out = transfer_encoder_weights(&src, &dst).unwrap();
    for (name, t) in out.iter() {
        if name.starts_with(ENCODER_PREFIX) {
            assert_eq!(t, src.get(name).unwrap());
        } else {
            assert_eq!(t, dst.get(name).unwrap());
        }
    }
    assert_eq!(transfer_encoder_weights(&src, &out).unwrap(), out);
    let wide = build_encoder(&EncoderConfig { feature_size: 8, ..cfg.clone() }, 1).unwrap();
    match transfer_encoder_weights(&wide, &dst) {
        Err(ModelError::Transfer { mismatched, .. }) => assert!(!mismatched.is_empty()),
        other => panic!("unexpected {other:?}"),
    }
    let deeper = build_encoder(&EncoderConfig { depths: [2, 1, 1, 1], ..cfg.clone() }, 1).unwrap();
    assert!(matches!(transfer_encoder_weights(&deeper, &dst), Err(ModelError::Transfer { .. })));
    assert!(matches!(transfer_encoder_weights(&dst, &deeper), Err(ModelError::Transfer { .. })));
}

#[test]
fn input_adaptation_preserves_replicated_response() {
    for arch in [Arch::Swin, Arch::Conv] {
        let cfg = tiny(arch);
        let one = build_encoder(&cfg, 1).unwrap();
        let two = adapt_input_channels(&one, arch, 2).unwrap();
        let cfg2 = EncoderConfig { in_channels: 2, ..cfg.clone() };
        let target = build_encoder(&cfg2, 9).unwrap();
        let moved = transfer_encoder_weights(&two, &target).unwrap();
        let x = randn(&[1, 1, 32, 32, 32], 3);
        let xx = Tensor::from_vec(&[1, 2, 32, 32, 32], [x.data(), x.data()].concat());
        let tape = Tape::<f32>::inference();
        let a = encoder_forward(&cfg, &one.bind(&tape, |_| false), &tape.constant(x)).unwrap();
        let b = encoder_forward(&cfg2, &moved.bind(&tape, |_| false), &tape.constant(xx)).unwrap();
        for (u, v) in a.bottleneck().value().data().iter().zip(b.bottleneck().value().data()) {
            assert!((u - v).abs() < 1e-4, "{arch:?}: {u} vs {v}");
        }
    }
}

#[test]
fn count_matches_enumeration() {
    let cfgs = [
        tiny(Arch::Swin),
        tiny(Arch::Conv),
        EncoderConfig { feature_size: 6, depths: [2, 1, 3, 1], heads: [1, 2, 3, 6], window: 3, ..Default::default() },
        EncoderConfig { in_channels: 2, ..tiny(Arch::Swin) },
    ];
    for cfg in &cfgs {
        let enc = build_encoder(cfg, 0).unwrap();
        assert_eq!(count_params(cfg, ModelKind::Encoder), enc.numel());
        let n = |p: ParamSet| enc.numel() + p.numel();
        assert_eq!(count_params(cfg, ModelKind::Pretrain), n(build_recon_decoder(cfg, 0).unwrap()));
        assert_eq!(
            count_params(cfg, ModelKind::Segmentation { n_classes: 3 }),
            n(build_seg_decoder(cfg, 3, 0).unwrap())
        );
        assert_eq!(
            count_params(cfg, ModelKind::Classification { n_classes: 2, hidden: 7 }),
            n(build_cls_head(cfg, 2, 7, 0).unwrap())
        );
        if cfg.in_channels == 2 {
            assert_eq!(count_params(cfg, ModelKind::Registration), n(build_reg_head(cfg, 0).unwrap()));
        }
    }
}

#[test]
fn count_linear_layer_contribution() {
    // the classifier's second layer is a plain linear map: hidden 4 -> 3 classes adds 15
    let cfg = tiny(Arch::Swin);
    let with = count_params(&cfg, ModelKind::Classification { n_classes: 3, hidden: 4 });
    let head = build_cls_head(&cfg, 3, 4, 0).unwrap();
    assert_eq!(head.get("cls.fc2.weight").unwrap().numel() + head.get("cls.fc2.bias").unwrap().numel(), 15);
    assert_eq!(with - count_params(&cfg, ModelKind::Encoder), cfg.bottleneck_channels() * 4 + 4 + 15);
}

#[test]
fn base_model_size_is_near_the_reported_figure() {
    let n = count_params(&EncoderConfig::default(), ModelKind::Segmentation { n_classes: 2 }) as f64;
    assert!((n - 72.8e6).abs() / 72.8e6 <= 0.15, "{n}");
}

#[test]
fn window_plan_geometry() {
    use super::swin::WindowPlan;
    let plan = WindowPlan::new(1, [6, 4, 3], 4, true);
    // axis 0 is padded to 8 and shifted by 2; the others fit in one window
    assert_eq!(plan.win, [4, 4, 3]);
    assert_eq!(plan.shift, [2, 0, 0]);
    assert_eq!(plan.n_windows, 2);
    let real: Vec<u32> = plan.partition.iter().copied().filter(|&r| r != triad_tensor::PAD_ROW).collect();
    assert_eq!(real.len(), 6 * 4 * 3);
    for (row, &slot) in plan.reverse.iter().enumerate() {
        assert_eq!(plan.partition[slot as usize], row as u32);
    }
    let regions = plan.regions.as_ref().unwrap();
    // second window on axis 0 spans padded positions 4..8: labels 1,1 then 2,2
    let lab: Vec<u8> = (0..4).map(|iz| regions[48 + iz * 12]).collect();
    assert_eq!(lab, [9, 9, 18, 18]);
    assert!(WindowPlan::new(1, [4, 4, 4], 4, true).regions.is_none());
}

/// Shifts a `[1, D, H, W, C]` token grid by `s` along axis 0, zero filling the start.
fn translate(x: &Tensor<f64>, grid: [usize; 3], c: usize, s: usize) -> Tensor<f64> {
    let plane = grid[1] * grid[2] * c;
    let mut out = vec![0.0; x.numel()];
    out[s * plane..].copy_from_slice(&x.data()[..(grid[0] - s) * plane]);
    Tensor::from_vec(x.shape(), out)
}

#[test]
fn window_aligned_translation_is_equivariant() {
    let cfg = EncoderConfig { feature_size: 4, depths: [2, 1, 1, 1], heads: [2, 2, 2, 2], window: 2, ..Default::default() };
    let mut params = build_encoder(&cfg, 7).unwrap();
    // give the bias tables some structure
    for (name, t) in params.iter_mut() {
        if name.ends_with("relative_position_bias_table") {
            *t = randn(t.shape(), 11);
        }
    }
    let grid = [8, 4, 4];
    let n = 8 * 4 * 4;
    let x = randn(&[1, n, 4], 3).cast::<f64>();
    let xs = translate(&x, grid, 4, 2);
    for shifted in [false, true] {
        let tape = Tape::<f64>::inference();
        let p = params.bind(&tape, |_| false);
        let plan = super::swin::WindowPlan::new(1, grid, 2, shifted);
        let name = format!("encoder.layers1.blocks.{}", shifted as usize);
        let a = super::swin::swin_block(&p, &name, &tape.constant(x.clone()), 2, &plan).unwrap();
        let b = super::swin::swin_block(&p, &name, &tape.constant(xs.clone()), 2, &plan).unwrap();
        let plane = 4 * 4 * 4;
        // interior: source rows 2..4 land on rows 4..6, away from the fill and the wrap
        let (a, b) = (a.value().data(), b.value().data());
        for z in 2..4 {
            for i in 0..plane {
                assert!((a[z * plane + i] - b[(z + 2) * plane + i]).abs() < 1e-12, "shifted={shifted} z={z}");
            }
        }
    }
}

/// Central differences (step 1e-3, f64) on a random slice of `slice` parameter
/// coordinates, compared norm-wise against reverse-mode gradients.
fn slice_check<F>(params: &ParamSet, slice: usize, seed: u64, loss: F)
where
    F: for<'t> Fn(&'t Tape<f64>, &Bound<'t, f64>) -> triad_tensor::Var<'t, f64>,
{
    let mut flat = Vec::new();
    for (n, t) in params.iter() {
        flat.extend((0..t.numel()).map(|i| (n.to_owned(), i)));
    }
    let picks = triad_tensor::gradcheck::sample_coords(flat.len(), slice, seed);

    let tape = Tape::<f64>::new();
    let p = params.bind(&tape, |_| true);
    let l = loss(&tape, &p);
    let grads = tape.backward(&l);

    let h = 1e-3;
    let mut work: BTreeMap<String, Tensor<f64>> = params.iter().map(|(n, t)| (n.to_owned(), t.cast::<f64>())).collect();
    let (mut d2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    for &k in &picks {
        let (name, i) = &flat[k];
        let mut eval = |delta: f64| {
            let orig = work[name].data()[*i];
            work.get_mut(name).unwrap().data_mut()[*i] = orig + delta;
            let tape = Tape::<f64>::inference();
            let p = Bound::from_vars(work.iter().map(|(n, t)| (n.clone(), tape.constant(t.clone()))).collect());
            let v = loss(&tape, &p).value().item();
            work.get_mut(name).unwrap().data_mut()[*i] = orig;
            v
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let analytic = grads.get(p.get(name).unwrap()).map_or(0.0, |g| g.data()[*i]);
        d2 += (analytic - numeric) * (analytic - numeric);
        a2 += analytic * analytic;
        n2 += numeric * numeric;
    }
    let rel = d2.sqrt() / f64::max(a2, n2).sqrt().max(1e-300);
    assert!(a2 > 0.0, "slice carries no gradient");
    assert!(rel < 1e-3, "relative error {rel} over {} coordinates", picks.len());
}

fn smoothness<'t>(u: &triad_tensor::Var<'t, f64>) -> triad_tensor::Var<'t, f64> {
    let s = u.shape().to_vec();
    let mut acc: Option<triad_tensor::Var<'t, f64>> = None;
    for ax in 2..5 {
        let d = u.narrow(ax, 1, s[ax] - 1).sub(&u.narrow(ax, 0, s[ax] - 1)).square().mean();
        acc = Some(match acc {
            None => d,
            Some(a) => a.add(&d),
        });
    }
    acc.unwrap()
}

/// Single-head tiny model; the slice checks run two forward passes per coordinate.
fn grad_cfg(arch: Arch) -> EncoderConfig {
    EncoderConfig { heads: [1; 4], ..tiny(arch) }
}

#[test]
fn seg_cross_entropy_gradient() {
    let cfg = grad_cfg(Arch::Swin);
    let mut params = build_encoder(&cfg, 0).unwrap();
    params.extend(build_seg_decoder(&cfg, 2, 1).unwrap());
    let x = randn(&[1, 1, 32, 32, 32], 2).cast::<f64>();
    let labels: Vec<usize> = x.data().iter().map(|&v| (v > 0.2) as usize).collect();
    slice_check(&params, 1000, 1, |tape, p| {
        let xv = tape.constant(x.clone());
        let pyr = encoder_forward(&cfg, p, &xv).unwrap();
        seg_decoder_forward(p, &xv, &pyr, 2).unwrap().cross_entropy(&labels)
    });
}

#[test]
fn cls_cross_entropy_gradient() {
    for arch in [Arch::Swin, Arch::Conv] {
        let cfg = grad_cfg(arch);
        let mut params = build_encoder(&cfg, 0).unwrap();
        params.extend(build_cls_head(&cfg, 3, 16, 1).unwrap());
        let x = randn(&[2, 1, 32, 32, 32], 4).cast::<f64>();
        slice_check(&params, 1000, 2, |tape, p| {
            let pyr = encoder_forward(&cfg, p, &tape.constant(x.clone())).unwrap();
            cls_head_forward(p, pyr.bottleneck(), 3).unwrap().cross_entropy(&[0, 2])
        });
    }
}

#[test]
fn reg_smoothness_gradient() {
    let cfg = EncoderConfig { in_channels: 2, ..grad_cfg(Arch::Swin) };
    let mut params = build_encoder(&cfg, 0).unwrap();
    params.extend(build_reg_head(&cfg, 1).unwrap());
    // leave the identity start so the loss depends on every layer
    *params.get_mut("reg.out.weight").unwrap() = randn(&[3, 4, 1, 1, 1], 8);
    let x = randn(&[1, 2, 32, 32, 32], 6).cast::<f64>();
    slice_check(&params, 1000, 3, |tape, p| {
        let xv = tape.constant(x.clone());
        let pyr = encoder_forward(&cfg, p, &xv).unwrap();
        smoothness(&reg_head_forward(p, &xv, &pyr).unwrap())
    });
}

#[test]
fn recon_squared_error_gradient() {
    let cfg = grad_cfg(Arch::Swin);
    let mut params = build_encoder(&cfg, 0).unwrap();
    params.extend(build_recon_decoder(&cfg, 1).unwrap());
    let x = randn(&[1, 1, 32, 32, 32], 9).cast::<f64>();
    slice_check(&params, 1000, 4, |tape, p| {
        let xv = tape.constant(x.clone());
        let pyr = encoder_forward(&cfg, p, &xv).unwrap();
        recon_decoder_forward(p, pyr.bottleneck()).unwrap().sub(&xv).square().mean()
    });
}

#[test]
fn warp_zero_field_is_identity() {
    let m = randn(&[2, 2, 4, 5, 6], 1);
    let z = Tensor::zeros(&[2, 3, 4, 5, 6]);
    assert_eq!(warp(&m, &z, WarpMode::Nearest).unwrap(), m);
    let t = warp(&m, &z, WarpMode::Trilinear).unwrap();
    assert!(t.data().iter().zip(m.data()).all(|(a, b)| (a - b).abs() < 1e-6));
    assert!(matches!(warp(&m, &Tensor::zeros(&[2, 3, 4, 5, 5]), WarpMode::Nearest), Err(ModelError::Shape(_))));
}

#[test]
fn warp_integer_shift() {
    let dims = [6, 5, 4];
    let n = 120;
    let m = randn(&[1, 1, 6, 5, 4], 2);
    let mut u = vec![0.0f32; 3 * n];
    u[..n].iter_mut().for_each(|v| *v = 1.0);
    let u = Tensor::from_vec(&[1, 3, 6, 5, 4], u);
    for mode in [WarpMode::Trilinear, WarpMode::Nearest] {
        let w = warp(&m, &u, mode).unwrap();
        for z in 0..dims[0] - 1 {
            for r in 0..20 {
                assert!((w.data()[z * 20 + r] - m.data()[(z + 1) * 20 + r]).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn trilinear_warp_composes_affine_fields() {
    let dims = [7, 6, 5];
    let a = [0.7, -1.3, 2.1];
    let f = |p: [f64; 3]| a[0] * p[0] + a[1] * p[1] + a[2] * p[2] + 0.5;
    let mut m = Vec::new();
    let mut u = vec![0.0; 3 * 210];
    for z in 0..7 {
        for y in 0..6 {
            for x in 0..5 {
                m.push(f([z as f64, y as f64, x as f64]));
            }
        }
    }
    // smooth displacement that keeps every sample inside the grid
    for z in 0..7 {
        for y in 0..6 {
            for x in 0..5 {
                let v = (z * 6 + y) * 5 + x;
                let p = [z as f64, y as f64, x as f64];
                let g: [f64; 3] = std::array::from_fn(|k| (0.9 * (p[k] / (dims[k] - 1) as f64 * 3.1).sin()).abs());
                for k in 0..3 {
                    let room = (dims[k] - 1) as f64 - p[k];
                    u[k * 210 + v] = g[k].min(room) * if k == 1 { 1.0 } else { 0.5 };
                }
            }
        }
    }
    let mt = Tensor::from_vec(&[1, 1, 7, 6, 5], m);
    let ut = Tensor::from_vec(&[1, 3, 7, 6, 5], u.clone());
    let w = warp(&mt, &ut, WarpMode::Trilinear).unwrap();
    for v in 0..210 {
        let p = [(v / 30) as f64, ((v / 5) % 6) as f64, (v % 5) as f64];
        let q = [p[0] + u[v], p[1] + u[210 + v], p[2] + u[420 + v]];
        assert!((w.data()[v] - f(q)).abs() < 1e-4);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn nearest_warp_emits_only_moving_values(seed in any::<u64>(), amp in 0.0f32..4.0) {
        let m = randn(&[1, 1, 4, 4, 4], seed);
        let u = randn(&[1, 3, 4, 4, 4], seed ^ 1).map(|v| v * amp);
        let w = warp(&m, &u, WarpMode::Nearest).unwrap();
        prop_assert!(w.data().iter().all(|v| m.data().contains(v)));
        let t = warp(&m, &u, WarpMode::Trilinear).unwrap();
        let (lo, hi) = m.data().iter().fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        prop_assert!(t.data().iter().all(|&v| v >= lo - 1e-5 && v <= hi + 1e-5));
    }
}

