use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use triad_tensor::gradcheck::check_gradients;
use triad_tensor::{Tape, Tensor};

use super::*;
use crate::model::EncoderConfig;

fn oracle_log_ratio(f: &[Vec<f64>], y: &[Vec<f64>], eps: f64) -> f64 {
    let d = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() + eps;
    let b = f.len();
    let (mut acc, mut n) = (0.0, 0usize);
    for a in 0..b {
        for i in 0..b {
            for j in 0..b {
                if i == a || j == a || j <= i {
                    continue;
                }
                let r = (d(&f[a], &f[i]) / d(&f[a], &f[j])).ln() - (d(&y[a], &y[i]) / d(&y[a], &y[j])).ln();
                acc += r * r;
                n += 1;
            }
        }
    }
    acc / n as f64
}

fn rand_rows(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Vec<Vec<f64>> {
    (0..b).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

/// Random rotation by Gram-Schmidt on a random matrix.
fn rotation(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-3 {
            q.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    q
}

fn apply(rows: &[Vec<f64>], q: &[Vec<f64>], shift: &[f64]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| q.iter().zip(shift).map(|(qr, s)| qr.iter().zip(r).map(|(a, b)| a * b).sum::<f64>() + s).collect())
        .collect()
}

#[test]
fn l1_matches_nested_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shape = [2, 1, 3, 4, 5];
    let n: usize = shape.iter().product();
    let a: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let b: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut acc = 0.0;
    for i in 0..n {
        acc += (a[i] - b[i]).abs();
    }
    let tape = Tape::<f64>::inference();
    let ra = tape.constant(Tensor::from_vec(&shape, a.clone()));
    let rb = tape.constant(Tensor::from_vec(&shape, b));
    assert!((l1_loss(&ra, &rb).unwrap().value().item() - acc / n as f64).abs() < 1e-12);
    assert_eq!(l1_loss(&ra, &ra).unwrap().value().item(), 0.0);
    let shifted = tape.constant(Tensor::from_vec(&shape, a.iter().map(|v| v + 0.5).collect()));
    assert!((l1_loss(&shifted, &ra).unwrap().value().item() - 0.5).abs() < 1e-12);
    let other = tape.constant(Tensor::zeros(&[2, 1, 3, 4, 4]));
    assert!(matches!(l1_loss(&ra, &other), Err(PretrainError::Shape(_))));
}

#[test]
fn log_ratio_three_point_example() {
    let f = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0]];
    let y = vec![vec![0.0], vec![1.0], vec![3.0]];
    let expect = 0.14805899344191256;
    assert!((oracle_log_ratio(&f, &y, 1e-6) - expect).abs() < 1e-12);
    assert!((log_ratio_value(&f, &y, LOG_RATIO_EPS).unwrap() - expect).abs() < 1e-12);
}

#[test]
fn log_ratio_matches_oracle_on_random_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..50 {
        let b = 3 + case % 6;
        let (df, dy) = (rng.random_range(1..10), rng.random_range(1..10));
        let f = rand_rows(&mut rng, b, df);
        let y = rand_rows(&mut rng, b, dy);
        let v = log_ratio_value(&f, &y, LOG_RATIO_EPS).unwrap();
        assert!((v - oracle_log_ratio(&f, &y, 1e-6)).abs() < 1e-12, "case {case}");

        let flat: Vec<f64> = f.iter().flatten().copied().collect();
        let tape = Tape::<f64>::inference();
        let fv = tape.constant(Tensor::from_vec(&[b, df], flat));
        assert!((log_ratio_loss(&fv, &y, LOG_RATIO_EPS).unwrap().value().item() - v).abs() < 1e-12);
    }
}

#[test]
fn log_ratio_zero_for_identical_and_scaled() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let y = rand_rows(&mut rng, 8, 5);
    assert!(log_ratio_value(&y, &y, LOG_RATIO_EPS).unwrap() < 1e-10);
    let f: Vec<Vec<f64>> = y.iter().map(|r| r.iter().map(|v| 3.7 * v).collect()).collect();
    assert!(log_ratio_value(&f, &y, LOG_RATIO_EPS).unwrap() < 1e-10);
}

#[test]
fn log_ratio_isometry_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let f = rand_rows(&mut rng, 6, 4);
        let y = rand_rows(&mut rng, 6, 3);
        let base = log_ratio_value(&f, &y, 1e-12).unwrap();
        let (qf, qy) = (rotation(&mut rng, 4), rotation(&mut rng, 3));
        let sf: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
        let sy: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
        let fr = apply(&f, &qf, &sf);
        let yr = apply(&y, &qy, &sy);
        assert!((log_ratio_value(&fr, &y, 1e-12).unwrap() - base).abs() < 1e-8);
        assert!((log_ratio_value(&f, &yr, 1e-12).unwrap() - base).abs() < 1e-8);
        let scaled: Vec<Vec<f64>> = f.iter().map(|r| r.iter().map(|v| v * 0.3).collect()).collect();
        assert!((log_ratio_value(&scaled, &y, 1e-12).unwrap() - base).abs() < 1e-8);
        let ys: Vec<Vec<f64>> = y.iter().map(|r| r.iter().map(|v| v * 11.0).collect()).collect();
        assert!((log_ratio_value(&f, &ys, 1e-12).unwrap() - base).abs() < 1e-8);
    }
}

#[test]
fn log_ratio_rejects_small_batches() {
    let f = vec![vec![0.0], vec![1.0]];
    assert!(matches!(log_ratio_value(&f, &f, LOG_RATIO_EPS), Err(PretrainError::BatchSize(2))));
    let tape = Tape::<f64>::inference();
    let fv = tape.constant(Tensor::from_vec(&[2, 1], vec![0.0, 1.0]));
    assert!(matches!(log_ratio_loss(&fv, &f, LOG_RATIO_EPS), Err(PretrainError::BatchSize(2))));
}

#[test]
fn log_ratio_allows_duplicates() {
    let f = vec![vec![1.0, 1.0], vec![1.0, 1.0], vec![0.0, 2.0], vec![3.0, 0.0]];
    let y = rand_rows(&mut ChaCha8Rng::seed_from_u64(5), 4, 3);
    let v = log_ratio_value(&f, &y, LOG_RATIO_EPS).unwrap();
    assert!(v.is_finite());
    assert!((v - oracle_log_ratio(&f, &y, 1e-6)).abs() < 1e-12);
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (b, d, vox) = (5, 7, 2 * 2 * 2);
    let y = rand_rows(&mut rng, b, 4);
    let recon = Tensor::from_vec(&[b, 1, 2, 2, 2], (0..b * vox).map(|_| rng.random_range(0.0..1.0)).collect());
    let target: Tensor<f64> = Tensor::from_vec(&[b, 1, 2, 2, 2], (0..b * vox).map(|_| rng.random_range(0.0..1.0)).collect());
    let f = Tensor::from_vec(&[b, d], (0..b * d).map(|_| rng.random_range(-1.0..1.0)).collect());
    for lambda in [0.01, 1.0] {
        let y = y.clone();
        let target = target.clone();
        let check = check_gradients(
            &[recon.clone(), f.clone()],
            move |tape, xs| {
                let t = tape.constant(target.clone());
                total_loss(&xs[0], &t, &xs[1], &y, lambda).unwrap().0
            },
            1e-6,
            usize::MAX,
            7,
        );
        assert!(check.rel_err < 1e-4, "lambda {lambda}: {check:?}");
    }
}

#[test]
fn total_loss_composition() {
    assert!((combine(0.2, 1.0, 0.01) - 0.21).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tape = Tape::<f64>::inference();
    let recon = tape.constant(Tensor::from_vec(&[4, 1, 1, 1, 2], (0..8).map(|_| rng.random_range(0.0..1.0)).collect()));
    let target = tape.constant(Tensor::from_vec(&[4, 1, 1, 1, 2], (0..8).map(|_| rng.random_range(0.0..1.0)).collect()));
    let f_rows = rand_rows(&mut rng, 4, 3);
    let f = tape.constant(Tensor::from_vec(&[4, 3], f_rows.iter().flatten().copied().collect()));
    let y = rand_rows(&mut rng, 4, 2);

    let (t0, p0) = total_loss(&recon, &target, &f, &y, 0.0).unwrap();
    assert_eq!(t0.value().item(), p0.l1);
    assert_eq!(p0.total, p0.l1);

    let (t, p) = total_loss(&recon, &target, &f, &y, 0.01).unwrap();
    let l1 = l1_loss(&recon, &target).unwrap().value().item();
    let lr = oracle_log_ratio(&f_rows, &y, 1e-6);
    assert!((p.l1 - l1).abs() < 1e-12);
    assert!((p.log_ratio.unwrap() - lr).abs() < 1e-12);
    assert!((t.value().item() - (l1 + 0.01 * lr)).abs() < 1e-12);
    assert!((p.total - combine(p.l1, p.log_ratio.unwrap(), 0.01)).abs() < 1e-12);
}

#[test]
fn schedule_endpoints_and_shape() {
    let (base, w, n) = (1e-4, 1000, 200_000);
    assert_eq!(lr_schedule(1000, base, w, n).unwrap(), base);
    assert_eq!(lr_schedule(200_000, base, w, n).unwrap(), 0.0);
    assert_eq!(lr_schedule(0, base, w, n).unwrap(), 0.0);
    assert!((lr_schedule(w + (n - w) / 2, base, w, n).unwrap() - base / 2.0).abs() < 1e-18);
    let below = lr_schedule(999, base, w, n).unwrap();
    assert!((below - base * 0.999).abs() < 1e-18);
    assert!((lr_schedule(1000, base, w, n).unwrap() - base * 1000.0 / 1000.0).abs() < 1e-12);
    assert!(matches!(lr_schedule(n + 1, base, w, n), Err(PretrainError::Schedule(_))));
    assert!(matches!(lr_schedule(0, base, n, n), Err(PretrainError::Schedule(_))));

    let cfg = PretrainConfig::default();
    assert_eq!(cfg.lr_at(1000).unwrap(), 1e-6);
    assert_eq!(cfg.lr_at(200_000).unwrap(), 0.0);
    let conv = PretrainConfig { model: EncoderConfig { arch: crate::model::Arch::Conv, ..Default::default() }, ..Default::default() };
    assert_eq!(conv.lr_at(1000).unwrap(), 1e-4);
}

#[test]
fn schedule_cosine_matches_closed_form() {
    let (base, w, n) = (2e-3, 10, 110);
    for s in w..=n {
        let t = (s - w) as f64 / (n - w) as f64;
        let expect = base * 0.5 * (1.0 + (PI * t).cos());
        assert!((lr_schedule(s, base, w, n).unwrap() - expect).abs() < 1e-15);
    }
    assert!((poly_schedule(5, 0.01, 10, 0.9).unwrap() - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-15);
    assert_eq!(poly_schedule(10, 0.01, 10, 0.9).unwrap(), 0.0);
}

proptest! {
    #[test]
    fn schedule_non_increasing_after_warmup(w in 0u64..500, extra in 1u64..5000, a in 0u64..10_000, b in 0u64..10_000) {
        let n = w + extra;
        let (lo, hi) = (w + a.min(b) % (extra + 1), w + a.max(b) % (extra + 1));
        let (lo, hi) = (lo.min(hi), lo.max(hi));
        prop_assert!(lr_schedule(hi, 1.0, w, n).unwrap() <= lr_schedule(lo, 1.0, w, n).unwrap());
    }

    #[test]
    fn log_ratio_symmetric_and_permutation_invariant(seed in 0u64..1000, b in 3usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = rand_rows(&mut rng, b, 3);
        let y = rand_rows(&mut rng, b, 2);
        let base = log_ratio_value(&f, &y, LOG_RATIO_EPS).unwrap();
        let mut perm: Vec<usize> = (0..b).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let fp: Vec<_> = perm.iter().map(|&i| f[i].clone()).collect();
        let yp: Vec<_> = perm.iter().map(|&i| y[i].clone()).collect();
        prop_assert!((log_ratio_value(&fp, &yp, LOG_RATIO_EPS).unwrap() - base).abs() < 1e-12);
        prop_assert!(base >= 0.0);
    }
}

#[test]
fn schedule_continuous_at_warmup() {
    for (w, n) in [(1000u64, 200_000u64), (5, 50), (1, 2)] {
        let base = 3e-4;
        let left = base * w as f64 / w as f64;
        assert!((lr_schedule(w, base, w, n).unwrap() - left).abs() < 1e-12);
        let approach = lr_schedule(w - 1, base, w, n).unwrap() + base / w as f64;
        assert!((approach - left).abs() < 1e-12);
    }
}

fn param_set(values: &[(&str, Vec<f32>)]) -> crate::model::ParamSet {
    let mut p = crate::model::ParamSet::new();
    for (n, v) in values {
        p.insert(*n, Tensor::from_vec(&[v.len()], v.clone()));
    }
    p
}

#[test]
fn adamw_first_step_by_hand() {
    let mut p = param_set(&[("w", vec![1.0, -2.0])]);
    let grads = [("w".to_owned(), Tensor::from_vec(&[2], vec![0.5f32, -0.25]))].into_iter().collect();
    let mut opt = Optimizer::new(OptimizerKind::adamw());
    opt.step(&mut p, &grads, 0.1);
    // first Adam step moves each weight by lr * sign(g) (up to eps), plus decoupled decay
    let expect = |w: f64, g: f64| w - 0.1 * (g.signum() * g.abs() / (g.abs() + 1e-8) + 0.01 * w);
    let w = p.get("w").unwrap().data();
    assert!((w[0] as f64 - expect(1.0, 0.5)).abs() < 1e-6);
    assert!((w[1] as f64 - expect(-2.0, -0.25)).abs() < 1e-6);
    assert_eq!(opt.t, 1);
    assert_eq!(opt.state["m"]["w"].data(), &[0.05, -0.025]);
}

#[test]
fn sgd_nesterov_two_steps_by_hand() {
    let kind = OptimizerKind::Sgd { momentum: 0.9, nesterov: true, weight_decay: 0.0 };
    let mut p = param_set(&[("w", vec![1.0])]);
    let mut opt = Optimizer::new(kind);
    let g = |v: f32| [("w".to_owned(), Tensor::from_vec(&[1], vec![v]))].into_iter().collect();
    opt.step(&mut p, &g(1.0), 0.1);
    // b = 1, step = g + 0.9 b = 1.9
    assert!((p.get("w").unwrap().data()[0] - (1.0 - 0.19)).abs() < 1e-6);
    opt.step(&mut p, &g(2.0), 0.1);
    // b = 0.9 + 2 = 2.9, step = 2 + 0.9 * 2.9 = 4.61
    assert!((p.get("w").unwrap().data()[0] - (0.81 - 0.461)).abs() < 1e-6);
}

#[test]
fn zero_lr_leaves_parameters_bit_identical() {
    for kind in [OptimizerKind::adamw(), OptimizerKind::adam(), OptimizerKind::sgd_nesterov(0.99)] {
        let mut p = param_set(&[("a", vec![0.3, -1.7, 2.5e-8]), ("b", vec![4.0])]);
        let before = p.clone();
        let grads = [("a".to_owned(), Tensor::from_vec(&[3], vec![1.0f32, -3.0, 0.1]))].into_iter().collect();
        let mut opt = Optimizer::new(kind);
        opt.step(&mut p, &grads, 0.0);
        assert_eq!(p, before);
    }
}

fn tiny_model() -> EncoderConfig {
    EncoderConfig { feature_size: 4, depths: [1; 4], heads: [1, 1, 2, 2], window: 2, ..Default::default() }
}

fn tiny_cfg() -> PretrainConfig {
    PretrainConfig {
        model: tiny_model(),
        steps: 5,
        warmup: 1,
        batch: 3,
        roi: 32,
        base_lr: Some(1e-3),
        checkpoint_every: 2,
        seed: 11,
        ..Default::default()
    }
}

fn random_checkpoint(seed: u64) -> Checkpoint {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = crate::model::ParamSet::new();
    let kinds = [OptimizerKind::adamw(), OptimizerKind::adam(), OptimizerKind::sgd_nesterov(0.99)];
    let mut opt = Optimizer::new(kinds[(seed % 3) as usize]);
    for i in 0..rng.random_range(1..6) {
        let shape: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(1..5)).collect();
        let n = shape.iter().product();
        // raw bit patterns, NaN payloads and subnormals included
        let data: Vec<f32> = (0..n).map(|_| f32::from_bits(rng.random())).collect();
        let name = format!("layer{i}.weight");
        for bufs in opt.state.values_mut() {
            bufs.insert(name.clone(), Tensor::from_vec(&shape, (0..n).map(|_| rng.random()).collect()));
        }
        params.insert(name, Tensor::from_vec(&shape, data));
    }
    opt.t = rng.random();
    Checkpoint {
        params,
        optimizer: opt,
        step: rng.random(),
        config_hash: format!("{:032x}", rng.random::<u128>()),
        rng: RngState { seed: rng.random(), stream: rng.random(), word_pos: rng.random::<u128>() >> 60 },
    }
}

fn bits(c: &Checkpoint) -> Vec<(String, Vec<u32>)> {
    let mut out: Vec<(String, Vec<u32>)> =
        c.params.iter().map(|(n, t)| (n.to_owned(), t.data().iter().map(|v| v.to_bits()).collect())).collect();
    for (slot, bufs) in &c.optimizer.state {
        for (n, t) in bufs {
            out.push((format!("{slot}/{n}"), t.data().iter().map(|v| v.to_bits()).collect()));
        }
    }
    out
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    for seed in 0..100 {
        let c = random_checkpoint(seed);
        let back = decode_checkpoint(&encode_checkpoint(&c)).unwrap();
        assert_eq!(bits(&back), bits(&c));
        assert_eq!((back.step, back.rng, back.optimizer.t, back.optimizer.kind), (c.step, c.rng, c.optimizer.t, c.optimizer.kind));
        assert_eq!(back.config_hash, c.config_hash);
        assert_eq!(encode_checkpoint(&back), encode_checkpoint(&c));
    }
}

#[test]
fn checkpoint_integrity_errors() {
    let bytes = encode_checkpoint(&random_checkpoint(1));
    assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(PretrainError::Integrity(_))));
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(matches!(decode_checkpoint(&longer), Err(PretrainError::Integrity(_))));
    let mut flipped = bytes.clone();
    let k = bytes.len() - 6;
    flipped[k] ^= 0x10;
    assert!(matches!(decode_checkpoint(&flipped), Err(PretrainError::Integrity(_))));
    assert!(matches!(decode_checkpoint(b"NOTACKPT"), Err(PretrainError::Integrity(_))));
}

#[test]
fn checkpoint_file_and_compatibility() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg();
    let state = TrainState::new(&cfg).unwrap();
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&state.to_checkpoint(), &path).unwrap();
    let back = load_checkpoint_for(&path, &cfg.model).unwrap();
    assert_eq!(back, state.to_checkpoint());

    let other = EncoderConfig { feature_size: 8, ..tiny_model() };
    assert!(matches!(load_checkpoint_for(&path, &other), Err(PretrainError::Compatibility(_))));
    let bigger = PretrainConfig { model: other, ..tiny_cfg() };
    assert!(matches!(TrainState::from_checkpoint(&bigger, back), Err(PretrainError::Compatibility(_))));

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(PretrainError::Integrity(_))));
}

#[test]
fn batch_order_covers_each_epoch() {
    let (n, batch) = (7, 3);
    let order: Vec<usize> = (0..14).flat_map(|s| batch_indices(5, s, batch, n)).collect();
    for epoch in order.chunks(n).take(6) {
        let mut e = epoch.to_vec();
        e.sort();
        assert_eq!(e, (0..n).collect::<Vec<_>>());
    }
    assert_eq!(batch_indices(5, 3, batch, n), batch_indices(5, 3, batch, n));
    assert_ne!(order[..n], order[n..2 * n]);
}

#[test]
fn crop_pads_small_volumes() {
    let img = Array3::from_shape_fn([3, 40, 2], |(i, j, k)| (i * 100 + j * 2 + k) as f32);
    let c = crop_array(&img, [0, 5, 0], 32);
    assert_eq!(c.shape(), &[32, 32, 32]);
    assert_eq!(c[[2, 0, 1]], img[[2, 5, 1]]);
    assert_eq!(c[[3, 0, 0]], 0.0);
    assert_eq!(c[[0, 31, 2]], 0.0);
    assert_eq!(c[[0, 31, 1]], img[[0, 36, 1]]);
}

fn phantom_batch(seed: u64, b: usize) -> (Vec<Array3<f32>>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let crops = (0..b)
        .map(|_| {
            let c = [rng.random_range(8.0..24.0), rng.random_range(8.0..24.0), rng.random_range(8.0..24.0)];
            let r: f32 = rng.random_range(4.0..10.0);
            let (fg, bg) = if rng.random_bool(0.5) { (0.8, 0.2) } else { (0.2, 0.8) };
            Array3::from_shape_fn([32; 3], |(i, j, k)| {
                let d2 = (i as f32 - c[0]).powi(2) + (j as f32 - c[1]).powi(2) + (k as f32 - c[2]).powi(2);
                if d2 < r * r { fg } else { bg }
            })
        })
        .collect();
    let texts = (0..b).map(|i| crate::text::embed(&format!("MR T{}w; 3.0T", 1 + i % 2)).unwrap().vector).collect();
    (crops, texts)
}

#[test]
fn train_step_is_deterministic() {
    let cfg = tiny_cfg();
    let (crops, texts) = phantom_batch(1, 3);
    let mut a = TrainState::new(&cfg).unwrap();
    let mut b = TrainState::new(&cfg).unwrap();
    a.step = 1;
    b.step = 1;
    let ma = train_step(&mut a, &cfg, &crops, &texts).unwrap();
    let mb = train_step(&mut b, &cfg, &crops, &texts).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, TrainState::new(&cfg).unwrap().params);
    assert_eq!(a.step, 2);
    assert!(ma.log_ratio.is_some());
}

#[test]
fn zero_weight_ignores_text() {
    let cfg = PretrainConfig { lambda: 0.0, ..tiny_cfg() };
    let (crops, texts) = phantom_batch(2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let noise = rand_rows(&mut rng, 3, texts[0].len());
    let mut a = TrainState::new(&cfg).unwrap();
    let mut b = TrainState::new(&cfg).unwrap();
    a.step = 1;
    b.step = 1;
    let ma = train_step(&mut a, &cfg, &crops, &texts).unwrap();
    let mb = train_step(&mut b, &cfg, &crops, &noise).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(ma.total, ma.l1);
    assert_eq!(ma.l1, mb.l1);
}

#[test]
fn single_step_descends() {
    let mut wins = 0;
    for seed in 0..20 {
        let cfg = PretrainConfig { seed, steps: 10, warmup: 0, ..tiny_cfg() };
        let (crops, texts) = phantom_batch(100 + seed, 3);
        let mut st = TrainState::new(&cfg).unwrap();
        let before = train_step(&mut st.clone(), &cfg, &crops, &texts).unwrap().total;
        train_step(&mut st, &cfg, &crops, &texts).unwrap();
        let after = train_step(&mut st, &cfg, &crops, &texts).unwrap().total;
        if after < before {
            wins += 1;
        }
    }
    assert!(wins >= 18, "loss decreased for {wins}/20 seeds");
}

#[test]
fn non_finite_input_reports_divergence() {
    let cfg = tiny_cfg();
    let (mut crops, texts) = phantom_batch(3, 3);
    crops[0][[1, 1, 1]] = f32::NAN;
    let mut st = TrainState::new(&cfg).unwrap();
    let before = st.params.clone();
    match train_step(&mut st, &cfg, &crops, &texts) {
        Err(PretrainError::Divergence { step, diagnostics }) => {
            assert_eq!(step, 1);
            assert!(diagnostics.contains("l1"));
        }
        other => panic!("expected divergence, got {other:?}"),
    }
    assert_eq!(st.params, before);
    assert_eq!(st.step, 0);
}

#[test]
fn config_validation() {
    assert!(PretrainConfig::default().validate().is_ok());
    let bad = [
        PretrainConfig { warmup: 10, steps: 10, ..tiny_cfg() },
        PretrainConfig { lambda: -1.0, ..tiny_cfg() },
        PretrainConfig { batch: 2, ..tiny_cfg() },
        PretrainConfig { roi: 48, ..tiny_cfg() },
        PretrainConfig { checkpoint_every: 0, ..tiny_cfg() },
    ];
    for c in bad {
        assert!(c.validate().is_err(), "{c:?}");
    }
    assert!(PretrainConfig { batch: 2, lambda: 0.0, ..tiny_cfg() }.validate().is_ok());
}

fn tiny_data(n: usize) -> PretrainData {
    let (crops, _) = phantom_batch(7, n);
    let samples = crops
        .into_iter()
        .enumerate()
        .map(|(i, image)| PretrainSample {
            id: format!("p{i}"),
            image,
            text: crate::text::embed(&format!("MR T{}w; 1.5T", 1 + i % 2)).unwrap().vector,
        })
        .collect();
    PretrainData::new(samples).unwrap()
}

#[test]
fn loop_checkpoints_and_resumes_bit_identically() {
    let cfg = tiny_cfg();
    let data = tiny_data(4);
    let dir = tempfile::tempdir().unwrap();
    let full = pretrain_loop(&cfg, &data, dir.path(), None).unwrap();
    let steps: Vec<u64> = full.checkpoints.iter().map(|p| load_checkpoint(p).unwrap().step).collect();
    assert_eq!(steps, vec![2, 4, 5]);
    assert_eq!(full.metrics.len(), 5);
    let lines = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(lines.lines().count(), 5);

    let resumed_dir = tempfile::tempdir().unwrap();
    std::fs::copy(dir.path().join(METRICS_FILE), resumed_dir.path().join(METRICS_FILE)).unwrap();
    let resumed = pretrain_loop(&cfg, &data, resumed_dir.path(), Some(&checkpoint_path(dir.path(), 2))).unwrap();
    assert_eq!(resumed.metrics, full.metrics[2..]);
    let a = std::fs::read(checkpoint_path(dir.path(), 5)).unwrap();
    let b = std::fs::read(checkpoint_path(resumed_dir.path(), 5)).unwrap();
    assert_eq!(a, b);
    let relog = std::fs::read_to_string(resumed_dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(relog, lines);
}

#[test]
fn non_finite_text_is_an_input_error() {
    let cfg = tiny_cfg();
    let (crops, mut texts) = phantom_batch(3, 3);
    texts[2][0] = f64::INFINITY;
    let mut st = TrainState::new(&cfg).unwrap();
    assert!(matches!(train_step(&mut st, &cfg, &crops, &texts), Err(PretrainError::NonFinite(_))));
    assert_eq!(st.step, 0);
}
