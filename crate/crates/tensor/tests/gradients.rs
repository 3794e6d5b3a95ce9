use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use triad_tensor::gradcheck::check_gradients;
use triad_tensor::{Tape, Tensor, Var, PAD_ROW};

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Weighted sum with a fixed random projection, so every output element matters.
fn project<'t>(tape: &'t Tape<f64>, y: &Var<'t, f64>, seed: u64) -> Var<'t, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(y.shape(), &mut rng);
    y.mul(&tape.constant(w)).sum()
}

const TOL: f64 = 1e-6;

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&[3, 4], &mut rng);
    let b = rand_tensor(&[3, 4], &mut rng).map(|v| v.abs() + 0.5);
    let r = check_gradients(
        &[a, b],
        |t, v| {
            let y = v[0].mul(&v[1]).add(&v[0].div(&v[1])).sub(&v[1].sqrt());
            let y = y.gelu().add(&v[0].square().scale(0.3)).add(&v[1].ln()).add(&v[0].exp());
            let y = y.add(&v[0].leaky_relu(0.1)).add_scalar(2.0).add(&v[0].abs());
            project(t, &y, 9)
        },
        1e-5,
        100,
        0,
    );
    assert!(r.rel_err < TOL, "{r:?}");
}

#[test]
fn broadcast_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&[2, 3, 4], &mut rng);
    let b = rand_tensor(&[3, 1], &mut rng);
    let c = rand_tensor(&[4], &mut rng);
    let r = check_gradients(
        &[x, b, c],
        |t, v| {
            let y = v[0].add_bcast(&v[1]).mul_bcast(&v[2]);
            let m = y.mean_last();
            project(t, &m, 3).add(&y.mean())
        },
        1e-5,
        100,
        0,
    );
    assert!(r.rel_err < TOL, "{r:?}");
}

#[test]
fn layout_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[2, 3, 4], &mut rng);
    let z = rand_tensor(&[2, 1, 4], &mut rng);
    let idx = Rc::new(vec![5u32, 0, PAD_ROW, 5, 2]);
    let r = check_gradients(
        &[x, z],
        move |t, v| {
            let p = v[0].permute(&[2, 0, 1]).reshape(&[4, 6]);
            let n = v[0].narrow(1, 1, 2);
            let c = Var::concat(&[&v[0], &v[1]], 1);
            let g = v[0].reshape(&[6, 4]).gather_rows(idx.clone(), 4, &[5, 4]);
            project(t, &p, 1).add(&project(t, &n, 2)).add(&project(t, &c, 3)).add(&project(t, &g, 4))
        },
        1e-5,
        100,
        0,
    );
    assert!(r.rel_err < TOL, "{r:?}");
}

#[test]
fn linear_and_bmm() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&[5, 3], &mut rng);
    let w = rand_tensor(&[4, 3], &mut rng);
    let b = rand_tensor(&[4], &mut rng);
    let p = rand_tensor(&[2, 3, 4], &mut rng);
    let q = rand_tensor(&[2, 5, 4], &mut rng);
    let z = rand_tensor(&[2, 6, 3], &mut rng);
    let r = check_gradients(
        &[x, w, b, p, q, z],
        |t, v| {
            let y = v[0].linear(&v[1], Some(&v[2]));
            let m1 = v[3].bmm(&v[4], false, true); // [2,3,5]
            let m2 = v[3].bmm(&v[3], true, false); // [2,4,4]
            let m3 = v[3].bmm(&v[5], true, true); // [2,4,6]
            project(t, &y, 1).add(&project(t, &m1, 2)).add(&project(t, &m2, 3)).add(&project(t, &m3, 4))
        },
        1e-5,
        100,
        0,
    );
    assert!(r.rel_err < TOL, "{r:?}");
}

#[test]
fn bmm_matches_naive_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&[2, 3, 4], &mut rng);
    let b = rand_tensor(&[2, 4, 5], &mut rng);
    let tape = Tape::inference();
    let y = tape.constant(a.clone()).bmm(&tape.constant(b.clone()), false, false);
    for n in 0..2 {
        for i in 0..3 {
            for j in 0..5 {
                let want: f64 = (0..4).map(|k| a.data()[n * 12 + i * 4 + k] * b.data()[n * 20 + k * 5 + j]).sum();
                assert!((y.value().data()[n * 15 + i * 5 + j] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn norms_and_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&[2, 3, 5], &mut rng);
    let g = rand_tensor(&[5], &mut rng);
    let b = rand_tensor(&[5], &mut rng);
    let gi = rand_tensor(&[3], &mut rng);
    let bi = rand_tensor(&[3], &mut rng);
    let r = check_gradients(
        &[x, g, b, gi, bi],
        |t, v| {
            let ln = v[0].layer_norm(Some(&v[1]), Some(&v[2]), 1e-5);
            let ln_plain = v[0].layer_norm(None, None, 1e-5);
            let inn = v[0].instance_norm(Some(&v[3]), Some(&v[4]), 1e-5);
            let sm = v[0].softmax_last();
            project(t, &ln, 1).add(&project(t, &ln_plain, 2)).add(&project(t, &inn, 3)).add(&project(t, &sm, 4))
        },
        1e-5,
        100,
        0,
    );
    assert!(r.rel_err < TOL, "{r:?}");
}

fn naive_conv3d(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let out: Vec<usize> = (0..3).map(|i| (xs[2 + i] + 2 * pad - ws[2 + i]) / stride + 1).collect();
    let mut y = Tensor::zeros(&[xs[0], ws[0], out[0], out[1], out[2]]);
    let xi = |n: usize, c: usize, z: isize, yy: isize, xx: isize| -> f64 {
        if z < 0 || yy < 0 || xx < 0 || z >= xs[2] as isize || yy >= xs[3] as isize || xx >= xs[4] as isize {
            0.0
        } else {
            x.data()[(((n * xs[1] + c) * xs[2] + z as usize) * xs[3] + yy as usize) * xs[4] + xx as usize]
        }
    };
    let ys = y.shape().to_vec();
    for n in 0..xs[0] {
        for o in 0..ws[0] {
            for a in 0..out[0] {
                for b in 0..out[1] {
                    for c in 0..out[2] {
                        let mut acc = 0.0;
                        for i in 0..ws[1] {
                            for p in 0..ws[2] {
                                for q in 0..ws[3] {
                                    for r in 0..ws[4] {
                                        let wv = w.data()[(((o * ws[1] + i) * ws[2] + p) * ws[3] + q) * ws[4] + r];
                                        acc += wv
                                            * xi(
                                                n,
                                                i,
                                                (a * stride + p) as isize - pad as isize,
                                                (b * stride + q) as isize - pad as isize,
                                                (c * stride + r) as isize - pad as isize,
                                            );
                                    }
                                }
                            }
                        }
                        y.data_mut()[(((n * ys[1] + o) * ys[2] + a) * ys[3] + b) * ys[4] + c] = acc;
                    }
                }
            }
        }
    }
    y
}

#[test]
fn conv3d_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (2, 2, 0), (1, 1, 0), (1, 2, 0)] {
        let x = rand_tensor(&[2, 3, 5, 6, 4], &mut rng);
        let w = rand_tensor(&[4, 3, k, k, k], &mut rng);
        let tape = Tape::inference();
        let y = tape.constant(x.clone()).conv3d(&tape.constant(w.clone()), None, stride, pad);
        let want = naive_conv3d(&x, &w, stride, pad);
        assert_eq!(y.shape(), want.shape());
        for (a, b) in y.value().data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12, "k={k} s={stride} p={pad}");
        }
    }
}

#[test]
fn conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&[2, 2, 4, 5, 3], &mut rng);
    let w3 = rand_tensor(&[3, 2, 3, 3, 3], &mut rng);
    let b3 = rand_tensor(&[3], &mut rng);
    let w1 = rand_tensor(&[2, 2, 1, 1, 1], &mut rng);
    let wt = rand_tensor(&[2, 3, 2, 2, 2], &mut rng);
    let bt = rand_tensor(&[3], &mut rng);
    let r = check_gradients(
        &[x, w3, b3, w1, wt, bt],
        |t, v| {
            let a = v[0].conv3d(&v[1], Some(&v[2]), 1, 1);
            let s = v[0].conv3d(&v[1], None, 2, 1);
            let p = v[0].conv3d(&v[3], None, 1, 0);
            let u = v[0].conv_transpose3d(&v[4], Some(&v[5]));
            project(t, &a, 1).add(&project(t, &s, 2)).add(&project(t, &p, 3)).add(&project(t, &u, 4))
        },
        1e-5,
        200,
        0,
    );
    assert!(r.rel_err < TOL, "{r:?}");
}

#[test]
fn conv_transpose_is_adjoint_of_strided_conv() {
    // <conv_T(x; W), y> == <x, conv(y; W)> for stride == kernel
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&[1, 3, 2, 3, 2], &mut rng);
    let y = rand_tensor(&[1, 4, 4, 6, 4], &mut rng);
    let w = rand_tensor(&[3, 4, 2, 2, 2], &mut rng);
    let tape = Tape::inference();
    let up = tape.constant(x.clone()).conv_transpose3d(&tape.constant(w.clone()), None);
    let lhs: f64 = up.value().data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let down = tape.constant(y).conv3d(&tape.constant(w), None, 2, 0);
    let rhs: f64 = down.value().data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
}

#[test]
fn fused_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let logits = rand_tensor(&[2, 3, 2, 2, 2], &mut rng);
    let labels: Vec<usize> = (0..16).map(|i| (i * 7 + 1) % 3).collect();
    let l2 = labels.clone();
    let r = check_gradients(
        &[logits],
        move |_, v| v[0].cross_entropy(&l2).add(&v[0].soft_dice_loss(&l2, 1e-5)),
        1e-5,
        100,
        0,
    );
    assert!(r.rel_err < TOL, "{r:?}");
    let cls = rand_tensor(&[4, 3], &mut rng);
    let r = check_gradients(&[cls], |_, v| v[0].cross_entropy(&[0, 2, 1, 1]), 1e-5, 100, 0);
    assert!(r.rel_err < TOL, "{r:?}");
}

#[test]
fn warp_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let img = rand_tensor(&[1, 2, 4, 5, 3], &mut rng);
    // keep sample points away from integer lattice crossings and borders
    let field = rand_tensor(&[1, 3, 4, 5, 3], &mut rng).map(|v| 0.37 * v + 0.13);
    let r = check_gradients(&[img, field], |t, v| project(t, &v[0].warp_trilinear(&v[1]), 5), 1e-6, 200, 0);
    assert!(r.rel_err < 1e-5, "{r:?}");
}

#[test]
fn warp_zero_field_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let img = rand_tensor(&[2, 1, 3, 4, 5], &mut rng);
    let tape = Tape::inference();
    let y = tape.constant(img.clone()).warp_trilinear(&tape.constant(Tensor::zeros(&[2, 3, 3, 4, 5])));
    assert_eq!(y.value(), &img);
}

#[test]
fn inference_tape_records_nothing() {
    let tape = Tape::<f32>::inference();
    let x = tape.leaf(Tensor::ones(&[3]));
    let y = x.square().sum();
    assert!(!y.requires_grad());
    assert!(tape.is_empty());
}
