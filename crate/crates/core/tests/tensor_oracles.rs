//! Tape ops against direct loop implementations.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use t2seg::{Error, Tape, Tensor};

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::rand_uniform(shape, -1.0, 1.0, rng)
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
    }
}

fn matmul_oracle(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        for j in 0..r {
            for k in 0..q {
                out[i * r + j] += a[i * q + k] * b[k * r + j];
            }
        }
    }
    out
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (p, q, r) = (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..9));
        let (a, b) = (rand_tensor(&[p, q], &mut rng), rand_tensor(&[q, r], &mut rng));
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(&a), tape.constant(&b));
        let y = tape.matmul(va, vb).unwrap();
        assert_eq!(tape.shape(y), &[p, r]);
        close(tape.value(y), &matmul_oracle(a.data(), b.data(), p, q, r), 1e-12);

        let bt = Tensor::from_fn(&[r, q], |i| b.data()[(i % q) * r + i / q]);
        let vbt = tape.constant(&bt);
        let y2 = tape.matmul_nt(va, vbt).unwrap();
        close(tape.value(y2), tape.value(y).to_vec().as_slice(), 1e-12);
    }
}

#[test]
fn matmul_dimension_mismatch() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(&Tensor::zeros(&[2, 3]));
    let b = tape.constant(&Tensor::zeros(&[4, 2]));
    assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
}

#[allow(clippy::too_many_arguments)]
fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
    dil: usize,
) -> (Vec<usize>, Vec<f64>) {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let span = dil * (k - 1) + 1;
    let oh = (h + 2 * pad - span) / stride + 1;
    let ow = (wd + 2 * pad - span) / stride + 1;
    let mut out = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = bias.map_or(0.0, |b| b.data()[o]);
                for c in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * stride + ky * dil) as isize - pad as isize;
                            let ix = (xo * stride + kx * dil) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += w.at(&[o, c, ky, kx]) * x.at(&[c, iy as usize, ix as usize]);
                        }
                    }
                }
                out[(o * oh + y) * ow + xo] = acc;
            }
        }
    }
    (vec![cout, oh, ow], out)
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (k, stride, pad, dil) in [(3, 1, 1, 1), (3, 2, 1, 1), (3, 1, 2, 2), (1, 1, 0, 1), (5, 2, 2, 1), (3, 2, 0, 2)] {
        let (cin, cout) = (rng.random_range(1..4), rng.random_range(1..4));
        let (h, w) = (rng.random_range(6..11), rng.random_range(6..11));
        let x = rand_tensor(&[cin, h, w], &mut rng);
        let wt = rand_tensor(&[cout, cin, k, k], &mut rng);
        let b = rand_tensor(&[cout], &mut rng);
        let mut tape = Tape::new();
        let (vx, vw, vb) = (tape.constant(&x), tape.constant(&wt), tape.constant(&b));
        let y = tape.conv2d(vx, vw, Some(vb), stride, pad, dil).unwrap();
        let (shape, want) = conv_oracle(&x, &wt, Some(&b), stride, pad, dil);
        assert_eq!(tape.shape(y), shape.as_slice());
        close(tape.value(y), &want, 1e-12);
    }
}

#[test]
fn conv2d_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[1, 5, 5], &mut rng);
    let mut w = Tensor::zeros(&[1, 1, 3, 3]);
    w.data_mut()[4] = 1.0;
    let mut tape = Tape::new();
    let (vx, vw) = (tape.constant(&x), tape.constant(&w));
    let y = tape.conv2d(vx, vw, None, 1, 1, 1).unwrap();
    assert_eq!(tape.value(y), x.data());
}

#[test]
fn conv2d_rejects_bad_geometry() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(&Tensor::zeros(&[2, 4, 4]));
    let w = tape.constant(&Tensor::zeros(&[1, 3, 3, 3]));
    assert!(tape.conv2d(x, w, None, 1, 1, 1).is_err());
    let w = tape.constant(&Tensor::zeros(&[1, 2, 5, 5]));
    assert!(tape.conv2d(x, w, None, 1, 0, 1).is_err());
}

/// Half-pixel bilinear sample with edge clamping, written per output pixel.
fn bilinear_oracle(x: &Tensor<f64>, oh: usize, ow: usize) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                let sy = ((y as f64 + 0.5) * h as f64 / oh as f64 - 0.5).max(0.0);
                let sx = ((xo as f64 + 0.5) * w as f64 / ow as f64 - 0.5).max(0.0);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let v = |yy: usize, xx: usize| x.at(&[ch, yy, xx]);
                out.push(
                    (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1))
                        + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1)),
                );
            }
        }
    }
    out
}

#[test]
fn bilinear_upsample_matches_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (h, w, oh, ow) in [(4, 4, 16, 16), (2, 3, 5, 7), (3, 3, 3, 3), (1, 1, 4, 4), (4, 4, 64, 64)] {
        let x = rand_tensor(&[2, h, w], &mut rng);
        let mut tape = Tape::new();
        let vx = tape.constant(&x);
        let y = tape.bilinear_upsample(vx, oh, ow).unwrap();
        assert_eq!(tape.shape(y), &[2, oh, ow]);
        close(tape.value(y), &bilinear_oracle(&x, oh, ow), 1e-12);
    }
}

#[test]
fn bilinear_doubling_example() {
    // 1x2 -> 1x4: samples at -0.25, 0.25, 0.75, 1.25 in source coordinates.
    let x = Tensor::new(&[1, 1, 2], vec![0.0, 1.0]).unwrap();
    let mut tape = Tape::new();
    let vx = tape.constant(&x);
    let y = tape.bilinear_upsample(vx, 1, 4).unwrap();
    close(tape.value(y), &[0.0, 0.25, 0.75, 1.0], 1e-15);
}

#[test]
fn layer_norm_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_fn(&[8], |_| rng.random_range(-5.0..5.0));
    let mut tape = Tape::new();
    let vx = tape.constant(&x);
    let (g, b) = (tape.constant(&Tensor::ones(&[8])), tape.constant(&Tensor::zeros(&[8])));
    let y = tape.layer_norm(vx, g, b, 0.0).unwrap();
    let v = tape.value(y);
    let mean = v.iter().sum::<f64>() / 8.0;
    let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 8.0;
    assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
}

#[test]
fn channel_norm_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&[3, 4, 5], &mut rng);
    let g = rand_tensor(&[3], &mut rng);
    let b = rand_tensor(&[3], &mut rng);
    let eps = 1e-5;
    let mut tape = Tape::new();
    let (vx, vg, vb) = (tape.constant(&x), tape.constant(&g), tape.constant(&b));
    let y = tape.channel_norm(vx, vg, vb, eps).unwrap();
    let mut want = Vec::new();
    for c in 0..3 {
        let plane = &x.data()[c * 20..(c + 1) * 20];
        let mean = plane.iter().sum::<f64>() / 20.0;
        let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 20.0;
        want.extend(plane.iter().map(|v| (v - mean) / (var + eps).sqrt() * g.data()[c] + b.data()[c]));
    }
    close(tape.value(y), &want, 1e-12);
}

#[test]
fn cross_entropy_matches_log_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, p) = (4, 6);
    let logits = rand_tensor(&[n, p], &mut rng);
    let targets = [0usize, 3, 255, 1, 2, 2];
    let mut tape = Tape::new();
    let v = tape.constant(&logits);
    let loss = tape.cross_entropy(v, &targets, 255).unwrap();
    let mut total = 0.0;
    let mut count = 0.0;
    for (px, &t) in targets.iter().enumerate() {
        if t == 255 {
            continue;
        }
        let col: Vec<f64> = (0..n).map(|c| logits.at(&[c, px])).collect();
        let lse = col.iter().map(|v| v.exp()).sum::<f64>().ln();
        total += lse - col[t];
        count += 1.0;
    }
    assert!((tape.value(loss)[0] - total / count).abs() < 1e-12);
}

#[test]
fn cross_entropy_edge_cases() {
    let mut tape = Tape::<f64>::new();
    let v = tape.leaf(&Tensor::zeros(&[2, 3]).with_requires_grad(true));
    let all_ignored = tape.cross_entropy(v, &[255, 255, 255], 255).unwrap();
    assert_eq!(tape.value(all_ignored), &[0.0]);
    tape.backward(all_ignored).unwrap();
    assert!(tape.grad(v).unwrap().iter().all(|&g| g == 0.0));

    let mut tape = Tape::<f64>::new();
    let v = tape.constant(&Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.cross_entropy(v, &[0, 2, 1], 255), Err(Error::Data(_))));
}

#[test]
fn non_finite_output_names_the_op() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(&Tensor::full(&[2], 1e30f32));
    match tape.mul(x, x) {
        Err(Error::NonFinite { op }) => assert_eq!(op, "mul"),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn backward_runs_once() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&Tensor::ones(&[2]).with_requires_grad(true));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::TapeReplayed)));
}

#[test]
fn mac_count_of_one_matmul() {
    let (p, q, r) = (7, 5, 3);
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(&Tensor::zeros(&[p, q]));
    let b = tape.constant(&Tensor::zeros(&[q, r]));
    tape.matmul(a, b).unwrap();
    assert_eq!(tape.total_macs(), (p * q * r) as u64);
}

#[test]
fn mac_count_of_one_pointwise_conv() {
    let (cin, cout, h, w) = (6, 4, 5, 7);
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(&Tensor::zeros(&[cin, h, w]));
    let k = tape.constant(&Tensor::zeros(&[cout, cin, 1, 1]));
    tape.conv2d(x, k, None, 1, 0, 1).unwrap();
    assert_eq!(tape.total_macs(), (cout * cin * h * w) as u64);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..12, scale in 0.1f64..50.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::rand_uniform(&[rows, cols], -scale, scale, &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(&x);
        let y = tape.softmax(v, 1).unwrap();
        for row in tape.value(y).chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn matmul_is_linear(p in 1usize..5, q in 1usize..5, r in 1usize..5, alpha in -3.0f64..3.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&[p, q], &mut rng);
        let b = rand_tensor(&[q, r], &mut rng);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(&a), tape.constant(&b));
        let sa = tape.scale(va, alpha).unwrap();
        let lhs = tape.matmul(sa, vb).unwrap();
        let ab = tape.matmul(va, vb).unwrap();
        let rhs = tape.scale(ab, alpha).unwrap();
        let (l, r) = (tape.value(lhs).to_vec(), tape.value(rhs).to_vec());
        for (x, y) in l.iter().zip(&r) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn upsample_preserves_constants(c in 1usize..3, h in 1usize..5, w in 1usize..5, fy in 1usize..4, fx in 1usize..4, v in -2.0f64..2.0) {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[c, h, w], v));
        let y = tape.bilinear_upsample(x, h * fy, w * fx).unwrap();
        prop_assert!(tape.value(y).iter().all(|&o| (o - v).abs() <= 1e-12));
    }
}
