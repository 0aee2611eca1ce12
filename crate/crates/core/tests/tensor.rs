use proptest::prelude::*;
use vminet::tensor::ops;
use vminet::{Graph, Tensor};

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-10.0f64..10.0, n)
        .prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn assert_close(got: &Tensor, want: &[f64], tol: f64) {
    assert_eq!(got.numel(), want.len());
    for (i, (&g, &w)) in got.data().iter().zip(want).enumerate() {
        assert!(rel(g, w) <= tol, "element {i}: {g} vs {w}");
    }
}

fn matmul_pair() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..6, 1usize..6, 1usize..6)
        .prop_flat_map(|(m, n, p)| (tensor(vec![m, n]), tensor(vec![n, p])))
}

fn image() -> impl Strategy<Value = Tensor> {
    (1usize..6, 1usize..6, 1usize..4).prop_flat_map(|(h, w, c)| tensor(vec![h, w, c]))
}

proptest! {
    #[test]
    fn matmul_matches_triple_loop((a, b) in matmul_pair()) {
        let (m, n, p) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut want = vec![0.0; m * p];
        for i in 0..m {
            for j in 0..p {
                for t in 0..n {
                    want[i * p + j] += a.at(&[i, t]) * b.at(&[t, j]);
                }
            }
        }
        assert_close(&ops::matmul(&a, &b).unwrap(), &want, 1e-12);
    }

    #[test]
    fn broadcast_mul_matches_scalar_loop(
        (row, mat) in (1usize..6, 1usize..6).prop_flat_map(|(l, d)| (tensor(vec![1, d]), tensor(vec![l, d])))
    ) {
        let (l, d) = (mat.shape()[0], mat.shape()[1]);
        let want: Vec<f64> = (0..l * d).map(|i| row.data()[i % d] * mat.data()[i]).collect();
        assert_close(&ops::elementwise_mul(&row, &mat).unwrap(), &want, 1e-12);
        assert_close(&ops::elementwise_mul(&mat, &row).unwrap(), &want, 1e-12);
    }

    #[test]
    fn softmax_slices_are_positive_and_sum_to_one(t in image(), axis in 0usize..3) {
        let s = ops::softmax_axis(&t, axis).unwrap();
        let sums = ops::sum_axis(&s, axis).unwrap();
        prop_assert!(s.data().iter().all(|&v| v > 0.0));
        for &v in sums.data() {
            prop_assert!((v - 1.0).abs() <= 1e-12, "slice sums to {v}");
        }
    }

    #[test]
    fn sum_axis_matches_loop(t in image(), axis in 0usize..3) {
        let sh = t.shape().to_vec();
        let mut out_shape = sh.clone();
        out_shape.remove(axis);
        let mut want = vec![0.0; out_shape.iter().product()];
        for i in 0..sh[0] {
            for j in 0..sh[1] {
                for c in 0..sh[2] {
                    let idx = [i, j, c];
                    let mut rest: Vec<usize> = idx.to_vec();
                    rest.remove(axis);
                    want[rest[0] * out_shape[1] + rest[1]] += t.at(&idx);
                }
            }
        }
        let got = ops::sum_axis(&t, axis).unwrap();
        prop_assert_eq!(got.shape(), &out_shape[..]);
        assert_close(&got, &want, 1e-12);
    }

    #[test]
    fn depthwise_conv_matches_direct_loop(
        (x, k) in (image(), prop::sample::select(vec![1usize, 3, 5]))
            .prop_flat_map(|(x, k)| { let c = x.shape()[2]; (Just(x), tensor(vec![k, k, c])) })
    ) {
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let r = (k.shape()[0] / 2) as isize;
        let mut want = vec![0.0; h * w * c];
        for i in 0..h as isize {
            for j in 0..w as isize {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for di in -r..=r {
                        for dj in -r..=r {
                            let (y, xx) = (i + di, j + dj);
                            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                continue;
                            }
                            acc += x.at(&[y as usize, xx as usize, ch])
                                * k.at(&[(di + r) as usize, (dj + r) as usize, ch]);
                        }
                    }
                    want[(i as usize * w + j as usize) * c + ch] = acc;
                }
            }
        }
        assert_close(&ops::depthwise_conv2d(&x, &k).unwrap(), &want, 1e-12);
    }

    #[test]
    fn layer_norm_statistics(x in (1usize..5, 2usize..8).prop_flat_map(|(l, c)| tensor(vec![l, c]))) {
        let c = x.shape()[1];
        let y = ops::layer_norm(&x, &Tensor::ones(&[c]), &Tensor::zeros(&[c]), 1e-12).unwrap();
        for (row, src) in y.data().chunks(c).zip(x.data().chunks(c)) {
            let spread = src.iter().cloned().fold(f64::MIN, f64::max) - src.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-3);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            prop_assert!(mean.abs() <= 1e-9, "mean {mean}");
            prop_assert!((var - 1.0).abs() <= 1e-6, "var {var}");
        }
    }

    #[test]
    fn silu_matches_scalar_formula(x in tensor(vec![17])) {
        let want: Vec<f64> = x.data().iter().map(|&v| v / (1.0 + (-v).exp())).collect();
        assert_close(&ops::silu(&x), &want, 1e-12);
    }

    #[test]
    fn space_to_depth_matches_index_loop(x in (1usize..4, 1usize..4, 1usize..3).prop_flat_map(|(h, w, c)| tensor(vec![2 * h, 2 * w, c]))) {
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let y = ops::space_to_depth(&x, 2).unwrap();
        prop_assert_eq!(y.shape(), &[1, h / 2, w / 2, 4 * c][..]);
        let y = y.reshape(&[h / 2, w / 2, 4 * c]).unwrap();
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    let depth = ((i % 2) * 2 + j % 2) * c + ch;
                    prop_assert_eq!(y.at(&[i / 2, j / 2, depth]), x.at(&[i, j, ch]));
                }
            }
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss(
        (x, w) in (1usize..5, 1usize..5).prop_flat_map(|(l, d)| (tensor(vec![l, d]), tensor(vec![d, d]))),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        // f = sum(silu(x W)), g = sum(softmax(x, 1) * x)
        let grads = |ca: f64, cb: f64| {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let wv = g.constant(w.clone());
            let xw = g.matmul(xv, wv).unwrap();
            let s = g.silu(xw);
            let f = g.sum_all(s);
            let sm = g.softmax(xv, 1).unwrap();
            let p = g.mul(sm, xv).unwrap();
            let h = g.sum_all(p);
            let fa = g.scale(f, ca);
            let hb = g.scale(h, cb);
            let loss = g.add(fa, hb).unwrap();
            g.backward(loss).unwrap().wrt(&g, xv)
        };
        let gf = grads(1.0, 0.0);
        let gh = grads(0.0, 1.0);
        let combined = grads(a, b);
        for ((&c, &f), &h) in combined.data().iter().zip(gf.data()).zip(gh.data()) {
            let want = a * f + b * h;
            prop_assert!((c - want).abs() <= 1e-10 * want.abs().max(1.0), "{c} vs {want}");
        }
    }
}

#[test]
fn known_products_and_identities() {
    let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
    let b = Tensor::from_rows(&[[5.0, 6.0], [7.0, 8.0]]);
    assert_eq!(
        ops::matmul(&a, &b).unwrap().data(),
        &[19.0, 22.0, 43.0, 50.0]
    );
    assert_eq!(ops::matmul(&Tensor::eye(2), &b).unwrap(), b);
    assert_eq!(ops::elementwise_mul(&a, &Tensor::ones(&[2, 2])).unwrap(), a);
    let s = ops::softmax_axis(&Tensor::from_rows(&[[0.0, 3f64.ln()]]), 1).unwrap();
    assert!((s.data()[0] - 0.25).abs() < 1e-15 && (s.data()[1] - 0.75).abs() < 1e-15);
    assert!((ops::silu(&Tensor::full(&[1], 20.0)).item() - 20.0).abs() < 1e-6);
}

#[test]
fn gradients_accumulate_over_fan_out() {
    let x = Tensor::from_fn(&[3], |i| i as f64 + 0.5);
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let sq = g.mul(v, v).unwrap();
    let s1 = g.sum_all(sq);
    let s2 = g.sum_all(v);
    let loss = g.add(s1, s2).unwrap();
    let grad = g.backward(loss).unwrap().wrt(&g, v);
    let want: Vec<f64> = x.data().iter().map(|v| 2.0 * v + 1.0).collect();
    assert_eq!(grad.data(), &want[..]);
}
