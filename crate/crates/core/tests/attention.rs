use proptest::prelude::*;
use vminet::attention::{
    build_mask, context_vector, elementwise_expansion_oracle, matmul_expansion_oracle,
    numeric_rank, separable_self_attention, softmax_self_attention, ssm_scan_reference,
    vmi_sa_matrix, vmi_sa_recurrent, GateVector, Mask, MaskKind, SsmParams,
};
use vminet::tensor::ops;
use vminet::Tensor;

fn tensor(shape: Vec<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

/// Mask rules restated from their definitions, 0-based.
fn expected_bit(kind: MaskKind, l: usize, d: usize, t: usize, n: usize) -> bool {
    match kind {
        MaskKind::NoMask => true,
        MaskKind::LowerTriangular => n <= t,
        MaskKind::Banded { bandwidth } => {
            // diagonal column of row t when L rows are stretched over D columns
            let diag = ((t + 1) * d).div_ceil(l) - 1;
            n <= diag && diag - n < bandwidth
        }
        MaskKind::BlockDiagonal { block } => {
            let groups = l.min(d) / block;
            let rows_per = l.div_ceil(groups);
            let g = (t / rows_per).min(groups - 1);
            n / block == g
        }
    }
}

fn mask_kind(l: usize, d: usize) -> impl Strategy<Value = MaskKind> {
    let b = l.min(d);
    let mut kinds = vec![
        Just(MaskKind::LowerTriangular).boxed(),
        Just(MaskKind::NoMask).boxed(),
    ];
    if b >= 2 {
        kinds.push(
            (1..=d)
                .prop_map(|bandwidth| MaskKind::Banded { bandwidth })
                .boxed(),
        );
        kinds.push(
            (1..=b)
                .prop_map(|block| MaskKind::BlockDiagonal { block })
                .boxed(),
        );
    }
    prop::strategy::Union::new(kinds)
}

#[derive(Debug, Clone)]
struct Case {
    q: Tensor,
    k: Tensor,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    kind: MaskKind,
}

fn case(max_l: usize, max_d: usize) -> impl Strategy<Value = Case> {
    (1..=max_l, 1..=max_d).prop_flat_map(|(l, d)| {
        (
            tensor(vec![l, d], -3.0, 3.0),
            tensor(vec![l, d], -3.0, 3.0),
            prop::collection::vec(-2.0f64..2.0, l),
            prop::collection::vec(-2.0f64..2.0, l),
            mask_kind(l, d),
        )
            .prop_map(|(q, k, alpha, beta, kind)| Case {
                q,
                k,
                alpha,
                beta,
                kind,
            })
    })
}

impl Case {
    fn dims(&self) -> (usize, usize) {
        (self.q.shape()[0], self.q.shape()[1])
    }

    fn mask(&self) -> Mask {
        let (l, d) = self.dims();
        build_mask(self.kind, l, d).unwrap()
    }

    fn gates(&self) -> GateVector {
        GateVector::new(self.alpha.clone(), self.beta.clone()).unwrap()
    }
}

proptest! {
    #[test]
    fn masks_follow_their_rules(l in 1usize..40, d in 1usize..24, pick in 0usize..4, size in 1usize..24) {
        let b = l.min(d);
        let kind = match pick {
            0 => MaskKind::LowerTriangular,
            1 => MaskKind::NoMask,
            2 if b >= 2 => MaskKind::Banded { bandwidth: 1 + size % d },
            3 if b >= 2 => MaskKind::BlockDiagonal { block: 1 + size % b },
            _ => MaskKind::NoMask,
        };
        let m = build_mask(kind, l, d).unwrap();
        for t in 0..l {
            prop_assert!(m.row(t).contains(&1), "row {t} empty");
            for n in 0..d {
                prop_assert_eq!(m.get(t, n), expected_bit(kind, l, d, t, n), "{:?} L={} D={} ({}, {})", kind, l, d, t, n);
            }
        }
    }

    #[test]
    fn matrix_form_matches_double_loop(c in case(24, 12)) {
        let (l, d) = c.dims();
        let y = vmi_sa_matrix(&c.q, &c.k, &c.gates(), &c.mask()).unwrap();
        for t in 0..l {
            for n in 0..d {
                let mut ctx = 0.0;
                for s in 0..l {
                    if expected_bit(c.kind, l, d, s, n) {
                        ctx += c.alpha[s] * c.q.at(&[s, n]) * c.k.at(&[s, n]);
                    }
                }
                let want = ctx + c.beta[t] * c.q.at(&[t, n]) * c.k.at(&[t, n]);
                let got = y.at(&[t, n]);
                prop_assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "({t},{n}) {got} vs {want}");
            }
        }
    }

    #[test]
    fn recurrent_form_matches_step_loop_bitwise(c in case(24, 12)) {
        let (l, d) = c.dims();
        let y = vmi_sa_recurrent(&c.q, &c.k, &c.gates(), &c.mask()).unwrap();
        let mut h = vec![0.0f64; d];
        for t in 0..l {
            for n in 0..d {
                let p = c.q.at(&[t, n]) * c.k.at(&[t, n]);
                h[n] += c.alpha[t] * p;
                let m = if expected_bit(c.kind, l, d, t, n) { 1.0 } else { 0.0 };
                let want = m * h[n] + c.beta[t] * p;
                prop_assert_eq!(y.at(&[t, n]).to_bits(), want.to_bits(), "({}, {})", t, n);
            }
        }
    }

    #[test]
    fn zero_beta_gives_identical_rows(c in case(16, 8)) {
        let g = GateVector::new(c.alpha.clone(), vec![0.0; c.alpha.len()]).unwrap();
        let y = vmi_sa_matrix(&c.q, &c.k, &g, &c.mask()).unwrap();
        let d = c.dims().1;
        let first = &y.data()[..d];
        for row in y.data().chunks(d) {
            prop_assert!(row.iter().zip(first).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn lower_triangular_context_is_the_suffix_expansion(
        (x, w1, w2, alpha) in (1usize..6, 1usize..8, 0usize..8).prop_flat_map(|(c, d, extra)| {
            let l = d + extra;
            (tensor(vec![l, c], -2.0, 2.0), tensor(vec![c, d], -2.0, 2.0), tensor(vec![c, d], -2.0, 2.0),
             prop::collection::vec(0.0f64..1.0, l))
        })
    ) {
        let (l, c) = (x.shape()[0], x.shape()[1]);
        let d = w1.shape()[1];
        let q = ops::matmul(&x, &w1).unwrap();
        let k = ops::matmul(&x, &w2).unwrap();
        let m = build_mask(MaskKind::LowerTriangular, l, d).unwrap();
        let cv = context_vector(&q, &k, &alpha, &m).unwrap();
        for n in 0..d {
            // feature n collects token n and every later token
            let mut e = 0.0;
            for s in n..l {
                for i in 0..c {
                    for j in 0..c {
                        e += alpha[s] * w1.at(&[i, n]) * w2.at(&[j, n]) * x.at(&[s, i]) * x.at(&[s, j]);
                    }
                }
            }
            let got = cv.data()[n];
            prop_assert!((got - e).abs() <= 1e-12 * e.abs().max(got.abs()).max(1e-300) || got == e, "{got} vs {e}");
        }
    }

    #[test]
    fn expansion_oracles_match_direct_products(
        (x, w1, w2) in (1usize..5, 1usize..9, 1usize..7).prop_flat_map(|(l, c, d)|
            (tensor(vec![l, c], -2.0, 2.0), tensor(vec![c, d], -2.0, 2.0), tensor(vec![c, d], -2.0, 2.0)))
    ) {
        let (l, d) = (x.shape()[0], w1.shape()[1]);
        let a = ops::matmul(&x, &w1).unwrap();
        let b = ops::matmul(&x, &w2).unwrap();
        let close = |u: f64, v: f64| (u - v).abs() <= 1e-12 * u.abs().max(v.abs()).max(1.0);
        for m in 0..l {
            for n in 0..d {
                let want = a.at(&[m, n]) * b.at(&[m, n]);
                prop_assert!(close(elementwise_expansion_oracle(&x, &w1, &w2, m, n).unwrap(), want));
            }
            for n in 0..l {
                let want: f64 = (0..d).map(|t| a.at(&[m, t]) * b.at(&[n, t])).sum();
                prop_assert!(close(matmul_expansion_oracle(&x, &w1, &w2, m, n).unwrap(), want));
            }
        }
    }

    #[test]
    fn separable_attention_is_its_primitive_composition(
        (q, k, v) in (1usize..12, 1usize..6).prop_flat_map(|(l, d)|
            (tensor(vec![l, 1], -5.0, 5.0), tensor(vec![l, d], -5.0, 5.0), tensor(vec![l, d], -5.0, 5.0)))
    ) {
        let scores = ops::softmax_axis(&q, 0).unwrap();
        let weighted = ops::elementwise_mul(&scores, &k).unwrap();
        let context = ops::sum_axis(&weighted, 0).unwrap();
        let d = k.shape()[1];
        let context = context.reshape(&[1, d]).unwrap();
        let want = ops::elementwise_mul(&context, &v).unwrap();
        prop_assert_eq!(separable_self_attention(&q, &k, &v).unwrap(), want);
    }

    #[test]
    fn softmax_attention_matches_two_loop_oracle(
        (q, k, v) in (1usize..8, 1usize..5).prop_flat_map(|(l, d)|
            (tensor(vec![l, d], -3.0, 3.0), tensor(vec![l, d], -3.0, 3.0), tensor(vec![l, d], -3.0, 3.0)))
    ) {
        let (l, d) = (q.shape()[0], q.shape()[1]);
        let y = softmax_self_attention(&q, &k, &v).unwrap();
        for i in 0..l {
            let s: Vec<f64> = (0..l).map(|j| (0..d).map(|n| q.at(&[i, n]) * k.at(&[j, n])).sum::<f64>().exp()).collect();
            let z: f64 = s.iter().sum();
            for n in 0..d {
                let want: f64 = (0..l).map(|j| s[j] / z * v.at(&[j, n])).sum();
                prop_assert!((y.at(&[i, n]) - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn softmax_weighted_keys_never_exceed_min_extent(
        (q, k) in (4usize..33, 2usize..17).prop_flat_map(|(l, d)| (tensor(vec![l, d], -3.0, 3.0), tensor(vec![l, d], -3.0, 3.0)))
    ) {
        let (l, d) = (q.shape()[0], q.shape()[1]);
        let a = ops::elementwise_mul(&ops::softmax_axis(&q, 0).unwrap(), &k).unwrap();
        prop_assert!(numeric_rank(&a, 1e-10).unwrap() <= l.min(d));
    }

    #[test]
    fn lower_triangular_mask_gives_full_column_rank(
        a in (3usize..33).prop_flat_map(|l| (Just(l), 2usize..l)).prop_flat_map(|(l, d)| tensor(vec![l, d], 0.5, 2.0)),
        signs in prop::collection::vec(any::<bool>(), 32 * 32),
    ) {
        let (l, d) = (a.shape()[0], a.shape()[1]);
        let a = Tensor::from_fn(&[l, d], |i| if signs[i] { a.data()[i] } else { -a.data()[i] });
        let m = build_mask(MaskKind::LowerTriangular, l, d).unwrap();
        let masked = ops::elementwise_mul(&m.to_tensor(), &a).unwrap();
        prop_assert_eq!(numeric_rank(&masked, 1e-10).unwrap(), d);
    }

    #[test]
    fn no_mask_with_constant_alpha_is_permutation_equivariant(
        c in case(12, 6),
        a in -1.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let (l, d) = c.dims();
        let mut perm: Vec<usize> = (0..l).collect();
        // Fisher-Yates driven by a splitmix step, enough to scramble small L
        let mut s = seed;
        for i in (1..l).rev() {
            s = s.wrapping_add(0x9e37_79b9_7f4a_7c15);
            let z = (s ^ (s >> 31)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            perm.swap(i, (z % (i as u64 + 1)) as usize);
        }
        let rows = |t: &Tensor| Tensor::from_fn(&[l, d], |i| t.at(&[perm[i / d], i % d]));
        let m = build_mask(MaskKind::NoMask, l, d).unwrap();
        let g = GateVector::new(vec![a; l], c.beta.clone()).unwrap();
        let gp = GateVector::new(vec![a; l], perm.iter().map(|&p| c.beta[p]).collect()).unwrap();
        let ctx = context_vector(&c.q, &c.k, &g.alpha, &m).unwrap();
        let ctx_p = context_vector(&rows(&c.q), &rows(&c.k), &gp.alpha, &m).unwrap();
        prop_assert!(ctx.max_abs_diff(&ctx_p) <= 1e-12 * (1.0 + ctx.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))));
        let y = vmi_sa_matrix(&c.q, &c.k, &g, &m).unwrap();
        let yp = vmi_sa_matrix(&rows(&c.q), &rows(&c.k), &gp, &m).unwrap();
        prop_assert!(rows(&y).max_abs_diff(&yp) <= 1e-10);
    }
}

#[test]
fn lower_triangular_mask_is_position_sensitive() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for (l, d) in [(4, 3), (8, 8), (16, 4)] {
        let q = Tensor::randn(&[l, d], &mut rng);
        let k = Tensor::randn(&[l, d], &mut rng);
        let g = GateVector::init(l);
        let m = build_mask(MaskKind::LowerTriangular, l, d).unwrap();
        let y = vmi_sa_matrix(&q, &k, &g, &m).unwrap();
        // move the last token to the front; the local term moves with it
        let roll = |t: &Tensor| Tensor::from_fn(&[l, d], |i| t.at(&[(i / d + l - 1) % l, i % d]));
        let yp = vmi_sa_matrix(&roll(&q), &roll(&k), &g, &m).unwrap();
        assert!(
            roll(&y).max_abs_diff(&yp) > 1e-8,
            "L={l} D={d}: rolling tokens left the output unchanged"
        );
    }
}

#[test]
fn lower_triangular_three_by_two() {
    let m = build_mask(MaskKind::LowerTriangular, 3, 2).unwrap();
    assert_eq!(m.bits(), &[1, 0, 1, 1, 1, 1]);
}

#[test]
fn single_token_recurrent_doubles_the_product() {
    let q = Tensor::full(&[1, 1], 1.5);
    let k = Tensor::full(&[1, 1], -2.0);
    let m = build_mask(MaskKind::LowerTriangular, 1, 1).unwrap();
    let y = vmi_sa_recurrent(&q, &k, &GateVector::init(1), &m).unwrap();
    assert_eq!(y.item(), 2.0 * 1.5 * -2.0);
}

#[test]
fn identity_ssm_is_a_scaled_prefix_sum() {
    let d = 3;
    let p = SsmParams::new(Tensor::eye(d), Tensor::ones(&[d, 1]), Tensor::ones(&[d, 1])).unwrap();
    let x = Tensor::from_fn(&[7], |i| (i as f64 * 1.3).sin());
    let y = ssm_scan_reference(&p, &x).unwrap();
    let mut prefix = 0.0;
    for (i, &v) in x.data().iter().enumerate() {
        prefix += v;
        assert!((y.data()[i] - d as f64 * prefix).abs() <= 1e-12);
    }
}
