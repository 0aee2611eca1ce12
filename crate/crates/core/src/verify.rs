//! Self-check suites run by `vminet verify`: oracle equivalence, rank
//! properties, mask structure, the lower-triangular context-vector
//! expansion, gradient checks and determinism.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    build_mask, context_vector, numeric_rank, separable_self_attention, softmax_self_attention,
    vmi_sa_matrix, vmi_sa_recurrent, AttentionForm, GateVector, Mask, MaskFamily, MaskKind,
};
use crate::backbone::{build_vminet, VmiNetConfig};
use crate::error::Result;
use crate::tensor::{grad_check, ops, GradCheck, Tensor};
use crate::train::synthetic;

/// Builds the masks used by every suite. Swappable so tests can inject a
/// faulty builder and confirm the suites catch it.
pub type MaskBuilder = fn(MaskKind, usize, usize) -> Result<Mask>;

#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Random cases per suite.
    pub trials: usize,
    pub mask_builder: MaskBuilder,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            trials: 50,
            mask_builder: build_mask,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    pub first_failure: Option<String>,
}

impl SuiteOutcome {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerifyReport {
    pub seed: u64,
    pub trials: usize,
    pub suites: Vec<SuiteOutcome>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.suites.iter().all(SuiteOutcome::passed)
    }

    pub fn suite(&self, name: &str) -> Option<&SuiteOutcome> {
        self.suites.iter().find(|s| s.name == name)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "verify seed={} trials={}", self.seed, self.trials)?;
        for s in &self.suites {
            let status = if s.passed() { "PASS" } else { "FAIL" };
            write!(
                f,
                "{status} {:<12} {}/{} cases",
                s.name,
                s.cases - s.failures,
                s.cases
            )?;
            if let Some(msg) = &s.first_failure {
                write!(f, "  first failure: {msg}")?;
            }
            writeln!(f)?;
        }
        let ok = self.suites.iter().filter(|s| s.passed()).count();
        writeln!(f, "{ok}/{} suites passed", self.suites.len())
    }
}

struct Tally {
    name: &'static str,
    cases: usize,
    failures: usize,
    first: Option<String>,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Tally {
            name,
            cases: 0,
            failures: 0,
            first: None,
        }
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.cases += 1;
        if !ok {
            self.failures += 1;
            if self.first.is_none() {
                self.first = Some(what());
            }
        }
    }

    fn result<T>(&mut self, r: Result<T>, what: &str) -> Option<T> {
        match r {
            Ok(v) => Some(v),
            Err(e) => {
                self.check(false, || format!("{what}: {e}"));
                None
            }
        }
    }

    fn done(self) -> SuiteOutcome {
        SuiteOutcome {
            name: self.name,
            cases: self.cases,
            failures: self.failures,
            first_failure: self.first,
        }
    }
}

fn suite_rng(seed: u64, suite: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(suite);
    r
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn random_kind(rng: &mut ChaCha8Rng, l: usize, d: usize) -> MaskKind {
    let fam = [
        MaskFamily::LowerTriangular,
        MaskFamily::Banded,
        MaskFamily::BlockDiagonal,
        MaskFamily::None,
    ][rng.random_range(0..4)];
    if l.min(d) < 2 && matches!(fam, MaskFamily::Banded | MaskFamily::BlockDiagonal) {
        return MaskKind::LowerTriangular;
    }
    fam.resolve(l, d)
}

fn random_gates(rng: &mut ChaCha8Rng, l: usize) -> GateVector {
    let a = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
    GateVector::new(a, b).expect("equal lengths")
}

fn oracle_suite(o: &VerifyOptions) -> SuiteOutcome {
    let mut t = Tally::new("oracle");
    let mut rng = suite_rng(o.seed, 1);
    for _ in 0..o.trials {
        let (l, d) = (rng.random_range(1..=32), rng.random_range(1..=16));
        let kind = random_kind(&mut rng, l, d);
        let Some(m) = t.result((o.mask_builder)(kind, l, d), "mask builder") else {
            continue;
        };
        let q = Tensor::randn(&[l, d], &mut rng);
        let k = Tensor::randn(&[l, d], &mut rng);
        let g = random_gates(&mut rng, l);

        let mut ctx = vec![0.0; d];
        for s in 0..l {
            for n in 0..d {
                if m.get(s, n) {
                    ctx[n] += g.alpha[s] * q.at(&[s, n]) * k.at(&[s, n]);
                }
            }
        }
        if let Some(y) = t.result(vmi_sa_matrix(&q, &k, &g, &m), "vmi_sa_matrix") {
            let worst = (0..l * d)
                .map(|i| {
                    let expect = ctx[i % d] + g.beta[i / d] * q.data()[i] * k.data()[i];
                    (y.data()[i] - expect).abs() / expect.abs().max(1.0)
                })
                .fold(0.0, f64::max);
            t.check(worst <= 1e-10, || {
                format!("matrix form L={l} D={d} {kind:?}: error {worst:e}")
            });
        }

        let mut h = vec![0.0; d];
        let mut expect = vec![0.0; l * d];
        for s in 0..l {
            for n in 0..d {
                let p = q.at(&[s, n]) * k.at(&[s, n]);
                h[n] += g.alpha[s] * p;
                expect[s * d + n] = f64::from(u8::from(m.get(s, n))) * h[n] + g.beta[s] * p;
            }
        }
        if let Some(y) = t.result(vmi_sa_recurrent(&q, &k, &g, &m), "vmi_sa_recurrent") {
            t.check(y.data() == expect.as_slice(), || {
                format!("recurrent form L={l} D={d} {kind:?}: not bitwise equal")
            });
        }

        let v = Tensor::randn(&[l, d], &mut rng);
        if let Some(y) = t.result(softmax_self_attention(&q, &k, &v), "softmax_self_attention") {
            let mut worst: f64 = 0.0;
            for i in 0..l {
                let s: Vec<f64> = (0..l)
                    .map(|j| (0..d).map(|n| q.at(&[i, n]) * k.at(&[j, n])).sum())
                    .collect();
                let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|x| (x - mx).exp()).sum();
                for n in 0..d {
                    let e: f64 = (0..l).map(|j| (s[j] - mx).exp() / z * v.at(&[j, n])).sum();
                    worst = worst.max((y.at(&[i, n]) - e).abs() / e.abs().max(1.0));
                }
            }
            t.check(worst <= 1e-10, || {
                format!("softmax attention L={l} D={d}: error {worst:e}")
            });
        }

        let qs = Tensor::randn(&[l, 1], &mut rng);
        if let Some(y) = t.result(
            separable_self_attention(&qs, &k, &v),
            "separable_self_attention",
        ) {
            let mx = qs.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = qs.data().iter().map(|x| (x - mx).exp()).sum();
            let cv: Vec<f64> = (0..d)
                .map(|n| {
                    (0..l)
                        .map(|j| (qs.data()[j] - mx).exp() / z * k.at(&[j, n]))
                        .sum()
                })
                .collect();
            let worst = (0..l * d)
                .map(|i| {
                    let e = v.data()[i] * cv[i % d];
                    (y.data()[i] - e).abs() / e.abs().max(1.0)
                })
                .fold(0.0, f64::max);
            t.check(worst <= 1e-10, || {
                format!("separable attention L={l} D={d}: error {worst:e}")
            });
        }
    }
    t.done()
}

fn rank_suite(o: &VerifyOptions) -> SuiteOutcome {
    let mut t = Tally::new("rank");
    let mut rng = suite_rng(o.seed, 2);
    for _ in 0..o.trials {
        let (l, d) = (rng.random_range(2..=24), rng.random_range(2..=24));
        let q = Tensor::randn(&[l, d], &mut rng);
        let k = Tensor::randn(&[l, d], &mut rng);
        let s = ops::softmax_axis(&q, 1).and_then(|s| ops::elementwise_mul(&s, &k));
        if let Some(r) = t.result(s.and_then(|s| numeric_rank(&s, 1e-10)), "softmax(Q)*K rank") {
            t.check(r <= l.min(d), || format!("rank {r} exceeds min({l}, {d})"));
        }

        let d2 = rng.random_range(1..=12);
        let l2 = d2 + rng.random_range(1..=12);
        let a = Tensor::randn(&[l2, d2], &mut rng);
        let Some(m) = t.result(
            (o.mask_builder)(MaskKind::LowerTriangular, l2, d2),
            "mask builder",
        ) else {
            continue;
        };
        if let Some(r) = t.result(
            ops::elementwise_mul(&m.to_tensor(), &a).and_then(|x| numeric_rank(&x, 1e-10)),
            "masked rank",
        ) {
            t.check(r == d2, || {
                format!("lower-triangular mask {l2}x{d2}: rank {r}, expected {d2}")
            });
        }
    }
    t.done()
}

/// Reference membership rules for each mask family.
fn expected_bit(kind: MaskKind, l: usize, d: usize, s: usize, n: usize) -> bool {
    match kind {
        MaskKind::NoMask => true,
        MaskKind::LowerTriangular => n <= s,
        MaskKind::Banded { bandwidth } => {
            let diag = ((s + 1) * d).div_ceil(l) - 1;
            n <= diag && diag - n < bandwidth
        }
        MaskKind::BlockDiagonal { block } => {
            let groups = l.min(d) / block;
            let g = (s / l.div_ceil(groups)).min(groups - 1);
            (g * block..(g + 1) * block).contains(&n)
        }
    }
}

fn mask_suite(o: &VerifyOptions) -> SuiteOutcome {
    let mut t = Tally::new("mask");
    let mut rng = suite_rng(o.seed, 3);
    for _ in 0..o.trials {
        let (l, d) = (rng.random_range(1..=40), rng.random_range(1..=40));
        let kind = random_kind(&mut rng, l, d);
        let Some(m) = t.result((o.mask_builder)(kind, l, d), "mask builder") else {
            continue;
        };
        t.check((m.rows(), m.cols()) == (l, d), || {
            format!("{kind:?} has shape {}x{}", m.rows(), m.cols())
        });
        let mismatch = (0..l)
            .flat_map(|s| (0..d).map(move |n| (s, n)))
            .find(|&(s, n)| m.get(s, n) != expected_bit(kind, l, d, s, n));
        t.check(mismatch.is_none(), || {
            format!("{kind:?} {l}x{d}: wrong entry at {mismatch:?}")
        });
        t.check((0..l).all(|s| m.row(s).contains(&1)), || {
            format!("{kind:?} {l}x{d}: empty row")
        });
    }
    t.done()
}

/// `c[n]` for a lower-triangular mask as the explicit triple sum over later
/// tokens and input channel pairs, with `Q = X W1`, `K = X W2`.
fn context_suite(o: &VerifyOptions) -> SuiteOutcome {
    let mut t = Tally::new("context");
    let mut rng = suite_rng(o.seed, 4);
    for _ in 0..o.trials {
        let c = rng.random_range(1..=6);
        let d = rng.random_range(1..=8);
        let l = d + rng.random_range(0..=8);
        let x = Tensor::randn(&[l, c], &mut rng);
        let w1 = Tensor::randn(&[c, d], &mut rng);
        let w2 = Tensor::randn(&[c, d], &mut rng);
        let alpha: Vec<f64> = (0..l).map(|_| rng.random_range(0.0..1.0)).collect();
        let Some(m) = t.result(
            (o.mask_builder)(MaskKind::LowerTriangular, l, d),
            "mask builder",
        ) else {
            continue;
        };
        let (Ok(q), Ok(k)) = (ops::matmul(&x, &w1), ops::matmul(&x, &w2)) else {
            unreachable!("shapes agree")
        };
        let Some(cv) = t.result(context_vector(&q, &k, &alpha, &m), "context_vector") else {
            continue;
        };
        let worst = (0..d)
            .map(|n| {
                let mut e = 0.0;
                for s in n..l {
                    for i in 0..c {
                        for j in 0..c {
                            e += alpha[s]
                                * w1.at(&[i, n])
                                * w2.at(&[j, n])
                                * x.at(&[s, i])
                                * x.at(&[s, j]);
                        }
                    }
                }
                rel_err(cv.data()[n], e)
            })
            .fold(0.0, f64::max);
        t.check(worst <= 1e-12, || {
            format!("L={l} D={d} C={c}: relative error {worst:e}")
        });
    }
    t.done()
}

fn gradient_suite(o: &VerifyOptions) -> SuiteOutcome {
    let mut t = Tally::new("gradient");
    let mut rng = suite_rng(o.seed, 5);
    let cfg = GradCheck::default();
    for trial in 0..o.trials.clamp(1, 8) {
        let (l, d) = (rng.random_range(2..=6), rng.random_range(2..=5));
        let kind = random_kind(&mut rng, l, d);
        let Some(m) = t.result((o.mask_builder)(kind, l, d), "mask builder") else {
            continue;
        };
        let m = std::sync::Arc::new(m);
        let form = if trial % 2 == 0 {
            AttentionForm::Matrix
        } else {
            AttentionForm::Recurrent
        };
        let inputs = [
            Tensor::randn(&[l, d], &mut rng),
            Tensor::randn(&[l, d], &mut rng),
            Tensor::randn(&[l], &mut rng),
            Tensor::randn(&[l], &mut rng),
        ];
        let w = Tensor::randn(&[l, d], &mut rng);
        let r = grad_check(
            |g, v| {
                let y = g.vmi_sa(form, v[0], v[1], v[2], v[3], &m)?;
                let wv = g.constant(w.clone());
                let p = g.mul(y, wv)?;
                Ok(g.sum_all(p))
            },
            &inputs,
            cfg,
        );
        if let Some(r) = t.result(r, "grad_check") {
            t.check(r.passed(), || {
                format!(
                    "{form:?} {kind:?}: max relative error {:e}",
                    r.max_rel_error()
                )
            });
        }

        let (h, wd, c) = (
            rng.random_range(2..=4),
            rng.random_range(2..=4),
            rng.random_range(4..=6),
        );
        let inputs = [
            Tensor::randn(&[h, wd, c], &mut rng),
            Tensor::randn(&[3, 3, c], &mut rng),
            Tensor::randn(&[c], &mut rng),
            Tensor::randn(&[c], &mut rng),
        ];
        let w = Tensor::randn(&[h, wd, c], &mut rng);
        let r = grad_check(
            |g, v| {
                let n = g.layer_norm(v[0], v[2], v[3], 1e-6)?;
                let y = g.depthwise_conv2d(n, v[1])?;
                let y = g.silu(y);
                let wv = g.constant(w.clone());
                let p = g.mul(y, wv)?;
                Ok(g.sum_all(p))
            },
            &inputs,
            cfg,
        );
        if let Some(r) = t.result(r, "grad_check") {
            t.check(r.passed(), || {
                format!("norm/conv/silu: max relative error {:e}", r.max_rel_error())
            });
        }
    }
    t.done()
}

fn determinism_suite(o: &VerifyOptions) -> SuiteOutcome {
    let mut t = Tally::new("determinism");
    let mut rng = suite_rng(o.seed, 6);
    for _ in 0..o.trials.clamp(1, 4) {
        let (l, d) = (rng.random_range(1..=32), rng.random_range(1..=16));
        let kind = random_kind(&mut rng, l, d);
        let Some(m) = t.result((o.mask_builder)(kind, l, d), "mask builder") else {
            continue;
        };
        let q = Tensor::randn(&[l, d], &mut rng);
        let k = Tensor::randn(&[l, d], &mut rng);
        let g = random_gates(&mut rng, l);
        let same = vmi_sa_matrix(&q, &k, &g, &m).ok() == vmi_sa_matrix(&q, &k, &g, &m).ok();
        t.check(same, || "vmi_sa_matrix differs between calls".into());
    }
    let seed = o.seed;
    let data_ok = synthetic(16, 4, seed, crate::train::Split::Train).ok()
        == synthetic(16, 4, seed, crate::train::Split::Train).ok();
    t.check(data_ok, || "synthetic data differs between calls".into());
    let cfg = VmiNetConfig::desk(4, 2, [1, 1, 1, 1], 3);
    let x = Tensor::randn(&[1, 32, 32, 3], &mut rng);
    let run = || build_vminet(&cfg, seed).and_then(|m| m.forward(&x));
    let (a, b) = (run(), run());
    match (a, b) {
        (Ok(a), Ok(b)) => t.check(a == b, || "model forward differs between builds".into()),
        (Err(e), _) | (_, Err(e)) => t.check(false, || format!("model forward: {e}")),
    }
    t.done()
}

/// Runs every suite. The report depends only on `opts`.
pub fn run_verify_suite(opts: &VerifyOptions) -> VerifyReport {
    let suites = vec![
        oracle_suite(opts),
        rank_suite(opts),
        mask_suite(opts),
        context_suite(opts),
        gradient_suite(opts),
        determinism_suite(opts),
    ];
    VerifyReport {
        seed: opts.seed,
        trials: opts.trials,
        suites,
    }
}
