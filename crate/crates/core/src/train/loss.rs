use crate::error::{Error, Result};
use crate::tensor::{Function, Graph, Tensor, Var};

fn check(logits: &Tensor, targets: &[usize], eps: f64) -> Result<(usize, usize)> {
    let [b, k] = match *logits.shape() {
        [b, k] => [b, k],
        _ => {
            return Err(Error::shape(
                "cross_entropy",
                logits.shape(),
                &[targets.len()],
            ))
        }
    };
    if b != targets.len() {
        return Err(Error::shape(
            "cross_entropy",
            logits.shape(),
            &[targets.len()],
        ));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Config(format!(
            "label smoothing must lie in [0, 1), got {eps}"
        )));
    }
    if let Some(t) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::Index(format!("target {t} outside {k} classes")));
    }
    Ok((b, k))
}

/// Row-wise log-softmax.
fn log_softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

fn smoothed_target(t: usize, c: usize, k: usize, eps: f64) -> f64 {
    let on = if c == t { 1.0 - eps } else { 0.0 };
    on + eps / k as f64
}

/// Batch mean of `-sum_c q_c log softmax(z)_c` with
/// `q = (1 - eps) onehot + eps / K`.
pub fn cross_entropy_label_smoothing(logits: &Tensor, targets: &[usize], eps: f64) -> Result<f64> {
    let (b, k) = check(logits, targets, eps)?;
    if b == 0 {
        return Ok(0.0);
    }
    let lp = log_softmax_rows(logits.data(), k);
    let mut total = 0.0;
    for (row, &t) in lp.chunks(k).zip(targets) {
        total -= row
            .iter()
            .enumerate()
            .map(|(c, l)| smoothed_target(t, c, k, eps) * l)
            .sum::<f64>();
    }
    Ok(total / b as f64)
}

#[derive(Debug)]
struct CrossEntropy {
    targets: Vec<usize>,
    eps: f64,
}

impl Function for CrossEntropy {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let z = inputs[0];
        let k = z.shape()[1];
        let b = self.targets.len();
        let g = grad.item() / b as f64;
        let d = needs[0].then(|| {
            let lp = log_softmax_rows(z.data(), k);
            let mut d = Vec::with_capacity(lp.len());
            for (row, &t) in lp.chunks(k).zip(&self.targets) {
                d.extend(
                    row.iter()
                        .enumerate()
                        .map(|(c, l)| g * (l.exp() - smoothed_target(t, c, k, self.eps))),
                );
            }
            Tensor::new(z.shape().to_vec(), d).expect("gradient matches logits shape")
        });
        vec![d]
    }
}

impl Graph {
    /// Differentiable [`cross_entropy_label_smoothing`].
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], eps: f64) -> Result<Var> {
        let loss = cross_entropy_label_smoothing(self.value(logits), targets, eps)?;
        if targets.is_empty() {
            return Err(Error::Contract("cross entropy over an empty batch".into()));
        }
        let op = CrossEntropy {
            targets: targets.to_vec(),
            eps,
        };
        Ok(self.record(op, &[logits], Tensor::scalar(loss)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_ln_k() {
        for eps in [0.0, 0.1, 0.5] {
            let z = Tensor::full(&[3, 5], 2.5);
            let l = cross_entropy_label_smoothing(&z, &[0, 4, 2], eps).unwrap();
            assert!((l - 5f64.ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn confident_limit_without_smoothing_is_zero() {
        let z = Tensor::from_rows(&[[800.0, 0.0, 0.0]]);
        assert!(cross_entropy_label_smoothing(&z, &[0], 0.0).unwrap().abs() < 1e-300);
    }

    #[test]
    fn rejects_bad_inputs() {
        let z = Tensor::zeros(&[2, 3]);
        assert!(cross_entropy_label_smoothing(&z, &[0, 3], 0.1).is_err());
        assert!(cross_entropy_label_smoothing(&z, &[0], 0.1).is_err());
        assert!(cross_entropy_label_smoothing(&z, &[0, 1], 1.0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let z = Tensor::randn(&[4, 3], &mut r);
        let report = grad_check(
            |g, v| g.cross_entropy(v[0], &[2, 0, 1, 1], 0.1),
            &[z],
            GradCheck::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
