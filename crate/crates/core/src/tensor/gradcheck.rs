use std::fmt;

use super::graph::{Graph, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Settings for [`grad_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Largest accepted relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so that inputs whose
    /// whole gradient is zero up to rounding are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-3,
            tol: 1e-4,
            floor: 1e-6,
        }
    }
}

/// Worst element of one input. `rel_error` is that element's discrepancy
/// divided by the largest gradient magnitude of the input, so entries that
/// are small only because of cancellation are judged against the tensor's
/// scale instead of their own.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tol
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "gradcheck {} (max rel err {:.3e}, tol {:.1e})",
            if self.passed() { "passed" } else { "FAILED" },
            self.max_rel_error(),
            self.tol
        )?;
        for e in &self.entries {
            writeln!(
                f,
                "  input {} elem {}: analytic {:.6e} numeric {:.6e} rel {:.3e}",
                e.input, e.element, e.analytic, e.numeric, e.rel_error
            )?;
        }
        Ok(())
    }
}

/// Compares reverse-mode gradients of the scalar function `f` against central
/// differences `(f(x+h) - f(x-h)) / 2h`, element by element for every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], cfg: GradCheck) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(cfg.step > 0.0) {
        return Err(Error::Config(format!(
            "grad_check step must be positive, got {}",
            cfg.step
        )));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut entries = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(&g, v);
        let mut numeric = Vec::with_capacity(inputs[i].numel());
        for e in 0..inputs[i].numel() {
            let orig = inputs[i].data()[e];
            probe[i].data_mut()[e] = orig + cfg.step;
            let fp = eval(&probe)?;
            probe[i].data_mut()[e] = orig - cfg.step;
            let fm = eval(&probe)?;
            probe[i].data_mut()[e] = orig;
            numeric.push((fp - fm) / (2.0 * cfg.step));
        }
        let scale = analytic
            .data()
            .iter()
            .chain(&numeric)
            .fold(cfg.floor, |m, x| m.max(x.abs()));
        let mut worst: Option<GradCheckEntry> = None;
        for (e, (&a, &n)) in analytic.data().iter().zip(&numeric).enumerate() {
            let rel = (a - n).abs() / scale;
            if worst.as_ref().is_none_or(|w| rel > w.rel_error) {
                worst = Some(GradCheckEntry {
                    input: i,
                    element: e,
                    analytic: a,
                    numeric: n,
                    rel_error: rel,
                });
            }
        }
        entries.extend(worst);
    }
    Ok(GradCheckReport {
        entries,
        tol: cfg.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_passes_tight() {
        let x = Tensor::from_fn(&[5], |i| i as f64 * 0.7 - 1.3);
        let cfg = GradCheck {
            tol: 1e-6,
            ..GradCheck::default()
        };
        let report = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum_all(sq))
            },
            &[x],
            cfg,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn wrong_gradient_is_reported() {
        #[derive(Debug)]
        struct Broken;
        impl crate::tensor::Function for Broken {
            fn name(&self) -> &'static str {
                "broken"
            }
            fn backward(
                &self,
                i: &[&Tensor],
                _: &Tensor,
                g: &Tensor,
                _: &[bool],
            ) -> Vec<Option<Tensor>> {
                // claims d(x^2)/dx = x
                let d = i[0].data().iter().map(|x| x * g.item()).collect();
                vec![Some(Tensor::from_parts(i[0].shape().to_vec(), d))]
            }
        }
        let x = Tensor::full(&[1], 2.0);
        let report = grad_check(
            |g, v| {
                let val = g.value(v[0]).data()[0];
                Ok(g.record(Broken, &[v[0]], Tensor::scalar(val * val)))
            },
            &[x],
            GradCheck::default(),
        )
        .unwrap();
        assert!(!report.passed());
        assert!((report.entries[0].numeric - 4.0).abs() < 1e-6);
    }

    #[test]
    fn small_error_on_one_element_is_caught() {
        #[derive(Debug)]
        struct Nudged;
        impl crate::tensor::Function for Nudged {
            fn name(&self) -> &'static str {
                "nudged"
            }
            fn backward(
                &self,
                i: &[&Tensor],
                _: &Tensor,
                g: &Tensor,
                _: &[bool],
            ) -> Vec<Option<Tensor>> {
                // correct 2x except a 1e-3 slip on the last element
                let mut d: Vec<f64> = i[0].data().iter().map(|x| 2.0 * x * g.item()).collect();
                *d.last_mut().unwrap() += 1e-3;
                vec![Some(Tensor::from_parts(i[0].shape().to_vec(), d))]
            }
        }
        let x = Tensor::from_fn(&[4], |i| i as f64 - 1.5);
        let report = grad_check(
            |g, v| {
                let val: f64 = g.value(v[0]).data().iter().map(|x| x * x).sum();
                Ok(g.record(Nudged, &[v[0]], Tensor::scalar(val)))
            },
            &[x],
            GradCheck::default(),
        )
        .unwrap();
        assert!(!report.passed(), "{report}");
        assert_eq!(report.entries[0].element, 3);
    }
}
