//! Feature-expansion identities for elementwise and matrix products of two
//! linear projections, and a pivoted-elimination rank estimator.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_projection(
    op: &'static str,
    x: &Tensor,
    w1: &Tensor,
    w2: &Tensor,
) -> Result<(usize, usize, usize)> {
    let [l, c] = x.dims2(op)?;
    let [c1, d] = w1.dims2(op)?;
    if c1 != c {
        return Err(Error::shape(op, x.shape(), w1.shape()));
    }
    if w2.shape() != w1.shape() {
        return Err(Error::shape(op, w1.shape(), w2.shape()));
    }
    Ok((l, c, d))
}

/// `(X W1 ⊙ X W2)[m, n]` written as the `C(C+1)/2` quadratic monomials of
/// token `m`, with coefficient `W1[i,n] W2[j,n] + W1[j,n] W2[i,n]` off the
/// diagonal and `W1[i,n] W2[i,n]` on it. Indices are 0-based.
pub fn elementwise_expansion_oracle(
    x: &Tensor,
    w1: &Tensor,
    w2: &Tensor,
    m: usize,
    n: usize,
) -> Result<f64> {
    let (l, c, d) = check_projection("elementwise_expansion_oracle", x, w1, w2)?;
    if m >= l || n >= d {
        return Err(Error::Index(format!("(m, n) = ({m}, {n}) outside {l}x{d}")));
    }
    let mut total = 0.0;
    for i in 0..c {
        for j in i..c {
            let coef = if i == j {
                w1.at(&[i, n]) * w2.at(&[j, n])
            } else {
                w1.at(&[i, n]) * w2.at(&[j, n]) + w1.at(&[j, n]) * w2.at(&[i, n])
            };
            total += coef * x.at(&[m, i]) * x.at(&[m, j]);
        }
    }
    Ok(total)
}

/// `(X W1 (X W2)^T)[m, n]` as the triple sum over features `t` and input
/// channels `i`, `j`. Both `m` and `n` index tokens (0-based).
pub fn matmul_expansion_oracle(
    x: &Tensor,
    w1: &Tensor,
    w2: &Tensor,
    m: usize,
    n: usize,
) -> Result<f64> {
    let (l, c, d) = check_projection("matmul_expansion_oracle", x, w1, w2)?;
    if m >= l || n >= l {
        return Err(Error::Index(format!("(m, n) = ({m}, {n}) outside {l}x{l}")));
    }
    let mut total = 0.0;
    for t in 0..d {
        for i in 0..c {
            for j in 0..c {
                total += w1.at(&[i, t]) * w2.at(&[j, t]) * x.at(&[m, i]) * x.at(&[n, j]);
            }
        }
    }
    Ok(total)
}

/// Rank by row reduction with partial pivoting. A pivot counts as zero when
/// its magnitude is at most `tol` times the largest entry of the input.
pub fn numeric_rank(a: &Tensor, tol: f64) -> Result<usize> {
    let [rows, cols] = a.dims2("numeric_rank")?;
    if !(tol > 0.0) {
        return Err(Error::Config(format!(
            "numeric_rank tol must be positive, got {tol}"
        )));
    }
    let mut m = a.data().to_vec();
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return Ok(0);
    }
    let threshold = tol * scale;
    let mut rank = 0;
    for col in 0..cols {
        if rank == rows {
            break;
        }
        let (pivot, mag) =
            (rank..rows)
                .map(|r| (r, m[r * cols + col].abs()))
                .fold(
                    (rank, -1.0),
                    |best, cur| if cur.1 > best.1 { cur } else { best },
                );
        if mag <= threshold {
            continue;
        }
        if pivot != rank {
            for j in 0..cols {
                m.swap(pivot * cols + j, rank * cols + j);
            }
        }
        let p = m[rank * cols + col];
        for r in rank + 1..rows {
            let f = m[r * cols + col] / p;
            if f == 0.0 {
                continue;
            }
            for j in col..cols {
                m[r * cols + j] -= f * m[rank * cols + j];
            }
        }
        rank += 1;
    }
    Ok(rank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_channel_expansions() {
        let x = Tensor::from_rows(&[[2.0], [-3.0]]);
        let w1 = Tensor::from_rows(&[[0.5]]);
        let w2 = Tensor::from_rows(&[[4.0]]);
        assert_eq!(
            elementwise_expansion_oracle(&x, &w1, &w2, 1, 0).unwrap(),
            0.5 * 4.0 * 9.0
        );
        assert_eq!(
            matmul_expansion_oracle(&x, &w1, &w2, 0, 1).unwrap(),
            0.5 * 4.0 * 2.0 * -3.0
        );
    }

    #[test]
    fn zero_input_expands_to_zero() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let w1 = Tensor::randn(&[3, 2], &mut r);
        let w2 = Tensor::randn(&[3, 2], &mut r);
        let x = Tensor::zeros(&[4, 3]);
        assert_eq!(
            elementwise_expansion_oracle(&x, &w1, &w2, 2, 1).unwrap(),
            0.0
        );
        assert_eq!(matmul_expansion_oracle(&x, &w1, &w2, 2, 3).unwrap(), 0.0);
    }

    #[test]
    fn expansion_index_errors() {
        let x = Tensor::zeros(&[4, 3]);
        let w = Tensor::zeros(&[3, 2]);
        assert!(matches!(
            elementwise_expansion_oracle(&x, &w, &w, 4, 0),
            Err(Error::Index(_))
        ));
        assert!(matches!(
            elementwise_expansion_oracle(&x, &w, &w, 0, 2),
            Err(Error::Index(_))
        ));
        assert!(matches!(
            matmul_expansion_oracle(&x, &w, &w, 0, 4),
            Err(Error::Index(_))
        ));
        assert!(elementwise_expansion_oracle(&x, &Tensor::zeros(&[2, 2]), &w, 0, 0).is_err());
    }

    #[test]
    fn rank_basics() {
        assert_eq!(numeric_rank(&Tensor::eye(3), 1e-10).unwrap(), 3);
        assert_eq!(numeric_rank(&Tensor::zeros(&[3, 4]), 1e-10).unwrap(), 0);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let u = Tensor::randn(&[6, 1], &mut r);
        let v = Tensor::randn(&[1, 4], &mut r);
        assert_eq!(
            numeric_rank(&ops::matmul(&u, &v).unwrap(), 1e-10).unwrap(),
            1
        );
        assert!(numeric_rank(&Tensor::eye(2), 0.0).is_err());
    }

    #[test]
    fn rank_of_wide_and_tall() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(
            numeric_rank(&Tensor::randn(&[3, 7], &mut r), 1e-10).unwrap(),
            3
        );
        assert_eq!(
            numeric_rank(&Tensor::randn(&[7, 3], &mut r), 1e-10).unwrap(),
            3
        );
    }
}
