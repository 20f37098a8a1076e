//! Circle loss over similarity scores in (-1, 1).
//!
//! `L = log(1 + Σ_j exp(γ α_n^j (s_n^j - Δ_n)) · Σ_i exp(-γ α_p^i (s_p^i - Δ_p)))`
//! with `α_p = max(0, 1 + m - s_p)`, `α_n = max(0, s_n + m)`, `Δ_p = 1 - m`
//! and `Δ_n = m`. The weights α are treated as constants when
//! differentiating.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

fn check(m: f64, gamma: f64) -> Result<()> {
    if !(m > 0.0 && m < 1.0) || !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(
            "circle_loss",
            format!("need m in (0, 1) and gamma > 0, got m={m} gamma={gamma}"),
        ));
    }
    Ok(())
}

/// Exponent of each positive term.
fn pos_exponent(s: f64, m: f64, gamma: f64) -> (f64, f64) {
    let alpha = (1.0 + m - s).max(0.0);
    (-gamma * alpha, gamma * alpha * (1.0 - m))
}

/// Exponent of each negative term as `(coefficient on s, constant)`.
fn neg_exponent(s: f64, m: f64, gamma: f64) -> (f64, f64) {
    let alpha = (s + m).max(0.0);
    (gamma * alpha, -gamma * alpha * m)
}

fn log_sum_exp(xs: impl Iterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.collect();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Zero when either list is empty (an empty sum contributes nothing).
pub fn circle_loss(s_pos: &[f64], s_neg: &[f64], m: f64, gamma: f64) -> Result<f64> {
    check(m, gamma)?;
    if s_pos.is_empty() || s_neg.is_empty() {
        return Ok(0.0);
    }
    let lp = log_sum_exp(s_pos.iter().map(|&s| {
        let (a, c) = pos_exponent(s, m, gamma);
        a * s + c
    }));
    let ln = log_sum_exp(s_neg.iter().map(|&s| {
        let (a, c) = neg_exponent(s, m, gamma);
        a * s + c
    }));
    // log(1 + e^z), stable for large z.
    let z = lp + ln;
    Ok(if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() })
}

/// Differentiable form on `1×P` positive and `1×N` negative score rows.
///
/// The product of sums expands to one logit per (positive, negative) pair
/// next to a zero logit, so the loss is the softmax cross-entropy of that
/// row against the zero slot.
pub fn circle_loss_var<'g>(g: &'g Graph, s_pos: Var<'g>, s_neg: Var<'g>, m: f64, gamma: f64) -> Result<Var<'g>> {
    check(m, gamma)?;
    let (pv, nv) = (s_pos.value(), s_neg.value());
    let (p, n) = (pv.numel(), nv.numel());
    if p == 0 || n == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let scores = g.concat_cols(&[s_pos, s_neg])?;
    let cols = 1 + p * n;
    let mut coef = vec![0.0; (p + n) * cols];
    let mut offset = vec![0.0; cols];
    for i in 0..p {
        let (ap, cp) = pos_exponent(pv.data()[i], m, gamma);
        for j in 0..n {
            let (an, cn) = neg_exponent(nv.data()[j], m, gamma);
            let col = 1 + i * n + j;
            coef[i * cols + col] = ap;
            coef[(p + j) * cols + col] = an;
            offset[col] = cp + cn;
        }
    }
    let logits = scores
        .matmul(&g.constant(Tensor::new(vec![p + n, cols], coef)?))?
        .add_row(&g.constant(Tensor::vector(offset)))?;
    logits.cross_entropy(&[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_zero() {
        assert_eq!(circle_loss(&[], &[], 0.25, 32.0).unwrap(), 0.0);
        assert_eq!(circle_loss(&[0.3], &[], 0.25, 32.0).unwrap(), 0.0);
    }

    #[test]
    fn vanishing_weights_give_ln2() {
        // s_n = -m zeroes α_n; s_p = 1 + m would zero α_p (outside the tanh
        // range but fine for the formula).
        let l = circle_loss(&[1.25], &[-0.25], 0.25, 32.0).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn var_matches_scalar() {
        let g = Graph::new();
        let pos = g.leaf(Tensor::new(vec![1, 2], vec![0.4, 0.7]).unwrap());
        let neg = g.leaf(Tensor::new(vec![1, 3], vec![0.1, -0.3, 0.5]).unwrap());
        let v = circle_loss_var(&g, pos, neg, 0.25, 32.0).unwrap().item();
        let s = circle_loss(&[0.4, 0.7], &[0.1, -0.3, 0.5], 0.25, 32.0).unwrap();
        assert!((v - s).abs() < 1e-12, "{v} vs {s}");
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(circle_loss(&[0.1], &[0.1], 1.0, 32.0).is_err());
        assert!(circle_loss(&[0.1], &[0.1], 0.25, 0.0).is_err());
    }
}
