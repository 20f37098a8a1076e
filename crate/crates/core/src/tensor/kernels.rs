// Slice-level float64 kernels shared by forward and backward rules.

/// c[m×n] = a[m×k] · b[k×n]
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// c[m×n] = a[m×k] · b[n×k]ᵀ
pub(crate) fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = dot(arow, brow);
        }
    }
    c
}

/// c[m×n] += a[k×m]ᵀ · b[k×n]
pub(crate) fn matmul_at_acc(c: &mut [f64], a: &[f64], b: &[f64], k: usize, m: usize, n: usize) {
    for t in 0..k {
        let arow = &a[t * m..(t + 1) * m];
        let brow = &b[t * n..(t + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four partial sums keep the loop vectorizable; the order is fixed so
    // results stay bitwise reproducible.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Row-wise softmax with max subtraction. `mask[i]` false forces an exact zero.
/// Returns the index of the first fully masked row, if any.
pub(crate) fn softmax_rows(x: &[f64], cols: usize, mask: Option<&[bool]>) -> Result<Vec<f64>, usize> {
    let mut out = vec![0.0; x.len()];
    for (r, (xrow, orow)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let mrow = mask.map(|m| &m[r * cols..(r + 1) * cols]);
        let valid = |j: usize| mrow.is_none_or(|m| m[j]);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in xrow.iter().enumerate() {
            if valid(j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY && (0..cols).all(|j| !valid(j)) {
            return Err(r);
        }
        let mut sum = 0.0;
        for (j, &v) in xrow.iter().enumerate() {
            if valid(j) {
                let e = (v - max).exp();
                orow[j] = e;
                sum += e;
            }
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Ok(out)
}

pub(crate) fn erf(x: f64) -> f64 {
    libm::erf(x)
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1 / sqrt(2π)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU: x·Φ(x).
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * INV_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x * INV_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

/// Numerically stable log(1 + exp(x)).
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_matches_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        // x·Φ(x) at x = 1: Φ(1) = 0.8413447460685429
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((gelu(-1.0) + 0.158_655_253_931_457_05).abs() < 1e-15);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-9, "x={x}");
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
    }
}
