//! Small numerical helpers shared across modules.

/// `ln(e^a + e^b)` without overflow.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `ln Σ exp(t_i)` with max-shift and Neumaier-compensated summation.
///
/// Returns `-inf` for an empty slice or when every term is `-inf`.
pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || !max.is_finite() {
        return max;
    }
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for &t in terms {
        let x = (t - max).exp();
        let s = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - s) + x;
        } else {
            comp += (x - s) + sum;
        }
        sum = s;
    }
    max + (sum + comp).ln()
}

/// Sum of `len` vectors of dimension `dim` reduced over a fixed pairwise tree.
///
/// The tree shape depends only on `len`, so the result is bitwise identical
/// however the leaves are produced (sequentially or by a thread pool).
pub fn pairwise_sum<F>(len: usize, dim: usize, leaf: &F) -> Vec<f64>
where
    F: Fn(usize) -> Vec<f64> + Sync,
{
    fn go<F>(lo: usize, hi: usize, dim: usize, leaf: &F) -> Vec<f64>
    where
        F: Fn(usize) -> Vec<f64> + Sync,
    {
        match hi - lo {
            0 => vec![0.0; dim],
            1 => leaf(lo),
            n => {
                let mid = lo + n / 2;
                let (mut left, right) = if n >= 8 {
                    rayon::join(|| go(lo, mid, dim, leaf), || go(mid, hi, dim, leaf))
                } else {
                    (go(lo, mid, dim, leaf), go(mid, hi, dim, leaf))
                };
                for (l, r) in left.iter_mut().zip(&right) {
                    *l += r;
                }
                left
            }
        }
    }
    go(0, len, dim, leaf)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
