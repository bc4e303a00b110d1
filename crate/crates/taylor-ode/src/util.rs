//! Small shared numeric helpers.

/// Factorials 0! ..= 20!, all exactly representable in f64 (20! < 2^62).
const FACTORIALS: [f64; 21] = {
    let mut t = [1.0; 21];
    let mut k = 1;
    while k <= 20 {
        t[k] = t[k - 1] * k as f64;
        k += 1;
    }
    t
};

/// Largest n with an exact f64 factorial in the table.
pub(crate) const MAX_FACTORIAL: usize = 20;

pub(crate) fn factorial(n: usize) -> f64 {
    FACTORIALS[n]
}

/// Max-norm of a slice; NaN entries make the result NaN.
pub(crate) fn max_norm(v: &[f64]) -> f64 {
    let mut m = 0.0f64;
    for &x in v {
        let a = x.abs();
        if a.is_nan() {
            return f64::NAN;
        }
        if a > m {
            m = a;
        }
    }
    m
}

pub(crate) fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Binomial coefficient as f64, exact for the small arguments used here.
pub(crate) fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc = 1u128;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc as f64
}
