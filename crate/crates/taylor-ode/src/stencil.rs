//! Centered finite-difference stencils on a uniform grid.
//!
//! `make_stencil(p, q)` produces weights `b_j`, `j = -g..=g` with half-width
//! `g = ceil(p/2) + q - 1`, chosen so that
//!
//! ```text
//! sum_j b_j * j^m = p! * [m == p]   for m = 0..=2g.
//! ```
//!
//! Applied to samples of a smooth function as `h^-p * sum_j b_j * y(x + j*h)`
//! the stencil approximates `y^(p)(x)` with error `O(h^(2q))`: the moment
//! conditions give exactness on monomials up to degree `2g`, and the parity of
//! the weights (`b_{-j} = (-1)^p b_j`) extends that by one degree, leaving
//! `p + 2q` as the first degree with a nonzero defect.
//!
//! Weights are computed once per `(p, q)` pair by solving the moment system
//! exactly in rational arithmetic, rounded to f64 at the end, and cached for
//! the lifetime of the process.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{Signed, ToPrimitive, Zero};

use crate::error::{Error, Result};

/// Weights of one centered stencil. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct StencilWeights {
    derivative_order: usize,
    accuracy_pairs: usize,
    half_width: usize,
    /// Index `i` holds the weight at offset `j = i - half_width`.
    weights: Vec<f64>,
}

impl StencilWeights {
    /// Derivative order `p` the stencil approximates.
    pub fn derivative_order(&self) -> usize {
        self.derivative_order
    }

    /// Accuracy parameter `q`; the approximation error is `O(h^(2q))`.
    pub fn accuracy_pairs(&self) -> usize {
        self.accuracy_pairs
    }

    /// Half-width `g`; offsets run `-g..=g`.
    pub fn half_width(&self) -> usize {
        self.half_width
    }

    /// Weights in offset order `-g..=g`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weight at offset `j`. Panics if `|j| > g`.
    pub fn weight(&self, j: isize) -> f64 {
        let g = self.half_width as isize;
        assert!(j.abs() <= g, "offset {j} outside half-width {g}");
        self.weights[(j + g) as usize]
    }

    /// `(offset, weight)` pairs in offset order.
    pub fn iter(&self) -> impl Iterator<Item = (isize, f64)> + '_ {
        let g = self.half_width as isize;
        self.weights
            .iter()
            .enumerate()
            .map(move |(i, &w)| (i as isize - g, w))
    }

    /// `h^-p * sum_j b_j * f(x + j*h)`.
    ///
    /// Offsets are accumulated in symmetric pairs so that the exact parity
    /// cancellations of the weights survive in floating point.
    pub fn apply<F: Fn(f64) -> f64>(&self, h: f64, x: f64, f: F) -> f64 {
        let g = self.half_width as isize;
        let mut acc = self.weight(0) * f(x);
        for j in 1..=g {
            let pair = self.weight(j) * f(x + j as f64 * h) + self.weight(-j) * f(x - j as f64 * h);
            acc += pair;
        }
        acc * h.powi(-(self.derivative_order as i32))
    }
}

/// Cache hit/miss counters for the process-wide stencil cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheStats {
    pub entries: usize,
    pub hits: u64,
    pub misses: u64,
}

static CACHE: Mutex<Option<HashMap<(usize, usize), StencilWeights>>> = Mutex::new(None);
static HITS: AtomicU64 = AtomicU64::new(0);
static MISSES: AtomicU64 = AtomicU64::new(0);

/// Weights for the `p`-th derivative with accuracy order `2q`, cached.
///
/// Rejects `p = 0` (the identity is not a difference stencil) and `q = 0`.
pub fn make_stencil(p: usize, q: usize) -> Result<StencilWeights> {
    if p == 0 || q == 0 {
        return Err(Error::InvalidStencil { p, q });
    }
    let mut guard = CACHE.lock().expect("stencil cache poisoned");
    let cache = guard.get_or_insert_with(HashMap::new);
    if let Some(hit) = cache.get(&(p, q)) {
        HITS.fetch_add(1, Ordering::Relaxed);
        return Ok(hit.clone());
    }
    MISSES.fetch_add(1, Ordering::Relaxed);
    let built = solve_moment_system(p, q);
    cache.insert((p, q), built.clone());
    Ok(built)
}

/// Stencil used for the k-th Taylor stage of a method of order `R`:
/// derivative order `p = k` with `q = ceil((R - k) / 2)` accuracy pairs.
///
/// Valid for `1 <= k <= R - 1`.
pub fn stencil_for(k: usize, order: usize) -> Result<StencilWeights> {
    if k == 0 || order < 2 || k > order - 1 {
        return Err(Error::InvalidStage {
            k,
            order,
            max: order.saturating_sub(1),
        });
    }
    make_stencil(k, (order - k).div_ceil(2))
}

/// Snapshot of the cache counters.
pub fn cache_stats() -> CacheStats {
    let guard = CACHE.lock().expect("stencil cache poisoned");
    CacheStats {
        entries: guard.as_ref().map_or(0, HashMap::len),
        hits: HITS.load(Ordering::Relaxed),
        misses: MISSES.load(Ordering::Relaxed),
    }
}

/// Solve the `(2g+1)` moment equations exactly over the rationals and round
/// the solution once. Gauss-Jordan with partial pivoting; the Vandermonde
/// matrix on distinct integer nodes is nonsingular, so a zero pivot cannot
/// occur.
fn solve_moment_system(p: usize, q: usize) -> StencilWeights {
    let g = p.div_ceil(2) + q - 1;
    let n = 2 * g + 1;

    let mut a: Vec<Vec<BigRational>> = (0..n)
        .map(|m| {
            (0..n)
                .map(|i| {
                    let j = BigInt::from(i as i64 - g as i64);
                    BigRational::from_integer(j.pow(m as u32))
                })
                .collect()
        })
        .collect();
    let mut rhs: Vec<BigRational> = (0..n).map(|_| BigRational::zero()).collect();
    rhs[p] = BigRational::from_integer((1..=p).map(BigInt::from).product::<BigInt>());

    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r, &s| a[r][col].abs().cmp(&a[s][col].abs()))
            .expect("non-empty pivot range");
        a.swap(col, pivot_row);
        rhs.swap(col, pivot_row);
        let pivot = a[col][col].clone();
        debug_assert!(!pivot.is_zero(), "Vandermonde pivot vanished");
        for r in 0..n {
            if r == col || a[r][col].is_zero() {
                continue;
            }
            let factor = &a[r][col] / &pivot;
            for c in col..n {
                let sub = &factor * &a[col][c];
                a[r][c] -= sub;
            }
            let sub = &factor * &rhs[col];
            rhs[r] -= sub;
        }
    }

    let weights = (0..n)
        .map(|r| {
            (&rhs[r] / &a[r][r])
                .to_f64()
                .expect("rational stencil weight within f64 range")
        })
        .collect();

    StencilWeights {
        derivative_order: p,
        accuracy_pairs: q,
        half_width: g,
        weights,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Independent route to the same weights: Fornberg's recursion for
    /// finite-difference coefficients on the nodes `-g..=g` around 0.
    fn fornberg_weights(p: usize, g: usize) -> Vec<f64> {
        let nodes: Vec<f64> = (-(g as isize)..=g as isize).map(|j| j as f64).collect();
        let n = nodes.len();
        let mut c = vec![vec![0.0; p + 1]; n];
        let mut c1 = 1.0;
        let mut c4 = nodes[0];
        c[0][0] = 1.0;
        for i in 1..n {
            let mn = i.min(p);
            let mut c2 = 1.0;
            let c5 = c4;
            c4 = nodes[i];
            for j in 0..i {
                let c3 = nodes[i] - nodes[j];
                c2 *= c3;
                if j == i - 1 {
                    for k in (1..=mn).rev() {
                        c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                    }
                    c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
                }
                for k in (1..=mn).rev() {
                    c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
                }
                c[j][0] = c4 * c[j][0] / c3;
            }
            c1 = c2;
        }
        c.iter().map(|row| row[p]).collect()
    }

    #[test]
    fn first_derivative_second_order() {
        let s = make_stencil(1, 1).unwrap();
        assert_eq!(s.half_width(), 1);
        assert_eq!(s.weights(), &[-0.5, 0.0, 0.5]);
    }

    #[test]
    fn second_derivative_second_order() {
        let s = make_stencil(2, 1).unwrap();
        assert_eq!(s.weights(), &[1.0, -2.0, 1.0]);
    }

    #[test]
    fn first_derivative_fourth_order() {
        let s = make_stencil(1, 2).unwrap();
        let expect = [1.0 / 12.0, -2.0 / 3.0, 0.0, 2.0 / 3.0, -1.0 / 12.0];
        assert_eq!(s.half_width(), 2);
        for (w, e) in s.weights().iter().zip(expect) {
            assert_relative_eq!(w, &e, max_relative = 1e-15, epsilon = 1e-15);
        }
    }

    #[test]
    fn third_derivative_half_width() {
        // g = ceil(3/2) + 1 - 1 = 2, five nodes.
        let s = make_stencil(3, 1).unwrap();
        assert_eq!(s.half_width(), 2);
        assert_eq!(s.weights(), &[-0.5, 1.0, 0.0, -1.0, 0.5]);
    }

    #[test]
    fn rejects_degenerate_parameters() {
        assert!(matches!(
            make_stencil(0, 1),
            Err(Error::InvalidStencil { p: 0, q: 1 })
        ));
        assert!(matches!(
            make_stencil(1, 0),
            Err(Error::InvalidStencil { p: 1, q: 0 })
        ));
    }

    #[test]
    fn stage_selection_matches_direct_construction() {
        // k = 1, R = 2 is the lowest stage: p = 1, q = 1.
        assert_eq!(
            stencil_for(1, 2).unwrap().weights(),
            make_stencil(1, 1).unwrap().weights()
        );
        // k = 1, R = 4 needs q = 2 to keep the stage error at the step order.
        assert_eq!(
            stencil_for(1, 4).unwrap().weights(),
            make_stencil(1, 2).unwrap().weights()
        );
        // Highest stage always has q = 1.
        assert_eq!(
            stencil_for(3, 4).unwrap().weights(),
            make_stencil(3, 1).unwrap().weights()
        );
    }

    #[test]
    fn stage_selection_rejects_out_of_range() {
        assert!(stencil_for(0, 4).is_err());
        assert!(stencil_for(4, 4).is_err());
        assert!(stencil_for(1, 1).is_err());
    }

    #[test]
    fn matches_fornberg_recursion() {
        for p in 1..=6 {
            for q in 1..=3 {
                let s = make_stencil(p, q).unwrap();
                let oracle = fornberg_weights(p, s.half_width());
                let scale = oracle.iter().fold(1.0f64, |m, w| m.max(w.abs()));
                for (w, o) in s.weights().iter().zip(&oracle) {
                    assert!(
                        (w - o).abs() <= 1e-9 * scale,
                        "p={p} q={q}: {w} vs oracle {o}"
                    );
                }
            }
        }
    }

    #[test]
    fn weights_have_parity() {
        for p in 1..=6 {
            for q in 1..=3 {
                let s = make_stencil(p, q).unwrap();
                let g = s.half_width() as isize;
                let sign = if p % 2 == 0 { 1.0 } else { -1.0 };
                for j in 0..=g {
                    // Both entries round from the same rational, so the
                    // symmetry is exact even in f64.
                    assert_eq!(s.weight(-j), sign * s.weight(j), "p={p} q={q} j={j}");
                }
            }
        }
    }

    #[test]
    fn unit_grid_moments() {
        // Moment sums of the rounded weights. The only rounding is one f64
        // round per weight, so defects scale with the magnitude of the
        // summands; the tolerance accounts for that scale.
        for p in 1..=6 {
            for q in 1..=3 {
                let s = make_stencil(p, q).unwrap();
                let g = s.half_width() as isize;
                for m in 0..=2 * g as usize {
                    let mut acc = if m == 0 { s.weight(0) } else { 0.0 };
                    let mut scale = 1.0f64;
                    for j in 1..=g {
                        let jm = (j as f64).powi(m as i32);
                        let pair = s.weight(j) * jm + s.weight(-j) * (-(j as f64)).powi(m as i32);
                        acc += pair;
                        scale = scale.max((s.weight(j) * jm).abs());
                    }
                    let target = if m == p { crate::util::factorial(p) } else { 0.0 };
                    assert!(
                        (acc - target).abs() <= 1e-12 * scale.max(1.0),
                        "p={p} q={q} m={m}: moment {acc} vs {target}"
                    );
                }
            }
        }
    }

    #[test]
    fn exact_on_monomials() {
        // h^-p sum b_j y(x + jh) reproduces d^p/dx^p of x^m exactly for all
        // m <= p + 2q - 1, up to rounding relative to the sample magnitudes.
        for p in 1..=6usize {
            for q in 1..=3usize {
                let s = make_stencil(p, q).unwrap();
                for m in 0..(p + 2 * q) {
                    for &x in &[0.0, 0.3] {
                        for &h in &[1.0, 0.1, 0.01] {
                            let got = s.apply(h, x, |t| t.powi(m as i32));
                            let exact = if m < p {
                                0.0
                            } else {
                                // d^p x^m = m!/(m-p)! x^(m-p)
                                (crate::util::factorial(m) / crate::util::factorial(m - p))
                                    * x.powi((m - p) as i32)
                            };
                            // Rounding amplitude of the cancelling sum.
                            let g = s.half_width() as f64;
                            let sample = (x.abs() + g * h).powi(m as i32);
                            let noise =
                                s.weights().iter().map(|w| w.abs()).sum::<f64>() * sample
                                    / h.powi(p as i32);
                            let tol = 1e-10 * exact.abs().max(1.0).max(1e-4 * noise);
                            assert!(
                                (got - exact).abs() <= tol,
                                "p={p} q={q} m={m} x={x} h={h}: {got} vs {exact}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn observed_order_matches_2q() {
        // Median of the pairwise orders log2(e(h) / e(h/2)) on exp(x) at
        // x = 0.3. The h range starts coarser for high p so most pairs sit
        // above the rounding floor; the median shrugs off contaminated pairs
        // at either end of the range.
        for p in 1..=6usize {
            for q in 1..=3usize {
                let s = make_stencil(p, q).unwrap();
                let x = 0.3f64;
                let exact = x.exp();
                // Coarse start where truncation decays fast (large p or 2q),
                // so the rounding floor only claims the last pair or two.
                let h0: f64 = if p >= 5 || q == 3 { 0.5 } else { 0.125 };
                let errors: Vec<f64> = (0..6)
                    .map(|k| {
                        let h = h0 * 0.5f64.powi(k);
                        (s.apply(h, x, f64::exp) - exact).abs()
                    })
                    .collect();
                // Everything past the error minimum is floor growth, not
                // truncation; drop it before reading off orders.
                let cut = errors
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap()
                    .max(1);
                let mut orders: Vec<f64> = errors[..=cut]
                    .windows(2)
                    .filter(|w| w[0] > 0.0 && w[1] > 0.0)
                    .map(|w| (w[0] / w[1]).log2())
                    .collect();
                assert!(!orders.is_empty(), "p={p} q={q}: errors {errors:?}");
                orders.sort_by(f64::total_cmp);
                let mid = orders.len() / 2;
                let median = if orders.len() % 2 == 1 {
                    orders[mid]
                } else {
                    0.5 * (orders[mid - 1] + orders[mid])
                };
                assert!(
                    (median - 2.0 * q as f64).abs() <= 0.35,
                    "p={p} q={q}: median order {median} from errors {errors:?}"
                );
            }
        }
    }

    #[test]
    fn cache_returns_identical_weights() {
        let a = make_stencil(2, 2).unwrap();
        let before = cache_stats();
        let b = make_stencil(2, 2).unwrap();
        let after = cache_stats();
        assert_eq!(a, b);
        assert!(after.hits > before.hits);
    }
}
