//! Faa di Bruno derivative sums over integer partitions.
//!
//! For a scalar autonomous right-hand side `f` and a solution jet
//! `z_j = u^(j)(t)`, the r-th total derivative of `f(u(t))` is
//!
//! ```text
//! d^r/dt^r f(u(t)) = sum over s in P_r of
//!     r!/(s_1! .. s_r!) * f^(|s|)(z_0) * prod_j (z_j / j!)^(s_j)
//! ```
//!
//! where `P_r = { s : sum_v v*s_v = r }` indexes the integer partitions of
//! `r` and `|s| = s_1 + .. + s_r`. These sums and their partial derivatives
//! with respect to the jet entries are what the exact implicit Taylor solver
//! assembles; the partial with respect to `z_0` raises `|s|` by one, and the
//! partial with respect to `z_j` multiplies a term by `s_j/j!` and lowers the
//! `s_j` exponent by one.
//!
//! Derivatives of `f` come in through a callable `(m, z0) -> f^(m)(z0)`;
//! non-finite values it returns propagate into the sums unchanged.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::util::factorial;

/// Largest supported derivative order; bounded by exact u64 multinomials.
pub const MAX_ORDER: usize = 20;

/// One multi-index `s` of `P_r`, with its multinomial weight precomputed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionIndex {
    parts: Vec<usize>,
    magnitude: usize,
    weight: u64,
}

impl PartitionIndex {
    /// Multiplicities `s_1..s_r`; `parts()[j-1]` is the count of parts equal
    /// to `j`.
    pub fn parts(&self) -> &[usize] {
        &self.parts
    }

    /// The order `r` this index partitions.
    pub fn order(&self) -> usize {
        self.parts.len()
    }

    /// `|s|`, the derivative order of `f` the term carries.
    pub fn magnitude(&self) -> usize {
        self.magnitude
    }

    /// Multinomial `r!/(s_1!..s_r!)`.
    pub fn weight(&self) -> u64 {
        self.weight
    }
}

static PARTITIONS: Mutex<Option<HashMap<usize, Arc<Vec<PartitionIndex>>>>> = Mutex::new(None);

/// All of `P_r`, memoized per `r`. Rejects `r = 0` and `r > MAX_ORDER`.
pub fn partitions(r: usize) -> Result<Arc<Vec<PartitionIndex>>> {
    if r == 0 || r > MAX_ORDER {
        return Err(Error::InvalidPartitionOrder { r, max: MAX_ORDER });
    }
    let mut guard = PARTITIONS.lock().expect("partition cache poisoned");
    let cache = guard.get_or_insert_with(HashMap::new);
    if let Some(hit) = cache.get(&r) {
        return Ok(Arc::clone(hit));
    }
    let mut out = Vec::new();
    let mut counts = vec![0usize; r];
    enumerate(r, r, &mut counts, &mut out);
    let built = Arc::new(out);
    cache.insert(r, Arc::clone(&built));
    Ok(built)
}

/// Recursive enumeration by largest remaining part.
fn enumerate(remaining: usize, max_part: usize, counts: &mut Vec<usize>, out: &mut Vec<PartitionIndex>) {
    if remaining == 0 {
        let r = counts.len();
        let magnitude = counts.iter().sum();
        let mut denom = 1u128;
        for &s in counts.iter() {
            denom *= exact_factorial(s);
        }
        let weight = exact_factorial(r) / denom;
        out.push(PartitionIndex {
            parts: counts.clone(),
            magnitude,
            weight: u64::try_from(weight).expect("multinomial fits u64 for r <= MAX_ORDER"),
        });
        return;
    }
    for part in (1..=max_part.min(remaining)).rev() {
        counts[part - 1] += 1;
        enumerate(remaining - part, part, counts, out);
        counts[part - 1] -= 1;
    }
}

fn exact_factorial(n: usize) -> u128 {
    (1..=n as u128).product()
}

/// The Faa di Bruno sum of order `r` at the jet `(z_0 .. z_r)` (only the
/// first `r + 1` entries are read).
pub fn fdb_derivative<F>(r: usize, f_derivs: F, jet: &[f64]) -> Result<f64>
where
    F: Fn(usize, f64) -> f64,
{
    let index = partitions(r)?;
    assert!(jet.len() > r, "jet holds {} entries, order {r} needs {}", jet.len(), r + 1);
    let z0 = jet[0];
    // f^(m)(z0) for m = 1..=r, fetched once per call.
    let derivs: Vec<f64> = (1..=r).map(|m| f_derivs(m, z0)).collect();
    let scaled: Vec<f64> = (1..=r).map(|j| jet[j] / factorial(j)).collect();

    let mut acc = 0.0;
    for s in index.iter() {
        let mut term = s.weight() as f64 * derivs[s.magnitude() - 1];
        for (j, &sj) in s.parts().iter().enumerate() {
            if sj > 0 {
                term *= scaled[j].powi(sj as i32);
            }
        }
        acc += term;
    }
    Ok(acc)
}

/// Gradient of [`fdb_derivative`] with respect to `(z_0 .. z_r)`.
pub fn fdb_partials<F>(r: usize, f_derivs: F, jet: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(usize, f64) -> f64,
{
    let index = partitions(r)?;
    assert!(jet.len() > r, "jet holds {} entries, order {r} needs {}", jet.len(), r + 1);
    let z0 = jet[0];
    // The z_0 partial shifts every term up one derivative order of f.
    let derivs: Vec<f64> = (1..=r + 1).map(|m| f_derivs(m, z0)).collect();
    let scaled: Vec<f64> = (1..=r).map(|j| jet[j] / factorial(j)).collect();

    let mut grad = vec![0.0; r + 1];
    for s in index.iter() {
        let w = s.weight() as f64;
        let mut prod = 1.0;
        for (j, &sj) in s.parts().iter().enumerate() {
            if sj > 0 {
                prod *= scaled[j].powi(sj as i32);
            }
        }
        grad[0] += w * derivs[s.magnitude()] * prod;

        for (j, &sj) in s.parts().iter().enumerate() {
            if sj == 0 {
                continue;
            }
            // Same term with one factor of z_j/j! removed; rebuilt instead of
            // divided so z_j = 0 stays well-defined.
            let mut rest = 1.0;
            for (i, &si) in s.parts().iter().enumerate() {
                let pow = if i == j { si - 1 } else { si };
                if pow > 0 {
                    rest *= scaled[i].powi(pow as i32);
                }
            }
            grad[j + 1] +=
                w * derivs[s.magnitude() - 1] * (sj as f64 / factorial(j + 1)) * rest;
        }
    }
    Ok(grad)
}

/// Column layout of one partition term for a system jet: the column
/// `z_j / j!` repeated `s_j` times, `|s|` columns in total.
///
/// Kept as the data shape the systems form of the sum would contract over;
/// the solvers in this crate only exercise it at `dim = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct JetMatrix {
    dim: usize,
    columns: Vec<Vec<f64>>,
}

impl JetMatrix {
    /// `blocks[j-1]` is the jet block `z_j` of length `dim`, `j = 1..=r`.
    pub fn from_blocks(index: &PartitionIndex, blocks: &[&[f64]]) -> Self {
        assert!(blocks.len() >= index.order());
        let dim = blocks.first().map_or(0, |b| b.len());
        let mut columns = Vec::with_capacity(index.magnitude());
        for (j, &sj) in index.parts().iter().enumerate() {
            let col: Vec<f64> = blocks[j].iter().map(|z| z / factorial(j + 1)).collect();
            assert_eq!(col.len(), dim, "jet blocks must share the state dimension");
            for _ in 0..sj {
                columns.push(col.clone());
            }
        }
        JetMatrix { dim, columns }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    /// Product over columns of the single entry; the scalar contraction.
    pub fn scalar_product(&self) -> f64 {
        assert_eq!(self.dim, 1);
        self.columns.iter().map(|c| c[0]).product()
    }
}
