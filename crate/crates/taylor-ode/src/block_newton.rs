//! Block-structured Newton updates and the small dense kernel behind them.
//!
//! The implicit approximate Taylor step solves `F(Z) = 0` for the stacked
//! unknown `Z = (z_0 .. z_R)`, `z_k` of state dimension `M`. Its Jacobian has
//! a fixed sparsity: row zero couples to everything, each lower row `k >= 1`
//! has `-I` on the diagonal, dense blocks to its left and zeros to its right.
//! The update `J delta = -F` is therefore computed by forward substitution in
//! the lower rows followed by one `M x M` Schur solve for `delta_0`:
//!
//! ```text
//! B_k = -F_k0 + sum_{i<k} F_ki B_i          (k = 1..R, block products)
//! A_k = -F_k  + sum_{i<k} F_ki A_i          (matrix-vector only)
//! S   = F_00 - sum_l F_0l B_l               (R more block products)
//! delta_0   = -S^-1 (F_0 - sum_l F_0l A_l)
//! delta_k   = -(A_k + B_k delta_0)
//! ```
//!
//! The full `(R+1)M` system is never materialized outside of test oracles.
//! Block products are counted so tests can pin the counts to the formulas
//! `(R^2 - R)/2` for the forward pass and `R` for the Schur assembly.

use crate::error::{Error, Result};

/// Dense row-major matrix. Just enough linear algebra for this crate.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Row-major construction; `data.len()` must equal `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    /// Overwrite with another matrix of identical shape.
    pub fn copy_from(&mut self, other: &Mat) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data.copy_from_slice(&other.data);
    }

    /// Overwrite with `-I` scaled by `factor`.
    pub fn set_scaled_identity(&mut self, factor: f64) {
        assert_eq!(self.rows, self.cols);
        self.data.fill(0.0);
        for i in 0..self.rows {
            self[(i, i)] = factor;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    /// Infinity norm: max absolute row sum.
    pub fn inf_norm(&self) -> f64 {
        (0..self.rows)
            .map(|i| {
                self.data[i * self.cols..(i + 1) * self.cols]
                    .iter()
                    .map(|x| x.abs())
                    .sum::<f64>()
            })
            .fold(0.0f64, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// `a * b` as a fresh matrix.
pub fn mat_mul(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.rows, b.cols);
    mul_acc(&mut out, a, b, 1.0);
    out
}

/// `out += sign * a * b`.
fn mul_acc(out: &mut Mat, a: &Mat, b: &Mat, sign: f64) {
    assert_eq!(a.cols, b.rows);
    assert_eq!((out.rows, out.cols), (a.rows, b.cols));
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = sign * a[(i, k)];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            let orow = &mut out.data[i * out.cols..(i + 1) * out.cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// `out += sign * a * x`.
fn matvec_acc(out: &mut [f64], a: &Mat, x: &[f64], sign: f64) {
    assert_eq!(a.cols, x.len());
    assert_eq!(a.rows, out.len());
    for i in 0..a.rows {
        let row = &a.data[i * a.cols..(i + 1) * a.cols];
        let dot: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
        out[i] += sign * dot;
    }
}

/// Row-pivoted in-place factorization. On success `a` holds L (unit diagonal,
/// below) and U (on and above), and the returned permutation maps factored
/// row index to original row index. Fails with the offending pivot magnitude.
fn lu_factor_in_place(a: &mut Mat, pivot_floor: f64) -> std::result::Result<Vec<usize>, f64> {
    assert_eq!(a.rows, a.cols);
    let n = a.rows;
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let (pivot_row, pivot_mag) = (col..n)
            .map(|r| (r, a[(r, col)].abs()))
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .expect("non-empty pivot range");
        if !(pivot_mag > pivot_floor) {
            return Err(pivot_mag);
        }
        if pivot_row != col {
            perm.swap(col, pivot_row);
            for j in 0..n {
                let t = a[(col, j)];
                a[(col, j)] = a[(pivot_row, j)];
                a[(pivot_row, j)] = t;
            }
        }
        let pivot = a[(col, col)];
        for r in col + 1..n {
            let factor = a[(r, col)] / pivot;
            a[(r, col)] = factor;
            for j in col + 1..n {
                let sub = factor * a[(col, j)];
                a[(r, j)] -= sub;
            }
        }
    }
    Ok(perm)
}

/// Solve with a factorization from [`lu_factor_in_place`], one right-hand side.
fn lu_apply(a: &Mat, perm: &[usize], rhs: &[f64], out: &mut [f64]) {
    let n = a.rows;
    for i in 0..n {
        out[i] = rhs[perm[i]];
    }
    for i in 1..n {
        let mut acc = out[i];
        for j in 0..i {
            acc -= a[(i, j)] * out[j];
        }
        out[i] = acc;
    }
    for i in (0..n).rev() {
        let mut acc = out[i];
        for j in i + 1..n {
            acc -= a[(i, j)] * out[j];
        }
        out[i] = acc / a[(i, i)];
    }
}

/// Dense solve `a x = rhs` with one or more right-hand-side columns.
///
/// Pivots below 1e-300 in magnitude are reported as singular.
pub fn lu_solve(a: &Mat, rhs: &Mat) -> Result<Mat> {
    assert_eq!(a.rows, rhs.rows);
    let mut work = a.clone();
    let perm = lu_factor_in_place(&mut work, 1e-300)
        .map_err(|pivot| Error::SingularMatrix { pivot })?;
    let n = a.rows;
    let mut out = Mat::zeros(rhs.rows, rhs.cols);
    let mut col = vec![0.0; n];
    let mut sol = vec![0.0; n];
    for c in 0..rhs.cols {
        for i in 0..n {
            col[i] = rhs[(i, c)];
        }
        lu_apply(&work, &perm, &col, &mut sol);
        for i in 0..n {
            out[(i, c)] = sol[i];
        }
    }
    Ok(out)
}

/// In-place dense solve for a single right-hand-side vector.
pub(crate) fn lu_solve_vec_in_place(
    a: &mut Mat,
    rhs: &mut [f64],
    pivot_floor: f64,
) -> std::result::Result<(), f64> {
    let perm = lu_factor_in_place(a, pivot_floor)?;
    let mut out = vec![0.0; rhs.len()];
    lu_apply(a, &perm, rhs, &mut out);
    rhs.copy_from_slice(&out);
    Ok(())
}

/// Jacobian of the stacked step system, stored as `(R+1)^2` dense blocks of
/// size `M x M`. Rows `k >= 1` must keep `-I` on the diagonal and zeros right
/// of it; assembly code owns that contract, the solver relies on it.
#[derive(Debug, Clone)]
pub struct BlockJacobian {
    order: usize,
    dim: usize,
    blocks: Vec<Mat>,
}

impl BlockJacobian {
    /// Zeroed blocks except the structural identities: `F_00 = I` and
    /// `F_kk = -I`.
    pub fn new(order: usize, dim: usize) -> Self {
        assert!(order >= 1 && dim >= 1);
        let mut blocks = Vec::with_capacity((order + 1) * (order + 1));
        for _ in 0..(order + 1) * (order + 1) {
            blocks.push(Mat::zeros(dim, dim));
        }
        let mut jac = BlockJacobian { order, dim, blocks };
        jac.block_mut(0, 0).set_scaled_identity(1.0);
        for k in 1..=order {
            jac.block_mut(k, k).set_scaled_identity(-1.0);
        }
        jac
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn block(&self, i: usize, j: usize) -> &Mat {
        &self.blocks[i * (self.order + 1) + j]
    }

    pub fn block_mut(&mut self, i: usize, j: usize) -> &mut Mat {
        &mut self.blocks[i * (self.order + 1) + j]
    }
}

/// Counted work of one structured update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OpTally {
    /// M x M block products spent in the forward pass for B.
    pub forward_b_products: usize,
    /// M x M block products spent forming `F_{0,1:R} B`.
    pub schur_products: usize,
    /// Dense factorizations (always one Schur complement).
    pub lu_factorizations: usize,
}

/// The counts one update must spend, by the formulas above.
pub fn op_count(order: usize, _dim: usize) -> OpTally {
    OpTally {
        forward_b_products: (order * order - order) / 2,
        schur_products: order,
        lu_factorizations: 1,
    }
}

/// Stopping parameters for the Newton iterations in this crate.
#[derive(Debug, Clone, Copy)]
pub struct NewtonConfig {
    /// Residual tolerance factor; convergence at `|F| <= tol * (1 + |u_n|)`.
    pub tol: f64,
    pub max_iter: usize,
    /// Consecutive residual growths before declaring divergence.
    pub divergence_streak: usize,
    /// Stalled iterations are accepted once the residual is within
    /// `stall_factor * tol * scale`: quadratic convergence that stops making
    /// progress there has hit its rounding floor, which on stiff problems can
    /// sit above the plain tolerance.
    pub stall_factor: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig {
            tol: 1e-13,
            max_iter: 50,
            divergence_streak: 4,
            stall_factor: 1e3,
        }
    }
}

/// Outcome of one Newton solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonStats {
    pub iterations: usize,
    pub final_residual: f64,
    pub converged: bool,
}

/// Verdict of [`NewtonMonitor::assess`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum NewtonFlow {
    Continue,
    Converged,
    Diverged,
}

/// Shared stopping policy: plain tolerance, stall-at-floor acceptance, and a
/// divergence streak.
pub(crate) struct NewtonMonitor {
    cfg: NewtonConfig,
    scale: f64,
    prev: f64,
    grow_streak: usize,
    stall_streak: usize,
}

impl NewtonMonitor {
    /// `scale` is `1 + |u_n|` in the caller's norm.
    pub(crate) fn new(cfg: NewtonConfig, scale: f64) -> Self {
        NewtonMonitor {
            cfg,
            scale,
            prev: f64::INFINITY,
            grow_streak: 0,
            stall_streak: 0,
        }
    }

    pub(crate) fn assess(&mut self, residual: f64) -> NewtonFlow {
        if !residual.is_finite() {
            return NewtonFlow::Diverged;
        }
        let tol = self.cfg.tol * self.scale;
        if residual <= tol {
            return NewtonFlow::Converged;
        }
        if residual > self.prev {
            self.grow_streak += 1;
            if self.cfg.divergence_streak > 0 && self.grow_streak >= self.cfg.divergence_streak {
                return NewtonFlow::Diverged;
            }
        } else {
            self.grow_streak = 0;
        }
        // Less than a 4x reduction counts as a stalled iteration.
        if residual > 0.25 * self.prev {
            self.stall_streak += 1;
        } else {
            self.stall_streak = 0;
        }
        if self.stall_streak >= 2 && residual <= self.cfg.stall_factor * tol {
            return NewtonFlow::Converged;
        }
        self.prev = residual;
        NewtonFlow::Continue
    }
}

/// Scratch space reused across updates so the step loop stays allocation
/// free after the first iteration.
pub(crate) struct BlockWorkspace {
    b: Vec<Mat>,
    a: Vec<f64>,
    schur: Mat,
    rhs: Vec<f64>,
}

impl BlockWorkspace {
    pub(crate) fn new(order: usize, dim: usize) -> Self {
        BlockWorkspace {
            b: (0..order).map(|_| Mat::zeros(dim, dim)).collect(),
            a: vec![0.0; order * dim],
            schur: Mat::zeros(dim, dim),
            rhs: vec![0.0; dim],
        }
    }
}

/// One structured update: writes `delta` solving `J delta = -F`.
///
/// `residual` and `delta` are stacked `(R+1) * M` vectors.
pub(crate) fn newton_update_into(
    jac: &BlockJacobian,
    residual: &[f64],
    ws: &mut BlockWorkspace,
    delta: &mut [f64],
) -> Result<OpTally> {
    let r = jac.order();
    let m = jac.dim();
    assert_eq!(residual.len(), (r + 1) * m);
    assert_eq!(delta.len(), (r + 1) * m);
    let mut tally = OpTally::default();

    // B_k = -F_k0 + sum_{i<k} F_ki B_i
    for k in 1..=r {
        let (done, rest) = ws.b.split_at_mut(k - 1);
        let bk = &mut rest[0];
        bk.copy_from(jac.block(k, 0));
        for v in bk.data_mut() {
            *v = -*v;
        }
        for i in 1..k {
            mul_acc(bk, jac.block(k, i), &done[i - 1], 1.0);
            tally.forward_b_products += 1;
        }
    }

    // A_k = -F_k + sum_{i<k} F_ki A_i
    for k in 1..=r {
        let (done, rest) = ws.a.split_at_mut((k - 1) * m);
        let ak = &mut rest[..m];
        for (dst, src) in ak.iter_mut().zip(&residual[k * m..(k + 1) * m]) {
            *dst = -src;
        }
        for i in 1..k {
            matvec_acc(ak, jac.block(k, i), &done[(i - 1) * m..i * m], 1.0);
        }
    }

    // S = F_00 - sum_l F_0l B_l, rhs = F_0 - sum_l F_0l A_l
    ws.schur.copy_from(jac.block(0, 0));
    for l in 1..=r {
        mul_acc(&mut ws.schur, jac.block(0, l), &ws.b[l - 1], -1.0);
        tally.schur_products += 1;
    }
    ws.rhs.copy_from_slice(&residual[..m]);
    for l in 1..=r {
        matvec_acc(&mut ws.rhs, jac.block(0, l), &ws.a[(l - 1) * m..l * m], -1.0);
    }

    // delta_0 = -S^-1 rhs, with a pivot floor relative to the Schur norm.
    let norm = ws.schur.inf_norm();
    let floor = 1e-14 * norm;
    tally.lu_factorizations += 1;
    lu_solve_vec_in_place(&mut ws.schur, &mut ws.rhs, floor)
        .map_err(|pivot| Error::SingularSchur { pivot, norm })?;
    for (d, v) in delta[..m].iter_mut().zip(&ws.rhs) {
        *d = -v;
    }

    // delta_k = -(A_k + B_k delta_0)
    let (delta0, tail) = delta.split_at_mut(m);
    for k in 1..=r {
        let dk = &mut tail[(k - 1) * m..k * m];
        for (dst, src) in dk.iter_mut().zip(&ws.a[(k - 1) * m..k * m]) {
            *dst = -src;
        }
        matvec_acc(dk, &ws.b[k - 1], delta0, -1.0);
    }
    Ok(tally)
}

/// Forward pass for `B = F_{1:R,1:R}^-1 F_{1:R,0}`; returns the blocks and
/// the number of block products spent.
pub fn forward_b(jac: &BlockJacobian) -> (Vec<Mat>, usize) {
    let r = jac.order();
    let mut blocks: Vec<Mat> = Vec::with_capacity(r);
    let mut products = 0;
    for k in 1..=r {
        let mut bk = jac.block(k, 0).clone();
        for v in bk.data_mut() {
            *v = -*v;
        }
        for i in 1..k {
            mul_acc(&mut bk, jac.block(k, i), &blocks[i - 1], 1.0);
            products += 1;
        }
        blocks.push(bk);
    }
    (blocks, products)
}

/// Forward pass for `A = F_{1:R,1:R}^-1 F_{1:R}`, on the stacked tail
/// residual `(F_1 .. F_R)` of length `R * M`.
pub fn forward_a(jac: &BlockJacobian, tail_residual: &[f64]) -> Vec<f64> {
    let r = jac.order();
    let m = jac.dim();
    assert_eq!(tail_residual.len(), r * m);
    let mut a = vec![0.0; r * m];
    for k in 1..=r {
        let (done, rest) = a.split_at_mut((k - 1) * m);
        let ak = &mut rest[..m];
        for (dst, src) in ak.iter_mut().zip(&tail_residual[(k - 1) * m..k * m]) {
            *dst = -src;
        }
        for i in 1..k {
            matvec_acc(ak, jac.block(k, i), &done[(i - 1) * m..i * m], 1.0);
        }
    }
    a
}

/// Result of [`newton_update`].
#[derive(Debug, Clone)]
pub struct BlockSolve {
    /// Stacked update `(delta_0 .. delta_R)`.
    pub delta: Vec<f64>,
    pub tally: OpTally,
    dim: usize,
}

impl BlockSolve {
    pub fn delta0(&self) -> &[f64] {
        &self.delta[..self.dim]
    }

    pub fn delta_tail(&self) -> &[f64] {
        &self.delta[self.dim..]
    }
}

/// Structured solve of `J delta = -F` for a stacked residual.
pub fn newton_update(jac: &BlockJacobian, residual: &[f64]) -> Result<BlockSolve> {
    let mut ws = BlockWorkspace::new(jac.order(), jac.dim());
    let mut delta = vec![0.0; residual.len()];
    let tally = newton_update_into(jac, residual, &mut ws, &mut delta)?;
    Ok(BlockSolve {
        delta,
        tally,
        dim: jac.dim(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Dense `(R+1)M` square matrix carrying the same entries as the blocks.
    fn assemble_dense(jac: &BlockJacobian) -> Mat {
        let r = jac.order();
        let m = jac.dim();
        let n = (r + 1) * m;
        let mut full = Mat::zeros(n, n);
        for bi in 0..=r {
            for bj in 0..=r {
                let block = jac.block(bi, bj);
                for i in 0..m {
                    for j in 0..m {
                        full[(bi * m + i, bj * m + j)] = block[(i, j)];
                    }
                }
            }
        }
        full
    }

    /// Random instance with the step system's sparsity: row zero dense, each
    /// lower row dense strictly left of the `-I` diagonal. Entries stay small
    /// so the lower-triangular part is safely invertible.
    fn random_jac(rng: &mut ChaCha8Rng, order: usize, dim: usize) -> BlockJacobian {
        let mut jac = BlockJacobian::new(order, dim);
        let fill = |mat: &mut Mat, rng: &mut ChaCha8Rng| {
            for v in mat.data_mut() {
                *v = rng.random_range(-0.4..0.4);
            }
        };
        for l in 1..=order {
            fill(jac.block_mut(0, l), rng);
        }
        for k in 1..=order {
            for i in 0..k {
                fill(jac.block_mut(k, i), rng);
            }
        }
        jac
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn lu_solves_known_system() {
        let a = Mat::from_vec(3, 3, vec![2.0, 1.0, -1.0, -3.0, -1.0, 2.0, -2.0, 1.0, 2.0]);
        let rhs = Mat::from_vec(3, 1, vec![8.0, -11.0, -3.0]);
        let x = lu_solve(&a, &rhs).unwrap();
        // Classic instance with solution (2, 3, -1).
        assert!((x[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((x[(1, 0)] - 3.0).abs() < 1e-12);
        assert!((x[(2, 0)] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn lu_handles_multiple_columns() {
        let a = Mat::from_vec(2, 2, vec![4.0, 3.0, 6.0, 3.0]);
        let rhs = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let inv = lu_solve(&a, &rhs).unwrap();
        let prod = mat_mul(&a, &inv);
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((prod[(i, j)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lu_rejects_singular() {
        let a = Mat::from_vec(2, 2, vec![1.0, 2.0, 2.0, 4.0]);
        let rhs = Mat::from_vec(2, 1, vec![1.0, 1.0]);
        match lu_solve(&a, &rhs) {
            Err(Error::SingularMatrix { .. }) => {}
            other => panic!("expected singular matrix, got {other:?}"),
        }
    }

    #[test]
    fn forward_b_multiplies_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(order, dim) in &[(1usize, 2usize), (3, 1), (4, 3), (6, 2)] {
            let jac = random_jac(&mut rng, order, dim);
            let (b, products) = forward_b(&jac);
            assert_eq!(products, (order * order - order) / 2);
            // Row k of F_{1:R,1:R} B must reproduce F_k0.
            for k in 1..=order {
                let mut acc = Mat::zeros(dim, dim);
                for i in 1..=order {
                    mul_acc(&mut acc, jac.block(k, i), &b[i - 1], 1.0);
                }
                let target = jac.block(k, 0);
                let mut worst = 0.0f64;
                for i in 0..dim {
                    for j in 0..dim {
                        worst = worst.max((acc[(i, j)] - target[(i, j)]).abs());
                    }
                }
                assert!(worst < 1e-12, "order {order} dim {dim} row {k}: {worst:e}");
            }
        }
    }

    #[test]
    fn forward_a_multiplies_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for &(order, dim) in &[(2usize, 2usize), (5, 3)] {
            let jac = random_jac(&mut rng, order, dim);
            let tail: Vec<f64> = (0..order * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = forward_a(&jac, &tail);
            for k in 1..=order {
                let mut acc = vec![0.0; dim];
                for i in 1..=order {
                    matvec_acc(&mut acc, jac.block(k, i), &a[(i - 1) * dim..i * dim], 1.0);
                }
                let diff = max_abs_diff(&acc, &tail[(k - 1) * dim..k * dim]);
                assert!(diff < 1e-12, "order {order} dim {dim} row {k}: {diff:e}");
            }
        }
    }

    #[test]
    fn update_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for trial in 0..40 {
            let order = rng.random_range(1..=6);
            let dim = rng.random_range(1..=4);
            let jac = random_jac(&mut rng, order, dim);
            let n = (order + 1) * dim;
            let residual: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();

            let solve = newton_update(&jac, &residual).unwrap();

            let dense = assemble_dense(&jac);
            let mut rhs = Mat::zeros(n, 1);
            for i in 0..n {
                rhs[(i, 0)] = -residual[i];
            }
            let expect = lu_solve(&dense, &rhs).unwrap();
            let expect: Vec<f64> = (0..n).map(|i| expect[(i, 0)]).collect();

            let scale = expect.iter().fold(1.0f64, |m, x| m.max(x.abs()));
            let diff = max_abs_diff(&solve.delta, &expect);
            assert!(
                diff < 1e-10 * scale,
                "trial {trial} order {order} dim {dim}: {diff:e} vs scale {scale:e}"
            );
        }
    }

    #[test]
    fn update_residual_check() {
        // J delta + F = 0 directly, independent of the dense solver.
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let jac = random_jac(&mut rng, 5, 3);
        let n = 6 * 3;
        let residual: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let solve = newton_update(&jac, &residual).unwrap();
        let dense = assemble_dense(&jac);
        let mut back = residual.clone();
        matvec_acc(&mut back, &dense, &solve.delta, 1.0);
        let worst = back.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(worst < 1e-12, "{worst:e}");
    }

    #[test]
    fn tally_matches_op_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for order in 1..=6 {
            let jac = random_jac(&mut rng, order, 2);
            let residual = vec![0.25; (order + 1) * 2];
            let solve = newton_update(&jac, &residual).unwrap();
            assert_eq!(solve.tally, op_count(order, 2));
        }
        assert_eq!(
            op_count(4, 3),
            OpTally {
                forward_b_products: 6,
                schur_products: 4,
                lu_factorizations: 1
            }
        );
    }

    #[test]
    fn decoupled_top_row_gives_direct_delta0() {
        // With F_0l = 0 the Schur complement is the identity, so
        // delta_0 = -F_0 exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut jac = random_jac(&mut rng, 3, 2);
        for l in 1..=3 {
            jac.block_mut(0, l).fill(0.0);
        }
        let residual: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let solve = newton_update(&jac, &residual).unwrap();
        for i in 0..2 {
            assert!((solve.delta0()[i] + residual[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn singular_schur_is_reported() {
        // Scalar blocks, order 1: B_1 = -F_10, S = F_00 + F_01 F_10.
        // Choosing F_01 F_10 = -1 zeroes it out.
        let mut jac = BlockJacobian::new(1, 1);
        jac.block_mut(1, 0)[(0, 0)] = 2.0;
        jac.block_mut(0, 1)[(0, 0)] = -0.5;
        match newton_update(&jac, &[0.1, 0.2]) {
            Err(Error::SingularSchur { .. }) => {}
            other => panic!("expected singular Schur complement, got {other:?}"),
        }
    }

    #[test]
    fn block_solve_split_accessors() {
        let jac = BlockJacobian::new(2, 3);
        let residual = vec![1.0; 9];
        let solve = newton_update(&jac, &residual).unwrap();
        assert_eq!(solve.delta0().len(), 3);
        assert_eq!(solve.delta_tail().len(), 6);
        assert_eq!(
            [solve.delta0(), solve.delta_tail()].concat(),
            solve.delta
        );
    }

    #[test]
    fn monitor_converges_at_tolerance() {
        let mut mon = NewtonMonitor::new(NewtonConfig::default(), 2.0);
        assert_eq!(mon.assess(1.0), NewtonFlow::Continue);
        assert_eq!(mon.assess(1e-5), NewtonFlow::Continue);
        assert_eq!(mon.assess(1e-14), NewtonFlow::Converged);
    }

    #[test]
    fn monitor_accepts_stall_at_rounding_floor() {
        let mut mon = NewtonMonitor::new(NewtonConfig::default(), 1.0);
        assert_eq!(mon.assess(1e-3), NewtonFlow::Continue);
        assert_eq!(mon.assess(1e-8), NewtonFlow::Continue);
        // Two consecutive stalled iterations just above tolerance but inside
        // the floor band: accepted on the second one.
        assert_eq!(mon.assess(4e-12), NewtonFlow::Continue);
        assert_eq!(mon.assess(3.9e-12), NewtonFlow::Continue);
        assert_eq!(mon.assess(3.8e-12), NewtonFlow::Converged);
    }

    #[test]
    fn monitor_rejects_stall_above_floor_band() {
        let mut mon = NewtonMonitor::new(NewtonConfig::default(), 1.0);
        assert_eq!(mon.assess(1e-2), NewtonFlow::Continue);
        assert_eq!(mon.assess(9e-3), NewtonFlow::Continue);
        assert_eq!(mon.assess(8e-3), NewtonFlow::Continue);
        assert_eq!(mon.assess(7.5e-3), NewtonFlow::Continue);
    }

    #[test]
    fn monitor_flags_divergence_streak() {
        let mut mon = NewtonMonitor::new(NewtonConfig::default(), 1.0);
        assert_eq!(mon.assess(1.0), NewtonFlow::Continue);
        assert_eq!(mon.assess(2.0), NewtonFlow::Continue);
        assert_eq!(mon.assess(4.0), NewtonFlow::Continue);
        assert_eq!(mon.assess(8.0), NewtonFlow::Continue);
        assert_eq!(mon.assess(16.0), NewtonFlow::Diverged);
    }

    #[test]
    fn monitor_flags_non_finite_residual() {
        let mut mon = NewtonMonitor::new(NewtonConfig::default(), 1.0);
        assert_eq!(mon.assess(f64::NAN), NewtonFlow::Diverged);
    }

    proptest! {
        #[test]
        fn lu_round_trips_diagonally_dominant(
            seed in 0u64..512,
            n in 1usize..6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut a = Mat::zeros(n, n);
            for i in 0..n {
                let mut row_sum = 0.0;
                for j in 0..n {
                    if i != j {
                        let v = rng.random_range(-1.0..1.0);
                        a[(i, j)] = v;
                        row_sum += f64::abs(v);
                    }
                }
                a[(i, i)] = row_sum + rng.random_range(0.5..2.0);
            }
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut rhs = Mat::zeros(n, 1);
            for i in 0..n {
                rhs[(i, 0)] = a.data()[i * n..(i + 1) * n]
                    .iter()
                    .zip(&x)
                    .map(|(aij, xj)| aij * xj)
                    .sum();
            }
            let got = lu_solve(&a, &rhs).unwrap();
            for i in 0..n {
                prop_assert!((got[(i, 0)] - x[i]).abs() < 1e-8 * (1.0 + x[i].abs()));
            }
        }

        #[test]
        fn structured_and_dense_updates_agree(
            seed in 0u64..256,
            order in 1usize..5,
            dim in 1usize..4,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let jac = random_jac(&mut rng, order, dim);
            let n = (order + 1) * dim;
            let residual: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let solve = newton_update(&jac, &residual).unwrap();
            let dense = assemble_dense(&jac);
            let mut back = residual.clone();
            matvec_acc(&mut back, &dense, &solve.delta, 1.0);
            for v in &back {
                prop_assert!(v.abs() < 1e-10);
            }
        }
    }
}
