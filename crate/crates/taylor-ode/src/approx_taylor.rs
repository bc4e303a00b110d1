//! Approximate Taylor steppers for autonomous systems.
//!
//! The exact Taylor method needs total derivatives of `f`, which for systems
//! means tensor contractions of higher Jacobians. The approximate variants
//! sidestep that: every solution derivative beyond the first is recovered by
//! applying a centered difference stencil to `f` along the solution's own
//! Taylor polynomial. Writing `v_k` for the approximation of `u^(k)(t_n)`,
//! the explicit recurrence is
//!
//! ```text
//! v_0 = u_n,  v_1 = f(u_n)
//! v_{k+1} = h^-k sum_j beta_j f( sum_{l=0}^k (jh)^l / l! v_l ),
//! ```
//!
//! with the stencil for stage `k` chosen as derivative order `p = k` and
//! accuracy `2q >= R - k`, so every `v_k` is accurate enough for an order-R
//! step `u_{n+1} = sum h^k/k! v_k`.
//!
//! The implicit variant expands around `t_{n+1}` with step `-h`. In the
//! scaled unknowns `z_0 = u_{n+1}`, `z_k = (-h)^{k-1} v_k` the step system
//! becomes
//!
//! ```text
//! F_0 = z_0 - h sum_{k=1}^R z_k / k! - u_n
//! F_1 = f(z_0) - z_1
//! F_k = sum_j beta_j^{(k-1)} f( z_0 - h sum_{l=1}^{k-1} j^l / l! z_l ) - z_k
//! ```
//!
//! whose Jacobian has exactly the block structure that
//! [`crate::block_newton`] eliminates: only `f` values and first Jacobians
//! of `f` ever appear.

use std::sync::Arc;

use crate::block_newton::{
    newton_update_into, BlockJacobian, BlockWorkspace, Mat, NewtonConfig, NewtonFlow,
    NewtonMonitor, NewtonStats,
};
use crate::error::{Error, Result};
use crate::stencil::stencil_for;
use crate::util::{all_finite, factorial, max_norm, MAX_FACTORIAL};

/// An autonomous system `u' = f(u)` with an analytic Jacobian. Forcing in
/// time is handled by adjoining t as a state component before construction.
#[derive(Clone)]
pub struct OdeProblem {
    dim: usize,
    f: Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>,
    jac: Arc<dyn Fn(&[f64], &mut Mat) + Send + Sync>,
}

impl OdeProblem {
    pub fn new(
        dim: usize,
        f: Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>,
        jac: Arc<dyn Fn(&[f64], &mut Mat) + Send + Sync>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidProblem("state dimension is zero".into()));
        }
        Ok(OdeProblem { dim, f, jac })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval_f(&self, u: &[f64], out: &mut [f64]) {
        debug_assert_eq!(u.len(), self.dim);
        debug_assert_eq!(out.len(), self.dim);
        (self.f)(u, out);
    }

    pub fn eval_jac(&self, u: &[f64], out: &mut Mat) {
        debug_assert_eq!(u.len(), self.dim);
        debug_assert_eq!((out.rows(), out.cols()), (self.dim, self.dim));
        (self.jac)(u, out);
    }
}

/// Approximate solution derivatives `v_0 .. v_order` at one point, stored as
/// contiguous blocks of the state dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct TaylorJet {
    dim: usize,
    coeffs: Vec<f64>,
}

impl TaylorJet {
    pub fn new(order: usize, dim: usize) -> Self {
        TaylorJet {
            dim,
            coeffs: vec![0.0; (order + 1) * dim],
        }
    }

    pub fn order(&self) -> usize {
        self.coeffs.len() / self.dim - 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coeff(&self, k: usize) -> &[f64] {
        &self.coeffs[k * self.dim..(k + 1) * self.dim]
    }

    pub fn coeff_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.coeffs[k * self.dim..(k + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.coeffs)
    }

    /// Taylor polynomial value `sum_k s^k/k! v_k`, Horner form per component.
    pub fn evaluate_into(&self, s: f64, out: &mut [f64]) {
        assert_eq!(out.len(), self.dim);
        let order = self.order();
        for i in 0..self.dim {
            let mut acc = self.coeff(order)[i] / factorial(order);
            for k in (0..order).rev() {
                acc = acc * s + self.coeff(k)[i] / factorial(k);
            }
            out[i] = acc;
        }
    }

    pub fn evaluate(&self, s: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.evaluate_into(s, &mut out);
        out
    }
}

/// Shared evaluation buffers for the stage recurrences.
pub(crate) struct AitScratch {
    arg: Vec<f64>,
    fv: Vec<f64>,
    acc: Vec<f64>,
    jmat: Mat,
}

impl AitScratch {
    pub(crate) fn new(dim: usize) -> Self {
        AitScratch {
            arg: vec![0.0; dim],
            fv: vec![0.0; dim],
            acc: vec![0.0; dim],
            jmat: Mat::zeros(dim, dim),
        }
    }
}

fn check_order(order: usize) -> Result<()> {
    if order == 0 || order > MAX_FACTORIAL {
        return Err(Error::InvalidStage {
            k: order,
            order,
            max: MAX_FACTORIAL,
        });
    }
    Ok(())
}

pub(crate) fn aet_derivatives_into(
    problem: &OdeProblem,
    order: usize,
    h: f64,
    u: &[f64],
    jet: &mut TaylorJet,
    scratch: &mut AitScratch,
) -> Result<()> {
    check_order(order)?;
    if h == 0.0 {
        return Err(Error::Config("step size must be nonzero".into()));
    }
    let m = problem.dim();
    assert_eq!(u.len(), m);
    assert_eq!((jet.order(), jet.dim()), (order, m));

    jet.coeff_mut(0).copy_from_slice(u);
    problem.eval_f(u, &mut scratch.fv);
    jet.coeff_mut(1).copy_from_slice(&scratch.fv);
    if !all_finite(jet.coeff(1)) {
        return Err(Error::Overflow {
            context: "explicit stage derivative",
        });
    }

    for k in 1..order {
        let st = stencil_for(k, order)?;
        let (head, tail) = jet.coeffs.split_at_mut((k + 1) * m);
        let vk1 = &mut tail[..m];
        scratch.acc.fill(0.0);
        for (j, beta) in st.iter() {
            if beta == 0.0 {
                continue;
            }
            // arg = sum_{l=0}^k (jh)^l / l! v_l, Horner in x = jh.
            let x = j as f64 * h;
            for i in 0..m {
                let mut a = head[k * m + i] / factorial(k);
                for l in (0..k).rev() {
                    a = a * x + head[l * m + i] / factorial(l);
                }
                scratch.arg[i] = a;
            }
            problem.eval_f(&scratch.arg, &mut scratch.fv);
            for (acc, fv) in scratch.acc.iter_mut().zip(&scratch.fv) {
                *acc += beta * fv;
            }
        }
        let scale = h.powi(-(k as i32));
        for (dst, acc) in vk1.iter_mut().zip(&scratch.acc) {
            *dst = acc * scale;
        }
        if !all_finite(vk1) {
            return Err(Error::Overflow {
                context: "explicit stage derivative",
            });
        }
    }
    Ok(())
}

/// Approximate derivatives at `u` for an order-`order` expansion with step
/// `h`. Costs one `f` evaluation plus one per nonzero stencil weight and
/// stage; no Jacobians.
pub fn aet_derivatives(problem: &OdeProblem, order: usize, h: f64, u: &[f64]) -> Result<TaylorJet> {
    let mut jet = TaylorJet::new(order, problem.dim());
    let mut scratch = AitScratch::new(problem.dim());
    aet_derivatives_into(problem, order, h, u, &mut jet, &mut scratch)?;
    Ok(jet)
}

/// One explicit approximate Taylor step.
pub fn aet_step(problem: &OdeProblem, order: usize, h: f64, u: &[f64]) -> Result<Vec<f64>> {
    let jet = aet_derivatives(problem, order, h, u)?;
    let next = jet.evaluate(h);
    if !all_finite(&next) {
        return Err(Error::Overflow {
            context: "explicit step",
        });
    }
    Ok(next)
}

pub(crate) fn ait_residual_scratch(
    problem: &OdeProblem,
    order: usize,
    h: f64,
    u_n: &[f64],
    z: &[f64],
    out: &mut [f64],
    scratch: &mut AitScratch,
) -> Result<()> {
    check_order(order)?;
    let m = problem.dim();
    assert_eq!(u_n.len(), m);
    assert_eq!(z.len(), (order + 1) * m);
    assert_eq!(out.len(), (order + 1) * m);

    // F_0 = z_0 - h sum_k z_k/k! - u_n
    for i in 0..m {
        let mut s = 0.0;
        for k in 1..=order {
            s += z[k * m + i] / factorial(k);
        }
        out[i] = z[i] - h * s - u_n[i];
    }

    // F_1 = f(z_0) - z_1
    problem.eval_f(&z[..m], &mut scratch.fv);
    for i in 0..m {
        out[m + i] = scratch.fv[i] - z[m + i];
    }

    // F_k = sum_j beta_j f(arg_kj) - z_k, stencil of stage k-1.
    for k in 2..=order {
        let st = stencil_for(k - 1, order)?;
        let row = &mut out[k * m..(k + 1) * m];
        for (dst, zk) in row.iter_mut().zip(&z[k * m..(k + 1) * m]) {
            *dst = -zk;
        }
        for (j, beta) in st.iter() {
            if beta == 0.0 {
                continue;
            }
            fill_arg(&mut scratch.arg, z, m, k, h, j as f64);
            problem.eval_f(&scratch.arg, &mut scratch.fv);
            for (dst, fv) in row.iter_mut().zip(&scratch.fv) {
                *dst += beta * fv;
            }
        }
    }
    Ok(())
}

/// `arg = z_0 - h sum_{l=1}^{k-1} j^l / l! z_l`, Horner in j.
fn fill_arg(arg: &mut [f64], z: &[f64], m: usize, k: usize, h: f64, j: f64) {
    for i in 0..m {
        let mut s = 0.0;
        for l in (1..k).rev() {
            s = (s + z[l * m + i] / factorial(l)) * j;
        }
        arg[i] = z[i] - h * s;
    }
}

/// Residual of the implicit step system at the iterate `z` (stacked
/// `(order+1) * dim`), written into `out`.
pub fn ait_residual(
    problem: &OdeProblem,
    order: usize,
    h: f64,
    u_n: &[f64],
    z: &[f64],
    out: &mut [f64],
) -> Result<()> {
    let mut scratch = AitScratch::new(problem.dim());
    ait_residual_scratch(problem, order, h, u_n, z, out, &mut scratch)
}

pub(crate) fn ait_jacobian_scratch(
    problem: &OdeProblem,
    order: usize,
    h: f64,
    z: &[f64],
    jac: &mut BlockJacobian,
    scratch: &mut AitScratch,
) -> Result<()> {
    check_order(order)?;
    let m = problem.dim();
    assert_eq!((jac.order(), jac.dim()), (order, m));
    assert_eq!(z.len(), (order + 1) * m);

    // Row zero: F_00 = I stays from construction, F_0l = -(h/l!) I.
    for l in 1..=order {
        jac.block_mut(0, l).set_scaled_identity(-h / factorial(l));
    }

    // Row one: F_10 = J_f(z_0), diagonal -I stays.
    problem.eval_jac(&z[..m], &mut scratch.jmat);
    jac.block_mut(1, 0).copy_from(&scratch.jmat);

    // Row k: F_k0 = sum_j beta_j J_f(arg_kj),
    //        F_kl = -h sum_j beta_j (j^l / l!) J_f(arg_kj).
    for k in 2..=order {
        let st = stencil_for(k - 1, order)?;
        jac.block_mut(k, 0).fill(0.0);
        for l in 1..k {
            jac.block_mut(k, l).fill(0.0);
        }
        for (j, beta) in st.iter() {
            if beta == 0.0 {
                continue;
            }
            fill_arg(&mut scratch.arg, z, m, k, h, j as f64);
            problem.eval_jac(&scratch.arg, &mut scratch.jmat);
            let col0 = jac.block_mut(k, 0);
            for (dst, src) in col0.data_mut().iter_mut().zip(scratch.jmat.data()) {
                *dst += beta * src;
            }
            let mut jpow = 1.0;
            for l in 1..k {
                jpow *= j as f64;
                let w = -h * beta * jpow / factorial(l);
                let block = jac.block_mut(k, l);
                for (dst, src) in block.data_mut().iter_mut().zip(scratch.jmat.data()) {
                    *dst += w * src;
                }
            }
        }
    }
    Ok(())
}

/// Jacobian of [`ait_residual`] with respect to `z`, assembled into the
/// block structure. Evaluates `J_f` once per nonzero stencil weight and row.
pub fn ait_jacobian(
    problem: &OdeProblem,
    order: usize,
    h: f64,
    z: &[f64],
    jac: &mut BlockJacobian,
) -> Result<()> {
    let mut scratch = AitScratch::new(problem.dim());
    ait_jacobian_scratch(problem, order, h, z, jac, &mut scratch)
}

/// Newton solver for the implicit approximate Taylor step. Owns every buffer
/// the iteration touches, so stepping does not allocate.
pub struct AitSolver {
    order: usize,
    cfg: NewtonConfig,
    jac: BlockJacobian,
    ws: BlockWorkspace,
    jet: TaylorJet,
    scratch: AitScratch,
    z: Vec<f64>,
    residual: Vec<f64>,
    delta: Vec<f64>,
}

impl AitSolver {
    pub fn new(order: usize, dim: usize, cfg: NewtonConfig) -> Result<Self> {
        check_order(order)?;
        if dim == 0 {
            return Err(Error::InvalidProblem("state dimension is zero".into()));
        }
        Ok(AitSolver {
            order,
            cfg,
            jac: BlockJacobian::new(order, dim),
            ws: BlockWorkspace::new(order, dim),
            jet: TaylorJet::new(order, dim),
            scratch: AitScratch::new(dim),
            z: vec![0.0; (order + 1) * dim],
            residual: vec![0.0; (order + 1) * dim],
            delta: vec![0.0; (order + 1) * dim],
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.jet.dim()
    }

    /// One implicit step from `u_n` into `u_next`.
    ///
    /// The initial iterate comes from the explicit derivatives at `u_n` taken
    /// with step `-h` (the expansion the implicit step inverts), rescaled to
    /// the z variables; its `z_0` slot takes the explicit predictor. If that
    /// jet is not finite the start degrades to `(u_n, f(u_n), 0, ..)`.
    pub fn step_into(
        &mut self,
        problem: &OdeProblem,
        h: f64,
        u_n: &[f64],
        u_next: &mut [f64],
    ) -> Result<NewtonStats> {
        let order = self.order;
        let m = self.dim();
        assert_eq!(problem.dim(), m);
        assert_eq!(u_n.len(), m);
        assert_eq!(u_next.len(), m);

        let warm = aet_derivatives_into(problem, order, -h, u_n, &mut self.jet, &mut self.scratch);
        match warm {
            Ok(()) if self.jet.is_finite() => {
                self.jet.evaluate_into(h, &mut self.z[..m]);
                if !all_finite(&self.z[..m]) {
                    self.z[..m].copy_from_slice(u_n);
                }
                let mut pow = 1.0;
                for k in 1..=order {
                    for i in 0..m {
                        self.z[k * m + i] = pow * self.jet.coeff(k)[i];
                    }
                    pow *= -h;
                }
            }
            _ => {
                self.z.fill(0.0);
                self.z[..m].copy_from_slice(u_n);
                problem.eval_f(u_n, &mut self.scratch.fv);
                self.z[m..2 * m].copy_from_slice(&self.scratch.fv);
            }
        }

        let scale = 1.0 + max_norm(u_n);
        let mut monitor = NewtonMonitor::new(self.cfg, scale);
        let mut iterations = 0;
        loop {
            ait_residual_scratch(
                problem,
                order,
                h,
                u_n,
                &self.z,
                &mut self.residual,
                &mut self.scratch,
            )?;
            let res = max_norm(&self.residual);
            match monitor.assess(res) {
                NewtonFlow::Converged => {
                    u_next.copy_from_slice(&self.z[..m]);
                    return Ok(NewtonStats {
                        iterations,
                        final_residual: res,
                        converged: true,
                    });
                }
                NewtonFlow::Diverged => {
                    return Err(Error::NewtonDivergence {
                        iterations,
                        streak: self.cfg.divergence_streak,
                        residual: res,
                        iterate: self.z.clone(),
                    })
                }
                NewtonFlow::Continue => {}
            }
            if iterations >= self.cfg.max_iter {
                return Err(Error::NewtonNonConvergence {
                    iterations,
                    residual: res,
                    tolerance: self.cfg.tol * scale,
                    iterate: self.z.clone(),
                });
            }
            ait_jacobian_scratch(problem, order, h, &self.z, &mut self.jac, &mut self.scratch)?;
            newton_update_into(&self.jac, &self.residual, &mut self.ws, &mut self.delta)?;
            for (zi, di) in self.z.iter_mut().zip(&self.delta) {
                *zi += di;
            }
            iterations += 1;
        }
    }

    pub fn step(&mut self, problem: &OdeProblem, h: f64, u_n: &[f64]) -> Result<(Vec<f64>, NewtonStats)> {
        let mut u_next = vec![0.0; self.dim()];
        let stats = self.step_into(problem, h, u_n, &mut u_next)?;
        Ok((u_next, stats))
    }
}

/// Work per implicit step in the structured elimination, in units of scalar
/// multiply-adds: `((R^2 + R)/2 + 2/3) M^3` from the block products and the
/// Schur factorization, plus `R^2 beta M^2` from assembling the lower rows
/// out of `beta` Jacobian evaluations each.
pub fn cost_model(order: usize, dim: usize, beta: usize) -> f64 {
    let r = order as f64;
    let m = dim as f64;
    let b = beta as f64;
    ((r * r + r) / 2.0 + 2.0 / 3.0) * m * m * m + r * r * b * m * m
}
