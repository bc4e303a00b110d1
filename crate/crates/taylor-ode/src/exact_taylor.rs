//! Exact Taylor steppers for scalar problems.
//!
//! "Exact" means the solution derivatives entering the Taylor polynomial are
//! the true total derivatives of `f`, assembled through the Faa di Bruno sums
//! in [`crate::fdb`]. Two cases are covered:
//!
//! * linear problems `u' = lambda u + g(t)`, where both the explicit and the
//!   implicit step collapse to closed forms in the stability polynomial
//!   `Q_R(x) = sum_{k<=R} x^k / k!` and no iteration happens at all;
//! * autonomous nonlinear scalar problems, where the implicit step equation
//!   `u_n = T_R(u_{n+1}, -h)` is solved as an `(R+1)`-dimensional Newton
//!   system in the unknowns `z_k = u^(k)(t_{n+1})`.
//!
//! The implicit amplification factor on `u' = lambda u` is `1 / Q_R(-h
//! lambda)`, which for real `lambda < 0` has magnitude below one at every
//! step size.

use std::sync::Arc;

use num_complex::Complex64;

use crate::block_newton::{
    lu_solve_vec_in_place, Mat, NewtonConfig, NewtonFlow, NewtonMonitor, NewtonStats,
};
use crate::error::{Error, Result};
use crate::fdb::{fdb_derivative, fdb_partials};
use crate::util::factorial;

/// `Q_j(x) = sum_{k=0}^j x^k / k!` in Horner form.
pub fn q_eval(j: usize, x: f64) -> f64 {
    let mut acc = 1.0 / factorial(j);
    for k in (0..j).rev() {
        acc = acc * x + 1.0 / factorial(k);
    }
    acc
}

/// [`q_eval`] over the complex plane, for amplification factors of
/// oscillatory modes.
pub fn q_eval_complex(j: usize, z: Complex64) -> Complex64 {
    let mut acc = Complex64::new(1.0 / factorial(j), 0.0);
    for k in (0..j).rev() {
        acc = acc * z + 1.0 / factorial(k);
    }
    acc
}

/// `u' = lambda u + g(t)`, with `g` supplied through its derivative family
/// `g_derivs(j, t) = g^(j)(t)`.
#[derive(Clone)]
pub struct LinearScalarProblem {
    lambda: f64,
    forcing: Option<Arc<dyn Fn(usize, f64) -> f64 + Send + Sync>>,
}

impl LinearScalarProblem {
    pub fn homogeneous(lambda: f64) -> Self {
        LinearScalarProblem {
            lambda,
            forcing: None,
        }
    }

    /// The closed-form steppers expand the forced solution around
    /// `lambda != 0`; a vanishing lambda is rejected rather than special
    /// cased.
    pub fn forced(
        lambda: f64,
        g_derivs: Arc<dyn Fn(usize, f64) -> f64 + Send + Sync>,
    ) -> Result<Self> {
        if lambda == 0.0 {
            return Err(Error::ZeroLambdaForcing);
        }
        Ok(LinearScalarProblem {
            lambda,
            forcing: Some(g_derivs),
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `sum_{k=1}^R h^k/k! sum_{i=0}^{k-1} lambda^i g^(k-1-i)(t)`, the
    /// forcing part of the Taylor polynomial. `h` carries its sign.
    fn forcing_sum(&self, order: usize, h: f64, t: f64) -> f64 {
        let Some(g) = &self.forcing else {
            return 0.0;
        };
        let mut total = 0.0;
        for k in 1..=order {
            let mut inner = 0.0;
            let mut lam_pow = 1.0;
            for i in 0..k {
                inner += lam_pow * g(k - 1 - i, t);
                lam_pow *= self.lambda;
            }
            total += h.powi(k as i32) / factorial(k) * inner;
        }
        total
    }
}

/// Explicit Taylor step: derivatives taken at `t_n`, evaluated at `t_n + h`.
pub fn linear_et_step(p: &LinearScalarProblem, order: usize, h: f64, t_n: f64, u_n: f64) -> f64 {
    q_eval(order, h * p.lambda) * u_n + p.forcing_sum(order, h, t_n)
}

/// Implicit Taylor step: derivatives taken at `t_{n+1} = t_n + h`, so the
/// linear step equation inverts in closed form.
pub fn linear_it_step(
    p: &LinearScalarProblem,
    order: usize,
    h: f64,
    t_n: f64,
    u_n: f64,
) -> Result<f64> {
    let arg = -h * p.lambda;
    let divisor = q_eval(order, arg);
    if divisor.abs() < 1e-14 {
        return Err(Error::SingularAmplification {
            order,
            arg,
            magnitude: divisor.abs(),
        });
    }
    let t_next = t_n + h;
    Ok((u_n - p.forcing_sum(order, -h, t_next)) / divisor)
}

/// Derivatives `u^(0..=order)` at a state `u` of the autonomous problem
/// `u' = f(u)`, by the forward recurrence `u^(r+1) = d^r/dt^r f(u(t))`.
pub fn forward_jet<F>(f_derivs: &F, order: usize, u: f64) -> Result<Vec<f64>>
where
    F: Fn(usize, f64) -> f64 + ?Sized,
{
    let mut jet = Vec::with_capacity(order + 1);
    jet.push(u);
    if order == 0 {
        return Ok(jet);
    }
    jet.push(f_derivs(0, u));
    for r in 1..order {
        let next = fdb_derivative(r, f_derivs, &jet)?;
        jet.push(next);
    }
    Ok(jet)
}

/// Explicit exact Taylor step for an autonomous scalar problem.
pub fn et_scalar_step<F>(f_derivs: &F, order: usize, h: f64, u_n: f64) -> Result<f64>
where
    F: Fn(usize, f64) -> f64 + ?Sized,
{
    let jet = forward_jet(f_derivs, order, u_n)?;
    let mut acc = jet[order] / factorial(order);
    for k in (0..order).rev() {
        acc = acc * h + jet[k] / factorial(k);
    }
    Ok(acc)
}

/// Residual of the implicit step system at the iterate `z`, written into
/// `out` (both of length `order + 1`). Row zero is the step equation, row
/// one the definition of the first derivative, and row `r + 1` the total
/// derivative recurrence at order `r`:
///
/// ```text
/// F_0     = sum_k (-h)^k z_k / k! - u_n
/// F_1     = f(z_0) - z_1
/// F_{r+1} = (d^r/dt^r f)(z_0 .. z_r) - z_{r+1}
/// ```
pub fn scalar_it_residual<F>(
    f_derivs: &F,
    order: usize,
    h: f64,
    u_n: f64,
    z: &[f64],
    out: &mut [f64],
) -> Result<()>
where
    F: Fn(usize, f64) -> f64 + ?Sized,
{
    assert_eq!(z.len(), order + 1);
    assert_eq!(out.len(), order + 1);
    let mut acc = z[order] / factorial(order);
    for k in (0..order).rev() {
        acc = acc * (-h) + z[k] / factorial(k);
    }
    out[0] = acc - u_n;
    out[1] = f_derivs(0, z[0]) - z[1];
    for r in 1..order {
        out[r + 1] = fdb_derivative(r, f_derivs, &z[..=r])? - z[r + 1];
    }
    Ok(())
}

/// Jacobian of [`scalar_it_residual`] with respect to `z`, written into a
/// square matrix of side `order + 1`.
pub fn scalar_it_jacobian<F>(f_derivs: &F, order: usize, h: f64, z: &[f64], jac: &mut Mat) -> Result<()>
where
    F: Fn(usize, f64) -> f64 + ?Sized,
{
    assert_eq!(z.len(), order + 1);
    assert_eq!((jac.rows(), jac.cols()), (order + 1, order + 1));
    jac.fill(0.0);
    for k in 0..=order {
        jac[(0, k)] = (-h).powi(k as i32) / factorial(k);
    }
    jac[(1, 0)] = f_derivs(1, z[0]);
    jac[(1, 1)] = -1.0;
    for r in 1..order {
        let partials = fdb_partials(r, f_derivs, &z[..=r])?;
        for (j, p) in partials.iter().enumerate() {
            jac[(r + 1, j)] = *p;
        }
        jac[(r + 1, r + 1)] = -1.0;
    }
    Ok(())
}

/// Newton solver for the implicit exact Taylor step on autonomous scalar
/// problems. Buffers are owned so repeated stepping does not allocate.
pub struct ScalarItSolver {
    order: usize,
    cfg: NewtonConfig,
    z: Vec<f64>,
    residual: Vec<f64>,
    rhs: Vec<f64>,
    jac: Mat,
    work: Mat,
}

impl ScalarItSolver {
    pub fn new(order: usize, cfg: NewtonConfig) -> Result<Self> {
        if order == 0 || order > crate::fdb::MAX_ORDER {
            return Err(Error::InvalidStage {
                k: order,
                order,
                max: crate::fdb::MAX_ORDER,
            });
        }
        Ok(ScalarItSolver {
            order,
            cfg,
            z: vec![0.0; order + 1],
            residual: vec![0.0; order + 1],
            rhs: vec![0.0; order + 1],
            jac: Mat::zeros(order + 1, order + 1),
            work: Mat::zeros(order + 1, order + 1),
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// One implicit step from `u_n`; returns `u_{n+1}` and the iteration
    /// record. The initial iterate is the forward jet at `u_n` with the
    /// explicit Taylor value substituted for `z_0`.
    pub fn step<F>(&mut self, f_derivs: &F, h: f64, u_n: f64) -> Result<(f64, NewtonStats)>
    where
        F: Fn(usize, f64) -> f64 + ?Sized,
    {
        let order = self.order;
        let jet = forward_jet(f_derivs, order, u_n)?;
        self.z.copy_from_slice(&jet);
        let mut predictor = jet[order] / factorial(order);
        for k in (0..order).rev() {
            predictor = predictor * h + jet[k] / factorial(k);
        }
        self.z[0] = predictor;

        let scale = 1.0 + u_n.abs();
        let mut monitor = NewtonMonitor::new(self.cfg, scale);
        let mut iterations = 0;
        loop {
            scalar_it_residual(f_derivs, order, h, u_n, &self.z, &mut self.residual)?;
            let res = crate::util::max_norm(&self.residual);
            match monitor.assess(res) {
                NewtonFlow::Converged => {
                    return Ok((
                        self.z[0],
                        NewtonStats {
                            iterations,
                            final_residual: res,
                            converged: true,
                        },
                    ))
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
            scalar_it_jacobian(f_derivs, order, h, &self.z, &mut self.jac)?;
            self.work.copy_from(&self.jac);
            for (dst, src) in self.rhs.iter_mut().zip(&self.residual) {
                *dst = -src;
            }
            lu_solve_vec_in_place(&mut self.work, &mut self.rhs, 1e-300)
                .map_err(|pivot| Error::SingularMatrix { pivot })?;
            for (zi, di) in self.z.iter_mut().zip(&self.rhs) {
                *zi += di;
            }
            iterations += 1;
        }
    }
}
