//! Built-in test problems and the registration interface.
//!
//! Every problem is carried as an autonomous system (non-autonomous ones
//! adjoin t as the last state component) together with whatever extra views
//! the steppers can exploit: the exact solution when one is known in closed
//! form, the scalar derivative family `f^(m)(u)` for the exact Taylor
//! solver, and a linear scalar view for the closed-form linear steppers.
//!
//! Registration validates what can be validated mechanically: the Jacobian
//! against central differences of `f`, and the exact solution against a
//! high-order difference quotient of itself pushed through `f`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::approx_taylor::OdeProblem;
use crate::block_newton::Mat;
use crate::error::{Error, Result};
use crate::exact_taylor::LinearScalarProblem;
use crate::util::binomial;

/// Scalar linear view of a problem, for the closed-form steppers. `component`
/// picks the matching entry of the exact solution vector.
#[derive(Clone)]
pub struct LinearView {
    pub problem: LinearScalarProblem,
    pub initial: f64,
    pub component: usize,
}

/// A runnable problem: system form, initial state, horizon, optional views.
#[derive(Clone)]
pub struct ProblemSpec {
    name: String,
    system: OdeProblem,
    initial: Vec<f64>,
    final_time: f64,
    exact: Option<Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>>,
    scalar_chain: Option<Arc<dyn Fn(usize, f64) -> f64 + Send + Sync>>,
    linear_view: Option<LinearView>,
}

impl ProblemSpec {
    pub fn new(
        name: impl Into<String>,
        system: OdeProblem,
        initial: Vec<f64>,
        final_time: f64,
    ) -> Result<Self> {
        let name = name.into();
        if initial.len() != system.dim() {
            return Err(Error::InvalidProblem(format!(
                "{name}: initial state has {} entries for dimension {}",
                initial.len(),
                system.dim()
            )));
        }
        if !(final_time > 0.0) {
            return Err(Error::InvalidProblem(format!(
                "{name}: final time must be positive"
            )));
        }
        Ok(ProblemSpec {
            name,
            system,
            initial,
            final_time,
            exact: None,
            scalar_chain: None,
            linear_view: None,
        })
    }

    pub fn with_exact(mut self, exact: Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>) -> Self {
        self.exact = Some(exact);
        self
    }

    pub fn with_scalar_chain(
        mut self,
        chain: Arc<dyn Fn(usize, f64) -> f64 + Send + Sync>,
    ) -> Self {
        self.scalar_chain = Some(chain);
        self
    }

    pub fn with_linear_view(mut self, view: LinearView) -> Self {
        self.linear_view = Some(view);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn system(&self) -> &OdeProblem {
        &self.system
    }

    pub fn dim(&self) -> usize {
        self.system.dim()
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn final_time(&self) -> f64 {
        self.final_time
    }

    /// Same problem, different horizon.
    pub fn with_final_time(mut self, final_time: f64) -> Result<Self> {
        if !(final_time > 0.0) {
            return Err(Error::InvalidProblem(format!(
                "{}: final time must be positive",
                self.name
            )));
        }
        self.final_time = final_time;
        Ok(self)
    }

    pub fn has_exact(&self) -> bool {
        self.exact.is_some()
    }

    /// Exact solution at time t, if the problem carries one.
    pub fn exact_into(&self, t: f64, out: &mut [f64]) -> bool {
        match &self.exact {
            Some(e) => {
                e(t, out);
                true
            }
            None => false,
        }
    }

    pub fn scalar_chain(&self) -> Option<&Arc<dyn Fn(usize, f64) -> f64 + Send + Sync>> {
        self.scalar_chain.as_ref()
    }

    pub fn linear_view(&self) -> Option<&LinearView> {
        self.linear_view.as_ref()
    }

    /// Mechanical consistency checks; run on registration and on the
    /// builtins' own tests.
    pub fn validate(&self) -> Result<()> {
        let m = self.dim();
        let mut fv = vec![0.0; m];
        let mut jac = Mat::zeros(m, m);
        self.system.eval_f(&self.initial, &mut fv);
        if fv.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidProblem(format!(
                "{}: f is not finite at the initial state",
                self.name
            )));
        }

        // Jacobian against central differences at the initial state.
        self.system.eval_jac(&self.initial, &mut jac);
        let mut up = self.initial.clone();
        let mut um = self.initial.clone();
        let mut fp = vec![0.0; m];
        let mut fm = vec![0.0; m];
        for col in 0..m {
            let delta = 1e-6 * (1.0 + self.initial[col].abs());
            up[col] += delta;
            um[col] -= delta;
            self.system.eval_f(&up, &mut fp);
            self.system.eval_f(&um, &mut fm);
            up[col] = self.initial[col];
            um[col] = self.initial[col];
            for row in 0..m {
                let fd = (fp[row] - fm[row]) / (2.0 * delta);
                if (jac[(row, col)] - fd).abs() > 1e-5 * jac[(row, col)].abs().max(1.0) {
                    return Err(Error::InvalidProblem(format!(
                        "{}: jacobian entry ({row},{col}) is {} but differences give {fd}",
                        self.name,
                        jac[(row, col)]
                    )));
                }
            }
        }

        // Exact solution: u(0) must match the initial state, and u'(t) from a
        // fourth-order difference quotient must match f(u(t)).
        if let Some(exact) = &self.exact {
            let mut u0 = vec![0.0; m];
            exact(0.0, &mut u0);
            for i in 0..m {
                if (u0[i] - self.initial[i]).abs() > 1e-10 * (1.0 + self.initial[i].abs()) {
                    return Err(Error::InvalidProblem(format!(
                        "{}: exact(0)[{i}] = {} but initial is {}",
                        self.name, u0[i], self.initial[i]
                    )));
                }
            }
            let ht = 2e-4;
            let mut buf = vec![vec![0.0; m]; 4];
            let mut ut = vec![0.0; m];
            for s in 1..=10 {
                let t = self.final_time * s as f64 / 10.0 - 2.0 * ht;
                exact(t, &mut ut);
                self.system.eval_f(&ut, &mut fv);
                let stamps = [t - 2.0 * ht, t - ht, t + ht, t + 2.0 * ht];
                for (b, ts) in buf.iter_mut().zip(stamps) {
                    exact(ts, b);
                }
                for i in 0..m {
                    let fd =
                        (buf[0][i] - 8.0 * buf[1][i] + 8.0 * buf[2][i] - buf[3][i]) / (12.0 * ht);
                    if (fd - fv[i]).abs() > 1e-6 * (1.0 + fv[i].abs()) {
                        return Err(Error::InvalidProblem(format!(
                            "{}: exact solution violates the equation at t={t}, \
                             component {i}: u' = {fd} vs f = {}",
                            self.name, fv[i]
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

static REGISTRY: Mutex<Option<HashMap<String, ProblemSpec>>> = Mutex::new(None);

/// Validate and store a problem under its name, replacing any previous entry.
pub fn register(spec: ProblemSpec) -> Result<()> {
    spec.validate()?;
    let mut guard = REGISTRY.lock().unwrap();
    guard
        .get_or_insert_with(HashMap::new)
        .insert(spec.name().to_string(), spec);
    Ok(())
}

/// Fetch a problem by name: registered ones first, then the builtins.
pub fn lookup(name: &str) -> Result<ProblemSpec> {
    if let Some(spec) = REGISTRY
        .lock()
        .unwrap()
        .as_ref()
        .and_then(|m| m.get(name).cloned())
    {
        return Ok(spec);
    }
    match name {
        "example1" => example1(),
        "example2" => example2(),
        "example3" => example3(),
        "example4" => example4(),
        _ => Err(Error::UnknownProblem(name.to_string())),
    }
}

pub fn builtin_names() -> [&'static str; 4] {
    ["example1", "example2", "example3", "example4"]
}

/// Derivative family of `a sin 2t + b cos 2t`; each differentiation maps
/// `(a, b)` to `(-2b, 2a)`.
fn trig_forcing_derivs(j: usize, t: f64, a0: f64, b0: f64) -> f64 {
    let (mut a, mut b) = (a0, b0);
    for _ in 0..j {
        let (na, nb) = (-2.0 * b, 2.0 * a);
        a = na;
        b = nb;
    }
    a * (2.0 * t).sin() + b * (2.0 * t).cos()
}

/// Forced linear scalar equation `u' = -5u + 5 sin 2t + 2 cos 2t`, `u(0)=0`,
/// with exact solution `sin 2t`. The system form adjoins t, so its exact
/// solution is `(sin 2t, t)`.
pub fn example1() -> Result<ProblemSpec> {
    let system = OdeProblem::new(
        2,
        Arc::new(|u: &[f64], out: &mut [f64]| {
            let t = u[1];
            out[0] = -5.0 * u[0] + 5.0 * (2.0 * t).sin() + 2.0 * (2.0 * t).cos();
            out[1] = 1.0;
        }),
        Arc::new(|u: &[f64], out: &mut Mat| {
            let t = u[1];
            out.fill(0.0);
            out[(0, 0)] = -5.0;
            out[(0, 1)] = 10.0 * (2.0 * t).cos() - 4.0 * (2.0 * t).sin();
        }),
    )?;
    let forcing = Arc::new(|j: usize, t: f64| trig_forcing_derivs(j, t, 5.0, 2.0));
    let view = LinearView {
        problem: LinearScalarProblem::forced(-5.0, forcing)?,
        initial: 0.0,
        component: 0,
    };
    Ok(ProblemSpec::new("example1", system, vec![0.0, 0.0], 5.0)?
        .with_exact(Arc::new(|t: f64, out: &mut [f64]| {
            out[0] = (2.0 * t).sin();
            out[1] = t;
        }))
        .with_linear_view(view))
}

/// Falling-factorial evaluation of the m-th derivative of a polynomial given
/// by its coefficients in increasing degree.
fn poly_deriv(coeffs: &[f64], m: usize, u: f64) -> f64 {
    if m >= coeffs.len() {
        return 0.0;
    }
    let falling = |d: usize| -> f64 { (d - m + 1..=d).map(|x| x as f64).product() };
    let mut acc = 0.0;
    for d in (m..coeffs.len()).rev() {
        acc = acc * u + coeffs[d] * falling(d);
    }
    acc
}

/// Derivatives of `ln W(u)` for a polynomial W, by the Leibniz recurrence
/// `W^(n) = sum_i C(n-1, i) W^(i) (ln W)^(n-i)` solved for the `i = 0` term.
fn log_derivs(coeffs: &[f64], max: usize, u: f64, out: &mut Vec<f64>) {
    out.clear();
    let w = poly_deriv(coeffs, 0, u);
    for n in 1..=max {
        let mut s = poly_deriv(coeffs, n, u);
        for i in 1..n {
            s -= binomial(n - 1, i) * poly_deriv(coeffs, i, u) * out[n - i - 1];
        }
        out.push(s / w);
    }
}

const EX2_P: [f64; 6] = [0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
const EX2_Q: [f64; 7] = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];

/// `f^(m)(u)` for `f = ln(P/Q)` with `P = u + u^3 + u^5` and
/// `Q = 1 + u^2 + u^4 + u^6`.
fn example2_chain(m: usize, u: f64) -> f64 {
    if m == 0 {
        return (poly_deriv(&EX2_P, 0, u) / poly_deriv(&EX2_Q, 0, u)).ln();
    }
    let mut gp = Vec::new();
    let mut gq = Vec::new();
    log_derivs(&EX2_P, m, u, &mut gp);
    log_derivs(&EX2_Q, m, u, &mut gq);
    gp[m - 1] - gq[m - 1]
}

/// Scalar nonlinear equation `u' = ln((u + u^3 + u^5)/(1 + u^2 + u^4 + u^6))`
/// from `u(0) = 1`. No closed-form solution; references are computed runs.
pub fn example2() -> Result<ProblemSpec> {
    let system = OdeProblem::new(
        1,
        Arc::new(|u: &[f64], out: &mut [f64]| out[0] = example2_chain(0, u[0])),
        Arc::new(|u: &[f64], out: &mut Mat| out[(0, 0)] = example2_chain(1, u[0])),
    )?;
    Ok(ProblemSpec::new("example2", system, vec![1.0], 1.0)?
        .with_scalar_chain(Arc::new(example2_chain)))
}

/// Kaps' stiff system: `y' = -1002 y + 1000 z^2`, `z' = y - z(1 + z)` from
/// `(1, 1)`, exact solution `(e^-2t, e^-t)`.
pub fn example3() -> Result<ProblemSpec> {
    let system = OdeProblem::new(
        2,
        Arc::new(|u: &[f64], out: &mut [f64]| {
            out[0] = -1002.0 * u[0] + 1000.0 * u[1] * u[1];
            out[1] = u[0] - u[1] * (1.0 + u[1]);
        }),
        Arc::new(|u: &[f64], out: &mut Mat| {
            out[(0, 0)] = -1002.0;
            out[(0, 1)] = 2000.0 * u[1];
            out[(1, 0)] = 1.0;
            out[(1, 1)] = -1.0 - 2.0 * u[1];
        }),
    )?;
    Ok(ProblemSpec::new("example3", system, vec![1.0, 1.0], 5.0)?.with_exact(Arc::new(
        |t: f64, out: &mut [f64]| {
            out[0] = (-2.0 * t).exp();
            out[1] = (-t).exp();
        },
    )))
}

const EX4_A: [[f64; 3]; 3] = [
    [-21.0, 19.0, -20.0],
    [19.0, -21.0, 20.0],
    [40.0, -40.0, -40.0],
];

/// Linear 3x3 system with eigenvalues -2 and -40 +- 40i: one slow mode under
/// fast, heavily oscillating ones.
pub fn example4() -> Result<ProblemSpec> {
    let system = OdeProblem::new(
        3,
        Arc::new(|u: &[f64], out: &mut [f64]| {
            for (i, row) in EX4_A.iter().enumerate() {
                out[i] = row[0] * u[0] + row[1] * u[1] + row[2] * u[2];
            }
        }),
        Arc::new(|_u: &[f64], out: &mut Mat| {
            for i in 0..3 {
                for j in 0..3 {
                    out[(i, j)] = EX4_A[i][j];
                }
            }
        }),
    )?;
    Ok(
        ProblemSpec::new("example4", system, vec![1.0, 0.0, -1.0], 5.0)?.with_exact(Arc::new(
            |t: f64, out: &mut [f64]| {
                let slow = (-2.0 * t).exp();
                let fast = (-40.0 * t).exp();
                let (s, c) = (40.0 * t).sin_cos();
                out[0] = 0.5 * (slow + fast * (c + s));
                out[1] = 0.5 * (slow - fast * (c + s));
                out[2] = -fast * (c - s);
            },
        )),
    )
}
