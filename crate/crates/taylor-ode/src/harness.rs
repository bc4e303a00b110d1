//! Convergence grids, error reports, CSV emission and method comparison.
//!
//! A grid run integrates one problem with one method at a sequence of step
//! counts and reports per-row error, observed order, Newton iteration totals
//! and wall time. Rows are independent, so the default build fans them out
//! with rayon; `run_grid_sequential` is always available and produces
//! bitwise-identical error columns.
//!
//! Errors are L1 over components, either at the final time or as a maximum
//! over all steps (the latter needs a closed-form solution). Problems
//! without one are measured against a cached fine-grid reference run.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use crate::approx_taylor::{aet_step, AitSolver};
use crate::block_newton::NewtonConfig;
use crate::error::{Error, Result};
use crate::exact_taylor::{linear_et_step, linear_it_step, ScalarItSolver};
use crate::problems::ProblemSpec;

/// Stepper selection. The linear and scalar variants need the matching view
/// on the problem; grid validation rejects mismatches up front.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Explicit Taylor on the linear scalar view, closed form.
    EtLinear,
    /// Implicit Taylor on the linear scalar view, closed form.
    ItLinear,
    /// Implicit Taylor on an autonomous scalar problem via its exact
    /// derivative family.
    ItScalar,
    /// Explicit approximate Taylor on the system form.
    Aet,
    /// Implicit approximate Taylor on the system form.
    Ait,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::EtLinear => "et-linear",
            Method::ItLinear => "it-linear",
            Method::ItScalar => "it-scalar",
            Method::Aet => "aet",
            Method::Ait => "ait",
        }
    }

    pub fn all() -> [Method; 5] {
        [
            Method::EtLinear,
            Method::ItLinear,
            Method::ItScalar,
            Method::Aet,
            Method::Ait,
        ]
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Method> {
        Method::all()
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method {s:?}; expected one of et-linear, it-linear, \
                     it-scalar, aet, ait"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ErrorNorm {
    /// L1 distance to the target state at t0 + N h.
    #[default]
    FinalTime,
    /// Max over steps of the L1 distance to the exact solution.
    MaxOverSteps,
}

impl ErrorNorm {
    pub fn name(self) -> &'static str {
        match self {
            ErrorNorm::FinalTime => "final-time",
            ErrorNorm::MaxOverSteps => "max-over-steps",
        }
    }
}

impl fmt::Display for ErrorNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ErrorNorm {
    type Err = Error;
    fn from_str(s: &str) -> Result<ErrorNorm> {
        match s {
            "final-time" => Ok(ErrorNorm::FinalTime),
            "max-over-steps" => Ok(ErrorNorm::MaxOverSteps),
            _ => Err(Error::Config(format!(
                "unknown norm {s:?}; expected final-time or max-over-steps"
            ))),
        }
    }
}

/// One grid request: a method at one order over a list of step counts.
#[derive(Clone)]
pub struct RunConfig {
    pub method: Method,
    pub order: usize,
    pub steps: Vec<usize>,
    /// None uses the problem's default horizon.
    pub final_time: Option<f64>,
    pub norm: ErrorNorm,
    pub newton: NewtonConfig,
}

impl RunConfig {
    pub fn new(method: Method, order: usize, steps: Vec<usize>) -> Self {
        RunConfig {
            method,
            order,
            steps,
            final_time: None,
            norm: ErrorNorm::FinalTime,
            newton: NewtonConfig::default(),
        }
    }
}

/// One measured grid row. A failed integration (overflow, Newton breakdown)
/// keeps its row with a NaN error.
#[derive(Debug, Clone)]
pub struct Row {
    pub n: usize,
    pub h: f64,
    pub error: f64,
    /// Observed order against the previous row; None on the first row and
    /// around non-finite errors.
    pub order: Option<f64>,
    pub newton_iters: u64,
    pub seconds: f64,
}

#[derive(Clone)]
pub struct ConvergenceReport {
    pub problem: String,
    pub method: Method,
    pub order: usize,
    pub final_time: f64,
    pub norm: ErrorNorm,
    pub rows: Vec<Row>,
}

fn validate(spec: &ProblemSpec, cfg: &RunConfig) -> Result<f64> {
    if cfg.order == 0 {
        return Err(Error::Config("order must be at least 1".into()));
    }
    if cfg.steps.is_empty() {
        return Err(Error::Config("step list is empty".into()));
    }
    if cfg.steps.iter().any(|&n| n == 0) {
        return Err(Error::Config("step counts must be positive".into()));
    }
    let final_time = cfg.final_time.unwrap_or_else(|| spec.final_time());
    if !(final_time > 0.0) {
        return Err(Error::Config("final time must be positive".into()));
    }
    match cfg.method {
        Method::EtLinear | Method::ItLinear => {
            if spec.linear_view().is_none() {
                return Err(Error::Config(format!(
                    "{} needs a linear scalar view, which {} does not provide",
                    cfg.method,
                    spec.name()
                )));
            }
        }
        Method::ItScalar => {
            if spec.dim() != 1 || spec.scalar_chain().is_none() {
                return Err(Error::Config(format!(
                    "it-scalar needs a one-dimensional problem with a derivative \
                     family, which {} does not provide",
                    spec.name()
                )));
            }
        }
        Method::Aet | Method::Ait => {}
    }
    if cfg.norm == ErrorNorm::MaxOverSteps && !spec.has_exact() {
        return Err(Error::Config(format!(
            "max-over-steps needs a closed-form solution, which {} does not have",
            spec.name()
        )));
    }
    Ok(final_time)
}

/// Reference states at the final time for problems without a closed form,
/// keyed by problem name and horizon bits.
static REFERENCES: Mutex<Option<HashMap<(String, u64), Arc<Vec<f64>>>>> = Mutex::new(None);

const REFERENCE_ORDER: usize = 6;
const REFERENCE_STEPS: usize = 20_000;

/// Final state of a fine implicit run, cached per problem and horizon.
pub fn reference_solution(spec: &ProblemSpec, final_time: f64) -> Result<Arc<Vec<f64>>> {
    let key = (spec.name().to_string(), final_time.to_bits());
    if let Some(hit) = REFERENCES
        .lock()
        .unwrap()
        .as_ref()
        .and_then(|m| m.get(&key).cloned())
    {
        return Ok(hit);
    }
    let problem = spec.system();
    let mut solver = AitSolver::new(REFERENCE_ORDER, problem.dim(), NewtonConfig::default())?;
    let h = final_time / REFERENCE_STEPS as f64;
    let mut u = spec.initial().to_vec();
    let mut next = vec![0.0; problem.dim()];
    for _ in 0..REFERENCE_STEPS {
        solver.step_into(problem, h, &u, &mut next)?;
        std::mem::swap(&mut u, &mut next);
    }
    let arc = Arc::new(u);
    REFERENCES
        .lock()
        .unwrap()
        .get_or_insert_with(HashMap::new)
        .insert(key, arc.clone());
    Ok(arc)
}

/// Step failures produce NaN rows; anything else is a caller mistake and
/// propagates.
fn is_step_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::Overflow { .. }
            | Error::NewtonDivergence { .. }
            | Error::NewtonNonConvergence { .. }
            | Error::SingularMatrix { .. }
            | Error::SingularSchur { .. }
            | Error::SingularAmplification { .. }
    )
}

fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

struct Outcome {
    error: f64,
    newton_iters: u64,
}

fn integrate(
    spec: &ProblemSpec,
    cfg: &RunConfig,
    final_time: f64,
    n: usize,
    reference: Option<&[f64]>,
) -> Result<Outcome> {
    let h = final_time / n as f64;
    let dim = spec.dim();
    let mut exact_buf = vec![0.0; dim];
    let mut newton_iters = 0u64;
    let mut worst = 0.0f64;

    // Distance from the current state to the target at step index i (1-based
    // time i*h); scalar-view methods compare one component.
    macro_rules! fail_row {
        () => {
            return Ok(Outcome {
                error: f64::NAN,
                newton_iters,
            })
        };
    }

    match cfg.method {
        Method::EtLinear | Method::ItLinear => {
            let view = spec.linear_view().expect("validated");
            let mut u = view.initial;
            for i in 0..n {
                let t = i as f64 * h;
                match cfg.method {
                    Method::EtLinear => u = linear_et_step(&view.problem, cfg.order, h, t, u),
                    _ => match linear_it_step(&view.problem, cfg.order, h, t, u) {
                        Ok(v) => u = v,
                        Err(e) if is_step_failure(&e) => fail_row!(),
                        Err(e) => return Err(e),
                    },
                }
                if !u.is_finite() {
                    fail_row!();
                }
                if cfg.norm == ErrorNorm::MaxOverSteps {
                    spec.exact_into((i + 1) as f64 * h, &mut exact_buf);
                    worst = worst.max((u - exact_buf[view.component]).abs());
                }
            }
            let error = match cfg.norm {
                ErrorNorm::MaxOverSteps => worst,
                ErrorNorm::FinalTime => {
                    spec.exact_into(n as f64 * h, &mut exact_buf);
                    (u - exact_buf[view.component]).abs()
                }
            };
            Ok(Outcome {
                error,
                newton_iters,
            })
        }
        Method::ItScalar => {
            let chain = spec.scalar_chain().expect("validated").clone();
            let mut solver = ScalarItSolver::new(cfg.order, cfg.newton)?;
            let mut u = spec.initial()[0];
            for i in 0..n {
                match solver.step(&*chain, h, u) {
                    Ok((next, stats)) => {
                        u = next;
                        newton_iters += stats.iterations as u64;
                    }
                    Err(e) if is_step_failure(&e) => fail_row!(),
                    Err(e) => return Err(e),
                }
                if !u.is_finite() {
                    fail_row!();
                }
                if cfg.norm == ErrorNorm::MaxOverSteps {
                    spec.exact_into((i + 1) as f64 * h, &mut exact_buf);
                    worst = worst.max((u - exact_buf[0]).abs());
                }
            }
            let error = match cfg.norm {
                ErrorNorm::MaxOverSteps => worst,
                ErrorNorm::FinalTime => match reference {
                    Some(r) => (u - r[0]).abs(),
                    None => {
                        spec.exact_into(n as f64 * h, &mut exact_buf);
                        (u - exact_buf[0]).abs()
                    }
                },
            };
            Ok(Outcome {
                error,
                newton_iters,
            })
        }
        Method::Aet | Method::Ait => {
            let problem = spec.system();
            let mut u = spec.initial().to_vec();
            let mut solver = match cfg.method {
                Method::Ait => Some(AitSolver::new(cfg.order, dim, cfg.newton)?),
                _ => None,
            };
            let mut next = vec![0.0; dim];
            for i in 0..n {
                match &mut solver {
                    Some(s) => match s.step_into(problem, h, &u, &mut next) {
                        Ok(stats) => {
                            newton_iters += stats.iterations as u64;
                            std::mem::swap(&mut u, &mut next);
                        }
                        Err(e) if is_step_failure(&e) => fail_row!(),
                        Err(e) => return Err(e),
                    },
                    None => match aet_step(problem, cfg.order, h, &u) {
                        Ok(v) => u = v,
                        Err(e) if is_step_failure(&e) => fail_row!(),
                        Err(e) => return Err(e),
                    },
                }
                if u.iter().any(|x| !x.is_finite()) {
                    fail_row!();
                }
                if cfg.norm == ErrorNorm::MaxOverSteps {
                    spec.exact_into((i + 1) as f64 * h, &mut exact_buf);
                    worst = worst.max(l1_distance(&u, &exact_buf));
                }
            }
            let error = match cfg.norm {
                ErrorNorm::MaxOverSteps => worst,
                ErrorNorm::FinalTime => match reference {
                    Some(r) => l1_distance(&u, r),
                    None => {
                        spec.exact_into(n as f64 * h, &mut exact_buf);
                        l1_distance(&u, &exact_buf)
                    }
                },
            };
            Ok(Outcome {
                error,
                newton_iters,
            })
        }
    }
}

fn run_single(
    spec: &ProblemSpec,
    cfg: &RunConfig,
    final_time: f64,
    n: usize,
    reference: Option<&[f64]>,
) -> Result<Row> {
    let start = Instant::now();
    let outcome = integrate(spec, cfg, final_time, n, reference)?;
    Ok(Row {
        n,
        h: final_time / n as f64,
        error: outcome.error,
        order: None,
        newton_iters: outcome.newton_iters,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Observed orders from consecutive rows: `ln(e_prev/e_cur) / ln(n_cur/n_prev)`.
fn fill_orders(rows: &mut [Row]) {
    for i in 1..rows.len() {
        let (prev, cur) = (&rows[i - 1], &rows[i]);
        let usable = prev.error.is_finite()
            && cur.error.is_finite()
            && prev.error > 0.0
            && cur.error > 0.0
            && cur.n > prev.n;
        rows[i].order = usable.then(|| {
            let ratio = rows[i - 1].error / rows[i].error;
            ratio.ln() / (rows[i].n as f64 / rows[i - 1].n as f64).ln()
        });
    }
}

fn assemble(
    spec: &ProblemSpec,
    cfg: &RunConfig,
    final_time: f64,
    mut rows: Vec<Row>,
) -> ConvergenceReport {
    fill_orders(&mut rows);
    ConvergenceReport {
        problem: spec.name().to_string(),
        method: cfg.method,
        order: cfg.order,
        final_time,
        norm: cfg.norm,
        rows,
    }
}

/// Resolve the reference run once, before any timed row.
fn reference_for(
    spec: &ProblemSpec,
    cfg: &RunConfig,
    final_time: f64,
) -> Result<Option<Arc<Vec<f64>>>> {
    if spec.has_exact() || cfg.norm == ErrorNorm::MaxOverSteps {
        return Ok(None);
    }
    reference_solution(spec, final_time).map(Some)
}

/// Run the grid with one worker per row.
#[cfg(feature = "parallel")]
pub fn run_grid(spec: &ProblemSpec, cfg: &RunConfig) -> Result<ConvergenceReport> {
    use rayon::prelude::*;
    let final_time = validate(spec, cfg)?;
    let reference = reference_for(spec, cfg, final_time)?;
    let rows: Result<Vec<Row>> = cfg
        .steps
        .par_iter()
        .map(|&n| run_single(spec, cfg, final_time, n, reference.as_deref().map(|r| &r[..])))
        .collect();
    Ok(assemble(spec, cfg, final_time, rows?))
}

/// Without the `parallel` feature the plain name runs sequentially.
#[cfg(not(feature = "parallel"))]
pub fn run_grid(spec: &ProblemSpec, cfg: &RunConfig) -> Result<ConvergenceReport> {
    run_grid_sequential(spec, cfg)
}

/// One row after another on the calling thread. Error columns are bitwise
/// identical to the parallel runner's.
pub fn run_grid_sequential(spec: &ProblemSpec, cfg: &RunConfig) -> Result<ConvergenceReport> {
    let final_time = validate(spec, cfg)?;
    let reference = reference_for(spec, cfg, final_time)?;
    let mut rows = Vec::with_capacity(cfg.steps.len());
    for &n in &cfg.steps {
        rows.push(run_single(
            spec,
            cfg,
            final_time,
            n,
            reference.as_deref().map(|r| &r[..]),
        )?);
    }
    Ok(assemble(spec, cfg, final_time, rows))
}

/// CSV rows as specified: `N,h,error,order,newton_iters,seconds` with the
/// error in scientific notation, NaN spelled out, and a blank order where
/// none is defined.
pub fn emit_csv<W: Write>(report: &ConvergenceReport, w: &mut W) -> io::Result<()> {
    writeln!(w, "N,h,error,order,newton_iters,seconds")?;
    for row in &report.rows {
        let error = if row.error.is_nan() {
            "NaN".to_string()
        } else {
            format!("{:.5e}", row.error)
        };
        let order = row.order.map(|o| format!("{o:.2}")).unwrap_or_default();
        writeln!(
            w,
            "{},{:.6e},{},{},{},{:.4e}",
            row.n, row.h, error, order, row.newton_iters, row.seconds
        )?;
    }
    Ok(())
}

pub fn csv_string(report: &ConvergenceReport) -> String {
    let mut out = Vec::new();
    emit_csv(report, &mut out).expect("vec write");
    String::from_utf8(out).expect("csv is ascii")
}

/// Paired grid runs of two configurations on one problem. `ratio` is the
/// worse error over the better one per step count; the comparison passes
/// where both are finite and the ratio stays under the threshold.
pub struct CompareRow {
    pub n: usize,
    pub error_a: f64,
    pub error_b: f64,
    pub ratio: f64,
    pub ok: bool,
}

pub struct CompareReport {
    pub a: ConvergenceReport,
    pub b: ConvergenceReport,
    pub threshold: f64,
    pub rows: Vec<CompareRow>,
    pub ok: bool,
}

pub fn compare_methods(
    spec: &ProblemSpec,
    a: &RunConfig,
    b: &RunConfig,
    threshold: f64,
) -> Result<CompareReport> {
    if a.steps != b.steps {
        return Err(Error::Config(
            "compared runs must use the same step counts".into(),
        ));
    }
    if !(threshold >= 1.0) {
        return Err(Error::Config("threshold must be at least 1".into()));
    }
    let ra = run_grid(spec, a)?;
    let rb = run_grid(spec, b)?;
    let rows: Vec<CompareRow> = ra
        .rows
        .iter()
        .zip(&rb.rows)
        .map(|(x, y)| {
            let (ea, eb) = (x.error, y.error);
            let ratio = if ea.is_finite() && eb.is_finite() {
                let lo = ea.min(eb).max(f64::MIN_POSITIVE);
                ea.max(eb) / lo
            } else {
                f64::NAN
            };
            CompareRow {
                n: x.n,
                error_a: ea,
                error_b: eb,
                ratio,
                ok: ratio.is_finite() && ratio <= threshold,
            }
        })
        .collect();
    let ok = rows.iter().all(|r| r.ok);
    Ok(CompareReport {
        a: ra,
        b: rb,
        threshold,
        rows,
        ok,
    })
}

/// One point of a timing series; `error` tags the accuracy bought at that
/// cost.
pub struct PerfPoint {
    pub h: f64,
    pub seconds: f64,
    pub error: f64,
}

pub struct PerfSeries {
    pub label: String,
    pub points: Vec<PerfPoint>,
}

impl PerfSeries {
    pub fn from_report(label: impl Into<String>, report: &ConvergenceReport) -> Self {
        PerfSeries {
            label: label.into(),
            points: report
                .rows
                .iter()
                .map(|r| PerfPoint {
                    h: r.h,
                    seconds: r.seconds,
                    error: r.error,
                })
                .collect(),
        }
    }
}

/// Write one `<label>.csv` per series (header `h,seconds,error`, skipping
/// points without a finite error) plus a `manifest.txt` naming them.
pub fn emit_performance_series(dir: &Path, series: &[PerfSeries]) -> Result<()> {
    let io_err = |source: io::Error, path: &Path| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(|e| io_err(e, dir))?;
    let manifest_path = dir.join("manifest.txt");
    let mut manifest = String::new();
    for s in series {
        let file = format!("{}.csv", s.label);
        let path = dir.join(&file);
        let mut body = String::from("h,seconds,error\n");
        let mut kept = 0;
        for p in &s.points {
            if !p.error.is_finite() {
                continue;
            }
            body.push_str(&format!("{:.6e},{:.4e},{:.5e}\n", p.h, p.seconds, p.error));
            kept += 1;
        }
        std::fs::write(&path, body).map_err(|e| io_err(e, &path))?;
        manifest.push_str(&format!("{file} {kept}\n"));
    }
    std::fs::write(&manifest_path, manifest).map_err(|e| io_err(e, &manifest_path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::lookup;
    use proptest::prelude::*;

    fn grid(method: Method, order: usize, steps: &[usize]) -> RunConfig {
        RunConfig::new(method, order, steps.to_vec())
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::all() {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("midpoint".parse::<Method>().is_err());
    }

    #[test]
    fn rejects_incompatible_method() {
        let kaps = lookup("example3").unwrap();
        let err = run_grid_sequential(&kaps, &grid(Method::ItScalar, 2, &[10]));
        assert!(matches!(err, Err(Error::Config(_))));
        let err = run_grid_sequential(&kaps, &grid(Method::ItLinear, 2, &[10]));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn rejects_empty_and_zero_steps() {
        let spec = lookup("example1").unwrap();
        assert!(run_grid_sequential(&spec, &grid(Method::Ait, 2, &[])).is_err());
        assert!(run_grid_sequential(&spec, &grid(Method::Ait, 2, &[0])).is_err());
    }

    #[test]
    fn max_norm_needs_exact_solution() {
        let spec = lookup("example2").unwrap();
        let mut cfg = grid(Method::Ait, 2, &[10]);
        cfg.norm = ErrorNorm::MaxOverSteps;
        assert!(matches!(
            run_grid_sequential(&spec, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn observed_order_tracks_the_method_order() {
        // Forced linear problem, implicit approximate Taylor at order 3.
        let spec = lookup("example1").unwrap();
        let report = run_grid_sequential(&spec, &grid(Method::Ait, 3, &[80, 160, 320])).unwrap();
        for row in &report.rows[1..] {
            let o = row.order.unwrap();
            assert!((o - 3.0).abs() < 0.4, "order {o} at N={}", row.n);
        }
    }

    #[test]
    fn order_column_recomputes_from_errors() {
        let spec = lookup("example1").unwrap();
        let report =
            run_grid_sequential(&spec, &grid(Method::ItLinear, 2, &[40, 80, 160])).unwrap();
        assert!(report.rows[0].order.is_none());
        for i in 1..report.rows.len() {
            let expect = (report.rows[i - 1].error / report.rows[i].error).log2();
            assert!((report.rows[i].order.unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let spec = lookup("example3").unwrap();
        let cfg = grid(Method::Ait, 2, &[20, 40, 80]);
        let a = run_grid(&spec, &cfg).unwrap();
        let b = run_grid_sequential(&spec, &cfg).unwrap();
        let c = run_grid(&spec, &cfg).unwrap();
        for ((ra, rb), rc) in a.rows.iter().zip(&b.rows).zip(&c.rows) {
            assert_eq!(ra.error.to_bits(), rb.error.to_bits());
            assert_eq!(ra.error.to_bits(), rc.error.to_bits());
            assert_eq!(ra.newton_iters, rb.newton_iters);
        }
    }

    #[test]
    fn unstable_explicit_run_yields_nan_rows() {
        // Kaps at h = 0.5 is far outside the explicit stability region; the
        // run must survive and mark the row NaN.
        let spec = lookup("example3").unwrap();
        let report = run_grid_sequential(&spec, &grid(Method::Aet, 2, &[10])).unwrap();
        assert!(report.rows[0].error.is_nan());
        let csv = csv_string(&report);
        assert!(csv.contains("NaN"), "{csv}");
    }

    #[test]
    fn max_over_steps_dominates_final_time() {
        let spec = lookup("example1").unwrap();
        let mut cfg = grid(Method::Ait, 2, &[64]);
        let fin = run_grid_sequential(&spec, &cfg).unwrap().rows[0].error;
        cfg.norm = ErrorNorm::MaxOverSteps;
        let max = run_grid_sequential(&spec, &cfg).unwrap().rows[0].error;
        assert!(max >= fin, "max {max} < final {fin}");
    }

    #[test]
    fn csv_layout_is_stable() {
        let report = ConvergenceReport {
            problem: "demo".into(),
            method: Method::Ait,
            order: 2,
            final_time: 1.0,
            norm: ErrorNorm::FinalTime,
            rows: vec![
                Row {
                    n: 10,
                    h: 0.1,
                    error: 3.703703e-6,
                    order: None,
                    newton_iters: 31,
                    seconds: 0.001953,
                },
                Row {
                    n: 20,
                    h: 0.05,
                    error: f64::NAN,
                    order: None,
                    newton_iters: 7,
                    seconds: 0.25,
                },
                Row {
                    n: 40,
                    h: 0.025,
                    error: 9.25e-7,
                    order: Some(2.0013),
                    newton_iters: 60,
                    seconds: 0.5,
                },
            ],
        };
        let csv = csv_string(&report);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "N,h,error,order,newton_iters,seconds");
        assert_eq!(lines[1], "10,1.000000e-1,3.70370e-6,,31,1.9530e-3");
        assert_eq!(lines[2], "20,5.000000e-2,NaN,,7,2.5000e-1");
        assert_eq!(lines[3], "40,2.500000e-2,9.25000e-7,2.00,60,5.0000e-1");
    }

    #[test]
    fn compare_identical_configs_passes() {
        let spec = lookup("example1").unwrap();
        let cfg = grid(Method::Ait, 2, &[20, 40]);
        let report = compare_methods(&spec, &cfg, &cfg, 1.0 + 1e-12).unwrap();
        assert!(report.ok);
        for row in &report.rows {
            assert_eq!(row.error_a.to_bits(), row.error_b.to_bits());
            assert!((row.ratio - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn compare_requires_matching_steps() {
        let spec = lookup("example1").unwrap();
        let a = grid(Method::Ait, 2, &[20]);
        let b = grid(Method::Ait, 2, &[40]);
        assert!(compare_methods(&spec, &a, &b, 2.0).is_err());
    }

    #[test]
    fn reference_is_cached_and_reused() {
        let spec = lookup("example2").unwrap();
        let a = reference_solution(&spec, 0.125).unwrap();
        let b = reference_solution(&spec, 0.125).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert!(a[0].is_finite());
        // Decaying from u(0) = 1 with f(1) = ln(3/4) < 0.
        assert!(a[0] < 1.0 && a[0] > 0.9);
    }

    #[test]
    fn reference_backed_error_shrinks_with_n() {
        let spec = lookup("example2").unwrap();
        let mut cfg = grid(Method::Ait, 3, &[8, 16, 32]);
        cfg.final_time = Some(0.125);
        let report = run_grid_sequential(&spec, &cfg).unwrap();
        let e: Vec<f64> = report.rows.iter().map(|r| r.error).collect();
        assert!(e[0] > e[1] && e[1] > e[2], "{e:?}");
        assert!(e[2] < 1e-8, "{e:?}");
    }

    #[test]
    fn performance_series_skip_nan_points() {
        let dir = tempfile::tempdir().unwrap();
        let series = vec![PerfSeries {
            label: "demo".into(),
            points: vec![
                PerfPoint {
                    h: 0.1,
                    seconds: 1.0,
                    error: 2e-3,
                },
                PerfPoint {
                    h: 0.05,
                    seconds: 2.0,
                    error: f64::NAN,
                },
            ],
        }];
        emit_performance_series(dir.path(), &series).unwrap();
        let body = std::fs::read_to_string(dir.path().join("demo.csv")).unwrap();
        assert_eq!(body.lines().count(), 2, "{body}");
        let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert_eq!(manifest.trim(), "demo.csv 1");
    }

    proptest! {
        #[test]
        fn csv_rows_parse_back(
            n in 1usize..100_000,
            err in 1e-16f64..1e3,
            iters in 0u64..10_000,
        ) {
            let report = ConvergenceReport {
                problem: "p".into(),
                method: Method::Aet,
                order: 1,
                final_time: 1.0,
                norm: ErrorNorm::FinalTime,
                rows: vec![Row {
                    n,
                    h: 1.0 / n as f64,
                    error: err,
                    order: Some(1.5),
                    newton_iters: iters,
                    seconds: 0.125,
                }],
            };
            let csv = csv_string(&report);
            let line = csv.lines().nth(1).unwrap();
            let cols: Vec<&str> = line.split(',').collect();
            prop_assert_eq!(cols.len(), 6);
            prop_assert_eq!(cols[0].parse::<usize>().unwrap(), n);
            let parsed_err: f64 = cols[2].parse().unwrap();
            prop_assert!((parsed_err - err).abs() <= 1e-5 * err);
            prop_assert_eq!(cols[4].parse::<u64>().unwrap(), iters);
        }
    }
}
