//! Command-line driver around the taylor-ode harness: convergence tables,
//! method comparisons, stencil inspection and timing series.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use taylor_ode::block_newton::NewtonConfig;
use taylor_ode::harness::{
    compare_methods, csv_string, emit_performance_series, run_grid, run_grid_sequential,
    ErrorNorm, Method, PerfSeries, RunConfig,
};
use taylor_ode::problems::{builtin_names, lookup};
use taylor_ode::stencil::{make_stencil, stencil_for, StencilWeights};
use taylor_ode::{Error, Result};

#[derive(Parser)]
#[command(name = "taylor-ode", version, about = "Taylor-series ODE integrator benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method over a grid of step counts and print a CSV table.
    ///
    /// Rows that fail to integrate (overflow, Newton breakdown) are kept
    /// with a NaN error; the exit code is zero as long as every requested
    /// row was produced.
    Bench(BenchArgs),
    /// Run two configurations on one problem and check that their errors
    /// stay within a factor of each other. Exits 0 when they do, 2 when a
    /// row exceeds the threshold.
    Compare(CompareArgs),
    /// Print the weights of a central difference stencil.
    Stencil(StencilArgs),
    /// Time several configurations and write one CSV per series plus a
    /// manifest. Rows run sequentially so the timings are not contended.
    Perf(PerfArgs),
}

#[derive(Args)]
struct GridArgs {
    /// Problem name; built in: example1, example2, example3, example4.
    #[arg(long)]
    problem: String,
    /// Comma-separated step counts. The token "..." continues the geometric
    /// progression of the two preceding values up to a closing bound, so
    /// "80,160,...,10240" expands to 80,160,320,...,10240.
    #[arg(long, value_parser = parse_steps)]
    steps: Steps,
    /// Integration horizon; defaults to the problem's own.
    #[arg(long)]
    final_time: Option<f64>,
    /// Error norm: final-time or max-over-steps.
    #[arg(long, default_value = "final-time", value_parser = parse_norm)]
    norm: ErrorNorm,
    /// Run rows on the calling thread instead of the worker pool.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    grid: GridArgs,
    /// Stepper: et-linear, it-linear, it-scalar, aet or ait.
    #[arg(long, value_parser = parse_method)]
    method: Method,
    /// Taylor expansion order.
    #[arg(long)]
    order: usize,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, value_parser = parse_method)]
    method_a: Method,
    #[arg(long)]
    order_a: usize,
    #[arg(long, value_parser = parse_method)]
    method_b: Method,
    #[arg(long)]
    order_b: usize,
    /// Largest allowed ratio between the two errors at each step count.
    #[arg(long, default_value_t = 3.0)]
    threshold: f64,
}

#[derive(Args)]
struct StencilArgs {
    /// Derivative order p; pairs with --accuracy.
    #[arg(long)]
    derivative: Option<usize>,
    /// Accuracy pairs q, for an O(h^2q) truncation error.
    #[arg(long)]
    accuracy: Option<usize>,
    /// Method order R; pairs with --stage to show the stencil that stage
    /// uses.
    #[arg(long)]
    order: Option<usize>,
    /// Stage index k in 1..R.
    #[arg(long)]
    stage: Option<usize>,
}

#[derive(Args)]
struct PerfArgs {
    #[command(flatten)]
    grid: GridArgs,
    /// Comma-separated method:order pairs, e.g. "ait:2,it-scalar:6".
    #[arg(long)]
    series: String,
    /// Directory for the per-series CSV files and manifest.txt.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone)]
struct Steps(Vec<usize>);

fn parse_method(s: &str) -> Result<Method> {
    s.parse()
}

fn parse_norm(s: &str) -> Result<ErrorNorm> {
    s.parse()
}

fn parse_steps(s: &str) -> std::result::Result<Steps, String> {
    let tokens: Vec<&str> = s.split(',').map(str::trim).collect();
    let mut out: Vec<usize> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let tok = tokens[i];
        if tok == "..." {
            if out.len() < 2 {
                return Err("\"...\" needs two step counts before it".into());
            }
            let bound: usize = tokens
                .get(i + 1)
                .ok_or("\"...\" needs a closing bound after it")?
                .parse()
                .map_err(|_| format!("bad closing bound {:?}", tokens[i + 1]))?;
            let a = out[out.len() - 2];
            let b = out[out.len() - 1];
            if a == 0 || b % a != 0 || b / a < 2 {
                return Err(format!("cannot continue {a},{b} geometrically"));
            }
            let ratio = b / a;
            let mut cur = b;
            while cur < bound {
                cur = cur
                    .checked_mul(ratio)
                    .ok_or_else(|| "step count overflow".to_string())?;
                out.push(cur);
            }
            if cur != bound {
                return Err(format!(
                    "the progression reaches {cur}, not the bound {bound}"
                ));
            }
            i += 2;
        } else {
            out.push(
                tok.parse()
                    .map_err(|_| format!("bad step count {tok:?}"))?,
            );
            i += 1;
        }
    }
    if out.is_empty() {
        return Err("empty step list".into());
    }
    Ok(Steps(out))
}

fn parse_series(s: &str) -> Result<Vec<(Method, usize)>> {
    s.split(',')
        .map(str::trim)
        .map(|pair| {
            let (m, o) = pair
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("bad series entry {pair:?}, want method:order")))?;
            let method: Method = m.parse()?;
            let order: usize = o
                .parse()
                .map_err(|_| Error::Config(format!("bad order in series entry {pair:?}")))?;
            Ok((method, order))
        })
        .collect()
}

fn grid_config(grid: &GridArgs, method: Method, order: usize) -> RunConfig {
    RunConfig {
        method,
        order,
        steps: grid.steps.0.clone(),
        final_time: grid.final_time,
        norm: grid.norm,
        newton: NewtonConfig::default(),
    }
}

fn run_bench(args: &BenchArgs) -> Result<ExitCode> {
    let spec = lookup(&args.grid.problem)?;
    let cfg = grid_config(&args.grid, args.method, args.order);
    let report = if args.grid.sequential {
        run_grid_sequential(&spec, &cfg)?
    } else {
        run_grid(&spec, &cfg)?
    };
    let csv = csv_string(&report);
    match &args.output {
        Some(path) => fs::write(path, csv).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?,
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn format_error(e: f64) -> String {
    if e.is_nan() {
        "NaN".to_string()
    } else {
        format!("{e:.5e}")
    }
}

fn run_compare(args: &CompareArgs) -> Result<ExitCode> {
    let spec = lookup(&args.grid.problem)?;
    let a = grid_config(&args.grid, args.method_a, args.order_a);
    let b = grid_config(&args.grid, args.method_b, args.order_b);
    let report = compare_methods(&spec, &a, &b, args.threshold)?;
    println!("N,error_a,error_b,ratio");
    for row in &report.rows {
        let ratio = if row.ratio.is_finite() {
            format!("{:.3}", row.ratio)
        } else {
            "NaN".to_string()
        };
        println!(
            "{},{},{},{}",
            row.n,
            format_error(row.error_a),
            format_error(row.error_b),
            ratio
        );
    }
    println!(
        "within threshold {}: {}",
        args.threshold,
        if report.ok { "yes" } else { "no" }
    );
    Ok(if report.ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn print_stencil(w: &StencilWeights) {
    println!("derivative order: {}", w.derivative_order());
    println!("accuracy pairs:   {}", w.accuracy_pairs());
    println!("half width:       {}", w.half_width());
    for (j, beta) in w.iter() {
        println!("{j:>4}  {beta:+.17e}");
    }
}

fn run_stencil(args: &StencilArgs) -> Result<ExitCode> {
    let w = match (args.derivative, args.accuracy, args.order, args.stage) {
        (Some(p), Some(q), None, None) => make_stencil(p, q)?,
        (None, None, Some(r), Some(k)) => stencil_for(k, r)?,
        _ => {
            return Err(Error::Config(
                "pass --derivative with --accuracy, or --order with --stage".into(),
            ))
        }
    };
    print_stencil(&w);
    Ok(ExitCode::SUCCESS)
}

fn run_perf(args: &PerfArgs) -> Result<ExitCode> {
    let spec = lookup(&args.grid.problem)?;
    let mut series = Vec::new();
    for (method, order) in parse_series(&args.series)? {
        let cfg = grid_config(&args.grid, method, order);
        // Timing rows must not compete for cores.
        let report = run_grid_sequential(&spec, &cfg)?;
        let label = format!("{}-{}-r{}", spec.name(), method, order);
        series.push(PerfSeries::from_report(label, &report));
    }
    emit_performance_series(&args.out_dir, &series)?;
    println!("{}", args.out_dir.join("manifest.txt").display());
    Ok(ExitCode::SUCCESS)
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Bench(args) => run_bench(args),
        Command::Compare(args) => run_compare(args),
        Command::Stencil(args) => run_stencil(args),
        Command::Perf(args) => run_perf(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::UnknownProblem(_)) {
                eprintln!("built-in problems: {}", builtin_names().join(", "));
            }
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steps_expand_geometrically() {
        let s = parse_steps("80,160,...,10240").unwrap();
        assert_eq!(s.0, [80, 160, 320, 640, 1280, 2560, 5120, 10240]);
    }

    #[test]
    fn steps_accept_plain_lists_and_mixed_tails() {
        assert_eq!(parse_steps("10,20,30").unwrap().0, [10, 20, 30]);
        assert_eq!(parse_steps("5,15,...,135,7").unwrap().0, [5, 15, 45, 135, 7]);
        assert_eq!(parse_steps("10,20,...,20").unwrap().0, [10, 20]);
    }

    #[test]
    fn steps_reject_malformed_input() {
        assert!(parse_steps("").is_err());
        assert!(parse_steps("10,...,80").is_err());
        assert!(parse_steps("10,20,...").is_err());
        assert!(parse_steps("10,30,...,100").is_err());
        assert!(parse_steps("10,10,...,40").is_err());
        assert!(parse_steps("0,10,...,40").is_err());
        assert!(parse_steps("10,x").is_err());
    }

    #[test]
    fn series_entries_parse() {
        let s = parse_series("ait:2, it-scalar:6").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0], (Method::Ait, 2));
        assert_eq!(s[1], (Method::ItScalar, 6));
        assert!(parse_series("ait").is_err());
        assert!(parse_series("warp:3").is_err());
    }

    #[test]
    fn cli_self_check() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
