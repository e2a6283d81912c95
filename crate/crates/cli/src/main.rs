// `!(x > 0.0)` is used on purpose so NaN lands in the error branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mutual_band::fd_oracle::{compare_to_analytic, solve_qvi_fd, FdComparison};
use mutual_band::model::ModelParams;
use mutual_band::policy::{regime_transitions, sweep_k_plus, PolicyDocument, Regime, ValueFunction};
use mutual_band::qvi::qvi_report;
use mutual_band::simulate::{estimate_cost, simulate_logged, write_log_csv, SimConfig};
use mutual_band::Error;

/// Sets the worker count of the simulation thread pool.
const THREADS_ENV: &str = "MUTUAL_BAND_THREADS";

#[derive(Parser, Debug)]
#[command(name = "mutual-band", version, about = "Optimal band policy for a mutual reserve with proportional reinsurance")]
struct Cli {
    /// Directory for output files and the run manifest.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum Command {
    /// Solve for the optimal policy; writes policy.json.
    Solve(Common),
    /// Tabulate V, V', V'' and u* on a grid; writes table.csv.
    Table {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.0)]
        from: f64,
        /// Defaults to the refund trigger b.
        #[arg(long)]
        to: Option<f64>,
        #[arg(long, default_value_t = 0.01)]
        step: f64,
    },
    /// Check the QVI pointwise; exit 1 when the check fails.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2000)]
        grid: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Monte Carlo estimate of the discounted cost of the optimal policy.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        x: f64,
        #[arg(long, default_value_t = 10_000)]
        paths: usize,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        /// Defaults to 10 / r.
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Keep full retention instead of the feedback rule.
        #[arg(long)]
        no_feedback: bool,
        /// Also write every intervention to interventions.csv.
        #[arg(long)]
        log: bool,
    },
    /// Finite-difference solve and comparison with the closed form.
    Fd {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-3)]
        h: f64,
        /// Defaults to three times the refund trigger of the refund-only problem.
        #[arg(long)]
        xmax: Option<f64>,
    },
    /// Sweep the fixed call cost; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Defaults to half the critical call cost.
        #[arg(long)]
        kplus_from: Option<f64>,
        /// Defaults to twice the critical call cost.
        #[arg(long)]
        kplus_to: Option<f64>,
        #[arg(long, default_value_t = 201)]
        points: usize,
    },
}

#[derive(Args, Debug, Serialize)]
struct Common {
    /// JSON file with mu, sigma, r, c_plus, c_minus, k_plus, k_minus.
    params: PathBuf,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Solve(_) => "solve",
            Command::Table { .. } => "table",
            Command::Verify { .. } => "verify",
            Command::Simulate { .. } => "simulate",
            Command::Fd { .. } => "fd",
            Command::Sweep { .. } => "sweep",
        }
    }

    fn params(&self) -> &Path {
        match self {
            Command::Solve(c) => &c.params,
            Command::Table { common, .. }
            | Command::Verify { common, .. }
            | Command::Simulate { common, .. }
            | Command::Fd { common, .. }
            | Command::Sweep { common, .. } => &common.params,
        }
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    params_file: &'a Path,
    options: &'a Command,
    argv: Vec<String>,
    version: &'a str,
    wall_time_seconds: f64,
    outputs: Vec<PathBuf>,
}

enum Failure {
    Usage(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::ParamOutOfRange { .. }
            | Error::InvalidConfig(_)
            | Error::InadmissiblePolicy(_)
            | Error::Domain { .. }
            | Error::OutOfRange { .. }
            | Error::ZeroJump => Failure::Usage(e.to_string()),
            _ => Failure::Numeric(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Usage(format!("{}: {e}", path.display()))
}

fn load_params(path: &Path) -> Result<ModelParams, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

struct Outputs<'a> {
    dir: &'a Path,
    written: Vec<PathBuf>,
}

impl Outputs<'_> {
    fn create(&mut self, name: &str) -> Result<(PathBuf, BufWriter<File>), Failure> {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(|e| io_err(&path, e))?;
        self.written.push(path.clone());
        Ok((path, BufWriter::new(file)))
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Failure> {
        let (path, mut w) = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value).map_err(|e| io_err(&path, e))?;
        writeln!(w).and_then(|_| w.flush()).map_err(|e| io_err(&path, e))
    }
}

/// Returns `Ok(false)` when a verification ran but failed.
fn run(cmd: &Command, out: &mut Outputs) -> Result<bool, Failure> {
    let p = load_params(cmd.params())?;
    match cmd {
        Command::Solve(_) => {
            let vf = ValueFunction::solve(&p)?;
            out.json("policy.json", &PolicyDocument::from(&vf))?;
            Ok(true)
        }
        Command::Table { from, to, step, .. } => {
            let vf = ValueFunction::solve(&p)?;
            let to = to.unwrap_or(vf.policy.refund_trigger);
            if !(*step > 0.0 && *from >= 0.0 && to >= *from) {
                return Err(Failure::Usage(format!("need 0 <= from <= to and step > 0 (from = {from}, to = {to}, step = {step})")));
            }
            let (path, mut w) = out.create("table.csv")?;
            let n = ((to - from) / step + 1e-9).floor() as usize;
            let mut body = || -> std::io::Result<()> {
                writeln!(w, "x,V,Vp,Vpp,u")?;
                for i in 0..=n {
                    let x = from + i as f64 * step;
                    let e = vf.eval(x).expect("x >= 0");
                    writeln!(w, "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}", x, e.value, e.d1, e.d2, vf.feedback_u(x))?;
                }
                w.flush()
            };
            body().map_err(|e| io_err(&path, e))?;
            Ok(true)
        }
        Command::Verify { grid, tol, .. } => {
            if *grid < 100 || !(*tol > 0.0) {
                return Err(Failure::Usage(format!("need grid >= 100 and tol > 0 (grid = {grid}, tol = {tol})")));
            }
            let vf = ValueFunction::solve(&p)?;
            let report = qvi_report(&vf, *grid, *tol)?;
            let (path, w) = out.create("qvi_points.csv")?;
            report.write_csv(w).map_err(|e| io_err(&path, e))?;
            #[derive(Serialize)]
            struct Summary<'a> {
                pass: bool,
                tol: f64,
                grid: usize,
                regime: Regime,
                intervention_at_zero: f64,
                worst_continuation: &'a mutual_band::qvi::Worst,
                worst_intervention: &'a mutual_band::qvi::Worst,
                worst_tightness: &'a mutual_band::qvi::Worst,
                max_abs_continuation_inside: f64,
            }
            out.json(
                "qvi_report.json",
                &Summary {
                    pass: report.pass,
                    tol: *tol,
                    grid: *grid,
                    regime: vf.policy.regime,
                    intervention_at_zero: report.intervention_at_zero,
                    worst_continuation: &report.worst_continuation,
                    worst_intervention: &report.worst_intervention,
                    worst_tightness: &report.worst_tightness,
                    max_abs_continuation_inside: report.max_abs_continuation_inside,
                },
            )?;
            eprintln!("QVI check {} at tol {tol:e} on {grid} points", if report.pass { "passed" } else { "FAILED" });
            Ok(report.pass)
        }
        Command::Simulate { x, paths, dt, horizon, seed, no_feedback, log, .. } => {
            let vf = ValueFunction::solve(&p)?;
            let horizon = horizon.unwrap_or(10.0 / p.r());
            let mut cfg = SimConfig::new(vf.policy, *x, *dt, horizon, *paths, *seed);
            cfg.use_feedback = !no_feedback;
            let res = estimate_cost(&vf, &cfg)?;
            #[derive(Serialize)]
            struct Doc<'a> {
                config: &'a SimConfig,
                result: &'a mutual_band::simulate::SimResult,
                value: f64,
            }
            out.json("sim_result.json", &Doc { config: &cfg, result: &res, value: vf.value(*x) })?;
            if *log {
                let outcomes = simulate_logged(&p, &cfg)?;
                let (path, mut w) = out.create("interventions.csv")?;
                write_log_csv(&outcomes, &mut w).and_then(|_| w.flush()).map_err(|e| io_err(&path, e))?;
            }
            Ok(true)
        }
        Command::Fd { h, xmax, .. } => {
            let vf = ValueFunction::solve(&p)?;
            let floor = 3.0 * vf.aux.refund_trigger;
            let xmax = xmax.unwrap_or(floor);
            if xmax < floor {
                return Err(Failure::Usage(format!("xmax = {xmax} must be at least 3 b_bar = {floor}")));
            }
            let g = solve_qvi_fd(&p, xmax, *h)?;
            let cmp: FdComparison = compare_to_analytic(&g, &vf);
            let (path, w) = out.create("fd_grid.csv")?;
            mutual_band::fd_oracle::write_csv(&g, &vf, w).map_err(|e| io_err(&path, e))?;
            out.json("fd_report.json", &cmp)?;
            Ok(true)
        }
        Command::Sweep { kplus_from, kplus_to, points, .. } => {
            let kb = mutual_band::auxiliary::AuxSolution::solve(&p)?.k_plus_bar;
            let rows = sweep_k_plus(&p, kplus_from.unwrap_or(0.5 * kb), kplus_to.unwrap_or(2.0 * kb), *points)?;
            let (path, mut w) = out.create("sweep.csv")?;
            let mut body = || -> std::io::Result<()> {
                writeln!(w, "K_plus,regime,A,B,b,V0")?;
                for r in &rows {
                    let regime = match r.regime {
                        Regime::BandFull => "BandFull",
                        Regime::DividendOnly => "DividendOnly",
                    };
                    writeln!(
                        w,
                        "{:.16e},{},{:.16e},{:.16e},{:.16e},{:.16e}",
                        r.k_plus, regime, r.call_target, r.refund_target, r.refund_trigger, r.v0
                    )?;
                }
                w.flush()
            };
            body().map_err(|e| io_err(&path, e))?;
            for i in regime_transitions(&rows) {
                eprintln!(
                    "regime switch between K+ = {:.6} and {:.6} (K+bar = {kb:.6})",
                    rows[i].k_plus,
                    rows[i + 1].k_plus
                );
            }
            Ok(true)
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Failure::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("{THREADS_ENV}: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let start = Instant::now();
    let result = configure_threads()
        .and_then(|_| fs::create_dir_all(&cli.out_dir).map_err(|e| io_err(&cli.out_dir, e)))
        .and_then(|_| {
            let mut out = Outputs { dir: &cli.out_dir, written: Vec::new() };
            let pass = run(&cli.command, &mut out)?;
            let name = cli.command.name();
            let manifest = RunManifest {
                command: name,
                params_file: cli.command.params(),
                options: &cli.command,
                argv: std::env::args().collect(),
                version: env!("CARGO_PKG_VERSION"),
                wall_time_seconds: start.elapsed().as_secs_f64(),
                outputs: out.written.clone(),
            };
            out.json(&format!("{name}_manifest.json"), &manifest)?;
            Ok(pass)
        });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("numeric failure: {msg}");
            ExitCode::from(3)
        }
    }
}
