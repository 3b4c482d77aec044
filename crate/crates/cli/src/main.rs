//! `ccgeo`: experiment runner for commutator frames, control balls and their measures.

mod config;

use std::fmt::Write as _;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Result};
use ccgeo_core::fields::DEFAULT_RANK_TOL;
use ccgeo_core::flows::{approx_exponential, box_norm, flow, map_e, map_phi};
use ccgeo_core::linalg::norm;
use ccgeo_core::measures::{doubling_ratio, poincare_ratio, test_suite, tuple_at, MeasureOptions};
use ccgeo_core::metrics::{
    ball_box_check, reach_upper, sample_ball, sample_controls, BallBoxOptions, Metric, Reach,
    ReachOptions,
};
use ccgeo_core::multilinear::{select_maximal_tuple, TupleIndex};
use ccgeo_core::pullback::{chi_matrix, injectivity_check_e, lift_path, solve_a_ode};
use ccgeo_core::suite::{criterion_id, run_suite, SuiteOptions};
use ccgeo_core::GeoError;
use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use serde_json::{json, Value};

use config::{ExperimentConfig, Flags, Setup};

#[derive(Parser, Debug)]
#[command(
    name = "ccgeo",
    version,
    about = "Commutator frames, control balls and their measures"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Flow of one commutator-family member for `--time`.
    Flow,
    /// Approximate exponential of a bracket word.
    ExpAp,
    /// Almost-exponential map E at `--h`.
    MapE,
    /// Exponential map Phi at `--h`.
    MapPhi,
    /// Maximal tuple at the point and radius.
    MaximalTuple,
    /// The chi matrix of E at `--h`.
    Chi,
    /// The A matrix along the ray through `--omega`.
    AOde,
    /// Lifts random rho-paths through E.
    Lift,
    /// Grid non-collision check of E on Q_I(epsilon).
    Injectivity,
    /// Upper bound on the control distance to `--target`.
    Distance,
    /// Endpoints of random admissible paths.
    SampleBall,
    /// Empirical inner and outer ball-box constants.
    Ballbox,
    /// Measure ratio of the balls of radius 2r and r.
    Doubling,
    /// Empirical Poincaré ratios over a suite of test functions.
    Poincare,
    /// The acceptance matrix over the built-in families.
    Suite,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Flow => "flow",
            Command::ExpAp => "exp-ap",
            Command::MapE => "map-e",
            Command::MapPhi => "map-phi",
            Command::MaximalTuple => "maximal-tuple",
            Command::Chi => "chi",
            Command::AOde => "a-ode",
            Command::Lift => "lift",
            Command::Injectivity => "injectivity",
            Command::Distance => "distance",
            Command::SampleBall => "sample-ball",
            Command::Ballbox => "ballbox",
            Command::Doubling => "doubling",
            Command::Poincare => "poincare",
            Command::Suite => "suite",
        }
    }
}

/// Result of a subcommand: report body, optional CSV files and verdict.
struct Outcome {
    result: Value,
    files: Vec<(&'static str, String)>,
    falsified: bool,
    summary: String,
}

impl Outcome {
    fn ok(result: Value, summary: String) -> Self {
        Outcome {
            result,
            files: Vec::new(),
            falsified: false,
            summary,
        }
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn need<T: Clone>(v: &Option<T>, key: &str) -> Result<T> {
    v.clone()
        .ok_or_else(|| anyhow!("missing --{}", key.replace('_', "-")))
}

fn tuple(c: &ExperimentConfig, s: &Setup) -> Result<TupleIndex> {
    match &c.tuple {
        Some(t) => {
            TupleIndex::from_one_based(t, &s.basis.lengths).map_err(|e| anyhow!("tuple: {e}"))
        }
        None => tuple_at(&s.basis, &s.point, s.radius).map_err(|e| anyhow!("maximal tuple: {e}")),
    }
}

fn check_len(v: &[f64], p: usize, key: &str) -> Result<()> {
    if v.len() != p {
        bail!("{key}: expected {p} values, got {}", v.len());
    }
    Ok(())
}

fn run(cmd: Command, c: &ExperimentConfig) -> Result<Outcome> {
    if cmd == Command::Suite {
        return run_suite_command(c);
    }
    let s = c.setup()?;
    let b = &s.basis;
    let x = &s.point;
    let r = s.radius;
    Ok(match cmd {
        Command::Flow => {
            let k = need(&c.field, "field")?;
            if k == 0 || k > b.q() {
                bail!("field: must lie in 1..={}", b.q());
            }
            let t = need(&c.time, "time")?;
            let y = flow(&b.members[k - 1], x, t, &s.cfg)?;
            Outcome::ok(
                json!({ "field": k, "time": t, "point": y }),
                format!("{y:?}"),
            )
        }
        Command::ExpAp => {
            let w = need(&c.word, "word")?;
            if w.iter().any(|&a| a == 0) {
                bail!("word: letters are one-based");
            }
            let h = need(&c.h, "h")?;
            check_len(&h, 1, "h")?;
            let word: Vec<usize> = w.iter().map(|a| a - 1).collect();
            let y = approx_exponential(b, &word, h[0], x, &s.cfg)?;
            Outcome::ok(
                json!({ "word": w, "h": h[0], "point": y }),
                format!("{y:?}"),
            )
        }
        Command::MapE | Command::MapPhi => {
            let t = tuple(c, &s)?;
            let h = need(&c.h, "h")?;
            check_len(&h, t.len(), "h")?;
            let y = if cmd == Command::MapE {
                map_e(b, &t, x, r, &h, &s.cfg)?
            } else {
                map_phi(b, &t, x, r, &h, &s.cfg)?
            };
            let bn = box_norm(&h, &t.member_lengths(&b.lengths));
            Outcome::ok(
                json!({ "tuple": t.one_based(), "h": h, "box_norm": bn, "point": y }),
                format!("{y:?}"),
            )
        }
        Command::MaximalTuple => {
            let m = select_maximal_tuple(b, x, r, DEFAULT_RANK_TOL)?;
            let runner = m
                .runner_up
                .as_ref()
                .map(|(t, v)| json!({ "tuple": t.one_based(), "value": v }));
            Outcome::ok(
                json!({ "tuple": m.tuple.one_based(), "value": m.value, "runner_up": runner }),
                m.tuple.to_string(),
            )
        }
        Command::Chi => {
            let t = tuple(c, &s)?;
            let h = need(&c.h, "h")?;
            check_len(&h, t.len(), "h")?;
            let rep = chi_matrix(b, &t, x, r, &h, &s.cfg)?;
            let n = rep.chi.norm();
            Outcome::ok(
                json!({ "tuple": t.one_based(), "h": h, "chi": matrix_rows(&rep.chi), "norm": n, "residual": rep.residual }),
                format!("|chi| = {n:.6e}, residual {:.3e}", rep.residual),
            )
        }
        Command::AOde => {
            let t = tuple(c, &s)?;
            let w = need(&c.omega, "omega")?;
            check_len(&w, t.len(), "omega")?;
            let n = norm(&w);
            if n == 0.0 {
                bail!("omega: must be nonzero");
            }
            let omega: Vec<f64> = w.iter().map(|v| v / n).collect();
            let rho_max = c.rho_max.unwrap_or(0.5);
            let steps = c.steps.unwrap_or(10);
            let ray = solve_a_ode(b, &t, x, r, &omega, rho_max, steps, &s.cfg)?;
            let mut csv = String::from("rho,norm");
            let p = t.len();
            for i in 0..p {
                for j in 0..p {
                    write!(csv, ",a{}{}", i + 1, j + 1)?;
                }
            }
            csv.push('\n');
            for (rho, a) in ray.rhos.iter().zip(&ray.a) {
                write!(csv, "{rho:.12e},{:.12e}", a.norm())?;
                for i in 0..p {
                    for j in 0..p {
                        write!(csv, ",{:.12e}", a[(i, j)])?;
                    }
                }
                csv.push('\n');
            }
            let last = ray.a.last().map(|a| a.norm()).unwrap_or(0.0);
            Outcome {
                result: json!({
                    "tuple": t.one_based(),
                    "omega": omega,
                    "rho": ray.rhos,
                    "a": ray.a.iter().map(matrix_rows).collect::<Vec<_>>(),
                }),
                files: vec![("data.csv", csv)],
                falsified: false,
                summary: format!("|A| at rho {rho_max} = {last:.6e}"),
            }
        }
        Command::Lift => {
            let t = tuple(c, &s)?;
            let n = c.samples.unwrap_or(10);
            let radius = c.path_radius.unwrap_or(s.epsilon.powi(b.step as i32) * r);
            let mut rows = Vec::new();
            let mut csv = String::from("path,hash,max_box_norm,max_error,inside\n");
            let mut inside = 0;
            for (k, shape) in sample_controls(b.q(), Metric::Rho, n, s.seed)
                .iter()
                .enumerate()
            {
                let path = shape.with_radius(radius);
                let lift = lift_path(b, &t, x, r, &path, &s.cfg)?;
                let ok = lift.max_box_norm < s.epsilon;
                inside += ok as usize;
                writeln!(
                    csv,
                    "{k},{},{:.12e},{:.12e},{ok}",
                    path.hash(),
                    lift.max_box_norm,
                    lift.max_error
                )?;
                rows.push(json!({ "hash": path.hash(), "end": lift.end(), "max_box_norm": lift.max_box_norm, "max_error": lift.max_error }));
            }
            Outcome {
                result: json!({ "tuple": t.one_based(), "path_radius": radius, "inside": inside, "lifts": rows }),
                files: vec![("data.csv", csv)],
                falsified: false,
                summary: format!("{inside}/{n} lifts stay in Q_I({})", s.epsilon),
            }
        }
        Command::Injectivity => {
            let t = tuple(c, &s)?;
            let density = c.density.unwrap_or(9);
            match injectivity_check_e(b, &t, x, r, s.epsilon, density, &s.cfg) {
                Ok(rep) => {
                    let summary = format!("no collisions on {} grid points", rep.grid_points);
                    Outcome::ok(
                        json!({ "tuple": t.one_based(), "injective": true, "report": rep }),
                        summary,
                    )
                }
                Err(GeoError::NotInjective { a, b: bb, distance }) => Outcome {
                    result: json!({ "tuple": t.one_based(), "injective": false, "a": a, "b": bb, "distance": distance }),
                    files: Vec::new(),
                    falsified: true,
                    summary: format!("collision between {a:?} and {bb:?}"),
                },
                Err(e) => return Err(e.into()),
            }
        }
        Command::Distance => {
            let y = need(&c.target, "target")?;
            check_len(&y, b.dim(), "target")?;
            let opts = ReachOptions {
                budget: c.budget.unwrap_or(4000),
                seed: s.seed,
                ..ReachOptions::default()
            };
            let reach = reach_upper(b, x, &y, s.metric, &opts, &s.cfg)?;
            let mut files = Vec::new();
            if let Reach::Reached { path, .. } = &reach {
                let (times, pts) = path.trajectory(b, x, 8, &s.cfg)?;
                let mut csv = String::from("t");
                for i in 0..b.dim() {
                    write!(csv, ",x{}", i + 1)?;
                }
                csv.push('\n');
                for (t, p) in times.iter().zip(&pts) {
                    write!(csv, "{t:.12e}")?;
                    for v in p {
                        write!(csv, ",{v:.12e}")?;
                    }
                    csv.push('\n');
                }
                files.push(("data.csv", csv));
            }
            let summary = match reach.radius() {
                Some(d) => format!("{} distance <= {d:.6e}", s.metric),
                None => "unreached".to_string(),
            };
            Outcome {
                result: json!({ "target": y, "metric": s.metric, "reach": reach }),
                files,
                falsified: false,
                summary,
            }
        }
        Command::SampleBall => {
            let n = c.samples.unwrap_or(200);
            let cloud = sample_ball(b, x, r, s.metric, n, s.seed, &s.cfg)?;
            let err = cloud.resimulation_error(b, &s.cfg)?;
            Outcome {
                result: json!({
                    "metric": s.metric,
                    "points": cloud.points.len(),
                    "discarded": cloud.discarded,
                    "resimulation_error": err,
                }),
                files: vec![("data.csv", cloud.to_csv()?)],
                falsified: false,
                summary: format!(
                    "{} points, {} discarded",
                    cloud.points.len(),
                    cloud.discarded
                ),
            }
        }
        Command::Ballbox => {
            let t = tuple(c, &s)?;
            let opts = BallBoxOptions {
                samples: c.samples.unwrap_or(200),
                seed: s.seed,
                ..BallBoxOptions::default()
            };
            let rep = ball_box_check(b, &t, x, r, s.epsilon, &opts, &s.cfg)?;
            let falsified = rep.inner_constant <= 0.0 || rep.outer_unreached > 0;
            let summary = format!(
                "inner c = {:.4}, outer C = {:.4}, unreached {}",
                rep.inner_constant, rep.outer_constant, rep.outer_unreached
            );
            Outcome {
                result: serde_json::to_value(&rep)?,
                files: Vec::new(),
                falsified,
                summary,
            }
        }
        Command::Doubling => {
            let opts = MeasureOptions {
                samples: c.samples.unwrap_or(2000),
                seed: s.seed,
                ..MeasureOptions::default()
            };
            let d = doubling_ratio(b, x, r, s.metric, &opts, &s.cfg)?;
            let summary = format!("ratio {:.4} +- {:.4}", d.ratio, d.std_error);
            Outcome {
                result: json!({
                    "estimate": d.ratio,
                    "std_error": d.std_error,
                    "samples": opts.samples,
                    "oracle_mix": { "small": d.small.oracle_mix, "large": d.large.oracle_mix },
                    "small": d.small,
                    "large": d.large,
                }),
                files: vec![
                    ("data.csv", d.small.to_csv()?),
                    ("data_large.csv", d.large.to_csv()?),
                ],
                falsified: false,
                summary,
            }
        }
        Command::Poincare => {
            let opts = MeasureOptions {
                samples: c.samples.unwrap_or(1000),
                seed: s.seed,
                ..MeasureOptions::default()
            };
            let suite = test_suite(b.dim(), 5, 11);
            let enlarge = c.enlarge.unwrap_or(3.0);
            let bound = c.bound.unwrap_or(10.0);
            let rep = poincare_ratio(b, x, r, &suite, enlarge, &opts, &s.cfg)?;
            let mut csv = String::from("function,lhs,rhs,ratio,flagged\n");
            for e in &rep.entries {
                writeln!(
                    csv,
                    "{},{:.12e},{:.12e},{:.12e},{}",
                    e.name, e.lhs, e.rhs, e.ratio, e.flagged
                )?;
            }
            let summary = format!("max ratio {:.4} ({})", rep.max_ratio, rep.argmax);
            Outcome {
                result: json!({
                    "estimate": rep.max_ratio,
                    "bound": bound,
                    "samples": opts.samples,
                    "oracle_mix": { "inner": rep.inner.oracle_mix, "outer": rep.outer.oracle_mix },
                    "report": rep,
                }),
                files: vec![("data.csv", csv)],
                falsified: !(rep.max_ratio <= bound),
                summary,
            }
        }
        Command::Suite => unreachable!("handled above"),
    })
}

fn run_suite_command(c: &ExperimentConfig) -> Result<Outcome> {
    let mut opts = SuiteOptions::default();
    if let Some(seed) = c.seed {
        opts.seeds = [seed, seed.wrapping_add(1)];
    }
    if let Some(n) = c.samples {
        opts.measure_samples = n;
        opts.poincare_samples = n;
    }
    match &c.family {
        None => {}
        Some(config::FamilySource::Name(n)) => {
            ccgeo_core::families::builtin(n).map_err(|e| anyhow!("family: {e}"))?;
            opts.family = Some(n.clone());
        }
        Some(config::FamilySource::Inline(_)) => {
            bail!("family: suite runs on built-in families only")
        }
    }
    let ids = match &c.only {
        Some(k) => vec![criterion_id(k)?],
        None => Vec::new(),
    };
    let cfg = c.integrator()?;
    let reports = run_suite(&ids, &opts, &cfg)?;
    if reports.is_empty() {
        bail!("only: no criterion applies to the selected family");
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    let summary = reports
        .iter()
        .map(|r| r.line())
        .collect::<Vec<_>>()
        .join("\n");
    Ok(Outcome {
        result: json!({ "criteria": reports, "failed": failed }),
        files: Vec::new(),
        falsified: failed > 0,
        summary,
    })
}

fn threads() -> Result<Option<usize>> {
    match std::env::var("CCGEO_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => bail!("CCGEO_THREADS: expected a positive integer, got '{v}'"),
        },
    }
}

fn execute(cli: &Cli) -> Result<bool> {
    let config = cli.flags.resolve()?;
    let threads = threads()?;
    let outcome = run(cli.command, &config)?;
    let report = json!({
        "command": cli.command.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "threads": threads.unwrap_or(1),
        "verdict": if outcome.falsified { "falsified" } else { "ok" },
        "result": outcome.result,
    });
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match &config.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)
                .map_err(|e| anyhow!("out: cannot create {}: {e}", dir.display()))?;
            std::fs::write(dir.join("report.json"), text)?;
            for (name, body) in &outcome.files {
                std::fs::write(dir.join(name), body)?;
            }
            println!("{}", outcome.summary);
        }
        None => print!("{text}"),
    }
    Ok(outcome.falsified)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
