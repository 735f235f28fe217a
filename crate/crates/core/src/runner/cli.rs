//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 runtime failure,
//! 3 selfcheck failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::plot::plot_metrics;
use super::{run_experiment, sweep_m, ExperimentConfig, OUT_DIR_ENV};
use crate::autodiff::check::{check_primitive, FD_STEP, PRIMITIVES};
use crate::autodiff::Tensor;
use crate::data::{export_csv, make_task, TaskSpec};
use crate::diagnostics::{bound_identity_check, kurtosis};
use crate::error::{Error, Result};
use crate::hdan::{check_objective_gradients, Architecture, DomainBatch, HdanModel, Method, ObjectiveSettings};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_SELFCHECK: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "hda", version, about = "Heuristic domain adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model and write metrics.csv and summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        /// Overrides the output directory of the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Target accuracy per number of heuristic heads, three seeds each.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "m", value_delimiter = ',', required = true)]
        m: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the datasets of a task spec as CSV files.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render SVG charts from a metrics.csv file.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient checks, bound identities and kurtosis closed forms.
    Selfcheck,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    match s {
        "hdan" => Ok(Method::Hdan),
        "source_only" => Ok(Method::SourceOnly),
        "dann_baseline" => Ok(Method::DannBaseline),
        other => Err(format!(
            "unknown method `{other}`; expected hdan, source_only or dann_baseline"
        )),
    }
}

/// Outcome of one selfcheck item.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

fn failed(name: &str, e: &Error) -> Check {
    check(name, false, e.to_string())
}

fn full_loss_check(seed: u64) -> Result<Check> {
    let arch = Architecture {
        d_in: 3,
        hidden: 6,
        num_classes: 3,
        heads: 2,
        num_domains: 2,
    };
    let model = HdanModel::<f64>::build(arch, seed)?;
    let x = |s: u64| {
        let v: Vec<f64> = (0..15).map(|i| ((i as f64 + 1.0) * (s as f64 + 1.3)).sin()).collect();
        Tensor::new(vec![5, 3], v)
    };
    let batches = [
        DomainBatch {
            x: x(seed)?,
            labels: Some(vec![0, 1, 2, 1, 0]),
            domain_id: 0,
        },
        DomainBatch {
            x: x(seed + 100)?,
            labels: None,
            domain_id: 1,
        },
    ];
    let r = check_objective_gradients(&model, &batches, &ObjectiveSettings::hdan(-1.0), FD_STEP)?;
    Ok(check(
        format!("hdan loss gradient (seed {seed})"),
        r.passes(1e-4),
        format!("max rel err {:.2e} over {} params", r.max_relative_error, r.checked),
    ))
}

/// Runs every selfcheck item.
pub fn selfcheck() -> Vec<Check> {
    let mut out = Vec::new();
    for (kind, name) in PRIMITIVES.iter().enumerate() {
        let name = format!("gradient {name}");
        out.push(match check_primitive(kind, 1000 + kind as u64) {
            Ok(r) => check(
                &name,
                r.passes(1e-6),
                format!("max rel err {:.2e}", r.max_relative_error),
            ),
            Err(e) => failed(&name, &e),
        });
    }
    for seed in 0..3 {
        out.push(full_loss_check(seed).unwrap_or_else(|e| failed("hdan loss gradient", &e)));
    }

    let mut worst = 0.0f64;
    let mut ok = true;
    for i in 0..200u64 {
        let v = |s: u64| -> Vec<f64> { (0..6).map(|j| ((s * 7 + j) as f64 * 0.731).sin() * 3.0).collect() };
        let k = ((i as f64 + 1.0) / 200.0).min(1.0);
        let f = Tensor::new(vec![2, 3], v(i)).expect("shape");
        let fs = Tensor::new(vec![2, 3], v(i + 1000)).expect("shape");
        match bound_identity_check(&f, &fs, k) {
            Ok(r) => {
                worst = worst.max(r.identity_residual).max((r.risk_g - r.scaled_risk_f).abs());
                ok &= r.holds(1e-12);
            }
            Err(_) => ok = false,
        }
    }
    out.push(check(
        "bound identity",
        ok,
        format!("max deviation {worst:.2e} over 200 triples"),
    ));

    let rademacher = Tensor::<f64>::new(vec![8, 1], vec![1.0, -1.0, 1.0, -1.0, -1.0, 1.0, -1.0, 1.0]).expect("shape");
    out.push(match kurtosis(&rademacher) {
        Ok(k) => check("kurtosis rademacher", (k + 2.0).abs() <= 1e-9, format!("{k}")),
        Err(e) => failed("kurtosis rademacher", &e),
    });
    let n = 100_000;
    let uniform = Tensor::<f64>::new(vec![n, 1], (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect()).expect("shape");
    out.push(match kurtosis(&uniform) {
        Ok(k) => check("kurtosis uniform grid", (k + 1.2).abs() <= 0.05, format!("{k}")),
        Err(e) => failed("kurtosis uniform grid", &e),
    });
    out
}

fn load_config(path: &Path) -> std::result::Result<ExperimentConfig, i32> {
    ExperimentConfig::load(path).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_USAGE
    })
}

fn runtime<T>(r: Result<T>) -> std::result::Result<T, i32> {
    r.map_err(|e| {
        eprintln!("error: {e}");
        EXIT_RUNTIME
    })
}

fn dispatch(cmd: Command, stdout: &mut dyn Write) -> std::result::Result<(), i32> {
    match cmd {
        Command::Run {
            config,
            seed,
            method,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(m) = method {
                cfg.method = m;
            }
            if out.is_some() {
                cfg.output_dir = out;
            }
            let summary = runtime(run_experiment(&cfg))?;
            let _ = writeln!(
                stdout,
                "{}: final target_acc {:.4}, best {:.4}, wrote {}",
                summary.status,
                summary.final_target_acc,
                summary.best_target_acc,
                cfg.resolved_output_dir().display()
            );
            if summary.is_ok() {
                Ok(())
            } else {
                Err(EXIT_RUNTIME)
            }
        }
        Command::Sweep { config, m, out } => {
            let cfg = load_config(&config)?;
            if m.contains(&0) {
                eprintln!("error: M values must be >= 1");
                return Err(EXIT_USAGE);
            }
            let dir = out.unwrap_or_else(|| {
                std::env::var_os(OUT_DIR_ENV)
                    .map_or_else(|| PathBuf::from("runs"), PathBuf::from)
                    .join("sweep")
            });
            let rows = runtime(sweep_m(&cfg, &m, &dir))?;
            for r in rows {
                let _ = writeln!(
                    stdout,
                    "M={} mean {:.4} std {:.4}",
                    r.m, r.mean_target_acc, r.std_target_acc
                );
            }
            Ok(())
        }
        Command::GenData { spec, out } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| {
                eprintln!("error: {}: {e}", spec.display());
                EXIT_USAGE
            })?;
            let spec: TaskSpec = serde_json::from_str(&text).map_err(|e| {
                eprintln!("error: {e}");
                EXIT_USAGE
            })?;
            let task = runtime(make_task::<f64>(&spec))?;
            runtime(std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e)))?;
            let mut sets = task.sources.clone();
            sets.push(task.target_unlabeled.clone());
            sets.extend(task.target_labeled.clone());
            sets.push(task.target_eval.clone());
            for ds in &sets {
                let p = out.join(format!("{}.csv", ds.name));
                runtime(export_csv(ds, &p))?;
                let _ = writeln!(stdout, "{}", p.display());
            }
            Ok(())
        }
        Command::Plot { metrics, out } => {
            for p in runtime(plot_metrics(&metrics, &out))? {
                let _ = writeln!(stdout, "{}", p.display());
            }
            Ok(())
        }
        Command::Selfcheck => {
            let checks = selfcheck();
            let passed = checks.iter().filter(|c| c.passed).count();
            for c in &checks {
                let mark = if c.passed { "ok  " } else { "FAIL" };
                let _ = writeln!(stdout, "{mark} {}: {}", c.name, c.detail);
            }
            let _ = writeln!(stdout, "selfcheck: {passed}/{} passed", checks.len());
            if passed == checks.len() {
                Ok(())
            } else {
                Err(EXIT_SELFCHECK)
            }
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    EXIT_OK
                }
                _ => {
                    let _ = e.print();
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli.command, &mut std::io::stdout()) {
        Ok(()) => EXIT_OK,
        Err(code) => code,
    }
}
