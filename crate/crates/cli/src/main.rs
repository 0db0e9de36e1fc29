use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use okddip::config::RunConfig;
use okddip::experiment::{build_group, load_data, run_seed, train_teacher, Splits};
use okddip::metrics::{emit_csv, ExperimentReport};
use okddip::models::{load_checkpoint, save_checkpoint, Classifier};
use okddip::training::{evaluate_group, Method};
use okddip::verify;

/// Online knowledge distillation with diverse peers.
#[derive(Parser)]
#[command(name = "okddip", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one method; writes a CSV report, config sidecar, checkpoint and log per run.
    Train(RunArgs),
    /// Load a checkpoint and print leader and ensemble test errors.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Full OKDDip plus every attention/two-level ablation on identical data and init.
    Ablate(RunArgs),
    /// Per-epoch peer diversity of okddip vs mean ablation vs independent.
    DiversityReport(RunArgs),
    /// Finite-difference check of the full loss and the KL ≈ MSE probe.
    Gradcheck,
    /// The complete property suite.
    Selftest,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Config file (`key = value`, TOML syntax). Defaults apply without one.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seed list, e.g. `1,2,3`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    method: Option<Method>,
    /// Group size, or an inclusive range such as `3..8`.
    #[arg(long, value_parser = parse_m)]
    m: Option<GroupSizes>,
    /// Epoch count; the learning-rate drops and ramp-up length scale with it.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Clone)]
struct GroupSizes(Vec<usize>);

fn parse_m(s: &str) -> std::result::Result<GroupSizes, String> {
    let bad = |_| format!("expected N or A..B, got {s:?}");
    match s.split_once("..") {
        Some((a, b)) => {
            let (a, b): (usize, usize) = (a.trim().parse().map_err(bad)?, b.trim().parse().map_err(bad)?);
            if a > b {
                return Err(format!("empty range {s:?}"));
            }
            Ok(GroupSizes((a..=b).collect()))
        }
        None => Ok(GroupSizes(vec![s.trim().parse().map_err(bad)?])),
    }
}

impl RunArgs {
    /// File config with command-line overrides applied.
    fn base_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_path(p)?,
            None => RunConfig::default(),
        };
        if let Some(e) = self.epochs {
            cfg.train = cfg.train.clone().with_epochs(e);
        }
        if let Some(m) = self.method {
            cfg.train.method = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn seeds(&self, cfg: &RunConfig) -> Vec<u64> {
        match (&self.seeds, self.seed) {
            (Some(s), _) => s.clone(),
            (None, Some(s)) => vec![s],
            (None, None) => vec![cfg.train.seed],
        }
    }

    fn group_sizes(&self, cfg: &RunConfig) -> Vec<usize> {
        self.m.clone().map_or_else(|| vec![cfg.m], |g| g.0)
    }
}

fn run_stem(method: Method, m: usize, seed: u64) -> String {
    format!("{}-m{m}-seed{seed}", method.to_string().replace(':', "-"))
}

/// One seed's data and, when any method needs it, its teacher.
struct Prepared {
    splits: Splits,
    teacher: Option<Classifier>,
}

fn prepare(cfg: &RunConfig, seed: u64, methods: &[Method]) -> Result<Prepared> {
    let splits = load_data(cfg, seed).with_context(|| format!("loading data for seed {seed}"))?;
    let teacher = if methods.iter().any(|m| m.needs_teacher()) {
        let (t, err) = train_teacher(cfg, &splits, seed)?;
        println!("seed {seed}: teacher test error {err:.2}%");
        Some(t)
    } else {
        None
    };
    Ok(Prepared { splits, teacher })
}

/// Trains one (method, m, seed) and writes its artifacts.
fn run_one(base: &RunConfig, prep: &Prepared, method: Method, m: usize, seed: u64, out: &Path) -> Result<ExperimentReport> {
    let mut cfg = base.clone();
    cfg.m = m;
    cfg.train.method = method;
    cfg.validate()?;
    let stem = run_stem(method, m, seed);
    let mut log = String::new();
    let (group, report) = run_seed(&cfg, seed, &prep.splits, prep.teacher.as_ref(), |row| {
        let _ = writeln!(
            log,
            "epoch {:>4}  lr {:.5}  rampup {:.4}  loss {:.5}  error {:.2}%  ensemble {:.2}%  diversity {:.4}",
            row.epoch, row.lr, row.rampup, row.loss, row.reported_error, row.ensemble_error, row.diversity
        );
    })
    .with_context(|| stem.clone())?;
    emit_csv(&report, out.join(format!("{stem}.csv")))?;
    save_checkpoint(&group, out.join(format!("{stem}.ckpt.json")))?;
    let log_path = out.join(format!("{stem}.log"));
    fs::write(&log_path, log).with_context(|| log_path.display().to_string())?;
    if let Some(last) = report.last() {
        println!(
            "{stem}: error {:.2}%  ensemble {:.2}%  diversity {:.4}",
            last.reported_error, last.ensemble_error, last.diversity
        );
    }
    Ok(report)
}

/// Runs every method × group size for each seed, seeds in parallel. Data and
/// initialization seeds are shared across methods within a seed.
fn sweep(args: &RunArgs, methods: &[Method]) -> Result<Vec<(u64, usize, Method, ExperimentReport)>> {
    let cfg = args.base_config()?;
    fs::create_dir_all(&args.out).with_context(|| args.out.display().to_string())?;
    let sizes = args.group_sizes(&cfg);
    let per_seed: Vec<Result<Vec<_>>> = args
        .seeds(&cfg)
        .into_par_iter()
        .map(|seed| {
            let prep = prepare(&cfg, seed, methods)?;
            let mut done = Vec::new();
            for &m in &sizes {
                for &method in methods {
                    done.push((seed, m, method, run_one(&cfg, &prep, method, m, seed, &args.out)?));
                }
            }
            Ok(done)
        })
        .collect();
    let mut all = Vec::new();
    for r in per_seed {
        all.extend(r?);
    }
    Ok(all)
}

fn diversity_report(args: &RunArgs) -> Result<()> {
    let methods = [Method::Okddip, "ablation:mean".parse()?, Method::Independent];
    let runs = sweep(args, &methods)?;
    let mut keys: Vec<(u64, usize)> = runs.iter().map(|(s, m, _, _)| (*s, *m)).collect();
    keys.dedup();
    for (seed, m) in keys {
        let reports: Vec<&ExperimentReport> = methods
            .iter()
            .map(|&meth| {
                &runs
                    .iter()
                    .find(|(s, mm, me, _)| *s == seed && *mm == m && *me == meth)
                    .expect("every method ran")
                    .3
            })
            .collect();
        let mut text = String::from("epoch,okddip,mean,independent\n");
        for (i, row) in reports[0].rows.iter().enumerate() {
            let _ = write!(text, "{}", row.epoch);
            for r in &reports {
                let _ = write!(text, ",{:.6}", r.rows[i].diversity);
            }
            text.push('\n');
        }
        let path = args.out.join(format!("diversity-m{m}-seed{seed}.csv"));
        fs::write(&path, text).with_context(|| path.display().to_string())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn evaluate(args: &RunArgs, checkpoint: &Path) -> Result<()> {
    let cfg = args.base_config()?;
    let group = load_checkpoint(checkpoint)?;
    let seed = args.seeds(&cfg)[0];
    let splits = load_data(&cfg, seed)?;
    // Same geometry check the trainer would apply.
    let expected = build_group(&cfg, &splits, seed)?;
    if expected.config().input != group.config().input || expected.config().num_classes != group.config().num_classes {
        bail!("checkpoint does not match the configured dataset's input shape or class count");
    }
    let (errors, reported, ens, div) = evaluate_group(&group, &splits.test, cfg.train.method)?;
    let students: Vec<String> = errors.iter().map(|e| format!("{e:.2}")).collect();
    println!("students: [{}]%", students.join(", "));
    println!("leader error {:.2}%", errors[group.leader()]);
    println!("reported error ({}) {reported:.2}%", cfg.train.method);
    println!("ensemble error {ens:.2}%");
    println!("peer diversity {div:.4}");
    Ok(())
}

fn report_checks(checks: &[verify::Check]) -> Result<()> {
    for c in checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        bail!("{failed} of {} checks failed", checks.len());
    }
    Ok(())
}

fn gradcheck() -> Result<()> {
    for detach in [true, false] {
        let r = verify::okddip_gradcheck_report(detach, 1)?;
        println!(
            "detach_targets={detach}: max relative discrepancy {:.3e} over {} parameters",
            r.max_discrepancy, r.num_params
        );
    }
    report_checks(&[verify::check_gradients(), verify::check_mse_probe()])
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let method = args.base_config()?.train.method;
            sweep(&args, &[method]).map(drop)
        }
        Command::Evaluate { run, checkpoint } => evaluate(&run, &checkpoint),
        Command::Ablate(args) => {
            let methods: Vec<Method> = std::iter::once(Method::Okddip).chain(Method::ABLATIONS).collect();
            let runs = sweep(&args, &methods)?;
            println!("{} reports in {}", runs.len(), args.out.display());
            Ok(())
        }
        Command::DiversityReport(args) => diversity_report(&args),
        Command::Gradcheck => gradcheck(),
        Command::Selftest => report_checks(&verify::property_suite()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
