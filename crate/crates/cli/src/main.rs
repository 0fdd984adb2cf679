//! Command-line front end for the reducibility engine.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qpkam::config::ExperimentConfig;
use qpkam::measure::excluded_fraction;
use qpkam::pipeline::{run_pipeline, write_run_dir, RunStatus, StopAfter};
use qpkam::Error;
use rayon::prelude::*;

const EXIT_IO: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "qpkam", version, about = "Reducibility of quasi-periodically forced transport operators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Straighten the transport field.
    Straighten(RunArgs),
    /// Straighten, then lower the order of the perturbation.
    Smooth(RunArgs),
    /// Straighten, smooth and run the KAM diagonalization.
    Reduce(RunArgs),
    /// Full reduction followed by the direct-integration cross-check.
    Evolve(RunArgs),
    /// Monte Carlo estimate of the excluded parameter fraction.
    Measure(RunArgs),
    /// Every stage, honouring the stage toggles of the config.
    Full(RunArgs),
    /// Run the [sweep] grid of the config in parallel.
    Sweep(RunArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output root; defaults to output_dir from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for sweeps and parallel scans.
    #[arg(long)]
    workers: Option<usize>,
    /// KEY=VALUE with a dotted config key; may repeat.
    #[arg(long = "override", value_name = "KEY=VAL")]
    overrides: Vec<String>,
    /// Name of the run directory; defaults to the config file stem.
    #[arg(long)]
    run_id: Option<String>,
}

impl RunArgs {
    fn all_overrides(&self) -> Vec<String> {
        let mut o = self.overrides.clone();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        o
    }

    fn run_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        let root = self.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
        let id = self.run_id.clone().unwrap_or_else(|| {
            self.config
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".into())
        });
        root.join(id)
    }
}

fn fail(code: u8, e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(code)
}

fn error_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => EXIT_IO,
        Error::Config(_) => EXIT_CONFIG,
        other => qpkam::pipeline::FailureKind::classify(other).exit_code(),
    }
}

fn load(args: &RunArgs, extra: &[String]) -> Result<(ExperimentConfig, Vec<String>), Error> {
    let mut overrides = args.all_overrides();
    overrides.extend_from_slice(extra);
    let cfg = ExperimentConfig::load(&args.config, &overrides)?;
    Ok((cfg, overrides))
}

fn run_single(args: &RunArgs, stop: StopAfter, force_dynamics: bool) -> ExitCode {
    let extra: Vec<String> = if force_dynamics { vec!["stages.dynamics=true".into()] } else { Vec::new() };
    let (cfg, overrides) = match load(args, &extra) {
        Ok(v) => v,
        Err(e) => return fail(error_code(&e), &e),
    };
    let dir = args.run_dir(&cfg);
    let result = run_pipeline(&cfg, stop, &overrides).and_then(|out| {
        write_run_dir(&dir, &cfg, &out)?;
        Ok(out)
    });
    match result {
        Ok(out) => {
            let status = &out.report.status;
            println!("{}: {}", dir.display(), describe(status));
            ExitCode::from(status.exit_code())
        }
        Err(e) => fail(error_code(&e), &e),
    }
}

fn describe(status: &RunStatus) -> String {
    match status {
        RunStatus::Completed => "completed".into(),
        RunStatus::Excluded { stage, kind, message, .. } => format!("excluded at {stage:?} ({kind:?}): {message}"),
        RunStatus::Failed { stage, kind, message } => format!("failed at {stage:?} ({kind:?}): {message}"),
    }
}

fn run_measure(args: &RunArgs) -> ExitCode {
    let (cfg, _) = match load(args, &[]) {
        Ok(v) => v,
        Err(e) => return fail(error_code(&e), &e),
    };
    let dir = args.run_dir(&cfg);
    let result = excluded_fraction(&cfg).and_then(|rep| {
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("measure.csv"), rep.csv())?;
        std::fs::write(dir.join("measure.json"), serde_json::to_string_pretty(&rep)? + "\n")?;
        std::fs::write(dir.join("effective_config"), cfg.to_toml()?)?;
        Ok(rep)
    });
    match result {
        Ok(rep) => {
            let slope = rep.slope.map_or("n/a".to_string(), |f| format!("{:.3}", f.slope));
            println!("{}: {} γ values, log-log slope {slope}", dir.display(), rep.rows.len());
            ExitCode::SUCCESS
        }
        Err(e) => fail(error_code(&e), &e),
    }
}

struct PointResult {
    index: usize,
    overrides: Vec<String>,
    status: Result<RunStatus, String>,
    max_abs_re: Option<f64>,
    inclusion_violations: Option<usize>,
}

fn run_sweep(args: &RunArgs) -> ExitCode {
    let (cfg, base_overrides) = match load(args, &[]) {
        Ok(v) => v,
        Err(e) => return fail(error_code(&e), &e),
    };
    let Some(sweep) = cfg.sweep.clone() else {
        return fail(EXIT_CONFIG, &Error::Config("the config has no [sweep] section".into()));
    };
    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_IO, &e.into()),
    };
    let root = args.run_dir(&cfg);
    let points = sweep.points();
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(args.workers.unwrap_or(sweep.workers))
        .build()
    {
        Ok(p) => p,
        Err(e) => return fail(EXIT_IO, &Error::Numerical(e.to_string())),
    };
    let results: Vec<PointResult> = pool.install(|| {
        points
            .par_iter()
            .enumerate()
            .map(|(index, pt)| sweep_point(&text, &base_overrides, pt, index, &root))
            .collect()
    });
    let mut csv = String::from("point,overrides,status,max_abs_re_lambda,inclusion_violations\n");
    let mut code = 0u8;
    for r in &results {
        let status = match &r.status {
            Ok(s) => {
                if let RunStatus::Failed { .. } = s {
                    code = code.max(s.exit_code());
                }
                describe(s)
            }
            Err(e) => {
                code = code.max(EXIT_CONFIG);
                format!("error: {e}")
            }
        };
        let fmt = |v: Option<String>| v.unwrap_or_default();
        csv.push_str(&format!(
            "{},\"{}\",\"{}\",{},{}\n",
            r.index,
            r.overrides.join(" ").replace('"', "'"),
            status.replace('"', "'"),
            fmt(r.max_abs_re.map(|v| format!("{v:e}"))),
            fmt(r.inclusion_violations.map(|v| v.to_string())),
        ));
    }
    if let Err(e) = std::fs::create_dir_all(&root).and_then(|_| std::fs::write(root.join("sweep.csv"), csv)) {
        return fail(EXIT_IO, &e.into());
    }
    println!("{}: {} points", root.display(), results.len());
    ExitCode::from(code)
}

fn sweep_point(text: &str, base: &[String], point: &[String], index: usize, root: &Path) -> PointResult {
    let mut overrides = base.to_vec();
    overrides.extend_from_slice(point);
    let mut res = PointResult {
        index,
        overrides: point.to_vec(),
        status: Err(String::new()),
        max_abs_re: None,
        inclusion_violations: None,
    };
    let run = ExperimentConfig::with_overrides(text, &overrides).and_then(|cfg| {
        let out = run_pipeline(&cfg, StopAfter::Full, &overrides)?;
        write_run_dir(&root.join(format!("point-{index:04}")), &cfg, &out)?;
        Ok(out)
    });
    match run {
        Ok(out) => {
            res.max_abs_re = out.report.max_abs_re_lambda;
            res.inclusion_violations = out.report.cantor.as_ref().and_then(|c| c.inclusion_violations);
            res.status = Ok(out.report.status);
        }
        Err(e) => res.status = Err(e.to_string()),
    }
    res
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let args = match &cli.command {
        Command::Straighten(a) | Command::Smooth(a) | Command::Reduce(a) | Command::Evolve(a) | Command::Measure(a) | Command::Full(a) | Command::Sweep(a) => a,
    };
    if let Some(w) = args.workers {
        if !matches!(cli.command, Command::Sweep(_)) {
            // one run at a time; the thread count only affects the inner parallel scans
            let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
        }
    }
    match &cli.command {
        Command::Straighten(a) => run_single(a, StopAfter::Straighten, false),
        Command::Smooth(a) => run_single(a, StopAfter::Smoothing, false),
        Command::Reduce(a) => run_single(a, StopAfter::Kam, false),
        Command::Evolve(a) => run_single(a, StopAfter::Full, true),
        Command::Full(a) => run_single(a, StopAfter::Full, false),
        Command::Measure(a) => run_measure(a),
        Command::Sweep(a) => run_sweep(a),
    }
}
