//! `cdon`: data generation, training, calibration, evaluation and ablations
//! for conformalized DeepONets.
//!
//! Exit codes: 0 success, 1 usage, 2 data or IO, 3 numerical failure.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use conformal_deeponet::conformal::CalibrationRecord;
use conformal_deeponet::datagen::{
    assemble_dataset, assemble_trajectories, read_opds, read_optraj, write_opds, write_optraj, Problem, Split,
};
use conformal_deeponet::evaluation::{
    ablation_adaptivity, ablation_calibration_size, coverages_csv, evaluate_coverage, lengths_csv, report_csv,
    run_experiment_on, run_multifidelity, CoverageReport, ExperimentConfig, ExperimentData, ExperimentResult,
    IntervalRule, ModelKind, MultiFidelityConfig, TrainedModel, DEFAULT_N_VAL,
};
use conformal_deeponet::operator::HeadKind;
use conformal_deeponet::training::{loss_log_csv, train_ensemble, train_model};
use conformal_deeponet::Error;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "cdon", version, about = "Conformalized DeepONet experiments")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a triplet file (train/calib/pool) or a trajectory file (test).
    Datagen {
        #[arg(long)]
        problem: String,
        #[arg(long)]
        split: String,
        /// Triplets, or trajectories for the test split.
        #[arg(long)]
        count: usize,
        /// Mesh points per trajectory (test split only).
        #[arg(long, default_value_t = 100)]
        n_eval: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a triplet file.
    Train {
        #[arg(long)]
        model: TrainKind,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Problem whose default architecture and epoch budget apply.
        #[arg(long)]
        problem: Option<String>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Loss log path (default: `<out>.loss.csv`).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Fit a conformal correction on a calibration triplet file.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Conformal and baseline coverage on a trajectory file.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        record: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Expected mesh points per trajectory.
        #[arg(long)]
        n_eval: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Interval adaptivity or calibration-size study.
    Ablation {
        #[arg(long)]
        kind: AblationKind,
        #[arg(long)]
        model: PathBuf,
        /// Trajectory file (adaptivity) or triplet pool (calib-size).
        #[arg(long)]
        data: PathBuf,
        /// Calibration record (adaptivity only).
        #[arg(long)]
        record: Option<PathBuf>,
        /// Comma-separated calibration sizes.
        #[arg(long, value_delimiter = ',', default_values_t = [500usize, 1000, 5000, 10000])]
        n: Vec<usize>,
        #[arg(long, default_value_t = 200)]
        rounds: usize,
        #[arg(long, default_value_t = DEFAULT_N_VAL)]
        n_val: usize,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run a full experiment with default sizes and architectures.
    Reproduce {
        #[arg(long)]
        experiment: Experiment,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model kinds for the single-problem experiments.
        #[arg(long, value_delimiter = ',', default_values_t = [ModelArg::Prob, ModelArg::Quantile])]
        models: Vec<ModelArg>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainKind {
    Point,
    Prob,
    Quantile,
    Ensemble,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ModelArg {
    Prob,
    Quantile,
    Ensemble,
}

impl std::fmt::Display for ModelArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(ModelKind::from(*self).as_str())
    }
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Prob => ModelKind::Prob,
            ModelArg::Quantile => ModelKind::Quantile,
            ModelArg::Ensemble => ModelKind::Ensemble,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationKind {
    Adaptivity,
    CalibSize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Experiment {
    Pendulum,
    Diffusion,
    Burgers,
    Multifidelity,
}

enum Failure {
    Usage(String),
    Io(PathBuf, std::io::Error),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn numerical(e: &Error) -> bool {
    match e {
        Error::NonFinite(_)
        | Error::Factorization(_)
        | Error::Unstable(_)
        | Error::Diverged { .. }
        | Error::InsufficientCalibration { .. } => true,
        Error::Sample { source, .. } => numerical(source),
        _ => false,
    }
}

impl Failure {
    fn report(&self) -> u8 {
        match self {
            Failure::Usage(msg) => {
                eprintln!("error: {msg}");
                1
            }
            Failure::Io(path, e) => {
                eprintln!("error: {}: {e}", path.display());
                2
            }
            Failure::Core(e) => {
                eprintln!("error: {e}");
                if numerical(e) {
                    3
                } else {
                    2
                }
            }
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::Io(path.to_path_buf(), e))
}

fn write(path: &Path, content: &str) -> CliResult<()> {
    fs::write(path, content).map_err(|e| Failure::Io(path.to_path_buf(), e))
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::Io(dir.to_path_buf(), e))
}

fn parse_problem(name: &str) -> CliResult<Problem> {
    name.parse().map_err(|e: Error| Failure::Usage(e.to_string()))
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        Some(p) => RunConfig::parse(&read(p)?).map_err(Failure::Usage),
        None => Ok(RunConfig::default()),
    }
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
    if let Some(n) = cli.threads {
        if n == 0 {
            return ExitCode::from(Failure::Usage("--threads must be at least 1".into()).report());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("global thread pool is configured once");
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => ExitCode::from(f.report()),
    }
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Datagen {
            problem,
            split,
            count,
            n_eval,
            seed,
            out,
        } => datagen(&problem, &split, count, n_eval, seed, &out),
        Command::Train {
            model,
            data,
            out,
            config,
            problem,
            alpha,
            epochs,
            seed,
            log,
        } => {
            let mut rc = load_config(config.as_deref())?;
            if let Some(p) = problem {
                rc.set("problem", p);
            }
            if let Some(a) = alpha {
                rc.set("alpha", a);
            }
            if let Some(e) = epochs {
                rc.set("epochs", e);
            }
            if let Some(s) = seed {
                rc.set("seed", s);
            }
            let log = log.unwrap_or_else(|| out.with_extension("loss.csv"));
            train(model, &rc, &data, &out, &log)
        }
        Command::Calibrate { model, data, alpha, out } => calibrate(&model, &data, alpha, &out),
        Command::Evaluate {
            model,
            record,
            data,
            n_eval,
            out_dir,
        } => evaluate(&model, &record, &data, n_eval, &out_dir),
        Command::Ablation {
            kind,
            model,
            data,
            record,
            n,
            rounds,
            n_val,
            alpha,
            seed,
            out_dir,
        } => {
            let trained = TrainedModel::from_text(&read(&model)?)?;
            ensure_dir(&out_dir)?;
            match kind {
                AblationKind::Adaptivity => {
                    let record = record.ok_or_else(|| Failure::Usage("--record is required for adaptivity".into()))?;
                    let record = CalibrationRecord::from_json(&read(&record)?)?;
                    let test = read_optraj(&read(&data)?)?;
                    let report = evaluate_coverage(&trained, IntervalRule::Conformal(&record), &test, "conformal")?;
                    let hist = ablation_adaptivity(&report)?;
                    write(&out_dir.join("lengths.csv"), &lengths_csv(&[&report]))?;
                    write(&out_dir.join("histogram.csv"), &hist.to_csv())?;
                    println!(
                        "interval lengths: mean {:.6} std {:.6} coefficient of variation {:.4}",
                        hist.mean,
                        hist.std,
                        hist.adaptivity()
                    );
                }
                AblationKind::CalibSize => {
                    if rounds == 0 || n.iter().any(|&k| k == 0) {
                        return Err(Failure::Usage("--rounds and every --n value must be at least 1".into()));
                    }
                    let pool = read_opds(&read(&data)?)?;
                    let study = ablation_calibration_size(&trained, &pool, &n, rounds, n_val, alpha, seed)?;
                    for (i, k) in study.n_values.iter().enumerate() {
                        write(&out_dir.join(format!("ablation_n{k}.csv")), &study.round_csv(i))?;
                        println!(
                            "n={k}: mean coverage {:.4} std {:.4} over {} rounds",
                            study.mean(i),
                            study.std(i),
                            study.rounds()
                        );
                    }
                }
            }
            Ok(())
        }
        Command::Reproduce {
            experiment,
            config,
            models,
            out_dir,
        } => reproduce(experiment, config.as_deref(), &models, &out_dir),
    }
}

fn datagen(problem: &str, split: &str, count: usize, n_eval: usize, seed: u64, out: &Path) -> CliResult<()> {
    let problem = parse_problem(problem)?;
    let split: Split = split.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
    if count == 0 || n_eval == 0 {
        return Err(Failure::Usage("--count and --n-eval must be at least 1".into()));
    }
    if split == Split::Test {
        let data = assemble_trajectories(problem, count, n_eval, seed)?;
        write(out, &write_optraj(&data))?;
        println!(
            "wrote {count} trajectories x {n_eval} points (m={}, d={}, seed={seed}) to {}",
            data.m,
            data.d,
            out.display()
        );
    } else {
        let data = assemble_dataset(problem, split, count, seed)?;
        write(out, &write_opds(&data)?)?;
        println!(
            "wrote {count} triplets (m={}, d={}, seed={seed}) to {}",
            problem.sensors(),
            problem.coord_dim(),
            out.display()
        );
    }
    Ok(())
}

fn experiment_config(rc: &RunConfig) -> CliResult<ExperimentConfig> {
    let problem = parse_problem(rc.get("problem").unwrap_or("pendulum"))?;
    let mut cfg = ExperimentConfig::defaults(problem);
    rc.apply(&mut cfg).map_err(Failure::Usage)?;
    Ok(cfg)
}

fn train(kind: TrainKind, rc: &RunConfig, data: &Path, out: &Path, log: &Path) -> CliResult<()> {
    let cfg = experiment_config(rc)?;
    let triplets = read_opds(&read(data)?)?;
    let train_cfg = cfg.train.clone();
    let head = match kind {
        TrainKind::Point => HeadKind::Point,
        TrainKind::Prob => HeadKind::Prob,
        TrainKind::Quantile => HeadKind::Quantile,
        TrainKind::Ensemble => {
            let ens = train_ensemble(cfg.ensemble_members, &triplets, &cfg.spec(HeadKind::Point), &train_cfg)?;
            write(out, &TrainedModel::Ensemble(ens).to_text())?;
            println!("trained {} ensemble members; model written to {}", cfg.ensemble_members, out.display());
            return Ok(());
        }
    };
    let outcome = train_model(head, &triplets, &cfg.spec(head), &train_cfg)?;
    write(out, &outcome.model.to_text())?;
    write(log, &loss_log_csv(&outcome.log))?;
    let last = outcome.log.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "trained {head} model ({} parameters, {} epochs); final loss {last:.6e}; model written to {}",
        outcome.model.num_params(),
        outcome.log.len(),
        out.display()
    );
    Ok(())
}

fn calibrate(model: &Path, data: &Path, alpha: f64, out: &Path) -> CliResult<()> {
    let trained = TrainedModel::from_text(&read(model)?)?;
    let calib = read_opds(&read(data)?)?;
    if calib.is_empty() {
        return Err(Failure::Core(Error::InvalidArgument("calibration set is empty".into())));
    }
    let record = trained.calibrate(&calib, alpha)?;
    write(out, &record.to_json()?)?;
    if record.is_unbounded() {
        eprintln!(
            "warning: n={} is too small for alpha={} (rank {} > n); q_hat is unbounded",
            record.n,
            record.alpha,
            record.rank()
        );
    }
    println!(
        "{} calibration: n={} alpha={} k={} q_hat={}",
        record.score_kind,
        record.n,
        record.alpha,
        record.rank(),
        record.q_hat
    );
    Ok(())
}

fn write_reports(out_dir: &Path, reports: &[&CoverageReport]) -> CliResult<()> {
    ensure_dir(out_dir)?;
    write(&out_dir.join("report.csv"), &report_csv(reports))?;
    write(&out_dir.join("coverages.csv"), &coverages_csv(reports))?;
    write(&out_dir.join("lengths.csv"), &lengths_csv(reports))?;
    for r in reports {
        println!("{}: mean coverage {:.2}%", r.model, r.mean_coverage_pct());
    }
    Ok(())
}

fn evaluate(model: &Path, record: &Path, data: &Path, n_eval: Option<usize>, out_dir: &Path) -> CliResult<()> {
    let trained = TrainedModel::from_text(&read(model)?)?;
    let record = CalibrationRecord::from_json(&read(record)?)?;
    let test = read_optraj(&read(data)?)?;
    if let Some(n) = n_eval {
        if n != test.n_eval {
            return Err(Failure::Core(Error::Incompatible(format!(
                "expected {n} points per trajectory, file has {}",
                test.n_eval
            ))));
        }
    }
    let name = trained.name();
    let conformal = evaluate_coverage(&trained, IntervalRule::Conformal(&record), &test, &format!("conformal-{name}"))?;
    let baseline = evaluate_coverage(&trained, IntervalRule::Baseline { alpha: record.alpha }, &test, name)?;
    write_reports(out_dir, &[&conformal, &baseline])
}

fn save_result(out_dir: &Path, res: &ExperimentResult) -> CliResult<()> {
    let name = res.model.name();
    write(&out_dir.join(format!("{name}.model")), &res.model.to_text())?;
    write(&out_dir.join(format!("{name}.record.json")), &res.record.to_json()?)?;
    if !res.log.is_empty() {
        write(&out_dir.join(format!("{name}.loss.csv")), &loss_log_csv(&res.log))?;
    }
    println!(
        "{name}: q_hat={} (k={} of n={})",
        res.record.q_hat,
        res.record.rank(),
        res.record.n
    );
    Ok(())
}

fn reproduce(experiment: Experiment, config: Option<&Path>, models: &[ModelArg], out_dir: &Path) -> CliResult<()> {
    let rc = load_config(config)?;
    ensure_dir(out_dir)?;
    let results = match experiment {
        Experiment::Multifidelity => {
            let mut cfg = MultiFidelityConfig::default();
            rc.apply_multifidelity(&mut cfg).map_err(Failure::Usage)?;
            vec![run_multifidelity(&cfg)?]
        }
        _ => {
            let problem = match experiment {
                Experiment::Pendulum => Problem::pendulum(),
                Experiment::Diffusion => Problem::diffusion(),
                _ => Problem::burgers(),
            };
            if let Some(p) = rc.get("problem") {
                if parse_problem(p)?.name() != problem.name() {
                    return Err(Failure::Usage(format!("config problem {p:?} conflicts with --experiment")));
                }
            }
            let mut cfg = ExperimentConfig::defaults(problem);
            rc.apply(&mut cfg).map_err(Failure::Usage)?;
            let data = ExperimentData::generate(&cfg)?;
            let mut seen = Vec::new();
            let mut results = Vec::new();
            for &m in models {
                if !seen.contains(&m) {
                    seen.push(m);
                    results.push(run_experiment_on(&data, &cfg, m.into())?);
                }
            }
            results
        }
    };
    for r in &results {
        save_result(out_dir, r)?;
    }
    let mut reports: Vec<&CoverageReport> = results.iter().map(|r| &r.conformal).collect();
    reports.extend(results.iter().map(|r| &r.baseline));
    write_reports(out_dir, &reports)
}
