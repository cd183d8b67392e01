//! Coverage evaluation, the end-to-end experiment pipelines and the two
//! ablation studies.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::conformal::{
    conformal_quantile, conformal_rank, conformalize_cqr, conformalize_musigma, cqr_score, normalized_residual_score,
    predict_interval, CalibrationRecord, MeanStdPredictor, ModelOutput, PredictionInterval, QuantilePredictor,
    ScoreKind, SIGMA_FLOOR,
};
use crate::datagen::{assemble_dataset, assemble_trajectories, JumpTarget, Problem, Split, TrajectoryDataset};
use crate::error::{check_alpha, check_len, Error, Result};
use crate::operator::{DeepONetModel, DeepONetSpec, EnsembleModel, HeadKind, MeanStd, SubnetSpec};
use crate::textio::Lines;
use crate::training::{
    train_ensemble, train_model, EpochRecord, OperatorTriplet, TrainConfig, TripletArrays,
};

/// Fraction of `truths` inside the matching closed intervals.
pub fn trajectory_coverage(intervals: &[PredictionInterval], truths: &[f64]) -> Result<f64> {
    check_len("trajectory truths", intervals.len(), truths.len())?;
    if intervals.is_empty() {
        return Err(Error::invalid("a trajectory needs at least one point"));
    }
    let hits = intervals.iter().zip(truths).filter(|(c, &g)| c.contains(g)).count();
    Ok(hits as f64 / intervals.len() as f64)
}

/// Per-trajectory coverages and interval lengths of one model on a test set.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub model: String,
    pub alpha: f64,
    pub n_eval: usize,
    pub coverages: Vec<f64>,
    /// Trajectory-major, `n_eval` entries per trajectory.
    pub lengths: Vec<f64>,
}

impl CoverageReport {
    pub fn n_traj(&self) -> usize {
        self.coverages.len()
    }

    pub fn mean_coverage(&self) -> f64 {
        self.coverages.iter().sum::<f64>() / self.coverages.len() as f64
    }

    pub fn mean_coverage_pct(&self) -> f64 {
        100.0 * self.mean_coverage()
    }
}

/// `report.csv`: one row per report.
pub fn report_csv(reports: &[&CoverageReport]) -> String {
    let mut s = String::from("model,alpha,mean_coverage,mean_coverage_pct,n_traj,n_eval\n");
    for r in reports {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.model,
            r.alpha,
            r.mean_coverage(),
            r.mean_coverage_pct(),
            r.n_traj(),
            r.n_eval
        ));
    }
    s
}

/// `coverages.csv`: one row per (model, trajectory).
pub fn coverages_csv(reports: &[&CoverageReport]) -> String {
    let mut s = String::from("model,trajectory,coverage\n");
    for r in reports {
        for (j, c) in r.coverages.iter().enumerate() {
            s.push_str(&format!("{},{j},{c}\n", r.model));
        }
    }
    s
}

/// `lengths.csv`: one row per (model, trajectory, mesh point).
pub fn lengths_csv(reports: &[&CoverageReport]) -> String {
    let mut s = String::from("model,trajectory,point,length\n");
    for r in reports {
        for (i, l) in r.lengths.iter().enumerate() {
            s.push_str(&format!("{},{},{},{l}\n", r.model, i / r.n_eval, i % r.n_eval));
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Prob,
    Quantile,
    /// Deep ensemble of point models.
    Ensemble,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Prob => "prob",
            ModelKind::Quantile => "quantile",
            ModelKind::Ensemble => "ensemble",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prob" => Ok(ModelKind::Prob),
            "quantile" => Ok(ModelKind::Quantile),
            "ensemble" => Ok(ModelKind::Ensemble),
            other => Err(Error::invalid(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Low-fidelity point model plus a Gaussian residual model; predicts
/// `N(mu + y_lf, sigma)`.
#[derive(Debug, Clone)]
pub struct MultiFidelityModel {
    low: DeepONetModel,
    residual: DeepONetModel,
}

impl MultiFidelityModel {
    pub fn new(low: DeepONetModel, residual: DeepONetModel) -> Result<Self> {
        if low.head_kind() != HeadKind::Point || residual.head_kind() != HeadKind::Prob {
            return Err(Error::Incompatible(
                "a multi-fidelity model pairs a point model with a prob model".into(),
            ));
        }
        let (a, b) = (low.spec(), residual.spec());
        if (a.m, a.d) != (b.m, b.d) {
            return Err(Error::Incompatible("fidelity models disagree on m or d".into()));
        }
        Ok(Self { low, residual })
    }

    pub fn low(&self) -> &DeepONetModel {
        &self.low
    }

    pub fn residual(&self) -> &DeepONetModel {
        &self.residual
    }
}

impl MeanStdPredictor for MultiFidelityModel {
    fn mean_std_rows(&self, u: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Vec<MeanStd>> {
        let low = self.low.predict_rows(u, x)?;
        let res = self.residual.mean_std_rows(u, x)?;
        Ok(res
            .into_iter()
            .zip(low.column(0))
            .map(|(r, &y)| MeanStd {
                mean: r.mean + y,
                std: r.std,
            })
            .collect())
    }
}

/// Any model that yields intervals after calibration.
#[derive(Debug, Clone)]
pub enum TrainedModel {
    Prob(DeepONetModel),
    Quantile(DeepONetModel),
    Ensemble(EnsembleModel),
    MultiFidelity(MultiFidelityModel),
}

impl TrainedModel {
    pub fn from_deeponet(model: DeepONetModel) -> Result<Self> {
        match model.head_kind() {
            HeadKind::Prob => Ok(TrainedModel::Prob(model)),
            HeadKind::Quantile => Ok(TrainedModel::Quantile(model)),
            HeadKind::Point => Err(Error::Incompatible(
                "a single point model has no uncertainty estimate".into(),
            )),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrainedModel::Prob(_) => "prob",
            TrainedModel::Quantile(_) => "quantile",
            TrainedModel::Ensemble(_) => "ensemble",
            TrainedModel::MultiFidelity(_) => "multifidelity",
        }
    }

    pub fn score_kind(&self) -> ScoreKind {
        match self {
            TrainedModel::Quantile(_) => ScoreKind::Cqr,
            _ => ScoreKind::NormalizedResidual,
        }
    }

    /// Sensor count and coordinate dimension.
    pub fn dims(&self) -> (usize, usize) {
        let spec = match self {
            TrainedModel::Prob(m) | TrainedModel::Quantile(m) => m.spec(),
            TrainedModel::Ensemble(e) => e.spec(),
            TrainedModel::MultiFidelity(mf) => mf.residual.spec(),
        };
        (spec.m, spec.d)
    }

    pub fn outputs(&self, u: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Vec<ModelOutput>> {
        let gauss = |v: Vec<MeanStd>| v.into_iter().map(ModelOutput::MeanStd).collect();
        Ok(match self {
            TrainedModel::Prob(m) => gauss(m.mean_std_rows(u, x)?),
            TrainedModel::Ensemble(e) => gauss(e.mean_std_rows(u, x)?),
            TrainedModel::MultiFidelity(mf) => gauss(mf.mean_std_rows(u, x)?),
            TrainedModel::Quantile(m) => m.quantile_rows(u, x)?.into_iter().map(ModelOutput::Quantiles).collect(),
        })
    }

    pub fn calibrate(&self, calib: &[OperatorTriplet], alpha: f64) -> Result<CalibrationRecord> {
        match self {
            TrainedModel::Prob(m) => conformalize_musigma(m, calib, alpha),
            TrainedModel::Ensemble(e) => conformalize_musigma(e, calib, alpha),
            TrainedModel::MultiFidelity(mf) => conformalize_musigma(mf, calib, alpha),
            TrainedModel::Quantile(m) => conformalize_cqr(m, calib, alpha),
        }
    }

    pub fn to_text(&self) -> String {
        match self {
            TrainedModel::Prob(m) | TrainedModel::Quantile(m) => m.to_text(),
            TrainedModel::Ensemble(e) => {
                let mut s = String::new();
                e.write_text(&mut s);
                s
            }
            TrainedModel::MultiFidelity(mf) => {
                let mut s = String::from("multifidelity v1\n");
                mf.low.write_text(&mut s);
                mf.residual.write_text(&mut s);
                s
            }
        }
    }

    /// Parse any of the `deeponet`, `ensemble` or `multifidelity` containers.
    pub fn from_text(text: &str) -> Result<Self> {
        let first = text.lines().next().unwrap_or("").trim();
        if first.starts_with("ensemble v1") {
            Ok(TrainedModel::Ensemble(EnsembleModel::from_text(text)?))
        } else if first == "multifidelity v1" {
            let mut lines = Lines::new(text);
            lines.expect_tag("multifidelity v1")?;
            let low = DeepONetModel::read_text(&mut lines)?;
            let residual = DeepONetModel::read_text(&mut lines)?;
            Ok(TrainedModel::MultiFidelity(MultiFidelityModel::new(low, residual)?))
        } else {
            Self::from_deeponet(DeepONetModel::from_text(text)?)
        }
    }
}

/// Uncalibrated interval: `mu +/- z_{1-alpha/2} sigma` for Gaussian outputs,
/// the raw heads for quantile outputs.
pub fn baseline_interval(output: ModelOutput, alpha: f64) -> PredictionInterval {
    match output {
        ModelOutput::MeanStd(p) => {
            let half = gaussian_z(alpha) * p.std;
            PredictionInterval {
                lo: p.mean - half,
                hi: p.mean + half,
            }
        }
        ModelOutput::Quantiles(p) => PredictionInterval { lo: p.lo, hi: p.hi },
    }
}

/// Standard normal quantile at `1 - alpha/2`.
pub fn gaussian_z(alpha: f64) -> f64 {
    Normal::standard().inverse_cdf(1.0 - alpha / 2.0)
}

#[derive(Debug, Clone, Copy)]
pub enum IntervalRule<'a> {
    Conformal(&'a CalibrationRecord),
    Baseline { alpha: f64 },
}

fn insufficient(record: &CalibrationRecord) -> Error {
    Error::InsufficientCalibration {
        n: record.n,
        alpha: record.alpha,
        k: record.rank(),
    }
}

fn query_rows(data: &TrajectoryDataset, j: usize) -> (Array2<f64>, Array2<f64>) {
    let t = &data.trajectories[j];
    let u = Array2::from_shape_fn((data.n_eval, data.m), |(_, c)| t.u[c]);
    let x = Array2::from_shape_vec((data.n_eval, data.d), t.x.clone()).expect("trajectory shape checked on construction");
    (u, x)
}

/// Coverage of every test trajectory under one interval rule.
pub fn evaluate_coverage(
    model: &TrainedModel,
    rule: IntervalRule<'_>,
    test: &TrajectoryDataset,
    label: &str,
) -> Result<CoverageReport> {
    check_len("test sensor count", model.dims().0, test.m)?;
    check_len("test coordinate dimension", model.dims().1, test.d)?;
    if test.is_empty() {
        return Err(Error::invalid("test set has no trajectories"));
    }
    let alpha = match rule {
        IntervalRule::Conformal(rec) => {
            if rec.is_unbounded() {
                return Err(insufficient(rec));
            }
            if rec.score_kind != model.score_kind() {
                return Err(Error::Incompatible(format!(
                    "record of kind {} cannot calibrate a {} model",
                    rec.score_kind,
                    model.name()
                )));
            }
            rec.alpha
        }
        IntervalRule::Baseline { alpha } => {
            check_alpha(alpha)?;
            alpha
        }
    };
    let per_traj = (0..test.len())
        .into_par_iter()
        .map(|j| {
            let (u, x) = query_rows(test, j);
            let intervals = model
                .outputs(u.view(), x.view())?
                .into_iter()
                .map(|o| match rule {
                    IntervalRule::Conformal(rec) => predict_interval(rec, o),
                    IntervalRule::Baseline { alpha } => Ok(baseline_interval(o, alpha)),
                })
                .collect::<Result<Vec<_>>>()?;
            let cov = trajectory_coverage(&intervals, &test.trajectories[j].g)?;
            Ok((cov, intervals.iter().map(|c| c.length()).collect::<Vec<_>>()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (coverages, lengths): (Vec<f64>, Vec<Vec<f64>>) = per_traj.into_iter().unzip();
    Ok(CoverageReport {
        model: label.to_string(),
        alpha,
        n_eval: test.n_eval,
        coverages,
        lengths: lengths.concat(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExperimentSizes {
    pub n_train: usize,
    pub n_calib: usize,
    pub n_traj: usize,
    pub n_eval: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub problem: Problem,
    pub alpha: f64,
    pub sizes: ExperimentSizes,
    pub branch: SubnetSpec,
    pub trunk: SubnetSpec,
    /// `train.alpha` is overwritten with `alpha`.
    pub train: TrainConfig,
    pub ensemble_members: usize,
    pub data_seed: u64,
}

impl ExperimentConfig {
    /// Default sizes, architecture and epoch budget for a problem.
    pub fn defaults(problem: Problem) -> Self {
        let (n_train, net, epochs) = match problem {
            Problem::Pendulum(_) => (5000, SubnetSpec::new(3, 1, 100), 500),
            Problem::Diffusion(_) => (10000, SubnetSpec::new(4, 1, 100), 500),
            Problem::Burgers(_) => (30000, SubnetSpec::new(5, 1, 128), 300),
            Problem::Jump(_) => (3800, SubnetSpec::new(3, 1, 100), 500),
        };
        Self {
            problem,
            alpha: 0.05,
            sizes: ExperimentSizes {
                n_train,
                n_calib: n_train / 10,
                n_traj: 100,
                n_eval: 100,
            },
            branch: net,
            trunk: net,
            train: TrainConfig {
                epochs,
                ..TrainConfig::default()
            },
            ensemble_members: 10,
            data_seed: 0,
        }
    }

    pub fn spec(&self, head: HeadKind) -> DeepONetSpec {
        DeepONetSpec::new(
            self.problem.sensors(),
            self.problem.coord_dim(),
            self.branch,
            self.trunk,
            head,
        )
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            alpha: self.alpha,
            ..self.train.clone()
        }
    }
}

/// Training, calibration and test data of one experiment.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: Vec<OperatorTriplet>,
    pub calib: Vec<OperatorTriplet>,
    pub test: TrajectoryDataset,
}

impl ExperimentData {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let s = cfg.sizes;
        Ok(Self {
            train: assemble_dataset(cfg.problem, Split::Train, s.n_train, cfg.data_seed)?,
            calib: assemble_dataset(cfg.problem, Split::Calibration, s.n_calib, cfg.data_seed)?,
            test: assemble_trajectories(cfg.problem, s.n_traj, s.n_eval, cfg.data_seed)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub model: TrainedModel,
    pub record: CalibrationRecord,
    pub conformal: CoverageReport,
    pub baseline: CoverageReport,
    /// Empty for ensembles.
    pub log: Vec<EpochRecord>,
}

/// Calibrate a trained model and evaluate both interval rules on `test`.
pub fn calibrate_and_evaluate(
    model: TrainedModel,
    calib: &[OperatorTriplet],
    test: &TrajectoryDataset,
    alpha: f64,
    log: Vec<EpochRecord>,
) -> Result<ExperimentResult> {
    let record = model.calibrate(calib, alpha)?;
    if record.is_unbounded() {
        return Err(insufficient(&record));
    }
    let name = model.name();
    let conformal = evaluate_coverage(&model, IntervalRule::Conformal(&record), test, &format!("conformal-{name}"))?;
    let baseline = evaluate_coverage(&model, IntervalRule::Baseline { alpha }, test, name)?;
    Ok(ExperimentResult {
        model,
        record,
        conformal,
        baseline,
        log,
    })
}

/// Train, calibrate and evaluate one model kind on pre-generated data.
pub fn run_experiment_on(data: &ExperimentData, cfg: &ExperimentConfig, kind: ModelKind) -> Result<ExperimentResult> {
    check_alpha(cfg.alpha)?;
    let train_cfg = cfg.train_config();
    let (model, log) = match kind {
        ModelKind::Prob | ModelKind::Quantile => {
            let head = if kind == ModelKind::Prob {
                HeadKind::Prob
            } else {
                HeadKind::Quantile
            };
            let out = train_model(head, &data.train, &cfg.spec(head), &train_cfg)?;
            (TrainedModel::from_deeponet(out.model)?, out.log)
        }
        ModelKind::Ensemble => {
            let ens = train_ensemble(cfg.ensemble_members, &data.train, &cfg.spec(HeadKind::Point), &train_cfg)?;
            (TrainedModel::Ensemble(ens), Vec::new())
        }
    };
    calibrate_and_evaluate(model, &data.calib, &data.test, cfg.alpha, log)
}

pub fn run_experiment(cfg: &ExperimentConfig, kind: ModelKind) -> Result<ExperimentResult> {
    run_experiment_on(&ExperimentData::generate(cfg)?, cfg, kind)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiFidelityConfig {
    pub alpha: f64,
    pub n_low: usize,
    pub n_high: usize,
    pub n_calib: usize,
    pub n_traj: usize,
    pub n_eval: usize,
    pub net: SubnetSpec,
    pub train: TrainConfig,
    pub data_seed: u64,
}

impl Default for MultiFidelityConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            n_low: 3800,
            n_high: 760,
            n_calib: 380,
            n_traj: 100,
            n_eval: 100,
            net: SubnetSpec::new(3, 1, 100),
            train: TrainConfig {
                epochs: 1000,
                ..TrainConfig::default()
            },
            data_seed: 0,
        }
    }
}

/// Low-fidelity point model, residual prob model on `y_H - y_L`, then
/// conformal calibration of the recombined predictor against `y_H`.
pub fn run_multifidelity(cfg: &MultiFidelityConfig) -> Result<ExperimentResult> {
    check_alpha(cfg.alpha)?;
    let seed = cfg.data_seed;
    let low_data = assemble_dataset(Problem::Jump(JumpTarget::Low), Split::Train, cfg.n_low, seed)?;
    // A shifted base seed keeps the residual inputs apart from the low-fidelity ones.
    let res_data = assemble_dataset(Problem::Jump(JumpTarget::Residual), Split::Train, cfg.n_high, seed.wrapping_add(1))?;
    let calib = assemble_dataset(Problem::Jump(JumpTarget::High), Split::Calibration, cfg.n_calib, seed)?;
    let test = assemble_trajectories(Problem::Jump(JumpTarget::High), cfg.n_traj, cfg.n_eval, seed)?;

    let spec = |head| DeepONetSpec::new(crate::datagen::SENSORS, 1, cfg.net, cfg.net, head);
    let train_cfg = TrainConfig {
        alpha: cfg.alpha,
        ..cfg.train.clone()
    };
    let low = train_model(HeadKind::Point, &low_data, &spec(HeadKind::Point), &train_cfg)?;
    let res = train_model(HeadKind::Prob, &res_data, &spec(HeadKind::Prob), &train_cfg)?;
    let model = TrainedModel::MultiFidelity(MultiFidelityModel::new(low.model, res.model)?);
    calibrate_and_evaluate(model, &calib, &test, cfg.alpha, res.log)
}

/// 20-bin histogram of interval lengths with the coefficient of variation.
#[derive(Debug, Clone, PartialEq)]
pub struct LengthHistogram {
    /// 21 edges spanning `[min, max]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl LengthHistogram {
    /// `std / mean`; zero when every length is equal.
    pub fn adaptivity(&self) -> f64 {
        if self.std == 0.0 {
            0.0
        } else {
            self.std / self.mean
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{},{},{c}\n", self.edges[i], self.edges[i + 1]));
        }
        s
    }
}

pub const HISTOGRAM_BINS: usize = 20;

pub fn ablation_adaptivity(report: &CoverageReport) -> Result<LengthHistogram> {
    let lengths = &report.lengths;
    if lengths.is_empty() {
        return Err(Error::invalid("no interval lengths to summarize"));
    }
    if lengths.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("interval length".into()));
    }
    let n = lengths.len() as f64;
    let mean = lengths.iter().sum::<f64>() / n;
    let std = (lengths.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n).sqrt();
    let lo = lengths.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = lengths.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let edges = (0..=HISTOGRAM_BINS).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0; HISTOGRAM_BINS];
    for &l in lengths {
        let bin = if width > 0.0 {
            (((l - lo) / width) as usize).min(HISTOGRAM_BINS - 1)
        } else {
            0
        };
        counts[bin] += 1;
    }
    Ok(LengthHistogram {
        edges,
        counts,
        mean,
        std,
    })
}

/// Per-round validation coverages for each calibration size.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSizeStudy {
    pub alpha: f64,
    pub n_values: Vec<usize>,
    pub n_val: usize,
    /// `coverages[i][r]` is round `r` at `n_values[i]`.
    pub coverages: Vec<Vec<f64>>,
}

impl CalibrationSizeStudy {
    pub fn rounds(&self) -> usize {
        self.coverages.first().map_or(0, Vec::len)
    }

    pub fn mean(&self, i: usize) -> f64 {
        let c = &self.coverages[i];
        c.iter().sum::<f64>() / c.len() as f64
    }

    /// Sample standard deviation; zero for a single round.
    pub fn std(&self, i: usize) -> f64 {
        let c = &self.coverages[i];
        if c.len() < 2 {
            return 0.0;
        }
        let m = self.mean(i);
        (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (c.len() - 1) as f64).sqrt()
    }

    /// `ablation_n<k>.csv` for `n_values[i]`.
    pub fn round_csv(&self, i: usize) -> String {
        let mut s = String::from("round,n,coverage\n");
        for (r, c) in self.coverages[i].iter().enumerate() {
            s.push_str(&format!("{r},{},{c}\n", self.n_values[i]));
        }
        s
    }
}

pub const DEFAULT_N_VAL: usize = 2000;

fn output_score(output: &ModelOutput, g: f64) -> Result<f64> {
    match output {
        ModelOutput::MeanStd(p) => normalized_residual_score(p.mean, p.std.max(SIGMA_FLOOR), g),
        ModelOutput::Quantiles(p) => Ok(cqr_score(p.lo, p.hi, g)),
    }
}

/// Repeatedly draw `n` calibration and `n_val` validation points from the
/// pool without replacement, calibrate on the former and measure coverage
/// on the latter.
pub fn ablation_calibration_size(
    model: &TrainedModel,
    pool: &[OperatorTriplet],
    n_values: &[usize],
    rounds: usize,
    n_val: usize,
    alpha: f64,
    seed: u64,
) -> Result<CalibrationSizeStudy> {
    check_alpha(alpha)?;
    if rounds == 0 || n_val == 0 || n_values.is_empty() {
        return Err(Error::invalid("rounds, n_val and the n list must be non-empty"));
    }
    let n_max = *n_values.iter().max().expect("non-empty");
    if pool.len() < n_max + n_val {
        return Err(Error::invalid(format!(
            "pool of {} samples is smaller than max(n) + n_val = {}",
            pool.len(),
            n_max + n_val
        )));
    }
    if let Some(&n) = n_values.iter().find(|&&n| conformal_rank(n, alpha) > n) {
        return Err(Error::InsufficientCalibration {
            n,
            alpha,
            k: conformal_rank(n, alpha),
        });
    }
    let arrays = TripletArrays::from_triplets(pool)?;
    let outputs = model.outputs(arrays.u.view(), arrays.x.view())?;
    let scores = outputs
        .iter()
        .zip(&arrays.g)
        .map(|(o, &g)| output_score(o, g))
        .collect::<Result<Vec<_>>>()?;
    let score_kind = model.score_kind();

    let coverages = n_values
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            (0..rounds as u64)
                .into_par_iter()
                .map(|r| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(((i as u64) << 32) | r);
                    let idx = index::sample(&mut rng, pool.len(), n + n_val).into_vec();
                    let (cal, val) = idx.split_at(n);
                    let cal_scores: Vec<f64> = cal.iter().map(|&k| scores[k]).collect();
                    let record = CalibrationRecord {
                        score_kind,
                        alpha,
                        n,
                        q_hat: conformal_quantile(&cal_scores, alpha)?,
                    };
                    let mut hits = 0usize;
                    for &k in val {
                        if predict_interval(&record, outputs[k])?.contains(arrays.g[k]) {
                            hits += 1;
                        }
                    }
                    Ok(hits as f64 / n_val as f64)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibrationSizeStudy {
        alpha,
        n_values: n_values.to_vec(),
        n_val,
        coverages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::QuantilePair;
    use proptest::prelude::*;
    use rand::Rng;

    fn iv(lo: f64, hi: f64) -> PredictionInterval {
        PredictionInterval { lo, hi }
    }

    #[test]
    fn coverage_counts_closed_intervals() {
        let ivs = vec![iv(0.0, 1.0); 4];
        assert_eq!(trajectory_coverage(&ivs, &[0.0, 0.5, 1.0, 0.2]).unwrap(), 1.0);
        assert_eq!(trajectory_coverage(&ivs, &[0.0, 2.0, 1.0, -0.1]).unwrap(), 0.5);
        assert!(trajectory_coverage(&ivs, &[0.0]).is_err());
        assert!(trajectory_coverage(&[], &[]).is_err());
    }

    #[test]
    fn coverage_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.random_range(1..60);
            let ivs: Vec<_> = (0..n)
                .map(|_| {
                    let c: f64 = rng.random_range(-1.0..1.0);
                    let h: f64 = rng.random_range(0.0..0.5);
                    iv(c - h, c + h)
                })
                .collect();
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
            let mut count = 0;
            for i in 0..n {
                if g[i] >= ivs[i].lo && g[i] <= ivs[i].hi {
                    count += 1;
                }
            }
            assert_eq!(trajectory_coverage(&ivs, &g).unwrap(), count as f64 / n as f64);
        }
    }

    #[test]
    fn baseline_gaussian_uses_normal_quantile() {
        assert!((gaussian_z(0.05) - 1.959963984540054).abs() < 1e-9);
        let c = baseline_interval(ModelOutput::MeanStd(MeanStd { mean: 1.0, std: 2.0 }), 0.05);
        assert!((c.hi - 1.0 - 2.0 * 1.959963984540054).abs() < 1e-9);
        let q = baseline_interval(ModelOutput::Quantiles(QuantilePair { lo: 3.0, hi: -1.0 }), 0.05);
        assert_eq!((q.lo, q.hi), (3.0, -1.0));
        assert!(!q.contains(0.0));
    }

    proptest! {
        #[test]
        fn conformal_contains_baseline_when_q_exceeds_z(
            mean in -10.0..10.0f64,
            std in 1e-3..5.0f64,
            extra in 0.0..3.0f64,
        ) {
            let z = gaussian_z(0.05);
            let rec = CalibrationRecord { score_kind: ScoreKind::NormalizedResidual, alpha: 0.05, n: 100, q_hat: z + extra };
            let out = ModelOutput::MeanStd(MeanStd { mean, std });
            let c = predict_interval(&rec, out).unwrap();
            let b = baseline_interval(out, 0.05);
            prop_assert!(c.lo <= b.lo && b.hi <= c.hi);
        }

        #[test]
        fn histogram_partitions_lengths(lengths in prop::collection::vec(0.0..10.0f64, 1..300)) {
            let report = CoverageReport { model: "m".into(), alpha: 0.1, n_eval: 1, coverages: vec![1.0], lengths: lengths.clone() };
            let h = ablation_adaptivity(&report).unwrap();
            prop_assert_eq!(h.counts.iter().sum::<usize>(), lengths.len());
            prop_assert_eq!(h.edges.len(), HISTOGRAM_BINS + 1);
            prop_assert!(h.adaptivity() >= 0.0);
        }
    }

    #[test]
    fn equal_lengths_have_zero_adaptivity() {
        let report = CoverageReport {
            model: "m".into(),
            alpha: 0.1,
            n_eval: 5,
            coverages: vec![1.0],
            lengths: vec![0.3; 5],
        };
        let h = ablation_adaptivity(&report).unwrap();
        assert_eq!(h.adaptivity(), 0.0);
        assert_eq!(h.counts[0], 5);
        let empty = CoverageReport { lengths: vec![], ..report };
        assert!(ablation_adaptivity(&empty).is_err());
    }

    fn tiny_prob_model(seed: u64) -> DeepONetModel {
        let spec = DeepONetSpec::new(3, 1, SubnetSpec::new(1, 1, 4), SubnetSpec::new(1, 1, 4), HeadKind::Prob);
        DeepONetModel::init(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn synthetic_pool(model: &DeepONetModel, n: usize, seed: u64) -> Vec<OperatorTriplet> {
        // Targets drawn from the model's own predictive distribution.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let u: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                let x = vec![rng.random_range(0.0..1.0)];
                let p = crate::operator::prob_eval(model, &u, &x).unwrap();
                let e: f64 = rng.sample(rand_distr::StandardNormal);
                OperatorTriplet::new(u, x, p.mean + p.std * e)
            })
            .collect()
    }

    #[test]
    fn calibration_size_study_centres_on_target() {
        let model = tiny_prob_model(1);
        let pool = synthetic_pool(&model, 3000, 2);
        let tm = TrainedModel::Prob(model);
        let study = ablation_calibration_size(&tm, &pool, &[100, 1000], 40, 1000, 0.1, 7).unwrap();
        assert_eq!(study.rounds(), 40);
        for i in 0..2 {
            assert!((study.mean(i) - 0.9).abs() < 0.02, "{}", study.mean(i));
        }
        assert!(study.std(1) < study.std(0));
        assert_eq!(study.round_csv(0).lines().count(), 41);

        let again = ablation_calibration_size(&tm, &pool, &[100, 1000], 40, 1000, 0.1, 7).unwrap();
        assert_eq!(again, study);
        let single = ablation_calibration_size(&tm, &pool, &[100], 1, 1000, 0.1, 7).unwrap();
        assert_eq!(single.coverages[0].len(), 1);
        assert!(ablation_calibration_size(&tm, &pool, &[2500], 1, 1000, 0.1, 7).is_err());
        assert!(matches!(
            ablation_calibration_size(&tm, &pool, &[5], 1, 100, 0.1, 7),
            Err(Error::InsufficientCalibration { .. })
        ));
    }

    fn tiny_test_set(model: &DeepONetModel) -> TrajectoryDataset {
        let pool = synthetic_pool(model, 40, 3);
        let trajectories = pool
            .chunks(10)
            .map(|c| crate::datagen::Trajectory {
                u: c[0].u.clone(),
                x: (0..10).map(|i| i as f64 / 9.0).collect(),
                g: c.iter().map(|t| t.g).collect(),
            })
            .collect();
        TrajectoryDataset::new(3, 1, 10, trajectories).unwrap()
    }

    #[test]
    fn evaluation_reports_both_rules() {
        let model = tiny_prob_model(4);
        let calib = synthetic_pool(&model, 200, 9);
        let test = tiny_test_set(&model);
        let res = calibrate_and_evaluate(TrainedModel::Prob(model), &calib, &test, 0.1, vec![]).unwrap();
        assert_eq!(res.conformal.n_traj(), 4);
        assert_eq!(res.conformal.lengths.len(), 40);
        assert_eq!(res.conformal.model, "conformal-prob");
        assert_eq!(res.baseline.model, "prob");
        assert!(res.conformal.coverages.iter().all(|c| (0.0..=1.0).contains(c)));
        let csv = report_csv(&[&res.conformal, &res.baseline]);
        assert!(csv.starts_with("model,alpha,mean_coverage,mean_coverage_pct,n_traj,n_eval\n"));
        assert_eq!(coverages_csv(&[&res.conformal]).lines().count(), 5);
        assert_eq!(lengths_csv(&[&res.conformal]).lines().count(), 41);
    }

    #[test]
    fn unbounded_and_mismatched_records_are_rejected() {
        let model = tiny_prob_model(4);
        let test = tiny_test_set(&model);
        let tm = TrainedModel::Prob(model);
        let calib = synthetic_pool(tm_model(&tm), 5, 9);
        assert!(matches!(
            calibrate_and_evaluate(tm.clone(), &calib, &test, 0.05, vec![]),
            Err(Error::InsufficientCalibration { n: 5, k: 6, .. })
        ));
        let rec = CalibrationRecord {
            score_kind: ScoreKind::Cqr,
            alpha: 0.1,
            n: 10,
            q_hat: 0.1,
        };
        assert!(matches!(
            evaluate_coverage(&tm, IntervalRule::Conformal(&rec), &test, "x"),
            Err(Error::Incompatible(_))
        ));
    }

    fn tm_model(tm: &TrainedModel) -> &DeepONetModel {
        match tm {
            TrainedModel::Prob(m) => m,
            _ => unreachable!(),
        }
    }

    #[test]
    fn multifidelity_mean_adds_low_fidelity() {
        let point = DeepONetSpec::new(3, 1, SubnetSpec::new(1, 0, 4), SubnetSpec::new(1, 0, 4), HeadKind::Point);
        let low = DeepONetModel::init(point, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let res = tiny_prob_model(9);
        let mf = MultiFidelityModel::new(low.clone(), res.clone()).unwrap();
        let (u, x) = ([0.1, -0.4, 0.7], [0.3]);
        let u2 = Array2::from_shape_vec((1, 3), u.to_vec()).unwrap();
        let x2 = Array2::from_shape_vec((1, 1), x.to_vec()).unwrap();
        let got = mf.mean_std_rows(u2.view(), x2.view()).unwrap()[0];
        let r = crate::operator::prob_eval(&res, &u, &x).unwrap();
        let y = crate::operator::deeponet_eval(&low, &u, &x).unwrap();
        assert_eq!(got.mean, r.mean + y);
        assert_eq!(got.std, r.std);
        assert!(MultiFidelityModel::new(res.clone(), low.clone()).is_err());

        let tm = TrainedModel::MultiFidelity(mf);
        let back = TrainedModel::from_text(&tm.to_text()).unwrap();
        assert_eq!(back.to_text(), tm.to_text());
        assert!(matches!(back, TrainedModel::MultiFidelity(_)));
    }

    #[test]
    fn model_kinds_parse_and_point_models_are_refused() {
        assert_eq!("quantile".parse::<ModelKind>().unwrap(), ModelKind::Quantile);
        assert!("point".parse::<ModelKind>().is_err());
        let point = DeepONetSpec::new(3, 1, SubnetSpec::new(1, 0, 4), SubnetSpec::new(1, 0, 4), HeadKind::Point);
        let m = DeepONetModel::init(point, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert!(matches!(TrainedModel::from_deeponet(m), Err(Error::Incompatible(_))));
    }

    #[test]
    fn small_pipeline_runs_end_to_end() {
        let mut cfg = ExperimentConfig::defaults(Problem::pendulum());
        cfg.sizes = ExperimentSizes {
            n_train: 300,
            n_calib: 100,
            n_traj: 3,
            n_eval: 20,
        };
        cfg.branch = SubnetSpec::new(1, 1, 16);
        cfg.trunk = SubnetSpec::new(1, 1, 16);
        cfg.train.epochs = 5;
        let data = ExperimentData::generate(&cfg).unwrap();
        let a = run_experiment_on(&data, &cfg, ModelKind::Quantile).unwrap();
        let b = run_experiment_on(&data, &cfg, ModelKind::Quantile).unwrap();
        assert_eq!(a.conformal.coverages, b.conformal.coverages);
        assert_eq!(a.record.score_kind, ScoreKind::Cqr);
        assert_eq!(a.log.len(), 5);
        cfg.ensemble_members = 2;
        let e = run_experiment_on(&data, &cfg, ModelKind::Ensemble).unwrap();
        assert_eq!(e.conformal.model, "conformal-ensemble");
    }
}
