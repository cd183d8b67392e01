//! Split conformal calibration.
//!
//! Scores are computed on a held-out calibration set, `q_hat` is their
//! `ceil((n+1)(1-alpha))`-th smallest value, and test intervals are widened
//! (or shrunk) by `q_hat`. Two score families are supported: the
//! normalized residual `|G - mu| / sigma` for Gaussian predictors and the
//! CQR score `max(t_lo - G, G - t_hi)` for quantile predictors.

use std::fmt;
use std::str::FromStr;

use ndarray::ArrayView2;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{check_alpha, check_len, Error, Result};
use crate::operator::{mean_std_from_heads, DeepONetModel, EnsembleModel, HeadKind, MeanStd, QuantilePair};
use crate::training::{OperatorTriplet, TripletArrays};

/// Lower bound applied to predicted standard deviations before scoring.
pub const SIGMA_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    NormalizedResidual,
    Cqr,
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreKind::NormalizedResidual => "normalized_residual",
            ScoreKind::Cqr => "cqr",
        })
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalized_residual" => Ok(ScoreKind::NormalizedResidual),
            "cqr" => Ok(ScoreKind::Cqr),
            other => Err(Error::invalid(format!("unknown score kind {other:?}"))),
        }
    }
}

/// A fitted conformal correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub score_kind: ScoreKind,
    pub alpha: f64,
    pub n: usize,
    /// `+inf` when the calibration set is too small for `alpha`.
    #[serde(serialize_with = "ser_q_hat", deserialize_with = "de_q_hat")]
    pub q_hat: f64,
}

fn ser_q_hat<S: Serializer>(q: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if *q == f64::INFINITY {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*q)
    }
}

fn de_q_hat<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Raw::Text(t) => Err(serde::de::Error::custom(format!("invalid q_hat {t:?}"))),
    }
}

impl CalibrationRecord {
    /// 1-based rank of the order statistic used for `q_hat`.
    pub fn rank(&self) -> usize {
        conformal_rank(self.n, self.alpha)
    }

    pub fn is_unbounded(&self) -> bool {
        self.q_hat == f64::INFINITY
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: Self = serde_json::from_str(text)?;
        check_alpha(rec.alpha)?;
        if rec.n == 0 || rec.q_hat.is_nan() {
            return Err(Error::invalid("calibration record needs n >= 1 and a numeric q_hat"));
        }
        Ok(rec)
    }
}

/// Closed interval `[lo, hi]`; infinite bounds mark an uninformative interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionInterval {
    pub lo: f64,
    pub hi: f64,
}

impl PredictionInterval {
    pub fn unbounded() -> Self {
        Self {
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
        }
    }

    pub fn is_unbounded(&self) -> bool {
        self.lo.is_infinite() || self.hi.is_infinite()
    }

    pub fn contains(&self, g: f64) -> bool {
        self.lo <= g && g <= self.hi
    }

    pub fn length(&self) -> f64 {
        self.hi - self.lo
    }

    fn ordered(lo: f64, hi: f64) -> Self {
        if lo > hi {
            Self { lo: hi, hi: lo }
        } else {
            Self { lo, hi }
        }
    }
}

/// `|G - mu| / sigma`.
pub fn normalized_residual_score(mu: f64, sigma: f64, g: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    Ok((g - mu).abs() / sigma)
}

/// `max(t_lo - G, G - t_hi)`; non-positive exactly when `G` lies in the band.
pub fn cqr_score(t_lo: f64, t_hi: f64, g: f64) -> f64 {
    (t_lo - g).max(g - t_hi)
}

/// `ceil((n + 1)(1 - alpha))`, with products within rounding of an integer
/// treated as that integer.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    let v = (n as f64 + 1.0) * (1.0 - alpha);
    let r = v.round();
    if (v - r).abs() <= 1e-9 * v.max(1.0) {
        r as usize
    } else {
        v.ceil() as usize
    }
}

/// The `conformal_rank(n, alpha)`-th smallest score, or `+inf` when that
/// rank exceeds `n`.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(Error::invalid("no calibration scores"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("calibration score is NaN".into()));
    }
    let k = conformal_rank(scores.len(), alpha);
    if k > scores.len() {
        return Ok(f64::INFINITY);
    }
    let k = k.max(1);
    let mut buf = scores.to_vec();
    let (_, kth, _) = buf.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(*kth)
}

/// Batched Gaussian predictions.
pub trait MeanStdPredictor: Sync {
    fn mean_std_rows(&self, u: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Vec<MeanStd>>;
}

/// Batched lower/upper quantile predictions.
pub trait QuantilePredictor: Sync {
    fn quantile_rows(&self, u: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Vec<QuantilePair>>;
}

impl MeanStdPredictor for DeepONetModel {
    fn mean_std_rows(&self, u: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Vec<MeanStd>> {
        if self.head_kind() != HeadKind::Prob {
            return Err(Error::Incompatible(format!(
                "mean/std predictions need a prob model, found {}",
                self.head_kind()
            )));
        }
        let out = self.predict_rows(u, x)?;
        out.rows()
            .into_iter()
            .map(|r| mean_std_from_heads(r[0], r[1]))
            .collect()
    }
}

impl MeanStdPredictor for EnsembleModel {
    fn mean_std_rows(&self, u: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Vec<MeanStd>> {
        self.stats_rows(u, x)
    }
}

impl QuantilePredictor for DeepONetModel {
    fn quantile_rows(&self, u: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Vec<QuantilePair>> {
        if self.head_kind() != HeadKind::Quantile {
            return Err(Error::Incompatible(format!(
                "quantile predictions need a quantile model, found {}",
                self.head_kind()
            )));
        }
        let out = self.predict_rows(u, x)?;
        Ok(out
            .rows()
            .into_iter()
            .map(|r| QuantilePair { lo: r[0], hi: r[1] })
            .collect())
    }
}

/// Pointwise closure `(u, x) -> (mu, sigma)`.
pub struct FnMeanStd<F>(pub F);

impl<F> MeanStdPredictor for FnMeanStd<F>
where
    F: Fn(&[f64], &[f64]) -> MeanStd + Sync,
{
    fn mean_std_rows(&self, u: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Vec<MeanStd>> {
        check_len("batch rows", u.nrows(), x.nrows())?;
        Ok(u.rows()
            .into_iter()
            .zip(x.rows())
            .map(|(ur, xr)| (self.0)(&ur.to_vec(), &xr.to_vec()))
            .collect())
    }
}

/// Pointwise closure `(u, x) -> (t_lo, t_hi)`.
pub struct FnQuantiles<F>(pub F);

impl<F> QuantilePredictor for FnQuantiles<F>
where
    F: Fn(&[f64], &[f64]) -> QuantilePair + Sync,
{
    fn quantile_rows(&self, u: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Vec<QuantilePair>> {
        check_len("batch rows", u.nrows(), x.nrows())?;
        Ok(u.rows()
            .into_iter()
            .zip(x.rows())
            .map(|(ur, xr)| (self.0)(&ur.to_vec(), &xr.to_vec()))
            .collect())
    }
}

/// Calibration scores plus how many predicted sigmas hit [`SIGMA_FLOOR`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    pub sigma_clamped: usize,
}

pub fn musigma_scores<P: MeanStdPredictor + ?Sized>(predictor: &P, calib: &TripletArrays) -> Result<ScoreSet> {
    let preds = predictor.mean_std_rows(calib.u.view(), calib.x.view())?;
    check_len("predictions", calib.len(), preds.len())?;
    let mut sigma_clamped = 0;
    let scores = preds
        .iter()
        .zip(&calib.g)
        .map(|(p, &g)| {
            if !p.std.is_finite() || !p.mean.is_finite() {
                return Err(Error::NonFinite(format!("prediction (mu={}, sigma={})", p.mean, p.std)));
            }
            if p.std < SIGMA_FLOOR {
                sigma_clamped += 1;
            }
            normalized_residual_score(p.mean, p.std.max(SIGMA_FLOOR), g)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreSet { scores, sigma_clamped })
}

pub fn cqr_scores<P: QuantilePredictor + ?Sized>(predictor: &P, calib: &TripletArrays) -> Result<Vec<f64>> {
    let preds = predictor.quantile_rows(calib.u.view(), calib.x.view())?;
    check_len("predictions", calib.len(), preds.len())?;
    preds
        .iter()
        .zip(&calib.g)
        .map(|(p, &g)| {
            let s = cqr_score(p.lo, p.hi, g);
            if s.is_nan() {
                Err(Error::NonFinite("quantile prediction".into()))
            } else {
                Ok(s)
            }
        })
        .collect()
}

fn record(score_kind: ScoreKind, scores: &[f64], alpha: f64) -> Result<CalibrationRecord> {
    Ok(CalibrationRecord {
        score_kind,
        alpha,
        n: scores.len(),
        q_hat: conformal_quantile(scores, alpha)?,
    })
}

/// Calibrate a Gaussian predictor with normalized-residual scores.
pub fn conformalize_musigma<P: MeanStdPredictor + ?Sized>(
    predictor: &P,
    calib: &[OperatorTriplet],
    alpha: f64,
) -> Result<CalibrationRecord> {
    check_alpha(alpha)?;
    let arrays = TripletArrays::from_triplets(calib)?;
    record(ScoreKind::NormalizedResidual, &musigma_scores(predictor, &arrays)?.scores, alpha)
}

/// Calibrate a quantile predictor with CQR scores.
pub fn conformalize_cqr<P: QuantilePredictor + ?Sized>(
    predictor: &P,
    calib: &[OperatorTriplet],
    alpha: f64,
) -> Result<CalibrationRecord> {
    check_alpha(alpha)?;
    let arrays = TripletArrays::from_triplets(calib)?;
    record(ScoreKind::Cqr, &cqr_scores(predictor, &arrays)?, alpha)
}

/// Raw model output at one query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelOutput {
    MeanStd(MeanStd),
    Quantiles(QuantilePair),
}

/// Conformal interval for one query. Crossed CQR bands are swapped after the
/// adjustment.
pub fn predict_interval(record: &CalibrationRecord, output: ModelOutput) -> Result<PredictionInterval> {
    if record.is_unbounded() {
        return Ok(PredictionInterval::unbounded());
    }
    let q = record.q_hat;
    match (record.score_kind, output) {
        (ScoreKind::NormalizedResidual, ModelOutput::MeanStd(p)) => {
            let half = q * p.std.max(SIGMA_FLOOR);
            Ok(PredictionInterval::ordered(p.mean - half, p.mean + half))
        }
        (ScoreKind::Cqr, ModelOutput::Quantiles(p)) => Ok(PredictionInterval::ordered(p.lo - q, p.hi + q)),
        (kind, _) => Err(Error::Incompatible(format!(
            "calibration record of kind {kind} does not match the model output"
        ))),
    }
}
