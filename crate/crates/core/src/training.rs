//! Losses and training loops.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{check_alpha, check_len, Error, Result};
use crate::nn::{AdamState, PlateauScheduler};
use crate::operator::{DeepONetGrad, DeepONetModel, DeepONetSpec, EnsembleModel, HeadKind, InputScaling};

/// One supervised sample `(u, x, G(u)(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorTriplet {
    pub u: Vec<f64>,
    pub x: Vec<f64>,
    pub g: f64,
}

impl OperatorTriplet {
    pub fn new(u: Vec<f64>, x: Vec<f64>, g: f64) -> Self {
        Self { u, x, g }
    }
}

/// Row-stacked branch inputs, trunk inputs and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletArrays {
    pub u: Array2<f64>,
    pub x: Array2<f64>,
    pub g: Vec<f64>,
}

impl TripletArrays {
    pub fn from_triplets(data: &[OperatorTriplet]) -> Result<Self> {
        let first = data
            .first()
            .ok_or_else(|| Error::invalid("dataset is empty"))?;
        let (m, d) = (first.u.len(), first.x.len());
        let mut u = Vec::with_capacity(data.len() * m);
        let mut x = Vec::with_capacity(data.len() * d);
        let mut g = Vec::with_capacity(data.len());
        for t in data {
            check_len("triplet sensor count", m, t.u.len())?;
            check_len("triplet coordinate dimension", d, t.x.len())?;
            if !t.g.is_finite() || t.u.iter().chain(&t.x).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("triplet entry".into()));
            }
            u.extend_from_slice(&t.u);
            x.extend_from_slice(&t.x);
            g.push(t.g);
        }
        Ok(Self {
            u: Array2::from_shape_vec((data.len(), m), u).expect("row-major fill"),
            x: Array2::from_shape_vec((data.len(), d), x).expect("row-major fill"),
            g,
        })
    }

    pub fn len(&self) -> usize {
        self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }

    fn select(&self, idx: &[usize]) -> (Array2<f64>, Array2<f64>, Vec<f64>) {
        (
            self.u.select(Axis(0), idx),
            self.x.select(Axis(0), idx),
            idx.iter().map(|&i| self.g[i]).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    /// Miscoverage level; sets the quantile levels `alpha/2` and `1 - alpha/2`.
    pub alpha: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 256,
            lr: 1e-3,
            patience: 20,
            factor: 0.5,
            min_lr: 1e-6,
            alpha: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.min_lr > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(self.factor > 0.0 && self.factor < 1.0) || self.patience == 0 {
            return Err(Error::invalid("plateau factor must lie in (0,1), patience > 0"));
        }
        Ok(())
    }
}

/// Mean squared residual.
pub fn mse_loss(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_len("mse targets", preds.len(), targets.len())?;
    if preds.is_empty() {
        return Err(Error::invalid("mse of an empty batch"));
    }
    let sum: f64 = preds.iter().zip(targets).map(|(p, t)| (t - p) * (t - p)).sum();
    Ok(sum / preds.len() as f64)
}

/// Mean Gaussian negative log-likelihood, including the `log 2 pi` constant.
pub fn gaussian_nll_loss(mus: &[f64], sigmas: &[f64], targets: &[f64]) -> Result<f64> {
    check_len("nll sigmas", mus.len(), sigmas.len())?;
    check_len("nll targets", mus.len(), targets.len())?;
    if mus.is_empty() {
        return Err(Error::invalid("nll of an empty batch"));
    }
    let mut sum = 0.0;
    for ((&mu, &sigma), &g) in mus.iter().zip(sigmas).zip(targets) {
        if !(sigma > 0.0) {
            return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
        }
        let r = (g - mu) / sigma;
        sum += r * r + 2.0 * sigma.ln();
    }
    let n = mus.len() as f64;
    Ok((sum + n * (2.0 * PI).ln()) / (2.0 * n))
}

/// Per-sample NLL and its gradient with respect to `(mu, log sigma)`.
pub fn gaussian_nll_point(mu: f64, log_sigma: f64, g: f64) -> (f64, f64, f64) {
    let inv_var = (-2.0 * log_sigma).exp();
    let r = g - mu;
    let loss = 0.5 * (r * r * inv_var + 2.0 * log_sigma + (2.0 * PI).ln());
    (loss, -r * inv_var, 1.0 - r * r * inv_var)
}

/// Pinball loss at level `gamma` for target `y` and prediction `y_hat`.
pub fn pinball_loss(gamma: f64, y: f64, y_hat: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::invalid(format!("quantile level must lie in (0,1), got {gamma}")));
    }
    Ok(pinball(gamma, y, y_hat))
}

fn pinball(gamma: f64, y: f64, y_hat: f64) -> f64 {
    let diff = y - y_hat;
    if diff > 0.0 {
        gamma * diff
    } else {
        (1.0 - gamma) * (-diff)
    }
}

/// Derivative of the pinball loss with respect to `y_hat` (the value on the
/// `y == y_hat` branch is `1 - gamma`).
fn pinball_grad(gamma: f64, y: f64, y_hat: f64) -> f64 {
    if y - y_hat > 0.0 {
        -gamma
    } else {
        1.0 - gamma
    }
}

/// Batch-mean loss for the model's head kind and the matching upstream
/// gradient with respect to the raw head outputs.
fn loss_and_upstream(kind: HeadKind, alpha: f64, out: ArrayView2<f64>, g: &[f64]) -> (f64, Array2<f64>) {
    let n = g.len() as f64;
    let mut up = Array2::zeros(out.raw_dim());
    let mut total = 0.0;
    for (i, &gi) in g.iter().enumerate() {
        match kind {
            HeadKind::Point => {
                let r = out[[i, 0]] - gi;
                total += r * r;
                up[[i, 0]] = 2.0 * r / n;
            }
            HeadKind::Prob => {
                let (l, dmu, ds) = gaussian_nll_point(out[[i, 0]], out[[i, 1]], gi);
                total += l;
                up[[i, 0]] = dmu / n;
                up[[i, 1]] = ds / n;
            }
            HeadKind::Quantile => {
                let (lo, hi) = (0.5 * alpha, 1.0 - 0.5 * alpha);
                total += pinball(lo, gi, out[[i, 0]]) + pinball(hi, gi, out[[i, 1]]);
                up[[i, 0]] = pinball_grad(lo, gi, out[[i, 0]]) / n;
                up[[i, 1]] = pinball_grad(hi, gi, out[[i, 1]]) / n;
            }
        }
    }
    (total / n, up)
}

/// Training loss of `model` over a dataset, evaluated in chunks.
pub fn dataset_loss(model: &DeepONetModel, data: &TripletArrays, alpha: f64) -> Result<f64> {
    const CHUNK: usize = 4096;
    let mut total = 0.0;
    for start in (0..data.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(data.len());
        let out = model.predict_rows(
            data.u.slice(ndarray::s![start..end, ..]),
            data.x.slice(ndarray::s![start..end, ..]),
        )?;
        let (l, _) = loss_and_upstream(model.head_kind(), alpha, out.view(), &data.g[start..end]);
        total += l * (end - start) as f64;
    }
    Ok(total / data.len() as f64)
}

/// Full-batch training loss and its parameter gradient, in the order of
/// [`DeepONetModel::param_slices`].
pub fn loss_gradient(model: &DeepONetModel, data: &TripletArrays, alpha: f64) -> Result<(f64, DeepONetGrad)> {
    if data.is_empty() {
        return Err(Error::invalid("loss of an empty dataset"));
    }
    let (out, tape) = model.forward_batch(data.u.view(), data.x.view())?;
    let (loss, up) = loss_and_upstream(model.head_kind(), alpha, out.view(), &data.g);
    Ok((loss, model.backward(&tape, up.view())?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DeepONetModel,
    pub log: Vec<EpochRecord>,
}

/// CSV text of a loss log with an `epoch,loss,lr` header.
pub fn loss_log_csv(log: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,loss,lr\n");
    for r in log {
        s.push_str(&format!("{},{},{}\n", r.epoch, r.loss, r.lr));
    }
    s
}

/// Train a fresh model of the given kind with Adam and the plateau schedule.
///
/// The schedule is driven by the epoch-mean training loss.
pub fn train_model(
    kind: HeadKind,
    data: &[OperatorTriplet],
    spec: &DeepONetSpec,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let arrays = TripletArrays::from_triplets(data)?;
    train_arrays(&arrays, &spec.clone().with_head(kind), cfg)
}

pub fn train_arrays(data: &TripletArrays, spec: &DeepONetSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    check_len("dataset sensor count vs spec.m", spec.m, data.u.ncols())?;
    check_len("dataset coordinate dimension vs spec.d", spec.d, data.x.ncols())?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Inputs are standardized with training-set statistics; raw Burgers
    // sensor values reach ~20 and make lr 1e-3 Adam steps unstable.
    let scaling = InputScaling::fit(data.u.view(), data.x.view())?;
    let mut model = DeepONetModel::init(spec.clone(), &mut init_rng)?.with_scaling(scaling)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);

    let mut adam = AdamState::for_blocks(&model.param_slices(), cfg.lr);
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.patience, cfg.factor, cfg.min_lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_total = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (u, x, g) = data.select(idx);
            let (out, tape) = model.forward_batch(u.view(), x.view())?;
            let (loss, up) = loss_and_upstream(spec.head_kind, cfg.alpha, out.view(), &g);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch });
            }
            let grad = model.backward(&tape, up.view())?;
            adam.step(&mut model.param_slices_mut(), &grad.slices())
                .map_err(|_| Error::Diverged { epoch, batch })?;
            epoch_total += loss * idx.len() as f64;
        }
        let epoch_loss = epoch_total / data.len() as f64;
        log.push(EpochRecord {
            epoch,
            loss: epoch_loss,
            lr: adam.lr,
        });
        adam.lr = sched.update(epoch_loss);
    }
    Ok(TrainOutcome { model, log })
}

/// Train `members` point models with seeds `cfg.seed + i`, in parallel.
pub fn train_ensemble(
    members: usize,
    data: &[OperatorTriplet],
    spec: &DeepONetSpec,
    cfg: &TrainConfig,
) -> Result<EnsembleModel> {
    if members < 2 {
        return Err(Error::invalid("an ensemble needs at least two members"));
    }
    let arrays = TripletArrays::from_triplets(data)?;
    let spec = spec.clone().with_head(HeadKind::Point);
    let models = (0..members as u64)
        .into_par_iter()
        .map(|i| {
            let cfg = TrainConfig {
                seed: cfg.seed.wrapping_add(i),
                ..cfg.clone()
            };
            train_arrays(&arrays, &spec, &cfg).map(|o| o.model)
        })
        .collect::<Result<Vec<_>>>()?;
    EnsembleModel::new(models)
}
