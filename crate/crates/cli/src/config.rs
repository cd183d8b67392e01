//! `key = value` run configuration. Blank lines and `#` comments are
//! ignored; later keys override earlier ones.

use std::collections::BTreeMap;

use conformal_deeponet::datagen::{JumpTarget, Problem};
use conformal_deeponet::evaluation::{ExperimentConfig, MultiFidelityConfig};
use conformal_deeponet::operator::SubnetSpec;

pub const KEYS: &[&str] = &[
    "problem",
    "model",
    "alpha",
    "n_train",
    "n_calib",
    "n_low",
    "n_high",
    "n_traj",
    "n_eval",
    "branch",
    "trunk",
    "epochs",
    "batch_size",
    "lr",
    "patience",
    "factor",
    "min_lr",
    "members",
    "data_seed",
    "seed",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("config line {}: expected `key = value`", i + 1))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(format!("config line {}: unknown key {k:?}", i + 1));
            }
            if v.is_empty() {
                return Err(format!("config line {}: empty value for {k:?}", i + 1));
            }
            values.insert(k.to_string(), v.to_string());
        }
        Ok(Self { values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        debug_assert!(KEYS.contains(&key));
        self.values.insert(key.to_string(), value.to_string());
    }

    fn typed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, String>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| format!("config key {key}: {e}")))
            .transpose()
    }

    /// Apply every set key on top of `base`.
    pub fn apply(&self, base: &mut ExperimentConfig) -> Result<(), String> {
        macro_rules! set {
            ($key:literal, $field:expr) => {
                if let Some(v) = self.typed($key)? {
                    $field = v;
                }
            };
        }
        set!("alpha", base.alpha);
        set!("n_train", base.sizes.n_train);
        set!("n_calib", base.sizes.n_calib);
        set!("n_traj", base.sizes.n_traj);
        set!("n_eval", base.sizes.n_eval);
        set!("epochs", base.train.epochs);
        set!("batch_size", base.train.batch_size);
        set!("lr", base.train.lr);
        set!("patience", base.train.patience);
        set!("factor", base.train.factor);
        set!("min_lr", base.train.min_lr);
        set!("members", base.ensemble_members);
        set!("data_seed", base.data_seed);
        set!("seed", base.train.seed);
        if let Some(v) = self.typed::<SubnetSpec>("branch")? {
            base.branch = v;
        }
        if let Some(v) = self.typed::<SubnetSpec>("trunk")? {
            base.trunk = v;
        }
        if !(base.alpha > 0.0 && base.alpha < 1.0) {
            return Err(format!("alpha must lie in (0, 1), got {}", base.alpha));
        }
        if base.sizes.n_train == 0 || base.sizes.n_calib == 0 {
            return Err("n_train and n_calib must be at least 1".into());
        }
        base.train.alpha = base.alpha;
        base.train.validate().map_err(|e| e.to_string())
    }

    /// Apply the keys meaningful for the multi-fidelity pipeline.
    pub fn apply_multifidelity(&self, base: &mut MultiFidelityConfig) -> Result<(), String> {
        let mut shared = ExperimentConfig::defaults(Problem::Jump(JumpTarget::High));
        shared.alpha = base.alpha;
        shared.sizes.n_train = base.n_low;
        shared.sizes.n_calib = base.n_calib;
        shared.sizes.n_traj = base.n_traj;
        shared.sizes.n_eval = base.n_eval;
        shared.branch = base.net;
        shared.trunk = base.net;
        shared.train = base.train.clone();
        shared.data_seed = base.data_seed;
        self.apply(&mut shared)?;
        if self.get("branch") != self.get("trunk") {
            return Err("the multi-fidelity pipeline uses one network shape; set branch and trunk together".into());
        }
        base.alpha = shared.alpha;
        base.n_low = shared.sizes.n_train;
        base.n_calib = shared.sizes.n_calib;
        base.n_traj = shared.sizes.n_traj;
        base.n_eval = shared.sizes.n_eval;
        base.net = shared.branch;
        base.train = shared.train;
        base.data_seed = shared.data_seed;
        if let Some(v) = self.typed("n_low")? {
            base.n_low = v;
        }
        if let Some(v) = self.typed("n_high")? {
            base.n_high = v;
        }
        if base.n_low == 0 || base.n_high == 0 {
            return Err("n_low and n_high must be at least 1".into());
        }
        Ok(())
    }
}
