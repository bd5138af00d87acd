//! Flat `key=value` run configuration.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use wcaps_core::data::AugmentPolicy;
use wcaps_core::model::NetworkSpec;
use wcaps_core::train::{Schedule, TrainConfig, MOMENTUM};

use crate::CliError;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "WCAPS_SEED";

/// Every accepted key with its default and meaning. Network keys not listed
/// here come from the preset (see `NetworkSpec::KEYS`).
pub const KEYS: &[(&str, &str, &str)] = &[
    ("preset", "mnist", "network preset: mnist, desk-mnist, cifar10, cifar100, svhn, micro"),
    ("epochs", "40", "training epochs"),
    ("lr", "0.1", "base learning rate"),
    ("milestones", "20,30", "epochs at which the learning rate is multiplied by lr_factor; empty for none"),
    ("lr_factor", "0.1", "learning-rate decay factor"),
    ("batch_size", "64", "training batch size (at least 2)"),
    ("momentum", "0.9", "Nesterov momentum"),
    ("seed", "0", "initialization and shuffling seed"),
    ("patience", "0", "early-stopping patience in epochs; 0 disables"),
    ("spectral_iters", "1", "power iterations per training step"),
    ("spectral_warmup", "5", "power iterations after initialization"),
    ("eval_batch", "250", "evaluation batch size"),
    ("augment", "none", "none, or cifar (mirror, 4-pixel shift, standardization)"),
    ("data", "data/mnist", "MNIST directory, CIFAR-10 directory, or synthetic[:N]"),
    ("train_size", "0", "training samples drawn from the training pool; 0 uses the source default"),
    ("val_size", "0", "validation samples held out of the training pool; 0 uses the source default"),
    ("split_seed", "7", "seed of the train/validation split"),
    ("out", "runs/latest", "output directory"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub network: NetworkSpec,
    pub epochs: usize,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub lr_factor: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
    pub patience: usize,
    pub spectral_iters: usize,
    pub spectral_warmup: usize,
    pub eval_batch: usize,
    pub augment: String,
    pub data: String,
    pub train_size: usize,
    pub val_size: usize,
    pub split_seed: u64,
    pub out: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let schedule = Schedule::mnist();
        Self {
            preset: "mnist".into(),
            network: NetworkSpec::mnist(),
            epochs: schedule.epochs,
            lr: schedule.base,
            milestones: schedule.milestones,
            lr_factor: schedule.factor,
            batch_size: 64,
            momentum: MOMENTUM,
            seed: 0,
            patience: 0,
            spectral_iters: 1,
            spectral_warmup: 5,
            eval_batch: 250,
            augment: "none".into(),
            data: "data/mnist".into(),
            train_size: 0,
            val_size: 0,
            split_seed: 7,
            out: "runs/latest".into(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => config_err(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Parses `key=value` lines; `#` starts a comment line. The preset is
    /// applied first wherever it appears, then the remaining keys in order.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut pairs = Vec::new();
        let mut seen = BTreeSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {}: expected key=value, got {line:?}", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(config_err(format!("line {}: duplicate key {k:?}", no + 1)));
            }
            pairs.push((no + 1, k, v));
        }
        let mut cfg = Self::default();
        if let Some(&(no, _, v)) = pairs.iter().find(|(_, k, _)| *k == "preset") {
            cfg.network =
                NetworkSpec::preset(v).ok_or_else(|| config_err(format!("line {no}: unknown preset {v:?}")))?;
            cfg.preset = v.to_string();
        }
        for &(no, k, v) in pairs.iter().filter(|(_, k, _)| *k != "preset") {
            cfg.set(k, v).map_err(|m| config_err(format!("line {no}: {m}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let bad = || format!("invalid value {value:?} for {key}");
        fn num<N: std::str::FromStr>(v: &str, bad: impl Fn() -> String) -> Result<N, String> {
            v.parse().map_err(|_| bad())
        }
        match key {
            "epochs" => self.epochs = num(value, bad)?,
            "lr" => self.lr = num(value, bad)?,
            "milestones" => {
                self.milestones = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| num(s, bad))
                    .collect::<Result<_, _>>()?
            }
            "lr_factor" => self.lr_factor = num(value, bad)?,
            "batch_size" => self.batch_size = num(value, bad)?,
            "momentum" => self.momentum = num(value, bad)?,
            "seed" => self.seed = num(value, bad)?,
            "patience" => self.patience = num(value, bad)?,
            "spectral_iters" => self.spectral_iters = num(value, bad)?,
            "spectral_warmup" => self.spectral_warmup = num(value, bad)?,
            "eval_batch" => self.eval_batch = num(value, bad)?,
            "augment" => self.augment = value.to_string(),
            "data" => self.data = value.to_string(),
            "train_size" => self.train_size = num(value, bad)?,
            "val_size" => self.val_size = num(value, bad)?,
            "split_seed" => self.split_seed = num(value, bad)?,
            "out" => self.out = value.to_string(),
            _ => {
                if !self.network.set(key, value).map_err(|e| e.to_string())? {
                    return Err(format!("unknown key {key:?}"));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.network.validate().map_err(|e| config_err(e.to_string()))?;
        if self.batch_size < 2 {
            return Err(config_err("batch_size must be at least 2"));
        }
        if self.eval_batch == 0 {
            return Err(config_err("eval_batch must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(config_err("lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err("momentum must lie in [0, 1)"));
        }
        self.augment_policy()?;
        Ok(())
    }

    pub fn augment_policy(&self) -> Result<AugmentPolicy, CliError> {
        match self.augment.as_str() {
            "none" => Ok(AugmentPolicy::NONE),
            "cifar" => Ok(AugmentPolicy::CIFAR),
            other => Err(config_err(format!("unknown augment policy {other:?}"))),
        }
    }

    /// Applies `WCAPS_SEED` when it is set.
    pub fn apply_seed_env(&mut self) -> Result<(), CliError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| config_err(format!("{SEED_ENV}={v:?} is not a seed")))?;
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule { base: self.lr, milestones: self.milestones.clone(), factor: self.lr_factor, epochs: self.epochs }
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        Ok(TrainConfig {
            batch_size: self.batch_size,
            schedule: self.schedule(),
            momentum: self.momentum,
            seed: self.seed,
            augment: self.augment_policy()?,
            patience: (self.patience > 0).then_some(self.patience),
            spectral_iters: self.spectral_iters,
            eval_batch: self.eval_batch,
            meta: Vec::new(),
            verbose: false,
        })
    }

    /// Every key with its resolved value; parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "preset={}", self.preset);
        s.push_str(&self.network.to_kv());
        let milestones: Vec<String> = self.milestones.iter().map(ToString::to_string).collect();
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "milestones={}", milestones.join(","));
        let _ = writeln!(s, "lr_factor={}", self.lr_factor);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "momentum={}", self.momentum);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "patience={}", self.patience);
        let _ = writeln!(s, "spectral_iters={}", self.spectral_iters);
        let _ = writeln!(s, "spectral_warmup={}", self.spectral_warmup);
        let _ = writeln!(s, "eval_batch={}", self.eval_batch);
        let _ = writeln!(s, "augment={}", self.augment);
        let _ = writeln!(s, "data={}", self.data);
        let _ = writeln!(s, "train_size={}", self.train_size);
        let _ = writeln!(s, "val_size={}", self.val_size);
        let _ = writeln!(s, "split_seed={}", self.split_seed);
        let _ = writeln!(s, "out={}", self.out);
        s
    }
}
