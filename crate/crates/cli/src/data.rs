//! Where training and evaluation samples come from.

use std::path::{Path, PathBuf};

use wcaps_core::data::{load_cifar10, load_mnist, split, synthetic, ChannelStats, Dataset, SplitTag};
use wcaps_core::model::NetworkSpec;

use crate::config::RunConfig;
use crate::CliError;

/// Synthetic pools use fixed class templates so every run sees the same task.
const SYNTHETIC_SEED: u64 = 0;
const SYNTHETIC_DEFAULT: usize = 1200;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Mnist(PathBuf),
    Cifar10(PathBuf),
    /// `n` pooled training samples; the test set is `n / 5` more.
    Synthetic(usize),
}

fn data_err(msg: impl Into<String>) -> CliError {
    CliError::Data(msg.into())
}

fn as_data(e: wcaps_core::Error) -> CliError {
    data_err(e.to_string())
}

fn has(dir: &Path, stem: &str) -> bool {
    dir.join(stem).is_file() || dir.join(format!("{stem}.gz")).is_file()
}

impl DataSource {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        if let Some(rest) = s.strip_prefix("synthetic") {
            return match rest.strip_prefix(':') {
                None if rest.is_empty() => Ok(Self::Synthetic(SYNTHETIC_DEFAULT)),
                Some(n) => {
                    n.parse().map(Self::Synthetic).map_err(|_| CliError::Config(format!("bad synthetic size in {s:?}")))
                }
                None => Err(CliError::Config(format!("unknown data source {s:?}"))),
            };
        }
        let dir = PathBuf::from(s);
        if !dir.is_dir() {
            return Err(data_err(format!("data directory {} not found", dir.display())));
        }
        if has(&dir, "train-images-idx3-ubyte") || has(&dir, "t10k-images-idx3-ubyte") {
            Ok(Self::Mnist(dir))
        } else if has(&dir, "test_batch.bin") || has(&dir, "data_batch_1.bin") {
            Ok(Self::Cifar10(dir))
        } else {
            Err(data_err(format!("{} holds neither MNIST IDX nor CIFAR-10 binary files", dir.display())))
        }
    }

    /// Default `(train, val)` sizes carved from the training pool.
    fn default_sizes(&self, pool: usize) -> (usize, usize) {
        match self {
            Self::Mnist(_) => (50_000, 10_000),
            Self::Cifar10(_) => (45_000, 5_000),
            Self::Synthetic(_) => {
                let val = pool / 6;
                (pool - val, val)
            }
        }
    }

    fn synthetic(n: usize, spec: &NetworkSpec) -> Result<Dataset, CliError> {
        synthetic(n, spec.n_classes, (spec.in_channels, spec.height, spec.width), SYNTHETIC_SEED).map_err(as_data)
    }

    pub fn training_pool(&self, spec: &NetworkSpec) -> Result<Dataset, CliError> {
        match self {
            Self::Mnist(dir) => load_mnist(dir, true).map_err(as_data),
            Self::Cifar10(dir) => Ok(load_cifar10(dir).map_err(as_data)?.0),
            Self::Synthetic(n) => Self::synthetic(*n, spec),
        }
    }

    pub fn test_set(&self, spec: &NetworkSpec) -> Result<Dataset, CliError> {
        match self {
            Self::Mnist(dir) => load_mnist(dir, false).map_err(as_data),
            Self::Cifar10(dir) => Ok(load_cifar10(dir).map_err(as_data)?.1),
            Self::Synthetic(n) => {
                let all = Self::synthetic(n + n / 5, spec)?;
                let tail: Vec<usize> = (*n..all.len()).collect();
                Ok(all.subset(&tail, SplitTag::Test))
            }
        }
    }
}

/// Training and validation splits for a run, standardized with training
/// statistics when the augmentation policy asks for it.
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub stats: Option<ChannelStats>,
}

pub fn load_splits(cfg: &RunConfig) -> Result<Splits, CliError> {
    let source = DataSource::parse(&cfg.data)?;
    let pool = source.training_pool(&cfg.network)?;
    check_shape(&pool, &cfg.network)?;
    let (dt, dv) = source.default_sizes(pool.len());
    let sizes =
        (if cfg.train_size == 0 { dt } else { cfg.train_size }, if cfg.val_size == 0 { dv } else { cfg.val_size });
    let (mut train, mut val) = split(&pool, sizes, cfg.split_seed).map_err(as_data)?;
    let stats = if cfg.augment_policy()?.standardize {
        let stats = train.channel_stats();
        train.standardize(&stats).map_err(as_data)?;
        val.standardize(&stats).map_err(as_data)?;
        Some(stats)
    } else {
        None
    };
    Ok(Splits { train, val, stats })
}

pub fn check_shape(data: &Dataset, spec: &NetworkSpec) -> Result<(), CliError> {
    if data.is_empty() {
        return Err(data_err("dataset is empty"));
    }
    let shape = data.image_shape();
    if shape != (spec.in_channels, spec.height, spec.width) {
        return Err(data_err(format!(
            "images are {shape:?} but the network expects {:?}",
            (spec.in_channels, spec.height, spec.width)
        )));
    }
    if data.n_classes > spec.n_classes {
        return Err(data_err(format!("{} classes for a {}-class network", data.n_classes, spec.n_classes)));
    }
    Ok(())
}
