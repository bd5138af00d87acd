use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wcaps_core::autodiff::set_relu_backward_fault;
use wcaps_core::capsule::Nonlinearity;
use wcaps_core::data::{ChannelStats, Dataset};
use wcaps_core::gradcheck::Scope;
use wcaps_core::model::{load_checkpoint, Model};
use wcaps_core::routing::{RoutingMode, Weighting};
use wcaps_core::train::{evaluate, routing_profile, train, Evaluation, RunMetrics};

use crate::config::RunConfig;
use crate::data::{check_shape, load_splits, DataSource};
use crate::{CliError, Command, EvalSplit};

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "best.wcap";
pub const ABLATION_FILE: &str = "ablation.csv";

const META_CONFIG: &str = "config";
const META_MEAN: &str = "channel_mean";
const META_STD: &str = "channel_std";

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Train { config, data, out, seed } => cmd_train(config.as_deref(), data, out, seed),
        Command::Eval { checkpoint, data, split } => cmd_eval(&checkpoint, data, split).map(drop),
        Command::Ablate { variants, config, out, data, seeds } => {
            cmd_ablate(&variants, config.as_deref(), out, data, &seeds)
        }
        Command::InspectRouting { checkpoint, data, out, split } => cmd_inspect_routing(&checkpoint, data, &out, split),
        Command::Gradcheck { scope, seed, fault_relu } => cmd_gradcheck(scope.as_deref(), seed, fault_relu),
    }
}

/// Config file (or defaults), then `WCAPS_SEED`, then command-line flags.
pub fn resolve_config(
    path: Option<&Path>,
    data: Option<String>,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_seed_env()?;
    if let Some(d) = data {
        cfg.data = d;
    }
    if let Some(o) = out {
        cfg.out = o.to_string_lossy().into_owned();
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn join(values: &[f64]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Trains the configured network into `out`: the resolved config, the
/// per-epoch metrics and the best-validation checkpoint.
pub fn run_training(cfg: &RunConfig, out: &Path) -> Result<RunMetrics, CliError> {
    let splits = load_splits(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::<f32>::new(&cfg.network, &mut rng)?;
    model.refresh_spectral(cfg.spectral_warmup);

    fs::create_dir_all(out)?;
    let text = cfg.to_text();
    fs::write(out.join(CONFIG_FILE), &text)?;
    let mut tc = cfg.train_config()?;
    tc.verbose = true;
    tc.meta.push((META_CONFIG.into(), text));
    if let Some(stats) = &splits.stats {
        tc.meta.push((META_MEAN.into(), join(&stats.mean)));
        tc.meta.push((META_STD.into(), join(&stats.std)));
    }
    Ok(train(&mut model, &splits.train, &splits.val, &tc, Some(out))?)
}

pub fn cmd_train(
    config: Option<&Path>,
    data: Option<String>,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let cfg = resolve_config(config, data, out, seed)?;
    let out = PathBuf::from(&cfg.out);
    let metrics = run_training(&cfg, &out)?;
    println!(
        "best val_acc {} at epoch {} ({} epochs, seed {})",
        metrics.best_val_acc(),
        metrics.best_epoch.map_or("-".into(), |e| e.to_string()),
        metrics.rows.len(),
        cfg.seed
    );
    println!("wrote {}", out.display());
    Ok(())
}

/// A trained model with the run config and standardization it was trained with.
pub struct LoadedModel {
    pub model: Model<f32>,
    pub config: RunConfig,
    pub stats: Option<ChannelStats>,
}

pub fn load_model(path: &Path) -> Result<LoadedModel, CliError> {
    let bad = |m: String| CliError::Checkpoint(format!("{}: {m}", path.display()));
    let (model, ck) = load_checkpoint(path).map_err(|e| bad(e.to_string()))?;
    let config = match ck.meta.get(META_CONFIG) {
        Some(text) => RunConfig::parse(text).map_err(|e| bad(format!("embedded run config: {e}")))?,
        None => RunConfig { network: model.spec().clone(), ..RunConfig::default() },
    };
    if &config.network != model.spec() {
        return Err(bad("run config disagrees with the network description".into()));
    }
    let floats = |key: &str| -> Result<Option<Vec<f64>>, CliError> {
        ck.meta
            .get(key)
            .map(|s| s.split(',').map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad {key}")))).collect())
            .transpose()
    };
    let stats = match (floats(META_MEAN)?, floats(META_STD)?) {
        (Some(mean), Some(std)) => Some(ChannelStats { mean, std }),
        (None, None) => None,
        _ => return Err(bad("incomplete channel statistics".into())),
    };
    Ok(LoadedModel { model, config, stats })
}

/// The samples a trained model is evaluated on, prepared the way its
/// training data was.
pub fn eval_dataset(loaded: &LoadedModel, data: Option<String>, split: EvalSplit) -> Result<Dataset, CliError> {
    let mut cfg = loaded.config.clone();
    if let Some(d) = data {
        cfg.data = d;
    }
    let set = match split {
        EvalSplit::Test => {
            let mut set = DataSource::parse(&cfg.data)?.test_set(&cfg.network)?;
            check_shape(&set, &cfg.network)?;
            if let Some(stats) = &loaded.stats {
                set.standardize(stats).map_err(|e| CliError::Data(e.to_string()))?;
            }
            set
        }
        EvalSplit::Val => load_splits(&cfg)?.val,
    };
    check_shape(&set, &cfg.network)?;
    Ok(set)
}

pub fn cmd_eval(checkpoint: &Path, data: Option<String>, split: EvalSplit) -> Result<Evaluation, CliError> {
    let loaded = load_model(checkpoint)?;
    let set = eval_dataset(&loaded, data, split)?;
    let cfg = &loaded.config;
    let ev = evaluate(&loaded.model, &set, cfg.eval_batch, cfg.seed)?;
    println!("samples {}", set.len());
    println!("accuracy {}", ev.accuracy);
    println!("mean_cos {}", ev.mean_cos);
    Ok(ev)
}

/// The network key a variant name sets.
pub fn variant_key(name: &str) -> Option<&'static str> {
    if RoutingMode::parse(name).is_some() {
        Some("routing")
    } else if Weighting::parse(name).is_some() {
        Some("weighting")
    } else if Nonlinearity::parse(name).is_some() {
        Some("nonlinearity")
    } else {
        None
    }
}

pub const ABLATION_HEADER: [&str; 8] =
    ["variant", "runs", "mean_val_acc", "std_val_acc", "min_val_acc", "max_val_acc", "mean_error", "seed_val_accs"];

pub fn cmd_ablate(
    variants: &[String],
    config: Option<&Path>,
    out: Option<PathBuf>,
    data: Option<String>,
    seeds: &[u64],
) -> Result<(), CliError> {
    let mut names: Vec<&str> = Vec::new();
    for v in variants.iter().map(|v| v.trim()) {
        if variant_key(v).is_none() {
            return Err(CliError::Config(format!("unknown variant {v:?}")));
        }
        if !names.contains(&v) {
            names.push(v);
        }
    }
    let base = resolve_config(config, data, out, None)?;
    let seeds = if seeds.is_empty() { vec![base.seed] } else { seeds.to_vec() };
    let root = PathBuf::from(&base.out);
    fs::create_dir_all(&root)?;

    let mut w = csv::Writer::from_path(root.join(ABLATION_FILE))?;
    w.write_record(ABLATION_HEADER)?;
    for name in names {
        let mut accs = Vec::new();
        for &seed in &seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.network.set(variant_key(name).expect("checked"), name)?;
            let dir = root.join(name).join(format!("seed{seed}"));
            cfg.out = dir.to_string_lossy().into_owned();
            eprintln!("== {name} seed {seed}");
            accs.push(run_training(&cfg, &dir)?.best_val_acc());
        }
        let n = accs.len() as f64;
        let mean = accs.iter().sum::<f64>() / n;
        let std = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        let min = accs.iter().copied().fold(f64::INFINITY, f64::min);
        let max = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let per_seed: Vec<String> = seeds.iter().zip(&accs).map(|(s, a)| format!("{s}:{a}")).collect();
        w.write_record([
            name.to_string(),
            accs.len().to_string(),
            mean.to_string(),
            std.to_string(),
            min.to_string(),
            max.to_string(),
            (1.0 - mean).to_string(),
            per_seed.join(";"),
        ])?;
        w.flush()?;
        println!("{name:>10}  mean val_acc {mean:.4} ± {std:.4} over {} seeds", accs.len());
    }
    Ok(())
}

/// Largest across-class range of any block's mean weight, over classes that
/// have samples.
pub fn class_spread(table: &[Vec<f64>], counts: &[usize]) -> f64 {
    let rows: Vec<&Vec<f64>> = table.iter().zip(counts).filter(|(_, &c)| c > 0).map(|(r, _)| r).collect();
    let cols = rows.first().map_or(0, |r| r.len());
    (0..cols)
        .map(|b| {
            let vals = rows.iter().map(|r| r[b]);
            vals.clone().fold(f64::NEG_INFINITY, f64::max) - vals.fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

pub fn level_file(level: usize) -> String {
    format!("level_{level}.csv")
}

pub fn positions_file(level: usize) -> String {
    format!("level_{level}_positions.csv")
}

/// Writes `level_<l>.csv` (one row per block, one column per class) for
/// every level and `level_<L>_positions.csv` (one row per position of the
/// last level).
pub fn cmd_inspect_routing(
    checkpoint: &Path,
    data: Option<String>,
    out: &Path,
    split: EvalSplit,
) -> Result<(), CliError> {
    let loaded = load_model(checkpoint)?;
    let set = eval_dataset(&loaded, data, split)?;
    let cfg = &loaded.config;
    let profiles = routing_profile(&loaded.model, &set, cfg.eval_batch, cfg.seed)?;
    fs::create_dir_all(out)?;
    let classes: Vec<String> = (0..cfg.network.n_classes).map(|c| format!("class_{c}")).collect();

    for (li, p) in profiles.iter().enumerate() {
        let level = li + 1;
        let table = p.per_block();
        let mut w = csv::Writer::from_path(out.join(level_file(level)))?;
        w.write_record(std::iter::once("block".to_string()).chain(classes.iter().cloned()))?;
        for b in 0..p.blocks {
            w.write_record(std::iter::once(b.to_string()).chain(table.iter().map(|row| row[b].to_string())))?;
        }
        w.flush()?;
        println!(
            "level {level}: {} blocks, {}x{} positions, class spread {:.4}",
            p.blocks,
            p.extent.0,
            p.extent.1,
            class_spread(&table, &p.counts)
        );
        if level == profiles.len() {
            let pos = p.per_position();
            let mut w = csv::Writer::from_path(out.join(positions_file(level)))?;
            w.write_record(["i".to_string(), "j".to_string()].into_iter().chain(classes.iter().cloned()))?;
            let (_, width) = p.extent;
            for q in 0..pos.first().map_or(0, |r| r.len()) {
                let cells = pos.iter().map(|row| row[q].to_string());
                w.write_record([(q / width).to_string(), (q % width).to_string()].into_iter().chain(cells))?;
            }
            w.flush()?;
        }
    }
    println!("samples per class {:?}", profiles.first().map(|p| p.counts.clone()).unwrap_or_default());
    println!("wrote {}", out.display());
    Ok(())
}

pub fn cmd_gradcheck(scope: Option<&str>, seed: u64, fault_relu: bool) -> Result<(), CliError> {
    let scopes = match scope {
        Some(s) => vec![Scope::parse(s).ok_or_else(|| CliError::Config(format!("unknown scope {s:?}")))?],
        None => Scope::ALL.to_vec(),
    };
    set_relu_backward_fault(fault_relu);
    let result = run_checks(&scopes, seed);
    set_relu_backward_fault(false);
    result
}

fn run_checks(scopes: &[Scope], seed: u64) -> Result<(), CliError> {
    let start = Instant::now();
    let (mut total, mut failed) = (0, 0);
    // (error / tolerance, description)
    let mut worst: Option<(f64, String)> = None;
    for &scope in scopes {
        let tol = scope.tolerance();
        for report in scope.run(seed)? {
            total += 1;
            let ok = report.passed(tol);
            failed += usize::from(!ok);
            let Some(input) = report.worst() else { continue };
            println!(
                "{} {:<12} {:<28} {:<10} {:.3e}",
                if ok { "PASS" } else { "FAIL" },
                scope.name(),
                report.name,
                input.name,
                input.rel_error
            );
            let ratio = if input.rel_error.is_nan() { f64::INFINITY } else { input.rel_error / tol };
            if worst.as_ref().map_or(true, |(r, _)| ratio > *r) {
                let desc = format!(
                    "{}/{}/{} rel error {:.3e} (tolerance {tol:e}, {} probes, {} skipped)",
                    scope.name(),
                    report.name,
                    input.name,
                    input.rel_error,
                    input.checked,
                    input.skipped
                );
                worst = Some((ratio, desc));
            }
        }
    }
    if let Some((_, desc)) = &worst {
        println!("worst offender: {desc}");
    }
    println!("{} of {total} checks passed in {:.1}s", total - failed, start.elapsed().as_secs_f64());
    if failed > 0 {
        return Err(CliError::CheckFailed(format!("{failed} of {total} checks above tolerance")));
    }
    Ok(())
}
