use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;
use wcaps_cli::RunConfig;
use wcaps_core::data::{encode_idx_images, encode_idx_labels};
use wcaps_core::model::{decode_checkpoint, save_checkpoint, Model};

const TOY: &str = "preset=micro\ndata=synthetic:120\nepochs=1\nmilestones=\nbatch_size=16\neval_batch=40\n";

fn wcaps(args: &[&str]) -> Output {
    wcaps_env(args, None)
}

fn wcaps_env(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_wcaps"));
    cmd.args(args).env_remove("WCAPS_SEED");
    if let Some(s) = seed_env {
        cmd.env("WCAPS_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_toy(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let base = if extra.contains("epochs=") { TOY.replace("epochs=1\n", "") } else { TOY.to_string() };
    let cfg = write_config(dir, &format!("{name}.conf"), &format!("{base}{extra}"));
    let out = dir.join(name);
    let o = wcaps(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

/// CSV rows with the wall-clock column removed.
fn metrics_without_seconds(dir: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(dir.join("metrics.csv")).unwrap();
    let secs = r.headers().unwrap().iter().position(|h| h == "seconds").unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().enumerate().filter(|(i, _)| *i != secs).map(|(_, v)| v.to_string()).collect())
        .collect()
}

fn printed(out: &str, key: &str) -> f64 {
    out.lines().find_map(|l| l.strip_prefix(&format!("{key} "))).unwrap().parse().unwrap()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&wcaps(&["--help"])), 0);
    assert_eq!(code(&wcaps(&["frobnicate"])), 2);
    assert_eq!(code(&wcaps(&["eval"])), 2);
}

#[test]
fn missing_config_file_exits_2_with_message() {
    let o = wcaps(&["train", "--config", "/nonexistent/run.conf"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("/nonexistent/run.conf"), "{}", stderr(&o));
}

#[test]
fn invalid_config_exits_2() {
    let dir = TempDir::new().unwrap();
    for (i, text) in ["bogus_key=1", "epochs=1\nepochs=2", "routing=magic", "batch_size=1"].iter().enumerate() {
        let cfg = write_config(dir.path(), &format!("c{i}.conf"), text);
        let o = wcaps(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
        assert_eq!(code(&o), 2, "{text}: {}", stderr(&o));
    }
    let o = wcaps_env(&["train", "--out", s(&dir.path().join("o"))], Some("not-a-number"));
    assert_eq!(code(&o), 2);
}

#[test]
fn data_errors_exit_3() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "toy.conf", TOY);
    let out = dir.path().join("o");
    let o = wcaps(&["train", "--config", s(&cfg), "--out", s(&out), "--data", "/nonexistent/mnist"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    // 28×28 MNIST images for an 8×8 network
    let o = wcaps(&["train", "--config", s(&cfg), "--out", s(&out), "--data", "../../data/mnist"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let o = wcaps(&["train", "--config", s(&cfg), "--out", s(&out), "--data", "synthetic:1"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn toy_one_epoch_run_writes_every_artifact() {
    let dir = TempDir::new().unwrap();
    let out = train_toy(dir.path(), "run", "");
    let rows = metrics_without_seconds(&out);
    assert_eq!(rows.len(), 1);
    let header = csv::Reader::from_path(out.join("metrics.csv")).unwrap().headers().unwrap().clone();
    assert_eq!(header.iter().collect::<Vec<_>>(), wcaps_core::train::METRICS_HEADER);
    assert!(out.join("best.wcap").is_file());
    let resolved = RunConfig::parse(&fs::read_to_string(out.join("config.txt")).unwrap()).unwrap();
    assert_eq!(resolved.epochs, 1);
    assert_eq!(resolved.out, s(&out));
}

#[test]
fn same_seed_reruns_give_identical_metrics() {
    let dir = TempDir::new().unwrap();
    let a = train_toy(dir.path(), "a", "epochs=2\n");
    let b = train_toy(dir.path(), "b", "epochs=2\n");
    assert_eq!(metrics_without_seconds(&a), metrics_without_seconds(&b));
    let c = train_toy(dir.path(), "c", "epochs=2\nseed=1\n");
    assert_ne!(metrics_without_seconds(&a), metrics_without_seconds(&c));
}

#[test]
fn resolved_config_reproduces_the_run_bit_for_bit() {
    let dir = TempDir::new().unwrap();
    let a = train_toy(dir.path(), "a", "epochs=2\nseed=3\n");
    let b = dir.path().join("b");
    let o = wcaps(&["train", "--config", s(&a.join("config.txt")), "--out", s(&b)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(metrics_without_seconds(&a), metrics_without_seconds(&b));
    let ta = decode_checkpoint(&fs::read(a.join("best.wcap")).unwrap()).unwrap().tensors;
    let tb = decode_checkpoint(&fs::read(b.join("best.wcap")).unwrap()).unwrap().tensors;
    assert_eq!(ta.len(), tb.len());
    for ((na, xa), (nb, xb)) in ta.iter().zip(&tb) {
        assert_eq!(na, nb);
        let bits = |t: &wcaps_core::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(xa), bits(xb), "{na}");
    }
}

#[test]
fn seed_precedence_is_flag_then_env_then_file() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "toy.conf", &format!("{TOY}seed=1\n"));
    let seed_of = |out: &Path| RunConfig::parse(&fs::read_to_string(out.join("config.txt")).unwrap()).unwrap().seed;
    let env_out = dir.path().join("env");
    assert_eq!(code(&wcaps_env(&["train", "--config", s(&cfg), "--out", s(&env_out)], Some("5"))), 0);
    assert_eq!(seed_of(&env_out), 5);
    let flag_out = dir.path().join("flag");
    let o = wcaps_env(&["train", "--config", s(&cfg), "--out", s(&flag_out), "--seed", "9"], Some("5"));
    assert_eq!(code(&o), 0);
    assert_eq!(seed_of(&flag_out), 9);
}

#[test]
fn eval_reports_the_accuracy_seen_at_save_time() {
    let dir = TempDir::new().unwrap();
    let out = train_toy(dir.path(), "run", "epochs=2\n");
    let ck = decode_checkpoint(&fs::read(out.join("best.wcap")).unwrap()).unwrap();
    let saved: f64 = ck.meta["val_acc"].parse().unwrap();
    let o = wcaps(&["eval", "--checkpoint", s(&out.join("best.wcap")), "--split", "val"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(printed(&stdout(&o), "accuracy"), saved);
    let o = wcaps(&["eval", "--checkpoint", s(&out.join("best.wcap"))]);
    assert_eq!(code(&o), 0);
    let (acc, cos) = (printed(&stdout(&o), "accuracy"), printed(&stdout(&o), "mean_cos"));
    assert!((0.0..=1.0).contains(&acc) && (0.0..=1.0).contains(&cos));
    assert_eq!(printed(&stdout(&o), "samples"), 24.0);
}

#[test]
fn unreadable_checkpoints_exit_4() {
    let dir = TempDir::new().unwrap();
    let out = train_toy(dir.path(), "run", "");
    let bytes = fs::read(out.join("best.wcap")).unwrap();
    let truncated = dir.path().join("truncated.wcap");
    fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
    let mut magic = bytes.clone();
    magic[0] = b'X';
    let bad_magic = dir.path().join("magic.wcap");
    fs::write(&bad_magic, magic).unwrap();
    let mut version = bytes.clone();
    version[4] = 9;
    let bad_version = dir.path().join("version.wcap");
    fs::write(&bad_version, version).unwrap();
    for ck in [truncated, bad_magic, bad_version, dir.path().join("missing.wcap")] {
        let o = wcaps(&["eval", "--checkpoint", s(&ck)]);
        assert_eq!(code(&o), 4, "{}: {}", ck.display(), stderr(&o));
        let o = wcaps(&["inspect-routing", "--checkpoint", s(&ck), "--out", s(&dir.path().join("r"))]);
        assert_eq!(code(&o), 4);
    }
}

#[test]
fn eval_on_an_empty_dataset_exits_3() {
    let dir = TempDir::new().unwrap();
    let out = train_toy(dir.path(), "run", "");
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    fs::write(empty.join("t10k-images-idx3-ubyte"), encode_idx_images(0, 8, 8, &[])).unwrap();
    fs::write(empty.join("t10k-labels-idx1-ubyte"), encode_idx_labels(&[])).unwrap();
    let o = wcaps(&["eval", "--checkpoint", s(&out.join("best.wcap")), "--data", s(&empty)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("empty"));
    let o = wcaps(&["eval", "--checkpoint", s(&out.join("best.wcap")), "--data", "synthetic:0"]);
    assert_eq!(code(&o), 3);
}

fn read_table(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(|v| v.parse().unwrap()).collect()).collect();
    (header, rows)
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "toy.conf", TOY);
    let out = dir.path().join("ab");
    let o = wcaps(&["ablate", "--variant", "uniform,random", "--config", s(&cfg), "--out", s(&out), "--seeds", "0,1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut r = csv::Reader::from_path(out.join("ablation.csv")).unwrap();
    assert_eq!(r.headers().unwrap().iter().collect::<Vec<_>>(), wcaps_cli::commands::ABLATION_HEADER);
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!((&rows[0][0], &rows[1][0]), ("uniform", "random"));
    for row in &rows {
        assert_eq!(&row[1], "2");
        let mean: f64 = row[2].parse().unwrap();
        let per_seed: Vec<f64> = row[7].split(';').map(|p| p.split_once(':').unwrap().1.parse().unwrap()).collect();
        assert!((mean - per_seed.iter().sum::<f64>() / 2.0).abs() < 1e-12);
    }
    for v in ["uniform", "random"] {
        for seed in ["seed0", "seed1"] {
            let resolved = fs::read_to_string(out.join(v).join(seed).join("config.txt")).unwrap();
            assert!(resolved.contains(&format!("routing={v}")));
        }
    }
}

#[test]
fn ablate_rejects_unknown_variants() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "toy.conf", TOY);
    let o = wcaps(&["ablate", "--variant", "random,foo", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("foo"));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn ablate_covers_weighting_and_nonlinearity_variants() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "toy.conf", TOY);
    let out = dir.path().join("ab");
    let o = wcaps(&["ablate", "--variant", "normalized", "--variant", "squash", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(fs::read_to_string(out.join("normalized/seed0/config.txt")).unwrap().contains("weighting=normalized"));
    assert!(fs::read_to_string(out.join("squash/seed0/config.txt")).unwrap().contains("nonlinearity=squash"));
}

const THREE_LEVELS: &str = "preset=micro\nlevels=4x2x4x1x1,2x2x4x2x1,2x2x4x1x1\ndata=synthetic:120\n\
                            epochs=1\nmilestones=\nbatch_size=16\neval_batch=40\n";

#[test]
fn inspect_routing_tables_have_one_row_per_block_and_convex_columns() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "three.conf", THREE_LEVELS);
    let run = dir.path().join("run");
    assert_eq!(code(&wcaps(&["train", "--config", s(&cfg), "--out", s(&run)])), 0);
    let out = dir.path().join("routing");
    let o = wcaps(&["inspect-routing", "--checkpoint", s(&run.join("best.wcap")), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for (level, blocks) in [(1, 4), (2, 2), (3, 2)] {
        let (header, rows) = read_table(&out.join(format!("level_{level}.csv")));
        assert_eq!(header, ["block", "class_0", "class_1", "class_2"]);
        assert_eq!(rows.len(), blocks);
        for c in 1..=3 {
            let sum: f64 = rows.iter().map(|r| r[c]).sum();
            assert!((sum - 1.0).abs() < 1e-3, "level {level} class {c}: {sum}");
        }
    }
    let (header, rows) = read_table(&out.join("level_3_positions.csv"));
    assert_eq!(&header[..2], ["i", "j"]);
    assert_eq!(rows.len(), 4 * 4);
    for c in 2..5 {
        assert!((rows.iter().map(|r| r[c]).sum::<f64>() - 1.0).abs() < 1e-3);
    }
    assert!(!out.join("level_2_positions.csv").exists());
}

#[test]
fn untrained_model_routes_nearly_uniformly_across_classes() {
    let dir = TempDir::new().unwrap();
    let cfg = RunConfig::parse(&format!("{TOY}data=synthetic:600\n").replace("data=synthetic:120\n", "")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model: Model<f32> = Model::new(&cfg.network, &mut rng).unwrap();
    model.refresh_spectral(5);
    let ck = dir.path().join("fresh.wcap");
    save_checkpoint(&ck, &model, &[("config", &cfg.to_text())]).unwrap();
    let out = dir.path().join("routing");
    let o = wcaps(&["inspect-routing", "--checkpoint", s(&ck), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (_, rows) = read_table(&out.join("level_1.csv"));
    for row in &rows {
        let classes = &row[1..];
        let spread =
            classes.iter().cloned().fold(f64::MIN, f64::max) - classes.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 0.02, "{row:?}");
        for w in classes {
            assert!((w - 0.5).abs() < 0.05, "{row:?}");
        }
    }
}

#[test]
fn gradcheck_exit_codes() {
    let o = wcaps(&["gradcheck", "--scope", "primitives"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("worst offender"));
    let o = wcaps(&["gradcheck", "--scope", "layers", "--fault-relu"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL"));
    assert_eq!(code(&wcaps(&["gradcheck", "--scope", "everything"])), 2);
}

#[test]
fn micro_model_gradcheck_finishes_within_a_minute() {
    let start = Instant::now();
    let o = wcaps(&["gradcheck", "--scope", "micro-model"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(start.elapsed().as_secs() < 60);
}
