use std::io::Write;
use std::path::{Path, PathBuf};

use flate2::write::GzEncoder;
use flate2::Compression;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wcaps_core::data::{
    augment, encode_idx_images, encode_idx_labels, load_cifar10, load_mnist, load_mnist_idx, mirror_image,
    parse_cifar_records, shift_image, split, synthetic, AugmentPolicy, Dataset, Normalization, SplitTag, CIFAR_RECORD,
};
use wcaps_core::{Error, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, bytes).unwrap();
    p
}

fn gz(bytes: &[u8]) -> Vec<u8> {
    let mut e = GzEncoder::new(Vec::new(), Compression::fast());
    e.write_all(bytes).unwrap();
    e.finish().unwrap()
}

fn random_idx(n: usize, h: usize, w: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut r = rng(seed);
    let pixels: Vec<u8> = (0..n * h * w).map(|_| r.gen()).collect();
    let labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..10)).collect();
    (encode_idx_images(n, h, w, &pixels), encode_idx_labels(&labels))
}

fn labelled(n: usize) -> Dataset {
    let images = Tensor::new(&[n, 1, 1, 1], (0..n).map(|i| i as f32).collect()).unwrap();
    Dataset::new(images, (0..n).map(|i| i % 10).collect(), 10, SplitTag::Train).unwrap()
}

fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

#[test]
fn idx_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lbl) = random_idx(7, 5, 4, 1);
    let ip = write(dir.path(), "i", &img);
    let lp = write(dir.path(), "l", &lbl);
    let d = load_mnist_idx(&ip, &lp).unwrap();
    assert_eq!(d.images.shape(), &[7, 1, 5, 4]);
    let pixels: Vec<u8> = d.images.data().iter().map(|&v| (v * 255.0).round() as u8).collect();
    let labels: Vec<u8> = d.labels.iter().map(|&l| l as u8).collect();
    assert_eq!(encode_idx_images(7, 5, 4, &pixels), img);
    assert_eq!(encode_idx_labels(&labels), lbl);
}

#[test]
fn gzipped_idx_matches_raw() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lbl) = random_idx(3, 2, 2, 2);
    let raw = load_mnist_idx(&write(dir.path(), "i", &img), &write(dir.path(), "l", &lbl)).unwrap();
    let packed = load_mnist_idx(&write(dir.path(), "i.gz", &gz(&img)), &write(dir.path(), "l.gz", &gz(&lbl))).unwrap();
    assert_eq!(raw.images, packed.images);
    assert_eq!(raw.labels, packed.labels);
}

#[test]
fn pixel_scaling() {
    let dir = tempfile::tempdir().unwrap();
    let img = encode_idx_images(1, 1, 3, &[0, 128, 255]);
    let lbl = encode_idx_labels(&[4]);
    let d = load_mnist_idx(&write(dir.path(), "i", &img), &write(dir.path(), "l", &lbl)).unwrap();
    assert_eq!(d.images.data(), &[0.0, 128.0 / 255.0, 1.0]);
    assert_eq!(d.labels, vec![4]);
}

#[test]
fn idx_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lbl) = random_idx(4, 3, 3, 3);
    let ip = write(dir.path(), "i", &img);
    let lp = write(dir.path(), "l", &lbl);

    // An image file where labels are expected.
    assert!(matches!(load_mnist_idx(&ip, &ip), Err(Error::BadMagic { expected: 2049, found: 2051 })));
    assert!(matches!(load_mnist_idx(&lp, &lp), Err(Error::BadMagic { expected: 2051, found: 2049 })));

    let short = write(dir.path(), "short", &img[..img.len() - 1]);
    assert!(matches!(load_mnist_idx(&short, &lp), Err(Error::TruncatedFile(_))));
    let header = write(dir.path(), "header", &img[..10]);
    assert!(matches!(load_mnist_idx(&header, &lp), Err(Error::TruncatedFile(_))));
    let tiny = write(dir.path(), "tiny", &img[..2]);
    assert!(matches!(load_mnist_idx(&tiny, &lp), Err(Error::TruncatedFile(_))));

    let mut long = img.clone();
    long.push(0);
    let long = write(dir.path(), "long", &long);
    assert!(matches!(load_mnist_idx(&long, &lp), Err(Error::CountMismatch(_))));

    let fewer = write(dir.path(), "fewer", &encode_idx_labels(&[1, 2, 3]));
    assert!(matches!(load_mnist_idx(&ip, &fewer), Err(Error::CountMismatch(_))));

    let bad_label = write(dir.path(), "bad", &encode_idx_labels(&[1, 2, 3, 11]));
    assert!(matches!(load_mnist_idx(&ip, &bad_label), Err(Error::InvalidData(_))));

    assert!(matches!(load_mnist_idx(&dir.path().join("missing"), &lp), Err(Error::DataUnavailable(_))));
    assert!(matches!(load_mnist(dir.path(), true), Err(Error::DataUnavailable(_))));
}

#[test]
fn empty_idx_file_is_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let d = load_mnist_idx(
        &write(dir.path(), "i", &encode_idx_images(0, 28, 28, &[])),
        &write(dir.path(), "l", &encode_idx_labels(&[])),
    )
    .unwrap();
    assert!(d.is_empty());
}

#[test]
fn official_mnist_files() {
    let train = load_mnist(&mnist_dir(), true).unwrap();
    let test = load_mnist(&mnist_dir(), false).unwrap();
    assert_eq!(train.images.shape(), &[60000, 1, 28, 28]);
    assert_eq!(test.images.shape(), &[10000, 1, 28, 28]);
    assert_eq!(train.split, SplitTag::Train);
    assert_eq!(test.split, SplitTag::Test);
    for d in [&train, &test] {
        assert!(d.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let mut counts = [0usize; 10];
        d.labels.iter().for_each(|&l| counts[l] += 1);
        assert!(counts.iter().all(|&c| c > 800));
    }
    // Well-known first training labels.
    assert_eq!(&train.labels[..5], &[5, 0, 4, 1, 9]);
    assert_eq!(&test.labels[..3], &[7, 2, 1]);
}

fn cifar_bytes(n: usize, seed: u64) -> Vec<u8> {
    let mut r = rng(seed);
    let mut out = Vec::with_capacity(n * CIFAR_RECORD);
    for _ in 0..n {
        out.push(r.gen_range(0..10));
        out.extend((0..CIFAR_RECORD - 1).map(|_| r.gen::<u8>()));
    }
    out
}

#[test]
fn cifar_records() {
    let bytes = cifar_bytes(3, 4);
    let (pixels, labels) = parse_cifar_records(&bytes).unwrap();
    assert_eq!(labels.len(), 3);
    assert_eq!(pixels.len(), 3 * 3072);
    assert_eq!(labels[0], bytes[0] as usize);
    // Second record, green plane, first pixel.
    assert_eq!(pixels[3072 + 1024], bytes[CIFAR_RECORD + 1 + 1024] as f32 / 255.0);
    assert!(matches!(parse_cifar_records(&bytes[..bytes.len() - 5]), Err(Error::TruncatedFile(_))));
}

#[test]
fn cifar_directory() {
    let dir = tempfile::tempdir().unwrap();
    for i in 1..=5 {
        write(dir.path(), &format!("data_batch_{i}.bin"), &cifar_bytes(2, i));
    }
    assert!(matches!(load_cifar10(dir.path()), Err(Error::DataUnavailable(_))));
    write(dir.path(), "test_batch.bin", &cifar_bytes(3, 9));
    let (train, test) = load_cifar10(dir.path()).unwrap();
    assert_eq!(train.images.shape(), &[10, 3, 32, 32]);
    assert_eq!(test.images.shape(), &[3, 3, 32, 32]);
    assert!(train.labels[0] < 10);
    let mut bad = cifar_bytes(1, 10);
    bad[0] = 10;
    write(dir.path(), "test_batch.bin", &bad);
    assert!(matches!(load_cifar10(dir.path()), Err(Error::InvalidData(_))));
}

#[test]
fn split_sizes_and_disjointness() {
    let all = labelled(60000);
    let (a, b) = split(&all, (50000, 10000), 1).unwrap();
    assert_eq!((a.len(), b.len()), (50000, 10000));
    assert_eq!((a.split, b.split), (SplitTag::Train, SplitTag::Val));
    let mut ids: Vec<usize> = a.images.data().iter().chain(b.images.data()).map(|&v| v as usize).collect();
    ids.sort_unstable();
    assert_eq!(ids, (0..60000).collect::<Vec<_>>());
    // Labels follow their images.
    for (img, &l) in a.images.data().iter().zip(&a.labels) {
        assert_eq!(*img as usize % 10, l);
    }

    let cifar = labelled(50000);
    let (a, b) = split(&cifar, (45000, 5000), 2).unwrap();
    assert_eq!((a.len(), b.len()), (45000, 5000));
    assert!(matches!(split(&cifar, (45000, 5001), 2), Err(Error::InvalidSizes(_))));
}

#[test]
fn split_is_deterministic_under_a_seed() {
    let all = labelled(500);
    let (a1, b1) = split(&all, (300, 100), 7).unwrap();
    let (a2, b2) = split(&all, (300, 100), 7).unwrap();
    let (a3, _) = split(&all, (300, 100), 8).unwrap();
    assert_eq!(a1.images, a2.images);
    assert_eq!(b1.labels, b2.labels);
    assert_ne!(a1.images, a3.images);
    // Subset coverage: train ∪ val holds exactly the 400 selected indices.
    let mut seen: Vec<usize> = a1.images.data().iter().chain(b1.images.data()).map(|&v| v as usize).collect();
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), 400);
}

#[test]
fn augmentation_identity_and_involution() {
    let batch = synthetic(4, 3, (3, 8, 8), 11).unwrap().images;
    assert_eq!(augment(&batch, &AugmentPolicy::NONE, &mut rng(0)), batch);
    let mut img = batch.data()[..3 * 64].to_vec();
    let orig = img.clone();
    mirror_image(&mut img, 3, 8, 8);
    assert_ne!(img, orig);
    assert_eq!(img[0], orig[7]);
    mirror_image(&mut img, 3, 8, 8);
    assert_eq!(img, orig);
    assert_eq!(shift_image(&orig, 3, 8, 8, 0, 0), orig);
}

#[test]
fn shift_reflects_at_the_border() {
    let row = [1.0f32, 2.0, 3.0, 4.0];
    assert_eq!(shift_image(&row, 1, 1, 4, 0, 1), vec![2.0, 3.0, 4.0, 3.0]);
    assert_eq!(shift_image(&row, 1, 1, 4, 0, -2), vec![3.0, 2.0, 1.0, 2.0]);
}

#[test]
fn cifar_augmentation_keeps_shape_and_labels() {
    // Each image is constant, so wherever it moves its value names its label.
    let n = 16;
    let data: Vec<f32> = (0..n).flat_map(|i| std::iter::repeat(i as f32).take(3 * 32 * 32)).collect();
    let batch = Tensor::new(&[n, 3, 32, 32], data).unwrap();
    let out = augment(&batch, &AugmentPolicy::CIFAR, &mut rng(12));
    assert_eq!(out.shape(), batch.shape());
    for (i, img) in out.data().chunks(3 * 32 * 32).enumerate() {
        assert!(img.iter().all(|&v| v == i as f32));
    }
    // Non-constant content does move.
    let textured = synthetic(8, 2, (3, 32, 32), 13).unwrap().images;
    assert_ne!(augment(&textured, &AugmentPolicy::CIFAR, &mut rng(14)), textured);
}

#[test]
fn standardization_uses_training_statistics() {
    let mut train = synthetic(200, 10, (3, 8, 8), 15).unwrap();
    let mut val = synthetic(50, 10, (3, 8, 8), 16).unwrap();
    let stats = train.channel_stats();
    train.standardize(&stats).unwrap();
    val.standardize(&stats).unwrap();
    let after = train.channel_stats();
    for c in 0..3 {
        assert!(after.mean[c].abs() < 1e-3);
        assert!((after.std[c] - 1.0).abs() < 1e-3);
    }
    assert!(matches!(train.normalization, Normalization::Standardized(_)));
    assert!(train.standardize(&stats).is_err());
}

#[test]
fn dataset_validation() {
    let img = Tensor::<f32>::zeros(&[2, 1, 2, 2]);
    assert!(matches!(Dataset::new(img.clone(), vec![0], 10, SplitTag::Train), Err(Error::CountMismatch(_))));
    assert!(matches!(Dataset::new(img.clone(), vec![0, 10], 10, SplitTag::Train), Err(Error::InvalidData(_))));
    assert!(matches!(
        Dataset::new(Tensor::zeros(&[2, 4]), vec![0, 1], 10, SplitTag::Train),
        Err(Error::InvalidShape(_))
    ));
    let d = Dataset::new(img, vec![3, 4], 10, SplitTag::Train).unwrap();
    assert_eq!(d.take(0).len(), 0);
    assert_eq!(d.batch(&[1, 1]).1, vec![4, 4]);
}

#[test]
fn synthetic_data_is_bounded_and_balanced() {
    let d = synthetic(100, 4, (1, 12, 12), 17).unwrap();
    assert!(d.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(d.labels.iter().filter(|&&l| l == 3).count(), 25);
    assert_eq!(synthetic(100, 4, (1, 12, 12), 17).unwrap().images, d.images);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn idx_round_trip_property(n in 0usize..6, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = random_idx(n, h, w, seed);
        let d = load_mnist_idx(&write(dir.path(), "i", &img), &write(dir.path(), "l", &lbl)).unwrap();
        let pixels: Vec<u8> = d.images.data().iter().map(|&v| (v * 255.0).round() as u8).collect();
        prop_assert_eq!(encode_idx_images(n, h, w, &pixels), img);
    }

    #[test]
    fn augmentation_never_mixes_images(seed in any::<u64>(), shift in 0usize..5) {
        let n = 6;
        let data: Vec<f32> = (0..n).flat_map(|i| std::iter::repeat(i as f32).take(2 * 6 * 6)).collect();
        let batch = Tensor::new(&[n, 2, 6, 6], data).unwrap();
        let policy = AugmentPolicy { mirror: true, shift, standardize: false };
        let out = augment(&batch, &policy, &mut rng(seed));
        for (i, img) in out.data().chunks(2 * 6 * 6).enumerate() {
            prop_assert!(img.iter().all(|&v| v == i as f32));
        }
    }
}
