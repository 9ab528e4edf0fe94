//! On-disk formats: checkpoints, CIFAR-10 binary, IDX, and dataset
//! invariants.

use std::fs;
use std::path::Path;

use noisy_forge::checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_as, save_checkpoint,
};
use noisy_forge::data::{
    encode_cifar10_records, encode_idx_images, encode_idx_labels, load_cifar10_binary,
    load_idx_splits, parse_cifar10_records, subsample, synthetic_pattern_bytes, Dataset,
    PatternSpec, Split, CIFAR10_RECORD, CIFAR10_TEST_FILE, CIFAR10_TRAIN_FILES,
};
use noisy_forge::noise::Purpose;
use noisy_forge::{Error, InjectionConfig, Model, ModelF64, Preset, RngStream, StreamPath};
use proptest::prelude::*;
use tempfile::TempDir;

fn mem() -> &'static Path {
    Path::new("mem.nfck")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mlp_checkpoints_round_trip(dim in 1usize..40, classes in 1usize..12, seed in any::<u64>()) {
        let m = Model::build_preset(Preset::Mlp2, &[dim], classes, seed, InjectionConfig::default()).unwrap();
        let bytes = encode_checkpoint(&m).unwrap();
        let back: Model = decode_checkpoint(&bytes, mem(), InjectionConfig::default()).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn any_flipped_byte_is_a_format_error(pos_frac in 0.0f64..1.0, bit in 0u8..8) {
        let m = Model::build_preset(Preset::Mlp2, &[3, 4, 4], 5, 1, InjectionConfig::default()).unwrap();
        let mut bytes = encode_checkpoint(&m).unwrap();
        let pos = ((bytes.len() - 1) as f64 * pos_frac) as usize;
        bytes[pos] ^= 1 << bit;
        let err = decode_checkpoint::<f32>(&bytes, mem(), InjectionConfig::default()).unwrap_err();
        prop_assert!(matches!(err, Error::Format { .. }), "{}", err);
    }

    #[test]
    fn truncation_is_a_format_error(cut_frac in 0.0f64..1.0) {
        let m = Model::build_preset(Preset::Mlp2, &[6], 3, 2, InjectionConfig::default()).unwrap();
        let bytes = encode_checkpoint(&m).unwrap();
        let cut = ((bytes.len() - 1) as f64 * cut_frac) as usize;
        let res = decode_checkpoint::<f32>(&bytes[..cut], mem(), InjectionConfig::default());
        let is_format = matches!(res, Err(Error::Format { .. }));
        prop_assert!(is_format);
    }
}

#[test]
fn lenet_checkpoint_on_disk_and_f64_models_are_stored_as_f32() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("lenet.nfck");
    let m = Model::build_preset(
        Preset::LeNet5,
        &[3, 32, 32],
        10,
        9,
        InjectionConfig::default(),
    )
    .unwrap();
    save_checkpoint(&m, &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"NFCK");
    let back: Model = load_checkpoint(&path).unwrap();
    assert_eq!(back, m);
    // 62 006 parameters at 4 bytes each dominate the file.
    assert!(
        bytes.len() > 4 * 62_006 && bytes.len() < 4 * 62_006 + 512,
        "{}",
        bytes.len()
    );

    let m64 = ModelF64::build_preset(Preset::Mlp2, &[4], 2, 1, InjectionConfig::default()).unwrap();
    let as32 = encode_checkpoint(&m64).unwrap();
    let back64: ModelF64 = decode_checkpoint(&as32, mem(), InjectionConfig::default()).unwrap();
    assert_eq!(encode_checkpoint(&back64).unwrap(), as32);
}

#[test]
fn architecture_mismatch_is_reported() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("m.nfck");
    save_checkpoint(
        &Model::build_preset(Preset::Mlp2, &[6], 3, 2, InjectionConfig::default()).unwrap(),
        &path,
    )
    .unwrap();
    let other = Model::build_preset(Preset::Mlp2, &[7], 3, 2, InjectionConfig::default()).unwrap();
    let err = load_checkpoint_as(&path, &other).unwrap_err();
    assert!(
        matches!(&err, Error::Format { msg, .. } if msg.contains("shape disagreement")),
        "{err}"
    );
    assert!(matches!(
        load_checkpoint::<f32>(&tmp.path().join("none.nfck")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn injection_flags_choose_points_on_load() {
    let m = Model::build_preset(
        Preset::LeNet5,
        &[1, 32, 32],
        10,
        1,
        InjectionConfig::default(),
    )
    .unwrap();
    let bytes = encode_checkpoint(&m).unwrap();
    let no_logits = InjectionConfig {
        logits: false,
        ..InjectionConfig::default()
    };
    let with_pool = InjectionConfig {
        after_pool: true,
        ..InjectionConfig::default()
    };
    let a: Model = decode_checkpoint(&bytes, mem(), no_logits).unwrap();
    let b: Model = decode_checkpoint(&bytes, mem(), with_pool).unwrap();
    assert_eq!(a.injection_points().len() + 1, m.injection_points().len());
    assert_eq!(b.injection_points().len(), m.injection_points().len() + 2);
}

fn fake_cifar(dir: &Path, per_file: usize) {
    let mut r = RngStream::new(3, StreamPath::new(Purpose::Data));
    for name in CIFAR10_TRAIN_FILES
        .iter()
        .chain(std::iter::once(&CIFAR10_TEST_FILE))
    {
        let labels: Vec<u8> = (0..per_file).map(|i| (i % 10) as u8).collect();
        let pixels: Vec<u8> = (0..per_file * 3072).map(|_| r.below(256) as u8).collect();
        fs::write(
            dir.join(name),
            encode_cifar10_records(&pixels, &labels).unwrap(),
        )
        .unwrap();
    }
}

#[test]
fn cifar_binary_layout_and_normalization() {
    let tmp = TempDir::new().unwrap();
    fake_cifar(tmp.path(), 20);
    let (train, test) = load_cifar10_binary::<f32>(tmp.path()).unwrap();
    assert_eq!((train.len(), test.len()), (100, 20));
    assert_eq!(train.sample_shape(), &[3, 32, 32]);
    assert_eq!(train.split(), Split::Train);
    for c in 0..3 {
        let vals: Vec<f64> = (0..train.len())
            .flat_map(|i| (0..1024).map(move |p| (i, p)))
            .map(|(i, p)| train.images().data()[i * 3072 + c * 1024 + p] as f64)
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() <= 1e-4, "channel {c} mean {mean}");
        assert!((std - 1.0).abs() <= 1e-3, "channel {c} std {std}");
    }
    assert_eq!(test.stats(), train.stats());

    let (again, _) = load_cifar10_binary::<f32>(tmp.path()).unwrap();
    assert_eq!(again.images(), train.images());
    assert_eq!(again.labels(), train.labels());
}

#[test]
fn cifar_pixel_order_is_channel_planar() {
    let mut img = vec![0u8; 3072];
    img[0] = 255; // R(0,0)
    img[1024 + 33] = 51; // G(1,1)
    let (px, labels) =
        parse_cifar10_records(&encode_cifar10_records(&img, &[7]).unwrap(), Path::new("x"))
            .unwrap();
    assert_eq!(labels, [7]);
    assert_eq!(px[0], 1.0);
    assert_eq!(px[1024 + 33], 0.2);
}

#[test]
fn cifar_errors_carry_byte_offsets() {
    let good = encode_cifar10_records(&[0; 3072 * 2], &[1, 2]).unwrap();
    let err = parse_cifar10_records(&good[..good.len() - 5], Path::new("b.bin")).unwrap_err();
    assert!(
        err.to_string()
            .contains(&format!("offset {CIFAR10_RECORD}")),
        "{err}"
    );
    let mut bad = good.clone();
    bad[CIFAR10_RECORD] = 12;
    let err = parse_cifar10_records(&bad, Path::new("b.bin")).unwrap_err();
    assert!(matches!(err, Error::Format { .. }));
    assert!(
        err.to_string()
            .contains(&format!("offset {CIFAR10_RECORD}")),
        "{err}"
    );
    let tmp = TempDir::new().unwrap();
    assert!(matches!(
        load_cifar10_binary::<f32>(tmp.path()),
        Err(Error::Io { .. })
    ));
}

#[test]
fn idx_round_trip_and_header_checks() {
    let tmp = TempDir::new().unwrap();
    let p = |n: &str| tmp.path().join(n);
    let px: Vec<u8> = (0..6 * 4 * 5).map(|i| (i * 7 % 256) as u8).collect();
    fs::write(p("tri"), encode_idx_images(&px, 6, 4, 5)).unwrap();
    fs::write(p("trl"), encode_idx_labels(&[0, 1, 2, 0, 1, 2])).unwrap();
    fs::write(p("tei"), encode_idx_images(&px[..40], 2, 4, 5)).unwrap();
    fs::write(p("tel"), encode_idx_labels(&[2, 1])).unwrap();
    let (tr, te) = load_idx_splits::<f64>(&p("tri"), &p("trl"), &p("tei"), &p("tel")).unwrap();
    assert_eq!(tr.sample_shape(), &[1, 4, 5]);
    assert_eq!((tr.len(), te.len(), tr.num_classes()), (6, 2, 3));
    assert_eq!(&tr.images().data()[..40], te.images().data());

    let mut bad = encode_idx_images(&px, 6, 4, 5);
    bad[3] = 0x09;
    fs::write(p("bad"), &bad).unwrap();
    let err = load_idx_splits::<f64>(&p("bad"), &p("trl"), &p("tei"), &p("tel")).unwrap_err();
    assert!(
        matches!(err, Error::Format { .. }) && err.to_string().contains("magic"),
        "{err}"
    );
    fs::write(p("short"), &encode_idx_images(&px, 6, 4, 5)[..50]).unwrap();
    assert!(matches!(
        load_idx_splits::<f64>(&p("short"), &p("trl"), &p("tei"), &p("tel")),
        Err(Error::Format { .. })
    ));
    fs::write(p("fewlab"), encode_idx_labels(&[0, 1])).unwrap();
    assert!(matches!(
        load_idx_splits::<f64>(&p("tri"), &p("fewlab"), &p("tei"), &p("tel")),
        Err(Error::Format { .. })
    ));
}

fn labelled(counts: &[usize]) -> Dataset<f64> {
    let labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
        .collect();
    let n = labels.len();
    let raw: Vec<f64> = (0..n * 2).map(|i| i as f64).collect();
    Dataset::from_raw(&raw, vec![n, 2], labels, counts.len(), Split::Train, None).unwrap()
}

#[test]
fn subsample_is_exactly_stratified_on_divisible_sizes() {
    let ds = labelled(&[40, 20, 60, 80]);
    let sub = subsample(&ds, 100, 9).unwrap();
    assert_eq!(sub.class_counts(), [20, 10, 30, 40]);
    assert_eq!(subsample(&ds, 100, 9).unwrap().images(), sub.images());
    assert_ne!(subsample(&ds, 100, 10).unwrap().images(), sub.images());
    let firsts: Vec<f64> = (0..sub.len()).map(|i| sub.images().at(&[i, 0])).collect();
    assert!(
        firsts.windows(2).all(|w| w[0] < w[1]),
        "original order is kept"
    );
    assert!(subsample(&ds, 3, 0).is_err());
    assert!(subsample(&ds, 201, 0).is_err());
}

proptest! {
    #[test]
    fn subsample_sizes_are_exact(counts in prop::collection::vec(1usize..30, 1..8), frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let ds = labelled(&counts);
        let classes = counts.len();
        let n = classes + ((ds.len() - classes) as f64 * frac) as usize;
        let sub = subsample(&ds, n, seed).unwrap();
        prop_assert_eq!(sub.len(), n);
        for (got, (&full, exact)) in sub.class_counts().iter().zip(counts.iter().zip(counts.iter().map(|c| c * n))) {
            let quota = exact as f64 / ds.len() as f64;
            prop_assert!(*got <= full);
            prop_assert!((*got as f64 - quota).abs() < 1.0 + 1e-9, "got {} quota {}", got, quota);
        }
    }
}

#[test]
fn synthetic_patterns_are_reproducible_cifar_like_bytes() {
    let spec = PatternSpec {
        train_per_class: 3,
        test_per_class: 2,
        ..PatternSpec::default()
    };
    let a = synthetic_pattern_bytes(&spec).unwrap();
    let b = synthetic_pattern_bytes(&spec).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[0].0.len(), 30 * 3072);
    assert_eq!(a[1].1.len(), 20);
    let other = synthetic_pattern_bytes(&PatternSpec { seed: 1, ..spec }).unwrap();
    assert_ne!(a[0].0, other[0].0);
}
