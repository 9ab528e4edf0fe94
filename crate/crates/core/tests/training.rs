use noisy_forge::checkpoint::encode_checkpoint;
use noisy_forge::data::{synthetic_blobs, Dataset};
use noisy_forge::eval::evaluate_at_sigma;
use noisy_forge::train::{clean_accuracy, cosine_lr, train, train_with, TrainConfig, TrainLog};
use noisy_forge::{Error, InjectionConfig, Model, NoiseSchedule, Preset};
use proptest::prelude::*;

fn blobs() -> (Dataset<f32>, Dataset<f32>) {
    synthetic_blobs(4, 60, 10, 2.5, 17).unwrap()
}

fn mlp(data: &Dataset<f32>) -> Model {
    Model::build_preset(
        Preset::Mlp2,
        data.sample_shape(),
        data.num_classes(),
        5,
        InjectionConfig::default(),
    )
    .unwrap()
}

fn cfg(epochs: usize, schedule: NoiseSchedule) -> TrainConfig {
    TrainConfig {
        lr0: 0.005,
        epochs,
        batch_size: 32,
        seed: 21,
        schedule,
        ..TrainConfig::default()
    }
}

fn run(data: &Dataset<f32>, c: &TrainConfig) -> (Model, TrainLog) {
    train(mlp(data), data, c).unwrap()
}

fn bits(log: &TrainLog) -> Vec<(u64, u64, u64)> {
    log.records
        .iter()
        .map(|r| (r.loss.to_bits(), r.clean_acc.to_bits(), r.lr.to_bits()))
        .collect()
}

#[test]
fn variance_aware_with_unit_alpha_and_zero_theta_is_noisy_training() {
    let (tr, _) = blobs();
    for epochs in 1..=5 {
        let (nt, nt_log) = run(&tr, &cfg(epochs, NoiseSchedule::fixed(0.7)));
        let (va, va_log) = run(
            &tr,
            &cfg(epochs, NoiseSchedule::variance_aware(0.7, 1.0, 0.0)),
        );
        assert_eq!(
            encode_checkpoint(&nt).unwrap(),
            encode_checkpoint(&va).unwrap(),
            "epochs {epochs}"
        );
        assert_eq!(bits(&nt_log), bits(&va_log));
    }
}

#[test]
fn fixed_zero_is_clean_training() {
    let (tr, _) = blobs();
    let (a, la) = run(&tr, &cfg(3, NoiseSchedule::None));
    let (b, lb) = run(&tr, &cfg(3, NoiseSchedule::fixed(0.0)));
    assert_eq!(a, b);
    assert_eq!(bits(&la), bits(&lb));
}

#[test]
fn identical_configs_give_identical_checkpoints() {
    let (tr, _) = blobs();
    let c = cfg(3, NoiseSchedule::variance_aware(1.0, 0.45, 0.4));
    let (a, la) = run(&tr, &c);
    let (b, lb) = run(&tr, &c);
    assert_eq!(
        encode_checkpoint(&a).unwrap(),
        encode_checkpoint(&b).unwrap()
    );
    assert_eq!(bits(&la), bits(&lb));
    let (other, _) = run(&tr, &TrainConfig { seed: 22, ..c });
    assert_ne!(
        a, other,
        "the seed must reach the noise and shuffle streams"
    );
}

#[test]
fn clean_training_separates_blobs() {
    let (tr, te) = blobs();
    let (model, log) = run(&tr, &cfg(15, NoiseSchedule::None));
    let first = log.records.first().unwrap().loss;
    let last = log.last().unwrap().loss;
    assert!(last <= first, "loss rose from {first} to {last}");
    let acc = clean_accuracy(&model, &te).unwrap();
    assert!(acc >= 0.95, "test accuracy {acc}");
    assert_eq!(log.records.len(), 15);
    assert_eq!(log.last().unwrap().lr, 0.0);
}

#[test]
fn epoch_callback_sees_every_record() {
    let (tr, _) = blobs();
    let mut seen = Vec::new();
    let (_, log) = train_with(mlp(&tr), &tr, &cfg(4, NoiseSchedule::fixed(0.3)), |r| {
        seen.push(r.epoch)
    })
    .unwrap();
    assert_eq!(seen, [1, 2, 3, 4]);
    assert_eq!(log.to_csv().lines().count(), 5);
}

#[test]
fn huge_learning_rate_diverges_with_a_typed_error() {
    let (tr, _) = blobs();
    let err = train(
        mlp(&tr),
        &tr,
        &TrainConfig {
            lr0: 1e30,
            ..cfg(3, NoiseSchedule::None)
        },
    )
    .unwrap_err();
    assert!(
        matches!(
            err,
            Error::Divergence { .. } | Error::NonFiniteGradient { .. }
        ),
        "{err}"
    );
}

#[test]
fn noisy_training_buys_robustness_on_blobs() {
    // Directional sanity check at desk scale: a model trained with noise
    // keeps more accuracy under strong inference noise than a clean one.
    let (tr, te) = synthetic_blobs(4, 80, 10, 1.5, 3).unwrap();
    let (clean, _) = run(&tr, &cfg(20, NoiseSchedule::None));
    let (noisy, _) = run(&tr, &cfg(20, NoiseSchedule::fixed(1.0)));
    let at = |m: &Model| evaluate_at_sigma(m, &te, 1.0, 5, 0).unwrap().0;
    assert!(
        at(&noisy) >= at(&clean) - 0.02,
        "noisy {} vs clean {}",
        at(&noisy),
        at(&clean)
    );
}

proptest! {
    #[test]
    fn cosine_lr_is_non_increasing(lr0 in 1e-5f64..1.0, total in 1usize..500) {
        let lrs: Vec<f64> = (0..=total).map(|t| cosine_lr(lr0, t, total)).collect();
        prop_assert_eq!(lrs[0], lr0);
        prop_assert!(lrs[total].abs() < 1e-15);
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
