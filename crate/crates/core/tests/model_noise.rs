//! Noise injection seen through the model: additivity, forward-only
//! behavior, per-image deviation and gradient transparency.

use noisy_forge::noise::{NoiseMode, Purpose};
use noisy_forge::{
    InjectionConfig, Layer, LayerKind, ModelF64, ModelGraph, NoiseContext, NoiseSchedule, Preset,
    RngStream, StreamPath, Tape, Tensor,
};

fn linear_model(points: Vec<usize>) -> ModelF64 {
    let kinds = [
        LayerKind::Dense {
            input: 4,
            output: 5,
        },
        LayerKind::Dense {
            input: 5,
            output: 3,
        },
    ];
    let layers = kinds
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            Layer::initialized(
                k,
                &mut RngStream::new(11, StreamPath::new(Purpose::Init).layer(i as u64)),
            )
        })
        .collect();
    ModelGraph::new(vec![4], layers, points).unwrap()
}

fn batch(n: usize, seed: u64) -> Tensor<f64> {
    let mut r = RngStream::new(seed, StreamPath::new(Purpose::Data));
    let v: Vec<f64> = (0..n * 4).map(|_| r.normal()).collect();
    Tensor::from_f64(vec![n, 4], &v).unwrap()
}

fn eval_ctx(sigma: f64, n: usize, offset: u64) -> NoiseContext {
    NoiseContext::for_eval(sigma, 77, 0, offset, n).unwrap()
}

#[test]
fn noise_is_additive_on_a_linear_model() {
    let model = linear_model(vec![0, 1]);
    let ctx = eval_ctx(0.7, 6, 0);
    let diff = |x: &Tensor<f64>| -> Vec<f64> {
        let noisy = model.forward(x, Some(&ctx)).unwrap();
        let clean = model.forward(x, None).unwrap();
        noisy
            .data()
            .iter()
            .zip(clean.data())
            .map(|(a, b)| a - b)
            .collect()
    };
    let (d1, d2) = (diff(&batch(6, 1)), diff(&batch(6, 2)));

    // Expected offset: n0 · W1 + n1, independent of the input.
    let n0: Tensor<f64> = ctx.sample(0, &[6, 5]).unwrap();
    let n1: Tensor<f64> = ctx.sample(1, &[6, 3]).unwrap();
    let w1 = model.layers()[1].weight.as_ref().unwrap();
    for i in 0..6 {
        for j in 0..3 {
            let expect: f64 =
                (0..5).map(|k| n0.at(&[i, k]) * w1.at(&[k, j])).sum::<f64>() + n1.at(&[i, j]);
            let k = i * 3 + j;
            assert!((d1[k] - expect).abs() < 1e-12, "{} vs {expect}", d1[k]);
            assert!((d1[k] - d2[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn input_gradient_ignores_noise() {
    let model = linear_model(vec![0, 1]);
    let x = batch(5, 3);
    let grad = |ctx: Option<&NoiseContext>| -> Vec<f64> {
        let mut tape = Tape::<f64>::new();
        let input = tape.leaf(x.clone().with_grad());
        let f = model.forward_tape(&mut tape, input, ctx).unwrap();
        let w = tape.constant(
            Tensor::from_f64(
                vec![5, 3],
                &(0..15).map(|i| i as f64 - 7.0).collect::<Vec<_>>(),
            )
            .unwrap(),
        );
        let p = tape.mul(f.logits, w).unwrap();
        let l = tape.sum(p);
        tape.backward(l).unwrap();
        tape.grad(input).unwrap().to_vec()
    };
    let ctx = eval_ctx(2.0, 5, 0);
    assert_eq!(grad(None), grad(Some(&ctx)));
}

#[test]
fn every_injection_point_of_an_image_sees_its_own_sigma_var() {
    let model =
        ModelF64::build_preset(Preset::Mlp2, &[6], 4, 1, InjectionConfig::default()).unwrap();
    assert_eq!(model.injection_points(), &[1, 2]);
    let schedule = NoiseSchedule::variance_aware(1.0, 0.45, 0.4);
    let ctx = NoiseContext::for_training(&schedule, 5, 2, 3, 16)
        .unwrap()
        .unwrap()
        .traced();
    let x = Tensor::from_f64(vec![16, 6], &[0.3; 96]).unwrap();
    model.forward(&x, Some(&ctx)).unwrap();
    let trace = ctx.trace();
    assert_eq!(trace.len(), 16 * 2);
    let sigmas = ctx.per_sample_sigma();
    assert!(
        sigmas.windows(2).any(|w| w[0] != w[1]),
        "variance-aware draws should differ"
    );
    for r in &trace {
        assert_eq!(r.sigma, sigmas[r.sample]);
    }
    for layer in [1, 2] {
        assert_eq!(trace.iter().filter(|r| r.layer == layer).count(), 16);
    }
    assert_eq!(ctx.mode(), NoiseMode::Train);
}

#[test]
fn injected_noise_is_zero_mean() {
    const N: usize = 100_000;
    let ctx = eval_ctx(1.5, 1000, 0);
    for layer in [0usize, 3] {
        let t: Tensor<f64> = ctx.sample(layer, &[1000, 100]).unwrap();
        let mean = t.data().iter().sum::<f64>() / N as f64;
        assert!(
            mean.abs() <= 3.0 * 1.5 / (N as f64).sqrt(),
            "layer {layer}: mean {mean}"
        );
    }
}

fn output_variance(model: &ModelF64, n: usize) -> f64 {
    let x = Tensor::from_f64(vec![n, 4], &vec![0.5; n * 4]).unwrap();
    let out = model.forward(&x, Some(&eval_ctx(0.8, n, 0))).unwrap();
    let col: Vec<f64> = (0..n).map(|i| out.at(&[i, 0])).collect();
    let m = col.iter().sum::<f64>() / n as f64;
    col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64
}

#[test]
fn removing_an_injection_point_never_increases_variance() {
    const N: usize = 100_000;
    let full = output_variance(&linear_model(vec![0, 1]), N);
    let reduced = output_variance(&linear_model(vec![1]), N);
    // Var of a sample variance is ≈ 2σ⁴/(n-1) for Gaussian outputs.
    let se = reduced * (2.0 / (N - 1) as f64).sqrt();
    assert!(
        reduced <= full + 3.0 * se,
        "reduced {reduced} vs full {full}"
    );
    assert!(
        (reduced - 0.64).abs() <= 3.0 * se,
        "only the logit noise remains: {reduced}"
    );
    let none = output_variance(&linear_model(vec![]), 1000);
    assert!(none < 1e-20, "{none}");
}

#[test]
fn parameter_gradients_match_finite_differences_under_fixed_noise() {
    const H: f64 = 1e-3;
    let mut model =
        ModelF64::build_preset(Preset::Mlp2, &[5], 3, 4, InjectionConfig::default()).unwrap();
    let x = {
        let mut r = RngStream::new(2, StreamPath::new(Purpose::Data));
        Tensor::from_f64(vec![4, 5], &(0..20).map(|_| r.normal()).collect::<Vec<_>>()).unwrap()
    };
    let labels = [0, 2, 1, 2];
    let schedule = NoiseSchedule::variance_aware(0.8, 0.5, 0.3);
    let ctx = NoiseContext::for_training(&schedule, 9, 0, 0, 4)
        .unwrap()
        .unwrap();

    let loss_of = |m: &ModelF64| -> f64 {
        let mut tape = Tape::<f64>::no_grad();
        let input = tape.constant(x.clone());
        let f = m.forward_tape(&mut tape, input, Some(&ctx)).unwrap();
        let l = tape.softmax_cross_entropy(f.logits, &labels).unwrap();
        tape.value(l).data()[0]
    };
    let mut tape = Tape::<f64>::new();
    let input = tape.constant(x.clone());
    let f = model.forward_tape(&mut tape, input, Some(&ctx)).unwrap();
    let l = tape.softmax_cross_entropy(f.logits, &labels).unwrap();
    tape.backward(l).unwrap();
    let grads: Vec<Vec<f64>> = f
        .params
        .iter()
        .map(|p| tape.grad(*p).unwrap().to_vec())
        .collect();

    for (pi, g) in grads.iter().enumerate() {
        for j in (0..g.len()).step_by(g.len().div_ceil(40)) {
            let orig = model.parameters()[pi].data()[j];
            model.parameters_mut()[pi].data_mut()[j] = orig + H;
            let fp = loss_of(&model);
            model.parameters_mut()[pi].data_mut()[j] = orig - H;
            let fm = loss_of(&model);
            model.parameters_mut()[pi].data_mut()[j] = orig;
            let fd = (fp - fm) / (2.0 * H);
            let err = (fd - g[j]).abs() / g[j].abs().max(1.0);
            assert!(err <= 1e-3, "param {pi}[{j}]: {} vs {fd}", g[j]);
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let model = ModelF64::build_preset(
        Preset::LeNet5,
        &[1, 32, 32],
        10,
        8,
        InjectionConfig::default(),
    )
    .unwrap();
    let x = Tensor::from_f64(
        vec![2, 1, 32, 32],
        &(0..2048)
            .map(|i| ((i * 37) % 101) as f64 / 50.0 - 1.0)
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let ctx = eval_ctx(0.5, 2, 40);
    let a = model.forward(&x, Some(&ctx)).unwrap();
    let b = model.forward(&x, Some(&ctx)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, model.forward(&x, None).unwrap());
}
