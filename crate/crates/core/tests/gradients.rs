//! Central finite-difference checks of every differentiable op, in f64.

use noisy_forge::noise::Purpose;
use noisy_forge::{Result, RngStream, StreamPath, Tape, Tensor, Var};

const H: f64 = 1e-3;
const TOL: f64 = 1e-3;
const INSTANCES: u64 = 24;
/// Coordinates checked per input; larger inputs are subsampled.
const MAX_COORDS: usize = 48;

fn rng(op: u64, instance: u64) -> RngStream {
    RngStream::new(
        0xfd,
        StreamPath::new(Purpose::Data).epoch(op).batch(instance),
    )
}

fn dim(r: &mut RngStream, lo: usize, hi: usize) -> usize {
    lo + r.below((hi - lo + 1) as u64) as usize
}

fn random(r: &mut RngStream, shape: &[usize]) -> Vec<f64> {
    (0..shape.iter().product()).map(|_| r.normal()).collect()
}

/// Values at least `gap` away from zero, so ±H never crosses a ReLU kink.
fn away_from_zero(r: &mut RngStream, n: usize, gap: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = r.normal();
            v.signum() * (v.abs() + gap)
        })
        .collect()
}

/// Distinct values spaced well beyond 2H, shuffled, so max-pool winners
/// are stable under perturbation.
fn distinct(r: &mut RngStream, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| 0.05 * i as f64 - 0.025 * n as f64).collect();
    noisy_forge::data::shuffle(&mut v, r);
    v
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Loss = Σ op(inputs) ⊙ w for a fixed random `w`, which makes every
/// output coordinate contribute a distinct weight.
fn loss(
    inputs: &[(Vec<usize>, Vec<f64>)],
    w_seed: &mut RngStream,
    build: &Build,
    grads: bool,
) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(s, v)| {
            let t = Tensor::from_f64(s.clone(), v).unwrap();
            tape.leaf(if grads { t.with_grad() } else { t })
        })
        .collect();
    let out = build(&mut tape, &vars).unwrap();
    let shape = tape.shape(out).to_vec();
    let w = tape
        .constant(Tensor::from_f64(shape.clone(), &random(&mut w_seed.clone(), &shape)).unwrap());
    let prod = tape.mul(out, w).unwrap();
    let l = tape.sum(prod);
    let value = tape.value(l).data()[0];
    if !grads {
        return (value, vec![]);
    }
    tape.backward(l).unwrap();
    let g = vars
        .iter()
        .map(|v| tape.grad(*v).unwrap().to_vec())
        .collect();
    (value, g)
}

fn check(
    name: &str,
    op: u64,
    make: impl Fn(&mut RngStream) -> (Vec<(Vec<usize>, Vec<f64>)>, Box<Build>),
) {
    let mut worst = 0.0f64;
    for instance in 0..INSTANCES {
        let mut r = rng(op, instance);
        let (inputs, build) = make(&mut r);
        let w_seed = rng(op + 1000, instance);
        let (_, grads) = loss(&inputs, &mut w_seed.clone(), &*build, true);
        for (k, (_, values)) in inputs.iter().enumerate() {
            let n = values.len();
            let stride = n.div_ceil(MAX_COORDS).max(1);
            for j in (0..n).step_by(stride) {
                let mut plus = inputs.clone();
                plus[k].1[j] += H;
                let mut minus = inputs.clone();
                minus[k].1[j] -= H;
                let fp = loss(&plus, &mut w_seed.clone(), &*build, false).0;
                let fm = loss(&minus, &mut w_seed.clone(), &*build, false).0;
                let fd = (fp - fm) / (2.0 * H);
                let g = grads[k][j];
                let err = (fd - g).abs() / g.abs().max(1.0);
                worst = worst.max(err);
                assert!(
                    err <= TOL,
                    "{name} instance {instance} input {k}[{j}]: analytic {g} vs numeric {fd} (rel err {err:.2e})"
                );
            }
        }
    }
    assert!(worst <= TOL);
}

#[test]
fn matmul() {
    check("matmul", 1, |r| {
        let (m, k, n) = (dim(r, 1, 5), dim(r, 1, 6), dim(r, 1, 5));
        let a = random(r, &[m, k]);
        let b = random(r, &[k, n]);
        (
            vec![(vec![m, k], a), (vec![k, n], b)],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        )
    });
}

#[test]
fn conv2d() {
    check("conv2d", 2, |r| {
        let (n, c, f) = (dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 3));
        let (kh, kw) = (dim(r, 1, 3), dim(r, 1, 3));
        let stride = dim(r, 1, 2);
        let pad = dim(r, 0, 1);
        let (h, w) = (dim(r, kh, kh + 3), dim(r, kw, kw + 3));
        let with_bias = r.below(2) == 1;
        let mut inputs = vec![
            (vec![n, c, h, w], random(r, &[n, c, h, w])),
            (vec![f, c, kh, kw], random(r, &[f, c, kh, kw])),
        ];
        if with_bias {
            inputs.push((vec![f], random(r, &[f])));
        }
        (
            inputs,
            Box::new(move |t, v| t.conv2d(v[0], v[1], v.get(2).copied(), stride, pad)),
        )
    });
}

#[test]
fn relu() {
    check("relu", 3, |r| {
        let shape = vec![dim(r, 1, 4), dim(r, 1, 6)];
        let x = away_from_zero(r, shape.iter().product(), 0.01);
        (vec![(shape, x)], Box::new(|t, v| Ok(t.relu(v[0]))))
    });
}

#[test]
fn max_pool2d() {
    check("max_pool2d", 4, |r| {
        let k = dim(r, 1, 3);
        let stride = dim(r, 1, k);
        let (n, c) = (dim(r, 1, 2), dim(r, 1, 2));
        let (h, w) = (dim(r, k, k + 4), dim(r, k, k + 4));
        let x = distinct(r, n * c * h * w);
        (
            vec![(vec![n, c, h, w], x)],
            Box::new(move |t, v| t.max_pool2d(v[0], k, stride)),
        )
    });
}

#[test]
fn add_bias() {
    check("add_bias", 5, |r| {
        let (n, d) = (dim(r, 1, 5), dim(r, 1, 6));
        (
            vec![(vec![n, d], random(r, &[n, d])), (vec![d], random(r, &[d]))],
            Box::new(|t, v| t.add_bias(v[0], v[1])),
        )
    });
}

#[test]
fn add_and_mul() {
    check("add", 6, |r| {
        let s = vec![dim(r, 1, 4), dim(r, 1, 4)];
        (
            vec![(s.clone(), random(r, &s)), (s.clone(), random(r, &s))],
            Box::new(|t, v| t.add(v[0], v[1])),
        )
    });
    check("mul", 7, |r| {
        let s = vec![dim(r, 1, 4), dim(r, 1, 4)];
        (
            vec![(s.clone(), random(r, &s)), (s.clone(), random(r, &s))],
            Box::new(|t, v| t.mul(v[0], v[1])),
        )
    });
    check("mul_self", 8, |r| {
        let s = vec![dim(r, 1, 6)];
        (
            vec![(s.clone(), random(r, &s))],
            Box::new(|t, v| t.mul(v[0], v[0])),
        )
    });
}

#[test]
fn scale_sum_reshape_flatten() {
    check("scale", 9, |r| {
        let s = vec![dim(r, 1, 5)];
        let c = r.normal() * 3.0;
        (
            vec![(s.clone(), random(r, &s))],
            Box::new(move |t, v| Ok(t.scale(v[0], c))),
        )
    });
    check("sum", 10, |r| {
        let s = vec![dim(r, 1, 4), dim(r, 1, 4)];
        (
            vec![(s.clone(), random(r, &s))],
            Box::new(|t, v| Ok(t.sum(v[0]))),
        )
    });
    check("reshape", 11, |r| {
        let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
        (
            vec![(vec![a, b], random(r, &[a, b]))],
            Box::new(move |t, v| t.reshape(v[0], vec![b, a])),
        )
    });
    check("flatten", 12, |r| {
        let s = vec![dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3)];
        (
            vec![(s.clone(), random(r, &s))],
            Box::new(|t, v| t.flatten(v[0])),
        )
    });
}

#[test]
fn softmax_cross_entropy() {
    check("softmax_cross_entropy", 13, |r| {
        let (n, c) = (dim(r, 1, 6), dim(r, 2, 10));
        let labels: Vec<usize> = (0..n).map(|_| r.below(c as u64) as usize).collect();
        let logits: Vec<f64> = random(r, &[n, c]).iter().map(|x| 3.0 * x).collect();
        (
            vec![(vec![n, c], logits)],
            Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels)),
        )
    });
}

#[test]
fn composed_network() {
    // conv → relu → pool → flatten → dense → cross-entropy, end to end.
    check("composed", 14, |r| {
        let x = random(r, &[2, 1, 6, 6]);
        let k = random(r, &[2, 1, 3, 3]);
        let w = random(r, &[8, 3]);
        (
            vec![
                (vec![2, 1, 6, 6], x),
                (vec![2, 1, 3, 3], k),
                (vec![8, 3], w),
            ],
            Box::new(|t, v| {
                let c = t.conv2d(v[0], v[1], None, 1, 0)?;
                let a = t.relu(c);
                let p = t.max_pool2d(a, 2, 2)?;
                let f = t.flatten(p)?;
                let z = t.matmul(f, v[2])?;
                t.softmax_cross_entropy(z, &[0, 2])
            }),
        )
    });
}
