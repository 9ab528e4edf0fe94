//! Noise schedules and deterministic noise sampling.
//!
//! Two levels of randomness are involved in variance-aware noisy training:
//! a per-image standard deviation `sigma_var ~ N(alpha * sigma_train, theta)`
//! and per-activation additive noise `x ~ N(0, sigma_var)`. Plain noisy
//! training is the special case where `sigma_var = sigma_train` always.
//!
//! Every random draw comes from an [`RngStream`]: a counter-based SplitMix64
//! generator keyed by a root seed and a structured [`StreamPath`]. Draws are
//! a pure function of `(root_seed, path, counter)`, so results do not depend
//! on evaluation order or thread count.

use std::cell::RefCell;
use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a 64-bit tag, e.g. the bit
/// pattern of an evaluation deviation.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag.wrapping_add(GOLDEN)))
}

/// What a stream is used for. The tag is the first component of every
/// stream path, which keeps e.g. initialization and training noise apart
/// even when the other coordinates coincide.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    SigmaVar = 3,
    TrainNoise = 4,
    EvalNoise = 5,
    Data = 6,
    Subsample = 7,
}

/// Coordinates of a stream below the root seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamPath {
    pub purpose: Purpose,
    pub epoch: u64,
    pub batch: u64,
    pub sample: u64,
    pub layer: u64,
}

impl StreamPath {
    pub fn new(purpose: Purpose) -> Self {
        Self {
            purpose,
            epoch: 0,
            batch: 0,
            sample: 0,
            layer: 0,
        }
    }

    pub fn epoch(mut self, epoch: u64) -> Self {
        self.epoch = epoch;
        self
    }

    pub fn batch(mut self, batch: u64) -> Self {
        self.batch = batch;
        self
    }

    pub fn sample(mut self, sample: u64) -> Self {
        self.sample = sample;
        self
    }

    pub fn layer(mut self, layer: u64) -> Self {
        self.layer = layer;
        self
    }
}

/// Counter-based random stream.
#[derive(Clone, Debug)]
pub struct RngStream {
    root_seed: u64,
    path: StreamPath,
    key: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(root_seed: u64, path: StreamPath) -> Self {
        let fields = [
            path.purpose as u64,
            path.epoch,
            path.batch,
            path.sample,
            path.layer,
        ];
        let mut key = splitmix64(root_seed ^ GOLDEN);
        for (i, f) in fields.into_iter().enumerate() {
            // distinct odd multipliers per position so (a, b) != (b, a)
            let salt = GOLDEN.wrapping_mul(2 * i as u64 + 3);
            key = splitmix64(key ^ f.wrapping_add(1).wrapping_mul(salt));
        }
        Self {
            root_seed,
            path,
            key,
            counter: 0,
        }
    }

    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }

    pub fn path(&self) -> StreamPath {
        self.path
    }

    /// Index of the next draw.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Repositions the stream at an absolute draw index.
    pub fn at(mut self, counter: u64) -> Self {
        self.counter = counter;
        self
    }

    #[inline]
    fn word(&self, index: u64) -> u64 {
        splitmix64(
            self.key
                .wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN)),
        )
    }

    pub fn next_u64(&mut self) -> u64 {
        let w = self.word(self.counter);
        self.counter += 1;
        w
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        // Lemire's multiply-shift; bias is < n / 2^64, irrelevant here
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Box–Muller pair built from words `2p` and `2p + 1`.
    #[inline]
    fn normal_pair(&self, pair: u64) -> (f64, f64) {
        let to_unit = |w: u64| (w >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let u1 = to_unit(self.word(2 * pair));
        let u2 = to_unit(self.word(2 * pair + 1));
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        let (s, c) = (TAU * u2).sin_cos();
        (r * c, r * s)
    }

    /// Standard normal draw `counter` of this stream; even counters take the
    /// cosine branch of a Box–Muller pair, odd counters the sine branch.
    fn normal_at(&self, counter: u64) -> f64 {
        let (c, s) = self.normal_pair(counter / 2);
        if counter.is_multiple_of(2) {
            c
        } else {
            s
        }
    }

    pub fn normal(&mut self) -> f64 {
        let z = self.normal_at(self.counter);
        self.counter += 1;
        z
    }

    /// Fills `out` with `N(0, sigma)` draws, advancing the counter.
    pub fn fill_normal<T: Scalar>(&mut self, out: &mut [T], sigma: f64) {
        let mut i = 0;
        if self.counter % 2 == 1 && !out.is_empty() {
            out[0] = T::of(sigma * self.normal());
            i = 1;
        }
        while i + 1 < out.len() {
            let (c, s) = self.normal_pair(self.counter / 2);
            out[i] = T::of(sigma * c);
            out[i + 1] = T::of(sigma * s);
            self.counter += 2;
            i += 2;
        }
        if i < out.len() {
            out[i] = T::of(sigma * self.normal());
        }
    }
}

/// One standard normal draw; advances the stream.
pub fn normal_draw(stream: &mut RngStream) -> f64 {
    stream.normal()
}

/// How negative `sigma_var` draws are mapped back to a valid deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaRectify {
    #[default]
    Clamp,
    Abs,
    Resample,
}

/// Which noise, if any, is injected during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSchedule {
    None,
    Fixed {
        sigma_train: f64,
    },
    #[serde(rename = "vant")]
    VarianceAware {
        sigma_train: f64,
        alpha: f64,
        theta: f64,
        #[serde(default)]
        rectify: SigmaRectify,
    },
}

impl NoiseSchedule {
    pub fn fixed(sigma_train: f64) -> Self {
        NoiseSchedule::Fixed { sigma_train }
    }

    pub fn variance_aware(sigma_train: f64, alpha: f64, theta: f64) -> Self {
        NoiseSchedule::VarianceAware {
            sigma_train,
            alpha,
            theta,
            rectify: SigmaRectify::Clamp,
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, NoiseSchedule::None)
    }

    /// Checks parameter ranges; errors name the offending field relative to
    /// the schedule object.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| {
            Err(Error::Config {
                field: field.to_string(),
                msg,
            })
        };
        match *self {
            NoiseSchedule::None => Ok(()),
            NoiseSchedule::Fixed { sigma_train } => {
                if !(sigma_train.is_finite() && sigma_train >= 0.0) {
                    return bad("sigma_train", format!("must be >= 0, got {sigma_train}"));
                }
                Ok(())
            }
            NoiseSchedule::VarianceAware {
                sigma_train,
                alpha,
                theta,
                ..
            } => {
                if !(sigma_train.is_finite() && sigma_train >= 0.0) {
                    return bad("sigma_train", format!("must be >= 0, got {sigma_train}"));
                }
                if !alpha.is_finite() {
                    return bad("alpha", format!("must be finite, got {alpha}"));
                }
                if !(theta.is_finite() && theta >= 0.0) {
                    return bad("theta", format!("must be >= 0, got {theta}"));
                }
                Ok(())
            }
        }
    }
}

/// Draws the per-image noise deviation for one input.
pub fn sample_sigma_var(schedule: &NoiseSchedule, stream: &mut RngStream) -> Result<f64> {
    match *schedule {
        NoiseSchedule::None => Err(Error::Usage(
            "sigma_var is undefined for a noise-free schedule".into(),
        )),
        NoiseSchedule::Fixed { sigma_train } => Ok(sigma_train),
        NoiseSchedule::VarianceAware {
            sigma_train,
            alpha,
            theta,
            rectify,
        } => {
            let mean = alpha * sigma_train;
            let draw = mean + theta * stream.normal();
            if draw >= 0.0 {
                return Ok(draw);
            }
            Ok(match rectify {
                SigmaRectify::Clamp => 0.0,
                SigmaRectify::Abs => -draw,
                SigmaRectify::Resample => {
                    if theta == 0.0 {
                        return Ok(0.0);
                    }
                    // bounded retries; the positive-tail mass is at least
                    // Φ(-|μ|/θ), fall back to clamping when it is negligible
                    (0..1000)
                        .map(|_| mean + theta * stream.normal())
                        .find(|v| *v >= 0.0)
                        .unwrap_or(0.0)
                }
            })
        }
    }
}

/// I.i.d. `N(0, sigma)` tensor of the given shape.
pub fn sample_activation_noise<T: Scalar>(
    shape: &[usize],
    sigma: f64,
    stream: &mut RngStream,
) -> Result<Tensor<T>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Usage(format!(
            "noise deviation must be a finite value >= 0, got {sigma}"
        )));
    }
    let mut t = Tensor::zeros(shape.to_vec());
    if sigma > 0.0 {
        stream.fill_normal(t.data_mut(), sigma);
    }
    Ok(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    Train,
    Eval,
}

/// One noise injection observed by a traced context.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InjectionRecord {
    pub layer: usize,
    pub sample: usize,
    pub sigma: f64,
}

/// Noise state for one forward pass over a batch: one deviation per image
/// shared by every injection point, and the stream coordinates used to draw
/// the per-activation noise.
#[derive(Debug)]
pub struct NoiseContext {
    per_sample_sigma: Vec<f64>,
    root_seed: u64,
    path: StreamPath,
    sample_offset: u64,
    mode: NoiseMode,
    trace: Option<RefCell<Vec<InjectionRecord>>>,
}

impl NoiseContext {
    /// `path` fixes purpose/epoch/batch; the sample and layer coordinates
    /// are filled in per injection. Sample `i` of the batch uses sample
    /// coordinate `sample_offset + i`.
    pub fn new(
        per_sample_sigma: Vec<f64>,
        root_seed: u64,
        path: StreamPath,
        sample_offset: u64,
        mode: NoiseMode,
    ) -> Result<Self> {
        if let Some(s) = per_sample_sigma
            .iter()
            .find(|s| !(s.is_finite() && **s >= 0.0))
        {
            return Err(Error::Usage(format!(
                "per-sample sigma must be >= 0, got {s}"
            )));
        }
        Ok(Self {
            per_sample_sigma,
            root_seed,
            path,
            sample_offset,
            mode,
            trace: None,
        })
    }

    /// Context for one training batch: draws `sigma_var` for each image.
    /// Returns `None` when the schedule injects no noise.
    pub fn for_training(
        schedule: &NoiseSchedule,
        root_seed: u64,
        epoch: u64,
        batch: u64,
        batch_len: usize,
    ) -> Result<Option<Self>> {
        if schedule.is_none() {
            return Ok(None);
        }
        let sigmas = (0..batch_len)
            .map(|i| {
                let path = StreamPath::new(Purpose::SigmaVar)
                    .epoch(epoch)
                    .batch(batch)
                    .sample(i as u64);
                sample_sigma_var(schedule, &mut RngStream::new(root_seed, path))
            })
            .collect::<Result<Vec<_>>>()?;
        let path = StreamPath::new(Purpose::TrainNoise)
            .epoch(epoch)
            .batch(batch);
        Self::new(sigmas, root_seed, path, 0, NoiseMode::Train).map(Some)
    }

    /// Context for evaluation at a fixed deviation.
    pub fn for_eval(
        sigma: f64,
        root_seed: u64,
        repeat: u64,
        sample_offset: u64,
        batch_len: usize,
    ) -> Result<Self> {
        let path = StreamPath::new(Purpose::EvalNoise).epoch(repeat);
        Self::new(
            vec![sigma; batch_len],
            root_seed,
            path,
            sample_offset,
            NoiseMode::Eval,
        )
    }

    /// Records every injection for later inspection.
    pub fn traced(mut self) -> Self {
        self.trace = Some(RefCell::new(Vec::new()));
        self
    }

    pub fn per_sample_sigma(&self) -> &[f64] {
        &self.per_sample_sigma
    }

    pub fn mode(&self) -> NoiseMode {
        self.mode
    }

    pub fn batch_len(&self) -> usize {
        self.per_sample_sigma.len()
    }

    pub fn is_silent(&self) -> bool {
        self.per_sample_sigma.iter().all(|&s| s == 0.0)
    }

    pub fn trace(&self) -> Vec<InjectionRecord> {
        self.trace
            .as_ref()
            .map(|t| t.borrow().clone())
            .unwrap_or_default()
    }

    /// Noise for injection point `layer` over a batch whose activations
    /// have shape `[batch_len, ..per_sample]`.
    pub fn sample<T: Scalar>(&self, layer: usize, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.first() != Some(&self.batch_len()) {
            return Err(Error::Dimension(format!(
                "noise context holds {} samples, activation shape is {shape:?}",
                self.batch_len()
            )));
        }
        let per_sample = numel(&shape[1..]);
        let mut out = Tensor::zeros(shape.to_vec());
        for (i, (&sigma, chunk)) in self
            .per_sample_sigma
            .iter()
            .zip(out.data_mut().chunks_exact_mut(per_sample))
            .enumerate()
        {
            if let Some(t) = &self.trace {
                t.borrow_mut().push(InjectionRecord {
                    layer,
                    sample: i,
                    sigma,
                });
            }
            if sigma > 0.0 {
                let path = self
                    .path
                    .sample(self.sample_offset + i as u64)
                    .layer(layer as u64);
                RngStream::new(self.root_seed, path).fill_normal(chunk, sigma);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(seed: u64) -> RngStream {
        RngStream::new(seed, StreamPath::new(Purpose::TrainNoise))
    }

    #[test]
    fn streams_are_reproducible() {
        let mut a = stream(7);
        let mut b = stream(7);
        for _ in 0..100 {
            assert_eq!(normal_draw(&mut a).to_bits(), normal_draw(&mut b).to_bits());
        }
        let mut c = RngStream::new(7, StreamPath::new(Purpose::TrainNoise).layer(1));
        let mut d = stream(7);
        assert_ne!(c.next_u64(), d.next_u64());
    }

    #[test]
    fn fill_matches_sequential_draws() {
        for start in [0u64, 1, 2, 5] {
            let mut a = stream(3).at(start);
            let mut buf = vec![0f64; 7];
            a.fill_normal(&mut buf, 1.0);
            let mut b = stream(3).at(start);
            for v in buf {
                assert_eq!(v.to_bits(), b.normal().to_bits());
            }
            assert_eq!(a.counter(), b.counter());
        }
    }

    #[test]
    fn sigma_var_degenerate_cases() {
        let mut s = stream(1);
        let vant = NoiseSchedule::variance_aware(0.7, 1.0, 0.0);
        let fixed = NoiseSchedule::fixed(1.0);
        for _ in 0..100 {
            assert_eq!(sample_sigma_var(&vant, &mut s).unwrap(), 0.7);
            assert_eq!(sample_sigma_var(&fixed, &mut s).unwrap(), 1.0);
        }
        assert!(matches!(
            sample_sigma_var(&NoiseSchedule::None, &mut s),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn rectify_modes_never_go_negative() {
        for rectify in [
            SigmaRectify::Clamp,
            SigmaRectify::Abs,
            SigmaRectify::Resample,
        ] {
            let sched = NoiseSchedule::VarianceAware {
                sigma_train: 0.1,
                alpha: 0.5,
                theta: 1.0,
                rectify,
            };
            let mut s = stream(11);
            let draws: Vec<f64> = (0..2000)
                .map(|_| sample_sigma_var(&sched, &mut s).unwrap())
                .collect();
            assert!(draws.iter().all(|&v| v >= 0.0));
            let zeros = draws.iter().filter(|&&v| v == 0.0).count();
            match rectify {
                SigmaRectify::Clamp => assert!(zeros > 500),
                _ => assert_eq!(zeros, 0),
            }
        }
    }

    #[test]
    fn activation_noise_edge_cases() {
        let mut s = stream(2);
        let z: Tensor<f32> = sample_activation_noise(&[3, 4], 0.0, &mut s).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(sample_activation_noise::<f32>(&[2], -0.1, &mut s).is_err());
        let a: Tensor<f32> = sample_activation_noise(&[5], 1.0, &mut stream(4)).unwrap();
        let b: Tensor<f32> = sample_activation_noise(&[5], 1.0, &mut stream(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn schedule_json_shape() {
        let s: NoiseSchedule =
            serde_json::from_str(r#"{"kind":"vant","sigma_train":0.4,"alpha":0.45,"theta":0.25}"#)
                .unwrap();
        assert_eq!(s, NoiseSchedule::variance_aware(0.4, 0.45, 0.25));
        let f: NoiseSchedule =
            serde_json::from_str(r#"{"kind":"fixed","sigma_train":1.0}"#).unwrap();
        assert_eq!(f, NoiseSchedule::fixed(1.0));
        let n: NoiseSchedule = serde_json::from_str(r#"{"kind":"none"}"#).unwrap();
        assert!(n.is_none());
        assert!(serde_json::from_str::<NoiseSchedule>(
            r#"{"kind":"fixed","sigma_train":1.0,"sigma":2}"#
        )
        .is_err());
        let back: NoiseSchedule =
            serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn validation_names_field() {
        let err = NoiseSchedule::variance_aware(0.4, 0.45, -0.1)
            .validate()
            .unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "theta"));
        assert!(NoiseSchedule::fixed(-1.0).validate().is_err());
        assert!(NoiseSchedule::variance_aware(0.4, 0.45, 0.25)
            .validate()
            .is_ok());
    }

    #[test]
    fn context_shares_sigma_per_image() {
        let sched = NoiseSchedule::variance_aware(1.0, 0.5, 0.3);
        let ctx = NoiseContext::for_training(&sched, 9, 0, 0, 4)
            .unwrap()
            .unwrap()
            .traced();
        let _: Tensor<f32> = ctx.sample(0, &[4, 6]).unwrap();
        let _: Tensor<f32> = ctx.sample(3, &[4, 2]).unwrap();
        let trace = ctx.trace();
        assert_eq!(trace.len(), 8);
        for rec in &trace {
            assert_eq!(rec.sigma, ctx.per_sample_sigma()[rec.sample]);
        }
        assert!(ctx.sample::<f32>(0, &[3, 6]).is_err());
    }

    #[test]
    fn context_rejects_negative_sigma() {
        let p = StreamPath::new(Purpose::EvalNoise);
        assert!(NoiseContext::new(vec![0.1, -0.2], 0, p, 0, NoiseMode::Eval).is_err());
    }
}
