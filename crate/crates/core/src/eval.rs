//! Robustness evaluation: noisy inference sweeps, AUC and rAUC, the
//! upper-bound curve and Preserved Accuracy.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax_rows, ModelGraph};
use crate::noise::{mix_seed, NoiseContext, NoiseSchedule};
use crate::scalar::Scalar;
use crate::train::{train, TrainConfig, EVAL_BATCH};

pub const CURVE_HEADER: &str = "sigma,mean_acc,std_acc,repeats";
pub const DEFAULT_REPEATS: usize = 5;
pub const DEFAULT_UPPER_GRID: [f64; 7] = [0.25, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0];

/// Accuracy as a function of inference noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub sigmas: Vec<f64>,
    pub mean_acc: Vec<f64>,
    pub std_acc: Vec<f64>,
    pub repeats: usize,
    /// Noise-free accuracy. Not part of the AUC; unknown for curves read
    /// back from CSV.
    pub clean_acc: Option<f64>,
}

impl RobustnessCurve {
    pub fn new(
        sigmas: Vec<f64>,
        mean_acc: Vec<f64>,
        std_acc: Vec<f64>,
        repeats: usize,
        clean_acc: Option<f64>,
    ) -> Result<Self> {
        if sigmas.is_empty() || sigmas.len() != mean_acc.len() || sigmas.len() != std_acc.len() {
            return Err(Error::Usage(format!(
                "curve needs equal non-empty columns, got {}/{}/{}",
                sigmas.len(),
                mean_acc.len(),
                std_acc.len()
            )));
        }
        check_grid(&sigmas)?;
        if let Some(a) = mean_acc.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Usage(format!("accuracy {a} outside [0, 1]")));
        }
        if let Some(s) = std_acc.iter().find(|s| !(**s >= 0.0)) {
            return Err(Error::Usage(format!("negative std {s}")));
        }
        if repeats == 0 {
            return Err(Error::Usage("repeats must be at least 1".into()));
        }
        Ok(Self {
            sigmas,
            mean_acc,
            std_acc,
            repeats,
            clean_acc,
        })
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    /// Mean accuracy at `sigma`, linearly interpolated. The clean point
    /// counts as `sigma = 0` when known.
    pub fn accuracy_at(&self, sigma: f64) -> Option<f64> {
        match self.clean_acc {
            Some(c) if self.sigmas[0] > 0.0 => {
                let mut xs = vec![0.0];
                xs.extend_from_slice(&self.sigmas);
                let mut ys = vec![c];
                ys.extend_from_slice(&self.mean_acc);
                interpolate(&xs, &ys, sigma)
            }
            _ => interpolate(&self.sigmas, &self.mean_acc, sigma),
        }
    }

    /// Grid point with the highest mean accuracy; ties go to the smaller σ.
    pub fn peak_sigma(&self) -> f64 {
        let mut best = 0;
        for (i, &a) in self.mean_acc.iter().enumerate() {
            if a > self.mean_acc[best] {
                best = i;
            }
        }
        self.sigmas[best]
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{CURVE_HEADER}\n");
        for i in 0..self.len() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                self.sigmas[i], self.mean_acc[i], self.std_acc[i], self.repeats
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn parse_csv(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CURVE_HEADER) {
            return Err(Error::format(
                path,
                format!("missing header `{CURVE_HEADER}`"),
            ));
        }
        let (mut s, mut m, mut d, mut reps) = (vec![], vec![], vec![], None);
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |what: &str| Error::format(path, format!("line {}: {what}", i + 2));
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            let num = |x: &str| {
                x.parse::<f64>()
                    .map_err(|_| bad(&format!("bad number `{x}`")))
            };
            s.push(num(f[0])?);
            m.push(num(f[1])?);
            d.push(num(f[2])?);
            let r: usize = f[3].parse().map_err(|_| bad("bad repeats"))?;
            if *reps.get_or_insert(r) != r {
                return Err(bad("inconsistent repeats"));
            }
        }
        Self::new(s, m, d, reps.unwrap_or(0), None).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, path)
    }
}

/// One trained point of the upper bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedPoint {
    pub sigma: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
    /// Identifier of the model trained at `sigma`.
    pub checkpoint: String,
}

/// Per-σ optimum envelope of noisy-trained models on an evaluation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpperBoundCurve {
    pub curve: RobustnessCurve,
    /// For each evaluation σ, the checkpoint(s) its value came from.
    pub provenance: Vec<String>,
    pub trained: Vec<TrainedPoint>,
}

impl UpperBoundCurve {
    /// Interpolates trained points onto `eval_sigmas`. Outside the trained
    /// range the nearest trained value is held constant.
    pub fn from_trained(
        mut trained: Vec<TrainedPoint>,
        eval_sigmas: &[f64],
        repeats: usize,
    ) -> Result<Self> {
        if trained.is_empty() {
            return Err(Error::Usage(
                "upper bound needs at least one trained point".into(),
            ));
        }
        trained.sort_by(|a, b| a.sigma.total_cmp(&b.sigma));
        check_grid(&trained.iter().map(|p| p.sigma).collect::<Vec<_>>())?;
        let xs: Vec<f64> = trained.iter().map(|p| p.sigma).collect();
        let (mut mean, mut std, mut prov) = (vec![], vec![], vec![]);
        for &s in eval_sigmas {
            let (lo, hi, w) = bracket(&xs, s);
            let (a, b) = (&trained[lo], &trained[hi]);
            mean.push(a.mean_acc + w * (b.mean_acc - a.mean_acc));
            std.push(a.std_acc + w * (b.std_acc - a.std_acc));
            prov.push(if lo == hi || w == 0.0 {
                a.checkpoint.clone()
            } else if w == 1.0 {
                b.checkpoint.clone()
            } else {
                format!("{}+{}", a.checkpoint, b.checkpoint)
            });
        }
        let curve = RobustnessCurve::new(eval_sigmas.to_vec(), mean, std, repeats, None)?;
        Ok(Self {
            curve,
            provenance: prov,
            trained,
        })
    }
}

/// Headline metrics persisted as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub auc: f64,
    pub rauc_percent: Option<f64>,
    pub preserved_accuracy_pp: Option<f64>,
    pub sigma_train: Option<f64>,
}

fn check_grid(sigmas: &[f64]) -> Result<()> {
    if let Some(s) = sigmas.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(Error::Usage(format!(
            "sigma {s} is not a finite non-negative value"
        )));
    }
    if sigmas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Usage(
            "sigma grid must be strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Evenly spaced grid `min, min + step, …` up to `max` inclusive. Points are
/// rounded to 10 decimals so that e.g. `0.1 + 2·0.1` prints as `0.3`.
pub fn sigma_grid(min: f64, max: f64, step: f64) -> Result<Vec<f64>> {
    if !(min >= 0.0 && max >= min && step > 0.0 && max.is_finite()) {
        return Err(Error::Usage(format!(
            "invalid sigma grid min={min} max={max} step={step}"
        )));
    }
    let n = ((max - min) / step + 1e-9).floor() as usize;
    Ok((0..=n)
        .map(|i| ((min + i as f64 * step) * 1e10).round() / 1e10)
        .collect())
}

/// The 30-point evaluation grid `0.1, 0.2, …, 3.0`.
pub fn default_grid() -> Vec<f64> {
    sigma_grid(0.1, 3.0, 0.1).expect("constant grid is valid")
}

/// Index pair and weight locating `x` in sorted `xs`, clamped at the ends.
fn bracket(xs: &[f64], x: f64) -> (usize, usize, f64) {
    let last = xs.len() - 1;
    if x <= xs[0] {
        return (0, 0, 0.0);
    }
    if x >= xs[last] {
        return (last, last, 0.0);
    }
    let hi = xs.partition_point(|&v| v < x);
    if xs[hi] == x {
        return (hi, hi, 0.0);
    }
    let lo = hi - 1;
    (lo, hi, (x - xs[lo]) / (xs[hi] - xs[lo]))
}

/// Linear interpolation of `(xs, ys)` at `x`; `None` outside `[xs₀, xsₙ]`.
pub fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> Option<f64> {
    if xs.is_empty() || x < xs[0] || x > xs[xs.len() - 1] || !x.is_finite() {
        return None;
    }
    let (lo, hi, w) = bracket(xs, x);
    Some(ys[lo] + w * (ys[hi] - ys[lo]))
}

/// Trapezoidal integral of `ys` over `xs`.
pub fn trapezoid(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() < 2 || xs.len() != ys.len() {
        return Err(Error::Usage(format!(
            "trapezoid needs at least 2 matching points, got {}",
            xs.len()
        )));
    }
    Ok(xs
        .windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum())
}

pub fn auc_trapezoid(curve: &RobustnessCurve) -> Result<f64> {
    trapezoid(&curve.sigmas, &curve.mean_acc)
}

/// `100 · AUC(method) / AUC(upper)` over an identical grid.
pub fn compute_rauc(method: &RobustnessCurve, upper: &RobustnessCurve) -> Result<f64> {
    if method.sigmas != upper.sigmas {
        return Err(Error::Usage(format!(
            "rAUC needs identical grids ({} vs {} points)",
            method.len(),
            upper.len()
        )));
    }
    let denom = auc_trapezoid(upper)?;
    if denom == 0.0 {
        return Err(Error::Degenerate("upper-bound AUC is zero".into()));
    }
    // ratio first so that a curve against itself gives exactly 100
    Ok(auc_trapezoid(method)? / denom * 100.0)
}

/// `100 · (acc_vant(σ_train) − acc_nt(σ_train))`, interpolating both
/// curves.
pub fn preserved_accuracy(
    vant: &RobustnessCurve,
    nt: &RobustnessCurve,
    sigma_train: f64,
) -> Result<f64> {
    let at = |c: &RobustnessCurve, which: &str| {
        c.accuracy_at(sigma_train).ok_or_else(|| {
            Error::Usage(format!(
                "sigma_train {sigma_train} lies outside the {which} curve grid"
            ))
        })
    };
    Ok(100.0 * (at(vant, "VANT")? - at(nt, "NT")?))
}

fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn count_correct<T: Scalar>(
    model: &ModelGraph<T>,
    data: &Dataset<T>,
    noise: impl Fn(usize, usize) -> Result<Option<NoiseContext>>,
) -> Result<usize> {
    let mut correct = 0;
    let mut start = 0;
    while start < data.len() {
        let count = EVAL_BATCH.min(data.len() - start);
        let (x, y) = data.range(start, count)?;
        let ctx = noise(start, count)?;
        let logits = model.forward(&x, ctx.as_ref())?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(y)
            .filter(|(p, l)| p == l)
            .count();
        start += count;
    }
    Ok(correct)
}

/// Mean and population std of accuracy over `repeats` noisy passes over
/// `data` at fixed `sigma`. Repeats run in parallel on the current rayon
/// pool; each draws from its own stream, so the result does not depend on
/// scheduling. `sigma = 0` is evaluated once and returns std 0.
pub fn evaluate_at_sigma<T: Scalar>(
    model: &ModelGraph<T>,
    data: &Dataset<T>,
    sigma: f64,
    repeats: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    if repeats == 0 {
        return Err(Error::Usage("repeats must be at least 1".into()));
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::Usage(format!("sigma must be >= 0, got {sigma}")));
    }
    let n = data.len() as f64;
    if sigma == 0.0 {
        let acc = count_correct(model, data, |_, _| Ok(None))? as f64 / n;
        return Ok((acc, 0.0));
    }
    let root = mix_seed(seed, sigma.to_bits());
    let accs = (0..repeats)
        .into_par_iter()
        .map(|r| {
            count_correct(model, data, |start, count| {
                NoiseContext::for_eval(sigma, root, r as u64, start as u64, count).map(Some)
            })
            .map(|c| c as f64 / n)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = accs.iter().sum::<f64>() / repeats as f64;
    Ok((mean, population_std(&accs)))
}

/// Evaluates `model` at every σ of `sigmas`; grid points run in parallel.
pub fn noise_sweep<T: Scalar>(
    model: &ModelGraph<T>,
    data: &Dataset<T>,
    sigmas: &[f64],
    repeats: usize,
    seed: u64,
) -> Result<RobustnessCurve> {
    if sigmas.is_empty() {
        return Err(Error::Usage("sweep grid is empty".into()));
    }
    check_grid(sigmas)?;
    let (clean, _) = evaluate_at_sigma(model, data, 0.0, 1, seed)?;
    let points = sigmas
        .par_iter()
        .map(|&s| evaluate_at_sigma(model, data, s, repeats, seed))
        .collect::<Result<Vec<_>>>()?;
    let (mean, std) = points.into_iter().unzip();
    RobustnessCurve::new(sigmas.to_vec(), mean, std, repeats, Some(clean))
}

/// Inference-side settings shared by sweeps, the upper bound and scans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub sigmas: Vec<f64>,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            sigmas: default_grid(),
            repeats: DEFAULT_REPEATS,
            seed: 0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: String| Error::Config {
            field: field.into(),
            msg,
        };
        if self.sigmas.is_empty() {
            return Err(err("sigmas", "must not be empty".into()));
        }
        check_grid(&self.sigmas).map_err(|e| err("sigmas", e.to_string()))?;
        if self.repeats == 0 {
            return Err(err("repeats", "must be at least 1".into()));
        }
        Ok(())
    }

    pub fn run<T: Scalar>(
        &self,
        model: &ModelGraph<T>,
        data: &Dataset<T>,
    ) -> Result<RobustnessCurve> {
        noise_sweep(model, data, &self.sigmas, self.repeats, self.seed)
    }
}

/// Trains one noisy-training model per σ of `train_sigmas` (in parallel),
/// evaluates each at its own σ and interpolates the results onto the
/// sweep grid. Returns the curve and the trained models in σ order.
///
/// `factory` builds a fresh model; `label` names the checkpoint of the
/// model trained at a σ (used for provenance only).
pub fn build_upper_bound<T: Scalar>(
    factory: impl Fn() -> Result<ModelGraph<T>> + Sync,
    train_data: &Dataset<T>,
    test_data: &Dataset<T>,
    train_sigmas: &[f64],
    train_cfg: &TrainConfig,
    sweep: &SweepConfig,
    label: impl Fn(f64) -> String + Sync,
) -> Result<(UpperBoundCurve, Vec<ModelGraph<T>>)> {
    if train_sigmas.is_empty() {
        return Err(Error::Usage("upper-bound training grid is empty".into()));
    }
    check_grid(train_sigmas)?;
    let runs = train_sigmas
        .par_iter()
        .map(|&s| {
            let at = |e: Error| Error::TrainingAt {
                sigma: s,
                source: Box::new(e),
            };
            let cfg = train_cfg.clone().with_schedule(NoiseSchedule::fixed(s));
            let (model, _) = train(factory().map_err(at)?, train_data, &cfg).map_err(at)?;
            let (mean, std) = evaluate_at_sigma(&model, test_data, s, sweep.repeats, sweep.seed)?;
            Ok((
                TrainedPoint {
                    sigma: s,
                    mean_acc: mean,
                    std_acc: std,
                    checkpoint: label(s),
                },
                model,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (trained, models): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    let curve = UpperBoundCurve::from_trained(trained, &sweep.sigmas, sweep.repeats)?;
    Ok((curve, models))
}
