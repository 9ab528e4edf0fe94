//! Layer graphs with noise-injection points, and the model presets.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::noise::{NoiseContext, Purpose, RngStream, StreamPath};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Dense {
        input: usize,
        output: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Flatten,
}

impl LayerKind {
    /// Shapes of `(weight, bias)` for parameterized layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerKind::Dense { input, output } => Some((vec![input, output], vec![output])),
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            )),
            _ => None,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Dense { input, .. } => input,
            LayerKind::Conv {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            _ => 0,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = || {
            Error::Dimension(format!(
                "layer {self:?} cannot consume input of shape {input:?}"
            ))
        };
        match *self {
            LayerKind::Dense { input: i, output } => {
                if input != [i] {
                    return Err(mismatch());
                }
                Ok(vec![output])
            }
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                if input.len() != 3 || input[0] != in_channels || stride == 0 {
                    return Err(mismatch());
                }
                let (h, w) = (input[1] + 2 * pad, input[2] + 2 * pad);
                if kernel == 0 || kernel > h || kernel > w {
                    return Err(mismatch());
                }
                Ok(vec![
                    out_channels,
                    (h - kernel) / stride + 1,
                    (w - kernel) / stride + 1,
                ])
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::MaxPool { kernel, stride } => {
                if input.len() != 3
                    || kernel == 0
                    || stride == 0
                    || kernel > input[1]
                    || kernel > input[2]
                {
                    return Err(mismatch());
                }
                Ok(vec![
                    input[0],
                    (input[1] - kernel) / stride + 1,
                    (input[2] - kernel) / stride + 1,
                ])
            }
            LayerKind::Flatten => Ok(vec![numel(input)]),
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerKind::Dense { input, output } => write!(f, "Dense({input}→{output})"),
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => write!(
                f,
                "Conv({in_channels}→{out_channels}, {kernel}×{kernel}, s{stride}, p{pad})"
            ),
            LayerKind::Relu => write!(f, "ReLU"),
            LayerKind::MaxPool { kernel, stride } => write!(f, "MaxPool({kernel}, s{stride})"),
            LayerKind::Flatten => write!(f, "Flatten"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub kind: LayerKind,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Layer<T> {
    pub fn parameterless(kind: LayerKind) -> Self {
        Self {
            kind,
            weight: None,
            bias: None,
        }
    }

    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`), zero bias.
    pub fn initialized(kind: LayerKind, stream: &mut RngStream) -> Self {
        let Some((ws, bs)) = kind.param_shapes() else {
            return Self::parameterless(kind);
        };
        let bound = (6.0 / kind.fan_in() as f64).sqrt();
        let n = numel(&ws);
        let w: Vec<T> = (0..n)
            .map(|_| T::of((2.0 * stream.uniform() - 1.0) * bound))
            .collect();
        Self {
            kind,
            weight: Some(Tensor::from_parts(ws, w)),
            bias: Some(Tensor::zeros(bs)),
        }
    }
}

/// Where noise is injected when a preset is built.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InjectionConfig {
    pub after_relu: bool,
    pub after_pool: bool,
    pub logits: bool,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            after_relu: true,
            after_pool: false,
            logits: true,
        }
    }
}

impl InjectionConfig {
    pub fn points(&self, kinds: &[LayerKind]) -> Vec<usize> {
        let last = kinds.len().saturating_sub(1);
        kinds
            .iter()
            .enumerate()
            .filter(|(i, k)| match k {
                LayerKind::Relu => self.after_relu,
                LayerKind::MaxPool { .. } => self.after_pool,
                LayerKind::Dense { .. } if *i == last => self.logits,
                _ => false,
            })
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    LeNet5,
    Mlp2,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lenet5" => Ok(Preset::LeNet5),
            "mlp2" => Ok(Preset::Mlp2),
            other => Err(Error::Usage(format!(
                "unknown model preset `{other}` (expected `lenet5` or `mlp2`)"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::LeNet5 => "lenet5",
            Preset::Mlp2 => "mlp2",
        })
    }
}

/// Ordered layer list with noise-injection points.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph<T> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
    injection_points: Vec<usize>,
    num_classes: usize,
}

/// Result of a recorded forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    /// One `(weight, bias)` pair of tape handles per parameterized layer,
    /// in layer order.
    pub params: Vec<Var>,
}

impl<T: Scalar> ModelGraph<T> {
    /// Validates shape composition, parameter shapes and injection points.
    pub fn new(
        input_shape: Vec<usize>,
        layers: Vec<Layer<T>>,
        injection_points: Vec<usize>,
    ) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "invalid model input shape {input_shape:?}"
            )));
        }
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            shape = layer
                .kind
                .output_shape(&shape)
                .map_err(|e| Error::Dimension(format!("layer {i} ({}): {e}", layer.kind)))?;
            let expected = layer.kind.param_shapes();
            let got = (
                layer.weight.as_ref().map(|w| w.shape().to_vec()),
                layer.bias.as_ref().map(|b| b.shape().to_vec()),
            );
            let ok = match (&expected, &got) {
                (Some((ws, bs)), (Some(w), Some(b))) => ws == w && bs == b,
                (None, (None, None)) => true,
                _ => false,
            };
            if !ok {
                return Err(Error::Dimension(format!(
                    "layer {i} ({}): parameter shapes {got:?} do not match {expected:?}",
                    layer.kind
                )));
            }
        }
        if shape.len() != 1 {
            return Err(Error::Dimension(format!(
                "model output must be a flat logit vector, got per-sample shape {shape:?}"
            )));
        }
        if injection_points.windows(2).any(|w| w[0] >= w[1])
            || injection_points.iter().any(|&p| p >= layers.len())
        {
            return Err(Error::Usage(format!(
                "injection points {injection_points:?} must be strictly increasing layer indices below {}",
                layers.len()
            )));
        }
        Ok(Self {
            input_shape,
            layers,
            injection_points,
            num_classes: shape[0],
        })
    }

    /// Builds a preset with deterministic Kaiming-uniform initialization.
    pub fn build_preset(
        preset: Preset,
        input_shape: &[usize],
        num_classes: usize,
        seed: u64,
        injection: InjectionConfig,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Usage("num_classes must be positive".into()));
        }
        let kinds = match preset {
            Preset::LeNet5 => {
                if input_shape.len() != 3 {
                    return Err(Error::Usage(format!(
                        "lenet5 needs a C×H×W input, got {input_shape:?}"
                    )));
                }
                let conv = |i, o| LayerKind::Conv {
                    in_channels: i,
                    out_channels: o,
                    kernel: 5,
                    stride: 1,
                    pad: 0,
                };
                let pool = LayerKind::MaxPool {
                    kernel: 2,
                    stride: 2,
                };
                let mut kinds = vec![
                    conv(input_shape[0], 6),
                    LayerKind::Relu,
                    pool,
                    conv(6, 16),
                    LayerKind::Relu,
                    pool,
                    LayerKind::Flatten,
                ];
                let mut shape = input_shape.to_vec();
                for k in &kinds {
                    shape = k.output_shape(&shape).map_err(|_| {
                        Error::Usage(format!(
                            "input shape {input_shape:?} is too small for lenet5"
                        ))
                    })?;
                }
                kinds.extend([
                    LayerKind::Dense {
                        input: shape[0],
                        output: 120,
                    },
                    LayerKind::Relu,
                    LayerKind::Dense {
                        input: 120,
                        output: 84,
                    },
                    LayerKind::Relu,
                    LayerKind::Dense {
                        input: 84,
                        output: num_classes,
                    },
                ]);
                kinds
            }
            Preset::Mlp2 => {
                let flat = numel(input_shape);
                if input_shape.is_empty() || flat == 0 {
                    return Err(Error::Usage(format!(
                        "mlp2 needs a non-empty input shape, got {input_shape:?}"
                    )));
                }
                let mut kinds = Vec::new();
                if input_shape.len() > 1 {
                    kinds.push(LayerKind::Flatten);
                }
                kinds.extend([
                    LayerKind::Dense {
                        input: flat,
                        output: 256,
                    },
                    LayerKind::Relu,
                    LayerKind::Dense {
                        input: 256,
                        output: num_classes,
                    },
                ]);
                kinds
            }
        };
        let layers = kinds
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let mut s = RngStream::new(seed, StreamPath::new(Purpose::Init).layer(i as u64));
                Layer::initialized(k, &mut s)
            })
            .collect();
        let points = injection.points(&kinds);
        Self::new(input_shape.to_vec(), layers, points)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn injection_points(&self) -> &[usize] {
        &self.injection_points
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn set_injection_points(&mut self, points: Vec<usize>) -> Result<()> {
        if points.windows(2).any(|w| w[0] >= w[1]) || points.iter().any(|&p| p >= self.layers.len())
        {
            return Err(Error::Usage(format!(
                "injection points {points:?} must be strictly increasing layer indices below {}",
                self.layers.len()
            )));
        }
        self.injection_points = points;
        Ok(())
    }

    /// Re-derives injection points from a configuration.
    pub fn with_injection(mut self, cfg: InjectionConfig) -> Self {
        let kinds: Vec<LayerKind> = self.layers.iter().map(|l| l.kind).collect();
        self.injection_points = cfg.points(&kinds);
        self
    }

    /// Parameter tensors in order `(w0, b0, w1, b1, ...)`.
    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
            .collect()
    }

    /// Names matching [`ModelGraph::parameters`], e.g. `layers[3].weight`.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if l.weight.is_some() {
                names.push(format!("layers[{i}].weight"));
            }
            if l.bias.is_some() {
                names.push(format!("layers[{i}].bias"));
            }
        }
        names
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    fn check_batch(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(Error::Dimension(format!(
                "batch shape {shape:?} does not match model input N×{:?}",
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Records a forward pass on `tape`. Parameters enter the tape as
    /// gradient-carrying leaves; injected noise enters as constants.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        noise: Option<&NoiseContext>,
    ) -> Result<Forward> {
        self.check_batch(tape.shape(input))?;
        let mut params = Vec::new();
        let mut x = input;
        let mut inject = self.injection_points.iter().peekable();
        for (i, layer) in self.layers.iter().enumerate() {
            x = match layer.kind {
                LayerKind::Dense { .. } => {
                    let w = tape.leaf(param(&layer.weight).clone().with_grad());
                    let b = tape.leaf(param(&layer.bias).clone().with_grad());
                    params.extend([w, b]);
                    let y = tape.matmul(x, w)?;
                    tape.add_bias(y, b)?
                }
                LayerKind::Conv { stride, pad, .. } => {
                    let w = tape.leaf(param(&layer.weight).clone().with_grad());
                    let b = tape.leaf(param(&layer.bias).clone().with_grad());
                    params.extend([w, b]);
                    tape.conv2d(x, w, Some(b), stride, pad)?
                }
                LayerKind::Relu => tape.relu(x),
                LayerKind::MaxPool { kernel, stride } => tape.max_pool2d(x, kernel, stride)?,
                LayerKind::Flatten => tape.flatten(x)?,
            };
            if inject.peek() == Some(&&i) {
                inject.next();
                if let Some(ctx) = noise.filter(|c| !c.is_silent()) {
                    let n = ctx.sample::<T>(i, tape.shape(x))?;
                    let c = tape.constant(n);
                    x = tape.add(x, c)?;
                }
            }
        }
        Ok(Forward { logits: x, params })
    }

    /// Inference-only forward pass.
    pub fn forward(&self, batch: &Tensor<T>, noise: Option<&NoiseContext>) -> Result<Tensor<T>> {
        self.check_batch(batch.shape())?;
        let mut tape = Tape::no_grad();
        let input = tape.constant(batch.clone());
        let out = self.forward_tape(&mut tape, input, noise)?;
        Ok(tape.take_value(out.logits))
    }

    /// Structural compatibility: same input shape and identical layer kinds.
    pub fn check_same_architecture(&self, other: &ModelGraph<T>) -> Result<()> {
        let a: Vec<LayerKind> = self.layers.iter().map(|l| l.kind).collect();
        let b: Vec<LayerKind> = other.layers.iter().map(|l| l.kind).collect();
        if self.input_shape != other.input_shape || a != b {
            return Err(Error::Dimension(format!(
                "architecture mismatch: input {:?} with {} layers vs input {:?} with {} layers",
                self.input_shape,
                a.len(),
                other.input_shape,
                b.len()
            )));
        }
        Ok(())
    }
}

fn param<T>(p: &Option<Tensor<T>>) -> &Tensor<T> {
    p.as_ref().expect("validated at construction")
}

/// Argmax of each row; ties resolve to the lowest class index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape().get(1).copied().unwrap_or(1);
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of rows whose argmax equals the label.
pub fn predict_accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    hits as f64 / labels.len() as f64
}
