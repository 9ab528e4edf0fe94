//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to a [`Tape`] and returns a [`Var`]
//! handle. Nodes are only ever appended, so a node's inputs always have
//! smaller indices and walking the tape backwards is a valid reverse
//! topological order. [`Tape::backward`] fills the gradient buffer of every
//! node that requires a gradient; leaves unreachable from the loss keep a
//! zero gradient.
//!
//! ```
//! use noisy_forge::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_f64(vec![2], &[1.0, -2.0]).unwrap().with_grad());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0]);
//! ```

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul,
    Conv2d {
        geom: ConvGeom,
        filters: usize,
        bias: bool,
    },
    Relu,
    MaxPool {
        geom: ConvGeom,
    },
    AddBias,
    Add,
    Mul,
    Scale(f64),
    Sum,
    Reshape,
    SoftmaxCrossEntropy {
        classes: usize,
    },
}

/// Values kept from the forward pass for the backward rule.
#[derive(Debug)]
enum Saved<T> {
    None,
    Cols(Vec<T>),
    ArgMax(Vec<usize>),
    Probs { probs: Vec<f64>, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node<T> {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor<T>,
    saved: Saved<T>,
}

/// Append-only record of tensor operations.
///
/// A tape is single-threaded and must not be shared; build one per forward
/// pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never records gradient context; used for inference.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Places a tensor on the tape. Its `requires_grad` flag is respected
    /// unless the tape was created with [`Tape::no_grad`].
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        if !self.grad_enabled && tensor.requires_grad() {
            tensor.set_requires_grad(false);
        }
        self.push(Op::Leaf, vec![], tensor, Saved::None)
    }

    /// Places a tensor that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(false);
        self.push(Op::Leaf, vec![], tensor, Saved::None)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient buffer of a node, available after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(T::zero()))
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn any_requires_grad(&self, inputs: &[Var]) -> bool {
        self.grad_enabled && inputs.iter().any(|&v| self.requires_grad(v))
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, mut value: Tensor<T>, saved: Saved<T>) -> Var {
        debug_assert!(inputs.iter().all(|v| v.0 < self.nodes.len()));
        let needs =
            matches!(op, Op::Leaf) && value.requires_grad() || self.any_requires_grad(&inputs);
        value.set_requires_grad(needs);
        let idx = self.nodes.len();
        self.nodes.push(Node {
            op,
            inputs,
            value,
            saved,
        });
        Var(idx)
    }

    /// Matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul: incompatible shapes {sa:?} and {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(
            Op::MatMul,
            vec![a, b],
            Tensor::from_parts(vec![m, n], out),
            Saved::None,
        ))
    }

    /// Cross-correlation of `input[N×C×H×W]` with `kernel[F×C×kh×kw]`,
    /// optionally adding a per-filter bias `[F]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] {
            return Err(Error::Dimension(format!(
                "conv2d: input {si:?} and kernel {sk:?} are incompatible"
            )));
        }
        if stride == 0 {
            return Err(Error::Dimension("conv2d: stride must be at least 1".into()));
        }
        let (hp, wp) = (si[2] + 2 * pad, si[3] + 2 * pad);
        if sk[2] > hp || sk[3] > wp {
            return Err(Error::Dimension(format!(
                "conv2d: kernel {sk:?} larger than padded input {hp}×{wp}"
            )));
        }
        let filters = sk[0];
        if let Some(b) = bias {
            if self.shape(b) != [filters] {
                return Err(Error::Dimension(format!(
                    "conv2d: bias {:?} does not match {filters} filters",
                    self.shape(b)
                )));
            }
        }
        let geom = ConvGeom {
            batch: si[0],
            channels: si[1],
            height: si[2],
            width: si[3],
            kh: sk[2],
            kw: sk[3],
            stride,
            pad,
            out_h: (hp - sk[2]) / stride + 1,
            out_w: (wp - sk[3]) / stride + 1,
        };
        let cols = kernels::im2col(self.value(input).data(), &geom);
        let flat: Vec<f64> = kernels::matmul_nt(
            &cols,
            self.value(kernel).data(),
            geom.positions(),
            geom.patch(),
            filters,
        );
        let spatial = geom.out_h * geom.out_w;
        let bias_vals: Vec<f64> = match bias {
            Some(b) => self.value(b).to_f64_vec(),
            None => vec![0.0; filters],
        };
        let mut out = vec![T::zero(); geom.batch * filters * spatial];
        for n in 0..geom.batch {
            for s in 0..spatial {
                let row = &flat[(n * spatial + s) * filters..(n * spatial + s + 1) * filters];
                for (f, &v) in row.iter().enumerate() {
                    out[(n * filters + f) * spatial + s] = T::of(v + bias_vals[f]);
                }
            }
        }
        let mut inputs = vec![input, kernel];
        if let Some(b) = bias {
            inputs.push(b);
        }
        let saved = if self.any_requires_grad(&inputs) {
            Saved::Cols(cols)
        } else {
            Saved::None
        };
        Ok(self.push(
            Op::Conv2d {
                geom,
                filters,
                bias: bias.is_some(),
            },
            inputs,
            Tensor::from_parts(vec![geom.batch, filters, geom.out_h, geom.out_w], out),
            saved,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out: Vec<T> = v
            .data()
            .iter()
            .map(|&a| if a > T::zero() { a } else { T::zero() })
            .collect();
        let shape = v.shape().to_vec();
        self.push(
            Op::Relu,
            vec![x],
            Tensor::from_parts(shape, out),
            Saved::None,
        )
    }

    /// Windowed maximum over `input[N×C×H×W]`.
    pub fn max_pool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(Error::Dimension(format!(
                "max_pool2d: expected N×C×H×W input, got {s:?}"
            )));
        }
        if k == 0 || stride == 0 || k > s[2] || k > s[3] {
            return Err(Error::Dimension(format!(
                "max_pool2d: window {k} (stride {stride}) does not fit input {s:?}"
            )));
        }
        let geom = ConvGeom {
            batch: s[0],
            channels: s[1],
            height: s[2],
            width: s[3],
            kh: k,
            kw: k,
            stride,
            pad: 0,
            out_h: (s[2] - k) / stride + 1,
            out_w: (s[3] - k) / stride + 1,
        };
        let data = self.value(input).data();
        let planes = geom.batch * geom.channels;
        let mut out = Vec::with_capacity(planes * geom.out_h * geom.out_w);
        let mut arg = Vec::with_capacity(out.capacity());
        for p in 0..planes {
            let base = p * geom.height * geom.width;
            for oh in 0..geom.out_h {
                for ow in 0..geom.out_w {
                    let mut best = base + oh * stride * geom.width + ow * stride;
                    for ki in 0..k {
                        for kj in 0..k {
                            let idx = base + (oh * stride + ki) * geom.width + ow * stride + kj;
                            // strict comparison keeps the first maximum in scan order
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    arg.push(best);
                }
            }
        }
        let saved = if self.any_requires_grad(&[input]) {
            Saved::ArgMax(arg)
        } else {
            Saved::None
        };
        Ok(self.push(
            Op::MaxPool { geom },
            vec![input],
            Tensor::from_parts(vec![geom.batch, geom.channels, geom.out_h, geom.out_w], out),
            saved,
        ))
    }

    /// Adds `bias[F]` to every row of `x[N×F]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::Dimension(format!(
                "add_bias: bias {sb:?} does not match rows of {sx:?}"
            )));
        }
        let f = sx[1];
        let shape = sx.to_vec();
        let b = self.value(bias).data().to_vec();
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % f])
            .collect();
        Ok(self.push(
            Op::AddBias,
            vec![x, bias],
            Tensor::from_parts(shape, out),
            Saved::None,
        ))
    }

    /// Elementwise sum of two same-shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(
            Op::Add,
            vec![a, b],
            Tensor::from_parts(shape, out),
            Saved::None,
        ))
    }

    /// Elementwise product of two same-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(
            Op::Mul,
            vec![a, b],
            Tensor::from_parts(shape, out),
            Saved::None,
        ))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| T::of(v.as_f64() * c))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(
            Op::Scale(c),
            vec![x],
            Tensor::from_parts(shape, out),
            Saved::None,
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(T::of(s)), Saved::None)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape, vec![x], v, Saved::None))
    }

    /// Collapses all but the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = *s
            .first()
            .ok_or_else(|| Error::Dimension("flatten: scalar input".into()))?;
        let rest = numel(&s[1..]);
        self.reshape(x, vec![n, rest])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "softmax_cross_entropy: logits {s:?} vs {} labels",
                labels.len()
            )));
        }
        let (n, k) = (s[0], s[1]);
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::Input(format!(
                "label {l} at position {i} outside [0, {k})"
            )));
        }
        let data = self.value(logits).data();
        let mut probs = vec![0f64; n * k];
        let mut total = 0f64;
        for i in 0..n {
            let row = &data[i * k..(i + 1) * k];
            let max = row
                .iter()
                .map(|v| v.as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v.as_f64() - max).exp();
                probs[i * k + j] = e;
                z += e;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p /= z;
            }
            total += z.ln() + max - row[labels[i]].as_f64();
        }
        let saved = if self.any_requires_grad(&[logits]) {
            Saved::Probs {
                probs,
                labels: labels.to_vec(),
            }
        } else {
            Saved::None
        };
        Ok(self.push(
            Op::SoftmaxCrossEntropy { classes: k },
            vec![logits],
            Tensor::scalar(T::of(total / n as f64)),
            saved,
        ))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Back-propagates from a scalar `loss`, filling the gradient buffer of
    /// every node that requires one. Gradients accumulate across fan-out.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage("loss is not on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.requires_grad(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let contributions = self.backward_node(node, &g);
            for (input, delta) in node.inputs.iter().zip(contributions) {
                let Some(delta) = delta else { continue };
                if !self.requires_grad(*input) {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        for (idx, node) in self.nodes.iter_mut().enumerate() {
            if !node.value.requires_grad() {
                continue;
            }
            let g = match grads.get_mut(idx).and_then(Option::take) {
                Some(g) => g.into_iter().map(T::of).collect(),
                None => vec![T::zero(); node.value.len()],
            };
            node.value.set_grad(g);
        }
        Ok(())
    }

    /// Gradient contributions of one node to each of its inputs.
    fn backward_node(&self, node: &Node<T>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |i: usize| self.requires_grad(node.inputs[i]);
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let da = needs(0).then(|| kernels::matmul_nt(g, val(b), m, n, k));
                let db = needs(1).then(|| kernels::matmul_tn(val(a), g, m, k, n));
                vec![da, db]
            }
            Op::Conv2d {
                geom,
                filters,
                bias,
            } => {
                let f = *filters;
                let spatial = geom.out_h * geom.out_w;
                // dOut laid out as rows (n, oh, ow) × filters
                let mut flat = vec![0f64; geom.positions() * f];
                for n in 0..geom.batch {
                    for ch in 0..f {
                        for s in 0..spatial {
                            flat[(n * spatial + s) * f + ch] = g[(n * f + ch) * spatial + s];
                        }
                    }
                }
                let Saved::Cols(cols) = &node.saved else {
                    unreachable!("conv2d saved context missing")
                };
                let mut out = Vec::with_capacity(3);
                out.push(needs(0).then(|| {
                    let dcols: Vec<f64> = kernels::matmul_nn(
                        &flat,
                        val(node.inputs[1]),
                        geom.positions(),
                        f,
                        geom.patch(),
                    );
                    kernels::col2im(&dcols, geom)
                }));
                out.push(
                    needs(1).then(|| {
                        kernels::matmul_tn(&flat, cols, geom.positions(), f, geom.patch())
                    }),
                );
                if *bias {
                    out.push(needs(2).then(|| {
                        let mut db = vec![0f64; f];
                        for row in flat.chunks_exact(f) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                        db
                    }));
                }
                out
            }
            Op::Relu => {
                let x = val(node.inputs[0]);
                vec![Some(
                    x.iter()
                        .zip(g)
                        .map(|(&xi, &gi)| if xi > T::zero() { gi } else { 0.0 })
                        .collect(),
                )]
            }
            Op::MaxPool { geom } => {
                let Saved::ArgMax(arg) = &node.saved else {
                    unreachable!("max_pool2d saved context missing")
                };
                let mut dx = vec![0f64; geom.batch * geom.channels * geom.height * geom.width];
                for (&src, &gi) in arg.iter().zip(g) {
                    dx[src] += gi;
                }
                vec![Some(dx)]
            }
            Op::AddBias => {
                let f = self.shape(node.inputs[1])[0];
                let db = needs(1).then(|| {
                    let mut db = vec![0f64; f];
                    for row in g.chunks_exact(f) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    db
                });
                vec![needs(0).then(|| g.to_vec()), db]
            }
            Op::Add => vec![needs(0).then(|| g.to_vec()), needs(1).then(|| g.to_vec())],
            Op::Mul => {
                let (a, b) = (val(node.inputs[0]), val(node.inputs[1]));
                let da =
                    needs(0).then(|| g.iter().zip(b).map(|(&gi, &bi)| gi * bi.as_f64()).collect());
                let db =
                    needs(1).then(|| g.iter().zip(a).map(|(&gi, &ai)| gi * ai.as_f64()).collect());
                vec![da, db]
            }
            Op::Scale(c) => vec![Some(g.iter().map(|v| v * c).collect())],
            Op::Sum => {
                let n = self.nodes[node.inputs[0].0].value.len();
                vec![Some(vec![g[0]; n])]
            }
            Op::Reshape => vec![Some(g.to_vec())],
            Op::SoftmaxCrossEntropy { classes } => {
                let Saved::Probs { probs, labels } = &node.saved else {
                    unreachable!("cross-entropy saved context missing")
                };
                let n = labels.len() as f64;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * classes + l] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= g[0] / n);
                vec![Some(d)]
            }
        }
    }
}
