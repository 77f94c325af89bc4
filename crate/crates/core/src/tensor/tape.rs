use super::kernels::{self, ConvGeometry};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Atan(Var),
    Sum {
        input: Var,
        index_map: Vec<usize>,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geometry: ConvGeometry,
        batch: usize,
        cols: Vec<f64>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Concat(Vec<Var>),
    InstanceNorm {
        input: Var,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed ops. Nodes are appended as ops run, so every
/// op's inputs precede it and a reverse sweep is a valid topological order.
///
/// A tape is single-threaded; independent tapes share nothing and may live
/// on separate threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: `dLoss/dLeaf` for every leaf that requires
/// gradients (zero-filled when the leaf did not influence the loss).
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Clone, Copy)]
enum Bcast {
    Same,
    LeftScalar,
    RightScalar,
}

fn broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(Vec<usize>, Bcast)> {
    if a.shape() == b.shape() {
        Ok((a.shape().to_vec(), Bcast::Same))
    } else if b.is_scalar() {
        Ok((a.shape().to_vec(), Bcast::RightScalar))
    } else if a.is_scalar() {
        Ok((b.shape().to_vec(), Bcast::LeftScalar))
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

fn zip_with(a: &[f64], b: &[f64], mode: Bcast, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match mode {
        Bcast::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        Bcast::RightScalar => a.iter().map(|&x| f(x, b[0])).collect(),
        Bcast::LeftScalar => b.iter().map(|&y| f(a[0], y)).collect(),
    }
}

#[inline]
fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Registers a constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (shape, mode) = broadcast(name, va, vb)?;
        let data = zip_with(va.data(), vb.data(), mode, f);
        let out = Tensor::new(shape, data)?;
        self.push(name, out, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(a).map(f);
        self.push(name, out, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise minimum; ties pick (and differentiate through) `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, |x, y| if y < x { y } else { x }, Op::Minimum(a, b))
    }

    /// Elementwise maximum; ties pick (and differentiate through) `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, |x, y| if y > x { y } else { x }, Op::Maximum(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * factor, Op::Scale(a, factor))
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, offset: f64) -> Result<Var> {
        self.unary("shift", a, |x| x + offset, Op::Shift(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// `offset - a`, e.g. `1 - iou`.
    pub fn rsub(&mut self, offset: f64, a: Var) -> Result<Var> {
        let n = self.neg(a)?;
        self.shift(n, offset)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, stable_sigmoid, Op::Sigmoid(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v < 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "sqrt",
                reason: "negative input".into(),
            });
        }
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn atan(&mut self, a: Var) -> Result<Var> {
        self.unary("atan", a, f64::atan, Op::Atan(a))
    }

    /// Sums over the given axes, removing them. Reducing every axis yields
    /// a one-element tensor of shape `[1]`.
    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if let Some(&bad) = axes.iter().find(|&&ax| ax >= shape.len()) {
            return Err(TensorError::InvalidArgument {
                op: "sum",
                reason: format!("axis {bad} out of range for shape {shape:?}"),
            });
        }
        let keep: Vec<usize> = (0..shape.len()).filter(|d| !axes.contains(d)).collect();
        let mut out_shape: Vec<usize> = keep.iter().map(|&d| shape[d]).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let mut out_strides = vec![0usize; shape.len()];
        let mut stride = 1;
        for &d in keep.iter().rev() {
            out_strides[d] = stride;
            stride *= shape[d];
        }
        let n = self.value(a).numel();
        let mut index_map = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            index_map.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let mut out = Tensor::zeros(&out_shape);
        for (&v, &j) in self.value(a).data().iter().zip(&index_map) {
            out.data_mut()[j] += v;
        }
        self.push("sum", out, Op::Sum { input: a, index_map }, &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum(a, &axes)
    }

    /// Cross-correlation of an NCHW input with OIKK weights.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(weight));
        let (n, c, h, wd) = match *x.shape() {
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(TensorError::InvalidArgument {
                    op: "conv2d",
                    reason: format!("input must be NCHW, got {:?}", x.shape()),
                })
            }
        };
        let (o, k) = match *w.shape() {
            [o, i, k1, k2] if k1 == k2 && i == c => (o, k1),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    left: x.shape().to_vec(),
                    right: w.shape().to_vec(),
                })
            }
        };
        if let Some(b) = bias {
            if self.value(b).shape() != [o] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    left: vec![o],
                    right: self.value(b).shape().to_vec(),
                });
            }
        }
        let geometry = ConvGeometry {
            in_channels: c,
            out_channels: o,
            height: h,
            width: wd,
            kernel: k,
            stride,
            padding,
        };
        geometry.validate()?;
        let (out, cols) = kernels::conv2d_forward(
            x.data(),
            n,
            w.data(),
            bias.map(|b| self.value(b).data()),
            &geometry,
        );
        let out = Tensor::new(vec![n, o, geometry.out_height(), geometry.out_width()], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
                batch: n,
                cols,
            },
            &inputs,
        )
    }

    pub fn max_pool2d(&mut self, a: Var, factor: usize) -> Result<Var> {
        let x = self.value(a);
        let (n, c, h, w) = x.nchw("max_pool2d")?;
        let (out, argmax) = kernels::max_pool2d(x.data(), n * c, h, w, factor)?;
        let mut shape = x.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = h / factor;
        shape[r - 1] = w / factor;
        let out = Tensor::new(shape, out)?;
        self.push("max_pool2d", out, Op::MaxPool { input: a, argmax }, &[a])
    }

    pub fn upsample_bilinear(&mut self, a: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(TensorError::InvalidArgument {
                op: "upsample_bilinear",
                reason: "factor must be at least 1".into(),
            });
        }
        let x = self.value(a);
        let (n, c, h, w) = x.nchw("upsample_bilinear")?;
        let out = kernels::upsample_bilinear(x.data(), n * c, h, w, factor);
        let mut shape = x.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = h * factor;
        shape[r - 1] = w * factor;
        let out = Tensor::new(shape, out)?;
        self.push("upsample_bilinear", out, Op::Upsample { input: a, factor }, &[a])
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or(TensorError::InvalidArgument {
            op: "concat_channels",
            reason: "no inputs".into(),
        })?;
        let (n, _, h, w) = self.value(first).nchw("concat_channels")?;
        let mut total_c = 0;
        for &v in inputs {
            let t = self.value(v);
            match *t.shape() {
                [vn, vc, vh, vw] if (vn, vh, vw) == (n, h, w) => total_c += vc,
                _ => {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat_channels",
                        left: self.value(first).shape().to_vec(),
                        right: t.shape().to_vec(),
                    })
                }
            }
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let out = Tensor::new(vec![n, total_c, h, w], data)?;
        self.push("concat_channels", out, Op::Concat(inputs.to_vec()), inputs)
    }

    /// Per-(image, channel) standardization without affine parameters.
    pub fn instance_norm(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (n, c, h, w) = x.nchw("instance_norm")?;
        let (out, inv_std) = kernels::instance_norm(x.data(), n * c, h * w);
        let out = Tensor::new(x.shape().to_vec(), out)?;
        self.push("instance_norm", out, Op::InstanceNorm { input: a, inv_std }, &[a])
    }

    /// Reverse sweep from a scalar loss. Accumulation order is fixed by the
    /// recording order, so results are bit-reproducible.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| {
                (matches!(node.op, Op::Leaf) && node.requires_grad).then(|| {
                    let data = grads[i].take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
                    Tensor::new(node.value.shape().to_vec(), data).expect("gradient shape")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }

    /// Adds `g * dfx` into `v`'s gradient, summing when `v` is a broadcast scalar.
    fn accumulate_binary(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        g: &[f64],
        partial: impl Fn(usize) -> f64,
    ) {
        let scalar_side = self.value(v).is_scalar() && g.len() != 1;
        if let Some(dst) = self.accumulate(grads, v) {
            if scalar_side {
                dst[0] += g.iter().enumerate().map(|(j, &gj)| gj * partial(j)).sum::<f64>();
            } else {
                for (j, (d, &gj)) in dst.iter_mut().zip(g).enumerate() {
                    *d += gj * partial(j);
                }
            }
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        // Element `j` of a possibly broadcast operand.
        let at = |v: Var, j: usize| {
            let d = self.value(v).data();
            if d.len() == 1 {
                d[0]
            } else {
                d[j]
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate_binary(grads, *a, g, |_| 1.0);
                self.accumulate_binary(grads, *b, g, |_| 1.0);
            }
            Op::Sub(a, b) => {
                self.accumulate_binary(grads, *a, g, |_| 1.0);
                self.accumulate_binary(grads, *b, g, |_| -1.0);
            }
            Op::Mul(a, b) => {
                self.accumulate_binary(grads, *a, g, |j| at(*b, j));
                self.accumulate_binary(grads, *b, g, |j| at(*a, j));
            }
            Op::Div(a, b) => {
                self.accumulate_binary(grads, *a, g, |j| 1.0 / at(*b, j));
                self.accumulate_binary(grads, *b, g, |j| {
                    let d = at(*b, j);
                    -at(*a, j) / (d * d)
                });
            }
            Op::Minimum(a, b) => {
                self.accumulate_binary(grads, *a, g, |j| if at(*b, j) < at(*a, j) { 0.0 } else { 1.0 });
                self.accumulate_binary(grads, *b, g, |j| if at(*b, j) < at(*a, j) { 1.0 } else { 0.0 });
            }
            Op::Maximum(a, b) => {
                self.accumulate_binary(grads, *a, g, |j| if at(*b, j) > at(*a, j) { 0.0 } else { 1.0 });
                self.accumulate_binary(grads, *b, g, |j| if at(*b, j) > at(*a, j) { 1.0 } else { 0.0 });
            }
            Op::Scale(a, f) => self.accumulate_binary(grads, *a, g, |_| *f),
            Op::Shift(a) => self.accumulate_binary(grads, *a, g, |_| 1.0),
            Op::Relu(a) => self.accumulate_binary(grads, *a, g, |j| if at(*a, j) > 0.0 { 1.0 } else { 0.0 }),
            Op::Sigmoid(a) => self.accumulate_binary(grads, *a, g, |j| y[j] * (1.0 - y[j])),
            Op::Sqrt(a) => self.accumulate_binary(grads, *a, g, |j| if y[j] > 0.0 { 0.5 / y[j] } else { 0.0 }),
            Op::Atan(a) => self.accumulate_binary(grads, *a, g, |j| {
                let x = at(*a, j);
                1.0 / (1.0 + x * x)
            }),
            Op::Sum { input, index_map } => {
                if let Some(dst) = self.accumulate(grads, *input) {
                    for (d, &j) in dst.iter_mut().zip(index_map) {
                        *d += g[j];
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
                batch,
                cols,
            } => {
                let w = self.value(*weight).data();
                let mut gi = self.nodes[input.0].requires_grad.then(|| vec![0.0; self.value(*input).numel()]);
                let mut gw = self.nodes[weight.0].requires_grad.then(|| vec![0.0; w.len()]);
                let mut gb = bias
                    .filter(|b| self.nodes[b.0].requires_grad)
                    .map(|b| vec![0.0; self.value(b).numel()]);
                kernels::conv2d_backward(
                    g,
                    cols,
                    w,
                    *batch,
                    geometry,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                for (v, part) in [(Some(*input), gi), (Some(*weight), gw), (*bias, gb)] {
                    if let (Some(v), Some(part)) = (v, part) {
                        if let Some(dst) = self.accumulate(grads, v) {
                            for (d, p) in dst.iter_mut().zip(part) {
                                *d += p;
                            }
                        }
                    }
                }
            }
            Op::MaxPool { input, argmax } => {
                if let Some(dst) = self.accumulate(grads, *input) {
                    for (&src, &gj) in argmax.iter().zip(g) {
                        dst[src] += gj;
                    }
                }
            }
            Op::Upsample { input, factor } => {
                let (n, c, h, w) = self.value(*input).nchw("upsample_bilinear").expect("recorded shape");
                if let Some(dst) = self.accumulate(grads, *input) {
                    kernels::upsample_bilinear_backward(g, n * c, h, w, *factor, dst);
                }
            }
            Op::Concat(inputs) => {
                let shape = node.value.shape();
                let (n, total_c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut offset = 0;
                for &v in inputs {
                    let c = self.shape(v)[1];
                    if let Some(dst) = self.accumulate(grads, v) {
                        for b in 0..n {
                            let src = &g[(b * total_c + offset) * plane..(b * total_c + offset + c) * plane];
                            for (d, &s) in dst[b * c * plane..(b + 1) * c * plane].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::InstanceNorm { input, inv_std } => {
                let shape = node.value.shape();
                let plane = shape[2] * shape[3];
                if let Some(dst) = self.accumulate(grads, *input) {
                    kernels::instance_norm_backward(g, y, inv_std, plane, dst);
                }
            }
        }
    }
}
