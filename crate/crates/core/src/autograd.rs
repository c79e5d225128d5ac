//! A small reverse-mode autodiff tape over `f64` tensors.
//!
//! Operations append nodes to a [`Tape`]; [`Tape::backward`] walks them in
//! reverse order. Only the operations the desk-scale networks need are
//! provided: broadcasting arithmetic, matrix products, 2-D convolution,
//! pooling reductions, nearest upsampling, batch normalization and a few
//! activations, plus scalar losses with precomputed gradients.

use std::cell::{Ref, RefCell};

use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn, Zip};

use crate::error::{Error, Result};
use crate::loss::{asa_upper_bound, ClassifierHead};

pub type Tensor = ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    Mean(Var),
    MeanAxes(Var, Vec<usize>),
    MaxSpatial(Var, Vec<usize>),
    MaxChannel(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Rows(Var, usize),
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        stride: usize,
        pad: usize,
        cols: Array2<f64>,
    },
    Upsample2x(Var),
    BatchNorm {
        input: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    // Scalar output whose gradient with respect to each parent is known.
    Scalar(Vec<(Var, Tensor)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

fn as2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("2-D tensor")
}

/// Sums `grad` down to `shape`, undoing numpy-style broadcasting.
fn reduce_to_shape(mut grad: Tensor, shape: &[usize]) -> Tensor {
    while grad.ndim() > shape.len() {
        grad = grad.sum_axis(Axis(0));
    }
    for (axis, &dim) in shape.iter().enumerate() {
        if dim == 1 && grad.shape()[axis] != 1 {
            grad = grad.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    grad
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Differentiable input.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Current value of `v` (a view into the tape, valid while borrowed).
    pub fn get(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), move |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let t = &nodes[v.0].value;
        debug_assert_eq!(t.len(), 1);
        t.iter().next().copied().unwrap_or(f64::NAN)
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(&Tensor, &Tensor) -> Tensor, op: Op) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            broadcast_shape(x.shape(), y.shape())?;
            f(x, y)
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let value = &*self.get(a) * k;
        let rg = self.needs(&[a]);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.ndim() != 2 || y.ndim() != 2 || x.shape()[1] != y.shape()[0] {
                return Err(Error::shape(format!(
                    "matmul of {:?} and {:?}",
                    x.shape(),
                    y.shape()
                )));
            }
            as2(x).dot(&as2(y)).into_dyn()
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let value = {
            let x = self.get(a);
            if x.ndim() != 2 {
                return Err(Error::shape(format!("transpose of {:?}", x.shape())));
            }
            as2(&x).t().as_standard_layout().into_owned().into_dyn()
        };
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        let value = self.get(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.needs(&[a]);
        self.push(value, Op::LeakyRelu(a, slope), rg)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn tanh(&self, a: Var) -> Var {
        let value = self.get(a).mapv(f64::tanh);
        let rg = self.needs(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let value = self.get(a).mapv(sigmoid);
        let rg = self.needs(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn abs(&self, a: Var) -> Var {
        let value = self.get(a).mapv(f64::abs);
        let rg = self.needs(&[a]);
        self.push(value, Op::Abs(a), rg)
    }

    /// Mean of all elements, as a 0-d tensor.
    pub fn mean(&self, a: Var) -> Var {
        let value = {
            let x = self.get(a);
            let m = x.sum() / x.len() as f64;
            ArrayD::from_elem(IxDyn(&[]), m)
        };
        let rg = self.needs(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// Mean over `axes`, keeping them as size-1 dimensions.
    pub fn mean_axes(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let value = {
            let x = self.get(a);
            if axes.iter().any(|&ax| ax >= x.ndim()) {
                return Err(Error::shape(format!("mean over {axes:?} of {:?}", x.shape())));
            }
            let mut sorted = axes.to_vec();
            sorted.sort_unstable();
            sorted.dedup();
            let mut out = x.clone();
            let mut count = 1usize;
            for &ax in sorted.iter().rev() {
                count *= out.shape()[ax];
                out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
            }
            out / count as f64
        };
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::MeanAxes(a, axes.to_vec()), rg))
    }

    /// Max over the spatial axes of a `[B, C, H, W]` map, giving `[B, C, 1, 1]`.
    pub fn max_spatial(&self, a: Var) -> Result<Var> {
        let (value, arg) = {
            let x = self.get(a);
            let s = x.shape();
            if s.len() != 4 {
                return Err(Error::shape(format!("max_spatial expects 4-D input, got {s:?}")));
            }
            let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
            let data = x.as_standard_layout();
            let data = data.as_slice().expect("standard layout");
            let mut out = ArrayD::zeros(IxDyn(&[b, c, 1, 1]));
            let mut arg = Vec::with_capacity(b * c);
            for (k, o) in out.iter_mut().enumerate() {
                let chunk = &data[k * hw..(k + 1) * hw];
                let (best, &v) = chunk
                    .iter()
                    .enumerate()
                    .fold((0, &chunk[0]), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
                *o = v;
                arg.push(k * hw + best);
            }
            (out, arg)
        };
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::MaxSpatial(a, arg), rg))
    }

    /// Max over the channel axis of a `[B, C, H, W]` map, giving `[B, 1, H, W]`.
    pub fn max_channel(&self, a: Var) -> Result<Var> {
        let (value, arg) = {
            let x = self.get(a);
            let s = x.shape();
            if s.len() != 4 {
                return Err(Error::shape(format!("max_channel expects 4-D input, got {s:?}")));
            }
            let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
            let data = x.as_standard_layout();
            let data = data.as_slice().expect("standard layout");
            let mut out = ArrayD::zeros(IxDyn(&[b, 1, s[2], s[3]]));
            let out_slice = out.as_slice_mut().expect("fresh array");
            let mut arg = vec![0usize; b * hw];
            for bi in 0..b {
                for p in 0..hw {
                    let mut best = bi * c * hw + p;
                    for ci in 1..c {
                        let idx = bi * c * hw + ci * hw + p;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                    out_slice[bi * hw + p] = data[best];
                    arg[bi * hw + p] = best;
                }
            }
            (out, arg)
        };
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::MaxChannel(a, arg), rg))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|v| nodes[v.0].value.view()).collect();
            ndarray::concatenate(Axis(axis), &views)
                .map_err(|e| Error::shape(format!("concat along axis {axis}: {e}")))?
        };
        let rg = self.needs(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Rows `start..end` along the leading axis.
    pub fn rows(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let value = {
            let x = self.get(a);
            if x.ndim() == 0 || start >= end || end > x.shape()[0] {
                return Err(Error::shape(format!("rows {start}..{end} of {:?}", x.shape())));
            }
            x.slice_axis(Axis(0), ndarray::Slice::from(start..end)).to_owned()
        };
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Rows(a, start), rg))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = {
            let x = self.get(a);
            x.as_standard_layout()
                .into_owned()
                .into_shape_with_order(IxDyn(shape))
                .map_err(|e| Error::shape(format!("reshape {:?} to {shape:?}: {e}", x.shape())))?
        };
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Cross-correlation of `[B, Cin, H, W]` input with `[Cout, Cin, k, k]`
    /// weights, zero padding `pad`, step `stride`. No bias.
    pub fn conv2d(&self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let (value, cols) = {
            let nodes = self.nodes.borrow();
            let (x, w) = (&nodes[input.0].value, &nodes[weight.0].value);
            let (xs, ws) = (x.shape(), w.shape());
            if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || stride == 0 {
                return Err(Error::shape(format!("conv2d of {xs:?} with {ws:?}")));
            }
            let geom = ConvGeom::new(xs, ws, stride, pad)?;
            let x = x.as_standard_layout();
            let cols = im2col(x.as_slice().expect("standard layout"), &geom);
            let wm = w
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((geom.cout, geom.krows()))
                .expect("weight reshape");
            let out = wm.dot(&cols);
            (cols_to_nchw(&out, &geom), cols)
        };
        let rg = self.needs(&[input, weight]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                stride,
                pad,
                cols,
            },
            rg,
        ))
    }

    /// Nearest-neighbour 2x upsampling of a `[B, C, H, W]` map.
    pub fn upsample2x(&self, a: Var) -> Result<Var> {
        let value = {
            let x = self.get(a);
            let s = x.shape();
            if s.len() != 4 {
                return Err(Error::shape(format!("upsample2x expects 4-D input, got {s:?}")));
            }
            let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
            ArrayD::from_shape_fn(IxDyn(&[b, c, 2 * h, 2 * w]), |idx| {
                x[[idx[0], idx[1], idx[2] / 2, idx[3] / 2]]
            })
        };
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Upsample2x(a), rg))
    }

    /// Normalizes each column of a `[B, K]` matrix with batch statistics.
    pub fn batch_norm(&self, a: Var, eps: f64) -> Result<Var> {
        let (value, xhat, inv_std) = {
            let x = self.get(a);
            if x.ndim() != 2 {
                return Err(Error::shape(format!("batch_norm expects 2-D input, got {:?}", x.shape())));
            }
            let x = as2(&x);
            let n = x.nrows() as f64;
            let mean = x.sum_axis(Axis(0)) / n;
            let centered = &x - &mean;
            let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut xhat = centered;
            for (mut col, &s) in xhat.columns_mut().into_iter().zip(&inv_std) {
                col *= s;
            }
            (xhat.clone().into_dyn(), xhat, inv_std)
        };
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::BatchNorm { input: a, xhat, inv_std }, rg))
    }

    /// Scalar node with caller-supplied gradients for each parent.
    pub fn scalar_with_grads(&self, value: f64, grads: Vec<(Var, Tensor)>) -> Var {
        let parents: Vec<Var> = grads.iter().map(|(v, _)| *v).collect();
        let rg = self.needs(&parents);
        self.push(ArrayD::from_elem(IxDyn(&[]), value), Op::Scalar(grads), rg)
    }

    /// Augmented-loss bound over `features` (`[B, D]`) with head weights
    /// `[C, D]` and biases `[C]`. Covariances are constants.
    pub fn asa_bound(
        &self,
        features: Var,
        weights: Var,
        biases: Var,
        labels: &[usize],
        covs: &[&Array2<f64>],
        lambda: f64,
    ) -> Result<Var> {
        let loss = {
            let f = self.get(features);
            let w = self.get(weights);
            let b = self.get(biases);
            if f.ndim() != 2 || w.ndim() != 2 || b.ndim() != 1 {
                return Err(Error::shape("asa_bound expects [B,D] features, [C,D] weights, [C] biases"));
            }
            let head = ClassifierHead::new(as2(&w).to_owned(), b.view().into_dimensionality().expect("1-D").to_owned())?;
            asa_upper_bound(as2(&f), labels, &head, covs, lambda)?
        };
        Ok(self.scalar_with_grads(
            loss.value,
            vec![
                (features, loss.grad_features.into_dyn()),
                (weights, loss.grad_weights.into_dyn()),
                (biases, loss.grad_biases.into_dyn()),
            ],
        ))
    }

    /// Softmax cross-entropy of `[B, C]` logits, averaged over the batch.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (value, grad) = {
            let z = self.get(logits);
            if z.ndim() != 2 || z.shape()[0] != labels.len() {
                return Err(Error::shape(format!("cross_entropy of {:?} with {} labels", z.shape(), labels.len())));
            }
            let z = as2(&z);
            let n = z.nrows() as f64;
            let mut grad = Array2::<f64>::zeros(z.dim());
            let mut total = 0.0;
            for ((row, mut g), &y) in z.outer_iter().zip(grad.outer_iter_mut()).zip(labels) {
                if y >= row.len() {
                    return Err(Error::config(format!("label {y} out of range")));
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                total += crate::loss::label_cross_entropy(row, y);
                for (gj, &v) in g.iter_mut().zip(row.iter()) {
                    *gj = (v - max).exp() / sum / n;
                }
                g[y] -= 1.0 / n;
            }
            (total / n, grad)
        };
        Ok(self.scalar_with_grads(value, vec![(logits, grad.into_dyn())]))
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::ones(nodes[loss.0].value.raw_dim()));

        fn acc(grads: &mut [Option<Tensor>], nodes: &[Node], v: Var, g: Tensor) {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                    acc(&mut grads, &nodes, *a, reduce_to_shape(g.clone(), sa));
                    acc(&mut grads, &nodes, *b, reduce_to_shape(g, sb));
                }
                Op::Sub(a, b) => {
                    let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                    acc(&mut grads, &nodes, *a, reduce_to_shape(g.clone(), sa));
                    acc(&mut grads, &nodes, *b, reduce_to_shape(-g, sb));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    if nodes[a.0].requires_grad {
                        acc(&mut grads, &nodes, *a, reduce_to_shape(&g * vb, va.shape()));
                    }
                    if nodes[b.0].requires_grad {
                        acc(&mut grads, &nodes, *b, reduce_to_shape(&g * va, vb.shape()));
                    }
                }
                Op::Scale(a, k) => acc(&mut grads, &nodes, *a, g * *k),
                Op::MatMul(a, b) => {
                    let g2 = as2(&g);
                    if nodes[a.0].requires_grad {
                        let vb = as2(&nodes[b.0].value);
                        acc(&mut grads, &nodes, *a, g2.dot(&vb.t()).into_dyn());
                    }
                    if nodes[b.0].requires_grad {
                        let va = as2(&nodes[a.0].value);
                        acc(&mut grads, &nodes, *b, va.t().dot(&g2).into_dyn());
                    }
                }
                Op::Transpose(a) => {
                    let t = as2(&g).t().as_standard_layout().into_owned().into_dyn();
                    acc(&mut grads, &nodes, *a, t);
                }
                Op::LeakyRelu(a, slope) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&nodes[a.0].value).for_each(|d, &x| {
                        if x <= 0.0 {
                            *d *= *slope;
                        }
                    });
                    acc(&mut grads, &nodes, *a, d);
                }
                Op::Tanh(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= 1.0 - y * y);
                    acc(&mut grads, &nodes, *a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= y * (1.0 - y));
                    acc(&mut grads, &nodes, *a, d);
                }
                Op::Abs(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&nodes[a.0].value).for_each(|d, &x| {
                        *d *= if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, &nodes, *a, d);
                }
                Op::Mean(a) => {
                    let x = &nodes[a.0].value;
                    let gs = g.iter().next().copied().unwrap_or(0.0) / x.len() as f64;
                    acc(&mut grads, &nodes, *a, ArrayD::from_elem(x.raw_dim(), gs));
                }
                Op::MeanAxes(a, axes) => {
                    let x = &nodes[a.0].value;
                    let count: usize = {
                        let mut s = axes.clone();
                        s.sort_unstable();
                        s.dedup();
                        s.iter().map(|&ax| x.shape()[ax]).product()
                    };
                    let d = g
                        .broadcast(x.raw_dim())
                        .expect("mean grad broadcast")
                        .mapv(|v| v / count as f64);
                    acc(&mut grads, &nodes, *a, d);
                }
                Op::MaxSpatial(a, arg) | Op::MaxChannel(a, arg) => {
                    let x = &nodes[a.0].value;
                    let mut d = ArrayD::zeros(x.raw_dim());
                    let ds = d.as_slice_mut().expect("fresh array");
                    let gs = g.as_standard_layout();
                    for (&idx, &gv) in arg.iter().zip(gs.iter()) {
                        ds[idx] += gv;
                    }
                    acc(&mut grads, &nodes, *a, d);
                }
                Op::Concat(parts, axis) => {
                    let mut start = 0;
                    for p in parts {
                        let len = nodes[p.0].value.shape()[*axis];
                        if nodes[p.0].requires_grad {
                            let piece = g
                                .slice_axis(Axis(*axis), ndarray::Slice::from(start..start + len))
                                .to_owned();
                            acc(&mut grads, &nodes, *p, piece);
                        }
                        start += len;
                    }
                }
                Op::Rows(a, start) => {
                    let mut d = ArrayD::zeros(nodes[a.0].value.raw_dim());
                    let end = start + g.shape()[0];
                    d.slice_axis_mut(Axis(0), ndarray::Slice::from(*start..end)).assign(&g);
                    acc(&mut grads, &nodes, *a, d);
                }
                Op::Reshape(a) => {
                    let shape = nodes[a.0].value.raw_dim();
                    let d = g
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(shape)
                        .expect("reshape grad");
                    acc(&mut grads, &nodes, *a, d);
                }
                Op::Conv2d {
                    input,
                    weight,
                    stride,
                    pad,
                    cols,
                } => {
                    let (x, w) = (&nodes[input.0].value, &nodes[weight.0].value);
                    let geom = ConvGeom::new(x.shape(), w.shape(), *stride, *pad).expect("validated");
                    let gm = nchw_to_cols(&g, &geom);
                    if nodes[weight.0].requires_grad {
                        let dw = gm.dot(&cols.t());
                        let dw = dw.into_shape_with_order(IxDyn(w.shape())).expect("weight grad shape");
                        acc(&mut grads, &nodes, *weight, dw);
                    }
                    if nodes[input.0].requires_grad {
                        let wm = w
                            .as_standard_layout()
                            .into_owned()
                            .into_shape_with_order((geom.cout, geom.krows()))
                            .expect("weight reshape");
                        let dcols = wm.t().dot(&gm);
                        acc(&mut grads, &nodes, *input, col2im(&dcols, &geom));
                    }
                }
                Op::Upsample2x(a) => {
                    let x = &nodes[a.0].value;
                    let s = x.shape();
                    let mut d = ArrayD::zeros(x.raw_dim());
                    for ((b, c, h, w), &gv) in g
                        .view()
                        .into_dimensionality::<ndarray::Ix4>()
                        .expect("4-D grad")
                        .indexed_iter()
                    {
                        d[[b, c, h / 2, w / 2]] += gv;
                    }
                    debug_assert_eq!(d.shape(), s);
                    acc(&mut grads, &nodes, *a, d);
                }
                Op::BatchNorm { input, xhat, inv_std } => {
                    let g2 = as2(&g);
                    let n = g2.nrows() as f64;
                    let sum_g = g2.sum_axis(Axis(0));
                    let sum_gx = (&g2 * xhat).sum_axis(Axis(0));
                    let mut d = Array2::<f64>::zeros(g2.dim());
                    for ((mut dcol, gcol), ((xcol, &s), (&sg, &sgx))) in d
                        .columns_mut()
                        .into_iter()
                        .zip(g2.columns())
                        .zip(xhat.columns().into_iter().zip(inv_std).zip(sum_g.iter().zip(sum_gx.iter())))
                    {
                        Zip::from(&mut dcol).and(&gcol).and(&xcol).for_each(|d, &gv, &xv| {
                            *d = s / n * (n * gv - sg - xv * sgx);
                        });
                    }
                    acc(&mut grads, &nodes, *input, d.into_dyn());
                }
                Op::Scalar(parents) => {
                    let gs = g.iter().next().copied().unwrap_or(0.0);
                    for (p, local) in parents {
                        acc(&mut grads, &nodes, *p, local * gs);
                    }
                }
            }
        }
        Gradients { grads }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (h, w, k) = (xs[2], xs[3], ws[2]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(format!("kernel {k} larger than padded input {h}x{w}")));
        }
        Ok(ConvGeom {
            batch: xs[0],
            cin: xs[1],
            h,
            w,
            cout: ws[0],
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn krows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn ncols(&self) -> usize {
        self.batch * self.ho * self.wo
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Array2<f64> {
    let n = g.ncols();
    let mut cols = Array2::<f64>::zeros((g.krows(), n));
    let out = cols.as_slice_mut().expect("fresh array");
    for ci in 0..g.cin {
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (ci * g.k + kh) * g.k + kw;
                let dst = &mut out[row * n..(row + 1) * n];
                for b in 0..g.batch {
                    let plane = &x[(b * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[ih as usize * g.w..][..g.w];
                        let base = (b * g.ho + oh) * g.wo;
                        for ow in 0..g.wo {
                            let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                dst[base + ow] = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, g: &ConvGeom) -> Tensor {
    let n = g.ncols();
    let mut x = vec![0.0; g.batch * g.cin * g.h * g.w];
    let src = cols.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    for ci in 0..g.cin {
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (ci * g.k + kh) * g.k + kw;
                let line = &src[row * n..(row + 1) * n];
                for b in 0..g.batch {
                    let plane = &mut x[(b * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let base = (b * g.ho + oh) * g.wo;
                        for ow in 0..g.wo {
                            let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                plane[ih as usize * g.w + iw as usize] += line[base + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[g.batch, g.cin, g.h, g.w]), x).expect("col2im shape")
}

// [Cout, B*Ho*Wo] -> [B, Cout, Ho, Wo]
fn cols_to_nchw(m: &Array2<f64>, g: &ConvGeom) -> Tensor {
    let plane = g.ho * g.wo;
    let src = m.as_slice().expect("gemm output is standard layout");
    let mut out = vec![0.0; g.batch * g.cout * plane];
    for co in 0..g.cout {
        for b in 0..g.batch {
            out[(b * g.cout + co) * plane..][..plane]
                .copy_from_slice(&src[co * g.ncols() + b * plane..][..plane]);
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[g.batch, g.cout, g.ho, g.wo]), out).expect("conv output shape")
}

// [B, Cout, Ho, Wo] -> [Cout, B*Ho*Wo]
fn nchw_to_cols(t: &Tensor, g: &ConvGeom) -> Array2<f64> {
    let plane = g.ho * g.wo;
    let t = t.as_standard_layout();
    let src = t.as_slice().expect("standard layout");
    let n = g.ncols();
    let mut out = vec![0.0; g.cout * n];
    for co in 0..g.cout {
        for b in 0..g.batch {
            out[co * n + b * plane..][..plane].copy_from_slice(&src[(b * g.cout + co) * plane..][..plane]);
        }
    }
    Array2::from_shape_vec((g.cout, n), out).expect("cols shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
    }

    /// Compares tape gradients of `build` (which maps leaves to a scalar)
    /// against central differences for every input element.
    fn check_grads(inputs: Vec<Tensor>, build: impl Fn(&Tape, &[Var]) -> Var) {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&tape, &vars);
        let grads = tape.backward(out);
        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).expect("grad").clone();
            for idx in 0..input.len() {
                let eval = |delta: f64| {
                    let t = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, x)| {
                            let mut x = x.clone();
                            if j == k {
                                x.as_slice_mut().unwrap()[idx] += delta;
                            }
                            t.param(x)
                        })
                        .collect();
                    let o = build(&t, &vs);
                    t.scalar(o)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[idx];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "input {k} elem {idx}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn broadcast_arithmetic_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check_grads(
            vec![random(&[3, 4], &mut rng), random(&[1, 4], &mut rng), random(&[3, 1], &mut rng)],
            |t, v| {
                let a = t.add(v[0], v[1]).unwrap();
                let b = t.mul(a, v[2]).unwrap();
                let c = t.sub(b, v[1]).unwrap();
                let d = t.tanh(c);
                t.mean(d)
            },
        );
    }

    #[test]
    fn matmul_activation_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check_grads(vec![random(&[4, 3], &mut rng), random(&[3, 5], &mut rng)], |t, v| {
            let m = t.matmul(v[0], v[1]).unwrap();
            let a = t.leaky_relu(m, 0.2);
            let s = t.sigmoid(a);
            let tr = t.transpose(s).unwrap();
            let sq = t.mul(tr, tr).unwrap();
            let sc = t.scale(sq, 3.0);
            t.mean(sc)
        });
    }

    #[test]
    fn conv_and_pooling_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check_grads(
            vec![random(&[2, 3, 6, 6], &mut rng), random(&[4, 3, 4, 4], &mut rng)],
            |t, v| {
                let c = t.conv2d(v[0], v[1], 2, 1).unwrap();
                let up = t.upsample2x(c).unwrap();
                let ms = t.max_spatial(up).unwrap();
                let mc = t.max_channel(c).unwrap();
                let avg = t.mean_axes(c, &[2, 3]).unwrap();
                let x = t.mul(ms, avg).unwrap();
                let y = t.mul(c, mc).unwrap();
                let s1 = t.mean(x);
                let s2 = t.mean(y);
                t.add(s1, s2).unwrap()
            },
        );
    }

    #[test]
    fn conv_stride_one_padding_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check_grads(
            vec![random(&[1, 2, 5, 5], &mut rng), random(&[1, 2, 3, 3], &mut rng)],
            |t, v| {
                let c = t.conv2d(v[0], v[1], 1, 1).unwrap();
                let s = t.sigmoid(c);
                t.mean(s)
            },
        );
    }

    #[test]
    fn rows_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        check_grads(vec![random(&[5, 3], &mut rng), random(&[2, 3], &mut rng)], |t, v| {
            let r = t.rows(v[0], 1, 3).unwrap();
            let m = t.mul(r, v[1]).unwrap();
            t.mean(m)
        });
        let t = Tape::new();
        let x = t.constant(ArrayD::zeros(IxDyn(&[4, 2])));
        assert!(t.rows(x, 2, 2).is_err());
        assert!(t.rows(x, 0, 5).is_err());
    }

    #[test]
    fn concat_reshape_norm_abs_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check_grads(
            vec![random(&[3, 2], &mut rng), random(&[2, 2], &mut rng), random(&[5, 2], &mut rng)],
            |t, v| {
                let c = t.concat(&[v[0], v[1]], 0).unwrap();
                let n = t.batch_norm(c, 1e-5).unwrap();
                let m = t.mul(n, v[2]).unwrap();
                let r = t.reshape(m, &[10]).unwrap();
                let d = t.sub(r, r).unwrap();
                let s = t.add(d, r).unwrap();
                let a = t.abs(s);
                t.mean(a)
            },
        );
    }

    #[test]
    fn cross_entropy_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        check_grads(vec![random(&[4, 3], &mut rng)], |t, v| t.cross_entropy(v[0], &[0, 2, 1, 1]).unwrap());
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[2, 3, 7, 7], &mut rng);
        let w = random(&[5, 3, 3, 3], &mut rng);
        let tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let out = tape.conv2d(xv, wv, 2, 1).unwrap();
        let out = tape.get(out).clone();
        assert_eq!(out.shape(), &[2, 5, 4, 4]);
        for ((b, co, oh, ow), &v) in out.view().into_dimensionality::<ndarray::Ix4>().unwrap().indexed_iter() {
            let mut s = 0.0;
            for ci in 0..3 {
                for kh in 0..3 {
                    for kw in 0..3 {
                        let ih = (oh * 2 + kh) as isize - 1;
                        let iw = (ow * 2 + kw) as isize - 1;
                        if (0..7).contains(&ih) && (0..7).contains(&iw) {
                            s += x[[b, ci, ih as usize, iw as usize]] * w[[co, ci, kh, kw]];
                        }
                    }
                }
            }
            assert!((s - v).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let a = tape.constant(array![1.0, 2.0].into_dyn());
        let b = tape.param(array![3.0, 4.0].into_dyn());
        let c = tape.mul(a, b).unwrap();
        let m = tape.mean(c);
        let g = tape.backward(m);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap(), &array![0.5, 1.0].into_dyn());
    }

    #[test]
    fn shape_errors_surface() {
        let tape = Tape::new();
        let a = tape.constant(ArrayD::zeros(IxDyn(&[2, 3])));
        let b = tape.constant(ArrayD::zeros(IxDyn(&[2, 3])));
        assert!(tape.matmul(a, b).is_err());
        let c = tape.constant(ArrayD::zeros(IxDyn(&[4])));
        assert!(tape.add(a, c).is_err());
        assert!(tape.max_spatial(a).is_err());
    }
}
