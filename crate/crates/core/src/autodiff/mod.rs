//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every differentiable call on a [`Tape`] evaluates eagerly, stores its
//! output and appends a node. [`Tape::backward`] walks the nodes in reverse
//! insertion order, which is a valid topological order because a node can
//! only reference nodes that already exist.

mod gradcheck;
mod params;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::ops::{self, BlurKernel, Conv2dOptions, Padding};
use crate::tensor::{Scalar, Tensor, TensorError};

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckOptions, GradCheckReport};
pub use params::ParamStore;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("node {node} ({op}): {source}")]
    Shape {
        node: usize,
        op: &'static str,
        #[source]
        source: TensorError,
    },
    #[error("node {node} ({op}) produced a non-finite value")]
    NonFinite { node: usize, op: &'static str },
    #[error("graph input `{0}` is not bound")]
    UnboundInput(String),
    #[error("parameter `{0}` is missing from the parameter store")]
    MissingParam(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    LossNotScalar(Vec<usize>),
    #[error("backward called before any forward computation was recorded")]
    ForwardNotRun,
    #[error("node {0} does not belong to this tape")]
    UnknownNode(usize),
}

pub type Result<T, E = TapeError> = std::result::Result<T, E>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub enum Leaf {
    Input(String),
    Param(String),
    Constant,
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf(Leaf),
    Identity(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    SumPerSample(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        opts: Conv2dOptions,
    },
    Pool {
        x: Var,
        argmax: Vec<u32>,
    },
    BlurSubsample {
        x: Var,
        kernel: BlurKernel,
        factor: usize,
    },
    Upsample(Var),
    ConcatChannels(Var, Var),
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Identity(_) => "identity",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumPerSample(_) => "sum_per_sample",
            Op::Conv2d { .. } => "conv2d",
            Op::Pool { .. } => "pool",
            Op::BlurSubsample { .. } => "blur_subsample",
            Op::Upsample(_) => "bilinear_upsample",
            Op::ConcatChannels(..) => "concat_channels",
        }
    }
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// A warning raised while recording, currently only near-ties in max pooling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TieWarning {
    pub node: usize,
    pub windows: usize,
}

/// Something that can be recorded onto a tape given a parameter store.
pub trait Graph<T: Scalar> {
    fn build(&self, tape: &mut Tape<T>, params: &ParamStore<T>) -> Result<Var>;
}

/// Gradients produced by [`Tape::backward`], keyed by leaf name.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    pub params: BTreeMap<String, Tensor<T>>,
    pub inputs: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }
}

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    bindings: BTreeMap<String, (Tensor<T>, bool)>,
    tie_tolerance: Option<f64>,
    warnings: Vec<TieWarning>,
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
            bindings: BTreeMap::new(),
            tie_tolerance: None,
            warnings: Vec::new(),
        }
    }

    /// Enables tie detection in max pooling: windows whose top two values are
    /// within `tol` are reported through [`Tape::tie_warnings`].
    pub fn with_tie_tolerance(mut self, tol: f64) -> Self {
        self.tie_tolerance = Some(tol);
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tie_warnings(&self) -> &[TieWarning] {
        &self.warnings
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Hash of every piecewise-linear branch taken: ReLU signs and pooling
    /// argmaxes. Equal patterns at two points mean no kink lies between them
    /// along a straight path only if the pattern is constant in between,
    /// which holds for small enough steps.
    pub fn switch_pattern(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(_) => {
                    for v in node.value.data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::Pool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Binds named inputs and records `graph`, returning its output node.
    pub fn forward<G: Graph<T> + ?Sized>(
        &mut self,
        graph: &G,
        params: &ParamStore<T>,
        inputs: impl IntoIterator<Item = (String, Tensor<T>)>,
    ) -> Result<Var> {
        for (name, t) in inputs {
            self.bindings.insert(name, (t, false));
        }
        graph.build(self, params)
    }

    /// Like [`Tape::forward`], but gradients are also reported for the inputs.
    pub fn forward_with_input_grads<G: Graph<T> + ?Sized>(
        &mut self,
        graph: &G,
        params: &ParamStore<T>,
        inputs: impl IntoIterator<Item = (String, Tensor<T>)>,
    ) -> Result<Var> {
        for (name, t) in inputs {
            self.bindings.insert(name, (t, true));
        }
        graph.build(self, params)
    }

    /// Leaf node for a bound input.
    pub fn bound(&mut self, name: &str) -> Result<Var> {
        let (t, grad) = self
            .bindings
            .get(name)
            .ok_or_else(|| TapeError::UnboundInput(name.to_string()))?;
        let (t, grad) = (t.clone(), *grad);
        self.leaf(Leaf::Input(name.to_string()), t, grad)
    }

    pub fn input(&mut self, name: &str, value: Tensor<T>) -> Result<Var> {
        self.leaf(Leaf::Input(name.to_string()), value, false)
    }

    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<Var> {
        self.leaf(Leaf::Param(name.to_string()), value, true)
    }

    /// Leaf for the named entry of `store`.
    pub fn param_from(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let t = store
            .get(name)
            .ok_or_else(|| TapeError::MissingParam(name.to_string()))?;
        self.param(name, t.clone())
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(Leaf::Constant, value, false)
    }

    fn leaf(&mut self, leaf: Leaf, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(Op::Leaf(leaf), Ok(value), requires_grad)
    }

    fn push(
        &mut self,
        op: Op<T>,
        value: std::result::Result<Tensor<T>, TensorError>,
        requires_grad: bool,
    ) -> Result<Var> {
        let node = self.nodes.len();
        let value = value.map_err(|source| TapeError::Shape {
            node,
            op: op.name(),
            source,
        })?;
        if !value.is_finite() {
            return Err(TapeError::NonFinite {
                node,
                op: op.name(),
            });
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(node))
    }

    fn check(&self, v: Var) -> Result<&Node<T>> {
        self.nodes.get(v.0).ok_or(TapeError::UnknownNode(v.0))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(
        &mut self,
        a: Var,
        op: Op<T>,
        f: impl FnOnce(&Tensor<T>) -> std::result::Result<Tensor<T>, TensorError>,
    ) -> Result<Var> {
        let value = f(&self.check(a)?.value);
        let rg = self.rg(&[a]);
        self.push(op, value, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, f);
        let rg = self.rg(&[a, b]);
        self.push(op, value, rg)
    }

    pub fn identity(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Identity(a), |x| Ok(x.clone()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary(a, Op::AddScalar(a), |x| Ok(x.map(|v| v + c)))
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary(a, Op::MulScalar(a, c), |x| Ok(x.map(|v| v * c)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |x| Ok(x.map(|v| v.max(T::zero()))))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), |x| {
            Ok(x.map(|v| {
                // split by sign so exp never overflows
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            }))
        })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sum(a), |x| Ok(Tensor::scalar(x.sum())))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Mean(a), |x| {
            Ok(Tensor::scalar(x.sum() / T::from_usize(x.len()).unwrap()))
        })
    }

    /// Reduces `[N, ...]` to `[N]`.
    pub fn sum_per_sample(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::SumPerSample(a), |x| {
            let n = x.shape()[0];
            Tensor::new(
                vec![n],
                (0..n).map(|i| x.sample(i).iter().copied().sum()).collect(),
            )
        })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, opts: Conv2dOptions) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        if let Some(b) = b {
            self.check(b)?;
        }
        let value = ops::conv2d(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            b.map(|b| &self.nodes[b.0].value),
            opts,
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(Op::Conv2d { x, w, b, opts }, value, rg)
    }

    fn record_ties(
        &mut self,
        x: Var,
        k: usize,
        stride: Option<usize>,
        padding: Padding,
    ) -> Result<()> {
        if let Some(tol) = self.tie_tolerance {
            let node = self.nodes.len();
            let value = &self.nodes[x.0].value;
            let windows = match stride {
                Some(s) => ops::maxpool_ties(value, k, s, tol),
                None => ops::dense_maxpool_ties(value, k, padding, tol),
            }
            .map_err(|source| TapeError::Shape {
                node,
                op: "pool",
                source,
            })?;
            if windows > 0 {
                self.warnings.push(TieWarning { node, windows });
            }
        }
        Ok(())
    }

    pub fn maxpool(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        self.check(x)?;
        self.record_ties(x, k, Some(stride), Padding::Zero)?;
        let rg = self.rg(&[x]);
        match ops::maxpool_indexed(&self.nodes[x.0].value, k, stride) {
            Ok(p) => self.push(
                Op::Pool {
                    x,
                    argmax: p.argmax,
                },
                Ok(p.output),
                rg,
            ),
            Err(e) => self.push(Op::Pool { x, argmax: vec![] }, Err(e), rg),
        }
    }

    /// Dense max pooling with replicated bottom/right border.
    pub fn dense_maxpool(&mut self, x: Var, k: usize) -> Result<Var> {
        self.dense_maxpool_padded(x, k, Padding::Replicate)
    }

    pub fn dense_maxpool_padded(&mut self, x: Var, k: usize, padding: Padding) -> Result<Var> {
        self.check(x)?;
        self.record_ties(x, k, None, padding)?;
        let rg = self.rg(&[x]);
        match ops::dense_maxpool_indexed(&self.nodes[x.0].value, k, padding) {
            Ok(p) => self.push(
                Op::Pool {
                    x,
                    argmax: p.argmax,
                },
                Ok(p.output),
                rg,
            ),
            Err(e) => self.push(Op::Pool { x, argmax: vec![] }, Err(e), rg),
        }
    }

    pub fn blur_subsample(&mut self, x: Var, kernel: &BlurKernel, factor: usize) -> Result<Var> {
        self.unary(
            x,
            Op::BlurSubsample {
                x,
                kernel: kernel.clone(),
                factor,
            },
            |t| ops::blur_subsample(t, kernel, factor),
        )
    }

    pub fn bilinear_upsample(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Upsample(x), |t| ops::bilinear_upsample(t, 2))
    }

    /// Concatenates two `[N, C, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = concat_channels(&self.nodes[a.0].value, &self.nodes[b.0].value);
        let rg = self.rg(&[a, b]);
        self.push(Op::ConcatChannels(a, b), value, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every parameter leaf on the tape receives an entry; parameters the loss
    /// does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(TapeError::ForwardNotRun);
        }
        let loss_node = self.check(loss)?;
        if loss_node.value.len() != 1 {
            return Err(TapeError::LossNotScalar(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_node.value.shape(), T::one()));

        let mut out = Gradients {
            params: BTreeMap::new(),
            inputs: BTreeMap::new(),
        };

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(g) = grads[i].take() else {
                if let Op::Leaf(Leaf::Param(name)) = &node.op {
                    out.params
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            match &node.op {
                Op::Leaf(Leaf::Param(name)) => accumulate_named(&mut out.params, name, g),
                Op::Leaf(Leaf::Input(name)) => {
                    if node.requires_grad {
                        accumulate_named(&mut out.inputs, name, g)
                    }
                }
                Op::Leaf(Leaf::Constant) => {}
                op => self
                    .propagate(i, op, g, &mut grads)
                    .map_err(|source| TapeError::Shape {
                        node: i,
                        op: op.name(),
                        source,
                    })?,
            }
        }
        // parameters recorded after the loss cannot influence it
        for node in &self.nodes[loss.0 + 1..] {
            if let Op::Leaf(Leaf::Param(name)) = &node.op {
                out.params
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(out)
    }

    fn propagate(
        &self,
        idx: usize,
        op: &Op<T>,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> std::result::Result<(), TensorError> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, t: Tensor<T>| -> std::result::Result<(), TensorError> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match op {
            Op::Leaf(_) => unreachable!("leaves are handled by the caller"),
            Op::Identity(a) | Op::AddScalar(a) => send(*a, g)?,
            Op::Add(a, b) => {
                send(*b, g.clone())?;
                send(*a, g)?;
            }
            Op::Sub(a, b) => {
                send(*b, g.map(|v| -v))?;
                send(*a, g)?;
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    send(*a, g.zip_map(val(b), |gv, bv| gv * bv)?)?;
                }
                if wants(b) {
                    send(*b, g.zip_map(val(a), |gv, av| gv * av)?)?;
                }
            }
            Op::Div(a, b) => {
                if wants(a) {
                    send(*a, g.zip_map(val(b), |gv, bv| gv / bv)?)?;
                }
                if wants(b) {
                    let out = &self.nodes[idx].value;
                    let gb = g.zip_map(out, |gv, ov| gv * ov)?;
                    send(*b, gb.zip_map(val(b), |t, bv| -t / bv)?)?;
                }
            }
            Op::MulScalar(a, c) => {
                let c = *c;
                send(*a, g.map(|v| v * c))?
            }
            Op::Relu(a) => send(
                *a,
                g.zip_map(val(a), |gv, x| if x > T::zero() { gv } else { T::zero() })?,
            )?,
            Op::Sigmoid(a) => {
                let out = &self.nodes[idx].value;
                send(*a, g.zip_map(out, |gv, s| gv * s * (T::one() - s))?)?
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                send(*a, Tensor::full(val(a).shape(), gv))?
            }
            Op::Mean(a) => {
                let n = T::from_usize(val(a).len()).unwrap();
                let gv = g.data()[0] / n;
                send(*a, Tensor::full(val(a).shape(), gv))?
            }
            Op::SumPerSample(a) => {
                let x = val(a);
                let per = x.len() / x.shape()[0];
                let gd = g.data();
                send(*a, Tensor::from_fn(x.shape(), |i| gd[i / per]))?
            }
            Op::Conv2d { x, w, b, opts } => {
                let grads_c = ops::conv2d_backward(val(x), val(w), &g, *opts, wants(x))?;
                if let Some(dx) = grads_c.input {
                    send(*x, dx)?;
                }
                send(*w, grads_c.weight)?;
                if let Some(b) = b {
                    send(*b, grads_c.bias)?;
                }
            }
            Op::Pool { x, argmax } => send(*x, ops::pool_backward(&g, argmax, val(x).shape())?)?,
            Op::BlurSubsample { x, kernel, factor } => send(
                *x,
                ops::blur_subsample_backward(&g, kernel, *factor, val(x).shape())?,
            )?,
            Op::Upsample(x) => send(*x, ops::bilinear_upsample_backward(&g, val(x).shape())?)?,
            Op::ConcatChannels(a, b) => {
                let ca = val(a).shape()[1];
                let (ga, gb) = split_channels(&g, ca)?;
                send(*a, ga)?;
                send(*b, gb)?;
            }
        }
        Ok(())
    }
}

fn accumulate_named<T: Scalar>(map: &mut BTreeMap<String, Tensor<T>>, name: &str, g: Tensor<T>) {
    match map.get_mut(name) {
        Some(acc) => acc.add_assign(&g).expect("same leaf, same shape"),
        None => {
            map.insert(name.to_string(), g);
        }
    }
}

pub fn concat_channels<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> std::result::Result<Tensor<T>, TensorError> {
    let (n, ca, h, w) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(TensorError::ShapeMismatch {
            expected: format!("[{n}, _, {h}, {w}]"),
            actual: b.shape().to_vec(),
        });
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for s in 0..n {
        data.extend_from_slice(a.sample(s));
        data.extend_from_slice(b.sample(s));
    }
    Tensor::new(vec![n, ca + cb, h, w], data)
}

fn split_channels<T: Scalar>(
    g: &Tensor<T>,
    ca: usize,
) -> std::result::Result<(Tensor<T>, Tensor<T>), TensorError> {
    let (n, c, h, w) = g.dims4()?;
    let cb = c - ca;
    let mut ga = Vec::with_capacity(n * ca * h * w);
    let mut gb = Vec::with_capacity(n * cb * h * w);
    for s in 0..n {
        let chunk = g.sample(s);
        ga.extend_from_slice(&chunk[..ca * h * w]);
        gb.extend_from_slice(&chunk[ca * h * w..]);
    }
    Ok((
        Tensor::new(vec![n, ca, h, w], ga)?,
        Tensor::new(vec![n, cb, h, w], gb)?,
    ))
}
