//! Reverse-mode gradients over a recorded operation tape.
//!
//! A [`Tape`] owns every intermediate value of one computation. [`Var`] is a
//! cheap handle into it. Running [`Tape::backward`] on a scalar output walks
//! the records in reverse and accumulates gradients into every node that
//! requires them.
//!
//! Every forward op checks its output for NaN/Inf and fails immediately
//! instead of propagating the value.

use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{CgsError, Result};
use crate::tensor::{gemm, Tensor};

/// Replacement rule applied to the incoming gradient of a hooked value.
pub type HookRule = Box<dyn Fn(&Tensor) -> Result<Tensor>>;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    LeakyRelu(usize, f64),
    Swish(usize),
    AddBias(usize, usize),
    ScaleRows(usize, usize),
    GatherRows(usize, Rc<[usize]>),
    SegmentSum(usize, Rc<[usize]>),
    Concat(Vec<usize>, usize),
    Mse(usize, usize),
    Sum(usize),
    Mean(usize),
    Hook(usize, HookRule),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Single-threaded operation record.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of its shape when nothing reached it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

fn check(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(CgsError::NonFinite(op))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

fn swish_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

fn leaky_grad(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        slope
    }
}

/// Scalar activations usable both on tapes and on raw values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Sigmoid,
    Tanh,
    LeakyRelu(f64),
    Swish,
}

impl Activation {
    pub fn leaky_relu() -> Self {
        Activation::LeakyRelu(DEFAULT_LEAKY_SLOPE)
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::LeakyRelu(s) => leaky(x, s),
            Activation::Swish => swish(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
            Activation::LeakyRelu(s) => leaky_grad(x, s),
            Activation::Swish => swish_grad(x),
        }
    }

    pub fn apply<'t>(self, v: Var<'t>) -> Result<Var<'t>> {
        match self {
            Activation::Identity => Ok(v),
            Activation::Sigmoid => v.sigmoid(),
            Activation::Tanh => v.tanh(),
            Activation::LeakyRelu(s) => v.leaky_relu(s),
            Activation::Swish => v.swish(),
        }
    }

    pub fn name(self) -> String {
        match self {
            Activation::Identity => "identity".into(),
            Activation::Sigmoid => "sigmoid".into(),
            Activation::Tanh => "tanh".into(),
            Activation::LeakyRelu(s) if s == DEFAULT_LEAKY_SLOPE => "leaky_relu".into(),
            Activation::LeakyRelu(s) => format!("leaky_relu:{s}"),
            Activation::Swish => "swish".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Ok(match s.as_str() {
            "identity" | "linear" | "none" => Activation::Identity,
            "sigmoid" => Activation::Sigmoid,
            "tanh" => Activation::Tanh,
            "leaky_relu" | "leakyrelu" => Activation::leaky_relu(),
            "swish" => Activation::Swish,
            other => match other.strip_prefix("leaky_relu:") {
                Some(slope) => Activation::LeakyRelu(
                    slope
                        .parse()
                        .map_err(|_| CgsError::Config(format!("bad leaky_relu slope {slope:?}")))?,
                ),
                None => return Err(CgsError::Config(format!("unknown activation {other:?}"))),
            },
        })
    }
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

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, true, Op::Leaf)
    }

    /// Input that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, false, Op::Leaf)
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out_shape = nodes[output.id].value.shape().to_vec();
        if nodes[output.id].value.len() != 1 {
            return Err(CgsError::dim("backward", &out_shape, &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[output.id] = Some(Tensor::ones(&out_shape));

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let mut send = |target: usize, contribution: Tensor| -> Result<()> {
                if !nodes[target].requires_grad {
                    return Ok(());
                }
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => {
                        *slot = Some(contribution);
                        Ok(())
                    }
                }
            };
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => unreachable!("leaves are skipped above"),
                Op::MatMul(a, b) => {
                    if nodes[*a].requires_grad {
                        send(*a, gemm(&g, false, val(*b), true)?)?;
                    }
                    if nodes[*b].requires_grad {
                        send(*b, gemm(val(*a), true, &g, false)?)?;
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    send(*a, reduce_broadcast(&g, val(*a), 1.0))?;
                    send(*b, reduce_broadcast(&g, val(*b), sign))?;
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        send(*a, reduce_broadcast(&mul_broadcast(&g, vb), va, 1.0))?;
                    }
                    if nodes[*b].requires_grad {
                        send(*b, reduce_broadcast(&mul_broadcast(&g, va), vb, 1.0))?;
                    }
                }
                Op::AddScalar(a) => send(*a, g)?,
                Op::MulScalar(a, c) => send(*a, g.scale(*c))?,
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    send(*a, g.zip_map(y, |g, s| g * s * (1.0 - s))?)?;
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    send(*a, g.zip_map(y, |g, t| g * (1.0 - t * t))?)?;
                }
                Op::LeakyRelu(a, slope) => {
                    send(*a, g.zip_map(val(*a), |g, x| g * leaky_grad(x, *slope))?)?;
                }
                Op::Swish(a) => {
                    send(*a, g.zip_map(val(*a), |g, x| g * swish_grad(x))?)?;
                }
                Op::AddBias(x, b) => {
                    if nodes[*b].requires_grad {
                        let cols = g.cols();
                        let mut gb = vec![0.0; cols];
                        for row in g.data().chunks_exact(cols.max(1)) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        send(*b, Tensor::new(val(*b).shape(), gb)?)?;
                    }
                    send(*x, g)?;
                }
                Op::ScaleRows(x, s) => {
                    let (vx, vs) = (val(*x), val(*s));
                    let cols = vx.cols();
                    if nodes[*x].requires_grad {
                        let mut gx = g.clone();
                        for (row, sc) in gx.data_mut().chunks_exact_mut(cols.max(1)).zip(vs.data()) {
                            row.iter_mut().for_each(|v| *v *= sc);
                        }
                        send(*x, gx)?;
                    }
                    if nodes[*s].requires_grad {
                        let gs: Vec<f64> = g
                            .data()
                            .chunks_exact(cols.max(1))
                            .zip(vx.data().chunks_exact(cols.max(1)))
                            .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                            .collect();
                        send(*s, Tensor::new(vs.shape(), gs)?)?;
                    }
                }
                Op::GatherRows(x, ids) => {
                    let rows = val(*x).rows();
                    let scattered = segment_sum_raw(&g, ids, rows)?;
                    send(*x, scattered.reshape(val(*x).shape())?)?;
                }
                Op::SegmentSum(x, ids) => {
                    let gathered = gather_rows_raw(&g, ids)?;
                    send(*x, gathered.reshape(val(*x).shape())?)?;
                }
                Op::Concat(parts, axis) => {
                    let mut offset = 0;
                    for &p in parts {
                        let shape = val(p).shape().to_vec();
                        let piece = split_piece(&g, &shape, *axis, offset);
                        offset += if *axis == 0 { shape[0] } else { val(p).cols() };
                        send(p, piece)?;
                    }
                }
                Op::Mse(p, t) => {
                    let (vp, vt) = (val(*p), val(*t));
                    let c = 2.0 * g.data()[0] / vp.len().max(1) as f64;
                    let d = vp.zip_map(vt, |a, b| c * (a - b))?;
                    if nodes[*t].requires_grad {
                        send(*t, d.scale(-1.0))?;
                    }
                    send(*p, d)?;
                }
                Op::Sum(a) => {
                    let va = val(*a);
                    send(*a, Tensor::full(va.shape(), g.data()[0]))?;
                }
                Op::Mean(a) => {
                    let va = val(*a);
                    let n = va.len().max(1) as f64;
                    send(*a, Tensor::full(va.shape(), g.data()[0] / n))?;
                }
                Op::Hook(a, rule) => {
                    let replaced = check("hook rule", rule(&g)?)?;
                    if replaced.shape() != g.shape() {
                        return Err(CgsError::dim("hook rule", g.shape(), replaced.shape()));
                    }
                    send(*a, replaced)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn mul_broadcast(g: &Tensor, other: &Tensor) -> Tensor {
    if other.len() == 1 && g.len() != 1 {
        g.scale(other.data()[0])
    } else {
        g.zip_map(other, |a, b| a * b).expect("shapes checked at forward time")
    }
}

/// Collapses a gradient to the operand's shape when it was scalar-broadcast.
fn reduce_broadcast(g: &Tensor, operand: &Tensor, sign: f64) -> Tensor {
    if operand.len() == 1 && g.len() != 1 {
        Tensor::new(operand.shape(), vec![sign * g.sum()]).expect("scalar")
    } else if sign == 1.0 {
        g.clone()
    } else {
        g.scale(sign)
    }
}

fn split_piece(g: &Tensor, shape: &[usize], axis: usize, offset: usize) -> Tensor {
    if axis == 0 {
        let mut t = g.slice_rows(offset, offset + shape[0]);
        if shape.len() == 1 {
            t = t.reshape(shape).expect("same length");
        }
        t
    } else {
        let rows = g.rows();
        let width = shape[1..].iter().product::<usize>();
        let gc = g.cols();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&g.data()[r * gc + offset..r * gc + offset + width]);
        }
        Tensor::new(shape, data).expect("piece shape")
    }
}

pub(crate) fn segment_sum_raw(values: &Tensor, ids: &[usize], num_segments: usize) -> Result<Tensor> {
    let cols = values.cols();
    if values.rows() != ids.len() {
        return Err(CgsError::dim("segment_sum", values.shape(), &[ids.len()]));
    }
    let mut out = vec![0.0; num_segments * cols];
    for (row, &s) in values.data().chunks_exact(cols.max(1)).zip(ids) {
        if s >= num_segments {
            return Err(CgsError::Index {
                op: "segment_sum",
                index: s,
                bound: num_segments,
            });
        }
        for (o, v) in out[s * cols..(s + 1) * cols].iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::new(&[num_segments, cols], out)
}

pub(crate) fn gather_rows_raw(values: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let cols = values.cols();
    let rows = values.rows();
    let mut out = Vec::with_capacity(ids.len() * cols);
    for &i in ids {
        if i >= rows {
            return Err(CgsError::Index {
                op: "gather_rows",
                index: i,
                bound: rows,
            });
        }
        out.extend_from_slice(&values.data()[i * cols..(i + 1) * cols]);
    }
    Tensor::new(&[ids.len(), cols], out)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_ref(self.id).clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.value_ref(self.id))
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_ref(self.id).shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(CgsError::State("operands recorded on different tapes".into()))
        }
    }

    fn unary(self, name: &'static str, f: impl Fn(&Tensor) -> Result<Tensor>, op: Op) -> Result<Var<'t>> {
        let out = check(name, f(&self.tape.value_ref(self.id))?)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(out, rg, op))
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(&Tensor, &Tensor) -> Result<Tensor>,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let out = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(other.id);
            check(name, f(&a, &b)?)?
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(out, rg, op))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "matmul", |a, b| a.matmul(b), Op::MatMul(self.id, other.id))
    }

    fn elementwise(
        self,
        other: Var<'t>,
        name: &'static str,
        f: fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.binary(
            other,
            name,
            move |a, b| {
                if a.shape() == b.shape() {
                    a.zip_map(b, f)
                } else if b.len() == 1 {
                    let s = b.data()[0];
                    Ok(a.map(|x| f(x, s)))
                } else if a.len() == 1 {
                    let s = a.data()[0];
                    Ok(b.map(|x| f(s, x)))
                } else {
                    Err(CgsError::dim(name, a.shape(), b.shape()))
                }
            },
            op,
        )
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", |a| Ok(a.map(|x| x + c)), Op::AddScalar(self.id))
    }

    pub fn mul_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary("mul_scalar", |a| Ok(a.scale(c)), Op::MulScalar(self.id, c))
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary("sigmoid", |a| Ok(a.map(sigmoid)), Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary("tanh", |a| Ok(a.map(f64::tanh)), Op::Tanh(self.id))
    }

    pub fn leaky_relu(self, slope: f64) -> Result<Var<'t>> {
        self.unary(
            "leaky_relu",
            |a| Ok(a.map(|x| leaky(x, slope))),
            Op::LeakyRelu(self.id, slope),
        )
    }

    pub fn swish(self) -> Result<Var<'t>> {
        self.unary("swish", |a| Ok(a.map(swish)), Op::Swish(self.id))
    }

    /// `x[n×k] + b` with `b` holding `k` values, broadcast over rows.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            bias,
            "add_bias",
            |x, b| {
                let k = x.cols();
                if b.len() != k {
                    return Err(CgsError::dim("add_bias", x.shape(), b.shape()));
                }
                let mut out = x.clone();
                for row in out.data_mut().chunks_exact_mut(k.max(1)) {
                    for (v, bb) in row.iter_mut().zip(b.data()) {
                        *v += bb;
                    }
                }
                Ok(out)
            },
            Op::AddBias(self.id, bias.id),
        )
    }

    /// Multiplies row `r` of `x[n×k]` by `s[r]` where `s` is `[n×1]`.
    pub fn scale_rows(self, s: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            s,
            "scale_rows",
            |x, s| {
                if s.len() != x.rows() {
                    return Err(CgsError::dim("scale_rows", x.shape(), s.shape()));
                }
                let k = x.cols();
                let mut out = x.clone();
                for (row, sc) in out.data_mut().chunks_exact_mut(k.max(1)).zip(s.data()) {
                    row.iter_mut().for_each(|v| *v *= sc);
                }
                Ok(out)
            },
            Op::ScaleRows(self.id, s.id),
        )
    }

    pub fn gather_rows(self, ids: Rc<[usize]>) -> Result<Var<'t>> {
        let ids2 = ids.clone();
        self.unary(
            "gather_rows",
            move |x| gather_rows_raw(x, &ids2),
            Op::GatherRows(self.id, ids),
        )
    }

    /// Row `s` of the output sums every input row whose id is `s`.
    pub fn segment_sum(self, ids: Rc<[usize]>, num_segments: usize) -> Result<Var<'t>> {
        let ids2 = ids.clone();
        self.unary(
            "segment_sum",
            move |x| segment_sum_raw(x, &ids2, num_segments),
            Op::SegmentSum(self.id, ids),
        )
    }

    pub fn mse_loss(self, target: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            target,
            "mse_loss",
            |p, t| {
                if p.shape() != t.shape() {
                    return Err(CgsError::dim("mse_loss", p.shape(), t.shape()));
                }
                let n = p.len().max(1) as f64;
                let s: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b).powi(2)).sum();
                Ok(Tensor::scalar(s / n))
            },
            Op::Mse(self.id, target.id),
        )
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.unary("sum", |a| Ok(Tensor::scalar(a.sum())), Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.unary(
            "mean",
            |a| Ok(Tensor::scalar(a.sum() / a.len().max(1) as f64)),
            Op::Mean(self.id),
        )
    }

    /// Registers a rule that rewrites this value's incoming gradient during
    /// backward. Returns the hooked value; downstream ops must consume it.
    pub fn hook(self, rule: HookRule) -> Result<Var<'t>> {
        if !self.requires_grad() {
            return Err(CgsError::State(
                "gradient hook registered on a value detached from the tape".into(),
            ));
        }
        let out = self.value();
        Ok(self.tape.push(out, true, Op::Hook(self.id, rule)))
    }
}

/// Concatenates 2-D values along `axis` (0 = rows, 1 = columns).
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| CgsError::State("concat of zero tensors".into()))?;
    let tape = first.tape;
    for p in parts {
        first.same_tape(p)?;
    }
    if axis > 1 {
        return Err(CgsError::Config(format!("concat axis {axis} unsupported")));
    }
    let out = {
        let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| tape.value_ref(p.id)).collect();
        if axis == 0 {
            let refs: Vec<&Tensor> = vals.iter().map(|r| &**r).collect();
            let cols = refs[0].cols();
            for r in &refs {
                if r.cols() != cols {
                    return Err(CgsError::dim("concat", refs[0].shape(), r.shape()));
                }
            }
            let mut t = Tensor::vstack(&refs)?;
            if refs.iter().all(|r| r.shape().len() == 1) {
                let n = t.len();
                t = t.reshape(&[n])?;
            }
            t
        } else {
            let rows = vals[0].rows();
            for v in &vals {
                if v.rows() != rows || v.shape().len() != 2 {
                    return Err(CgsError::dim("concat", vals[0].shape(), v.shape()));
                }
            }
            let width: usize = vals.iter().map(|v| v.cols()).sum();
            let mut data = Vec::with_capacity(rows * width);
            for r in 0..rows {
                for v in &vals {
                    data.extend_from_slice(v.row(r));
                }
            }
            Tensor::new(&[rows, width], data)?
        }
    };
    let rg = parts.iter().any(|p| p.requires_grad());
    Ok(tape.push(
        out,
        rg,
        Op::Concat(parts.iter().map(|p| p.id).collect(), axis),
    ))
}
