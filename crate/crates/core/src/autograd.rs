//! Tape-based reverse-mode automatic differentiation.
//!
//! Every backward rule is written in terms of graph operations, so the gradients
//! returned by [`Graph::grad`] are themselves differentiable. The gradient penalty
//! of the adversarial scales needs exactly that: a loss built from a gradient.

use std::cell::RefCell;
use std::ops;
use std::rc::Rc;

use crate::conv::{self, Kernel};
use crate::resample::SeparableMap;
use crate::tensor::Tensor;

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    /// Tensor times a scalar-shaped variable.
    ScaleBy(usize, usize),
    Exp(usize),
    Tanh(usize),
    Sqrt(usize),
    Powf(usize, f64),
    /// `1 / x`, defined as 0 where `x == 0`.
    Recip(usize),
    /// Elementwise product with a constant mask.
    Masked(usize, Rc<Vec<f64>>),
    SumAll(usize),
    Expand(usize),
    /// `[C, ...] -> [C]`
    ChannelSum(usize),
    /// `[C] -> [C, ...]`
    ChannelExpand(usize),
    /// `[C, ...] -> [1, ...]`
    ReduceChannels(usize),
    /// `[1, ...] -> [C, ...]`
    RepeatChannels(usize),
    Conv(usize, usize),
    ConvInputGrad(usize, usize),
    ConvWeightGrad(usize, usize),
    Resample(usize, Rc<SeparableMap>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// An append-only computation graph. Nodes are created in topological order.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_raw(Rc::new(value), Op::Leaf, false)
    }

    /// A leaf that receives gradients.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_raw(Rc::new(value), Op::Leaf, true)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push_raw(&self, value: Rc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs(&op).iter().any(|&i| nodes[i].requires_grad)
        };
        self.push_raw(Rc::new(value), op, requires_grad)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { graph: self, id }
    }

    /// Gradients of `output` (summed over its elements) with respect to `wrt`.
    ///
    /// The result is expressed as new graph nodes and can be differentiated again.
    /// Entries of `wrt` that `output` does not depend on get a zero constant.
    pub fn grad<'g>(&'g self, output: Var<'g>, wrt: &[Var<'g>]) -> Vec<Var<'g>> {
        let end = output.id + 1;
        // Nodes that lie on a path from some `wrt` entry to `output`.
        let mut reach = vec![false; end];
        for w in wrt {
            if w.id < end {
                reach[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for id in 0..end {
                if !reach[id] && nodes[id].requires_grad {
                    reach[id] = inputs(&nodes[id].op).iter().any(|&i| reach[i]);
                }
            }
        }
        let mut grads: Vec<Option<Var<'g>>> = vec![None; end];
        if reach[output.id] {
            let shape = output.value().shape().to_vec();
            grads[output.id] = Some(self.constant(Tensor::ones(&shape)));
        }
        for id in (0..end).rev() {
            let Some(gy) = grads[id] else { continue };
            let op = self.nodes.borrow()[id].op.clone();
            for (input, g) in self.backward(id, &op, gy, &reach) {
                grads[input] = Some(match grads[input] {
                    Some(acc) => acc + g,
                    None => g,
                });
            }
        }
        wrt.iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(w.value().shape())),
            })
            .collect()
    }

    fn backward<'g>(&'g self, id: usize, op: &Op, gy: Var<'g>, reach: &[bool]) -> Vec<(usize, Var<'g>)> {
        let v = |i: usize| self.var(i);
        let mut out = Vec::with_capacity(2);
        let mut emit = |i: usize, f: &dyn Fn() -> Var<'g>| {
            if reach[i] {
                out.push((i, f()));
            }
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit(*a, &|| gy);
                emit(*b, &|| gy);
            }
            Op::Sub(a, b) => {
                emit(*a, &|| gy);
                emit(*b, &|| -gy);
            }
            Op::Mul(a, b) => {
                emit(*a, &|| gy * v(*b));
                emit(*b, &|| gy * v(*a));
            }
            Op::Neg(a) => emit(*a, &|| -gy),
            Op::Scale(a, s) => emit(*a, &|| gy.scale(*s)),
            Op::Offset(a) => emit(*a, &|| gy),
            Op::ScaleBy(a, s) => {
                emit(*a, &|| gy.scale_by(v(*s)));
                emit(*s, &|| (gy * v(*a)).sum());
            }
            Op::Exp(a) => emit(*a, &|| gy * v(id)),
            Op::Tanh(a) => emit(*a, &|| {
                let y = v(id);
                gy * (-(y * y)).offset(1.0)
            }),
            Op::Sqrt(a) => emit(*a, &|| gy * v(id).recip().scale(0.5)),
            Op::Powf(a, p) => emit(*a, &|| gy * v(*a).powf(p - 1.0).scale(*p)),
            Op::Recip(a) => emit(*a, &|| {
                let r = v(id);
                -(gy * r * r)
            }),
            Op::Masked(a, m) => emit(*a, &|| gy.masked(Rc::clone(m))),
            Op::SumAll(a) => emit(*a, &|| gy.expand(v(*a).value().shape())),
            Op::Expand(a) => emit(*a, &|| gy.sum()),
            Op::ChannelSum(a) => emit(*a, &|| gy.channel_expand(v(*a).value().shape())),
            Op::ChannelExpand(a) => emit(*a, &|| gy.channel_sum()),
            Op::ReduceChannels(a) => emit(*a, &|| gy.repeat_channels(v(*a).value().shape()[0])),
            Op::RepeatChannels(a) => emit(*a, &|| gy.reduce_channels()),
            Op::Conv(x, w) => {
                emit(*x, &|| gy.conv_input_grad(v(*w)));
                emit(*w, &|| {
                    let ws = v(*w).value();
                    let s = ws.shape();
                    v(*x).conv_weight_grad(gy, [s[2], s[3], s[4]])
                });
            }
            Op::ConvInputGrad(g_out, w) => {
                emit(*g_out, &|| gy.conv(v(*w)));
                emit(*w, &|| {
                    let ws = v(*w).value();
                    let s = ws.shape();
                    gy.conv_weight_grad(v(*g_out), [s[2], s[3], s[4]])
                });
            }
            Op::ConvWeightGrad(x, g_out) => {
                emit(*x, &|| v(*g_out).conv_input_grad(gy));
                emit(*g_out, &|| v(*x).conv(gy));
            }
            Op::Resample(a, map) => emit(*a, &|| gy.resample(Rc::new(map.transpose()))),
        }
        out
    }
}

fn inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ScaleBy(a, b) => vec![*a, *b],
        Op::Conv(a, b) | Op::ConvInputGrad(a, b) | Op::ConvWeightGrad(a, b) => vec![*a, *b],
        Op::Neg(a)
        | Op::Scale(a, _)
        | Op::Offset(a)
        | Op::Exp(a)
        | Op::Tanh(a)
        | Op::Sqrt(a)
        | Op::Powf(a, _)
        | Op::Recip(a)
        | Op::Masked(a, _)
        | Op::SumAll(a)
        | Op::Expand(a)
        | Op::ChannelSum(a)
        | Op::ChannelExpand(a)
        | Op::ReduceChannels(a)
        | Op::RepeatChannels(a)
        | Op::Resample(a, _) => vec![*a],
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// First element; the value of a scalar variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'g> {
        self.graph.push_raw(self.value(), Op::Leaf, false)
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let value = self.value().map(f);
        self.graph.push(value, op)
    }

    fn binary(&self, other: Var<'g>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
        self.graph.push(a.zip_map(&b, f), op)
    }

    pub fn scale(&self, s: f64) -> Var<'g> {
        self.unary(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn offset(&self, c: f64) -> Var<'g> {
        self.unary(Op::Offset(self.id), |x| x + c)
    }

    /// Multiplies every element by the scalar variable `s`.
    pub fn scale_by(&self, s: Var<'g>) -> Var<'g> {
        let k = s.item();
        assert_eq!(s.value().len(), 1, "scale_by expects a scalar");
        self.unary(Op::ScaleBy(self.id, s.id), |x| x * k)
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn tanh(&self) -> Var<'g> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn sqrt(&self) -> Var<'g> {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn powf(&self, p: f64) -> Var<'g> {
        self.unary(Op::Powf(self.id, p), |x| x.powf(p))
    }

    pub fn square(&self) -> Var<'g> {
        *self * *self
    }

    pub fn recip(&self) -> Var<'g> {
        self.unary(Op::Recip(self.id), |x| if x == 0.0 { 0.0 } else { 1.0 / x })
    }

    pub fn masked(&self, mask: Rc<Vec<f64>>) -> Var<'g> {
        let value = self.value();
        assert_eq!(value.len(), mask.len(), "mask length mismatch");
        let data = value.data().iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
        let t = Tensor::from_parts(value.shape().to_vec(), data);
        self.graph.push(t, Op::Masked(self.id, mask))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'g> {
        let mask: Vec<f64> = self.value().data().iter().map(|&x| if x > 0.0 { 1.0 } else { slope }).collect();
        self.masked(Rc::new(mask))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'g> {
        let value = self.value();
        let mask: Vec<f64> = value.data().iter().map(|&x| if x < lo || x > hi { 0.0 } else { 1.0 }).collect();
        let data = value.data().iter().map(|&x| x.clamp(lo, hi)).collect();
        let out = Tensor::from_parts(value.shape().to_vec(), data);
        // Written as `x * mask + const` so the backward rule stays a plain mask.
        let masked = self.masked(Rc::new(mask));
        let shift = out.zip_map(&masked.value(), |o, m| o - m);
        masked + self.graph.constant(shift)
    }

    pub fn sum(&self) -> Var<'g> {
        let s = self.value().sum();
        self.graph.push(Tensor::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Broadcasts a scalar to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Var<'g> {
        let s = self.item();
        self.graph.push(Tensor::full(shape, s), Op::Expand(self.id))
    }

    pub fn channel_sum(&self) -> Var<'g> {
        let value = self.value();
        let sums = value.channel_sums();
        let c = sums.len();
        self.graph.push(Tensor::from_parts(vec![c], sums), Op::ChannelSum(self.id))
    }

    /// Broadcasts a `[C]` vector over a `[C, ...]` shape.
    pub fn channel_expand(&self, shape: &[usize]) -> Var<'g> {
        let value = self.value();
        let c = shape[0];
        assert_eq!(value.len(), c, "channel_expand length mismatch");
        let inner: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(c * inner);
        for &v in value.data() {
            data.extend(std::iter::repeat_n(v, inner));
        }
        self.graph.push(Tensor::from_parts(shape.to_vec(), data), Op::ChannelExpand(self.id))
    }

    /// Sums over the leading channel axis, keeping it with extent 1.
    pub fn reduce_channels(&self) -> Var<'g> {
        let value = self.value();
        let (c, inner) = value.channel_split();
        let mut data = vec![0.0; inner];
        for ch in 0..c {
            for (d, s) in data.iter_mut().zip(&value.data()[ch * inner..(ch + 1) * inner]) {
                *d += s;
            }
        }
        let mut shape = value.shape().to_vec();
        shape[0] = 1;
        self.graph.push(Tensor::from_parts(shape, data), Op::ReduceChannels(self.id))
    }

    /// Repeats a `[1, ...]` tensor `c` times along the channel axis.
    pub fn repeat_channels(&self, c: usize) -> Var<'g> {
        let value = self.value();
        assert_eq!(value.shape()[0], 1, "repeat_channels expects one channel");
        let mut data = Vec::with_capacity(c * value.len());
        for _ in 0..c {
            data.extend_from_slice(value.data());
        }
        let mut shape = value.shape().to_vec();
        shape[0] = c;
        self.graph.push(Tensor::from_parts(shape, data), Op::RepeatChannels(self.id))
    }

    pub fn conv(&self, weight: Var<'g>) -> Var<'g> {
        let y = conv::conv(&self.value(), &weight.value());
        self.graph.push(y, Op::Conv(self.id, weight.id))
    }

    fn conv_input_grad(&self, weight: Var<'g>) -> Var<'g> {
        let y = conv::input_grad(&self.value(), &weight.value());
        self.graph.push(y, Op::ConvInputGrad(self.id, weight.id))
    }

    fn conv_weight_grad(&self, grad_out: Var<'g>, kernel: Kernel) -> Var<'g> {
        let y = conv::weight_grad(&self.value(), &grad_out.value(), kernel);
        self.graph.push(y, Op::ConvWeightGrad(self.id, grad_out.id))
    }

    /// Applies a separable linear resampling map to a `[C, T, H, W]` variable.
    pub fn resample(&self, map: Rc<SeparableMap>) -> Var<'g> {
        let y = map.apply(&self.value());
        self.graph.push(y, Op::Resample(self.id, map))
    }
}

impl<'g> ops::Add for Var<'g> {
    type Output = Var<'g>;
    fn add(self, rhs: Var<'g>) -> Var<'g> {
        self.binary(rhs, Op::Add(self.id, rhs.id), |a, b| a + b)
    }
}

impl<'g> ops::Sub for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, rhs: Var<'g>) -> Var<'g> {
        self.binary(rhs, Op::Sub(self.id, rhs.id), |a, b| a - b)
    }
}

impl<'g> ops::Mul for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, rhs: Var<'g>) -> Var<'g> {
        self.binary(rhs, Op::Mul(self.id, rhs.id), |a, b| a * b)
    }
}

impl<'g> ops::Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        self.unary(Op::Neg(self.id), |x| -x)
    }
}
