//! Convolutional building blocks, normalization layers and the Adam optimizer.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const INIT_STD: f64 = 0.02;

/// Which normalization statistics a forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch-norm uses batch statistics and records them for the running averages.
    Train,
    /// Batch-norm uses its running statistics; the network is a fixed function.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    LeakyRelu,
    Tanh,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Norm {
    None,
    Batch { gamma: Tensor, beta: Tensor, running_mean: Tensor, running_var: Tensor },
    /// Spectral normalization with its persistent left singular-vector estimate.
    Spectral { u: Tensor },
}

impl Norm {
    fn kind(&self) -> &'static str {
        match self {
            Norm::None => "none",
            Norm::Batch { .. } => "batch",
            Norm::Spectral { .. } => "spectral",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    None,
    Batch,
    Spectral,
}

/// One convolution + normalization + activation block.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub norm: Norm,
    pub activation: Activation,
}

fn normal_tensor(shape: &[usize], mean: f64, std: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(mean, std).expect("valid normal");
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

fn unit_vector(n: usize, rng: &mut impl Rng) -> Tensor {
    let mut t = normal_tensor(&[n], 0.0, 1.0, rng);
    let norm = t.data().iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    t.data_mut().iter_mut().for_each(|v| *v /= norm);
    t
}

/// `W^T u` for a weight viewed as `[Cout, rest]`.
fn wt_u(weight: &Tensor, u: &[f64]) -> Vec<f64> {
    let cout = weight.shape()[0];
    let rest = weight.len() / cout;
    let mut v = vec![0.0; rest];
    for (o, &uo) in u.iter().enumerate() {
        for (vi, w) in v.iter_mut().zip(&weight.data()[o * rest..(o + 1) * rest]) {
            *vi += w * uo;
        }
    }
    v
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

impl ConvLayer {
    pub fn new(cin: usize, cout: usize, kernel: [usize; 3], norm: NormKind, activation: Activation, rng: &mut impl Rng) -> Self {
        let weight = normal_tensor(&[cout, cin, kernel[0], kernel[1], kernel[2]], 0.0, INIT_STD, rng);
        let norm = match norm {
            NormKind::None => Norm::None,
            NormKind::Batch => Norm::Batch {
                gamma: Tensor::ones(&[cout]),
                beta: Tensor::zeros(&[cout]),
                running_mean: Tensor::zeros(&[cout]),
                running_var: Tensor::ones(&[cout]),
            },
            NormKind::Spectral => Norm::Spectral { u: unit_vector(cout, rng) },
        };
        Self { weight, bias: Tensor::zeros(&[cout]), norm, activation }
    }

    pub fn kernel(&self) -> [usize; 3] {
        let s = self.weight.shape();
        [s[2], s[3], s[4]]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Current spectral-norm estimate `||W^T u||` (1 for other norms).
    pub fn sigma(&self) -> f64 {
        match &self.norm {
            Norm::Spectral { u } => {
                let mut v = wt_u(&self.weight, u.data());
                normalize(&mut v)
            }
            _ => 1.0,
        }
    }

    /// One power-iteration step on the spectral-norm vector.
    pub fn power_iteration(&mut self) {
        if let Norm::Spectral { u } = &mut self.norm {
            let mut v = wt_u(&self.weight, u.data());
            normalize(&mut v);
            let cout = self.weight.shape()[0];
            let rest = self.weight.len() / cout;
            let mut next: Vec<f64> = (0..cout)
                .map(|o| self.weight.data()[o * rest..(o + 1) * rest].iter().zip(&v).map(|(w, x)| w * x).sum())
                .collect();
            if normalize(&mut next) > 0.0 {
                *u = Tensor::from_parts(vec![cout], next);
            }
        }
    }

    fn named_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
        match &self.norm {
            Norm::None => {}
            Norm::Batch { gamma, beta, running_mean, running_var } => {
                out.push((format!("{prefix}.bn.gamma"), gamma));
                out.push((format!("{prefix}.bn.beta"), beta));
                out.push((format!("{prefix}.bn.running_mean"), running_mean));
                out.push((format!("{prefix}.bn.running_var"), running_var));
            }
            Norm::Spectral { u } => out.push((format!("{prefix}.sn.u"), u)),
        }
    }

    fn named_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
        match &mut self.norm {
            Norm::None => {}
            Norm::Batch { gamma, beta, running_mean, running_var } => {
                out.push((format!("{prefix}.bn.gamma"), gamma));
                out.push((format!("{prefix}.bn.beta"), beta));
                out.push((format!("{prefix}.bn.running_mean"), running_mean));
                out.push((format!("{prefix}.bn.running_var"), running_var));
            }
            Norm::Spectral { u } => out.push((format!("{prefix}.sn.u"), u)),
        }
    }

    fn trainable_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
        if let Norm::Batch { gamma, beta, .. } = &mut self.norm {
            out.push(gamma);
            out.push(beta);
        }
    }

    fn bind<'g>(&self, g: &'g Graph, trainable: bool, params: &mut Vec<Var<'g>>) -> BoundLayer<'g> {
        let leaf = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        let weight = leaf(&self.weight);
        let bias = leaf(&self.bias);
        params.push(weight);
        params.push(bias);
        let (weight_eff, norm) = match &self.norm {
            Norm::None => (weight, BoundNorm::None),
            Norm::Spectral { u } => {
                // sigma = u^T W v with v = normalize(W^T u); d sigma / dW = u v^T.
                let mut v = wt_u(&self.weight, u.data());
                normalize(&mut v);
                let outer: Vec<f64> = u.data().iter().flat_map(|&uo| v.iter().map(move |&vi| uo * vi)).collect();
                let outer = g.constant(Tensor::from_parts(self.weight.shape().to_vec(), outer));
                let sigma = (weight * outer).sum();
                (weight.scale_by(sigma.recip()), BoundNorm::None)
            }
            Norm::Batch { gamma, beta, running_mean, running_var } => {
                let gamma = leaf(gamma);
                let beta = leaf(beta);
                params.push(gamma);
                params.push(beta);
                (
                    weight,
                    BoundNorm::Batch {
                        gamma,
                        beta,
                        running_mean: running_mean.data().to_vec(),
                        running_var: running_var.data().to_vec(),
                    },
                )
            }
        };
        BoundLayer { weight: weight_eff, bias, norm, activation: self.activation }
    }
}

enum BoundNorm<'g> {
    None,
    Batch { gamma: Var<'g>, beta: Var<'g>, running_mean: Vec<f64>, running_var: Vec<f64> },
}

struct BoundLayer<'g> {
    weight: Var<'g>,
    bias: Var<'g>,
    norm: BoundNorm<'g>,
    activation: Activation,
}

/// Batch statistics observed by one train-mode batch-norm evaluation.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub layer: usize,
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for the running average.
    pub var: Vec<f64>,
}

impl<'g> BoundLayer<'g> {
    fn forward(&self, x: Var<'g>, mode: Mode, index: usize, stats: &RefCell<Vec<BatchStats>>) -> Var<'g> {
        let shape = x.shape();
        let y = x.conv(self.weight) + self.bias.channel_expand(&[self.weight.shape()[0], shape[1], shape[2], shape[3]]);
        let shape = y.shape();
        let y = match &self.norm {
            BoundNorm::None => y,
            BoundNorm::Batch { gamma, beta, running_mean, running_var } => match mode {
                Mode::Train => {
                    let n = (y.value().len() / shape[0]) as f64;
                    let mean = y.channel_sum().scale(1.0 / n);
                    let centered = y - mean.channel_expand(&shape);
                    let var = centered.square().channel_sum().scale(1.0 / n);
                    let inv_std = var.offset(BN_EPS).powf(-0.5);
                    let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                    stats.borrow_mut().push(BatchStats {
                        layer: index,
                        mean: mean.value().data().to_vec(),
                        var: var.value().data().iter().map(|v| v * unbiased).collect(),
                    });
                    centered * (inv_std * *gamma).channel_expand(&shape) + beta.channel_expand(&shape)
                }
                Mode::Eval => {
                    let g = y.graph();
                    let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                    let c = inv_std.len();
                    let scale = *gamma * g.constant(Tensor::from_parts(vec![c], inv_std));
                    let shift = *beta - scale * g.constant(Tensor::from_parts(vec![c], running_mean.clone()));
                    y * scale.channel_expand(&shape) + shift.channel_expand(&shape)
                }
            },
        };
        match self.activation {
            Activation::LeakyRelu => y.leaky_relu(LEAKY_SLOPE),
            Activation::Tanh => y.tanh(),
            Activation::Identity => y,
        }
    }
}

/// Role of a convolution stack within the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    /// Encoder trunk (spectral norm, LeakyReLU everywhere).
    Encoder,
    /// `G^0`: latent field to video (batch norm, Tanh output).
    Decoder,
    /// `G^n`, `n > 0`: video to residual (batch norm, Tanh output).
    Residual,
    /// `D^n`: video to a one-channel score map (spectral norm, linear output).
    Critic,
    /// A single linear convolution, used for the encoder's mean/log-variance heads.
    Head,
}

/// A dimension-preserving stack of [`ConvLayer`]s.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    pub role: Role,
    pub layers: Vec<ConvLayer>,
}

/// Kernel shape for an extent `k`, collapsed to 2D in image mode.
pub fn kernel_shape(k: usize, spatial_only: bool) -> [usize; 3] {
    if spatial_only {
        [1, k, k]
    } else {
        [k, k, k]
    }
}

impl ConvStack {
    /// Builds a stack of `blocks` layers mapping `cin` to `cout` channels through
    /// `width`-channel hidden layers.
    pub fn new(role: Role, cin: usize, width: usize, cout: usize, blocks: usize, kernel: [usize; 3], rng: &mut impl Rng) -> Self {
        let (norm, hidden_act, last_act) = match role {
            Role::Encoder => (NormKind::Spectral, Activation::LeakyRelu, Activation::LeakyRelu),
            Role::Decoder | Role::Residual => (NormKind::Batch, Activation::LeakyRelu, Activation::Tanh),
            Role::Critic => (NormKind::Spectral, Activation::LeakyRelu, Activation::Identity),
            Role::Head => (NormKind::None, Activation::Identity, Activation::Identity),
        };
        let layers = (0..blocks)
            .map(|i| {
                let last = i + 1 == blocks;
                let input = if i == 0 { cin } else { width };
                let output = if last { cout } else { width };
                ConvLayer::new(input, output, kernel, norm, if last { last_act } else { hidden_act }, rng)
            })
            .collect();
        Self { role, layers }
    }

    pub fn in_channels(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_channels())
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels())
    }

    /// Extent of input positions that influence one output position, per axis.
    pub fn receptive_field(&self) -> [usize; 3] {
        let mut r = [1, 1, 1];
        for layer in &self.layers {
            let k = layer.kernel();
            for a in 0..3 {
                r[a] += k[a] - 1;
            }
        }
        r
    }

    /// Same architecture (so weights can be copied between the two stacks).
    pub fn same_shape(&self, other: &ConvStack) -> bool {
        self.role == other.role
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.shape() == b.weight.shape() && a.norm.kind() == b.norm.kind() && a.activation == b.activation
            })
    }

    pub fn power_iteration(&mut self) {
        self.layers.iter_mut().for_each(ConvLayer::power_iteration);
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.named_tensors(&format!("layer{i}"), &mut out);
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.named_tensors_mut(&format!("layer{i}"), &mut out);
        }
        out
    }

    /// Trainable tensors, in the same order as [`BoundStack::params`].
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            layer.trainable_mut(&mut out);
        }
        out
    }

    /// Loads the stack's parameters into `g`. With `trainable`, the parameters are
    /// gradient-receiving leaves listed in [`BoundStack::params`].
    pub fn bind<'g>(&self, g: &'g Graph, mode: Mode, trainable: bool) -> BoundStack<'g> {
        let mut params = Vec::new();
        let layers = self.layers.iter().map(|l| l.bind(g, trainable, &mut params)).collect();
        BoundStack { layers, params, mode, stats: RefCell::new(Vec::new()) }
    }

    /// Folds recorded batch statistics into the running averages.
    pub fn absorb_stats(&mut self, stats: &[BatchStats]) {
        for s in stats {
            if let Norm::Batch { running_mean, running_var, .. } = &mut self.layers[s.layer].norm {
                for (r, m) in running_mean.data_mut().iter_mut().zip(&s.mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                }
                for (r, v) in running_var.data_mut().iter_mut().zip(&s.var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
            }
        }
    }

    /// Zeros every weight, bias and batch-norm affine term, so the stack outputs
    /// exactly zero in either mode.
    pub fn zero_weights(&mut self) {
        for layer in &mut self.layers {
            layer.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
            layer.bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
            if let Norm::Batch { gamma, beta, .. } = &mut layer.norm {
                gamma.data_mut().iter_mut().for_each(|v| *v = 0.0);
                beta.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Evaluates the stack on a `[C, T, H, W]` tensor in eval mode, outside any graph.
    pub fn eval(&self, x: &Tensor) -> Tensor {
        let g = Graph::new();
        let bound = self.bind(&g, Mode::Eval, false);
        let y = bound.forward(g.constant(x.clone()));
        y.value().as_ref().clone()
    }
}

/// A [`ConvStack`] whose parameters live in a graph.
pub struct BoundStack<'g> {
    layers: Vec<BoundLayer<'g>>,
    pub params: Vec<Var<'g>>,
    pub mode: Mode,
    stats: RefCell<Vec<BatchStats>>,
}

impl<'g> BoundStack<'g> {
    pub fn forward(&self, x: Var<'g>) -> Var<'g> {
        self.layers.iter().enumerate().fold(x, |h, (i, layer)| layer.forward(h, self.mode, i, &self.stats))
    }

    /// Batch statistics recorded by train-mode forwards so far.
    pub fn take_stats(&self) -> Vec<BatchStats> {
        std::mem::take(&mut self.stats.borrow_mut())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Rc<Tensor>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *w -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}
