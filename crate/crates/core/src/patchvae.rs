//! The single-sample patch-VAE.
//!
//! A fully convolutional encoder maps the coarsest sample `x^0` to a latent field
//! with one diagonal Gaussian per spatio-temporal position; each position encodes
//! the patch under its receptive field. The decoder `G^0` is fully convolutional
//! too, so overlapping generative fields stay consistent.
//!
//! Latent fields use the channel-first `[latent_dim, T, H, W]` layout.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Graph, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{kernel_shape, BatchStats, BoundStack, ConvStack, Mode, Role};
use crate::tensor::Tensor;

pub const LOG_VAR_MIN: f64 = -20.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// Per-position posterior parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentField {
    pub mu: Tensor,
    pub log_var: Tensor,
}

impl LatentField {
    pub fn new(mu: Tensor, log_var: Tensor) -> Result<Self> {
        if mu.shape() != log_var.shape() || mu.shape().len() != 4 {
            return Err(Error::Shape(format!("latent field shapes {:?} / {:?}", mu.shape(), log_var.shape())));
        }
        Ok(Self { mu, log_var })
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.shape()[0]
    }

    /// `[T, H, W]` of the field.
    pub fn dims(&self) -> [usize; 3] {
        self.mu.dims3()
    }
}

/// Encoder trunk plus the mean and log-variance heads.
///
/// The trunk has `blocks - 1` layers and each head is one more convolution, so
/// the mean field sees exactly the receptive field of a `blocks`-layer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub trunk: ConvStack,
    pub mu_head: ConvStack,
    pub log_var_head: ConvStack,
}

impl Encoder {
    pub fn new(config: &RunConfig, image_channels: usize, rng: &mut impl Rng) -> Self {
        let kernel = kernel_shape(config.encoder_kernel(), config.spatial_only);
        let trunk_blocks = config.blocks - 1;
        let trunk = ConvStack::new(Role::Encoder, image_channels, config.channels, config.channels, trunk_blocks, kernel, rng);
        let head_in = if trunk_blocks == 0 { image_channels } else { config.channels };
        let mu_head = ConvStack::new(Role::Head, head_in, head_in, config.latent_dim, 1, kernel, rng);
        let log_var_head = ConvStack::new(Role::Head, head_in, head_in, config.latent_dim, 1, kernel, rng);
        Self { trunk, mu_head, log_var_head }
    }

    pub fn latent_dim(&self) -> usize {
        self.mu_head.out_channels()
    }

    pub fn receptive_field(&self) -> [usize; 3] {
        let t = self.trunk.receptive_field();
        let h = self.mu_head.receptive_field();
        [t[0] + h[0] - 1, t[1] + h[1] - 1, t[2] + h[2] - 1]
    }

    pub fn power_iteration(&mut self) {
        self.trunk.power_iteration();
    }

    pub fn bind<'g>(&self, g: &'g Graph, mode: Mode, trainable: bool) -> BoundEncoder<'g> {
        BoundEncoder {
            trunk: self.trunk.bind(g, mode, trainable),
            mu_head: self.mu_head.bind(g, mode, trainable),
            log_var_head: self.log_var_head.bind(g, mode, trainable),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, stack) in [("trunk", &self.trunk), ("mu", &self.mu_head), ("log_var", &self.log_var_head)] {
            out.extend(stack.named_tensors().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (prefix, stack) in [("trunk", &mut self.trunk), ("mu", &mut self.mu_head), ("log_var", &mut self.log_var_head)] {
            out.extend(stack.named_tensors_mut().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        out
    }

    /// Trainable tensors in [`BoundEncoder::params`] order.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.trunk.trainable_mut();
        out.extend(self.mu_head.trainable_mut());
        out.extend(self.log_var_head.trainable_mut());
        out
    }

    pub fn zero_weights(&mut self) {
        self.trunk.zero_weights();
        self.mu_head.zero_weights();
        self.log_var_head.zero_weights();
    }
}

pub struct BoundEncoder<'g> {
    trunk: BoundStack<'g>,
    mu_head: BoundStack<'g>,
    log_var_head: BoundStack<'g>,
}

impl<'g> BoundEncoder<'g> {
    /// Mean and clamped log-variance fields.
    pub fn forward(&self, x: Var<'g>) -> (Var<'g>, Var<'g>) {
        let h = self.trunk.forward(x);
        let mu = self.mu_head.forward(h);
        let log_var = self.log_var_head.forward(h).clamp(LOG_VAR_MIN, LOG_VAR_MAX);
        (mu, log_var)
    }

    pub fn params(&self) -> Vec<Var<'g>> {
        let mut p = self.trunk.params.clone();
        p.extend(self.mu_head.params.iter().copied());
        p.extend(self.log_var_head.params.iter().copied());
        p
    }

    pub fn take_stats(&self) -> Vec<BatchStats> {
        // the encoder has no batch-norm layers
        Vec::new()
    }
}

fn check_input(x: &Tensor) -> Result<()> {
    if x.shape().len() != 4 || x.shape().contains(&0) {
        return Err(Error::Shape(format!("expected a non-empty [C, T, H, W] tensor, got {:?}", x.shape())));
    }
    Ok(())
}

/// Posterior field of `x0` (a `[C, T, H, W]` tensor), using eval-mode networks.
pub fn encode(encoder: &Encoder, x0: &Tensor) -> Result<LatentField> {
    check_input(x0)?;
    let expected = encoder.trunk.layers.first().unwrap_or(&encoder.mu_head.layers[0]).in_channels();
    if x0.shape()[0] != expected {
        return Err(Error::Shape(format!("encoder expects {expected} channels, got {}", x0.shape()[0])));
    }
    let g = Graph::new();
    let (mu, log_var) = encoder.bind(&g, Mode::Eval, false).forward(g.constant(x0.clone()));
    LatentField::new(mu.value().as_ref().clone(), log_var.value().as_ref().clone())
}

/// Standard-normal tensor of `shape`, filled in row-major order from `rng`.
pub fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
}

/// `z' = mu + exp(log_var / 2) * eps` in a graph, for a fixed noise draw `eps`.
pub fn reparameterize_var<'g>(mu: Var<'g>, log_var: Var<'g>, eps: Tensor) -> Var<'g> {
    let eps = mu.graph().constant(eps);
    mu + log_var.scale(0.5).exp() * eps
}

pub fn reparameterize(field: &LatentField, rng: &mut impl Rng) -> Tensor {
    let eps = standard_normal(field.mu.shape(), rng);
    let sd = field.log_var.map(|lv| (0.5 * lv).exp());
    let noise = sd.zip_map(&eps, |s, e| s * e);
    field.mu.zip_map(&noise, |m, n| m + n)
}

/// `0.5 * sum(mu^2 + exp(log_var) - log_var - 1)` in a graph.
pub fn kl_var<'g>(mu: Var<'g>, log_var: Var<'g>) -> Var<'g> {
    (mu.square() + log_var.exp() - log_var).offset(-1.0).sum().scale(0.5)
}

/// Closed-form `KL[N(mu, sigma^2) || N(0, I)]` summed over positions and latent dims.
pub fn kl_loss(field: &LatentField) -> Result<f64> {
    if !field.mu.all_finite() || !field.log_var.all_finite() {
        return Err(Error::Loss("latent field has non-finite entries".into()));
    }
    Ok(field
        .mu
        .data()
        .iter()
        .zip(field.log_var.data())
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - lv - 1.0))
        .sum())
}

/// Reconstruction term: squared Euclidean distance, summed over every element.
pub fn recon_var<'g>(output: Var<'g>, target: Var<'g>) -> Var<'g> {
    (output - target).square().sum()
}

pub fn recon_loss(output: &Tensor, target: &Tensor) -> f64 {
    output.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Applies `G^0` (eval mode) to a latent sample field.
pub fn decode(decoder: &ConvStack, z: &Tensor) -> Result<Tensor> {
    check_input(z)?;
    if z.shape()[0] != decoder.in_channels() {
        return Err(Error::Shape(format!("decoder expects {} latent channels, got {}", decoder.in_channels(), z.shape()[0])));
    }
    Ok(decoder.eval(z))
}

/// i.i.d. standard-normal latent field of `[latent_dim, T, H, W]`.
pub fn sample_prior(latent_dim: usize, dims: [usize; 3], rng: &mut impl Rng) -> Result<Tensor> {
    if latent_dim == 0 || dims.contains(&0) {
        return Err(Error::Shape(format!("prior field dims must be positive, got {latent_dim} x {dims:?}")));
    }
    Ok(standard_normal(&[latent_dim, dims[0], dims[1], dims[2]], rng))
}

/// Loss value with its components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeLoss {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Graph form of the single-scale patch-VAE loss for one sample: returns
/// `(recon + beta * kl, recon, kl)` and the reconstruction `G^0(z')`.
pub fn vae_loss_var<'g>(
    encoder: &BoundEncoder<'g>,
    decoder: &BoundStack<'g>,
    x0: Var<'g>,
    beta: f64,
    eps: Tensor,
) -> (Var<'g>, Var<'g>, Var<'g>, Var<'g>) {
    let (mu, log_var) = encoder.forward(x0);
    let z = reparameterize_var(mu, log_var, eps);
    let recon_x = decoder.forward(z);
    let recon = recon_var(recon_x, x0);
    let kl = kl_var(mu, log_var);
    (recon + kl.scale(beta), recon, kl, recon_x)
}

/// The patch-VAE loss `||x0 - G^0(z')||^2 + beta * KL` summed over `clips`, with
/// train-mode networks and noise drawn from `rng` in clip order.
pub fn vae_loss(encoder: &Encoder, decoder: &ConvStack, clips: &[Tensor], beta: f64, rng: &mut impl Rng) -> Result<VaeLoss> {
    let g = Graph::new();
    let enc = encoder.bind(&g, Mode::Train, false);
    let dec = decoder.bind(&g, Mode::Train, false);
    let mut out = VaeLoss { total: 0.0, recon: 0.0, kl: 0.0 };
    for x0 in clips {
        check_input(x0)?;
        let [t, h, w] = x0.dims3();
        let eps = standard_normal(&[encoder.latent_dim(), t, h, w], rng);
        let (total, recon, kl, _) = vae_loss_var(&enc, &dec, g.constant(x0.clone()), beta, eps);
        out.total += total.item();
        out.recon += recon.item();
        out.kl += kl.item();
    }
    if !out.total.is_finite() {
        return Err(Error::Loss(format!("non-finite VAE loss {out:?}")));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> RunConfig {
        RunConfig { channels: 4, latent_dim: 3, blocks: 5, ..Default::default() }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_encoder_gives_standard_field() {
        let mut enc = Encoder::new(&small_config(), 3, &mut rng(0));
        enc.zero_weights();
        let f = encode(&enc, &standard_normal(&[3, 2, 4, 5], &mut rng(1))).unwrap();
        assert!(f.mu.data().iter().all(|&v| v == 0.0));
        assert!(f.log_var.data().iter().all(|&v| v == 0.0));
        assert_eq!(kl_loss(&f).unwrap(), 0.0);
    }

    #[test]
    fn encoder_shape_and_receptive_field() {
        let config = RunConfig { channels: 8, latent_dim: 128, ..Default::default() };
        let enc = Encoder::new(&config, 3, &mut rng(0));
        assert_eq!(enc.receptive_field(), [11, 11, 11]);
        let f = encode(&enc, &Tensor::zeros(&[3, 4, 8, 10])).unwrap();
        assert_eq!(f.mu.shape(), &[128, 4, 8, 10]);
        assert!(encode(&enc, &Tensor::zeros(&[1, 4, 8, 10])).is_err());
    }

    #[test]
    fn kl_unit_cases() {
        let one = |v: f64, lv: f64| LatentField::new(Tensor::full(&[1, 1, 1, 1], v), Tensor::full(&[1, 1, 1, 1], lv)).unwrap();
        assert_eq!(kl_loss(&one(0.0, 0.0)).unwrap(), 0.0);
        assert!((kl_loss(&one(1.0, 0.0)).unwrap() - 0.5).abs() < 1e-12);
        assert!(kl_loss(&one(f64::NAN, 0.0)).is_err());
    }

    #[test]
    fn reparameterize_cases() {
        let mu = Tensor::zeros(&[2, 1, 2, 2]);
        let field = LatentField::new(mu.clone(), Tensor::zeros(&[2, 1, 2, 2])).unwrap();
        let z = reparameterize(&field, &mut rng(5));
        assert_eq!(z, standard_normal(&[2, 1, 2, 2], &mut rng(5)));

        let shifted = LatentField::new(Tensor::full(&[2, 1, 2, 2], 0.7), Tensor::full(&[2, 1, 2, 2], LOG_VAR_MIN)).unwrap();
        let z = reparameterize(&shifted, &mut rng(5));
        assert!(z.data().iter().all(|v| (v - 0.7).abs() < 1e-3));
    }

    #[test]
    fn reparameterized_mean_converges() {
        let n = 100_000;
        let field = LatentField::new(Tensor::full(&[1, 1, 1, n], 0.3), Tensor::full(&[1, 1, 1, n], 2.0_f64.ln())).unwrap();
        let z = reparameterize(&field, &mut rng(9));
        let sd = 2.0_f64.sqrt();
        assert!((z.mean() - 0.3).abs() < 3.0 * sd / (n as f64).sqrt());
    }

    #[test]
    fn prior_statistics() {
        let z = sample_prior(1, [1, 100, 1000], &mut rng(2)).unwrap();
        let mean = z.mean();
        let var = z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.len() as f64;
        assert!((0.98..=1.02).contains(&var), "{var}");
        assert_eq!(z, sample_prior(1, [1, 100, 1000], &mut rng(2)).unwrap());
        assert!(sample_prior(0, [1, 1, 1], &mut rng(2)).is_err());
    }

    #[test]
    fn zero_decoder_outputs_zero() {
        let mut dec = ConvStack::new(Role::Decoder, 3, 4, 3, 5, [3, 3, 3], &mut rng(0));
        dec.zero_weights();
        let out = decode(&dec, &standard_normal(&[3, 2, 3, 3], &mut rng(1))).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(decode(&dec, &Tensor::zeros(&[2, 2, 3, 3])).is_err());
    }

    #[test]
    fn beta_zero_is_pure_reconstruction_and_clips_sum() {
        let config = small_config();
        let enc = Encoder::new(&config, 1, &mut rng(0));
        let dec = ConvStack::new(Role::Decoder, 3, 4, 1, 5, [3, 3, 3], &mut rng(1));
        let x = standard_normal(&[1, 2, 4, 4], &mut rng(2)).map(|v| v.tanh());
        let l = vae_loss(&enc, &dec, std::slice::from_ref(&x), 0.0, &mut rng(3)).unwrap();
        assert_eq!(l.total, l.recon);
        let single = vae_loss(&enc, &dec, std::slice::from_ref(&x), 0.1, &mut rng(3)).unwrap();
        let double = vae_loss(&enc, &dec, &[x.clone(), x.clone()], 0.1, &mut rng(3)).unwrap();
        // the second clip draws different noise, so compare the KL (noise-free) exactly
        assert!((double.kl - 2.0 * single.kl).abs() < 1e-9 * single.kl.abs().max(1.0));
    }
}
