//! Scale-by-scale training of the hierarchical model and its two recursions:
//! the deterministic reconstruction chain and random generation.
//!
//! Scales `0..=M` are patch-VAE scales: the encoder, `G^0` and the new `G^n` are
//! trained on reconstruction terms. Scales `M+1..=N` are adversarial: only `G^n`
//! and its critic `D^n` are trained, everything coarser stays frozen.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{kernel_shape, Adam, BoundStack, ConvStack, Mode, Role};
use crate::patchgan::{critic_loss_var, gan_scale_loss_var, generator_adv_var};
use crate::patchvae::{recon_var, sample_prior, standard_normal, vae_loss_var, BoundEncoder, Encoder};
use crate::resample::{downsample_map, resize_map, SeparableMap};
use crate::schedule::PyramidSchedule;
use crate::tensor::Tensor;
use crate::video::VideoTensor;

/// RNG stream used to initialize the encoder; scale `n` uses stream `n`.
pub const INIT_STREAM: u64 = u64::MAX;

/// Generator for scale `scale`: a fresh stream of the run seed, so every scale
/// starts from the same state whether or not training was resumed.
pub fn scale_rng(seed: u64, scale: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scale);
    rng
}

/// Loss components of one training iteration, summed over clips. Terms that do
/// not apply at a scale are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationLoss {
    /// Reconstruction of the scale being trained.
    pub recon: f64,
    /// Scale-0 reconstruction term (VAE scales above 0 only).
    pub base_recon: f64,
    pub kl: f64,
    /// Generator adversarial term `-mean D(fake)`.
    pub adversarial: f64,
    /// Critic loss of the iteration's last critic step.
    pub critic: f64,
    pub penalty: f64,
    /// Objective minimized by the generator side.
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScaleLog {
    pub scale: usize,
    pub noise_amp: f64,
    pub iterations: Vec<IterationLoss>,
}

impl ScaleLog {
    /// Mean reconstruction loss over the first and the last `window` iterations.
    pub fn recon_windows(&self, window: usize) -> (f64, f64) {
        let n = self.iterations.len();
        let w = window.min(n).max(1);
        let mean = |it: &[IterationLoss]| it.iter().map(|l| l.recon).sum::<f64>() / it.len().max(1) as f64;
        (mean(&self.iterations[..w.min(n)]), mean(&self.iterations[n.saturating_sub(w)..]))
    }
}

/// Guide resampled to the injection scale and the refined result.
#[derive(Debug, Clone, PartialEq)]
pub struct Injection {
    pub guide: Tensor,
    pub output: Tensor,
}

/// Every network and per-scale quantity of a (partially) trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: RunConfig,
    pub schedule: PyramidSchedule,
    pub image_channels: usize,
    pub encoder: Encoder,
    /// `G^0 ..`; one entry per initialized scale.
    pub generators: Vec<ConvStack>,
    /// `D^n` for adversarial scales, `None` for VAE scales.
    pub critics: Vec<Option<ConvStack>>,
    /// Noise amplitude per scale (zero for VAE scales).
    pub noise_amp: Vec<f64>,
    /// Number of fully trained scales; the next scale to train.
    pub trained: usize,
    pub logs: Vec<ScaleLog>,
}

/// Parts of the loss of VAE scale `n` for one clip.
pub struct ScaleVaeLoss<'g> {
    pub total: Var<'g>,
    pub recon_base: Var<'g>,
    pub kl: Var<'g>,
    /// Reconstruction error at scale `n`; `None` at scale 0.
    pub recon_top: Option<Var<'g>>,
}

/// Loss of VAE scale `n = chain.len()`: the scale-0 VAE loss plus, for `n > 0`,
/// the squared error of `x_bar^n` against `xn`, where `x_bar^k = up(x_bar^{k-1}) +
/// chain[k-1](up(x_bar^{k-1}))` starts from the reconstruction `G^0(z')` and
/// `maps[k-1]` upsamples scale `k - 1` to `k`.
#[allow(clippy::too_many_arguments)]
pub fn scale_vae_loss_var<'g>(
    encoder: &BoundEncoder<'g>,
    base: &BoundStack<'g>,
    chain: &[&BoundStack<'g>],
    maps: &[Rc<SeparableMap>],
    x0: Var<'g>,
    xn: Var<'g>,
    beta: f64,
    eps: Tensor,
) -> ScaleVaeLoss<'g> {
    assert_eq!(chain.len(), maps.len(), "one upsampling map per refinement stack");
    let (total, recon_base, kl, mut x) = vae_loss_var(encoder, base, x0, beta, eps);
    if chain.is_empty() {
        return ScaleVaeLoss { total, recon_base, kl, recon_top: None };
    }
    for (stack, map) in chain.iter().zip(maps) {
        let up = x.resample(Rc::clone(map));
        x = up + stack.forward(up);
    }
    let recon = recon_var(x, xn);
    ScaleVaeLoss { total: total + recon, recon_base, kl, recon_top: Some(recon) }
}

struct VaeOptimizers {
    encoder: Adam,
    base: Adam,
    top: Adam,
}

impl ModelState {
    pub fn new(config: RunConfig, schedule: PyramidSchedule, image_channels: usize) -> Result<Self> {
        config.validate()?;
        if schedule.len() != config.finest_scale + 1 {
            return Err(Error::Config(format!(
                "schedule has {} scales but the config asks for {}",
                schedule.len(),
                config.finest_scale + 1
            )));
        }
        if image_channels != 1 && image_channels != 3 {
            return Err(Error::Config(format!("image channels must be 1 or 3, got {image_channels}")));
        }
        let encoder = Encoder::new(&config, image_channels, &mut scale_rng(config.seed, INIT_STREAM));
        Ok(Self {
            config,
            schedule,
            image_channels,
            encoder,
            generators: Vec::new(),
            critics: Vec::new(),
            noise_amp: Vec::new(),
            trained: 0,
            logs: Vec::new(),
        })
    }

    pub fn finest(&self) -> usize {
        self.config.finest_scale
    }

    pub fn is_complete(&self) -> bool {
        self.trained == self.finest() + 1
    }

    /// `[T, H, W]` of scale `k`, optionally rescaled so that scale 0 has `shape`.
    pub fn scale_dims(&self, k: usize, shape: Option<[usize; 3]>) -> [usize; 3] {
        let dims = self.schedule.scale(k).dims();
        match shape {
            None => dims,
            Some(s) => {
                let base = self.schedule.scale(0).dims();
                std::array::from_fn(|a| ((dims[a] as f64 * s[a] as f64 / base[a] as f64).round() as usize).max(1))
            }
        }
    }

    /// Upsampling map from scale `k - 1` to scale `k`.
    pub fn up_map(&self, k: usize, shape: Option<[usize; 3]>) -> Rc<SeparableMap> {
        Rc::new(resize_map(self.scale_dims(k - 1, shape), self.scale_dims(k, shape)))
    }

    fn require_trained(&self, n: usize) -> Result<()> {
        if n >= self.trained {
            return Err(Error::State(format!("scale {n} requested but only {} scales are trained", self.trained)));
        }
        Ok(())
    }

    /// Downsampled targets `x^0 ..= x^N` of a source clip, as `[C, T, H, W]` tensors.
    pub fn pyramid(&self, clip: &VideoTensor) -> Result<Vec<Tensor>> {
        let [t, h, w, c] = clip.dims();
        if [t, h, w] != self.schedule.source_dims || c != self.image_channels {
            return Err(Error::Data(format!(
                "clip is {:?} but the model was built for {:?} with {} channels",
                clip.dims(),
                self.schedule.source_dims,
                self.image_channels
            )));
        }
        let x = clip.to_cthw();
        self.schedule.scales.iter().map(|s| Ok(downsample_map(x.dims3(), s)?.apply(&x))).collect()
    }

    /// Applies `x <- up(x) + G^k(up(x))` for `k = from+1 ..= to`.
    fn refine(&self, mut x: Tensor, from: usize, to: usize, shape: Option<[usize; 3]>) -> Tensor {
        for k in from + 1..=to {
            let up = self.up_map(k, shape).apply(&x);
            let residual = self.generators[k].eval(&up);
            x = up.zip_map(&residual, |a, b| a + b);
        }
        x
    }

    /// Deterministic chain from a latent sample field: `G^0(z)` refined up to scale `n`.
    fn chain_from_latent(&self, z: &Tensor, n: usize) -> Tensor {
        self.refine(self.generators[0].eval(z), 0, n, None)
    }

    /// `x_bar^n` with a reparameterized latent sample of `x0`'s posterior.
    pub fn reconstruct_chain(&self, x0: &Tensor, n: usize, rng: &mut impl Rng) -> Result<Tensor> {
        self.require_trained(n)?;
        let field = crate::patchvae::encode(&self.encoder, x0)?;
        let z = crate::patchvae::reparameterize(&field, rng);
        Ok(self.chain_from_latent(&z, n))
    }

    /// `x_bar^n` through the posterior mean: the deterministic reconstruction.
    pub fn reconstruct_mean(&self, x0: &Tensor, n: usize) -> Result<Tensor> {
        self.require_trained(n)?;
        let field = crate::patchvae::encode(&self.encoder, x0)?;
        Ok(self.chain_from_latent(&field.mu, n))
    }

    /// Random sample at scale `n`: prior latent, noise-free refinement through the
    /// VAE scales and noise-injected refinement above them. `shape` sets the
    /// latent field's `[T, H, W]`; all scales follow proportionally.
    pub fn generate_random(&self, n: usize, rng: &mut impl Rng, shape: Option<[usize; 3]>) -> Result<Tensor> {
        self.require_trained(n)?;
        if shape.is_some_and(|s| s.contains(&0)) {
            return Err(Error::Shape(format!("shape override {shape:?} has a zero axis")));
        }
        let z = sample_prior(self.encoder.latent_dim(), self.scale_dims(0, shape), rng)?;
        self.generate_from_latent(&z, n, rng, shape)
    }

    /// Random recursion from a given prior field `z` (`[latent_dim, T, H, W]`).
    pub fn generate_from_latent(&self, z: &Tensor, n: usize, rng: &mut impl Rng, shape: Option<[usize; 3]>) -> Result<Tensor> {
        self.require_trained(n)?;
        let expected = self.scale_dims(0, shape);
        if z.shape().len() != 4 || z.dims3() != expected || z.shape()[0] != self.encoder.latent_dim() {
            return Err(Error::Shape(format!("latent field {:?} does not match scale 0 {expected:?}", z.shape())));
        }
        let m = self.config.vae_scales;
        let mut x = self.refine(self.generators[0].eval(z), 0, n.min(m), shape);
        for k in m + 1..=n {
            let up = self.up_map(k, shape).apply(&x);
            x = self.noisy_step(&up, k, rng);
        }
        Ok(x)
    }

    /// `up + G^k(up + sigma_k * noise)`.
    fn noisy_step(&self, up: &Tensor, k: usize, rng: &mut impl Rng) -> Tensor {
        let noisy = self.with_noise(up, k, rng);
        let residual = self.generators[k].eval(&noisy);
        up.zip_map(&residual, |a, b| a + b)
    }

    fn with_noise(&self, up: &Tensor, k: usize, rng: &mut impl Rng) -> Tensor {
        let amp = self.noise_amp[k];
        let noise = standard_normal(up.shape(), rng);
        up.zip_map(&noise, |a, e| a + amp * e)
    }

    /// Resamples `guide` to scale `start - 1` and refines it noise-free up to `N`.
    pub fn inject(&self, guide: &Tensor, start: usize) -> Result<Injection> {
        if !self.is_complete() {
            return Err(Error::State("injection needs a fully trained model".into()));
        }
        if start == 0 || start > self.finest() {
            return Err(Error::State(format!("start scale must lie in 1..={}, got {start}", self.finest())));
        }
        if guide.shape().len() != 4 || guide.shape()[0] != self.image_channels || guide.is_empty() {
            return Err(Error::Shape(format!("guide {:?} does not have {} channels", guide.shape(), self.image_channels)));
        }
        let [_, gh, gw] = guide.dims3();
        let [_, sh, sw] = self.schedule.source_dims;
        let (guide_aspect, aspect) = (gw as f64 / gh as f64, sw as f64 / sh as f64);
        if (guide_aspect / aspect - 1.0).abs() > 0.01 {
            log::warn!("guide aspect ratio {guide_aspect:.3} differs from the training clip's {aspect:.3}; resampling anyway");
        }
        let small = resize_map(guide.dims3(), self.scale_dims(start - 1, None)).apply(guide);
        let output = self.refine(small.clone(), start - 1, self.finest(), None);
        Ok(Injection { guide: small, output })
    }

    /// Initializes the networks of scale `n` (warm-started from scale `n - 1` when
    /// the architectures match). Idempotent.
    pub fn prepare_scale(&mut self, n: usize) -> Result<()> {
        if n != self.trained || n > self.finest() {
            return Err(Error::State(format!("scale {n} cannot be prepared: {} scales trained", self.trained)));
        }
        if self.generators.len() > n {
            return Ok(());
        }
        let config = &self.config;
        let mut rng = scale_rng(config.seed, n as u64);
        let kernel = kernel_shape(config.generator_kernel(n), config.spatial_only);
        let c = self.image_channels;
        let generator = if n == 0 {
            ConvStack::new(Role::Decoder, config.latent_dim, config.channels, c, config.blocks, kernel, &mut rng)
        } else {
            let fresh = ConvStack::new(Role::Residual, c, config.channels, c, config.blocks, kernel, &mut rng);
            let prev = &self.generators[n - 1];
            if prev.same_shape(&fresh) {
                prev.clone()
            } else {
                fresh
            }
        };
        let critic = if config.is_vae_scale(n) {
            None
        } else {
            let fresh = ConvStack::new(Role::Critic, c, config.channels, 1, config.blocks, kernel_shape(config.kernel, config.spatial_only), &mut rng);
            Some(match &self.critics[n - 1] {
                Some(prev) if prev.same_shape(&fresh) => prev.clone(),
                _ => fresh,
            })
        };
        self.generators.push(generator);
        self.critics.push(critic);
        self.noise_amp.push(0.0);
        Ok(())
    }

    /// Trains all remaining scales, calling `on_scale` after each one.
    pub fn train_all(&mut self, clips: &[VideoTensor], mut on_scale: impl FnMut(&ModelState) -> Result<()>) -> Result<()> {
        while !self.is_complete() {
            self.train_scale(clips, self.trained)?;
            on_scale(self)?;
        }
        Ok(())
    }

    /// Trains scale `n` (the next untrained scale) on the sum of per-clip losses.
    pub fn train_scale(&mut self, clips: &[VideoTensor], n: usize) -> Result<()> {
        if clips.is_empty() {
            return Err(Error::Data("no training clips".into()));
        }
        self.prepare_scale(n)?;
        let targets = clips.iter().map(|c| self.pyramid(c)).collect::<Result<Vec<_>>>()?;
        let mut rng = scale_rng(self.config.seed, n as u64);
        // skip the draws used for initialization so training noise is independent of it
        rng.set_word_pos(1 << 40);
        let log = if self.config.is_vae_scale(n) {
            self.train_vae_scale(n, &targets, &mut rng)?
        } else {
            self.train_gan_scale(n, &targets, &mut rng)?
        };
        self.logs.push(log);
        self.trained = n + 1;
        Ok(())
    }

    fn check_divergence(&self, n: usize, iteration: usize, loss: f64, elements: usize) -> Result<()> {
        let per_voxel = loss / elements as f64;
        if !loss.is_finite() || per_voxel.abs() > self.config.divergence_limit {
            return Err(Error::Divergence {
                scale: n,
                iteration,
                detail: format!("loss {loss} ({per_voxel} per element, limit {})", self.config.divergence_limit),
            });
        }
        Ok(())
    }

    fn train_vae_scale(&mut self, n: usize, targets: &[Vec<Tensor>], rng: &mut ChaCha8Rng) -> Result<ScaleLog> {
        let c = &self.config;
        let decayed = c.lr * c.lr_decay.powi(n as i32);
        let mut opts = VaeOptimizers {
            encoder: Adam::new(decayed, c.adam_beta1, c.adam_beta2),
            base: Adam::new(decayed, c.adam_beta1, c.adam_beta2),
            top: Adam::new(c.lr, c.adam_beta1, c.adam_beta2),
        };
        let mut log = ScaleLog { scale: n, noise_amp: 0.0, iterations: Vec::with_capacity(c.iters_per_scale) };
        for it in 0..self.config.iters_per_scale {
            log.iterations.push(self.vae_step(n, it, targets, &mut opts, rng)?);
        }
        Ok(log)
    }

    fn vae_step(&mut self, n: usize, it: usize, targets: &[Vec<Tensor>], opts: &mut VaeOptimizers, rng: &mut ChaCha8Rng) -> Result<IterationLoss> {
        self.encoder.power_iteration();
        let g = Graph::new();
        let enc = self.encoder.bind(&g, Mode::Train, true);
        let base = self.generators[0].bind(&g, Mode::Train, true);
        let frozen: Vec<BoundStack> = (1..n).map(|k| self.generators[k].bind(&g, Mode::Eval, false)).collect();
        let top = (n > 0).then(|| self.generators[n].bind(&g, Mode::Train, true));
        let maps: Vec<_> = (1..=n).map(|k| self.up_map(k, None)).collect();
        let latent_dim = self.encoder.latent_dim();

        let mut total: Option<Var> = None;
        let mut out = IterationLoss::default();
        let mut elements = 0;
        for pyr in targets {
            let x0 = g.constant(pyr[0].clone());
            let [t, h, w] = pyr[0].dims3();
            let eps = standard_normal(&[latent_dim, t, h, w], rng);
            let mut chain: Vec<&BoundStack> = frozen.iter().collect();
            chain.extend(top.as_ref());
            let xn = g.constant(pyr[n].clone());
            let parts = scale_vae_loss_var(&enc, &base, &chain, &maps, x0, xn, self.config.beta_vae, eps);
            out.kl += parts.kl.item();
            elements += pyr[0].len();
            if let Some(recon) = parts.recon_top {
                out.recon += recon.item();
                out.base_recon += parts.recon_base.item();
                elements += pyr[n].len();
            } else {
                out.recon += parts.recon_base.item();
            }
            let loss = parts.total;
            total = Some(match total {
                Some(acc) => acc + loss,
                None => loss,
            });
        }
        let total = total.expect("at least one clip");
        out.total = total.item();
        self.check_divergence(n, it, out.total, elements)?;

        let enc_params = enc.params();
        let base_params = base.params.clone();
        let top_params = top.as_ref().map(|t| t.params.clone()).unwrap_or_default();
        let all: Vec<Var> = enc_params.iter().chain(&base_params).chain(&top_params).copied().collect();
        let grads: Vec<Rc<Tensor>> = g.grad(total, &all).iter().map(|v| v.value()).collect();
        let (ge, rest) = grads.split_at(enc_params.len());
        let (gb, gt) = rest.split_at(base_params.len());
        let base_stats = base.take_stats();
        let top_stats = top.as_ref().map(|t| t.take_stats()).unwrap_or_default();

        opts.encoder.step(self.encoder.trainable_mut(), ge);
        opts.base.step(self.generators[0].trainable_mut(), gb);
        self.generators[0].absorb_stats(&base_stats);
        if n > 0 {
            opts.top.step(self.generators[n].trainable_mut(), gt);
            self.generators[n].absorb_stats(&top_stats);
        }
        Ok(out)
    }

    fn train_gan_scale(&mut self, n: usize, targets: &[Vec<Tensor>], rng: &mut ChaCha8Rng) -> Result<ScaleLog> {
        // The frozen coarse model makes the deterministic path a constant.
        let map = self.up_map(n, None);
        let mut det_up = Vec::with_capacity(targets.len());
        let (mut sq, mut count) = (0.0, 0usize);
        for pyr in targets {
            let prev = self.chain_from_latent(&crate::patchvae::encode(&self.encoder, &pyr[0])?.mu, n - 1);
            let up = map.apply(&prev);
            sq += crate::patchvae::recon_loss(&up, &pyr[n]);
            count += up.len();
            det_up.push(up);
        }
        let amp = (sq / count as f64).sqrt();
        self.noise_amp[n] = amp;

        let c = &self.config;
        let mut opt_g = Adam::new(c.lr, c.adam_beta1, c.adam_beta2);
        let mut opt_d = Adam::new(c.lr, c.adam_beta1, c.adam_beta2);
        let mut log = ScaleLog { scale: n, noise_amp: amp, iterations: Vec::with_capacity(c.iters_per_scale) };
        for it in 0..self.config.iters_per_scale {
            let mut out = IterationLoss::default();
            for _ in 0..self.config.critic_steps {
                let (critic, penalty) = self.critic_step(n, targets, &mut opt_d, rng)?;
                out.critic = critic;
                out.penalty = penalty;
            }
            let (total, recon, adv) = self.generator_step(n, targets, &det_up, &mut opt_g, rng)?;
            out.total = total;
            out.recon = recon;
            out.adversarial = adv;
            let elements: usize = targets.iter().map(|p| p[n].len()).sum();
            self.check_divergence(n, it, out.total, elements)?;
            self.check_divergence(n, it, out.critic, elements)?;
            log.iterations.push(out);
        }
        Ok(log)
    }

    /// Random-path input `(up, up + noise)` for scale `n` from the frozen coarse model.
    fn random_input(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)> {
        let prev = self.generate_unchecked(n - 1, rng)?;
        let up = self.up_map(n, None).apply(&prev);
        let noisy = self.with_noise(&up, n, rng);
        Ok((up, noisy))
    }

    fn generate_unchecked(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let z = sample_prior(self.encoder.latent_dim(), self.scale_dims(0, None), rng)?;
        let m = self.config.vae_scales;
        let mut x = self.refine(self.generators[0].eval(&z), 0, n.min(m), None);
        for k in m + 1..=n {
            let up = self.up_map(k, None).apply(&x);
            x = self.noisy_step(&up, k, rng);
        }
        Ok(x)
    }

    /// One critic update; returns the critic loss and its penalty part.
    pub(crate) fn critic_step(&mut self, n: usize, targets: &[Vec<Tensor>], opt: &mut Adam, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
        let critic = self.critics[n].as_mut().expect("adversarial scale has a critic");
        critic.power_iteration();
        let critic = self.critics[n].as_ref().expect("adversarial scale has a critic");
        let g = Graph::new();
        let d = critic.bind(&g, Mode::Train, true);
        let gen = self.generators[n].bind(&g, Mode::Train, false);
        let score = |x| d.forward(x);
        let mut total: Option<Var> = None;
        let mut penalty = 0.0;
        for pyr in targets {
            let (up, noisy) = self.random_input(n, rng)?;
            let fake = g.constant(up) + gen.forward(g.constant(noisy));
            let eps: f64 = rng.random();
            let loss = critic_loss_var(&score, g.constant(pyr[n].clone()), fake, eps, self.config.gp_weight);
            penalty += loss.penalty.item();
            total = Some(match total {
                Some(acc) => acc + loss.total,
                None => loss.total,
            });
        }
        let total = total.expect("at least one clip");
        let grads: Vec<Rc<Tensor>> = g.grad(total, &d.params).iter().map(|v| v.value()).collect();
        let value = total.item();
        opt.step(self.critics[n].as_mut().expect("critic").trainable_mut(), &grads);
        Ok((value, penalty))
    }

    /// One generator update; returns `(total, recon, adversarial)`.
    pub(crate) fn generator_step(
        &mut self,
        n: usize,
        targets: &[Vec<Tensor>],
        det_up: &[Tensor],
        opt: &mut Adam,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, f64, f64)> {
        let g = Graph::new();
        let critic = self.critics[n].as_ref().expect("adversarial scale has a critic");
        let d = critic.bind(&g, Mode::Eval, false);
        let gen = self.generators[n].bind(&g, Mode::Train, true);
        let score = |x| d.forward(x);
        let mut total: Option<Var> = None;
        let (mut recon_sum, mut adv_sum) = (0.0, 0.0);
        for (pyr, up_det) in targets.iter().zip(det_up) {
            let (up, noisy) = self.random_input(n, rng)?;
            let fake = g.constant(up) + gen.forward(g.constant(noisy));
            let adv = generator_adv_var(&score, fake);
            let up_det = g.constant(up_det.clone());
            let x_bar = up_det + gen.forward(up_det);
            let (loss, recon) = gan_scale_loss_var(x_bar, g.constant(pyr[n].clone()), adv, self.config.beta_adv);
            recon_sum += recon.item();
            adv_sum += adv.item();
            total = Some(match total {
                Some(acc) => acc + loss,
                None => loss,
            });
        }
        let total = total.expect("at least one clip");
        let grads: Vec<Rc<Tensor>> = g.grad(total, &gen.params).iter().map(|v| v.value()).collect();
        let stats = gen.take_stats();
        let value = total.item();
        opt.step(self.generators[n].trainable_mut(), &grads);
        self.generators[n].absorb_stats(&stats);
        Ok((value, recon_sum, adv_sum))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::build_schedule;

    pub(crate) fn tiny_config() -> RunConfig {
        RunConfig {
            finest_scale: 3,
            vae_scales: 1,
            base_height: 4,
            channels: 4,
            latent_dim: 3,
            blocks: 2,
            iters_per_scale: 3,
            critic_steps: 1,
            strides: vec![1, 2],
            ..Default::default()
        }
    }

    fn clip(dims: [usize; 4]) -> VideoTensor {
        VideoTensor::from_fn(dims, 24.0, |t, y, x, c| ((t + 2 * y + 3 * x + c) as f64 * 0.37).sin() * 0.8).unwrap()
    }

    fn state(config: RunConfig) -> (ModelState, VideoTensor) {
        let v = clip([3, 8, 10, 3]);
        let schedule = build_schedule(&config, [3, 8, 10]).unwrap();
        (ModelState::new(config, schedule, 3).unwrap(), v)
    }

    #[test]
    fn zero_residuals_give_iterated_upsampling() {
        let (mut s, v) = state(tiny_config());
        s.train_all(std::slice::from_ref(&v), |_| Ok(())).unwrap();
        for k in 1..s.generators.len() {
            s.generators[k].zero_weights();
        }
        let x0 = &s.pyramid(&v).unwrap()[0];
        let mut expected = s.reconstruct_mean(x0, 0).unwrap();
        for n in 1..=3 {
            expected = s.up_map(n, None).apply(&expected);
            assert_eq!(s.reconstruct_mean(x0, n).unwrap(), expected);
        }
    }

    #[test]
    fn vae_scales_inject_no_noise() {
        let (mut s, v) = state(RunConfig { vae_scales: 2, ..tiny_config() });
        s.train_all(std::slice::from_ref(&v), |_| Ok(())).unwrap();
        let z = sample_prior(3, s.scale_dims(0, None), &mut scale_rng(5, 0)).unwrap();
        for n in 0..=2 {
            let a = s.generate_from_latent(&z, n, &mut scale_rng(1, 0), None).unwrap();
            let b = s.generate_from_latent(&z, n, &mut scale_rng(2, 0), None).unwrap();
            assert_eq!(a, b, "scale {n}");
        }
        let a = s.generate_from_latent(&z, 3, &mut scale_rng(1, 0), None).unwrap();
        let b = s.generate_from_latent(&z, 3, &mut scale_rng(2, 0), None).unwrap();
        assert_ne!(a, b);
        assert_eq!(s.generate_random(3, &mut scale_rng(9, 0), None).unwrap(), s.generate_random(3, &mut scale_rng(9, 0), None).unwrap());
    }

    #[test]
    fn shape_override_scales_every_level() {
        let (mut s, v) = state(tiny_config());
        s.train_all(std::slice::from_ref(&v), |_| Ok(())).unwrap();
        let [t, h, w] = s.scale_dims(0, None);
        for n in 0..=3 {
            let x = s.generate_random(n, &mut scale_rng(0, 0), Some([t, 2 * h, 2 * w])).unwrap();
            let [_, _, bh, bw] = s.generate_random(n, &mut scale_rng(0, 0), None).unwrap().shape().try_into().unwrap();
            assert_eq!(&x.shape()[2..], &[2 * bh, 2 * bw]);
        }
    }

    #[test]
    fn untrained_scales_are_state_errors() {
        let (s, v) = state(tiny_config());
        let x0 = clip([2, 4, 5, 3]).to_cthw();
        assert!(matches!(s.reconstruct_mean(&x0, 0), Err(Error::State(_))));
        assert!(matches!(s.generate_random(0, &mut scale_rng(0, 0), None), Err(Error::State(_))));
        assert!(matches!(s.inject(&v.to_cthw(), 1), Err(Error::State(_))));
    }

    #[test]
    fn critic_and_generator_steps_touch_only_their_network() {
        let (mut s, v) = state(tiny_config());
        let clips = std::slice::from_ref(&v);
        for n in 0..2 {
            s.train_scale(clips, n).unwrap();
        }
        s.prepare_scale(2).unwrap();
        s.noise_amp[2] = 0.1;
        let targets = vec![s.pyramid(&v).unwrap()];
        let det_up = vec![s.up_map(2, None).apply(&s.reconstruct_mean(&targets[0][0], 1).unwrap())];
        let mut rng = scale_rng(0, 2);
        let g_before = s.generators[2].clone();
        let d_before = s.critics[2].clone();
        s.critic_step(2, &targets, &mut Adam::new(1e-3, 0.9, 0.999), &mut rng).unwrap();
        assert_eq!(s.generators[2], g_before);
        assert_ne!(s.critics[2], d_before);
        let d_before = s.critics[2].clone();
        s.generator_step(2, &targets, &det_up, &mut Adam::new(1e-3, 0.9, 0.999), &mut rng).unwrap();
        assert_eq!(s.critics[2], d_before);
        assert_ne!(s.generators[2], g_before);
    }

    #[test]
    fn divergence_aborts_the_scale() {
        let (mut s, v) = state(RunConfig { divergence_limit: 1e-12, ..tiny_config() });
        match s.train_scale(std::slice::from_ref(&v), 0) {
            Err(Error::Divergence { scale: 0, iteration: 0, .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn self_injection_and_single_step() {
        let (mut s, v) = state(tiny_config());
        s.train_all(std::slice::from_ref(&v), |_| Ok(())).unwrap();
        let guide = v.to_cthw();
        let last = s.inject(&guide, 3).unwrap();
        let up = s.up_map(3, None).apply(&last.guide);
        let expected = up.zip_map(&s.generators[3].eval(&up), |a, b| a + b);
        assert_eq!(last.output, expected);
        assert_eq!(s.inject(&guide, 1).unwrap().output.shape(), &[3, 3, 8, 10]);
        assert!(s.inject(&guide, 0).is_err());
        assert!(s.inject(&guide, 4).is_err());
    }
}
