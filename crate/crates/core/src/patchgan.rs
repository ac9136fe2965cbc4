//! Patch critic and WGAN-GP losses for the adversarial scales.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{ConvStack, Mode};
use crate::patchvae::recon_var;
use crate::tensor::Tensor;

/// Keeps the gradient-norm square root differentiable at zero.
const NORM_FLOOR: f64 = 1e-12;

fn check_pair(real: &Tensor, fake: &Tensor) -> Result<()> {
    if real.shape() != fake.shape() {
        return Err(Error::Shape(format!("real {:?} and fake {:?} differ", real.shape(), fake.shape())));
    }
    if real.shape().len() != 4 || real.is_empty() {
        return Err(Error::Shape(format!("expected a non-empty [C, T, H, W] tensor, got {:?}", real.shape())));
    }
    Ok(())
}

/// One-channel score map of the same `[T, H, W]` as `x`, in eval mode.
pub fn critic_forward(critic: &ConvStack, x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 4 || x.is_empty() {
        return Err(Error::Shape(format!("expected a non-empty [C, T, H, W] tensor, got {:?}", x.shape())));
    }
    if x.shape()[0] != critic.in_channels() {
        return Err(Error::Shape(format!("critic expects {} channels, got {}", critic.in_channels(), x.shape()[0])));
    }
    Ok(critic.eval(x))
}

/// Penalty `weight * mean_p (||d sum(D(x_hat)) / d x_hat (p)|| - 1)^2` at the interpolate
/// `x_hat = eps * real + (1 - eps) * fake`, where the norm runs over the channels
/// of each position `p`. The result stays differentiable in the critic's parameters.
pub fn gradient_penalty_var<'g>(
    critic: &dyn Fn(Var<'g>) -> Var<'g>,
    real: Var<'g>,
    fake: Var<'g>,
    eps: f64,
    weight: f64,
) -> Var<'g> {
    let g = real.graph();
    // a fresh gradient-receiving leaf: the penalty never flows back into real or fake
    let x_hat = g.param(real.value().zip_map(&fake.value(), |r, f| eps * r + (1.0 - eps) * f));
    let score = critic(x_hat).sum();
    let grad = g.grad(score, &[x_hat])[0];
    let norm = grad.square().reduce_channels().offset(NORM_FLOOR).sqrt();
    norm.offset(-1.0).square().mean().scale(weight)
}

/// Evaluates the gradient penalty of an eval-mode critic with `eps ~ U[0, 1)` from `rng`.
pub fn gradient_penalty(critic: &ConvStack, real: &Tensor, fake: &Tensor, weight: f64, rng: &mut impl Rng) -> Result<f64> {
    check_pair(real, fake)?;
    let eps: f64 = rng.random();
    let g = Graph::new();
    let d = critic.bind(&g, Mode::Eval, false);
    let p = gradient_penalty_var(&|x| d.forward(x), g.constant(real.clone()), g.constant(fake.clone()), eps, weight).item();
    if !p.is_finite() {
        return Err(Error::Penalty(format!("non-finite gradient penalty {p}")));
    }
    Ok(p)
}

/// Critic objective parts.
pub struct CriticLoss<'g> {
    pub total: Var<'g>,
    /// `mean D(fake) - mean D(real)`.
    pub wasserstein: Var<'g>,
    pub penalty: Var<'g>,
}

pub fn critic_loss_var<'g>(
    critic: &dyn Fn(Var<'g>) -> Var<'g>,
    real: Var<'g>,
    fake: Var<'g>,
    eps: f64,
    weight: f64,
) -> CriticLoss<'g> {
    let wasserstein = critic(fake).mean() - critic(real).mean();
    let penalty = gradient_penalty_var(critic, real, fake, eps, weight);
    CriticLoss { total: wasserstein + penalty, wasserstein, penalty }
}

/// `-mean D(fake)`; carries no penalty term.
pub fn generator_adv_var<'g>(critic: &dyn Fn(Var<'g>) -> Var<'g>, fake: Var<'g>) -> Var<'g> {
    -critic(fake).mean()
}

/// `(critic_loss, generator_loss)` of an eval-mode critic, with the penalty's
/// interpolation weight drawn from `rng`.
pub fn adversarial_losses(critic: &ConvStack, real: &Tensor, fake: &Tensor, weight: f64, rng: &mut impl Rng) -> Result<(f64, f64)> {
    check_pair(real, fake)?;
    let eps: f64 = rng.random();
    let g = Graph::new();
    let d = critic.bind(&g, Mode::Eval, false);
    let f = |x| d.forward(x);
    let (r, fk) = (g.constant(real.clone()), g.constant(fake.clone()));
    let c = critic_loss_var(&f, r, fk, eps, weight).total.item();
    let gen = generator_adv_var(&f, fk).item();
    if !c.is_finite() || !gen.is_finite() {
        return Err(Error::Loss(format!("non-finite adversarial losses ({c}, {gen})")));
    }
    Ok((c, gen))
}

/// Adversarial-scale generator objective `||x_bar - x||^2 + beta_adv * adv`,
/// returned with its reconstruction part.
pub fn gan_scale_loss_var<'g>(x_bar: Var<'g>, x: Var<'g>, adv: Var<'g>, beta_adv: f64) -> (Var<'g>, Var<'g>) {
    let recon = recon_var(x_bar, x);
    (recon + adv.scale(beta_adv), recon)
}

pub fn gan_scale_loss(x_bar: &Tensor, x: &Tensor, adv: f64, beta_adv: f64) -> Result<f64> {
    check_pair(x, x_bar)?;
    Ok(crate::patchvae::recon_loss(x_bar, x) + beta_adv * adv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Role;
    use crate::patchvae::standard_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Pointwise linear critic `scale * sum_c x_c / sqrt(C)`: its input gradient has
    /// norm `scale` at every position.
    fn linear_critic<'g>(g: &'g Graph, channels: usize, scale: f64) -> impl Fn(Var<'g>) -> Var<'g> {
        let w = g.constant(Tensor::full(&[1, channels, 1, 1, 1], scale / (channels as f64).sqrt()));
        move |x: Var<'g>| x.conv(w)
    }

    #[test]
    fn constructed_critics() {
        let g = Graph::new();
        let real = g.constant(standard_normal(&[3, 2, 3, 4], &mut rng(0)));
        let fake = g.constant(standard_normal(&[3, 2, 3, 4], &mut rng(1)));
        let unit = linear_critic(&g, 3, 1.0);
        let double = linear_critic(&g, 3, 2.0);
        for eps in [0.0, 0.3, 1.0] {
            assert!(gradient_penalty_var(&unit, real, fake, eps, 10.0).item().abs() < 1e-9);
            assert!((gradient_penalty_var(&double, real, fake, eps, 10.0).item() - 10.0).abs() < 1e-9);
        }
        let same = critic_loss_var(&unit, real, real, 0.5, 10.0);
        assert!(same.total.item().abs() < 1e-9);
    }

    #[test]
    fn constant_critic() {
        let g = Graph::new();
        let real = g.constant(standard_normal(&[1, 2, 3, 3], &mut rng(0)));
        let fake = g.constant(standard_normal(&[1, 2, 3, 3], &mut rng(1)));
        let c = 0.75;
        fn constant<'g>(x: Var<'g>) -> Var<'g> {
            x.scale(0.0).offset(0.75)
        }
        let loss = critic_loss_var(&constant, real, fake, 0.5, 10.0);
        assert_eq!(loss.wasserstein.item(), 0.0);
        assert_eq!(generator_adv_var(&constant, fake).item(), -c);
    }

    /// Critic whose input gradient at `x` is `2x`, so the penalty at the
    /// interpolate reveals which endpoint was used.
    #[test]
    fn eps_boundaries_select_endpoints() {
        let g = Graph::new();
        let real = g.constant(Tensor::full(&[1, 1, 2, 2], 0.25));
        let fake = g.constant(Tensor::full(&[1, 1, 2, 2], 2.0));
        fn square<'g>(x: Var<'g>) -> Var<'g> {
            x.square()
        }
        // grad norm 2|x|: 0.5 at real, 4 at fake
        let at_real = gradient_penalty_var(&square, real, fake, 1.0, 1.0).item();
        let at_fake = gradient_penalty_var(&square, real, fake, 0.0, 1.0).item();
        assert!((at_real - 0.25).abs() < 1e-9);
        assert!((at_fake - 9.0).abs() < 1e-9);
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let mut critic = ConvStack::new(Role::Critic, 1, 2, 1, 2, [3, 3, 3], &mut rng(3));
        critic.power_iteration();
        let real = standard_normal(&[1, 2, 4, 4], &mut rng(4));
        let fake = standard_normal(&[1, 2, 4, 4], &mut rng(5));
        let penalty = |c: &ConvStack| {
            let g = Graph::new();
            let d = c.bind(&g, Mode::Train, false);
            gradient_penalty_var(&|x| d.forward(x), g.constant(real.clone()), g.constant(fake.clone()), 0.4, 10.0).item()
        };
        let g = Graph::new();
        let d = critic.bind(&g, Mode::Train, true);
        let p = gradient_penalty_var(&|x| d.forward(x), g.constant(real.clone()), g.constant(fake.clone()), 0.4, 10.0);
        let grads = g.grad(p, &d.params);
        let h = 1e-6;
        for (k, grad) in grads.iter().enumerate() {
            let analytic = grad.value();
            let mut numeric = vec![0.0; analytic.len()];
            for (j, slot) in numeric.iter_mut().enumerate() {
                let mut plus = critic.clone();
                plus.trainable_mut()[k].data_mut()[j] += h;
                let mut minus = critic.clone();
                minus.trainable_mut()[k].data_mut()[j] -= h;
                *slot = (penalty(&plus) - penalty(&minus)) / (2.0 * h);
            }
            let diff: f64 = analytic.data().iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt().max(1e-8);
            assert!(diff / scale < 1e-3, "param {k}: rel err {}", diff / scale);
        }
    }

    #[test]
    fn critic_map_shape_and_zero_weights() {
        let mut critic = ConvStack::new(Role::Critic, 3, 4, 1, 5, [3, 3, 3], &mut rng(0));
        for dims in [[1, 1, 1], [2, 5, 3], [4, 7, 9]] {
            let x = standard_normal(&[3, dims[0], dims[1], dims[2]], &mut rng(1));
            assert_eq!(critic_forward(&critic, &x).unwrap().shape(), &[1, dims[0], dims[1], dims[2]]);
        }
        critic.zero_weights();
        let x = standard_normal(&[3, 2, 3, 3], &mut rng(2));
        assert!(critic_forward(&critic, &x).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(critic_forward(&critic, &Tensor::zeros(&[1, 2, 3, 3])).is_err());
    }

    #[test]
    fn scale_loss_parts() {
        let x = standard_normal(&[1, 2, 3, 3], &mut rng(0));
        let y = standard_normal(&[1, 2, 3, 3], &mut rng(1));
        assert_eq!(gan_scale_loss(&x, &x, -0.4, 0.1).unwrap(), 0.1 * -0.4);
        assert_eq!(gan_scale_loss(&x, &y, 5.0, 0.0).unwrap(), crate::patchvae::recon_loss(&x, &y));
        let (c, gen) = adversarial_losses(&ConvStack::new(Role::Critic, 1, 2, 1, 2, [3, 3, 3], &mut rng(2)), &x, &y, 10.0, &mut rng(3)).unwrap();
        assert!(c.is_finite() && gen.is_finite());
    }
}
