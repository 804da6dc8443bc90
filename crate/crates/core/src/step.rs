//! Forward passes of the discriminator and generator phases of one
//! training step, with sentence routing applied.

use dte_autograd::{no_grad, Array, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::data::Batch;
use crate::discriminator::discriminate;
use crate::error::Result;
use crate::generator::{generate, sample_noise_with, GeneratorOutput, NoiseMaps};
use crate::losses::{adv_g, contrastive_loss, hinge_d, magp, DTerms, GTerms, LossWeights, RoutingFlags};
use crate::model::ModelConfig;
use crate::nn::Ctx;
use crate::text::{dual_encode, DualSentenceEmbedding};

/// Sentence tensors as seen by each consumer after routing.
pub struct Routed {
    /// First conditioning-augmentation input.
    pub ca_g: Tensor,
    /// Second conditioning-augmentation input (detached inside the generator).
    pub ca_d: Tensor,
    /// Sentence the discriminator compares real images against.
    pub d_sent: Tensor,
    /// Sentence the generator-side contrastive loss compares fakes against.
    pub cont_g_target: Tensor,
}

pub fn route_sentences(emb: &DualSentenceEmbedding, flags: &RoutingFlags) -> Routed {
    let (s_g, s_d) = (&emb.s_g, &emb.s_d);
    if flags.shared_embeddings {
        let s = if flags.g_loss_to_shared {
            s_g.clone()
        } else {
            s_g.detach()
        };
        return Routed {
            ca_g: s.clone(),
            ca_d: s_d.detach(),
            d_sent: s_d.clone(),
            cont_g_target: s,
        };
    }
    let (d_sent, g_view) = if flags.sg_to_d {
        (s_d.add(&s_g.detach()), s_d.detach().add(s_g))
    } else {
        (s_d.clone(), s_d.detach())
    };
    let ca_d = if flags.sd_to_g {
        s_d.detach()
    } else {
        Tensor::zeros(s_d.shape())
    };
    let cont_g_target = if flags.sd_to_g || flags.sg_to_d {
        g_view
    } else {
        s_g.clone()
    };
    Routed {
        ca_g: s_g.clone(),
        ca_d,
        d_sent,
        cont_g_target,
    }
}

/// Random inputs of one generator pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Draws {
    pub z: Array,
    pub eps: Array,
    pub noise: NoiseMaps,
}

impl Draws {
    pub fn sample(rng: &mut ChaCha8Rng, n: usize, cfg: &ModelConfig, psi: Option<f64>) -> Result<Self> {
        let z = sample_noise_with(rng, n, cfg.d_z, psi)?;
        let eps = sample_noise_with(rng, n, cfg.d_c, None)?;
        let noise = NoiseMaps::sample(rng, n, cfg.resolution)?;
        Ok(Self { z, eps, noise })
    }
}

/// Loss settings shared by both phases.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseSettings {
    pub weights: LossWeights,
    pub symmetric: bool,
    /// `(k, p)` when the matching-aware gradient penalty is on.
    pub magp: Option<(f64, f64)>,
}

pub fn encode_batch(ctx: &Ctx, batch: &Batch, flags: &RoutingFlags) -> Result<DualSentenceEmbedding> {
    dual_encode(ctx, &batch.tokens_g, &batch.tokens_d, flags.shared_embeddings)
}

/// Generator pass for a batch's captions.
pub fn run_generator(ctx: &Ctx, cfg: &ModelConfig, routed: &Routed, draws: &Draws) -> Result<GeneratorOutput> {
    generate(ctx, cfg, &draws.z, &routed.ca_g, &routed.ca_d, &draws.eps, &draws.noise)
}

/// Fake images for the discriminator phase, computed without a graph.
pub fn fake_images(ctx: &Ctx, cfg: &ModelConfig, batch: &Batch, flags: &RoutingFlags, draws: &Draws) -> Result<Array> {
    no_grad(|| {
        let emb = encode_batch(ctx, batch, flags)?;
        let routed = route_sentences(&emb, flags);
        Ok(run_generator(ctx, cfg, &routed, draws)?.images.to_array())
    })
}

/// Discriminator-phase terms: hinge on real/fake logits, real-pair
/// contrastive loss and, when enabled, the gradient penalty. Fake logits
/// see a detached sentence; the conditional head sees a fresh leaf copy of
/// the sentence so only `cont_D` reaches the D-side encoder.
pub fn d_phase(
    ctx: &Ctx,
    cfg: &ModelConfig,
    batch: &Batch,
    flags: &RoutingFlags,
    fake: &Array,
    s: &PhaseSettings,
) -> Result<DTerms> {
    let emb = encode_batch(ctx, batch, flags)?;
    let routed = route_sentences(&emb, flags);
    let real = if s.magp.is_some() {
        Tensor::param(batch.images.clone())
    } else {
        Tensor::constant(batch.images.clone())
    };
    let cond_sent = Tensor::param(routed.d_sent.to_array());
    let out_real = discriminate(ctx, cfg, &real, Some(&cond_sent))?;
    let cont = contrastive_loss(&out_real.f_v, &routed.d_sent, s.weights.tau, s.symmetric)?;
    let out_fake = discriminate(ctx, cfg, &Tensor::constant(fake.clone()), Some(&routed.d_sent.detach()))?;
    let adv = hinge_d(&out_real.logit, &out_fake.logit)?;
    let penalty = match s.magp {
        Some((k, p)) => Some(magp(&out_real.logit, &real, &cond_sent, k, p)?),
        None => None,
    };
    Ok(DTerms {
        adv,
        cont,
        magp: penalty,
    })
}

/// Generator-phase terms: adversarial, contrastive against the routed
/// target, and the conditioning KL. D sees a detached sentence.
pub fn g_phase(
    ctx: &Ctx,
    cfg: &ModelConfig,
    batch: &Batch,
    flags: &RoutingFlags,
    draws: &Draws,
    s: &PhaseSettings,
) -> Result<(GTerms, Tensor)> {
    let emb = encode_batch(ctx, batch, flags)?;
    let routed = route_sentences(&emb, flags);
    let out = run_generator(ctx, cfg, &routed, draws)?;
    let d_out = discriminate(ctx, cfg, &out.images, Some(&routed.d_sent.detach()))?;
    let terms = GTerms {
        adv: adv_g(&d_out.logit)?,
        cont: contrastive_loss(&d_out.f_v, &routed.cont_g_target, s.weights.tau, s.symmetric)?,
        kl: out.cond.kl,
    };
    Ok((terms, out.images))
}
