//! Conditional generator: conditioning augmentation, CBN-modulated UpBlocks
//! with noise injection, self-modulation conv and a 1×1 output conv.

use dte_autograd::{concat, Array, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{DteError, Result};
use crate::model::ModelConfig;
use crate::nn::{Ctx, ParamBuilder, LEAKY_SLOPE};

/// UpBlock output-channel multipliers at full depth (4×4 → 256×256).
pub const UP_SCHEDULE: [usize; 6] = [8, 8, 4, 2, 2, 1];

/// Number of UpBlocks needed to reach `resolution` from 4×4.
pub fn n_upblocks(resolution: usize) -> Result<usize> {
    if resolution < 8 || !resolution.is_power_of_two() {
        return Err(DteError::Config(format!(
            "resolution must be a power-of-two multiple of 4 of at least 8, got {resolution}"
        )));
    }
    let n = (resolution / 4).trailing_zeros() as usize;
    if n > UP_SCHEDULE.len() {
        return Err(DteError::Config(format!(
            "resolution {resolution} exceeds the 256 maximum"
        )));
    }
    Ok(n)
}

/// (input, output) channels of each UpBlock.
pub fn up_channels(resolution: usize, ch: usize) -> Result<Vec<(usize, usize)>> {
    let n = n_upblocks(resolution)?;
    let mut cin = 8 * ch;
    Ok(UP_SCHEDULE[..n]
        .iter()
        .map(|m| {
            let io = (cin, m * ch);
            cin = m * ch;
            io
        })
        .collect())
}

fn init_cbn(pb: &mut ParamBuilder, prefix: &str, f_dim: usize, channels: usize) -> Result<()> {
    pb.constant(&format!("{prefix}.gamma"), &[channels], 1.0)?;
    pb.constant(&format!("{prefix}.beta"), &[channels], 0.0)?;
    pb.linear(&format!("{prefix}.fc_gamma"), f_dim, channels)?;
    pb.linear(&format!("{prefix}.fc_beta"), f_dim, channels)?;
    pb.batch_norm_buffers(prefix, channels);
    Ok(())
}

pub fn init_generator(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<()> {
    let (d_s, d_c, f_dim, ch) = (cfg.d_s(), cfg.d_c, cfg.f_dim(), cfg.ch);
    pb.linear("gen.ca_pre", 2 * d_s, 2 * d_s)?;
    pb.linear("gen.ca", 2 * d_s, 2 * d_c)?;
    pb.linear("gen.stem", f_dim, 8 * ch * 16)?;
    let chans = up_channels(cfg.resolution, ch)?;
    for (b, &(cin, cout)) in chans.iter().enumerate() {
        let p = format!("gen.up{b}");
        if cin != cout {
            pb.conv(&format!("{p}.skip"), cin, cout, 1)?;
        }
        pb.constant(&format!("{p}.noise1"), &[cin], 0.0)?;
        pb.conv(&format!("{p}.conv1"), cin, cout, 3)?;
        init_cbn(pb, &format!("{p}.cbn1"), f_dim, cout)?;
        pb.constant(&format!("{p}.noise2"), &[cout], 0.0)?;
        pb.conv(&format!("{p}.conv2"), cout, cout, 3)?;
        init_cbn(pb, &format!("{p}.cbn2"), f_dim, cout)?;
    }
    let last = chans.last().map_or(8 * ch, |c| c.1);
    pb.conv("gen.sm", last, ch, 3)?;
    init_cbn(pb, "gen.sm_cbn", f_dim, ch)?;
    pb.conv("gen.out", ch, 3, 1)
}

/// Sampled condition of conditioning augmentation.
#[derive(Clone)]
pub struct ConditionVector {
    /// `N×d_c`, `mu + sigma ⊙ eps`.
    pub c_t: Tensor,
    pub mu: Tensor,
    pub sigma: Tensor,
    /// Batch mean of the per-sample KL to N(0, I).
    pub kl: Tensor,
}

/// `½ Σ (μ² + σ² − log σ² − 1)` per row, averaged over rows.
pub fn kl_divergence(mu: &Tensor, logvar: &Tensor) -> Tensor {
    let n = mu.dim(0) as f64;
    mu.square()
        .add(&logvar.exp())
        .sub(logvar)
        .add_scalar(-1.0)
        .sum()
        .mul_scalar(0.5 / n)
}

/// Conditioning augmentation of `concat(s_g, s_d)`. `s_d` is detached here so
/// no generator loss can reach the D-side encoder through it.
pub fn condition_augment(ctx: &Ctx, s_g: &Tensor, s_d: &Tensor, eps: &Array) -> Result<ConditionVector> {
    let n = s_g.dim(0);
    let s_t = concat(&[s_g.clone(), s_d.detach()], 1);
    let h = ctx.linear("gen.ca_pre", &s_t).leaky_relu(LEAKY_SLOPE);
    let stats = ctx.linear("gen.ca", &h);
    let d_c = stats.dim(1) / 2;
    if eps.shape() != [n, d_c] {
        return Err(DteError::Shape(format!("eps must be {n}×{d_c}, got {:?}", eps.shape())));
    }
    condition_from_stats(&stats.narrow(1, 0, d_c), &stats.narrow(1, d_c, d_c), eps)
}

/// Reparameterized sample from `(mu, logvar)`.
pub fn condition_from_stats(mu: &Tensor, logvar: &Tensor, eps: &Array) -> Result<ConditionVector> {
    if !mu.value().all_finite() || !logvar.value().all_finite() {
        return Err(DteError::NonFinite("conditioning augmentation statistics".into()));
    }
    let sigma = logvar.mul_scalar(0.5).exp();
    let c_t = mu.add(&sigma.mul(&Tensor::constant(eps.clone())));
    Ok(ConditionVector {
        c_t,
        mu: mu.clone(),
        sigma,
        kl: kl_divergence(mu, logvar),
    })
}

/// Conditional batch norm: `(γ + FC_γ(f)) · x̂ + (β + FC_β(f))`.
pub fn cbn(ctx: &Ctx, prefix: &str, x: &Tensor, f_g: &Tensor) -> Result<Tensor> {
    let normed = ctx.batch_norm(prefix, x)?;
    let (n, c) = (x.dim(0), x.dim(1));
    let gamma_c = ctx.linear(&format!("{prefix}.fc_gamma"), f_g).reshape(&[n, c, 1, 1]);
    let beta_c = ctx.linear(&format!("{prefix}.fc_beta"), f_g).reshape(&[n, c, 1, 1]);
    let gamma = ctx.param(&format!("{prefix}.gamma")).reshape(&[1, c, 1, 1]);
    let beta = ctx.param(&format!("{prefix}.beta")).reshape(&[1, c, 1, 1]);
    Ok(normed.mul(&gamma.add(&gamma_c)).add(&beta.add(&beta_c)))
}

/// Per-pixel noise maps (`N×1×H×W`), two per UpBlock.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseMaps(pub Vec<Array>);

impl NoiseMaps {
    pub fn sample(rng: &mut ChaCha8Rng, n: usize, resolution: usize) -> Result<Self> {
        let blocks = n_upblocks(resolution)?;
        let maps = (0..2 * blocks)
            .map(|i| {
                let r = 8 << (i / 2);
                Array::from_fn(&[n, 1, r, r], |_| rng.sample(StandardNormal))
            })
            .collect();
        Ok(Self(maps))
    }

    pub fn zeros(n: usize, resolution: usize) -> Result<Self> {
        let blocks = n_upblocks(resolution)?;
        Ok(Self(
            (0..2 * blocks)
                .map(|i| Array::zeros(&[n, 1, 8 << (i / 2), 8 << (i / 2)]))
                .collect(),
        ))
    }
}

fn inject(ctx: &Ctx, name: &str, h: &Tensor, noise: &Array) -> Result<Tensor> {
    let [n, c, hh, ww] = crate::nn::dims4(h)?;
    if noise.shape() != [n, 1, hh, ww] {
        return Err(DteError::Shape(format!(
            "noise map for `{name}` must be {n}×1×{hh}×{ww}, got {:?}",
            noise.shape()
        )));
    }
    let scale = ctx.param(name).reshape(&[1, c, 1, 1]);
    Ok(h.add(&scale.mul(&Tensor::constant(noise.clone()))))
}

/// Residual UpBlock: bilinear 2× upsample, then two
/// [scaled noise → conv3 → CBN → LeakyReLU] units, plus the upsampled skip
/// (1×1 conv when channels change).
pub fn upblock(ctx: &Ctx, prefix: &str, x: &Tensor, f_g: &Tensor, noise: (&Array, &Array)) -> Result<Tensor> {
    crate::nn::dims4(x)?;
    let up = x.upsample_bilinear2();
    let skip_name = format!("{prefix}.skip");
    let skip = if ctx.has(&format!("{skip_name}.w")) {
        ctx.conv(&skip_name, &up)
    } else {
        up.clone()
    };
    let mut h = up;
    for (u, map) in [(1, noise.0), (2, noise.1)] {
        h = inject(ctx, &format!("{prefix}.noise{u}"), &h, map)?;
        h = ctx.conv(&format!("{prefix}.conv{u}"), &h);
        h = cbn(ctx, &format!("{prefix}.cbn{u}"), &h, f_g)?.leaky_relu(LEAKY_SLOPE);
    }
    Ok(skip.add(&h))
}

pub struct GeneratorOutput {
    /// `N×3×R×R` in [−1, 1].
    pub images: Tensor,
    pub cond: ConditionVector,
    pub f_g: Tensor,
}

/// Full generator pass. `s_d` is detached internally; `eps` feeds the
/// conditioning augmentation and `noise` the UpBlocks.
pub fn generate(
    ctx: &Ctx,
    cfg: &ModelConfig,
    z: &Array,
    s_g: &Tensor,
    s_d: &Tensor,
    eps: &Array,
    noise: &NoiseMaps,
) -> Result<GeneratorOutput> {
    let n = z.shape()[0];
    if z.shape() != [n, cfg.d_z] || s_g.shape() != [n, cfg.d_s()] || s_d.shape() != [n, cfg.d_s()] {
        return Err(DteError::Shape(format!(
            "generator inputs disagree: z {:?}, S_G {:?}, S_D {:?}",
            z.shape(),
            s_g.shape(),
            s_d.shape()
        )));
    }
    let chans = up_channels(cfg.resolution, cfg.ch)?;
    if noise.0.len() != 2 * chans.len() {
        return Err(DteError::Shape(format!(
            "expected {} noise maps, got {}",
            2 * chans.len(),
            noise.0.len()
        )));
    }
    let cond = condition_augment(ctx, s_g, s_d, eps)?;
    let f_g = concat(&[cond.c_t.clone(), Tensor::constant(z.clone())], 1);
    let mut h = ctx.linear("gen.stem", &f_g).reshape(&[n, 8 * cfg.ch, 4, 4]);
    for b in 0..chans.len() {
        h = upblock(
            ctx,
            &format!("gen.up{b}"),
            &h,
            &f_g,
            (&noise.0[2 * b], &noise.0[2 * b + 1]),
        )?;
    }
    h = ctx.conv("gen.sm", &h);
    h = cbn(ctx, "gen.sm_cbn", &h, &f_g)?.leaky_relu(LEAKY_SLOPE);
    let images = ctx.conv("gen.out", &h).tanh();
    Ok(GeneratorOutput { images, cond, f_g })
}

/// Standard-normal latent batch. With `psi` set, components outside
/// [−ψ, ψ] are resampled.
pub fn sample_noise_with(rng: &mut ChaCha8Rng, n: usize, d_z: usize, psi: Option<f64>) -> Result<Array> {
    if d_z == 0 {
        return Err(DteError::Invalid("d_z must be at least 1".into()));
    }
    if let Some(p) = psi {
        if !(p > 0.0) {
            return Err(DteError::Invalid(format!("truncation psi must be positive, got {p}")));
        }
    }
    Ok(Array::from_fn(&[n, d_z], |_| loop {
        let v: f64 = rng.sample(StandardNormal);
        match psi {
            Some(p) if v.abs() > p => continue,
            _ => break v,
        }
    }))
}

pub fn sample_noise(n: usize, d_z: usize, psi: Option<f64>, seed: u64) -> Result<Array> {
    sample_noise_with(&mut ChaCha8Rng::seed_from_u64(seed), n, d_z, psi)
}
