//! Discriminator: DownBlock trunk to 8×8, then an adversarial branch (logit)
//! and a contrastive branch (image features `f_v`).

use dte_autograd::{concat, Tensor};

use crate::error::{DteError, Result};
use crate::model::ModelConfig;
use crate::nn::{dims4, Ctx, ParamBuilder, LEAKY_SLOPE};

/// Trunk channel multipliers at full depth (256×256 → 8×8).
pub const DOWN_SCHEDULE: [usize; 5] = [1, 2, 4, 4, 4];

/// Output channels of each trunk DownBlock. The last block always produces
/// `4·ch` so the branches see the same width at every resolution.
pub fn trunk_channels(resolution: usize, ch: usize) -> Result<Vec<usize>> {
    if resolution < 16 || !resolution.is_power_of_two() || resolution > 256 {
        return Err(DteError::Config(format!(
            "discriminator resolution must be a power of two in [16, 256], got {resolution}"
        )));
    }
    let n = (resolution / 8).trailing_zeros() as usize;
    let mut out: Vec<usize> = DOWN_SCHEDULE[..n - 1].iter().map(|m| m * ch).collect();
    out.push(4 * ch);
    Ok(out)
}

fn init_downblock(pb: &mut ParamBuilder, p: &str, cin: usize, cout: usize) -> Result<()> {
    pb.conv(&format!("{p}.conv1"), cin, cout, 3)?;
    pb.conv(&format!("{p}.conv2"), cout, cout, 3)?;
    pb.conv(&format!("{p}.skip"), cin, cout, 1)
}

fn init_resblock(pb: &mut ParamBuilder, p: &str, c: usize) -> Result<()> {
    pb.conv(&format!("{p}.conv1"), c, c, 3)?;
    pb.conv(&format!("{p}.conv2"), c, c, 3)
}

pub fn init_discriminator(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<()> {
    let ch = cfg.ch;
    let mut cin = 3;
    for (i, cout) in trunk_channels(cfg.resolution, ch)?.into_iter().enumerate() {
        init_downblock(pb, &format!("disc.down{i}"), cin, cout)?;
        cin = cout;
    }
    init_downblock(pb, "disc.adv.down", 4 * ch, 8 * ch)?;
    if cfg.magp {
        pb.conv("disc.adv.joint", 8 * ch + cfg.d_s(), 8 * ch, 3)?;
    }
    init_resblock(pb, "disc.adv.res", 8 * ch)?;
    pb.linear("disc.adv.fc", 8 * ch * 16, 1)?;
    init_downblock(pb, "disc.cont.down", 4 * ch, 8 * ch)?;
    init_resblock(pb, "disc.cont.res", 8 * ch)?;
    pb.linear("disc.cont.fc", 8 * ch * 16, cfg.d_s())
}

/// Residual downsampling: `avgpool(lrelu(conv(lrelu(conv(x)))))` plus a
/// pooled 1×1-conv skip.
pub fn downblock(ctx: &Ctx, p: &str, x: &Tensor) -> Tensor {
    let h = ctx.conv(&format!("{p}.conv1"), x).leaky_relu(LEAKY_SLOPE);
    let h = ctx.conv(&format!("{p}.conv2"), &h).leaky_relu(LEAKY_SLOPE).avg_pool2();
    ctx.conv(&format!("{p}.skip"), &x.avg_pool2()).add(&h)
}

/// `x + conv(lrelu(conv(lrelu(x))))`.
pub fn resblock(ctx: &Ctx, p: &str, x: &Tensor) -> Tensor {
    let h = ctx.conv(&format!("{p}.conv1"), &x.leaky_relu(LEAKY_SLOPE));
    let h = ctx.conv(&format!("{p}.conv2"), &h.leaky_relu(LEAKY_SLOPE));
    x.add(&h)
}

/// Shared trunk: image → `4ch×8×8`.
pub fn trunk(ctx: &Ctx, cfg: &ModelConfig, image: &Tensor) -> Result<Tensor> {
    let [_, c, h, w] = dims4(image)?;
    if c != 3 || h != cfg.resolution || w != cfg.resolution {
        return Err(DteError::Shape(format!(
            "discriminator expects 3×{r}×{r} images, got {c}×{h}×{w}",
            r = cfg.resolution
        )));
    }
    let mut x = image.clone();
    for i in 0..trunk_channels(cfg.resolution, cfg.ch)?.len() {
        x = downblock(ctx, &format!("disc.down{i}"), &x);
    }
    Ok(x)
}

fn flatten(x: &Tensor) -> Tensor {
    let n = x.dim(0);
    x.reshape(&[n, x.numel() / n])
}

/// Adversarial branch on trunk features; returns logits of shape `N`. With
/// MA-GP enabled the sentence is replicated over the 4×4 map and joined
/// after the branch DownBlock.
pub fn adversarial_branch(ctx: &Ctx, cfg: &ModelConfig, h: &Tensor, s_d: Option<&Tensor>) -> Result<Tensor> {
    let n = h.dim(0);
    let mut x = downblock(ctx, "disc.adv.down", h);
    match (cfg.magp, s_d) {
        (true, Some(s)) => {
            if s.shape() != [n, cfg.d_s()] {
                return Err(DteError::Shape(format!(
                    "S_D must be {n}×{}, got {:?}",
                    cfg.d_s(),
                    s.shape()
                )));
            }
            let rep = s.reshape(&[n, cfg.d_s(), 1, 1]).broadcast_to(&[n, cfg.d_s(), 4, 4]);
            x = ctx
                .conv("disc.adv.joint", &concat(&[x, rep], 1))
                .leaky_relu(LEAKY_SLOPE);
        }
        (true, None) => return Err(DteError::Invalid("MA-GP discriminator requires S_D".into())),
        (false, _) => {}
    }
    let x = resblock(ctx, "disc.adv.res", &x);
    Ok(ctx.linear("disc.adv.fc", &flatten(&x)).reshape(&[n]))
}

/// Contrastive branch on trunk features; returns `N×d_s` image features.
pub fn contrastive_branch(ctx: &Ctx, h: &Tensor) -> Tensor {
    let x = downblock(ctx, "disc.cont.down", h);
    let x = resblock(ctx, "disc.cont.res", &x);
    ctx.linear("disc.cont.fc", &flatten(&x))
}

#[derive(Clone)]
pub struct DiscriminatorOutput {
    pub logit: Tensor,
    pub f_v: Tensor,
}

pub fn discriminate(ctx: &Ctx, cfg: &ModelConfig, image: &Tensor, s_d: Option<&Tensor>) -> Result<DiscriminatorOutput> {
    let h = trunk(ctx, cfg, image)?;
    let logit = adversarial_branch(ctx, cfg, &h, s_d)?;
    Ok(DiscriminatorOutput {
        logit,
        f_v: contrastive_branch(ctx, &h),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trunk_schedule() {
        assert_eq!(trunk_channels(256, 64).unwrap(), vec![64, 128, 256, 256, 256]);
        assert_eq!(trunk_channels(64, 16).unwrap(), vec![16, 32, 64]);
        assert_eq!(trunk_channels(16, 8).unwrap(), vec![32]);
        assert!(trunk_channels(8, 8).is_err());
        assert!(trunk_channels(96, 8).is_err());
    }
}
