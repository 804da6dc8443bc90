//! Loss terms and the gradient-routing rules that decide which parameter
//! groups each term may update.

use dte_autograd::{grad, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{DteError, Result};
use crate::nn::Group;

/// Cosine similarity divided by `tau`.
pub fn sim(f: &[f64], s: &[f64], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(DteError::Invalid(format!("temperature must be positive, got {tau}")));
    }
    if f.len() != s.len() {
        return Err(DteError::Shape(format!(
            "vector lengths differ: {} vs {}",
            f.len(),
            s.len()
        )));
    }
    let nf = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ns = s.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nf == 0.0 || ns == 0.0 {
        return Err(DteError::Invalid("cosine similarity of a zero vector".into()));
    }
    Ok(f.iter().zip(s).map(|(a, b)| a * b).sum::<f64>() / (nf * ns * tau))
}

fn row_normalize(x: &Tensor, what: &str) -> Result<Tensor> {
    let sq = x.square().sum_keep(&[1]);
    if sq.data().contains(&0.0) {
        return Err(DteError::Invalid(format!("{what} contains a zero row")));
    }
    Ok(x.div(&sq.sqrt()))
}

/// Row-wise log-softmax cross-entropy against the diagonal of `logits`.
fn diagonal_nll(logits: &Tensor) -> Tensor {
    let n = logits.dim(0);
    let row_max: Vec<f64> = (0..n)
        .map(|i| {
            logits.data()[i * n..(i + 1) * n]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let m = Tensor::from_vec(&[n, 1], row_max);
    let lse = logits.sub(&m).exp().sum_keep(&[1]).log().add(&m);
    let eye = Tensor::from_vec(
        &[n, n],
        (0..n * n).map(|k| if k / n == k % n { 1.0 } else { 0.0 }).collect(),
    );
    let diag = logits.mul(&eye).sum_keep(&[1]);
    lse.sub(&diag).mean()
}

/// Image-anchored InfoNCE with in-batch negatives:
/// `mean_i −log softmax_j(sim(f_i, s_j))[i]`. With `symmetric` the
/// text-anchored direction is averaged in.
pub fn contrastive_loss(features: &Tensor, sentences: &Tensor, tau: f64, symmetric: bool) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(DteError::Invalid(format!("temperature must be positive, got {tau}")));
    }
    if features.ndim() != 2 || features.shape() != sentences.shape() || features.dim(0) == 0 {
        return Err(DteError::Shape(format!(
            "contrastive loss needs matching N×d inputs, got {:?} and {:?}",
            features.shape(),
            sentences.shape()
        )));
    }
    let f = row_normalize(features, "image features")?;
    let s = row_normalize(sentences, "sentence embeddings")?;
    let logits = f.matmul(&s.t()).mul_scalar(1.0 / tau);
    let mut loss = diagonal_nll(&logits);
    if symmetric {
        loss = loss.add(&diagonal_nll(&logits.t())).mul_scalar(0.5);
    }
    if !loss.item().is_finite() {
        return Err(DteError::NonFinite("contrastive loss".into()));
    }
    Ok(loss)
}

/// `mean(max(0, 1 − real)) + mean(max(0, 1 + fake))`.
pub fn hinge_d(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    if real_logits.numel() == 0 || fake_logits.numel() == 0 {
        return Err(DteError::Invalid("hinge loss needs non-empty logits".into()));
    }
    let real = real_logits.neg().add_scalar(1.0).relu().mean();
    let fake = fake_logits.add_scalar(1.0).relu().mean();
    Ok(real.add(&fake))
}

/// `mean(−fake)`.
pub fn adv_g(fake_logits: &Tensor) -> Result<Tensor> {
    if fake_logits.numel() == 0 {
        return Err(DteError::Invalid("generator loss needs non-empty logits".into()));
    }
    Ok(fake_logits.neg().mean())
}

fn per_sample_norm(g: &Tensor) -> Tensor {
    let n = g.dim(0);
    g.reshape(&[n, g.numel() / n])
        .square()
        .sum_keep(&[1])
        .add_scalar(1e-24)
        .sqrt()
}

/// Matching-aware zero-centred gradient penalty
/// `k · mean_i (‖∇ₓ D‖ + ‖∇ₛ D‖)ᵖ` at real matched pairs. `images` must be a
/// gradient-tracking leaf and `s_d` must require grad; `logits` are
/// `D(images, s_d)`. The penalty keeps its graph so it can be differentiated
/// again with respect to the parameters of D.
pub fn magp(logits: &Tensor, images: &Tensor, s_d: &Tensor, k: f64, p: f64) -> Result<Tensor> {
    if !(k > 0.0) || !(p > 0.0) {
        return Err(DteError::Invalid(format!(
            "MA-GP needs k > 0 and p > 0, got k={k}, p={p}"
        )));
    }
    let gs = grad(&logits.sum(), &[images, s_d], true)?;
    let n = images.dim(0);
    let norm_of = |g: &Option<Tensor>| g.as_ref().map_or_else(|| Tensor::zeros(&[n, 1]), per_sample_norm);
    let total = norm_of(&gs[0]).add(&norm_of(&gs[1]));
    let penalty = total.powf(p).mean().mul_scalar(k);
    if !penalty.item().is_finite() {
        return Err(DteError::NonFinite("MA-GP penalty".into()));
    }
    Ok(penalty)
}

/// Switches that select a row of the embedding-organisation ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoutingFlags {
    /// G's conditioning sees (a detached) S_D.
    pub sd_to_g: bool,
    /// D's sentence input is S_D + S_G (S_G detached on that path).
    pub sg_to_d: bool,
    /// A single text stack serves both sides.
    pub shared_embeddings: bool,
    /// With shared embeddings, L_G also updates the shared stack.
    pub g_loss_to_shared: bool,
    /// `sg_to_d` turns on from this epoch.
    pub sg_to_d_after_epoch: Option<usize>,
    /// `g_loss_to_shared` turns on from this epoch.
    pub g_loss_after_epoch: Option<usize>,
}

impl Default for RoutingFlags {
    fn default() -> Self {
        Self::table5_row(5).expect("row 5 exists")
    }
}

impl RoutingFlags {
    /// The five embedding organisations: 1 shared (contrastive only),
    /// 2 shared (G loss + contrastive), 3 dual without cross access,
    /// 4 dual with access both ways, 5 dual with S_D → G only.
    pub fn table5_row(row: usize) -> Result<Self> {
        let base = Self {
            sd_to_g: false,
            sg_to_d: false,
            shared_embeddings: false,
            g_loss_to_shared: false,
            sg_to_d_after_epoch: None,
            g_loss_after_epoch: None,
        };
        Ok(match row {
            1 => Self {
                shared_embeddings: true,
                ..base
            },
            2 => Self {
                shared_embeddings: true,
                g_loss_to_shared: true,
                ..base
            },
            3 => base,
            4 => Self {
                sd_to_g: true,
                sg_to_d: true,
                ..base
            },
            5 => Self { sd_to_g: true, ..base },
            r => return Err(DteError::Config(format!("no routing row {r}; rows are 1..=5"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !self.shared_embeddings && (self.g_loss_to_shared || self.g_loss_after_epoch.is_some()) {
            return Err(DteError::Config(
                "g_loss_to_shared / g_loss_after_epoch require shared_embeddings".into(),
            ));
        }
        if self.shared_embeddings && (self.sg_to_d || self.sg_to_d_after_epoch.is_some()) {
            return Err(DteError::Config("sg_to_d has no meaning with shared_embeddings".into()));
        }
        Ok(())
    }
}

/// Flags in effect at `epoch` (0-based) once schedules are applied.
pub fn apply_routing_schedule(epoch: usize, flags: &RoutingFlags) -> RoutingFlags {
    let mut f = *flags;
    if let Some(e) = flags.sg_to_d_after_epoch {
        f.sg_to_d = epoch >= e;
    }
    if let Some(e) = flags.g_loss_after_epoch {
        f.g_loss_to_shared = epoch >= e;
    }
    f
}

/// Named loss term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    AdvG,
    ContG,
    CaKl,
    AdvD,
    ContD,
    Magp,
}

/// Which parameter groups each loss term may update.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutingPlan {
    pub edges: Vec<(Term, Vec<Group>)>,
}

impl RoutingPlan {
    pub fn groups_for(&self, t: Term) -> &[Group] {
        self.edges
            .iter()
            .find(|(k, _)| *k == t)
            .map(|(_, g)| g.as_slice())
            .unwrap_or(&[])
    }

    /// Union of groups over `terms`, in canonical group order.
    pub fn union(&self, terms: &[Term]) -> Vec<Group> {
        Group::ALL
            .into_iter()
            .filter(|g| terms.iter().any(|t| self.groups_for(*t).contains(g)))
            .collect()
    }

    pub const G_TERMS: [Term; 3] = [Term::AdvG, Term::ContG, Term::CaKl];
    pub const D_TERMS: [Term; 3] = [Term::AdvD, Term::ContD, Term::Magp];
}

/// Routing plan for (already scheduled) flags.
pub fn routing_plan(flags: &RoutingFlags, magp_enabled: bool) -> Result<RoutingPlan> {
    flags.validate()?;
    let g_side = if flags.shared_embeddings {
        if flags.g_loss_to_shared {
            vec![Group::Gen, Group::EmbD]
        } else {
            vec![Group::Gen]
        }
    } else {
        vec![Group::Gen, Group::EmbG]
    };
    let mut edges = vec![
        (Term::AdvG, g_side.clone()),
        (Term::ContG, g_side.clone()),
        (Term::CaKl, g_side),
        (Term::AdvD, vec![Group::Disc]),
        (Term::ContD, vec![Group::Disc, Group::EmbD]),
    ];
    if magp_enabled {
        edges.push((Term::Magp, vec![Group::Disc]));
    }
    Ok(RoutingPlan { edges })
}

/// Scalar values of every loss term plus the weights that combine them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub adv_g: f64,
    pub adv_d: f64,
    pub cont_g: f64,
    pub cont_d: f64,
    pub ca_kl: f64,
    pub magp: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
}

impl LossBundle {
    pub fn l_g(&self) -> f64 {
        self.adv_g + self.lambda1 * self.ca_kl + self.lambda2 * self.cont_g
    }

    pub fn l_d(&self) -> f64 {
        self.adv_d + self.lambda3 * self.cont_d + self.magp
    }

    pub fn check_finite(&self) -> Result<()> {
        let terms = [
            ("adv_G", self.adv_g),
            ("adv_D", self.adv_d),
            ("cont_G", self.cont_g),
            ("cont_D", self.cont_d),
            ("ca_kl", self.ca_kl),
            ("magp", self.magp),
        ];
        match terms.iter().find(|(_, v)| !v.is_finite()) {
            Some((name, v)) => Err(DteError::NonFinite(format!("loss term {name} = {v}"))),
            None => Ok(()),
        }
    }
}

/// Graph-carrying D-phase terms.
pub struct DTerms {
    pub adv: Tensor,
    pub cont: Tensor,
    pub magp: Option<Tensor>,
}

/// Graph-carrying G-phase terms.
pub struct GTerms {
    pub adv: Tensor,
    pub cont: Tensor,
    pub kl: Tensor,
}

/// Loss weights and temperature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            tau: 0.1,
        }
    }
}

/// `L_D = adv_D + λ3·cont_D (+ MA-GP)`.
pub fn total_d(t: &DTerms, w: &LossWeights) -> Tensor {
    let l = t.adv.add(&t.cont.mul_scalar(w.lambda3));
    match &t.magp {
        Some(m) => l.add(m),
        None => l,
    }
}

/// `L_G = adv_G + λ1·KL + λ2·cont_G`.
pub fn total_g(t: &GTerms, w: &LossWeights) -> Tensor {
    t.adv
        .add(&t.kl.mul_scalar(w.lambda1))
        .add(&t.cont.mul_scalar(w.lambda2))
}

/// Collects scalar values from both phases.
pub fn assemble_losses(d: &DTerms, g: &GTerms, w: &LossWeights) -> Result<LossBundle> {
    let b = LossBundle {
        adv_g: g.adv.item(),
        adv_d: d.adv.item(),
        cont_g: g.cont.item(),
        cont_d: d.cont.item(),
        ca_kl: g.kl.item(),
        magp: d.magp.as_ref().map_or(0.0, |m| m.item()),
        lambda1: w.lambda1,
        lambda2: w.lambda2,
        lambda3: w.lambda3,
        tau: w.tau,
    };
    b.check_finite()?;
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec())
    }

    #[test]
    fn sim_cases() {
        assert!((sim(&[1.0, 0.0], &[1.0, 0.0], 0.1).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(sim(&[1.0, 0.0], &[0.0, 3.0], 1.0).unwrap(), 0.0);
        assert!((sim(&[0.6, 0.8], &[-0.6, -0.8], 1.0).unwrap() + 1.0).abs() < 1e-12);
        assert!(sim(&[0.0, 0.0], &[1.0, 0.0], 1.0).is_err());
        assert!(sim(&[1.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn contrastive_degenerate_cases() {
        let one = contrastive_loss(&t(&[1, 2], &[1.0, 2.0]), &t(&[1, 2], &[-3.0, 1.0]), 0.1, false).unwrap();
        assert_eq!(one.item(), 0.0);
        let two = contrastive_loss(
            &t(&[2, 2], &[1.0, 0.0, 1.0, 0.0]),
            &t(&[2, 2], &[0.0, 1.0, 0.0, 2.0]),
            0.1,
            false,
        )
        .unwrap();
        assert!((two.item() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(contrastive_loss(&t(&[1, 2], &[0.0, 0.0]), &t(&[1, 2], &[1.0, 0.0]), 0.1, false).is_err());
    }

    #[test]
    fn hinge_and_adv_cases() {
        assert_eq!(hinge_d(&t(&[1], &[1.5]), &t(&[1], &[-2.0])).unwrap().item(), 0.0);
        assert_eq!(hinge_d(&t(&[1], &[0.0]), &t(&[1], &[0.0])).unwrap().item(), 2.0);
        assert_eq!(
            hinge_d(&t(&[2], &[0.5, 1.5]), &t(&[2], &[-0.5, -1.5])).unwrap().item(),
            0.5
        );
        assert_eq!(adv_g(&t(&[1], &[0.0])).unwrap().item(), 0.0);
        assert_eq!(adv_g(&t(&[2], &[2.0, -2.0])).unwrap().item(), 0.0);
        assert_eq!(adv_g(&t(&[2], &[1.0, 3.0])).unwrap().item(), -2.0);
    }

    #[test]
    fn schedule_flips_at_boundary() {
        let f = RoutingFlags {
            sg_to_d_after_epoch: Some(100),
            ..RoutingFlags::default()
        };
        assert!(!apply_routing_schedule(99, &f).sg_to_d);
        assert!(apply_routing_schedule(100, &f).sg_to_d);
        let d = RoutingFlags::default();
        assert_eq!(apply_routing_schedule(7, &d), d);
    }

    #[test]
    fn inconsistent_flags_rejected() {
        let f = RoutingFlags {
            g_loss_to_shared: true,
            ..RoutingFlags::default()
        };
        assert!(f.validate().is_err());
        assert!(routing_plan(&f, false).is_err());
        assert!(RoutingFlags::table5_row(6).is_err());
    }

    #[test]
    fn default_plan_edges() {
        let p = routing_plan(&RoutingFlags::default(), false).unwrap();
        assert_eq!(p.union(&RoutingPlan::G_TERMS), vec![Group::Gen, Group::EmbG]);
        assert_eq!(p.groups_for(Term::AdvD), &[Group::Disc]);
        assert_eq!(p.groups_for(Term::ContD), &[Group::Disc, Group::EmbD]);
        assert!(!p.groups_for(Term::ContG).contains(&Group::EmbD));
        assert_eq!(p.groups_for(Term::Magp), &[] as &[Group]);
    }
}
