#![allow(dead_code)]

use dte_autograd::{grad_arrays, no_grad, Array, Tensor};
use dte_core::config::TrainConfig;
use dte_core::data::{make_batches, synthesize_toy_dataset, Batch, CaptionPolicy};
use dte_core::losses::{total_g, RoutingFlags};
use dte_core::model::Model;
use dte_core::nn::{Ctx, Group, Mode, ParamStore, Vars};
use dte_core::step::{d_phase, fake_images, g_phase, Draws, PhaseSettings};
use dte_core::trainer::TrainState;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Model and one minibatch built from `config` on a fresh toy dataset.
pub fn model_and_batch(config: &TrainConfig) -> (Model, Batch) {
    let ds = synthesize_toy_dataset(config.batch_size.max(8), config.resolution, config.synthetic_seed).unwrap();
    let state = TrainState::new(config.clone(), ds.vocab.clone()).unwrap();
    let batch = make_batches(&ds, config.batch_size, config.seed, 0, CaptionPolicy::Single)
        .unwrap()
        .remove(0);
    (state.model, batch)
}

pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        resolution: 32,
        ch: 4,
        d_z: 6,
        d_h: 4,
        d_c: 5,
        batch_size: 4,
        ..TrainConfig::default()
    }
}

pub fn settings(config: &TrainConfig) -> PhaseSettings {
    PhaseSettings {
        weights: config.weights(),
        symmetric: config.symmetric_contrastive,
        magp: config.magp.then_some((config.magp_k, config.magp_p)),
    }
}

fn max_abs(grads: &[(String, Array)]) -> f64 {
    grads.iter().map(|(_, g)| g.max_abs()).fold(0.0, f64::max)
}

/// Largest gradient magnitude each routing-relevant loss leaves on each
/// text stack, with every parameter group trainable.
#[derive(Debug, Clone, Copy)]
pub struct Leaks {
    /// λ3·L_cont^D on emb_G.
    pub cont_d_on_emb_g: f64,
    /// L_adv^D (+ MA-GP) on emb_D.
    pub adv_d_on_emb_d: f64,
    /// L_cont^D on emb_D; nonzero when the D-side encoder is learning.
    pub cont_d_on_emb_d: f64,
    /// L_G on emb_D.
    pub l_g_on_emb_d: f64,
    /// MA-GP value of the D phase, if enabled.
    pub magp: Option<f64>,
}

pub fn routing_leaks(config: &TrainConfig, flags: &RoutingFlags) -> Leaks {
    let mut config = config.clone();
    config.set_flags(flags);
    let (mut model, batch) = model_and_batch(&config);
    let s = settings(&config);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = batch.len();
    let draws = Draws::sample(&mut rng, n, &model.cfg, None).unwrap();
    let vars = Vars::new(&model.store, &Group::ALL);
    let ctx = Ctx::new(&vars, &mut model.buffers, Mode::Train);
    let fake = fake_images(&ctx, &model.cfg, &batch, flags, &draws).unwrap();
    let d = d_phase(&ctx, &model.cfg, &batch, flags, &fake, &s).unwrap();
    let cont = d.cont.mul_scalar(s.weights.lambda3);
    let adv = match &d.magp {
        Some(p) => d.adv.add(p),
        None => d.adv.clone(),
    };
    let (g, _) = g_phase(&ctx, &model.cfg, &batch, flags, &draws, &s).unwrap();
    let l_g = total_g(&g, &s.weights);
    Leaks {
        cont_d_on_emb_g: max_abs(&vars.grads(&cont, &[Group::EmbG]).unwrap()),
        adv_d_on_emb_d: max_abs(&vars.grads(&adv, &[Group::EmbD]).unwrap()),
        cont_d_on_emb_d: max_abs(&vars.grads(&cont, &[Group::EmbD]).unwrap()),
        l_g_on_emb_d: max_abs(&vars.grads(&l_g, &[Group::EmbD]).unwrap()),
        magp: d.magp.map(|t| t.item()),
    }
}

/// Central-difference check of `f` over selected parameters of `model`.
/// Evaluations keep a graph so `f` may differentiate internally. In train mode spectral-norm vectors are first iterated to convergence so the
/// power-iteration update inside the forward pass is stationary.
pub fn param_fd(
    model: &mut Model,
    mode: Mode,
    names: &[&str],
    eps: f64,
    floor: f64,
    f: &dyn Fn(&Ctx) -> Tensor,
) -> f64 {
    if mode == Mode::Train {
        let frozen = Vars::new(&model.store, &[]);
        for _ in 0..300 {
            let ctx = Ctx::new(&frozen, &mut model.buffers, Mode::Train);
            no_grad(|| f(&ctx));
        }
    }
    let eval_at = |store: &ParamStore| {
        let vars = Vars::new(store, &[]);
        let mut b = model.buffers.clone();
        f(&Ctx::new(&vars, &mut b, mode)).item()
    };
    let vars = Vars::new(&model.store, &Group::ALL);
    let mut b = model.buffers.clone();
    let loss = f(&Ctx::new(&vars, &mut b, mode));
    let wrt: Vec<&Tensor> = names.iter().map(|n| vars.get(n)).collect();
    let analytic = grad_arrays(&loss, &wrt).unwrap();
    let mut worst: f64 = 0.0;
    for (name, a) in names.iter().zip(&analytic) {
        for i in 0..a.numel() {
            let mut plus = model.store.clone();
            plus.get_mut(name).unwrap().value.data_mut()[i] += eps;
            let mut minus = model.store.clone();
            minus.get_mut(name).unwrap().value.data_mut()[i] -= eps;
            let num = (eval_at(&plus) - eval_at(&minus)) / (2.0 * eps);
            let x = a.data()[i];
            worst = worst.max((x - num).abs() / (x.abs() + num.abs()).max(floor));
        }
    }
    worst
}
