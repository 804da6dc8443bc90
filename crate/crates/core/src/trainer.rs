//! Alternating D/G optimisation with per-group Adam, EMA of the sampling
//! path, epoch-scheduled routing and run-directory management.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use dte_autograd::Array;
use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetKind, TrainConfig};
use crate::data::{load_dataset, make_batches, synthesize_toy_dataset, Batch, CaptionedImageDataset, Vocabulary};
use crate::error::{DteError, Result};
use crate::losses::{apply_routing_schedule, assemble_losses, routing_plan, total_d, total_g, LossBundle, RoutingPlan};
use crate::model::Model;
use crate::nn::{Ctx, Group, Mode, Vars};
use crate::step::{d_phase, fake_images, g_phase, Draws, PhaseSettings};

const ADAM_EPS: f64 = 1e-8;

/// Groups whose exponential moving average is kept for sampling.
pub const EMA_GROUPS: [Group; 2] = [Group::Gen, Group::EmbG];

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub model: Model,
    pub adam_m: IndexMap<String, Array>,
    pub adam_v: IndexMap<String, Array>,
    /// Adam step count per group.
    pub adam_t: BTreeMap<Group, u64>,
    pub ema: IndexMap<String, Array>,
    pub epoch: usize,
    /// Batches already consumed in the current epoch.
    pub batch_in_epoch: usize,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: TrainConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model_config(vocab.size()), config.seed)?;
        let zeros: IndexMap<String, Array> = model
            .store
            .iter()
            .map(|(n, p)| (n.clone(), Array::zeros(p.value.shape())))
            .collect();
        let ema = model
            .store
            .iter()
            .filter(|(_, p)| EMA_GROUPS.contains(&p.group))
            .map(|(n, p)| (n.clone(), p.value.clone()))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(7);
        Ok(Self {
            adam_m: zeros.clone(),
            adam_v: zeros,
            adam_t: Group::ALL.iter().map(|g| (*g, 0)).collect(),
            ema,
            epoch: 0,
            batch_in_epoch: 0,
            step: 0,
            rng,
            config,
            vocab,
            model,
        })
    }

    /// Copy of the model with EMA values in place of the averaged groups.
    pub fn ema_model(&self) -> Model {
        let mut m = self.model.clone();
        for (name, v) in &self.ema {
            if let Some(p) = m.store.get_mut(name) {
                p.value = v.clone();
            }
        }
        m
    }

    fn settings(&self) -> PhaseSettings {
        PhaseSettings {
            weights: self.config.weights(),
            symmetric: self.config.symmetric_contrastive,
            magp: self.config.magp.then_some((self.config.magp_k, self.config.magp_p)),
        }
    }

    fn adam_update(&mut self, grads: Vec<(String, Array)>, groups: &[Group]) {
        let c = &self.config;
        let (b1, b2, lr) = (c.beta1, c.beta2, c.lr);
        for g in groups {
            *self.adam_t.get_mut(g).expect("every group has a counter") += 1;
        }
        for (name, grad) in grads {
            let p = self.model.store.get_mut(&name).expect("gradient for a known parameter");
            let t = self.adam_t[&p.group] as i32;
            let (bc1, bc2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
            let m = self.adam_m.get_mut(&name).expect("moment exists").data_mut();
            let v = self.adam_v.get_mut(&name).expect("moment exists").data_mut();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let gi = grad.data()[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                w[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
            }
        }
    }

    fn ema_update(&mut self) {
        let d = self.config.ema_decay;
        for (name, shadow) in self.ema.iter_mut() {
            let cur = &self.model.store.get(name).expect("EMA of a known parameter").value;
            for (s, c) in shadow.data_mut().iter_mut().zip(cur.data()) {
                *s = d * *s + (1.0 - d) * c;
            }
        }
    }
}

/// One D update then one G update on `batch`, followed by the EMA update.
pub fn train_step(state: &mut TrainState, batch: &Batch) -> Result<LossBundle> {
    let flags = apply_routing_schedule(state.epoch, &state.config.flags());
    let plan = routing_plan(&flags, state.config.magp)?;
    let settings = state.settings();
    let cfg = state.model.cfg.clone();
    let n = batch.len();

    // discriminator phase
    let draws = Draws::sample(&mut state.rng, n, &cfg, None)?;
    let d_groups = plan.union(&RoutingPlan::D_TERMS);
    let d_terms;
    let d_grads;
    {
        let frozen = Vars::new(&state.model.store, &[]);
        let fake = {
            let ctx = Ctx::new(&frozen, &mut state.model.buffers, Mode::Train);
            fake_images(&ctx, &cfg, batch, &flags, &draws)?
        };
        let vars = Vars::new(&state.model.store, &d_groups);
        let ctx = Ctx::new(&vars, &mut state.model.buffers, Mode::Train);
        d_terms = d_phase(&ctx, &cfg, batch, &flags, &fake, &settings)?;
        d_grads = vars.grads(&total_d(&d_terms, &settings.weights), &d_groups)?;
    }
    check_grads(&d_grads, state.step, "discriminator")?;
    state.adam_update(d_grads, &d_groups);

    // generator phase
    let draws = Draws::sample(&mut state.rng, n, &cfg, None)?;
    let g_groups = plan.union(&RoutingPlan::G_TERMS);
    let g_terms;
    let g_grads;
    {
        let vars = Vars::new(&state.model.store, &g_groups);
        let ctx = Ctx::new(&vars, &mut state.model.buffers, Mode::Train);
        g_terms = g_phase(&ctx, &cfg, batch, &flags, &draws, &settings)?.0;
        g_grads = vars.grads(&total_g(&g_terms, &settings.weights), &g_groups)?;
    }
    check_grads(&g_grads, state.step, "generator")?;
    state.adam_update(g_grads, &g_groups);

    state.ema_update();
    let bundle = assemble_losses(&d_terms, &g_terms, &settings.weights)
        .map_err(|e| DteError::NonFinite(format!("step {} (epoch {}): {e}", state.step, state.epoch)))?;
    state.step += 1;
    Ok(bundle)
}

fn check_grads(grads: &[(String, Array)], step: u64, phase: &str) -> Result<()> {
    match grads.iter().find(|(_, g)| !g.all_finite()) {
        Some((name, _)) => Err(DteError::NonFinite(format!(
            "step {step}: {phase} gradient of `{name}` is not finite"
        ))),
        None => Ok(()),
    }
}

/// Training and held-out splits for a config, plus the vocabulary.
pub fn prepare_data(config: &TrainConfig) -> Result<(CaptionedImageDataset, CaptionedImageDataset)> {
    let full = match config.dataset {
        DatasetKind::Synthetic => {
            synthesize_toy_dataset(config.synthetic_items, config.resolution, config.synthetic_seed)?
        }
        DatasetKind::Manifest => {
            let path = config.manifest.as_ref().expect("validated");
            load_dataset(path, config.resolution, config.max_len, config.min_freq, None)?
        }
    };
    if full.len() <= config.eval_items + config.batch_size {
        return Err(DteError::Config(format!(
            "dataset has {} items; need more than eval_items + batch_size = {}",
            full.len(),
            config.eval_items + config.batch_size
        )));
    }
    Ok(full.split_tail(config.eval_items))
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: usize,
    #[serde(rename = "adv_G")]
    pub adv_g: f64,
    #[serde(rename = "adv_D")]
    pub adv_d: f64,
    #[serde(rename = "cont_G")]
    pub cont_g: f64,
    #[serde(rename = "cont_D")]
    pub cont_d: f64,
    pub ca_kl: f64,
    pub magp: f64,
}

/// Runs epochs until `state.epoch == config.epochs`, calling `on_step` after
/// every step and `on_epoch` after every completed epoch.
pub fn run_epochs(
    state: &mut TrainState,
    data: &CaptionedImageDataset,
    mut on_step: impl FnMut(&TrainState, &LossBundle) -> Result<()>,
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    while state.epoch < state.config.epochs {
        let batches = make_batches(
            data,
            state.config.batch_size,
            state.config.seed,
            state.epoch,
            state.config.caption_policy,
        )?;
        if batches.is_empty() {
            return Err(DteError::Config("training split is smaller than one batch".into()));
        }
        while state.batch_in_epoch < batches.len() {
            let bundle = train_step(state, &batches[state.batch_in_epoch])?;
            state.batch_in_epoch += 1;
            on_step(state, &bundle)?;
        }
        state.epoch += 1;
        state.batch_in_epoch = 0;
        on_epoch(state)?;
    }
    Ok(())
}

/// Layout of a run directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunDirectory {
    pub root: PathBuf,
}

impl RunDirectory {
    pub fn create(root: &Path) -> Result<Self> {
        let d = Self { root: root.to_owned() };
        for sub in [d.checkpoints(), d.reports(), d.samples()] {
            fs::create_dir_all(&sub).map_err(|e| DteError::io(&sub, e))?;
        }
        Ok(d)
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn metrics_log(&self) -> PathBuf {
        self.root.join("metrics.log")
    }
}

/// Artifacts of a finished run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub ema_checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub steps: u64,
}

/// Number of held-out captions rendered with each report.
pub const SAMPLES_PER_REPORT: usize = 8;

/// Renders the first caption of the first held-out items with the EMA model
/// into `dir` as `NNNN.png`, listing the captions in `captions.txt`.
pub fn write_samples(state: &TrainState, eval_set: &CaptionedImageDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DteError::io(dir, e))?;
    let items = &eval_set.items[..eval_set.len().min(SAMPLES_PER_REPORT)];
    let tokens: Vec<_> = items.iter().map(|it| it.tokens[0].clone()).collect();
    let c = &state.config;
    let flags = apply_routing_schedule(state.epoch, &c.flags());
    let images = crate::eval::sample_images(&state.ema_model(), &flags, &tokens, Some(c.truncation_psi), c.seed)?;
    let mut listing = String::new();
    for (i, (img, it)) in images.iter().zip(items).enumerate() {
        crate::data::write_image(&dir.join(format!("{i:04}.png")), img)?;
        listing.push_str(&format!("{i:04}.png\t{}\n", it.captions[0]));
    }
    let p = dir.join("captions.txt");
    fs::write(&p, listing).map_err(|e| DteError::io(&p, e))
}

/// Trains from scratch (or from `resume`) inside `run_dir`.
pub fn train(config: &TrainConfig, run_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let rd = RunDirectory::create(run_dir)?;
    let (train_set, eval_set) = prepare_data(config)?;
    let mut state = match resume {
        Some(p) => {
            let mut s = crate::checkpoint::load_state(p, Some(&config.hash()))?;
            s.config = config.clone();
            s
        }
        None => TrainState::new(config.clone(), train_set.vocab.clone())?,
    };
    let cfg_path = rd.config_path();
    let snapshot = format!("# config hash {}\n{}", config.hash(), config.to_toml());
    fs::write(&cfg_path, snapshot).map_err(|e| DteError::io(&cfg_path, e))?;
    let log_path = rd.metrics_log();
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| DteError::io(&log_path, e))?;
    let ckpt_dir = rd.checkpoints();
    let reports = rd.reports();
    let samples = rd.samples();
    run_epochs(
        &mut state,
        &train_set,
        |s, b| {
            let rec = MetricsRecord {
                step: s.step,
                epoch: s.epoch,
                adv_g: b.adv_g,
                adv_d: b.adv_d,
                cont_g: b.cont_g,
                cont_d: b.cont_d,
                ca_kl: b.ca_kl,
                magp: b.magp,
            };
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(log, "{line}").map_err(|e| DteError::io(&log_path, e))
        },
        |s| {
            let c = &s.config;
            if c.checkpoint_every > 0 && s.epoch % c.checkpoint_every == 0 {
                crate::checkpoint::save_state(s, &ckpt_dir.join(format!("epoch{:04}.ckpt", s.epoch)))?;
                crate::checkpoint::save_state(s, &ckpt_dir.join("latest.ckpt"))?;
            }
            if c.eval_every > 0 && s.epoch % c.eval_every == 0 {
                let report = crate::eval::evaluate_state(s, &eval_set)?;
                report.write_json(&reports.join(format!("epoch{:04}.json", s.epoch)))?;
                write_samples(s, &eval_set, &samples.join(format!("epoch{:04}", s.epoch)))?;
            }
            Ok(())
        },
    )?;
    let final_checkpoint = ckpt_dir.join("final.ckpt");
    let ema_checkpoint = ckpt_dir.join("ema.ckpt");
    crate::checkpoint::save_state(&state, &final_checkpoint)?;
    crate::checkpoint::save_ema(&state, &ema_checkpoint)?;
    Ok(TrainOutcome {
        final_checkpoint,
        ema_checkpoint,
        metrics_log: log_path,
        steps: state.step,
    })
}
