//! Training configuration: a flat TOML schema with defaults for every key.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{CaptionPolicy, DEFAULT_MAX_LEN};
use crate::error::{DteError, Result};
use crate::losses::{LossWeights, RoutingFlags};
use crate::model::ModelConfig;

/// Where training images and captions come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Manifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub resolution: usize,
    pub ch: usize,
    pub d_z: usize,
    pub d_h: usize,
    pub d_c: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
    pub symmetric_contrastive: bool,
    pub ema_decay: f64,

    pub sd_to_g: bool,
    pub sg_to_d: bool,
    pub shared_embeddings: bool,
    pub g_loss_to_shared: bool,
    pub sg_to_d_after_epoch: Option<usize>,
    pub g_loss_after_epoch: Option<usize>,

    pub magp: bool,
    pub magp_k: f64,
    pub magp_p: f64,

    pub dataset: DatasetKind,
    pub synthetic_items: usize,
    pub synthetic_seed: u64,
    pub manifest: Option<PathBuf>,
    pub caption_policy: CaptionPolicy,
    pub max_len: usize,
    pub min_freq: usize,
    /// Items held out from training for evaluation.
    pub eval_items: usize,

    pub truncation_psi: f64,
    pub r_pool_size: usize,
    /// Evaluate every this many epochs (0 disables periodic evaluation).
    pub eval_every: usize,
    /// Checkpoint every this many epochs (0 writes only the final checkpoint).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            resolution: 64,
            ch: 16,
            d_z: 32,
            d_h: 32,
            d_c: 32,
            batch_size: 16,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epochs: 60,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            tau: 0.1,
            symmetric_contrastive: false,
            ema_decay: 0.999,
            sd_to_g: true,
            sg_to_d: false,
            shared_embeddings: false,
            g_loss_to_shared: false,
            sg_to_d_after_epoch: None,
            g_loss_after_epoch: None,
            magp: false,
            magp_k: 2.0,
            magp_p: 6.0,
            dataset: DatasetKind::Synthetic,
            synthetic_items: 512,
            synthetic_seed: 7,
            manifest: None,
            caption_policy: CaptionPolicy::Single,
            max_len: DEFAULT_MAX_LEN,
            min_freq: 1,
            eval_items: 64,
            truncation_psi: 2.0,
            r_pool_size: 100,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }
}

/// Keys that only steer the run (length, cadence) and are left out of the
/// config hash so a run can be extended on resume.
const RUN_CONTROL_KEYS: [&str; 3] = ["epochs", "eval_every", "checkpoint_every"];

impl TrainConfig {
    /// Full-size hyperparameters: 256×256, ch 64, batch 24, 600 epochs.
    pub fn full_size() -> Self {
        Self {
            resolution: 256,
            ch: 64,
            d_z: 100,
            d_h: 128,
            d_c: 200,
            batch_size: 24,
            epochs: 600,
            ..Self::default()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| DteError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DteError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| DteError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn flags(&self) -> RoutingFlags {
        RoutingFlags {
            sd_to_g: self.sd_to_g,
            sg_to_d: self.sg_to_d,
            shared_embeddings: self.shared_embeddings,
            g_loss_to_shared: self.g_loss_to_shared,
            sg_to_d_after_epoch: self.sg_to_d_after_epoch,
            g_loss_after_epoch: self.g_loss_after_epoch,
        }
    }

    pub fn set_flags(&mut self, f: &RoutingFlags) {
        self.sd_to_g = f.sd_to_g;
        self.sg_to_d = f.sg_to_d;
        self.shared_embeddings = f.shared_embeddings;
        self.g_loss_to_shared = f.g_loss_to_shared;
        self.sg_to_d_after_epoch = f.sg_to_d_after_epoch;
        self.g_loss_after_epoch = f.g_loss_after_epoch;
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            tau: self.tau,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            resolution: self.resolution,
            ch: self.ch,
            d_z: self.d_z,
            d_h: self.d_h,
            d_c: self.d_c,
            vocab_size,
            shared_embeddings: self.shared_embeddings,
            magp: self.magp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DteError::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{k} must lie in [0, 1), got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1], got {}", self.ema_decay));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.magp && !(self.magp_k > 0.0 && self.magp_p > 0.0) {
            return bad("magp_k and magp_p must be positive".into());
        }
        if !(self.truncation_psi > 0.0) {
            return bad(format!("truncation_psi must be positive, got {}", self.truncation_psi));
        }
        if self.dataset == DatasetKind::Manifest && self.manifest.is_none() {
            return bad("dataset = \"manifest\" needs a manifest path".into());
        }
        if self.max_len == 0 {
            return bad("max_len must be positive".into());
        }
        self.flags().validate()?;
        // vocabulary size is not known yet; any value above the specials passes here
        self.model_config(4).validate()
    }

    /// SHA-256 over the canonical JSON of every key except run-control ones.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            for k in RUN_CONTROL_KEYS {
                obj.remove(k);
            }
        }
        let canon = serde_json::to_string(&v).expect("json value serializes");
        hex(&Sha256::digest(canon.as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
