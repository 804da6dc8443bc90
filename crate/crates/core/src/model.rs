//! Model dimensions and construction of every parameter group.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::discriminator::{init_discriminator, trunk_channels};
use crate::error::{DteError, Result};
use crate::generator::{init_generator, n_upblocks};
use crate::nn::{Buffers, Group, ParamBuilder, ParamStore};
use crate::text::{init_encoder, partition_parameters, ParameterGroups, Side};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub resolution: usize,
    /// Base channel width.
    pub ch: usize,
    pub d_z: usize,
    /// Recurrent hidden size per direction; sentences have `2·d_h` dims.
    pub d_h: usize,
    /// Conditioning-augmentation output size.
    pub d_c: usize,
    pub vocab_size: usize,
    /// One text stack (the D-side one) serves both G and D.
    pub shared_embeddings: bool,
    /// Conditional adversarial head for the matching-aware gradient penalty.
    pub magp: bool,
}

impl ModelConfig {
    pub fn d_s(&self) -> usize {
        2 * self.d_h
    }

    /// Width of `f_G = concat(C_t, z)`.
    pub fn f_dim(&self) -> usize {
        self.d_c + self.d_z
    }

    /// Full-size dimensions: 256×256, ch 64, z ∈ R¹⁰⁰, 128 hidden units per
    /// direction, 200-dim condition.
    pub fn full_size(vocab_size: usize) -> Self {
        Self {
            resolution: 256,
            ch: 64,
            d_z: 100,
            d_h: 128,
            d_c: 200,
            vocab_size,
            shared_embeddings: false,
            magp: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        n_upblocks(self.resolution)?;
        trunk_channels(self.resolution, self.ch)?;
        for (name, v) in [("ch", self.ch), ("d_z", self.d_z), ("d_h", self.d_h), ("d_c", self.d_c)] {
            if v == 0 {
                return Err(DteError::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size <= 3 {
            return Err(DteError::Config("vocabulary has no words".into()));
        }
        Ok(())
    }
}

/// Parameters, buffers and dimensions of the whole system.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub buffers: Buffers,
}

impl Model {
    /// Initializes all groups. Each group draws from its own RNG stream so a
    /// group's initial values do not depend on which other groups exist.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut buffers = Buffers::default();
        let mut build = |group: Group, stream: u64, f: &dyn Fn(&mut ParamBuilder) -> Result<()>| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            let mut pb = ParamBuilder {
                store: &mut store,
                buffers: &mut buffers,
                rng: &mut rng,
                group,
            };
            f(&mut pb)
        };
        build(Group::Gen, 1, &|pb| init_generator(pb, &cfg))?;
        build(Group::Disc, 2, &|pb| init_discriminator(pb, &cfg))?;
        if !cfg.shared_embeddings {
            build(Group::EmbG, 3, &|pb| init_encoder(pb, Side::G, cfg.vocab_size, cfg.d_h))?;
        }
        build(Group::EmbD, 4, &|pb| init_encoder(pb, Side::D, cfg.vocab_size, cfg.d_h))?;
        Ok(Self { cfg, store, buffers })
    }

    pub fn groups(&self) -> Result<ParameterGroups> {
        partition_parameters(&self.store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(shared: bool) -> ModelConfig {
        ModelConfig {
            resolution: 16,
            ch: 2,
            d_z: 3,
            d_h: 2,
            d_c: 2,
            vocab_size: 8,
            shared_embeddings: shared,
            magp: false,
        }
    }

    #[test]
    fn default_model_has_four_groups() {
        let m = Model::new(tiny(false), 0).unwrap();
        let g = m.groups().unwrap();
        assert!(Group::ALL.iter().all(|&k| !g.names(k).is_empty()));
        let sum: usize = Group::ALL.iter().map(|&k| m.store.count_in(k)).sum();
        assert_eq!(sum, m.store.total_count());
    }

    #[test]
    fn shared_model_has_no_g_side_stack() {
        let m = Model::new(tiny(true), 0).unwrap();
        let g = m.groups().unwrap();
        assert!(g.names(Group::EmbG).is_empty());
        assert!(!g.names(Group::EmbD).is_empty());
    }

    #[test]
    fn group_init_is_independent_of_other_groups() {
        let a = Model::new(tiny(false), 5).unwrap();
        let b = Model::new(tiny(true), 5).unwrap();
        for (name, p) in b.store.iter() {
            assert_eq!(a.store.get(name).unwrap().value, p.value, "{name}");
        }
    }

    #[test]
    fn rejects_bad_dims() {
        let mut c = tiny(false);
        c.resolution = 24;
        assert!(Model::new(c, 0).is_err());
        let mut c = tiny(false);
        c.vocab_size = 3;
        assert!(Model::new(c, 0).is_err());
    }
}
