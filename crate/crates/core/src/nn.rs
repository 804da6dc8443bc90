//! Parameter storage, parameter groups and the shared layer primitives
//! (spectral-normalized linear/conv, batch statistics).

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;

use dte_autograd::{grad, no_grad, Array, Tensor};
use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DteError, Result};

/// LeakyReLU negative slope used throughout G and D.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Floor on batch-norm standard deviations.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// Running-statistics momentum for batch norm.
pub const BN_MOMENTUM: f64 = 0.1;

/// Owner of a trainable parameter. Each parameter belongs to exactly one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "gen")]
    Gen,
    #[serde(rename = "disc")]
    Disc,
    #[serde(rename = "emb_G")]
    EmbG,
    #[serde(rename = "emb_D")]
    EmbD,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Gen, Group::Disc, Group::EmbG, Group::EmbD];

    pub fn name(self) -> &'static str {
        match self {
            Group::Gen => "gen",
            Group::Disc => "disc",
            Group::EmbG => "emb_G",
            Group::EmbD => "emb_D",
        }
    }

    pub fn from_name(s: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.name() == s)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub group: Group,
    pub value: Array,
}

/// Named trainable parameters in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: Group, value: Array) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(DteError::Partition(format!("parameter `{name}` assigned twice")));
        }
        self.entries.insert(name, Param { group, value });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names_in(&self, group: Group) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.group == group)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Number of scalar parameters in `group`.
    pub fn count_in(&self, group: Group) -> usize {
        self.entries
            .values()
            .filter(|p| p.group == group)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Non-trainable state: spectral-norm power-iteration vectors and
/// batch-norm running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Buffers {
    entries: IndexMap<String, Array>,
}

impl Buffers {
    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.entries.iter()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Tensor leaves for every parameter in a store. Parameters of groups not
/// listed as trainable enter the graph as constants.
pub struct Vars {
    map: HashMap<String, Tensor>,
    order: Vec<(String, Group)>,
}

impl Vars {
    pub fn new(store: &ParamStore, trainable: &[Group]) -> Self {
        let mut map = HashMap::with_capacity(store.len());
        let mut order = Vec::with_capacity(store.len());
        for (name, p) in store.iter() {
            let t = if trainable.contains(&p.group) {
                Tensor::param(p.value.clone())
            } else {
                Tensor::constant(p.value.clone())
            };
            map.insert(name.clone(), t);
            order.push((name.clone(), p.group));
        }
        Self { map, order }
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// Gradient arrays of `loss` for every parameter in `groups`, zero where
    /// the loss does not reach the parameter.
    pub fn grads(&self, loss: &Tensor, groups: &[Group]) -> Result<Vec<(String, Array)>> {
        let selected: Vec<&(String, Group)> = self.order.iter().filter(|(_, g)| groups.contains(g)).collect();
        let tensors: Vec<&Tensor> = selected.iter().map(|(n, _)| &self.map[n]).collect();
        let gs = grad(loss, &tensors, false)?;
        Ok(selected
            .iter()
            .zip(gs)
            .zip(&tensors)
            .map(|(((n, _), g), t)| {
                let a = g.map(|g| g.to_array()).unwrap_or_else(|| Array::zeros(t.shape()));
                (n.clone(), a)
            })
            .collect())
    }
}

/// Forward-pass context: parameter leaves, mutable buffers and mode.
pub struct Ctx<'a> {
    pub vars: &'a Vars,
    buffers: RefCell<&'a mut Buffers>,
    pub mode: Mode,
}

impl<'a> Ctx<'a> {
    pub fn new(vars: &'a Vars, buffers: &'a mut Buffers, mode: Mode) -> Self {
        Self {
            vars,
            buffers: RefCell::new(buffers),
            mode,
        }
    }

    pub fn param(&self, name: &str) -> Tensor {
        self.vars.get(name).clone()
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains(name)
    }

    pub fn buffer(&self, name: &str) -> Array {
        self.buffers
            .borrow()
            .get(name)
            .unwrap_or_else(|| panic!("no buffer named `{name}`"))
            .clone()
    }

    pub fn set_buffer(&self, name: &str, value: Array) {
        self.buffers.borrow_mut().insert(name, value);
    }

    /// Spectral-normalized view of weight `name`: `W / (uᵀ W v)`. In train
    /// mode the stored `u`, `v` first advance by one power iteration.
    pub fn sn_weight(&self, name: &str) -> Tensor {
        let w = self.param(name);
        let rows = w.dim(0);
        let cols = w.numel() / rows;
        let (u_name, v_name) = (format!("{name}.sn_u"), format!("{name}.sn_v"));
        let (u, v) = if self.mode == Mode::Train {
            let (u, v) = power_iteration(w.data(), rows, cols, self.buffer(&u_name).data());
            self.set_buffer(&u_name, Array::new(&[rows], u.clone()));
            self.set_buffer(&v_name, Array::new(&[cols], v.clone()));
            (u, v)
        } else {
            (self.buffer(&u_name).into_data(), self.buffer(&v_name).into_data())
        };
        let v = Tensor::from_vec(&[cols, 1], v);
        let u = Tensor::from_vec(&[rows, 1], u);
        // an all-zero weight has σ = 0; the floor keeps it exactly zero
        let sigma = w.reshape(&[rows, cols]).matmul(&v).mul(&u).sum().clamp_min(1e-12);
        w.div(&sigma)
    }

    /// `x · Wᵀ + b` with spectral-normalized `W` (`out×in`).
    pub fn linear(&self, prefix: &str, x: &Tensor) -> Tensor {
        let w = self.sn_weight(&format!("{prefix}.w"));
        x.matmul(&w.t()).add(&self.param(&format!("{prefix}.b")))
    }

    /// Same-padded stride-1 convolution with spectral-normalized kernel and bias.
    pub fn conv(&self, prefix: &str, x: &Tensor) -> Tensor {
        let w = self.sn_weight(&format!("{prefix}.w"));
        let b = self.param(&format!("{prefix}.b"));
        let o = b.dim(0);
        x.conv2d(&w).add(&b.reshape(&[1, o, 1, 1]))
    }

    /// Per-channel batch normalization without affine terms. Train mode uses
    /// batch statistics and updates the running estimates; eval mode uses
    /// the running estimates.
    pub fn batch_norm(&self, prefix: &str, x: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = dims4(x)?;
        let count = n * h * w;
        let mean_name = format!("{prefix}.running_mean");
        let var_name = format!("{prefix}.running_var");
        match self.mode {
            Mode::Train => {
                if count < 2 {
                    return Err(DteError::Shape(format!(
                        "batch norm `{prefix}` needs at least 2 values per channel, got {count}"
                    )));
                }
                let (normed, mean, var) = normalize_batch(x);
                let unbias = count as f64 / (count as f64 - 1.0);
                let mut rm = self.buffer(&mean_name);
                let mut rv = self.buffer(&var_name);
                for ch in 0..c {
                    rm.data_mut()[ch] = (1.0 - BN_MOMENTUM) * rm.data()[ch] + BN_MOMENTUM * mean.data()[ch];
                    rv.data_mut()[ch] = (1.0 - BN_MOMENTUM) * rv.data()[ch] + BN_MOMENTUM * var.data()[ch] * unbias;
                }
                self.set_buffer(&mean_name, rm);
                self.set_buffer(&var_name, rv);
                Ok(normed)
            }
            Mode::Eval => {
                let rm = Tensor::constant(self.buffer(&mean_name).reshaped(&[1, c, 1, 1]));
                let sd = self
                    .buffer(&var_name)
                    .map(|v| v.max(SIGMA_FLOOR * SIGMA_FLOOR).sqrt())
                    .reshaped(&[1, c, 1, 1]);
                Ok(x.sub(&rm).div(&Tensor::constant(sd)))
            }
        }
    }
}

/// `(x − μ)/σ` with per-channel batch statistics over (N, H, W); σ is floored
/// at [`SIGMA_FLOOR`]. Returns the normalized tensor and the (biased) mean and
/// variance values.
pub fn normalize_batch(x: &Tensor) -> (Tensor, Array, Array) {
    let mean = x.mean_keep(&[0, 2, 3]);
    let centered = x.sub(&mean);
    let var = centered.square().mean_keep(&[0, 2, 3]);
    let sd = var.clamp_min(SIGMA_FLOOR * SIGMA_FLOOR).sqrt();
    let c = x.dim(1);
    (
        centered.div(&sd),
        mean.to_array().reshaped(&[c]),
        var.to_array().reshaped(&[c]),
    )
}

pub fn dims4(x: &Tensor) -> Result<[usize; 4]> {
    match x.shape() {
        &[n, c, h, w] => Ok([n, c, h, w]),
        s => Err(DteError::Shape(format!("expected N×C×H×W, got {s:?}"))),
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
}

/// One power-iteration step on the `rows×cols` matrix `w`, starting from `u`.
pub fn power_iteration(w: &[f64], rows: usize, cols: usize, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; cols];
    for r in 0..rows {
        let ur = u[r];
        for (vc, wv) in v.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *vc += wv * ur;
        }
    }
    normalize(&mut v);
    let mut u2: Vec<f64> = (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().zip(&v).map(|(a, b)| a * b).sum())
        .collect();
    normalize(&mut u2);
    (u2, v)
}

/// Largest singular value estimate by repeated power iteration.
pub fn largest_singular_value(w: &[f64], rows: usize, cols: usize, iters: usize) -> f64 {
    let mut u = vec![1.0 / (rows as f64).sqrt(); rows];
    let mut v = vec![0.0; cols];
    for _ in 0..iters {
        let (u2, v2) = power_iteration(w, rows, cols, &u);
        u = u2;
        v = v2;
    }
    (0..rows)
        .map(|r| {
            u[r] * w[r * cols..(r + 1) * cols]
                .iter()
                .zip(&v)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        })
        .sum()
}

/// Helper that creates parameters (and their spectral-norm buffers) for one
/// parameter group.
pub struct ParamBuilder<'a> {
    pub store: &'a mut ParamStore,
    pub buffers: &'a mut Buffers,
    pub rng: &'a mut ChaCha8Rng,
    pub group: Group,
}

impl ParamBuilder<'_> {
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<()> {
        let rng = &mut *self.rng;
        let a = Array::from_fn(shape, |_| rng.random_range(-bound..=bound));
        self.store.insert(name, self.group, a)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.store.insert(name, self.group, Array::full(shape, value))
    }

    fn sn_buffers(&mut self, name: &str, rows: usize, cols: usize) {
        let rng = &mut *self.rng;
        let mut u: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        normalize(&mut u);
        let w = self
            .store
            .get(name)
            .expect("weight just inserted")
            .value
            .data()
            .to_vec();
        let (u, v) = power_iteration(&w, rows, cols, &u);
        self.buffers.insert(format!("{name}.sn_u"), Array::new(&[rows], u));
        self.buffers.insert(format!("{name}.sn_v"), Array::new(&[cols], v));
    }

    /// Spectral-normalized linear layer `prefix.w` (`out×in`), `prefix.b`.
    pub fn linear(&mut self, prefix: &str, input: usize, output: usize) -> Result<()> {
        let name = format!("{prefix}.w");
        self.uniform(&name, &[output, input], 1.0 / (input as f64).sqrt())?;
        self.sn_buffers(&name, output, input);
        self.constant(&format!("{prefix}.b"), &[output], 0.0)
    }

    /// Spectral-normalized `k×k` convolution `prefix.w` (`out×in×k×k`), `prefix.b`.
    pub fn conv(&mut self, prefix: &str, input: usize, output: usize, k: usize) -> Result<()> {
        let name = format!("{prefix}.w");
        let fan_in = input * k * k;
        self.uniform(&name, &[output, input, k, k], 1.0 / (fan_in as f64).sqrt())?;
        self.sn_buffers(&name, output, fan_in);
        self.constant(&format!("{prefix}.b"), &[output], 0.0)
    }

    pub fn batch_norm_buffers(&mut self, prefix: &str, channels: usize) {
        self.buffers
            .insert(format!("{prefix}.running_mean"), Array::zeros(&[channels]));
        self.buffers
            .insert(format!("{prefix}.running_var"), Array::ones(&[channels]));
    }
}

/// Spectral-normalized values of every weight with power-iteration buffers,
/// evaluated with the stored vectors (no iteration).
pub fn normalized_weights(store: &ParamStore, buffers: &Buffers) -> Vec<(String, Array)> {
    let vars = Vars::new(store, &[]);
    let mut bufs = buffers.clone();
    let ctx = Ctx::new(&vars, &mut bufs, Mode::Eval);
    no_grad(|| {
        store
            .iter()
            .filter(|(n, _)| buffers.get(&format!("{n}.sn_u")).is_some())
            .map(|(n, _)| (n.clone(), ctx.sn_weight(n).to_array()))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn power_iteration_converges_to_top_singular_value() {
        // diag(3, 1) rotated: singular values 3 and 1.
        let w = [3.0, 0.0, 0.0, 1.0];
        let s = largest_singular_value(&w, 2, 2, 50);
        assert!((s - 3.0).abs() < 1e-9);
    }

    #[test]
    fn duplicate_parameter_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("a", Group::Gen, Array::zeros(&[1])).unwrap();
        let err = store.insert("a", Group::Disc, Array::zeros(&[1])).unwrap_err();
        assert!(err.to_string().contains("`a`"));
    }

    #[test]
    fn sn_linear_has_unit_spectral_norm_after_iterations() {
        let mut store = ParamStore::new();
        let mut buffers = Buffers::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        ParamBuilder {
            store: &mut store,
            buffers: &mut buffers,
            rng: &mut rng,
            group: Group::Disc,
        }
        .linear("fc", 6, 4)
        .unwrap();
        let vars = Vars::new(&store, &[]);
        let x = Tensor::zeros(&[1, 6]);
        for _ in 0..30 {
            let ctx = Ctx::new(&vars, &mut buffers, Mode::Train);
            ctx.linear("fc", &x);
        }
        for (_, w) in normalized_weights(&store, &buffers) {
            let s = largest_singular_value(w.data(), 4, 6, 200);
            assert!((s - 1.0).abs() < 1e-2, "sigma {s}");
        }
    }

    #[test]
    fn group_names_round_trip() {
        for g in Group::ALL {
            assert_eq!(Group::from_name(g.name()), Some(g));
        }
    }
}
