//! Sampling and metrics: FID, Inception Score, R-precision and the feature
//! extractors they run on.

use std::fs;
use std::path::Path;

use dte_autograd::{no_grad, Array, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{tokenize, CaptionedImageDataset, TokenBatch, TokenSequence, Vocabulary};
use crate::discriminator::{contrastive_branch, trunk};
use crate::error::{DteError, Result};
use crate::losses::{apply_routing_schedule, RoutingFlags};
use crate::model::Model;
use crate::nn::{dims4, Ctx, Mode, Vars, LEAKY_SLOPE};
use crate::step::{encode_batch, route_sentences, run_generator, Draws};
use crate::trainer::TrainState;

/// Images are generated and featurized in chunks of this many items.
const EVAL_CHUNK: usize = 16;

fn check_features(a: &Array, what: &str) -> Result<(usize, usize)> {
    if a.ndim() != 2 || a.shape()[0] < 2 {
        return Err(DteError::Shape(format!(
            "{what} must be n×d with n ≥ 2, got {:?}",
            a.shape()
        )));
    }
    if !a.all_finite() {
        return Err(DteError::NonFinite(format!("{what} contain non-finite values")));
    }
    Ok((a.shape()[0], a.shape()[1]))
}

fn mean_cov(a: &Array) -> (nalgebra::DVector<f64>, DMatrix<f64>) {
    let (n, d) = (a.shape()[0], a.shape()[1]);
    let m = DMatrix::from_row_slice(n, d, a.data());
    let mean = m.row_mean().transpose();
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature sets:
/// `‖μ_A − μ_B‖² + tr(C_A + C_B − 2 (C_A C_B)^½)`. The cross term is taken
/// as `tr((√C_A C_B √C_A)^½)`, which is symmetric positive semidefinite.
pub fn fid(a: &Array, b: &Array) -> Result<f64> {
    let (na, da) = check_features(a, "features A")?;
    let (nb, db) = check_features(b, "features B")?;
    if da != db {
        return Err(DteError::Shape(format!("feature widths differ: {da} vs {db}")));
    }
    if na <= da || nb <= db {
        log::warn!("FID with fewer samples than feature dims ({na}, {nb} vs {da}); covariances are singular");
    }
    let (ma, ca) = mean_cov(a);
    let (mb, cb) = mean_cov(b);
    let sa = sym_sqrt(&ca);
    let cross = sym_sqrt(&(&sa * &cb * &sa)).trace();
    let d = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross;
    if !d.is_finite() {
        return Err(DteError::NonFinite("FID".into()));
    }
    Ok(d)
}

/// `exp(mean_i KL(p_i ‖ p̄))` per split; returns mean and population
/// standard deviation over splits.
pub fn inception_score(probs: &Array, splits: usize) -> Result<(f64, f64)> {
    if probs.ndim() != 2 || probs.shape()[0] == 0 {
        return Err(DteError::Shape(format!(
            "class probabilities must be n×C, got {:?}",
            probs.shape()
        )));
    }
    let (n, c) = (probs.shape()[0], probs.shape()[1]);
    if splits == 0 || splits > n {
        return Err(DteError::Invalid(format!("splits must lie in 1..={n}, got {splits}")));
    }
    for i in 0..n {
        let row = probs.row(i);
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&p| !(0.0..=1.0 + 1e-12).contains(&p)) {
            return Err(DteError::Invalid(format!(
                "row {i} is not a probability vector (sum {s})"
            )));
        }
    }
    let scores: Vec<f64> = (0..splits)
        .map(|k| {
            let (lo, hi) = (k * n / splits, (k + 1) * n / splits);
            let m = (hi - lo) as f64;
            let marginal: Vec<f64> = (0..c)
                .map(|j| (lo..hi).map(|i| probs.row(i)[j]).sum::<f64>() / m)
                .collect();
            let kl: f64 = (lo..hi)
                .map(|i| {
                    probs
                        .row(i)
                        .iter()
                        .zip(&marginal)
                        .filter(|(p, _)| **p > 0.0)
                        .map(|(p, q)| p * (p / q).ln())
                        .sum::<f64>()
                })
                .sum::<f64>()
                / m;
            kl.exp()
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

/// Fraction of images whose true text (`texts[truth[i]]`) beats
/// `pool_size − 1` randomly drawn other texts by cosine similarity. Ties
/// count as misses.
pub fn r_precision_from_features(
    images: &Array,
    texts: &Array,
    truth: &[usize],
    pool_size: usize,
    seed: u64,
) -> Result<f64> {
    if pool_size < 2 {
        return Err(DteError::Invalid(format!(
            "pool_size must be at least 2, got {pool_size}"
        )));
    }
    let m = texts.shape()[0];
    if m < pool_size {
        return Err(DteError::Invalid(format!(
            "R-precision needs {pool_size} distinct captions, only {m} available"
        )));
    }
    let n = images.shape()[0];
    if truth.len() != n || images.shape()[1] != texts.shape()[1] {
        return Err(DteError::Shape("image/text feature sets disagree".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for (i, &t) in truth.iter().enumerate() {
        let f = images.row(i);
        let true_score = cosine(f, texts.row(t));
        // draw from the m − 1 other texts
        let others = sample(&mut rng, m - 1, pool_size - 1);
        let beaten = others
            .iter()
            .map(|j| if j >= t { j + 1 } else { j })
            .all(|j| cosine(f, texts.row(j)) < true_score);
        hits += beaten as usize;
    }
    Ok(hits as f64 / n as f64)
}

/// Maps images (`N×3×R×R`) to feature vectors.
pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn features(&self, images: &Array) -> Result<Array>;
}

/// Frozen convolutional net with seeded Gaussian weights: three
/// conv-LeakyReLU-pool stages, then per-channel spatial mean and standard
/// deviation.
pub struct RandomConvExtractor {
    weights: Vec<Array>,
}

impl RandomConvExtractor {
    pub const WIDTHS: [usize; 3] = [16, 32, 32];

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let weights = Self::WIDTHS
            .iter()
            .map(|&cout| {
                let scale = (2.0 / (cin * 9) as f64).sqrt();
                let w = Array::from_fn(&[cout, cin, 3, 3], |_| scale * rng.sample::<f64, _>(StandardNormal));
                cin = cout;
                w
            })
            .collect();
        Self { weights }
    }

    pub fn dim(&self) -> usize {
        2 * Self::WIDTHS[Self::WIDTHS.len() - 1]
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn name(&self) -> &str {
        "random-conv"
    }

    fn features(&self, images: &Array) -> Result<Array> {
        no_grad(|| {
            let mut x = Tensor::constant(images.clone());
            let [n, _, _, _] = dims4(&x)?;
            for w in &self.weights {
                x = x.conv2d(&Tensor::constant(w.clone())).leaky_relu(LEAKY_SLOPE);
                if x.dim(2) >= 2 {
                    x = x.avg_pool2();
                }
            }
            let mean = x.mean_keep(&[2, 3]);
            let sd = x.sub(&mean).square().mean_keep(&[2, 3]).add_scalar(1e-12).sqrt();
            let c = x.dim(1);
            let f = dte_autograd::concat(&[mean.reshape(&[n, c]), sd.reshape(&[n, c])], 1);
            Ok(f.to_array())
        })
    }
}

/// Softmax over a fixed random linear head on top of an extractor; a
/// stand-in classifier for Inception Score at small scale.
pub struct RandomClassifier {
    pub extractor: RandomConvExtractor,
    head: Array,
}

impl RandomClassifier {
    pub fn new(seed: u64, classes: usize) -> Self {
        let extractor = RandomConvExtractor::new(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc1a5);
        let d = extractor.dim();
        let head = Array::from_fn(&[d, classes], |_| {
            rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt()
        });
        Self { extractor, head }
    }

    pub fn probabilities(&self, images: &Array) -> Result<Array> {
        let f = self.extractor.features(images)?;
        let (n, d) = (f.shape()[0], f.shape()[1]);
        // standardize features over the batch so the head sees unit-scale inputs
        let c = self.head.shape()[1];
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = f.row(i);
            let logits: Vec<f64> = (0..c)
                .map(|k| (0..d).map(|j| row[j] * self.head.data()[j * c + k]).sum())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for k in 0..c {
                out[i * c + k] = (logits[k] - mx).exp() / z;
            }
        }
        Ok(Array::new(&[n, c], out))
    }
}

/// Image features from the discriminator's contrastive branch (eval mode).
pub struct DiscriminatorExtractor<'a> {
    pub model: &'a Model,
}

impl FeatureExtractor for DiscriminatorExtractor<'_> {
    fn name(&self) -> &str {
        "discriminator"
    }

    fn features(&self, images: &Array) -> Result<Array> {
        let vars = Vars::new(&self.model.store, &[]);
        let mut buffers = self.model.buffers.clone();
        let ctx = Ctx::new(&vars, &mut buffers, Mode::Eval);
        no_grad(|| {
            let h = trunk(&ctx, &self.model.cfg, &Tensor::constant(images.clone()))?;
            Ok(contrastive_branch(&ctx, &h).to_array())
        })
    }
}

/// User-supplied feature function.
pub struct ClosureExtractor<F: Fn(&Array) -> Result<Array>> {
    pub name: String,
    pub f: F,
}

impl<F: Fn(&Array) -> Result<Array>> FeatureExtractor for ClosureExtractor<F> {
    fn name(&self) -> &str {
        &self.name
    }

    fn features(&self, images: &Array) -> Result<Array> {
        (self.f)(images)
    }
}

fn features_chunked(ex: &dyn FeatureExtractor, images: &[Array]) -> Result<Array> {
    let mut rows = Vec::new();
    let mut d = 0;
    for chunk in images.chunks(EVAL_CHUNK) {
        let f = ex.features(&Array::stack(chunk))?;
        d = f.shape()[1];
        rows.extend_from_slice(f.data());
    }
    Ok(Array::new(&[images.len(), d], rows))
}

/// Generates one image per caption with `model` in eval mode. Latents are
/// truncated at `psi`; all randomness derives from `seed`.
pub fn sample_images(
    model: &Model,
    flags: &RoutingFlags,
    captions: &[TokenSequence],
    psi: Option<f64>,
    seed: u64,
) -> Result<Vec<Array>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vars = Vars::new(&model.store, &[]);
    let mut buffers = model.buffers.clone();
    let ctx = Ctx::new(&vars, &mut buffers, Mode::Eval);
    let mut out = Vec::with_capacity(captions.len());
    for chunk in captions.chunks(EVAL_CHUNK) {
        let refs: Vec<&TokenSequence> = chunk.iter().collect();
        let tb = TokenBatch::from_sequences(&refs)?;
        let batch = crate::data::Batch {
            images: Array::zeros(&[chunk.len(), 3, 1, 1]),
            tokens_g: tb.clone(),
            tokens_d: tb,
            item_indices: (0..chunk.len()).collect(),
        };
        let draws = Draws::sample(&mut rng, chunk.len(), &model.cfg, psi)?;
        let imgs = no_grad(|| -> Result<Array> {
            let emb = encode_batch(&ctx, &batch, flags)?;
            let routed = route_sentences(&emb, flags);
            Ok(run_generator(&ctx, &model.cfg, &routed, &draws)?.images.to_array())
        })?;
        out.extend((0..chunk.len()).map(|i| imgs.index0(i)));
    }
    Ok(out)
}

/// Tokenizes free-text captions with a model's vocabulary.
pub fn tokenize_captions(captions: &[String], vocab: &Vocabulary, max_len: usize) -> Result<Vec<TokenSequence>> {
    captions.iter().map(|c| tokenize(c, vocab, max_len)).collect()
}

/// D-side sentence features (after routing) for each caption.
fn sentence_features(model: &Model, flags: &RoutingFlags, captions: &[TokenSequence]) -> Result<Array> {
    let vars = Vars::new(&model.store, &[]);
    let mut buffers = model.buffers.clone();
    let ctx = Ctx::new(&vars, &mut buffers, Mode::Eval);
    let mut rows = Vec::new();
    for chunk in captions.chunks(64) {
        let refs: Vec<&TokenSequence> = chunk.iter().collect();
        let tb = TokenBatch::from_sequences(&refs)?;
        let batch = crate::data::Batch {
            images: Array::zeros(&[chunk.len(), 3, 1, 1]),
            tokens_g: tb.clone(),
            tokens_d: tb,
            item_indices: (0..chunk.len()).collect(),
        };
        let s = no_grad(|| -> Result<Array> {
            let emb = encode_batch(&ctx, &batch, flags)?;
            Ok(route_sentences(&emb, flags).d_sent.to_array())
        })?;
        rows.extend_from_slice(s.data());
    }
    Ok(Array::new(&[captions.len(), model.cfg.d_s()], rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub r_precision: f64,
    pub fid: f64,
    pub is_mean: Option<f64>,
    pub is_std: Option<f64>,
    pub config_hash: String,
    pub n_samples: usize,
    pub pool_size: usize,
    pub seed: u64,
    pub extractor: String,
}

impl MetricsReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, s + "\n").map_err(|e| DteError::io(path, e))
    }
}

/// Evaluation settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub pool_size: usize,
    pub seed: u64,
    pub psi: Option<f64>,
    /// Inception-Score classes of the random classifier (0 skips IS).
    pub is_classes: usize,
    pub is_splits: usize,
}

/// R-precision, FID (random-conv features) and IS of `model` on `eval_set`.
/// Each item contributes its first caption as the query; the candidate
/// texts are all distinct captions of the set.
pub fn evaluate_model(
    model: &Model,
    flags: &RoutingFlags,
    eval_set: &CaptionedImageDataset,
    opts: &EvalOptions,
    config_hash: &str,
) -> Result<MetricsReport> {
    if eval_set.len() < 2 {
        return Err(DteError::Invalid("evaluation needs at least 2 items".into()));
    }
    let mut texts: Vec<&TokenSequence> = Vec::new();
    let mut truth = Vec::with_capacity(eval_set.len());
    for item in &eval_set.items {
        for (k, t) in item.tokens.iter().enumerate() {
            let pos = match texts.iter().position(|u| *u == t) {
                Some(p) => p,
                None => {
                    texts.push(t);
                    texts.len() - 1
                }
            };
            if k == 0 {
                truth.push(pos);
            }
        }
    }
    if texts.len() < opts.pool_size {
        return Err(DteError::Invalid(format!(
            "R-precision pool of {} needs that many distinct captions; evaluation set has {}",
            opts.pool_size,
            texts.len()
        )));
    }
    let queries: Vec<TokenSequence> = eval_set.items.iter().map(|i| i.tokens[0].clone()).collect();
    let fakes = sample_images(model, flags, &queries, opts.psi, opts.seed)?;
    let disc = DiscriminatorExtractor { model };
    let f_v = features_chunked(&disc, &fakes)?;
    let owned: Vec<TokenSequence> = texts.into_iter().cloned().collect();
    let s_d = sentence_features(model, flags, &owned)?;
    let r = r_precision_from_features(&f_v, &s_d, &truth, opts.pool_size, opts.seed)?;

    let random = RandomConvExtractor::new(opts.seed);
    let reals: Vec<Array> = eval_set.items.iter().map(|i| i.image.clone()).collect();
    let fid_value = fid(&features_chunked(&random, &reals)?, &features_chunked(&random, &fakes)?)?;

    let (is_mean, is_std) = if opts.is_classes > 0 {
        let clf = RandomClassifier::new(opts.seed, opts.is_classes);
        let mut probs = Vec::new();
        for chunk in fakes.chunks(EVAL_CHUNK) {
            probs.extend_from_slice(clf.probabilities(&Array::stack(chunk))?.data());
        }
        let p = Array::new(&[fakes.len(), opts.is_classes], probs);
        let (m, s) = inception_score(&p, opts.is_splits.min(fakes.len()))?;
        (Some(m), Some(s))
    } else {
        (None, None)
    };
    Ok(MetricsReport {
        r_precision: r,
        fid: fid_value,
        is_mean,
        is_std,
        config_hash: config_hash.to_owned(),
        n_samples: fakes.len(),
        pool_size: opts.pool_size,
        seed: opts.seed,
        extractor: random.name().to_owned(),
    })
}

/// Pool size actually usable on `eval_set` given a requested size.
pub fn effective_pool_size(requested: usize, eval_set: &CaptionedImageDataset) -> usize {
    let mut distinct: Vec<&TokenSequence> = Vec::new();
    for t in eval_set.items.iter().flat_map(|i| i.tokens.iter()) {
        if !distinct.contains(&t) {
            distinct.push(t);
        }
    }
    requested.min(distinct.len())
}

/// Evaluates the EMA model of a training state under its current flags.
pub fn evaluate_state(state: &TrainState, eval_set: &CaptionedImageDataset) -> Result<MetricsReport> {
    let c = &state.config;
    let flags = apply_routing_schedule(state.epoch, &c.flags());
    let opts = EvalOptions {
        pool_size: effective_pool_size(c.r_pool_size, eval_set),
        seed: c.seed ^ 0xe7a1,
        psi: Some(c.truncation_psi),
        is_classes: 10,
        is_splits: 1,
    };
    evaluate_model(&state.ema_model(), &flags, eval_set, &opts, &c.hash())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fid_identity_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Array::from_fn(&[200, 3], |_| rng.sample(StandardNormal));
        let b = Array::from_fn(&[150, 3], |_| 0.5 + 2.0 * rng.sample::<f64, _>(StandardNormal));
        assert!(fid(&a, &a).unwrap().abs() < 1e-9);
        assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-8);
        assert!(fid(&a, &Array::zeros(&[4, 2])).is_err());
    }

    #[test]
    fn inception_score_closed_forms() {
        let uniform = Array::full(&[6, 4], 0.25);
        assert!((inception_score(&uniform, 1).unwrap().0 - 1.0).abs() < 1e-12);
        let onehot = Array::from_fn(&[4, 4], |k| if k / 4 == k % 4 { 1.0 } else { 0.0 });
        assert!((inception_score(&onehot, 1).unwrap().0 - 4.0).abs() < 1e-12);
        let same = Array::from_fn(&[5, 3], |k| if k % 3 == 1 { 1.0 } else { 0.0 });
        assert!((inception_score(&same, 1).unwrap().0 - 1.0).abs() < 1e-12);
        assert!(inception_score(&Array::full(&[2, 2], 0.7), 1).is_err());
    }

    #[test]
    fn planted_r_precision_is_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let texts = Array::from_fn(&[30, 8], |_| rng.sample(StandardNormal));
        let truth: Vec<usize> = (0..30).collect();
        let r = r_precision_from_features(&texts, &texts, &truth, 10, 0).unwrap();
        assert_eq!(r, 1.0);
        assert!(r_precision_from_features(&texts, &texts, &truth, 1, 0).is_err());
        assert!(r_precision_from_features(&texts, &texts, &truth, 31, 0).is_err());
    }

    #[test]
    fn random_extractor_is_deterministic() {
        let x = Array::from_fn(&[2, 3, 16, 16], |k| ((k * 37) % 11) as f64 / 5.0 - 1.0);
        let a = RandomConvExtractor::new(3).features(&x).unwrap();
        let b = RandomConvExtractor::new(3).features(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[2, 64]);
    }
}
