//! Captions, vocabularies, image datasets and minibatching.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use dte_autograd::{par, Array};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DteError, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const EOS_ID: usize = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<unk>", "<eos>"];

/// Default caption length cap, in tokens (including the end marker).
pub const DEFAULT_MAX_LEN: usize = 18;

/// Word-to-id mapping. Ids 0..3 are reserved for pad/unk/eos.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(mut self) -> Self {
        self.index = self.words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        self
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied().filter(|&i| i >= SPECIALS.len())
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Non-special words in id order.
    pub fn words(&self) -> &[String] {
        &self.words[SPECIALS.len()..]
    }
}

/// Lowercases and strips punctuation, then splits on whitespace.
pub fn normalize_caption(caption: &str) -> Vec<String> {
    caption
        .to_lowercase()
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// Builds a vocabulary ordered by (frequency desc, word asc). Words seen fewer
/// than `min_freq` times are left out and will map to unk.
pub fn build_vocab<S: AsRef<str>>(captions: &[S], min_freq: usize) -> Result<Vocabulary> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for c in captions {
        for w in normalize_caption(c.as_ref()) {
            *counts.entry(w).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(DteError::Invalid(
            "cannot build a vocabulary from an empty corpus".into(),
        ));
    }
    let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, n)| *n >= min_freq.max(1)).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let words = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(kept.into_iter().map(|(w, _)| w))
        .collect();
    Ok(Vocabulary::from_words(words))
}

/// Integer-encoded caption. `ids` may carry trailing pads beyond `length`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<usize>,
    length: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        let length = ids.iter().rposition(|&i| i != PAD_ID).map_or(0, |p| p + 1);
        if length == 0 {
            return Err(DteError::Invalid("token sequence has length 0".into()));
        }
        if ids[..length].contains(&PAD_ID) {
            return Err(DteError::Invalid("pad id inside a token sequence".into()));
        }
        Ok(Self { ids, length })
    }

    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    /// The valid (non-pad) ids.
    pub fn tokens(&self) -> &[usize] {
        &self.ids[..self.length]
    }

    /// Same tokens padded (or trimmed of pads) to `width`.
    pub fn padded(&self, width: usize) -> Vec<usize> {
        assert!(width >= self.length);
        let mut v = self.tokens().to_vec();
        v.resize(width, PAD_ID);
        v
    }
}

/// Maps a caption to ids, truncating to `max_len` and appending eos when
/// there is room. Unknown words map to unk.
pub fn tokenize(caption: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    if max_len == 0 {
        return Err(DteError::Invalid("max_len must be at least 1".into()));
    }
    let words = normalize_caption(caption);
    if words.is_empty() {
        return Err(DteError::Invalid(format!("caption {caption:?} has no tokens")));
    }
    let mut ids: Vec<usize> = words
        .iter()
        .take(max_len)
        .map(|w| vocab.id(w).unwrap_or(UNK_ID))
        .collect();
    if ids.len() < max_len {
        ids.push(EOS_ID);
    }
    TokenSequence::new(ids)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetItem {
    /// `3×R×R` image with values in [−1, 1].
    pub image: Array,
    pub captions: Vec<String>,
    pub tokens: Vec<TokenSequence>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionedImageDataset {
    pub items: Vec<DatasetItem>,
    pub vocab: Vocabulary,
    pub resolution: usize,
    pub max_len: usize,
    pub source: String,
}

impl CaptionedImageDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Every caption, in item order.
    pub fn all_captions(&self) -> Vec<&str> {
        self.items
            .iter()
            .flat_map(|i| i.captions.iter().map(String::as_str))
            .collect()
    }

    /// Splits off the last `n` items as a held-out set.
    pub fn split_tail(mut self, n: usize) -> (Self, Self) {
        let keep = self.items.len().saturating_sub(n);
        let tail = self.items.split_off(keep);
        let held = Self {
            items: tail,
            vocab: self.vocab.clone(),
            resolution: self.resolution,
            max_len: self.max_len,
            source: format!("{} (held-out)", self.source),
        };
        (self, held)
    }
}

fn tokenize_all(captions: &[String], vocab: &Vocabulary, max_len: usize) -> Result<Vec<TokenSequence>> {
    captions.iter().map(|c| tokenize(c, vocab, max_len)).collect()
}

#[derive(Deserialize, Serialize)]
struct ManifestRecord {
    image: String,
    captions: Vec<String>,
}

/// Loads a line-delimited manifest of `{"image": .., "captions": [..]}`
/// records. Image paths are relative to the manifest's directory. When
/// `vocab` is `None` one is built from the manifest captions.
pub fn load_dataset(
    manifest_path: &Path,
    resolution: usize,
    max_len: usize,
    min_freq: usize,
    vocab: Option<&Vocabulary>,
) -> Result<CaptionedImageDataset> {
    let file = fs::File::open(manifest_path).map_err(|e| DteError::io(manifest_path, e))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DteError::io(manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let name = format!("{}:{}", manifest_path.display(), lineno + 1);
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| DteError::Record {
            record: name.clone(),
            reason: format!("malformed record: {e}"),
        })?;
        if rec.captions.is_empty() {
            return Err(DteError::Record {
                record: name,
                reason: "record has no captions".into(),
            });
        }
        records.push((name, rec));
    }
    if records.is_empty() {
        return Err(DteError::Invalid(format!(
            "manifest {} has no records",
            manifest_path.display()
        )));
    }
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => {
            let caps: Vec<&str> = records
                .iter()
                .flat_map(|(_, r)| r.captions.iter().map(String::as_str))
                .collect();
            build_vocab(&caps, min_freq)?
        }
    };
    let mut items = Vec::with_capacity(records.len());
    for (name, rec) in records {
        let path = base.join(&rec.image);
        if !path.exists() {
            return Err(DteError::Record {
                record: name,
                reason: format!("missing image file {}", path.display()),
            });
        }
        let image = read_image(&path, resolution).map_err(|e| DteError::Record {
            record: name.clone(),
            reason: e.to_string(),
        })?;
        let tokens = tokenize_all(&rec.captions, &vocab, max_len).map_err(|e| DteError::Record {
            record: name.clone(),
            reason: e.to_string(),
        })?;
        items.push(DatasetItem {
            image,
            captions: rec.captions,
            tokens,
        });
    }
    Ok(CaptionedImageDataset {
        items,
        vocab,
        resolution,
        max_len,
        source: manifest_path.display().to_string(),
    })
}

/// Decodes an image, resizes it to `resolution`² and rescales to [−1, 1] (CHW).
pub fn read_image(path: &Path, resolution: usize) -> Result<Array> {
    let img = image::open(path).map_err(|source| DteError::Image {
        path: path.to_owned(),
        source,
    })?;
    let rgb = img.to_rgb8();
    let r = resolution as u32;
    let rgb = if rgb.width() != r || rgb.height() != r {
        image::imageops::resize(&rgb, r, r, image::imageops::FilterType::Triangle)
    } else {
        rgb
    };
    let hw = resolution * resolution;
    let mut data = vec![0.0; 3 * hw];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * hw + i] = px.0[c] as f64 / 127.5 - 1.0;
        }
    }
    Ok(Array::new(&[3, resolution, resolution], data))
}

/// Writes a `3×H×W` image in [−1, 1] as PNG.
pub fn write_image(path: &Path, image: &Array) -> Result<()> {
    let [c, h, w] = match image.shape() {
        &[c, h, w] => [c, h, w],
        s => return Err(DteError::Shape(format!("expected 3×H×W image, got {s:?}"))),
    };
    if c != 3 {
        return Err(DteError::Shape(format!("expected 3 channels, got {c}")));
    }
    let hw = h * w;
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        for ch in 0..3 {
            let v = ((image.data()[ch * hw + i] + 1.0) * 127.5).round().clamp(0.0, 255.0);
            px.0[ch] = v as u8;
        }
    }
    buf.save(path).map_err(|source| DteError::Image {
        path: path.to_owned(),
        source,
    })
}

/// Exports a dataset as PNG files plus `manifest.jsonl` under `out_dir`.
pub fn export_dataset(dataset: &CaptionedImageDataset, out_dir: &Path) -> Result<PathBuf> {
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| DteError::io(&img_dir, e))?;
    let manifest = out_dir.join("manifest.jsonl");
    let mut f = fs::File::create(&manifest).map_err(|e| DteError::io(&manifest, e))?;
    for (i, item) in dataset.items.iter().enumerate() {
        let rel = format!("images/{i:05}.png");
        write_image(&out_dir.join(&rel), &item.image)?;
        let rec = ManifestRecord {
            image: rel,
            captions: item.captions.clone(),
        };
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(f, "{line}").map_err(|e| DteError::io(&manifest, e))?;
    }
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Synthetic captioned shapes.

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

/// Palette of saturated colors; each channel is ±1 so PNG export is lossless.
pub const COLORS: [(&str, [f64; 3]); 6] = [
    ("red", [1.0, -1.0, -1.0]),
    ("green", [-1.0, 1.0, -1.0]),
    ("blue", [-1.0, -1.0, 1.0]),
    ("yellow", [1.0, 1.0, -1.0]),
    ("magenta", [1.0, -1.0, 1.0]),
    ("cyan", [-1.0, 1.0, 1.0]),
];

/// Background value of every synthetic image (black).
pub const BACKGROUND: [f64; 3] = [-1.0, -1.0, -1.0];

#[derive(Clone, Copy, Debug, PartialEq)]
struct Object {
    shape: Shape,
    color: usize,
    large: bool,
}

fn size_word(large: bool) -> &'static str {
    if large {
        "large"
    } else {
        "small"
    }
}

fn describe(o: &Object) -> String {
    format!("{} {} {}", size_word(o.large), COLORS[o.color].0, o.shape.word())
}

/// Whether pixel offset `(dx, dy)` from the center lies inside the shape of
/// half-extent `r`.
pub fn shape_contains(shape: Shape, r: i64, dx: i64, dy: i64) -> bool {
    if dx.abs() > r || dy.abs() > r {
        return false;
    }
    match shape {
        Shape::Square => true,
        Shape::Circle => dx * dx + dy * dy <= r * r + r,
        Shape::Triangle => {
            // apex up: half-width grows linearly from 0 at the top row to r at the bottom
            let half = ((dy + r) as f64 / 2.0).round() as i64;
            dx.abs() <= half
        }
    }
}

fn paint(image: &mut [f64], res: usize, o: &Object, cx: i64, cy: i64, r: i64) {
    let hw = res * res;
    for y in (cy - r).max(0)..=(cy + r).min(res as i64 - 1) {
        for x in (cx - r).max(0)..=(cx + r).min(res as i64 - 1) {
            if shape_contains(o.shape, r, x - cx, y - cy) {
                let i = y as usize * res + x as usize;
                for c in 0..3 {
                    image[c * hw + i] = COLORS[o.color].1[c];
                }
            }
        }
    }
}

/// Half-extent in pixels of a shape at `resolution`.
pub fn half_extent(resolution: usize, large: bool) -> i64 {
    let f = if large { 0.18 } else { 0.1 };
    ((resolution as f64 * f).floor() as i64).max(2)
}

fn random_object(rng: &mut ChaCha8Rng, avoid_color: Option<usize>) -> Object {
    let color = loop {
        let c = rng.random_range(0..COLORS.len());
        if Some(c) != avoid_color {
            break c;
        }
    };
    Object {
        shape: Shape::ALL[rng.random_range(0..3)],
        color,
        large: rng.random_bool(0.5),
    }
}

fn synth_item(resolution: usize, seed: u64, index: usize) -> (Array, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let res = resolution as i64;
    let hw = resolution * resolution;
    let mut img = Vec::with_capacity(3 * hw);
    for c in BACKGROUND {
        img.extend(std::iter::repeat_n(c, hw));
    }
    let jitter = (res / 16).max(1);
    let jit = |rng: &mut ChaCha8Rng| rng.random_range(-jitter..=jitter);
    let a = random_object(&mut rng, None);
    let captions = if rng.random_bool(0.35) {
        let r = half_extent(resolution, a.large);
        let (cx, cy) = (res / 2 + jit(&mut rng), res / 2 + jit(&mut rng));
        paint(&mut img, resolution, &a, cx, cy, r);
        let d = describe(&a);
        let (size, color, shape) = (size_word(a.large), COLORS[a.color].0, a.shape.word());
        vec![
            format!("a {d}"),
            format!("a {color} {shape} that is {size}"),
            format!("there is a {d} in the picture"),
        ]
    } else {
        let b = random_object(&mut rng, Some(a.color));
        // relation of a to b
        let (rel, inv) = [
            ("left of", "right of"),
            ("right of", "left of"),
            ("above", "below"),
            ("below", "above"),
        ][rng.random_range(0..4)];
        let (near, far) = (res / 4, 3 * res / 4);
        let (pa, pb) = match rel {
            "left of" => ((near, res / 2), (far, res / 2)),
            "right of" => ((far, res / 2), (near, res / 2)),
            "above" => ((res / 2, near), (res / 2, far)),
            _ => ((res / 2, far), (res / 2, near)),
        };
        for (o, (x, y)) in [(a, pa), (b, pb)] {
            let r = half_extent(resolution, o.large);
            let (cx, cy) = (x + jit(&mut rng), y + jit(&mut rng));
            paint(&mut img, resolution, &o, cx, cy, r);
        }
        let (da, db) = (describe(&a), describe(&b));
        vec![
            format!("a {da} {rel} a {db}"),
            format!("a {db} {inv} a {da}"),
            format!("a {da} is {rel} a {db}"),
        ]
    };
    (Array::new(&[3, resolution, resolution], img), captions)
}

/// Deterministic dataset of one or two colored shapes on a black background.
/// Every item has three distinct paraphrase captions generated from the same
/// scene description.
pub fn synthesize_toy_dataset(n_items: usize, resolution: usize, seed: u64) -> Result<CaptionedImageDataset> {
    if n_items == 0 {
        return Err(DteError::Invalid("n_items must be positive".into()));
    }
    if ![32, 64, 128, 256].contains(&resolution) {
        return Err(DteError::Invalid(format!(
            "synthetic resolution must be one of 32, 64, 128, 256; got {resolution}"
        )));
    }
    let raw: Vec<(Array, Vec<String>)> = par::map_collect(n_items, |i| synth_item(resolution, seed, i));
    let all: Vec<&str> = raw.iter().flat_map(|(_, c)| c.iter().map(String::as_str)).collect();
    let vocab = build_vocab(&all, 1)?;
    let items = raw
        .into_iter()
        .map(|(image, captions)| {
            let tokens = tokenize_all(&captions, &vocab, DEFAULT_MAX_LEN)?;
            Ok(DatasetItem {
                image,
                captions,
                tokens,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CaptionedImageDataset {
        items,
        vocab,
        resolution,
        max_len: DEFAULT_MAX_LEN,
        source: format!("synthetic(n={n_items}, resolution={resolution}, seed={seed})"),
    })
}

// ---------------------------------------------------------------------------
// Batching.

/// How captions are assigned to the two text encoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionPolicy {
    /// One caption feeds both encoders.
    #[default]
    Single,
    /// Two distinct captions of the same image, one per encoder.
    Dual,
}

/// Padded token ids for a batch, `n × width` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub lengths: Vec<usize>,
    pub width: usize,
}

impl TokenBatch {
    pub fn from_sequences(seqs: &[&TokenSequence]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(DteError::Invalid("empty token batch".into()));
        }
        let width = seqs.iter().map(|s| s.len()).max().unwrap_or(1);
        let mut ids = Vec::with_capacity(seqs.len() * width);
        for s in seqs {
            ids.extend(s.padded(width));
        }
        Ok(Self {
            ids,
            lengths: seqs.iter().map(|s| s.len()).collect(),
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.width..(i + 1) * self.width]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `n×3×R×R`.
    pub images: Array,
    pub tokens_g: TokenBatch,
    pub tokens_d: TokenBatch,
    pub item_indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.item_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_indices.is_empty()
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5eed_0000_0000 + epoch as u64);
    rng
}

/// Minibatches for one epoch: a seeded permutation split into full batches
/// (the ragged tail is dropped).
pub fn make_batches(
    dataset: &CaptionedImageDataset,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    policy: CaptionPolicy,
) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(DteError::Invalid(format!(
            "batch_size must be at least 2, got {batch_size}"
        )));
    }
    if policy == CaptionPolicy::Dual {
        if let Some(i) = dataset.items.iter().position(|it| distinct_captions(it).len() < 2) {
            return Err(DteError::Invalid(format!(
                "dual caption policy needs two distinct captions; item {i} has fewer"
            )));
        }
    }
    let mut rng = epoch_rng(seed, epoch);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let mut batches = Vec::with_capacity(dataset.len() / batch_size);
    for chunk in order.chunks_exact(batch_size) {
        let mut g_seqs = Vec::with_capacity(batch_size);
        let mut d_seqs = Vec::with_capacity(batch_size);
        let mut images = Vec::with_capacity(batch_size);
        for &i in chunk {
            let item = &dataset.items[i];
            let (g, d) = match policy {
                CaptionPolicy::Single => {
                    let k = rng.random_range(0..item.tokens.len());
                    (k, k)
                }
                CaptionPolicy::Dual => {
                    let distinct = distinct_captions(item);
                    let a = rng.random_range(0..distinct.len());
                    let mut b = rng.random_range(0..distinct.len() - 1);
                    if b >= a {
                        b += 1;
                    }
                    (distinct[a], distinct[b])
                }
            };
            g_seqs.push(&item.tokens[g]);
            d_seqs.push(&item.tokens[d]);
            images.push(item.image.clone());
        }
        batches.push(Batch {
            images: Array::stack(&images),
            tokens_g: TokenBatch::from_sequences(&g_seqs)?,
            tokens_d: TokenBatch::from_sequences(&d_seqs)?,
            item_indices: chunk.to_vec(),
        });
    }
    Ok(batches)
}

/// Indices of captions with pairwise distinct token sequences.
fn distinct_captions(item: &DatasetItem) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for (i, t) in item.tokens.iter().enumerate() {
        if out.iter().all(|&j| item.tokens[j] != *t) {
            out.push(i);
        }
    }
    out
}
