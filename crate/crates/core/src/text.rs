//! Bidirectional recurrent sentence encoders and the dual (G-side / D-side)
//! embedding stacks.

use dte_autograd::{concat, Array, Tensor};
use indexmap::IndexMap;

use crate::data::TokenBatch;
use crate::error::{DteError, Result};
use crate::nn::{Ctx, Group, ParamBuilder, ParamStore};

/// Parameter-name prefix of each encoder stack.
pub const PREFIX_G: &str = "emb_G";
pub const PREFIX_D: &str = "emb_D";

/// Which encoder stack to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    G,
    D,
}

impl Side {
    pub fn prefix(self) -> &'static str {
        match self {
            Side::G => PREFIX_G,
            Side::D => PREFIX_D,
        }
    }

    pub fn group(self) -> Group {
        match self {
            Side::G => Group::EmbG,
            Side::D => Group::EmbD,
        }
    }
}

/// Creates the word table and both recurrent directions for one side. The
/// word dimension is `2·d_h`.
pub fn init_encoder(pb: &mut ParamBuilder, side: Side, vocab_size: usize, d_h: usize) -> Result<()> {
    if d_h == 0 || vocab_size == 0 {
        return Err(DteError::Config(
            "encoder needs d_h ≥ 1 and a non-empty vocabulary".into(),
        ));
    }
    let p = side.prefix();
    let d_word = 2 * d_h;
    pb.uniform(&format!("{p}.word"), &[vocab_size, d_word], 0.1)?;
    let bound = 1.0 / (d_h as f64).sqrt();
    for dir in ["fwd", "bwd"] {
        pb.uniform(&format!("{p}.{dir}.w_ih"), &[4 * d_h, d_word], bound)?;
        pb.uniform(&format!("{p}.{dir}.w_hh"), &[4 * d_h, d_h], bound)?;
        pb.uniform(&format!("{p}.{dir}.b"), &[4 * d_h], bound)?;
    }
    Ok(())
}

/// Output of one encoder over a token batch.
#[derive(Clone)]
pub struct Encoded {
    /// `N × 2d_h`: final forward state concatenated with final backward state.
    pub sentence: Tensor,
    /// `N × L × 2d_h` per-token states; pad positions are zero.
    pub words: Tensor,
}

/// Runs one LSTM direction over the projected inputs `xp` (`N×L×4d_h`).
/// `masks[t]` is `N×1` with 1 at valid positions. Returns the per-step states.
fn run_direction(
    ctx: &Ctx,
    prefix: &str,
    xp: &Tensor,
    masks: &[Tensor],
    order: impl Iterator<Item = usize>,
) -> Vec<(usize, Tensor)> {
    let n = xp.dim(0);
    let d_h = xp.dim(2) / 4;
    let w_hh_t = ctx.param(&format!("{prefix}.w_hh")).t();
    let bias = ctx.param(&format!("{prefix}.b"));
    let mut h = Tensor::zeros(&[n, d_h]);
    let mut c = Tensor::zeros(&[n, d_h]);
    let mut states = Vec::with_capacity(masks.len());
    for t in order {
        let gates = xp
            .narrow(1, t, 1)
            .reshape(&[n, 4 * d_h])
            .add(&h.matmul(&w_hh_t))
            .add(&bias);
        let i = gates.narrow(1, 0, d_h).sigmoid();
        let f = gates.narrow(1, d_h, d_h).sigmoid();
        let g = gates.narrow(1, 2 * d_h, d_h).tanh();
        let o = gates.narrow(1, 3 * d_h, d_h).sigmoid();
        let c_new = f.mul(&c).add(&i.mul(&g));
        let h_new = o.mul(&c_new.tanh());
        let m = &masks[t];
        let keep = m.neg().add_scalar(1.0);
        c = m.mul(&c_new).add(&keep.mul(&c));
        h = m.mul(&h_new).add(&keep.mul(&h));
        states.push((t, h.clone()));
    }
    states
}

/// Encodes a padded token batch with the stack named by `prefix`.
pub fn encode_with(ctx: &Ctx, prefix: &str, tokens: &TokenBatch) -> Result<Encoded> {
    if tokens.is_empty() || tokens.lengths.contains(&0) {
        return Err(DteError::Invalid("cannot encode an empty token sequence".into()));
    }
    let (n, l) = (tokens.len(), tokens.width);
    let table = ctx.param(&format!("{prefix}.word"));
    let vocab = table.dim(0);
    if let Some(&bad) = tokens.ids.iter().find(|&&id| id >= vocab) {
        return Err(DteError::Invalid(format!(
            "token id {bad} outside vocabulary of size {vocab}"
        )));
    }
    let d_word = table.dim(1);
    let d_h = d_word / 2;
    let emb = table.index_select(&tokens.ids);
    let masks: Vec<Tensor> = (0..l)
        .map(|t| {
            let m = tokens
                .lengths
                .iter()
                .map(|&len| if t < len { 1.0 } else { 0.0 })
                .collect();
            Tensor::from_vec(&[n, 1], m)
        })
        .collect();
    let project = |dir: &str| {
        let w_ih = ctx.param(&format!("{prefix}.{dir}.w_ih"));
        emb.matmul(&w_ih.t()).reshape(&[n, l, 4 * d_h])
    };
    let fwd = run_direction(ctx, &format!("{prefix}.fwd"), &project("fwd"), &masks, 0..l);
    let mut bwd = run_direction(ctx, &format!("{prefix}.bwd"), &project("bwd"), &masks, (0..l).rev());
    bwd.reverse();
    let sentence = concat(&[fwd[l - 1].1.clone(), bwd[0].1.clone()], 1);
    let per_token: Vec<Tensor> = (0..l)
        .map(|t| {
            concat(&[fwd[t].1.clone(), bwd[t].1.clone()], 1)
                .mul(&masks[t])
                .reshape(&[n, 1, d_word])
        })
        .collect();
    Ok(Encoded {
        sentence,
        words: concat(&per_token, 1),
    })
}

pub fn encode(ctx: &Ctx, side: Side, tokens: &TokenBatch) -> Result<Encoded> {
    encode_with(ctx, side.prefix(), tokens)
}

/// Sentence and word encodings from both sides.
#[derive(Clone)]
pub struct DualSentenceEmbedding {
    pub s_g: Tensor,
    pub s_d: Tensor,
    pub words_g: Tensor,
    pub words_d: Tensor,
}

/// Encodes `tokens_g` with the G-side stack and `tokens_d` with the D-side
/// stack. With `shared` set only the D-side stack exists and encodes both.
pub fn dual_encode(
    ctx: &Ctx,
    tokens_g: &TokenBatch,
    tokens_d: &TokenBatch,
    shared: bool,
) -> Result<DualSentenceEmbedding> {
    if tokens_g.len() != tokens_d.len() {
        return Err(DteError::Shape(format!(
            "token batches differ in size: {} vs {}",
            tokens_g.len(),
            tokens_d.len()
        )));
    }
    let g_prefix = if shared { PREFIX_D } else { PREFIX_G };
    let g = encode_with(ctx, g_prefix, tokens_g)?;
    let d = encode_with(ctx, PREFIX_D, tokens_d)?;
    Ok(DualSentenceEmbedding {
        s_g: g.sentence,
        s_d: d.sentence,
        words_g: g.words,
        words_d: d.words,
    })
}

/// Disjoint parameter-name sets, one per [`Group`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterGroups {
    pub groups: IndexMap<Group, Vec<String>>,
}

impl ParameterGroups {
    pub fn names(&self, g: Group) -> &[String] {
        self.groups.get(&g).map(Vec::as_slice).unwrap_or(&[])
    }
}

fn group_of_name(name: &str) -> Option<Group> {
    let head = name.split('.').next()?;
    Group::from_name(head)
}

/// Assigns every parameter to exactly one group by its name prefix and checks
/// the assignment against the group recorded in the store.
pub fn partition_parameters(store: &ParamStore) -> Result<ParameterGroups> {
    let mut groups: IndexMap<Group, Vec<String>> = Group::ALL.iter().map(|g| (*g, Vec::new())).collect();
    let mut bad = Vec::new();
    for (name, p) in store.iter() {
        match group_of_name(name) {
            Some(g) if g == p.group => groups[&g].push(name.clone()),
            Some(g) => bad.push(format!("{name} (prefix says {g}, stored as {})", p.group)),
            None => bad.push(format!("{name} (no group prefix)")),
        }
    }
    if !bad.is_empty() {
        return Err(DteError::Partition(format!(
            "unassigned or conflicting parameters: {}",
            bad.join(", ")
        )));
    }
    Ok(ParameterGroups { groups })
}

/// Array of a sentence tensor row, for tests and metrics.
pub fn sentence_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let a: Array = t.to_array();
    (0..a.shape()[0]).map(|i| a.row(i).to_vec()).collect()
}
