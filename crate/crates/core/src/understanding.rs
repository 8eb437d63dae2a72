//! Autoregressive image-to-report branch.
//!
//! A patch-embedding vision encoder feeds a two-layer connector whose output
//! rows prefix the text tokens of a causal language model. Training minimizes
//! next-token cross-entropy over the report segment only.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;

use crate::blocks::{block_forward, linear_named, position_indices, segments_for, NORM_EPS};
use crate::data::report_words;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, POSITION_CAPACITY, TEXT_BASE_LEN};
use crate::tensor::{Graph, ParamTree, SegmentMask, Tensor, Var};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

/// Prompt placed between the image tokens and the report.
pub const DEFAULT_PROMPT: &str = "findings :";

/// Word-level vocabulary over the closed report language.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(words: impl IntoIterator<Item = impl Into<String>>) -> Result<Self> {
        let mut all: Vec<String> = ["<pad>", "<bos>", "<eos>", "<unk>"].map(String::from).to_vec();
        all.extend(words.into_iter().map(Into::into));
        let mut ids = HashMap::new();
        for (i, w) in all.iter().enumerate() {
            if ids.insert(w.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(Vocabulary { words: all, ids })
    }

    /// Specials, the prompt words and every report word.
    pub fn standard() -> Self {
        let mut w = vec!["findings", ":"];
        w.extend(report_words());
        Vocabulary::new(w).expect("standard vocabulary has no duplicates")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or("<unk>", String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Joins words, skipping special tokens.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i > UNK)
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `[BOS, report…, EOS]`, the target segment of a training sequence.
    pub fn report_target(&self, report: &str) -> Vec<usize> {
        let mut t = vec![BOS];
        t.extend(self.encode(report));
        t.push(EOS);
        t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Visual,
    Prompt,
    Report,
    Pad,
}

/// `[V, T_in, T_out]` laid out as embedded rows.
///
/// Positions `m..n` of the report segment carry the loss: row `i` predicts
/// `ids[i + 1]`. Rows after `n` (padding) take part in neither context nor
/// loss of earlier positions.
#[derive(Clone, Debug)]
pub struct MultimodalSequence {
    pub rows: Var,
    /// Token id per position, `None` for visual rows.
    pub ids: Vec<Option<usize>>,
    pub tags: Vec<Segment>,
    pub m: usize,
    pub n: usize,
}

impl MultimodalSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// How the per-sequence report loss is normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossNorm {
    /// Mean over the `n − m` predicted tokens.
    #[default]
    PerToken,
    /// Plain sum over predicted tokens.
    Sum,
}

/// `[H, W, 1]` image as `[P, patch²]` rows, patches row-major.
pub fn patchify(g: &mut Graph, image: Var, patch: usize) -> Result<Var> {
    let shape = g.shape(image).to_vec();
    if shape.len() != 3 || shape[2] != 1 {
        return Err(Error::Invalid(format!("expected [H, W, 1] image, got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    for dim in [h, w] {
        if dim % patch != 0 {
            return Err(Error::Indivisible { dim, factor: patch });
        }
    }
    let (ph, pw) = (h / patch, w / patch);
    let mut idx = Vec::with_capacity(h * w);
    for py in 0..ph {
        for px in 0..pw {
            for dy in 0..patch {
                for dx in 0..patch {
                    idx.push(Some((py * patch + dy) * w + px * patch + dx));
                }
            }
        }
    }
    g.gather(image, idx, &[ph * pw, patch * patch])
}

/// Linear patch embedding without positions: `[P, vision_dim]`.
pub fn patch_embed(g: &mut Graph, params: &ParamTree, cfg: &ModelConfig, image: Var) -> Result<Var> {
    let patches = patchify(g, image, cfg.patch_size)?;
    linear_named(g, params, "und.vis.patch", patches)
}

/// Vision encoder over one or more images: `[Σ P, vision_dim]`.
pub fn encode_images(g: &mut Graph, params: &ParamTree, cfg: &ModelConfig, images: &[Var]) -> Result<Var> {
    let pos = g.param(params, "und.vis.pos")?;
    let mut parts = Vec::with_capacity(images.len());
    for &img in images {
        let e = patch_embed(g, params, cfg, img)?;
        if g.shape(e)[0] != g.shape(pos)[0] {
            return Err(Error::LengthMismatch {
                what: "vision positions",
                expected: g.shape(pos)[0],
                got: g.shape(e)[0],
            });
        }
        parts.push(g.add(e, pos)?);
    }
    let mut x = g.concat(&parts)?;
    let p = cfg.num_patches();
    let vb = cfg.vision_block()?;
    for l in 0..cfg.vision_layers {
        let segs = segments_for(&vec![p; images.len()], |_| SegmentMask::Full);
        x = block_forward(g, x, params, &format!("und.vis.layer{l}"), &vb, segs, None)?;
    }
    let norm = g.param(params, "und.vis.norm")?;
    g.rms_norm(x, norm, NORM_EPS)
}

pub fn encode_image(g: &mut Graph, params: &ParamTree, cfg: &ModelConfig, image: Var) -> Result<Var> {
    encode_images(g, params, cfg, &[image])
}

/// Two-layer MLP from vision width to model width.
pub fn connect(g: &mut Graph, params: &ParamTree, v: Var) -> Result<Var> {
    let h = linear_named(g, params, "und.conn.fc1", v)?;
    let h = g.gelu(h);
    linear_named(g, params, "und.conn.fc2", h)
}

pub fn embed_tokens(g: &mut Graph, params: &ParamTree, ids: &[usize]) -> Result<Var> {
    let table = g.param(params, "und.embed")?;
    g.select_rows(table, ids)
}

/// One training or decoding example before embedding.
#[derive(Clone, Debug)]
pub struct UnderstandingExample<'a> {
    pub image: &'a Tensor,
    pub prompt: &'a [usize],
    /// Report segment; starts with [`BOS`].
    pub target: &'a [usize],
}

/// Embeds a batch of examples, running the vision encoder once over all images.
pub fn assemble(
    g: &mut Graph,
    params: &ParamTree,
    cfg: &ModelConfig,
    batch: &[UnderstandingExample<'_>],
) -> Result<Vec<MultimodalSequence>> {
    let images: Vec<Var> = batch.iter().map(|e| g.constant(e.image.clone())).collect();
    let vis = encode_images(g, params, cfg, &images)?;
    let vis = connect(g, params, vis)?;
    let p = cfg.num_patches();
    let mut out = Vec::with_capacity(batch.len());
    for (b, ex) in batch.iter().enumerate() {
        if ex.target.is_empty() {
            return Err(Error::Invalid("report segment is empty".into()));
        }
        let v = g.select_rows(vis, &(b * p..(b + 1) * p).collect::<Vec<_>>())?;
        let text: Vec<usize> = ex.prompt.iter().chain(ex.target).copied().collect();
        let t = embed_tokens(g, params, &text)?;
        let rows = g.concat(&[v, t])?;
        let mut ids = vec![None; p];
        ids.extend(text.iter().map(|&i| Some(i)));
        let mut tags = vec![Segment::Visual; p];
        tags.extend(std::iter::repeat_n(Segment::Prompt, ex.prompt.len()));
        tags.extend(std::iter::repeat_n(Segment::Report, ex.target.len()));
        let m = p + ex.prompt.len();
        out.push(MultimodalSequence {
            rows,
            ids,
            tags,
            m,
            n: m + ex.target.len() - 1,
        });
    }
    Ok(out)
}

/// Causal transformer over sequences laid end to end; returns final-norm
/// hidden states `[Σ len, d]`.
pub fn lm_hidden(g: &mut Graph, params: &ParamTree, cfg: &ModelConfig, rows: Var, lengths: &[usize]) -> Result<Var> {
    let tb = cfg.text_block()?;
    let mut positions = Vec::with_capacity(g.shape(rows)[0]);
    for &len in lengths {
        positions.extend(position_indices(len, TEXT_BASE_LEN, POSITION_CAPACITY)?);
    }
    let mut x = rows;
    for l in 0..cfg.num_layers {
        let segs = segments_for(lengths, |_| SegmentMask::Causal);
        x = block_forward(g, x, params, &format!("und.layer{l}"), &tb, segs, Some(&positions))?;
    }
    let norm = g.param(params, "und.norm")?;
    g.rms_norm(x, norm, NORM_EPS)
}

pub fn lm_head(g: &mut Graph, params: &ParamTree, hidden: Var) -> Result<Var> {
    linear_named(g, params, "und.head", hidden)
}

/// Next-token cross-entropy over report positions `m..n`, averaged over the
/// batch. Visual and prompt rows are context only.
pub fn ar_loss(
    g: &mut Graph,
    params: &ParamTree,
    cfg: &ModelConfig,
    seqs: &[MultimodalSequence],
    norm: LossNorm,
) -> Result<Var> {
    if seqs.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut loss_rows = Vec::new();
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    let mut offset = 0;
    for s in seqs {
        if s.n <= s.m || s.n >= s.len() {
            return Err(Error::Invalid(format!("report segment m={} n={} has no loss positions", s.m, s.n)));
        }
        let count = s.n - s.m;
        let w = match norm {
            LossNorm::PerToken => 1.0 / count as f64,
            LossNorm::Sum => 1.0,
        } / seqs.len() as f64;
        for i in s.m..s.n {
            let t = s.ids[i + 1].ok_or_else(|| Error::Invalid("loss target on a visual row".into()))?;
            loss_rows.push(offset + i);
            targets.push(t);
            weights.push(w);
        }
        offset += s.len();
    }
    let parts: Vec<Var> = seqs.iter().map(|s| s.rows).collect();
    let rows = g.concat(&parts)?;
    let lengths: Vec<usize> = seqs.iter().map(MultimodalSequence::len).collect();
    let hidden = lm_hidden(g, params, cfg, rows, &lengths)?;
    let picked = g.select_rows(hidden, &loss_rows)?;
    let logits = lm_head(g, params, picked)?;
    g.cross_entropy_weighted(logits, &targets, &weights)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeMode {
    /// Argmax each step; ties go to the lowest id.
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Decodes a report for `image` after `prompt`. The returned ids exclude the
/// prompt, the leading [`BOS`] and the terminating [`EOS`].
pub fn generate_report(
    params: &ParamTree,
    cfg: &ModelConfig,
    image: &Tensor,
    prompt: &[usize],
    max_len: usize,
    mode: DecodeMode,
) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::Invalid("max_len must be at least 1".into()));
    }
    let mut rng = match mode {
        DecodeMode::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        DecodeMode::Greedy => None,
    };
    let mut g = Graph::inference();
    let img = g.constant(image.clone());
    let vis = encode_image(&mut g, params, cfg, img)?;
    let vis = connect(&mut g, params, vis)?;
    let prefix = g.value(vis).clone();
    let mut tokens = vec![BOS];
    let mut out = Vec::new();
    while out.len() < max_len {
        let mut g = Graph::inference();
        let v = g.constant(prefix.clone());
        let text: Vec<usize> = prompt.iter().chain(&tokens).copied().collect();
        let t = embed_tokens(&mut g, params, &text)?;
        let rows = g.concat(&[v, t])?;
        let len = g.shape(rows)[0];
        let hidden = lm_hidden(&mut g, params, cfg, rows, &[len])?;
        let last = g.select_rows(hidden, &[len - 1])?;
        let logits = lm_head(&mut g, params, last)?;
        let l = g.data(logits);
        let next = match (mode, rng.as_mut()) {
            (DecodeMode::Sample { temperature, .. }, Some(rng)) if temperature > 0.0 => {
                let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = l.iter().map(|&x| ((x - mx) / temperature).exp()).collect();
                WeightedIndex::new(&w)
                    .map_err(|e| Error::Invalid(format!("sampling weights: {e}")))?
                    .sample(rng)
            }
            _ => argmax(l),
        };
        if next == EOS {
            break;
        }
        tokens.push(next);
        out.push(next);
    }
    Ok(out)
}

/// Final hidden states of the report tokens, padded with [`PAD`] to
/// `cfg.cond_len` rows: the condition fed to the generation branch.
pub fn condition_states(params: &ParamTree, cfg: &ModelConfig, vocab: &Vocabulary, report: &str) -> Result<Tensor> {
    let ids = condition_ids(cfg, vocab, report);
    let mut g = Graph::inference();
    let hidden = condition_rows(&mut g, params, cfg, &ids)?;
    Ok(g.value(hidden).clone())
}

/// In-graph form of [`condition_states`] over precomputed ids, so gradients
/// can reach the understanding branch when it is trainable.
pub fn condition_rows(g: &mut Graph, params: &ParamTree, cfg: &ModelConfig, ids: &[usize]) -> Result<Var> {
    let rows = embed_tokens(g, params, ids)?;
    lm_hidden(g, params, cfg, rows, &[ids.len()])
}

/// `[BOS, report…, EOS, PAD…]` truncated or padded to `cfg.cond_len`.
pub fn condition_ids(cfg: &ModelConfig, vocab: &Vocabulary, report: &str) -> Vec<usize> {
    let mut ids = vocab.report_target(report);
    ids.resize(cfg.cond_len, PAD);
    ids
}
