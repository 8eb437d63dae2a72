//! Attention, MLP, normalization and rotary positions shared by both branches.
//!
//! Parameter names follow `{branch}.layer{i}.{attn|mlp|norm}.{name}`.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{AttnSegment, Branch, Graph, ParamTree, SegmentMask, Var};

pub const NORM_EPS: f64 = 1e-6;
pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
    pub qk_norm: bool,
    pub qkv_bias: bool,
    pub num_layers: usize,
}

impl BlockConfig {
    pub fn new(model_dim: usize, num_heads: usize, num_layers: usize) -> Result<Self> {
        let cfg = BlockConfig {
            model_dim,
            num_heads,
            head_dim: model_dim.checked_div(num_heads).unwrap_or(0),
            mlp_hidden: 4 * model_dim,
            qk_norm: true,
            qkv_bias: true,
            num_layers,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Indivisible {
                dim: self.model_dim,
                factor: self.num_heads,
            });
        }
        if self.head_dim * self.num_heads != self.model_dim {
            return Err(Error::Config(format!(
                "head_dim {} × heads {} != model_dim {}",
                self.head_dim, self.num_heads, self.model_dim
            )));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config("rotary encoding needs an even head_dim".into()));
        }
        Ok(())
    }
}

/// `allowed[i][j]` is true iff token i may attend to token j.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(len: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(len * len);
        for i in 0..len {
            for j in 0..len {
                allowed.push(f(i, j));
            }
        }
        AttentionMask { len, allowed }
    }

    /// Bidirectional mask used for the joint generation sequence.
    pub fn full(len: usize) -> Self {
        Self::from_fn(len, |_, _| true)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.len + j]
    }

    pub fn row_sums(&self) -> Vec<usize> {
        (0..self.len)
            .map(|i| (0..self.len).filter(|&j| self.get(i, j)).count())
            .collect()
    }

    pub fn is_causal(&self) -> bool {
        (0..self.len).all(|i| (0..self.len).all(|j| self.get(i, j) == (j <= i)))
    }

    pub fn is_full(&self) -> bool {
        self.allowed.iter().all(|&b| b)
    }

    pub(crate) fn segment_mask(&self) -> SegmentMask {
        if self.is_causal() {
            SegmentMask::Causal
        } else if self.is_full() {
            SegmentMask::Full
        } else {
            SegmentMask::Explicit(Arc::new(self.allowed.clone()))
        }
    }
}

pub fn build_causal_mask(len: usize) -> AttentionMask {
    AttentionMask::from_fn(len, |i, j| j <= i)
}

/// Rotary positions for `len` tokens. Beyond `base_len` the indices are
/// compressed by `base_len / len` so a model trained at `base_len` sees the
/// same position range at the longer length.
pub fn position_indices(len: usize, base_len: usize, capacity: usize) -> Result<Vec<f64>> {
    if len > capacity {
        return Err(Error::PositionCapacity { len, capacity });
    }
    if len <= base_len {
        Ok((0..len).map(|i| i as f64).collect())
    } else {
        let s = base_len as f64 / len as f64;
        Ok((0..len).map(|i| i as f64 * s).collect())
    }
}

/// Applies rotary encoding to `x[L, heads·head_dim]`, interpolating positions
/// when `L` exceeds `base_len`.
pub fn apply_positions(
    g: &mut Graph,
    x: Var,
    heads: usize,
    base_len: usize,
    capacity: usize,
) -> Result<Var> {
    let len = g.shape(x)[0];
    let pos = position_indices(len, base_len, capacity)?;
    g.rope(x, &pos, heads, ROPE_BASE)
}

/// Weights for one attention sublayer, already bound to a graph.
#[derive(Clone, Copy, Debug)]
pub struct AttnWeights {
    pub q_norm: Option<Var>,
    pub k_norm: Option<Var>,
    pub w_out: Var,
    pub b_out: Option<Var>,
}

impl AttnWeights {
    pub fn bind(g: &mut Graph, params: &ParamTree, prefix: &str, cfg: &BlockConfig) -> Result<Self> {
        let (q_norm, k_norm) = if cfg.qk_norm {
            (
                Some(g.param(params, &format!("{prefix}.attn.q_norm"))?),
                Some(g.param(params, &format!("{prefix}.attn.k_norm"))?),
            )
        } else {
            (None, None)
        };
        Ok(AttnWeights {
            q_norm,
            k_norm,
            w_out: g.param(params, &format!("{prefix}.attn.wo"))?,
            b_out: Some(g.param(params, &format!("{prefix}.attn.bo"))?),
        })
    }
}

/// One query/key/value projection set.
#[derive(Clone, Copy, Debug)]
pub struct QkvWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub bq: Option<Var>,
    pub bk: Option<Var>,
    pub bv: Option<Var>,
}

impl QkvWeights {
    /// Binds `{prefix}.attn.w{q,k,v}{suffix}` and the matching biases.
    pub fn bind(g: &mut Graph, params: &ParamTree, prefix: &str, suffix: &str, bias: bool) -> Result<Self> {
        let mut w = |n: &str| g.param(params, &format!("{prefix}.attn.{n}{suffix}"));
        let (wq, wk, wv) = (w("wq")?, w("wk")?, w("wv")?);
        let (bq, bk, bv) = if bias {
            (Some(w("bq")?), Some(w("bk")?), Some(w("bv")?))
        } else {
            (None, None, None)
        };
        Ok(QkvWeights {
            wq,
            wk,
            wv,
            bq,
            bk,
            bv,
        })
    }

    pub fn project(&self, g: &mut Graph, x: Var) -> Result<(Var, Var, Var)> {
        Ok((
            g.linear(x, self.wq, self.bq)?,
            g.linear(x, self.wk, self.bk)?,
            g.linear(x, self.wv, self.bv)?,
        ))
    }
}

fn head_norm(g: &mut Graph, x: Var, w: Var, heads: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let hd = shape[1] / heads;
    let flat = g.reshape(x, &[shape[0] * heads, hd])?;
    let n = g.rms_norm(flat, w, NORM_EPS)?;
    g.reshape(n, &shape)
}

/// Multi-head attention over pre-projected `q, k, v` for a batch of segments.
///
/// Q and K are RMS-normalized per head (when weights are given), rotated by
/// `positions`, combined by masked softmax attention, and the concatenated
/// heads are output-projected.
#[allow(clippy::too_many_arguments)]
pub fn attention_segments(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    segments: Vec<AttnSegment>,
    heads: usize,
    weights: &AttnWeights,
    positions: Option<&[f64]>,
) -> Result<Var> {
    let mut q = q;
    let mut k = k;
    if let Some(w) = weights.q_norm {
        q = head_norm(g, q, w, heads)?;
    }
    if let Some(w) = weights.k_norm {
        k = head_norm(g, k, w, heads)?;
    }
    if let Some(pos) = positions {
        q = g.rope(q, pos, heads, ROPE_BASE)?;
        k = g.rope(k, pos, heads, ROPE_BASE)?;
    }
    let o = g.attention(q, k, v, segments, heads)?;
    g.linear(o, weights.w_out, weights.b_out)
}

/// Single-sequence attention with an explicit mask.
#[allow(clippy::too_many_arguments)]
pub fn attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: &AttentionMask,
    heads: usize,
    weights: &AttnWeights,
    positions: Option<&[f64]>,
) -> Result<Var> {
    let len = g.shape(q)[0];
    if mask.len() != len {
        return Err(Error::LengthMismatch {
            what: "attention mask",
            expected: len,
            got: mask.len(),
        });
    }
    let seg = AttnSegment {
        start: 0,
        len,
        mask: mask.segment_mask(),
    };
    attention_segments(g, q, k, v, vec![seg], heads, weights, positions)
}

/// Segments for a batch of sequences laid end to end.
pub fn segments_for(lengths: &[usize], mask: impl Fn(usize) -> SegmentMask) -> Vec<AttnSegment> {
    let mut start = 0;
    lengths
        .iter()
        .map(|&len| {
            let s = AttnSegment {
                start,
                len,
                mask: mask(len),
            };
            start += len;
            s
        })
        .collect()
}

pub fn mlp(g: &mut Graph, params: &ParamTree, prefix: &str, x: Var) -> Result<Var> {
    let w1 = g.param(params, &format!("{prefix}.mlp.w1"))?;
    let b1 = g.param(params, &format!("{prefix}.mlp.b1"))?;
    let w2 = g.param(params, &format!("{prefix}.mlp.w2"))?;
    let b2 = g.param(params, &format!("{prefix}.mlp.b2"))?;
    let h = g.linear(x, w1, Some(b1))?;
    let h = g.gelu(h);
    g.linear(h, w2, Some(b2))
}

/// Pre-norm residual block with a caller-supplied QKV projection:
/// `h = x + attn(norm(x))`, `out = h + mlp(norm(h))`.
#[allow(clippy::too_many_arguments)]
pub fn block_forward_with<F>(
    g: &mut Graph,
    x: Var,
    params: &ParamTree,
    prefix: &str,
    cfg: &BlockConfig,
    segments: Vec<AttnSegment>,
    positions: Option<&[f64]>,
    qkv: F,
) -> Result<Var>
where
    F: FnOnce(&mut Graph, Var) -> Result<(Var, Var, Var)>,
{
    let n1 = g.param(params, &format!("{prefix}.norm.attn"))?;
    let h = g.rms_norm(x, n1, NORM_EPS)?;
    let (q, k, v) = qkv(g, h)?;
    let aw = AttnWeights::bind(g, params, prefix, cfg)?;
    let a = attention_segments(g, q, k, v, segments, cfg.num_heads, &aw, positions)?;
    let x = g.add(x, a)?;
    let n2 = g.param(params, &format!("{prefix}.norm.mlp"))?;
    let h = g.rms_norm(x, n2, NORM_EPS)?;
    let m = mlp(g, params, prefix, h)?;
    g.add(x, m)
}

/// Standard block: one QKV set named `{prefix}.attn.w{q,k,v}`.
pub fn block_forward(
    g: &mut Graph,
    x: Var,
    params: &ParamTree,
    prefix: &str,
    cfg: &BlockConfig,
    segments: Vec<AttnSegment>,
    positions: Option<&[f64]>,
) -> Result<Var> {
    let w = QkvWeights::bind(g, params, prefix, "", cfg.qkv_bias)?;
    block_forward_with(g, x, params, prefix, cfg, segments, positions, |g, h| w.project(g, h))
}

/// Registers every tensor of one standard block.
pub fn init_block<R: Rng + ?Sized>(
    params: &mut ParamTree,
    prefix: &str,
    branch: Branch,
    cfg: &BlockConfig,
    rng: &mut R,
) -> Result<()> {
    init_qkv(params, prefix, "", branch, cfg, rng)?;
    init_block_shared(params, prefix, branch, cfg, rng)
}

pub(crate) fn init_qkv<R: Rng + ?Sized>(
    params: &mut ParamTree,
    prefix: &str,
    suffix: &str,
    branch: Branch,
    cfg: &BlockConfig,
    rng: &mut R,
) -> Result<()> {
    let d = cfg.model_dim;
    let std = (1.0 / d as f64).sqrt();
    for n in ["wq", "wk", "wv"] {
        params.insert_randn(format!("{prefix}.attn.{n}{suffix}"), branch, &[d, d], std, rng)?;
    }
    if cfg.qkv_bias {
        for n in ["bq", "bk", "bv"] {
            params.insert_const(format!("{prefix}.attn.{n}{suffix}"), branch, &[d], 0.0)?;
        }
    }
    Ok(())
}

/// Norms, output projection and MLP of a block (everything but QKV).
pub(crate) fn init_block_shared<R: Rng + ?Sized>(
    params: &mut ParamTree,
    prefix: &str,
    branch: Branch,
    cfg: &BlockConfig,
    rng: &mut R,
) -> Result<()> {
    let d = cfg.model_dim;
    let resid_std = (1.0 / d as f64).sqrt() / (2.0 * cfg.num_layers.max(1) as f64).sqrt();
    params.insert_const(format!("{prefix}.norm.attn"), branch, &[d], 1.0)?;
    params.insert_const(format!("{prefix}.norm.mlp"), branch, &[d], 1.0)?;
    if cfg.qk_norm {
        params.insert_const(format!("{prefix}.attn.q_norm"), branch, &[cfg.head_dim], 1.0)?;
        params.insert_const(format!("{prefix}.attn.k_norm"), branch, &[cfg.head_dim], 1.0)?;
    }
    params.insert_randn(format!("{prefix}.attn.wo"), branch, &[d, d], resid_std, rng)?;
    params.insert_const(format!("{prefix}.attn.bo"), branch, &[d], 0.0)?;
    params.insert_randn(format!("{prefix}.mlp.w1"), branch, &[d, cfg.mlp_hidden], (1.0 / d as f64).sqrt(), rng)?;
    params.insert_const(format!("{prefix}.mlp.b1"), branch, &[cfg.mlp_hidden], 0.0)?;
    let std2 = (1.0 / cfg.mlp_hidden as f64).sqrt() / (2.0 * cfg.num_layers.max(1) as f64).sqrt();
    params.insert_randn(format!("{prefix}.mlp.w2"), branch, &[cfg.mlp_hidden, d], std2, rng)?;
    params.insert_const(format!("{prefix}.mlp.b2"), branch, &[d], 0.0)?;
    Ok(())
}

/// A dense layer `[fan_in, fan_out]` plus bias.
pub fn init_linear<R: Rng + ?Sized>(
    params: &mut ParamTree,
    name: &str,
    branch: Branch,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    params.insert_randn(format!("{name}.w"), branch, &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng)?;
    params.insert_const(format!("{name}.b"), branch, &[fan_out], 0.0)
}

pub fn linear_named(g: &mut Graph, params: &ParamTree, name: &str, x: Var) -> Result<Var> {
    let w = g.param(params, &format!("{name}.w"))?;
    let b = g.param(params, &format!("{name}.b"))?;
    g.linear(x, w, Some(b))
}

/// Sinusoidal features of a scalar, `dim` wide (half sin, half cos).
pub fn sinusoidal(value: f64, dim: usize, max_period: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
        out.push((value * freq).sin());
    }
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
        out.push((value * freq).cos());
    }
    out
}
