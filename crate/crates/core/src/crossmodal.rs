//! Joint self-attention over `[T_in, N]` with modality-selected projections.
//!
//! Text rows (before the boundary) are projected to queries, keys and values
//! by one parameter set and noise rows by another; a single bidirectional
//! attention then mixes both. There is no separate cross-attention path.

use crate::blocks::{attention_segments, AttnWeights, QkvWeights};
use crate::error::{Error, Result};
use crate::tensor::{AttnSegment, Graph, ParamTree, SegmentMask, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Text,
    Noise,
}

/// Selector pair `(text, noise)` for position `i` of a sequence of length
/// `len` whose noise rows start at `boundary`. Exactly one entry is 1.
pub fn modality_select(i: usize, boundary: usize, len: usize) -> Result<(f64, f64)> {
    if i >= len {
        return Err(Error::IndexOutOfRange { index: i, len });
    }
    Ok(if i < boundary { (1.0, 0.0) } else { (0.0, 1.0) })
}

/// One sequence of a batch: `len` rows, the first `boundary` of them text.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub len: usize,
    pub boundary: usize,
}

/// Row layout of one or more unified sequences laid end to end.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub spans: Vec<Span>,
}

impl SequenceLayout {
    pub fn new(spans: Vec<Span>) -> Result<Self> {
        if let Some(s) = spans.iter().find(|s| s.boundary > s.len) {
            return Err(Error::IndexOutOfRange {
                index: s.boundary,
                len: s.len,
            });
        }
        Ok(SequenceLayout { spans })
    }

    pub fn single(len: usize, boundary: usize) -> Result<Self> {
        SequenceLayout::new(vec![Span { len, boundary }])
    }

    pub fn total_len(&self) -> usize {
        self.spans.iter().map(|s| s.len).sum()
    }

    pub fn modalities(&self) -> Vec<Modality> {
        let mut out = Vec::with_capacity(self.total_len());
        for s in &self.spans {
            out.extend((0..s.len).map(|i| if i < s.boundary { Modality::Text } else { Modality::Noise }));
        }
        out
    }

    /// Global row indices of each modality, in order.
    pub fn partition(&self) -> (Vec<usize>, Vec<usize>) {
        let mut text = Vec::new();
        let mut noise = Vec::new();
        for (r, m) in self.modalities().into_iter().enumerate() {
            match m {
                Modality::Text => text.push(r),
                Modality::Noise => noise.push(r),
            }
        }
        (text, noise)
    }

    /// Fully bidirectional attention within each sequence.
    pub fn segments(&self) -> Vec<AttnSegment> {
        let mut start = 0;
        self.spans
            .iter()
            .map(|s| {
                let seg = AttnSegment {
                    start,
                    len: s.len,
                    mask: SegmentMask::Full,
                };
                start += s.len;
                seg
            })
            .collect()
    }
}

/// Embedded rows of `[T_in, N]` plus their layout.
#[derive(Clone, Debug)]
pub struct UnifiedSequence {
    pub rows: Var,
    pub layout: SequenceLayout,
}

impl UnifiedSequence {
    /// Stacks text and noise rows of each sample: `[text₀, noise₀, text₁, …]`.
    pub fn from_parts(g: &mut Graph, parts: &[(Var, Var)]) -> Result<Self> {
        let mut rows = Vec::with_capacity(parts.len() * 2);
        let mut spans = Vec::with_capacity(parts.len());
        for &(t, n) in parts {
            let (lt, ln) = (g.shape(t)[0], g.shape(n)[0]);
            rows.push(t);
            rows.push(n);
            spans.push(Span {
                len: lt + ln,
                boundary: lt,
            });
        }
        Ok(UnifiedSequence {
            rows: g.concat(&rows)?,
            layout: SequenceLayout::new(spans)?,
        })
    }
}

/// Text-side and noise-side QKV sets of one layer, bound to a graph.
#[derive(Clone, Copy, Debug)]
pub struct DualProjection {
    pub text: QkvWeights,
    pub noise: QkvWeights,
}

impl DualProjection {
    /// Binds `{prefix}.attn.w{q,k,v}_und` and `{prefix}.attn.w{q,k,v}_gen`.
    pub fn bind(g: &mut Graph, params: &ParamTree, prefix: &str, bias: bool) -> Result<Self> {
        Ok(DualProjection {
            text: QkvWeights::bind(g, params, prefix, "_und", bias)?,
            noise: QkvWeights::bind(g, params, prefix, "_gen", bias)?,
        })
    }
}

/// Projects every row by exactly one of the two parameter sets, chosen by
/// its modality, keeping row order.
pub fn dual_qkv_rows(g: &mut Graph, rows: Var, layout: &SequenceLayout, proj: &DualProjection) -> Result<(Var, Var, Var)> {
    let total = g.shape(rows)[0];
    if total != layout.total_len() {
        return Err(Error::LengthMismatch {
            what: "unified sequence rows",
            expected: layout.total_len(),
            got: total,
        });
    }
    let (text, noise) = layout.partition();
    if noise.is_empty() {
        return proj.text.project(g, rows);
    }
    if text.is_empty() {
        return proj.noise.project(g, rows);
    }
    let xt = g.select_rows(rows, &text)?;
    let xn = g.select_rows(rows, &noise)?;
    let (qt, kt, vt) = proj.text.project(g, xt)?;
    let (qn, kn, vn) = proj.noise.project(g, xn)?;
    // Row r of the output comes from its position within its modality block.
    let mut order = vec![0; total];
    for (j, &r) in text.iter().enumerate() {
        order[r] = j;
    }
    for (j, &r) in noise.iter().enumerate() {
        order[r] = text.len() + j;
    }
    let mut merge = |a: Var, b: Var| -> Result<Var> {
        let stacked = g.concat(&[a, b])?;
        g.select_rows(stacked, &order)
    };
    Ok((merge(qt, qn)?, merge(kt, kn)?, merge(vt, vn)?))
}

pub fn dual_qkv(g: &mut Graph, seq: &UnifiedSequence, proj: &DualProjection) -> Result<(Var, Var, Var)> {
    dual_qkv_rows(g, seq.rows, &seq.layout, proj)
}

/// Bidirectional multi-head attention over the dual-projected sequence.
pub fn joint_attention(
    g: &mut Graph,
    seq: &UnifiedSequence,
    proj: &DualProjection,
    weights: &AttnWeights,
    heads: usize,
    positions: Option<&[f64]>,
) -> Result<Var> {
    let (q, k, v) = dual_qkv(g, seq, proj)?;
    attention_segments(g, q, k, v, seq.layout.segments(), heads, weights, positions)
}
