use std::sync::Arc;

use super::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn};
use super::{broadcast_index_map, broadcast_shape, ParamTree, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Sqrt,
    Square,
    /// tanh approximation
    Gelu,
    Silu,
    Relu,
    Sigmoid,
    Tanh,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Unary {
    fn forward(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Unary::Silu => x / (1.0 + (-x).exp()),
            Unary::Relu => x.max(0.0),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
        }
    }

    /// d/dx given input x and output y.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Sqrt => 0.5 / y,
            Unary::Square => 2.0 * x,
            Unary::Gelu => {
                let inner = GELU_C * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            }
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Which key positions a query inside one attention segment may see.
#[derive(Clone, Debug)]
pub enum SegmentMask {
    /// j ≤ i
    Causal,
    /// every position
    Full,
    /// Row-major `len × len` boolean matrix.
    Explicit(Arc<Vec<bool>>),
}

impl SegmentMask {
    #[inline]
    fn allows(&self, len: usize, i: usize, j: usize) -> bool {
        match self {
            SegmentMask::Causal => j <= i,
            SegmentMask::Full => true,
            SegmentMask::Explicit(m) => m[i * len + j],
        }
    }
}

/// A contiguous block of rows that attend only among themselves.
#[derive(Clone, Debug)]
pub struct AttnSegment {
    pub start: usize,
    pub len: usize,
    pub mask: SegmentMask,
}

#[derive(Clone, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        /// Broadcast maps (output flat index → input flat index); `None` when
        /// the input already has the output shape.
        map_a: Option<Vec<usize>>,
        map_b: Option<Vec<usize>>,
    },
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    MatMul {
        a: Var,
        b: Var,
        batch_a: Vec<usize>,
        batch_b: Vec<usize>,
        m: usize,
        k: usize,
        n: usize,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    RmsNorm {
        x: Var,
        w: Var,
        inv_rms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    BceLogits {
        x: Var,
        targets: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Reshape(Var),
    Gather {
        x: Var,
        idx: Vec<Option<usize>>,
    },
    Concat(Vec<Var>),
    Rope {
        x: Var,
        cos: Vec<f64>,
        sin: Vec<f64>,
        heads: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<AttnSegment>,
        heads: usize,
        /// Softmax rows per (segment, head), each `len × len`.
        probs: Vec<Vec<f64>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear tape of tensor operations. Nodes are appended in evaluation order,
/// so reverse insertion order is a valid topological order for backward.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<(Var, String)>,
    /// When set, parameters are bound as constants regardless of their flag.
    no_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// A graph that never records gradients; used for sampling and evaluation.
    pub fn inference() -> Self {
        Graph {
            no_grad: true,
            ..Graph::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn bindings(&self) -> &[(Var, String)] {
        &self.bindings
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = self.nodes.len();
        self.nodes.push(Node {
            value: Tensor {
                shape,
                data,
                requires_grad,
                grad: None,
            },
            op,
            requires_grad,
        });
        Var(id)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records `t` as a leaf. It participates in backward iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad && !self.no_grad;
        self.push(t.shape, t.data, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    /// Leaf that always requires grad (inputs under gradient check).
    pub fn input(&mut self, t: Tensor) -> Var {
        let rg = !self.no_grad;
        self.push(t.shape, t.data, Op::Leaf, rg)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// Binds a named parameter as a leaf; trainable entries get gradients.
    pub fn param(&mut self, params: &ParamTree, name: &str) -> Result<Var> {
        let t = params.get(name)?;
        let rg = t.requires_grad && !self.no_grad;
        let v = self.push(t.shape.clone(), t.data.clone(), Op::Leaf, rg);
        if rg {
            self.bindings.push((v, name.to_string()));
        }
        Ok(v)
    }

    // ----- elementwise -------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out = broadcast_shape(&sa, &sb).ok_or_else(|| Error::ShapeMismatch {
            op: match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
            },
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let map_a = (sa != out).then(|| fast_map(&sa, &out));
        let map_b = (sb != out).then(|| fast_map(&sb, &out));
        let da = self.data(a);
        let db = self.data(b);
        let numel: usize = out.iter().product();
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
            Binary::Div => |x: f64, y: f64| x / y,
        };
        let data: Vec<f64> = match (&map_a, &map_b) {
            (None, None) => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..numel)
                .map(|i| {
                    let ia = map_a.as_ref().map_or(i, |m| m[i]);
                    let ib = map_b.as_ref().map_or(i, |m| m[i]);
                    f(da[ia], db[ib])
                })
                .collect(),
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            out,
            data,
            Op::Binary {
                kind,
                a,
                b,
                map_a,
                map_b,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|v| v * s).collect();
        let shape = t.shape.clone();
        let rg = self.rg(&[x]);
        self.push(shape, data, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|v| v + s).collect();
        let shape = t.shape.clone();
        let rg = self.rg(&[x]);
        self.push(shape, data, Op::AddScalar(x), rg)
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|&v| f.forward(v)).collect();
        let shape = t.shape.clone();
        let rg = self.rg(&[x]);
        self.push(shape, data, Op::Unary(x, f), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    // ----- linear algebra ----------------------------------------------

    /// Batched matrix product `[.., m, k] · [.., k, n]` with broadcast batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::InnerDim { lhs: sa, rhs: sb });
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::InnerDim { lhs: sa, rhs: sb });
        }
        let (batch_a, batch_b, out_shape, m_eff) = if sb.len() == 2 {
            // Fold every leading dim of `a` into rows.
            let rows: usize = sa[..sa.len() - 1].iter().product();
            let mut out = sa[..sa.len() - 1].to_vec();
            out.push(n);
            (vec![0], vec![0], out, rows)
        } else {
            let ba = &sa[..sa.len() - 2];
            let bb = &sb[..sb.len() - 2];
            let batch = broadcast_shape(ba, bb).ok_or_else(|| Error::ShapeMismatch {
                op: "matmul batch",
                lhs: sa.clone(),
                rhs: sb.clone(),
            })?;
            let map_a = broadcast_index_map(ba, &batch);
            let map_b = broadcast_index_map(bb, &batch);
            let mut out = batch;
            out.push(m);
            out.push(n);
            (map_a, map_b, out, m)
        };
        let da = self.data(a);
        let db = self.data(b);
        let mut data = vec![0.0; out_shape.iter().product()];
        for (bi, (&ia, &ib)) in batch_a.iter().zip(&batch_b).enumerate() {
            gemm_nn(
                &da[ia * m_eff * k..(ia + 1) * m_eff * k],
                &db[ib * k * n..(ib + 1) * k * n],
                &mut data[bi * m_eff * n..(bi + 1) * m_eff * n],
                m_eff,
                k,
                n,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            out_shape,
            data,
            Op::MatMul {
                a,
                b,
                batch_a,
                batch_b,
                m: m_eff,
                k,
                n,
            },
            rg,
        ))
    }

    /// `x · w + bias` for a weight stored as `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ----- normalization and losses ------------------------------------

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let base = o * len * inner + j;
                let mut mx = f64::NEG_INFINITY;
                for i in 0..len {
                    mx = mx.max(src[base + i * inner]);
                }
                let mut s = 0.0;
                for i in 0..len {
                    let e = (src[base + i * inner] - mx).exp();
                    out[base + i * inner] = e;
                    s += e;
                }
                for i in 0..len {
                    out[base + i * inner] /= s;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// RMS normalization over the last axis, scaled by `weight`.
    pub fn rms_norm(&mut self, x: Var, weight: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap_or(&1);
        if self.shape(weight) != [n] {
            return Err(Error::ShapeMismatch {
                op: "rms_norm",
                lhs: shape,
                rhs: self.shape(weight).to_vec(),
            });
        }
        let src = self.data(x);
        let w = self.data(weight);
        let rows = src.len().checked_div(n).unwrap_or(0);
        let mut out = vec![0.0; src.len()];
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let ms = dot(row, row) / n as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for c in 0..n {
                out[r * n + c] = row[c] * inv * w[c];
            }
        }
        let rg = self.rg(&[x, weight]);
        Ok(self.push(
            shape,
            out,
            Op::RmsNorm {
                x,
                w: weight,
                inv_rms,
            },
            rg,
        ))
    }

    /// Mean cross-entropy of `logits[n, V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let n = targets.len();
        let w = if n == 0 { vec![] } else { vec![1.0 / n as f64; n] };
        self.cross_entropy_weighted(logits, targets, &w)
    }

    /// Σᵢ wᵢ · CE(logitsᵢ, targetᵢ).
    pub fn cross_entropy_weighted(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        if weights.len() != targets.len() {
            return Err(Error::LengthMismatch {
                what: "cross_entropy weights",
                expected: targets.len(),
                got: weights.len(),
            });
        }
        let vocab = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: vocab,
            });
        }
        let src = self.data(logits);
        let mut probs = vec![0.0; src.len()];
        let mut loss = 0.0;
        for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            let row = &src[i * vocab..(i + 1) * vocab];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (j, &l) in row.iter().enumerate() {
                let e = (l - mx).exp();
                probs[i * vocab + j] = e;
                s += e;
            }
            for p in &mut probs[i * vocab..(i + 1) * vocab] {
                *p /= s;
            }
            loss += w * (mx + s.ln() - row[t]);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy with logits.
    pub fn bce_with_logits(&mut self, x: Var, targets: &[f64]) -> Result<Var> {
        let src = self.data(x);
        if src.len() != targets.len() {
            return Err(Error::LengthMismatch {
                what: "bce targets",
                expected: src.len(),
                got: targets.len(),
            });
        }
        let n = src.len() as f64;
        let loss: f64 = src
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::BceLogits {
                x,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    // ----- reductions and shape ----------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(&[x]);
        self.push(vec![], vec![s], Op::Mean(x), rg)
    }

    /// Sums away the last axis.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap_or(&1);
        let data: Vec<f64> = self.data(x).chunks(n.max(1)).map(|c| c.iter().sum()).collect();
        let out = shape[..shape.len().saturating_sub(1)].to_vec();
        let rg = self.rg(&[x]);
        self.push(out, data, Op::SumLast(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.data(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), rg))
    }

    /// `out[i] = x[idx[i]]` over flat indices, zero where `idx[i]` is `None`.
    pub fn gather(&mut self, x: Var, idx: Vec<Option<usize>>, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != idx.len() {
            return Err(Error::LengthMismatch {
                what: "gather indices",
                expected: numel,
                got: idx.len(),
            });
        }
        let src = self.data(x);
        let mut data = Vec::with_capacity(numel);
        for i in &idx {
            match *i {
                Some(j) if j >= src.len() => {
                    return Err(Error::IndexOutOfRange {
                        index: j,
                        len: src.len(),
                    })
                }
                Some(j) => data.push(src[j]),
                None => data.push(0.0),
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), data, Op::Gather { x, idx }, rg))
    }

    /// Selects rows of a tensor viewed as `[rows, cols]`.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().unwrap_or(&1);
        let nrows = self.data(x).len() / cols.max(1);
        let mut idx = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= nrows {
                return Err(Error::IndexOutOfRange {
                    index: r,
                    len: nrows,
                });
            }
            idx.extend((0..cols).map(|c| Some(r * cols + c)));
        }
        self.gather(x, idx, &[rows.len(), cols])
    }

    /// Concatenation along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let tail = first[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[1..] != tail[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.rg(parts);
        Ok(self.push(shape, data, Op::Concat(parts.to_vec()), rg))
    }

    // ----- attention primitives -----------------------------------------

    /// Rotates consecutive pairs within each head of `x[R, heads·head_dim]`
    /// by `position · base^(-2i/head_dim)`.
    pub fn rope(&mut self, x: Var, positions: &[f64], heads: usize, base: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != positions.len() {
            return Err(Error::ShapeMismatch {
                op: "rope",
                lhs: shape,
                rhs: vec![positions.len()],
            });
        }
        let width = shape[1];
        if heads == 0 || !width.is_multiple_of(heads) || !(width / heads).is_multiple_of(2) {
            return Err(Error::Indivisible {
                dim: width,
                factor: heads * 2,
            });
        }
        let hd = width / heads;
        let half = hd / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for i in 0..half {
                let freq = base.powf(-(2.0 * i as f64) / hd as f64);
                let (s, c) = (p * freq).sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        rotate(src, &mut out, &cos, &sin, heads, hd, false);
        let rg = self.rg(&[x]);
        Ok(self.push(
            shape,
            out,
            Op::Rope {
                x,
                cos,
                sin,
                heads,
            },
            rg,
        ))
    }

    /// Scaled dot-product attention over `q, k, v: [R, heads·head_dim]`.
    /// Rows attend only within their segment, subject to its mask.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<AttnSegment>,
        heads: usize,
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 2 || self.shape(k) != shape || self.shape(v) != shape {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: shape,
                rhs: self.shape(k).to_vec(),
            });
        }
        let (rows, width) = (shape[0], shape[1]);
        if heads == 0 || width % heads != 0 {
            return Err(Error::Indivisible {
                dim: width,
                factor: heads,
            });
        }
        let hd = width / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let rg = self.rg(&[q, k, v]);
        let (dq, dk, dv) = (self.data(q), self.data(k), self.data(v));
        let mut out = vec![0.0; rows * width];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for seg in &segments {
            if seg.start + seg.len > rows {
                return Err(Error::IndexOutOfRange {
                    index: seg.start + seg.len,
                    len: rows,
                });
            }
            if let SegmentMask::Explicit(m) = &seg.mask {
                if m.len() != seg.len * seg.len {
                    return Err(Error::LengthMismatch {
                        what: "attention mask",
                        expected: seg.len * seg.len,
                        got: m.len(),
                    });
                }
            }
            let l = seg.len;
            for h in 0..heads {
                let off = h * hd;
                let mut p = vec![0.0; l * l];
                for i in 0..l {
                    let qi = &dq[(seg.start + i) * width + off..][..hd];
                    scores.clear();
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..l {
                        if seg.mask.allows(l, i, j) {
                            let kj = &dk[(seg.start + j) * width + off..][..hd];
                            let s = dot(qi, kj) * scale;
                            mx = mx.max(s);
                            scores.push((j, s));
                        }
                    }
                    if scores.is_empty() {
                        return Err(Error::AllMaskedRow { row: i });
                    }
                    let mut z = 0.0;
                    for &(j, s) in &scores {
                        let e = (s - mx).exp();
                        p[i * l + j] = e;
                        z += e;
                    }
                    let orow = &mut out[(seg.start + i) * width + off..][..hd];
                    for &(j, _) in &scores {
                        let pij = p[i * l + j] / z;
                        p[i * l + j] = pij;
                        axpy(pij, &dv[(seg.start + j) * width + off..][..hd], orow);
                    }
                }
                if rg {
                    probs.push(p);
                }
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            },
            rg,
        ))
    }

    // ----- backward -------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if self.data(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Binary {
                kind,
                a,
                b,
                map_a,
                map_b,
            } => {
                let (a, b) = (*a, *b);
                let da = self.data(a);
                let db = self.data(b);
                let ia = |i: usize| map_a.as_ref().map_or(i, |m| m[i]);
                let ib = |i: usize| map_b.as_ref().map_or(i, |m| m[i]);
                if self.needs(a) {
                    let ga = acc(grads, a, da.len());
                    for (i, &gi) in g.iter().enumerate() {
                        ga[ia(i)] += match kind {
                            Binary::Add | Binary::Sub => gi,
                            Binary::Mul => gi * db[ib(i)],
                            Binary::Div => gi / db[ib(i)],
                        };
                    }
                }
                if self.needs(b) {
                    let gb = acc(grads, b, db.len());
                    for (i, &gi) in g.iter().enumerate() {
                        gb[ib(i)] += match kind {
                            Binary::Add => gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * da[ia(i)],
                            Binary::Div => -gi * da[ia(i)] / (db[ib(i)] * db[ib(i)]),
                        };
                    }
                }
            }
            Op::Scale(x, s) => {
                let gx = acc(grads, *x, g.len());
                axpy(*s, g, gx);
            }
            Op::AddScalar(x) => {
                let gx = acc(grads, *x, g.len());
                axpy(1.0, g, gx);
            }
            Op::Unary(x, f) => {
                let xs = self.data(*x);
                let gx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * f.derivative(xs[i], out.data[i]);
                }
            }
            Op::MatMul {
                a,
                b,
                batch_a,
                batch_b,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let da = self.data(*a);
                let db = self.data(*b);
                if self.needs(*a) {
                    let ga = acc(grads, *a, da.len());
                    for (bi, (&ia, &ib)) in batch_a.iter().zip(batch_b).enumerate() {
                        gemm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &db[ib * k * n..(ib + 1) * k * n],
                            &mut ga[ia * m * k..(ia + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if self.needs(*b) {
                    let gb = acc(grads, *b, db.len());
                    for (bi, (&ia, &ib)) in batch_a.iter().zip(batch_b).enumerate() {
                        gemm_tn(
                            &da[ia * m * k..(ia + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[ib * k * n..(ib + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = &out.data;
                let gx = acc(grads, *x, y.len());
                for o in 0..*outer {
                    for j in 0..*inner {
                        let base = o * len * inner + j;
                        let mut s = 0.0;
                        for i in 0..*len {
                            s += y[base + i * inner] * g[base + i * inner];
                        }
                        for i in 0..*len {
                            let idx = base + i * inner;
                            gx[idx] += y[idx] * (g[idx] - s);
                        }
                    }
                }
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let xs = self.data(*x);
                let ws = self.data(*w);
                let n = ws.len();
                if self.needs(*w) {
                    let gw = acc(grads, *w, n);
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for c in 0..n {
                            gw[c] += g[r * n + c] * xs[r * n + c] * inv;
                        }
                    }
                }
                if self.needs(*x) {
                    let gx = acc(grads, *x, xs.len());
                    let mut dxhat = vec![0.0; n];
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let row = &xs[r * n..(r + 1) * n];
                        let mut proj = 0.0;
                        for c in 0..n {
                            dxhat[c] = g[r * n + c] * ws[c];
                            proj += dxhat[c] * row[c] * inv;
                        }
                        proj /= n as f64;
                        for c in 0..n {
                            gx[r * n + c] += inv * (dxhat[c] - row[c] * inv * proj);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let vocab = probs.len() / targets.len().max(1);
                let gl = acc(grads, *logits, probs.len());
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let scale = g[0] * w;
                    for j in 0..vocab {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gl[i * vocab + j] += scale * (probs[i * vocab + j] - onehot);
                    }
                }
            }
            Op::BceLogits { x, targets } => {
                let xs = self.data(*x);
                let n = xs.len() as f64;
                let gx = acc(grads, *x, xs.len());
                for i in 0..xs.len() {
                    gx[i] += g[0] * (sigmoid(xs[i]) - targets[i]) / n;
                }
            }
            Op::Sum(x) => {
                let len = self.data(*x).len();
                let gx = acc(grads, *x, len);
                for v in gx.iter_mut() {
                    *v += g[0];
                }
            }
            Op::Mean(x) => {
                let len = self.data(*x).len();
                let gx = acc(grads, *x, len);
                let s = g[0] / len as f64;
                for v in gx.iter_mut() {
                    *v += s;
                }
            }
            Op::SumLast(x) => {
                let len = self.data(*x).len();
                let n = len / g.len().max(1);
                let gx = acc(grads, *x, len);
                for (r, &gr) in g.iter().enumerate() {
                    for v in &mut gx[r * n..(r + 1) * n] {
                        *v += gr;
                    }
                }
            }
            Op::Reshape(x) => {
                let gx = acc(grads, *x, g.len());
                axpy(1.0, g, gx);
            }
            Op::Gather { x, idx } => {
                let len = self.data(*x).len();
                let gx = acc(grads, *x, len);
                for (i, j) in idx.iter().enumerate() {
                    if let Some(j) = *j {
                        gx[j] += g[i];
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.data(p).len();
                    if self.needs(p) {
                        let gp = acc(grads, p, len);
                        axpy(1.0, &g[off..off + len], gp);
                    }
                    off += len;
                }
            }
            Op::Rope { x, cos, sin, heads } => {
                let width = out.shape[1];
                let hd = width / heads;
                let mut tmp = vec![0.0; g.len()];
                rotate(g, &mut tmp, cos, sin, *heads, hd, true);
                let gx = acc(grads, *x, g.len());
                axpy(1.0, &tmp, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, segments, *heads, probs, g, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[AttnSegment],
        heads: usize,
        probs: &[Vec<f64>],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let width = self.shape(q)[1];
        let hd = width / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (dq, dk, dv) = (self.data(q), self.data(k), self.data(v));
        let total = dq.len();
        let mut gq = vec![0.0; total];
        let mut gk = vec![0.0; total];
        let mut gv = vec![0.0; total];
        let mut dp = Vec::new();
        let mut pi = 0;
        for seg in segments {
            let l = seg.len;
            for h in 0..heads {
                let off = h * hd;
                let p = &probs[pi];
                pi += 1;
                for i in 0..l {
                    let gi = &g[(seg.start + i) * width + off..][..hd];
                    dp.clear();
                    let mut s = 0.0;
                    for j in 0..l {
                        let pij = p[i * l + j];
                        if pij == 0.0 && !seg.mask.allows(l, i, j) {
                            dp.push(0.0);
                            continue;
                        }
                        let vj = &dv[(seg.start + j) * width + off..][..hd];
                        let d = dot(gi, vj);
                        dp.push(d);
                        s += pij * d;
                        axpy(pij, gi, &mut gv[(seg.start + j) * width + off..][..hd]);
                    }
                    let qi_off = (seg.start + i) * width + off;
                    for j in 0..l {
                        let pij = p[i * l + j];
                        if pij == 0.0 {
                            continue;
                        }
                        let ds = pij * (dp[j] - s) * scale;
                        let kj_off = (seg.start + j) * width + off;
                        axpy(ds, &dk[kj_off..kj_off + hd], &mut gq[qi_off..qi_off + hd]);
                        axpy(ds, &dq[qi_off..qi_off + hd], &mut gk[kj_off..kj_off + hd]);
                    }
                }
            }
        }
        for (var, gvec) in [(q, gq), (k, gk), (v, gv)] {
            if self.needs(var) {
                let dst = acc(grads, var, total);
                axpy(1.0, &gvec, dst);
            }
        }
    }
}

fn fast_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let src_numel: usize = src.iter().product();
    let out_numel: usize = out.iter().product();
    // Suffix shape (bias-style) tiles by modulo.
    let is_suffix = src.len() <= out.len() && out[out.len() - src.len()..] == *src;
    if is_suffix && src_numel > 0 {
        (0..out_numel).map(|i| i % src_numel).collect()
    } else {
        broadcast_index_map(src, out)
    }
}

fn rotate(src: &[f64], dst: &mut [f64], cos: &[f64], sin: &[f64], heads: usize, hd: usize, inverse: bool) {
    let half = hd / 2;
    let width = heads * hd;
    let rows = src.len() / width.max(1);
    let sgn = if inverse { -1.0 } else { 1.0 };
    for r in 0..rows {
        for h in 0..heads {
            for i in 0..half {
                let c = cos[r * half + i];
                let s = sgn * sin[r * half + i];
                let idx = r * width + h * hd + 2 * i;
                let (x0, x1) = (src[idx], src[idx + 1]);
                dst[idx] = x0 * c - x1 * s;
                dst[idx + 1] = x0 * s + x1 * c;
            }
        }
    }
}
