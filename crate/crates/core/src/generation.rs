//! Latent flow-matching branch.
//!
//! Images are mapped to a small latent grid by a frozen patchwise codec. The
//! velocity network reads `[condition rows, noisy latent rows]` through the
//! dual-projection backbone and is trained to regress `x1 − x0` along the
//! straight path `x_t = (1 − t)·x0 + t·x1`. Sampling integrates the learned
//! field with Euler steps from noise at `t = 0` to data at `t = 1`.

use std::path::Path;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

use crate::blocks::{block_forward_with, init_linear, linear_named, position_indices, sinusoidal, NORM_EPS};
use crate::crossmodal::{dual_qkv_rows, DualProjection, UnifiedSequence};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, POSITION_CAPACITY};
use crate::tensor::{load_checkpoint, save_checkpoint, AdamW, Branch, Checkpoint, Graph, OptimizerState, ParamTree, Tensor, Var};
use crate::understanding::patchify;

// ----- latent codec ------------------------------------------------------

/// Patchwise autoencoder: each `factor × factor` pixel block maps to
/// `channels` latent values through a one-hidden-layer MLP, and back.
/// Latents are standardized per channel with statistics measured after
/// training.
#[derive(Clone, Debug, PartialEq)]
pub struct Codec {
    pub factor: usize,
    pub channels: usize,
    pub hidden: usize,
    pub params: ParamTree,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Codec {
    pub fn new<R: Rng + ?Sized>(factor: usize, channels: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let mut params = ParamTree::new();
        let px = factor * factor;
        let b = Branch::Generation;
        init_linear(&mut params, "codec.enc1", b, px, hidden, rng)?;
        init_linear(&mut params, "codec.enc2", b, hidden, channels, rng)?;
        init_linear(&mut params, "codec.dec1", b, channels, hidden, rng)?;
        init_linear(&mut params, "codec.dec2", b, hidden, px, rng)?;
        Ok(Codec {
            factor,
            channels,
            hidden,
            params,
            shift: vec![0.0; channels],
            scale: vec![1.0; channels],
        })
    }

    fn grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        for dim in [h, w] {
            if dim % self.factor != 0 {
                return Err(Error::Indivisible {
                    dim,
                    factor: self.factor,
                });
            }
        }
        Ok((h / self.factor, w / self.factor))
    }

    /// Raw (unstandardized) latent rows `[h·w, channels]`.
    fn encode_raw(&self, g: &mut Graph, params: &ParamTree, image: Var) -> Result<Var> {
        let patches = patchify(g, image, self.factor)?;
        let h = linear_named(g, params, "codec.enc1", patches)?;
        let h = g.gelu(h);
        linear_named(g, params, "codec.enc2", h)
    }

    /// Pixel rows `[h·w, factor²]` from raw latent rows.
    fn decode_raw(&self, g: &mut Graph, params: &ParamTree, z: Var) -> Result<Var> {
        let h = linear_named(g, params, "codec.dec1", z)?;
        let h = g.gelu(h);
        linear_named(g, params, "codec.dec2", h)
    }

    /// Reassembles `[h·w, factor²]` patch rows into an `[H, W, 1]` image.
    fn unpatchify(&self, rows: &[f64], gh: usize, gw: usize) -> Result<Tensor> {
        let f = self.factor;
        let (hh, ww) = (gh * f, gw * f);
        let mut out = vec![0.0; hh * ww];
        for py in 0..gh {
            for px in 0..gw {
                let base = (py * gw + px) * f * f;
                for dy in 0..f {
                    for dx in 0..f {
                        out[(py * f + dy) * ww + px * f + dx] = rows[base + dy * f + dx];
                    }
                }
            }
        }
        Tensor::new(vec![hh, ww, 1], out)
    }

    /// Standardized latent grid `[H/f, W/f, channels]`.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let (gh, gw) = self.grid(image.shape[0], image.shape[1])?;
        let mut g = Graph::inference();
        let x = g.constant(image.clone());
        let z = self.encode_raw(&mut g, &self.params, x)?;
        let mut data = g.data(z).to_vec();
        for row in data.chunks_mut(self.channels) {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - self.shift[c]) / self.scale[c];
            }
        }
        Tensor::new(vec![gh, gw, self.channels], data)
    }

    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        if latent.rank() != 3 || latent.shape[2] != self.channels {
            return Err(Error::ShapeMismatch {
                op: "codec decode",
                lhs: latent.shape.clone(),
                rhs: vec![self.channels],
            });
        }
        let (gh, gw) = (latent.shape[0], latent.shape[1]);
        let mut raw = latent.data.clone();
        for row in raw.chunks_mut(self.channels) {
            for (c, v) in row.iter_mut().enumerate() {
                *v = *v * self.scale[c] + self.shift[c];
            }
        }
        let mut g = Graph::inference();
        let z = g.constant(Tensor::new(vec![gh * gw, self.channels], raw)?);
        let px = self.decode_raw(&mut g, &self.params, z)?;
        self.unpatchify(g.data(px), gh, gw)
    }

    /// Fits the autoencoder by MSE on the given images, then measures the
    /// per-channel latent statistics. Returns the final minibatch loss.
    pub fn train<R: Rng + ?Sized>(&mut self, images: &[&Tensor], steps: usize, batch: usize, lr: f64, rng: &mut R) -> Result<f64> {
        if images.is_empty() {
            return Err(Error::Invalid("codec training needs at least one image".into()));
        }
        let opt = AdamW {
            clip_norm: None,
            ..AdamW::default()
        };
        let mut state = OptimizerState::new();
        self.params.apply_freeze(&[]);
        let mut last = f64::NAN;
        for step in 0..steps {
            self.params.zero_grad();
            let mut g = Graph::new();
            let picks: Vec<Var> = (0..batch)
                .map(|_| g.constant(images[rng.random_range(0..images.len())].clone()))
                .collect();
            let mut pieces = Vec::with_capacity(batch);
            for &img in &picks {
                let z = self.encode_raw(&mut g, &self.params, img)?;
                let rec = self.decode_raw(&mut g, &self.params, z)?;
                let target = patchify(&mut g, img, self.factor)?;
                let d = g.sub(rec, target)?;
                pieces.push(g.square(d));
            }
            let all = g.concat(&pieces)?;
            let loss = g.mean(all);
            last = g.value(loss).item();
            if !last.is_finite() {
                return Err(Error::NonFinite {
                    what: "codec loss".into(),
                    step,
                });
            }
            let grads = g.backward(loss)?;
            self.params.accumulate(&g, &grads)?;
            opt.step(&mut self.params, &mut state, lr)?;
        }
        self.params.apply_freeze(&[Branch::Generation]);
        self.fit_statistics(images)?;
        Ok(last)
    }

    fn fit_statistics(&mut self, images: &[&Tensor]) -> Result<()> {
        let c = self.channels;
        let (mut sum, mut sq, mut n) = (vec![0.0; c], vec![0.0; c], 0usize);
        for img in images {
            let mut g = Graph::inference();
            let x = g.constant((*img).clone());
            let z = self.encode_raw(&mut g, &self.params, x)?;
            for row in g.data(z).chunks(c) {
                for k in 0..c {
                    sum[k] += row[k];
                    sq[k] += row[k] * row[k];
                }
                n += 1;
            }
        }
        for k in 0..c {
            let mean = sum[k] / n as f64;
            let var = (sq[k] / n as f64 - mean * mean).max(1e-12);
            self.shift[k] = mean;
            self.scale[k] = var.sqrt();
        }
        Ok(())
    }

    /// Mean squared reconstruction error of `decode(encode(x))`.
    pub fn reconstruction_mse(&self, images: &[&Tensor]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0;
        for img in images {
            let rec = self.decode(&self.encode(img)?)?;
            total += rec.data.iter().zip(&img.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            count += img.numel();
        }
        Ok(total / count as f64)
    }

    pub fn hash(&self) -> String {
        crate::tensor::param_hash(&self.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new(self.params.clone());
        ck.meta.insert("kind".into(), "codec".into());
        ck.meta.insert("factor".into(), self.factor.to_string());
        ck.meta.insert("channels".into(), self.channels.to_string());
        ck.meta.insert("hidden".into(), self.hidden.to_string());
        ck.meta.insert("shift".into(), join_floats(&self.shift));
        ck.meta.insert("scale".into(), join_floats(&self.scale));
        save_checkpoint(path, &ck)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        let bad = |k: &str| Error::format("codec", path, format!("missing or bad {k}"));
        let num = |k: &str| -> Result<usize> { ck.meta.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| bad(k)) };
        let floats = |k: &str| -> Result<Vec<f64>> {
            ck.meta
                .get(k)
                .ok_or_else(|| bad(k))?
                .split(',')
                .map(|s| s.parse().map_err(|_| bad(k)))
                .collect()
        };
        let mut params = ck.params.clone();
        params.apply_freeze(&[Branch::Generation]);
        Ok(Codec {
            factor: num("factor")?,
            channels: num("channels")?,
            hidden: num("hidden")?,
            params,
            shift: floats("shift")?,
            scale: floats("scale")?,
        })
    }
}

pub(crate) fn join_floats(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

// ----- latent projections ---------------------------------------------------

/// Row-major flattening of `[h, w, c]` into `[h·w, d]` via one linear map.
pub fn latent_project_in(g: &mut Graph, params: &ParamTree, latent: Var) -> Result<Var> {
    let s = g.shape(latent).to_vec();
    if s.len() != 3 {
        return Err(Error::Invalid(format!("latent grid must be [h, w, c], got {s:?}")));
    }
    let rows = g.reshape(latent, &[s[0] * s[1], s[2]])?;
    linear_named(g, params, "gen.latent_in", rows)
}

/// `[h·w, d]` rows back to an `[h, w, c]` grid.
pub fn latent_project_out(g: &mut Graph, params: &ParamTree, rows: Var, h: usize, w: usize) -> Result<Var> {
    let n = g.shape(rows)[0];
    if n != h * w {
        return Err(Error::LengthMismatch {
            what: "latent rows",
            expected: h * w,
            got: n,
        });
    }
    let out = linear_named(g, params, "gen.latent_out", rows)?;
    let c = g.shape(out)[1];
    g.reshape(out, &[h, w, c])
}

// ----- flow matching ----------------------------------------------------------

/// One point on the straight noise-to-data path.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: f64,
    pub xt: Tensor,
    pub ut: Tensor,
}

/// `x_t = (1 − t)·x0 + t·x1`, `u_t = x1 − x0`.
pub fn flow_pair_at(x0: Tensor, x1: Tensor, t: f64) -> Result<FlowState> {
    if x0.shape != x1.shape {
        return Err(Error::ShapeMismatch {
            op: "flow pair",
            lhs: x0.shape.clone(),
            rhs: x1.shape.clone(),
        });
    }
    let xt = x0.data.iter().zip(&x1.data).map(|(&a, &b)| (1.0 - t) * a + t * b).collect();
    let ut = x0.data.iter().zip(&x1.data).map(|(&a, &b)| b - a).collect();
    Ok(FlowState {
        xt: Tensor::new(x0.shape.clone(), xt)?,
        ut: Tensor::new(x0.shape.clone(), ut)?,
        x0,
        x1,
        t,
    })
}

/// Draws `x0 ~ N(0, I)` and `t ~ U(0, 1)` for the data latent `x1`.
pub fn flow_sample_training_pair<R: Rng + ?Sized>(x1: &Tensor, rng: &mut R) -> FlowState {
    let x0 = Tensor::randn(&x1.shape, 1.0, rng);
    let t: f64 = rng.random();
    flow_pair_at(x0, x1.clone(), t).expect("shapes agree by construction")
}

/// Mean squared error between predicted and target velocities.
pub fn flow_loss(g: &mut Graph, predicted: Var, target: Var) -> Result<Var> {
    if g.shape(predicted) != g.shape(target) {
        return Err(Error::ShapeMismatch {
            op: "flow loss",
            lhs: g.shape(predicted).to_vec(),
            rhs: g.shape(target).to_vec(),
        });
    }
    let d = g.sub(predicted, target)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Projects hidden rows through the two-layer alignment head.
pub fn repa_project(g: &mut Graph, params: &ParamTree, hidden: Var) -> Result<Var> {
    let h = linear_named(g, params, "gen.repa.fc1", hidden)?;
    let h = g.gelu(h);
    linear_named(g, params, "gen.repa.fc2", h)
}

/// Row-wise cosine similarity of two `[n, k]` tensors, as `[n]`.
pub fn row_cosine(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let ab = g.mul(a, b)?;
    let dot = g.sum_last(ab);
    let aa = g.square(a);
    let na = g.sum_last(aa);
    let bb = g.square(b);
    let nb = g.sum_last(bb);
    let denom = g.mul(na, nb)?;
    let denom = g.add_scalar(denom, 1e-24);
    let denom = g.sqrt(denom);
    g.div(dot, denom)
}

/// Negative mean cosine similarity between projected hidden rows and the
/// probe features of the same grid cells.
pub fn repa_loss(g: &mut Graph, params: &ParamTree, hidden: Var, probe_feats: Var) -> Result<Var> {
    let (nh, nf) = (g.shape(hidden)[0], g.shape(probe_feats)[0]);
    if nh != nf {
        return Err(Error::LengthMismatch {
            what: "alignment tokens",
            expected: nf,
            got: nh,
        });
    }
    let proj = repa_project(g, params, hidden)?;
    let cos = row_cosine(g, proj, probe_feats)?;
    let m = g.mean(cos);
    Ok(g.neg(m))
}

// ----- velocity network ---------------------------------------------------------

/// Sinusoidal time features for `t ∈ [0, 1]`.
pub fn time_features(t: f64, dim: usize) -> Vec<f64> {
    sinusoidal(t * 1000.0, dim, 10_000.0)
}

/// One sample's inputs to the velocity network.
#[derive(Clone, Copy, Debug)]
pub struct VelocityInput {
    /// Condition rows `[cond_len, d]`.
    pub cond: Var,
    /// Noisy latent grid `[h, w, c]`.
    pub latent: Var,
    pub t: f64,
}

#[derive(Clone, Debug)]
pub struct VelocityOutput {
    /// Predicted velocity per sample, `[h, w, c]`.
    pub velocity: Vec<Var>,
    /// Noise-row hidden states after the alignment layer, per sample.
    pub align_hidden: Vec<Var>,
}

/// Runs the generation backbone over a batch of `[cond, noise]` sequences.
pub fn velocity(g: &mut Graph, params: &ParamTree, cfg: &ModelConfig, batch: &[VelocityInput]) -> Result<VelocityOutput> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let tb = cfg.text_block()?;
    let time_w = g.param(params, "gen.time.w")?;
    let time_b = g.param(params, "gen.time.b")?;
    let mut parts = Vec::with_capacity(batch.len());
    let mut grids = Vec::with_capacity(batch.len());
    let mut positions = Vec::new();
    for s in batch {
        let shape = g.shape(s.latent).to_vec();
        if shape.len() != 3 {
            return Err(Error::Invalid(format!("latent grid must be [h, w, c], got {shape:?}")));
        }
        let rows = latent_project_in(g, params, s.latent)?;
        let tf = g.constant(Tensor::new(vec![1, cfg.time_dim], time_features(s.t, cfg.time_dim))?);
        let temb = g.linear(tf, time_w, Some(time_b))?;
        let noise = g.add(rows, temb)?;
        let cond_len = g.shape(s.cond)[0];
        let len = cond_len + shape[0] * shape[1];
        positions.extend(position_indices(len, cfg.gen_base_len(), POSITION_CAPACITY)?);
        grids.push((shape[0], shape[1], cond_len));
        parts.push((s.cond, noise));
    }
    let seq = UnifiedSequence::from_parts(g, &parts)?;
    let layout = seq.layout.clone();
    let mut x = seq.rows;
    let mut align = None;
    for l in 0..cfg.num_layers {
        let prefix = format!("gen.layer{l}");
        let proj = DualProjection::bind(g, params, &prefix, tb.qkv_bias)?;
        let lay = layout.clone();
        x = block_forward_with(g, x, params, &prefix, &tb, layout.segments(), Some(&positions), move |g, h| {
            dual_qkv_rows(g, h, &lay, &proj)
        })?;
        if l + 1 == cfg.repa_layer() {
            align = Some(x);
        }
    }
    let norm = g.param(params, "gen.norm")?;
    let x = g.rms_norm(x, norm, NORM_EPS)?;
    let align = align.expect("repa layer within depth");
    let mut out = VelocityOutput {
        velocity: Vec::with_capacity(batch.len()),
        align_hidden: Vec::with_capacity(batch.len()),
    };
    let mut start = 0;
    for &(h, w, cond_len) in &grids {
        let noise_rows: Vec<usize> = (start + cond_len..start + cond_len + h * w).collect();
        let rows = g.select_rows(x, &noise_rows)?;
        out.velocity.push(latent_project_out(g, params, rows, h, w)?);
        out.align_hidden.push(g.select_rows(align, &noise_rows)?);
        start += cond_len + h * w;
    }
    Ok(out)
}

/// Euler integration of the learned field from `t = 0` to `t = 1`, for a
/// batch of conditions. Returns the final latent grids.
pub fn sample_latents(
    params: &ParamTree,
    cfg: &ModelConfig,
    conds: &[Tensor],
    grid: (usize, usize),
    steps: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<Tensor>> {
    if steps == 0 {
        return Err(Error::Invalid("sampler needs at least one step".into()));
    }
    let shape = [grid.0, grid.1, cfg.latent_channels];
    let mut xs: Vec<Tensor> = conds
        .iter()
        .map(|_| {
            let data = (0..shape.iter().product::<usize>())
                .map(|_| StandardNormal.sample(&mut *rng))
                .collect();
            Tensor::new(shape.to_vec(), data).expect("shape matches data")
        })
        .collect();
    let dt = 1.0 / steps as f64;
    for k in 0..steps {
        let t = k as f64 * dt;
        let mut g = Graph::inference();
        let batch: Vec<VelocityInput> = conds
            .iter()
            .zip(&xs)
            .map(|(c, x)| VelocityInput {
                cond: g.constant(c.clone()),
                latent: g.constant(x.clone()),
                t,
            })
            .collect();
        let out = velocity(&mut g, params, cfg, &batch)?;
        for (x, v) in xs.iter_mut().zip(&out.velocity) {
            for (xi, vi) in x.data.iter_mut().zip(g.data(*v)) {
                *xi += dt * vi;
            }
            if !x.is_finite() {
                return Err(Error::NonFinite {
                    what: "sampler trajectory".into(),
                    step: k,
                });
            }
        }
    }
    Ok(xs)
}

/// Samples one image for `cond` at image side `res`.
pub fn sample(
    params: &ParamTree,
    cfg: &ModelConfig,
    codec: &Codec,
    cond: &Tensor,
    res: usize,
    steps: usize,
    rng: &mut dyn RngCore,
) -> Result<Tensor> {
    let side = res / codec.factor;
    let z = sample_latents(params, cfg, std::slice::from_ref(cond), (side, side), steps, rng)?;
    codec.decode(&z[0])
}
