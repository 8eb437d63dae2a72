//! Evaluation metrics and the frozen probe network that embeds images for them.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use crate::blocks::{init_linear, linear_named};
use crate::error::{Error, Result};
use crate::tensor::{load_checkpoint, param_hash, save_checkpoint, AdamW, Branch, Checkpoint, Graph, OptimizerState, ParamTree, Tensor, Var};
use crate::understanding::patchify;

// ----- classification ---------------------------------------------------------

fn check_lengths(pred: &[Vec<bool>], truth: &[Vec<bool>]) -> Result<usize> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            what: "label lists",
            expected: truth.len(),
            got: pred.len(),
        });
    }
    let k = truth.first().map_or(0, Vec::len);
    if let Some(bad) = pred.iter().chain(truth).find(|v| v.len() != k) {
        return Err(Error::LengthMismatch {
            what: "label vector",
            expected: k,
            got: bad.len(),
        });
    }
    Ok(k)
}

fn f1(tp: usize, fp: usize, fnn: usize) -> f64 {
    let denom = 2 * tp + fp + fnn;
    if denom == 0 || tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// F1 of each finding; a finding with no positives anywhere scores 0.
pub fn per_finding_f1(pred: &[Vec<bool>], truth: &[Vec<bool>]) -> Result<Vec<f64>> {
    let k = check_lengths(pred, truth)?;
    Ok((0..k)
        .map(|j| {
            let (mut tp, mut fp, mut fnn) = (0, 0, 0);
            for (p, t) in pred.iter().zip(truth) {
                match (p[j], t[j]) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fnn += 1,
                    _ => {}
                }
            }
            f1(tp, fp, fnn)
        })
        .collect())
}

/// `(micro, macro)` F1 over multi-label predictions.
pub fn micro_macro_f1(pred: &[Vec<bool>], truth: &[Vec<bool>]) -> Result<(f64, f64)> {
    let k = check_lengths(pred, truth)?;
    let (mut tp, mut fp, mut fnn) = (0, 0, 0);
    for (p, t) in pred.iter().zip(truth) {
        for j in 0..k {
            match (p[j], t[j]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fnn += 1,
                _ => {}
            }
        }
    }
    let per = per_finding_f1(pred, truth)?;
    let macro_f1 = if k == 0 { 0.0 } else { per.iter().sum::<f64>() / k as f64 };
    Ok((f1(tp, fp, fnn), macro_f1))
}

// ----- feature distances ---------------------------------------------------------

fn as_matrix(feats: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = feats.first().map_or(0, Vec::len);
    if let Some(bad) = feats.iter().find(|f| f.len() != d) {
        return Err(Error::LengthMismatch {
            what: "feature width",
            expected: d,
            got: bad.len(),
        });
    }
    Ok(DMatrix::from_fn(feats.len(), d, |i, j| feats[i][j]))
}

fn mean_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mean, cov)
}

/// Eigenvalues of a symmetrized matrix, clipping tiny negatives to zero.
fn psd_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::try_new(sym, 1e-14, 10_000)
        .ok_or_else(|| Error::MatrixSqrt("eigendecomposition did not converge".into()))?;
    let top = eig.eigenvalues.iter().cloned().fold(1.0, f64::max);
    for l in eig.eigenvalues.iter_mut() {
        if *l < -1e-8 * top {
            return Err(Error::MatrixSqrt(format!("eigenvalue {l} is significantly negative")));
        }
        *l = l.max(0.0);
    }
    Ok(eig)
}

fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(m)?;
    let s = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * s * eig.eigenvectors.transpose())
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2(Σa Σb)^½)` between two feature sets.
///
/// The trace term is evaluated as `tr((Σa^½ Σb Σa^½)^½)`, which has the same
/// eigenvalues as `(Σa Σb)^½` but is symmetric.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let d = a.first().map_or(0, Vec::len);
    for set in [a, b] {
        if set.len() < d + 1 {
            return Err(Error::InsufficientSamples {
                metric: "frechet distance",
                need: d + 1,
                got: set.len(),
            });
        }
    }
    let (ma, ca) = mean_cov(&as_matrix(a)?);
    let (mb, cb) = mean_cov(&as_matrix(b)?);
    if ma.len() != mb.len() {
        return Err(Error::LengthMismatch {
            what: "feature width",
            expected: ma.len(),
            got: mb.len(),
        });
    }
    let sa = sqrt_psd(&ca)?;
    let inner = &sa * &cb * &sa;
    let tr_sqrt: f64 = psd_eigen(&inner)?.eigenvalues.iter().map(|l| l.sqrt()).sum();
    let diff = &ma - &mb;
    let fd = diff.dot(&diff) + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    Ok(fd.max(0.0))
}

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

/// Unbiased squared MMD with the cubic polynomial kernel `(x·y/d + 1)³`.
pub fn kernel_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    for set in [a, b] {
        if set.len() < 2 {
            return Err(Error::InsufficientSamples {
                metric: "kernel distance",
                need: 2,
                got: set.len(),
            });
        }
    }
    as_matrix(a)?;
    as_matrix(b)?;
    let (m, n) = (a.len() as f64, b.len() as f64);
    let within = |s: &[Vec<f64>]| {
        let mut t = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    t += poly_kernel(&s[i], &s[j]);
                }
            }
        }
        t
    };
    let mut cross = 0.0;
    for x in a {
        for y in b {
            cross += poly_kernel(x, y);
        }
    }
    Ok(within(a) / (m * (m - 1.0)) + within(b) / (n * (n - 1.0)) - 2.0 * cross / (m * n))
}

fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Distance from each point to its `k`-th nearest neighbour in the same set.
fn knn_radii(set: &[Vec<f64>], k: usize) -> Vec<f64> {
    set.iter()
        .enumerate()
        .map(|(i, x)| {
            let mut d: Vec<f64> = set.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, y)| dist(x, y)).collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prdc {
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
}

/// Precision, recall, density and coverage with `k`-nearest-neighbour balls.
pub fn prdc(real: &[Vec<f64>], fake: &[Vec<f64>], k: usize) -> Result<Prdc> {
    for set in [real, fake] {
        if k == 0 || set.len() < k + 1 {
            return Err(Error::InsufficientSamples {
                metric: "prdc",
                need: k + 1,
                got: set.len(),
            });
        }
    }
    let real_r = knn_radii(real, k);
    let fake_r = knn_radii(fake, k);
    let cross: Vec<Vec<f64>> = fake.iter().map(|f| real.iter().map(|r| dist(f, r)).collect()).collect();
    let (nr, nf) = (real.len() as f64, fake.len() as f64);
    let precision = cross
        .iter()
        .filter(|row| row.iter().zip(&real_r).any(|(d, r)| d <= r))
        .count() as f64
        / nf;
    let recall = (0..real.len())
        .filter(|&i| (0..fake.len()).any(|j| cross[j][i] <= fake_r[j]))
        .count() as f64
        / nr;
    let density = cross
        .iter()
        .map(|row| row.iter().zip(&real_r).filter(|(d, r)| d <= r).count())
        .sum::<usize>() as f64
        / (k as f64 * nf);
    let coverage = (0..real.len())
        .filter(|&i| {
            let nearest = (0..fake.len()).map(|j| cross[j][i]).fold(f64::INFINITY, f64::min);
            nearest <= real_r[i]
        })
        .count() as f64
        / nr;
    Ok(Prdc {
        precision,
        recall,
        density,
        coverage,
    })
}

/// Mean per-finding agreement between predicted and reference label vectors.
pub fn label_agreement(pred: &[Vec<bool>], reference: &[Vec<bool>]) -> Result<f64> {
    let k = check_lengths(pred, reference)?;
    if pred.is_empty() || k == 0 {
        return Err(Error::InsufficientSamples {
            metric: "alignment",
            need: 1,
            got: 0,
        });
    }
    let agree: usize = pred
        .iter()
        .zip(reference)
        .map(|(p, r)| p.iter().zip(r).filter(|(a, b)| a == b).count())
        .sum();
    Ok(agree as f64 / (pred.len() * k) as f64)
}

/// Agreement between the probe's reading of generated images and the labels
/// they were conditioned on.
pub fn alignment_score(probe: &ProbeNetwork, images: &[Tensor], condition_labels: &[Vec<bool>]) -> Result<f64> {
    if !probe.trained {
        return Err(Error::Invalid("alignment score needs a trained probe".into()));
    }
    let pred = images.iter().map(|i| probe.predict(i)).collect::<Result<Vec<_>>>()?;
    label_agreement(&pred, condition_labels)
}

// ----- probe network ----------------------------------------------------------------

/// Small convolutional multi-label classifier over a fixed grid.
///
/// The image is average-pooled to `base_res`, cut into `patch × patch`
/// cells, embedded together with their normalized coordinates, and passed
/// through 3×3 grid convolutions with residual connections. Grid features
/// (`[cells, dim]`) serve as alignment targets; their mean is the global
/// embedding used by the distribution metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeNetwork {
    pub base_res: usize,
    pub patch: usize,
    pub dim: usize,
    pub conv_layers: usize,
    pub num_findings: usize,
    pub params: ParamTree,
    pub trained: bool,
}

impl ProbeNetwork {
    pub fn new<R: Rng + ?Sized>(
        base_res: usize,
        patch: usize,
        dim: usize,
        conv_layers: usize,
        num_findings: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if !base_res.is_multiple_of(patch) {
            return Err(Error::Indivisible {
                dim: base_res,
                factor: patch,
            });
        }
        let mut params = ParamTree::new();
        let b = Branch::Generation;
        init_linear(&mut params, "probe.embed", b, patch * patch, dim, rng)?;
        params.insert_randn("probe.coord", b, &[2, dim], 1.0, rng)?;
        for l in 0..conv_layers {
            init_linear(&mut params, &format!("probe.conv{l}"), b, 9 * dim, dim, rng)?;
        }
        init_linear(&mut params, "probe.head", b, dim, num_findings, rng)?;
        Ok(ProbeNetwork {
            base_res,
            patch,
            dim,
            conv_layers,
            num_findings,
            params,
            trained: false,
        })
    }

    pub fn grid(&self) -> usize {
        self.base_res / self.patch
    }

    /// Average-pools a square `[R, R, 1]` image down to `base_res`.
    pub fn pool(&self, image: &Tensor) -> Result<Tensor> {
        let r = image.shape[0];
        if image.rank() != 3 || image.shape[1] != r || !r.is_multiple_of(self.base_res) {
            return Err(Error::Invalid(format!(
                "probe expects a square image whose side is a multiple of {}, got {:?}",
                self.base_res, image.shape
            )));
        }
        let f = r / self.base_res;
        if f == 1 {
            return Ok(image.clone());
        }
        let b = self.base_res;
        let mut out = vec![0.0; b * b];
        for y in 0..r {
            for x in 0..r {
                out[(y / f) * b + x / f] += image.data[y * r + x];
            }
        }
        let inv = 1.0 / (f * f) as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Tensor::new(vec![b, b, 1], out)
    }

    fn coords(&self) -> Tensor {
        let g = self.grid();
        let mut c = Vec::with_capacity(g * g * 2);
        for y in 0..g {
            for x in 0..g {
                c.push((x as f64 + 0.5) / g as f64 - 0.5);
                c.push((y as f64 + 0.5) / g as f64 - 0.5);
            }
        }
        Tensor::new(vec![g * g, 2], c).expect("coordinate grid")
    }

    /// 3×3 neighbourhood gather with zero padding: `[cells, 9·dim]`.
    fn im2col(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = self.grid();
        let d = self.dim;
        let mut idx = Vec::with_capacity(n * n * 9 * d);
        for y in 0..n as isize {
            for xx in 0..n as isize {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (sy, sx) = (y + dy, xx + dx);
                        let inside = (0..n as isize).contains(&sy) && (0..n as isize).contains(&sx);
                        for c in 0..d {
                            idx.push(inside.then(|| (sy as usize * n + sx as usize) * d + c));
                        }
                    }
                }
            }
        }
        g.gather(x, idx, &[n * n, 9 * d])
    }

    /// Grid features `[cells, dim]` of an image already at `base_res`.
    pub fn grid_features_var(&self, g: &mut Graph, params: &ParamTree, image: Var) -> Result<Var> {
        let patches = patchify(g, image, self.patch)?;
        let coords = g.constant(self.coords());
        let coord_w = g.param(params, "probe.coord")?;
        let located = g.matmul(coords, coord_w)?;
        let h = linear_named(g, params, "probe.embed", patches)?;
        let h = g.add(h, located)?;
        let mut h = g.gelu(h);
        for l in 0..self.conv_layers {
            let cols = self.im2col(g, h)?;
            let c = linear_named(g, params, &format!("probe.conv{l}"), cols)?;
            let c = g.gelu(c);
            h = g.add(h, c)?;
        }
        Ok(h)
    }

    fn logits_var(&self, g: &mut Graph, params: &ParamTree, grid: Var) -> Result<Var> {
        let n = self.grid() * self.grid();
        let pool = g.constant(Tensor::full(&[1, n], 1.0 / n as f64));
        let pooled = g.matmul(pool, grid)?;
        linear_named(g, params, "probe.head", pooled)
    }

    pub fn grid_features(&self, image: &Tensor) -> Result<Tensor> {
        let img = self.pool(image)?;
        let mut g = Graph::inference();
        let x = g.constant(img);
        let f = self.grid_features_var(&mut g, &self.params, x)?;
        Ok(g.value(f).clone())
    }

    /// Mean of the grid features: the embedding for distribution metrics.
    pub fn features(&self, image: &Tensor) -> Result<Vec<f64>> {
        let grid = self.grid_features(image)?;
        let n = grid.rows();
        let mut out = vec![0.0; self.dim];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(grid.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        Ok(out)
    }

    pub fn logits(&self, image: &Tensor) -> Result<Vec<f64>> {
        let img = self.pool(image)?;
        let mut g = Graph::inference();
        let x = g.constant(img);
        let f = self.grid_features_var(&mut g, &self.params, x)?;
        let l = self.logits_var(&mut g, &self.params, f)?;
        Ok(g.data(l).to_vec())
    }

    pub fn predict(&self, image: &Tensor) -> Result<Vec<bool>> {
        Ok(self.logits(image)?.into_iter().map(|z| z > 0.0).collect())
    }

    /// Multi-label BCE training; freezes the network afterwards.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        images: &[&Tensor],
        labels: &[Vec<bool>],
        steps: usize,
        batch: usize,
        lr: f64,
        rng: &mut R,
    ) -> Result<f64> {
        if images.len() != labels.len() || images.is_empty() {
            return Err(Error::LengthMismatch {
                what: "probe training labels",
                expected: images.len(),
                got: labels.len(),
            });
        }
        let pooled: Vec<Tensor> = images.iter().map(|i| self.pool(i)).collect::<Result<_>>()?;
        let opt = AdamW {
            clip_norm: Some(1.0),
            ..AdamW::default()
        };
        let mut state = OptimizerState::new();
        self.params.apply_freeze(&[]);
        let mut last = f64::NAN;
        for step in 0..steps {
            self.params.zero_grad();
            let mut g = Graph::new();
            let mut logits = Vec::with_capacity(batch);
            let mut targets = Vec::with_capacity(batch * self.num_findings);
            for _ in 0..batch {
                let i = rng.random_range(0..pooled.len());
                let x = g.constant(pooled[i].clone());
                let f = self.grid_features_var(&mut g, &self.params, x)?;
                logits.push(self.logits_var(&mut g, &self.params, f)?);
                targets.extend(labels[i].iter().map(|&b| f64::from(u8::from(b))));
            }
            let all = g.concat(&logits)?;
            let loss = g.bce_with_logits(all, &targets)?;
            last = g.value(loss).item();
            if !last.is_finite() {
                return Err(Error::NonFinite {
                    what: "probe loss".into(),
                    step,
                });
            }
            let grads = g.backward(loss)?;
            self.params.accumulate(&g, &grads)?;
            opt.step(&mut self.params, &mut state, lr)?;
        }
        self.params.apply_freeze(&[Branch::Generation]);
        self.trained = true;
        Ok(last)
    }

    /// Fraction of correct per-finding decisions.
    pub fn accuracy(&self, images: &[&Tensor], labels: &[Vec<bool>]) -> Result<f64> {
        let pred = images.iter().map(|i| self.predict(i)).collect::<Result<Vec<_>>>()?;
        label_agreement(&pred, labels)
    }

    pub fn hash(&self) -> String {
        param_hash(&self.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new(self.params.clone());
        ck.meta.insert("kind".into(), "probe".into());
        for (k, v) in [
            ("base_res", self.base_res),
            ("patch", self.patch),
            ("dim", self.dim),
            ("conv_layers", self.conv_layers),
            ("num_findings", self.num_findings),
        ] {
            ck.meta.insert(k.into(), v.to_string());
        }
        ck.meta.insert("trained".into(), self.trained.to_string());
        save_checkpoint(path, &ck)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        let num = |k: &str| -> Result<usize> {
            ck.meta
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format("probe", path, format!("missing or bad {k}")))
        };
        let mut params = ck.params.clone();
        params.apply_freeze(&[Branch::Generation]);
        Ok(ProbeNetwork {
            base_res: num("base_res")?,
            patch: num("patch")?,
            dim: num("dim")?,
            conv_layers: num("conv_layers")?,
            num_findings: num("num_findings")?,
            params,
            trained: ck.meta.get("trained").is_some_and(|v| v == "true"),
        })
    }
}

// ----- report ----------------------------------------------------------------------

/// Every number produced by one evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub micro_f1_uncertain_pos: f64,
    pub macro_f1_uncertain_pos: f64,
    pub fd: f64,
    pub kd: f64,
    pub alignment: f64,
    pub alignment_chance: f64,
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
    pub n_understanding: usize,
    pub n_real: usize,
    pub n_generated: usize,
    /// Per-finding FD over samples where the finding is present; `None`
    /// when there are too few positives for a covariance estimate.
    pub fd_per_finding: Vec<(String, usize, Option<f64>)>,
    pub probe_hash: String,
}

impl MetricReport {
    pub fn is_finite(&self) -> bool {
        [
            self.micro_f1,
            self.macro_f1,
            self.micro_f1_uncertain_pos,
            self.macro_f1_uncertain_pos,
            self.fd,
            self.kd,
            self.alignment,
            self.alignment_chance,
            self.precision,
            self.recall,
            self.density,
            self.coverage,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, self.to_string())?;
        Ok(())
    }
}

/// One `key=value` per line; floats in shortest round-trip form.
impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: [(&str, f64); 12] = [
            ("micro_f1", self.micro_f1),
            ("macro_f1", self.macro_f1),
            ("micro_f1_uncertain_pos", self.micro_f1_uncertain_pos),
            ("macro_f1_uncertain_pos", self.macro_f1_uncertain_pos),
            ("fd", self.fd),
            ("kd", self.kd),
            ("alignment", self.alignment),
            ("alignment_chance", self.alignment_chance),
            ("precision", self.precision),
            ("recall", self.recall),
            ("density", self.density),
            ("coverage", self.coverage),
        ];
        for (k, v) in rows {
            writeln!(f, "{k}={v:?}")?;
        }
        writeln!(f, "n_understanding={}", self.n_understanding)?;
        writeln!(f, "n_real={}", self.n_real)?;
        writeln!(f, "n_generated={}", self.n_generated)?;
        for (name, n, fd) in &self.fd_per_finding {
            match fd {
                Some(v) => writeln!(f, "fd.{name}={v:?}")?,
                None => writeln!(f, "fd.{name}=insufficient")?,
            }
            writeln!(f, "n.{name}={n}")?;
        }
        writeln!(f, "probe_hash={}", self.probe_hash)
    }
}
