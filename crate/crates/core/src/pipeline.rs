//! Three-stage training with freeze masks, warmup, checkpoints and run
//! manifests, plus the joint-optimization ablation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_kv, render_kv, KvReader};
use crate::data::{clean_report, Corpus, SyntheticSample};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalConfig, ModelView};
use crate::generation::{flow_loss, flow_sample_training_pair, repa_loss, velocity, Codec, VelocityInput};
use crate::metrics::ProbeNetwork;
use crate::model::{init_generation_from_understanding, ModelConfig};
use crate::tensor::{
    load_checkpoint, param_hash, save_checkpoint, AdamW, Branch, Checkpoint, Graph, OptimizerState, ParamTree, Tensor, Var,
};
use crate::understanding::{ar_loss, assemble, condition_ids, condition_rows, LossNorm, UnderstandingExample, Vocabulary, DEFAULT_PROMPT};

/// Ratio of desk-scale step counts to the reference schedule.
pub const DESK_STEP_SCALE: f64 = 0.02;

/// Reference per-stage settings: lr, warmup, steps, resolution.
const REFERENCE: [(f64, usize, usize, usize); 3] = [(1e-4, 80, 3840, 384), (2e-4, 2000, 75_000, 256), (1e-4, 0, 5000, 512)];

// ----- stage configuration ------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub stage: u8,
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub resolution: usize,
    pub use_repa: bool,
    pub repa_weight: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Branches excluded from updates.
    pub frozen: Vec<Branch>,
    /// Understanding samples per group of a batch.
    pub mix_understanding: usize,
    /// Generation samples per group of a batch.
    pub mix_generation: usize,
    /// Step counts relative to the reference schedule.
    pub step_scale: f64,
}

impl StageConfig {
    /// Reference settings of a stage at full scale.
    pub fn reference(stage: u8) -> Result<Self> {
        let (lr, warmup_steps, total_steps, resolution) = *REFERENCE
            .get(usize::from(stage).wrapping_sub(1))
            .ok_or_else(|| Error::Config(format!("stage must be 1, 2 or 3, got {stage}")))?;
        let und = stage == 1;
        Ok(StageConfig {
            stage,
            lr,
            warmup_steps,
            total_steps,
            resolution,
            use_repa: stage == 2,
            repa_weight: if stage == 2 { 0.5 } else { 0.0 },
            batch_size: 256,
            weight_decay: 0.0,
            clip_norm: 1.0,
            frozen: vec![if und { Branch::Generation } else { Branch::Understanding }],
            mix_understanding: usize::from(und),
            mix_generation: usize::from(!und),
            step_scale: 1.0,
        })
    }

    /// Reference settings with step counts scaled by [`DESK_STEP_SCALE`],
    /// batch 16 and resolutions 32 / 32 / 64.
    pub fn desk(stage: u8) -> Result<Self> {
        let r = StageConfig::reference(stage)?;
        let mut c = r.scaled(DESK_STEP_SCALE);
        c.batch_size = 16;
        c.resolution = if stage == 3 { 64 } else { 32 };
        Ok(c)
    }

    /// Same stage with step counts multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let scale = |n: usize| (n as f64 * factor).round() as usize;
        StageConfig {
            warmup_steps: scale(self.warmup_steps),
            total_steps: scale(self.total_steps).max(1),
            step_scale: self.step_scale * factor,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(1..=3).contains(&self.stage) {
            return bad(format!("stage must be 1, 2 or 3, got {}", self.stage));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || self.total_steps == 0 || self.batch_size == 0 {
            return bad("lr, total_steps and batch_size must be positive".into());
        }
        if !(self.repa_weight >= 0.0 && self.weight_decay >= 0.0 && self.clip_norm > 0.0) {
            return bad("repa_weight and weight_decay must be ≥ 0, clip_norm > 0".into());
        }
        if self.mix_understanding + self.mix_generation == 0 {
            return bad("mixing ratio must have a nonzero side".into());
        }
        let expect = if self.stage == 1 { Branch::Generation } else { Branch::Understanding };
        if !self.frozen.contains(&expect) {
            return bad(format!("stage {} must freeze the {} branch", self.stage, expect));
        }
        if self.stage == 1 && self.mix_generation > 0 || self.stage > 1 && self.mix_understanding > 0 {
            return bad(format!("stage {} cannot draw samples for a frozen branch", self.stage));
        }
        if self.stage == 1 && self.use_repa {
            return bad("alignment loss applies to generation stages only".into());
        }
        Ok(())
    }

    /// Learning rate at `step`: linear ramp from 0 over the warmup, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        warmup_lr(self.lr, self.warmup_steps, step)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("stage", self.stage.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("resolution", self.resolution.to_string()),
            ("use_repa", self.use_repa.to_string()),
            ("repa_weight", format!("{:?}", self.repa_weight)),
            ("batch_size", self.batch_size.to_string()),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("clip_norm", format!("{:?}", self.clip_norm)),
            ("frozen", render_branches(&self.frozen)),
            ("mix_understanding", self.mix_understanding.to_string()),
            ("mix_generation", self.mix_generation.to_string()),
            ("step_scale", format!("{:?}", self.step_scale)),
        ]
    }

    /// Reads `{prefix}{field}` keys; absent fields keep the desk default of
    /// the stage named by `{prefix}stage`.
    pub fn from_map(map: &BTreeMap<String, String>, prefix: &str, path: &Path) -> Result<Self> {
        let r = KvReader::new(map, path);
        let key = |k: &str| format!("{prefix}{k}");
        let mut c = StageConfig::desk(r.req(&key("stage"))?)?;
        macro_rules! read {
            ($field:ident) => {
                if let Some(v) = r.opt(&key(stringify!($field)))? {
                    c.$field = v;
                }
            };
        }
        read!(lr);
        read!(warmup_steps);
        read!(total_steps);
        read!(resolution);
        read!(use_repa);
        read!(repa_weight);
        read!(batch_size);
        read!(weight_decay);
        read!(clip_norm);
        read!(mix_understanding);
        read!(mix_generation);
        read!(step_scale);
        if let Some(v) = map.get(&key("frozen")) {
            c.frozen = parse_branches(v).map_err(|m| Error::format("stage config", path, m))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        StageConfig::from_map(&parse_kv(text, path)?, "", path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        StageConfig::parse(&std::fs::read_to_string(path)?, path)
    }
}

impl fmt::Display for StageConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_kv(self.to_pairs()))
    }
}

fn render_branches(b: &[Branch]) -> String {
    if b.is_empty() {
        "none".into()
    } else {
        b.iter().map(|b| b.as_str()).collect::<Vec<_>>().join(",")
    }
}

fn parse_branches(s: &str) -> std::result::Result<Vec<Branch>, String> {
    if s == "none" || s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| match p.trim() {
            "understanding" => Ok(Branch::Understanding),
            "generation" => Ok(Branch::Generation),
            other => Err(format!("unknown branch {other:?}")),
        })
        .collect()
}

pub fn warmup_lr(lr: f64, warmup: usize, step: usize) -> f64 {
    if step < warmup {
        lr * step as f64 / warmup as f64
    } else {
        lr
    }
}

/// Understanding and generation samples in a batch for mixing ratio `r:s`:
/// as many whole `r + s` groups as fit, at least one.
pub fn batch_composition(batch: usize, r: usize, s: usize) -> Result<(usize, usize)> {
    if r + s == 0 {
        return Err(Error::Config("mixing ratio must have a nonzero side".into()));
    }
    let groups = (batch / (r + s)).max(1);
    Ok((r * groups, s * groups))
}

/// Freezes `frozen` branches and returns the names left trainable.
pub fn freeze_mask(params: &mut ParamTree, frozen: &[Branch]) -> Result<Vec<String>> {
    let trainable = params.apply_freeze(frozen);
    if trainable.is_empty() {
        return Err(Error::EmptyTrainableSet);
    }
    Ok(trainable)
}

// ----- manifests and checkpoints --------------------------------------------------

/// `git describe` of the source tree the binary was built from.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    /// Last completed stage.
    pub stage: u8,
    pub seed: u64,
    /// Configs of every completed stage, in order.
    pub stages: Vec<StageConfig>,
    pub dataset_hash: String,
    pub git_describe: String,
    pub model: ModelConfig,
    pub param_hash: String,
    pub codec_hash: Option<String>,
    pub probe_hash: Option<String>,
    pub metrics: BTreeMap<String, f64>,
    /// Written to a separate timing file so manifests stay reproducible.
    pub wall_clock_secs: f64,
}

impl fmt::Display for RunManifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut lines: Vec<(String, String)> = vec![
            ("stage".into(), self.stage.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("dataset_hash".into(), self.dataset_hash.clone()),
            ("git_describe".into(), self.git_describe.clone()),
            ("param_hash".into(), self.param_hash.clone()),
        ];
        if let Some(h) = &self.codec_hash {
            lines.push(("codec_hash".into(), h.clone()));
        }
        if let Some(h) = &self.probe_hash {
            lines.push(("probe_hash".into(), h.clone()));
        }
        for (k, v) in self.model.to_pairs() {
            lines.push((format!("model.{k}"), v.to_string()));
        }
        for s in &self.stages {
            for (k, v) in s.to_pairs() {
                lines.push((format!("stage{}.{k}", s.stage), v));
            }
        }
        for (k, v) in &self.metrics {
            lines.push((format!("metric.{k}"), format!("{v:?}")));
        }
        f.write_str(&render_kv(lines.iter().map(|(k, v)| (k.as_str(), v.clone()))))
    }
}

impl RunManifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let map = parse_kv(text, path)?;
        let r = KvReader::new(&map, path);
        let stage: u8 = r.req("stage")?;
        let mut stages = Vec::new();
        for k in 1..=stage {
            stages.push(StageConfig::from_map(&map, &format!("stage{k}."), path)?);
        }
        let metrics = map
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("metric.").map(|m| (m, v)))
            .map(|(k, v)| {
                v.parse()
                    .map(|x| (k.to_string(), x))
                    .map_err(|_| Error::format("manifest", path, format!("bad metric {k}")))
            })
            .collect::<Result<_>>()?;
        Ok(RunManifest {
            stage,
            seed: r.req("seed")?,
            stages,
            dataset_hash: r.req("dataset_hash")?,
            git_describe: r.req("git_describe")?,
            model: ModelConfig::from_map(&map, "model.", path)?,
            param_hash: r.req("param_hash")?,
            codec_hash: r.opt("codec_hash")?,
            probe_hash: r.opt("probe_hash")?,
            metrics,
            wall_clock_secs: 0.0,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunManifest::parse(&std::fs::read_to_string(path)?, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string())?;
        std::fs::write(path.with_extension("timing"), format!("wall_clock_secs={:?}\n", self.wall_clock_secs))?;
        Ok(())
    }
}

/// Manifest stored next to a checkpoint.
pub fn manifest_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("manifest")
}

pub fn save_model(path: &Path, params: &ParamTree, cfg: &ModelConfig, stage: u8, seed: u64) -> Result<()> {
    let mut ck = Checkpoint::new(params.clone());
    ck.meta.insert("kind".into(), "model".into());
    ck.meta.insert("stage".into(), stage.to_string());
    ck.meta.insert("seed".into(), seed.to_string());
    for (k, v) in cfg.to_pairs() {
        ck.meta.insert(format!("model.{k}"), v.to_string());
    }
    save_checkpoint(path, &ck)
}

/// Parameters, model config and stage of a model checkpoint.
pub fn load_model(path: &Path) -> Result<(ParamTree, ModelConfig, u8)> {
    let ck = load_checkpoint(path)?;
    if ck.meta.get("kind").map(String::as_str) != Some("model") {
        return Err(Error::format("model checkpoint", path, "not a model checkpoint"));
    }
    let cfg = ModelConfig::from_map(&ck.meta, "model.", path)?;
    let stage = ck.meta.get("stage").and_then(|s| s.parse().ok()).unwrap_or(0);
    Ok((ck.params, cfg, stage))
}

// ----- auxiliary networks ----------------------------------------------------------

/// Training budgets of the frozen codec and probe.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxConfig {
    pub codec_hidden: usize,
    pub codec_steps: usize,
    pub codec_batch: usize,
    pub codec_lr: f64,
    pub probe_steps: usize,
    pub probe_batch: usize,
    pub probe_lr: f64,
    pub probe_conv_layers: usize,
}

impl Default for AuxConfig {
    fn default() -> Self {
        AuxConfig {
            codec_hidden: 16,
            codec_steps: 600,
            codec_batch: 4,
            codec_lr: 3e-3,
            probe_steps: 400,
            probe_batch: 16,
            probe_lr: 3e-3,
            probe_conv_layers: 2,
        }
    }
}

/// Trains the latent codec on training images at both stage resolutions
/// and the probe on training images with their labels.
pub fn prepare_auxiliaries(corpus: &Corpus, model: &ModelConfig, aux: &AuxConfig, seed: u64) -> Result<(Codec, ProbeNetwork)> {
    let train = corpus.train();
    if train.is_empty() {
        return Err(Error::Invalid("corpus has no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0de);
    let mut images: Vec<Tensor> = train.iter().map(|s| s.image.clone()).collect();
    for s in train.iter().take(train.len() / 4) {
        images.push(s.spec.render(corpus.resolution * 2)?);
    }
    let refs: Vec<&Tensor> = images.iter().collect();
    let mut codec = Codec::new(model.latent_factor, model.latent_channels, aux.codec_hidden, &mut rng)?;
    codec.train(&refs, aux.codec_steps, aux.codec_batch, aux.codec_lr, &mut rng)?;

    let k = train[0].labels.len();
    // One probe cell per base latent token, so grid features align with noise rows.
    let mut probe = ProbeNetwork::new(model.image_size, model.latent_factor, model.probe_dim, aux.probe_conv_layers, k, &mut rng)?;
    let imgs: Vec<&Tensor> = train.iter().map(|s| &s.image).collect();
    let labels: Vec<Vec<bool>> = train.iter().map(|s| s.labels.clone()).collect();
    probe.train(&imgs, &labels, aux.probe_steps, aux.probe_batch, aux.probe_lr, &mut rng)?;
    Ok((codec, probe))
}

// ----- training data ---------------------------------------------------------------

/// Everything a stage or ablation run reads besides the parameters.
#[derive(Clone, Copy)]
pub struct StageContext<'a> {
    pub model: &'a ModelConfig,
    pub vocab: &'a Vocabulary,
    pub corpus: &'a Corpus,
    pub codec: Option<&'a Codec>,
    pub probe: Option<&'a ProbeNetwork>,
    pub seed: u64,
    /// Checkpoints, manifests and loss logs go here when set.
    pub out_dir: Option<&'a Path>,
}

struct UnderstandingPool {
    prompt: Vec<usize>,
    images: Vec<Tensor>,
    targets: Vec<Vec<usize>>,
}

impl UnderstandingPool {
    fn build(ctx: &StageContext<'_>, train: &[&SyntheticSample]) -> Result<Self> {
        let images = train
            .iter()
            .map(|s| if s.image.shape[0] == ctx.model.image_size { Ok(s.image.clone()) } else { s.spec.render(ctx.model.image_size) })
            .collect::<Result<_>>()?;
        Ok(UnderstandingPool {
            prompt: ctx.vocab.encode(DEFAULT_PROMPT),
            images,
            targets: train.iter().map(|s| ctx.vocab.report_target(&clean_report(&s.noisy_report))).collect(),
        })
    }
}

struct GenerationPool {
    latents: Vec<Tensor>,
    cond_ids: Vec<Vec<usize>>,
    /// Cached conditions; `None` when they are computed in-graph.
    conds: Option<Vec<Tensor>>,
    /// Probe grid features per sample when the alignment loss is on.
    feats: Option<Vec<Tensor>>,
}

impl GenerationPool {
    fn build(
        ctx: &StageContext<'_>,
        params: &ParamTree,
        train: &[&SyntheticSample],
        resolution: usize,
        cache_conds: bool,
        with_feats: bool,
    ) -> Result<Self> {
        let codec = ctx.codec.ok_or_else(|| Error::Config("generation training needs a codec".into()))?;
        let mut latents = Vec::with_capacity(train.len());
        let mut feats = Vec::new();
        for s in train {
            let img = if s.image.shape[0] == resolution { s.image.clone() } else { s.spec.render(resolution)? };
            latents.push(codec.encode(&img)?);
            if with_feats {
                let probe = ctx.probe.ok_or_else(|| Error::Config("alignment loss needs a probe".into()))?;
                feats.push(probe.grid_features(&img)?);
            }
        }
        let reports: Vec<String> = train.iter().map(|s| clean_report(&s.noisy_report)).collect();
        let cond_ids: Vec<Vec<usize>> = reports.iter().map(|r| condition_ids(ctx.model, ctx.vocab, r)).collect();
        let conds = if cache_conds {
            let mut out = Vec::with_capacity(train.len());
            for ids in &cond_ids {
                let mut g = Graph::inference();
                let c = condition_rows(&mut g, params, ctx.model, ids)?;
                out.push(g.value(c).clone());
            }
            Some(out)
        } else {
            None
        };
        Ok(GenerationPool {
            latents,
            cond_ids,
            conds,
            feats: with_feats.then_some(feats),
        })
    }

    fn len(&self) -> usize {
        self.latents.len()
    }
}

/// One optimizer step's record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub understanding: f64,
    pub mse: f64,
    pub repa: f64,
    pub n_understanding: usize,
    pub n_generation: usize,
}

struct TrainPlan {
    lr: f64,
    warmup: usize,
    steps: usize,
    batch: usize,
    mix: (usize, usize),
    repa_weight: Option<f64>,
    opt: AdamW,
}

/// Runs `plan.steps` optimizer steps. `on_step` sees parameters after each
/// update. A non-finite loss aborts before the update, leaving `params` at
/// the last good values.
fn train_loop(
    plan: &TrainPlan,
    cfg: &ModelConfig,
    params: &mut ParamTree,
    und: Option<&UnderstandingPool>,
    gen: Option<&GenerationPool>,
    rng: &mut ChaCha8Rng,
    mut on_step: impl FnMut(usize, &ParamTree) -> Result<()>,
) -> Result<Vec<StepLog>> {
    let (nu, ng) = batch_composition(plan.batch, plan.mix.0, plan.mix.1)?;
    if nu > 0 && und.is_none_or(|p| p.images.is_empty()) || ng > 0 && gen.is_none_or(|p| p.len() == 0) {
        return Err(Error::Invalid("training pool is empty for a sampled branch".into()));
    }
    let mut state = OptimizerState::new();
    let mut logs = Vec::with_capacity(plan.steps);
    for step in 0..plan.steps {
        params.zero_grad();
        let mut g = Graph::new();
        let mut rec = StepLog {
            step,
            lr: warmup_lr(plan.lr, plan.warmup, step),
            loss: 0.0,
            understanding: 0.0,
            mse: 0.0,
            repa: 0.0,
            n_understanding: nu,
            n_generation: ng,
        };
        let mut terms: Vec<(Var, f64)> = Vec::new();
        if let (true, Some(pool)) = (nu > 0, und) {
            let idx: Vec<usize> = (0..nu).map(|_| rng.random_range(0..pool.images.len())).collect();
            let batch: Vec<UnderstandingExample<'_>> = idx
                .iter()
                .map(|&i| UnderstandingExample {
                    image: &pool.images[i],
                    prompt: &pool.prompt,
                    target: &pool.targets[i],
                })
                .collect();
            let seqs = assemble(&mut g, params, cfg, &batch)?;
            let l = ar_loss(&mut g, params, cfg, &seqs, LossNorm::PerToken)?;
            rec.understanding = g.value(l).item();
            terms.push((l, nu as f64));
        }
        if let (true, Some(pool)) = (ng > 0, gen) {
            let mut inputs = Vec::with_capacity(ng);
            let mut targets = Vec::with_capacity(ng);
            let mut feats = Vec::new();
            for _ in 0..ng {
                let i = rng.random_range(0..pool.len());
                let fs = flow_sample_training_pair(&pool.latents[i], rng);
                let cond = match &pool.conds {
                    Some(c) => g.constant(c[i].clone()),
                    None => condition_rows(&mut g, params, cfg, &pool.cond_ids[i])?,
                };
                inputs.push(VelocityInput {
                    cond,
                    latent: g.constant(fs.xt),
                    t: fs.t,
                });
                targets.push(fs.ut);
                if let Some(f) = &pool.feats {
                    feats.push(f[i].clone());
                }
            }
            let out = velocity(&mut g, params, cfg, &inputs)?;
            let pred = g.concat(&out.velocity)?;
            let target_vars: Vec<Var> = targets.into_iter().map(|t| g.constant(t)).collect();
            let target = g.concat(&target_vars)?;
            let mse = flow_loss(&mut g, pred, target)?;
            rec.mse = g.value(mse).item();
            let mut lg = mse;
            if let Some(w) = plan.repa_weight {
                if feats.is_empty() {
                    return Err(Error::Config("alignment loss needs probe features".into()));
                }
                let hidden = g.concat(&out.align_hidden)?;
                let fv: Vec<Var> = feats.into_iter().map(|f| g.constant(f)).collect();
                let fcat = g.concat(&fv)?;
                let r = repa_loss(&mut g, params, hidden, fcat)?;
                rec.repa = g.value(r).item();
                let scaled = g.scale(r, w);
                lg = g.add(lg, scaled)?;
            }
            terms.push((lg, ng as f64));
        }
        let total: f64 = terms.iter().map(|t| t.1).sum();
        let mut loss = None;
        for (v, n) in terms {
            let s = g.scale(v, n / total);
            loss = Some(match loss {
                None => s,
                Some(acc) => g.add(acc, s)?,
            });
        }
        let loss = loss.expect("batch has at least one term");
        rec.loss = g.value(loss).item();
        if !rec.loss.is_finite() {
            return Err(Error::NonFinite {
                what: "training loss".into(),
                step,
            });
        }
        let grads = g.backward(loss)?;
        params.accumulate(&g, &grads)?;
        plan.opt.step(params, &mut state, rec.lr)?;
        logs.push(rec);
        on_step(step, params)?;
    }
    Ok(logs)
}

/// Mean cosine similarity between projected alignment-layer states and
/// probe features over the first `n` pool samples at fixed noise and `t`.
fn alignment_similarity(cfg: &ModelConfig, params: &ParamTree, pool: &GenerationPool, n: usize, seed: u64) -> Result<f64> {
    let feats = pool.feats.as_ref().ok_or_else(|| Error::Config("alignment similarity needs probe features".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n.min(pool.len());
    let mut total = 0.0;
    for i in 0..n {
        let mut g = Graph::inference();
        let x0 = Tensor::randn(&pool.latents[i].shape, 1.0, &mut rng);
        let fs = crate::generation::flow_pair_at(x0, pool.latents[i].clone(), 0.5)?;
        let cond = match &pool.conds {
            Some(c) => g.constant(c[i].clone()),
            None => condition_rows(&mut g, params, cfg, &pool.cond_ids[i])?,
        };
        let latent = g.constant(fs.xt);
        let out = velocity(&mut g, params, cfg, &[VelocityInput { cond, latent, t: 0.5 }])?;
        let f = g.constant(feats[i].clone());
        let l = repa_loss(&mut g, params, out.align_hidden[0], f)?;
        total -= g.value(l).item();
    }
    Ok(total / n as f64)
}

fn render_losses(logs: &[StepLog]) -> String {
    let mut s = String::from("step lr loss understanding mse repa n_understanding n_generation\n");
    for l in logs {
        s.push_str(&format!(
            "{} {:?} {:?} {:?} {:?} {:?} {} {}\n",
            l.step, l.lr, l.loss, l.understanding, l.mse, l.repa, l.n_understanding, l.n_generation
        ));
    }
    s
}

fn tail_mean(xs: impl Iterator<Item = f64> + Clone, total: usize) -> f64 {
    let k = (total / 10).max(1);
    let tail: Vec<f64> = xs.skip(total.saturating_sub(k)).collect();
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

// ----- stages -------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub manifest: RunManifest,
    pub losses: Vec<StepLog>,
}

/// Number of training samples used to measure alignment similarity.
const ALIGNMENT_PROBE_SAMPLES: usize = 32;

/// Runs one stage in place on `params`.
///
/// Stage 1 needs no predecessor; stage k > 1 needs the manifest of stage
/// k − 1. Entering stage 2 from stage 1 copies the understanding backbone
/// into the generation backbone. With an output directory, writes
/// `stage{k}.ckpt`, its manifest and loss log at the end and a checkpoint
/// every 20% of steps; on a non-finite loss writes `stage{k}.lastgood.ckpt`
/// before returning the error.
pub fn run_stage(cfg: &StageConfig, ctx: &StageContext<'_>, params: &mut ParamTree, prev: Option<&RunManifest>) -> Result<StageOutcome> {
    cfg.validate()?;
    ctx.model.validate()?;
    if ctx.vocab.len() != ctx.model.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} words, model expects {}",
            ctx.vocab.len(),
            ctx.model.vocab_size
        )));
    }
    if cfg.stage > 1 && prev.is_none_or(|p| p.stage != cfg.stage - 1) {
        return Err(Error::MissingProvenance {
            stage: cfg.stage,
            prev: cfg.stage - 1,
        });
    }
    let dataset_hash = ctx.corpus.hash();
    if let Some(p) = prev {
        if p.dataset_hash != dataset_hash {
            return Err(Error::Invalid("corpus differs from the one the previous stage used".into()));
        }
    }
    let started = Instant::now();
    if cfg.stage == 2 {
        init_generation_from_understanding(params, ctx.model)?;
    }
    freeze_mask(params, &cfg.frozen)?;

    let train = ctx.corpus.train();
    let und = if cfg.mix_understanding > 0 { Some(UnderstandingPool::build(ctx, &train)?) } else { None };
    let gen = if cfg.mix_generation > 0 {
        Some(GenerationPool::build(ctx, params, &train, cfg.resolution, true, cfg.use_repa)?)
    } else {
        None
    };
    let mut metrics = BTreeMap::new();
    let key = |k: &str| format!("stage{}.{k}", cfg.stage);
    if let (true, Some(pool)) = (cfg.use_repa, &gen) {
        metrics.insert(key("repa_cos_start"), alignment_similarity(ctx.model, params, pool, ALIGNMENT_PROBE_SAMPLES, ctx.seed)?);
    }

    let plan = TrainPlan {
        lr: cfg.lr,
        warmup: cfg.warmup_steps,
        steps: cfg.total_steps,
        batch: cfg.batch_size,
        mix: (cfg.mix_understanding, cfg.mix_generation),
        repa_weight: cfg.use_repa.then_some(cfg.repa_weight),
        opt: AdamW {
            weight_decay: cfg.weight_decay,
            clip_norm: Some(cfg.clip_norm),
            ..AdamW::default()
        },
    };
    let every = cfg.total_steps.div_ceil(5).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    rng.set_stream(u64::from(cfg.stage));
    let mut last_good = params.clone();
    let result = train_loop(&plan, ctx.model, params, und.as_ref(), gen.as_ref(), &mut rng, |step, p| {
        let done = step + 1;
        if let Some(dir) = ctx.out_dir {
            if done % every == 0 && done < cfg.total_steps {
                save_model(&dir.join(format!("stage{}.step{done:06}.ckpt", cfg.stage)), p, ctx.model, cfg.stage, ctx.seed)?;
            }
        }
        last_good.clone_from(p);
        Ok(())
    });
    let losses = match result {
        Ok(l) => l,
        Err(e) => {
            if let Some(dir) = ctx.out_dir {
                std::fs::create_dir_all(dir)?;
                save_model(&dir.join(format!("stage{}.lastgood.ckpt", cfg.stage)), &last_good, ctx.model, cfg.stage, ctx.seed)?;
            }
            *params = last_good;
            return Err(e);
        }
    };

    let n = losses.len();
    metrics.insert(key("final_loss"), tail_mean(losses.iter().map(|l| l.loss), n));
    if und.is_some() {
        metrics.insert(key("final_understanding_loss"), tail_mean(losses.iter().map(|l| l.understanding), n));
    }
    if gen.is_some() {
        metrics.insert(key("final_mse"), tail_mean(losses.iter().map(|l| l.mse), n));
    }
    if let (true, Some(pool)) = (cfg.use_repa, &gen) {
        metrics.insert(key("final_repa"), tail_mean(losses.iter().map(|l| l.repa), n));
        metrics.insert(key("repa_cos_end"), alignment_similarity(ctx.model, params, pool, ALIGNMENT_PROBE_SAMPLES, ctx.seed)?);
    }
    let mut stages = prev.map(|p| p.stages.clone()).unwrap_or_default();
    stages.push(cfg.clone());
    let mut all_metrics = prev.map(|p| p.metrics.clone()).unwrap_or_default();
    all_metrics.extend(metrics);
    let manifest = RunManifest {
        stage: cfg.stage,
        seed: ctx.seed,
        stages,
        dataset_hash,
        git_describe: git_describe(),
        model: ctx.model.clone(),
        param_hash: param_hash(params),
        codec_hash: ctx.codec.map(Codec::hash),
        probe_hash: ctx.probe.map(ProbeNetwork::hash),
        metrics: all_metrics,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = ctx.out_dir {
        std::fs::create_dir_all(dir)?;
        let ckpt = dir.join(format!("stage{}.ckpt", cfg.stage));
        save_model(&ckpt, params, ctx.model, cfg.stage, ctx.seed)?;
        manifest.save(&manifest_path(&ckpt))?;
        std::fs::write(dir.join(format!("stage{}.loss", cfg.stage)), render_losses(&losses))?;
    }
    Ok(StageOutcome { manifest, losses })
}

// ----- ablation -------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub train_understanding: bool,
    pub mix_understanding: usize,
    pub mix_generation: usize,
}

/// Fine-tuning budget shared by every row plus the rows themselves.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub rows: Vec<AblationRow>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub repa_weight: f64,
    pub resolution: usize,
    pub eval: EvalConfig,
}

impl AblationGrid {
    /// Frozen understanding with generation data only, then both branches
    /// trainable at 1:1, 1:2, 1:4 and 0:1.
    pub fn standard() -> Self {
        let row = |label: &str, train, r, s| AblationRow {
            label: label.into(),
            train_understanding: train,
            mix_understanding: r,
            mix_generation: s,
        };
        AblationGrid {
            rows: vec![
                row("frozen-0:1", false, 0, 1),
                row("joint-1:1", true, 1, 1),
                row("joint-1:2", true, 1, 2),
                row("joint-1:4", true, 1, 4),
                row("joint-0:1", true, 0, 1),
            ],
            steps: 40,
            batch_size: 16,
            lr: 2e-4,
            warmup_steps: 0,
            repa_weight: 0.5,
            resolution: 32,
            eval: EvalConfig::default(),
        }
    }

    /// Grid files are key-value text; rows read `row.N=label frozen|joint r:s`.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let map = parse_kv(text, path)?;
        let r = KvReader::new(&map, path);
        let mut g = AblationGrid::standard();
        macro_rules! read {
            ($($field:ident).+, $key:expr) => {
                if let Some(v) = r.opt($key)? {
                    g.$($field).+ = v;
                }
            };
        }
        read!(steps, "steps");
        read!(batch_size, "batch_size");
        read!(lr, "lr");
        read!(warmup_steps, "warmup_steps");
        read!(repa_weight, "repa_weight");
        read!(resolution, "resolution");
        read!(eval.sample_steps, "eval_sample_steps");
        read!(eval.max_report_len, "eval_max_report_len");
        read!(eval.seed, "eval_seed");
        g.eval.resolution = g.resolution;
        let mut rows: Vec<(usize, AblationRow)> = Vec::new();
        for (k, v) in &map {
            let Some(idx) = k.strip_prefix("row.") else { continue };
            let idx: usize = idx.parse().map_err(|_| Error::format("ablation grid", path, format!("bad row key {k}")))?;
            let bad = || Error::format("ablation grid", path, format!("row {idx} must read 'label frozen|joint r:s'"));
            let parts: Vec<&str> = v.split_whitespace().collect();
            let [label, mode, ratio] = parts[..] else { return Err(bad()) };
            let (a, b) = ratio.split_once(':').ok_or_else(bad)?;
            rows.push((
                idx,
                AblationRow {
                    label: label.into(),
                    train_understanding: match mode {
                        "joint" => true,
                        "frozen" => false,
                        _ => return Err(bad()),
                    },
                    mix_understanding: a.parse().map_err(|_| bad())?,
                    mix_generation: b.parse().map_err(|_| bad())?,
                },
            ));
        }
        if !rows.is_empty() {
            rows.sort_by_key(|r| r.0);
            g.rows = rows.into_iter().map(|r| r.1).collect();
        }
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        AblationGrid::parse(&std::fs::read_to_string(path)?, path)
    }
}

impl fmt::Display for AblationGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut pairs: Vec<(String, String)> = vec![
            ("steps".into(), self.steps.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("lr".into(), format!("{:?}", self.lr)),
            ("warmup_steps".into(), self.warmup_steps.to_string()),
            ("repa_weight".into(), format!("{:?}", self.repa_weight)),
            ("resolution".into(), self.resolution.to_string()),
            ("eval_sample_steps".into(), self.eval.sample_steps.to_string()),
            ("eval_max_report_len".into(), self.eval.max_report_len.to_string()),
            ("eval_seed".into(), self.eval.seed.to_string()),
        ];
        for (i, r) in self.rows.iter().enumerate() {
            let mode = if r.train_understanding { "joint" } else { "frozen" };
            pairs.push((format!("row.{i}"), format!("{} {mode} {}:{}", r.label, r.mix_understanding, r.mix_generation)));
        }
        f.write_str(&render_kv(pairs.iter().map(|(k, v)| (k.as_str(), v.clone()))))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub label: String,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub fd: f64,
    pub kd: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    /// Scores of the starting checkpoint.
    pub reference: AblationResult,
    pub rows: Vec<AblationResult>,
}

/// Tab-separated, one header line then the reference and every row.
impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "label\tmicro_f1\tmacro_f1\tfd\tkd")?;
        for r in std::iter::once(&self.reference).chain(&self.rows) {
            writeln!(f, "{}\t{:?}\t{:?}\t{:?}\t{:?}", r.label, r.micro_f1, r.macro_f1, r.fd, r.kd)?;
        }
        Ok(())
    }
}

fn score(label: &str, ctx: &StageContext<'_>, params: &ParamTree, samples: &[&SyntheticSample], eval: &EvalConfig) -> Result<AblationResult> {
    let codec = ctx.codec.ok_or_else(|| Error::Config("ablation needs a codec".into()))?;
    let probe = ctx.probe.ok_or_else(|| Error::Config("ablation needs a probe".into()))?;
    let view = ModelView {
        params,
        cfg: ctx.model,
        codec,
        vocab: ctx.vocab,
    };
    let report = evaluate(view, probe, samples, eval)?;
    Ok(AblationResult {
        label: label.into(),
        micro_f1: report.micro_f1,
        macro_f1: report.macro_f1,
        fd: report.fd,
        kd: report.kd,
    })
}

/// Fine-tunes a copy of the stage-2 parameters once per row and scores
/// each on `eval_samples`. Rows that train the understanding branch
/// compute conditions in-graph so the generation loss reaches it.
pub fn run_ablation(
    grid: &AblationGrid,
    ctx: &StageContext<'_>,
    start: &ParamTree,
    start_manifest: &RunManifest,
    eval_samples: &[&SyntheticSample],
) -> Result<AblationTable> {
    if start_manifest.stage < 2 {
        return Err(Error::MissingProvenance {
            stage: 4,
            prev: 2,
        });
    }
    let train = ctx.corpus.train();
    let reference = score("reference", ctx, start, eval_samples, &grid.eval)?;
    let mut rows = Vec::with_capacity(grid.rows.len());
    let mut frozen_pool = None;
    for row in &grid.rows {
        let mut params = start.clone();
        let frozen = if row.train_understanding { vec![] } else { vec![Branch::Understanding] };
        freeze_mask(&mut params, &frozen)?;
        let und = if row.mix_understanding > 0 {
            Some(UnderstandingPool::build(ctx, &train)?)
        } else {
            None
        };
        let use_repa = grid.repa_weight > 0.0;
        let built;
        let gen = if row.mix_generation == 0 {
            None
        } else if row.train_understanding {
            built = GenerationPool::build(ctx, &params, &train, grid.resolution, false, use_repa)?;
            Some(&built)
        } else {
            if frozen_pool.is_none() {
                frozen_pool = Some(GenerationPool::build(ctx, &params, &train, grid.resolution, true, use_repa)?);
            }
            frozen_pool.as_ref()
        };
        let plan = TrainPlan {
            lr: grid.lr,
            warmup: grid.warmup_steps,
            steps: grid.steps,
            batch: grid.batch_size,
            mix: (row.mix_understanding, row.mix_generation),
            repa_weight: use_repa.then_some(grid.repa_weight),
            opt: AdamW::default(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
        rng.set_stream(10);
        train_loop(&plan, ctx.model, &mut params, und.as_ref(), gen, &mut rng, |_, _| Ok(()))?;
        rows.push(score(&row.label, ctx, &params, eval_samples, &grid.eval)?);
    }
    Ok(AblationTable { reference, rows })
}
