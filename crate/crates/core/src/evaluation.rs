//! End-to-end scoring of a model on held-out samples.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{extract_labels, Finding, SyntheticSample, UncertainMode};
use crate::error::{Error, Result};
use crate::generation::{sample, Codec};
use crate::metrics::{frechet_distance, kernel_distance, label_agreement, micro_macro_f1, prdc, MetricReport, ProbeNetwork};
use crate::model::ModelConfig;
use crate::tensor::{ParamTree, Tensor};
use crate::understanding::{condition_states, generate_report, DecodeMode, Vocabulary, DEFAULT_PROMPT};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Side of generated and reference images.
    pub resolution: usize,
    pub sample_steps: usize,
    pub max_report_len: usize,
    pub prdc_k: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            resolution: 32,
            sample_steps: 20,
            max_report_len: 40,
            prdc_k: 5,
            seed: 0,
        }
    }
}

/// Trained weights plus everything needed to run them.
#[derive(Clone, Copy, Debug)]
pub struct ModelView<'a> {
    pub params: &'a ParamTree,
    pub cfg: &'a ModelConfig,
    pub codec: &'a Codec,
    pub vocab: &'a Vocabulary,
}

fn image_at(s: &SyntheticSample, res: usize) -> Result<Tensor> {
    if s.image.shape[0] == res {
        Ok(s.image.clone())
    } else {
        s.spec.render(res)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnderstandingScores {
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub micro_f1_uncertain_pos: f64,
    pub macro_f1_uncertain_pos: f64,
}

/// Greedy report for every sample, labeled and scored against its reference
/// report under both uncertainty conventions.
pub fn evaluate_understanding(model: ModelView<'_>, samples: &[&SyntheticSample], max_len: usize) -> Result<UnderstandingScores> {
    let prompt = model.vocab.encode(DEFAULT_PROMPT);
    let k = samples.first().map_or(0, |s| s.labels.len());
    let mut reports = Vec::with_capacity(samples.len());
    for s in samples {
        let image = image_at(s, model.cfg.image_size)?;
        let ids = generate_report(model.params, model.cfg, &image, &prompt, max_len, DecodeMode::Greedy)?;
        reports.push(model.vocab.decode(&ids));
    }
    let score = |mode| {
        let pred: Vec<_> = reports.iter().map(|r| extract_labels(r, k, mode)).collect();
        let truth: Vec<_> = samples.iter().map(|s| extract_labels(&s.clean_report, k, mode)).collect();
        micro_macro_f1(&pred, &truth)
    };
    let (micro_f1, macro_f1) = score(UncertainMode::AsNegative)?;
    let (micro_f1_uncertain_pos, macro_f1_uncertain_pos) = score(UncertainMode::AsPositive)?;
    Ok(UnderstandingScores {
        micro_f1,
        macro_f1,
        micro_f1_uncertain_pos,
        macro_f1_uncertain_pos,
    })
}

/// One generated image per sample, conditioned on its clean report.
pub fn generate_images(model: ModelView<'_>, samples: &[&SyntheticSample], res: usize, steps: usize, seed: u64) -> Result<Vec<Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples
        .iter()
        .map(|s| {
            let cond = condition_states(model.params, model.cfg, model.vocab, &s.clean_report)?;
            sample(model.params, model.cfg, model.codec, &cond, res, steps, &mut rng)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationScores {
    pub fd: f64,
    pub kd: f64,
    pub alignment: f64,
    pub alignment_chance: f64,
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
    pub fd_per_finding: Vec<(String, usize, Option<f64>)>,
}

/// Distribution and alignment scores of generated images against real ones.
///
/// `labels[i]` are the findings image `i` was conditioned on; chance
/// alignment pairs each generated image with another sample's labels.
pub fn evaluate_generation(
    probe: &ProbeNetwork,
    real: &[Tensor],
    generated: &[Tensor],
    labels: &[Vec<bool>],
    prdc_k: usize,
    seed: u64,
) -> Result<GenerationScores> {
    if generated.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "generated images and condition labels",
            expected: labels.len(),
            got: generated.len(),
        });
    }
    if !probe.trained {
        return Err(Error::Invalid("generation metrics need a trained probe".into()));
    }
    let real_f = real.iter().map(|i| probe.features(i)).collect::<Result<Vec<_>>>()?;
    let fake_f = generated.iter().map(|i| probe.features(i)).collect::<Result<Vec<_>>>()?;
    let pred = generated.iter().map(|i| probe.predict(i)).collect::<Result<Vec<_>>>()?;
    let alignment = label_agreement(&pred, labels)?;
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    loop {
        order.shuffle(&mut rng);
        if labels.len() < 2 || order.iter().enumerate().all(|(i, &j)| i != j) {
            break;
        }
    }
    let shuffled: Vec<Vec<bool>> = order.iter().map(|&j| labels[j].clone()).collect();
    let alignment_chance = label_agreement(&pred, &shuffled)?;
    let p = prdc(&real_f, &fake_f, prdc_k)?;

    let k = labels.first().map_or(0, Vec::len);
    let mut fd_per_finding = Vec::with_capacity(k);
    for j in 0..k {
        let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i][j]).collect();
        let sub = |f: &[Vec<f64>]| pos.iter().filter_map(|&i| f.get(i).cloned()).collect::<Vec<_>>();
        let value = match frechet_distance(&sub(&real_f), &sub(&fake_f)) {
            Ok(v) => Some(v),
            Err(Error::InsufficientSamples { .. }) => None,
            Err(e) => return Err(e),
        };
        let name = Finding::ALL.get(j).map_or_else(|| format!("finding{j}"), |f| f.word().replace(' ', "-"));
        fd_per_finding.push((name, pos.len(), value));
    }
    Ok(GenerationScores {
        fd: frechet_distance(&real_f, &fake_f)?,
        kd: kernel_distance(&real_f, &fake_f)?,
        alignment,
        alignment_chance,
        precision: p.precision,
        recall: p.recall,
        density: p.density,
        coverage: p.coverage,
        fd_per_finding,
    })
}

/// Scores both branches on `samples` (normally a test split).
pub fn evaluate(model: ModelView<'_>, probe: &ProbeNetwork, samples: &[&SyntheticSample], cfg: &EvalConfig) -> Result<MetricReport> {
    let und = evaluate_understanding(model, samples, cfg.max_report_len)?;
    let generated = generate_images(model, samples, cfg.resolution, cfg.sample_steps, cfg.seed)?;
    let real = samples.iter().map(|s| image_at(s, cfg.resolution)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<Vec<bool>> = samples.iter().map(|s| s.labels.clone()).collect();
    let gen = evaluate_generation(probe, &real, &generated, &labels, cfg.prdc_k, cfg.seed)?;
    Ok(MetricReport {
        micro_f1: und.micro_f1,
        macro_f1: und.macro_f1,
        micro_f1_uncertain_pos: und.micro_f1_uncertain_pos,
        macro_f1_uncertain_pos: und.macro_f1_uncertain_pos,
        fd: gen.fd,
        kd: gen.kd,
        alignment: gen.alignment,
        alignment_chance: gen.alignment_chance,
        precision: gen.precision,
        recall: gen.recall,
        density: gen.density,
        coverage: gen.coverage,
        n_understanding: samples.len(),
        n_real: real.len(),
        n_generated: generated.len(),
        fd_per_finding: gen.fd_per_finding,
        probe_hash: probe.hash(),
    })
}
