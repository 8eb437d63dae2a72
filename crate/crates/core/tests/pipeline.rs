mod common;

use std::path::Path;

use common::rng;
use dualbranch::data::{Corpus, CorpusConfig};
use dualbranch::evaluation::EvalConfig;
use dualbranch::generation::Codec;
use dualbranch::metrics::ProbeNetwork;
use dualbranch::model::{init_params, ModelConfig};
use dualbranch::pipeline::{
    batch_composition, freeze_mask, load_model, manifest_path, prepare_auxiliaries, run_ablation, run_stage, AblationGrid,
    AuxConfig, RunManifest, StageConfig, StageContext, StageOutcome,
};
use dualbranch::tensor::{AdamW, Branch, Graph, OptimizerState, ParamTree};
use dualbranch::understanding::Vocabulary;
use dualbranch::Error;

struct Setup {
    cfg: ModelConfig,
    vocab: Vocabulary,
    corpus: Corpus,
    codec: Codec,
    probe: ProbeNetwork,
}

fn setup() -> Setup {
    let vocab = Vocabulary::standard();
    let cfg = ModelConfig::tiny(vocab.len());
    let corpus = Corpus::generate(CorpusConfig::default(), 60, 3, cfg.image_size).unwrap();
    let aux = AuxConfig {
        codec_hidden: 8,
        codec_steps: 30,
        probe_steps: 20,
        probe_conv_layers: 1,
        ..AuxConfig::default()
    };
    let (codec, probe) = prepare_auxiliaries(&corpus, &cfg, &aux, 4).unwrap();
    Setup {
        cfg,
        vocab,
        corpus,
        codec,
        probe,
    }
}

impl Setup {
    fn ctx<'a>(&'a self, out: Option<&'a Path>) -> StageContext<'a> {
        StageContext {
            model: &self.cfg,
            vocab: &self.vocab,
            corpus: &self.corpus,
            codec: Some(&self.codec),
            probe: Some(&self.probe),
            seed: 11,
            out_dir: out,
        }
    }
}

fn short(stage: u8, steps: usize) -> StageConfig {
    let mut c = StageConfig::desk(stage).unwrap();
    c.total_steps = steps;
    c.warmup_steps = c.warmup_steps.min(steps / 2);
    c.batch_size = 4;
    c.resolution = if stage == 3 { 32 } else { 16 };
    c
}

fn run_all(s: &Setup, out: Option<&Path>) -> (ParamTree, Vec<StageOutcome>) {
    let mut params = init_params(&s.cfg, &mut rng(5)).unwrap();
    let ctx = s.ctx(out);
    let o1 = run_stage(&short(1, 5), &ctx, &mut params, None).unwrap();
    let o2 = run_stage(&short(2, 5), &ctx, &mut params, Some(&o1.manifest)).unwrap();
    let o3 = run_stage(&short(3, 3), &ctx, &mut params, Some(&o2.manifest)).unwrap();
    (params, vec![o1, o2, o3])
}

#[test]
fn reference_schedule_values() {
    let lrs: Vec<f64> = (1..=3).map(|s| StageConfig::reference(s).unwrap().lr).collect();
    assert_eq!(lrs, vec![1e-4, 2e-4, 1e-4]);
    let warm: Vec<usize> = (1..=3).map(|s| StageConfig::reference(s).unwrap().warmup_steps).collect();
    assert_eq!(warm, vec![80, 2000, 0]);
    let s2 = StageConfig::desk(2).unwrap();
    assert!(s2.use_repa);
    assert_eq!(s2.repa_weight, 0.5);
    assert_eq!(s2.total_steps, 1500);
    assert_eq!(s2.step_scale, 0.02);
    let s3 = StageConfig::desk(3).unwrap();
    assert!(!s3.use_repa);
    assert_eq!(s3.resolution, 64);
    for s in 1..=3 {
        let c = StageConfig::desk(s).unwrap();
        assert_eq!((c.weight_decay, c.clip_norm), (0.0, 1.0));
        c.validate().unwrap();
    }
    assert!(StageConfig::reference(4).is_err());
}

#[test]
fn warmup_is_linear_then_exactly_constant() {
    let mut c = StageConfig::desk(2).unwrap();
    c.warmup_steps = 40;
    assert_eq!(c.lr_at(20), c.lr / 2.0);
    assert_eq!(c.lr_at(0), 0.0);
    for step in 40..200 {
        assert_eq!(c.lr_at(step), c.lr);
    }
    let s3 = StageConfig::desk(3).unwrap();
    assert_eq!(s3.lr_at(0), s3.lr);
}

#[test]
fn stage_invariants_are_enforced() {
    let mut c = StageConfig::desk(1).unwrap();
    c.frozen = vec![];
    assert!(c.validate().is_err());
    let mut c = StageConfig::desk(3).unwrap();
    c.use_repa = true;
    c.validate().unwrap();
    c.mix_understanding = 1;
    assert!(c.validate().is_err());
}

#[test]
fn stage_config_round_trips_through_text() {
    for s in 1..=3 {
        let mut c = StageConfig::desk(s).unwrap();
        c.lr = 1.0 / 3.0;
        let text = c.to_string();
        assert_eq!(StageConfig::parse(&text, Path::new("c")).unwrap(), c);
    }
    let partial = StageConfig::parse("stage=2\ntotal_steps=7\n", Path::new("c")).unwrap();
    assert_eq!(partial.total_steps, 7);
    assert_eq!(partial.lr, 2e-4);
    assert!(StageConfig::parse("stage=2\nfrozen=nothing\n", Path::new("c")).is_err());
}

#[test]
fn mixing_ratio_composition() {
    assert_eq!(batch_composition(16, 1, 1).unwrap(), (8, 8));
    assert_eq!(batch_composition(16, 1, 2).unwrap(), (5, 10));
    assert_eq!(batch_composition(16, 1, 4).unwrap(), (3, 12));
    assert_eq!(batch_composition(16, 0, 1).unwrap(), (0, 16));
    assert_eq!(batch_composition(2, 1, 4).unwrap(), (1, 4));
    assert!(batch_composition(16, 0, 0).is_err());
}

#[test]
fn freeze_mask_selects_the_complement() {
    let cfg = ModelConfig::tiny(12);
    let mut p = init_params(&cfg, &mut rng(0)).unwrap();
    let und: Vec<String> = p.iter().filter(|(_, e)| e.branch == Branch::Understanding).map(|(n, _)| n.to_string()).collect();
    assert_eq!(freeze_mask(&mut p, &[Branch::Generation]).unwrap(), und);
    assert_eq!(freeze_mask(&mut p, &[]).unwrap().len(), p.len());
    assert!(matches!(
        freeze_mask(&mut p, &[Branch::Generation, Branch::Understanding]),
        Err(Error::EmptyTrainableSet)
    ));
}

#[test]
fn frozen_branch_survives_an_optimizer_step_bytewise() {
    let cfg = ModelConfig::tiny(12);
    let mut p = init_params(&cfg, &mut rng(1)).unwrap();
    let before = p.branch_bytes(Branch::Understanding);
    let gen_before = p.branch_bytes(Branch::Generation);
    freeze_mask(&mut p, &[Branch::Understanding]).unwrap();
    p.zero_grad();
    for (_, e) in p.iter_mut() {
        if let Some(g) = e.tensor.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.5);
        }
    }
    let mut state = OptimizerState::new();
    AdamW::default().step(&mut p, &mut state, 1e-2).unwrap();
    assert_eq!(p.branch_bytes(Branch::Understanding), before);
    assert_ne!(p.branch_bytes(Branch::Generation), gen_before);
    assert!(state.first_moment.keys().all(|k| k.starts_with("gen.")));
}

#[test]
fn stages_chain_freeze_and_reproduce() {
    let s = setup();
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let init = init_params(&s.cfg, &mut rng(5)).unwrap();
    let (params, outs) = run_all(&s, Some(dir_a.path()));

    // Stage 1 leaves generation at init; stages 2-3 leave understanding at stage-1 values.
    let (p1, _, stage) = load_model(&dir_a.path().join("stage1.ckpt")).unwrap();
    assert_eq!(stage, 1);
    assert_eq!(p1.branch_bytes(Branch::Generation), init.branch_bytes(Branch::Generation));
    assert_ne!(p1.branch_bytes(Branch::Understanding), init.branch_bytes(Branch::Understanding));
    for k in [2, 3] {
        let (pk, _, _) = load_model(&dir_a.path().join(format!("stage{k}.ckpt"))).unwrap();
        assert_eq!(pk.branch_bytes(Branch::Understanding), p1.branch_bytes(Branch::Understanding));
    }
    assert_eq!(params.branch_bytes(Branch::Understanding), p1.branch_bytes(Branch::Understanding));

    // Stage 2 optimizes MSE + 0.5·alignment; stage 3 MSE only.
    for l in &outs[1].losses {
        assert!((l.loss - (l.mse + 0.5 * l.repa)).abs() < 1e-12);
        assert_eq!((l.n_understanding, l.n_generation), (0, 4));
    }
    for l in &outs[2].losses {
        assert_eq!(l.repa, 0.0);
        assert!((l.loss - l.mse).abs() < 1e-12);
    }
    assert!(outs[0].losses.iter().all(|l| l.n_understanding == 4 && l.n_generation == 0));
    let m = &outs[1].manifest.metrics;
    assert!(m.contains_key("stage2.repa_cos_start") && m.contains_key("stage2.repa_cos_end"));

    // Manifest text round-trips and sits next to its checkpoint.
    let ckpt = dir_a.path().join("stage3.ckpt");
    let loaded = RunManifest::load(&manifest_path(&ckpt)).unwrap();
    assert_eq!(loaded.to_string(), outs[2].manifest.to_string());
    assert_eq!(loaded.stages.len(), 3);
    assert!(dir_a.path().join("stage3.timing").exists());
    assert!(dir_a.path().join("stage1.step000001.ckpt").exists());

    // Same seeds: identical files, byte for byte.
    let (params_b, outs_b) = run_all(&s, Some(dir_b.path()));
    assert_eq!(params_b, params);
    for (a, b) in outs.iter().zip(&outs_b) {
        assert_eq!(a.losses, b.losses);
    }
    let mut names: Vec<_> = std::fs::read_dir(dir_a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .filter(|n| !n.to_string_lossy().ends_with(".timing"))
        .collect();
    names.sort();
    assert!(names.len() > 10);
    for n in names {
        let a = std::fs::read(dir_a.path().join(&n)).unwrap();
        let b = std::fs::read(dir_b.path().join(&n)).unwrap();
        assert!(a == b, "{n:?} differs");
    }
}

#[test]
fn later_stages_require_their_predecessor() {
    let s = setup();
    let mut params = init_params(&s.cfg, &mut rng(5)).unwrap();
    let ctx = s.ctx(None);
    assert!(matches!(
        run_stage(&short(2, 2), &ctx, &mut params, None),
        Err(Error::MissingProvenance { stage: 2, prev: 1 })
    ));
    let o1 = run_stage(&short(1, 2), &ctx, &mut params, None).unwrap();
    assert!(matches!(
        run_stage(&short(3, 2), &ctx, &mut params, Some(&o1.manifest)),
        Err(Error::MissingProvenance { stage: 3, prev: 2 })
    ));
}

#[test]
fn non_finite_loss_aborts_and_keeps_last_good_weights() {
    let s = setup();
    let dir = tempfile::tempdir().unwrap();
    let mut params = init_params(&s.cfg, &mut rng(5)).unwrap();
    params.get_mut("und.head.b").unwrap().data[0] = f64::NAN;
    let r = run_stage(&short(1, 3), &s.ctx(Some(dir.path())), &mut params, None);
    assert!(matches!(r, Err(Error::NonFinite { step: 0, .. })));
    assert!(dir.path().join("stage1.lastgood.ckpt").exists());
    assert!(!dir.path().join("stage1.ckpt").exists());
}

#[test]
fn ablation_grid_runs_every_row() {
    let s = setup();
    let mut params = init_params(&s.cfg, &mut rng(5)).unwrap();
    let ctx = s.ctx(None);
    let o1 = run_stage(&short(1, 2), &ctx, &mut params, None).unwrap();
    let o2 = run_stage(&short(2, 2), &ctx, &mut params, Some(&o1.manifest)).unwrap();
    let mut grid = AblationGrid::standard();
    assert_eq!(grid.rows.len(), 5);
    grid.steps = 2;
    grid.batch_size = 5;
    grid.resolution = 16;
    grid.eval = EvalConfig {
        resolution: 16,
        sample_steps: 2,
        max_report_len: 4,
        ..EvalConfig::default()
    };
    let text = grid.to_string();
    assert_eq!(AblationGrid::parse(&text, Path::new("g")).unwrap(), grid);

    let eval: Vec<_> = s.corpus.samples.iter().take(8).collect();
    let table = run_ablation(&grid, &ctx, &params, &o2.manifest, &eval).unwrap();
    assert_eq!(table.rows.len(), 5);
    // Frozen understanding: report generation is untouched.
    assert_eq!(table.rows[0].micro_f1, table.reference.micro_f1);
    assert_eq!(table.to_string().lines().count(), 7);
    assert!(run_ablation(&grid, &ctx, &params, &o1.manifest, &eval).is_err());
}

#[test]
fn in_graph_conditions_carry_gradients_to_understanding() {
    // In-graph conditions carry gradients to the language backbone.
    let s = setup();
    let mut p = init_params(&s.cfg, &mut rng(2)).unwrap();
    freeze_mask(&mut p, &[]).unwrap();
    let ids = dualbranch::understanding::condition_ids(&s.cfg, &s.vocab, "ring present .");
    let mut g = Graph::new();
    let c = dualbranch::understanding::condition_rows(&mut g, &p, &s.cfg, &ids).unwrap();
    let sq = g.square(c);
    let loss = g.mean(sq);
    let grads = g.backward(loss).unwrap();
    p.zero_grad();
    p.accumulate(&g, &grads).unwrap();
    let gsum: f64 = p.get("und.layer0.attn.wq").unwrap().grad.as_ref().unwrap().iter().map(|x| x.abs()).sum();
    assert!(gsum > 0.0);
}
