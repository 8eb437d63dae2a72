//! Fine-tunes a toy stage-2 model under each mixing/freezing row and prints
//! the resulting table.
//!
//! cargo run --release --example ablation

use dualbranch::data::{Corpus, CorpusConfig};
use dualbranch::evaluation::EvalConfig;
use dualbranch::model::{init_params, ModelConfig};
use dualbranch::pipeline::{prepare_auxiliaries, run_ablation, run_stage, AblationGrid, AuxConfig, StageConfig, StageContext};
use dualbranch::understanding::Vocabulary;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dualbranch::Result<()> {
    let vocab = Vocabulary::standard();
    let cfg = ModelConfig::tiny(vocab.len());
    let corpus = Corpus::generate(CorpusConfig::default(), 120, 6, cfg.image_size)?;
    let aux = AuxConfig {
        codec_hidden: 8,
        codec_steps: 100,
        probe_steps: 60,
        probe_conv_layers: 1,
        ..AuxConfig::default()
    };
    let (codec, probe) = prepare_auxiliaries(&corpus, &cfg, &aux, 0)?;
    let ctx = StageContext {
        model: &cfg,
        vocab: &vocab,
        corpus: &corpus,
        codec: Some(&codec),
        probe: Some(&probe),
        seed: 0,
        out_dir: None,
    };
    let mut params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut s1 = StageConfig::desk(1)?;
    s1.total_steps = 150;
    s1.lr = 3e-3;
    s1.resolution = cfg.image_size;
    let o1 = run_stage(&s1, &ctx, &mut params, None)?;
    let mut s2 = StageConfig::desk(2)?;
    s2.total_steps = 20;
    s2.batch_size = 4;
    s2.resolution = cfg.image_size;
    let o2 = run_stage(&s2, &ctx, &mut params, Some(&o1.manifest))?;

    let mut grid = AblationGrid::standard();
    grid.steps = 10;
    grid.batch_size = 4;
    grid.resolution = cfg.image_size;
    grid.eval = EvalConfig {
        resolution: cfg.image_size,
        sample_steps: 4,
        max_report_len: 30,
        ..EvalConfig::default()
    };
    let eval = corpus.test();
    let table = run_ablation(&grid, &ctx, &params, &o2.manifest, &eval)?;
    print!("{table}");
    Ok(())
}
