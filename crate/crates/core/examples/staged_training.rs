//! Runs the three training stages at toy scale, writing checkpoints,
//! manifests and loss logs, then reloads the final checkpoint.
//!
//! cargo run --release --example staged_training -- [out_dir]

use std::path::PathBuf;

use dualbranch::data::{Corpus, CorpusConfig};
use dualbranch::model::{init_params, ModelConfig};
use dualbranch::pipeline::{
    load_model, manifest_path, prepare_auxiliaries, run_stage, AuxConfig, RunManifest, StageConfig, StageContext,
};
use dualbranch::tensor::{param_hash, Branch};
use dualbranch::understanding::Vocabulary;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dualbranch::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("dualbranch_stages"));
    std::fs::create_dir_all(&out)?;
    let vocab = Vocabulary::standard();
    let cfg = ModelConfig::tiny(vocab.len());
    let corpus = Corpus::generate(CorpusConfig::default(), 120, 5, cfg.image_size)?;
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
        out_dir: Some(&out),
    };
    let mut params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut prev: Option<RunManifest> = None;
    for (stage, steps) in [(1u8, 40), (2, 20), (3, 6)] {
        let mut sc = StageConfig::desk(stage)?;
        sc.total_steps = steps;
        sc.warmup_steps = sc.warmup_steps.min(steps / 4);
        sc.batch_size = 4;
        sc.resolution = if stage == 3 { 2 * cfg.image_size } else { cfg.image_size };
        let und_before = params.branch_bytes(Branch::Understanding);
        let outcome = run_stage(&sc, &ctx, &mut params, prev.as_ref())?;
        let und_kept = params.branch_bytes(Branch::Understanding) == und_before;
        println!(
            "stage {stage}: {} steps, final loss {:.4}, understanding weights unchanged: {und_kept}",
            outcome.losses.len(),
            outcome.losses.last().map_or(f64::NAN, |l| l.loss)
        );
        prev = Some(outcome.manifest);
    }

    let ckpt = out.join("stage3.ckpt");
    let (reloaded, _, stage) = load_model(&ckpt)?;
    let manifest = RunManifest::load(&manifest_path(&ckpt))?;
    println!("reloaded stage {stage}, hash match {}", param_hash(&reloaded) == param_hash(&params));
    println!("manifest:\n{manifest}");
    Ok(())
}
