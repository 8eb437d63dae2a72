//! Trains the understanding branch briefly on a small corpus and writes
//! reports for held-out images.
//!
//! cargo run --release --example report_writing

use dualbranch::data::{Corpus, CorpusConfig};
use dualbranch::model::{init_params, ModelConfig};
use dualbranch::pipeline::{run_stage, StageConfig, StageContext};
use dualbranch::understanding::{generate_report, DecodeMode, Vocabulary, DEFAULT_PROMPT};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dualbranch::Result<()> {
    let vocab = Vocabulary::standard();
    let cfg = ModelConfig::tiny(vocab.len());
    let corpus = Corpus::generate(CorpusConfig::default(), 200, 2, cfg.image_size)?;
    let mut params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let ctx = StageContext {
        model: &cfg,
        vocab: &vocab,
        corpus: &corpus,
        codec: None,
        probe: None,
        seed: 0,
        out_dir: None,
    };
    let mut stage = StageConfig::desk(1)?;
    stage.total_steps = 300;
    stage.resolution = cfg.image_size;
    stage.lr = 3e-3;
    let outcome = run_stage(&stage, &ctx, &mut params, None)?;
    let first = outcome.losses.first().map_or(f64::NAN, |l| l.loss);
    let last = outcome.losses.last().map_or(f64::NAN, |l| l.loss);
    println!("understanding loss {first:.3} -> {last:.3}");

    let prompt = vocab.encode(DEFAULT_PROMPT);
    for s in corpus.test().into_iter().take(4) {
        let ids = generate_report(&params, &cfg, &s.image, &prompt, 40, DecodeMode::Greedy)?;
        println!("truth:     {}", s.clean_report);
        println!("generated: {}\n", vocab.decode(&ids));
    }
    Ok(())
}
