//! Scores a freshly initialized toy model with the full metric report and
//! saves it to disk.
//!
//! cargo run --release --example evaluation -- [report_path]

use std::path::PathBuf;

use dualbranch::data::{Corpus, CorpusConfig};
use dualbranch::evaluation::{evaluate, EvalConfig, ModelView};
use dualbranch::model::{init_params, ModelConfig};
use dualbranch::pipeline::{prepare_auxiliaries, AuxConfig};
use dualbranch::understanding::Vocabulary;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dualbranch::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("dualbranch_report.txt"));
    let vocab = Vocabulary::standard();
    let cfg = ModelConfig::tiny(vocab.len());
    let corpus = Corpus::generate(CorpusConfig::default(), 200, 9, cfg.image_size)?;
    let aux = AuxConfig {
        codec_hidden: 8,
        codec_steps: 100,
        probe_steps: 100,
        probe_conv_layers: 1,
        ..AuxConfig::default()
    };
    let (codec, probe) = prepare_auxiliaries(&corpus, &cfg, &aux, 0)?;
    let test = corpus.test();
    let images: Vec<_> = test.iter().map(|s| &s.image).collect();
    let labels: Vec<_> = test.iter().map(|s| s.labels.clone()).collect();
    println!("probe label accuracy on the test split {:.3}", probe.accuracy(&images, &labels)?);
    let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let view = ModelView {
        params: &params,
        cfg: &cfg,
        codec: &codec,
        vocab: &vocab,
    };
    let eval = EvalConfig {
        resolution: cfg.image_size,
        sample_steps: 4,
        ..EvalConfig::default()
    };
    let report = evaluate(view, &probe, &test, &eval)?;
    report.save(&out)?;
    print!("{report}");
    println!("saved {}", out.display());
    Ok(())
}
