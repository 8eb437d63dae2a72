//! Trains a small image codec, walks the straight noise-to-latent path and
//! samples an image from an untrained backbone conditioned on a report.
//!
//! cargo run --release --example flow_sampling

use dualbranch::data::{Corpus, CorpusConfig};
use dualbranch::generation::{flow_pair_at, sample, Codec};
use dualbranch::model::{init_params, ModelConfig};
use dualbranch::tensor::Tensor;
use dualbranch::understanding::{condition_states, Vocabulary};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dualbranch::Result<()> {
    let vocab = Vocabulary::standard();
    let cfg = ModelConfig::tiny(vocab.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let corpus = Corpus::generate(CorpusConfig::default(), 64, 1, cfg.image_size)?;
    let images: Vec<Tensor> = corpus.samples.iter().map(|s| s.image.clone()).collect();
    let refs: Vec<&Tensor> = images.iter().collect();

    let mut codec = Codec::new(cfg.latent_factor, cfg.latent_channels, 8, &mut rng)?;
    println!("codec mse before {:.4}", codec.reconstruction_mse(&refs)?);
    codec.train(&refs, 200, 8, 3e-3, &mut rng)?;
    println!("codec mse after  {:.4}", codec.reconstruction_mse(&refs)?);

    let x1 = codec.encode(&images[0])?;
    let x0 = Tensor::randn(&x1.shape, 1.0, &mut rng);
    for t in [0.0, 0.5, 1.0] {
        let s = flow_pair_at(x0.clone(), x1.clone(), t)?;
        let to_data: f64 = s.xt.data.iter().zip(&x1.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!("t={t:.1} max |x_t - x1| = {to_data:.4}");
    }

    let params = init_params(&cfg, &mut rng)?;
    let report = corpus.samples[0].clean_report.clone();
    let cond = condition_states(&params, &cfg, &vocab, &report)?;
    let img = sample(&params, &cfg, &codec, &cond, cfg.image_size, 10, &mut rng)?;
    let mean = img.data.iter().sum::<f64>() / img.numel() as f64;
    println!("sampled {:?} image for \"{report}\", mean intensity {mean:.3}", img.shape);
    Ok(())
}
