//! Builds a small synthetic corpus, shows one sample's report pipeline and
//! writes the corpus directory plus one float image.
//!
//! cargo run --example synthetic_corpus -- [out_dir]

use std::path::PathBuf;

use dualbranch::data::{clean_report, extract_labels, inject_noise, Corpus, CorpusConfig, UncertainMode};
use dualbranch::imageio::write_image;

fn main() -> dualbranch::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("dualbranch_corpus"));
    let corpus = Corpus::generate(CorpusConfig::default(), 40, 7, 32)?;
    println!("samples={} train={} test={}", corpus.samples.len(), corpus.train().len(), corpus.test().len());
    println!("hash={}", corpus.hash());

    let s = &corpus.samples[3];
    let clean = s.clean_report.clone();
    let noisy = inject_noise(&clean, 1);
    println!("clean:   {clean}");
    println!("noisy:   {noisy}");
    println!("cleaned: {}", clean_report(&noisy));
    let k = s.spec.num_findings();
    println!("labels (uncertain negative): {:?}", extract_labels(&clean, k, UncertainMode::AsNegative));
    println!("labels (uncertain positive): {:?}", extract_labels(&clean, k, UncertainMode::AsPositive));

    corpus.save(&out)?;
    let img_path = out.join("example.fimg");
    write_image(&img_path, &s.spec.render(64)?)?;
    println!("corpus={} image={}", out.display(), img_path.display());
    Ok(())
}
