use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dualbranch::data::{Corpus, CorpusConfig};
use dualbranch::evaluation::{evaluate, EvalConfig, ModelView};
use dualbranch::generation::{sample, Codec};
use dualbranch::imageio::{read_image, write_image};
use dualbranch::metrics::ProbeNetwork;
use dualbranch::model::{init_params, ModelConfig};
use dualbranch::pipeline::{
    load_model, manifest_path, prepare_auxiliaries, run_ablation, run_stage, AblationGrid, AuxConfig, RunManifest,
    StageConfig, StageContext,
};
use dualbranch::tensor::param_hash;
use dualbranch::understanding::{condition_states, generate_report, DecodeMode, Vocabulary, DEFAULT_PROMPT};
use dualbranch::{Error, Result};

#[derive(Parser)]
#[command(name = "dualbranch", about = "Dual-branch report/image model: data, training, inference, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus directory.
    Datagen {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        res: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage.
    Train {
        #[arg(long)]
        stage: u8,
        /// Stage config file; desk defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint of the previous stage.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Model size for stage 1: desk, compact or tiny.
        #[arg(long, default_value = "compact")]
        preset: String,
    },
    /// Fine-tune a stage-2 checkpoint under each ablation row.
    Ablate {
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a corpus's test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        res: usize,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a report for an image.
    Understand {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = DEFAULT_PROMPT)]
        prompt: String,
        #[arg(long, default_value_t = 40)]
        max_len: usize,
    },
    /// Synthesize an image from a report.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        report: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        res: usize,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn sibling(checkpoint: &Path, name: &str) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join(name)
}

fn load_aux(checkpoint: &Path) -> Result<(Codec, ProbeNetwork)> {
    Ok((Codec::load(&sibling(checkpoint, "codec.ckpt"))?, ProbeNetwork::load(&sibling(checkpoint, "probe.ckpt"))?))
}

fn train(
    stage: u8,
    config: Option<PathBuf>,
    resume: Option<PathBuf>,
    corpus_dir: &Path,
    out: &Path,
    seed: u64,
    preset: &str,
) -> Result<()> {
    let cfg = match &config {
        Some(p) => StageConfig::load(p)?,
        None => StageConfig::desk(stage)?,
    };
    if cfg.stage != stage {
        return Err(Error::Config(format!("config is for stage {}, not {stage}", cfg.stage)));
    }
    let corpus = Corpus::load(corpus_dir)?;
    let vocab = Vocabulary::standard();
    std::fs::create_dir_all(out)?;
    let (mut params, model, prev) = match &resume {
        Some(ck) => {
            let (p, m, _) = load_model(ck)?;
            (p, m, Some(RunManifest::load(&manifest_path(ck))?))
        }
        None => {
            let m = ModelConfig::preset(preset, vocab.len())?;
            (init_params(&m, &mut ChaCha8Rng::seed_from_u64(seed))?, m, None)
        }
    };
    let (codec_path, probe_path) = (out.join("codec.ckpt"), out.join("probe.ckpt"));
    let (codec, probe) = if codec_path.exists() && probe_path.exists() {
        (Codec::load(&codec_path)?, ProbeNetwork::load(&probe_path)?)
    } else {
        let (c, p) = prepare_auxiliaries(&corpus, &model, &AuxConfig::default(), seed)?;
        c.save(&codec_path)?;
        p.save(&probe_path)?;
        (c, p)
    };
    let ctx = StageContext {
        model: &model,
        vocab: &vocab,
        corpus: &corpus,
        codec: Some(&codec),
        probe: Some(&probe),
        seed,
        out_dir: Some(out),
    };
    let outcome = run_stage(&cfg, &ctx, &mut params, prev.as_ref())?;
    for (k, v) in &outcome.manifest.metrics {
        println!("{k}={v:?}");
    }
    println!("checkpoint={}", out.join(format!("stage{stage}.ckpt")).display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Datagen { n, seed, res, out } => {
            let corpus = Corpus::generate(CorpusConfig::default(), n, seed, res)?;
            corpus.save(&out)?;
            println!("samples={n}\nhash={}", corpus.hash());
        }
        Command::Train {
            stage,
            config,
            resume,
            corpus,
            out,
            seed,
            preset,
        } => train(stage, config, resume, &corpus, &out, seed, &preset)?,
        Command::Ablate {
            grid,
            checkpoint,
            corpus,
            out,
        } => {
            let grid = match grid {
                Some(p) => AblationGrid::load(&p)?,
                None => AblationGrid::standard(),
            };
            let corpus = Corpus::load(&corpus)?;
            let (params, model, _) = load_model(&checkpoint)?;
            let manifest = RunManifest::load(&manifest_path(&checkpoint))?;
            let (codec, probe) = load_aux(&checkpoint)?;
            let vocab = Vocabulary::standard();
            let ctx = StageContext {
                model: &model,
                vocab: &vocab,
                corpus: &corpus,
                codec: Some(&codec),
                probe: Some(&probe),
                seed: manifest.seed,
                out_dir: None,
            };
            let table = run_ablation(&grid, &ctx, &params, &manifest, &corpus.test())?;
            std::fs::write(&out, table.to_string())?;
            print!("{table}");
        }
        Command::Evaluate {
            checkpoint,
            corpus,
            out,
            res,
            steps,
            seed,
        } => {
            let corpus = Corpus::load(&corpus)?;
            let (params, model, _) = load_model(&checkpoint)?;
            let (codec, probe) = load_aux(&checkpoint)?;
            let vocab = Vocabulary::standard();
            let view = ModelView {
                params: &params,
                cfg: &model,
                codec: &codec,
                vocab: &vocab,
            };
            let eval = EvalConfig {
                resolution: res,
                sample_steps: steps,
                seed,
                ..EvalConfig::default()
            };
            let report = evaluate(view, &probe, &corpus.test(), &eval)?;
            report.save(&out)?;
            print!("{report}");
        }
        Command::Understand {
            checkpoint,
            image,
            prompt,
            max_len,
        } => {
            let (params, model, _) = load_model(&checkpoint)?;
            let vocab = Vocabulary::standard();
            let img = read_image(&image)?;
            if img.shape[..2] != [model.image_size, model.image_size] {
                return Err(Error::Config(format!(
                    "image is {}x{}, model reads {2}x{2}",
                    img.shape[0],
                    img.shape[1],
                    model.image_size
                )));
            }
            let prompt = vocab.encode(&prompt);
            let ids = generate_report(&params, &model, &img, &prompt, max_len, DecodeMode::Greedy)?;
            println!("{}", vocab.decode(&ids));
        }
        Command::Generate {
            checkpoint,
            report,
            out,
            res,
            steps,
            seed,
        } => {
            let (params, model, _) = load_model(&checkpoint)?;
            let codec = Codec::load(&sibling(&checkpoint, "codec.ckpt"))?;
            let vocab = Vocabulary::standard();
            let cond = condition_states(&params, &model, &vocab, &report)?;
            let img = sample(&params, &model, &codec, &cond, res, steps, &mut ChaCha8Rng::seed_from_u64(seed))?;
            write_image(&out, &img)?;
            let sidecar = format!(
                "report={report}\nresolution={res}\nsteps={steps}\nseed={seed}\nparam_hash={}\ncodec_hash={}\n",
                param_hash(&params),
                codec.hash()
            );
            std::fs::write(out.with_extension("txt"), sidecar)?;
            println!("image={}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
