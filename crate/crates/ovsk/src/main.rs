use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use ovsk::harness::{
    dataset, evaluate, gen_dataset, image_io, infer_image, load_model, train, Checkpoint, Dataset,
    DatasetSpec, EvalOptions, RunConfig, TEXT_EMBED_SEED,
};
use ovsk::inference::{write_metrics_csv, BalanceMode, ClassVocabulary, StreamSubset};
use ovsk::losses::SscPlacement;
use ovsk::Result;

#[derive(Parser)]
#[command(name = "ovsk", about = "Open-vocabulary segmentation kit: synthetic data, training, evaluation.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train/eval splits, vocab, meta).
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Total class count K.
        #[arg(long)]
        classes: usize,
        /// How many of the K classes appear in training images.
        #[arg(long = "train-classes")]
        train_classes: usize,
        /// Number of training images (eval split is derived).
        #[arg(long)]
        images: usize,
        /// Square canvas side length.
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        /// Text embedding width used for the palette.
        #[arg(long, default_value_t = 6)]
        embed_dim: usize,
    },
    /// Train a model and write a checkpoint plus a per-iteration loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path; the loss log lands at `<out>.loss.csv`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long = "ssc-placement")]
        ssc_placement: Option<String>,
        #[arg(long = "ssc-weight")]
        ssc_weight: Option<f64>,
    },
    /// Evaluate a checkpoint on a dataset's eval split; metrics CSV on stdout.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        /// arithmetic | geometric
        #[arg(long)]
        mode: Option<String>,
        /// Participating streams: a|b|d|ab|ad|bd|abd.
        #[arg(long)]
        embeddings: Option<String>,
        /// single | ensemble
        #[arg(long)]
        prompts: Option<String>,
    },
    /// Segment one image against a vocabulary file.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Label-map output (8-bit PGM, class index per pixel).
        #[arg(long)]
        out: PathBuf,
        /// Optional color overlay (PPM) of the predicted classes.
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
}

fn check_dataset_compat(cfg: &RunConfig, data: &Dataset) -> Result<()> {
    if cfg.image_size != data.image_size {
        return Err(ovsk::Error::Config(format!(
            "config image_size {} does not match dataset image_size {}",
            cfg.image_size, data.image_size
        )));
    }
    if cfg.embed_dim != data.embed_dim {
        return Err(ovsk::Error::Config(format!(
            "config embed_dim {} does not match dataset embed_dim {} (class colors are tied to it)",
            cfg.embed_dim, data.embed_dim
        )));
    }
    Ok(())
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { seed, out, classes, train_classes, images, image_size, embed_dim } => {
            let spec = DatasetSpec { seed, classes, train_classes, images, image_size, embed_dim };
            gen_dataset(&spec, &out)?;
            eprintln!(
                "wrote {} train / {} eval images to {}",
                spec.images,
                spec.eval_images(),
                out.display()
            );
        }
        Command::Train { config, data, out, iters, ssc_placement, ssc_weight } => {
            let mut cfg = RunConfig::from_file(&config)?;
            if let Some(n) = iters {
                cfg.iterations = n;
            }
            if let Some(p) = &ssc_placement {
                cfg.ssc_placement = SscPlacement::parse(p)?;
            }
            if let Some(w) = ssc_weight {
                cfg.ssc_weight = w;
            }
            let data = Dataset::load(&data)?;
            check_dataset_compat(&cfg, &data)?;
            let outcome = train(&cfg, &data)?;
            Checkpoint::from_model(&outcome.model, outcome.iterations as u64).write(&out)?;
            let log_path = out.with_file_name(format!(
                "{}.loss.csv",
                out.file_name().unwrap_or_default().to_string_lossy()
            ));
            std::fs::write(&log_path, &outcome.loss_log)?;
            eprintln!(
                "trained {} iterations; checkpoint {}, loss log {}",
                outcome.iterations,
                out.display(),
                log_path.display()
            );
        }
        Command::Eval { ckpt, data, alpha, beta, gamma, mode, embeddings, prompts } => {
            let (model, _) = load_model(&ckpt)?;
            let data = Dataset::load(&data)?;
            let mut opts = EvalOptions::from_config(&model.cfg);
            if let Some(v) = alpha {
                opts.weights.alpha = v;
            }
            if let Some(v) = beta {
                opts.weights.beta = v;
            }
            if let Some(v) = gamma {
                opts.weights.gamma = v;
            }
            if let Some(m) = &mode {
                opts.weights.mode = BalanceMode::parse(m)?;
            }
            if let Some(e) = &embeddings {
                opts.subset = StreamSubset::parse(e)?;
            }
            if let Some(p) = &prompts {
                opts.prompts = ovsk::harness::config::parse_prompt_strategy(p)?;
            }
            let (vocab, acc) = evaluate(&model, &data, &opts)?;
            let mut stdout = std::io::stdout().lock();
            write_metrics_csv(&mut stdout, &vocab, &acc)?;
            stdout.flush()?;
        }
        Command::Infer { ckpt, image, vocab, out, overlay } => {
            let (model, _) = load_model(&ckpt)?;
            let (names, flags) = dataset::parse_vocab(&std::fs::read_to_string(&vocab)?)?;
            let embeddings = model.text.class_embeddings(&names, model.cfg.prompts)?;
            let vocab = ClassVocabulary::new(names, embeddings, flags)?;
            if vocab.num_classes() > 255 {
                return Err(ovsk::Error::Vocabulary("PGM label maps support at most 255 classes".into()));
            }
            let image = Dataset::load_image_tensor(&image)?;
            let opts = EvalOptions::from_config(&model.cfg);
            let seg = infer_image(&model, &image, &vocab, &opts)?;
            let bytes: Vec<u8> = seg.label_map.iter().map(|&l| l as u8).collect();
            image_io::write_pgm(&out, seg.size.1, seg.size.0, &bytes)?;
            if let Some(path) = overlay {
                let colors = dataset::palette(TEXT_EMBED_SEED, &vocab.embeddings);
                let mut rgb = Vec::with_capacity(bytes.len() * 3);
                for &l in &seg.label_map {
                    rgb.extend_from_slice(&colors[l]);
                }
                image_io::write_ppm(&path, seg.size.1, seg.size.0, &rgb)?;
            }
            eprintln!("wrote label map {}", out.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
