use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::builder::TypedValueParser;
use clap::{Parser, Subcommand};

use mug::checkpoint::{load_checkpoint, save_checkpoint};
use mug::data::{self, label_from_caption, load_dataset, prepare_examples, read_image, SynthOptions};
use mug::eval::{self, FeatureSource, ProbeOptions};
use mug::model::{Model, ModelConfig};
use mug::objectives::conditional_entropy_bound;
use mug::text::Vocab;
use mug::trainer::{self, check_joint_gradients, JointCheckOptions, TrainConfig};
use mug::vision::patchify;

#[derive(Parser)]
#[command(name = "mug", version, about = "Joint masked-image and caption generative pre-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic shape corpus with captions.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 3, value_parser = clap::builder::PossibleValuesParser::new(["1", "3"]).map(|s| s.parse::<usize>().unwrap()))]
        channels: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// 1 renders single-object scenes only.
        #[arg(long = "max-objects", default_value_t = 2)]
        max_objects: usize,
    },
    /// Pre-train on a dataset directory and write a checkpoint.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long = "lambda-v")]
        lambda_v: Option<f64>,
        #[arg(long = "lambda-l")]
        lambda_l: Option<f64>,
        #[arg(long = "mask-ratio")]
        mask_ratio: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Linear probe on frozen features of a dataset.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "cls")]
        feature: FeatureSource,
    },
    /// Greedy caption for one image.
    Caption {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long = "mask-ratio", default_value_t = 0.0)]
        mask_ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Words to decode from after the start token.
        #[arg(long)]
        prompt: Option<String>,
    },
    /// Write masked, reconstructed and ground-truth images.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "mask-ratio", default_value_t = 0.75)]
        mask_ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Caption conditional-entropy bound in bits per token.
    Entropy {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of the joint loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
}

fn dataset_vocab(dir: &Path) -> Result<(Vec<data::ImageSample>, Vocab)> {
    let (samples, vocab) = load_dataset(dir)?;
    let vocab = match vocab {
        Some(v) => v,
        None => Vocab::build(samples.iter().map(|s| s.caption.as_str()))?,
    };
    Ok((samples, vocab))
}

fn load_model(path: &Path) -> Result<(Model<f32>, Vocab)> {
    let ck = load_checkpoint(path)?;
    let vocab = ck.require_vocab()?.clone();
    Ok((ck.model()?, vocab))
}

fn pretrain(
    data_dir: &Path,
    out: &Path,
    steps: usize,
    seed: u64,
    overrides: (Option<f64>, Option<f64>, Option<f64>),
    config_file: Option<&Path>,
    log: Option<&Path>,
) -> Result<()> {
    let (samples, vocab) = dataset_vocab(data_dir)?;
    let first = samples[0].pixels.shape().to_vec();
    let mut model_cfg = ModelConfig {
        channels: first[0],
        height: first[1],
        width: first[2],
        ..ModelConfig::tiny()
    };
    let mut train_cfg = TrainConfig::default();
    let mut explicit = Vec::new();
    if let Some(path) = config_file {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        explicit = trainer::parse_config_file(&text, &path.display().to_string(), &mut model_cfg, &mut train_cfg)?;
    }
    if !explicit.iter().any(|k| k == "vocab_size") {
        model_cfg.vocab_size = model_cfg.vocab_size.max(vocab.len());
    }
    train_cfg.total_steps = steps;
    train_cfg.seed = seed;
    let (lambda_v, lambda_l, mask_ratio) = overrides;
    if let Some(v) = lambda_v {
        train_cfg.lambda_v = v;
    }
    if let Some(v) = lambda_l {
        train_cfg.lambda_l = v;
    }
    if let Some(r) = mask_ratio {
        model_cfg.mask_ratio = r;
    }
    model_cfg.validate()?;
    train_cfg.validate()?;

    let examples = prepare_examples::<f32>(&samples, &vocab, &model_cfg, train_cfg.norm_pix)?;
    let model = Model::init(&model_cfg, seed)?;
    let mut log_file = match log {
        Some(p) => Some(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => None,
    };
    let mut log_err = None;
    let outcome = trainer::train(&train_cfg, &examples, model, |m| {
        if let Some(f) = log_file.as_mut() {
            if let Err(e) = writeln!(f, "{}", m.log_line()) {
                log_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = log_err {
        bail!("writing metrics log: {e}");
    }
    save_checkpoint(out, &outcome.model, Some(&vocab), Some(&outcome.optimizer))?;
    if let Some(last) = outcome.metrics.last() {
        println!(
            "step {} loss_V {:.6} loss_L {:.6} loss_joint {:.6}",
            last.step, last.report.loss_v, last.report.loss_l, last.report.loss_joint
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            count,
            seed,
            channels,
            noise,
            max_objects,
        } => {
            let opts = SynthOptions {
                channels,
                noise,
                max_objects,
                ..Default::default()
            };
            let manifest = data::generate_synthetic(count, seed, &out, &opts)?;
            println!("wrote {} samples to {}", manifest.records.len(), out.display());
        }
        Command::Pretrain {
            data,
            out,
            steps,
            seed,
            lambda_v,
            lambda_l,
            mask_ratio,
            config,
            log,
        } => pretrain(
            &data,
            &out,
            steps,
            seed,
            (lambda_v, lambda_l, mask_ratio),
            config.as_deref(),
            log.as_deref(),
        )?,
        Command::Probe {
            ckpt,
            data,
            seed,
            feature,
        } => {
            let (model, vocab) = load_model(&ckpt)?;
            let (samples, _) = load_dataset(&data)?;
            let labels = samples
                .iter()
                .map(|s| label_from_caption(&s.caption).with_context(|| format!("no shape word in caption of {}", s.id)))
                .collect::<Result<Vec<_>>>()?;
            let examples = prepare_examples::<f32>(&samples, &vocab, &model.config, false)?;
            let features = eval::extract_features(&model, &examples, feature)?;
            let r = eval::linear_probe(&features, &labels, seed, feature, &ProbeOptions::default())?;
            println!(
                "feature {} classes {} train_acc {:.4} test_acc {:.4}",
                r.source, r.classes, r.train_accuracy, r.test_accuracy
            );
        }
        Command::Caption {
            ckpt,
            image,
            mask_ratio,
            seed,
            prompt,
        } => {
            let (model, vocab) = load_model(&ckpt)?;
            let pixels = read_image(&image)?;
            let patches = patchify(&pixels, model.config.patch_size)?.patches;
            let max_len = model.config.max_caption_len;
            println!(
                "{}",
                eval::greedy_caption(&model, &vocab, &patches, mask_ratio, seed, max_len, prompt.as_deref())?
            );
        }
        Command::Reconstruct {
            ckpt,
            image,
            out,
            mask_ratio,
            seed,
        } => {
            let (model, _) = load_model(&ckpt)?;
            let pixels = read_image(&image)?;
            let (r, paths) = eval::reconstruct_dump(&model, &pixels, mask_ratio, seed, &out)?;
            for p in &paths {
                println!("wrote {}", p.display());
            }
            if let Some(mse) = r.masked_mse {
                println!("masked_mse {mse:.6}");
            }
        }
        Command::Entropy { ckpt, data, seed } => {
            let (model, vocab) = load_model(&ckpt)?;
            let (samples, _) = load_dataset(&data)?;
            let examples = prepare_examples::<f32>(&samples, &vocab, &model.config, false)?;
            let bits = conditional_entropy_bound(&model, &examples, seed)?;
            println!("{bits:.6} bits/token");
        }
        Command::Gradcheck { eps } => {
            let report = check_joint_gradients(&JointCheckOptions {
                eps,
                ..Default::default()
            })?;
            let (name, idx) = report.worst.clone().unwrap_or_default();
            println!(
                "max_relative_error {:.3e} over {} entries (worst {name}[{idx}])",
                report.max_relative_error, report.entries_checked
            );
            if !(report.max_relative_error < 1e-4) {
                bail!("gradient check failed: {:.3e} ≥ 1e-4", report.max_relative_error);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
