//! Command-line entry point: train / evaluate / infer / visualize / gen-data.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use textspot::checkpoint::load_checkpoint;
use textspot::config::RunConfig;
use textspot::data::{generate_synthetic_sample, load_dataset, save_dataset, TextInstance};
use textspot::error::{Error, Result};
use textspot::eval::{aggregate, dataset_lexicon};
use textspot::metrics::SpottingResult;
use textspot::model::Model;
use textspot::train::{to_tensor, train};
use textspot::viz::{attention_panel, draw_overlay};

/// Env var pointing at the directory dataset image paths are relative to.
const DATA_ROOT_ENV: &str = "TEXTSPOT_DATA_ROOT";

#[derive(Parser)]
#[command(name = "textspot", version, about = "End-to-end scene text spotter")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration JSON; defaults to the built-in toy profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in profile when no --config is given: "toy" or "full".
    #[arg(long, default_value = "toy")]
    profile: String,
    /// Override the config's RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's device (only "cpu" is supported).
    #[arg(long)]
    device: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => match self.profile.as_str() {
                "toy" => RunConfig::toy(),
                "full" => RunConfig::full(),
                other => {
                    return Err(Error::Config(format!(
                        "unknown profile {other:?}; expected \"toy\" or \"full\""
                    )))
                }
            },
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(device) = &self.device {
            cfg.device = device.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on synthetic data; writes checkpoints, a loss log, and a final
    /// metrics report into --out.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Score a checkpoint against an annotated dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset JSON; image paths resolve against $TEXTSPOT_DATA_ROOT or
        /// the dataset's own directory.
        #[arg(long)]
        dataset: PathBuf,
        /// Override the checkpoint config's score threshold.
        #[arg(long)]
        score_threshold: Option<f64>,
        /// Report JSON path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run inference on image files; emits predictions JSON.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Predictions JSON path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(required = false)]
        images: Vec<PathBuf>,
    },
    /// Draw prediction overlays; with --checkpoint, also per-step decoder
    /// attention panels.
    Visualize {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(required = false)]
        images: Vec<PathBuf>,
    },
    /// Generate a synthetic dataset (images + dataset.json) into --out.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "data/synth")]
        out: PathBuf,
        /// Number of images; defaults to the config's train.num_images.
        #[arg(long)]
        count: Option<usize>,
    },
}

#[derive(Serialize, Deserialize)]
struct PredRecord {
    image: String,
    results: Vec<SpottingResult>,
}

/// Dataset loading resolves image paths against the dataset's directory;
/// $TEXTSPOT_DATA_ROOT re-roots them somewhere else instead.
fn resolve_image_path(dataset: &Path, image: &Path) -> PathBuf {
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) => {
            let base = dataset.parent().unwrap_or(Path::new("."));
            PathBuf::from(root).join(image.strip_prefix(base).unwrap_or(image))
        }
        None => image.to_path_buf(),
    }
}

fn load_image_tensor(path: &Path) -> Result<candle_core::Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot read image {}: {e}", path.display())))?
        .to_rgb8();
    to_tensor(&img, &candle_core::Device::Cpu)
}

fn write_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => {
            if let Some(dir) = path.parent() {
                if !dir.as_os_str().is_empty() {
                    std::fs::create_dir_all(dir)?;
                }
            }
            std::fs::write(path, text)?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn run_train(config: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = config.resolve()?;
    let summary = train(&cfg, out, None)?;
    write_json(Some(&out.join("report.json")), &summary.outcome.report)?;
    log::info!(
        "finished {} iterations; H = {:.3}, word acc = {:.3}, checkpoint {}",
        summary.iters_run,
        summary.outcome.report.detection.hmean,
        summary.outcome.word_accuracy,
        summary.checkpoint.display()
    );
    Ok(())
}

fn run_evaluate(
    checkpoint: &Path,
    dataset: &Path,
    score_threshold: Option<f64>,
    out: Option<&Path>,
) -> Result<()> {
    let mut loaded = load_checkpoint(checkpoint)?;
    if let Some(thr) = score_threshold {
        loaded.model.cfg.score_threshold = thr;
    }
    let records = load_dataset(dataset)?;
    let mut samples: Vec<(candle_core::Tensor, Vec<TextInstance>)> = Vec::new();
    for rec in &records {
        let path = resolve_image_path(dataset, &rec.image);
        samples.push((load_image_tensor(&path)?, rec.instances.clone()));
    }
    let lexicon = dataset_lexicon(&samples);
    let mut per_image = Vec::with_capacity(samples.len());
    for (img, gts) in &samples {
        let preds: Vec<SpottingResult> = loaded
            .model
            .infer(img)?
            .into_iter()
            .map(|d| d.result)
            .collect();
        per_image.push((preds, gts.as_slice()));
    }
    let outcome = aggregate(&per_image, &lexicon)?;
    write_json(out, &outcome.report)
}

fn run_infer(checkpoint: &Path, images: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let loaded = load_checkpoint(checkpoint)?;
    let mut records = Vec::new();
    for path in images {
        let tensor = match load_image_tensor(path) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let results = loaded
            .model
            .infer(&tensor)?
            .into_iter()
            .map(|d| d.result)
            .collect();
        records.push(PredRecord { image: path.display().to_string(), results });
    }
    write_json(out, &records)
}

fn run_visualize(
    predictions: &Path,
    images: &[PathBuf],
    out: &Path,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let text = std::fs::read_to_string(predictions)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", predictions.display())))?;
    let records: Vec<PredRecord> = serde_json::from_str(&text)?;
    let model: Option<Model> = match checkpoint {
        Some(p) => Some(load_checkpoint(p)?.model),
        None => None,
    };
    std::fs::create_dir_all(out)?;
    for path in images {
        let Some(rec) = records
            .iter()
            .find(|r| Path::new(&r.image).file_name() == path.file_name())
        else {
            log::warn!("no predictions for {}; skipping", path.display());
            continue;
        };
        let img = match image::open(path) {
            Ok(i) => i.to_rgb8(),
            Err(e) => {
                log::warn!("cannot read {}: {e}; skipping", path.display());
                continue;
            }
        };
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        let overlay = draw_overlay(&img, &rec.results);
        overlay
            .save(out.join(format!("{stem}_overlay.png")))
            .map_err(|e| Error::Data(format!("cannot write overlay: {e}")))?;
        if let Some(model) = &model {
            let tensor = to_tensor(&img, &candle_core::Device::Cpu)?;
            for (i, det) in model.infer(&tensor)?.iter().enumerate() {
                if let Some(panel) = attention_panel(&det.attention)? {
                    panel
                        .save(out.join(format!("{stem}_attn_{i}.png")))
                        .map_err(|e| Error::Data(format!("cannot write panel: {e}")))?;
                }
            }
        }
    }
    Ok(())
}

fn run_gen_data(config: &ConfigArgs, out: &Path, count: Option<usize>) -> Result<()> {
    let cfg = config.resolve()?;
    let n = count.unwrap_or(cfg.train.num_images);
    std::fs::create_dir_all(out)?;
    let mut records = Vec::with_capacity(n);
    for i in 0..n as u64 {
        // same per-image seeds as the training loop, so a generated dataset
        // reproduces the training set of an equal config exactly
        let (img, instances) =
            generate_synthetic_sample(textspot::train::sample_seed(cfg.seed, i), &cfg.data)?;
        let name = format!("img_{i:05}.png");
        img.save(out.join(&name))
            .map_err(|e| Error::Data(format!("cannot write {name}: {e}")))?;
        records.push((name, instances));
    }
    save_dataset(&out.join("dataset.json"), &records)?;
    log::info!("wrote {n} images and dataset.json to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Train { config, out } => run_train(config, out),
        Cmd::Evaluate { checkpoint, dataset, score_threshold, out } => {
            run_evaluate(checkpoint, dataset, *score_threshold, out.as_deref())
        }
        Cmd::Infer { checkpoint, out, images } => {
            run_infer(checkpoint, images, out.as_deref())
        }
        Cmd::Visualize { predictions, out, checkpoint, images } => {
            run_visualize(predictions, images, out, checkpoint.as_deref())
        }
        Cmd::GenData { config, out, count } => run_gen_data(config, out, *count),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are success, anything else a usage error
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
