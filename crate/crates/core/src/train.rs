//! Deterministic single-process training loop over synthetic data.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::data::{augment_sample, generate_synthetic_sample, image_to_chw, TextInstance};
use crate::error::{Error, Result};
use crate::eval::{evaluate_samples, EvalOutcome};
use crate::geometry::rasterize_polygon;
use crate::mask_codec::{fit_basis, PcaBasis};
use crate::model::Model;
use crate::nn::ParamStore;

/// One training image kept in both forms: pixels for augmentation, tensor
/// for direct (non-augmented) passes.
pub struct TrainSample {
    pub image: RgbImage,
    pub tensor: Tensor,
    pub instances: Vec<TextInstance>,
}

/// Stop training early once both thresholds are met, checked every `every`
/// iterations on the training set.
#[derive(Debug, Clone, Copy)]
pub struct EarlyStop {
    pub every: usize,
    pub hmean: f64,
    pub word_accuracy: f64,
}

pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub iters_run: usize,
    pub outcome: EvalOutcome,
    /// Mean matched gIoU per refinement stage over the training set.
    pub stage_giou: Vec<f64>,
}

#[derive(Serialize)]
struct LogLine {
    iter: usize,
    lr: f64,
    cls: f64,
    l1: f64,
    giou: f64,
    mask_l2: f64,
    dice: f64,
    rec: f64,
    total: f64,
}

pub fn sample_seed(base: u64, index: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index)
}

pub fn to_tensor(img: &RgbImage, dev: &candle_core::Device) -> Result<Tensor> {
    let (chw, h, w) = image_to_chw(img);
    Ok(Tensor::from_vec(chw, (1, 3, h, w), dev)?)
}

/// Deterministic synthetic training set for a config.
pub fn synth_dataset(cfg: &RunConfig, dev: &candle_core::Device) -> Result<Vec<TrainSample>> {
    (0..cfg.train.num_images as u64)
        .map(|i| {
            let (image, instances) =
                generate_synthetic_sample(sample_seed(cfg.seed, i), &cfg.data)?;
            let tensor = to_tensor(&image, dev)?;
            Ok(TrainSample { image, tensor, instances })
        })
        .collect()
}

/// Fit the mask basis on the training set's ground-truth masks, topping up
/// with extra synthetic samples until `basis_samples` masks are collected.
pub fn fit_training_basis(cfg: &RunConfig, dataset: &[TrainSample]) -> Result<PcaBasis> {
    let (w, h) = (cfg.data.image_width as f64, cfg.data.image_height as f64);
    let mut masks = Vec::new();
    fn push_from(
        masks: &mut Vec<crate::geometry::BinaryMask>,
        instances: &[TextInstance],
        w: f64,
        h: f64,
    ) {
        for inst in instances.iter().filter(|i| i.care) {
            let b = inst.polygon.bbox_normalized(w, h);
            if !b.is_valid() {
                continue;
            }
            let m = rasterize_polygon(&inst.polygon, &b, w, h);
            if m.is_valid() {
                masks.push(m);
            }
        }
    }
    for s in dataset {
        push_from(&mut masks, &s.instances, w, h);
    }
    let mut extra = dataset.len() as u64;
    while masks.len() < cfg.train.basis_samples {
        let (_, instances) =
            generate_synthetic_sample(sample_seed(cfg.seed, extra), &cfg.data)?;
        push_from(&mut masks, &instances, w, h);
        extra += 1;
        if extra > dataset.len() as u64 + 10_000 {
            return Err(Error::Data(
                "could not collect enough masks for the basis".into(),
            ));
        }
    }
    masks.truncate(cfg.train.basis_samples);
    fit_basis(&masks, cfg.detector.n_pca)
}

fn eval_tuples(dataset: &[TrainSample]) -> Vec<(Tensor, Vec<TextInstance>)> {
    dataset
        .iter()
        .map(|s| (s.tensor.clone(), s.instances.clone()))
        .collect()
}

fn mean_stage_giou(model: &Model, dataset: &[TrainSample]) -> Result<Vec<f64>> {
    let k = model.cfg.detector.n_stages;
    let mut sums = vec![0.0; k];
    let mut n = 0usize;
    for s in dataset {
        let out = model.forward_train(&s.tensor, &s.instances)?;
        if out.n_matched == 0 {
            continue;
        }
        for (acc, v) in sums.iter_mut().zip(&out.stage_giou) {
            *acc += v;
        }
        n += 1;
    }
    if n > 0 {
        for v in &mut sums {
            *v /= n as f64;
        }
    }
    Ok(sums)
}

/// Train from scratch; writes periodic checkpoints, a JSONL loss log, and a
/// final checkpoint + evaluation on the training split.
pub fn train(cfg: &RunConfig, out_dir: &Path, early: Option<EarlyStop>) -> Result<TrainSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let dev = candle_core::Device::Cpu;
    let dataset = synth_dataset(cfg, &dev)?;
    if dataset.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let basis = fit_training_basis(cfg, &dataset)?;
    let mut ps = ParamStore::new(cfg.seed);
    let model = Model::new(&mut ps, cfg, basis)?;
    log::info!(
        "training {} parameters on {} images",
        ps.num_params(),
        dataset.len()
    );

    let mut opt = AdamW::new(
        ps.trainable_vars(),
        ParamsAdamW {
            lr: cfg.optimizer.lr,
            weight_decay: cfg.optimizer.weight_decay,
            ..ParamsAdamW::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_F00D);
    let log_path = out_dir.join("train_log.jsonl");
    let mut log_file = std::fs::File::create(&log_path)?;
    let mut last_good: Option<PathBuf> = None;
    let eval_set = eval_tuples(&dataset);

    let iters = cfg.optimizer.iters;
    let mut iters_run = 0;
    for iter in 0..iters {
        let lr = if cfg.optimizer.cosine_decay {
            cfg.optimizer.lr * 0.5 * (1.0 + (std::f64::consts::PI * iter as f64 / iters as f64).cos())
        } else {
            cfg.optimizer.lr
        };
        opt.set_learning_rate(lr);

        let mut batch_loss: Option<Tensor> = None;
        let mut line = LogLine {
            iter: iter + 1,
            lr,
            cls: 0.0,
            l1: 0.0,
            giou: 0.0,
            mask_l2: 0.0,
            dice: 0.0,
            rec: 0.0,
            total: 0.0,
        };
        for _ in 0..cfg.optimizer.batch_size {
            let s = &dataset[rng.gen_range(0..dataset.len())];
            let out = if cfg.train.augment {
                let (img, instances) = augment_sample(&mut rng, &s.image, &s.instances);
                model.forward_train(&to_tensor(&img, &dev)?, &instances)
            } else {
                model.forward_train(&s.tensor, &s.instances)
            };
            let out = out.map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!(
                    "iteration {}: {msg}; last good checkpoint: {}",
                    iter + 1,
                    last_good
                        .as_ref()
                        .map_or("none".into(), |p| p.display().to_string())
                )),
                other => other,
            })?;
            for bd in &out.stages {
                line.cls += bd.cls;
                line.l1 += bd.l1;
                line.giou += bd.giou;
                line.mask_l2 += bd.mask_l2;
                line.dice += bd.dice;
            }
            line.rec += out.rec_loss;
            line.total += out.total.to_scalar::<f32>()? as f64;
            batch_loss = Some(match batch_loss {
                Some(t) => (t + out.total)?,
                None => out.total,
            });
        }
        let nb = cfg.optimizer.batch_size as f64;
        for v in [
            &mut line.cls,
            &mut line.l1,
            &mut line.giou,
            &mut line.mask_l2,
            &mut line.dice,
            &mut line.rec,
            &mut line.total,
        ] {
            *v /= nb;
        }
        let loss = batch_loss.expect("batch_size > 0").affine(1.0 / nb, 0.0)?;
        opt.backward_step(&loss)?;
        iters_run = iter + 1;

        if !ps.all_finite()? {
            return Err(Error::Numeric(format!(
                "non-finite parameters after iteration {iters_run}; last good checkpoint: {}",
                last_good
                    .as_ref()
                    .map_or("none".into(), |p| p.display().to_string())
            )));
        }
        if iters_run % cfg.train.log_every == 0 || iters_run == iters {
            writeln!(log_file, "{}", serde_json::to_string(&line)?)?;
            log::info!(
                "iter {}/{} lr {:.2e} loss {:.4} (rec {:.4})",
                iters_run,
                iters,
                lr,
                line.total,
                line.rec
            );
        }
        if cfg.train.checkpoint_every > 0 && iters_run % cfg.train.checkpoint_every == 0 {
            let path = out_dir.join(format!("ckpt_{iters_run}.safetensors"));
            save_checkpoint(&path, &ps, cfg, &model.basis, iters_run)?;
            last_good = Some(path);
        }
        if let Some(es) = early {
            if es.every > 0 && iters_run % es.every == 0 {
                let outcome = evaluate_samples(&model, &eval_set)?;
                log::info!(
                    "iter {iters_run}: H = {:.3}, word acc = {:.3}",
                    outcome.report.detection.hmean,
                    outcome.word_accuracy
                );
                if outcome.report.detection.hmean >= es.hmean
                    && outcome.word_accuracy >= es.word_accuracy
                {
                    break;
                }
            }
        }
    }

    let final_path = out_dir.join("final.safetensors");
    save_checkpoint(&final_path, &ps, cfg, &model.basis, iters_run)?;
    let outcome = evaluate_samples(&model, &eval_set)?;
    let stage_giou = mean_stage_giou(&model, &dataset)?;
    Ok(TrainSummary {
        checkpoint: final_path,
        log: log_path,
        iters_run,
        outcome,
        stage_giou,
    })
}
