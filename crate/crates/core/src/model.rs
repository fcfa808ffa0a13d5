//! Full spotter: backbone pyramid, iterative proposal refinement, feature
//! conversion and sequence recognition, wired for joint training.

use candle_core::Tensor;

use crate::backbone::Backbone;
use crate::config::RunConfig;
use crate::data::TextInstance;
use crate::detector::{Detector, StageOutput};
use crate::error::{Error, Result};
use crate::geometry::{giou, BBox, Polygon};
use crate::losses::{
    detection_loss_stage, match_cost_matrix, prepare_targets, recognition_loss, GtTargets,
    LossBreakdown,
};
use crate::mask_codec::{MaskCode, PcaBasis};
use crate::matcher::{hungarian_assign, Assignment};
use crate::metrics::SpottingResult;
use crate::nn::ParamStore;
use crate::rc::{extract_rec_pyramid, RcMode, RecognitionConversion};
use crate::recognizer::{Charset, DecodeMode, Recognizer};

/// Everything the training loop and diagnostics need from one forward pass.
pub struct TrainOutput {
    /// Scalar joint loss, differentiable w.r.t. all parameters.
    pub total: Tensor,
    pub stages: Vec<LossBreakdown>,
    /// Scalar recognition term (zero tensor when nothing matched).
    pub rec_total: Tensor,
    pub rec_loss: f64,
    /// Mean matched gIoU per refinement stage.
    pub stage_giou: Vec<f64>,
    pub n_matched: usize,
}

pub struct Detection {
    pub result: SpottingResult,
    pub bbox: BBox,
    /// One (28, 28) spatial attention map per decoded step.
    pub attention: Vec<Tensor>,
}

pub struct Model {
    pub backbone: Backbone,
    pub detector: Detector,
    pub rc: RecognitionConversion,
    pub recognizer: Recognizer,
    pub basis: PcaBasis,
    pub cfg: RunConfig,
}

impl Model {
    pub fn new(ps: &mut ParamStore, cfg: &RunConfig, basis: PcaBasis) -> Result<Self> {
        cfg.validate()?;
        if basis.n_pca() != cfg.detector.n_pca {
            return Err(Error::Config(format!(
                "mask basis has {} components, detector expects {}",
                basis.n_pca(),
                cfg.detector.n_pca
            )));
        }
        let d = cfg.detector.d_model;
        let charset = Charset::new(&cfg.recognizer.alphabet)?;
        Ok(Self {
            backbone: Backbone::new(ps, &cfg.backbone)?,
            detector: Detector::new(ps, &cfg.detector, d)?,
            rc: RecognitionConversion::new(ps, "rc", d, d)?,
            recognizer: Recognizer::new(ps, "rec", d, charset, cfg.recognizer.t_max)?,
            basis,
            cfg: cfg.clone(),
        })
    }

    fn rc_mode(&self) -> RcMode {
        if !self.cfg.rc.enabled {
            RcMode::Disabled
        } else if self.cfg.rc.stop_gradient {
            RcMode::StopGradient
        } else {
            RcMode::Full
        }
    }

    fn match_stage(&self, stage: &StageOutput, tgt: &GtTargets) -> Result<Assignment> {
        if tgt.is_empty() {
            return Ok(Assignment { pairs: vec![] });
        }
        let cost = match_cost_matrix(stage, tgt, &self.cfg.loss)?;
        hungarian_assign(&cost)
    }

    fn mean_matched_giou(stage: &StageOutput, tgt: &GtTargets, a: &Assignment) -> Result<f64> {
        if a.pairs.is_empty() {
            return Ok(0.0);
        }
        let boxes = stage.boxes_vec()?;
        let mut sum = 0.0;
        for &(pi, gi) in &a.pairs {
            sum += giou(&boxes[pi], &tgt.boxes[gi])?;
        }
        Ok(sum / a.pairs.len() as f64)
    }

    /// Joint loss over all refinement stages plus recognition on the
    /// final-stage matched proposals (teacher-forced).
    pub fn forward_train(&self, image: &Tensor, instances: &[TextInstance]) -> Result<TrainOutput> {
        let (_, _, img_h, img_w) = image.dims4()?;
        let care: Vec<TextInstance> =
            instances.iter().filter(|i| i.care).cloned().collect();
        let tgt = prepare_targets(&care, &self.basis, img_w, img_h)?;

        let pyramid = self.backbone.forward(image)?;
        let stage_outs = self.detector.forward(&pyramid)?;

        let mut total: Option<Tensor> = None;
        let mut stages = Vec::with_capacity(stage_outs.len());
        let mut stage_giou = Vec::with_capacity(stage_outs.len());
        let mut last_assignment = Assignment { pairs: vec![] };
        for stage in &stage_outs {
            let a = self.match_stage(stage, &tgt)?;
            let (loss, bd) = detection_loss_stage(stage, &tgt, &a, &self.cfg.loss, &self.basis)?;
            stage_giou.push(Self::mean_matched_giou(stage, &tgt, &a)?);
            stages.push(bd);
            total = Some(match total {
                Some(t) => (t + loss)?,
                None => loss,
            });
            last_assignment = a;
        }
        let last = stage_outs.last().ok_or_else(|| {
            Error::Config("detector produced no stages".into())
        })?;

        let mode = self.rc_mode();
        let boxes = last.boxes_vec()?;
        let mut rec_sum: Option<Tensor> = None;
        for &(pi, gi) in &last_assignment.pairs {
            let a = extract_rec_pyramid(&pyramid, &boxes[pi])?;
            let prop = last.features.narrow(0, pi, 1)?.squeeze(0)?;
            let rc_out = self.rc.forward(&a, &prop, mode)?;
            let enc = self.recognizer.encode(&rc_out.rs[2])?;
            let targets = self
                .recognizer
                .charset
                .targets(&care[gi].text, self.cfg.recognizer.t_max);
            let pred = self.recognizer.recognize(&enc, DecodeMode::TeacherForced(&targets))?;
            let loss = recognition_loss(&pred.logits, &targets)?;
            rec_sum = Some(match rec_sum {
                Some(t) => (t + loss)?,
                None => loss,
            });
        }
        let n_matched = last_assignment.pairs.len();
        let rec_total = match rec_sum {
            Some(t) => t.affine(1.0 / n_matched as f64, 0.0)?,
            None => Tensor::zeros((), candle_core::DType::F32, image.device())?,
        };
        let rec_loss = rec_total.to_scalar::<f32>()? as f64;
        let total = (total.expect("at least one stage") + &rec_total)?;
        let t_val = total.to_scalar::<f32>()?;
        if !t_val.is_finite() {
            return Err(Error::Numeric(format!("non-finite joint loss {t_val}")));
        }
        Ok(TrainOutput {
            total,
            stages,
            rec_total,
            rec_loss,
            stage_giou,
            n_matched,
        })
    }

    /// Thresholded detections with decoded polygons and greedy transcriptions.
    pub fn infer(&self, image: &Tensor) -> Result<Vec<Detection>> {
        let (_, _, img_h, img_w) = image.dims4()?;
        let (img_w, img_h) = (img_w as f64, img_h as f64);
        let pyramid = self.backbone.forward(image)?;
        let stage_outs = self.detector.forward(&pyramid)?;
        let last = stage_outs.last().ok_or_else(|| {
            Error::Config("detector produced no stages".into())
        })?;

        let logits = last.logits_vec()?;
        let boxes = last.boxes_vec()?;
        let codes = last.codes_vec()?;
        let mode = self.rc_mode();
        let mut out = Vec::new();
        for (i, &logit) in logits.iter().enumerate() {
            let score = 1.0 / (1.0 + (-logit).exp());
            if score < self.cfg.score_threshold {
                continue;
            }
            let b = &boxes[i];
            let mask = self
                .basis
                .decode_binary(&MaskCode { coeffs: codes[i].clone() }, self.cfg.mask_threshold)?;
            let polygon = mask
                .to_polygon(b, img_w, img_h)
                .unwrap_or_else(|| box_polygon(b, img_w, img_h));

            let a = extract_rec_pyramid(&pyramid, b)?;
            let prop = last.features.narrow(0, i, 1)?.squeeze(0)?;
            let rc_out = self.rc.forward(&a, &prop, mode)?;
            let enc = self.recognizer.encode(&rc_out.rs[2])?;
            let pred = self.recognizer.recognize(&enc, DecodeMode::Greedy)?;
            out.push(Detection {
                result: SpottingResult {
                    polygon,
                    text: pred.text.clone(),
                    confidence: score,
                },
                bbox: *b,
                attention: pred.attn,
            });
        }
        Ok(out)
    }
}

/// Axis-aligned rectangle of a normalized box, in image pixels.
pub fn box_polygon(b: &BBox, img_w: f64, img_h: f64) -> Polygon {
    let (x0, y0, x1, y1) = b.corners();
    Polygon::new(vec![
        [x0 * img_w, y0 * img_h],
        [x1 * img_w, y0 * img_h],
        [x1 * img_w, y1 * img_h],
        [x0 * img_w, y1 * img_h],
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::data::{generate_synthetic_sample, image_to_chw, GenProfile};
    use crate::detector::DetectorConfig;
    use crate::geometry::{rasterize_polygon, BinaryMask, MASK_SIZE};
    use crate::mask_codec::fit_basis;
    use candle_core::Device;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::toy();
        cfg.backbone = BackboneConfig {
            embed_dim: 8,
            depths: [1, 1, 1, 1],
            heads: [1, 1, 1, 1],
            d_model: 32,
            ..BackboneConfig::default()
        };
        cfg.detector = DetectorConfig {
            n_proposals: 4,
            d_model: 32,
            n_stages: 2,
            d_dyn: 8,
            n_heads: 2,
            n_pca: 6,
        };
        cfg.recognizer.t_max = 4;
        cfg.recognizer.alphabet = "ab".into();
        cfg.train.basis_samples = 12;
        cfg
    }

    fn tiny_basis() -> PcaBasis {
        // rectangles of varying extents give a small but non-trivial basis
        let mut masks = Vec::new();
        for i in 0..12usize {
            let mut m = BinaryMask::zeros();
            let r0 = i % 4;
            let c0 = (i * 3) % 7;
            for r in r0..(r0 + 12 + i) {
                for c in c0..(c0 + 14 + i) {
                    if r < MASK_SIZE && c < MASK_SIZE {
                        m.data[r * MASK_SIZE + c] = 1;
                    }
                }
            }
            masks.push(m);
        }
        fit_basis(&masks, 6).unwrap()
    }

    fn sample_image() -> (Tensor, Vec<TextInstance>) {
        let profile = GenProfile { image_width: 64, image_height: 64, ..GenProfile::toy() };
        let (img, instances) = generate_synthetic_sample(3, &profile).unwrap();
        let (chw, w, h) = image_to_chw(&img);
        let t = Tensor::from_vec(chw, (1, 3, h, w), &Device::Cpu).unwrap();
        (t, instances)
    }

    fn build(cfg: &RunConfig, seed: u64) -> (ParamStore, Model) {
        let mut ps = ParamStore::new(seed);
        let model = Model::new(&mut ps, cfg, tiny_basis()).unwrap();
        (ps, model)
    }

    #[test]
    fn train_forward_shapes_and_finiteness() {
        let cfg = tiny_cfg();
        let (_ps, model) = build(&cfg, 0);
        let (img, instances) = sample_image();
        let out = model.forward_train(&img, &instances).unwrap();
        assert_eq!(out.stages.len(), 2);
        assert_eq!(out.stage_giou.len(), 2);
        assert!(out.n_matched > 0);
        assert!(out.rec_loss.is_finite() && out.rec_loss > 0.0);
        for bd in &out.stages {
            assert!(bd.total.is_finite());
        }
        let t = out.total.to_scalar::<f32>().unwrap();
        assert!(t.is_finite() && t > 0.0);
    }

    #[test]
    fn joint_loss_reaches_backbone_parameters() {
        let cfg = tiny_cfg();
        let (ps, model) = build(&cfg, 1);
        let (img, instances) = sample_image();
        let out = model.forward_train(&img, &instances).unwrap();
        let grads = out.total.backward().unwrap();
        let mut touched = 0;
        for name in ps.var_names() {
            let v = ps.var_ref(&name).unwrap();
            if grads.get(v.as_tensor()).is_some() {
                touched += 1;
            }
        }
        // most parameters participate; at minimum the embedding conv does
        assert!(touched > ps.var_names().len() / 2, "only {touched} vars got gradients");
    }

    // recognition gradient reaching the detector parameters (boxes are
    // detached at RoI sampling, so the only route is the proposal features)
    fn rec_grad_on_detector(cfg: &RunConfig, seed: u64) -> f64 {
        let (img, instances) = sample_image();
        let (ps, model) = build(cfg, seed);
        let out = model.forward_train(&img, &instances).unwrap();
        assert!(out.n_matched > 0);
        let grads = out.rec_total.backward().unwrap();
        let mut norm = 0.0;
        for name in ps.var_names() {
            if !name.starts_with("detector.") {
                continue;
            }
            let v = ps.var_ref(&name).unwrap();
            if let Some(g) = grads.get(v.as_tensor()) {
                norm += crate::detector::grad_norm(g).unwrap().powi(2);
            }
        }
        norm.sqrt()
    }

    #[test]
    fn stop_gradient_cuts_recognition_flow_to_proposals() {
        let mut cfg = tiny_cfg();
        cfg.rc.stop_gradient = true;
        assert_eq!(rec_grad_on_detector(&cfg, 2), 0.0);
        cfg.rc.stop_gradient = false;
        assert!(rec_grad_on_detector(&cfg, 2) > 0.0);
    }

    #[test]
    fn no_text_image_trains_on_background_only() {
        let cfg = tiny_cfg();
        let (_ps, model) = build(&cfg, 3);
        let img = Tensor::zeros((1, 3, 64, 64), candle_core::DType::F32, &Device::Cpu).unwrap();
        let out = model.forward_train(&img, &[]).unwrap();
        assert_eq!(out.n_matched, 0);
        assert_eq!(out.rec_loss, 0.0);
        assert!(out.total.to_scalar::<f32>().unwrap() > 0.0);
        for bd in &out.stages {
            assert_eq!(bd.l1, 0.0);
        }
    }

    #[test]
    fn inference_respects_score_threshold() {
        let mut cfg = tiny_cfg();
        cfg.score_threshold = 1.01; // unreachable: sigmoid < 1
        let (_ps, model) = build(&cfg, 4);
        let (img, _) = sample_image();
        assert!(model.infer(&img).unwrap().is_empty());

        cfg.score_threshold = 0.0; // everything passes
        let (_ps, model) = build(&cfg, 4);
        let dets = model.infer(&img).unwrap();
        assert_eq!(dets.len(), cfg.detector.n_proposals);
        for d in &dets {
            assert!(d.result.polygon.is_valid());
            assert!(d.result.text.chars().all(|c| "ab".contains(c)));
            assert!(d.result.confidence >= 0.0 && d.result.confidence <= 1.0);
            // decoded polygon rasterizes back into its own box
            let b = &d.bbox;
            let m = rasterize_polygon(&d.result.polygon, b, 64.0, 64.0);
            assert!(m.is_valid());
        }
    }

    #[test]
    fn same_seed_same_losses() {
        let cfg = tiny_cfg();
        let (img, instances) = sample_image();
        let (_p1, m1) = build(&cfg, 9);
        let (_p2, m2) = build(&cfg, 9);
        let a = m1.forward_train(&img, &instances).unwrap();
        let b = m2.forward_train(&img, &instances).unwrap();
        let ta = a.total.to_scalar::<f32>().unwrap();
        let tb = b.total.to_scalar::<f32>().unwrap();
        assert_eq!(ta, tb);
    }
}
