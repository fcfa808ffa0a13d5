//! Set-matching costs and the stage-wise detection / recognition losses.
//!
//! Matching runs on detached CPU values; the losses are built from f64
//! tensors so they agree with straightforward reference computations to
//! near machine precision while still backpropagating to the f32 model.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::TextInstance;
use crate::detector::StageOutput;
use crate::error::{Error, Result};
use crate::geometry::{self, rasterize_polygon, BBox};
use crate::mask_codec::PcaBasis;
use crate::matcher::Assignment;

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

/// Weights balancing the matching-cost / detection-loss terms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MatchWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub mask: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
            mask: 2.0,
        }
    }
}

impl MatchWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.cls, self.l1, self.giou, self.mask];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if ws.iter().all(|w| *w == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// Ground-truth side of matching/losses: axis-aligned boxes, PCA codes, and
/// rasterized 28x28 masks for each (cared-for) instance.
#[derive(Debug, Clone)]
pub struct GtTargets {
    pub boxes: Vec<BBox>,
    pub codes: Vec<Vec<f32>>,
    pub masks: Vec<Vec<f32>>,
}

impl GtTargets {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Precompute matching targets from instance polygons. Pass only instances
/// that should supervise the detector (care = true).
pub fn prepare_targets(
    instances: &[TextInstance],
    basis: &PcaBasis,
    img_w: usize,
    img_h: usize,
) -> Result<GtTargets> {
    let mut boxes = Vec::with_capacity(instances.len());
    let mut codes = Vec::with_capacity(instances.len());
    let mut masks = Vec::with_capacity(instances.len());
    for inst in instances {
        let b = inst.polygon.bbox_normalized(img_w as f64, img_h as f64);
        let mask = rasterize_polygon(&inst.polygon, &b, img_w as f64, img_h as f64);
        codes.push(basis.encode(&mask)?.coeffs);
        masks.push(mask.to_f32());
        boxes.push(b);
    }
    Ok(GtTargets { boxes, codes, masks })
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Binary focal loss on a single logit: -alpha_t (1 - p_t)^gamma log p_t.
pub fn focal_loss(logit: f64, target: bool, alpha: f64, gamma: f64) -> f64 {
    // stable: log sigmoid(x) = -softplus(-x), log(1 - sigmoid(x)) = -softplus(x)
    let p = 1.0 / (1.0 + (-logit).exp());
    let (p_t, log_p_t, alpha_t) = if target {
        (p, -softplus(-logit), alpha)
    } else {
        (1.0 - p, -softplus(logit), 1.0 - alpha)
    };
    -alpha_t * (1.0 - p_t).powf(gamma) * log_p_t
}

fn softplus_t(x: &Tensor) -> Result<Tensor> {
    let abs = x.abs()?;
    Ok((x.relu()? + ((abs.neg()?).exp()? + 1.0)?.log()?)?)
}

/// Element-wise focal loss over a vector of logits with 0/1 targets.
pub fn focal_loss_tensor(logits: &Tensor, targets: &Tensor, alpha: f64, gamma: f64) -> Result<Tensor> {
    let x = logits.to_dtype(DType::F64)?;
    let t = targets.to_dtype(DType::F64)?;
    let one_minus_t = (t.affine(-1.0, 1.0))?;
    let p = ((x.neg()?.exp()? + 1.0)?.recip())?;
    let p_t = ((&t * &p)? + (&one_minus_t * (p.affine(-1.0, 1.0))?)?)?;
    let log_p = softplus_t(&x.neg()?)?.neg()?;
    let log_1mp = softplus_t(&x)?.neg()?;
    let log_p_t = ((&t * &log_p)? + (&one_minus_t * &log_1mp)?)?;
    let alpha_t = (t.affine(2.0 * alpha - 1.0, 1.0 - alpha))?;
    let mod_factor = (p_t.affine(-1.0, 1.0))?.powf(gamma)?;
    Ok((alpha_t * mod_factor)?.mul(&log_p_t)?.neg()?)
}

fn cosine_similarity(a: &[f32], b: &[f32]) -> Option<f64> {
    let mut dot = 0f64;
    let mut na = 0f64;
    let mut nb = 0f64;
    for (x, y) in a.iter().zip(b) {
        dot += *x as f64 * *y as f64;
        na += (*x as f64).powi(2);
        nb += (*y as f64).powi(2);
    }
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na.sqrt() * nb.sqrt()))
    }
}

/// Pairwise matching cost between N proposals and M ground truths:
/// cls·focal(text) + l1·|box - box| + giou·(1 - gIoU) + mask·(1 - cos(codes)).
pub fn match_cost_matrix(
    preds: &StageOutput,
    tgt: &GtTargets,
    w: &MatchWeights,
) -> Result<Vec<Vec<f64>>> {
    if tgt.is_empty() {
        return Err(Error::Config("match_cost_matrix needs at least one gt".into()));
    }
    let boxes = preds.boxes_vec()?;
    let logits = preds.logits_vec()?;
    let codes = preds.codes_vec()?;
    let gt_codes: Vec<Vec<f32>> = tgt.codes.clone();
    let mut cost = vec![vec![0f64; tgt.len()]; boxes.len()];
    for i in 0..boxes.len() {
        let cls = focal_loss(logits[i], true, FOCAL_ALPHA, FOCAL_GAMMA);
        for j in 0..tgt.len() {
            let gb = &tgt.boxes[j];
            let l1 = (boxes[i].cx - gb.cx).abs()
                + (boxes[i].cy - gb.cy).abs()
                + (boxes[i].w - gb.w).abs()
                + (boxes[i].h - gb.h).abs();
            let g = geometry::giou(&boxes[i], gb)?;
            let cos_term = match cosine_similarity(&codes[i], &gt_codes[j]) {
                Some(c) => 1.0 - c,
                None => {
                    log::warn!("zero-norm mask code in matching (proposal {i} / gt {j}); using maximal cost");
                    1.0
                }
            };
            cost[i][j] = w.cls * cls + w.l1 * l1 + w.giou * g.mul_add(-1.0, 1.0) + w.mask * cos_term;
        }
    }
    Ok(cost)
}

/// Per-term values of one stage's detection loss, for logging.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub mask_l2: f64,
    pub dice: f64,
    pub total: f64,
}

/// gIoU for aligned pairs of (M, 4) cx,cy,w,h boxes; f64, differentiable.
pub fn giou_pairs(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let col = |t: &Tensor, i: usize| -> Result<Tensor> { Ok(t.narrow(1, i, 1)?.squeeze(1)?) };
    let corners = |t: &Tensor| -> Result<(Tensor, Tensor, Tensor, Tensor, Tensor)> {
        let (cx, cy, w, h) = (col(t, 0)?, col(t, 1)?, col(t, 2)?, col(t, 3)?);
        let hw = w.affine(0.5, 0.0)?;
        let hh = h.affine(0.5, 0.0)?;
        let area = (&w * &h)?;
        Ok(((&cx - &hw)?, (&cy - &hh)?, (&cx + &hw)?, (&cy + &hh)?, area))
    };
    let (ax0, ay0, ax1, ay1, aa) = corners(a)?;
    let (bx0, by0, bx1, by1, ab) = corners(b)?;
    let iw = (ax1.minimum(&bx1)? - ax0.maximum(&bx0)?)?.relu()?;
    let ih = (ay1.minimum(&by1)? - ay0.maximum(&by0)?)?.relu()?;
    let inter = (iw * ih)?;
    let union = ((&aa + &ab)? - &inter)?;
    let ew = (ax1.maximum(&bx1)? - ax0.minimum(&bx0)?)?;
    let eh = (ay1.maximum(&by1)? - ay0.minimum(&by0)?)?;
    let enc = (ew * eh)?;
    let iou = inter.div(&union)?;
    let penalty = ((&enc - &union)?).div(&enc)?;
    Ok((iou - penalty)?)
}

/// Soft dice distance 1 - 2<p,g> / (|p|^2 + |g|^2) per row of (M, D) masks;
/// exactly 0 for identical masks.
pub fn soft_dice(p: &Tensor, g: &Tensor) -> Result<Tensor> {
    let eps = 1e-12;
    let num = (p * g)?.sum(1)?.affine(2.0, eps)?;
    let den = ((p.sqr()?.sum(1)?) + (g.sqr()?.sum(1)?))?.affine(1.0, eps)?;
    Ok(num.div(&den)?.affine(-1.0, 1.0)?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// One stage's detection loss under a fixed assignment. Matched proposals
/// incur classification, box (L1 + gIoU) and mask (code L2 + soft dice)
/// terms; unmatched proposals incur background classification only.
pub fn detection_loss_stage(
    preds: &StageOutput,
    tgt: &GtTargets,
    assignment: &Assignment,
    w: &MatchWeights,
    basis: &PcaBasis,
) -> Result<(Tensor, LossBreakdown)> {
    let dev = preds.logits.device();
    let n = preds.n_proposals()?;
    let logits = preds.logits.to_dtype(DType::F64)?;
    let mut cls_target = vec![0f64; n];
    for &(pi, _) in &assignment.pairs {
        cls_target[pi] = 1.0;
    }
    let t = Tensor::from_vec(cls_target, n, dev)?;
    let cls = focal_loss_tensor(&logits, &t, FOCAL_ALPHA, FOCAL_GAMMA)?.mean(0)?;

    let m = assignment.pairs.len();
    if m == 0 {
        let total = cls.affine(w.cls, 0.0)?;
        let cls_v = scalar(&cls)?;
        let bd = LossBreakdown {
            cls: cls_v,
            l1: 0.0,
            giou: 0.0,
            mask_l2: 0.0,
            dice: 0.0,
            total: w.cls * cls_v,
        };
        return Ok((total.to_dtype(DType::F32)?, bd));
    }

    let prop_idx: Vec<u32> = assignment.pairs.iter().map(|&(pi, _)| pi as u32).collect();
    let idx = Tensor::from_vec(prop_idx, m, dev)?;
    let pb = preds.boxes.to_dtype(DType::F64)?.index_select(&idx, 0)?;
    let pc = preds.codes.to_dtype(DType::F64)?.index_select(&idx, 0)?;

    let mut gb_data = Vec::with_capacity(m * 4);
    let n_pca = basis.n_pca();
    let mut gc_data = Vec::with_capacity(m * n_pca);
    let mut gm_data = Vec::with_capacity(m * tgt.masks[0].len());
    for &(_, gi) in &assignment.pairs {
        let b = &tgt.boxes[gi];
        gb_data.extend_from_slice(&[b.cx, b.cy, b.w, b.h]);
        gc_data.extend(tgt.codes[gi].iter().map(|&v| v as f64));
        gm_data.extend(tgt.masks[gi].iter().map(|&v| v as f64));
    }
    let mask_dim = tgt.masks[0].len();
    let gb = Tensor::from_vec(gb_data, (m, 4), dev)?;
    let gc = Tensor::from_vec(gc_data, (m, n_pca), dev)?;
    let gm = Tensor::from_vec(gm_data, (m, mask_dim), dev)?;

    let l1 = (&pb - &gb)?.abs()?.sum(1)?.mean(0)?;
    let giou_term = giou_pairs(&pb, &gb)?.affine(-1.0, 1.0)?.mean(0)?;
    let l2 = (&pc - &gc)?.sqr()?.mean(1)?.mean(0)?;
    let comps = basis.components_tensor(dev)?.to_dtype(DType::F64)?;
    let mean = basis.mean_tensor(dev)?.to_dtype(DType::F64)?;
    let decoded = pc.matmul(&comps)?.broadcast_add(&mean)?.clamp(0.0, 1.0)?;
    let dice = soft_dice(&decoded, &gm)?.mean(0)?;

    let mask_term = (&l2 + &dice)?.affine(w.mask, 0.0)?;
    let total = (((cls.affine(w.cls, 0.0)? + l1.affine(w.l1, 0.0)?)?
        + giou_term.affine(w.giou, 0.0)?)?
        + mask_term)?;
    let bd = LossBreakdown {
        cls: scalar(&cls)?,
        l1: scalar(&l1)?,
        giou: scalar(&giou_term)?,
        mask_l2: scalar(&l2)?,
        dice: scalar(&dice)?,
        total: scalar(&total)?,
    };
    Ok((total.to_dtype(DType::F32)?, bd))
}

/// Sequence loss -(1/T) sum_t log p(y_t) over all T slots of a (T, V) logit
/// matrix; padding/EOS slots are supervised like any other class.
pub fn recognition_loss(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let (t_len, vocab) = logits.dims2()?;
    if targets.len() != t_len {
        return Err(Error::Config(format!(
            "recognition targets length {} != sequence length {t_len}",
            targets.len()
        )));
    }
    if let Some(bad) = targets.iter().find(|&&y| y as usize >= vocab) {
        return Err(Error::Config(format!(
            "target class {bad} out of vocabulary {vocab}"
        )));
    }
    let x = logits.to_dtype(DType::F64)?;
    let log_probs = candle_nn::ops::log_softmax(&x, 1)?;
    let idx = Tensor::from_vec(targets.to_vec(), (t_len, 1), logits.device())?;
    let picked = log_probs.gather(&idx, 1)?;
    Ok(picked.mean_all()?.neg()?.to_dtype(DType::F32)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dev() -> Device {
        Device::Cpu
    }

    fn naive_focal(logit: f64, target: bool, alpha: f64, gamma: f64) -> f64 {
        let p = 1.0 / (1.0 + (-logit).exp());
        let p_t = if target { p } else { 1.0 - p };
        let a_t = if target { alpha } else { 1.0 - alpha };
        -a_t * (1.0 - p_t).powf(gamma) * p_t.max(1e-300).ln()
    }

    #[test]
    fn focal_confident_correct_is_tiny() {
        assert!(focal_loss(12.0, true, FOCAL_ALPHA, FOCAL_GAMMA) < 1e-8);
        assert!(focal_loss(-12.0, false, FOCAL_ALPHA, FOCAL_GAMMA) < 1e-8);
    }

    #[test]
    fn focal_reduces_to_bce() {
        // gamma = 0, alpha = 1 at p = 0.5 is ln 2
        let v = focal_loss(0.0, true, 1.0, 0.0);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn focal_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let logit = rng.gen_range(-8.0..8.0);
            let target = rng.gen_bool(0.5);
            let got = focal_loss(logit, target, FOCAL_ALPHA, FOCAL_GAMMA);
            let want = naive_focal(logit, target, FOCAL_ALPHA, FOCAL_GAMMA);
            assert!((got - want).abs() < 1e-10, "{logit} {target}: {got} vs {want}");
        }
    }

    #[test]
    fn focal_tensor_matches_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let logits: Vec<f64> = (0..64).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let targets: Vec<f64> = (0..64).map(|_| f64::from(rng.gen_bool(0.5))).collect();
        let lt = Tensor::from_vec(logits.clone(), 64, &dev()).unwrap();
        let tt = Tensor::from_vec(targets.clone(), 64, &dev()).unwrap();
        let out = focal_loss_tensor(&lt, &tt, FOCAL_ALPHA, FOCAL_GAMMA)
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        for i in 0..64 {
            let want = focal_loss(logits[i], targets[i] > 0.5, FOCAL_ALPHA, FOCAL_GAMMA);
            assert!((out[i] - want).abs() < 1e-10);
        }
    }

    fn rand_basis(rng: &mut ChaCha8Rng, n_pca: usize) -> PcaBasis {
        // orthonormal-ish rows are not required for loss arithmetic tests
        let dim = crate::geometry::MASK_DIM;
        PcaBasis {
            mean: (0..dim).map(|_| rng.gen_range(0.0..0.3)).collect(),
            components: (0..n_pca)
                .map(|_| (0..dim).map(|_| rng.gen_range(-0.05..0.05)).collect())
                .collect(),
            explained_variance: vec![1.0; n_pca],
        }
    }

    fn rand_stage(rng: &mut ChaCha8Rng, n: usize, n_pca: usize) -> StageOutput {
        let boxes: Vec<f32> = (0..n)
            .flat_map(|_| {
                let w = rng.gen_range(0.05..0.4);
                let h = rng.gen_range(0.05..0.4);
                let cx = rng.gen_range(w / 2.0..1.0 - w / 2.0);
                let cy = rng.gen_range(h / 2.0..1.0 - h / 2.0);
                [cx, cy, w, h]
            })
            .collect();
        StageOutput {
            boxes: Tensor::from_vec(boxes, (n, 4), &dev()).unwrap(),
            logits: Tensor::from_vec(
                (0..n).map(|_| rng.gen_range(-3.0f32..3.0)).collect::<Vec<_>>(),
                n,
                &dev(),
            )
            .unwrap(),
            codes: Tensor::from_vec(
                (0..n * n_pca).map(|_| rng.gen_range(-1.0f32..1.0)).collect::<Vec<_>>(),
                (n, n_pca),
                &dev(),
            )
            .unwrap(),
            features: Tensor::zeros((n, 8), candle_core::DType::F32, &dev()).unwrap(),
        }
    }

    fn rand_targets(rng: &mut ChaCha8Rng, m: usize, n_pca: usize) -> GtTargets {
        let dim = crate::geometry::MASK_DIM;
        GtTargets {
            boxes: (0..m)
                .map(|_| {
                    let w = rng.gen_range(0.05..0.4);
                    let h = rng.gen_range(0.05..0.4);
                    BBox::new(
                        rng.gen_range(w / 2.0..1.0 - w / 2.0),
                        rng.gen_range(h / 2.0..1.0 - h / 2.0),
                        w,
                        h,
                    )
                })
                .collect(),
            codes: (0..m)
                .map(|_| (0..n_pca).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
            masks: (0..m)
                .map(|_| (0..dim).map(|_| f32::from(rng.gen_bool(0.3))).collect())
                .collect(),
        }
    }

    #[test]
    fn perfect_prediction_is_row_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let tgt = rand_targets(&mut rng, 3, 6);
        let mut preds = rand_stage(&mut rng, 5, 6);
        // make proposal 2 exactly equal gt 1 with a confident logit
        let mut boxes = preds.boxes.to_vec2::<f32>().unwrap();
        let g = &tgt.boxes[1];
        boxes[2] = vec![g.cx as f32, g.cy as f32, g.w as f32, g.h as f32];
        preds.boxes =
            Tensor::from_vec(boxes.concat(), (5, 4), &dev()).unwrap();
        let mut logits = preds.logits.to_vec1::<f32>().unwrap();
        logits[2] = 10.0;
        preds.logits = Tensor::from_vec(logits, 5, &dev()).unwrap();
        let mut codes = preds.codes.to_vec2::<f32>().unwrap();
        codes[2] = tgt.codes[1].clone();
        preds.codes = Tensor::from_vec(codes.concat(), (5, 6), &dev()).unwrap();

        let cost = match_cost_matrix(&preds, &tgt, &MatchWeights::default()).unwrap();
        let row = &cost[2];
        assert!(row.iter().enumerate().all(|(j, &c)| j == 1 || c > row[1]), "{row:?}");
    }

    #[test]
    fn duplicate_gts_give_equal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut tgt = rand_targets(&mut rng, 2, 6);
        tgt.boxes.push(tgt.boxes[0]);
        tgt.codes.push(tgt.codes[0].clone());
        tgt.masks.push(tgt.masks[0].clone());
        let preds = rand_stage(&mut rng, 4, 6);
        let cost = match_cost_matrix(&preds, &tgt, &MatchWeights::default()).unwrap();
        for row in &cost {
            assert!((row[0] - row[2]).abs() < 1e-12);
        }
    }

    #[test]
    fn cost_matrix_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let tgt = rand_targets(&mut rng, 3, 6);
        let preds = rand_stage(&mut rng, 5, 6);
        let w = MatchWeights::default();
        let cost = match_cost_matrix(&preds, &tgt, &w).unwrap();
        let boxes = preds.boxes_vec().unwrap();
        let logits = preds.logits_vec().unwrap();
        let codes = preds.codes_vec().unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let cls = naive_focal(logits[i], true, FOCAL_ALPHA, FOCAL_GAMMA);
                let (pb, gb) = (&boxes[i], &tgt.boxes[j]);
                let l1 = (pb.cx - gb.cx).abs()
                    + (pb.cy - gb.cy).abs()
                    + (pb.w - gb.w).abs()
                    + (pb.h - gb.h).abs();
                let g = crate::geometry::giou(pb, gb).unwrap();
                let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
                for (a, b) in codes[i].iter().zip(&tgt.codes[j]) {
                    dot += *a as f64 * *b as f64;
                    na += (*a as f64) * (*a as f64);
                    nb += (*b as f64) * (*b as f64);
                }
                let cos = dot / (na.sqrt() * nb.sqrt());
                let want = w.cls * cls + w.l1 * l1 + w.giou * (1.0 - g) + w.mask * (1.0 - cos);
                assert!((cost[i][j] - want).abs() < 1e-9, "({i},{j}): {} vs {want}", cost[i][j]);
            }
        }
    }

    #[test]
    fn giou_pairs_matches_scalar_giou() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let a = rand_targets(&mut rng, 8, 1);
        let b = rand_targets(&mut rng, 8, 1);
        let pack = |bs: &[BBox]| {
            let v: Vec<f64> = bs.iter().flat_map(|b| [b.cx, b.cy, b.w, b.h]).collect();
            Tensor::from_vec(v, (bs.len(), 4), &dev()).unwrap()
        };
        let out = giou_pairs(&pack(&a.boxes), &pack(&b.boxes))
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        for i in 0..8 {
            let want = crate::geometry::giou(&a.boxes[i], &b.boxes[i]).unwrap();
            assert!((out[i] - want).abs() < 1e-12, "{} vs {want}", out[i]);
        }
    }

    #[test]
    fn dice_of_identical_masks_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let data: Vec<f64> = (0..3 * 16).map(|_| rng.gen_range(0.0..1.0)).collect();
        let p = Tensor::from_vec(data, (3, 16), &dev()).unwrap();
        let d = soft_dice(&p, &p).unwrap().to_vec1::<f64>().unwrap();
        assert!(d.iter().all(|&v| v.abs() < 1e-12), "{d:?}");
    }

    fn naive_detection_loss(
        preds: &StageOutput,
        tgt: &GtTargets,
        assignment: &Assignment,
        w: &MatchWeights,
        basis: &PcaBasis,
    ) -> f64 {
        let logits = preds.logits_vec().unwrap();
        let boxes = preds.boxes_vec().unwrap();
        let codes = preds.codes_vec().unwrap();
        let matched: std::collections::HashMap<usize, usize> =
            assignment.pairs.iter().copied().collect();
        let n = logits.len();
        let mut cls = 0.0;
        for (i, &l) in logits.iter().enumerate() {
            cls += naive_focal(l, matched.contains_key(&i), FOCAL_ALPHA, FOCAL_GAMMA);
        }
        cls /= n as f64;
        let m = assignment.pairs.len();
        let (mut l1, mut gi, mut l2, mut dice) = (0.0, 0.0, 0.0, 0.0);
        for &(pi, gj) in &assignment.pairs {
            let (pb, gb) = (&boxes[pi], &tgt.boxes[gj]);
            l1 += (pb.cx - gb.cx).abs()
                + (pb.cy - gb.cy).abs()
                + (pb.w - gb.w).abs()
                + (pb.h - gb.h).abs();
            gi += 1.0 - crate::geometry::giou(pb, gb).unwrap();
            let code: Vec<f64> = codes[pi].iter().map(|&v| v as f64).collect();
            let gcode: Vec<f64> = tgt.codes[gj].iter().map(|&v| v as f64).collect();
            l2 += code
                .iter()
                .zip(&gcode)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / code.len() as f64;
            // decode + clamp + squared-denominator soft dice
            let mut soft: Vec<f64> = basis.mean.iter().map(|&v| v as f64).collect();
            for (row, &c) in basis.components.iter().zip(&codes[pi]) {
                for (o, r) in soft.iter_mut().zip(row) {
                    *o += c as f64 * *r as f64;
                }
            }
            for v in soft.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
            let g: Vec<f64> = tgt.masks[gj].iter().map(|&v| v as f64).collect();
            let num: f64 = soft.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() * 2.0 + 1e-12;
            let den: f64 =
                soft.iter().map(|a| a * a).sum::<f64>() + g.iter().map(|a| a * a).sum::<f64>() + 1e-12;
            dice += 1.0 - num / den;
        }
        if m > 0 {
            l1 /= m as f64;
            gi /= m as f64;
            l2 /= m as f64;
            dice /= m as f64;
        }
        w.cls * cls + w.l1 * l1 + w.giou * gi + w.mask * (l2 + dice)
    }

    #[test]
    fn detection_loss_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let basis = rand_basis(&mut rng, 6);
        let w = MatchWeights::default();
        for trial in 0..10 {
            let tgt = rand_targets(&mut rng, 3, 6);
            let preds = rand_stage(&mut rng, 5, 6);
            let cost = match_cost_matrix(&preds, &tgt, &w).unwrap();
            let assignment = crate::matcher::hungarian_assign(&cost).unwrap();
            let (total, bd) = detection_loss_stage(&preds, &tgt, &assignment, &w, &basis).unwrap();
            let want = naive_detection_loss(&preds, &tgt, &assignment, &w, &basis);
            let got = total.to_scalar::<f32>().unwrap() as f64;
            assert!((bd.total - want).abs() < 1e-9, "trial {trial}: {} vs {want}", bd.total);
            assert!((got - want).abs() < 1e-5);
            assert!(bd.total >= 0.0);
        }
    }

    #[test]
    fn perfect_matched_prediction_has_zero_box_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let basis = rand_basis(&mut rng, 6);
        let tgt = rand_targets(&mut rng, 2, 6);
        let boxes: Vec<f32> = tgt
            .boxes
            .iter()
            .flat_map(|b| [b.cx as f32, b.cy as f32, b.w as f32, b.h as f32])
            .collect();
        let preds = StageOutput {
            boxes: Tensor::from_vec(boxes, (2, 4), &dev()).unwrap(),
            logits: Tensor::from_vec(vec![14.0f32, 14.0], 2, &dev()).unwrap(),
            codes: Tensor::from_vec(tgt.codes.concat(), (2, 6), &dev()).unwrap(),
            features: Tensor::zeros((2, 4), candle_core::DType::F32, &dev()).unwrap(),
        };
        let assignment = Assignment { pairs: vec![(0, 0), (1, 1)] };
        let (_, bd) =
            detection_loss_stage(&preds, &tgt, &assignment, &MatchWeights::default(), &basis)
                .unwrap();
        // gt boxes are f64; predictions round through f32, so box terms are
        // only zero to f32 precision
        assert!(bd.l1.abs() < 1e-6 && bd.giou.abs() < 1e-6 && bd.mask_l2.abs() < 1e-9);
        assert!(bd.cls < 1e-5);
    }

    #[test]
    fn empty_gt_gives_background_only_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let basis = rand_basis(&mut rng, 6);
        let tgt = GtTargets { boxes: vec![], codes: vec![], masks: vec![] };
        let preds = rand_stage(&mut rng, 4, 6);
        let assignment = Assignment { pairs: vec![] };
        let (_, bd) =
            detection_loss_stage(&preds, &tgt, &assignment, &MatchWeights::default(), &basis)
                .unwrap();
        assert!(bd.l1 == 0.0 && bd.giou == 0.0 && bd.mask_l2 == 0.0 && bd.dice == 0.0);
        assert!(bd.cls > 0.0 && (bd.total - 2.0 * bd.cls).abs() < 1e-12);
    }

    #[test]
    fn detection_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let basis = rand_basis(&mut rng, 6);
        let w = MatchWeights::default();
        let tgt = rand_targets(&mut rng, 2, 6);
        let base = rand_stage(&mut rng, 3, 6);
        let assignment = Assignment { pairs: vec![(0, 1), (2, 0)] };

        let vb = Var::from_tensor(&base.boxes).unwrap();
        let vl = Var::from_tensor(&base.logits).unwrap();
        let vc = Var::from_tensor(&base.codes).unwrap();
        let preds = StageOutput {
            boxes: vb.as_tensor().clone(),
            logits: vl.as_tensor().clone(),
            codes: vc.as_tensor().clone(),
            features: base.features.clone(),
        };
        let (total, _) = detection_loss_stage(&preds, &tgt, &assignment, &w, &basis).unwrap();
        let grads = total.backward().unwrap();

        let eval = |boxes: &Tensor, logits: &Tensor, codes: &Tensor| -> f64 {
            let p = StageOutput {
                boxes: boxes.clone(),
                logits: logits.clone(),
                codes: codes.clone(),
                features: base.features.clone(),
            };
            detection_loss_stage(&p, &tgt, &assignment, &w, &basis).unwrap().1.total
        };

        let eps = 1e-3f32;
        let check = |var: &Var, shape_len: usize, name: &str| {
            let g = grads
                .get(var.as_tensor())
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap();
            let flat = var.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let mut rng2 = ChaCha8Rng::seed_from_u64(5);
            for _ in 0..6 {
                let k = rng2.gen_range(0..shape_len);
                let mut plus = flat.clone();
                plus[k] += eps;
                let mut minus = flat.clone();
                minus[k] -= eps;
                let mk = |v: Vec<f32>| {
                    Tensor::from_vec(v, var.dims().to_vec(), &dev()).unwrap()
                };
                let (bp, lp, cp) = match name {
                    "boxes" => (mk(plus), vl.as_tensor().clone(), vc.as_tensor().clone()),
                    "logits" => (vb.as_tensor().clone(), mk(plus), vc.as_tensor().clone()),
                    _ => (vb.as_tensor().clone(), vl.as_tensor().clone(), mk(plus)),
                };
                let (bm, lm, cm) = match name {
                    "boxes" => (mk(minus), vl.as_tensor().clone(), vc.as_tensor().clone()),
                    "logits" => (vb.as_tensor().clone(), mk(minus), vc.as_tensor().clone()),
                    _ => (vb.as_tensor().clone(), vl.as_tensor().clone(), mk(minus)),
                };
                let fd = (eval(&bp, &lp, &cp) - eval(&bm, &lm, &cm)) / (2.0 * eps as f64);
                let denom = fd.abs().max(g[k].abs() as f64).max(1e-4);
                let rel = (fd - g[k] as f64).abs() / denom;
                assert!(rel < 1e-3, "{name}[{k}]: fd {fd} vs analytic {}", g[k]);
            }
        };
        check(&vb, 12, "boxes");
        check(&vl, 3, "logits");
        check(&vc, 18, "codes");
    }

    #[test]
    fn recognition_loss_extremes() {
        // probability ~1 on every target -> ~0; uniform -> ln V
        let v = 7usize;
        let t = 5usize;
        let targets: Vec<u32> = vec![1, 3, 0, 6, 2];
        let mut confident = vec![0f32; t * v];
        for (step, &y) in targets.iter().enumerate() {
            confident[step * v + y as usize] = 40.0;
        }
        let lt = Tensor::from_vec(confident, (t, v), &dev()).unwrap();
        let loss = recognition_loss(&lt, &targets).unwrap().to_scalar::<f32>().unwrap();
        assert!(loss < 1e-6, "{loss}");

        let uniform = Tensor::zeros((t, v), candle_core::DType::F32, &dev()).unwrap();
        let loss = recognition_loss(&uniform, &targets).unwrap().to_scalar::<f32>().unwrap();
        assert!((loss as f64 - (v as f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn recognition_loss_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let (t, v) = (6usize, 9usize);
        for _ in 0..20 {
            let logits: Vec<f32> = (0..t * v).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let targets: Vec<u32> = (0..t).map(|_| rng.gen_range(0..v as u32)).collect();
            let lt = Tensor::from_vec(logits.clone(), (t, v), &dev()).unwrap();
            let got = recognition_loss(&lt, &targets).unwrap().to_scalar::<f32>().unwrap() as f64;
            let mut want = 0.0;
            for step in 0..t {
                let row = &logits[step * v..(step + 1) * v];
                let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                let z: f64 = row.iter().map(|&x| (x as f64 - mx).exp()).sum();
                let lp = row[targets[step] as usize] as f64 - mx - z.ln();
                want -= lp;
            }
            want /= t as f64;
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn weights_validation() {
        assert!(MatchWeights { cls: 0.0, l1: 0.0, giou: 0.0, mask: 0.0 }.validate().is_err());
        assert!(MatchWeights { cls: -1.0, ..Default::default() }.validate().is_err());
        assert!(MatchWeights::default().validate().is_ok());
    }
}
