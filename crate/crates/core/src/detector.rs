//! Query-based detector: N learnable proposals refined over K stages of
//! RoI-conditioned dynamic heads.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::global_avg_pool;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::{Init, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamStore};
use crate::roi::{roi_extract, FeaturePyramid};

pub const ROI_DET: usize = 7;
const MIN_SIZE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub n_proposals: usize,
    pub d_model: usize,
    pub n_stages: usize,
    pub d_dyn: usize,
    pub n_heads: usize,
    pub n_pca: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            n_proposals: 100,
            d_model: 256,
            n_stages: 6,
            d_dyn: 64,
            n_heads: 8,
            n_pca: crate::mask_codec::DEFAULT_N_PCA,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_stages == 0 || self.n_proposals == 0 {
            return Err(Error::Config(
                "detector needs at least one stage and one proposal".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Proposal boxes and features entering a refinement stage.
#[derive(Debug, Clone)]
pub struct ProposalState {
    /// (N, 4) normalized cx,cy,w,h
    pub boxes: Tensor,
    /// (N, d)
    pub features: Tensor,
    pub stage: usize,
}

/// One refinement stage's predictions, all N-aligned.
#[derive(Debug, Clone)]
pub struct StageOutput {
    /// (N, 4) normalized cx,cy,w,h
    pub boxes: Tensor,
    /// (N,) text-vs-background logits
    pub logits: Tensor,
    /// (N, n_pca) mask codes
    pub codes: Tensor,
    /// (N, d) proposal features fed to the next stage
    pub features: Tensor,
}

impl StageOutput {
    pub fn n_proposals(&self) -> Result<usize> {
        Ok(self.logits.dim(0)?)
    }

    pub fn boxes_vec(&self) -> Result<Vec<BBox>> {
        let rows = self.boxes.to_vec2::<f32>()?;
        Ok(rows
            .iter()
            .map(|r| BBox::new(r[0] as f64, r[1] as f64, r[2] as f64, r[3] as f64))
            .collect())
    }

    pub fn logits_vec(&self) -> Result<Vec<f64>> {
        Ok(self
            .logits
            .to_vec1::<f32>()?
            .iter()
            .map(|&v| v as f64)
            .collect())
    }

    pub fn codes_vec(&self) -> Result<Vec<Vec<f32>>> {
        Ok(self.codes.to_vec2::<f32>()?)
    }
}

/// Differentiable center-offset / log-size box update with the same unit
/// clipping as the scalar geometry version. boxes, deltas: (N, 4).
pub fn apply_box_deltas_tensor(boxes: &Tensor, deltas: &Tensor) -> Result<Tensor> {
    let col = |t: &Tensor, i: usize| -> Result<Tensor> { Ok(t.narrow(1, i, 1)?) };
    let (bcx, bcy, bw, bh) = (col(boxes, 0)?, col(boxes, 1)?, col(boxes, 2)?, col(boxes, 3)?);
    let (dx, dy, dw, dh) = (col(deltas, 0)?, col(deltas, 1)?, col(deltas, 2)?, col(deltas, 3)?);
    let cx = (&bcx + (dx * &bw)?)?;
    let cy = (&bcy + (dy * &bh)?)?;
    let w = (&bw * dw.exp()?)?;
    let h = (&bh * dh.exp()?)?;
    let x0 = (&cx - w.affine(0.5, 0.0)?)?.clamp(0.0, 1.0 - MIN_SIZE)?;
    let y0 = (&cy - h.affine(0.5, 0.0)?)?.clamp(0.0, 1.0 - MIN_SIZE)?;
    let x1 = (&cx + w.affine(0.5, 0.0)?)?
        .maximum(&x0.affine(1.0, MIN_SIZE)?)?
        .minimum(1.0)?;
    let y1 = (&cy + h.affine(0.5, 0.0)?)?
        .maximum(&y0.affine(1.0, MIN_SIZE)?)?
        .minimum(1.0)?;
    let ocx = ((&x0 + &x1)?.affine(0.5, 0.0))?;
    let ocy = ((&y0 + &y1)?.affine(0.5, 0.0))?;
    let ow = (&x1 - &x0)?;
    let oh = (&y1 - &y0)?;
    Ok(Tensor::cat(&[ocx, ocy, ow, oh], 1)?)
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    let m = t.abs()?.max_all()?.to_scalar::<f32>()?;
    if !m.is_finite() {
        return Err(Error::Numeric(format!("non-finite activations in {what}")));
    }
    Ok(())
}

/// Extract 7x7 RoI features for every proposal box; (N, 49, C) tokens.
/// Sampling uses the detached box values, so box gradients come only from
/// the box losses.
fn roi_tokens(pyramid: &FeaturePyramid, boxes: &Tensor, out: usize) -> Result<Tensor> {
    let rows = boxes.detach().to_vec2::<f32>()?;
    let mut feats = Vec::with_capacity(rows.len());
    for r in rows {
        let b = BBox::new(r[0] as f64, r[1] as f64, r[2] as f64, r[3] as f64);
        feats.push(roi_extract(pyramid, &b, out, out)?);
    }
    let stacked = Tensor::stack(&feats, 0)?; // (N, C, out, out)
    let (n, c, _, _) = stacked.dims4()?;
    Ok(stacked
        .reshape((n, c, out * out))?
        .permute((0, 2, 1))?
        .contiguous()?)
}

/// One refinement stage: proposal self-attention, per-proposal dynamic
/// pointwise convs over the RoI tokens, and the three prediction heads.
pub struct DetectorStage {
    msa: MultiHeadAttention,
    ln_msa: LayerNorm,
    param_gen: Linear,
    ln_dyn1: LayerNorm,
    ln_dyn2: LayerNorm,
    out_proj: Linear,
    ln_out: LayerNorm,
    ffn: Mlp,
    ln_ffn: LayerNorm,
    box_head1: Linear,
    box_head2: Linear,
    box_head3: Linear,
    cls_head: Linear,
    code_head: Linear,
    d: usize,
    d_dyn: usize,
}

impl DetectorStage {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &DetectorConfig) -> Result<Self> {
        let (d, d_dyn) = (cfg.d_model, cfg.d_dyn);
        Ok(Self {
            msa: MultiHeadAttention::new(ps, &format!("{name}.msa"), d, cfg.n_heads)?,
            ln_msa: LayerNorm::new(ps, &format!("{name}.ln_msa"), d)?,
            param_gen: Linear::new(ps, &format!("{name}.param_gen"), d, 2 * d * d_dyn)?,
            ln_dyn1: LayerNorm::new(ps, &format!("{name}.ln_dyn1"), d_dyn)?,
            ln_dyn2: LayerNorm::new(ps, &format!("{name}.ln_dyn2"), d)?,
            out_proj: Linear::new(ps, &format!("{name}.out_proj"), ROI_DET * ROI_DET * d, d)?,
            ln_out: LayerNorm::new(ps, &format!("{name}.ln_out"), d)?,
            ffn: Mlp::new(ps, &format!("{name}.ffn"), d, 2 * d)?,
            ln_ffn: LayerNorm::new(ps, &format!("{name}.ln_ffn"), d)?,
            box_head1: Linear::new(ps, &format!("{name}.box1"), d, d)?,
            box_head2: Linear::new(ps, &format!("{name}.box2"), d, d)?,
            box_head3: Linear::new_zeroed(ps, &format!("{name}.box3"), d, 4)?,
            cls_head: Linear::new(ps, &format!("{name}.cls"), d, 1)?,
            code_head: Linear::new(ps, &format!("{name}.code"), d, cfg.n_pca)?,
            d,
            d_dyn,
        })
    }

    pub fn forward(&self, state: &ProposalState, pyramid: &FeaturePyramid) -> Result<StageOutput> {
        let n = state.features.dim(0)?;
        let (d, d_dyn) = (self.d, self.d_dyn);

        // proposal self-attention with residual
        let q = state.features.unsqueeze(0)?;
        let attn = self.msa.forward(&q, &q, None)?.squeeze(0)?;
        let h = self.ln_msa.forward(&(&state.features + attn)?)?;

        // two dynamic 1x1 convs over the 7x7 RoI tokens, parameters
        // generated per proposal from h
        let params = self.param_gen.forward(&h)?; // (N, 2*d*d_dyn)
        let w1 = params.narrow(1, 0, d * d_dyn)?.reshape((n, d, d_dyn))?;
        let w2 = params.narrow(1, d * d_dyn, d * d_dyn)?.reshape((n, d_dyn, d))?;
        let tokens = roi_tokens(pyramid, &state.boxes, ROI_DET)?; // (N, 49, d)
        let t1 = self.ln_dyn1.forward(&tokens.matmul(&w1)?)?.relu()?;
        let t2 = self.ln_dyn2.forward(&t1.matmul(&w2)?)?.relu()?;

        let flat = t2.reshape((n, ROI_DET * ROI_DET * d))?;
        let obj = self.ln_out.forward(&(&h + self.out_proj.forward(&flat)?)?)?;
        let f_k = self.ln_ffn.forward(&(&obj + self.ffn.forward(&obj)?)?)?;
        check_finite(&f_k, &format!("stage {} proposal features", state.stage + 1))?;

        let bx = self.box_head1.forward(&f_k)?.relu()?;
        let bx = self.box_head2.forward(&bx)?.relu()?;
        let deltas = self.box_head3.forward(&bx)?;
        check_finite(&deltas, &format!("stage {} box deltas", state.stage + 1))?;
        let boxes = apply_box_deltas_tensor(&state.boxes, &deltas)?;
        let logits = self.cls_head.forward(&f_k)?.squeeze(1)?;
        check_finite(&logits, &format!("stage {} logits", state.stage + 1))?;
        let codes = self.code_head.forward(&f_k)?;

        Ok(StageOutput { boxes, logits, codes, features: f_k })
    }
}

pub struct Detector {
    pub cfg: DetectorConfig,
    init_box_deltas: Tensor,
    init_features: Tensor,
    gap_proj: Linear,
    stages: Vec<DetectorStage>,
}

impl Detector {
    pub fn new(ps: &mut ParamStore, cfg: &DetectorConfig, pyramid_channels: usize) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_proposals;
        // boxes are parameterized as deltas from a full-image box; random
        // deltas spread the initial boxes over locations and scales so each
        // proposal sees distinct RoI content and can specialize
        let init_box_deltas = ps.var("detector.init_box_deltas", &[n, 4], Init::Normal(1.0))?;
        // embedding-scale init: per-proposal identity must not drown in the
        // shared image context added in init_proposals
        let init_features =
            ps.var("detector.init_features", &[n, cfg.d_model], Init::Normal(1.0))?;
        let gap_proj = Linear::new(ps, "detector.gap_proj", pyramid_channels, cfg.d_model)?;
        let stages = (0..cfg.n_stages)
            .map(|k| DetectorStage::new(ps, &format!("detector.stage{k}"), cfg))
            .collect::<Result<_>>()?;
        Ok(Self { cfg: cfg.clone(), init_box_deltas, init_features, gap_proj, stages })
    }

    /// Learnable boxes/features; the global-average-pooled stride-32 level is
    /// projected and added to every proposal feature.
    pub fn init_proposals(&self, pyramid: &FeaturePyramid) -> Result<ProposalState> {
        let n = self.cfg.n_proposals;
        let base = Tensor::from_vec(
            [0.5f32, 0.5, 1.0, 1.0].repeat(n),
            (n, 4),
            pyramid.levels[0].device(),
        )?;
        let boxes = apply_box_deltas_tensor(&base, &self.init_box_deltas)?;
        let gap = global_avg_pool(&pyramid.levels[3])?; // (C,)
        let ctx = self.gap_proj.forward(&gap.unsqueeze(0)?)?; // (1, d)
        let features = self.init_features.broadcast_add(&ctx)?;
        Ok(ProposalState { boxes, features, stage: 0 })
    }

    /// All K stage outputs (deep supervision); the last one feeds recognition.
    pub fn forward(&self, pyramid: &FeaturePyramid) -> Result<Vec<StageOutput>> {
        let c = pyramid.channels()?;
        if c != self.cfg.d_model {
            return Err(Error::Config(format!(
                "pyramid channels {c} != detector d_model {}",
                self.cfg.d_model
            )));
        }
        let mut state = self.init_proposals(pyramid)?;
        let mut outs = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let out = stage.forward(&state, pyramid)?;
            state = ProposalState {
                boxes: out.boxes.clone(),
                features: out.features.clone(),
                stage: state.stage + 1,
            };
            outs.push(out);
        }
        Ok(outs)
    }
}

/// Mean over D of |x| per tensor, used by gradient-connectivity checks.
pub fn grad_norm(t: &Tensor) -> Result<f64> {
    Ok(t.abs()?.mean_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}
