//! Conversion bridge between detection and recognition: fuses the final
//! proposal features into the RoI pyramid, generates soft text-region masks,
//! and emits recognition features with gradient flow back to the detector.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::{
    sinusoidal_2d, upsample_bilinear_2x, Conv2d, ConvCfg, LayerNorm, Linear, Mlp,
    MultiHeadAttention, ParamStore,
};
use crate::roi::{roi_extract, FeaturePyramid};

pub const ROI_REC: usize = 28;

/// Per-instance RoI features at 28/14/7 resolution, downsampled from one
/// 28x28 extraction.
#[derive(Debug, Clone)]
pub struct RecRoiPyramid {
    pub a1: Tensor, // (C, 28, 28)
    pub a2: Tensor, // (C, 14, 14)
    pub a3: Tensor, // (C, 7, 7)
}

pub fn extract_rec_pyramid(pyramid: &FeaturePyramid, b: &BBox) -> Result<RecRoiPyramid> {
    let a1 = roi_extract(pyramid, b, ROI_REC, ROI_REC)?;
    let a2 = a1.unsqueeze(0)?.avg_pool2d(2)?.squeeze(0)?;
    let a3 = a2.unsqueeze(0)?.avg_pool2d(2)?.squeeze(0)?;
    Ok(RecRoiPyramid { a1, a2, a3 })
}

/// How the conversion couples recognition to detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RcMode {
    /// Full coupling: recognition gradients reach the proposal features.
    Full,
    /// Same forward values, but the fused detection feature is detached, so
    /// no recognition gradient reaches the proposal features.
    StopGradient,
    /// Masks and fusion bypassed; caller gates the plain pyramid externally.
    Disabled,
}

#[derive(Debug, Clone)]
pub struct RcOutput {
    /// Fused detection feature (C, 7, 7); absent in Disabled mode.
    pub f_det: Option<Tensor>,
    /// Soft masks (1, 7, 7), (1, 14, 14), (1, 28, 28); absent in Disabled mode.
    pub masks: Option<[Tensor; 3]>,
    /// Recognition features (C, 7, 7), (C, 14, 14), (C, 28, 28).
    pub rs: [Tensor; 3],
}

/// 2x bilinear upsample followed by a 3x3 convolution.
struct UpsampleUnit {
    conv: Conv2d,
}

impl UpsampleUnit {
    fn new(ps: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Self { conv: Conv2d::new(ps, name, c, c, 3, ConvCfg::same3x3())? })
    }

    /// (C, H, W) -> (C, 2H, 2W)
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let up = upsample_bilinear_2x(&x.unsqueeze(0)?)?;
        Ok(self.conv.forward(&up)?.squeeze(0)?)
    }
}

struct TreLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl TreLayer {
    fn new(ps: &mut ParamStore, name: &str, c: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), c)?,
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), c, heads)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), c)?,
            mlp: Mlp::new(ps, &format!("{name}.mlp"), c, 2 * c)?,
        })
    }

    /// tokens: (1, T, C)
    fn forward(&self, t: &Tensor) -> Result<Tensor> {
        let a = self.ln1.forward(t)?;
        let t = (t + self.attn.forward(&a, &a, None)?)?;
        Ok((&t + self.mlp.forward(&self.ln2.forward(&t)?)?)?)
    }
}

pub struct RecognitionConversion {
    fuse_lin: Linear,
    fuse_ln: LayerNorm,
    fuse_conv: Conv2d,
    tre: Vec<TreLayer>,
    mask_convs: Vec<Conv2d>,
    eu_d: Vec<UpsampleUnit>,
    eu_r: Vec<UpsampleUnit>,
    c: usize,
}

impl RecognitionConversion {
    pub fn new(ps: &mut ParamStore, name: &str, c: usize, d_prop: usize) -> Result<Self> {
        let heads = if c % 4 == 0 { 4 } else { 1 };
        Ok(Self {
            fuse_lin: Linear::new(ps, &format!("{name}.fuse_lin"), d_prop, c)?,
            fuse_ln: LayerNorm::new(ps, &format!("{name}.fuse_ln"), c)?,
            fuse_conv: Conv2d::new(ps, &format!("{name}.fuse_conv"), c, c, 3, ConvCfg::same3x3())?,
            tre: (0..2)
                .map(|i| TreLayer::new(ps, &format!("{name}.tre{i}"), c, heads))
                .collect::<Result<_>>()?,
            mask_convs: (0..3)
                .map(|i| Conv2d::new(ps, &format!("{name}.mask{i}"), c, 1, 1, ConvCfg::pointwise()))
                .collect::<Result<_>>()?,
            eu_d: (0..2)
                .map(|i| UpsampleUnit::new(ps, &format!("{name}.eu_d{i}"), c))
                .collect::<Result<_>>()?,
            eu_r: (0..2)
                .map(|i| UpsampleUnit::new(ps, &format!("{name}.eu_r{i}"), c))
                .collect::<Result<_>>()?,
            c,
        })
    }

    /// f^det = conv3x3(LN(a3 + broadcast(linear(prop)))).
    pub fn fuse_detection_feature(&self, a3: &Tensor, prop: &Tensor) -> Result<Tensor> {
        let (c, h, w) = a3.dims3()?;
        if c != self.c {
            return Err(Error::Config(format!("a3 has {c} channels, expected {}", self.c)));
        }
        let ctx = self.fuse_lin.forward(&prop.unsqueeze(0)?)?; // (1, C)
        let fused = a3.broadcast_add(&ctx.reshape((self.c, 1, 1))?)?;
        let fused = self.fuse_ln.forward_chw(&fused.unsqueeze(0)?)?;
        Ok(self.fuse_conv.forward(&fused)?.squeeze(0)?.reshape((c, h, w))?)
    }

    fn tre_encode(&self, f_det: &Tensor) -> Result<Tensor> {
        let (c, h, w) = f_det.dims3()?;
        let pos = sinusoidal_2d(c, h, w, f_det.device())?;
        let mut t = f_det
            .reshape((c, h * w))?
            .t()?
            .contiguous()?
            .broadcast_add(&pos)?
            .unsqueeze(0)?;
        for layer in &self.tre {
            t = layer.forward(&t)?;
        }
        Ok(t.squeeze(0)?.t()?.contiguous()?.reshape((c, h, w))?)
    }

    fn mask(&self, idx: usize, d: &Tensor) -> Result<Tensor> {
        let logits = self.mask_convs[idx].forward(&d.unsqueeze(0)?)?.squeeze(0)?;
        // keep masks strictly inside (0,1); f32 sigmoid saturates to exact
        // 0/1 past |x| ~ 17 which would freeze the gated features
        Ok(candle_nn::ops::sigmoid(&logits)?.clamp(1e-6, 1.0 - 1e-6)?)
    }

    pub fn forward(&self, a: &RecRoiPyramid, prop: &Tensor, mode: RcMode) -> Result<RcOutput> {
        if mode == RcMode::Disabled {
            let r1 = a.a3.clone();
            let r2 = (self.eu_r[0].forward(&r1)? + &a.a2)?;
            let r3 = (self.eu_r[1].forward(&r2)? + &a.a1)?;
            return Ok(RcOutput { f_det: None, masks: None, rs: [r1, r2, r3] });
        }
        let mut f_det = self.fuse_detection_feature(&a.a3, prop)?;
        if mode == RcMode::StopGradient {
            f_det = f_det.detach();
        }
        self.convert(a, &f_det)
    }

    /// The mask-and-gate chain downstream of the fused detection feature.
    pub fn convert(&self, a: &RecRoiPyramid, f_det: &Tensor) -> Result<RcOutput> {
        let d1 = self.tre_encode(f_det)?;
        let d2 = (self.eu_d[0].forward(&d1)? + &a.a2)?;
        let d3 = (self.eu_d[1].forward(&d2)? + &a.a1)?;
        let m1 = self.mask(0, &d1)?;
        let m2 = self.mask(1, &d2)?;
        let m3 = self.mask(2, &d3)?;
        let r1 = a.a3.broadcast_mul(&m1)?;
        let r2 = (self.eu_r[0].forward(&r1)? + &a.a2)?.broadcast_mul(&m2)?;
        let r3 = (self.eu_r[1].forward(&r2)? + &a.a1)?.broadcast_mul(&m3)?;
        Ok(RcOutput {
            f_det: Some(f_det.clone()),
            masks: Some([m1, m2, m3]),
            rs: [r1, r2, r3],
        })
    }
}
