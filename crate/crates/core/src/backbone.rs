//! Feature extractor: windowed-attention transformer (or a residual-CNN
//! fallback) with per-stage dilated-conv units and an FPN emitting a 4-level
//! pyramid at strides 4/8/16/32.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvCfg, InstanceNorm, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamStore};
use crate::roi::FeaturePyramid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Swin,
    Residual,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub patch: usize,
    pub embed_dim: usize,
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub window: usize,
    pub d_model: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Swin,
            patch: 4,
            embed_dim: 32,
            depths: [2, 2, 2, 2],
            heads: [2, 4, 8, 8],
            window: 4,
            d_model: 64,
        }
    }
}

impl BackboneConfig {
    /// Stage widths double at each merge.
    pub fn widths(&self) -> [usize; 4] {
        [
            self.embed_dim,
            self.embed_dim * 2,
            self.embed_dim * 4,
            self.embed_dim * 8,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch != 4 {
            return Err(Error::Config(format!(
                "patch size must be 4 for a stride-4 first level, got {}",
                self.patch
            )));
        }
        if self.window < 2 {
            return Err(Error::Config("window size must be >= 2".into()));
        }
        for (w, h) in self.widths().iter().zip(&self.heads) {
            if w % h != 0 {
                return Err(Error::Config(format!(
                    "stage width {w} not divisible by {h} heads"
                )));
            }
        }
        Ok(())
    }
}

fn roll(x: &Tensor, dim: usize, shift: usize) -> Result<Tensor> {
    let n = x.dim(dim)?;
    let s = shift % n;
    if s == 0 {
        return Ok(x.clone());
    }
    Ok(Tensor::cat(&[x.narrow(dim, s, n - s)?, x.narrow(dim, 0, s)?], dim)?)
}

/// (H, W, C) -> (num_windows, window*window, C)
fn window_partition(x: &Tensor, w: usize) -> Result<Tensor> {
    let (hp, wp, c) = x.dims3()?;
    let x = x.reshape((hp / w, w, wp / w, w, c))?;
    Ok(x.permute((0, 2, 1, 3, 4))?
        .contiguous()?
        .reshape(((hp / w) * (wp / w), w * w, c))?)
}

fn window_reverse(x: &Tensor, w: usize, hp: usize, wp: usize) -> Result<Tensor> {
    let c = x.dim(2)?;
    let x = x.reshape((hp / w, wp / w, w, w, c))?;
    Ok(x.permute((0, 2, 1, 3, 4))?.contiguous()?.reshape((hp, wp, c))?)
}

/// Cross-window mask for shifted attention: windows straddling the roll
/// boundary get -1e4 logits between tokens from different source regions.
fn shift_mask(hp: usize, wp: usize, w: usize, s: usize, dev: &candle_core::Device) -> Result<Tensor> {
    let region = |coord: usize, n: usize| -> i32 {
        if coord < n - w {
            0
        } else if coord < n - s {
            1
        } else {
            2
        }
    };
    let mut ids = vec![0i32; hp * wp];
    for y in 0..hp {
        for x in 0..wp {
            ids[y * wp + x] = region(y, hp) * 3 + region(x, wp);
        }
    }
    let nw = (hp / w) * (wp / w);
    let mut bias = vec![0f32; nw * w * w * w * w];
    for wy in 0..hp / w {
        for wx in 0..wp / w {
            let widx = wy * (wp / w) + wx;
            for a in 0..w * w {
                let ida = ids[(wy * w + a / w) * wp + wx * w + a % w];
                for b in 0..w * w {
                    let idb = ids[(wy * w + b / w) * wp + wx * w + b % w];
                    if ida != idb {
                        bias[((widx * w * w) + a) * w * w + b] = -1e4;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(bias, (nw, 1, w * w, w * w), dev)?)
}

pub struct SwinBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
    window: usize,
    shift: bool,
}

impl SwinBlock {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        shift: bool,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), dim, heads)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim)?,
            mlp: Mlp::new(ps, &format!("{name}.mlp"), dim, dim * 4)?,
            window,
            shift,
        })
    }

    /// x: (1, C, H, W); pads H/W to window multiples internally.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _c, h, w) = x.dims4()?;
        let win = self.window;
        let hp = h.div_ceil(win) * win;
        let wp = w.div_ceil(win) * win;
        let mut t = x.squeeze(0)?.permute((1, 2, 0))?.contiguous()?; // (H, W, C)
        if hp != h {
            t = t.pad_with_zeros(0, 0, hp - h)?;
        }
        if wp != w {
            t = t.pad_with_zeros(1, 0, wp - w)?;
        }
        let shortcut = t.clone();
        let mut y = self.ln1.forward(&t)?;
        let s = win / 2;
        let bias;
        if self.shift {
            y = roll(&roll(&y, 0, s)?, 1, s)?;
            bias = Some(shift_mask(hp, wp, win, s, x.device())?);
        } else {
            bias = None;
        }
        let wins = window_partition(&y, win)?;
        let out = self.attn.forward(&wins, &wins, bias.as_ref())?;
        let mut y = window_reverse(&out, win, hp, wp)?;
        if self.shift {
            y = roll(&roll(&y, 0, hp - s)?, 1, wp - s)?;
        }
        let y = (shortcut + y)?;
        let y = (&y + self.mlp.forward(&self.ln2.forward(&y)?)?)?;
        let y = y.narrow(0, 0, h)?.narrow(1, 0, w)?; // crop padding
        Ok(y.permute((2, 0, 1))?.contiguous()?.unsqueeze(0)?)
    }
}

/// 2x2 patch merging: concatenate each 2x2 neighborhood and project 4C -> 2C.
pub struct PatchMerging {
    ln: LayerNorm,
    lin: Linear,
}

impl PatchMerging {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize) -> Result<Self> {
        Ok(Self {
            ln: LayerNorm::new(ps, &format!("{name}.ln"), 4 * c_in)?,
            lin: Linear::new(ps, &format!("{name}.lin"), 4 * c_in, 2 * c_in)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let mut t = x.clone();
        if h % 2 == 1 {
            t = t.pad_with_zeros(2, 0, 1)?;
        }
        if w % 2 == 1 {
            t = t.pad_with_zeros(3, 0, 1)?;
        }
        let (h2, w2) = (t.dim(2)? / 2, t.dim(3)? / 2);
        let t = t
            .reshape((c, h2, 2, w2, 2))?
            .permute((1, 3, 2, 4, 0))?
            .contiguous()?
            .reshape((h2 * w2, 4 * c))?;
        let t = self.lin.forward(&self.ln.forward(&t)?)?;
        Ok(t.reshape((h2, w2, 2 * c))?
            .permute((2, 0, 1))?
            .contiguous()?
            .unsqueeze(0)?)
    }
}

/// Residual refinement y = x + f(x) with f = two dilated 3x3 convs and a
/// 1x1 conv; reflection padding keeps constants exact at borders. Effective
/// receptive field of f: 9x9.
pub struct DcUnit {
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
}

impl DcUnit {
    pub fn new(ps: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        let dilated = ConvCfg { padding: 0, stride: 1, dilation: 2 };
        Ok(Self {
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), c, c, 3, dilated)?,
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), c, c, 3, dilated)?,
            conv3: Conv2d::new(ps, &format!("{name}.conv3"), c, c, 1, ConvCfg::pointwise())?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv1.forward(&crate::nn::reflect_pad(x, 2)?)?.relu()?;
        let y = self.conv2.forward(&crate::nn::reflect_pad(&y, 2)?)?.relu()?;
        let y = self.conv3.forward(&y)?;
        Ok((x + y)?)
    }
}

/// Top-down pyramid fusion: 1x1 laterals to d_model, nearest upsampling, and
/// a 3x3 smoothing conv per level.
pub struct Fpn {
    laterals: Vec<Conv2d>,
    outputs: Vec<Conv2d>,
    norms: Vec<InstanceNorm>,
}

impl Fpn {
    pub fn new(ps: &mut ParamStore, name: &str, widths: &[usize; 4], d_model: usize) -> Result<Self> {
        let mut laterals = Vec::new();
        let mut outputs = Vec::new();
        let mut norms = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            laterals.push(Conv2d::new(
                ps,
                &format!("{name}.lat{i}"),
                w,
                d_model,
                1,
                ConvCfg::pointwise(),
            )?);
            outputs.push(Conv2d::new(
                ps,
                &format!("{name}.out{i}"),
                d_model,
                d_model,
                3,
                ConvCfg::same3x3(),
            )?);
            norms.push(InstanceNorm::new(ps, &format!("{name}.in{i}"), d_model)?);
        }
        Ok(Self { laterals, outputs, norms })
    }

    pub fn forward(&self, feats: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut lat: Vec<Tensor> = feats
            .iter()
            .zip(&self.laterals)
            .map(|(f, l)| l.forward(f))
            .collect::<Result<_>>()?;
        for i in (0..3).rev() {
            let (_, _, h, w) = lat[i].dims4()?;
            let up = lat[i + 1].upsample_nearest2d(h, w)?;
            lat[i] = (&lat[i] + up)?;
        }
        // spatial instance norm pins the pyramid scale and, crucially, keeps
        // each channel's spatial variation at unit magnitude: training cannot
        // quietly trade image-dependent signal for static offsets
        lat.iter()
            .zip(self.outputs.iter().zip(&self.norms))
            .map(|(f, (o, n))| n.forward(&o.forward(f)?))
            .collect()
    }
}

enum Stages {
    Swin {
        patch_embed: Conv2d,
        embed_norm: LayerNorm,
        blocks: Vec<Vec<SwinBlock>>,
        mergers: Vec<PatchMerging>,
    },
    Residual {
        stem1: Conv2d,
        stem2: Conv2d,
        blocks: Vec<Vec<(Conv2d, Conv2d)>>,
        downs: Vec<Conv2d>,
    },
}

pub struct Backbone {
    cfg: BackboneConfig,
    stages: Stages,
    dc_units: Vec<DcUnit>,
    fpn: Fpn,
}

impl Backbone {
    pub fn new(ps: &mut ParamStore, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.widths();
        let stages = match cfg.kind {
            BackboneKind::Swin => {
                let patch_embed = Conv2d::new(
                    ps,
                    "backbone.patch_embed",
                    3,
                    cfg.embed_dim,
                    cfg.patch,
                    ConvCfg { padding: 0, stride: cfg.patch, dilation: 1 },
                )?;
                let embed_norm = LayerNorm::new(ps, "backbone.embed_norm", cfg.embed_dim)?;
                let mut blocks = Vec::new();
                for s in 0..4 {
                    let mut stage = Vec::new();
                    for b in 0..cfg.depths[s] {
                        stage.push(SwinBlock::new(
                            ps,
                            &format!("backbone.s{s}.b{b}"),
                            widths[s],
                            cfg.heads[s],
                            cfg.window,
                            b % 2 == 1,
                        )?);
                    }
                    blocks.push(stage);
                }
                let mergers = (0..3)
                    .map(|s| PatchMerging::new(ps, &format!("backbone.merge{s}"), widths[s]))
                    .collect::<Result<_>>()?;
                Stages::Swin { patch_embed, embed_norm, blocks, mergers }
            }
            BackboneKind::Residual => {
                let stem_cfg = ConvCfg { padding: 1, stride: 2, dilation: 1 };
                let stem1 = Conv2d::new(ps, "backbone.stem1", 3, widths[0], 3, stem_cfg)?;
                let stem2 = Conv2d::new(ps, "backbone.stem2", widths[0], widths[0], 3, stem_cfg)?;
                let mut blocks = Vec::new();
                let mut downs = Vec::new();
                for s in 0..4 {
                    let mut stage = Vec::new();
                    for b in 0..cfg.depths[s] {
                        stage.push((
                            Conv2d::new(
                                ps,
                                &format!("backbone.s{s}.b{b}.c1"),
                                widths[s],
                                widths[s],
                                3,
                                ConvCfg::same3x3(),
                            )?,
                            Conv2d::new(
                                ps,
                                &format!("backbone.s{s}.b{b}.c2"),
                                widths[s],
                                widths[s],
                                3,
                                ConvCfg::same3x3(),
                            )?,
                        ));
                    }
                    blocks.push(stage);
                    if s < 3 {
                        downs.push(Conv2d::new(
                            ps,
                            &format!("backbone.down{s}"),
                            widths[s],
                            widths[s + 1],
                            3,
                            ConvCfg { padding: 1, stride: 2, dilation: 1 },
                        )?);
                    }
                }
                Stages::Residual { stem1, stem2, blocks, downs }
            }
        };
        let dc_units = (0..4)
            .map(|s| DcUnit::new(ps, &format!("backbone.dc{s}"), widths[s]))
            .collect::<Result<_>>()?;
        let fpn = Fpn::new(ps, "backbone.fpn", &widths, cfg.d_model)?;
        Ok(Self { cfg: cfg.clone(), stages, dc_units, fpn })
    }

    /// image: (1, 3, H, W) with H, W >= 32. The image is zero-padded to
    /// multiples of 32; pyramid levels cover the padded canvas while the
    /// recorded image extent stays at the original size.
    pub fn forward(&self, image: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::Config(format!("backbone expects 3 channels, got {c}")));
        }
        if h < 32 || w < 32 {
            return Err(Error::Config(format!("image {w}x{h} smaller than minimum 32x32")));
        }
        let hp = h.div_ceil(32) * 32;
        let wp = w.div_ceil(32) * 32;
        let mut x = image.clone();
        if hp != h {
            x = x.pad_with_zeros(2, 0, hp - h)?;
        }
        if wp != w {
            x = x.pad_with_zeros(3, 0, wp - w)?;
        }

        let mut stage_outs = Vec::with_capacity(4);
        match &self.stages {
            Stages::Swin { patch_embed, embed_norm, blocks, mergers } => {
                let mut x = patch_embed.forward(&x)?;
                x = embed_norm.forward_chw(&x)?;
                for s in 0..4 {
                    for block in &blocks[s] {
                        x = block.forward(&x)?;
                    }
                    stage_outs.push(x.clone());
                    if s < 3 {
                        x = mergers[s].forward(&x)?;
                    }
                }
            }
            Stages::Residual { stem1, stem2, blocks, downs } => {
                let mut x = stem2.forward(&stem1.forward(&x)?.relu()?)?.relu()?;
                for s in 0..4 {
                    for (c1, c2) in &blocks[s] {
                        let y = c2.forward(&c1.forward(&x)?.relu()?)?;
                        x = (x + y)?.relu()?;
                    }
                    stage_outs.push(x.clone());
                    if s < 3 {
                        x = downs[s].forward(&x)?.relu()?;
                    }
                }
            }
        }

        let refined: Vec<Tensor> = stage_outs
            .iter()
            .zip(&self.dc_units)
            .map(|(f, dc)| dc.forward(f))
            .collect::<Result<_>>()?;
        let levels = self.fpn.forward(&refined)?;
        for (i, lvl) in levels.iter().enumerate() {
            let (_, lc, lh, lw) = lvl.dims4()?;
            let s = crate::roi::PYRAMID_STRIDES[i];
            if lc != self.cfg.d_model || lh != hp / s || lw != wp / s {
                return Err(Error::Numeric(format!(
                    "pyramid level {i} has shape ({lc},{lh},{lw}), expected ({},{},{})",
                    self.cfg.d_model,
                    hp / s,
                    wp / s
                )));
            }
        }
        Ok(FeaturePyramid { levels, img_w: w, img_h: h })
    }
}

/// Per-channel global average pool of (1, C, H, W) -> (C,).
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?.squeeze(0)?)
}
