//! Parameter store and shared layers. All parameters are created from an
//! explicitly seeded RNG so runs are reproducible; the CPU backend's own RNG
//! is never used.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in [-bound, bound].
    Uniform(f64),
    /// Kaiming-style uniform with bound sqrt(6 / fan_in), fan_in from shape.
    KaimingFanIn,
    Normal(f64),
}

/// Named trainable variables with deterministic initialization and
/// safetensors persistence.
pub struct ParamStore {
    device: Device,
    rng: ChaCha8Rng,
    vars: Vec<(String, Var)>,
    preload: Option<HashMap<String, Tensor>>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
            vars: Vec::new(),
            preload: None,
        }
    }

    /// Values from `path` override the initializer for matching names.
    pub fn with_preloaded(seed: u64, path: &Path) -> Result<Self> {
        let map = candle_core::safetensors::load(path, &Device::Cpu)?;
        let mut store = Self::new(seed);
        store.preload = Some(map);
        Ok(store)
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.iter().any(|(n, _)| n == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = if let Some(pre) = &self.preload {
            if let Some(t) = pre.get(name) {
                if t.dims() != shape {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name}: checkpoint shape {:?} != model shape {shape:?}",
                        t.dims()
                    )));
                }
                t.flatten_all()?.to_vec1::<f32>()?
            } else {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} missing from checkpoint"
                )));
            }
        } else {
            match init {
                Init::Zeros => vec![0f32; numel],
                Init::Const(c) => vec![c as f32; numel],
                Init::Uniform(b) => (0..numel)
                    .map(|_| self.rng.gen_range(-b..=b) as f32)
                    .collect(),
                Init::KaimingFanIn => {
                    let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
                    let b = (6.0 / fan_in as f64).sqrt();
                    (0..numel)
                        .map(|_| self.rng.gen_range(-b..=b) as f32)
                        .collect()
                }
                Init::Normal(std) => {
                    use rand::distributions::Distribution;
                    let normal = rand::distributions::Uniform::new(0f64, 1f64);
                    // Box-Muller keeps us off rand_distr
                    (0..numel)
                        .map(|_| {
                            let u1: f64 = normal.sample(&mut self.rng).max(1e-12);
                            let u2: f64 = normal.sample(&mut self.rng);
                            let z = (-2.0 * u1.ln()).sqrt()
                                * (std::f64::consts::TAU * u2).cos();
                            (z * std) as f32
                        })
                        .collect()
                }
            }
        };
        let tensor = Tensor::from_vec(data, shape, &self.device)?;
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        self.vars.push((name.to_string(), var));
        Ok(out)
    }

    pub fn var_ref(&self, name: &str) -> Option<&Var> {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn var_names(&self) -> Vec<String> {
        self.vars.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.vars.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars
            .iter()
            .map(|(_, v)| v.as_tensor().elem_count())
            .sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Max absolute value across all parameters; used for NaN surveillance.
    pub fn all_finite(&self) -> Result<bool> {
        for (_, v) in &self.vars {
            let s = v.as_tensor().abs()?.max_all()?.to_scalar::<f32>()?;
            if !s.is_finite() {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor, // (out, in)
    pub b: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, dim_in: usize, dim_out: usize) -> Result<Self> {
        Ok(Self {
            w: ps.var(&format!("{name}.w"), &[dim_out, dim_in], Init::KaimingFanIn)?,
            b: Some(ps.var(&format!("{name}.b"), &[dim_out], Init::Zeros)?),
        })
    }

    pub fn new_zeroed(ps: &mut ParamStore, name: &str, dim_in: usize, dim_out: usize) -> Result<Self> {
        Ok(Self {
            w: ps.var(&format!("{name}.w"), &[dim_out, dim_in], Init::Zeros)?,
            b: Some(ps.var(&format!("{name}.b"), &[dim_out], Init::Zeros)?),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.w.t()?)?;
        match &self.b {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ConvCfg {
    pub padding: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl ConvCfg {
    pub fn same3x3() -> Self {
        Self { padding: 1, stride: 1, dilation: 1 }
    }
    pub fn pointwise() -> Self {
        Self { padding: 0, stride: 1, dilation: 1 }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Tensor, // (out, in, k, k)
    pub b: Tensor, // (out,)
    pub cfg: ConvCfg,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        cfg: ConvCfg,
    ) -> Result<Self> {
        Ok(Self {
            w: ps.var(&format!("{name}.w"), &[c_out, c_in, k, k], Init::KaimingFanIn)?,
            b: ps.var(&format!("{name}.b"), &[c_out], Init::Zeros)?,
            cfg,
        })
    }

    /// x: (B, C, H, W)
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let stride = self.cfg.stride.max(1);
        let dilation = self.cfg.dilation.max(1);
        let y = x.conv2d(&self.w, self.cfg.padding, stride, dilation, 1)?;
        let c_out = self.b.dim(0)?;
        Ok(y.broadcast_add(&self.b.reshape((1, c_out, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub g: Tensor,
    pub b: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            g: ps.var(&format!("{name}.g"), &[dim], Init::Const(1.0))?,
            b: ps.var(&format!("{name}.b"), &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    /// Normalizes over the last dimension.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let norm = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(norm.broadcast_mul(&self.g)?.broadcast_add(&self.b)?)
    }

    /// Normalizes the channel dimension of a (B, C, H, W) map.
    pub fn forward_chw(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.permute((0, 2, 3, 1))?.contiguous()?;
        let y = self.forward(&y)?;
        Ok(y.permute((0, 3, 1, 2))?.contiguous()?)
    }
}

/// Per-channel normalization over the spatial dims of a (B, C, H, W) map.
/// Unlike a channel layer norm, this rescales whatever spatial variation a
/// channel still carries to unit magnitude, so feature maps cannot fade into
/// spatially constant ones during training.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub g: Tensor,
    pub b: Tensor,
    pub eps: f64,
}

impl InstanceNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            g: ps.var(&format!("{name}.g"), &[channels], Init::Const(1.0))?,
            b: ps.var(&format!("{name}.b"), &[channels], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (bsz, c, h, w) = x.dims4()?;
        let flat = x.reshape((bsz, c, h * w))?;
        let mean = flat.mean_keepdim(D::Minus1)?;
        let xc = flat.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let norm = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let shape = (1, c, 1, 1);
        Ok(norm
            .reshape((bsz, c, h, w))?
            .broadcast_mul(&self.g.reshape(shape)?)?
            .broadcast_add(&self.b.reshape(shape)?)?)
    }
}

/// Multi-head scaled dot-product attention over (B, T, C) token maps.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            wq: Linear::new(ps, &format!("{name}.q"), dim, dim)?,
            wk: Linear::new(ps, &format!("{name}.k"), dim, dim)?,
            wv: Linear::new(ps, &format!("{name}.v"), dim, dim)?,
            wo: Linear::new(ps, &format!("{name}.o"), dim, dim)?,
            heads: heads.max(1),
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        let hd = c / self.heads;
        Ok(x.reshape((b, t, self.heads, hd))?
            .permute((0, 2, 1, 3))?
            .contiguous()?
            .reshape((b * self.heads, t, hd))?)
    }

    /// `bias` (optional) must broadcast against (B, heads, Tq, Tk) attention
    /// logits; use 0/-inf entries to mask.
    pub fn forward(&self, q_in: &Tensor, kv_in: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, tq, c) = q_in.dims3()?;
        let tk = kv_in.dim(1)?;
        let hd = c / self.heads;
        let q = self.split_heads(&self.wq.forward(q_in)?)?;
        let k = self.split_heads(&self.wk.forward(kv_in)?)?;
        let v = self.split_heads(&self.wv.forward(kv_in)?)?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut logits = (q.matmul(&k.transpose(1, 2)?)? * scale)?;
        if let Some(bias) = bias {
            logits = logits
                .reshape((b, self.heads, tq, tk))?
                .broadcast_add(bias)?
                .reshape((b * self.heads, tq, tk))?;
        }
        let attn = candle_nn::ops::softmax(&logits, D::Minus1)?;
        let out = attn.matmul(&v)?;
        let out = out
            .reshape((b, self.heads, tq, hd))?
            .permute((0, 2, 1, 3))?
            .contiguous()?
            .reshape((b, tq, c))?;
        self.wo.forward(&out)
    }
}

/// Two-layer MLP with GELU, the transformer feed-forward block.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, hidden)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.fc2.forward(&self.fc1.forward(x)?.gelu()?)?)
    }
}

/// 2-D sinusoidal positional encoding, shape (h*w, c), row-major tokens.
pub fn sinusoidal_2d(c: usize, h: usize, w: usize, dev: &Device) -> Result<Tensor> {
    let half = c / 2;
    let mut data = vec![0f32; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let tok = y * w + x;
            for i in 0..half {
                let div = (10000f64).powf(2.0 * (i / 2) as f64 / half as f64);
                let vy = y as f64 / div;
                let vx = x as f64 / div;
                data[tok * c + i] = if i % 2 == 0 { vy.sin() } else { vy.cos() } as f32;
                data[tok * c + half + i] =
                    if i % 2 == 0 { vx.sin() } else { vx.cos() } as f32;
            }
        }
    }
    Ok(Tensor::from_vec(data, (h * w, c), dev)?)
}

/// 1-D sinusoidal positional encoding, shape (t_max, c).
pub fn sinusoidal_1d(c: usize, t_max: usize, dev: &Device) -> Result<Tensor> {
    let mut data = vec![0f32; t_max * c];
    for t in 0..t_max {
        for i in 0..c {
            let div = (10000f64).powf(2.0 * (i / 2) as f64 / c as f64);
            let v = t as f64 / div;
            data[t * c + i] = if i % 2 == 0 { v.sin() } else { v.cos() } as f32;
        }
    }
    Ok(Tensor::from_vec(data, (t_max, c), dev)?)
}

/// Applies per-row and per-column interpolation matrices to the two spatial
/// dims of (..., H, W): out = wy . x . wx^T. Differentiable w.r.t. x.
pub fn apply_row_col(x: &Tensor, wy: &Tensor, wx: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let lead: usize = dims[..dims.len() - 2].iter().product::<usize>().max(1);
    let (oh, ow) = (wy.dim(0)?, wx.dim(0)?);

    let x2 = x.reshape((lead, h, w))?;
    // rows: (H, lead*W) -> (oh, lead*W)
    let xr = x2.permute((1, 0, 2))?.contiguous()?.reshape((h, lead * w))?;
    let yr = wy.matmul(&xr)?; // (oh, lead*W)
    let y = yr
        .reshape((oh, lead, w))?
        .permute((1, 0, 2))?
        .contiguous()?
        .reshape((lead * oh, w))?;
    // cols: (lead*oh, W) x (W, ow)
    let out = y.matmul(&wx.t()?)?;
    let mut out_dims = dims;
    let n = out_dims.len();
    out_dims[n - 2] = oh;
    out_dims[n - 1] = ow;
    Ok(out.reshape(out_dims)?)
}

/// Bilinear interpolation matrix (out_n, in_n) for half-pixel-aligned
/// resampling of a length-`in_n` axis to `out_n` samples.
pub fn bilinear_matrix(in_n: usize, out_n: usize, dev: &Device) -> Result<Tensor> {
    let mut data = vec![0f32; out_n * in_n];
    let scale = in_n as f64 / out_n as f64;
    for o in 0..out_n {
        let src = (o as f64 + 0.5) * scale - 0.5;
        let i0 = src.floor();
        let frac = src - i0;
        let i0c = (i0 as isize).clamp(0, in_n as isize - 1) as usize;
        let i1c = ((i0 as isize) + 1).clamp(0, in_n as isize - 1) as usize;
        data[o * in_n + i0c] += (1.0 - frac) as f32;
        data[o * in_n + i1c] += frac as f32;
    }
    Ok(Tensor::from_vec(data, (out_n, in_n), dev)?)
}

/// 2x bilinear upsample of (..., H, W).
pub fn upsample_bilinear_2x(x: &Tensor) -> Result<Tensor> {
    let dims = x.dims();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let wy = bilinear_matrix(h, h * 2, x.device())?;
    let wx = bilinear_matrix(w, w * 2, x.device())?;
    apply_row_col(x, &wy, &wx)
}

/// Reflection padding of the two spatial dims of (B, C, H, W).
pub fn reflect_pad(x: &Tensor, pad: usize) -> Result<Tensor> {
    let dims = x.dims();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let reflect_idx = |n: usize| -> Vec<u32> {
        // mirror without repeating the edge sample; folds with period 2n-2
        // so it stays valid even when pad >= n
        let fold = |j: isize| -> u32 {
            if n == 1 {
                return 0;
            }
            let m = (2 * n - 2) as isize;
            let mut k = j.rem_euclid(m);
            if k >= n as isize {
                k = m - k;
            }
            k as u32
        };
        (-(pad as isize)..(n + pad) as isize).map(fold).collect()
    };
    let dev = x.device();
    let iy = Tensor::from_vec(reflect_idx(h), h + 2 * pad, dev)?;
    let ix = Tensor::from_vec(reflect_idx(w), w + 2 * pad, dev)?;
    let ndim = dims.len();
    let y = x.index_select(&iy, ndim - 2)?;
    Ok(y.index_select(&ix, ndim - 1)?)
}
