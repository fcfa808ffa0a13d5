//! Attention recognizer: a two-level (local window + pooled global)
//! self-attention encoder over the 28x28 recognition feature, and an
//! autoregressive decoder that attends over all 784 spatial tokens.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    sinusoidal_1d, sinusoidal_2d, Init, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamStore,
};

pub const DEFAULT_T_MAX: usize = 25;
const REC_SIZE: usize = 28;
const REC_TOKENS: usize = REC_SIZE * REC_SIZE;
const LOCAL_WINDOW: usize = 7;
const COARSE_POOL: usize = 4;

/// Ordered symbol set plus EOS/PAD/UNK specials appended after the symbols.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Charset {
    symbols: Vec<char>,
}

impl Charset {
    pub fn new(alphabet: &str) -> Result<Self> {
        let symbols: Vec<char> = alphabet.chars().collect();
        let mut seen = std::collections::HashSet::new();
        for c in &symbols {
            if !seen.insert(*c) {
                return Err(Error::Config(format!("duplicate charset symbol {c:?}")));
            }
        }
        if symbols.is_empty() {
            return Err(Error::Config("charset must not be empty".into()));
        }
        Ok(Self { symbols })
    }

    /// 26 lowercase letters + 10 digits.
    pub fn full() -> Self {
        Self::new("abcdefghijklmnopqrstuvwxyz0123456789").expect("static charset")
    }

    pub fn alphabet(&self) -> String {
        self.symbols.iter().collect()
    }

    pub fn vocab_size(&self) -> usize {
        self.symbols.len() + 3
    }

    pub fn eos(&self) -> u32 {
        self.symbols.len() as u32
    }

    pub fn pad(&self) -> u32 {
        self.symbols.len() as u32 + 1
    }

    pub fn unk(&self) -> u32 {
        self.symbols.len() as u32 + 2
    }

    pub fn encode_char(&self, c: char) -> u32 {
        let c = c.to_ascii_lowercase();
        self.symbols
            .iter()
            .position(|&s| s == c)
            .map(|i| i as u32)
            .unwrap_or_else(|| self.unk())
    }

    pub fn decode_symbol(&self, id: u32) -> Option<char> {
        self.symbols.get(id as usize).copied()
    }

    /// Per-step training targets: characters, EOS, then PAD up to t_max.
    /// Texts longer than t_max - 1 are truncated with a warning.
    pub fn targets(&self, text: &str, t_max: usize) -> Vec<u32> {
        let chars: Vec<char> = text.chars().collect();
        let keep = if chars.len() > t_max - 1 {
            log::warn!(
                "transcription {:?} longer than {} characters; truncating",
                text,
                t_max - 1
            );
            t_max - 1
        } else {
            chars.len()
        };
        let mut out: Vec<u32> = chars[..keep].iter().map(|&c| self.encode_char(c)).collect();
        out.push(self.eos());
        out.resize(t_max, self.pad());
        out
    }
}

/// One encoder block: each token attends to its 7x7 local window plus a
/// 7x7 grid of 4x4-pooled global summary tokens (98 keys per query).
pub struct TlsamBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl TlsamBlock {
    pub fn new(ps: &mut ParamStore, name: &str, c: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), c)?,
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), c, heads)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), c)?,
            mlp: Mlp::new(ps, &format!("{name}.mlp"), c, 2 * c)?,
        })
    }

    /// x: (C, 28, 28)
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (c, h, w) = x.dims3()?;
        let win = LOCAL_WINDOW;
        let nw = (h / win) * (w / win);
        let hwc = x.permute((1, 2, 0))?.contiguous()?; // (H, W, C)
        let normed = self.ln1.forward(&hwc)?;
        // local windows as batch: (nW, 49, C)
        let windows = normed
            .reshape((h / win, win, w / win, win, c))?
            .permute((0, 2, 1, 3, 4))?
            .contiguous()?
            .reshape((nw, win * win, c))?;
        // pooled global summaries: (49, C), shared by every window
        let coarse = normed
            .permute((2, 0, 1))?
            .contiguous()?
            .unsqueeze(0)?
            .avg_pool2d(COARSE_POOL)?
            .squeeze(0)?
            .reshape((c, (h / COARSE_POOL) * (w / COARSE_POOL)))?
            .t()?
            .contiguous()?;
        let coarse = coarse.unsqueeze(0)?.broadcast_as((nw, coarse.dim(0)?, c))?;
        let kv = Tensor::cat(&[&windows, &coarse.contiguous()?], 1)?;
        let out = self.attn.forward(&windows, &kv, None)?;
        let out = out
            .reshape((h / win, w / win, win, win, c))?
            .permute((0, 2, 1, 3, 4))?
            .contiguous()?
            .reshape((h, w, c))?;
        let y = (hwc + out)?;
        let y = (&y + self.mlp.forward(&self.ln2.forward(&y)?)?)?;
        Ok(y.permute((2, 0, 1))?.contiguous()?)
    }
}

/// One decoded sequence: per-step logits, the decoded string, and the
/// decoder's spatial attention maps.
#[derive(Debug, Clone)]
pub struct SequencePrediction {
    /// (T, vocab)
    pub logits: Tensor,
    pub text: String,
    /// one (28, 28) map per step, entries >= 0 summing to 1
    pub attn: Vec<Tensor>,
}

pub enum DecodeMode<'a> {
    Greedy,
    TeacherForced(&'a [u32]),
}

struct SamDecoder {
    embed: Tensor, // (vocab, C)
    wq: Linear,
    wk: Linear,
    wv: Linear,
    out: Linear,
    heads: usize,
}

pub struct Recognizer {
    pub charset: Charset,
    pub t_max: usize,
    blocks: Vec<TlsamBlock>,
    decoder: SamDecoder,
    c: usize,
}

impl Recognizer {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c: usize,
        charset: Charset,
        t_max: usize,
    ) -> Result<Self> {
        if t_max < 2 {
            return Err(Error::Config("sequence length t_max must be >= 2".into()));
        }
        let heads = if c % 4 == 0 { 4 } else { 1 };
        let blocks = (0..2)
            .map(|i| TlsamBlock::new(ps, &format!("{name}.tlsam{i}"), c, heads))
            .collect::<Result<_>>()?;
        let vocab = charset.vocab_size();
        let decoder = SamDecoder {
            embed: ps.var(&format!("{name}.embed"), &[vocab, c], Init::Normal(0.02))?,
            wq: Linear::new(ps, &format!("{name}.wq"), c, c)?,
            wk: Linear::new(ps, &format!("{name}.wk"), c, c)?,
            wv: Linear::new(ps, &format!("{name}.wv"), c, c)?,
            out: Linear::new(ps, &format!("{name}.out"), c, vocab)?,
            heads,
        };
        Ok(Self { charset, t_max, blocks, decoder, c })
    }

    /// Two-level self-attention encoding; shape-preserving.
    pub fn encode(&self, r3: &Tensor) -> Result<Tensor> {
        let (c, h, w) = r3.dims3()?;
        if h != REC_SIZE || w != REC_SIZE || c != self.c {
            return Err(Error::Config(format!(
                "recognizer expects ({}, {REC_SIZE}, {REC_SIZE}) input, got ({c}, {h}, {w})",
                self.c
            )));
        }
        let pos = sinusoidal_2d(c, h, w, r3.device())?
            .t()?
            .contiguous()?
            .reshape((c, h, w))?;
        let mut x = (r3 + pos)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        Ok(x)
    }

    /// One decode step: logits over the charset and the (28, 28) attention
    /// map, head-averaged. keys/values are precomputed from the encoding.
    fn step(
        &self,
        keys: &Tensor,   // (heads, 784, hd)
        values: &Tensor, // (heads, 784, hd)
        prev: u32,
        t: usize,
        pos1d: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let d = &self.decoder;
        let hd = self.c / d.heads;
        let prev_idx = Tensor::from_vec(vec![prev.min(self.charset.unk())], 1, keys.device())?;
        let emb = d.embed.index_select(&prev_idx, 0)?.squeeze(0)?; // (C,)
        let q = (emb + pos1d.narrow(0, t, 1)?.squeeze(0)?)?;
        let q = d
            .wq
            .forward(&q.unsqueeze(0)?)?
            .reshape((d.heads, 1, hd))?;
        let scale = 1.0 / (hd as f64).sqrt();
        let logits = (q.matmul(&keys.transpose(1, 2)?)? * scale)?; // (heads, 1, 784)
        let attn = candle_nn::ops::softmax(&logits, D::Minus1)?;
        let ctx = attn.matmul(values)?.reshape((1, self.c))?; // (1, C)
        let cls = d.out.forward(&ctx)?.squeeze(0)?; // (vocab,)
        let map = attn
            .reshape((d.heads, REC_TOKENS))?
            .mean(0)?
            .reshape((REC_SIZE, REC_SIZE))?;
        Ok((cls, map))
    }

    /// Decode T steps. Teacher forcing feeds the gold previous symbols;
    /// greedy feeds its own argmax and stops the decoded text at EOS.
    pub fn recognize(&self, enc: &Tensor, mode: DecodeMode) -> Result<SequencePrediction> {
        let (c, h, w) = enc.dims3()?;
        let d = &self.decoder;
        let hd = c / d.heads;
        let pos2d = sinusoidal_2d(c, h, w, enc.device())?; // (784, C)
        let tokens = enc.reshape((c, h * w))?.t()?.contiguous()?;
        let keyed = (&tokens + &pos2d)?;
        let split = |t: &Tensor| -> Result<Tensor> {
            Ok(t.reshape((REC_TOKENS, d.heads, hd))?
                .permute((1, 0, 2))?
                .contiguous()?)
        };
        let keys = split(&d.wk.forward(&keyed)?)?;
        let values = split(&d.wv.forward(&tokens)?)?;
        let pos1d = sinusoidal_1d(c, self.t_max, enc.device())?;

        if let DecodeMode::TeacherForced(targets) = &mode {
            if targets.len() != self.t_max {
                return Err(Error::Config(format!(
                    "teacher forcing needs {} targets, got {}",
                    self.t_max,
                    targets.len()
                )));
            }
        }

        let mut prev = self.charset.eos(); // start marker
        let mut step_logits = Vec::with_capacity(self.t_max);
        let mut attn = Vec::with_capacity(self.t_max);
        let mut text = String::new();
        let mut ended = false;
        for t in 0..self.t_max {
            let (cls, map) = self.step(&keys, &values, prev, t, &pos1d)?;
            attn.push(map);
            let pred = cls
                .argmax(0)?
                .to_dtype(candle_core::DType::U32)?
                .to_scalar::<u32>()?;
            step_logits.push(cls);
            if !ended {
                if let Some(ch) = self.charset.decode_symbol(pred) {
                    text.push(ch);
                } else {
                    ended = true; // EOS/PAD/UNK terminates the transcription
                }
            }
            prev = match &mode {
                DecodeMode::TeacherForced(targets) => targets[t],
                DecodeMode::Greedy => pred,
            };
        }
        Ok(SequencePrediction { logits: Tensor::stack(&step_logits, 0)?, text, attn })
    }
}
