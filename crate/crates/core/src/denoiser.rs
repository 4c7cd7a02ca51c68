//! The x0-predicting transformer `f(x_t, t)`, its LoRA adapters and the
//! tunable-parameter formulas.
//!
//! Latents of width `emb_dim` are projected up to the transformer width,
//! summed with positional and time embeddings, passed through pre-LN blocks
//! and projected back down.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::nn::{sinusoid, Block, LayerNorm, Linear, Lora, Module, Param};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    /// Latent (embedding) dimension `d`.
    pub emb_dim: usize,
    /// Transformer width.
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    /// Sequence length `n`.
    pub seq_len: usize,
    /// Diffusion steps `T`.
    pub steps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            emb_dim: 16,
            width: 64,
            layers: 2,
            heads: 2,
            ff: 256,
            seq_len: 16,
            steps: 200,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("emb_dim", self.emb_dim),
            ("width", self.width),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ff", self.ff),
            ("seq_len", self.seq_len),
            ("steps", self.steps),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !self.width.is_multiple_of(2) {
            return Err(Error::Config(format!("width {} must be even", self.width)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub config: DenoiserConfig,
    pub in_proj: Linear,
    pub time1: Linear,
    pub time2: Linear,
    pub pos: Param,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub out_proj: Linear,
}

impl DenoiserModel {
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, w) = (config.emb_dim, config.width);
        let in_proj = Linear::new("in_proj", d, w, true, rng);
        let time1 = Linear::new("time1", w, w, true, rng);
        let time2 = Linear::new("time2", w, w, true, rng);
        let pos = Param::new("pos", crate::nn::normal_tensor(&[config.seq_len, w], 0.02, rng));
        let blocks = (0..config.layers)
            .map(|i| Block::new(&format!("block{i}"), w, config.heads, config.ff, rng))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new("ln_f", w);
        let out_proj = Linear::new("out_proj", w, d, true, rng);
        Ok(Self {
            config,
            in_proj,
            time1,
            time2,
            pos,
            blocks,
            ln_f,
            out_proj,
        })
    }

    /// Batched prediction on the tape. `x` is `[batch, n, d]` (or
    /// `[batch * n, d]`), `ts[b]` is the step of sample `b`; the result is
    /// `[batch * n, d]`.
    pub fn forward<'t, R: Rng + ?Sized>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        ts: &[usize],
        drop: f64,
        mut rng: Option<&mut R>,
    ) -> Result<Var<'t>> {
        let c = &self.config;
        let (n, d, w) = (c.seq_len, c.emb_dim, c.width);
        let batch = ts.len();
        if batch == 0 || x.numel() != batch * n * d {
            return Err(Error::dim("denoise_predict", &x.shape(), &[batch, n, d]));
        }
        if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > c.steps) {
            return Err(Error::Index {
                what: "diffusion step",
                index: t,
                lo: 1,
                hi: c.steps,
            });
        }
        let x = x.reshape(&[batch * n, d])?;
        let feats: Vec<f64> = ts
            .iter()
            .flat_map(|&t| sinusoid(1000.0 * t as f64 / c.steps as f64, w))
            .collect();
        let temb = self.time2.forward(
            tape,
            self.time1.forward(tape, tape.constant(Tensor::new(vec![batch, w], feats)?))?.gelu(),
        )?;
        let rows: Vec<usize> = (0..batch).flat_map(|b| std::iter::repeat_n(b, n)).collect();
        let temb = temb.gather_rows(&rows)?;
        let pos = self.pos.var(tape).expand(&[batch, n, w])?.reshape(&[batch * n, w])?;
        let mut h = self.in_proj.forward(tape, x)?.add(pos)?.add(temb)?;
        for block in &self.blocks {
            h = block.forward(tape, h, batch, n, None, drop, rng.as_deref_mut())?;
        }
        self.out_proj.forward(tape, self.ln_f.forward(tape, h)?)
    }

    /// `f(x_t, t)` for a single `[n, d]` latent.
    pub fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        let tape = Tape::new();
        let out = self.forward::<rand_chacha::ChaCha8Rng>(&tape, tape.constant(x_t.clone()), &[t], 0.0, None)?;
        out.to_tensor().reshape(x_t.shape())
    }

    /// Predictions for `[batch, n, d]` latents at per-sample steps.
    pub fn predict_batch(&self, x_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let tape = Tape::new();
        let out = self.forward::<rand_chacha::ChaCha8Rng>(&tape, tape.constant(x_t.clone()), ts, 0.0, None)?;
        out.to_tensor().reshape(x_t.shape())
    }

    /// Freezes every base weight and adds rank-`rank` adapters on each
    /// layer's key and value projections.
    pub fn apply_lora<R: Rng + ?Sized>(&mut self, rank: usize, alpha: f64, rng: &mut R) -> Result<()> {
        let w = self.config.width;
        if rank == 0 || rank > w {
            return Err(Error::Config(format!("LoRA rank {rank} must lie in [1, {w}]")));
        }
        if self.has_lora() {
            return Err(Error::Config("model already has LoRA adapters".into()));
        }
        self.set_trainable(false);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.lora_k = Some(Lora::new(&format!("block{i}.lora_k"), w, rank, alpha, rng));
            b.lora_v = Some(Lora::new(&format!("block{i}.lora_v"), w, rank, alpha, rng));
        }
        Ok(())
    }

    pub fn has_lora(&self) -> bool {
        self.blocks.iter().any(|b| b.lora_k.is_some() || b.lora_v.is_some())
    }

    pub fn lora_rank(&self) -> Option<usize> {
        self.blocks.iter().flat_map(|b| b.adapters()).map(|l| l.rank()).next()
    }

    pub fn lora_scale(&self) -> Option<f64> {
        self.blocks.iter().flat_map(|b| b.adapters()).map(|l| l.scale).next()
    }

    pub fn adapter_count(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| b.adapters())
            .map(|l| l.param_count())
            .sum()
    }

    /// Weights of the four attention projections (biases excluded).
    pub fn attention_weight_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| [&b.wq, &b.wk, &b.wv, &b.wo].iter().map(|l| l.w.numel()).sum::<usize>())
            .sum()
    }
}

impl Module for DenoiserModel {
    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        out.extend(self.in_proj.params());
        out.extend(self.time1.params());
        out.extend(self.time2.params());
        out.push(&self.pos);
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.extend(self.ln_f.params());
        out.extend(self.out_proj.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        out.extend(self.in_proj.params_mut());
        out.extend(self.time1.params_mut());
        out.extend(self.time2.params_mut());
        out.push(&mut self.pos);
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend(self.ln_f.params_mut());
        out.extend(self.out_proj.params_mut());
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TuneMode {
    FullFt,
    FullFtQuant,
    LoraFt,
    LoraFtQuant,
}

impl TuneMode {
    pub fn is_lora(self) -> bool {
        matches!(self, TuneMode::LoraFt | TuneMode::LoraFtQuant)
    }

    pub fn is_quant(self) -> bool {
        matches!(self, TuneMode::FullFtQuant | TuneMode::LoraFtQuant)
    }
}

impl fmt::Display for TuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TuneMode::FullFt => "full_ft",
            TuneMode::FullFtQuant => "full_ft_quant",
            TuneMode::LoraFt => "lora_ft",
            TuneMode::LoraFtQuant => "lora_ft_quant",
        })
    }
}

impl FromStr for TuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full_ft" => Ok(TuneMode::FullFt),
            "full_ft_quant" => Ok(TuneMode::FullFtQuant),
            "lora_ft" => Ok(TuneMode::LoraFt),
            "lora_ft_quant" => Ok(TuneMode::LoraFtQuant),
            other => Err(Error::Config(format!("unknown tuning mode `{other}`"))),
        }
    }
}

/// Inputs of the tunable-parameter formulas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FormulaInputs {
    pub layers: usize,
    /// Attention width.
    pub width: usize,
    /// Embedding dimension.
    pub emb_dim: usize,
    /// Vocabulary size `h`.
    pub vocab: usize,
    pub rank: usize,
    /// `(integer bits, fractional bits)`.
    pub bits: (u32, u32),
}

/// `3 L w^2 + d h` (full) or `2 L w r + d h` (LoRA), with `d h` divided by
/// the total bit count in the quantized modes.
pub fn formula_count(mode: TuneMode, f: &FormulaInputs) -> Result<f64> {
    let attention = attention_term(mode, f);
    let mut emb = (f.emb_dim * f.vocab) as f64;
    if mode.is_quant() {
        let total = f.bits.0 + f.bits.1;
        if total == 0 {
            return Err(Error::Config("quantized mode needs a nonzero bit count".into()));
        }
        emb /= total as f64;
    }
    Ok(attention + emb)
}

/// The attention-side part of [`formula_count`].
pub fn attention_term(mode: TuneMode, f: &FormulaInputs) -> f64 {
    if mode.is_lora() {
        (2 * f.layers * f.width * f.rank) as f64
    } else {
        (3 * f.layers * f.width * f.width) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamCounts {
    pub formula: f64,
    pub formula_attention: f64,
    /// Parameters that currently require gradients (model and embedding).
    pub literal: usize,
    /// Adapter parameters in LoRA modes, attention projection weights otherwise.
    pub literal_attention: usize,
}

pub fn count_params(
    model: &DenoiserModel,
    table: &EmbeddingTable,
    mode: TuneMode,
    bits: (u32, u32),
    rank: usize,
) -> Result<ParamCounts> {
    let inputs = FormulaInputs {
        layers: model.config.layers,
        width: model.config.width,
        emb_dim: table.dim(),
        vocab: table.vocab_size(),
        rank,
        bits,
    };
    let literal_table = if table.weight.trainable() { table.weight.numel() } else { 0 };
    Ok(ParamCounts {
        formula: formula_count(mode, &inputs)?,
        formula_attention: attention_term(mode, &inputs),
        literal: model.trainable_count() + literal_table,
        literal_attention: if mode.is_lora() {
            model.adapter_count()
        } else {
            model.attention_weight_count()
        },
    })
}
