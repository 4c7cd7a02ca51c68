//! Trainable parameters and the layers shared by the denoiser, the control
//! classifier and the teacher language model.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)
}

/// A named tensor that can be placed on a tape as a leaf. Each parameter has
/// a process-unique id, so cloning a model yields independent parameters.
#[derive(Debug)]
pub struct Param {
    id: u64,
    pub name: String,
    pub value: Tensor,
}

impl Clone for Param {
    fn clone(&self) -> Self {
        Self {
            id: fresh_id(),
            name: self.name.clone(),
            value: self.value.clone(),
        }
    }
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            id: fresh_id(),
            name: name.into(),
            value: value.with_grad(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn trainable(&self) -> bool {
        self.value.requires_grad()
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.value.set_requires_grad(on);
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn var<'t>(&self, tape: &'t Tape) -> Var<'t> {
        tape.param_leaf(self.id, &self.value)
    }

    /// Adds this parameter's gradient from `tape` (if any) into its tensor.
    pub fn pull_grad(&mut self, tape: &Tape) -> Result<()> {
        if !self.trainable() {
            return Ok(());
        }
        if let Some(g) = tape.param_grad(self.id) {
            self.value.accumulate_grad(&g)?;
        }
        Ok(())
    }
}

/// Normal entries with standard deviation `std`.
pub fn normal_tensor<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

/// Anything that owns parameters, visited in a fixed order.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn pull_grads(&mut self, tape: &Tape) -> Result<()> {
        for p in self.params_mut() {
            p.pull_grad(tape)?;
        }
        Ok(())
    }

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.value.zero_grad();
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    fn trainable_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|p| p.trainable())
            .map(|p| p.numel())
            .sum()
    }

    fn set_trainable(&mut self, on: bool) {
        for p in self.params_mut() {
            p.set_trainable(on);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Option<Param>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Self {
        Self {
            w: Param::new(
                format!("{name}.w"),
                normal_tensor(&[fan_in, fan_out], (fan_in as f64).powf(-0.5), rng),
            ),
            b: bias.then(|| Param::new(format!("{name}.b"), Tensor::zeros(&[fan_out]))),
        }
    }

    pub fn fan_out(&self) -> usize {
        self.w.value.shape()[1]
    }

    /// `x` is `[rows, fan_in]`.
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(self.w.var(tape))?;
        match &self.b {
            Some(b) => y.add(b.var(tape).expand(&y.shape())?),
            None => Ok(y),
        }
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.w).chain(self.b.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.w).chain(self.b.as_mut()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

impl LayerNorm {
    pub fn new(name: &str, width: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[width], 1.0)),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(self.gamma.var(tape), self.beta.var(tape))
    }
}

impl Module for LayerNorm {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Inverted dropout with a mask drawn from `rng`; identity when `p == 0`.
pub fn dropout<'t, R: Rng + ?Sized>(x: Var<'t>, p: f64, rng: Option<&mut R>) -> Result<Var<'t>> {
    let Some(rng) = rng else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let mask = Tensor::from_fn(&x.shape(), |_| if rng.random::<f64>() < p { 0.0 } else { keep });
    x.mul(x.tape().constant(mask))
}

/// Sinusoidal features of a scalar position, `width` must be even.
pub fn sinusoid(pos: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (pos * freq).sin();
        out[half + i] = (pos * freq).cos();
    }
    out
}

/// Low-rank update `s * relu(h W_down) W_up` added to a projection output.
#[derive(Debug, Clone)]
pub struct Lora {
    pub down: Param,
    pub up: Param,
    pub scale: f64,
}

impl Lora {
    pub fn new<R: Rng + ?Sized>(name: &str, width: usize, rank: usize, alpha: f64, rng: &mut R) -> Self {
        Self {
            down: Param::new(
                format!("{name}.down"),
                normal_tensor(&[width, rank], (width as f64).powf(-0.5), rng),
            ),
            up: Param::new(format!("{name}.up"), Tensor::zeros(&[rank, width])),
            scale: alpha / rank as f64,
        }
    }

    pub fn rank(&self) -> usize {
        self.down.value.shape()[1]
    }

    pub fn forward<'t>(&self, tape: &'t Tape, h: Var<'t>) -> Result<Var<'t>> {
        Ok(h.matmul(self.down.var(tape))?
            .relu()
            .matmul(self.up.var(tape))?
            .scale(self.scale))
    }
}

impl Module for Lora {
    fn params(&self) -> Vec<&Param> {
        vec![&self.down, &self.up]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.down, &mut self.up]
    }
}

/// Pre-LN transformer block over `[batch * len, width]` activations.
#[derive(Debug, Clone)]
pub struct Block {
    pub heads: usize,
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub lora_k: Option<Lora>,
    pub lora_v: Option<Lora>,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(name: &str, width: usize, heads: usize, ff: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {width} is not divisible by {heads} heads")));
        }
        Ok(Self {
            heads,
            ln1: LayerNorm::new(&format!("{name}.ln1"), width),
            wq: Linear::new(&format!("{name}.wq"), width, width, true, rng),
            // a key bias shifts every score of a query equally, so it is omitted
            wk: Linear::new(&format!("{name}.wk"), width, width, false, rng),
            wv: Linear::new(&format!("{name}.wv"), width, width, true, rng),
            wo: Linear::new(&format!("{name}.wo"), width, width, true, rng),
            ln2: LayerNorm::new(&format!("{name}.ln2"), width),
            ff1: Linear::new(&format!("{name}.ff1"), width, ff, true, rng),
            ff2: Linear::new(&format!("{name}.ff2"), ff, width, true, rng),
            lora_k: None,
            lora_v: None,
        })
    }

    /// `x` is `[batch * len, width]`. `mask`, if given, is added to the
    /// `[batch * heads, len, len]` attention scores.
    pub fn forward<'t, R: Rng + ?Sized>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        batch: usize,
        len: usize,
        mask: Option<Var<'t>>,
        drop: f64,
        mut rng: Option<&mut R>,
    ) -> Result<Var<'t>> {
        let width = self.wq.fan_out();
        let (heads, dh) = (self.heads, width / self.heads);
        let a = self.ln1.forward(tape, x)?;
        let q = self.wq.forward(tape, a)?;
        let mut k = self.wk.forward(tape, a)?;
        let mut v = self.wv.forward(tape, a)?;
        if let Some(l) = &self.lora_k {
            k = k.add(l.forward(tape, a)?)?;
        }
        if let Some(l) = &self.lora_v {
            v = v.add(l.forward(tape, a)?)?;
        }
        let split = |t: Var<'t>| -> Result<Var<'t>> {
            t.reshape(&[batch, len, heads, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[batch * heads, len, dh])
        };
        let (q, k, v) = (split(q)?, split(k)?, split(v)?);
        let mut scores = q.matmul(k.transpose()?)?.scale((dh as f64).powf(-0.5));
        if let Some(m) = mask {
            scores = scores.add(m)?;
        }
        let ctx = scores
            .softmax()?
            .matmul(v)?
            .reshape(&[batch, heads, len, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[batch * len, width])?;
        let attn = dropout(self.wo.forward(tape, ctx)?, drop, rng.as_deref_mut())?;
        let h = x.add(attn)?;
        let f = self.ln2.forward(tape, h)?;
        let f = self.ff2.forward(tape, self.ff1.forward(tape, f)?.gelu())?;
        h.add(dropout(f, drop, rng)?)
    }

    pub fn adapters(&self) -> impl Iterator<Item = &Lora> {
        self.lora_k.iter().chain(self.lora_v.iter())
    }
}

impl Module for Block {
    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        out.extend(self.ln1.params());
        for l in [&self.wq, &self.wk, &self.wv, &self.wo] {
            out.extend(l.params());
        }
        out.extend(self.ln2.params());
        out.extend(self.ff1.params());
        out.extend(self.ff2.params());
        for l in self.lora_k.iter().chain(self.lora_v.iter()) {
            out.extend(l.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        out.extend(self.ln1.params_mut());
        for l in [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo] {
            out.extend(l.params_mut());
        }
        out.extend(self.ln2.params_mut());
        out.extend(self.ff1.params_mut());
        out.extend(self.ff2.params_mut());
        for l in self.lora_k.iter_mut().chain(self.lora_v.iter_mut()) {
            out.extend(l.params_mut());
        }
        out
    }
}

/// Additive causal mask for `[batch * heads, len, len]` scores.
pub fn causal_mask(groups: usize, len: usize) -> Tensor {
    Tensor::from_fn(&[groups, len, len], |i| {
        let (r, c) = ((i / len) % len, i % len);
        if c > r {
            -1e9
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clone_gets_fresh_ids() {
        let p = Param::new("p", Tensor::zeros(&[2]));
        let q = p.clone();
        assert_ne!(p.id(), q.id());
        assert_eq!(p.value, q.value);
    }

    #[test]
    fn lora_starts_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Lora::new("l", 16, 8, 16.0, &mut rng);
        assert_eq!(l.scale, 2.0);
        let tape = Tape::new();
        let h = tape.constant(normal_tensor(&[5, 16], 1.0, &mut rng));
        assert!(l.forward(&tape, h).unwrap().value().iter().all(|&v| v == 0.0));
        assert_eq!(l.param_count(), 2 * 16 * 8);
    }

    #[test]
    fn causal_mask_blocks_future() {
        let m = causal_mask(2, 3);
        assert_eq!(&m.data()[..9], &[0.0, -1e9, -1e9, 0.0, 0.0, -1e9, 0.0, 0.0, 0.0]);
        assert_eq!(&m.data()[..9], &m.data()[9..]);
    }

    #[test]
    fn causal_block_ignores_future_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = Block::new("b", 8, 2, 16, &mut rng).unwrap();
        let x = normal_tensor(&[4, 8], 1.0, &mut rng);
        let mut y = x.clone();
        y.data_mut()[3 * 8] += 5.0;
        let run = |t: &Tensor| {
            let tape = Tape::new();
            let m = tape.constant(causal_mask(2, 4));
            block
                .forward::<ChaCha8Rng>(&tape, tape.constant(t.clone()), 1, 4, Some(m), 0.0, None)
                .unwrap()
                .to_tensor()
        };
        let (a, b) = (run(&x), run(&y));
        assert_eq!(&a.data()[..24], &b.data()[..24]);
        assert_ne!(&a.data()[24..], &b.data()[24..]);
    }

    #[test]
    fn dropout_is_identity_without_rng_and_scales_with() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1000], 1.0));
        let same = dropout::<ChaCha8Rng>(x, 0.5, None).unwrap();
        assert_eq!(same.id(), x.id());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = dropout(x, 0.5, Some(&mut rng)).unwrap();
        let v = d.value();
        assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));
        let mean = v.iter().sum::<f64>() / 1000.0;
        assert!((mean - 1.0).abs() < 0.15);
    }

    #[test]
    fn sinusoid_distinguishes_positions() {
        let a = sinusoid(1.0, 8);
        let b = sinusoid(2.0, 8);
        assert_ne!(a, b);
        assert_eq!(a[4], 1.0f64.cos());
    }
}
