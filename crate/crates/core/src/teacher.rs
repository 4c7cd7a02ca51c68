//! A small causal transformer language model used to score fluency.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::{Vocabulary, END, PAD};
use crate::error::{Error, Result};
use crate::nn::{causal_mask, normal_tensor, Block, LayerNorm, Linear, Module, Param};
use crate::optim::{linear_decay, AdamW};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub seq_len: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            width: 32,
            layers: 2,
            heads: 2,
            ff: 128,
            seq_len: 16,
            iterations: 1000,
            batch_size: 16,
            lr: 3e-3,
            seed: 0,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.width, self.layers, self.heads, self.ff, self.batch_size].contains(&0) || self.seq_len < 2 {
            return Err(Error::Config("teacher sizes must be positive and seq_len >= 2".into()));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "teacher width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("teacher lr must be > 0, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Teacher {
    pub vocab: Vocabulary,
    pub seq_len: usize,
    pub tok: Param,
    pub pos: Param,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub out: Linear,
}

impl Teacher {
    pub fn new<R: Rng + ?Sized>(vocab: Vocabulary, cfg: &TeacherConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let v = vocab.len();
        let w = cfg.width;
        Ok(Self {
            tok: Param::new("teacher.tok", normal_tensor(&[v, w], 0.1, rng)),
            pos: Param::new("teacher.pos", normal_tensor(&[cfg.seq_len, w], 0.02, rng)),
            blocks: (0..cfg.layers)
                .map(|i| Block::new(&format!("teacher.block{i}"), w, cfg.heads, cfg.ff, rng))
                .collect::<Result<_>>()?,
            ln_f: LayerNorm::new("teacher.ln_f", w),
            out: Linear::new("teacher.out", w, v, true, rng),
            seq_len: cfg.seq_len,
            vocab,
        })
    }

    pub fn width(&self) -> usize {
        self.tok.value.shape()[1]
    }

    /// Next-token log-probabilities `[batch * n, vocab]` for `[batch][n]` ids.
    pub fn forward<'t>(&self, tape: &'t Tape, ids: &[Vec<usize>]) -> Result<Var<'t>> {
        let n = self.seq_len;
        let batch = ids.len();
        if batch == 0 || ids.iter().any(|s| s.len() != n) {
            return Err(Error::dim("teacher", &[batch], &[n]));
        }
        let flat: Vec<usize> = ids.iter().flatten().copied().collect();
        if let Some(&bad) = flat.iter().find(|&&i| i >= self.vocab.len()) {
            return Err(Error::Vocabulary(format!("token id {bad} outside teacher vocabulary")));
        }
        let w = self.width();
        let heads = self.blocks.first().map_or(1, |b| b.heads);
        let mut h = self
            .tok
            .var(tape)
            .gather_rows(&flat)?
            .add(self.pos.var(tape).expand(&[batch, n, w])?.reshape(&[batch * n, w])?)?;
        let mask = tape.constant(causal_mask(batch * heads, n));
        for b in &self.blocks {
            h = b.forward::<ChaCha8Rng>(tape, h, batch, n, Some(mask), 0.0, None)?;
        }
        self.out.forward(tape, self.ln_f.forward(tape, h)?)?.log_softmax()
    }

    /// Targets for next-token prediction: each position predicts the next
    /// id, up to and including the first END.
    fn targets(ids: &[usize]) -> Vec<Option<usize>> {
        let end = ids.iter().position(|&i| i == END).unwrap_or(ids.len() - 1);
        (0..ids.len())
            .map(|p| if p < end && ids[p + 1] != PAD { Some(ids[p + 1]) } else { None })
            .collect()
    }

    /// Summed negative log-likelihood and token count of a line. START,
    /// END and PAD markers in `line` are ignored; words outside the
    /// vocabulary score as UNK.
    pub fn line_nll(&self, line: &str) -> Result<(f64, usize)> {
        let words = crate::embedding::content_words(line).join(" ");
        let ids = self.vocab.encode(&words, self.seq_len);
        let targets = Self::targets(&ids);
        let tape = Tape::new();
        let lp = self.forward(&tape, std::slice::from_ref(&ids))?.to_tensor();
        let v = self.vocab.len();
        let mut nll = 0.0;
        let mut count = 0;
        for (p, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                nll -= lp.data()[p * v + t];
                count += 1;
            }
        }
        Ok((nll, count))
    }

    /// Most probable continuation of START, stopping at END.
    pub fn greedy(&self) -> Result<String> {
        let mut ids = vec![crate::embedding::START];
        let v = self.vocab.len();
        while ids.len() < self.seq_len {
            let mut padded = ids.clone();
            padded.resize(self.seq_len, PAD);
            let tape = Tape::new();
            let lp = self.forward(&tape, &[padded])?.to_tensor();
            let p = ids.len() - 1;
            let next = crate::embedding::argmax(&lp.data()[p * v..(p + 1) * v]);
            ids.push(next);
            if next == END {
                break;
            }
        }
        Ok(self.vocab.decode(&ids))
    }
}

impl Module for Teacher {
    fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.tok, &self.pos];
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.extend(self.ln_f.params());
        out.extend(self.out.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.tok, &mut self.pos];
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend(self.ln_f.params_mut());
        out.extend(self.out.params_mut());
        out
    }
}

/// Trains a teacher on `lines` with next-token cross-entropy.
pub fn train_teacher(lines: &[String], vocab: &Vocabulary, cfg: &TeacherConfig) -> Result<Teacher> {
    if lines.is_empty() {
        return Err(Error::Contract("teacher corpus is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut teacher = Teacher::new(vocab.clone(), cfg, &mut rng)?;
    let seqs: Vec<Vec<usize>> = lines.iter().map(|l| vocab.encode(l, cfg.seq_len)).collect();
    let mut opt = AdamW::default();
    for it in 0..cfg.iterations {
        let batch: Vec<Vec<usize>> = (0..cfg.batch_size)
            .map(|_| seqs[rng.random_range(0..seqs.len())].clone())
            .collect();
        let targets: Vec<Option<usize>> = batch.iter().flat_map(|s| Teacher::targets(s)).collect();
        let tape = Tape::new();
        let loss = teacher.forward(&tape, &batch)?.cross_entropy(&targets)?;
        tape.backward(loss)?;
        teacher.zero_grads();
        teacher.pull_grads(&tape)?;
        opt.step(teacher.params_mut(), linear_decay(cfg.lr, it, cfg.iterations))?;
    }
    Ok(teacher)
}

/// Perplexity `exp(mean token NLL)` of `lines` under `teacher`.
pub fn perplexity(teacher: &Teacher, lines: &[String]) -> Result<f64> {
    let (mut nll, mut count) = (0.0, 0usize);
    for l in lines {
        let (n, c) = teacher.line_nll(l)?;
        nll += n;
        count += c;
    }
    if count == 0 {
        return Err(Error::Contract("perplexity needs at least one token".into()));
    }
    Ok((nll / count as f64).exp())
}

/// Uniform logits over `vocab`, useful as a reference scorer.
pub fn uniform_teacher(vocab: Vocabulary, cfg: &TeacherConfig) -> Result<Teacher> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut t = Teacher::new(vocab, cfg, &mut rng)?;
    t.out.w.value = Tensor::zeros(t.out.w.value.shape()).with_grad();
    if let Some(b) = t.out.b.as_mut() {
        b.value = Tensor::zeros(b.value.shape()).with_grad();
    }
    Ok(t)
}
