//! Reverse-chain sampling with clamping, classifier-guided latent updates
//! and classifier-free length control.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{split_indices, Labels};
use crate::denoiser::DenoiserModel;
use crate::embedding::{content_words, ClampMode, EmbeddingTable, Vocabulary, END, PAD, START};
use crate::error::{Error, Result};
use crate::nn::{Linear, Module, Param};
use crate::optim::{Adagrad, AdamW};
use crate::quantize::{QuantKind, QuantizerSpec};
use crate::schedule::{downsample_steps, NoiseSchedule};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlTarget {
    Semantic { field: String, value: String },
    Length { target_len: usize },
}

impl ControlTarget {
    pub fn semantic(field: &str, value: &str) -> Result<Self> {
        let t = Self::Semantic {
            field: field.to_string(),
            value: value.to_string(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn length(target_len: usize) -> Result<Self> {
        let t = Self::Length { target_len };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Semantic { field, value } if field.trim().is_empty() || value.trim().is_empty() => Err(
                Error::Config("semantic target needs a nonempty field and value".into()),
            ),
            Self::Length { target_len: 0 } => Err(Error::Config("target length must be >= 1".into())),
            _ => Ok(()),
        }
    }

    /// Whether a detokenized sample meets the target: the value's words occur
    /// contiguously, or the content length is within two of the target.
    pub fn satisfied_by(&self, text: &str) -> bool {
        let words = content_words(text);
        match self {
            Self::Semantic { value, .. } => {
                let want: Vec<&str> = value.split_whitespace().collect();
                !want.is_empty() && words.windows(want.len()).any(|w| w == want.as_slice())
            }
            Self::Length { target_len } => words.len().abs_diff(*target_len) <= 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    /// Weight of the fluency (Gaussian) term.
    pub lambda: f64,
    pub lr: f64,
    pub inner_steps: usize,
    pub sample_steps: usize,
    /// Bits of the sampling-time clamp quantizer; `None` keeps the table's.
    pub quant_bits: Option<u32>,
    /// Quantized part: -1 fractional, +1 integer, 0 fixed point.
    pub part: i8,
    pub clamp: ClampMode,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            lr: 0.1,
            inner_steps: 3,
            sample_steps: 200,
            quant_bits: None,
            part: -1,
            clamp: ClampMode::None,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("guidance lr must be > 0, got {}", self.lr)));
        }
        if self.inner_steps == 0 {
            return Err(Error::Config("inner_steps must be >= 1".into()));
        }
        if self.sample_steps == 0 || self.sample_steps > steps {
            return Err(Error::Config(format!(
                "sample_steps must be in [1, {steps}], got {}",
                self.sample_steps
            )));
        }
        if !(-1..=1).contains(&self.part) {
            return Err(Error::Config(format!("part must be -1, 0 or 1, got {}", self.part)));
        }
        self.sampling_quant().map(|_| ())
    }

    /// Selects the sampling clamp quantizer from a spec: `Q0i.{b}f`
    /// (fractional part), `Q{b}i.0f` (integer part), `fixed:n=b` or `none`.
    /// A quantizer also switches clamping to `quantized_nearest`.
    pub fn set_sampling_quant(&mut self, spec: &QuantizerSpec) -> Result<()> {
        let reject = || Error::Config(format!("`{spec}` cannot be used as a sampling quantizer"));
        (self.quant_bits, self.part) = match spec.kind {
            QuantKind::None => (None, self.part),
            QuantKind::FixedPoint => (Some(spec.n_bits), 0),
            QuantKind::PartSelect => match spec.bits().ok_or_else(reject)? {
                (0, b) if b > 0 => (Some(b), -1),
                (a, 0) if a > 0 => (Some(a), 1),
                _ => return Err(reject()),
            },
            _ => return Err(reject()),
        };
        if self.quant_bits.is_some() {
            self.clamp = ClampMode::QuantizedNearest;
        }
        Ok(())
    }

    /// The clamp quantizer selected by `quant_bits` and `part`, if any.
    pub fn sampling_quant(&self) -> Result<Option<QuantizerSpec>> {
        let Some(bits) = self.quant_bits else { return Ok(None) };
        let spec = match self.part {
            -1 => QuantizerSpec::q_format(0, bits)?,
            1 => QuantizerSpec::q_format(bits, 0)?,
            _ => QuantizerSpec::fixed_point(bits)?,
        };
        Ok(Some(spec))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Share of training latents left un-noised; the rest get a uniform step.
    pub clean_fraction: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            iterations: 1000,
            batch_size: 32,
            lr: 1e-2,
            seed: 0,
            clean_fraction: 0.5,
        }
    }
}

/// Per-position two-layer MLP, mean-pooled over positions, then a linear
/// map to class log-probabilities.
#[derive(Debug, Clone)]
pub struct ControlClassifier {
    pub field: String,
    pub classes: Vec<String>,
    pub seq_len: usize,
    /// Fixed factor applied to the latents before the first layer.
    pub input_scale: f64,
    pub l1: Linear,
    pub l2: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierReport {
    /// Held-out accuracy on clean latents.
    pub accuracy: f64,
    pub chance: f64,
    pub train_size: usize,
    pub eval_size: usize,
}

impl ControlClassifier {
    pub fn new<R: Rng + ?Sized>(
        field: &str,
        classes: Vec<String>,
        seq_len: usize,
        dim: usize,
        hidden: usize,
        input_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::Labels(format!(
                "field `{field}` needs at least two classes, got {}",
                classes.len()
            )));
        }
        if seq_len == 0 || dim == 0 || hidden == 0 {
            return Err(Error::Config("classifier sizes must be positive".into()));
        }
        if !(input_scale > 0.0 && input_scale.is_finite()) {
            return Err(Error::Config(format!("classifier input scale must be > 0, got {input_scale}")));
        }
        Ok(Self {
            field: field.to_string(),
            seq_len,
            input_scale,
            l1: Linear::new("cls.l1", dim, hidden, true, rng),
            l2: Linear::new("cls.l2", hidden, hidden, true, rng),
            out: Linear::new("cls.out", hidden, classes.len(), true, rng),
            classes,
        })
    }

    pub fn dim(&self) -> usize {
        self.l1.w.value.shape()[0]
    }

    pub fn class_index(&self, value: &str) -> Result<usize> {
        self.classes.iter().position(|c| c == value).ok_or_else(|| {
            Error::Config(format!(
                "value `{value}` is not a class of field `{}` (classes: {})",
                self.field,
                self.classes.join(", ")
            ))
        })
    }

    /// Class log-probabilities `[batch, classes]` for `x` of `[batch * n, d]`.
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, batch: usize) -> Result<Var<'t>> {
        let (n, d) = (self.seq_len, self.dim());
        if x.numel() != batch * n * d {
            return Err(Error::dim("classifier", &x.shape(), &[batch, n, d]));
        }
        let h = self.l1.forward(tape, x.reshape(&[batch * n, d])?.scale(self.input_scale))?.gelu();
        let h = self.l2.forward(tape, h)?.gelu();
        let width = h.shape()[1];
        let pooled = h
            .reshape(&[batch, n, width])?
            .permute(&[0, 2, 1])?
            .sum_last()
            .scale(1.0 / n as f64);
        self.out.forward(tape, pooled)?.log_softmax()
    }

    /// `log p(class | x)` and its gradient with respect to `x` (`[n, d]`).
    pub fn log_prob_grad(&self, x: &Tensor, class: usize) -> Result<(f64, Vec<f64>)> {
        if class >= self.classes.len() {
            return Err(Error::Index {
                what: "class",
                index: class,
                lo: 0,
                hi: self.classes.len() - 1,
            });
        }
        let tape = Tape::new();
        let xv = tape.leaf(&x.clone().with_grad());
        let nll = self.forward(&tape, xv, 1)?.cross_entropy(&[Some(class)])?;
        let value = -nll.item();
        tape.backward(nll)?;
        let g = xv.grad().unwrap_or_else(|| vec![0.0; x.numel()]);
        Ok((value, g.into_iter().map(|v| -v).collect()))
    }

    /// Most probable class for each `[n, d]` latent in `x` (`[batch, n, d]`).
    pub fn predict(&self, x: &Tensor, batch: usize) -> Result<Vec<usize>> {
        let tape = Tape::new();
        let lp = self.forward(&tape, tape.constant(x.clone()), batch)?.to_tensor();
        let c = self.classes.len();
        Ok((0..batch).map(|b| crate::embedding::argmax(&lp.data()[b * c..(b + 1) * c])).collect())
    }
}

impl Module for ControlClassifier {
    fn params(&self) -> Vec<&Param> {
        let mut out = self.l1.params();
        out.extend(self.l2.params());
        out.extend(self.out.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.l1.params_mut();
        out.extend(self.l2.params_mut());
        out.extend(self.out.params_mut());
        out
    }
}

/// Trains a classifier for `field` on latents of the labelled lines, a
/// `clean_fraction` share un-noised and the rest noised to a uniformly
/// drawn step in `[1, T]`. Lines without the field are
/// skipped. Latents are divided by the RMS of the effective table before
/// the first layer. Accuracy is measured on held-out clean latents.
pub fn train_classifier(
    lines: &[String],
    labels: &[Labels],
    field: &str,
    vocab: &Vocabulary,
    table: &EmbeddingTable,
    sched: &NoiseSchedule,
    seq_len: usize,
    cfg: &ClassifierConfig,
) -> Result<(ControlClassifier, ClassifierReport)> {
    if lines.len() != labels.len() {
        return Err(Error::dim("labels", &[lines.len()], &[labels.len()]));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("classifier batch_size and lr must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.clean_fraction) {
        return Err(Error::Config(format!(
            "clean_fraction must be in [0, 1], got {}",
            cfg.clean_fraction
        )));
    }
    let labelled: Vec<(Vec<usize>, &str)> = lines
        .iter()
        .zip(labels)
        .filter_map(|(l, lab)| lab.get(field).map(|v| (vocab.encode(l, seq_len), v.as_str())))
        .collect();
    let mut classes: Vec<String> = labelled.iter().map(|(_, v)| v.to_string()).collect();
    classes.sort();
    classes.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eff = table.effective();
    let rms = (eff.sq_norm() / eff.numel() as f64).sqrt();
    let scale = if rms > 0.0 { 1.0 / rms } else { 1.0 };
    let mut clf = ControlClassifier::new(field, classes, seq_len, table.dim(), cfg.hidden, scale, &mut rng)?;
    let data: Vec<(Vec<usize>, usize)> = labelled
        .into_iter()
        .map(|(ids, v)| (ids, clf.class_index(v).expect("class collected above")))
        .collect();
    let (train_idx, eval_idx) = split_indices(data.len());
    let d = table.dim();
    let steps = sched.steps();

    let mut opt = AdamW::new(0.0);
    for _ in 0..cfg.iterations {
        let mut x = Vec::with_capacity(cfg.batch_size * seq_len * d);
        let mut targets = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (ids, class) = &data[train_idx[rng.random_range(0..train_idx.len())]];
            let eps = Tensor::randn(&[seq_len, d], &mut rng);
            let x0 = table.embed(ids, Some(&eps))?;
            let t = if rng.random_bool(cfg.clean_fraction) { 0 } else { rng.random_range(1..=steps) };
            let xt = if t == 0 {
                x0
            } else {
                let noise = Tensor::randn(&[seq_len, d], &mut rng);
                sched.forward_sample(&x0, t, &noise)?
            };
            x.extend_from_slice(xt.data());
            targets.push(Some(*class));
        }
        let tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![cfg.batch_size * seq_len, d], x)?);
        let loss = clf.forward(&tape, xv, cfg.batch_size)?.cross_entropy(&targets)?;
        tape.backward(loss)?;
        clf.zero_grads();
        clf.pull_grads(&tape)?;
        opt.step(clf.params_mut(), cfg.lr)?;
    }

    let mut correct = 0;
    for &i in &eval_idx {
        let (ids, class) = &data[i];
        let eps = Tensor::randn(&[seq_len, d], &mut rng);
        let x0 = table.embed(ids, Some(&eps))?;
        if clf.predict(&x0, 1)?[0] == *class {
            correct += 1;
        }
    }
    let report = ClassifierReport {
        accuracy: correct as f64 / eval_idx.len().max(1) as f64,
        chance: 1.0 / clf.classes.len() as f64,
        train_size: train_idx.len(),
        eval_size: eval_idx.len(),
    };
    Ok((clf, report))
}

/// A differentiable `log p(c | x)` for latents `x`.
pub trait ClassScore {
    fn log_prob_grad(&self, x: &Tensor) -> Result<(f64, Vec<f64>)>;
}

/// A trained classifier paired with the class to steer towards.
pub struct ClassTarget<'a> {
    pub classifier: &'a ControlClassifier,
    pub class: usize,
}

impl ClassScore for ClassTarget<'_> {
    fn log_prob_grad(&self, x: &Tensor) -> Result<(f64, Vec<f64>)> {
        self.classifier.log_prob_grad(x, self.class)
    }
}

/// `cfg.inner_steps` fresh-state Adagrad ascent steps on
/// `J(x) = lambda * log N(x; mean, variance I) + log p(c | x)` from `x_prev`.
pub fn guided_update(
    x_prev: &Tensor,
    mean: &Tensor,
    variance: f64,
    score: &dyn ClassScore,
    cfg: &GuidanceConfig,
    step: usize,
) -> Result<Tensor> {
    if x_prev.shape() != mean.shape() {
        return Err(Error::dim("guided_update", x_prev.shape(), mean.shape()));
    }
    if !(variance > 0.0 && variance.is_finite()) {
        return Err(Error::Guidance {
            step,
            reason: format!("posterior variance {variance} is not positive"),
        });
    }
    let mut x = x_prev.clone();
    let mut opt = Adagrad::new(cfg.lr, x.numel());
    for _ in 0..cfg.inner_steps {
        let (_, mut g) = score.log_prob_grad(&x)?;
        if g.len() != x.numel() {
            return Err(Error::dim("guided_update gradient", &[g.len()], &[x.numel()]));
        }
        for ((gi, xi), mi) in g.iter_mut().zip(x.data()).zip(mean.data()) {
            *gi += cfg.lambda * (mi - xi) / variance;
        }
        if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Guidance {
                step,
                reason: format!("non-finite gradient at coordinate {bad}"),
            });
        }
        opt.ascend(x.data_mut(), &g)?;
    }
    Ok(x)
}

/// Per-step steering during a reverse chain.
pub enum Guide<'a> {
    None,
    Length(usize),
    Class(&'a dyn ClassScore),
}

/// Overwrites the rows of `x` (`[n, d]`) that a length target fixes: START
/// first, END right after `target_len` content rows, PAD after that.
pub fn pin_length(x: &mut Tensor, effective: &Tensor, target_len: usize) -> Result<()> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    if target_len + 2 > n {
        return Err(Error::Config(format!(
            "target length {target_len} does not fit a sequence of {n} (two slots are START and END)"
        )));
    }
    for pos in std::iter::once(0).chain(target_len + 1..n) {
        let id = match pos {
            0 => START,
            p if p == target_len + 1 => END,
            _ => PAD,
        };
        x.data_mut()[pos * d..(pos + 1) * d].copy_from_slice(effective.row(id));
    }
    Ok(())
}

/// One reverse chain over `cfg.sample_steps` evenly spaced steps. Each step
/// predicts x0, clamps it, applies the length pin, samples the posterior
/// between visited steps and, with a class guide, runs the guided update.
/// The final clamped prediction is rounded to token ids.
pub fn sample_chain<R: Rng + ?Sized>(
    model: &DenoiserModel,
    table: &EmbeddingTable,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    guide: &Guide<'_>,
    rng: &mut R,
) -> Result<Vec<usize>> {
    cfg.validate(sched.steps())?;
    let (n, d) = (model.config.seq_len, model.config.emb_dim);
    if sched.steps() != model.config.steps || table.dim() != d {
        return Err(Error::Config("model, table and schedule disagree on sizes".into()));
    }
    let quant = cfg.sampling_quant()?;
    let effective = table.effective();
    if let Guide::Length(len) = guide {
        pin_length(&mut Tensor::zeros(&[n, d]), &effective, *len)?;
    }
    let visit = downsample_steps(sched.steps(), cfg.sample_steps)?;
    let mut x = Tensor::randn(&[n, d], rng);
    for (i, &t) in visit.iter().enumerate() {
        let s = visit.get(i + 1).copied().unwrap_or(0);
        let x0_hat = model.predict(&x, t)?;
        let mut x0 = table.clamp_prediction(&x0_hat, cfg.clamp, quant.as_ref())?;
        if let Guide::Length(len) = guide {
            pin_length(&mut x0, &effective, *len)?;
        }
        if !x0.is_finite() {
            return Err(Error::Guidance {
                step: t,
                reason: "non-finite x0 prediction".into(),
            });
        }
        if s == 0 {
            x = x0;
            break;
        }
        let mean = sched.posterior_mean_between(&x0, &x, t, s)?;
        let variance = sched.posterior_variance_between(t, s)?;
        let z = Tensor::randn(&[n, d], rng);
        let sd = variance.sqrt();
        let mut next = Tensor::from_fn(&[n, d], |k| mean.data()[k] + sd * z.data()[k]);
        if let Guide::Class(score) = guide {
            next = guided_update(&next, &mean, variance, *score, cfg, t)?;
        }
        x = next;
    }
    table.round_to_words(&x)
}

/// An unguided sample.
pub fn sample<R: Rng + ?Sized>(
    model: &DenoiserModel,
    table: &EmbeddingTable,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    rng: &mut R,
) -> Result<Vec<usize>> {
    sample_chain(model, table, sched, cfg, &Guide::None, rng)
}

/// A sample steered towards `target`; the semantic task needs a classifier
/// trained for the target's field.
pub fn sample_controlled<R: Rng + ?Sized>(
    model: &DenoiserModel,
    table: &EmbeddingTable,
    sched: &NoiseSchedule,
    target: &ControlTarget,
    classifier: Option<&ControlClassifier>,
    cfg: &GuidanceConfig,
    rng: &mut R,
) -> Result<Vec<usize>> {
    target.validate()?;
    match target {
        ControlTarget::Length { target_len } => {
            sample_chain(model, table, sched, cfg, &Guide::Length(*target_len), rng)
        }
        ControlTarget::Semantic { field, value } => {
            let clf = classifier.ok_or_else(|| Error::Config("semantic control needs a classifier".into()))?;
            if &clf.field != field {
                return Err(Error::Config(format!(
                    "classifier scores field `{}`, target field is `{field}`",
                    clf.field
                )));
            }
            let class = clf.class_index(value)?;
            let score = ClassTarget { classifier: clf, class };
            sample_chain(model, table, sched, cfg, &Guide::Class(&score), rng)
        }
    }
}

/// Seed of chain `index` in a run seeded with `seed`.
pub fn chain_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(index as u64)
}
