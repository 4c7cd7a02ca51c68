//! End-to-end training of the denoiser and the embedding table under the
//! x0-parametrized objective, in full or adapter fine-tuning mode.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::split_indices;
use crate::denoiser::{count_params, DenoiserConfig, DenoiserModel, ParamCounts, TuneMode};
use crate::embedding::{word_logits_var, ClampMode, EmbeddingTable, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::optim::{linear_decay, AdamW};
use crate::quantize::QuantizerSpec;
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    FullFt,
    LoraFt,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FullFt => "full_ft",
            Self::LoraFt => "lora_ft",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_ft" => Ok(Self::FullFt),
            "lora_ft" => Ok(Self::LoraFt),
            other => Err(Error::Config(format!("unknown training mode `{other}`"))),
        }
    }
}

/// Weight on the mean squared embedding norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EmbPenalty {
    /// `1 / (n d)` on the per-sequence squared norm.
    Mean,
    /// The `(T + 1)` coefficient on the per-sequence squared norm.
    StepScaled,
    Custom(f64),
}

impl EmbPenalty {
    /// Coefficient on the per-element mean of squared embedding entries.
    pub fn coefficient(self, steps: usize) -> f64 {
        match self {
            Self::Mean => 1.0,
            Self::StepScaled => (steps + 1) as f64,
            Self::Custom(c) => c,
        }
    }
}

impl fmt::Display for EmbPenalty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Mean => f.write_str("mean"),
            Self::StepScaled => f.write_str("steps"),
            Self::Custom(c) => write!(f, "{c}"),
        }
    }
}

impl FromStr for EmbPenalty {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "steps" => Ok(Self::StepScaled),
            other => match other.parse::<f64>() {
                Ok(c) if c >= 0.0 && c.is_finite() => Ok(Self::Custom(c)),
                _ => Err(Error::Config(format!("emb_penalty must be mean, steps or a number >= 0, got `{other}`"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: DenoiserConfig,
    pub mode: TrainMode,
    pub quant: QuantizerSpec,
    pub lr: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub seed: u64,
    pub schedule: ScheduleKind,
    pub s0: f64,
    pub clamp: ClampMode,
    pub sigma0: Option<f64>,
    pub emb_penalty: EmbPenalty,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Iterations between report rows.
    pub report_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: DenoiserConfig::default(),
            mode: TrainMode::FullFt,
            quant: QuantizerSpec::none(),
            lr: 1e-4,
            weight_decay: 0.01,
            iterations: 1000,
            batch_size: 64,
            dropout: 0.1,
            seed: 0,
            schedule: ScheduleKind::Sqrt,
            s0: 1e-4,
            clamp: ClampMode::Nearest,
            sigma0: None,
            emb_penalty: EmbPenalty::Mean,
            lora_rank: 8,
            lora_alpha: 16.0,
            report_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.quant.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.report_every == 0 {
            return Err(Error::Config("report_every must be >= 1".into()));
        }
        if let Some(s) = self.sigma0 {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("sigma0 must be >= 0, got {s}")));
            }
        }
        if self.mode == TrainMode::LoraFt && !(self.lora_rank >= 1 && self.lora_rank <= self.model.width) {
            return Err(Error::Config(format!(
                "lora_rank must be in [1, {}], got {}",
                self.model.width, self.lora_rank
            )));
        }
        Ok(())
    }

    pub fn tune_mode(&self) -> TuneMode {
        match (self.mode, self.quant.is_none()) {
            (TrainMode::FullFt, true) => TuneMode::FullFt,
            (TrainMode::FullFt, false) => TuneMode::FullFtQuant,
            (TrainMode::LoraFt, true) => TuneMode::LoraFt,
            (TrainMode::LoraFt, false) => TuneMode::LoraFtQuant,
        }
    }

    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.model.steps, self.schedule, self.s0)
    }
}

/// The random quantities of one loss evaluation: a step per sequence and
/// the Gaussian draws for the embedding noise, the sampled step and the
/// step-1 anchor, each `[batch * n, d]`.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub ts: Vec<usize>,
    pub eps0: Tensor,
    pub eps_t: Tensor,
    pub eps_anchor: Tensor,
}

impl NoiseDraw {
    pub fn sample<R: Rng + ?Sized>(batch: usize, n: usize, d: usize, steps: usize, rng: &mut R) -> Self {
        let ts = (0..batch).map(|_| rng.random_range(1..=steps)).collect();
        let shape = [batch * n, d];
        Self {
            ts,
            eps0: Tensor::randn(&shape, rng),
            eps_t: Tensor::randn(&shape, rng),
            eps_anchor: Tensor::randn(&shape, rng),
        }
    }
}

/// The scalar objective on the tape and its prediction term alone.
pub struct LossParts<'t> {
    pub loss: Var<'t>,
    pub mse: f64,
}

/// The training objective on a batch of encoded sequences: mean squared
/// x0 error at the sampled steps, the same at step 1, the word
/// cross-entropy of the noisy x0, and the weighted embedding norm. Every
/// term is a per-element (or per-position) mean.
#[allow(clippy::too_many_arguments)]
pub fn loss_e2e<'t, R: Rng + ?Sized>(
    tape: &'t Tape,
    model: &DenoiserModel,
    table: &EmbeddingTable,
    sched: &NoiseSchedule,
    batch: &[Vec<usize>],
    draw: &NoiseDraw,
    emb_penalty: EmbPenalty,
    dropout: f64,
    rng: Option<&mut R>,
) -> Result<LossParts<'t>> {
    if batch.is_empty() {
        return Err(Error::Contract("loss_e2e needs a nonempty batch".into()));
    }
    let (n, d) = (model.config.seq_len, model.config.emb_dim);
    if table.dim() != d {
        return Err(Error::dim("loss_e2e", &[table.vocab_size(), table.dim()], &[n, d]));
    }
    if let Some(bad) = batch.iter().find(|s| s.len() != n) {
        return Err(Error::dim("loss_e2e", &[bad.len()], &[n]));
    }
    let b = batch.len();
    if draw.ts.len() != b || draw.eps0.shape() != [b * n, d] {
        return Err(Error::dim("loss_e2e noise", draw.eps0.shape(), &[b * n, d]));
    }
    let ids: Vec<usize> = batch.iter().flatten().copied().collect();
    let eff = table.effective_var(tape)?;
    let emb = table.lookup(tape, &ids)?;
    let x0 = emb.add(tape.constant(scaled(&draw.eps0, table.sigma0)))?;

    let mut coef_signal = Vec::with_capacity(2 * b * n * d);
    let mut noise = Vec::with_capacity(2 * b * n * d);
    for (pass, eps) in [&draw.eps_t, &draw.eps_anchor].into_iter().enumerate() {
        for i in 0..b {
            let t = if pass == 0 { draw.ts[i] } else { 1 };
            let (a, s) = sched.marginal_coefs(t)?;
            coef_signal.extend(std::iter::repeat_n(a, n * d));
            noise.extend(eps.data()[i * n * d..(i + 1) * n * d].iter().map(|e| s * e));
        }
    }
    let x0_twice = Var::concat(&[x0, x0], 0)?;
    let x_noisy = x0_twice
        .mul(tape.constant(Tensor::new(vec![2 * b * n, d], coef_signal)?))?
        .add(tape.constant(Tensor::new(vec![2 * b * n, d], noise)?))?;
    let ts: Vec<usize> = draw.ts.iter().copied().chain(std::iter::repeat_n(1, b)).collect();
    let pred = model.forward(tape, x_noisy, &ts, dropout, rng)?;
    let mse = pred.slice(0, 0, b * n)?.sub(x0)?.square().mean();
    let anchor = pred.slice(0, b * n, b * n)?.sub(x0)?.square().mean();

    let targets: Vec<Option<usize>> = ids.iter().map(|&i| Some(i)).collect();
    let ce = word_logits_var(x0, eff)?.cross_entropy(&targets)?;
    let norm = emb.square().mean().scale(emb_penalty.coefficient(sched.steps()));

    let mse_value = mse.item();
    let loss = mse.add(anchor)?.add(ce)?.add(norm)?;
    Ok(LossParts { loss, mse: mse_value })
}

fn scaled(t: &Tensor, c: f64) -> Tensor {
    Tensor::from_fn(t.shape(), |i| c * t.data()[i])
}

/// One report interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportRow {
    pub iteration: usize,
    pub train_loss: f64,
    pub train_mse: f64,
    pub eval_loss: f64,
    pub eval_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<ReportRow>,
    pub tune_mode: TuneMode,
    pub tunable: usize,
    pub total: usize,
    pub counts: ParamCounts,
}

impl TrainReport {
    pub const HEADER: &'static str = "iteration,train_loss,train_mse,eval_loss,eval_mse";

    pub fn initial(&self) -> Option<&ReportRow> {
        self.rows.first()
    }

    pub fn last(&self) -> Option<&ReportRow> {
        self.rows.last()
    }

    /// Comma-separated rows after `#` comment lines holding the counts.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# mode={} tunable={} total={} formula={} formula_attention={} literal={} literal_attention={}\n{}\n",
            self.tune_mode,
            self.tunable,
            self.total,
            self.counts.formula,
            self.counts.formula_attention,
            self.counts.literal,
            self.counts.literal_attention,
            Self::HEADER
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.iteration, r.train_loss, r.train_mse, r.eval_loss, r.eval_mse
            ));
        }
        out
    }
}

/// A trained model, its embedding table and the training report.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: DenoiserModel,
    pub table: EmbeddingTable,
    pub report: TrainReport,
}

/// Fixed lines with fixed noise, evaluated without dropout.
struct EvalSet {
    batches: Vec<(Vec<Vec<usize>>, NoiseDraw)>,
}

impl EvalSet {
    fn new(seqs: Vec<Vec<usize>>, batch_size: usize, cfg: &DenoiserConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batches = seqs
            .chunks(batch_size)
            .map(|c| {
                let draw = NoiseDraw::sample(c.len(), cfg.seq_len, cfg.emb_dim, cfg.steps, &mut rng);
                (c.to_vec(), draw)
            })
            .collect();
        Self { batches }
    }

    /// Sequence-weighted mean `(loss, mse)`.
    fn evaluate(
        &self,
        model: &DenoiserModel,
        table: &EmbeddingTable,
        sched: &NoiseSchedule,
        penalty: EmbPenalty,
    ) -> Result<(f64, f64)> {
        let (mut loss, mut mse, mut count) = (0.0, 0.0, 0usize);
        for (seqs, draw) in &self.batches {
            let tape = Tape::new();
            let parts = loss_e2e::<ChaCha8Rng>(&tape, model, table, sched, seqs, draw, penalty, 0.0, None)?;
            loss += parts.loss.item() * seqs.len() as f64;
            mse += parts.mse * seqs.len() as f64;
            count += seqs.len();
        }
        Ok((loss / count as f64, mse / count as f64))
    }
}

const EVAL_SEED_SALT: u64 = 0x00E7_A15E_ED00_0001;

/// Trains from scratch on `lines`. See [`train_from`].
pub fn train(cfg: &TrainConfig, lines: &[String], vocab: &Vocabulary) -> Result<Trained> {
    train_from(cfg, lines, vocab, None)
}

/// Trains on `lines`, starting from `init` when given. In adapter mode the
/// base weights are frozen (adapters are added when absent) and only the
/// adapters and the embedding table update.
pub fn train_from(
    cfg: &TrainConfig,
    lines: &[String],
    vocab: &Vocabulary,
    init: Option<(DenoiserModel, EmbeddingTable)>,
) -> Result<Trained> {
    cfg.validate()?;
    if lines.is_empty() {
        return Err(Error::Contract("training corpus is empty".into()));
    }
    let mc = &cfg.model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seqs: Vec<Vec<usize>> = lines.iter().map(|l| vocab.encode(l, mc.seq_len)).collect();
    let (train_idx, eval_idx) = split_indices(seqs.len());

    let (mut model, mut table) = match init {
        Some((model, mut table)) => {
            if model.config != *mc {
                return Err(Error::Config("initial model config differs from the training config".into()));
            }
            if table.vocab_size() != vocab.len() || table.dim() != mc.emb_dim {
                return Err(Error::dim(
                    "initial embedding table",
                    &[table.vocab_size(), table.dim()],
                    &[vocab.len(), mc.emb_dim],
                ));
            }
            table.quant = cfg.quant.clone();
            (model, table)
        }
        None => {
            let model = DenoiserModel::new(mc.clone(), &mut rng)?;
            let table = EmbeddingTable::init(vocab.len(), mc.emb_dim, cfg.quant.clone(), cfg.sigma0, &mut rng)?;
            (model, table)
        }
    };
    if cfg.mode == TrainMode::LoraFt && !model.has_lora() {
        model.apply_lora(cfg.lora_rank, cfg.lora_alpha, &mut rng)?;
    }
    table.weight.set_trainable(true);
    let sched = cfg.build_schedule()?;

    let eval_set = EvalSet::new(
        eval_idx.iter().map(|&i| seqs[i].clone()).collect(),
        cfg.batch_size,
        mc,
        cfg.seed ^ EVAL_SEED_SALT,
    );
    let probe_len = eval_idx.len().min(train_idx.len());
    let train_probe = EvalSet::new(
        train_idx[..probe_len].iter().map(|&i| seqs[i].clone()).collect(),
        cfg.batch_size,
        mc,
        cfg.seed ^ EVAL_SEED_SALT.rotate_left(17),
    );

    let mut rows = Vec::new();
    let (train_loss, train_mse) = train_probe.evaluate(&model, &table, &sched, cfg.emb_penalty)?;
    let (eval_loss, eval_mse) = eval_set.evaluate(&model, &table, &sched, cfg.emb_penalty)?;
    rows.push(ReportRow {
        iteration: 0,
        train_loss,
        train_mse,
        eval_loss,
        eval_mse,
    });

    let mut opt = AdamW::new(cfg.weight_decay);
    let (mut acc_loss, mut acc_mse, mut acc_n) = (0.0, 0.0, 0usize);
    for it in 0..cfg.iterations {
        let batch: Vec<Vec<usize>> = (0..cfg.batch_size)
            .map(|_| seqs[train_idx[rng.random_range(0..train_idx.len())]].clone())
            .collect();
        let draw = NoiseDraw::sample(batch.len(), mc.seq_len, mc.emb_dim, mc.steps, &mut rng);
        let tape = Tape::new();
        let parts = loss_e2e(
            &tape,
            &model,
            &table,
            &sched,
            &batch,
            &draw,
            cfg.emb_penalty,
            cfg.dropout,
            Some(&mut rng),
        )?;
        let loss_value = parts.loss.item();
        if !loss_value.is_finite() {
            return Err(Error::Contract(format!("training loss became non-finite at iteration {it}")));
        }
        tape.backward(parts.loss)?;
        model.zero_grads();
        table.weight.value.zero_grad();
        model.pull_grads(&tape)?;
        table.weight.pull_grad(&tape)?;
        let mut params = model.params_mut();
        params.push(&mut table.weight);
        opt.step(params, linear_decay(cfg.lr, it, cfg.iterations))?;

        acc_loss += loss_value;
        acc_mse += parts.mse;
        acc_n += 1;
        let done = it + 1;
        if done % cfg.report_every == 0 || done == cfg.iterations {
            let (eval_loss, eval_mse) = eval_set.evaluate(&model, &table, &sched, cfg.emb_penalty)?;
            rows.push(ReportRow {
                iteration: done,
                train_loss: acc_loss / acc_n as f64,
                train_mse: acc_mse / acc_n as f64,
                eval_loss,
                eval_mse,
            });
            (acc_loss, acc_mse, acc_n) = (0.0, 0.0, 0);
        }
    }

    let tune_mode = cfg.tune_mode();
    let counts = count_params(&model, &table, tune_mode, cfg.quant.bits().unwrap_or((0, 0)), cfg.lora_rank)?;
    let report = TrainReport {
        rows,
        tune_mode,
        tunable: model.trainable_count() + table.weight.numel(),
        total: model.param_count() + table.weight.numel(),
        counts,
    };
    Ok(Trained { model, table, report })
}
