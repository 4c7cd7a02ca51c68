//! Vocabulary, the trainable embedding table, distance-softmax rounding and
//! the clamping step.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::quantize::QuantizerSpec;
use crate::schedule::NoiseSchedule;
use crate::tensor::{Tape, Tensor, Var};

pub const START: usize = 0;
pub const END: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["START", "END", "PAD", "UNK"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary; the reserved tokens must come first, in order.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Vocabulary(format!(
                "the first tokens must be {RESERVED:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Vocabulary(format!("invalid token {t:?} at line {}", i + 1)));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Reserved tokens followed by the distinct words of `lines` in order of
    /// first appearance.
    pub fn from_corpus<'a>(lines: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        for line in lines {
            for w in line.split_whitespace() {
                if seen.insert(w.to_string()) {
                    tokens.push(w.to_string());
                }
            }
        }
        Self::new(tokens).expect("constructed vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Index of `word`, or UNK.
    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens.get(id).map(String::as_str).ok_or(Error::Index {
            what: "vocabulary id",
            index: id,
            lo: 0,
            hi: self.tokens.len() - 1,
        })
    }

    /// `START words.. END PAD..`, truncated so the result has length `len`.
    pub fn encode(&self, line: &str, len: usize) -> Vec<usize> {
        let mut ids = Vec::with_capacity(len);
        ids.push(START);
        ids.extend(line.split_whitespace().take(len.saturating_sub(2)).map(|w| self.id(w)));
        ids.push(END);
        ids.resize(len, PAD);
        ids.truncate(len);
        ids
    }

    /// Space-joined tokens with markers kept.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.tokens.get(i).map(String::as_str).unwrap_or("UNK"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Decoded sample line with START/END kept and PAD dropped.
    pub fn render_sample(&self, ids: &[usize]) -> String {
        let kept: Vec<usize> = ids.iter().copied().filter(|&i| i != PAD).collect();
        self.decode(&kept)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::new(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
    }
}

/// Content tokens: everything except START, END and PAD.
pub fn content(ids: &[usize]) -> Vec<usize> {
    ids.iter().copied().filter(|&i| !matches!(i, START | END | PAD)).collect()
}

/// Content words of a decoded sample line.
pub fn content_words(line: &str) -> Vec<&str> {
    line.split_whitespace()
        .filter(|w| !matches!(*w, "START" | "END" | "PAD"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClampMode {
    None,
    Nearest,
    QuantizedNearest,
}

impl fmt::Display for ClampMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClampMode::None => "none",
            ClampMode::Nearest => "nearest",
            ClampMode::QuantizedNearest => "quantized_nearest",
        })
    }
}

impl FromStr for ClampMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(ClampMode::None),
            "nearest" => Ok(ClampMode::Nearest),
            "quantized_nearest" => Ok(ClampMode::QuantizedNearest),
            other => Err(Error::Config(format!("unknown clamp mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub weight: Param,
    pub sigma0: f64,
    pub quant: QuantizerSpec,
}

impl EmbeddingTable {
    /// Uniform `[-0.5, 0.5] / sqrt(d)` rows; `sigma0` defaults to a tenth of
    /// the RMS of the effective table.
    pub fn init<R: Rng + ?Sized>(
        vocab: usize,
        dim: usize,
        quant: QuantizerSpec,
        sigma0: Option<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        quant.validate()?;
        let scale = (dim as f64).powf(-0.5);
        let w = Tensor::from_fn(&[vocab, dim], |_| (rng.random::<f64>() - 0.5) * scale);
        let mut table = Self {
            weight: Param::new("embedding", w),
            sigma0: 0.0,
            quant,
        };
        table.sigma0 = match sigma0 {
            Some(s) => s,
            None => {
                let eff = table.effective();
                0.1 * (eff.sq_norm() / eff.numel() as f64).sqrt()
            }
        };
        if !(table.sigma0 >= 0.0 && table.sigma0.is_finite()) {
            return Err(Error::Config(format!("sigma0 must be finite and >= 0, got {}", table.sigma0)));
        }
        Ok(table)
    }

    pub fn from_matrix(matrix: Tensor, sigma0: f64, quant: QuantizerSpec) -> Result<Self> {
        if matrix.shape().len() != 2 {
            return Err(Error::dim("embedding table", matrix.shape(), &[]));
        }
        quant.validate()?;
        Ok(Self {
            weight: Param::new("embedding", matrix),
            sigma0,
            quant,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    /// Rows after quantization.
    pub fn effective(&self) -> Tensor {
        self.quant.apply(&self.weight.value)
    }

    pub fn effective_var<'t>(&self, tape: &'t Tape) -> Result<Var<'t>> {
        self.quant.apply_var(self.weight.var(tape))
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.vocab_size()) {
            Some(&bad) => Err(Error::Vocabulary(format!(
                "token id {bad} outside vocabulary of size {}",
                self.vocab_size()
            ))),
            None => Ok(()),
        }
    }

    /// `effective_row(w_i) + sigma0 * eps_i`; `eps` of `None` means zero.
    pub fn embed(&self, ids: &[usize], eps: Option<&Tensor>) -> Result<Tensor> {
        self.check_ids(ids)?;
        let d = self.dim();
        let eff = self.effective();
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (i, &w) in ids.iter().enumerate() {
            out.data_mut()[i * d..(i + 1) * d].copy_from_slice(eff.row(w));
        }
        if let Some(e) = eps {
            if e.shape() != out.shape() {
                return Err(Error::dim("embed", out.shape(), e.shape()));
            }
            for (o, n) in out.data_mut().iter_mut().zip(e.data()) {
                *o += self.sigma0 * n;
            }
        }
        Ok(out)
    }

    /// Effective rows for `ids` on the tape (no noise).
    pub fn lookup<'t>(&self, tape: &'t Tape, ids: &[usize]) -> Result<Var<'t>> {
        self.check_ids(ids)?;
        self.effective_var(tape)?.gather_rows(ids)
    }

    /// `-||x_i - e_w||^2` for every row of `x` and every word.
    pub fn word_logits(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.dim();
        if x.shape().last() != Some(&d) {
            return Err(Error::dim("word_logits", x.shape(), &[self.vocab_size(), d]));
        }
        let eff = self.effective();
        let rows = x.numel() / d;
        let v = self.vocab_size();
        let mut out = Tensor::zeros(&[rows, v]);
        for i in 0..rows {
            let xi = x.row(i);
            for w in 0..v {
                out.data_mut()[i * v + w] = -sq_dist(xi, eff.row(w));
            }
        }
        Ok(out)
    }

    /// Row-wise argmax of [`Self::word_logits`], lowest index on ties.
    pub fn round_to_words(&self, x0: &Tensor) -> Result<Vec<usize>> {
        let logits = self.word_logits(x0)?;
        let v = self.vocab_size();
        Ok((0..logits.numel() / v).map(|i| argmax(logits.row(i))).collect())
    }

    /// Replaces each row of `x` by its nearest effective row.
    pub fn snap(&self, x: &Tensor) -> Result<Tensor> {
        let ids = self.round_to_words(x)?;
        let mut out = self.embed(&ids, None)?;
        out = out.reshape(x.shape())?;
        Ok(out)
    }

    /// The clamped prediction: `x0_hat` as-is, snapped, or quantized then snapped.
    pub fn clamp_prediction(&self, x0_hat: &Tensor, mode: ClampMode, quant: Option<&QuantizerSpec>) -> Result<Tensor> {
        match mode {
            ClampMode::None => Ok(x0_hat.clone()),
            ClampMode::Nearest => self.snap(x0_hat),
            ClampMode::QuantizedNearest => {
                let q = quant.unwrap_or(&self.quant);
                self.snap(&q.apply(x0_hat))
            }
        }
    }

    /// `sqrt(ab_{t-1}) * clamp(x0_hat) + sqrt(1 - ab_{t-1}) * eps`.
    pub fn clamp_step(
        &self,
        x0_hat: &Tensor,
        t: usize,
        eps: &Tensor,
        sched: &NoiseSchedule,
        mode: ClampMode,
    ) -> Result<Tensor> {
        if t == 0 || t > sched.steps() {
            return Err(Error::Index {
                what: "diffusion step",
                index: t,
                lo: 1,
                hi: sched.steps(),
            });
        }
        let x = self.clamp_prediction(x0_hat, mode, None)?;
        if x.shape() != eps.shape() {
            return Err(Error::dim("clamp_step", x.shape(), eps.shape()));
        }
        let (a, b) = sched.marginal_coefs(t - 1)?;
        let data = x.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
        Tensor::new(x.shape().to_vec(), data)
    }
}

/// Distance-softmax logits on the tape: `[rows, d]` against `[vocab, d]`.
pub fn word_logits_var<'t>(x: Var<'t>, table: Var<'t>) -> Result<Var<'t>> {
    let (xs, ts) = (x.shape(), table.shape());
    let ([rows, d], [vocab, d2]) = (&xs[..], &ts[..]) else {
        return Err(Error::dim("word_logits", &xs, &ts));
    };
    let (rows, vocab) = (*rows, *vocab);
    if d != d2 {
        return Err(Error::dim("word_logits", &xs, &ts));
    }
    let tape = x.tape();
    let cross = x.matmul(table.transpose()?)?.scale(2.0);
    let x_sq = x
        .square()
        .sum_last()
        .reshape(&[rows, 1])?
        .matmul(tape.constant(Tensor::full(&[1, vocab], 1.0)))?;
    let t_sq = table.square().sum_last().expand(&[rows, vocab])?;
    cross.sub(x_sq)?.sub(t_sq)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finite_diff_check;
    use crate::schedule::ScheduleKind;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::from_corpus(["the cat sat", "a dog ran far"])
    }

    fn table(v: usize, d: usize, quant: QuantizerSpec, seed: u64) -> EmbeddingTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EmbeddingTable::init(v, d, quant, Some(0.1), &mut rng).unwrap()
    }

    #[test]
    fn vocabulary_roundtrip() {
        let v = vocab();
        assert_eq!(v.len(), 11);
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), i);
            assert_eq!(v.token(i).unwrap(), t);
        }
        assert_eq!(v.id("zebra"), UNK);
        assert_eq!(v.encode("the cat zebra", 7), vec![START, 4, 5, UNK, END, PAD, PAD]);
        assert_eq!(v.encode("the cat sat a dog", 4), vec![START, 4, 5, END]);
        assert_eq!(v.decode(&[START, 4, END, PAD]), "START the END PAD");
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocabulary::new(vec!["a".into()]).is_err());
        let mut dup: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        dup.extend(["x".to_string(), "x".to_string()]);
        assert!(matches!(Vocabulary::new(dup), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn embed_cases() {
        let t = table(11, 4, QuantizerSpec::none(), 0);
        let x = t.embed(&[5, 2], None).unwrap();
        assert_eq!(x.row(0), t.weight.value.row(5));
        assert_eq!(x.row(1), t.weight.value.row(2));
        assert!(matches!(t.embed(&[11], None), Err(Error::Vocabulary(_))));

        let tern = table(11, 4, QuantizerSpec::ternary(), 0);
        let x = tern.embed(&[0, 1, 2, 3, 4, 5, 6], None).unwrap();
        assert!(x.data().iter().all(|v| [-1.0, 0.0, 1.0].contains(v)));
    }

    #[test]
    fn embed_noise_variance() {
        let t = table(11, 4, QuantizerSpec::none(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 10_000;
        let base = t.embed(&[6], None).unwrap();
        let mut sums = [0.0; 4];
        let mut sq = [0.0; 4];
        for _ in 0..n {
            let e = Tensor::randn(&[1, 4], &mut rng);
            let x = t.embed(&[6], Some(&e)).unwrap();
            for j in 0..4 {
                let dv = x.data()[j] - base.data()[j];
                sums[j] += dv;
                sq[j] += dv * dv;
            }
        }
        for j in 0..4 {
            let mean = sums[j] / n as f64;
            let var = sq[j] / n as f64 - mean * mean;
            assert!((var / 0.01 - 1.0).abs() < 0.05, "{var}");
        }
    }

    #[test]
    fn logits_and_rounding() {
        let m = Tensor::new(vec![5, 2], vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.5, 0.5]).unwrap();
        let t = EmbeddingTable::from_matrix(m, 0.0, QuantizerSpec::none()).unwrap();
        let x = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.5, 0.0, -0.25, 0.0]).unwrap();
        assert_eq!(t.round_to_words(&x).unwrap(), vec![1, 0, 0]);
        // midpoint of rows 0 and 3: a tie, the lower index wins
        let mid = Tensor::new(vec![1, 2], vec![-0.5, 0.0]).unwrap();
        assert_eq!(t.round_to_words(&mid).unwrap(), vec![0]);
        let logits = t.word_logits(&x).unwrap();
        for i in 0..3 {
            let row = logits.row(i);
            let mx = row.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let s: f64 = row.iter().map(|v| (v - mx).exp() / z).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn planted_nearest_rows() {
        let t = table(30, 6, QuantizerSpec::none(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let planted: Vec<usize> = (0..40).map(|_| rng.random_range(0..30)).collect();
        let mut x = t.embed(&planted, None).unwrap();
        for v in x.data_mut() {
            *v += rng.random_range(-0.01..0.01);
        }
        // brute-force nearest-row oracle
        let w = t.weight.value.clone();
        let oracle: Vec<usize> = (0..40)
            .map(|i| {
                (0..30)
                    .min_by(|&a, &b| {
                        sq_dist(x.row(i), w.row(a)).partial_cmp(&sq_dist(x.row(i), w.row(b))).unwrap()
                    })
                    .unwrap()
            })
            .collect();
        assert_eq!(t.round_to_words(&x).unwrap(), oracle);
        assert_eq!(oracle, planted);
    }

    #[test]
    fn clamp_step_cases() {
        let sched = NoiseSchedule::build(50, ScheduleKind::Sqrt, 1e-4).unwrap();
        let t = table(11, 4, QuantizerSpec::none(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = Tensor::randn(&[3, 4], &mut rng).reshape(&[3, 4]).unwrap();
        let zero = Tensor::zeros(&[3, 4]);
        let out = t.clamp_step(&x0, 20, &zero, &sched, ClampMode::Nearest).unwrap();
        let c = sched.alpha_bar(19).sqrt();
        let eff = t.effective();
        for i in 0..3 {
            let row: Vec<f64> = out.row(i).iter().map(|v| v / c).collect();
            assert!((0..11).any(|w| eff.row(w).iter().zip(&row).all(|(a, b)| (a - b).abs() < 1e-12)));
        }
        let word = t.embed(&[7], None).unwrap();
        let z1 = Tensor::zeros(&[1, 4]);
        let none = t.clamp_step(&word, 20, &z1, &sched, ClampMode::None).unwrap();
        for (a, b) in none.data().iter().zip(word.data()) {
            assert_eq!(*a, c * b);
        }
        assert_eq!(t.clamp_step(&word, 1, &z1, &sched, ClampMode::None).unwrap(), word);
        assert!(t.clamp_step(&word, 0, &z1, &sched, ClampMode::None).is_err());
        assert!(t.clamp_step(&word, 51, &z1, &sched, ClampMode::None).is_err());

        let tern = table(11, 4, QuantizerSpec::ternary(), 1);
        let pre = QuantizerSpec::ternary().apply(&x0);
        assert!(pre.data().iter().all(|v| [-1.0, 0.0, 1.0].contains(v)));
        let snapped = tern.clamp_prediction(&x0, ClampMode::QuantizedNearest, None).unwrap();
        assert_eq!(snapped, tern.snap(&pre).unwrap());
    }

    #[test]
    fn word_logits_var_matches_and_has_correct_gradient() {
        let t = table(9, 3, QuantizerSpec::none(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(&[4, 3], |_| rng.random_range(-2.0..2.0));
        let tape = Tape::new();
        let lv = word_logits_var(tape.constant(x.clone()), tape.constant(t.effective())).unwrap();
        let direct = t.word_logits(&x).unwrap();
        for (a, b) in lv.value().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let eff = t.effective();
        let err = finite_diff_check(
            move |tape, xv| {
                let l = word_logits_var(xv, tape.constant(eff.clone()))?;
                l.cross_entropy(&[Some(1), Some(4), Some(0), Some(8)])
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn rows_distinct(t: &EmbeddingTable) -> bool {
        let e = t.effective();
        (0..t.vocab_size()).all(|a| (0..a).all(|b| e.row(a) != e.row(b)))
    }

    proptest! {
        #[test]
        fn round_trip_identity(seed in 0u64..1000, ids in proptest::collection::vec(0usize..40, 1..20)) {
            let t = table(40, 8, QuantizerSpec::none(), seed);
            prop_assume!(rows_distinct(&t));
            let x = t.embed(&ids, None).unwrap();
            prop_assert_eq!(t.round_to_words(&x).unwrap(), ids);
        }

        #[test]
        fn rounding_is_scale_invariant(seed in 0u64..1000, c in 0.01f64..100.0) {
            let t = table(20, 4, QuantizerSpec::none(), seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let x = Tensor::randn(&[6, 4], &mut rng);
            let scaled_table = EmbeddingTable::from_matrix(
                Tensor::new(vec![20, 4], t.weight.value.data().iter().map(|v| v * c).collect()).unwrap(),
                0.0, QuantizerSpec::none()).unwrap();
            let xs = Tensor::new(vec![6, 4], x.data().iter().map(|v| v * c).collect()).unwrap();
            prop_assert_eq!(t.round_to_words(&x).unwrap(), scaled_table.round_to_words(&xs).unwrap());
        }

        #[test]
        fn snap_is_idempotent(seed in 0u64..1000) {
            let t = table(20, 4, QuantizerSpec::none(), seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&[5, 4], &mut rng);
            let once = t.snap(&x).unwrap();
            prop_assert_eq!(t.snap(&once).unwrap(), once);
        }
    }
}
