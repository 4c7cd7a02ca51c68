//! Sentence BLEU, minimum Bayes risk selection, and control and fluency
//! metrics over sample sets.

use std::collections::HashMap;

use crate::control::ControlTarget;
use crate::embedding::content_words;
use crate::error::{Error, Result};
use crate::teacher::{perplexity, Teacher};

/// Generated lines with the chain seeds and target that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<String>,
    pub seeds: Vec<u64>,
    pub target: Option<ControlTarget>,
}

impl SampleSet {
    pub fn new(samples: Vec<String>, seeds: Vec<u64>, target: Option<ControlTarget>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract("empty sample set".into()));
        }
        if !seeds.is_empty() && seeds.len() != samples.len() {
            return Err(Error::dim("sample seeds", &[seeds.len()], &[samples.len()]));
        }
        Ok(Self { samples, seeds, target })
    }

    /// A set read from plain lines, without seed information.
    pub fn from_lines(samples: Vec<String>) -> Result<Self> {
        Self::new(samples, Vec::new(), None)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn ngram_counts<'w>(words: &'w [&str], n: usize) -> HashMap<&'w [&'w str], usize> {
    let mut out = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Clipped n-gram matches and hypothesis n-gram total.
fn matches(hyp: &[&str], reference: &[&str], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let m = h.iter().map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0))).sum();
    (m, hyp.len().saturating_sub(n - 1))
}

/// Sentence BLEU over content words with n-grams up to 4 and a brevity
/// penalty. An order n >= 2 with no match uses `1 / (total + 1)`; no
/// unigram match gives 0. An empty hypothesis scores 0.
pub fn bleu(hypothesis: &str, reference: &str) -> f64 {
    let hyp = content_words(hypothesis);
    let refw = content_words(reference);
    bleu_words(&hyp, &refw)
}

pub fn bleu_words(hyp: &[&str], reference: &[&str]) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (m, total) = matches(hyp, reference, n);
        let p = if m > 0 {
            m as f64 / total as f64
        } else if n == 1 {
            return 0.0;
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    let (c, r) = (hyp.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / 4.0).exp()
}

/// Mean loss `-bleu(s_i, s_j)` of each sample against every sample.
pub fn mbr_risks(set: &SampleSet) -> Vec<f64> {
    let words: Vec<Vec<&str>> = set.samples.iter().map(|s| content_words(s)).collect();
    let k = words.len() as f64;
    words
        .iter()
        .map(|h| words.iter().map(|r| -bleu_words(h, r)).sum::<f64>() / k)
        .collect()
}

/// Index of the minimum-risk sample, lowest index on ties.
pub fn mbr_select(set: &SampleSet) -> Result<usize> {
    if set.is_empty() {
        return Err(Error::Contract("empty sample set".into()));
    }
    let risks = mbr_risks(set);
    let mut best = 0;
    for (i, &r) in risks.iter().enumerate() {
        if r < risks[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Fraction of samples that satisfy `target`.
pub fn eval_ctrl(set: &SampleSet, target: &ControlTarget) -> Result<f64> {
    target.validate()?;
    if set.is_empty() {
        return Err(Error::Contract("empty sample set".into()));
    }
    let hits = set.samples.iter().filter(|s| target.satisfied_by(s)).count();
    Ok(hits as f64 / set.len() as f64)
}

/// Teacher perplexity of the set.
pub fn eval_lm(set: &SampleSet, teacher: &Teacher) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Contract("empty sample set".into()));
    }
    perplexity(teacher, &set.samples)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub ctrl: Option<f64>,
    pub lm: Option<f64>,
    pub samples: usize,
    pub successes: Option<usize>,
}

impl EvalReport {
    pub const HEADER: &'static str = "samples,ctrl,lm";

    pub fn compute(set: &SampleSet, target: Option<&ControlTarget>, teacher: Option<&Teacher>) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::Contract("empty sample set".into()));
        }
        let ctrl = target.map(|t| eval_ctrl(set, t)).transpose()?;
        let lm = teacher.map(|t| eval_lm(set, t)).transpose()?;
        Ok(Self {
            ctrl,
            lm,
            samples: set.len(),
            successes: ctrl.map(|c| (c * set.len() as f64).round() as usize),
        })
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        format!("{}\n{},{},{}\n", Self::HEADER, self.samples, opt(self.ctrl), opt(self.lm))
    }

    pub fn summary(&self) -> String {
        let mut parts = vec![format!("samples: {}", self.samples)];
        if let (Some(c), Some(s)) = (self.ctrl, self.successes) {
            parts.push(format!("ctrl: {c:.4} ({s}/{})", self.samples));
        }
        if let Some(l) = self.lm {
            parts.push(format!("lm perplexity: {l:.4}"));
        }
        parts.join("\n")
    }
}
