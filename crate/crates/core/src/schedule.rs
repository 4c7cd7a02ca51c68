//! Noise schedules, forward noising and closed-form posteriors.
//!
//! Steps are 1-indexed. `alpha_bar(t)` is the cumulative product of
//! `1 - beta` over steps `1..=t`, so `alpha_bar(0) = 1`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor on the sqrt-schedule generator so that late betas stay below 1.
pub const ALPHA_BAR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Sqrt,
    Linear,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Sqrt => "sqrt",
            ScheduleKind::Linear => "linear",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sqrt" => Ok(ScheduleKind::Sqrt),
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(Error::Config(format!("unknown schedule kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    kind: ScheduleKind,
    s0: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Sqrt generator `1 - sqrt(t/T + s0)`, floored.
pub fn sqrt_alpha_bar(t: usize, steps: usize, s0: f64) -> f64 {
    (1.0 - (t as f64 / steps as f64 + s0).sqrt()).max(ALPHA_BAR_FLOOR)
}

impl NoiseSchedule {
    pub fn build(steps: usize, kind: ScheduleKind, s0: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Schedule(format!("need at least 2 steps, got {steps}")));
        }
        if !(s0 > 0.0 && s0 <= 0.01) {
            return Err(Error::Schedule(format!("s0 = {s0} outside (0, 0.01]")));
        }
        let beta: Vec<f64> = match kind {
            ScheduleKind::Sqrt => (1..=steps)
                .map(|t| 1.0 - sqrt_alpha_bar(t, steps, s0) / sqrt_alpha_bar(t - 1, steps, s0))
                .collect(),
            ScheduleKind::Linear => (0..steps)
                .map(|i| 1e-4 + (0.02 - 1e-4) * i as f64 / (steps - 1) as f64)
                .collect(),
        };
        if let Some((i, b)) = beta.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Schedule(format!("beta at step {} is {b}, outside (0, 1)", i + 1)));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for a in &alpha {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * a);
        }
        Ok(Self {
            steps,
            kind,
            s0,
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn s0(&self) -> f64 {
        self.s0
    }

    fn check(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps {
            return Err(Error::Index {
                what: "diffusion step",
                index: t,
                lo,
                hi: self.steps,
            });
        }
        Ok(())
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))`.
    pub fn marginal_coefs(&self, t: usize) -> Result<(f64, f64)> {
        self.check(t, 0)?;
        let ab = self.alpha_bar[t];
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    pub fn forward_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check(t, 1)?;
        combine(x0, eps, self.marginal_coefs(t)?, "forward_sample")
    }

    /// Coefficients `(c0, ct)` of `q(x_s | x_t, x0)` for `0 <= s < t`.
    pub fn posterior_coefs_between(&self, t: usize, s: usize) -> Result<(f64, f64)> {
        self.check(t, 1)?;
        if s >= t {
            return Err(Error::Index {
                what: "posterior target step",
                index: s,
                lo: 0,
                hi: t - 1,
            });
        }
        let (ab_t, ab_s) = (self.alpha_bar[t], self.alpha_bar[s]);
        let ab_ts = ab_t / ab_s;
        let c0 = ab_s.sqrt() * (1.0 - ab_ts) / (1.0 - ab_t);
        let ct = ab_ts.sqrt() * (1.0 - ab_s) / (1.0 - ab_t);
        Ok((c0, ct))
    }

    pub fn posterior_variance_between(&self, t: usize, s: usize) -> Result<f64> {
        self.posterior_coefs_between(t, s)?;
        let (ab_t, ab_s) = (self.alpha_bar[t], self.alpha_bar[s]);
        Ok((1.0 - ab_s) / (1.0 - ab_t) * (1.0 - ab_t / ab_s))
    }

    pub fn posterior_mean(&self, x0: &Tensor, xt: &Tensor, t: usize) -> Result<Tensor> {
        self.posterior_mean_between(x0, xt, t, t.saturating_sub(1))
    }

    /// Mean of `q(x_s | x_t, x0)`; `s = 0` returns `x0`.
    pub fn posterior_mean_between(&self, x0: &Tensor, xt: &Tensor, t: usize, s: usize) -> Result<Tensor> {
        self.check(t, 1)?;
        if s == 0 {
            if x0.shape() != xt.shape() {
                return Err(Error::dim("posterior_mean", x0.shape(), xt.shape()));
            }
            return Ok(x0.clone());
        }
        combine(x0, xt, self.posterior_coefs_between(t, s)?, "posterior_mean")
    }

    /// Fixed reverse variance `(1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t`.
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        self.check(t, 2)?;
        self.posterior_variance_between(t, t - 1)
    }
}

fn combine(a: &Tensor, b: &Tensor, (ca, cb): (f64, f64), op: &'static str) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| ca * x + cb * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// `k` evenly spaced steps from `T` down to 1, both ends included.
pub fn downsample_steps(steps: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > steps {
        return Err(Error::Config(format!("sample_steps {k} must lie in [1, {steps}]")));
    }
    if k == 1 {
        return Ok(vec![steps]);
    }
    let span = (steps - 1) as f64;
    Ok((0..k)
        .map(|i| 1 + (span * (k - 1 - i) as f64 / (k - 1) as f64).round() as usize)
        .collect())
}
