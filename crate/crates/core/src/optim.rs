//! AdamW with linear learning-rate decay, and the Adagrad ascent used for
//! latent guidance.

use crate::error::{Error, Result};
use crate::nn::Param;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    state: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            step: 0,
            state: Vec::new(),
        }
    }
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            weight_decay,
            ..Self::default()
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter that holds a gradient.
    /// `params` must be passed in the same order on every call.
    pub fn step(&mut self, params: Vec<&mut Param>, lr: f64) -> Result<()> {
        if self.state.is_empty() {
            self.state = params
                .iter()
                .map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()]))
                .collect();
        }
        if self.state.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.state.len(),
                params.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (p, (m, v)) in params.into_iter().zip(&mut self.state) {
            if m.len() != p.numel() {
                return Err(Error::dim("adamw_step", &[m.len()], p.value.shape()));
            }
            if !p.trainable() {
                continue;
            }
            let Some(g) = p.value.grad().map(<[f64]>::to_vec) else { continue };
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                *w -= lr * (update + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}

/// `lr * (1 - it / total)` for `it` in `0..total`.
pub fn linear_decay(lr: f64, it: usize, total: usize) -> f64 {
    if total == 0 {
        return lr;
    }
    lr * (1.0 - it as f64 / total as f64)
}

/// Per-coordinate Adagrad ascent with fresh state.
#[derive(Debug, Clone)]
pub struct Adagrad {
    pub lr: f64,
    pub eps: f64,
    accum: Vec<f64>,
}

impl Adagrad {
    pub fn new(lr: f64, len: usize) -> Self {
        Self {
            lr,
            eps: 1e-10,
            accum: vec![0.0; len],
        }
    }

    /// `x += lr * g / (sqrt(sum g^2) + eps)`.
    pub fn ascend(&mut self, x: &mut [f64], g: &[f64]) -> Result<()> {
        if x.len() != self.accum.len() || g.len() != self.accum.len() {
            return Err(Error::dim("adagrad", &[self.accum.len()], &[x.len(), g.len()]));
        }
        for ((x, g), a) in x.iter_mut().zip(g).zip(&mut self.accum) {
            *a += g * g;
            *x += self.lr * g / (a.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn param(v: &[f64]) -> Param {
        Param::new("p", Tensor::new(vec![v.len()], v.to_vec()).unwrap())
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = param(&[0.5, -2.0]);
        let mut opt = AdamW::new(0.0);
        for _ in 0..5 {
            p.value.zero_grad();
            p.value.accumulate_grad(&[0.0, 0.0]).unwrap();
            opt.step(vec![&mut p], 1e-2).unwrap();
        }
        assert_eq!(p.value.data(), &[0.5, -2.0]);
    }

    #[test]
    fn constant_gradient_gives_sign_steps() {
        let g = [0.3, -4.0, 1e-3];
        let mut p = param(&[1.0, 1.0, 1.0]);
        let mut opt = AdamW::new(0.0);
        let lr = 1e-3;
        for _ in 0..50 {
            let before = p.value.data().to_vec();
            p.value.zero_grad();
            p.value.accumulate_grad(&g).unwrap();
            opt.step(vec![&mut p], lr).unwrap();
            for i in 0..3 {
                // bias-corrected moments equal g and g^2 exactly in closed form
                let want = -lr * g[i] / (g[i].abs() + 1e-8);
                let got = p.value.data()[i] - before[i];
                assert!((got - want).abs() < 1e-12, "{got} vs {want}");
                assert_eq!(got.signum(), -g[i].signum());
            }
        }
    }

    #[test]
    fn weight_decay_shrinks_and_frozen_params_stay() {
        let mut p = param(&[2.0]);
        let mut frozen = param(&[3.0]);
        frozen.set_trainable(false);
        p.value.accumulate_grad(&[0.0]).unwrap();
        let mut opt = AdamW::default();
        opt.step(vec![&mut p, &mut frozen], 0.1).unwrap();
        assert!((p.value.data()[0] - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-15);
        assert_eq!(frozen.value.data(), &[3.0]);
        assert!(opt.step(vec![&mut p], 0.1).is_err());
    }

    #[test]
    fn lr_decays_linearly() {
        assert_eq!(linear_decay(1e-3, 0, 100), 1e-3);
        assert!(linear_decay(1e-3, 99, 100) < linear_decay(1e-3, 0, 100));
        assert!((linear_decay(1e-3, 50, 100) - 5e-4).abs() < 1e-18);
    }

    #[test]
    fn adagrad_hand_trace() {
        // J(x) = -(x - 2)^2 + 0.5 x, dJ/dx = -2 (x - 2) + 0.5
        let grad = |x: f64| -2.0 * (x - 2.0) + 0.5;
        let mut opt = Adagrad::new(0.1, 1);
        let mut x = [0.0];
        let mut trace = Vec::new();
        for _ in 0..3 {
            let g = [grad(x[0])];
            opt.ascend(&mut x, &g).unwrap();
            trace.push(x[0]);
        }
        // step 1: g=4.5, acc=20.25, x=0.1*4.5/4.5=0.1
        // step 2: g=4.3, acc=38.74, x=0.1+0.43/sqrt(38.74)
        // step 3: g=-2(x-2)+0.5, acc+=g^2
        let x1 = 0.1 * 4.5 / (20.25f64.sqrt() + 1e-10);
        let a2: f64 = 20.25 + 4.3 * 4.3;
        let x2 = x1 + 0.1 * 4.3 / (a2.sqrt() + 1e-10);
        let g3 = -2.0 * (x2 - 2.0) + 0.5;
        let x3 = x2 + 0.1 * g3 / ((a2 + g3 * g3).sqrt() + 1e-10);
        assert!((trace[0] - 0.1).abs() < 1e-10);
        for (got, want) in trace.iter().zip([x1, x2, x3]) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    proptest! {
        #[test]
        fn adagrad_first_step_keeps_sign(g in proptest::collection::vec(-10.0f64..10.0, 1..20)) {
            let mut opt = Adagrad::new(0.1, g.len());
            let mut x = vec![0.0; g.len()];
            opt.ascend(&mut x, &g).unwrap();
            for (xi, gi) in x.iter().zip(&g) {
                prop_assert!(xi * gi >= 0.0);
                prop_assert!(xi.abs() <= 0.1 + 1e-12);
            }
        }
    }
}
