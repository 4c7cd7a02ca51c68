//! Fake quantizers with straight-through gradients.
//!
//! Every quantizer has a forward rule producing values on a low-bit grid
//! (stored as f64) and a pass-through mask: on the tape the gradient flows
//! unchanged where the mask is set and is zero elsewhere.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantKind {
    None,
    Binary,
    Ternary,
    Points,
    FixedPoint,
    PartSelect,
}

/// A quantizer and its parameters.
///
/// `v_min`/`v_max` bound the output for `Points`; for `PartSelect` they bound
/// the output magnitude and must be powers of two. `int_bits`/`frac_bits`
/// record the `Q{int}i.{frac}f` name when the spec came from one.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerSpec {
    pub kind: QuantKind,
    pub n_bits: u32,
    pub s: i8,
    pub v_min: f64,
    pub v_max: f64,
    pub int_bits: u32,
    pub frac_bits: u32,
}

impl Default for QuantizerSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl QuantizerSpec {
    fn base(kind: QuantKind) -> Self {
        Self {
            kind,
            n_bits: 1,
            s: 1,
            v_min: -1.0,
            v_max: 1.0,
            int_bits: 0,
            frac_bits: 0,
        }
    }

    pub fn none() -> Self {
        Self::base(QuantKind::None)
    }

    pub fn binary() -> Self {
        Self::base(QuantKind::Binary)
    }

    pub fn ternary() -> Self {
        Self {
            n_bits: 2,
            ..Self::base(QuantKind::Ternary)
        }
    }

    pub fn points(n_bits: u32, v_min: f64, v_max: f64) -> Result<Self> {
        let spec = Self {
            n_bits,
            v_min,
            v_max,
            ..Self::base(QuantKind::Points)
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn fixed_point(n_bits: u32) -> Result<Self> {
        let spec = Self {
            n_bits,
            v_min: 0.0,
            v_max: fixed_max(n_bits),
            ..Self::base(QuantKind::FixedPoint)
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Power-of-two magnitude quantizer with explicit magnitude bounds.
    pub fn part_select(s: i8, n_bits: u32, v_min: f64, v_max: f64) -> Result<Self> {
        let spec = Self {
            n_bits,
            s,
            v_min,
            v_max,
            ..Self::base(QuantKind::PartSelect)
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `Q{a}i.{b}f`: exactly one of `a`, `b` is nonzero. The fractional form
    /// (`s = -1`) keeps magnitudes in `[2^-b, 1/2]`, the integer form
    /// (`s = +1`) in `[1, 2^(a-1)]`.
    pub fn q_format(int_bits: u32, frac_bits: u32) -> Result<Self> {
        let (s, lo, hi) = match (int_bits, frac_bits) {
            (0, 0) => return Err(Error::Spec("Q0i.0f selects no bits".into())),
            (0, b) => (-1, (-(b as i32)) as f64, -1.0),
            (a, 0) => (1, 0.0, (a as i32 - 1) as f64),
            (a, b) => {
                return Err(Error::Spec(format!(
                    "Q{a}i.{b}f selects both parts; exactly one of the integer or fractional part may be nonzero"
                )))
            }
        };
        let spec = Self {
            kind: QuantKind::PartSelect,
            n_bits: int_bits + frac_bits,
            s,
            v_min: lo.exp2(),
            v_max: hi.exp2(),
            int_bits,
            frac_bits,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == QuantKind::None {
            return Ok(());
        }
        if !(1..=16).contains(&self.n_bits) {
            return Err(Error::Spec(format!(
                "n_bits {} outside [1, 16]",
                self.n_bits
            )));
        }
        if !(self.v_min < self.v_max) || !self.v_min.is_finite() || !self.v_max.is_finite() {
            return Err(Error::Spec(format!(
                "need finite v_min < v_max, got [{}, {}]",
                self.v_min, self.v_max
            )));
        }
        if self.kind == QuantKind::PartSelect {
            if self.s != -1 && self.s != 1 {
                return Err(Error::Spec(format!("part_select needs s in {{-1, +1}}, got {}", self.s)));
            }
            for b in [self.v_min, self.v_max] {
                if b <= 0.0 || b.log2().fract() != 0.0 {
                    return Err(Error::Spec(format!(
                        "part_select bounds must be positive powers of two, got {b}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_none(&self) -> bool {
        self.kind == QuantKind::None
    }

    /// `(integer bits, fractional bits)` used by the tunable-parameter formulas.
    pub fn bits(&self) -> Option<(u32, u32)> {
        match self.kind {
            QuantKind::None => None,
            QuantKind::Binary => Some((1, 0)),
            QuantKind::Ternary => Some((2, 0)),
            QuantKind::Points => Some((self.n_bits, 0)),
            QuantKind::FixedPoint => Some((self.n_bits, self.n_bits)),
            QuantKind::PartSelect if self.int_bits + self.frac_bits > 0 => {
                Some((self.int_bits, self.frac_bits))
            }
            QuantKind::PartSelect if self.s < 0 => Some((0, self.n_bits)),
            QuantKind::PartSelect => Some((self.n_bits, 0)),
        }
    }

    pub fn quantize_scalar(&self, x: f64) -> f64 {
        match self.kind {
            QuantKind::None => x,
            QuantKind::Binary => binarize_scalar(x),
            QuantKind::Ternary => ternarize_scalar(x),
            QuantKind::Points => {
                let levels = fixed_max(self.n_bits);
                ((x / levels).round() * (self.n_bits as f64 - 1.0).exp2()).clamp(self.v_min, self.v_max)
            }
            QuantKind::FixedPoint => {
                let scale = (self.n_bits as f64).exp2();
                (x.clamp(0.0, fixed_max(self.n_bits)) * scale).round() / scale
            }
            QuantKind::PartSelect => {
                if x == 0.0 {
                    return 0.0;
                }
                let s = self.s as f64;
                let mag = (s * (s * x.abs().log2()).round()).exp2();
                mag.clamp(self.v_min, self.v_max).copysign(x)
            }
        }
    }

    /// Whether the straight-through gradient passes at input `x`.
    pub fn passes(&self, x: f64) -> bool {
        match self.kind {
            QuantKind::None => true,
            QuantKind::Binary | QuantKind::Ternary => x.abs() <= 1.0,
            QuantKind::Points => (self.v_min..=self.v_max).contains(&x),
            QuantKind::FixedPoint => (0.0..=fixed_max(self.n_bits)).contains(&x),
            QuantKind::PartSelect => {
                x == 0.0 || (self.v_min..=self.v_max).contains(&x.abs())
            }
        }
    }

    pub fn quantize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| self.quantize_scalar(v)).collect()
    }

    pub fn mask(&self, x: &[f64]) -> Vec<bool> {
        x.iter().map(|&v| self.passes(v)).collect()
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        Tensor::new(x.shape().to_vec(), self.quantize(x.data())).expect("shape preserved")
    }

    /// Quantizes a tape value with a straight-through backward rule.
    pub fn apply_var<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        if self.is_none() {
            return Ok(x);
        }
        let (values, mask) = {
            let v = x.value();
            (self.quantize(&v), self.mask(&v))
        };
        x.straight_through(values, mask)
    }
}

fn fixed_max(n_bits: u32) -> f64 {
    (n_bits as f64).exp2() - 1.0
}

fn binarize_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn ternarize_scalar(x: f64) -> f64 {
    if x > 0.5 {
        1.0
    } else if x >= -0.5 {
        0.0
    } else {
        -1.0
    }
}

pub fn binarize(x: &Tensor) -> Tensor {
    QuantizerSpec::binary().apply(x)
}

pub fn ternarize(x: &Tensor) -> Tensor {
    QuantizerSpec::ternary().apply(x)
}

pub fn points_quantize(x: &Tensor, spec: &QuantizerSpec) -> Result<Tensor> {
    expect_kind(spec, QuantKind::Points)?;
    Ok(spec.apply(x))
}

pub fn fixed_point_quantize(x: &Tensor, n_bits: u32) -> Result<Tensor> {
    Ok(QuantizerSpec::fixed_point(n_bits)?.apply(x))
}

pub fn part_select_quantize(x: &Tensor, spec: &QuantizerSpec) -> Result<Tensor> {
    expect_kind(spec, QuantKind::PartSelect)?;
    Ok(spec.apply(x))
}

fn expect_kind(spec: &QuantizerSpec, kind: QuantKind) -> Result<()> {
    spec.validate()?;
    if spec.kind != kind {
        return Err(Error::Spec(format!("expected a {kind:?} spec, got {:?}", spec.kind)));
    }
    Ok(())
}

impl fmt::Display for QuantizerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            QuantKind::None => write!(f, "none"),
            QuantKind::Binary => write!(f, "binary"),
            QuantKind::Ternary => write!(f, "ternary"),
            QuantKind::Points => write!(
                f,
                "points:n={},vmin={},vmax={}",
                self.n_bits, self.v_min, self.v_max
            ),
            QuantKind::FixedPoint => write!(f, "fixed:n={}", self.n_bits),
            QuantKind::PartSelect if self.int_bits + self.frac_bits > 0 => {
                write!(f, "Q{}i.{}f", self.int_bits, self.frac_bits)
            }
            QuantKind::PartSelect => write!(
                f,
                "part_select:s={},n={},vmin={},vmax={}",
                self.s, self.n_bits, self.v_min, self.v_max
            ),
        }
    }
}

/// Accepted forms: `none`, `binary`, `ternary`, `Q{a}i.{b}f`,
/// `points:n=..,vmin=..,vmax=..`, `fixed:n=..`,
/// `part_select:s=..,n=..,vmin=..,vmax=..`.
impl FromStr for QuantizerSpec {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let text = text.trim();
        let lower = text.to_ascii_lowercase();
        match lower.as_str() {
            "" | "none" => return Ok(Self::none()),
            "binary" | "binarize" => return Ok(Self::binary()),
            "ternary" | "ternarize" => return Ok(Self::ternary()),
            _ => {}
        }
        if let Some(rest) = lower.strip_prefix('q') {
            if let Some((a, b)) = rest.split_once("i.") {
                if let Some(b) = b.strip_suffix('f') {
                    let a = a.parse().map_err(|_| bad(text))?;
                    let b = b.parse().map_err(|_| bad(text))?;
                    return Self::q_format(a, b);
                }
            }
            return Err(bad(text));
        }
        let (kind, args) = lower.split_once(':').unwrap_or((lower.as_str(), ""));
        let mut n = None;
        let mut s = None;
        let mut vmin = None;
        let mut vmax = None;
        for kv in args.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(text))?;
            let num: f64 = v.trim().parse().map_err(|_| bad(text))?;
            match k.trim() {
                "n" | "n_bits" => n = Some(num as u32),
                "s" => s = Some(num as i8),
                "vmin" | "v_min" => vmin = Some(num),
                "vmax" | "v_max" => vmax = Some(num),
                other => return Err(Error::Spec(format!("unknown quantizer argument `{other}` in `{text}`"))),
            }
        }
        let need = |x: Option<f64>, name: &str| {
            x.ok_or_else(|| Error::Spec(format!("`{text}` is missing {name}")))
        };
        let n = n.ok_or_else(|| Error::Spec(format!("`{text}` is missing n")))?;
        match kind {
            "points" => Self::points(n, need(vmin, "vmin")?, need(vmax, "vmax")?),
            "fixed" | "fixed_point" => Self::fixed_point(n),
            "part_select" => Self::part_select(
                s.ok_or_else(|| Error::Spec(format!("`{text}` is missing s")))?,
                n,
                need(vmin, "vmin")?,
                need(vmax, "vmax")?,
            ),
            _ => Err(bad(text)),
        }
    }
}

fn bad(text: &str) -> Error {
    Error::Spec(format!("unrecognized quantizer `{text}`"))
}
