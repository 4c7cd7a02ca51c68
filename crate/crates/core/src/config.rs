//! Flat `key = value` configuration files with command-line overrides.
//!
//! Blank lines and text after `#` are ignored. Later assignments win, so
//! `--set key=value` overrides are applied after the file.

use std::path::Path;
use std::str::FromStr;

use crate::control::{ClassifierConfig, GuidanceConfig};
use crate::error::{Error, Result};
use crate::teacher::TeacherConfig;
use crate::training::TrainConfig;

/// A configuration struct addressable by flat string keys.
pub trait Configurable {
    fn keys() -> &'static [&'static str];
    fn set(&mut self, key: &str, value: &str) -> Result<()>;
    fn get(&self, key: &str) -> Option<String>;

    fn apply_text(&mut self, text: &str) -> Result<()> {
        for (key, value) in parse_pairs(text)? {
            self.set(&key, &value)?;
        }
        Ok(())
    }

    fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// Applies `key=value` overrides in order.
    fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = split_pair(o.as_ref())
                .ok_or_else(|| Error::Config(format!("override `{}` is not key=value", o.as_ref())))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// The full effective configuration in the same format `apply_text` reads.
    fn render(&self) -> String {
        Self::keys()
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }
}

fn split_pair(line: &str) -> Option<(&str, &str)> {
    let (k, v) = line.split_once('=')?;
    let k = k.trim();
    (!k.is_empty()).then_some((k, v.trim()))
}

/// Parses `key = value` lines, reporting the line number of malformed ones.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) =
            split_pair(line).ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}` has invalid value `{value}`")))
}

fn unknown(key: &str, known: &[&str]) -> Error {
    Error::UnknownKey {
        key: key.to_string(),
        known: known.join(", "),
    }
}

const TRAIN_KEYS: &[&str] = &[
    "emb_dim",
    "width",
    "layers",
    "heads",
    "ff",
    "seq_len",
    "steps",
    "mode",
    "quant",
    "lr",
    "weight_decay",
    "iterations",
    "batch_size",
    "dropout",
    "seed",
    "schedule",
    "s0",
    "clamp",
    "sigma0",
    "emb_penalty",
    "lora_rank",
    "lora_alpha",
    "report_every",
];

impl Configurable for TrainConfig {
    fn keys() -> &'static [&'static str] {
        TRAIN_KEYS
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "emb_dim" => self.model.emb_dim = parse(key, v)?,
            "width" => self.model.width = parse(key, v)?,
            "layers" => self.model.layers = parse(key, v)?,
            "heads" => self.model.heads = parse(key, v)?,
            "ff" => self.model.ff = parse(key, v)?,
            "seq_len" => self.model.seq_len = parse(key, v)?,
            "steps" => self.model.steps = parse(key, v)?,
            "mode" => self.mode = v.parse()?,
            "quant" => self.quant = v.parse()?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "iterations" => self.iterations = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "schedule" => self.schedule = v.parse()?,
            "s0" => self.s0 = parse(key, v)?,
            "clamp" => self.clamp = v.parse()?,
            "sigma0" => self.sigma0 = if v == "auto" { None } else { Some(parse(key, v)?) },
            "emb_penalty" => self.emb_penalty = v.parse()?,
            "lora_rank" => self.lora_rank = parse(key, v)?,
            "lora_alpha" => self.lora_alpha = parse(key, v)?,
            "report_every" => self.report_every = parse(key, v)?,
            _ => return Err(unknown(key, TRAIN_KEYS)),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "emb_dim" => self.model.emb_dim.to_string(),
            "width" => self.model.width.to_string(),
            "layers" => self.model.layers.to_string(),
            "heads" => self.model.heads.to_string(),
            "ff" => self.model.ff.to_string(),
            "seq_len" => self.model.seq_len.to_string(),
            "steps" => self.model.steps.to_string(),
            "mode" => self.mode.to_string(),
            "quant" => self.quant.to_string(),
            "lr" => self.lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "iterations" => self.iterations.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "dropout" => self.dropout.to_string(),
            "seed" => self.seed.to_string(),
            "schedule" => self.schedule.to_string(),
            "s0" => self.s0.to_string(),
            "clamp" => self.clamp.to_string(),
            "sigma0" => self.sigma0.map_or("auto".to_string(), |s| s.to_string()),
            "emb_penalty" => self.emb_penalty.to_string(),
            "lora_rank" => self.lora_rank.to_string(),
            "lora_alpha" => self.lora_alpha.to_string(),
            "report_every" => self.report_every.to_string(),
            _ => return None,
        })
    }
}

const GUIDANCE_KEYS: &[&str] = &["lambda", "guide_lr", "inner_steps", "sample_steps", "quant_bits", "part", "clamp"];

impl Configurable for GuidanceConfig {
    fn keys() -> &'static [&'static str] {
        GUIDANCE_KEYS
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "lambda" => self.lambda = parse(key, v)?,
            "guide_lr" => self.lr = parse(key, v)?,
            "inner_steps" => self.inner_steps = parse(key, v)?,
            "sample_steps" => self.sample_steps = parse(key, v)?,
            "quant_bits" => self.quant_bits = if v == "none" { None } else { Some(parse(key, v)?) },
            "part" => self.part = parse(key, v)?,
            "clamp" => self.clamp = v.parse()?,
            _ => return Err(unknown(key, GUIDANCE_KEYS)),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "lambda" => self.lambda.to_string(),
            "guide_lr" => self.lr.to_string(),
            "inner_steps" => self.inner_steps.to_string(),
            "sample_steps" => self.sample_steps.to_string(),
            "quant_bits" => self.quant_bits.map_or("none".to_string(), |b| b.to_string()),
            "part" => self.part.to_string(),
            "clamp" => self.clamp.to_string(),
            _ => return None,
        })
    }
}

const CLASSIFIER_KEYS: &[&str] = &["hidden", "iterations", "batch_size", "lr", "seed", "clean_fraction"];

impl Configurable for ClassifierConfig {
    fn keys() -> &'static [&'static str] {
        CLASSIFIER_KEYS
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "hidden" => self.hidden = parse(key, v)?,
            "iterations" => self.iterations = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "clean_fraction" => self.clean_fraction = parse(key, v)?,
            _ => return Err(unknown(key, CLASSIFIER_KEYS)),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "hidden" => self.hidden.to_string(),
            "iterations" => self.iterations.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "seed" => self.seed.to_string(),
            "clean_fraction" => self.clean_fraction.to_string(),
            _ => return None,
        })
    }
}

const TEACHER_KEYS: &[&str] = &["width", "layers", "heads", "ff", "seq_len", "iterations", "batch_size", "lr", "seed"];

impl Configurable for TeacherConfig {
    fn keys() -> &'static [&'static str] {
        TEACHER_KEYS
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "width" => self.width = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "ff" => self.ff = parse(key, v)?,
            "seq_len" => self.seq_len = parse(key, v)?,
            "iterations" => self.iterations = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            _ => return Err(unknown(key, TEACHER_KEYS)),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "width" => self.width.to_string(),
            "layers" => self.layers.to_string(),
            "heads" => self.heads.to_string(),
            "ff" => self.ff.to_string(),
            "seq_len" => self.seq_len.to_string(),
            "iterations" => self.iterations.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::EmbPenalty;
    use proptest::prelude::*;

    #[test]
    fn file_then_overrides() {
        let mut cfg = TrainConfig::default();
        cfg.apply_text("# comment\nwidth = 32  # trailing\n\nquant = Q0i.8f\nsigma0=0.5\nlr = 3e-4\n")
            .unwrap();
        cfg.apply_overrides(&["lr=1e-3", "emb_penalty = steps"]).unwrap();
        assert_eq!(cfg.model.width, 32);
        assert_eq!(cfg.quant.to_string(), "Q0i.8f");
        assert_eq!(cfg.sigma0, Some(0.5));
        assert_eq!(cfg.lr, 1e-3);
        assert_eq!(cfg.emb_penalty, EmbPenalty::StepScaled);
    }

    #[test]
    fn unknown_and_malformed_keys_are_named() {
        let mut cfg = TrainConfig::default();
        let err = cfg.apply_text("widht = 3\n").unwrap_err();
        assert!(matches!(&err, Error::UnknownKey { key, .. } if key == "widht"));
        assert!(err.to_string().contains("width"));
        let err = cfg.apply_text("width = 3\nnonsense\n").unwrap_err();
        assert!(err.to_string().contains("line 2"));
        assert!(matches!(cfg.apply_overrides(&["lr"]), Err(Error::Config(_))));
        assert!(matches!(cfg.set("lr", "fast"), Err(Error::Config(_))));
        assert!(matches!(GuidanceConfig::default().set("lr", "1"), Err(Error::UnknownKey { .. })));
    }

    #[test]
    fn rendered_configs_reparse_to_themselves() {
        let mut t = TrainConfig::default();
        t.apply_overrides(&["quant=ternary", "mode=lora_ft", "sigma0=0.25", "clamp=none"]).unwrap();
        let text = t.render();
        let mut back = TrainConfig::default();
        back.apply_text(&text).unwrap();
        assert_eq!(back.render(), text);

        let mut g = GuidanceConfig::default();
        g.apply_overrides(&["quant_bits=4", "part=0"]).unwrap();
        let mut gb = GuidanceConfig::default();
        gb.apply_text(&g.render()).unwrap();
        assert_eq!(gb.render(), g.render());
        let c = ClassifierConfig::default();
        let mut cb = ClassifierConfig { hidden: 1, ..c.clone() };
        cb.apply_text(&c.render()).unwrap();
        assert_eq!(cb.render(), c.render());
        let tc = TeacherConfig::default();
        let mut tb = TeacherConfig { width: 1, ..tc.clone() };
        tb.apply_text(&tc.render()).unwrap();
        assert_eq!(tb.render(), tc.render());
    }

    proptest! {
        #[test]
        fn numeric_values_round_trip(lr in 1e-8f64..1.0, it in 1usize..100_000, seed in any::<u64>()) {
            let mut cfg = TrainConfig::default();
            cfg.apply_overrides(&[format!("lr={lr}"), format!("iterations={it}"), format!("seed={seed}")]).unwrap();
            prop_assert_eq!(cfg.lr, lr);
            prop_assert_eq!(cfg.iterations, it);
            prop_assert_eq!(cfg.seed, seed);
        }
    }
}
