//! Binary artifact format for trained models, classifiers and teachers.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "QEDF"  magic
//! u8      format version
//! u8      artifact kind (1 diffusion model, 2 classifier, 3 teacher)
//! u32     config count, then that many u64 config integers
//! u32     metadata count, then (key, value) string pairs
//! u32     parameter count, then per parameter:
//!         name string, u32 rank, rank x u64 dims, u64 length, length x f64
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8 bytes.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Configurable;
use crate::control::ControlClassifier;
use crate::denoiser::{DenoiserConfig, DenoiserModel};
use crate::embedding::{EmbeddingTable, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::{Module, Param};
use crate::quantize::QuantizerSpec;
use crate::schedule::NoiseSchedule;
use crate::teacher::{Teacher, TeacherConfig};
use crate::tensor::Tensor;
use crate::training::{TrainConfig, Trained};

pub const MAGIC: &[u8; 4] = b"QEDF";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArtifactKind {
    Model = 1,
    Classifier = 2,
    Teacher = 3,
}

impl ArtifactKind {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            1 => Ok(Self::Model),
            2 => Ok(Self::Classifier),
            3 => Ok(Self::Teacher),
            other => Err(Error::Format(format!("unknown artifact kind {other}"))),
        }
    }
}

/// The untyped contents of an artifact file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ArtifactKind,
    pub config: Vec<u64>,
    pub meta: Vec<(String, String)>,
    pub params: Vec<(String, Tensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("count {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated file: need {n} bytes at offset {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("string is not UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.kind as u8);
        put_u32(&mut out, self.config.len())?;
        for v in &self.config {
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_u32(&mut out, self.meta.len())?;
        for (k, v) in &self.meta {
            put_str(&mut out, k)?;
            put_str(&mut out, v)?;
        }
        put_u32(&mut out, self.params.len())?;
        for (name, t) in &self.params {
            put_str(&mut out, name)?;
            put_u32(&mut out, t.shape().len())?;
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(t.numel() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Format("missing QEDF magic bytes".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let kind = ArtifactKind::from_byte(r.u8()?)?;
        let config = (0..r.u32()?).map(|_| r.u64()).collect::<Result<_>>()?;
        let meta = (0..r.u32()?)
            .map(|_| Ok((r.string()?, r.string()?)))
            .collect::<Result<_>>()?;
        let count = r.u32()?;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let shape: Vec<usize> = (0..r.u32()?).map(|_| Ok(r.u64()? as usize)).collect::<Result<_>>()?;
            let len = r.u64()? as usize;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(shape, data).map_err(|_| Error::Format(format!("parameter `{name}` has inconsistent shape")))?;
            params.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { kind, config, meta, params })
    }

    /// Writes to a temporary file beside `path`, then renames it into place.
    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format(format!("missing metadata `{key}`")))
    }

    fn expect_kind(&self, kind: ArtifactKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {kind:?} artifact, found {:?}", self.kind)));
        }
        Ok(())
    }

    fn config_at(&self, i: usize) -> Result<usize> {
        self.config
            .get(i)
            .map(|&v| v as usize)
            .ok_or_else(|| Error::Format(format!("config block has {} entries, need {}", self.config.len(), i + 1)))
    }
}

/// Writes `bytes` to `path` through a temporary sibling file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::io(path, std::io::Error::other("path has no file name")))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn parse_meta<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<T> {
    let v = ck.meta(key)?;
    v.parse().map_err(|_| Error::Format(format!("metadata `{key}` has unreadable value `{v}`")))
}

fn load_params(dst: Vec<&mut Param>, src: &[(String, Tensor)], skip: usize) -> Result<()> {
    if src.len() < skip + dst.len() {
        return Err(Error::Format(format!(
            "artifact holds {} parameters, model needs {}",
            src.len().saturating_sub(skip),
            dst.len()
        )));
    }
    for (p, (name, t)) in dst.into_iter().zip(&src[skip..]) {
        if &p.name != name || p.value.shape() != t.shape() {
            return Err(Error::Format(format!(
                "parameter `{name}` {:?} does not match `{}` {:?}",
                t.shape(),
                p.name,
                p.value.shape()
            )));
        }
        p.value.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

/// A trained diffusion model with everything needed to sample from it.
#[derive(Debug, Clone)]
pub struct ModelArtifact {
    pub model: DenoiserModel,
    pub table: EmbeddingTable,
    pub vocab: Vocabulary,
    /// Provenance entries (seed, quantizer, schedule, effective config, ...).
    pub meta: Vec<(String, String)>,
}

impl ModelArtifact {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.model.config;
        let config = [
            c.emb_dim,
            c.width,
            c.layers,
            c.heads,
            c.ff,
            c.seq_len,
            c.steps,
            self.model.lora_rank().unwrap_or(0),
            self.vocab.len(),
        ]
        .iter()
        .map(|&v| v as u64)
        .collect();
        let mut meta = vec![
            ("quant".to_string(), self.table.quant.to_string()),
            ("sigma0".to_string(), self.table.sigma0.to_string()),
            ("lora_scale".to_string(), self.model.lora_scale().unwrap_or(0.0).to_string()),
            ("vocab".to_string(), self.vocab.to_text()),
        ];
        meta.extend(self.meta.iter().filter(|(k, _)| !RESERVED_META.contains(&k.as_str())).cloned());
        let mut params: Vec<(String, Tensor)> = vec![("embedding".into(), raw(&self.table.weight))];
        params.extend(self.model.params().into_iter().map(|p| (p.name.clone(), raw(p))));
        Checkpoint {
            kind: ArtifactKind::Model,
            config,
            meta,
            params,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(ArtifactKind::Model)?;
        let config = DenoiserConfig {
            emb_dim: ck.config_at(0)?,
            width: ck.config_at(1)?,
            layers: ck.config_at(2)?,
            heads: ck.config_at(3)?,
            ff: ck.config_at(4)?,
            seq_len: ck.config_at(5)?,
            steps: ck.config_at(6)?,
        };
        let rank = ck.config_at(7)?;
        let vocab = Vocabulary::from_text(ck.meta("vocab")?)?;
        if vocab.len() != ck.config_at(8)? {
            return Err(Error::Format("vocabulary size disagrees with the config block".into()));
        }
        let quant: QuantizerSpec = ck.meta("quant")?.parse()?;
        let sigma0: f64 = parse_meta(ck, "sigma0")?;
        let scale: f64 = parse_meta(ck, "lora_scale")?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = DenoiserModel::new(config.clone(), &mut rng)?;
        if rank > 0 {
            model.apply_lora(rank, scale * rank as f64, &mut rng)?;
        }
        let (name, emb) = ck.params.first().ok_or_else(|| Error::Format("no parameters".into()))?;
        if name != "embedding" || emb.shape() != [vocab.len(), config.emb_dim] {
            return Err(Error::Format("first parameter must be the embedding table".into()));
        }
        let table = EmbeddingTable::from_matrix(emb.clone(), sigma0, quant)?;
        let expected = model.params().len() + 1;
        if ck.params.len() != expected {
            return Err(Error::Format(format!(
                "artifact holds {} parameters, model needs {expected}",
                ck.params.len()
            )));
        }
        load_params(model.params_mut(), &ck.params, 1)?;
        let meta = ck
            .meta
            .iter()
            .filter(|(k, _)| !RESERVED_META.contains(&k.as_str()))
            .cloned()
            .collect();
        Ok(Self { model, table, vocab, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().write_atomic(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Packages a training result with its seed and effective config.
    pub fn from_trained(trained: Trained, vocab: Vocabulary, cfg: &TrainConfig) -> Self {
        Self {
            model: trained.model,
            table: trained.table,
            vocab,
            meta: vec![("seed".into(), cfg.seed.to_string()), ("config".into(), cfg.render())],
        }
    }

    /// The training config recorded in the artifact.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let text = self.meta("config").ok_or_else(|| Error::Format("missing metadata `config`".into()))?;
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// The noise schedule the model was trained with.
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let cfg = self.train_config()?;
        NoiseSchedule::build(self.model.config.steps, cfg.schedule, cfg.s0)
    }
}

const RESERVED_META: [&str; 4] = ["quant", "sigma0", "lora_scale", "vocab"];

fn raw(p: &Param) -> Tensor {
    Tensor::new(p.value.shape().to_vec(), p.value.data().to_vec()).expect("shape of an existing tensor")
}

pub fn save_classifier(clf: &ControlClassifier, path: &Path) -> Result<()> {
    classifier_checkpoint(clf).write_atomic(path)
}

pub fn classifier_checkpoint(clf: &ControlClassifier) -> Checkpoint {
    let hidden = clf.l1.fan_out();
    Checkpoint {
        kind: ArtifactKind::Classifier,
        config: [clf.seq_len, clf.dim(), hidden, clf.classes.len()].iter().map(|&v| v as u64).collect(),
        meta: vec![
            ("field".into(), clf.field.clone()),
            ("classes".into(), clf.classes.join("\n")),
            ("input_scale".into(), clf.input_scale.to_string()),
        ],
        params: clf.params().into_iter().map(|p| (p.name.clone(), raw(p))).collect(),
    }
}

pub fn load_classifier(path: &Path) -> Result<ControlClassifier> {
    let ck = Checkpoint::read(path)?;
    ck.expect_kind(ArtifactKind::Classifier)?;
    let classes: Vec<String> = ck.meta("classes")?.split('\n').map(String::from).collect();
    if classes.len() != ck.config_at(3)? {
        return Err(Error::Format("class list disagrees with the config block".into()));
    }
    let mut clf = ControlClassifier::new(
        ck.meta("field")?,
        classes,
        ck.config_at(0)?,
        ck.config_at(1)?,
        ck.config_at(2)?,
        parse_meta(&ck, "input_scale")?,
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    if ck.params.len() != clf.params().len() {
        return Err(Error::Format("classifier parameter count mismatch".into()));
    }
    load_params(clf.params_mut(), &ck.params, 0)?;
    Ok(clf)
}

pub fn save_teacher(t: &Teacher, path: &Path) -> Result<()> {
    teacher_checkpoint(t).write_atomic(path)
}

pub fn teacher_checkpoint(t: &Teacher) -> Checkpoint {
    let heads = t.blocks.first().map_or(1, |b| b.heads);
    let ff = t.blocks.first().map_or(1, |b| b.ff1.fan_out());
    Checkpoint {
        kind: ArtifactKind::Teacher,
        config: [t.width(), t.blocks.len(), heads, ff, t.seq_len].iter().map(|&v| v as u64).collect(),
        meta: vec![("vocab".into(), t.vocab.to_text())],
        params: t.params().into_iter().map(|p| (p.name.clone(), raw(p))).collect(),
    }
}

pub fn load_teacher(path: &Path) -> Result<Teacher> {
    let ck = Checkpoint::read(path)?;
    ck.expect_kind(ArtifactKind::Teacher)?;
    let cfg = TeacherConfig {
        width: ck.config_at(0)?,
        layers: ck.config_at(1)?,
        heads: ck.config_at(2)?,
        ff: ck.config_at(3)?,
        seq_len: ck.config_at(4)?,
        ..TeacherConfig::default()
    };
    let vocab = Vocabulary::from_text(ck.meta("vocab")?)?;
    let mut t = Teacher::new(vocab, &cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    if ck.params.len() != t.params().len() {
        return Err(Error::Format("teacher parameter count mismatch".into()));
    }
    load_params(t.params_mut(), &ck.params, 0)?;
    Ok(t)
}
