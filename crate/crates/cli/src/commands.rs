//! Command implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use qedlm_core::checkpoint::{self, write_atomic};
use qedlm_core::control::{self, ClassifierConfig, GuidanceConfig};
use qedlm_core::corpus;
use qedlm_core::denoiser::{formula_count, FormulaInputs, TuneMode};
use qedlm_core::eval::mbr_select;
use qedlm_core::quantize::QuantizerSpec;
use qedlm_core::teacher::{self, TeacherConfig};
use qedlm_core::training;
use qedlm_core::{
    Configurable, ControlClassifier, ControlTarget, EvalReport, ModelArtifact, SampleSet, Tape, Tensor, TrainConfig,
    Vocabulary,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::{
    ClassifierArgs, ConfigArgs, ControlArgs, EvalArgs, MbrArgs, QuantBenchArgs, SampleArgs, SamplingArgs, TargetArgs,
    Task, TeacherArgs, ToyCorpusArgs, TrainArgs,
};

fn config_error(msg: &str) -> anyhow::Error {
    qedlm_core::Error::Config(msg.to_string()).into()
}

fn configure<C: Configurable>(cfg: &mut C, args: &ConfigArgs) -> Result<()> {
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_overrides(&args.overrides)?;
    Ok(())
}

fn commented(text: &str) -> String {
    text.lines().map(|l| format!("# {l}\n")).collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

fn load_vocab(path: Option<&Path>, lines: &[String]) -> Result<Vocabulary> {
    Ok(match path {
        Some(p) => Vocabulary::from_text(&corpus::read_text(p)?)?,
        None => Vocabulary::from_corpus(lines.iter().map(String::as_str)),
    })
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::default();
    configure(&mut cfg, &a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let lines = corpus::read_lines(&a.corpus)?;
    let init = a.init.as_deref().map(ModelArtifact::load).transpose()?;
    let vocab = match (&init, &a.vocab) {
        (Some(art), None) => art.vocab.clone(),
        _ => load_vocab(a.vocab.as_deref(), &lines)?,
    };
    if let Some(art) = &init {
        if art.vocab != vocab {
            return Err(config_error("vocabulary differs from the initial checkpoint"));
        }
        if art.model.config != cfg.model {
            return Err(config_error("model shape differs from the initial checkpoint"));
        }
    }
    let trained = training::train_from(&cfg, &lines, &vocab, init.map(|art| (art.model, art.table)))?;
    let report = format!("{}{}", commented(&cfg.render()), trained.report.to_csv());
    let summary = trained.report.last().map(|r| {
        format!(
            "iterations {}: train loss {:.4}, eval loss {:.4}, eval mse {:.4}, tunable {}/{}",
            r.iteration, r.train_loss, r.eval_loss, r.eval_mse, trained.report.tunable, trained.report.total
        )
    });
    ModelArtifact::from_trained(trained, vocab, &cfg).save(&a.out)?;
    let report_path = a.report.unwrap_or_else(|| sidecar(&a.out, ".report.csv"));
    write_text(&report_path, &report)?;
    if let Some(s) = summary {
        println!("{s}");
    }
    println!("checkpoint: {}", a.out.display());
    println!("report: {}", report_path.display());
    Ok(())
}

fn guidance(s: &SamplingArgs, steps: usize) -> Result<GuidanceConfig> {
    let mut g = GuidanceConfig {
        sample_steps: steps,
        ..GuidanceConfig::default()
    };
    configure(&mut g, &s.config)?;
    if let Some(n) = s.sample_steps {
        g.sample_steps = n;
    }
    if let Some(q) = &s.quant {
        g.set_sampling_quant(&q.parse::<QuantizerSpec>()?)?;
    }
    Ok(g)
}

fn target(t: &TargetArgs) -> Result<Option<ControlTarget>> {
    let Some(task) = t.task else {
        if t.field.is_some() || t.value.is_some() || t.target_len.is_some() {
            return Err(config_error("--field, --value and --target-len need --task"));
        }
        return Ok(None);
    };
    let target = match task {
        Task::Semantic => {
            let field = t.field.as_deref().ok_or_else(|| config_error("--task semantic needs --field"))?;
            let value = t.value.as_deref().ok_or_else(|| config_error("--task semantic needs --value"))?;
            ControlTarget::semantic(field, value)?
        }
        Task::Length => ControlTarget::length(t.target_len.ok_or_else(|| config_error("--task length needs --target-len"))?)?,
    };
    Ok(Some(target))
}

fn describe(target: &ControlTarget) -> String {
    match target {
        ControlTarget::Semantic { field, value } => format!("task = semantic\nfield = {field}\nvalue = {value}\n"),
        ControlTarget::Length { target_len } => format!("task = length\ntarget_len = {target_len}\n"),
    }
}

/// Runs `count` independent chains, chain `i` seeded with `seed + i`, and
/// returns the rendered samples in chain order.
fn run_chains(
    art: &ModelArtifact,
    g: &GuidanceConfig,
    target: Option<&ControlTarget>,
    clf: Option<&ControlClassifier>,
    s: &SamplingArgs,
) -> Result<Vec<String>> {
    if s.samples == 0 {
        return Err(config_error("--samples must be >= 1"));
    }
    let sched = art.schedule()?;
    let one = |i: usize| -> qedlm_core::Result<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(control::chain_seed(s.seed, i));
        let ids = match target {
            None => control::sample(&art.model, &art.table, &sched, g, &mut rng)?,
            Some(t) => control::sample_controlled(&art.model, &art.table, &sched, t, clf, g, &mut rng)?,
        };
        Ok(art.vocab.render_sample(&ids))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(s.jobs.max(1))
        .build()
        .context("building the worker pool")?;
    let out = pool.install(|| (0..s.samples).into_par_iter().map(one).collect::<qedlm_core::Result<Vec<_>>>())?;
    Ok(out)
}

fn provenance(command: &str, art: &ModelArtifact, g: &GuidanceConfig, s: &SamplingArgs, extra: &str) -> String {
    let mut text = format!("command = {command}\nseed = {}\nsamples = {}\n{extra}", s.seed, s.samples);
    text.push_str(&g.render());
    for line in art.meta("config").unwrap_or("").lines() {
        let _ = writeln!(text, "model.{line}");
    }
    text
}

fn samples_text(samples: &[String]) -> String {
    samples.iter().map(|l| format!("{l}\n")).collect()
}

pub fn sample(a: SampleArgs) -> Result<()> {
    let s = &a.sampling;
    let art = ModelArtifact::load(&s.model)?;
    let g = guidance(s, art.model.config.steps)?;
    let samples = run_chains(&art, &g, None, None, s)?;
    emit(s.out.as_deref(), &samples_text(&samples))?;
    if let Some(out) = &s.out {
        write_text(&sidecar(out, ".config"), &provenance("sample", &art, &g, s, ""))?;
        println!("{} samples written to {}", samples.len(), out.display());
    }
    Ok(())
}

pub fn control(a: ControlArgs) -> Result<()> {
    let s = &a.sampling;
    let target = target(&a.target)?.ok_or_else(|| config_error("control needs --task"))?;
    let art = ModelArtifact::load(&s.model)?;
    let mut g = guidance(s, art.model.config.steps)?;
    if let Some(v) = a.lambda {
        g.lambda = v;
    }
    if let Some(v) = a.guide_lr {
        g.lr = v;
    }
    if let Some(v) = a.inner_steps {
        g.inner_steps = v;
    }
    let clf = a.classifier.as_deref().map(checkpoint::load_classifier).transpose()?;
    if matches!(target, ControlTarget::Semantic { .. }) && clf.is_none() {
        return Err(config_error("--task semantic needs --classifier"));
    }
    let samples = run_chains(&art, &g, Some(&target), clf.as_ref(), s)?;
    let set = SampleSet::new(samples, (0..s.samples).map(|i| control::chain_seed(s.seed, i)).collect(), Some(target.clone()))?;
    emit(s.out.as_deref(), &samples_text(&set.samples))?;
    let report = EvalReport::compute(&set, Some(&target), None)?;
    let summary = report.summary();
    if let Some(out) = &s.out {
        write_text(&sidecar(out, ".config"), &provenance("control", &art, &g, s, &describe(&target)))?;
        println!("{summary}");
    } else {
        eprintln!("{summary}");
    }
    if let Some(p) = &a.report {
        let head = commented(&provenance("control", &art, &g, s, &describe(&target)));
        write_text(p, &format!("{head}{}", report.to_csv()))?;
    }
    Ok(())
}

pub fn mbr(a: MbrArgs) -> Result<()> {
    let set = SampleSet::from_lines(corpus::read_lines(&a.input)?)?;
    let best = mbr_select(&set)?;
    emit(a.out.as_deref(), &format!("{}\n", set.samples[best]))
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let target = target(&a.target)?;
    let set = SampleSet::from_lines(corpus::read_lines(&a.input)?)?;
    let teacher = a.teacher.as_deref().map(checkpoint::load_teacher).transpose()?;
    let report = EvalReport::compute(&set, target.as_ref(), teacher.as_ref())?;
    let head = commented(&target.as_ref().map(describe).unwrap_or_default());
    let csv = format!("{head}{}", report.to_csv());
    match &a.out {
        Some(p) => write_text(p, &csv)?,
        None => print!("{csv}"),
    }
    println!("{}", report.summary());
    Ok(())
}

const DEFAULT_QUANTS: [&str; 8] = ["none", "binary", "ternary", "points:n=2,vmin=-1,vmax=1", "fixed:n=4", "Q0i.4f", "Q0i.8f", "Q8i.0f"];

pub fn quant_bench(a: QuantBenchArgs) -> Result<()> {
    let mut cfg = TrainConfig::default();
    configure(&mut cfg, &a.config)?;
    if a.draws == 0 {
        return Err(config_error("--draws must be >= 1"));
    }
    let names: Vec<String> = if a.quants.is_empty() {
        DEFAULT_QUANTS.iter().map(|s| s.to_string()).collect()
    } else {
        a.quants.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let x: Vec<f64> = (0..a.draws).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let input = Tensor::new(vec![a.draws], x.clone())?;
    let mut out = String::from("quant,mean_abs_error,forward_melem_per_s,backward_melem_per_s,formula_full_ft,formula_lora_ft\n");
    for name in &names {
        let spec: QuantizerSpec = name.parse()?;
        let start = Instant::now();
        let q = spec.quantize(&x);
        let fwd = start.elapsed().as_secs_f64();
        let err = x.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64;
        let start = Instant::now();
        let tape = Tape::new();
        let v = tape.leaf(&input);
        tape.backward(spec.apply_var(v)?.sum())?;
        let bwd = start.elapsed().as_secs_f64();
        let bits = spec.bits().unwrap_or((0, 0));
        let inputs = FormulaInputs {
            layers: cfg.model.layers,
            width: cfg.model.width,
            emb_dim: cfg.model.emb_dim,
            vocab: a.vocab_size,
            rank: cfg.lora_rank,
            bits,
        };
        let (full, lora) = if spec.is_none() {
            (TuneMode::FullFt, TuneMode::LoraFt)
        } else {
            (TuneMode::FullFtQuant, TuneMode::LoraFtQuant)
        };
        let rate = |secs: f64| a.draws as f64 / secs.max(1e-9) / 1e6;
        let _ = writeln!(
            out,
            "{spec},{err},{:.3},{:.3},{},{}",
            rate(fwd),
            rate(bwd),
            formula_count(full, &inputs)?,
            formula_count(lora, &inputs)?
        );
    }
    print!("{out}");
    Ok(())
}

pub fn toy_corpus(a: ToyCorpusArgs) -> Result<()> {
    if a.lines == 0 {
        return Err(config_error("--lines must be >= 1"));
    }
    let (lines, labels) = corpus::toy_corpus(a.lines, &mut ChaCha8Rng::seed_from_u64(a.seed));
    std::fs::create_dir_all(&a.out_dir).map_err(|e| qedlm_core::Error::io(&a.out_dir, e))?;
    let vocab = Vocabulary::from_corpus(lines.iter().map(String::as_str));
    write_text(&a.out_dir.join("corpus.txt"), &samples_text(&lines))?;
    let label_lines: Vec<String> = labels.iter().map(corpus::format_labels).collect();
    write_text(&a.out_dir.join("labels.txt"), &samples_text(&label_lines))?;
    write_text(&a.out_dir.join("vocab.txt"), &vocab.to_text())?;
    println!("{} lines, {} vocabulary entries in {}", lines.len(), vocab.len(), a.out_dir.display());
    Ok(())
}

pub fn classifier(a: ClassifierArgs) -> Result<()> {
    let mut cfg = ClassifierConfig::default();
    configure(&mut cfg, &a.config)?;
    let art = ModelArtifact::load(&a.model)?;
    let lines = corpus::read_lines(&a.corpus)?;
    let labels = corpus::read_labels(&a.labels)?;
    let (clf, report) = control::train_classifier(
        &lines,
        &labels,
        &a.field,
        &art.vocab,
        &art.table,
        &art.schedule()?,
        art.model.config.seq_len,
        &cfg,
    )?;
    checkpoint::save_classifier(&clf, &a.out)?;
    println!(
        "field {}: {} classes, held-out accuracy {:.4} (chance {:.4}, {} train / {} eval)",
        clf.field,
        clf.classes.len(),
        report.accuracy,
        report.chance,
        report.train_size,
        report.eval_size
    );
    Ok(())
}

pub fn teacher(a: TeacherArgs) -> Result<()> {
    let mut cfg = TeacherConfig::default();
    configure(&mut cfg, &a.config)?;
    let lines = corpus::read_lines(&a.corpus)?;
    let vocab = load_vocab(a.vocab.as_deref(), &lines)?;
    let t = teacher::train_teacher(&lines, &vocab, &cfg)?;
    let ppl = teacher::perplexity(&t, &lines)?;
    checkpoint::save_teacher(&t, &a.out)?;
    println!("teacher perplexity on its corpus: {ppl:.4}");
    Ok(())
}
