//! The `ddrp` command line.
//!
//! Exit codes: 0 success, 1 usage, 2 configuration, 3 runtime (including divergence).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::{Objective, TrainConfig};
use crate::corpus::{synth_directional_corpus, SynthPreset};
use crate::diagnostics::{group_attention_map, map_grid, sample_sentences, similarity_curve, to_json_lines, triangle_percentage};
use crate::error::{Error, Result};
use crate::experiment::{compare, final_records};
use crate::gradcheck::{attention_fd_error, model_fd_error};
use crate::model::Model;
use crate::objectives::WeightSpace;
use crate::relpos::{extra_param_count, relative_vector_count, EncodingKind};
use crate::train::{evaluation_sequences, prepare, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Full-model tolerance reported by `grad-check`.
pub const MODEL_TOLERANCE: f64 = 1e-4;
/// Isolated-attention tolerance reported by `grad-check`.
pub const ATTENTION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Parser)]
#[command(name = "ddrp", version, about = "Relative position encodings, MTH pre-training and attention diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pre-train a model, writing metrics.jsonl and checkpoints to --out.
    Pretrain(PretrainArgs),
    /// Finite-difference gradient check of every encoding kind.
    GradCheck(GradCheckArgs),
    /// f(S) and f(H) for each checkpoint matching a glob.
    Similarity(SimilarityArgs),
    /// Up-down triangle percentage of a two-group checkpoint.
    Triangle(TriangleArgs),
    /// Extra positional parameters per sharing group.
    ParamCount(ParamCountArgs),
    /// Paired MLM and MTH runs with shared seeds.
    Compare(CompareArgs),
    /// Write a synthetic directional corpus as text.
    SynthCorpus(SynthArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set step_max=500 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                TrainConfig::parse(&text)?
            }
            None => TrainConfig::default(),
        };
        apply_overrides(&mut cfg, &self.overrides)?;
        Ok(cfg)
    }
}

/// Applies `KEY=VALUE` overrides in order, except that a `preset` override goes first.
fn apply_overrides(cfg: &mut TrainConfig, overrides: &[String]) -> Result<()> {
    let mut pairs = overrides
        .iter()
        .map(|o| {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override '{o}' is not KEY=VALUE")))?;
            Ok((k.trim(), v.trim()))
        })
        .collect::<Result<Vec<_>>>()?;
    pairs.sort_by_key(|(k, _)| *k != "preset");
    for (k, v) in pairs {
        cfg.set(k, v)?;
    }
    cfg.validate()
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run; its configuration is used.
    #[arg(long, conflicts_with_all = ["config", "overrides", "seed"])]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    /// Encoding kind to check (default: all).
    #[arg(long)]
    kind: Option<EncodingKind>,
    /// Objective to check: mlm or mth (default: both).
    #[arg(long)]
    objective: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct SimilarityArgs {
    /// Glob of checkpoint files, e.g. 'run/ckpt-*.ddrp'.
    #[arg(long)]
    checkpoints: String,
    /// Sentences sampled for the averages.
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// pre_softmax or post_softmax.
    #[arg(long)]
    weight_space: Option<WeightSpace>,
    /// Take sentences from this configuration instead of the checkpoint's own.
    #[command(flatten)]
    config: ConfigArgs,
    /// Write JSON lines here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TriangleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Threshold on normalized triangle mass (default from the checkpoint's configuration).
    #[arg(long)]
    t: Option<f64>,
    /// Maximum sentence length considered.
    #[arg(long)]
    ms: Option<usize>,
    /// effective_length or max_length.
    #[arg(long)]
    norm: Option<String>,
    /// Only this layer (default: average over layers).
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    config: ConfigArgs,
    /// Write both averaged group maps as text grids to this file.
    #[arg(long)]
    map_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ParamCountArgs {
    /// Model preset (default base).
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Encoding kind (default ddrp unless the configuration sets one).
    #[arg(long)]
    kind: Option<EncodingKind>,
    /// Print a JSON breakdown instead of the bare number.
    #[arg(long)]
    detail: bool,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated seeds (default: the configured seed).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sample: Option<usize>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// copy-forward, copy-backward, copy-both or bracket-match.
    #[arg(long)]
    preset: SynthPreset,
    #[arg(long, default_value_t = 2000)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Text output (default stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write dependency annotations as JSON lines.
    #[arg(long)]
    dependencies: Option<PathBuf>,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() { write!(err, "{}", e.render()) } else { write!(out, "{}", e.render()) };
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Pretrain(a) => pretrain(a, out),
        Command::GradCheck(a) => grad_check(a, out),
        Command::Similarity(a) => similarity(a, out),
        Command::Triangle(a) => triangle(a, out),
        Command::ParamCount(a) => param_count(a, out),
        Command::Compare(a) => compare_cmd(a, out, err),
        Command::SynthCorpus(a) => synth(a, out),
    }
}

fn pretrain(a: PretrainArgs, out: &mut dyn Write) -> Result<i32> {
    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let cfg = ck.train.as_ref().ok_or_else(|| Error::Config("checkpoint has no training state".into()))?.config.clone();
            let (_, data) = prepare(&cfg)?;
            Trainer::resume(ck, data)?
        }
        None => {
            let mut cfg = a.config.load()?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let (cfg, data) = prepare(&cfg)?;
            Trainer::new(cfg, data)?
        }
    };
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.txt"), trainer.config.render())?;
    let records = trainer.run(Some(&a.out))?;
    if let Some(last) = records.last() {
        writeln!(out, "{}", serde_json::to_string(last)?)?;
    }
    Ok(EXIT_OK)
}

fn grad_check(a: GradCheckArgs, out: &mut dyn Write) -> Result<i32> {
    let kinds: Vec<EncodingKind> = a.kind.map_or_else(|| EncodingKind::ALL.to_vec(), |k| vec![k]);
    let objectives = match a.objective.as_deref() {
        None => vec![Objective::Mlm, Objective::Mth],
        Some("mlm") => vec![Objective::Mlm],
        Some("mth") => vec![Objective::Mth],
        Some(o) => return Err(Error::Config(format!("unknown objective '{o}'"))),
    };
    let mut ok = true;
    writeln!(out, "{:<9} {:<10} {:>12}", "kind", "check", "max_rel_err")?;
    for kind in kinds {
        for &o in &objectives {
            let e = model_fd_error(kind, o, a.seed)?;
            ok &= e < MODEL_TOLERANCE;
            let label = if o == Objective::Mlm { "model/mlm" } else { "model/mth" };
            writeln!(out, "{:<9} {:<10} {:>12.3e}", kind.as_str(), label, e)?;
        }
        let e = attention_fd_error(kind, a.seed)?;
        ok &= e < ATTENTION_TOLERANCE;
        writeln!(out, "{:<9} {:<10} {:>12.3e}", kind.as_str(), "attention", e)?;
    }
    writeln!(out, "{}", if ok { "all within tolerance" } else { "tolerance exceeded" })?;
    Ok(if ok { EXIT_OK } else { EXIT_RUNTIME })
}

fn load_matching(pattern: &str) -> Result<Vec<(u64, Checkpoint)>> {
    let paths = glob::glob(pattern).map_err(|e| Error::Config(format!("bad glob '{pattern}': {e}")))?;
    let mut cks = Vec::new();
    for p in paths {
        let p = p.map_err(|e| Error::Io(e.into()))?;
        let ck = Checkpoint::load(&p)?;
        cks.push((ck.step(), ck));
    }
    if cks.is_empty() {
        return Err(Error::Config(format!("no checkpoints match '{pattern}'")));
    }
    cks.sort_by_key(|(s, _)| *s);
    Ok(cks)
}

/// Sentences for a checkpoint's diagnostics: from an explicit configuration if one was given,
/// otherwise from the configuration stored in the checkpoint.
fn sentences_for(ck: &Checkpoint, args: &ConfigArgs) -> Result<(TrainConfig, Vec<Vec<u32>>)> {
    let explicit = args.config.is_some() || !args.overrides.is_empty();
    let mut cfg = match (&ck.train, explicit) {
        (Some(t), false) => t.config.clone(),
        (None, false) => return Err(Error::Config("checkpoint has no training state; pass --config".into())),
        (Some(t), true) if args.config.is_none() => {
            let mut c = t.config.clone();
            apply_overrides(&mut c, &args.overrides)?;
            c
        }
        _ => args.load()?,
    };
    cfg.model = ck.model.config.clone();
    let sentences = evaluation_sequences(&cfg)?;
    if let Some(bad) = sentences.iter().flatten().find(|&&t| t as usize >= cfg.model.vocab_size) {
        return Err(Error::Config(format!("corpus token id {bad} is outside the checkpoint vocabulary")));
    }
    Ok((cfg, sentences))
}

fn write_or_print(path: &Option<PathBuf>, text: &str, out: &mut dyn Write) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => write!(out, "{text}")?,
    }
    Ok(())
}

fn similarity(a: SimilarityArgs, out: &mut dyn Write) -> Result<i32> {
    let cks = load_matching(&a.checkpoints)?;
    let (cfg, sentences) = sentences_for(&cks[0].1, &a.config)?;
    let space = a.weight_space.unwrap_or(cfg.hcd_weight_space);
    let models: Vec<(u64, Model)> = cks.into_iter().map(|(s, ck)| (s, ck.model)).collect();
    let reports = similarity_curve(&models, &sentences, a.sample, a.seed, space)?;
    write_or_print(&a.out, &to_json_lines(&reports)?, out)?;
    Ok(EXIT_OK)
}

fn triangle(a: TriangleArgs, out: &mut dyn Write) -> Result<i32> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    if ck.model.config.group_count != 2 {
        return Err(Error::Config(format!(
            "triangle analysis needs group_count = 2, checkpoint has {}",
            ck.model.config.group_count
        )));
    }
    let (mut cfg, sentences) = sentences_for(&ck, &a.config)?;
    if let Some(n) = &a.norm {
        cfg.set("triangle_norm", n)?;
    }
    let t = a.t.unwrap_or(cfg.triangle_t);
    let ms = a.ms.unwrap_or(cfg.triangle_ms);
    let picks = sample_sentences(sentences.len(), a.sample.unwrap_or(crate::diagnostics::DEFAULT_SIMILARITY_SAMPLE), a.seed);
    let chosen: Vec<Vec<u32>> = picks.iter().map(|&i| sentences[i].clone()).collect();
    let report = triangle_percentage(&ck.model, &chosen, t, ms, cfg.triangle_norm, a.layer)?;
    writeln!(out, "{}", serde_json::to_string(&report)?)?;
    if let Some(p) = &a.map_out {
        let traces = chosen.iter().map(|s| ck.model.trace(s)).collect::<Result<Vec<_>>>()?;
        let g1 = report.upper_group;
        let mut text = String::new();
        for (label, g) in [("group 1", g1), ("group 2", 1 - g1)] {
            let map = group_attention_map(&traces, &ck.model.config, g, ms, a.layer)?;
            text.push_str(&format!("# {label} (model group {g})\n{}\n", map_grid(&map)));
        }
        fs::write(p, text)?;
    }
    Ok(EXIT_OK)
}

fn param_count(a: ParamCountArgs, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = if a.config.config.is_some() {
        a.config.load()?
    } else {
        let mut c = TrainConfig::default();
        c.set("preset", a.preset.as_deref().unwrap_or("base"))?;
        apply_overrides(&mut c, &a.config.overrides)?;
        c
    };
    if let Some(k) = a.kind {
        cfg.model.encoding = k;
    }
    let m = &cfg.model;
    m.validate()?;
    let extra = extra_param_count(m.encoding, m.head_dim(), m.r_s, m.r_a, m.hidden);
    if a.detail {
        let detail = serde_json::json!({
            "encoding_kind": m.encoding.as_str(),
            "head_dim": m.head_dim(),
            "r_s": m.r_s,
            "extra_per_group": extra,
            "group_count": m.group_count,
            "relative_vectors": relative_vector_count(m.encoding, m.r_s),
            "model_params": m.param_count(),
        });
        writeln!(out, "{detail}")?;
    } else {
        writeln!(out, "{extra}")?;
    }
    Ok(EXIT_OK)
}

fn compare_cmd(a: CompareArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let mut cfg = a.config.load()?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let seeds = if a.seeds.is_empty() { vec![cfg.seed] } else { a.seeds };
    fs::create_dir_all(&a.out)?;
    let records = compare(&cfg, &seeds, &a.out, a.sample)?;
    fs::write(a.out.join("compare.jsonl"), to_json_lines(&records)?)?;
    for r in final_records(&records) {
        let f = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        writeln!(
            out,
            "seed {} step {}: f(S) mlm {} mth {} | f(H) mlm {} mth {} | mth lower: {}",
            r.seed,
            r.step,
            f(r.mlm_fs),
            f(r.mth_fs),
            f(r.mlm_fh),
            f(r.mth_fh),
            r.mth_lower()
        )?;
    }
    writeln!(err, "joint curves written to {}", a.out.join("compare.jsonl").display())?;
    Ok(EXIT_OK)
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<i32> {
    let sc = synth_directional_corpus(a.preset, a.size, a.seed);
    let text = sc.corpus.render();
    write_or_print(&a.out, &text, out)?;
    if let Some(p) = &a.dependencies {
        write_dependencies(p, &sc.dependencies)?;
    }
    Ok(EXIT_OK)
}

fn write_dependencies(path: &Path, deps: &[Vec<crate::corpus::Dependency>]) -> Result<()> {
    let mut text = String::new();
    for d in deps {
        text.push_str(&serde_json::to_string(d)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}
