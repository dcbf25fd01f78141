//! The `maskclip` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::audit::run_gradcheck;
use crate::checkpoint::Checkpoint;
use crate::corpus::{generate_samples, load_corpus, write_corpus, Geometry, Sample, SceneOptions, Tokenizer};
use crate::encoders::Inference;
use crate::error::{Error, Result};
use crate::evaluation::{
    build_label_embeddings, dense_zero_shot_segment, linear_probe, patch_truth, retrieval_eval, rows_of,
    segmentation_classes, shape_classes, shape_labels, similarity_grid, write_heatmap, zero_shot_classify,
    ProbeConfig, PromptSet,
};
use crate::objectives::Objective;
use crate::trainer::{Dataset, TrainConfig, Trainer};

pub const SNAPSHOT_FILE: &str = "effective_config.json";

#[derive(Debug, Parser)]
#[command(name = "maskclip", about = "Desk-scale MaskCLIP: corpus, pretraining, evaluation and audits")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic image-caption corpus.
    GenData(GenDataArgs),
    /// Pretrain a model on a corpus.
    Pretrain(PretrainArgs),
    /// Prompt-ensembled zero-shot shape classification.
    EvalZeroshot(EvalArgs),
    /// Dense zero-shot segmentation against patch labels.
    EvalSeg(EvalArgs),
    /// Image-text retrieval recall.
    EvalRetrieval(EvalArgs),
    /// Linear probe on frozen pooled features.
    Probe(ProbeArgs),
    /// Patch-text similarity grid for one image.
    Heatmap(HeatmapArgs),
    /// Finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Print a checkpoint summary.
    InspectCkpt(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// One object per scene, every object mentioned.
    #[arg(long)]
    pub single_object: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub objective: Option<Objective>,
    #[arg(long)]
    pub no_ema: bool,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Dotted-path override, e.g. `--set model.vision.depth=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Corpus directory; overrides `corpus` in the config.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Continue from a checkpoint of this run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many completed epochs.
    #[arg(long)]
    pub stop_epoch: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub train_corpus: PathBuf,
    #[arg(long)]
    pub test_corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Record id within the corpus.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Query text; defaults to the record's caption.
    #[arg(long)]
    pub text: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random inputs per primitive and shape class.
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors are printed to stderr as one JSON object.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
                let _ = write!(std::io::stdout(), "{e}");
                return 0;
            }
            emit_error("config", &e.to_string(), 2);
            return 2;
        }
    };
    match dispatch(&cli.command) {
        Ok(report) => {
            // a closed pipe on stdout is not a failure of the command
            let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&report).expect("reports serialize"));
            0
        }
        Err(e) => {
            let code = e.exit_code();
            emit_error(e.kind(), &e.to_string(), code);
            code
        }
    }
}

fn emit_error(kind: &str, message: &str, code: i32) {
    eprintln!("{}", json!({"error": kind, "message": message, "exit_code": code}));
}

/// Runs one command and returns its JSON report.
pub fn dispatch(cmd: &Command) -> Result<Value> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::EvalZeroshot(a) => eval_zeroshot(a),
        Command::EvalSeg(a) => eval_seg(a),
        Command::EvalRetrieval(a) => eval_retrieval(a),
        Command::Probe(a) => probe(a),
        Command::Heatmap(a) => heatmap(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::InspectCkpt(a) => Ok(Checkpoint::load(&a.ckpt)?.summary()),
    }
}

fn gen_data(a: &GenDataArgs) -> Result<Value> {
    let opts = if a.single_object {
        SceneOptions::single_object()
    } else {
        SceneOptions::default()
    };
    let samples = generate_samples(a.n, a.seed, &opts)?;
    let files = write_corpus(&samples, Geometry::default(), &a.out, a.force)?;
    let settings = json!({"n": a.n, "seed": a.seed, "single_object": a.single_object});
    write_snapshot(&a.out, "gen-data", &settings, &[], &[])?;
    Ok(json!({
        "records": samples.len(),
        "manifest": files.manifest,
        "content_hash": hash_path(&a.out.join(crate::corpus::MANIFEST_FILE))?,
    }))
}

/// Builds the effective config: defaults, then the config file, then each
/// `--set` in order, then the dedicated flags. Returns the config and the
/// overrides as applied.
pub fn resolve_config(a: &ConfigArgs) -> Result<(TrainConfig, Vec<String>)> {
    let mut value = serde_json::to_value(TrainConfig::default())?;
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // deserializing first rejects unknown keys with a precise message
        serde_json::from_value::<TrainConfig>(file.clone())
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge(&mut value, file);
    }
    let mut applied = Vec::new();
    let mut sets: Vec<(String, Value)> = Vec::new();
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not KEY=VALUE")))?;
        sets.push((k.trim().to_string(), parse_value(v.trim())));
    }
    if let Some(s) = a.seed {
        sets.push(("seed".into(), json!(s)));
    }
    if let Some(o) = a.objective {
        sets.push(("objective".into(), json!(o)));
    }
    if a.no_ema {
        sets.push(("use_ema".into(), json!(false)));
    }
    if let Some(r) = a.mask_ratio {
        sets.push(("mask_ratio".into(), json!(r)));
    }
    if let Some(l) = a.lambda {
        sets.push(("lambda".into(), json!(l)));
    }
    if let Some(b) = a.beta {
        sets.push(("beta".into(), json!(b)));
    }
    for (k, v) in sets {
        set_path(&mut value, &k, v.clone())?;
        applied.push(format!("{k}={v}"));
    }
    let cfg: TrainConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok((cfg, applied))
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets a dotted path; every segment must already exist.
pub fn set_path(root: &mut Value, key: &str, v: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {} is not a section", parts[..i].join("."))))?;
        cur = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key {key}")))?;
    }
    *cur = v;
    Ok(())
}

fn pretrain(a: &PretrainArgs) -> Result<Value> {
    let (mut cfg, overrides) = resolve_config(&a.cfg)?;
    if let Some(c) = &a.corpus {
        cfg.corpus = Some(c.display().to_string());
    }
    let corpus = cfg
        .corpus
        .clone()
        .ok_or_else(|| Error::Config("no corpus: pass --corpus or set corpus in the config".into()))?;
    let corpus = PathBuf::from(corpus);
    let samples = load_corpus(&corpus)?;
    let data = Dataset::from_samples(&samples, &cfg.model)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if ckpt.config != cfg {
                return Err(Error::Config(format!(
                    "{} was written with a different configuration",
                    p.display()
                )));
            }
            Trainer::from_checkpoint(&ckpt, data)?
        }
        None => Trainer::new(cfg.clone(), data)?,
    };
    let mut inputs = vec![corpus.clone()];
    inputs.extend(a.cfg.config.clone());
    inputs.extend(a.resume.clone());
    write_snapshot(&a.out, "pretrain", &serde_json::to_value(&cfg)?, &overrides, &inputs)?;
    let summary = trainer.run(Some(&a.out), a.stop_epoch)?;
    let last = summary.history.last();
    Ok(json!({
        "steps_run": summary.history.len(),
        "step": trainer.step(),
        "finished": trainer.is_finished(),
        "final_checkpoint": summary.final_checkpoint,
        "last": last,
    }))
}

fn load_model(path: &Path) -> Result<Checkpoint> {
    let c = Checkpoint::load(path)?;
    c.params()?;
    Ok(c)
}

fn single_object(samples: &[Sample], what: &str) -> Result<()> {
    if samples.iter().any(|s| s.scene.objects.len() != 1) {
        return Err(Error::Data(format!("{what} needs a single-object corpus (gen-data --single-object)")));
    }
    Ok(())
}

fn write_report(out: &Path, name: &str, cmd: &str, ckpt: &Path, inputs: &[PathBuf], report: &impl Serialize) -> Result<Value> {
    let mut all = vec![ckpt.to_path_buf()];
    all.extend_from_slice(inputs);
    write_snapshot(out, cmd, &json!({"checkpoint": ckpt}), &[], &all)?;
    let value = serde_json::to_value(report)?;
    let path = out.join(name);
    fs::write(&path, serde_json::to_string_pretty(&value)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(value)
}

fn eval_zeroshot(a: &EvalArgs) -> Result<Value> {
    let ckpt = load_model(&a.ckpt)?;
    let model = Inference::new(&ckpt.config.model, ckpt.params()?);
    let samples = load_corpus(&a.corpus)?;
    single_object(&samples, "zero-shot classification")?;
    let bank = build_label_embeddings(&model, &shape_classes(&PromptSet::default()))?;
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let report = zero_shot_classify(&model.image_embeddings(&images)?, &bank, &shape_labels(&samples))?;
    let summary = json!({"accuracy": report.accuracy, "count": report.count, "classes": bank.names, "predictions": report.predictions});
    write_report(&a.out, "zeroshot.json", "eval-zeroshot", &a.ckpt, &[a.corpus.clone()], &summary)
}

fn eval_seg(a: &EvalArgs) -> Result<Value> {
    let ckpt = load_model(&a.ckpt)?;
    let model = Inference::new(&ckpt.config.model, ckpt.params()?);
    let samples = load_corpus(&a.corpus)?;
    let bank = build_label_embeddings(&model, &segmentation_classes(&PromptSet::default()))?;
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let report = dense_zero_shot_segment(&model.patch_embeddings(&images)?, &bank, &patch_truth(&samples))?;
    let summary = json!({"miou": report.miou, "per_class_iou": report.per_class_iou, "classes": bank.names});
    write_report(&a.out, "segmentation.json", "eval-seg", &a.ckpt, &[a.corpus.clone()], &summary)
}

fn eval_retrieval(a: &EvalArgs) -> Result<Value> {
    let ckpt = load_model(&a.ckpt)?;
    let model = Inference::new(&ckpt.config.model, ckpt.params()?);
    let samples = load_corpus(&a.corpus)?;
    let tok = Tokenizer::new(ckpt.config.model.text.context_length)?;
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let seqs: Vec<_> = samples.iter().map(|s| tok.tokenize(&s.caption.text)).collect();
    let report = retrieval_eval(&model.image_embeddings(&images)?, &model.text_embeddings(&seqs.iter().collect::<Vec<_>>())?)?;
    write_report(&a.out, "retrieval.json", "eval-retrieval", &a.ckpt, &[a.corpus.clone()], &report)
}

fn probe(a: &ProbeArgs) -> Result<Value> {
    let ckpt = load_model(&a.ckpt)?;
    let model = Inference::new(&ckpt.config.model, ckpt.params()?);
    let train = load_corpus(&a.train_corpus)?;
    let test = load_corpus(&a.test_corpus)?;
    single_object(&train, "the linear probe")?;
    single_object(&test, "the linear probe")?;
    let feats = |s: &[Sample]| -> Result<Vec<Vec<f64>>> {
        let images: Vec<_> = s.iter().map(|x| &x.image).collect();
        Ok(rows_of(&model.pooled_features(&images)?))
    };
    let report = linear_probe(
        &feats(&train)?,
        &shape_labels(&train),
        &feats(&test)?,
        &shape_labels(&test),
        &ProbeConfig::default(),
    )?;
    let summary = json!({
        "train_accuracy": report.train_accuracy,
        "test_accuracy": report.test_accuracy,
        "iterations": report.iterations,
        "final_grad_norm": report.final_grad_norm,
    });
    write_report(&a.out, "probe.json", "probe", &a.ckpt, &[a.train_corpus.clone(), a.test_corpus.clone()], &summary)
}

fn heatmap(a: &HeatmapArgs) -> Result<Value> {
    let ckpt = load_model(&a.ckpt)?;
    let cfg = &ckpt.config.model;
    let model = Inference::new(cfg, ckpt.params()?);
    let samples = load_corpus(&a.corpus)?;
    let sample = samples
        .iter()
        .find(|s| s.id == a.index)
        .ok_or_else(|| Error::Data(format!("no record with id {} in the corpus", a.index)))?;
    let text = a.text.clone().unwrap_or_else(|| sample.caption.text.clone());
    let tok = Tokenizer::new(cfg.text.context_length)?;
    let patches = model.patch_embeddings(&[&sample.image])?;
    let e = model.text_embeddings(&[&tok.tokenize(&text)])?;
    let grid = similarity_grid(patches.data(), patches.last_dim(), e.row(0));
    let g = cfg.vision.grid();
    write_heatmap(&a.out, "heatmap", &grid, g, cfg.vision.patch_size)?;
    let summary = json!({"text": text, "id": sample.id, "grid": g, "values": grid});
    write_report(&a.out, "heatmap.json", "heatmap", &a.ckpt, &[a.corpus.clone()], &summary)
}

fn gradcheck(a: &GradcheckArgs) -> Result<Value> {
    let report = run_gradcheck(a.reps, a.seed)?;
    let value = serde_json::to_value(&report)?;
    if let Some(out) = &a.out {
        write_snapshot(out, "gradcheck", &json!({"reps": a.reps, "seed": a.seed}), &[], &[])?;
        let p = out.join("gradcheck.json");
        fs::write(&p, serde_json::to_string_pretty(&value)? + "\n").map_err(|e| Error::io(&p, e))?;
    }
    if !report.passed {
        let failed: Vec<&str> = report.components.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        eprintln!("{}", serde_json::to_string_pretty(&value)?);
        return Err(Error::Numerical(format!("gradient check exceeded tolerance: {}", failed.join(", "))));
    }
    Ok(value)
}

/// Git-style content hash: files hash as `blob <len>\0<bytes>`, directories
/// as `tree` over their sorted `name\0<hash>\n` entries.
pub fn hash_path(path: &Path) -> Result<String> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    if meta.is_dir() {
        let mut entries: Vec<_> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        let mut body = Vec::new();
        for e in entries {
            if e.file_name().is_some_and(|n| n == SNAPSHOT_FILE) {
                continue;
            }
            let name = e.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            body.extend_from_slice(name.as_bytes());
            body.push(0);
            body.extend_from_slice(hash_path(&e)?.as_bytes());
            body.push(b'\n');
        }
        h.update(format!("tree {}\0", body.len()).as_bytes());
        h.update(&body);
    } else {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        h.update(format!("blob {}\0", bytes.len()).as_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

/// Writes `effective_config.json` into `out`: the command, its settings, the
/// overrides as applied and content hashes of every input.
pub fn write_snapshot(out: &Path, command: &str, config: &Value, overrides: &[String], inputs: &[PathBuf]) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut hashed = Vec::new();
    let mut combined = Sha256::new();
    for p in inputs {
        let h = hash_path(p)?;
        combined.update(h.as_bytes());
        hashed.push(json!({"path": p, "sha256": h}));
    }
    let snapshot = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "overrides": overrides,
        "inputs": hashed,
        "inputs_hash": hex::encode(combined.finalize()),
    });
    let p = out.join(SNAPSHOT_FILE);
    fs::write(&p, serde_json::to_string_pretty(&snapshot)? + "\n").map_err(|e| Error::io(&p, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_args(overrides: &[&str]) -> ConfigArgs {
        ConfigArgs {
            config: None,
            seed: None,
            objective: None,
            no_ema: false,
            mask_ratio: None,
            lambda: None,
            beta: None,
            overrides: overrides.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn dotted_overrides_apply_last_wins() {
        let (c, applied) = resolve_config(&cfg_args(&["model.vision.depth=2", "epochs=3", "epochs=5"])).unwrap();
        assert_eq!(c.model.vision.depth, 2);
        assert_eq!(c.epochs, 5);
        assert_eq!(applied.len(), 3);
    }

    #[test]
    fn unknown_override_rejected() {
        let e = resolve_config(&cfg_args(&["model.vision.dept=2"])).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(resolve_config(&cfg_args(&["epochs"])).is_err());
    }

    #[test]
    fn flags_override_sets() {
        let mut a = cfg_args(&["lambda=0.5"]);
        a.lambda = Some(0.0);
        a.no_ema = true;
        a.objective = Some(Objective::Clip);
        let (c, _) = resolve_config(&a).unwrap();
        assert_eq!(c.lambda, 0.0);
        assert!(!c.use_ema);
        assert_eq!(c.objective, Objective::Clip);
    }

    #[test]
    fn bad_args_exit_2() {
        assert_eq!(main_with(["maskclip", "frobnicate"]), 2);
        assert_eq!(main_with(["maskclip", "inspect-ckpt", "--ckpt", "/nonexistent/x.mclp"]), 3);
    }
}
