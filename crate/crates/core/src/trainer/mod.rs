//! The pretraining loop.

mod config;
mod optim;

pub use config::TrainConfig;
pub use optim::{clip_global_norm, decays, AdamW, LrSchedule};

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState};
use crate::corpus::{Sample, TokenSequence, Tokenizer};
use crate::distillation::{ema_update, init_decoder_params, teacher_from_student, teacher_targets, TEACHER_SCOPE};
use crate::encoders::{init_clip_params, patch_batch, ModelConfig};
use crate::error::{Error, Result};
use crate::masking::sample_mask;
use crate::objectives::{clamp_log_sigma, combined_loss, init_pixel_head, sigma_from_log, BatchInputs, Objective, LOG_SIGMA};
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor};

// RNG stream tags; a stream id is `tag << 48 | counter`.
const STREAM_INIT_CLIP: u64 = 1;
const STREAM_INIT_DECODER: u64 = 2;
const STREAM_INIT_PIXEL: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;
const STREAM_MASK: u64 = 5;

pub fn stream_rng(seed: u64, tag: u64, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 48) | counter);
    rng
}

/// Initial parameters of every module the objective trains.
pub fn init_params(config: &TrainConfig) -> ParamStore {
    let cfg = &config.model;
    let mut params = ParamStore::new();
    init_clip_params(cfg, &mut stream_rng(config.seed, STREAM_INIT_CLIP, 0), &mut params);
    if config.objective.uses_decoder() {
        init_decoder_params(cfg, &mut stream_rng(config.seed, STREAM_INIT_DECODER, 0), &mut params);
    }
    if config.objective == Objective::ClipPixel {
        init_pixel_head(cfg, &mut stream_rng(config.seed, STREAM_INIT_PIXEL, 0), &mut params);
    }
    params
}

/// Pre-patchified images and tokenized captions.
#[derive(Debug, Clone)]
pub struct Dataset {
    patches: Vec<Vec<f64>>,
    tokens: Vec<TokenSequence>,
    num_patches: usize,
    patch_dim: usize,
}

impl Dataset {
    pub fn from_samples(samples: &[Sample], cfg: &ModelConfig) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("training corpus is empty".into()));
        }
        let tok = Tokenizer::new(cfg.text.context_length)?;
        let mut patches = Vec::with_capacity(samples.len());
        let mut tokens = Vec::with_capacity(samples.len());
        for s in samples {
            patches.push(patch_batch(&[&s.image], &cfg.vision)?.into_data());
            tokens.push(tok.tokenize(&s.caption.text));
        }
        Ok(Self {
            patches,
            tokens,
            num_patches: cfg.vision.num_patches(),
            patch_dim: cfg.vision.patch_dim(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// `[B, N, 3P²]` patches and the token sequences for `indices`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<&TokenSequence>) {
        let mut data = Vec::with_capacity(indices.len() * self.num_patches * self.patch_dim);
        for &i in indices {
            data.extend_from_slice(&self.patches[i]);
        }
        let t = Tensor::new(vec![indices.len(), self.num_patches, self.patch_dim], data)
            .expect("dataset patches have the configured geometry");
        (t, indices.iter().map(|&i| &self.tokens[i]).collect())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub kind: String,
    pub step: u64,
    pub epoch: u64,
    pub l_i: f64,
    pub l_t: f64,
    /// Masked-distillation loss (maskclip arm).
    pub l_dist: Option<f64>,
    /// Pixel-reconstruction loss (clip_pixel arm).
    pub l_pixel: Option<f64>,
    pub total: f64,
    pub sigma: f64,
    pub alpha: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub kind: String,
    pub epoch: u64,
    pub steps: u64,
    pub mean_l_i: f64,
    pub mean_l_t: f64,
    pub mean_aux: Option<f64>,
    pub mean_total: f64,
}

/// Mutable training state. Owned by a single thread.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    data: Dataset,
    pub params: ParamStore,
    pub teacher: Option<ParamStore>,
    pub opt: AdamW,
    step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: Dataset) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config);
        let teacher = (config.objective.uses_teacher() && config.use_ema).then(|| teacher_from_student(&params));
        let opt = AdamW::new(config.adam_beta1, config.adam_beta2, config.adam_eps, config.weight_decay);
        Ok(Self {
            config,
            data,
            params,
            teacher,
            opt,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, data: Dataset) -> Result<Self> {
        let mut t = Self::new(ckpt.config.clone(), data)?;
        let params = ckpt.params()?;
        if params.names().ne(t.params.names()) {
            return Err(Error::Format("checkpoint parameters do not match the configured model".into()));
        }
        params.check_isomorphic_subset(&t.params)?;
        t.params = params.clone();
        if t.teacher.is_some() {
            t.teacher = Some(ckpt.group("teacher")?.clone());
        }
        t.opt.m = ckpt.groups.get("adam.m").cloned().unwrap_or_default();
        t.opt.v = ckpt.groups.get("adam.v").cloned().unwrap_or_default();
        t.opt.t = ckpt.adam_t;
        t.step = ckpt.step;
        if ckpt.rng.next_step != ckpt.step {
            return Err(Error::Format("checkpoint RNG state disagrees with its step".into()));
        }
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut groups = BTreeMap::new();
        groups.insert("params".to_string(), self.params.clone());
        if let Some(t) = &self.teacher {
            groups.insert("teacher".to_string(), t.clone());
        }
        groups.insert("adam.m".to_string(), self.opt.m.clone());
        groups.insert("adam.v".to_string(), self.opt.v.clone());
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            epoch: self.step / self.steps_per_epoch(),
            adam_t: self.opt.t,
            rng: RngState {
                seed: self.config.seed,
                next_step: self.step,
            },
            groups,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.data.len().div_ceil(self.config.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        let full = self.config.epochs * self.steps_per_epoch();
        self.config.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.config.base_lr,
            end: self.config.final_lr,
            warmup_steps: (self.config.warmup_epochs * self.steps_per_epoch() as f64).round() as u64,
            total_steps: self.total_steps(),
        }
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Sample order for `epoch`, a pure function of the seed.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut stream_rng(self.config.seed, STREAM_SHUFFLE, epoch));
        order
    }

    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, k) = (step / spe, (step % spe) as usize);
        let order = self.epoch_order(epoch);
        let b = self.config.batch_size;
        order[k * b..((k + 1) * b).min(order.len())].to_vec()
    }

    /// The image encoder parameters that produce distillation targets.
    fn target_params(&self) -> ParamStore {
        match &self.teacher {
            Some(t) => t.clone(),
            None => self.params.subset(TEACHER_SCOPE),
        }
    }

    /// Forward, backward, AdamW update, temperature clamp, then the EMA
    /// update. Advances the step counter.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let step = self.step;
        let cfg = self.config.model.clone();
        let settings = self.config.loss_settings();
        let indices = self.batch_indices(step);
        let (patches, tokens) = self.data.batch(&indices);
        let masks = if self.config.objective.uses_decoder() {
            let mut rng = stream_rng(self.config.seed, STREAM_MASK, step);
            indices
                .iter()
                .map(|_| sample_mask(cfg.vision.num_patches(), self.config.mask_ratio, &mut rng))
                .collect::<std::result::Result<Vec<_>, _>>()?
        } else {
            Vec::new()
        };
        let targets = if self.config.objective.uses_teacher() {
            Some(teacher_targets(&self.target_params(), &cfg, &patches)?)
        } else {
            None
        };
        let batch = BatchInputs { patches, tokens, masks };

        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, true);
        let terms = combined_loss(&mut g, &bound, &cfg, &batch, targets.as_ref(), &settings)?;
        let value = |v| g.value(v).item().expect("scalar loss");
        let (l_i, l_t, total) = (value(terms.l_i), value(terms.l_t), value(terms.total));
        let aux = terms.aux.map(value);
        for (name, v) in [("L_I", Some(l_i)), ("L_T", Some(l_t)), ("aux", aux), ("total", Some(total))] {
            if let Some(v) = v {
                if !v.is_finite() {
                    return Err(Error::Numerical(format!("loss term {name} is not finite at step {step}")));
                }
            }
        }
        let grads = g.backward(terms.total)?;
        let mut named: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, var) in bound.iter() {
            if let Some(t) = grads.get(var) {
                named.insert(name.to_string(), t.clone());
            }
        }
        drop(g);
        let grad_norm = clip_global_norm(&mut named, self.config.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::Numerical(format!("gradient norm is not finite at step {step}")));
        }
        let lr = self.schedule().lr_at(step);
        self.opt.step(&mut self.params, &named, lr);
        let ls = self.params.get_mut(LOG_SIGMA)?;
        ls.data_mut()[0] = clamp_log_sigma(ls.data()[0]);
        let sigma = sigma_from_log(ls.data()[0]);

        let total_steps = self.total_steps();
        let alpha = match &mut self.teacher {
            Some(t) => {
                let a = self.config.ema.alpha_at(step, total_steps);
                ema_update(t, &self.params, a)?;
                Some(a)
            }
            None => None,
        };
        self.step += 1;
        let (l_dist, l_pixel) = match self.config.objective {
            Objective::MaskClip => (aux, None),
            Objective::ClipPixel => (None, aux),
            Objective::Clip => (None, None),
        };
        Ok(StepMetrics {
            kind: "step".into(),
            step,
            epoch: step / self.steps_per_epoch(),
            l_i,
            l_t,
            l_dist,
            l_pixel,
            total,
            sigma,
            alpha,
            lr,
            grad_norm,
        })
    }

    /// Trains until the run ends or, if given, until `stop_epoch` epochs are
    /// complete. Writes `metrics.jsonl`, per-epoch checkpoints under
    /// `checkpoints/` and `final.mclp` in `out`. A fresh run starts a new log;
    /// a resumed one keeps the entries before its current step and appends.
    pub fn run(&mut self, out: Option<&Path>, stop_epoch: Option<u64>) -> Result<RunSummary> {
        let mut log = match out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let p = dir.join("metrics.jsonl");
                let kept = if self.step > 0 { log_prefix(&p, self.step, self.steps_per_epoch())? } else { String::new() };
                let mut w = BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?);
                w.write_all(kept.as_bytes()).map_err(|e| Error::io(&p, e))?;
                Some((w, p))
            }
            None => None,
        };
        let spe = self.steps_per_epoch();
        let mut history = Vec::new();
        let mut epoch_acc: Vec<StepMetrics> = Vec::new();
        let mut checkpoints = Vec::new();
        while !self.is_finished() {
            if let Some(stop) = stop_epoch {
                if self.step >= stop * spe {
                    break;
                }
            }
            let m = self.train_step()?;
            if let Some((w, p)) = &mut log {
                writeln!(w, "{}", serde_json::to_string(&m)?).map_err(|e| Error::io(p.as_path(), e))?;
            }
            epoch_acc.push(m.clone());
            history.push(m);
            let epoch_done = self.step % spe == 0 || self.is_finished();
            if epoch_done {
                let epoch = (self.step - 1) / spe;
                let summary = summarize(epoch, &epoch_acc);
                epoch_acc.clear();
                if let Some((w, p)) = &mut log {
                    writeln!(w, "{}", serde_json::to_string(&summary)?).map_err(|e| Error::io(p.as_path(), e))?;
                }
                let every = self.config.checkpoint_every;
                if let (Some(dir), true) = (out, every > 0 && (epoch + 1) % every == 0) {
                    let path = dir.join("checkpoints").join(format!("epoch_{:05}.mclp", epoch + 1));
                    self.checkpoint().save(&path)?;
                    checkpoints.push(path);
                }
            }
        }
        let mut final_checkpoint = None;
        if let Some((w, p)) = &mut log {
            w.flush().map_err(|e| Error::io(p.as_path(), e))?;
        }
        if let Some(dir) = out {
            let path = dir.join("final.mclp");
            self.checkpoint().save(&path)?;
            final_checkpoint = Some(path);
        }
        Ok(RunSummary {
            history,
            checkpoints,
            final_checkpoint,
        })
    }
}

/// Lines of an existing log that precede `step`.
fn log_prefix(path: &Path, step: u64, steps_per_epoch: u64) -> Result<String> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(String::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        let keep = match v["kind"].as_str() {
            Some("step") => v["step"].as_u64().is_some_and(|s| s < step),
            Some("epoch") => v["epoch"].as_u64().is_some_and(|e| (e + 1) * steps_per_epoch <= step),
            _ => return Err(Error::Format(format!("unrecognized line in {}", path.display()))),
        };
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

fn summarize(epoch: u64, steps: &[StepMetrics]) -> EpochSummary {
    let n = steps.len().max(1) as f64;
    let mean = |f: &dyn Fn(&StepMetrics) -> f64| steps.iter().map(f).sum::<f64>() / n;
    let aux: Vec<f64> = steps.iter().filter_map(|s| s.l_dist.or(s.l_pixel)).collect();
    EpochSummary {
        kind: "epoch".into(),
        epoch,
        steps: steps.len() as u64,
        mean_l_i: mean(&|s| s.l_i),
        mean_l_t: mean(&|s| s.l_t),
        mean_aux: (!aux.is_empty()).then(|| aux.iter().sum::<f64>() / aux.len() as f64),
        mean_total: mean(&|s| s.total),
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub history: Vec<StepMetrics>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
}
