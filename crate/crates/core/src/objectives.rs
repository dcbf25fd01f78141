//! Contrastive image-text loss, the combined MaskCLIP objective and the
//! pixel-reconstruction ablation arm.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::distillation::{decode_predict, distill_loss, masked_rows, normalize_tokens};
use crate::encoders::{encode_patches, encode_text, image_embedding, linear, text_embedding, ModelConfig};
use crate::masking::MaskSpec;
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

pub const LOG_SIGMA: &str = "log_sigma";
pub const SIGMA_INIT: f64 = 0.07;
pub const SIGMA_MIN: f64 = 0.01;
pub const SIGMA_MAX: f64 = 100.0;
pub const PIXEL_EPS: f64 = 1e-6;
const UNIT_NORM_TOL: f64 = 1e-4;

/// Which auxiliary image objective accompanies the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Objective {
    #[serde(rename = "clip")]
    Clip,
    #[serde(rename = "clip_pixel")]
    ClipPixel,
    #[serde(rename = "maskclip")]
    MaskClip,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Clip => "clip",
            Objective::ClipPixel => "clip_pixel",
            Objective::MaskClip => "maskclip",
        }
    }

    pub fn uses_decoder(self) -> bool {
        self != Objective::Clip
    }

    pub fn uses_teacher(self) -> bool {
        self == Objective::MaskClip
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "clip" => Ok(Objective::Clip),
            "clip_pixel" => Ok(Objective::ClipPixel),
            "maskclip" => Ok(Objective::MaskClip),
            other => Err(format!(
                "unknown objective {other:?} (expected clip, clip_pixel or maskclip)"
            )),
        }
    }
}

pub fn sigma_from_log(log_sigma: f64) -> f64 {
    log_sigma.exp()
}

/// Clamps a stored log-temperature so that σ stays in `[0.01, 100]`.
pub fn clamp_log_sigma(log_sigma: f64) -> f64 {
    log_sigma.clamp(SIGMA_MIN.ln(), SIGMA_MAX.ln())
}

fn check_unit_rows(t: &Tensor, which: &str) -> Result<()> {
    for (i, row) in t.rows().enumerate() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(TensorError::Invalid(format!(
                "{which} embedding row {i} has norm {n}, expected 1"
            )));
        }
    }
    Ok(())
}

/// Symmetric InfoNCE over a batch of paired unit embeddings `[B, d]`.
/// Returns `(L_I, L_T)`: image-to-text and text-to-image cross-entropies.
pub fn contrastive_loss(g: &mut Graph, ei: Var, et: Var, log_sigma: Var) -> Result<(Var, Var)> {
    let (si, st) = (g.shape(ei).to_vec(), g.shape(et).to_vec());
    if si.len() != 2 || si != st {
        return Err(TensorError::ShapeMismatch {
            op: "contrastive_loss",
            lhs: si,
            rhs: st,
        });
    }
    let b = si[0];
    if b == 0 {
        return Err(TensorError::Invalid("contrastive loss needs at least one pair".into()));
    }
    check_unit_rows(g.value(ei), "image")?;
    check_unit_rows(g.value(et), "text")?;
    let ett = g.transpose(et)?;
    let sims = g.matmul(ei, ett)?;
    let neg = g.scale(log_sigma, -1.0)?;
    let inv_sigma = g.exp(neg)?;
    let logits = g.mul(sims, inv_sigma)?;
    let diag: Vec<usize> = (0..b).map(|i| i * b + i).collect();
    let side = |axis: usize, g: &mut Graph| -> Result<Var> {
        let ls = g.log_softmax(logits, axis)?;
        let flat = g.reshape(ls, &[b * b])?;
        let picked = g.gather_rows(flat, &diag)?;
        let m = g.mean(picked)?;
        g.scale(m, -1.0)
    };
    let li = side(1, g)?;
    let lt = side(0, g)?;
    Ok((li, lt))
}

/// Per-patch standardization `(x − μ) / sqrt(σ² + ε)` of pixel targets.
pub fn normalize_patch(p: &[f64]) -> Vec<f64> {
    let n = p.len() as f64;
    let mu = p.iter().sum::<f64>() / n;
    let var = p.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let d = (var + PIXEL_EPS).sqrt();
    p.iter().map(|v| (v - mu) / d).collect()
}

/// Standardizes every patch of a `[B, N, 3P²]` batch.
pub fn pixel_targets(patches: &Tensor) -> Tensor {
    let mut out = Vec::with_capacity(patches.numel());
    for row in patches.rows() {
        out.extend(normalize_patch(row));
    }
    Tensor::new(patches.shape().to_vec(), out).expect("same shape")
}

/// Mean squared error over masked patches. `pred` is `[B, N + 1, 3P²]`
/// (cls slot ignored) and `targets` the normalized `[B, N, 3P²]` patches.
pub fn pixel_reconstruction_loss(g: &mut Graph, pred: Var, targets: &Tensor, masks: &[MaskSpec]) -> Result<Var> {
    let sp = g.shape(pred).to_vec();
    let st = targets.shape();
    if sp.len() != 3 || st.len() != 3 || sp[0] != st[0] || sp[1] != st[1] + 1 || sp[2] != st[2] {
        return Err(TensorError::ShapeMismatch {
            op: "pixel_reconstruction_loss",
            lhs: sp,
            rhs: st.to_vec(),
        });
    }
    let rows = masked_rows(masks);
    if rows.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let d = sp[2];
    let n = st[1];
    let mut tdata = Vec::with_capacity(rows.len() * d);
    for (b, m) in masks.iter().enumerate() {
        for &i in m.masked() {
            let o = (b * n + i) * d;
            tdata.extend_from_slice(&targets.data()[o..o + d]);
        }
    }
    let t = g.constant(Tensor::new(vec![rows.len(), d], tdata)?);
    let p = g.reshape(pred, &[sp[0] * sp[1], d])?;
    let p = g.gather_rows(p, &rows)?;
    let diff = g.sub(p, t)?;
    let sq = g.mul(diff, diff)?;
    g.mean(sq)
}

pub const PIXEL_HEAD: &str = "pixel_head";

pub fn init_pixel_head(cfg: &ModelConfig, rng: &mut ChaCha8Rng, store: &mut ParamStore) {
    let mut init = Init { store, rng };
    init.linear(PIXEL_HEAD, cfg.vision.width, cfg.vision.patch_dim(), true);
}

/// Everything one training step consumes besides parameters.
#[derive(Debug, Clone)]
pub struct BatchInputs<'a> {
    /// Full patch batch `[B, N, 3P²]`.
    pub patches: Tensor,
    pub tokens: Vec<&'a TokenSequence>,
    /// One mask per sample; ignored by the plain contrastive arm.
    pub masks: Vec<MaskSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub objective: Objective,
    pub lambda: f64,
    pub beta: f64,
    pub normalize_targets: bool,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            objective: Objective::MaskClip,
            lambda: 1.0,
            beta: 2.0,
            normalize_targets: false,
        }
    }
}

/// Graph nodes of every loss term.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub l_i: Var,
    pub l_t: Var,
    /// `L_Dist` for the maskclip arm, the pixel MSE for the pixel arm.
    pub aux: Option<Var>,
    pub total: Var,
}

/// Builds `L_I + L_T + λ·aux` on `g`. `teacher_feats` must hold the
/// teacher's full-image tokens `[B, N + 1, W]` for the maskclip arm.
///
/// With λ = 0 the auxiliary term is still evaluated (for logging) but is
/// left off the loss path, so nothing upstream of it receives gradient.
pub fn combined_loss(
    g: &mut Graph,
    b: &Bound,
    cfg: &ModelConfig,
    batch: &BatchInputs<'_>,
    teacher_feats: Option<&Tensor>,
    settings: &LossSettings,
) -> Result<LossTerms> {
    if settings.lambda < 0.0 || !settings.lambda.is_finite() {
        return Err(TensorError::Invalid(format!("lambda must be >= 0, got {}", settings.lambda)));
    }
    let bsz = batch.tokens.len();
    let all: Vec<usize> = (0..cfg.vision.num_patches()).collect();
    let tokens = encode_patches(g, b, &cfg.vision, batch.patches.clone(), &vec![all; bsz])?;
    let ei = image_embedding(g, b, tokens)?;
    let (_, eos) = encode_text(g, b, &cfg.text, &batch.tokens)?;
    let et = text_embedding(g, b, eos)?;
    let log_sigma = b.var(LOG_SIGMA)?;
    let (l_i, l_t) = contrastive_loss(g, ei, et, log_sigma)?;
    let base = g.add(l_i, l_t)?;

    let aux = match settings.objective {
        Objective::Clip => None,
        Objective::MaskClip => {
            let feats = teacher_feats.ok_or_else(|| {
                TensorError::Invalid("maskclip objective needs teacher features".into())
            })?;
            let feats = if settings.normalize_targets {
                normalize_tokens(feats, crate::encoders::LN_EPS)
            } else {
                feats.clone()
            };
            let pred = decode_predict(g, b, cfg, &batch.patches, &batch.masks)?;
            let tv = g.constant(feats);
            Some(distill_loss(g, pred, tv, &batch.masks, settings.beta)?)
        }
        Objective::ClipPixel => {
            let dec = decode_predict(g, b, cfg, &batch.patches, &batch.masks)?;
            let pred = linear(g, b, PIXEL_HEAD, dec)?;
            let targets = pixel_targets(&batch.patches);
            Some(pixel_reconstruction_loss(g, pred, &targets, &batch.masks)?)
        }
    };
    let total = match aux {
        Some(a) if settings.lambda > 0.0 => {
            let w = g.scale(a, settings.lambda)?;
            g.add(base, w)?
        }
        _ => base,
    };
    Ok(LossTerms { l_i, l_t, aux, total })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn losses(ei: &[f64], et: &[f64], b: usize, d: usize, sigma: f64) -> (f64, f64) {
        let mut g = Graph::new();
        let a = g.param(Tensor::new(vec![b, d], ei.to_vec()).unwrap());
        let t = g.param(Tensor::new(vec![b, d], et.to_vec()).unwrap());
        let s = g.param(Tensor::scalar(sigma.ln()));
        let (li, lt) = contrastive_loss(&mut g, a, t, s).unwrap();
        (g.value(li).item().unwrap(), g.value(lt).item().unwrap())
    }

    #[test]
    fn single_pair_is_zero() {
        let (li, lt) = losses(&[0.6, 0.8], &[1.0, 0.0], 1, 2, 0.07);
        assert_eq!(li, 0.0);
        assert_eq!(lt, 0.0);
    }

    #[test]
    fn orthonormal_pair() {
        let e = [1.0, 0.0, 0.0, 1.0];
        let (li, lt) = losses(&e, &e, 2, 2, 1.0);
        let want = (1.0 + (-1.0f64).exp()).ln();
        assert!((li - want).abs() < 1e-12);
        assert!((lt - want).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_unit_rows() {
        let mut g = Graph::new();
        let a = g.param(Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap());
        let s = g.param(Tensor::scalar(0.0));
        assert!(contrastive_loss(&mut g, a, a, s).is_err());
    }

    #[test]
    fn constant_patch_normalizes_to_zero() {
        let n = normalize_patch(&[0.5; 12]);
        assert!(n.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn objective_names_round_trip() {
        for o in [Objective::Clip, Objective::ClipPixel, Objective::MaskClip] {
            assert_eq!(o.as_str().parse::<Objective>().unwrap(), o);
            let j = serde_json::to_string(&o).unwrap();
            assert_eq!(serde_json::from_str::<Objective>(&j).unwrap(), o);
        }
        assert!("mae".parse::<Objective>().is_err());
    }

    #[test]
    fn clamp_bounds() {
        assert_eq!(sigma_from_log(clamp_log_sigma(10.0)), 100.0f64.ln().exp());
        assert!((sigma_from_log(clamp_log_sigma(-10.0)) - 0.01).abs() < 1e-15);
    }
}
