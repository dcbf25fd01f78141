//! EMA teacher, teacher targets, the one-block decoder and the masked
//! smooth-L1 feature loss.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ImageArray;
use crate::encoders::{encode_patches, init_stack, stack, ModelConfig, VisionConfig, Inference};
use crate::masking::{assemble_for_decoder, visible_patch_batch, MaskSpec};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

/// Prefix of every parameter the teacher shadows.
pub const TEACHER_SCOPE: &str = "visual.";
pub const MASK_TOKEN: &str = "mask_token";

/// Linear ramp of the EMA weight over optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmaSchedule {
    pub start: f64,
    pub end: f64,
}

impl Default for EmaSchedule {
    fn default() -> Self {
        Self {
            start: 0.999,
            end: 0.9999,
        }
    }
}

impl EmaSchedule {
    /// α for the update that follows optimizer step `step` of `total_steps`.
    pub fn alpha_at(&self, step: u64, total_steps: u64) -> f64 {
        if total_steps <= 1 {
            return self.start;
        }
        let t = (step as f64 / (total_steps - 1) as f64).min(1.0);
        self.start + (self.end - self.start) * t
    }

    pub fn validate(&self) -> Result<()> {
        for a in [self.start, self.end] {
            if !(0.0..=1.0).contains(&a) {
                return Err(TensorError::Invalid(format!("EMA weight {a} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// `θ̄ ← α θ̄ + (1 − α) θ` for every teacher entry. α = 0 copies and α = 1
/// leaves the teacher untouched, both exactly.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TensorError::Invalid(format!("EMA weight {alpha} outside [0, 1]")));
    }
    student.check_isomorphic_subset(teacher)?;
    if alpha == 1.0 {
        return Ok(());
    }
    for (name, t) in teacher.iter_mut() {
        let s = student.get(name)?;
        if alpha == 0.0 {
            t.data_mut().copy_from_slice(s.data());
        } else {
            for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
                *a = alpha * *a + (1.0 - alpha) * b;
            }
        }
    }
    Ok(())
}

/// Shadow copy of the image encoder.
pub fn teacher_from_student(student: &ParamStore) -> ParamStore {
    student.subset(TEACHER_SCOPE)
}

/// Full-image features `{f̄_cls, f̄_1..f̄_N}` from the teacher, as a plain
/// tensor `[B, N + 1, W]` detached from any graph.
pub fn teacher_targets(teacher: &ParamStore, cfg: &ModelConfig, patches: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = teacher.bind(&mut g, false);
    let all: Vec<usize> = (0..cfg.vision.num_patches()).collect();
    let feats = encode_patches(&mut g, &b, &cfg.vision, patches.clone(), &vec![all; patches.shape()[0]])?;
    Ok(g.value(feats).clone())
}

/// Same as [`teacher_targets`] but from images.
pub fn teacher_targets_for_images(
    teacher: &ParamStore,
    cfg: &ModelConfig,
    images: &[&ImageArray],
) -> Result<Tensor> {
    Inference::new(cfg, teacher).image_tokens(images)
}

/// Decoder blocks, final norm and the mask token.
pub fn init_decoder_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng, store: &mut ParamStore) {
    let v = &cfg.vision;
    init_stack(store, rng, "decoder", cfg.decoder_depth, v.width, v.mlp_ratio);
    let mut init = Init { store, rng };
    init.normal(MASK_TOKEN.into(), &[1, v.width]);
}

/// Student pass over the visible patches, mask-token assembly and the
/// decoder. `patches` is the full `[B, N, 3P²]` batch; returns `[B, N + 1, W]`.
pub fn decode_predict(
    g: &mut Graph,
    b: &Bound,
    cfg: &ModelConfig,
    patches: &Tensor,
    masks: &[MaskSpec],
) -> Result<Var> {
    let v: &VisionConfig = &cfg.vision;
    let visible = visible_patch_batch(patches, masks)?;
    let positions: Vec<Vec<usize>> = masks.iter().map(|m| m.visible().to_vec()).collect();
    let feats = encode_patches(g, b, v, visible, &positions)?;
    let mask_token = b.var(MASK_TOKEN)?;
    let pos = b.var("visual.pos_embed")?;
    let x = assemble_for_decoder(g, feats, masks, mask_token, pos)?;
    stack(g, b, "decoder", x, cfg.decoder_depth, v.heads, None)
}

/// Rows of the flattened `[B, N + 1, ·]` layout that belong to masked patches.
pub fn masked_rows(masks: &[MaskSpec]) -> Vec<usize> {
    let mut rows = Vec::new();
    for (b, m) in masks.iter().enumerate() {
        let base = b * (m.num_patches() + 1);
        rows.extend(m.masked().iter().map(|&i| base + 1 + i));
    }
    rows
}

/// Mean over masked tokens (and over the feature axis) of the elementwise
/// smooth-L1 between predictions and stop-gradient targets. Zero when no
/// patch is masked.
pub fn distill_loss(g: &mut Graph, pred: Var, targets: Var, masks: &[MaskSpec], beta: f64) -> Result<Var> {
    let (sp, st) = (g.shape(pred).to_vec(), g.shape(targets).to_vec());
    if sp != st || sp.len() != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "distill_loss",
            lhs: sp,
            rhs: st,
        });
    }
    let rows = masked_rows(masks);
    if rows.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let w = sp[2];
    let targets = g.stop_gradient(targets);
    let p = g.reshape(pred, &[sp[0] * sp[1], w])?;
    let t = g.reshape(targets, &[sp[0] * sp[1], w])?;
    let p = g.gather_rows(p, &rows)?;
    let t = g.gather_rows(t, &rows)?;
    let l = g.smooth_l1(p, t, beta)?;
    g.mean(l)
}

/// Layer norm without affine parameters, per token; the optional target
/// normalization.
pub fn normalize_tokens(t: &Tensor, eps: f64) -> Tensor {
    let d = t.last_dim();
    let mut out = Vec::with_capacity(t.numel());
    for row in t.rows() {
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        out.extend(row.iter().map(|v| (v - mu) * rs));
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("visual.w", Tensor::full(vec![3], v));
        s
    }

    #[test]
    fn ema_arithmetic() {
        let mut t = store(1.0);
        ema_update(&mut t, &store(0.0), 0.999).unwrap();
        assert_eq!(t.get("visual.w").unwrap().data()[0], 0.999);
        let mut t = store(1.0);
        ema_update(&mut t, &store(-0.0), 0.0).unwrap();
        assert!(t.bitwise_eq(&store(-0.0)));
        let mut t = store(1.0);
        ema_update(&mut t, &store(5.0), 1.0).unwrap();
        assert_eq!(t, store(1.0));
    }

    #[test]
    fn ema_rejects_mismatched_trees() {
        let mut t = store(1.0);
        let mut s = ParamStore::new();
        s.insert("visual.w", Tensor::zeros(vec![4]));
        assert!(ema_update(&mut t, &s, 0.5).is_err());
        assert!(ema_update(&mut t, &ParamStore::new(), 0.5).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let s = EmaSchedule::default();
        assert_eq!(s.alpha_at(0, 101), 0.999);
        assert!((s.alpha_at(100, 101) - 0.9999).abs() < 1e-15);
        assert!((s.alpha_at(50, 101) - 0.99945).abs() < 1e-12);
    }

    #[test]
    fn distill_spot_values() {
        let masks = [MaskSpec::all(1)];
        for (diff, want) in [(1.0, 0.25), (3.0, 2.0)] {
            let mut g = Graph::new();
            let p = g.param(Tensor::new(vec![1, 2, 1], vec![9.0, diff]).unwrap());
            let t = g.constant(Tensor::new(vec![1, 2, 1], vec![0.0, 0.0]).unwrap());
            let l = distill_loss(&mut g, p, t, &masks, 2.0).unwrap();
            assert!((g.value(l).item().unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_mask_gives_zero() {
        let mut g = Graph::new();
        let p = g.param(Tensor::full(vec![1, 3, 2], 1.0));
        let t = g.constant(Tensor::zeros(vec![1, 3, 2]));
        let l = distill_loss(&mut g, p, t, &[MaskSpec::none(2)], 2.0).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
    }
}
