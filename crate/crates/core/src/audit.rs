//! The finite-difference gradient suite: every primitive on random inputs
//! and the full combined loss of each objective on the tiny model.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Tokenizer;
use crate::distillation::{teacher_targets, TEACHER_SCOPE};
use crate::encoders::ModelConfig;
use crate::error::{Error, Result};
use crate::masking::sample_mask;
use crate::objectives::{combined_loss, BatchInputs, LossSettings, Objective};
use crate::params::{uniform, Bound};
use crate::tensor::{finite_difference_check, finite_difference_check_floored, Graph, Tensor, Var};
use crate::trainer::{init_params, stream_rng, TrainConfig};

pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const MODEL_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;
/// Step of the whole-model check. Rounding noise in the quotient scales
/// as 1/step and is about 1e-11 here.
pub const MODEL_STEP: f64 = 5e-5;
/// Denominator floor of the whole-model check.
pub const MODEL_FLOOR: f64 = 1e-6;
/// The whole-model check runs at the initial parameters plus uniform noise
/// of this half-width. At the initialization itself the projected
/// embeddings have tiny norms and l2 normalization is nearly singular,
/// which swamps any finite-difference step in truncation error.
pub const MODEL_JITTER: f64 = 0.3;

const STREAM_AUDIT: u64 = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub cases: usize,
    pub coords: usize,
    /// Where the worst error occurred, with both derivative estimates.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub components: Vec<ComponentCheck>,
    pub passed: bool,
}

impl GradcheckReport {
    fn new(components: Vec<ComponentCheck>) -> Self {
        let passed = components.iter().all(|c| c.passed);
        Self { components, passed }
    }

    pub fn worst(&self, tolerance: f64) -> f64 {
        self.components
            .iter()
            .filter(|c| c.tolerance == tolerance)
            .map(|c| c.max_rel_err)
            .fold(0.0, f64::max)
    }
}

type Apply = fn(&mut Graph, &[Var]) -> crate::tensor::Result<Var>;
type Build = fn(&mut ChaCha8Rng, bool) -> Vec<Tensor>;

/// A primitive under test: random inputs for the plain (`false`) or
/// batched (`true`) shape class, and the op itself.
struct Case {
    name: &'static str,
    build: Build,
    apply: Apply,
}

fn shape(batched: bool, last: usize) -> Vec<usize> {
    if batched {
        vec![2, 3, last]
    } else {
        vec![3, last]
    }
}

fn u(rng: &mut ChaCha8Rng, s: &[usize]) -> Tensor {
    uniform(rng, s, -1.0, 1.0)
}

fn away_from_zero(rng: &mut ChaCha8Rng, s: &[usize], lo: f64) -> Tensor {
    let mut t = uniform(rng, s, lo, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Reduces `out` to a scalar with fixed, non-uniform weights, so that
/// normalizing ops (softmax, l2) have non-trivial gradients.
fn weighted_sum(g: &mut Graph, out: Var) -> crate::tensor::Result<Var> {
    let s = g.shape(out).to_vec();
    let n: usize = s.iter().product();
    let w = Tensor::new(s, (0..n).map(|k| (0.7 * k as f64 + 0.3).sin()).collect())?;
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "add",
            build: |r, b| vec![u(r, &shape(b, 4)), u(r, &shape(b, 4))],
            apply: |g, v| g.add(v[0], v[1]),
        },
        Case {
            name: "add_broadcast",
            build: |r, b| vec![u(r, &shape(b, 4)), u(r, &[4])],
            apply: |g, v| g.add(v[0], v[1]),
        },
        Case {
            name: "sub",
            build: |r, b| vec![u(r, &shape(b, 4)), u(r, &[3, 1])],
            apply: |g, v| g.sub(v[0], v[1]),
        },
        Case {
            name: "mul",
            build: |r, b| vec![u(r, &shape(b, 4)), u(r, &shape(b, 4))],
            apply: |g, v| g.mul(v[0], v[1]),
        },
        Case {
            name: "div",
            build: |r, b| vec![u(r, &shape(b, 4)), uniform(r, &[4], 0.5, 2.0)],
            apply: |g, v| g.div(v[0], v[1]),
        },
        Case {
            name: "exp",
            build: |r, b| vec![u(r, &shape(b, 4))],
            apply: |g, v| g.exp(v[0]),
        },
        Case {
            name: "log",
            build: |r, b| vec![uniform(r, &shape(b, 4), 0.5, 2.0)],
            apply: |g, v| g.log(v[0]),
        },
        Case {
            name: "abs",
            build: |r, b| vec![away_from_zero(r, &shape(b, 4), 0.1)],
            apply: |g, v| g.abs(v[0]),
        },
        Case {
            name: "gelu",
            build: |r, b| {
                // GELU' vanishes near -0.75; stay clear so relative error is meaningful
                let mut t = uniform(r, &shape(b, 4), -3.0, 3.0);
                for v in t.data_mut() {
                    if (-1.0..-0.5).contains(v) {
                        *v += 2.0;
                    }
                }
                vec![t]
            },
            apply: |g, v| g.gelu(v[0]),
        },
        Case {
            name: "scale",
            build: |r, b| vec![u(r, &shape(b, 4))],
            apply: |g, v| g.scale(v[0], -1.7),
        },
        Case {
            name: "matmul",
            build: |r, b| vec![u(r, &shape(b, 4)), u(r, &[4, 5])],
            apply: |g, v| g.matmul(v[0], v[1]),
        },
        Case {
            name: "matmul_batched",
            build: |r, _| vec![u(r, &[2, 3, 4]), u(r, &[2, 4, 5])],
            apply: |g, v| g.matmul(v[0], v[1]),
        },
        Case {
            name: "transpose",
            build: |r, b| vec![u(r, &shape(b, 4))],
            apply: |g, v| g.transpose(v[0]),
        },
        Case {
            name: "permute",
            build: |r, _| vec![u(r, &[2, 3, 4])],
            apply: |g, v| g.permute(v[0], &[2, 0, 1]),
        },
        Case {
            name: "reshape",
            build: |r, b| vec![u(r, &shape(b, 4))],
            apply: |g, v| {
                let n = g.value(v[0]).numel();
                g.reshape(v[0], &[n / 2, 2])
            },
        },
        Case {
            name: "concat",
            build: |r, b| vec![u(r, &shape(b, 4)), u(r, &shape(b, 2))],
            apply: |g, v| {
                let axis = g.shape(v[0]).len() - 1;
                g.concat(&[v[0], v[1]], axis)
            },
        },
        Case {
            name: "narrow",
            build: |r, b| vec![u(r, &shape(b, 4))],
            apply: |g, v| {
                let axis = g.shape(v[0]).len() - 1;
                g.narrow(v[0], axis, 1, 2)
            },
        },
        Case {
            name: "gather_rows",
            build: |r, _| vec![u(r, &[5, 4])],
            apply: |g, v| g.gather_rows(v[0], &[2, 0, 2, 4]),
        },
        Case {
            name: "embedding",
            build: |r, _| vec![u(r, &[6, 4])],
            apply: |g, v| g.embedding(v[0], &[1, 5, 1, 0]),
        },
        Case {
            name: "scatter_rows",
            build: |r, _| vec![u(r, &[3, 4])],
            apply: |g, v| g.scatter_rows(v[0], &[4, 0, 2], 5),
        },
        Case {
            name: "sum_axis",
            build: |r, b| vec![u(r, &shape(b, 4))],
            apply: |g, v| g.sum_axis(v[0], 0),
        },
        Case {
            name: "mean_axis",
            build: |r, b| vec![u(r, &shape(b, 4))],
            apply: |g, v| {
                let axis = g.shape(v[0]).len() - 1;
                g.mean_axis(v[0], axis)
            },
        },
        Case {
            name: "mean",
            build: |r, b| vec![u(r, &shape(b, 4))],
            apply: |g, v| {
                let m = g.mean(v[0])?;
                g.mul(m, m)
            },
        },
        Case {
            name: "softmax",
            build: |r, b| vec![uniform(r, &shape(b, 4), -2.0, 2.0)],
            apply: |g, v| {
                let axis = g.shape(v[0]).len() - 1;
                g.softmax(v[0], axis)
            },
        },
        Case {
            name: "softmax_axis0",
            build: |r, b| vec![uniform(r, &shape(b, 4), -2.0, 2.0)],
            apply: |g, v| g.softmax(v[0], 0),
        },
        Case {
            name: "log_softmax",
            build: |r, b| vec![uniform(r, &shape(b, 4), -2.0, 2.0)],
            apply: |g, v| {
                let axis = g.shape(v[0]).len() - 1;
                g.log_softmax(v[0], axis)
            },
        },
        Case {
            name: "layer_norm",
            build: |r, b| vec![u(r, &shape(b, 4)), uniform(r, &[4], 0.5, 1.5), u(r, &[4])],
            apply: |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        },
        Case {
            name: "l2_normalize",
            build: |r, b| vec![away_from_zero(r, &shape(b, 4), 0.2)],
            apply: |g, v| g.l2_normalize(v[0]),
        },
        Case {
            name: "smooth_l1",
            build: |r, b| {
                let a = uniform(r, &shape(b, 4), -3.0, 3.0);
                let mut t = uniform(r, &shape(b, 4), -3.0, 3.0);
                // keep |a - t| clear of the kinks at 0 and β = 2
                for (x, y) in a.data().iter().zip(t.data_mut()) {
                    let d = (x - *y).abs();
                    if d < 0.05 || (d - 2.0).abs() < 0.05 {
                        *y = x - 1.0;
                    }
                }
                vec![a, t]
            },
            apply: |g, v| g.smooth_l1(v[0], v[1], 2.0),
        },
    ]
}

pub fn primitive_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Checks every primitive on `reps` random inputs per shape class.
pub fn primitive_suite(reps: usize, seed: u64) -> Result<Vec<ComponentCheck>> {
    let mut out = Vec::new();
    for (ci, case) in cases().iter().enumerate() {
        let mut rng = stream_rng(seed, STREAM_AUDIT, ci as u64);
        let (mut worst, mut coords, mut n) = (0.0f64, 0, 0);
        let mut at = (String::new(), 0.0, 0.0);
        for batched in [false, true] {
            for _ in 0..reps {
                let inputs = (case.build)(&mut rng, batched);
                let apply = case.apply;
                let r = finite_difference_check(
                    |g, v| {
                        let y = apply(g, v)?;
                        weighted_sum(g, y)
                    },
                    &inputs,
                    FD_STEP,
                    None,
                )?;
                if r.max_rel_err >= worst {
                    worst = r.max_rel_err;
                    at = (format!("input {} index {}", r.worst.0, r.worst.1), r.analytic, r.numeric);
                }
                coords += r.coords_checked;
                n += 1;
            }
        }
        out.push(ComponentCheck {
            name: case.name.into(),
            max_rel_err: worst,
            tolerance: PRIMITIVE_TOL,
            cases: n,
            coords,
            worst: at.0,
            analytic: at.1,
            numeric: at.2,
            passed: worst < PRIMITIVE_TOL,
        });
    }
    Ok(out)
}

const CAPTIONS: [&str; 2] = ["a red circle in the top left", "there is a large blue square"];

/// Checks the full loss of `objective` on a 2-pair batch of the tiny model,
/// probing at most `max_coords` coordinates per parameter tensor.
/// Relative error uses the floor [`MODEL_FLOOR`], so structurally zero
/// derivatives (attention key biases) are held to an absolute bound.
pub fn model_check(objective: Objective, seed: u64, max_coords: Option<usize>) -> Result<ComponentCheck> {
    let cfg = TrainConfig {
        objective,
        model: ModelConfig::tiny(),
        seed,
        mask_ratio: 0.5,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let model = cfg.model.clone();
    let mut params = init_params(&cfg);
    let mut rng = stream_rng(seed, STREAM_AUDIT, 1 << 20);
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-MODEL_JITTER..=MODEL_JITTER);
        }
    }
    let patches = uniform(&mut rng, &[2, model.vision.num_patches(), model.vision.patch_dim()], 0.0, 1.0);
    let tok = Tokenizer::new(model.text.context_length)?;
    let seqs: Vec<_> = CAPTIONS.iter().map(|c| tok.tokenize(c)).collect();
    let masks = if objective.uses_decoder() {
        (0..2)
            .map(|_| sample_mask(model.vision.num_patches(), cfg.mask_ratio, &mut rng))
            .collect::<std::result::Result<Vec<_>, _>>()?
    } else {
        Vec::new()
    };
    let targets = if objective.uses_teacher() {
        Some(teacher_targets(&params.subset(TEACHER_SCOPE), &model, &patches)?)
    } else {
        None
    };
    let settings = LossSettings {
        objective,
        ..LossSettings::default()
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let r = finite_difference_check_floored(
        |g, vars| {
            let b = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
            let batch = BatchInputs {
                patches: patches.clone(),
                tokens: seqs.iter().collect(),
                masks: masks.clone(),
            };
            Ok(combined_loss(g, &b, &model, &batch, targets.as_ref(), &settings)?.total)
        },
        &values,
        MODEL_STEP,
        max_coords,
        MODEL_FLOOR,
    )?;
    Ok(ComponentCheck {
        name: format!("loss:{objective}"),
        max_rel_err: r.max_rel_err,
        tolerance: MODEL_TOL,
        cases: 1,
        coords: r.coords_checked,
        worst: format!("{} index {}", names[r.worst.0], r.worst.1),
        analytic: r.analytic,
        numeric: r.numeric,
        passed: r.max_rel_err < MODEL_TOL,
    })
}

/// The full suite behind the `gradcheck` command.
pub fn run_gradcheck(reps: usize, seed: u64) -> Result<GradcheckReport> {
    let mut components = primitive_suite(reps, seed)?;
    for o in [Objective::MaskClip, Objective::Clip, Objective::ClipPixel] {
        components.push(model_check(o, seed, None)?);
    }
    let report = GradcheckReport::new(components);
    if report.components.is_empty() {
        return Err(Error::Config("gradcheck ran no components".into()));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass_quick() {
        for c in primitive_suite(3, 1).unwrap() {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn maskclip_loss_passes_sampled() {
        let c = model_check(Objective::MaskClip, 0, Some(4)).unwrap();
        assert!(c.passed, "{c:?}");
    }
}
