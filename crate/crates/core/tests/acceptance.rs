//! Acceptance harness: one PASS/FAIL line per criterion.
//!
//! Criteria 6 and 8 are empirical (directional ablation and localization on
//! trained desk models); their outcome is printed with per-seed values and
//! does not abort the run. Every other criterion is a hard gate.

use std::fs;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use maskclip_core::audit::{run_gradcheck, MODEL_TOL, PRIMITIVE_TOL};
use maskclip_core::checkpoint::Checkpoint;
use maskclip_core::corpus::{generate_samples, Sample, SceneOptions, Tokenizer};
use maskclip_core::distillation::{ema_update, teacher_targets};
use maskclip_core::encoders::Inference;
use maskclip_core::evaluation::{
    build_label_embeddings, dense_zero_shot_segment, linear_probe, localization_probe, patch_truth, retrieval_eval,
    rows_of, segmentation_classes, shape_labels, ProbeConfig, PromptSet,
};
use maskclip_core::masking::{mask_count, sample_mask};
use maskclip_core::objectives::{combined_loss, contrastive_loss, BatchInputs, Objective};
use maskclip_core::params::ParamStore;
use maskclip_core::tensor::{Graph, Tensor};
use maskclip_core::trainer::{Dataset, TrainConfig, Trainer};

/// Pretraining protocol shared by criteria 6 and 8.
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
/// 256 pairs at the desk defaults (50 epochs of batch 32): 400 steps per arm.
const ABLATION_PAIRS: usize = 256;
const EVAL_ITEMS: usize = 200;
const OVERFIT_STEPS: u64 = 400;

struct Outcome {
    passed: bool,
    hard: bool,
    detail: String,
}

fn hard(passed: bool, detail: String) -> Outcome {
    Outcome { passed, hard: true, detail }
}

fn report(n: usize, title: &str, o: &Outcome, secs: f64) {
    let verdict = if o.passed { "PASS" } else { "FAIL" };
    println!("criterion {n} [{verdict}] {title}: {} ({secs:.1}s)", o.detail);
}

fn c1_gradients() -> Outcome {
    let t0 = Instant::now();
    let r = run_gradcheck(100, 0).expect("gradcheck runs");
    let secs = t0.elapsed().as_secs_f64();
    let prim = r.worst(PRIMITIVE_TOL);
    let model = r.worst(MODEL_TOL);
    let failing: Vec<&str> = r.components.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    let ok = r.passed && prim < 1e-6 && model < 1e-4 && secs < 120.0;
    hard(
        ok,
        format!(
            "{} components, worst primitive rel err {prim:.2e} (< 1e-6), worst full-loss rel err {model:.2e} (< 1e-4), failing {failing:?}",
            r.components.len()
        ),
    )
}

fn loss_pair(ei: &[Vec<f64>], et: &[Vec<f64>], sigma: f64) -> (f64, f64) {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(ei).unwrap());
    let b = g.constant(Tensor::from_rows(et).unwrap());
    let s = g.constant(Tensor::scalar(sigma.ln()));
    let (li, lt) = contrastive_loss(&mut g, a, b, s).unwrap();
    (g.value(li).item().unwrap(), g.value(lt).item().unwrap())
}

fn c2_exact_losses() -> Outcome {
    let (b1i, b1t) = loss_pair(&[vec![0.6, 0.8]], &[vec![0.0, 1.0]], 0.07);
    let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let (b2i, b2t) = loss_pair(&eye, &eye, 1.0);
    // softmax over logits (1, 0): -log(e / (e + 1))
    let oracle = (1.0f64 + (-1.0f64).exp()).ln();
    let e2 = (b2i - oracle).abs().max((b2t - oracle).abs());

    let mut g = Graph::new();
    let a = g.constant(Tensor::from_slice(&[1.0, -3.0, 0.5, 4.0]));
    let z = g.constant(Tensor::from_slice(&[0.0, 0.0, 0.0, 0.0]));
    let s = g.smooth_l1(a, z, 2.0).unwrap();
    let got = g.value(s).data().to_vec();
    let want = [0.25, 2.0, 0.0625, 3.0];
    let e3 = got.iter().zip(want).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let ok = b1i == 0.0 && b1t == 0.0 && e2 < 1e-9 && e3 < 1e-12;
    hard(
        ok,
        format!("B=1 loss ({b1i}, {b1t}); B=2 orthonormal |err| {e2:.1e} (< 1e-9); smooth-L1 |err| {e3:.1e} (< 1e-12)"),
    )
}

fn random_tree(rng: &mut ChaCha8Rng) -> ParamStore {
    let mut s = ParamStore::new();
    for i in 0..rng.random_range(1..6) {
        let n = rng.random_range(1..20);
        s.insert(format!("visual.t{i}"), Tensor::from_slice(&(0..n).map(|_| rng.random_range(-5.0..5.0)).collect::<Vec<_>>()));
    }
    s
}

fn perturbed(s: &ParamStore, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut out = s.clone();
    for (_, t) in out.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-5.0..5.0);
        }
    }
    out
}

fn distance(a: &ParamStore, b: &ParamStore) -> f64 {
    a.iter()
        .map(|(n, t)| t.data().iter().zip(b.get(n).unwrap().data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

fn c3_ema() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut copy_ok, mut freeze_ok, mut contract_ok) = (true, true, true);
    for _ in 0..500 {
        let teacher = random_tree(&mut rng);
        let student = perturbed(&teacher, &mut rng);
        let mut t0 = teacher.clone();
        ema_update(&mut t0, &student, 0.0).unwrap();
        copy_ok &= t0.bitwise_eq(&student);
        let mut t1 = teacher.clone();
        ema_update(&mut t1, &student, 1.0).unwrap();
        freeze_ok &= t1.bitwise_eq(&teacher);
        let alpha = rng.random_range(0.0..1.0);
        let mut ta = teacher.clone();
        ema_update(&mut ta, &student, alpha).unwrap();
        contract_ok &= distance(&ta, &student) <= alpha * distance(&teacher, &student) * (1.0 + 1e-12) + 1e-12;
    }

    // drift audit on the desk model: a frozen teacher must come out of full
    // train steps bit-identical while the student moves
    let samples = generate_samples(32, 11, &SceneOptions::default()).unwrap();
    let mut cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    cfg.ema.start = 1.0;
    cfg.ema.end = 1.0;
    let mut t = Trainer::new(cfg.clone(), Dataset::from_samples(&samples, &cfg.model).unwrap()).unwrap();
    let teacher0 = t.teacher.clone().unwrap();
    let student0 = t.params.subset("visual.");
    let (patches, _) = t.data().batch(&[0, 1, 2, 3]);
    let targets0 = teacher_targets(&teacher0, &cfg.model, &patches).unwrap();
    // step 0 runs at the warmup's zero learning rate, so take a few
    let mut m = t.train_step().unwrap();
    for _ in 0..2 {
        m = t.train_step().unwrap();
    }
    let teacher_still = t.teacher.as_ref().unwrap().bitwise_eq(&teacher0);
    let targets1 = teacher_targets(t.teacher.as_ref().unwrap(), &cfg.model, &patches).unwrap();
    let student_moved = distance(&t.params.subset("visual."), &student0);
    let drift_ok = teacher_still && targets1.bitwise_eq(&targets0) && student_moved > 0.0 && m.l_dist.unwrap() > 0.0;
    hard(
        copy_ok && freeze_ok && contract_ok && drift_ok,
        format!(
            "alpha=0 copy {copy_ok}, alpha=1 freeze {freeze_ok}, contraction on 500 random trees {contract_ok}; \
             frozen teacher unchanged after 3 train steps {teacher_still} (student moved {student_moved:.3e}, L_Dist {:.4})",
            m.l_dist.unwrap()
        ),
    )
}

fn c4_masking() -> Outcome {
    let n = TrainConfig::default().model.vision.num_patches();
    let ratio = 0.75;
    let k = mask_count(n, ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut counts = vec![0u64; n];
    let mut partition_ok = true;
    let trials = 100_000;
    for _ in 0..trials {
        let m = sample_mask(n, ratio, &mut rng).unwrap();
        let mut seen = vec![0u8; n];
        for &i in m.masked().iter().chain(m.visible()) {
            seen[i] += 1;
        }
        partition_ok &= seen.iter().all(|&c| c == 1) && m.masked().len() == k;
        for &i in m.masked() {
            counts[i] += 1;
        }
    }
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / trials as f64).collect();
    let worst = freq.iter().map(|f| (f - 0.75).abs()).fold(0.0, f64::max);

    // instrumentation: the student's encoder input length for a real batch
    let cfg = TrainConfig::default();
    let samples = generate_samples(4, 12, &SceneOptions::default()).unwrap();
    let t = Trainer::new(cfg.clone(), Dataset::from_samples(&samples, &cfg.model).unwrap()).unwrap();
    let (patches, tokens) = t.data().batch(&[0, 1, 2, 3]);
    let masks: Vec<_> = (0..4).map(|_| sample_mask(n, ratio, &mut rng).unwrap()).collect();
    let targets = teacher_targets(t.teacher.as_ref().unwrap(), &cfg.model, &patches).unwrap();
    let mut g = Graph::new();
    let bound = t.params.bind(&mut g, true);
    combined_loss(&mut g, &bound, &cfg.model, &BatchInputs { patches, tokens, masks }, Some(&targets), &cfg.loss_settings())
        .unwrap();
    let lens: Vec<Vec<usize>> =
        g.annotations().iter().filter(|(l, _)| l == "visual.input").map(|(_, s)| s.clone()).collect();
    let instr_ok = lens == vec![vec![4, n + 1], vec![4, n - k + 1]];
    hard(
        partition_ok && k == 12 && worst <= 0.01 && instr_ok,
        format!(
            "N={n}, |M|={k} on all {trials} draws, partition {partition_ok}, max |freq-0.75| {worst:.4} (<= 0.01), \
             encoder inputs {lens:?} (student = N-|M|+1 = {})",
            n - k + 1
        ),
    )
}

fn moving_average(values: &[f64], end: usize, window: usize) -> f64 {
    let w = &values[end.saturating_sub(window)..end];
    w.iter().sum::<f64>() / w.len() as f64
}

fn c5_overfit() -> Outcome {
    let samples = generate_samples(32, 5, &SceneOptions::default()).unwrap();
    let cfg = TrainConfig {
        objective: Objective::MaskClip,
        epochs: OVERFIT_STEPS,
        warmup_epochs: 20.0,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(cfg.clone(), Dataset::from_samples(&samples, &cfg.model).unwrap()).unwrap();
    let hist = t.run(None, None).unwrap().history;
    let inf = Inference::new(&cfg.model, &t.params);
    let tok = Tokenizer::new(cfg.model.text.context_length).unwrap();
    let seqs: Vec<_> = samples.iter().map(|s| tok.tokenize(&s.caption.text)).collect();
    let ei = inf.image_embeddings(&samples.iter().map(|s| &s.image).collect::<Vec<_>>()).unwrap();
    let et = inf.text_embeddings(&seqs.iter().collect::<Vec<_>>()).unwrap();
    let r = retrieval_eval(&ei, &et).unwrap();
    let last = hist.last().unwrap();
    let clip = last.l_i + last.l_t;
    let bound = 0.2 * 2.0 * 32f64.ln();
    let dist: Vec<f64> = hist.iter().map(|m| m.l_dist.unwrap()).collect();
    let (at50, end) = (moving_average(&dist, 50, 50), moving_average(&dist, dist.len(), 50));
    let drop = 1.0 - end / at50;
    let ok = r.image_to_text.r1 == 1.0 && r.text_to_image.r1 == 1.0 && clip < bound && drop >= 0.5;
    hard(
        ok,
        format!(
            "{OVERFIT_STEPS} steps: R@1 i2t {:.3} t2i {:.3} (= 1), L_I+L_T {clip:.4} (< {bound:.4}), \
             L_Dist MA50 {at50:.4} -> {end:.4} (drop {:.0}%, >= 50%)",
            r.image_to_text.r1,
            r.text_to_image.r1,
            100.0 * drop
        ),
    )
}

fn c7_determinism() -> Outcome {
    let samples = generate_samples(64, 7, &SceneOptions::default()).unwrap();
    let cfg = TrainConfig { epochs: 3, ..TrainConfig::default() };
    let data = || Dataset::from_samples(&samples, &cfg.model).unwrap();
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    Trainer::new(cfg.clone(), data()).unwrap().run(Some(dirs[0].path()), None).unwrap();
    Trainer::new(cfg.clone(), data()).unwrap().run(Some(dirs[1].path()), None).unwrap();
    let read = |i: usize, f: &str| fs::read(dirs[i].path().join(f)).unwrap();
    let same_log = read(0, "metrics.jsonl") == read(1, "metrics.jsonl");

    let mut part = Trainer::new(cfg.clone(), data()).unwrap();
    part.run(Some(dirs[2].path()), Some(1)).unwrap();
    let ckpt = Checkpoint::load(&dirs[2].path().join("checkpoints/epoch_00001.mclp")).unwrap();
    Trainer::from_checkpoint(&ckpt, data()).unwrap().run(Some(dirs[2].path()), None).unwrap();
    let resume_log = read(0, "metrics.jsonl") == read(2, "metrics.jsonl");
    let resume_ckpt = read(0, "final.mclp") == read(2, "final.mclp");

    let bytes = read(0, "final.mclp");
    let round_trip = Checkpoint::from_bytes(&bytes).unwrap().to_bytes().unwrap() == bytes;
    hard(
        same_log && resume_log && resume_ckpt && round_trip,
        format!(
            "repeat-run log identical {same_log}, resumed log identical {resume_log}, \
             resumed final checkpoint identical {resume_ckpt}, round trip byte-identical {round_trip}"
        ),
    )
}

struct ArmResult {
    probe: f64,
    miou: f64,
    localization: f64,
}

fn eval_arm(cfg: &TrainConfig, params: &ParamStore, seed: u64, locate: bool) -> ArmResult {
    let inf = Inference::new(&cfg.model, params);
    let single = |n, s| generate_samples(n, s, &SceneOptions::single_object()).unwrap();
    let (train, test) = (single(EVAL_ITEMS, 50_000 + seed), single(EVAL_ITEMS, 60_000 + seed));
    let feats = |s: &[Sample]| rows_of(&inf.pooled_features(&s.iter().map(|x| &x.image).collect::<Vec<_>>()).unwrap());
    let probe = linear_probe(&feats(&train), &shape_labels(&train), &feats(&test), &shape_labels(&test), &ProbeConfig::default())
        .unwrap()
        .test_accuracy;
    let scenes = generate_samples(EVAL_ITEMS, 70_000 + seed, &SceneOptions::default()).unwrap();
    let bank = build_label_embeddings(&inf, &segmentation_classes(&PromptSet::default())).unwrap();
    let patches = inf.patch_embeddings(&scenes.iter().map(|x| &x.image).collect::<Vec<_>>()).unwrap();
    let miou = dense_zero_shot_segment(&patches, &bank, &patch_truth(&scenes)).unwrap().miou;
    let localization = if locate { localization_probe(&inf, &test).unwrap().fraction } else { f64::NAN };
    ArmResult { probe, miou, localization }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

fn c6_c8_ablation() -> (Outcome, Outcome) {
    let mut clip = Vec::new();
    let mut mc = Vec::new();
    for &seed in &SEEDS {
        let samples = generate_samples(ABLATION_PAIRS, 1000 + seed, &SceneOptions::default()).unwrap();
        for (objective, out) in [(Objective::Clip, &mut clip), (Objective::MaskClip, &mut mc)] {
            let cfg = TrainConfig { objective, seed, checkpoint_every: 0, ..TrainConfig::default() };
            let mut t = Trainer::new(cfg.clone(), Dataset::from_samples(&samples, &cfg.model).unwrap()).unwrap();
            t.run(None, None).unwrap();
            out.push(eval_arm(&cfg, &t.params, seed, objective == Objective::MaskClip));
        }
    }
    let col = |v: &[ArmResult], f: fn(&ArmResult) -> f64| v.iter().map(f).collect::<Vec<_>>();
    let (cp, mp) = (col(&clip, |r| r.probe), col(&mc, |r| r.probe));
    let (ci, mi) = (col(&clip, |r| r.miou), col(&mc, |r| r.miou));
    let wins = |a: &[f64], b: &[f64]| a.iter().zip(b).filter(|(x, y)| x >= y).count();
    let probe_ok = median(&mp) >= median(&cp);
    let miou_ok = median(&mi) >= median(&ci);
    let c6 = Outcome {
        passed: probe_ok && miou_ok,
        hard: false,
        detail: format!(
            "probe median maskclip {:.3} vs clip {:.3} (effect {:+.3}, maskclip >= clip on {}/5 seeds, maskclip {} clip {}); \
             mIoU median maskclip {:.4} vs clip {:.4} (effect {:+.4}, {}/5 seeds, maskclip {} clip {})",
            median(&mp),
            median(&cp),
            median(&mp) - median(&cp),
            wins(&mp, &cp),
            fmt(&mp),
            fmt(&cp),
            median(&mi),
            median(&ci),
            median(&mi) - median(&ci),
            wins(&mi, &ci),
            fmt(&mi),
            fmt(&ci)
        ),
    };
    let loc = col(&mc, |r| r.localization);
    let c8 = Outcome {
        passed: median(&loc) >= 0.8,
        hard: false,
        detail: format!(
            "maskclip arm, held-out single-object captions: in-object > out-of-object similarity for median {:.3} of images (>= 0.80), per seed {}",
            median(&loc),
            fmt(&loc)
        ),
    };
    (c6, c8)
}

fn main() {
    // `cargo test` passes harness flags such as --nocapture or a filter
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if let Some(filter) = args.first() {
        if !"acceptance".contains(filter.as_str()) {
            return;
        }
    }
    // e.g. MASKCLIP_ACCEPTANCE_ONLY=3,7 to rerun a subset
    let only: Option<Vec<usize>> = std::env::var("MASKCLIP_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let t0 = Instant::now();
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut run = |n: usize, title: &'static str, f: fn() -> Outcome| {
        if !wanted(n) {
            return;
        }
        let t = Instant::now();
        let o = f();
        results.push((n, title, o, t.elapsed().as_secs_f64()));
    };
    run(1, "gradient oracle", c1_gradients);
    run(2, "exact loss values", c2_exact_losses);
    run(3, "EMA contract", c3_ema);
    run(4, "masking accounting", c4_masking);
    run(5, "overfit harness", c5_overfit);
    run(7, "determinism and checkpoint integrity", c7_determinism);
    if wanted(6) || wanted(8) {
        let t = Instant::now();
        let (c6, c8) = c6_c8_ablation();
        let secs = t.elapsed().as_secs_f64();
        results.push((6, "directional ablation", c6, secs));
        results.push((8, "localization probe", c8, secs));
    }

    results.sort_by_key(|r| r.0);
    for (n, title, o, secs) in &results {
        report(*n, title, o, *secs);
    }
    println!("acceptance finished in {:.0}s", t0.elapsed().as_secs_f64());
    let hard_failures: Vec<usize> = results.iter().filter(|r| r.2.hard && !r.2.passed).map(|r| r.0).collect();
    if !hard_failures.is_empty() {
        eprintln!("hard criteria failed: {hard_failures:?}");
        std::process::exit(1);
    }
}
