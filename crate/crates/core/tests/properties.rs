use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use maskclip_core::distillation::{ema_update, EmaSchedule};
use maskclip_core::evaluation::{accuracy, argmax, mean_iou, rank_of, retrieval_eval};
use maskclip_core::masking::{mask_count, pack_visible, sample_mask, scatter_back, MaskSpec};
use maskclip_core::params::ParamStore;
use maskclip_core::tensor::{normalized, Graph, Tensor};
use maskclip_core::trainer::LrSchedule;

fn store(values: &[Vec<f64>]) -> ParamStore {
    let mut s = ParamStore::new();
    for (i, v) in values.iter().enumerate() {
        s.insert(format!("visual.p{i}"), Tensor::from_slice(v));
    }
    s
}

fn dist(a: &ParamStore, b: &ParamStore) -> f64 {
    a.iter()
        .map(|(n, t)| {
            let u = b.get(n).unwrap();
            t.data().iter().zip(u.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
        })
        .sum::<f64>()
        .sqrt()
}

fn tree() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    prop::collection::vec(1usize..6, 1..5).prop_flat_map(|sizes| {
        let leaves = |sizes: &[usize]| {
            sizes
                .iter()
                .map(|&n| prop::collection::vec(-10.0f64..10.0, n))
                .collect::<Vec<_>>()
        };
        (leaves(&sizes), leaves(&sizes))
    })
}

fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| normalized(&(0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()))
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mask_is_a_partition(n in 1usize..200, ratio in 0.0f64..1.0, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = sample_mask(n, ratio, &mut rng).unwrap();
        prop_assert_eq!(m.masked().len(), mask_count(n, ratio));
        let mut all: Vec<usize> = m.masked().iter().chain(m.visible()).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(m.masked().windows(2).all(|w| w[0] < w[1]));
        prop_assert!(m.visible().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn mask_count_rounds_half_up(n in 0usize..10_000, ratio in 0.0f64..=1.0) {
        let k = mask_count(n, ratio);
        prop_assert!(k <= n);
        prop_assert!(((k as f64) - ratio * n as f64).abs() <= 0.5 + 1e-9);
    }

    #[test]
    fn pack_then_scatter_restores_visible(n in 1usize..40, ratio in 0.0f64..1.0, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = sample_mask(n, ratio, &mut rng).unwrap();
        let items: Vec<i64> = (0..n as i64).collect();
        let (vis, pos) = pack_visible(&items, &m).unwrap();
        prop_assert_eq!(vis.len(), n - m.masked().len());
        let back = scatter_back(&vis, &pos, n, -1).unwrap();
        for i in 0..n {
            prop_assert_eq!(back[i], if m.is_masked(i) { -1 } else { i as i64 });
        }
    }

    #[test]
    fn mask_spec_rejects_out_of_range(n in 1usize..50, extra in 0usize..5) {
        prop_assert!(MaskSpec::new(n, [n + extra]).is_err());
    }

    #[test]
    fn ema_contracts_towards_student((t, s) in tree(), alpha in 0.0f64..=1.0) {
        let mut teacher = store(&t);
        let student = store(&s);
        let before = dist(&teacher, &student);
        ema_update(&mut teacher, &student, alpha).unwrap();
        let after = dist(&teacher, &student);
        prop_assert!(after <= alpha * before * (1.0 + 1e-12) + 1e-12);
    }

    #[test]
    fn ema_endpoints_are_exact((t, s) in tree()) {
        let student = store(&s);
        let mut copy = store(&t);
        ema_update(&mut copy, &student, 0.0).unwrap();
        prop_assert!(copy.bitwise_eq(&student));
        let mut frozen = store(&t);
        ema_update(&mut frozen, &student, 1.0).unwrap();
        prop_assert!(frozen.bitwise_eq(&store(&t)));
    }

    #[test]
    fn ema_ramp_stays_between_endpoints(start in 0.0f64..=1.0, end in 0.0f64..=1.0, total in 1u64..500, step in 0u64..600) {
        let a = EmaSchedule { start, end }.alpha_at(step, total);
        prop_assert!(a >= start.min(end) - 1e-15 && a <= start.max(end) + 1e-15);
    }

    #[test]
    fn recall_is_monotone_in_k(n in 2usize..24, d in 2usize..8, seed: u64) {
        let r = retrieval_eval(&unit_rows(n, d, seed), &unit_rows(n, d, seed ^ 1)).unwrap();
        for k in [r.image_to_text, r.text_to_image] {
            prop_assert!(0.0 <= k.r1 && k.r1 <= k.r5 && k.r5 <= k.r10 && k.r10 <= 1.0);
        }
    }

    #[test]
    fn identical_embeddings_retrieve_by_index(n in 1usize..30) {
        let e = Tensor::from_rows(&vec![vec![1.0, 0.0]; n]).unwrap();
        let r = retrieval_eval(&e, &e).unwrap();
        prop_assert!((r.image_to_text.r1 - 1.0f64.min(n as f64) / n as f64).abs() < 1e-15);
        prop_assert!((r.image_to_text.r5 - 5usize.min(n) as f64 / n as f64).abs() < 1e-15);
    }

    #[test]
    fn rank_counts_better_and_earlier_ties(scores in prop::collection::vec(-3i32..3, 1..20), t in 0usize..20) {
        let t = t % scores.len();
        let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        let oracle = s.iter().enumerate().filter(|&(j, &v)| v > s[t] || (v == s[t] && j < t)).count();
        prop_assert_eq!(rank_of(&s, t), oracle);
    }

    #[test]
    fn argmax_picks_first_maximum(scores in prop::collection::vec(-3i32..3, 1..20)) {
        let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        let i = argmax(&s);
        prop_assert!(s.iter().all(|&v| v <= s[i]));
        prop_assert!(s[..i].iter().all(|&v| v < s[i]));
    }

    #[test]
    fn miou_is_bounded(maps in prop::collection::vec(prop::collection::vec((0usize..5, 0usize..5), 16), 1..6)) {
        let pred: Vec<Vec<usize>> = maps.iter().map(|m| m.iter().map(|p| p.0).collect()).collect();
        let truth: Vec<Vec<usize>> = maps.iter().map(|m| m.iter().map(|p| p.1).collect()).collect();
        let (per, miou) = mean_iou(&pred, &truth, 5).unwrap();
        prop_assert!((0.0..=1.0).contains(&miou));
        for v in per.into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let (_, perfect) = mean_iou(&truth, &truth, 5).unwrap();
        prop_assert_eq!(perfect, 1.0);
    }

    #[test]
    fn accuracy_matches_count(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..50)) {
        let (p, y): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let hits = pairs.iter().filter(|(a, b)| a == b).count();
        prop_assert_eq!(accuracy(&p, &y), hits as f64 / pairs.len() as f64);
    }

    #[test]
    fn cosine_schedule_is_bounded(base in 1e-5f64..1e-1, warm in 0u64..50, total in 1u64..400, step in 0u64..500) {
        let s = LrSchedule { base, end: base * 0.01, warmup_steps: warm, total_steps: total };
        let lr = s.lr_at(step);
        prop_assert!(lr >= 0.0 && lr <= base * (1.0 + 1e-12));
    }

    #[test]
    fn smooth_l1_matches_piecewise_oracle(d in -10.0f64..10.0, beta in 0.1f64..5.0) {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_slice(&[d]));
        let b = g.constant(Tensor::from_slice(&[0.0]));
        let z = g.smooth_l1(a, b, beta).unwrap();
        let got = g.value(z).data()[0];
        let want = if d.abs() < beta { 0.5 * d * d / beta } else { d.abs() - 0.5 * beta };
        prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
    }

    #[test]
    fn softmax_rows_sum_to_one(v in prop::collection::vec(-30.0f64..30.0, 2..12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, v.len()], v.clone()).unwrap());
        let s = g.softmax(x, 1).unwrap();
        let total: f64 = g.value(s).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }
}
