//! Structural properties that must hold for any valid input.

#[path = "support/oracle.rs"]
mod oracle;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mirnet_core::dataset::Image;
use mirnet_core::diffcore::{Tape, Tensor};
use mirnet_core::label_graph::{cooccurrence, threshold_adjacency, GraphAdjustment, LabelGraph};
use mirnet_core::losses::{constraint_penalty, ConstraintRule, RuleKind};
use mirnet_core::mae::{patchify, sample_mask, unpatchify};
use mirnet_core::metrics::{f1_suite, pr_auc};

fn bools(n: usize, k: usize, density: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<bool>> {
    (0..n).map(|_| (0..k).map(|_| rng.gen_bool(density)).collect()).collect()
}

fn bits(rows: &[Vec<bool>]) -> Vec<Vec<u8>> {
    rows.iter().map(|r| r.iter().map(|&b| b as u8).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn raising_alpha_never_adds_edges(n in 1usize..120, k in 2usize..16, d in 0.05f64..0.9, seed: u64, a in 0.0f64..100.0, b in 0.0f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = cooccurrence(&bits(&bools(n, k, d, &mut rng)), k).unwrap();
        let (lo, hi) = (a.min(b), a.max(b));
        let low = threshold_adjacency(&m, lo).unwrap();
        let high = threshold_adjacency(&m, hi).unwrap();
        high.check_invariants().unwrap();
        for i in 0..k {
            for j in 0..k {
                prop_assert!(!high.has_edge(i, j) || low.has_edge(i, j));
            }
        }
    }

    #[test]
    fn graph_is_a_pure_function(n in 1usize..80, k in 3usize..10, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = bits(&bools(n, k, 0.4, &mut rng));
        let adj = [GraphAdjustment::suppress(0, 1), GraphAdjustment::enhance(k - 1, 0)];
        let g1 = LabelGraph::build(&y, k, 25.0, &adj).unwrap();
        let g2 = LabelGraph::build(&y, k, 25.0, &adj).unwrap();
        prop_assert_eq!(&g1, &g2);
        g1.adjacency.check_invariants().unwrap();
        prop_assert!(!g1.adjacency.has_edge(0, 1));
        prop_assert!(g1.adjacency.has_edge(0, k - 1));
    }

    #[test]
    fn micro_f1_pools_flattened_vector(n in 1usize..100, k in 1usize..12, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = bools(n, k, 0.3, &mut rng);
        let p = bools(n, k, 0.3, &mut rng);
        let s = f1_suite(&t, &p).unwrap();
        let pairs: Vec<(bool, bool)> = t.iter().flatten().copied().zip(p.iter().flatten().copied()).collect();
        let tp = pairs.iter().filter(|&&(a, b)| a && b).count() as f64;
        let errors = pairs.iter().filter(|&&(a, b)| a != b).count() as f64;
        let pooled = if tp + errors == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + errors) };
        prop_assert!((s.micro_f1 - pooled).abs() < 1e-12);
        let lo = s.per_label.iter().map(|l| l.f1).fold(f64::INFINITY, f64::min);
        let hi = s.per_label.iter().map(|l| l.f1).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo - 1e-12 <= s.macro_f1 && s.macro_f1 <= hi + 1e-12);
        for v in [s.example_f1, s.micro_f1, s.macro_f1, s.macro_precision, s.macro_recall] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn metrics_ignore_row_order(n in 2usize..100, k in 1usize..12, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = bools(n, k, 0.3, &mut rng);
        let p = bools(n, k, 0.4, &mut rng);
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let tp: Vec<Vec<bool>> = order.iter().map(|&i| t[i].clone()).collect();
        let pp: Vec<Vec<bool>> = order.iter().map(|&i| p[i].clone()).collect();
        let a = f1_suite(&t, &p).unwrap();
        let b = f1_suite(&tp, &pp).unwrap();
        prop_assert_eq!(&a.per_label, &b.per_label);
        prop_assert_eq!(a.micro_f1, b.micro_f1);
        prop_assert!((a.example_f1 - b.example_f1).abs() < 1e-12);
    }

    #[test]
    fn top_ranked_positive_never_lowers_auc(n in 1usize..150, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut truth: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        truth[0] = true;
        let mut scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..20) as f64 / 20.0).collect();
        let before = pr_auc(&truth, &scores).unwrap();
        prop_assert!((before - oracle::pr_auc(&truth, &scores).unwrap()).abs() < 1e-9);
        truth.push(true);
        scores.push(1.5);
        let after = pr_auc(&truth, &scores).unwrap();
        prop_assert!(after >= before - 1e-12, "{} -> {}", before, after);
    }

    #[test]
    fn patch_round_trip(side in 1usize..5, p in 1usize..6, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (side * p, (side + 1) * p);
        let img = Image::new(h, w, (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let seq = patchify(&img, p).unwrap();
        prop_assert_eq!(seq.patches.len(), side * (side + 1));
        prop_assert_eq!(unpatchify(&seq).unwrap(), img);
    }

    #[test]
    fn mask_partitions_patches(n in 2usize..200, rho in 0.05f64..0.95, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nv = ((1.0 - rho) * n as f64).round() as usize;
        prop_assume!(nv >= 1 && nv < n);
        let plan = sample_mask(n, rho, &mut rng).unwrap();
        prop_assert_eq!(plan.visible.len(), nv);
        let mut all: Vec<usize> = plan.visible.iter().chain(&plan.masked).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..40.0, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap();
        let tape = Tape::new();
        let s = tape.constant(x).softmax().unwrap().value();
        for r in s.data().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn constraint_terms_are_bounded(n in 1usize..20, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kinds = [RuleKind::MutualExclusion, RuleKind::CoAppearance, RuleKind::Implication];
        let rules: Vec<ConstraintRule> = (0..rng.gen_range(1..6))
            .map(|_| {
                let a = rng.gen_range(0..5);
                let b = (a + rng.gen_range(1..5)) % 5;
                ConstraintRule::new(kinds[rng.gen_range(0..3)], a, b)
            })
            .collect();
        let probs = Tensor::new(vec![n, 5], (0..n * 5).map(|_| rng.gen_range(0.0..=1.0)).collect()).unwrap();
        for r in &rules {
            for row in probs.data().chunks(5) {
                let phi = r.phi(row[r.a], row[r.b]);
                prop_assert!((0.0..=1.0).contains(&phi));
            }
        }
        let tape = Tape::new();
        let pen = constraint_penalty(tape.constant(probs), &rules).unwrap().item();
        prop_assert!(pen >= 0.0 && pen <= rules.len() as f64 + 1e-12);
    }
}
