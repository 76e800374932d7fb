//! Acceptance gate: each check prints one PASS/FAIL line; any failure exits non-zero.
//!
//! Set `ACCEPTANCE_ONLY=3,5` to run a subset.

#[path = "../../core/tests/support/oracle.rs"]
mod oracle;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mirnet_cli::pipeline::{stage_seed, MetricsFile};
use mirnet_cli::RunConfig;
use mirnet_core::dataset::{generate, Dataset, Split};
use mirnet_core::diffcore::{grad_check, ParamStore, Tape, Tensor, Var};
use mirnet_core::gat::{AttentionVariant, GatLayer, GraphContext};
use mirnet_core::label_graph::{cooccurrence, threshold_adjacency, LabelGraph};
use mirnet_core::losses::{total_loss, AslConfig, ConstraintRule, ObjectiveConfig};
use mirnet_core::mae::{pretrain, EncoderCheckpoint, PretrainConfig, PretrainEpoch};
use mirnet_core::metrics::{binarize, evaluate, f1_suite, macro_pr_auc, MetricReport};
use mirnet_core::model::Model;
use mirnet_core::train::{
    boost_finetune, finetune, merge_predictions, predict_split, select_boost_labels, LossKind, TrainConfig,
};

type Check = Result<String, String>;

const SEEDS: [u64; 3] = [1, 2, 3];

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

// ---------------------------------------------------------------- shared state

struct Desk {
    cfg: RunConfig,
    data: Dataset,
    encoder: EncoderCheckpoint,
    pretrain_log: Vec<PretrainEpoch>,
    pretrain_time: Duration,
    /// 200 training images and the pretrained models fine-tuned on them, by seed; the boosting bases.
    low_data: Option<(Dataset, Vec<Model>)>,
}

fn desk_config() -> RunConfig {
    RunConfig::bundled()
}

fn dataset(cfg: &RunConfig, n_labeled: usize, n_unlabeled: usize, stage: &str) -> Dataset {
    let mut g = cfg.data.generator.clone();
    g.seed = stage_seed(cfg.seed, stage);
    generate(&g, n_labeled, n_unlabeled).expect("generator config is feasible").into_dataset()
}

fn desk() -> Desk {
    let cfg = desk_config();
    let data = dataset(&cfg, cfg.data.n_labeled, cfg.data.n_unlabeled, "data");
    let t0 = Instant::now();
    let (images, _) = data.split(Split::PretrainUnlabeled);
    let seed = stage_seed(cfg.seed, "pretrain");
    let out = pretrain(&images, &cfg.pretrain, seed, |_| {}).expect("pretraining runs");
    let pretrain_time = t0.elapsed();
    Desk {
        encoder: out.checkpoint(seed),
        pretrain_log: out.log,
        pretrain_time,
        cfg,
        data,
        low_data: None,
    }
}

/// Keep the first `n` training samples and the full val and test splits; drop the unlabeled pool.
fn limit_train(data: &Dataset, n: usize) -> Dataset {
    let mut out = data.clone();
    let mut seen = 0;
    let keep: Vec<bool> = data
        .manifest
        .samples
        .iter()
        .map(|s| match s.split {
            Split::Train => {
                seen += 1;
                seen <= n
            }
            Split::PretrainUnlabeled => false,
            _ => true,
        })
        .collect();
    let mut flags = keep.iter();
    out.manifest.samples.retain(|_| *flags.next().unwrap());
    let mut flags = keep.iter();
    out.images.retain(|_| *flags.next().unwrap());
    out.manifest.prevalence = out.manifest.compute_prevalence(Split::Train).expect("non-empty train split");
    out
}

/// Fine-tuning schedule used by the comparisons: shorter than the bundled run.
fn comparison_config(cfg: &RunConfig, epochs: usize) -> TrainConfig {
    let mut t = cfg.train.clone();
    t.encoder = cfg.pretrain.encoder.clone();
    t.epochs = epochs;
    t
}

fn test_report(model: &Model, data: &Dataset) -> MetricReport {
    let (probs, truth) = predict_split(model, data, Split::Test).expect("prediction");
    let m = &data.manifest;
    evaluate(&truth, &probs, 0.5, &m.label_names, &m.groups, &m.rules).expect("evaluation")
}

fn rarest(data: &Dataset) -> usize {
    let p = &data.manifest.prevalence;
    (0..p.len()).min_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap()
}

// ---------------------------------------------------------------- 1

fn weighted_sum<'t>(x: Var<'t>, seed: u64) -> mirnet_core::Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, &x.shape(), -1.0, 1.0);
    x.mul(x.tape().constant(w)).map(|v| v.sum())
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn gradient_integrity() -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&mut rng, &[3, 4], -1.5, 1.5);
    let b = random(&mut rng, &[3, 4], -1.5, 1.5);
    let row = random(&mut rng, &[4], -1.5, 1.5);
    let w = random(&mut rng, &[4, 5], -1.5, 1.5);
    let pos = random(&mut rng, &[3, 4], 0.2, 2.0);
    let x3 = random(&mut rng, &[2, 3, 4], -1.5, 1.5);
    let y3 = random(&mut rng, &[2, 4, 5], -1.5, 1.5);
    let z3 = random(&mut rng, &[2, 5, 4], -1.5, 1.5);
    let x4 = random(&mut rng, &[2, 3, 4, 2], -1.5, 1.5);
    let mask = [true, false, true, true];
    let idx = std::rc::Rc::new(vec![2, 0, 2, 1]);

    type OpFn = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> mirnet_core::Result<Var<'t>>>;
    let ops: Vec<(&str, Vec<Tensor>, OpFn)> = vec![
        ("add", vec![a.clone(), b.clone()], Box::new(|_, p| weighted_sum(p[0].add(p[1])?, 1))),
        ("sub", vec![a.clone(), b.clone()], Box::new(|_, p| weighted_sum(p[0].sub(p[1])?, 2))),
        ("mul", vec![a.clone(), b.clone()], Box::new(|_, p| weighted_sum(p[0].mul(p[1])?, 3))),
        ("add_bcast", vec![a.clone(), row.clone()], Box::new(|_, p| weighted_sum(p[0].add_bcast(p[1])?, 4))),
        ("mul_bcast", vec![a.clone(), row.clone()], Box::new(|_, p| weighted_sum(p[0].mul_bcast(p[1])?, 5))),
        ("scale", vec![a.clone()], Box::new(|_, p| weighted_sum(p[0].scale(-1.7).add_scalar(0.3), 6))),
        ("matmul", vec![a.clone(), w.clone()], Box::new(|_, p| weighted_sum(p[0].matmul(p[1])?, 7))),
        ("bmm", vec![x3.clone(), y3], Box::new(|_, p| weighted_sum(p[0].bmm(p[1], false)?, 8))),
        ("bmm_t", vec![x3, z3], Box::new(|_, p| weighted_sum(p[0].bmm(p[1], true)?, 9))),
        ("sigmoid", vec![a.clone()], Box::new(|_, p| weighted_sum(p[0].sigmoid(), 10))),
        ("relu", vec![a.clone()], Box::new(|_, p| weighted_sum(p[0].relu(), 11))),
        ("leaky_relu", vec![a.clone()], Box::new(|_, p| weighted_sum(p[0].leaky_relu(0.2), 12))),
        ("log", vec![pos.clone()], Box::new(|_, p| weighted_sum(p[0].log(), 13))),
        ("exp", vec![a.clone()], Box::new(|_, p| weighted_sum(p[0].exp(), 14))),
        ("powf", vec![pos], Box::new(|_, p| weighted_sum(p[0].powf(2.5), 15))),
        ("square", vec![a.clone()], Box::new(|_, p| weighted_sum(p[0].square(), 16))),
        ("abs", vec![a.clone()], Box::new(|_, p| weighted_sum(p[0].abs(), 17))),
        ("clamp", vec![a.clone()], Box::new(|_, p| weighted_sum(p[0].clamp(-0.9, 0.8), 18))),
        ("softmax", vec![a.clone()], Box::new(|_, p| weighted_sum(p[0].softmax()?, 19))),
        ("masked_softmax", vec![a.clone()], Box::new(move |_, p| weighted_sum(p[0].masked_softmax(Some(&mask))?, 20))),
        ("layer_norm", vec![a.clone()], Box::new(|_, p| weighted_sum(p[0].layer_norm(1e-6), 21))),
        ("sum", vec![a.clone()], Box::new(|_, p| Ok(p[0].square().sum()))),
        ("mean", vec![a.clone()], Box::new(|_, p| Ok(p[0].square().mean()))),
        ("sum_last", vec![a.clone()], Box::new(|_, p| weighted_sum(p[0].square().sum_last(), 22))),
        ("mean_last", vec![a.clone()], Box::new(|_, p| weighted_sum(p[0].square().mean_last(), 23))),
        ("transpose", vec![a.clone()], Box::new(|_, p| weighted_sum(p[0].transpose()?, 24))),
        ("reshape", vec![a.clone()], Box::new(|_, p| weighted_sum(p[0].reshape(&[2, 6])?, 25))),
        ("permute", vec![x4], Box::new(|_, p| weighted_sum(p[0].permute(&[2, 0, 3, 1])?, 26))),
        ("concat_last", vec![a.clone(), b.clone()], Box::new(|_, p| weighted_sum(Var::concat_last(&[p[0], p[1]])?, 27))),
        ("concat_rows", vec![a.clone(), b], Box::new(|_, p| weighted_sum(Var::concat_rows(&[p[0], p[1]])?, 28))),
        ("gather_rows", vec![a], Box::new(move |_, p| weighted_sum(p[0].gather_rows(idx.clone())?, 29))),
    ];

    let mut worst = (0.0f64, "none".to_string());
    let mut note = |name: String, err: f64| {
        if err > worst.0 {
            worst = (err, name);
        }
    };
    for (name, params, f) in &ops {
        let r = grad_check(|t, p| f(t, p), params, 1e-5).map_err(|e| format!("{name}: {e}"))?;
        note(name.to_string(), r.max_rel_error);
    }

    // one attention layer with rare-label boosting and confidence weighting
    let labels: Vec<Vec<u8>> = vec![vec![1, 1, 0, 0, 1], vec![1, 1, 1, 0, 0], vec![0, 1, 1, 0, 1], vec![1, 0, 0, 1, 1]];
    let graph = LabelGraph::build(&labels, 5, 25.0, &[]).map_err(|e| e.to_string())?;
    let ctx = GraphContext::new(&graph, &[0.6, 0.8, 0.4, 0.02, 0.5], true, true).map_err(|e| e.to_string())?;
    for variant in [AttentionVariant::Concat, AttentionVariant::Dynamic] {
        let mut store = ParamStore::new();
        let layer = GatLayer::register(&mut store, "g", 0, 3, 2, 2, true, 0.2, variant, &mut rng);
        let mut params: Vec<Tensor> = store.entries().iter().map(|e| e.tensor.clone()).collect();
        params.push(random(&mut rng, &[2, 5, 3], -1.0, 1.0));
        let xi = params.len() - 1;
        let r = grad_check(|_, p| weighted_sum(layer.forward(p, p[xi], &ctx)?, 30), &params, 1e-5)
            .map_err(|e| format!("gat {variant:?}: {e}"))?;
        note(format!("gat {variant:?}"), r.max_rel_error);
    }

    // full objective on a 6-label toy batch
    let logits = random(&mut rng, &[7, 6], -2.0, 2.0);
    let y = Tensor::new(vec![7, 6], (0..42).map(|_| rng.gen_bool(0.4) as u8 as f64).collect()).unwrap();
    let prior = vec![0.3, 0.1, 0.5, 0.05, 0.2, 0.03];
    let rules = vec![
        ConstraintRule::mutual_exclusion(0, 1),
        ConstraintRule::co_appearance(2, 3),
        ConstraintRule::implication(4, 5),
    ];
    let asl = AslConfig::from_prevalence(&prior, 0.0, 4.0, None).map_err(|e| e.to_string())?;
    let objective = ObjectiveConfig::new(prior, rules, asl);
    let r = grad_check(|_, v| Ok(total_loss(v[0].sigmoid(), &y, &objective)?.0), &[logits], 1e-5)
        .map_err(|e| e.to_string())?;
    note("objective".into(), r.max_rel_error);

    let elapsed = t0.elapsed();
    let detail = format!(
        "{} ops + 2 attention layers + objective, max rel error {:.2e} ({}), {}",
        ops.len(),
        worst.0,
        worst.1,
        secs(elapsed)
    );
    if worst.0 < 1e-4 && elapsed < Duration::from_secs(30) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 2

fn oracle_equivalence() -> Check {
    const INSTANCES: usize = 150;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut mismatches: Vec<String> = Vec::new();
    for case in 0..INSTANCES {
        let n = rng.gen_range(1..=200);
        let k = rng.gen_range(1..=22);
        let density = rng.gen_range(0.0..=1.0);
        let truth: Vec<Vec<bool>> = (0..n).map(|_| (0..k).map(|_| rng.gen_bool(density)).collect()).collect();
        let bits: Vec<Vec<u8>> = truth.iter().map(|r| r.iter().map(|&b| b as u8).collect()).collect();
        let levels = rng.gen_range(1..=40);
        let probs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k).map(|_| rng.gen_range(0..=levels) as f64 / levels as f64).collect())
            .collect();
        let second: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let pred = binarize(&Tensor::from_rows(&probs).unwrap(), 0.5);
        let alpha = rng.gen_range(0..=100u32);

        let m = cooccurrence(&bits, k).unwrap();
        let want = oracle::cooccurrence(&bits, k);
        if (0..k * k).any(|i| m.get(i / k, i % k) != want[i]) {
            mismatches.push(format!("cooccurrence #{case}"));
        }
        let a = threshold_adjacency(&m, alpha as f64).unwrap();
        let want = oracle::adjacency(&want, k, alpha);
        if (0..k * k).any(|i| a.has_edge(i / k, i % k) != want[i]) {
            mismatches.push(format!("threshold_adjacency #{case}"));
        }
        let got = f1_suite(&truth, &pred).unwrap();
        let want = oracle::f1(&truth, &pred);
        let counts_ok = got.per_label.iter().zip(&want.confusion).all(|(g, c)| g.support == c.tp + c.fneg);
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-12;
        let values_ok = got.per_label.iter().zip(&want.per_label).all(|(g, w)| {
            g.precision == w.0 && g.recall == w.1 && g.f1 == w.2
        }) && close(got.example_f1, want.example_f1)
            && close(got.micro_f1, want.micro_f1)
            && close(got.macro_f1, want.macro_f1)
            && close(got.macro_precision, want.macro_precision)
            && close(got.macro_recall, want.macro_recall);
        if !(counts_ok && values_ok) {
            mismatches.push(format!("f1_suite #{case}"));
        }
        match (macro_pr_auc(&truth, &probs), oracle::macro_pr_auc(&truth, &probs)) {
            (Ok(g), Some(w)) if (g.macro_pr_auc - w).abs() <= 1e-9 => {}
            (Err(_), None) => {}
            _ => mismatches.push(format!("macro_pr_auc #{case}")),
        }
        let replace: Vec<usize> = (0..k).filter(|_| rng.gen_bool(0.5)).collect();
        let merged = merge_predictions(&Tensor::from_rows(&probs).unwrap(), &Tensor::from_rows(&second).unwrap(), &replace)
            .unwrap();
        let want: Vec<f64> = oracle::merge(&probs, &second, &replace).into_iter().flatten().collect();
        if merged.data() != &want[..] {
            mismatches.push(format!("merge_predictions #{case}"));
        }
    }
    let detail = format!("5 kernels x {INSTANCES} random instances (N <= 200, K <= 22)");
    if mismatches.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}: {} mismatches, first {}", mismatches.len(), mismatches[0]))
    }
}

// ---------------------------------------------------------------- 3

fn constraint_efficacy(desk: &Desk) -> Check {
    let t0 = Instant::now();
    let (mut with, mut without) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        let t = comparison_config(&desk.cfg, 30);
        let on = finetune(&desk.data, Some(&desk.encoder), &t, seed, |_| {}).map_err(|e| e.to_string())?;
        let mut t0cfg = t.clone();
        t0cfg.objective.lambda_constraint = 0.0;
        let off = finetune(&desk.data, Some(&desk.encoder), &t0cfg, seed, |_| {}).map_err(|e| e.to_string())?;
        with.push(test_report(&on.model, &desk.data).rule_violation_rate);
        without.push(test_report(&off.model, &desk.data).rule_violation_rate);
    }
    let elapsed = t0.elapsed() + desk.pretrain_time;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&with), mean(&without));
    let detail = format!(
        "violation rate lambda=0.1 {with:.3?} (mean {a:.4}) vs lambda=0 {without:.3?} (mean {b:.4}), {} incl. pretraining",
        secs(elapsed)
    );
    let ok = if b == 0.0 { a == 0.0 } else { a <= 0.5 * b };
    if ok && elapsed < Duration::from_secs(300) {
        Ok(format!("ratio {:.3}; {detail}", if b == 0.0 { 0.0 } else { a / b }))
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 4

fn imbalance_handling(desk: &Desk) -> Check {
    let rare = rarest(&desk.data);
    let (mut asl, mut bce) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        let mut t = comparison_config(&desk.cfg, 30);
        let a = finetune(&desk.data, Some(&desk.encoder), &t, seed, |_| {}).map_err(|e| e.to_string())?;
        t.objective.loss = LossKind::Bce;
        let b = finetune(&desk.data, Some(&desk.encoder), &t, seed, |_| {}).map_err(|e| e.to_string())?;
        asl.push(test_report(&a.model, &desk.data).per_label[rare].recall);
        bce.push(test_report(&b.model, &desk.data).per_label[rare].recall);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let detail = format!(
        "recall on `{}` (prevalence {:.3}): ASL {asl:.3?} (mean {:.3}) vs BCE {bce:.3?} (mean {:.3})",
        desk.data.manifest.label_names[rare],
        desk.data.manifest.prevalence[rare],
        mean(&asl),
        mean(&bce)
    );
    let never_worse = asl.iter().zip(&bce).all(|(a, b)| a >= b);
    if never_worse && mean(&asl) > mean(&bce) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 5

fn pretraining_benefit(desk: &mut Desk) -> Check {
    let small = limit_train(&desk.data, 200);
    let (mut pre, mut scratch, mut bases) = (Vec::new(), Vec::new(), Vec::new());
    for seed in SEEDS {
        let mut t = comparison_config(&desk.cfg, desk.cfg.train.epochs);
        let a = finetune(&small, Some(&desk.encoder), &t, seed, |_| {}).map_err(|e| e.to_string())?;
        t.ablation.no_pretrain = true;
        let b = finetune(&small, None, &t, seed, |_| {}).map_err(|e| e.to_string())?;
        pre.push(test_report(&a.model, &small).macro_f1);
        scratch.push(test_report(&b.model, &small).macro_f1);
        bases.push(a.model);
    }
    desk.low_data = Some((small, bases));
    let gaps: Vec<f64> = pre.iter().zip(&scratch).map(|(a, b)| a - b).collect();
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let detail = format!("200 labeled training images: test macro-F1 pretrained {pre:.4?} vs -P {scratch:.4?}, mean gap {mean_gap:+.4}");
    if gaps.iter().all(|&g| g >= 0.0) && mean_gap > 0.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 6

fn mae_learning(desk: &Desk) -> Check {
    let log = &desk.pretrain_log;
    let initial = log[0].masked_mse;
    let best = log.iter().skip(1).take(40).map(|e| e.masked_mse).fold(f64::INFINITY, f64::min);
    let ratio = best / initial;

    let (pool, _) = desk.data.split(Split::PretrainUnlabeled);
    let img = vec![pool[0]];
    let cfg = PretrainConfig {
        epochs: 500,
        batch_size: 1,
        ..desk.cfg.pretrain.clone()
    };
    let out = pretrain(&img, &cfg, 3, |_| {}).map_err(|e| e.to_string())?;
    let start = out.log[0].masked_mse;
    let tail: Vec<f64> = out.log.iter().rev().take(10).map(|e| e.masked_mse).collect();
    let single = tail.iter().sum::<f64>() / tail.len() as f64 / start;
    let detail = format!(
        "{} unlabeled images: masked MSE {initial:.2} -> {best:.3} ({:.1}% within 40 epochs); single image {:.2}% of initial",
        desk.data.split(Split::PretrainUnlabeled).0.len(),
        100.0 * ratio,
        100.0 * single
    );
    if log.len() > 1 && ratio < 0.2 && single < 0.1 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 7

fn boosting_semantics(desk: &Desk) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..200 {
        let (n, k) = (rng.gen_range(1..=50), rng.gen_range(1..=22));
        let base: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let second: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let replace: Vec<usize> = (0..k).filter(|_| rng.gen_bool(0.3)).collect();
        let got = merge_predictions(&Tensor::from_rows(&base).unwrap(), &Tensor::from_rows(&second).unwrap(), &replace)
            .map_err(|e| e.to_string())?;
        let want: Vec<f64> = oracle::merge(&base, &second, &replace).into_iter().flatten().collect();
        if got.data() != &want[..] {
            return Err(format!("merge contract broken on instance {case}"));
        }
    }

    let (data, bases) = desk.low_data.as_ref().ok_or("no base models (pretraining check did not run)")?;
    let cfg = &desk.cfg;
    let t = comparison_config(cfg, cfg.train.epochs);
    let objective = t
        .objective
        .build(&data.manifest.prevalence, &data.manifest.rules, &t.ablation)
        .map_err(|e| e.to_string())?;
    let m = &data.manifest;
    let (mut before, mut after, mut plans) = (Vec::new(), Vec::new(), Vec::new());
    for (base, seed) in bases.iter().zip(SEEDS) {
        let (val_probs, val_truth) = predict_split(base, data, Split::Val).map_err(|e| e.to_string())?;
        let f1: Vec<f64> = f1_suite(&val_truth, &binarize(&val_probs, cfg.boost.threshold))
            .map_err(|e| e.to_string())?
            .per_label
            .iter()
            .map(|s| s.f1)
            .collect();
        let plan = select_boost_labels(&f1, cfg.boost.f1_threshold, cfg.boost.replace_count, cfg.boost.augment.clone());
        if plan.is_noop() {
            return Err(format!(
                "seed {seed}: no label below validation F1 {}; boosting has nothing to do",
                cfg.boost.f1_threshold
            ));
        }
        let second = boost_finetune(base, &plan, data, &objective, &cfg.boost, stage_seed(seed, "boost"), |_| {})
            .map_err(|e| e.to_string())?;
        let (p_base, truth) = predict_split(base, data, Split::Test).map_err(|e| e.to_string())?;
        let (p_second, _) = predict_split(&second.model, data, Split::Test).map_err(|e| e.to_string())?;
        let merged = merge_predictions(&p_base, &p_second, &plan.replace_set).map_err(|e| e.to_string())?;
        let report = |p: &Tensor| evaluate(&truth, p, 0.5, &m.label_names, &m.groups, &m.rules).map_err(|e| e.to_string());
        before.push(report(&p_base)?.recall_over(&plan.replace_set));
        after.push(report(&merged)?.recall_over(&plan.replace_set));
        plans.push(format!("{:?}/{:?}", plan.finetune_set, plan.replace_set));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let detail = format!(
        "merge contract on 200 instances; fine-tune/replace {}: replace-set macro-recall {before:.4?} -> {after:.4?} (mean {:.4} -> {:.4})",
        plans.join(" "),
        mean(&before),
        mean(&after)
    );
    if mean(&after) >= mean(&before) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 8, 9

fn mirnet(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mirnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| format!("cannot run mirnet: {e}"))?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("mirnet {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn pipeline(config: Option<&Path>, out: &Path) -> Result<(), String> {
    let out = out.to_str().ok_or("non-UTF-8 temp path")?;
    for verb in ["gen-data", "pretrain", "train", "boost", "eval", "report"] {
        let mut args = vec![verb, "--out", out];
        if let Some(c) = config {
            args.extend(["--config", c.to_str().ok_or("non-UTF-8 config path")?]);
        }
        mirnet(&args)?;
    }
    Ok(())
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut v: serde_json::Value = serde_json::from_str(mirnet_cli::config::BUNDLED_DESK).unwrap();
    v["data"]["n_labeled"] = 300.into();
    v["data"]["n_unlabeled"] = 300.into();
    v["pretrain"]["epochs"] = 3.into();
    v["train"]["epochs"] = 4.into();
    v["boost"]["epochs"] = 2.into();
    v["boost"]["f1_threshold"] = 0.9.into();
    let config = tmp.path().join("small.json");
    std::fs::write(&config, v.to_string()).map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pipeline(Some(&config), &a)?;
    pipeline(Some(&config), &b)?;
    let (fa, fb) = (files_under(&a), files_under(&b));
    if fa != fb {
        return Err("runs produced different file sets".into());
    }
    let differing: Vec<String> = fa
        .iter()
        .filter(|f| std::fs::read(a.join(f)).ok() != std::fs::read(b.join(f)).ok())
        .map(|f| f.display().to_string())
        .collect();
    let reports = fa.iter().filter(|f| f.starts_with("report") || f.starts_with("eval")).count();
    if differing.is_empty() && reports > 0 {
        Ok(format!("two runs, {} files byte-identical ({reports} metric/report files)", fa.len()))
    } else {
        Err(format!("differing files: {differing:?}"))
    }
}

fn end_to_end() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    pipeline(None, tmp.path())?;
    let elapsed = t0.elapsed();
    let metrics: MetricsFile = mirnet_core::io::read_json(&tmp.path().join("eval").join("metrics.json")).map_err(|e| e.to_string())?;
    let data = Dataset::load(&tmp.path().join("data").join("manifest.json")).map_err(|e| e.to_string())?;
    let (_, truth) = data.split(Split::Test);
    let all_positive = vec![vec![true; data.num_labels()]; truth.len()];
    let baseline = f1_suite(&truth, &all_positive).map_err(|e| e.to_string())?.macro_f1;
    let got = metrics.metrics.macro_f1;
    let detail = format!(
        "bundled config, {} labels, {} samples: test macro-F1 {got:.4} vs all-positive {baseline:.4}, {}",
        data.num_labels(),
        data.manifest.samples.len(),
        secs(elapsed)
    );
    if got > baseline && elapsed < Duration::from_secs(600) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- driver

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |i: usize| only.as_ref().map_or(true, |o| o.contains(&i));
    let start = Instant::now();
    let mut failures = 0;
    let mut record = |i: usize, name: &str, r: Check| {
        let (tag, detail) = match r {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} [{i}/9] {name}: {detail}");
    };

    if wanted(1) {
        record(1, "gradient integrity", gradient_integrity());
    }
    if wanted(2) {
        record(2, "oracle equivalence", oracle_equivalence());
    }
    let needs_desk = [3, 4, 5, 6, 7].iter().any(|&i| wanted(i));
    let mut desk = needs_desk.then(desk);
    if let Some(d) = desk.as_mut() {
        if wanted(3) {
            record(3, "constraint efficacy", constraint_efficacy(d));
        }
        if wanted(4) {
            record(4, "imbalance handling", imbalance_handling(d));
        }
        if wanted(5) || wanted(7) {
            record(5, "pretraining benefit", pretraining_benefit(d));
        }
        if wanted(6) {
            record(6, "masked autoencoder learning", mae_learning(d));
        }
        if wanted(7) {
            record(7, "boosting semantics", boosting_semantics(d));
        }
    }
    if wanted(8) {
        record(8, "determinism", determinism());
    }
    if wanted(9) {
        record(9, "end-to-end desk run", end_to_end());
    }
    println!("acceptance finished in {} with {failures} failure(s)", secs(start.elapsed()));
    if failures > 0 {
        std::process::exit(1);
    }
}
