use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::{grad_check, Tape};

fn one_layer(variant: AttentionVariant, d: usize, heads: usize, dh: usize, concat: bool, seed: u64) -> (ParamStore, GatLayer) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layer = GatLayer::register(&mut store, "g", 0, d, heads, dh, concat, 0.2, variant, &mut rng);
    (store, layer)
}

fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, 1.0)
}

fn full_mask(k: usize) -> Vec<bool> {
    vec![true; k * k]
}

#[test]
fn attention_rows_are_distributions_on_support() {
    for variant in [AttentionVariant::Concat, AttentionVariant::Dynamic] {
        let (store, layer) = one_layer(variant, 4, 2, 3, true, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = 4;
        let mut mask = vec![false; k * k];
        for (i, j) in [(0, 0), (0, 2), (1, 1), (2, 2), (2, 0), (2, 3), (3, 3), (3, 2)] {
            mask[i * k + j] = true;
        }
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let v = tape.constant(random(&mut rng, &[3, k, 4]));
        let alpha = layer.attention(&p, v, &mask).unwrap().value();
        for (r, row) in alpha.data().chunks(k).enumerate() {
            let i = r % k;
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for j in 0..k {
                assert_eq!(row[j] > 0.0, mask[i * k + j]);
            }
        }
        // node 1 only has its self-loop
        assert_eq!(alpha.data()[k + 1], 1.0);
    }
}

#[test]
fn isolated_node_without_self_loop_is_an_error() {
    let (store, layer) = one_layer(AttentionVariant::Concat, 2, 1, 2, true, 3);
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let v = tape.constant(Tensor::full(&[1, 2, 2], 0.5));
    assert!(layer.attention(&p, v, &[true, false, false, false]).is_err());
}

#[test]
fn two_neighbour_softmax_values() {
    // scores e = (1, 0) for node 0: a_src = 0, a_dst picks feature 0, W = I
    let mut store = ParamStore::new();
    let w = store.add("w", 0, Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let s = store.add("s", 0, Tensor::zeros(&[1, 2]));
    let t = store.add("t", 0, Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
    let layer = GatLayer {
        heads: 1,
        head_dim: 2,
        concat: true,
        slope: 0.2,
        variant: AttentionVariant::Concat,
        w,
        w_dst: None,
        attn_src: s,
        attn_dst: Some(t),
    };
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let v = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
    let a = layer.attention(&p, v, &full_mask(2)).unwrap().value();
    assert!((a.data()[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
    assert!((a.data()[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
    // node 1 sees equal scores from the same neighbours
    assert!((a.data()[2] - a.data()[0]).abs() < 1e-15);

    // all scores equal -> uniform
    let v = tape.constant(Tensor::zeros(&[1, 2, 2]));
    let a = layer.attention(&p, v, &full_mask(2)).unwrap().value();
    assert!(a.data().iter().all(|&x| (x - 0.5).abs() < 1e-15));
}

#[test]
fn boost_factor_values() {
    let f = boost_factors(&[1.0, (-1.0f64).exp(), 0.01, 0.0]);
    assert_eq!(f[0], 1.0);
    assert!((f[1] - 2.0).abs() < 1e-15);
    assert!((f[2] - 5.605_170_185_988_091).abs() < 1e-12);
    assert!((f[3] - (1.0 + (1e4f64).ln())).abs() < 1e-12);
}

#[test]
fn enhancements_scale_rows_and_edges() {
    let tape = Tape::new();
    let alpha = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![0.25, 0.75, 0.5, 0.5]).unwrap());
    let boosted = rare_label_boost(alpha, &[0.01, 1.0]).unwrap().value();
    let f = boost_factors(&[0.01])[0];
    assert_eq!(boosted.data(), &[0.25 * f, 0.75 * f, 0.5, 0.5]);
    let ones = confidence_weight(alpha, &[1.0; 4]).unwrap().value();
    assert_eq!(ones, alpha.value());
    let half = confidence_weight(alpha, &[1.0, 2.0 / 4.0, 1.0, 1.0]).unwrap().value();
    assert_eq!(half.data()[1], 0.375);
    let both = confidence_weight(rare_label_boost(alpha, &[0.01, 1.0]).unwrap(), &[1.0, 0.5, 0.5, 1.0]).unwrap().value();
    let sums: Vec<f64> = both.data().chunks(2).map(|r| r.iter().sum()).collect();
    assert!(sums.iter().all(|s| (s - 1.0).abs() > 1e-3), "{sums:?}");
}

#[test]
fn isolated_identity_layer_passes_nonnegative_input() {
    let mut store = ParamStore::new();
    let d = 3;
    let mut eye = vec![0.0; d * d];
    (0..d).for_each(|i| eye[i * d + i] = 1.0);
    let w = store.add("w", 0, Tensor::new(vec![d, d], eye).unwrap());
    let s = store.add("s", 0, Tensor::full(&[1, d], 0.3));
    let t = store.add("t", 0, Tensor::full(&[1, d], -0.2));
    let layer = GatLayer {
        heads: 1,
        head_dim: d,
        concat: false,
        slope: 0.2,
        variant: AttentionVariant::Concat,
        w,
        w_dst: None,
        attn_src: s,
        attn_dst: Some(t),
    };
    let graph = GraphContext::new(&LabelGraph::isolated(2), &[0.5, 0.5], false, false).unwrap();
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let x = Tensor::new(vec![1, 2, d], vec![0.1, 0.0, 2.0, 3.0, 0.4, 0.5]).unwrap();
    let out = layer.forward(&p, tape.constant(x.clone()), &graph).unwrap().value();
    assert_eq!(out, x);
    let zero = layer.forward(&p, tape.constant(Tensor::zeros(&[1, 2, d])), &graph).unwrap().value();
    assert!(zero.data().iter().all(|&v| v == 0.0));
}

fn toy_graph() -> LabelGraph {
    let labels: Vec<Vec<u8>> = vec![
        vec![1, 1, 0, 0],
        vec![1, 1, 1, 0],
        vec![0, 1, 1, 0],
        vec![1, 0, 0, 1],
        vec![1, 1, 0, 1],
    ];
    LabelGraph::build(&labels, 4, 25.0, &[]).unwrap()
}

#[test]
fn gat_layer_gradients_with_enhancements() {
    for variant in [AttentionVariant::Concat, AttentionVariant::Dynamic] {
        let (store, layer) = one_layer(variant, 3, 2, 2, true, 4);
        let graph = GraphContext::new(&toy_graph(), &[0.6, 0.8, 0.4, 0.02], true, true).unwrap();
        assert!(graph.factor.is_some());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, &[2, 4, 3]);
        let weights = random(&mut rng, &[2, 4, 4]);
        let mut params: Vec<Tensor> = store.entries().iter().map(|e| e.tensor.clone()).collect();
        params.push(x);
        let xi = params.len() - 1;
        let report = grad_check(
            |tape, p| {
                let out = layer.forward(p, p[xi], &graph)?;
                out.mul(tape.constant(weights.clone())).map(|o| o.sum())
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{variant:?} {report:?}");
    }
}

#[test]
fn neutral_enhancements_are_bitwise_plain() {
    let (store, layer) = one_layer(AttentionVariant::Concat, 3, 2, 2, true, 6);
    let g = toy_graph();
    let plain = GraphContext::new(&g, &[1.0; 4], false, false).unwrap();
    let mut neutral = GraphContext::new(&g, &[1.0; 4], true, false).unwrap();
    assert!(neutral.factor.as_ref().unwrap().data().iter().all(|&f| f == 1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[2, 4, 3]);
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let a = layer.forward(&p, tape.constant(x.clone()), &plain).unwrap().value();
    let b = layer.forward(&p, tape.constant(x.clone()), &neutral).unwrap().value();
    assert_eq!(a, b);
    neutral.factor = Some(Tensor::full(&[4, 4], 1.0));
    let c = layer.forward(&p, tape.constant(x), &neutral).unwrap().value();
    assert_eq!(a, c);
}

#[test]
fn permutation_equivariance() {
    let k = 4;
    let perm = [2usize, 0, 3, 1]; // new index i holds old label perm[i]
    let g = toy_graph();
    let pi = [0.6, 0.8, 0.4, 0.02];
    let ctx = GraphContext::new(&g, &pi, true, true).unwrap();
    let permuted_mask: Vec<bool> = (0..k * k).map(|idx| ctx.mask[perm[idx / k] * k + perm[idx % k]]).collect();
    let f = ctx.factor.as_ref().unwrap().data();
    let permuted_factor: Vec<f64> = (0..k * k).map(|idx| f[perm[idx / k] * k + perm[idx % k]]).collect();
    let pctx = GraphContext::from_parts(k, permuted_mask, Some(Tensor::new(vec![k, k], permuted_factor).unwrap())).unwrap();

    let (store, layer) = one_layer(AttentionVariant::Concat, 3, 2, 2, true, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[2, k, 3]);
    let mut px = x.clone();
    for b in 0..2 {
        for i in 0..k {
            for c in 0..3 {
                px.data_mut()[(b * k + i) * 3 + c] = x.data()[(b * k + perm[i]) * 3 + c];
            }
        }
    }
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let out = layer.forward(&p, tape.constant(x), &ctx).unwrap().value();
    let pout = layer.forward(&p, tape.constant(px), &pctx).unwrap().value();
    let w = out.last_dim();
    for b in 0..2 {
        for i in 0..k {
            for c in 0..w {
                let a = pout.data()[(b * k + i) * w + c];
                let e = out.data()[(b * k + perm[i]) * w + c];
                assert!((a - e).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn init_nodes_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    let proj = Linear::register(&mut store, "proj", 0, 3, 2, true, &mut rng);
    store.get_mut(proj.b.unwrap()).data_mut().copy_from_slice(&[0.5, -0.5]);
    let emb = store.add("emb", 0, random(&mut rng, &[3, 2]));
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let z = tape.constant(Tensor::zeros(&[1, 3]));
    let v = init_nodes(&p, &proj, emb, z).unwrap().value();
    let e = store.get(emb).data();
    for i in 0..6 {
        assert_eq!(v.data()[i], e[i] + [0.5, -0.5][i % 2]);
    }
    // zero label embeddings -> identical nodes; equal images -> equal nodes
    let zero_emb = tape.constant(Tensor::zeros(&[3, 2]));
    let mut p2 = p.clone();
    p2[emb] = zero_emb;
    let z = tape.constant(Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 0.1, 0.2, 0.3]).unwrap());
    let v = init_nodes(&p2, &proj, emb, z).unwrap().value();
    let rows: Vec<&[f64]> = v.data().chunks(2).collect();
    assert!(rows.iter().all(|r| *r == rows[0]));
}

#[test]
fn head_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let head = PredictionHead::register(&mut store, 0, 4, 5, 3, &mut rng);
    let tape = Tape::new();
    let v0 = random(&mut rng, &[2, 3, 2]);
    let vl = random(&mut rng, &[2, 3, 2]);

    // random weights: strictly inside (0, 1)
    let p = store.bind_frozen(&tape);
    let y = head.predict(&p, tape.constant(v0.clone()), tape.constant(vl.clone())).unwrap().value();
    assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));

    // zero second-layer slice for vL: output ignores vL
    let mut masked = store.clone();
    let w1 = masked.get_mut(head.fc1.w);
    for r in 2..4 {
        for c in 0..5 {
            w1.data_mut()[r * 5 + c] = 0.0;
        }
    }
    let p = masked.bind_frozen(&tape);
    let a = head.predict(&p, tape.constant(v0.clone()), tape.constant(vl)).unwrap().value();
    let b = head.predict(&p, tape.constant(v0.clone()), tape.constant(Tensor::zeros(&[2, 3, 2]))).unwrap().value();
    assert_eq!(a, b);

    // all-zero head -> 0.5
    let mut zero = store.clone();
    zero.entries_mut().iter_mut().for_each(|e| e.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0));
    let p = zero.bind_frozen(&tape);
    let y = head.predict(&p, tape.constant(v0.clone()), tape.constant(v0)).unwrap().value();
    assert!(y.data().iter().all(|&v| v == 0.5));
}

#[test]
fn stack_shapes_and_identity_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let cfg = GatConfig {
        node_dim: 4,
        heads: 3,
        hidden_per_head: 2,
        ..Default::default()
    };
    let stack = GatStack::register(&mut store, &cfg, 0, &mut rng).unwrap();
    assert_eq!(stack.layers[0].out_dim(), 6);
    assert_eq!(stack.layers[1].out_dim(), 4);
    let ctx = GraphContext::new(&toy_graph(), &[0.5; 4], true, true).unwrap();
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let v0 = tape.constant(random(&mut rng, &[2, 4, 4]));
    assert_eq!(stack.forward(&p, v0, &ctx).unwrap().shape(), vec![2, 4, 4]);

    let id = GatStack::register(&mut store, &GatConfig { identity: true, ..cfg }, 0, &mut rng).unwrap();
    assert!(id.layers.is_empty());
    assert_eq!(id.forward(&p, v0, &ctx).unwrap().value(), v0.value());
}
