use std::cell::Cell;

use nrit_core::autodiff::{gradient_check, gradient_check_inputs, CheckOptions, Graph, NodeId};
use nrit_core::{NritError, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph<'_>, &[NodeId]) -> nrit_core::Result<NodeId>) -> f64 {
    let opts = CheckOptions {
        h: 1e-5,
        tol: 1e-5,
        floor: 1e-3,
    };
    let report = gradient_check_inputs(&inputs, opts, build).unwrap();
    report.max_rel_error()
}

/// Projects a tensor to a scalar with fixed non-uniform weights, so every
/// output entry gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<'_>, x: NodeId) -> nrit_core::Result<NodeId> {
    let v = g.value(x);
    let w: Vec<f64> = (0..v.len()).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
    let w = g.constant(Tensor::new(v.shape().to_vec(), w).unwrap());
    let m = g.mul(x, w)?;
    Ok(g.sum(m))
}

#[test]
fn linear_form_gradients() {
    let mut g = Graph::new();
    let w = g.input(Tensor::vector(vec![2.0, 3.0]));
    let x = g.input(Tensor::vector(vec![1.0, 1.0]));
    let p = g.mul(w, x).unwrap();
    let loss = g.sum(p);
    let back = g.backward(loss).unwrap();
    assert_eq!(back.grad(w).unwrap().data(), &[1.0, 1.0]);
    assert_eq!(back.grad(x).unwrap().data(), &[2.0, 3.0]);
}

#[test]
fn constant_loss_leaves_zero_gradient() {
    let mut store = ParamStore::new();
    let wid = store.insert("w", Tensor::vector(vec![1.0, -1.0])).unwrap();
    let mut g = Graph::new();
    let _w = g.param(&store, wid);
    let c = g.constant(Tensor::scalar(5.0));
    let back = g.backward(c).unwrap();
    assert!(back.param_grads(&g).get(wid).is_none());
    store.accumulate(&back.param_grads(&g));
    assert_eq!(store.value(wid).len(), 2);
    assert_eq!(store.get(wid).gradient.data(), &[0.0, 0.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(NritError::Contract(_))));
}

#[test]
fn nan_in_backward_names_the_node() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![0.0]));
    let l = g.log(x);
    let s = g.sum(l);
    match g.backward(s) {
        Err(NritError::Numeric { location, .. }) => assert!(location.contains("log") || location.contains("input")),
        other => panic!("expected numeric failure, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn quadratic_parameter_check() {
    let mut store = ParamStore::new();
    let wid = store.insert("w", Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
    let opts = CheckOptions {
        h: 1e-5,
        tol: 1e-9,
        floor: 1e-3,
    };
    let report = gradient_check(&store, &[wid], opts, |g, s| {
        let w = g.param(s, wid);
        let sq = g.mul(w, w)?;
        Ok(g.sum(sq))
    })
    .unwrap();
    assert!(report.passed(), "{report:?}");
    assert!(report.max_rel_error() < 1e-9);

    let mut g = Graph::new();
    let w = g.param(&store, wid);
    let sq = g.mul(w, w).unwrap();
    let l = g.sum(sq);
    let grads = g.backward(l).unwrap().param_grads(&g);
    assert_eq!(grads.get(wid).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn nondeterministic_closure_is_detected() {
    let mut store = ParamStore::new();
    let wid = store.insert("w", Tensor::vector(vec![1.0])).unwrap();
    let calls = Cell::new(0u32);
    let result = gradient_check(&store, &[wid], CheckOptions::default(), |g, s| {
        calls.set(calls.get() + 1);
        let w = g.param(s, wid);
        let noise = g.constant(Tensor::vector(vec![calls.get() as f64 * 1e-3]));
        let y = g.add(w, noise)?;
        Ok(g.sum(y))
    });
    assert!(matches!(result, Err(NritError::NonDeterministic(_))));
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let dims = [5usize, 7, 6, 3];
    let mut ids = Vec::new();
    for l in 0..3 {
        ids.push(store.insert(format!("w{l}"), random(&mut rng, &[dims[l], dims[l + 1]])).unwrap());
        ids.push(store.insert(format!("b{l}"), random(&mut rng, &[dims[l + 1]])).unwrap());
    }
    let x = random(&mut rng, &[4, 5]);
    let targets = [0usize, 2, 1, 2];
    let opts = CheckOptions {
        h: 1e-5,
        tol: 1e-6,
        floor: 1e-3,
    };
    let report = gradient_check(&store, &ids, opts, |g, s| {
        let mut h = g.constant(x.clone());
        for l in 0..3 {
            let w = g.param(s, ids[2 * l]);
            let b = g.param(s, ids[2 * l + 1]);
            let z = g.matmul(h, w)?;
            h = g.add_row(z, b)?;
            if l < 2 {
                h = g.gelu(h);
            }
        }
        g.cross_entropy(h, &targets)
    })
    .unwrap();
    assert!(report.max_rel_error() < 1e-6, "{report:?}");
}

#[test]
fn attention_with_prefix_matches_full_causal_rows() {
    // Attention over the last query rows with a longer key sequence equals the
    // corresponding rows of full causal attention.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, d) = (5, 4);
    let q = random(&mut rng, &[n, d]);
    let k = random(&mut rng, &[n, d]);
    let v = random(&mut rng, &[n, d]);
    let mut g = Graph::new();
    let (qn, kn, vn) = (g.constant(q.clone()), g.constant(k), g.constant(v));
    let full = g.attention(qn, kn, vn, 2).unwrap();
    let qlast = g.slice_rows(qn, 3, 5).unwrap();
    let part = g.attention(qlast, kn, vn, 2).unwrap();
    let full_rows = g.slice_rows(full, 3, 5).unwrap();
    assert!(g.value(part).max_abs_diff(g.value(full_rows)) < 1e-15);
    // first position can only see itself
    let first = g.value(full).row(0).to_vec();
    assert!(first.iter().zip(g.value(vn).row(0)).all(|(a, b)| (a - b).abs() < 1e-15));
}

fn arb_seed() -> impl Strategy<Value = u64> {
    0u64..10_000
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn primitive_gradients_match_finite_differences(seed in arb_seed()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[3, 4]);
        let w = random(&mut rng, &[4, 2]);
        let bias = random(&mut rng, &[4]);
        let tol = 1e-5;
        let mut errs = Vec::new();

        errs.push(check(vec![a.clone(), b.clone()], |g, x| { let y = g.add(x[0], x[1])?; weighted_sum(g, y) }));
        errs.push(check(vec![a.clone(), b.clone()], |g, x| { let y = g.mul(x[0], x[1])?; weighted_sum(g, y) }));
        errs.push(check(vec![a.clone()], |g, x| { let y = g.scale(x[0], -1.7); weighted_sum(g, y) }));
        errs.push(check(vec![a.clone(), bias.clone()], |g, x| { let y = g.add_row(x[0], x[1])?; weighted_sum(g, y) }));
        errs.push(check(vec![a.clone(), w.clone()], |g, x| { let y = g.matmul(x[0], x[1])?; weighted_sum(g, y) }));
        errs.push(check(vec![a.clone()], |g, x| { let y = g.gelu(x[0]); weighted_sum(g, y) }));
        errs.push(check(vec![a.clone()], |g, x| { let y = g.softmax(x[0]); weighted_sum(g, y) }));
        errs.push(check(vec![a.clone()], |g, x| { let s = g.softmax(x[0]); let y = g.log(s); weighted_sum(g, y) }));
        errs.push(check(vec![a.clone(), bias.clone(), random(&mut rng, &[4])], |g, x| {
            let y = g.layer_norm(x[0], x[1], x[2])?; weighted_sum(g, y)
        }));
        errs.push(check(vec![random(&mut rng, &[6, 4])], |g, x| { let y = g.embedding(x[0], &[5, 0, 5, 2])?; weighted_sum(g, y) }));
        errs.push(check(vec![a.clone()], |g, x| g.cross_entropy(x[0], &[3, 0, 1])));
        errs.push(check(vec![a.clone()], |g, x| { let y = g.slice_rows(x[0], 1, 3)?; weighted_sum(g, y) }));
        errs.push(check(vec![a.clone()], |g, x| { let y = g.gather_cols(x[0], &[3, 1, 3])?; weighted_sum(g, y) }));
        errs.push(check(vec![a.clone(), b.clone()], |g, x| { let y = g.concat_rows(x[0], x[1])?; weighted_sum(g, y) }));
        errs.push(check(vec![a.clone(), bias.clone()], |g, x| { let y = g.override_row(x[0], 1, x[1])?; weighted_sum(g, y) }));
        errs.push(check(
            vec![random(&mut rng, &[2, 4]), random(&mut rng, &[5, 4]), random(&mut rng, &[5, 4])],
            |g, x| { let y = g.attention(x[0], x[1], x[2], 2)?; weighted_sum(g, y) }
        ));
        for (i, e) in errs.iter().enumerate() {
            prop_assert!(*e < tol, "primitive case {} error {}", i, e);
        }
    }

    #[test]
    fn forward_and_backward_are_bit_reproducible(seed in arb_seed()) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random(&mut rng, &[3, 4]);
            let w = random(&mut rng, &[4, 4]);
            let mut g = Graph::new();
            let qn = g.input(q);
            let wn = g.input(w);
            let k = g.matmul(qn, wn).unwrap();
            let a = g.attention(qn, k, k, 2).unwrap();
            let l = weighted_sum(&mut g, a).unwrap();
            let back = g.backward(l).unwrap();
            (g.value(l).clone(), back.grad(wn).unwrap().clone())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        prop_assert!(l1.bits_eq(&l2));
        prop_assert!(g1.bits_eq(&g2));
    }
}
