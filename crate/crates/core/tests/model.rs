use nrit_core::autodiff::{gradient_check, CheckOptions, Graph};
use nrit_core::mask::{GradientMask, Selection};
use nrit_core::model::{
    argmax, ActivationProbe, ChoiceScope, MicroTransformer, ModelConfig, Tokenizer, EOT, NO, YES,
};
use nrit_core::{NritError, Tensor};
use proptest::prelude::*;

fn tiny(seed: u64) -> MicroTransformer {
    MicroTransformer::new(ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 12,
        vocab_size: 11,
        init_seed: seed,
    })
    .unwrap()
}

/// Scales every weight up so that a random model's outputs depend visibly on
/// its inputs (0.02-scale init makes most differences tiny).
fn loud(seed: u64) -> MicroTransformer {
    let mut m = tiny(seed);
    for p in m.store_mut().params_mut() {
        if !p.name.contains("ln") {
            p.value.data_mut().iter_mut().for_each(|v| *v *= 40.0);
        }
    }
    m
}

#[test]
fn config_validation() {
    let mut c = ModelConfig::desk(50);
    assert!(c.validate().is_ok());
    c.n_heads = 5;
    assert!(matches!(c.validate(), Err(NritError::Config(_))));
    c.n_heads = 4;
    c.d_ff = 0;
    assert!(matches!(MicroTransformer::new(c), Err(NritError::Config(_))));
}

#[test]
fn forward_shape_and_errors() {
    let m = tiny(0);
    let logits = m.forward(&[0, 5, 6, 7], &mut []).unwrap();
    assert_eq!(logits.shape(), &[4, 11]);
    assert!(logits.all_finite());
    assert!(matches!(m.forward(&[1; 13], &mut []), Err(NritError::Length { len: 13, max: 12 })));
    assert!(matches!(m.forward(&[11], &mut []), Err(NritError::Token(_))));
    let mut bad = [ActivationProbe::capture(2)];
    assert!(matches!(m.forward(&[0, 5], &mut bad), Err(NritError::Index(_))));
    let mut bad = [ActivationProbe::capture(0).at(2)];
    assert!(matches!(m.forward(&[0, 5], &mut bad), Err(NritError::Index(_))));
}

#[test]
fn identity_override_is_bit_exact() {
    let m = loud(1);
    let toks = [0, 5, 9, 3, 7];
    let mut probe = [ActivationProbe::capture(1)];
    let base = m.forward(&toks, &mut probe).unwrap();
    let captured = probe[0].captured.clone().unwrap();
    assert_eq!(captured.len(), 16);
    let mut over = [ActivationProbe::with_override(1, captured.clone())];
    let again = m.forward(&toks, &mut over).unwrap();
    assert!(base.bits_eq(&again));
    // captured reports the pre-override value
    assert!(over[0].captured.as_ref().unwrap().bits_eq(&captured));
}

#[test]
fn zero_override_changes_last_logits() {
    let m = loud(2);
    let toks = [0, 5, 9, 3];
    let mut probe = [ActivationProbe::capture(0)];
    let base = m.forward(&toks, &mut probe).unwrap();
    assert!(probe[0].captured.as_ref().unwrap().data().iter().any(|&v| v != 0.0));
    let mut zero = [ActivationProbe::with_override(0, Tensor::zeros(&[16]))];
    let changed = m.forward(&toks, &mut zero).unwrap();
    assert!(base.row(3) != changed.row(3));
    // earlier positions cannot see the last one
    assert_eq!(base.row(1), changed.row(1));
}

#[test]
fn override_length_is_checked() {
    let m = tiny(0);
    let mut p = [ActivationProbe::with_override(0, Tensor::zeros(&[15]))];
    assert!(matches!(m.forward(&[0, 1], &mut p), Err(NritError::Shape(_))));
}

#[test]
fn suffix_replay_matches_full_override() {
    let m = loud(3);
    let toks = [0, 6, 8, 10, 4, 5];
    let ctx = m.probe_context(&toks).unwrap();
    let full = m.forward(&toks, &mut []).unwrap();
    let last = full.row(toks.len() - 1);
    assert!(ctx.last_logits.data().iter().zip(last).all(|(a, b)| (a - b).abs() < 1e-12));
    for layer in 0..2 {
        let v: Vec<f64> = ctx.hidden[layer].data().iter().enumerate().map(|(i, x)| x * 0.3 + i as f64 * 0.01).collect();
        let mut p = [ActivationProbe::with_override(layer, Tensor::vector(v.clone()))];
        let reference = m.forward(&toks, &mut p).unwrap();
        let mut g = Graph::new();
        let h = g.input(Tensor::vector(v));
        let z = m.suffix_logits(&mut g, &ctx, layer, h).unwrap();
        let got = g.value(z);
        let diff = got.data().iter().zip(reference.row(toks.len() - 1)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "layer {layer}: {diff}");
    }
}

#[test]
fn suffix_replay_single_token_prompt() {
    let m = loud(4);
    let ctx = m.probe_context(&[7]).unwrap();
    let mut g = Graph::new();
    let h = g.input(ctx.hidden[0].clone());
    let z = m.suffix_logits(&mut g, &ctx, 0, h).unwrap();
    assert!(g.value(z).max_abs_diff(&ctx.last_logits) < 1e-12);
}

#[test]
fn choice_probability_contracts() {
    let m = tiny(5);
    let toks = [0, 5, 6];
    let restricted = ChoiceScope::Restricted(vec![YES, NO]);
    let py = m.choice_probability(&toks, 2, YES, &restricted).unwrap();
    let pn = m.choice_probability(&toks, 2, NO, &restricted).unwrap();
    assert!((py + pn - 1.0).abs() < 1e-12);
    assert_eq!(py.to_bits(), m.choice_probability(&toks, 2, YES, &restricted).unwrap().to_bits());
    let pv = m.choice_probability(&toks, 2, YES, &ChoiceScope::Vocabulary).unwrap();
    assert!(pv > 0.0 && pv < py);
    assert!(matches!(m.choice_probability(&toks, 2, 11, &ChoiceScope::Vocabulary), Err(NritError::Token(_))));
    assert!(matches!(m.choice_probability(&toks, 2, 7, &restricted), Err(NritError::Token(_))));
    assert!(matches!(m.choice_probability(&toks, 3, YES, &restricted), Err(NritError::Index(_))));

    // equal logits for the two choices give exactly one half
    let mut sym = tiny(5);
    let head = sym.store().id("lm_head").unwrap();
    let v = sym.store().value(head).clone();
    let w = sym.store_mut().get_mut(head).value.data_mut();
    for r in 0..v.rows() {
        w[r * v.cols() + NO] = v.data()[r * v.cols() + YES];
    }
    assert_eq!(sym.choice_probability(&toks, 2, YES, &restricted).unwrap(), 0.5);
}

#[test]
fn greedy_generation_is_cached_consistently() {
    let m = loud(6);
    let prompt = [0, 5, 6];
    let out = m.generate_greedy(&prompt, 6).unwrap();
    assert_eq!(out, m.generate_greedy(&prompt, 6).unwrap());
    // recompute each step from scratch without a cache
    let mut seq = prompt.to_vec();
    let mut expect = Vec::new();
    for _ in 0..6 {
        let logits = m.forward(&seq, &mut []).unwrap();
        let next = argmax(logits.row(seq.len() - 1));
        if next == EOT {
            break;
        }
        expect.push(next);
        seq.push(next);
    }
    assert_eq!(out, expect);
}

#[test]
fn generation_stops_on_forced_eot_and_checks_headroom() {
    let m = tiny(7);
    let out = m
        .generate_greedy_with(&[0, 5], 4, &mut |_, logits| logits[EOT] = 1e9)
        .unwrap();
    assert!(out.is_empty());
    let out = m
        .generate_greedy_with(&[0, 5], 4, &mut |step, logits| {
            logits.iter_mut().for_each(|v| *v = 0.0);
            logits[if step == 2 { EOT } else { 7 }] = 1.0;
        })
        .unwrap();
    assert_eq!(out, vec![7, 7]);
    assert!(matches!(m.generate_greedy(&[0; 10], 3), Err(NritError::Length { .. })));
    assert!(matches!(m.generate_greedy(&[0; 12], 0), Err(NritError::Length { .. })));
}

#[test]
fn argmax_tie_goes_to_lowest_id() {
    assert_eq!(argmax(&[0.0, 2.0, 2.0, 1.0]), 1);
    // a zero output head makes every logit equal
    let mut m = tiny(8);
    let head = m.store().id("lm_head").unwrap();
    m.store_mut().get_mut(head).value.fill(0.0);
    let out = m.generate_greedy_with(&[3, 4], 2, &mut |_, _| {}).unwrap();
    assert_eq!(out, vec![0, 0]);
}

#[test]
fn one_token_cross_entropy_gradients() {
    let m = loud(9);
    let ids: Vec<_> = m.store().iter().map(|(id, _)| id).collect();
    let opts = CheckOptions {
        h: 1e-5,
        tol: 1e-4,
        floor: 1e-3,
    };
    let report = gradient_check(m.store(), &ids, opts, |g, s| m.sequence_loss_in(g, s, &[0, 5, 7, 3], 3)).unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_error());
}

#[test]
fn sequence_loss_ignores_prompt_targets() {
    let m = loud(10);
    let eval = |toks: &[usize]| {
        let mut g = Graph::new();
        let l = m.sequence_loss(&mut g, toks, 3).unwrap();
        g.value(l).item()
    };
    // changing a prompt token that is never predicted at a loss position only
    // matters through context; changing the target changes the loss
    let a = eval(&[0, 5, 6, 7, 8]);
    assert_ne!(a, eval(&[0, 5, 6, 7, 9]));
    let mut g = Graph::new();
    assert!(m.sequence_loss(&mut g, &[0, 5], 0).is_err());
    assert!(m.sequence_loss(&mut g, &[0, 5], 2).is_err());
}

#[test]
fn parameter_counts() {
    let m = tiny(0);
    let all = m.count_parameters(None).unwrap();
    assert_eq!(all.selected, all.total);
    assert_eq!(all.fraction, 1.0);
    let names = m.ffn_names(1).unwrap();
    let mut mask = GradientMask::empty();
    mask.select(&names.w1, &[8, 16], Selection::Cols([4].into())).unwrap();
    mask.select(&names.b1, &[16], Selection::Scalars([4].into())).unwrap();
    mask.select(&names.w2, &[16, 8], Selection::Rows([4].into())).unwrap();
    let c = m.count_parameters(Some(&mask)).unwrap();
    assert_eq!(c.selected, 8 + 1 + 8);
    assert_eq!(c.fraction, 17.0 / all.total as f64);
    let mut bogus = GradientMask::empty();
    bogus.select("nope", &[1], Selection::Full).unwrap();
    assert!(matches!(m.count_parameters(Some(&bogus)), Err(NritError::Config(_))));
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny(11);
    let a = dir.path().join("a.nrit");
    let b = dir.path().join("b.nrit");
    m.save(&a).unwrap();
    let back = MicroTransformer::load(*m.config(), &a).unwrap();
    back.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let fresh = tiny(12);
    assert_ne!(fresh.store().to_checkpoint_bytes(), m.store().to_checkpoint_bytes());
}

#[test]
fn tokenizer_round_trip_on_corpus_text() {
    let corpus = ["The capital of Bavo is Kelim.", "Kelim's mayor is  Oru!"];
    let t = Tokenizer::from_texts(corpus);
    for s in corpus {
        let ids = t.encode(s).unwrap();
        assert_eq!(t.decode(&ids), nrit_core::text::normalize(s));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn logits_are_causal(seed in 0u64..1000, toks in prop::collection::vec(0usize..11, 2..10), cut in 1usize..9, repl in 0usize..11) {
        let cut = cut.min(toks.len() - 1);
        let m = loud(seed);
        let a = m.forward(&toks, &mut []).unwrap();
        let mut changed = toks.clone();
        changed[cut] = repl;
        let b = m.forward(&changed, &mut []).unwrap();
        for p in 0..cut {
            prop_assert_eq!(a.row(p), b.row(p));
        }
    }

    #[test]
    fn identity_intervention_any_layer(seed in 0u64..1000, toks in prop::collection::vec(0usize..11, 1..10), layer in 0usize..2, pos in 0usize..9) {
        let m = loud(seed);
        let pos = pos.min(toks.len() - 1);
        let mut probe = [ActivationProbe::capture(layer).at(pos)];
        let base = m.forward(&toks, &mut probe).unwrap();
        let mut over = [ActivationProbe::with_override(layer, probe[0].captured.clone().unwrap()).at(pos)];
        prop_assert!(base.bits_eq(&m.forward(&toks, &mut over).unwrap()));
    }
}
