mod common;

use common::*;
use spanedit::corpus::{EOS, UNK};
use spanedit::model::{Action, CopyMode, Model};
use spanedit::objective::{
    log_likelihood, loss_value, CorrectActions, ObjectiveKind,
};
use spanedit::oracle::{
    enumerate_action_sequences, exact_likelihood, replay, sequence_log_prob, PrefixScorer, UnkPolicy,
};
use spanedit::rng::SplitMix64;
use spanedit::search::{beam_decode, beam_decode_merge_at_end};

fn lattice_vocab() -> spanedit::corpus::Vocab {
    vocab_of("a b c d e f")
}

#[test]
fn lattice_has_twenty_five_sequences() {
    let vocab = lattice_vocab();
    let ex = encode(&vocab, "a b c d e", "a b f d e");
    let seqs = enumerate_action_sequences(&ex, CopyMode::Spans, UnkPolicy::Strict).unwrap();
    assert_eq!(seqs.len(), 25);
    let a = vocab.id("a").unwrap();
    let b = vocab.id("b").unwrap();
    assert!(seqs.iter().any(|s| s[..2] == [Action::Gen(a), Action::Gen(b)]));
    assert!(seqs.iter().any(|s| s[0] == Action::copy(0, 2)));
    let mut sorted = seqs.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), seqs.len(), "duplicate sequences");
    for s in &seqs {
        assert_eq!(replay(&ex, s), ex.output);
        assert_eq!(*s.last().unwrap(), Action::Gen(EOS));
    }
}

#[test]
fn lattice_marginal_matches_enumeration() {
    let vocab = lattice_vocab();
    let ex = encode(&vocab, "a b c d e", "a b f d e");
    for seed in 0..5 {
        let model = tiny_model(vocab.len(), seed, CopyMode::Spans, 2.0);
        let dp = log_likelihood(&model, &ex).unwrap().exp();
        let brute = exact_likelihood(&model, &ex).unwrap();
        assert!((dp - brute).abs() <= 1e-9, "seed {seed}: {dp} vs {brute}");
    }
}

#[test]
fn random_instances_match_enumeration() {
    let vocab = abc_vocab();
    let mut rng = SplitMix64::new(99);
    for case in 0..120 {
        let (x, y) = random_instance(&mut rng, 6, 6);
        let ex = example_of(&vocab, &x, &y);
        let mode = if case % 4 == 3 { CopyMode::Tokens } else { CopyMode::Spans };
        let model = tiny_model(vocab.len(), case, mode, 1.5);
        let dp = log_likelihood(&model, &ex).unwrap().exp();
        let brute = exact_likelihood(&model, &ex).unwrap();
        assert!(
            (dp - brute).abs() <= 1e-9,
            "case {case} {x:?} -> {y:?}: {dp} vs {brute}"
        );
    }
}

#[test]
fn marginal_dominates_every_single_path() {
    let vocab = abc_vocab();
    let mut rng = SplitMix64::new(5);
    for case in 0..40 {
        let (x, y) = random_instance(&mut rng, 5, 5);
        let ex = example_of(&vocab, &x, &y);
        let model = tiny_model(vocab.len(), case, CopyMode::Spans, 1.5);
        let total = log_likelihood(&model, &ex).unwrap();
        let mut scorer = PrefixScorer::new(&model, &ex).unwrap();
        for s in enumerate_action_sequences(&ex, CopyMode::Spans, UnkPolicy::Strict).unwrap() {
            assert!(sequence_log_prob(&mut scorer, &ex, &s).unwrap() <= total + 1e-12);
        }
    }
}

#[test]
fn empty_output_is_the_end_of_sequence_probability() {
    let vocab = abc_vocab();
    let ex = encode(&vocab, "a b", "");
    let model = tiny_model(vocab.len(), 3, CopyMode::Spans, 1.0);
    let mut session = model.session(&ex.input_embed_ids()).unwrap();
    let start = session.start_state().unwrap();
    let eos = session.action_distribution(&start).unwrap().log_q(&Action::Gen(EOS));
    assert!((log_likelihood(&model, &ex).unwrap() - eos).abs() <= 1e-12);
    assert!((loss_value(&model, &ex, ObjectiveKind::MultiHot).unwrap() + eos).abs() <= 1e-12);
}

#[test]
fn zero_parameters_give_the_hand_computed_likelihood() {
    // Zero weights make every valid action equally likely: for V = 5 and n = 1
    // there are 3 generable tokens (EOS, UNK, a) and 1 span, so q = 1/4 and
    // p("a" | "a") = q(Gen a) q(EOS) + q(Copy) q(EOS) = 2 / 16.
    let vocab = vocab_of("a");
    let ex = encode(&vocab, "a", "a");
    let mut model = Model::new(tiny_config(vocab.len(), 0, CopyMode::Spans)).unwrap();
    for p in model.params_mut().values_mut() {
        p.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    assert!((exact_likelihood(&model, &ex).unwrap() - 0.125).abs() <= 1e-15);
    assert!((log_likelihood(&model, &ex).unwrap().exp() - 0.125).abs() <= 1e-15);
}

#[test]
fn pure_generation_is_a_product_of_token_probabilities() {
    let vocab = abc_vocab();
    let ex = encode(&vocab, "a a", "b c");
    let model = tiny_model(vocab.len(), 8, CopyMode::Spans, 1.0);
    let seqs = enumerate_action_sequences(&ex, CopyMode::Spans, UnkPolicy::Strict).unwrap();
    assert_eq!(seqs.len(), 1);
    let mut scorer = PrefixScorer::new(&model, &ex).unwrap();
    let path = sequence_log_prob(&mut scorer, &ex, &seqs[0]).unwrap();
    assert!((log_likelihood(&model, &ex).unwrap() - path).abs() <= 1e-12);
    assert!((loss_value(&model, &ex, ObjectiveKind::LongestCopy).unwrap() + path).abs() <= 1e-12);
    assert!((loss_value(&model, &ex, ObjectiveKind::MultiHot).unwrap() + path).abs() <= 1e-12);
}

#[test]
fn ablation_losses_follow_their_definitions() {
    let vocab = lattice_vocab();
    let ex = encode(&vocab, "a b c d e", "a b f d e");
    let model = tiny_model(vocab.len(), 4, CopyMode::Spans, 2.0);
    let correct = CorrectActions::new(&ex, CopyMode::Spans);
    let mut scorer = PrefixScorer::new(&model, &ex).unwrap();
    let path: Vec<Action> = correct.longest_copy_path().into_iter().map(|(_, a)| a).collect();
    let f = vocab.id("f").unwrap();
    assert_eq!(
        path,
        vec![Action::copy(0, 2), Action::Gen(f), Action::copy(3, 5), Action::Gen(EOS)]
    );
    let longest = -sequence_log_prob(&mut scorer, &ex, &path).unwrap();
    assert!((loss_value(&model, &ex, ObjectiveKind::LongestCopy).unwrap() - longest).abs() <= 1e-10);

    let mut multi = 0.0;
    let mut prefix: Vec<usize> = Vec::new();
    for k in 0..=ex.output.len() {
        let dist = scorer.distribution(&prefix).unwrap();
        let logs: Vec<f64> = correct.at(k).iter().map(|a| dist.log_q(a)).collect();
        multi -= spanedit_autodiff::log_sum_exp(&logs);
        if k < ex.output.len() {
            prefix.push(ex.embed_id(ex.output[k]));
        }
    }
    let got = loss_value(&model, &ex, ObjectiveKind::MultiHot).unwrap();
    assert!((got - multi).abs() <= 1e-10);
    let marginal = -log_likelihood(&model, &ex).unwrap();
    assert!((got - marginal).abs() > 1e-6);
}

#[test]
fn outputs_of_bounded_length_carry_at_most_unit_mass() {
    let vocab = abc_vocab();
    let model = tiny_model(vocab.len(), 12, CopyMode::Spans, 1.5);
    let symbols = ["a", "b", "c"];
    let mut outputs = vec![String::new()];
    let mut frontier = vec![String::new()];
    for _ in 0..3 {
        let mut next = Vec::new();
        for p in &frontier {
            for s in symbols {
                next.push(format!("{p} {s}"));
            }
        }
        outputs.extend(next.iter().cloned());
        frontier = next;
    }
    let total: f64 = outputs
        .iter()
        .map(|y| exact_likelihood(&model, &encode(&vocab, "a b", y)).unwrap())
        .sum();
    assert!(total <= 1.0 + 1e-6, "total {total}");
    assert!(total > 0.0);
}

#[test]
fn unknown_tokens_follow_the_copy_first_rule() {
    let vocab = abc_vocab();
    let copyable = encode(&vocab, "a d", "d");
    let seqs = enumerate_action_sequences(&copyable, CopyMode::Spans, UnkPolicy::Strict).unwrap();
    assert_eq!(seqs, vec![vec![Action::copy(1, 2), Action::Gen(EOS)]]);
    let fresh = encode(&vocab, "a", "d");
    let seqs = enumerate_action_sequences(&fresh, CopyMode::Spans, UnkPolicy::Strict).unwrap();
    assert_eq!(seqs, vec![vec![Action::Gen(UNK), Action::Gen(EOS)]]);
}

#[test]
fn wide_beam_recovers_exact_probabilities() {
    let vocab = abc_vocab();
    let model = tiny_model(vocab.len(), 21, CopyMode::Spans, 1.5);
    let ex = encode(&vocab, "a b a", "");
    let merged = beam_decode(&model, &ex, usize::MAX, 4).unwrap();
    let at_end = beam_decode_merge_at_end(&model, &ex, usize::MAX, 4).unwrap();
    for y in ["a b", "a b a", "b a", "c", "a a b a", "a b a b"] {
        let target = encode(&vocab, "a b a", y);
        let exact = exact_likelihood(&model, &target).unwrap();
        let beam = merged.log_prob_of(&target.output).unwrap().exp();
        let end = at_end.log_prob_of(&target.output).unwrap().exp();
        assert!((beam - exact).abs() <= 1e-9, "{y}: {beam} vs {exact}");
        assert!((end - exact).abs() <= 1e-9, "{y}: {end} vs {exact}");
    }
    for e in &merged.merges {
        assert_eq!(e.merged, spanedit_autodiff::log_add_exp(e.kept, e.incoming));
    }
    assert!(!merged.merges.is_empty());
}

#[test]
fn wider_beams_never_lower_a_shared_probability() {
    let vocab = abc_vocab();
    let model = tiny_model(vocab.len(), 2, CopyMode::Spans, 2.0);
    let ex = encode(&vocab, "a b c", "");
    let narrow = beam_decode(&model, &ex, 3, 6).unwrap();
    let wide = beam_decode(&model, &ex, 12, 6).unwrap();
    for c in narrow.finished() {
        if let Some(w) = wide.log_prob_of(&c.tokens) {
            assert!(w >= c.log_prob - 1e-12);
        }
    }
}
