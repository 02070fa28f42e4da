#![allow(dead_code)]

use spanedit::corpus::{EditExample, Vocab, PAD, START};
use spanedit::model::{Action, CopyMode, DecodeSession, EncodedExample, Model, ModelConfig};
use spanedit::rng::SplitMix64;

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Vocabulary holding exactly the given surfaces after the reserved entries.
pub fn vocab_of(surfaces: &str) -> Vocab {
    let mut text = spanedit::corpus::RESERVED.join("\n");
    for s in surfaces.split_whitespace() {
        text.push('\n');
        text.push_str(s);
    }
    text.push('\n');
    Vocab::from_text(&text).unwrap()
}

pub fn encode(vocab: &Vocab, x: &str, y: &str) -> EncodedExample {
    EncodedExample::new(vocab, &words(x), &words(y))
}

pub fn tiny_config(vocab_size: usize, seed: u64, copy_mode: CopyMode) -> ModelConfig {
    ModelConfig {
        vocab_size,
        embed_dim: 4,
        enc_hidden: 3,
        enc_layers: 2,
        dec_hidden: 5,
        dropout: 0.0,
        tie_embeddings: true,
        copy_mode,
        seed,
    }
}

/// A tiny model whose parameters are scaled up so that action probabilities
/// are far from uniform.
pub fn tiny_model(vocab_size: usize, seed: u64, copy_mode: CopyMode, scale: f64) -> Model {
    let mut m = Model::new(tiny_config(vocab_size, seed, copy_mode)).unwrap();
    for p in m.params_mut().values_mut() {
        p.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    m
}

/// Random `(x, y)` over surfaces `a b c d` with `d` out of vocabulary; `y`
/// mixes fragments of `x` with fresh tokens so that copies are plentiful.
pub fn random_instance(rng: &mut SplitMix64, max_n: usize, max_m: usize) -> (Vec<String>, Vec<String>) {
    let alphabet = ["a", "b", "c", "d"];
    let pick = |rng: &mut SplitMix64| alphabet[rng.below(4) as usize].to_string();
    let n = rng.range_inclusive(1, max_n);
    let x: Vec<String> = (0..n).map(|_| pick(rng)).collect();
    let m = rng.range_inclusive(0, max_m);
    let mut y = Vec::with_capacity(m);
    while y.len() < m {
        if rng.below(2) == 0 {
            let i = rng.below(n as u64) as usize;
            let len = rng.range_inclusive(1, (n - i).min(m - y.len()));
            y.extend_from_slice(&x[i..i + len]);
        } else {
            y.push(pick(rng));
        }
    }
    (x, y)
}

pub fn abc_vocab() -> Vocab {
    vocab_of("a b c")
}

pub fn example_of(vocab: &Vocab, x: &[String], y: &[String]) -> EncodedExample {
    EncodedExample::new(vocab, x, y)
}

pub fn training_pair(x: &str, y: &str) -> EditExample {
    EditExample::from_text(x, y, "t").unwrap()
}

pub fn random_input(rng: &mut SplitMix64, n: usize, vocab_size: usize) -> Vec<usize> {
    (0..n).map(|_| 3 + rng.below((vocab_size - 3) as u64) as usize).collect()
}

/// Checks one action distribution: unit mass, masked cells exactly zero.
pub fn assert_normalized(session: &mut DecodeSession<'_>, prefix: &[usize], mode: CopyMode) {
    let n = session.input_len();
    let mut state = session.start_state().unwrap();
    for &t in prefix {
        state = session.advance(&state, t).unwrap();
    }
    let dist = session.action_distribution(&state).unwrap();
    assert!(dist.log_total().abs() <= 1e-6, "total {}", dist.log_total());
    assert_eq!(dist.log_q(&Action::Gen(PAD)), f64::NEG_INFINITY);
    assert_eq!(dist.log_q(&Action::Gen(START)), f64::NEG_INFINITY);
    let mut finite = 0;
    for i in 0..n {
        for j in 0..n {
            let v = dist.log_q_span.get2(i, j);
            let valid = match mode {
                CopyMode::Spans => j >= i,
                CopyMode::Tokens => j == i,
            };
            assert_eq!(v.is_finite(), valid, "cell ({i}, {j})");
            finite += valid as usize;
        }
    }
    let expected = match mode {
        CopyMode::Spans => n * (n + 1) / 2,
        CopyMode::Tokens => n,
    };
    assert_eq!(finite, expected);
}

pub fn state_after(session: &mut DecodeSession<'_>, ex: &EncodedExample, actions: &[Action]) -> Vec<f64> {
    let mut state = session.start_state().unwrap();
    for a in actions {
        let ids: Vec<usize> = ex.eval(a).iter().map(|s| ex.embed_id(*s)).collect();
        state = session.advance_many(&state, &ids).unwrap();
    }
    state.hidden.data().to_vec()
}

/// Every action distribution sums to one with masked cells at zero, for
/// inputs of every length 1..=8 under `draws` random parameter draws.
pub fn check_normalization(draws: u64) {
    let vocab_size = 9;
    let mut rng = SplitMix64::new(1);
    for draw in 0..draws {
        let mode = if draw % 5 == 4 { CopyMode::Tokens } else { CopyMode::Spans };
        let model = tiny_model(vocab_size, draw, mode, 1.0 + (draw % 3) as f64);
        for n in 1..=8 {
            let x = random_input(&mut rng, n, vocab_size);
            let mut session = model.session(&x).unwrap();
            let prefix = random_input(&mut rng, (draw % 4) as usize, vocab_size);
            assert_normalized(&mut session, &prefix, mode);
        }
    }
}

/// The decoder state after emitting the whole input is the same whichever
/// mix of copies and generations produced it.
pub fn check_path_independence(draws: u64) {
    let vocab = abc_vocab();
    let alphabet = ["a", "b", "c", "d"];
    let mut rng = SplitMix64::new(4);
    for draw in 0..draws {
        let model = tiny_model(vocab.len(), draw, CopyMode::Spans, 1.5);
        for n in 1..=8 {
            let x: Vec<String> = (0..n).map(|_| alphabet[rng.below(4) as usize].to_string()).collect();
            let ex = example_of(&vocab, &x, &x);
            let mut session = model.session(&ex.input_embed_ids()).unwrap();
            let whole = [Action::copy(0, n)];
            let singles: Vec<Action> = (0..n).map(|i| Action::copy(i, i + 1)).collect();
            let mixed: Vec<Action> = (0..n)
                .map(|i| {
                    if ex.in_vocab(ex.input[i]) {
                        Action::Gen(ex.input[i])
                    } else {
                        Action::copy(i, i + 1)
                    }
                })
                .collect();
            let split = rng.range_inclusive(1, n);
            let halves = if split < n {
                vec![Action::copy(0, split), Action::copy(split, n)]
            } else {
                whole.to_vec()
            };
            let reference = state_after(&mut session, &ex, &whole);
            assert_eq!(state_after(&mut session, &ex, &singles), reference, "draw {draw}, n {n}");
            assert_eq!(state_after(&mut session, &ex, &mixed), reference, "draw {draw}, n {n}");
            assert_eq!(state_after(&mut session, &ex, &halves), reference, "draw {draw}, n {n}");
        }
    }
}
