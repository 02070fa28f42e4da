use spanedit::corpus::{generate_corpus, TaskKind, TaskSpec, Vocab};
use spanedit::model::{CopyMode, EncodedExample, Model, ModelConfig};
use spanedit::objective::{train, ObjectiveKind, TrainConfig};
use spanedit::Error;

fn small_task(kind: TaskKind, count: usize, seed: u64) -> (Vocab, Vec<EncodedExample>, Vec<EncodedExample>) {
    let spec = TaskSpec::new(kind, 20, 5, 10, seed);
    let all = generate_corpus(&spec, count + 200).unwrap();
    let (tr, va) = all.split_at(count);
    let vocab = Vocab::build(tr, 1000).unwrap();
    let enc = |e: &spanedit::corpus::EditExample| EncodedExample::new(&vocab, &e.input, &e.output);
    let tr = tr.iter().map(enc).collect();
    let va = va.iter().map(enc).collect();
    (vocab, tr, va)
}

fn small_model(vocab_size: usize, seed: u64) -> Model {
    let mut cfg = ModelConfig::new(vocab_size);
    cfg.embed_dim = 32;
    cfg.enc_hidden = 32;
    cfg.dec_hidden = 32;
    cfg.dropout = 0.1;
    cfg.seed = seed;
    Model::new(cfg).unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (vocab, tr, _) = small_task(TaskKind::Delete, 40, 2);
    let mut model = small_model(vocab.len(), 1);
    let before = model.clone();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        epochs: 2,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let summary = train(&mut model, &tr, &[], &cfg, |_| {}).unwrap();
    assert_eq!(summary.steps, 10);
    assert_eq!(model, before);
}

#[test]
fn runs_are_deterministic_and_thread_count_does_not_matter() {
    let (vocab, tr, va) = small_task(TaskKind::DuplicateSpan, 48, 3);
    let run = |threads: usize| {
        let mut model = small_model(vocab.len(), 7);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            seed: 11,
            threads,
            valid_limit: 20,
            ..TrainConfig::default()
        };
        let log = train(&mut model, &tr, &va[..20], &cfg, |_| {}).unwrap().log;
        (log, model)
    };
    let (log_a, model_a) = run(1);
    let (log_b, model_b) = run(1);
    let (log_c, model_c) = run(3);
    assert_eq!(log_a, log_b);
    assert_eq!(model_a, model_b);
    assert_eq!(log_a, log_c);
    assert_eq!(model_a, model_c);
    assert_eq!(log_a.len(), 4);
    assert_eq!(log_a[1].split, "valid");
    assert!(log_a[1].exact_match.is_some());
}

#[test]
fn non_finite_loss_aborts_training() {
    let (vocab, tr, _) = small_task(TaskKind::Delete, 8, 4);
    let mut model = small_model(vocab.len(), 1);
    let span = model.params().names().iter().position(|n| n == "span.W").unwrap();
    model.params_mut().values_mut()[span].data_mut()[0] = f64::NAN;
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let err = train(&mut model, &tr, &[], &cfg, |_| {}).unwrap_err();
    assert!(matches!(err, Error::Divergence(_)), "{err}");
}

#[test]
fn invalid_settings_are_rejected() {
    let (vocab, tr, _) = small_task(TaskKind::Delete, 4, 4);
    let mut model = small_model(vocab.len(), 1);
    for cfg in [
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
        TrainConfig { beta1: 1.0, ..TrainConfig::default() },
    ] {
        assert!(matches!(train(&mut model, &tr, &[], &cfg, |_| {}), Err(Error::Validation(_))));
    }
    assert!(train(&mut model, &[], &[], &TrainConfig::default(), |_| {}).is_err());
}

#[test]
fn loss_falls_on_every_objective() {
    let (vocab, tr, _) = small_task(TaskKind::DuplicateSpan, 64, 5);
    for objective in ObjectiveKind::ALL {
        let mut model = small_model(vocab.len(), 2);
        let cfg = TrainConfig {
            objective,
            epochs: 3,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let log = train(&mut model, &tr, &[], &cfg, |_| {}).unwrap().log;
        assert!(log[2].loss < log[0].loss, "{objective}: {log:?}");
    }
}

#[test]
fn insert_task_is_learned_to_high_exact_match() {
    let (vocab, tr, va) = small_task(TaskKind::Insert, 200, 1);
    let mut model = small_model(vocab.len(), 0);
    let cfg = TrainConfig {
        epochs: 30,
        seed: 3,
        ..TrainConfig::default()
    };
    let log = train(&mut model, &tr, &va, &cfg, |_| {}).unwrap().log;
    let last = log.last().unwrap();
    assert_eq!(last.split, "valid");
    let em = last.exact_match.unwrap();
    assert!(em >= 0.9, "validation exact match {em}");
}

#[test]
fn token_copy_model_trains_on_the_same_path() {
    let (vocab, tr, _) = small_task(TaskKind::Delete, 32, 6);
    let mut cfg = ModelConfig::new(vocab.len());
    cfg.embed_dim = 8;
    cfg.enc_hidden = 8;
    cfg.dec_hidden = 8;
    cfg.copy_mode = CopyMode::Tokens;
    let mut model = Model::new(cfg).unwrap();
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let log = train(&mut model, &tr, &[], &tc, |_| {}).unwrap().log;
    assert!(log.iter().all(|r| r.loss.is_finite()));
}
