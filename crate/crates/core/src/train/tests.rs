use super::*;
use crate::editor::Hypernetwork;
use crate::model::ModelConfig;
use crate::tensor::grad_check;

fn toy_vocab() -> Vec<String> {
    [
        "The", "birthplace", "of", "is", "occupation", "favorite", "color", "Baru", "Ketim",
        "Zola", "Marn", "Parvin", "Okava", "baker", "sailor", "teal", "amber", ".", "was",
        "born", "in",
    ]
    .map(String::from)
    .to_vec()
}

fn toy_model(d: usize, seed: u64) -> MicroLm {
    let tok = crate::model::Tokenizer::build(toy_vocab()).unwrap();
    let cfg = ModelConfig::new(2, d, 2, tok.vocab_size(), 24);
    MicroLm::new(cfg, tok, seed).unwrap()
}

fn toy_corpus() -> Vec<String> {
    let mut corpus = Vec::new();
    for (e, place, job, color) in [
        ("Baru Ketim", "Parvin", "baker", "teal"),
        ("Zola Marn", "Okava", "sailor", "amber"),
    ] {
        corpus.push(format!("The birthplace of {e} is {place} ."));
        corpus.push(format!("{e} was born in {place} ."));
        corpus.push(format!("The occupation of {e} is {job} ."));
        corpus.push(format!("The favorite color of {e} is {color} ."));
    }
    corpus
}

/// A small model that has actually learned the toy facts; editing a cold
/// random model is meaningless because its value/output projections damp the
/// entity states into the noise floor.
fn pretrained_toy(d: usize, seed: u64) -> MicroLm {
    let tok = crate::model::Tokenizer::build(toy_vocab()).unwrap();
    let cfg = ModelConfig::new(2, d, 2, tok.vocab_size(), 24);
    let opts = PretrainOpts {
        steps: 300,
        batch_size: 8,
        lr: 3e-3,
        weight_decay: 0.0,
        seed,
        log_every: 0,
    };
    pretrain_lm(&toy_corpus(), cfg, tok, &opts).unwrap().model
}

fn toy_records() -> Vec<EditRecord> {
    vec![
        EditRecord {
            subject: "Baru Ketim".into(),
            prompt: "The birthplace of Baru Ketim is".into(),
            target: "Okava".into(),
            rephrase_prompt: "Baru Ketim was born in".into(),
            locality_prompts: vec![
                "The occupation of Baru Ketim is".into(),
                "The favorite color of Baru Ketim is".into(),
            ],
        },
        EditRecord {
            subject: "Zola Marn".into(),
            prompt: "The occupation of Zola Marn is".into(),
            target: "sailor".into(),
            rephrase_prompt: "Zola Marn was born in".into(),
            locality_prompts: vec!["The favorite color of Zola Marn is".into()],
        },
    ]
}

#[test]
fn identity_hypernetwork_zeroes_locality() {
    let model = toy_model(8, 1);
    let h = Hypernetwork::identity_linear(1, 8);
    let b = loss(&h, &toy_records(), &model, 1, 3, 1.0).unwrap();
    assert_eq!(b.locality, 0.0);
    assert!(b.edit > 0.0 && b.eq > 0.0);
}

#[test]
fn lambda_zero_total_is_locality() {
    let model = toy_model(8, 2);
    let mut h = Hypernetwork::identity_linear(1, 8);
    // perturb so locality is nonzero
    h.params_mut()[1].values_mut()[0] = 0.5;
    h.params_mut()[1].values_mut()[3] = -0.25;
    let b = loss(&h, &toy_records(), &model, 1, 3, 0.0).unwrap();
    assert!(b.locality > 0.0);
    assert_eq!(b.total, b.locality);
}

#[test]
fn doubling_lambda_doubles_the_edit_contribution() {
    let model = toy_model(8, 3);
    let mut h = Hypernetwork::identity_linear(1, 8);
    h.params_mut()[1].values_mut()[2] = 0.3;
    let records = toy_records();
    let b1 = loss(&h, &records, &model, 1, 3, 1.0).unwrap();
    let b2 = loss(&h, &records, &model, 1, 3, 2.0).unwrap();
    assert!((b2.edit - b1.edit).abs() < 1e-12);
    assert!((b2.locality - b1.locality).abs() < 1e-12);
    let contrib1 = b1.total - b1.locality;
    let contrib2 = b2.total - b2.locality;
    assert!((contrib2 - 2.0 * contrib1).abs() <= 1e-9);
}

#[test]
fn breakdown_total_identity() {
    let model = toy_model(8, 4);
    let mut h = Hypernetwork::identity_linear(2, 8);
    h.params_mut()[1].values_mut()[5] = -0.4;
    for lambda in [0.0, 0.5, 1.0, 10.0] {
        let b = loss(&h, &toy_records(), &model, 2, 3, lambda).unwrap();
        assert!((b.total - (lambda * (b.edit + b.eq) + b.locality)).abs() <= 1e-9);
        assert!(b.edit >= 0.0 && b.eq >= 0.0 && b.locality >= 0.0);
    }
}

#[test]
fn entity_missing_from_prompt_rejected() {
    let model = toy_model(8, 5);
    let mut records = toy_records();
    records[0].subject = "Baru Ketim".into();
    records[0].prompt = "The birthplace of Zola Marn is".into();
    let h = Hypernetwork::identity_linear(1, 8);
    assert!(loss(&h, &records, &model, 1, 3, 1.0).is_err());
}

#[test]
fn record_without_locality_prompts_rejected() {
    let model = toy_model(8, 5);
    let mut records = toy_records();
    records[1].locality_prompts.clear();
    let h = Hypernetwork::identity_linear(1, 8);
    assert!(loss(&h, &records, &model, 1, 3, 1.0).is_err());
}

#[test]
fn edit_loss_gradient_matches_finite_differences() {
    let model = pretrained_toy(8, 6);
    let records = toy_records();
    let trainer = EditTrainer::new(&model, &records, 1, 3).unwrap();
    let mut h = Hypernetwork::identity_linear(1, 8);
    // move off the identity so gradients are generic
    for (i, v) in h.params_mut()[0].values_mut().iter_mut().enumerate() {
        if i % 5 == 0 {
            *v += 0.05;
        }
    }
    h.params_mut()[1].values_mut()[1] = 0.1;
    h.snap_params_to_f32();

    let params = h.params_cloned();
    let err = grad_check(
        |tape, ids| trainer.loss_graph_standalone(tape, &h, ids, &[0, 1], 1.5),
        &params,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "relative error {err}");
}

#[test]
fn training_is_deterministic() {
    let model = toy_model(8, 7);
    let records = toy_records();
    let config = TrainConfig {
        max_epochs: 4,
        batch_size: 1,
        lr: 5e-3,
        seed: 11,
        ..TrainConfig::default()
    };
    let a = train(&records, &model, 1, &config).unwrap();
    let b = train(&records, &model, 1, &config).unwrap();
    for (pa, pb) in a.hypernetwork.params().iter().zip(b.hypernetwork.params()) {
        assert_eq!(pa.values(), pb.values());
    }
    assert_eq!(a.log.len(), b.log.len());
    let c = train(
        &records,
        &model,
        1,
        &TrainConfig { seed: 12, ..config.clone() },
    )
    .unwrap();
    let same = a
        .hypernetwork
        .params()
        .iter()
        .zip(c.hypernetwork.params())
        .all(|(x, y)| x.values() == y.values());
    assert!(!same, "different seeds produced identical weights");
}

#[test]
fn single_edit_reaches_full_accuracy_and_stops_early() {
    let model = pretrained_toy(32, 8);
    let records = vec![toy_records()[0].clone()];
    let config = TrainConfig {
        lambda_edit: 10.0,
        max_epochs: 80,
        batch_size: 1,
        lr: 1e-2,
        seed: 3,
        ..TrainConfig::default()
    };
    let out = train(&records, &model, 1, &config).unwrap();
    let last = out.log.last().unwrap();
    assert_eq!(last.edit_accuracy, 1.0, "log: {:?}", out.log);
    assert!(
        out.log.len() < config.max_epochs,
        "early stopping never triggered ({} epochs)",
        out.log.len()
    );
    // the bundle path decodes the target
    let scope = out.scope;
    let bundle = crate::editor::EditorBundle::new(
        std::sync::Arc::new(model),
        out.hypernetwork,
        scope,
    )
    .unwrap();
    let gen = bundle
        .edited_generate("The birthplace of Baru Ketim is", 1)
        .unwrap();
    assert_eq!(gen, "Okava");
}

#[test]
fn sample_epoch_is_a_permutation_and_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = sample_epoch(17, &mut rng);
    let mut sorted = a.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..17).collect::<Vec<_>>());

    let mut rng1 = ChaCha8Rng::seed_from_u64(10);
    let mut rng2 = ChaCha8Rng::seed_from_u64(10);
    assert_eq!(sample_epoch(17, &mut rng1), sample_epoch(17, &mut rng2));

    // batches of one are single-record tuples covering the epoch
    let batches: Vec<&[usize]> = a.chunks(1).collect();
    assert_eq!(batches.len(), 17);
    assert!(batches.iter().all(|b| b.len() == 1));
}

mod pretrain_tests {
    use super::*;

    fn tiny_corpus() -> (Vec<String>, crate::model::Tokenizer) {
        let mut corpus = Vec::new();
        for (e, obj) in [("Baru Ketim", "Parvin"), ("Zola Marn", "Okava")] {
            corpus.push(format!("The birthplace of {e} is {obj} ."));
            corpus.push(format!("{e} was born in {obj} ."));
        }
        for (e, obj) in [("Baru Ketim", "baker"), ("Zola Marn", "sailor")] {
            corpus.push(format!("The occupation of {e} is {obj} ."));
        }
        let tok = crate::model::Tokenizer::build(toy_vocab()).unwrap();
        (corpus, tok)
    }

    #[test]
    fn zero_steps_sits_at_uniform_baseline() {
        let (corpus, tok) = tiny_corpus();
        let cfg = ModelConfig::new(2, 16, 2, tok.vocab_size(), 24);
        let opts = PretrainOpts { steps: 0, ..PretrainOpts::default() };
        let out = pretrain_lm(&corpus, cfg, tok.clone(), &opts).unwrap();
        let baseline = (tok.vocab_size() as f64).ln();
        assert!(
            (out.holdout_loss - baseline).abs() / baseline <= 0.10,
            "holdout {} vs baseline {baseline}",
            out.holdout_loss
        );
    }

    #[test]
    fn loss_drops_below_baseline_with_training() {
        let (corpus, tok) = tiny_corpus();
        let cfg = ModelConfig::new(2, 16, 2, tok.vocab_size(), 24);
        let opts = PretrainOpts { steps: 120, batch_size: 4, lr: 3e-3, ..PretrainOpts::default() };
        let out = pretrain_lm(&corpus, cfg, tok.clone(), &opts).unwrap();
        let baseline = (tok.vocab_size() as f64).ln();
        assert!(out.holdout_loss < baseline, "{} !< {baseline}", out.holdout_loss);
        assert!(out.final_train_loss < baseline / 2.0);
    }

    #[test]
    fn same_seed_identical_model() {
        let (corpus, tok) = tiny_corpus();
        let cfg = ModelConfig::new(2, 16, 2, tok.vocab_size(), 24);
        let opts = PretrainOpts { steps: 25, batch_size: 4, ..PretrainOpts::default() };
        let a = pretrain_lm(&corpus, cfg.clone(), tok.clone(), &opts).unwrap();
        let b = pretrain_lm(&corpus, cfg, tok, &opts).unwrap();
        assert_eq!(a.final_train_loss, b.final_train_loss);
        assert_eq!(a.model.content_hash(), b.model.content_hash());
    }
}
