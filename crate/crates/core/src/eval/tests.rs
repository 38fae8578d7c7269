use super::*;
use crate::editor::EditorBundle;
use crate::model::{ModelConfig, Tokenizer};
use crate::scope::ScopeIndex;
use std::sync::Arc;

fn toy_tokenizer() -> Tokenizer {
    Tokenizer::build(
        ["a", "b", "c", "d", "e", "The", "birthplace", "of", "is", "Baru", "Ketim", "Okava",
            "Parvin", "occupation", "baker", ".", "was", "born", "in"]
            .map(String::from),
    )
    .unwrap()
}

fn toy_model(seed: u64) -> Arc<MicroLm> {
    let tok = toy_tokenizer();
    let cfg = ModelConfig::new(2, 8, 2, tok.vocab_size(), 24);
    Arc::new(MicroLm::new(cfg, tok, seed).unwrap())
}

#[test]
fn fluency_of_constant_text_is_zero() {
    let tok = toy_tokenizer();
    assert_eq!(fluency("a a a a a", &tok).unwrap(), 0.0);
}

#[test]
fn fluency_of_abcd_matches_closed_form() {
    let tok = toy_tokenizer();
    let expected = (2.0 / 3.0) * 3f64.log2() + (4.0 / 3.0) * 2f64.log2();
    let got = fluency("a b c d", &tok).unwrap();
    assert!((got - expected).abs() <= 1e-12, "{got} vs {expected}");
    assert!((got - 2.390).abs() < 1e-3);
}

#[test]
fn fluency_too_short_rejected() {
    let tok = toy_tokenizer();
    assert!(fluency("a b", &tok).is_err());
}

#[test]
fn edit_performance_means() {
    assert_eq!(edit_performance(0.0, 0.0, 0.0).unwrap(), 0.0);
    let ep = edit_performance(100.0, 94.5, 78.8).unwrap();
    assert!((ep - 91.1).abs() <= 0.05, "{ep}");
    let ep = edit_performance(100.0, 98.0, 80.5).unwrap();
    assert!((ep - 92.8).abs() <= 0.05, "{ep}");
}

#[test]
fn edit_performance_rejects_out_of_scale() {
    assert!(edit_performance(101.0, 50.0, 50.0).is_err());
    assert!(edit_performance(-0.1, 0.5, 0.5).is_err());
}

#[test]
fn report_identity_and_formats() {
    let report = EvalReport {
        reliability: 0.9,
        generality: 0.6,
        locality: 0.75,
        edit_performance: edit_performance(0.9, 0.6, 0.75).unwrap(),
        fluency: 2.1,
        info_gain: vec![LayerGain { layer: 1, delta_i: 0.4 }],
        n_edits: 50,
    };
    assert!((report.edit_performance - (0.9 + 0.6 + 0.75) / 3.0).abs() <= 1e-9);
    let json: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    assert_eq!(json["n_edits"], 50);
    assert!(report.to_csv().contains("reliability,0.9"));
    assert!(report.info_gain_tsv().contains("1\t0.4"));
}

#[test]
fn probe_rule_prefers_higher_cosine_and_ties_lose() {
    let e = [1.0, 0.0, 0.0];
    let aligned = [2.0, 0.0, 0.0];
    let orthogonal = [0.0, 1.0, 0.0];
    assert!(probe_pick_is_correct(&e, &aligned, &orthogonal));
    assert!(!probe_pick_is_correct(&e, &orthogonal, &aligned));
    // identical representations tie; conservative rule counts them wrong
    assert!(!probe_pick_is_correct(&e, &aligned, &aligned));
}

#[test]
fn probe_accuracy_is_order_independent() {
    let model = toy_model(5);
    let mut probes = vec![
        ProbeCase {
            entity: "Baru Ketim".into(),
            factual: "The birthplace of Baru Ketim is Okava .".into(),
            counterfactual: "The birthplace of Baru Ketim is Parvin .".into(),
        },
        ProbeCase {
            entity: "Okava".into(),
            factual: "The occupation of Okava is baker .".into(),
            counterfactual: "The occupation of Okava is Okava .".into(),
        },
        ProbeCase {
            entity: "Ketim".into(),
            factual: "Ketim was born in Parvin .".into(),
            counterfactual: "Ketim was born in Okava .".into(),
        },
    ];
    let a = probe_accuracy(&model, &probes, 1).unwrap();
    probes.reverse();
    let b = probe_accuracy(&model, &probes, 1).unwrap();
    assert_eq!(a, b);
}

#[test]
fn self_swap_never_improves() {
    let model = toy_model(6);
    let prompt = "The birthplace of Baru Ketim is";
    let cs = prompt.find("Baru").unwrap();
    let span = (cs, cs + "Baru Ketim".len());
    let cases = vec![KbSwapCase {
        prompt_a: prompt.into(),
        entity_a: span,
        prompt_b: prompt.into(),
        entity_b: span,
        target_token: model.tokenizer().id_of("Okava").unwrap(),
    }];
    assert_eq!(kb_swap_experiment(&model, &cases, 1).unwrap(), 0.0);
}

#[test]
fn swap_rejects_out_of_vocab_attribute() {
    let model = toy_model(6);
    let prompt = "The birthplace of Baru Ketim is";
    let cs = prompt.find("Baru").unwrap();
    let span = (cs, cs + "Baru Ketim".len());
    let cases = vec![KbSwapCase {
        prompt_a: prompt.into(),
        entity_a: span,
        prompt_b: prompt.into(),
        entity_b: span,
        target_token: model.config().vocab_size as u32,
    }];
    assert!(kb_swap_experiment(&model, &cases, 1).is_err());
}

#[test]
fn identity_replacement_has_zero_info_gain() {
    let model = toy_model(7);
    let h = crate::editor::Hypernetwork::identity_linear(1, 8);
    let evals = vec![crate::data::EvalRecord {
        subject: "Baru Ketim".into(),
        prompt: "The birthplace of Baru Ketim is".into(),
        target: "Okava".into(),
        ground_truth: Some("Parvin".into()),
        generality: "Baru Ketim was born in".into(),
        locality: crate::data::LocalityProbe {
            prompt: "The occupation of Baru Ketim is".into(),
            target: "baker".into(),
        },
    }];
    let gain = info_gain(&model, &h, &evals, 1).unwrap();
    assert_eq!(gain, 0.0);
}

#[test]
fn empty_scope_bundle_scores_perfect_locality() {
    let model = toy_model(8);
    let scope = ScopeIndex::build(vec![]).unwrap();
    let h = crate::editor::Hypernetwork::identity_linear(1, 8);
    let bundle = EditorBundle::new(Arc::clone(&model), h, scope).unwrap();
    let evals = vec![crate::data::EvalRecord {
        subject: "Baru Ketim".into(),
        prompt: "The birthplace of Baru Ketim is".into(),
        target: "Okava".into(),
        ground_truth: None,
        generality: "Baru Ketim was born in".into(),
        locality: crate::data::LocalityProbe {
            prompt: "The occupation of Baru Ketim is".into(),
            target: "baker".into(),
        },
    }];
    assert_eq!(locality(&bundle, &model, &evals).unwrap(), 1.0);
}

#[test]
fn general_ability_rejects_scope_overlap() {
    let model = toy_model(9);
    let records = vec![crate::scope::EditRecord {
        subject: "Baru Ketim".into(),
        prompt: "The birthplace of Baru Ketim is".into(),
        target: "Okava".into(),
        rephrase_prompt: "Baru Ketim was born in".into(),
        locality_prompts: vec!["The occupation of Baru Ketim is".into()],
    }];
    let scope = ScopeIndex::build(records).unwrap();
    let h = crate::editor::Hypernetwork::identity_linear(1, 8);
    let bundle = EditorBundle::new(Arc::clone(&model), h, scope).unwrap();

    let overlapping = vec![("The birthplace of Baru Ketim is".to_string(), "Okava".to_string())];
    assert!(general_ability_check(&model, &bundle, &overlapping).is_err());

    let disjoint = vec![("The occupation of Okava is".to_string(), "baker".to_string())];
    let (base_acc, edited_acc) = general_ability_check(&model, &bundle, &disjoint).unwrap();
    assert_eq!(base_acc, edited_acc);
}

#[test]
fn empty_sets_rejected() {
    let model = toy_model(10);
    let scope = ScopeIndex::build(vec![]).unwrap();
    let h = crate::editor::Hypernetwork::identity_linear(1, 8);
    let bundle = EditorBundle::new(Arc::clone(&model), h, scope).unwrap();
    assert!(reliability(&bundle, &[]).is_err());
    assert!(generality(&bundle, &[]).is_err());
    assert!(locality(&bundle, &model, &[]).is_err());
    assert!(probe_accuracy(&model, &[], 1).is_err());
    assert!(kb_swap_experiment(&model, &[], 1).is_err());
}
