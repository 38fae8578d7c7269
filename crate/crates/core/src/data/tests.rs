use super::*;
use crate::scope::DEFAULT_FUZZY_THRESHOLD;

#[test]
fn same_seed_same_world() {
    let a = generate_world(7, 20, 4).unwrap();
    let b = generate_world(7, 20, 4).unwrap();
    assert_eq!(a, b);
    let c = generate_world(8, 20, 4).unwrap();
    assert_ne!(a.entities, c.entities);
}

#[test]
fn world_counts_and_templates() {
    let w = generate_world(3, 30, 5).unwrap();
    assert_eq!(w.entities.len(), 30);
    assert_eq!(w.relations.len(), 5);
    assert_eq!(w.n_facts(), 150);
    // every fact realized by >= 3 templates
    assert_eq!(w.corpus.len(), 150 * 3);
    for r in &w.relations {
        assert!(r.templates.len() >= 3);
    }
}

#[test]
fn entity_names_pairwise_distant() {
    let w = generate_world(11, 60, 3).unwrap();
    for i in 0..w.entities.len() {
        for j in (i + 1)..w.entities.len() {
            let a = w.entities[i].to_ascii_lowercase();
            let b = w.entities[j].to_ascii_lowercase();
            let d = crate::scope::levenshtein(&a, &b);
            assert!(d >= 3, "{} vs {} at distance {d}", w.entities[i], w.entities[j]);
            let s = crate::scope::similarity(&w.entities[i], &w.entities[j]);
            assert!(
                s < DEFAULT_FUZZY_THRESHOLD,
                "{} vs {} fuzzy-collide at {s}",
                w.entities[i],
                w.entities[j]
            );
        }
    }
}

#[test]
fn capacity_errors() {
    assert!(generate_world(1, 10, 99).is_err());
    assert!(generate_world(1, 0, 3).is_err());
}

#[test]
fn datasets_flip_one_relation() {
    let w = generate_world(5, 40, 5).unwrap();
    let (train, eval) = make_edit_datasets(&w, 12, 5).unwrap();
    assert_eq!(train.len(), 12);
    assert_eq!(eval.len(), 12);
    for (tr, ev) in train.iter().zip(&eval) {
        assert_eq!(tr.subject, ev.subject);
        assert_eq!(tr.prompt, ev.prompt);
        assert_eq!(tr.target, ev.target);
        // counterfactual by construction
        assert_ne!(Some(&tr.target), ev.ground_truth.as_ref());
        assert_ne!(ev.generality, ev.prompt);
        assert_eq!(tr.locality_prompts.len(), 2);
    }
}

#[test]
fn edit_count_too_large_rejected() {
    let w = generate_world(5, 10, 3).unwrap();
    assert!(make_edit_datasets(&w, 11, 5).is_err());
}

#[test]
fn locality_prompts_avoid_the_edited_relation() {
    let w = generate_world(9, 50, 5).unwrap();
    let (train, _) = make_edit_datasets(&w, 50, 9).unwrap();

    // Distinctive content words per relation: words used by its templates
    // that no other relation's templates use.
    let rel_words: Vec<std::collections::HashSet<String>> = w
        .relations
        .iter()
        .map(|r| {
            r.templates
                .iter()
                .flat_map(|t| t.split_whitespace())
                .filter(|wd| !wd.contains('{'))
                .map(|wd| wd.to_ascii_lowercase())
                .collect()
        })
        .collect();
    let distinctive: Vec<std::collections::HashSet<String>> = (0..rel_words.len())
        .map(|i| {
            rel_words[i]
                .iter()
                .filter(|wd| rel_words.iter().enumerate().all(|(j, o)| j == i || !o.contains(*wd)))
                .cloned()
                .collect()
        })
        .collect();

    for tr in &train {
        // identify the edited relation by its prompt template
        let edited = w
            .relations
            .iter()
            .position(|r| tr.prompt == r.prompt(0, &tr.subject))
            .expect("prompt built from template 0");
        // every realization of the edited relation for this subject differs
        // from both locality prompts
        for t in 0..w.relations[edited].templates.len() {
            let realization = w.relations[edited].prompt(t, &tr.subject);
            for loc in &tr.locality_prompts {
                assert_ne!(loc, &realization);
            }
        }
        // and no distinctive word of the edited relation appears in them
        for loc in &tr.locality_prompts {
            let lower = loc.to_ascii_lowercase();
            for word in &distinctive[edited] {
                assert!(
                    !lower.split_whitespace().any(|wd| wd == word),
                    "locality prompt {loc:?} leaks edited-relation word {word:?}"
                );
            }
        }
    }
}

#[test]
fn dataset_files_round_trip() {
    let w = generate_world(13, 25, 4).unwrap();
    let (train, eval) = make_edit_datasets(&w, 10, 13).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let tpath = dir.path().join("train.jsonl");
    let epath = dir.path().join("eval.jsonl");
    save_training(&tpath, &train).unwrap();
    save_eval(&epath, &eval).unwrap();
    assert_eq!(load_training(&tpath).unwrap(), train);
    assert_eq!(load_eval(&epath).unwrap(), eval);
}

#[test]
fn appendix_style_training_record_parses() {
    let json = r#"{
        "subject": "Christiane Cohendy",
        "prompt": "What is the native language of Christiane Cohendy?",
        "target": "German",
        "rephrase_prompt": "What is the mother tongue of Christiane Cohendy?",
        "locality": [
            "What is the profession of Christiane Cohendy?",
            "Where did Christiane Cohendy go to school?"
        ]
    }"#;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    std::fs::write(&path, json.replace('\n', " ") + "\n").unwrap();
    let records = load_training(&path).unwrap();
    assert_eq!(records[0].subject, "Christiane Cohendy");
    assert_eq!(records[0].target, "German");
    assert_eq!(records[0].locality_prompts.len(), 2);
}

#[test]
fn appendix_style_eval_record_parses() {
    let json = r#"{
        "subject": "Danielle Darrieux",
        "prompt": "The mother tongue of Danielle Darrieux is",
        "target": "English",
        "ground_truth": "French",
        "generality": "Danielle Darrieux's native language is",
        "locality": {
            "prompt": "The birth year of Danielle Darrieux is",
            "target": "1917"
        }
    }"#;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("eval.jsonl");
    std::fs::write(&path, json.replace('\n', " ") + "\n").unwrap();
    let records = load_eval(&path).unwrap();
    assert_eq!(records[0].ground_truth.as_deref(), Some("French"));
    assert_eq!(records[0].target, "English");
}

#[test]
fn record_with_subject_missing_from_prompt_rejected_with_line() {
    let good = r#"{"subject":"Ada Lovelace","prompt":"The title of Ada Lovelace is","target":"Countess","rephrase_prompt":"Ada Lovelace holds the title","locality":["The field of Ada Lovelace is"]}"#;
    let bad = r#"{"subject":"Ada Lovelace","prompt":"The title of someone is","target":"Countess","rephrase_prompt":"Ada Lovelace holds the title","locality":[]}"#;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    std::fs::write(&path, format!("{good}\n{bad}\n")).unwrap();
    let err = load_training(&path).unwrap_err().to_string();
    assert!(err.contains(":2:"), "{err}");
    assert!(err.contains("subject missing"), "{err}");
}

#[test]
fn missing_field_reported_with_name() {
    let bad = r#"{"subject":"A B","prompt":"A B is","rephrase_prompt":"A B was","locality":[]}"#;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    std::fs::write(&path, format!("{bad}\n")).unwrap();
    let err = load_training(&path).unwrap_err().to_string();
    assert!(err.contains("target"), "{err}");
}

#[test]
fn world_file_round_trip() {
    let w = generate_world(21, 15, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("world.json");
    w.save(&path).unwrap();
    assert_eq!(FactWorld::load(&path).unwrap(), w);
}

#[test]
fn vocabulary_covers_corpus_and_pools() {
    let w = generate_world(2, 10, 3).unwrap();
    let tok = w.tokenizer().unwrap();
    for sentence in &w.corpus {
        let enc = tok.encode(sentence).unwrap();
        assert!(
            enc.ids.iter().all(|&id| id != crate::model::UNK_ID),
            "corpus sentence tokenized to <unk>: {sentence}"
        );
    }
    for rel in &w.relations {
        for obj in &rel.objects {
            assert!(tok.id_of(obj).is_some(), "object {obj} missing from vocab");
        }
    }
}

#[test]
fn holdout_tasks_exclude_scope() {
    let w = generate_world(4, 20, 3).unwrap();
    let exclude: Vec<String> = w.entities[..5].to_vec();
    let tasks = make_holdout_tasks(&w, &exclude, 30, 4).unwrap();
    assert_eq!(tasks.len(), 30);
    for (prompt, _) in &tasks {
        for e in &exclude {
            assert!(!prompt.contains(e.as_str()));
        }
    }
}
