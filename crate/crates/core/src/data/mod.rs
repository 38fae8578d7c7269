//! Synthetic fact world and dataset construction.
//!
//! A world is a deterministic function of (seed, counts): unique two-word
//! entity names kept at pairwise Levenshtein distance >= 3, a fixed relation
//! set with object pools and >= 3 prompt templates each, one object per
//! (entity, relation), and a corpus realizing every fact through every
//! template. Edit datasets flip one relation per chosen entity to a
//! counterfactual object.

mod io;

pub use io::{load_eval, load_training, save_eval, save_training};

use crate::error::{KbError, Result};
use crate::model::tokenizer::Tokenizer;
use crate::scope::{levenshtein, similarity, EditRecord};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Locality probe of an evaluation record: a related prompt plus the answer
/// the unedited model is expected to keep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalityProbe {
    pub prompt: String,
    pub target: String,
}

/// Evaluation-side record: mirrors the training record plus the original
/// answer and a held-out locality probe.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub subject: String,
    pub prompt: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    pub generality: String,
    pub locality: LocalityProbe,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        if self.subject.trim().is_empty() || self.target.is_empty() {
            return Err(KbError::Validation(format!(
                "record {:?}: empty subject or target",
                self.subject
            )));
        }
        if self.generality == self.prompt {
            return Err(KbError::Validation(format!(
                "record {:?}: generality equals prompt",
                self.subject
            )));
        }
        let norm = |s: &str| {
            s.split_whitespace()
                .collect::<Vec<_>>()
                .join(" ")
                .to_ascii_lowercase()
        };
        if !norm(&self.locality.prompt).contains(&norm(&self.subject)) {
            return Err(KbError::Validation(format!(
                "record {:?}: locality prompt does not mention subject",
                self.subject
            )));
        }
        Ok(())
    }
}

/// A relation: its name, the pool its objects come from, and the prompt
/// templates realizing it (object-final, `{entity}` placeholder).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationDef {
    pub name: String,
    pub objects: Vec<String>,
    pub templates: Vec<String>,
}

impl RelationDef {
    pub fn prompt(&self, template_idx: usize, entity: &str) -> String {
        self.templates[template_idx].replace("{entity}", entity)
    }

    pub fn sentence(&self, template_idx: usize, entity: &str, object: &str) -> String {
        format!("{} {} .", self.prompt(template_idx, entity), object)
    }
}

fn builtin_relations() -> Vec<RelationDef> {
    let rel = |name: &str, objects: &[&str], templates: &[&str]| RelationDef {
        name: name.to_string(),
        objects: objects.iter().map(|s| s.to_string()).collect(),
        templates: templates.iter().map(|s| s.to_string()).collect(),
    };
    vec![
        rel(
            "birthplace",
            &[
                "Parvin", "Okava", "Tiruna", "Velgrad", "Mosport", "Quillon", "Ashmere",
                "Brinholm", "Caldera", "Dunwick", "Eastvale", "Farrow", "Glenmoor", "Harwick",
                "Ivoria", "Jutland",
            ],
            &[
                "The birthplace of {entity} is",
                "{entity} was born in the city of",
                "The city where {entity} was born is",
            ],
        ),
        rel(
            "language",
            &[
                "Veldic", "Tormish", "Quenlan", "Sarbric", "Elvish", "Norlan", "Ashtani",
                "Brovian", "Cindric", "Dulmese", "Ferrian", "Gorlic", "Hestian", "Ionic",
                "Jarlish", "Kelvan",
            ],
            &[
                "The native language of {entity} is",
                "The mother tongue of {entity} is",
                "{entity} grew up speaking",
            ],
        ),
        rel(
            "occupation",
            &[
                "baker", "sailor", "teacher", "smith", "weaver", "surgeon", "falconer",
                "cartographer", "brewer", "mason", "scribe", "gardener", "tanner", "miller",
                "fletcher", "cooper",
            ],
            &[
                "The occupation of {entity} is",
                "The profession of {entity} is",
                "{entity} earns a living as a",
            ],
        ),
        rel(
            "instrument",
            &[
                "violin", "flute", "drum", "cello", "harp", "trumpet", "oboe", "lute",
                "piano", "banjo", "fiddle", "horn", "viola", "organ", "bell", "pipe",
            ],
            &[
                "The instrument played by {entity} is the",
                "The musical instrument of {entity} is the",
                "{entity} performs music on the",
            ],
        ),
        rel(
            "beverage",
            &[
                "coffee", "cider", "mead", "cocoa", "juice", "lemonade", "milk", "porter",
                "stout", "cordial", "tonic", "punch", "nectar", "ale", "brew", "soda",
            ],
            &[
                "The favorite beverage of {entity} is",
                "The preferred drink of {entity} is",
                "{entity} likes to drink",
            ],
        ),
        rel(
            "pet",
            &[
                "falcon", "terrier", "tabby", "parrot", "rabbit", "tortoise", "ferret",
                "canary", "hound", "gecko", "pony", "raven", "badger", "otter", "finch",
                "heron",
            ],
            &[
                "The pet kept by {entity} is a",
                "The animal companion of {entity} is a",
                "{entity} takes care of a pet",
            ],
        ),
        rel(
            "color",
            &[
                "crimson", "amber", "teal", "violet", "olive", "indigo", "coral", "slate",
                "ivory", "maroon", "ochre", "plum", "russet", "sable", "umber", "verdant",
            ],
            &[
                "The favorite color of {entity} is",
                "The color most loved by {entity} is",
                "{entity} always dresses in",
            ],
        ),
        rel(
            "sport",
            &[
                "archery", "rowing", "fencing", "curling", "skating", "wrestling", "climbing",
                "sailing", "running", "diving", "jousting", "bowling", "riding", "swimming",
                "hurling", "skiing",
            ],
            &[
                "The sport practiced by {entity} is",
                "The favorite sport of {entity} is",
                "{entity} spends weekends on",
            ],
        ),
    ]
}

/// Deterministic synthetic world of entities, relations, facts, and the
/// sentences realizing them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactWorld {
    pub seed: u64,
    pub entities: Vec<String>,
    pub relations: Vec<RelationDef>,
    /// `facts[e][r]` is the object of entity `e` under relation `r`.
    pub facts: Vec<Vec<String>>,
    pub corpus: Vec<String>,
}

const NAME_SYLLABLES: [&str; 24] = [
    "ba", "re", "mi", "to", "ka", "zu", "ne", "vol", "dar", "sel", "fin", "gor", "lu", "pra",
    "quen", "ta", "yor", "zim", "hal", "cree", "om", "ves", "nor", "pel",
];

fn make_name_word(rng: &mut ChaCha8Rng) -> String {
    let n_syll = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..n_syll {
        w.push_str(NAME_SYLLABLES[rng.gen_range(0..NAME_SYLLABLES.len())]);
    }
    let mut chars = w.chars();
    let first = chars.next().unwrap().to_ascii_uppercase();
    std::iter::once(first).chain(chars).collect()
}

pub fn generate_world(seed: u64, n_entities: usize, n_relations: usize) -> Result<FactWorld> {
    generate_world_custom(seed, n_entities, n_relations, builtin_relations())
}

pub fn generate_world_custom(
    seed: u64,
    n_entities: usize,
    n_relations: usize,
    available: Vec<RelationDef>,
) -> Result<FactWorld> {
    if n_entities == 0 || n_relations == 0 {
        return Err(KbError::InvalidArgument("counts must be >= 1".into()));
    }
    if n_relations > available.len() {
        return Err(KbError::InvalidArgument(format!(
            "capacity exceeded: {n_relations} relations requested, {} available",
            available.len()
        )));
    }
    for r in &available {
        if r.templates.len() < 3 {
            return Err(KbError::InvalidArgument(format!(
                "relation {:?} has {} templates, need >= 3",
                r.name,
                r.templates.len()
            )));
        }
        if r.objects.len() < 2 {
            return Err(KbError::InvalidArgument(format!(
                "relation {:?} needs >= 2 objects for counterfactuals",
                r.name
            )));
        }
    }
    let relations: Vec<RelationDef> = available.into_iter().take(n_relations).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entities: Vec<String> = Vec::with_capacity(n_entities);
    let mut used_words: std::collections::HashSet<String> = std::collections::HashSet::new();
    let mut attempts = 0usize;
    while entities.len() < n_entities {
        attempts += 1;
        if attempts > n_entities * 500 {
            return Err(KbError::InvalidArgument(format!(
                "capacity exceeded: could not place {n_entities} entities at distance >= 3"
            )));
        }
        let first = make_name_word(&mut rng);
        let last = make_name_word(&mut rng);
        if used_words.contains(&first) || used_words.contains(&last) || first == last {
            continue;
        }
        let name = format!("{first} {last}");
        let name_lower = name.to_ascii_lowercase();
        let ok = entities.iter().all(|e| {
            let e_lower = e.to_ascii_lowercase();
            levenshtein(&e_lower, &name_lower) >= 3 && similarity(e, &name) < 0.80
        });
        if ok {
            used_words.insert(first);
            used_words.insert(last);
            entities.push(name);
        }
    }

    let mut facts = Vec::with_capacity(n_entities);
    for _ in 0..n_entities {
        let mut row = Vec::with_capacity(n_relations);
        for r in &relations {
            row.push(r.objects[rng.gen_range(0..r.objects.len())].clone());
        }
        facts.push(row);
    }

    let mut corpus = Vec::new();
    for (e, entity) in entities.iter().enumerate() {
        for (r, rel) in relations.iter().enumerate() {
            for t in 0..rel.templates.len() {
                corpus.push(rel.sentence(t, entity, &facts[e][r]));
            }
        }
    }

    Ok(FactWorld { seed, entities, relations, facts, corpus })
}

impl FactWorld {
    pub fn n_facts(&self) -> usize {
        self.entities.len() * self.relations.len()
    }

    pub fn fact(&self, entity_idx: usize, relation_idx: usize) -> &str {
        &self.facts[entity_idx][relation_idx]
    }

    /// Content vocabulary in deterministic first-seen corpus order.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        let mut words = Vec::new();
        for sentence in &self.corpus {
            for piece in Tokenizer::normalize(sentence).split(' ') {
                if seen.insert(piece.to_string()) {
                    words.push(piece.to_string());
                }
            }
        }
        // Objects not realized by any fact draw must still be in-vocabulary:
        // counterfactual targets come from the full pools.
        for rel in &self.relations {
            for obj in &rel.objects {
                if seen.insert(obj.clone()) {
                    words.push(obj.clone());
                }
            }
        }
        words
    }

    pub fn tokenizer(&self) -> Result<Tokenizer> {
        Tokenizer::build(self.vocabulary())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&json)?)
    }
}

/// Training and evaluation datasets for `t_edits` simultaneous edits.
///
/// Each chosen entity has one relation flipped to a counterfactual object.
/// The training prompt uses template 0 and the rephrase template 1; the two
/// training locality prompts query two other relations with template 0. The
/// evaluation record reuses the prompt/rephrase pair and probes locality on
/// the first locality relation through template 1 (same relation, new
/// phrasing).
pub fn make_edit_datasets(
    world: &FactWorld,
    t_edits: usize,
    seed: u64,
) -> Result<(Vec<EditRecord>, Vec<EvalRecord>)> {
    if t_edits == 0 {
        return Err(KbError::InvalidArgument("edit count must be >= 1".into()));
    }
    if t_edits > world.entities.len() {
        return Err(KbError::InvalidArgument(format!(
            "edit count {} exceeds entity count {}",
            t_edits,
            world.entities.len()
        )));
    }
    if world.relations.len() < 3 {
        return Err(KbError::InvalidArgument(
            "need >= 3 relations for two locality prompts".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let mut entity_order: Vec<usize> = (0..world.entities.len()).collect();
    entity_order.shuffle(&mut rng);
    entity_order.truncate(t_edits);
    entity_order.sort_unstable();

    let mut train = Vec::with_capacity(t_edits);
    let mut eval = Vec::with_capacity(t_edits);
    for &e in &entity_order {
        let entity = &world.entities[e];
        let n_rel = world.relations.len();
        let edited_rel = rng.gen_range(0..n_rel);
        let rel = &world.relations[edited_rel];
        let truth = world.fact(e, edited_rel);
        let counterfactual = loop {
            let cand = &rel.objects[rng.gen_range(0..rel.objects.len())];
            if cand != truth {
                break cand.clone();
            }
        };

        let mut others: Vec<usize> = (0..n_rel).filter(|&r| r != edited_rel).collect();
        others.shuffle(&mut rng);
        let (loc_a, loc_b) = (others[0], others[1]);

        train.push(EditRecord {
            subject: entity.clone(),
            prompt: rel.prompt(0, entity),
            target: counterfactual.clone(),
            rephrase_prompt: rel.prompt(1, entity),
            locality_prompts: vec![
                world.relations[loc_a].prompt(0, entity),
                world.relations[loc_b].prompt(0, entity),
            ],
        });
        eval.push(EvalRecord {
            subject: entity.clone(),
            prompt: rel.prompt(0, entity),
            target: counterfactual,
            ground_truth: Some(truth.to_string()),
            generality: rel.prompt(1, entity),
            locality: LocalityProbe {
                prompt: world.relations[loc_a].prompt(1, entity),
                target: world.fact(e, loc_a).to_string(),
            },
        });
    }
    for r in &train {
        r.validate()?;
    }
    for r in &eval {
        r.validate()?;
    }
    Ok((train, eval))
}

/// Held-out completion tasks over entities outside `exclude`: (prompt,
/// expected object) pairs drawn from true facts.
pub fn make_holdout_tasks(
    world: &FactWorld,
    exclude: &[String],
    n_tasks: usize,
    seed: u64,
) -> Result<Vec<(String, String)>> {
    let excluded: std::collections::HashSet<&str> = exclude.iter().map(|s| s.as_str()).collect();
    let candidates: Vec<usize> = (0..world.entities.len())
        .filter(|&e| !excluded.contains(world.entities[e].as_str()))
        .collect();
    if candidates.is_empty() {
        return Err(KbError::InvalidArgument("no entities left outside the edit scope".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x517cc1b727220a95);
    let mut tasks = Vec::with_capacity(n_tasks);
    for _ in 0..n_tasks {
        let e = candidates[rng.gen_range(0..candidates.len())];
        let r = rng.gen_range(0..world.relations.len());
        let t = rng.gen_range(0..world.relations[r].templates.len());
        tasks.push((
            world.relations[r].prompt(t, &world.entities[e]),
            world.fact(e, r).to_string(),
        ));
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests;
