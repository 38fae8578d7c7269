//! Quantitative instruments: reliability/generality/locality and their mean,
//! n-gram fluency, per-layer information gain, the cosine-similarity probe,
//! and the knowledge-block swap experiment.

use crate::data::EvalRecord;
use crate::editor::{EditorBundle, Hypernetwork};
use crate::error::{KbError, Result};
use crate::model::{MicroLm, Tokenizer};
use crate::tensor::Mat;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGain {
    pub layer: usize,
    pub delta_i: f64,
}

/// Aggregate evaluation of one editor bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub reliability: f64,
    pub generality: f64,
    pub locality: f64,
    pub edit_performance: f64,
    pub fluency: f64,
    pub info_gain: Vec<LayerGain>,
    pub n_edits: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("reliability,{}\n", self.reliability));
        out.push_str(&format!("generality,{}\n", self.generality));
        out.push_str(&format!("locality,{}\n", self.locality));
        out.push_str(&format!("edit_performance,{}\n", self.edit_performance));
        out.push_str(&format!("fluency,{}\n", self.fluency));
        out.push_str(&format!("n_edits,{}\n", self.n_edits));
        for g in &self.info_gain {
            out.push_str(&format!("info_gain_layer_{},{}\n", g.layer, g.delta_i));
        }
        out
    }

    /// Per-layer curve as TSV for plotting.
    pub fn info_gain_tsv(&self) -> String {
        let mut out = String::from("layer\tdelta_i\n");
        for g in &self.info_gain {
            out.push_str(&format!("{}\t{}\n", g.layer, g.delta_i));
        }
        out
    }
}

fn require_nonempty<T>(set: &[T], what: &str) -> Result<()> {
    if set.is_empty() {
        return Err(KbError::Eval(format!("empty {what} set")));
    }
    Ok(())
}

/// Exact-match rule: case-fold, trim, compare the first `len(target tokens)`
/// generated tokens' surface to the target's normalized surface.
fn matches_target(generated: &str, target: &str) -> bool {
    let norm = |s: &str| Tokenizer::normalize(s).trim().to_ascii_lowercase();
    norm(generated) == norm(target)
}

fn target_token_count(model: &MicroLm, target: &str) -> Result<usize> {
    Ok(model.tokenizer().encode(target)?.ids.len())
}

/// Fraction of records whose edited greedy decode of the edit prompt
/// reproduces the target.
pub fn reliability(bundle: &EditorBundle, evals: &[EvalRecord]) -> Result<f64> {
    require_nonempty(evals, "evaluation")?;
    let model = bundle.base();
    let mut hits = 0usize;
    for r in evals {
        let k = target_token_count(model, &r.target)?;
        let gen = bundle.edited_generate(&r.prompt, k)?;
        if matches_target(&gen, &r.target) {
            hits += 1;
        }
    }
    Ok(hits as f64 / evals.len() as f64)
}

/// As reliability, but decoding the rephrased prompt against the same target.
pub fn generality(bundle: &EditorBundle, evals: &[EvalRecord]) -> Result<f64> {
    require_nonempty(evals, "evaluation")?;
    let model = bundle.base();
    let mut hits = 0usize;
    for r in evals {
        let k = target_token_count(model, &r.target)?;
        let gen = bundle.edited_generate(&r.generality, k)?;
        if matches_target(&gen, &r.target) {
            hits += 1;
        }
    }
    Ok(hits as f64 / evals.len() as f64)
}

/// Fraction of locality prompts where the edited and base models decode the
/// same continuation (compared against the base model's output, not the
/// dataset's stored answer).
pub fn locality(bundle: &EditorBundle, base: &MicroLm, evals: &[EvalRecord]) -> Result<f64> {
    require_nonempty(evals, "evaluation")?;
    let mut hits = 0usize;
    for r in evals {
        let k = target_token_count(base, &r.locality.target)?.max(5);
        let edited = bundle.edited_generate(&r.locality.prompt, k)?;
        let plain = base.greedy_decode(&r.locality.prompt, k, None)?;
        if edited == plain {
            hits += 1;
        }
    }
    Ok(hits as f64 / evals.len() as f64)
}

/// Arithmetic mean of reliability, generality, and locality. Accepts either
/// fractions in [0,1] or percents in [0,100]; a value above 100 or below 0 is
/// rejected as a scale mix-up.
pub fn edit_performance(rel: f64, gen: f64, loc: f64) -> Result<f64> {
    for v in [rel, gen, loc] {
        if !(0.0..=100.0).contains(&v) {
            return Err(KbError::Eval(format!(
                "metric {v} outside [0,1] and [0,100]; inputs look mixed-scale"
            )));
        }
    }
    Ok((rel + gen + loc) / 3.0)
}

// ── Fluency ─────────────────────────────────────────────────────────────

fn ngram_entropy_bits(tokens: &[u32], n: usize) -> f64 {
    let mut counts: std::collections::HashMap<&[u32], usize> = std::collections::HashMap::new();
    let total = tokens.len() + 1 - n;
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    let total = total as f64;
    -counts
        .values()
        .map(|&c| {
            let f = c as f64 / total;
            f * f.log2()
        })
        .sum::<f64>()
}

/// Weighted 2-/3-gram entropy of the text under the given tokenization:
/// `(2/3) H2 + (4/3) H3`, entropies in bits over relative n-gram
/// frequencies. Higher means less degenerate repetition.
pub fn fluency(text: &str, tokenizer: &Tokenizer) -> Result<f64> {
    let ids = tokenizer.encode(text)?.ids;
    fluency_of_tokens(&ids)
}

pub fn fluency_of_tokens(ids: &[u32]) -> Result<f64> {
    if ids.len() < 3 {
        return Err(KbError::Eval(format!(
            "fluency needs >= 3 tokens, got {}",
            ids.len()
        )));
    }
    Ok((2.0 / 3.0) * ngram_entropy_bits(ids, 2) + (4.0 / 3.0) * ngram_entropy_bits(ids, 3))
}

// ── Information gain ────────────────────────────────────────────────────

fn mean_neg_log2_likelihood(
    model: &MicroLm,
    h: Option<&Hypernetwork>,
    layer: usize,
    evals: &[EvalRecord],
) -> Result<f64> {
    let mut session = model.session()?;
    let mut total = 0.0;
    let mut count = 0usize;
    for r in evals {
        let prompt_ids = model.tokenize(&r.prompt)?.ids;
        let target_ids = model.tokenizer().encode(&r.target)?.ids;
        let mut tokens = prompt_ids.clone();
        tokens.extend_from_slice(&target_ids);
        if tokens.len() > model.config().max_seq {
            return Err(KbError::Eval(format!(
                "prompt+target too long for {:?}",
                r.subject
            )));
        }
        let trace = match h {
            None => session.forward(&tokens)?,
            Some(h) => {
                let folded: String = r.prompt.chars().map(|c| c.to_ascii_lowercase()).collect();
                let needle: String = r.subject.chars().map(|c| c.to_ascii_lowercase()).collect();
                let pos = folded.find(&needle).ok_or_else(|| {
                    KbError::Eval(format!("subject {:?} not in prompt", r.subject))
                })?;
                let enc = model.tokenize(&r.prompt)?;
                let (span, _) = model.map_char_span(&enc, pos, pos + needle.len())?;
                let base = session.forward(&tokens)?;
                let resid = base.residual_at(layer);
                let d = model.config().d_model;
                let mut data = Vec::with_capacity(span.len() * d);
                for row in span.start..span.end {
                    data.extend_from_slice(resid.row(row));
                }
                let kb = Mat::new(span.len(), d, data);
                let new_kb = h.generate_kb(&kb)?;
                session.forward_with_replacements(&tokens, layer, &[(span.start, &new_kb)])?
            }
        };
        for (k, &t) in target_ids.iter().enumerate() {
            let row = trace.logits.row(prompt_ids.len() - 1 + k);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            let log_p = row[t as usize] - lse;
            total -= log_p / std::f64::consts::LN_2;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Information gain of replacing the knowledge block at `layer` with the
/// hypernetwork's output: mean per-token negative log2-likelihood of the
/// targets under the original KB minus the same under the replaced KB.
/// Positive means the new KB helps.
pub fn info_gain(
    model: &MicroLm,
    h: &Hypernetwork,
    evals: &[EvalRecord],
    layer: usize,
) -> Result<f64> {
    require_nonempty(evals, "evaluation")?;
    let h_orig = mean_neg_log2_likelihood(model, None, layer, evals)?;
    let h_repl = mean_neg_log2_likelihood(model, Some(h), layer, evals)?;
    Ok(h_orig - h_repl)
}

/// Per-layer information gain for hypernetworks trained at each layer.
pub fn info_gain_sweep(
    model: &MicroLm,
    per_layer: &[(usize, Hypernetwork)],
    evals: &[EvalRecord],
) -> Result<Vec<LayerGain>> {
    require_nonempty(per_layer, "hypernetwork")?;
    let mut out = Vec::with_capacity(per_layer.len());
    for (layer, h) in per_layer {
        out.push(LayerGain { layer: *layer, delta_i: info_gain(model, h, evals, *layer)? });
    }
    Ok(out)
}

// ── Probe ───────────────────────────────────────────────────────────────

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// The probe's selection rule: pick the knowledge representation with the
/// higher cosine similarity to the entity representation; an exact tie is
/// conservatively wrong.
pub fn probe_pick_is_correct(entity: &[f64], factual: &[f64], counterfactual: &[f64]) -> bool {
    cosine(entity, factual) > cosine(entity, counterfactual)
}

/// One probe item: an entity plus one factual and one counterfactual
/// statement about it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeCase {
    pub entity: String,
    pub factual: String,
    pub counterfactual: String,
}

fn mean_pooled_entity_rep(model: &MicroLm, entity: &str, layer: usize) -> Result<Vec<f64>> {
    let enc = model.tokenize(entity)?;
    let trace = model.forward(&enc.ids)?;
    let resid = trace.residual_at(layer);
    let d = model.config().d_model;
    let mut pooled = vec![0.0; d];
    for r in 0..resid.rows {
        for c in 0..d {
            pooled[c] += resid.row(r)[c];
        }
    }
    for v in &mut pooled {
        *v /= resid.rows as f64;
    }
    Ok(pooled)
}

fn last_token_rep(model: &MicroLm, text: &str, layer: usize) -> Result<Vec<f64>> {
    let enc = model.tokenize(text)?;
    let trace = model.forward(&enc.ids)?;
    let resid = trace.residual_at(layer);
    Ok(resid.row(resid.rows - 1).to_vec())
}

/// Fraction of probe cases where the entity representation sits closer (by
/// cosine) to the factual statement's last-token state than to the
/// counterfactual's, at `layer`.
pub fn probe_accuracy(model: &MicroLm, probes: &[ProbeCase], layer: usize) -> Result<f64> {
    require_nonempty(probes, "probe")?;
    let mut correct = 0usize;
    for p in probes {
        let e = mean_pooled_entity_rep(model, &p.entity, layer)?;
        let f = last_token_rep(model, &p.factual, layer)?;
        let c = last_token_rep(model, &p.counterfactual, layer)?;
        if probe_pick_is_correct(&e, &f, &c) {
            correct += 1;
        }
    }
    Ok(correct as f64 / probes.len() as f64)
}

// ── Knowledge-block swap ────────────────────────────────────────────────

/// One swap case: replace entity A's knowledge block in `prompt_a` with
/// entity B's block taken from `prompt_b`, then ask whether `target_token`
/// (B's attribute) ranks higher than before.
#[derive(Debug, Clone)]
pub struct KbSwapCase {
    pub prompt_a: String,
    pub entity_a: (usize, usize),
    pub prompt_b: String,
    pub entity_b: (usize, usize),
    pub target_token: u32,
}

fn rank_of(logits_row: &[f64], token: u32) -> usize {
    let v = logits_row[token as usize];
    1 + logits_row.iter().filter(|&&x| x > v).count()
}

/// Fraction of cases where the target attribute token's rank strictly
/// improves after the swap.
pub fn kb_swap_experiment(model: &MicroLm, cases: &[KbSwapCase], layer: usize) -> Result<f64> {
    require_nonempty(cases, "swap")?;
    let mut improved = 0usize;
    let mut session = model.session()?;
    for case in cases {
        if case.target_token as usize >= model.config().vocab_size {
            return Err(KbError::Eval(format!(
                "attribute token {} out of vocabulary",
                case.target_token
            )));
        }
        let (span_b, kb_b) = model.entity_kb(&case.prompt_b, case.entity_b, layer)?;
        let enc_a = model.tokenize(&case.prompt_a)?;
        let (span_a, _) = model.map_char_span(&enc_a, case.entity_a.0, case.entity_a.1)?;
        if span_a.len() != span_b.len() {
            return Err(KbError::Eval(format!(
                "entity token spans differ: {} vs {}",
                span_a.len(),
                span_b.len()
            )));
        }
        let base = session.forward(&enc_a.ids)?;
        let swapped = session.forward_with_replacements(&enc_a.ids, layer, &[(span_a.start, &kb_b)])?;
        let n = enc_a.ids.len();
        let before = rank_of(base.logits.row(n - 1), case.target_token);
        let after = rank_of(swapped.logits.row(n - 1), case.target_token);
        if after < before {
            improved += 1;
        }
    }
    Ok(improved as f64 / cases.len() as f64)
}

// ── General-ability preservation ────────────────────────────────────────

/// Accuracy of greedy completions on held-out tasks, for the base model and
/// the edited bundle. Tasks must be disjoint from the edit scope; any prompt
/// that trips the scope indicator is rejected.
pub fn general_ability_check(
    base: &MicroLm,
    bundle: &EditorBundle,
    tasks: &[(String, String)],
) -> Result<(f64, f64)> {
    require_nonempty(tasks, "task")?;
    for (prompt, _) in tasks {
        if !bundle.scope().match_prompt(prompt).is_empty() {
            return Err(KbError::Eval(format!(
                "task prompt overlaps the edit scope: {prompt:?}"
            )));
        }
    }
    let mut base_hits = 0usize;
    let mut edited_hits = 0usize;
    for (prompt, expected) in tasks {
        let k = target_token_count(base, expected)?;
        let plain = base.greedy_decode(prompt, k, None)?;
        let edited = bundle.edited_generate(prompt, k)?;
        if matches_target(&plain, expected) {
            base_hits += 1;
        }
        if matches_target(&edited, expected) {
            edited_hits += 1;
        }
    }
    let n = tasks.len() as f64;
    Ok((base_hits as f64 / n, edited_hits as f64 / n))
}

// ── Experiment-set construction over a fact world ───────────────────────

/// Probe cases: per case, one true sentence about an entity and the same
/// sentence with the object swapped for a wrong one from the pool.
pub fn build_probe_cases(
    world: &crate::data::FactWorld,
    n: usize,
    seed: u64,
) -> Result<Vec<ProbeCase>> {
    use rand::prelude::*;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x243f6a8885a308d3);
    let mut cases = Vec::with_capacity(n);
    for _ in 0..n {
        let e = rng.gen_range(0..world.entities.len());
        let r = rng.gen_range(0..world.relations.len());
        let rel = &world.relations[r];
        let t = rng.gen_range(0..rel.templates.len());
        let truth = world.fact(e, r);
        let wrong = loop {
            let cand = &rel.objects[rng.gen_range(0..rel.objects.len())];
            if cand != truth {
                break cand.clone();
            }
        };
        cases.push(ProbeCase {
            entity: world.entities[e].clone(),
            factual: rel.sentence(t, &world.entities[e], truth),
            counterfactual: rel.sentence(t, &world.entities[e], &wrong),
        });
    }
    Ok(cases)
}

/// Swap cases over the first relation's first template: replace entity A's
/// knowledge block with entity B's and watch the rank of B's true object.
pub fn build_swap_cases(
    world: &crate::data::FactWorld,
    tokenizer: &Tokenizer,
    n: usize,
    seed: u64,
) -> Result<Vec<KbSwapCase>> {
    use rand::prelude::*;
    if world.entities.len() < 2 {
        return Err(KbError::Eval("need at least two entities to swap".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x13198a2e03707344);
    let rel = &world.relations[0];
    let mut cases = Vec::with_capacity(n);
    for _ in 0..n {
        let a = rng.gen_range(0..world.entities.len());
        let b = loop {
            let cand = rng.gen_range(0..world.entities.len());
            if cand != a {
                break cand;
            }
        };
        let (ea, eb) = (&world.entities[a], &world.entities[b]);
        let prompt_a = rel.prompt(0, ea);
        let prompt_b = rel.prompt(0, eb);
        let pa = prompt_a.find(ea.as_str()).expect("template embeds entity");
        let pb = prompt_b.find(eb.as_str()).expect("template embeds entity");
        let object_b = world.fact(b, 0);
        let first_token = tokenizer
            .encode(object_b)?
            .ids
            .first()
            .copied()
            .ok_or_else(|| KbError::Eval(format!("empty object {object_b:?}")))?;
        cases.push(KbSwapCase {
            entity_a: (pa, pa + ea.len()),
            prompt_a,
            entity_b: (pb, pb + eb.len()),
            prompt_b,
            target_token: first_token,
        });
    }
    Ok(cases)
}

// ── Report assembly ─────────────────────────────────────────────────────

/// Run the three headline metrics plus fluency of edited generations.
pub fn evaluate_bundle(
    bundle: &EditorBundle,
    evals: &[EvalRecord],
    fluency_new_tokens: usize,
) -> Result<EvalReport> {
    let base = bundle.base();
    let rel = reliability(bundle, evals)?;
    let gen = generality(bundle, evals)?;
    let loc = locality(bundle, base, evals)?;
    let ep = edit_performance(rel, gen, loc)?;

    let mut fluencies = Vec::new();
    for r in evals {
        let prompt_len = base.tokenize(&r.prompt)?.ids.len();
        let budget = base
            .config()
            .max_seq
            .saturating_sub(prompt_len)
            .min(fluency_new_tokens);
        if budget < 3 {
            continue;
        }
        let text = bundle.edited_generate(&r.prompt, budget)?;
        if let Ok(f) = fluency(&text, base.tokenizer()) {
            fluencies.push(f);
        }
    }
    let fluency_mean = if fluencies.is_empty() {
        0.0
    } else {
        fluencies.iter().sum::<f64>() / fluencies.len() as f64
    };

    Ok(EvalReport {
        reliability: rel,
        generality: gen,
        locality: loc,
        edit_performance: ep,
        fluency: fluency_mean,
        info_gain: Vec::new(),
        n_edits: evals.len(),
    })
}

#[cfg(test)]
mod tests;
