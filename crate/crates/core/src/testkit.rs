//! Independent reference implementations used only by test suites, kept
//! deliberately separate from the production paths they verify.
//! Enabled by the `testkit` feature; never part of a normal build.

use crate::data::EvalRecord;
use crate::editor::Hypernetwork;
use crate::error::Result;
use crate::model::MicroLm;
use crate::scope::EditRecord;
use crate::tensor::{DiffTensor, Tape, TensorId};
use crate::train::EditTrainer;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Full O(n*m) Levenshtein table, no row reuse.
pub fn levenshtein_table(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in dp.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        dp[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            dp[i][j] = (dp[i - 1][j] + 1)
                .min(dp[i][j - 1] + 1)
                .min(dp[i - 1][j - 1] + cost);
        }
    }
    dp[a.len()][b.len()]
}

/// Brute-force weighted 2-/3-gram entropy in bits: count n-grams into a
/// sorted map, normalize by the total count, sum -f log2 f.
pub fn ngram_fluency_reference(tokens: &[u32]) -> f64 {
    let entropy = |n: usize| -> f64 {
        let mut counts: std::collections::BTreeMap<Vec<u32>, usize> = Default::default();
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
        let total: usize = counts.values().sum();
        let mut h = 0.0;
        for &c in counts.values() {
            let f = c as f64 / total as f64;
            h -= f * f.log2();
        }
        h
    };
    (2.0 / 3.0) * entropy(2) + (4.0 / 3.0) * entropy(3)
}

/// Central finite differences of a black-box scalar function, one parameter
/// vector at a time.
pub fn central_difference<F>(f: F, at: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = vec![0.0; at.len()];
    let mut x = at.to_vec();
    for i in 0..at.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x);
        x[i] = orig - step;
        let minus = f(&x);
        x[i] = orig;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// A tiny random model + record set for gradient-fidelity checks:
/// 2 layers, d=16, one edit record over a toy vocabulary.
pub fn random_grad_check_instance(seed: u64) -> Result<(MicroLm, Vec<EditRecord>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subjects = ["Baru Ketim", "Zola Marn", "Rilo Vasq", "Neko Tada"];
    let objects = ["Parvin", "Okava", "baker", "sailor", "teal", "amber"];
    let words: Vec<String> = [
        "The", "birthplace", "of", "is", "occupation", "favorite", "color", "was", "born",
        "in", ".", "Baru", "Ketim", "Zola", "Marn", "Rilo", "Vasq", "Neko", "Tada", "Parvin",
        "Okava", "baker", "sailor", "teal", "amber",
    ]
    .map(String::from)
    .to_vec();
    let tok = crate::model::Tokenizer::build(words)?;
    let cfg = crate::model::ModelConfig::new(2, 16, 2, tok.vocab_size(), 24);
    let mut model = MicroLm::new(cfg, tok, seed)?;
    // Scale the stack up from the cold-start init so layer norms see
    // normally-sized activations, but keep the unembedding small so the
    // cross-entropy stays modest; both keep finite differences well
    // conditioned.
    for p in model.params_mut() {
        for v in p.values_mut() {
            *v *= 20.0;
        }
        p.snap_to_f32();
    }

    let subject = subjects[rng.gen_range(0..subjects.len())];
    let target = objects[rng.gen_range(0..objects.len())];
    let records = vec![EditRecord {
        subject: subject.to_string(),
        prompt: format!("The birthplace of {subject} is"),
        target: target.to_string(),
        rephrase_prompt: format!("{subject} was born in"),
        locality_prompts: vec![
            format!("The occupation of {subject} is"),
            format!("The favorite color of {subject} is"),
        ],
    }];
    Ok((model, records))
}

/// Max relative error between tape gradients and central differences of the
/// full composite loss with respect to a randomized hypernetwork, on the
/// given instance.
pub fn composite_loss_grad_error(
    model: &MicroLm,
    records: &[EditRecord],
    layer: usize,
    lambda: f64,
    seed: u64,
    step: f64,
) -> Result<f64> {
    composite_loss_grad_error_scaled(model, records, layer, lambda, seed, step, 0.05)
}

pub fn composite_loss_grad_error_scaled(
    model: &MicroLm,
    records: &[EditRecord],
    layer: usize,
    lambda: f64,
    seed: u64,
    step: f64,
    perturbation: f64,
) -> Result<f64> {
    let trainer = EditTrainer::new(model, records, layer, 3)?;
    let mut h = Hypernetwork::identity_linear(layer, model.config().d_model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in h.params_mut() {
        for v in p.values_mut() {
            *v += rng.gen_range(-perturbation..perturbation);
        }
        p.snap_to_f32();
    }
    let params = h.params_cloned();
    let batch: Vec<usize> = (0..records.len()).collect();
    crate::tensor::grad_check(
        |tape: &mut Tape, ids: &[TensorId]| trainer.loss_graph_standalone(tape, &h, ids, &batch, lambda),
        &params,
        step,
    )
}

/// As `composite_loss_grad_error` but reporting the worst element:
/// (relative error, analytic, central difference).
pub fn composite_loss_grad_worst(
    model: &MicroLm,
    records: &[EditRecord],
    layer: usize,
    lambda: f64,
    seed: u64,
    step: f64,
) -> Result<(f64, f64, f64)> {
    let trainer = EditTrainer::new(model, records, layer, 3)?;
    let mut h = Hypernetwork::identity_linear(layer, model.config().d_model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in h.params_mut() {
        for v in p.values_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
        p.snap_to_f32();
    }
    let params = h.params_cloned();
    let batch: Vec<usize> = (0..records.len()).collect();

    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params
        .iter()
        .map(|p| tape.param(p.shape().to_vec(), p.values().to_vec()))
        .collect::<Result<_>>()?;
    let loss = trainer.loss_graph_standalone(&mut tape, &h, &ids, &batch, lambda)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| tape.grad(id).to_vec()).collect();

    let eval = |vals: &[Vec<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = params
            .iter()
            .zip(vals)
            .map(|(p, v)| tape.param(p.shape().to_vec(), v.clone()))
            .collect::<Result<_>>()?;
        let loss = trainer.loss_graph_standalone(&mut tape, &h, &ids, &batch, lambda)?;
        Ok(tape.values(loss)[0])
    };
    let base: Vec<Vec<f64>> = params.iter().map(|p| p.values().to_vec()).collect();
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    for pi in 0..base.len() {
        for j in 0..base[pi].len() {
            let mut plus = base.clone();
            plus[pi][j] += step;
            let mut minus = base.clone();
            minus[pi][j] -= step;
            let cd = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let a = analytic[pi][j];
            let err = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-12);
            if err > worst.0 {
                worst = (err, a, cd);
            }
        }
    }
    Ok(worst)
}

/// Reference AdamW over flat vectors, independent of the optimizer module.
pub struct ReferenceAdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl ReferenceAdamW {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, w: &mut [f64], g: &[f64], lr: f64, wd: f64) {
        self.t += 1;
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        for i in 0..w.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = self.m[i] / (1.0 - b1.powi(self.t));
            let vh = self.v[i] / (1.0 - b2.powi(self.t));
            w[i] -= lr * (mh / (vh.sqrt() + eps) + wd * w[i]);
        }
    }
}

/// Sampled finite-difference check of model-parameter gradients on a
/// next-token loss: checks `per_tensor` random elements from every
/// parameter tensor.
pub fn pretrain_grad_error_sampled(
    model: &MicroLm,
    tokens: &[u32],
    per_tensor: usize,
    step: f64,
    seed: u64,
) -> Result<f64> {
    let targets: Vec<Option<usize>> = (0..tokens.len())
        .map(|i| if i + 1 < tokens.len() { Some(tokens[i + 1] as usize) } else { None })
        .collect();

    let eval = |params: &[DiffTensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let pids: Vec<TensorId> = params
            .iter()
            .map(|p| tape.constant(p.shape().to_vec(), p.values().to_vec()))
            .collect::<Result<_>>()?;
        let g = model.build_graph(&mut tape, &pids, &[tokens], None)?;
        let loss = tape.cross_entropy(g.logits, targets.clone())?;
        Ok(tape.values(loss)[0])
    };

    // analytic gradients
    let mut tape = Tape::new();
    let pids = model.push_params(&mut tape, true)?;
    let g = model.build_graph(&mut tape, &pids, &[tokens], None)?;
    let loss = tape.cross_entropy(g.logits, targets.clone())?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = pids.iter().map(|&id| tape.grad(id).to_vec()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<DiffTensor> = model.params().to_vec();
    let mut max_err: f64 = 0.0;
    for ti in 0..base.len() {
        for _ in 0..per_tensor {
            let j = rng.gen_range(0..base[ti].numel());
            let mut plus = base.clone();
            plus[ti].values_mut()[j] += step;
            let mut minus = base.clone();
            minus[ti].values_mut()[j] -= step;
            let cd = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let a = analytic[ti][j];
            // Elements below the finite-difference resolution floor cannot be
            // compared relatively; a real backward bug shows up at gradient
            // scale, far above this.
            let denom = a.abs().max(cd.abs()).max(1e-3);
            max_err = max_err.max((a - cd).abs() / denom);
        }
    }
    Ok(max_err)
}

/// Deterministic evaluation records over a trained world, for metric tests.
pub fn eval_record(subject: &str, prompt: &str, target: &str, generality: &str, loc_prompt: &str, loc_target: &str) -> EvalRecord {
    EvalRecord {
        subject: subject.to_string(),
        prompt: prompt.to_string(),
        target: target.to_string(),
        ground_truth: None,
        generality: generality.to_string(),
        locality: crate::data::LocalityProbe {
            prompt: loc_prompt.to_string(),
            target: loc_target.to_string(),
        },
    }
}
