//! Next-token pretraining of the micro-LM on the synthetic corpus.
//!
//! Sentences are bucketed by exact token length inside each batch so
//! equal-length sequences share one packed forward pass with no padding.
//! Every 20th sentence is held out to report cross-entropy the optimizer
//! never saw.

use crate::error::{KbError, Result};
use crate::model::{MicroLm, ModelConfig, Tokenizer};
use crate::tensor::{adamw_step, AdamState, Tape};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainOpts {
    /// Optimizer steps.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for PretrainOpts {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            lr: 2e-3,
            weight_decay: 0.0,
            seed: 0,
            log_every: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub struct PretrainOutcome {
    pub model: MicroLm,
    pub final_train_loss: f64,
    /// Mean next-token cross-entropy on held-out sentences (nats). Should sit
    /// below ln(vocab_size), the uniform baseline.
    pub holdout_loss: f64,
    pub log: Vec<PretrainLog>,
}

/// Mean next-token cross-entropy over packed same-length groups.
fn corpus_loss(model: &MicroLm, tape: &mut Tape, pids: &[crate::tensor::TensorId], groups: &[Vec<&[u32]>]) -> Result<(crate::tensor::TensorId, usize)> {
    let mut terms = Vec::new();
    let mut weights = Vec::new();
    for group in groups {
        if group.is_empty() {
            continue;
        }
        let n = group[0].len();
        let g = model.build_graph(tape, pids, group, None)?;
        let mut targets: Vec<Option<usize>> = Vec::with_capacity(group.len() * n);
        for seq in group {
            for i in 0..n {
                targets.push(if i + 1 < n { Some(seq[i + 1] as usize) } else { None });
            }
        }
        let positions = group.len() * (n - 1);
        terms.push(tape.cross_entropy(g.logits, targets)?);
        weights.push(positions);
    }
    if terms.is_empty() {
        return Err(KbError::InvalidArgument("no sequences to score".into()));
    }
    let total_positions: usize = weights.iter().sum();
    let mut acc = None;
    for (term, w) in terms.into_iter().zip(weights) {
        let scaled = tape.scale(term, w as f64 / total_positions as f64)?;
        acc = Some(match acc {
            None => scaled,
            Some(a) => tape.add(a, scaled)?,
        });
    }
    Ok((acc.unwrap(), total_positions))
}

fn bucket_by_length<'a>(seqs: impl Iterator<Item = &'a Vec<u32>>) -> Vec<Vec<&'a [u32]>> {
    let mut buckets: BTreeMap<usize, Vec<&[u32]>> = BTreeMap::new();
    for s in seqs {
        buckets.entry(s.len()).or_default().push(s.as_slice());
    }
    buckets.into_values().collect()
}

/// Values-only mean cross-entropy of `seqs` under `model`.
pub fn sequence_cross_entropy(model: &MicroLm, seqs: &[Vec<u32>]) -> Result<f64> {
    let mut tape = Tape::new();
    let pids = model.push_params(&mut tape, false)?;
    let groups = bucket_by_length(seqs.iter());
    let (loss, _) = corpus_loss(model, &mut tape, &pids, &groups)?;
    Ok(tape.values(loss)[0])
}

pub fn pretrain_lm(
    corpus: &[String],
    mut config: ModelConfig,
    tokenizer: Tokenizer,
    opts: &PretrainOpts,
) -> Result<PretrainOutcome> {
    if corpus.is_empty() {
        return Err(KbError::InvalidArgument("empty corpus".into()));
    }
    if opts.batch_size == 0 {
        return Err(KbError::InvalidArgument("batch_size must be >= 1".into()));
    }
    config.vocab_size = tokenizer.vocab_size();
    config.validate()?;

    let probe = MicroLm::new(config.clone(), tokenizer.clone(), opts.seed)?;
    let mut encoded = Vec::with_capacity(corpus.len());
    for sentence in corpus {
        let enc = probe.tokenize(sentence)?;
        if enc.ids.len() < 2 {
            return Err(KbError::InvalidArgument(format!(
                "sentence too short to train on: {sentence:?}"
            )));
        }
        encoded.push(enc.ids);
    }
    drop(probe);

    // Deterministic holdout split: every 20th sentence.
    let mut train_seqs = Vec::new();
    let mut holdout = Vec::new();
    for (i, seq) in encoded.into_iter().enumerate() {
        if i % 20 == 19 {
            holdout.push(seq);
        } else {
            train_seqs.push(seq);
        }
    }
    if holdout.is_empty() {
        holdout.push(train_seqs[train_seqs.len() - 1].clone());
    }
    if train_seqs.is_empty() {
        return Err(KbError::InvalidArgument("corpus too small to split".into()));
    }

    let mut model = MicroLm::new(config, tokenizer, opts.seed)?;
    let mut state = AdamState::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..train_seqs.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut log = Vec::new();
    let mut final_train_loss = f64::NAN;

    for step in 0..opts.steps {
        let mut batch_idx = Vec::with_capacity(opts.batch_size);
        for _ in 0..opts.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch_idx.push(order[cursor]);
            cursor += 1;
        }
        let groups = bucket_by_length(batch_idx.iter().map(|&i| &train_seqs[i]));

        let mut tape = Tape::new();
        let pids = model.push_params(&mut tape, true)?;
        let (loss_id, _) = corpus_loss(&model, &mut tape, &pids, &groups)?;
        let loss = tape.values(loss_id)[0];
        if !loss.is_finite() {
            return Err(KbError::Diverged(format!("non-finite loss at step {step}")));
        }
        tape.backward(loss_id)?;
        for (p, &pid) in model.params_mut().iter_mut().zip(&pids) {
            let g = tape.grad(pid).to_vec();
            p.zero_grad();
            p.accumulate_grad(&g)?;
        }
        drop(tape);

        let lr = opts.lr * (opts.steps - step) as f64 / opts.steps as f64;
        adamw_step(model.params_mut(), &mut state, lr, opts.weight_decay)?;
        final_train_loss = loss;
        if opts.log_every > 0 && (step % opts.log_every == 0 || step + 1 == opts.steps) {
            log.push(PretrainLog { step, loss, lr });
        }
    }

    model.snap_params_to_f32();
    let holdout_loss = sequence_cross_entropy(&model, &holdout)?;
    if final_train_loss.is_nan() {
        final_train_loss = holdout_loss;
    }
    Ok(PretrainOutcome { model, final_train_loss, holdout_loss, log })
}
