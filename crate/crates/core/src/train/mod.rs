//! Hypernetwork training under the composite edit/rephrase/locality loss,
//! plus micro-LM pretraining on the synthetic corpus.
//!
//! Per record the loss has three parts, all computed with the frozen base
//! model: mean NLL of the target under replacement for the edit prompt, the
//! same for the rephrase, and the mean KL between replaced and unreplaced
//! next-token distributions over the first few continuation positions of each
//! locality prompt. Total = lambda_edit * (edit + eq) + locality.
//!
//! Everything the frozen model contributes (residual streams at the edit
//! layer, base continuations, base logits) is precomputed once per record, so
//! an optimization step only runs the hypernetwork and the layers above the
//! edit point.

mod presets;
mod pretrain;

pub use presets::{preset, preset_names};
pub use pretrain::{pretrain_lm, PretrainLog, PretrainOpts, PretrainOutcome};

use crate::editor::{Hypernetwork, HypernetworkKind};
use crate::error::{KbError, Result};
use crate::model::{MicroLm, TokenSpan};
use crate::scope::{EditRecord, ScopeIndex};
use crate::tensor::{adamw_step, AdamState, Mat, Tape, TensorId};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    /// Consecutive qualifying epochs before stopping.
    pub patience: usize,
    /// Relative total-loss improvement below which an epoch qualifies.
    pub min_rel_improvement: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self { patience: 1, min_rel_improvement: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_edit: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Continuation positions covered by the locality KL.
    pub kl_horizon: usize,
    pub early_stop: EarlyStop,
    pub seed: u64,
    pub weight_decay: f64,
    pub kind: HypernetworkKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_edit: 1.0,
            max_epochs: 100,
            batch_size: 8,
            lr: 1e-3,
            kl_horizon: 3,
            early_stop: EarlyStop::default(),
            seed: 0,
            weight_decay: 0.0,
            kind: HypernetworkKind::Linear,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 || self.kl_horizon == 0 {
            return Err(KbError::InvalidArgument("config counts must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(KbError::InvalidArgument("lr must be positive".into()));
        }
        if self.lambda_edit < 0.0 {
            return Err(KbError::InvalidArgument("lambda_edit must be >= 0".into()));
        }
        Ok(())
    }
}

/// The three loss terms and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub edit: f64,
    pub eq: f64,
    pub locality: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub edit: f64,
    pub eq: f64,
    pub locality: f64,
    pub total: f64,
    pub edit_accuracy: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub hypernetwork: Hypernetwork,
    pub scope: ScopeIndex,
    pub log: Vec<EpochLog>,
}

// ── Precomputed per-record contexts ─────────────────────────────────────

struct PromptCtx {
    /// Prompt plus teacher-forced target tokens.
    tokens: Vec<u32>,
    /// Base residual stream exiting the edit layer for the full sequence.
    resid: Mat,
    span: TokenSpan,
    /// Next-token targets; `Some` exactly at the rows predicting the target.
    targets: Vec<Option<usize>>,
}

struct LocalityCtx {
    /// Prompt plus the base model's own greedy continuation.
    tokens: Vec<u32>,
    resid: Mat,
    /// Entity span inside the prompt, when present.
    span: Option<TokenSpan>,
    /// Rows whose next-token distributions the KL covers.
    kl_rows: Vec<usize>,
    /// Base logits at those rows.
    base_rows: Mat,
}

struct RecordCtx {
    edit: PromptCtx,
    eq: PromptCtx,
    locality: Vec<LocalityCtx>,
}

fn find_subject_span(model: &MicroLm, prompt: &str, subject: &str) -> Result<Option<TokenSpan>> {
    let folded: String = prompt.chars().map(|c| c.to_ascii_lowercase()).collect();
    let needle: String = subject.chars().map(|c| c.to_ascii_lowercase()).collect();
    match folded.find(&needle) {
        None => Ok(None),
        Some(pos) => {
            let enc = model.tokenize(prompt)?;
            let (span, _) = model.map_char_span(&enc, pos, pos + needle.len())?;
            Ok(Some(span))
        }
    }
}

/// Training engine over a frozen base model: owns the precomputed record
/// contexts and a tape whose prefix holds the model weights as constants.
pub struct EditTrainer<'m> {
    model: &'m MicroLm,
    layer: usize,
    ctxs: Vec<RecordCtx>,
    tape: Tape,
    pids: Vec<TensorId>,
    mark: usize,
}

impl<'m> EditTrainer<'m> {
    pub fn new(model: &'m MicroLm, records: &[EditRecord], layer: usize, kl_horizon: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(KbError::InvalidArgument("no records".into()));
        }
        if layer == 0 || layer > model.config().n_layers {
            return Err(KbError::InvalidArgument(format!(
                "edit layer {} outside 1..={}",
                layer,
                model.config().n_layers
            )));
        }
        if kl_horizon == 0 {
            return Err(KbError::InvalidArgument("kl_horizon must be >= 1".into()));
        }
        for r in records {
            r.validate()?;
            if r.locality_prompts.is_empty() {
                return Err(KbError::Validation(format!(
                    "record {:?} has no locality prompts",
                    r.subject
                )));
            }
        }

        let mut session = model.session()?;
        let mut ctxs = Vec::with_capacity(records.len());
        for r in records {
            let edit = Self::prompt_ctx(model, &mut session, &r.prompt, &r.target, &r.subject, layer)?;
            let eq = Self::prompt_ctx(model, &mut session, &r.rephrase_prompt, &r.target, &r.subject, layer)?;
            let mut locality = Vec::with_capacity(r.locality_prompts.len());
            for loc in &r.locality_prompts {
                locality.push(Self::locality_ctx(model, &mut session, loc, &r.subject, layer, kl_horizon)?);
            }
            ctxs.push(RecordCtx { edit, eq, locality });
        }

        let mut tape = Tape::new();
        let pids = model.push_params(&mut tape, false)?;
        let mark = tape.len();
        Ok(Self { model, layer, ctxs, tape, pids, mark })
    }

    fn prompt_ctx(
        model: &MicroLm,
        session: &mut crate::model::Session<'_>,
        prompt: &str,
        target: &str,
        subject: &str,
        layer: usize,
    ) -> Result<PromptCtx> {
        let span = find_subject_span(model, prompt, subject)?.ok_or_else(|| {
            KbError::Validation(format!("entity {subject:?} not found in prompt {prompt:?}"))
        })?;
        let prompt_ids = model.tokenize(prompt)?.ids;
        let target_ids = model.tokenizer().encode(target)?.ids;
        let mut tokens = prompt_ids.clone();
        tokens.extend_from_slice(&target_ids);
        if tokens.len() > model.config().max_seq {
            return Err(KbError::Validation(format!(
                "prompt+target tokenizes to {} tokens, max_seq is {}",
                tokens.len(),
                model.config().max_seq
            )));
        }
        let trace = session.forward(&tokens)?;
        let resid = trace.residual_at(layer).clone();
        let mut targets = vec![None; tokens.len()];
        for (k, &t) in target_ids.iter().enumerate() {
            targets[prompt_ids.len() - 1 + k] = Some(t as usize);
        }
        Ok(PromptCtx { tokens, resid, span, targets })
    }

    fn locality_ctx(
        model: &MicroLm,
        session: &mut crate::model::Session<'_>,
        prompt: &str,
        subject: &str,
        layer: usize,
        kl_horizon: usize,
    ) -> Result<LocalityCtx> {
        let span = find_subject_span(model, prompt, subject)?;
        let prompt_ids = model.tokenize(prompt)?.ids;
        let prompt_len = prompt_ids.len();
        let tokens = session.greedy_extend(prompt_ids, kl_horizon, None, &[])?;
        let trace = session.forward(&tokens)?;
        let resid = trace.residual_at(layer).clone();
        // Rows predicting each continuation token; at minimum the row
        // predicting the first continuation exists.
        let horizon = (tokens.len() - prompt_len).max(1).min(kl_horizon);
        let kl_rows: Vec<usize> = (0..horizon).map(|k| prompt_len - 1 + k).collect();
        let v = model.config().vocab_size;
        let mut base_rows = Vec::with_capacity(kl_rows.len() * v);
        for &row in &kl_rows {
            base_rows.extend_from_slice(trace.logits.row(row));
        }
        Ok(LocalityCtx {
            tokens,
            resid,
            span,
            kl_rows: kl_rows.clone(),
            base_rows: Mat::new(kl_rows.len(), v, base_rows),
        })
    }

    pub fn record_count(&self) -> usize {
        self.ctxs.len()
    }

    /// Replaced-run logits for a prompt context, on the given tape.
    fn replaced_logits(
        &self,
        tape: &mut Tape,
        pids: &[TensorId],
        h: &Hypernetwork,
        hids: &[TensorId],
        tokens_len: usize,
        resid: &Mat,
        span: Option<&TokenSpan>,
    ) -> Result<TensorId> {
        debug_assert_eq!(resid.rows, tokens_len);
        let base = tape.constant(vec![resid.rows, resid.cols], resid.data.clone())?;
        let replaced = match span {
            None => base,
            Some(span) => {
                let rows: Vec<usize> = (span.start..span.end).collect();
                let kb = tape.gather_rows(base, rows)?;
                let new_kb = h.apply_on_tape(tape, hids, kb)?;
                tape.scatter_rows(base, new_kb, span.start)?
            }
        };
        self.model.build_from_residual(tape, pids, replaced, self.layer)
    }

    /// Build the full composite loss for `batch` (record indices) on `tape`,
    /// given hypernetwork parameter ids. Returns (edit, eq, locality, total).
    fn build_loss(
        &self,
        tape: &mut Tape,
        pids: &[TensorId],
        h: &Hypernetwork,
        hids: &[TensorId],
        batch: &[usize],
        lambda_edit: f64,
    ) -> Result<(TensorId, TensorId, TensorId, TensorId)> {
        if batch.is_empty() {
            return Err(KbError::InvalidArgument("empty batch".into()));
        }
        let mut edit_terms = Vec::with_capacity(batch.len());
        let mut eq_terms = Vec::with_capacity(batch.len());
        let mut loc_terms = Vec::with_capacity(batch.len());
        for &idx in batch {
            let ctx = self.ctxs.get(idx).ok_or_else(|| {
                KbError::InvalidArgument(format!("record index {idx} out of range"))
            })?;
            for (pc, terms) in [(&ctx.edit, &mut edit_terms), (&ctx.eq, &mut eq_terms)] {
                let logits =
                    self.replaced_logits(tape, pids, h, hids, pc.tokens.len(), &pc.resid, Some(&pc.span))?;
                let ce = tape.cross_entropy(logits, pc.targets.clone())?;
                terms.push(ce);
            }
            let mut kls = Vec::with_capacity(ctx.locality.len());
            for lc in &ctx.locality {
                let logits = self.replaced_logits(
                    tape,
                    pids,
                    h,
                    hids,
                    lc.tokens.len(),
                    &lc.resid,
                    lc.span.as_ref(),
                )?;
                let p_rows = tape.gather_rows(logits, lc.kl_rows.clone())?;
                let q_rows = tape.constant(
                    vec![lc.base_rows.rows, lc.base_rows.cols],
                    lc.base_rows.data.clone(),
                )?;
                kls.push(tape.kl_divergence(p_rows, q_rows)?);
            }
            loc_terms.push(mean_scalars(tape, &kls)?);
        }
        let edit = mean_scalars(tape, &edit_terms)?;
        let eq = mean_scalars(tape, &eq_terms)?;
        let locality = mean_scalars(tape, &loc_terms)?;
        let edit_plus_eq = tape.add(edit, eq)?;
        let weighted = tape.scale(edit_plus_eq, lambda_edit)?;
        let total = tape.add(weighted, locality)?;
        Ok((edit, eq, locality, total))
    }

    /// Composite loss on a standalone tape whose hypernetwork leaves are
    /// `hids`; used for gradient verification against finite differences.
    pub fn loss_graph_standalone(
        &self,
        tape: &mut Tape,
        h: &Hypernetwork,
        hids: &[TensorId],
        batch: &[usize],
        lambda_edit: f64,
    ) -> Result<TensorId> {
        let pids = self.model.push_params(tape, false)?;
        let (_, _, _, total) = self.build_loss(tape, &pids, h, hids, batch, lambda_edit)?;
        Ok(total)
    }

    /// Loss values for a batch without touching parameters.
    pub fn loss_breakdown(&mut self, h: &Hypernetwork, batch: &[usize], lambda_edit: f64) -> Result<LossBreakdown> {
        let mut tape = std::mem::take(&mut self.tape);
        let result = (|| {
            let hids = h.push_params(&mut tape, false)?;
            let (e, q, l, t) = self.build_loss(&mut tape, &self.pids, h, &hids, batch, lambda_edit)?;
            Ok(LossBreakdown {
                edit: tape.values(e)[0],
                eq: tape.values(q)[0],
                locality: tape.values(l)[0],
                total: tape.values(t)[0],
            })
        })();
        tape.truncate(self.mark);
        self.tape = tape;
        result
    }

    /// One optimizer step over `batch`; returns the loss before the update.
    fn step(
        &mut self,
        h: &mut Hypernetwork,
        batch: &[usize],
        state: &mut AdamState,
        lr: f64,
        config: &TrainConfig,
    ) -> Result<LossBreakdown> {
        let mut tape = std::mem::take(&mut self.tape);
        let outcome = (|| {
            let hids = h.push_params(&mut tape, true)?;
            let (e, q, l, t) =
                self.build_loss(&mut tape, &self.pids, h, &hids, batch, config.lambda_edit)?;
            let breakdown = LossBreakdown {
                edit: tape.values(e)[0],
                eq: tape.values(q)[0],
                locality: tape.values(l)[0],
                total: tape.values(t)[0],
            };
            if !breakdown.total.is_finite() {
                return Err(KbError::Diverged(format!(
                    "non-finite loss {breakdown:?} on batch {batch:?}"
                )));
            }
            tape.backward(t)?;
            for (p, &hid) in h.params_mut().iter_mut().zip(&hids) {
                let g = tape.grad(hid).to_vec();
                p.zero_grad();
                p.accumulate_grad(&g)?;
            }
            Ok(breakdown)
        })();
        tape.truncate(self.mark);
        self.tape = tape;
        let breakdown = outcome?;
        adamw_step(h.params_mut(), state, lr, config.weight_decay)?;
        Ok(breakdown)
    }

    /// Fraction of records whose teacher-forced argmax reproduces the target
    /// at every position under replacement (equivalent to greedy decoding
    /// emitting the target).
    pub fn edit_accuracy(&mut self, h: &Hypernetwork) -> Result<f64> {
        let mut tape = std::mem::take(&mut self.tape);
        let n = self.ctxs.len();
        let result = (|| {
            let hids = h.push_params(&mut tape, false)?;
            let mut correct = 0usize;
            for ctx in &self.ctxs {
                let pc = &ctx.edit;
                let logits = self.replaced_logits(
                    &mut tape,
                    &self.pids,
                    h,
                    &hids,
                    pc.tokens.len(),
                    &pc.resid,
                    Some(&pc.span),
                )?;
                let v = self.model.config().vocab_size;
                let vals = tape.values(logits);
                let ok = pc.targets.iter().enumerate().all(|(row, t)| match t {
                    None => true,
                    Some(t) => crate::model::argmax(&vals[row * v..(row + 1) * v]) == *t,
                });
                if ok {
                    correct += 1;
                }
            }
            Ok(correct as f64 / n as f64)
        })();
        tape.truncate(self.mark);
        self.tape = tape;
        result
    }
}

fn mean_scalars(tape: &mut Tape, terms: &[TensorId]) -> Result<TensorId> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, 1.0 / terms.len() as f64)
}

/// Loss of one batch of records, without optimizing anything.
pub fn loss(
    h: &Hypernetwork,
    batch: &[EditRecord],
    model: &MicroLm,
    layer: usize,
    kl_horizon: usize,
    lambda_edit: f64,
) -> Result<LossBreakdown> {
    let mut trainer = EditTrainer::new(model, batch, layer, kl_horizon)?;
    let all: Vec<usize> = (0..batch.len()).collect();
    trainer.loss_breakdown(h, &all, lambda_edit)
}

/// Shuffled full pass over the record indices: one epoch's sampling order.
pub fn sample_epoch(n_records: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_records).collect();
    order.shuffle(rng);
    order
}

/// Optimize a fresh hypernetwork against `records` on the frozen `model`.
pub fn train(
    records: &[EditRecord],
    model: &MicroLm,
    layer: usize,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let scope = ScopeIndex::build(records.to_vec())?;
    let mut h = Hypernetwork::new(config.kind, layer, model.config().d_model, config.seed);
    let mut trainer = EditTrainer::new(model, records, layer, config.kl_horizon)?;
    let mut state = AdamState::new(h.params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut log = Vec::with_capacity(config.max_epochs);
    let mut prev_total = f64::INFINITY;
    let mut quiet_epochs = 0usize;
    for epoch in 0..config.max_epochs {
        let lr = config.lr * (config.max_epochs - epoch) as f64 / config.max_epochs as f64;
        let order = sample_epoch(records.len(), &mut rng);
        let mut sums = LossBreakdown { edit: 0.0, eq: 0.0, locality: 0.0, total: 0.0 };
        let mut seen = 0usize;
        for batch in order.chunks(config.batch_size) {
            let b = trainer.step(&mut h, batch, &mut state, lr, config)?;
            let w = batch.len() as f64;
            sums.edit += b.edit * w;
            sums.eq += b.eq * w;
            sums.locality += b.locality * w;
            sums.total += b.total * w;
            seen += batch.len();
        }
        let n = seen as f64;
        let epoch_loss = LossBreakdown {
            edit: sums.edit / n,
            eq: sums.eq / n,
            locality: sums.locality / n,
            total: sums.total / n,
        };
        let edit_accuracy = trainer.edit_accuracy(&h)?;
        log.push(EpochLog {
            epoch,
            edit: epoch_loss.edit,
            eq: epoch_loss.eq,
            locality: epoch_loss.locality,
            total: epoch_loss.total,
            edit_accuracy,
            lr,
        });

        let rel_improvement = if prev_total.is_finite() && prev_total.abs() > 0.0 {
            (prev_total - epoch_loss.total) / prev_total.abs()
        } else {
            f64::INFINITY
        };
        if edit_accuracy >= 1.0 && rel_improvement < config.early_stop.min_rel_improvement {
            quiet_epochs += 1;
            if quiet_epochs >= config.early_stop.patience {
                break;
            }
        } else {
            quiet_epochs = 0;
        }
        prev_total = epoch_loss.total;
    }

    h.snap_params_to_f32();
    Ok(TrainOutcome { hypernetwork: h, scope, log })
}

#[cfg(test)]
mod tests;
