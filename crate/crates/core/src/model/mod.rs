//! Desk-scale decoder-only transformer with residual-stream capture and a
//! span-replacement hook.
//!
//! Pre-norm blocks: `x + attn(ln1(x))` then `+ mlp(ln2(...))`, GELU MLP,
//! learned positional embeddings. The residual stream exiting layer `l` is
//! the per-token state an editor replaces: rows of `residual[l]` covering an
//! entity's tokens are that entity's knowledge block at `l`.

mod checkpoint;
pub mod tokenizer;

pub use tokenizer::{Tokenized, Tokenizer, PAD_ID, UNK_ID};

use crate::error::{KbError, Result};
use crate::tensor::{DiffTensor, Mat, Tape, TensorId};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    /// Layer whose exiting residual stream is replaced by default (1-based).
    pub default_edit_layer: usize,
}

impl ModelConfig {
    /// Config with the default edit layer at the middle of the stack.
    pub fn new(n_layers: usize, d_model: usize, n_heads: usize, vocab_size: usize, max_seq: usize) -> Self {
        Self {
            n_layers,
            d_model,
            n_heads,
            vocab_size,
            max_seq,
            default_edit_layer: n_layers.div_ceil(2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.max_seq == 0 {
            return Err(KbError::InvalidArgument("config counts must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(KbError::InvalidArgument(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.default_edit_layer == 0 || self.default_edit_layer > self.n_layers {
            return Err(KbError::InvalidArgument(format!(
                "default_edit_layer {} outside 1..={}",
                self.default_edit_layer, self.n_layers
            )));
        }
        if self.vocab_size < 2 {
            return Err(KbError::InvalidArgument("vocab_size must be >= 2".into()));
        }
        Ok(())
    }
}

/// Token index window `[start, end)` plus the byte span it covers in the
/// source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
    pub char_start: usize,
    pub char_end: usize,
}

impl TokenSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }
}

/// Everything a forward pass captures: logits plus the per-layer residual
/// stream and sublayer contributions.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Mat,
    /// `residual[0]` is the embedding output; `residual[l]` the stream
    /// exiting layer `l`.
    pub residual: Vec<Mat>,
    attn_out: Vec<Mat>,
    mlp_out: Vec<Mat>,
}

impl ForwardTrace {
    pub fn residual_at(&self, layer: usize) -> &Mat {
        &self.residual[layer]
    }

    /// Attention sublayer contribution inside layer `layer` (1-based).
    pub fn attn_at(&self, layer: usize) -> &Mat {
        &self.attn_out[layer - 1]
    }

    pub fn mlp_at(&self, layer: usize) -> &Mat {
        &self.mlp_out[layer - 1]
    }

    pub fn n_layers(&self) -> usize {
        self.attn_out.len()
    }

    /// Greedy next token from the last position; ties break to the lowest id.
    pub fn argmax_last(&self) -> u32 {
        argmax(self.logits.row(self.logits.rows - 1)) as u32
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

// Per-layer parameter order within the flat parameter list.
const LAYER_TENSORS: usize = 16;
const LAYER_NAMES: [&str; LAYER_TENSORS] = [
    "ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
    "attn.wo", "attn.bo", "ln2.g", "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
];

/// Parameter names and shapes in storage order, derived from the config.
pub(crate) fn param_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let hidden = 4 * d;
    let mut out = vec![
        ("tok_emb".to_string(), vec![config.vocab_size, d]),
        ("pos_emb".to_string(), vec![config.max_seq, d]),
    ];
    for layer in 1..=config.n_layers {
        for name in LAYER_NAMES {
            let shape = match name {
                "ln1.g" | "ln1.b" | "ln2.g" | "ln2.b" | "attn.bq" | "attn.bk" | "attn.bv"
                | "attn.bo" | "mlp.b2" => vec![d],
                "attn.wq" | "attn.wk" | "attn.wv" | "attn.wo" => vec![d, d],
                "mlp.w1" => vec![d, hidden],
                "mlp.b1" => vec![hidden],
                "mlp.w2" => vec![hidden, d],
                _ => unreachable!(),
            };
            out.push((format!("l{layer}.{name}"), shape));
        }
    }
    out.push(("ln_f.g".to_string(), vec![d]));
    out.push(("ln_f.b".to_string(), vec![d]));
    out.push(("unembed".to_string(), vec![d, config.vocab_size]));
    out
}

/// Decoder-only micro language model. Immutable once built or loaded;
/// training mutates it through the crate-internal parameter accessors.
#[derive(Debug)]
pub struct MicroLm {
    config: ModelConfig,
    tokenizer: Tokenizer,
    params: Vec<DiffTensor>,
    names: Vec<String>,
}

pub(crate) struct GraphTrace {
    pub logits: TensorId,
    pub residual: Vec<TensorId>,
    pub attn_out: Vec<TensorId>,
    pub mlp_out: Vec<TensorId>,
}

/// Residual-stream overwrite applied after block `layer` produces its output.
pub(crate) struct ReplacementPlan {
    pub layer: usize,
    /// (first token row, states on the tape), non-overlapping.
    pub spans: Vec<(usize, TensorId)>,
}

impl MicroLm {
    pub fn new(config: ModelConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        config.validate()?;
        if tokenizer.vocab_size() != config.vocab_size {
            return Err(KbError::InvalidArgument(format!(
                "config vocab_size {} != tokenizer vocabulary {}",
                config.vocab_size,
                tokenizer.vocab_size()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let resid_scale = 1.0 / ((2 * config.n_layers) as f64).sqrt();

        let normal = |rng: &mut ChaCha8Rng, n: usize, std: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.gen();
                    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect()
        };

        let mut params = Vec::new();
        let mut names = Vec::new();
        for (name, shape) in param_layout(&config) {
            let numel: usize = shape.iter().product();
            let values = match name.rsplit('.').next().unwrap() {
                "g" => vec![1.0; numel],
                "b" | "bq" | "bk" | "bv" | "bo" | "b1" | "b2" => vec![0.0; numel],
                // Residual-writing projections start smaller, GPT-2 style.
                "wo" | "w2" => normal(&mut rng, numel, 0.02 * resid_scale),
                _ => normal(&mut rng, numel, 0.02),
            };
            let mut t = DiffTensor::new(shape, values, true)?;
            t.snap_to_f32();
            names.push(name);
            params.push(t);
        }

        Ok(Self { config, tokenizer, params, names })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub(crate) fn params(&self) -> &[DiffTensor] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [DiffTensor] {
        &mut self.params
    }

    pub(crate) fn param_names(&self) -> &[String] {
        &self.names
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        tokenizer: Tokenizer,
        params: Vec<DiffTensor>,
        names: Vec<String>,
    ) -> Self {
        Self { config, tokenizer, params, names }
    }

    // ── Parameter indices ───────────────────────────────────────────────

    fn p_tok_emb(&self) -> usize {
        0
    }

    fn p_pos_emb(&self) -> usize {
        1
    }

    fn p_layer(&self, layer: usize, slot: usize) -> usize {
        2 + (layer - 1) * LAYER_TENSORS + slot
    }

    fn p_lnf(&self) -> usize {
        2 + self.config.n_layers * LAYER_TENSORS
    }

    fn p_unembed(&self) -> usize {
        self.p_lnf() + 2
    }

    // ── Tokenization ────────────────────────────────────────────────────

    /// Tokenize, rejecting empty and overlong inputs.
    pub fn tokenize(&self, text: &str) -> Result<Tokenized> {
        let enc = self.tokenizer.encode(text)?;
        if enc.ids.len() > self.config.max_seq {
            return Err(KbError::Tokenize(format!(
                "input tokenizes to {} tokens, max_seq is {}",
                enc.ids.len(),
                self.config.max_seq
            )));
        }
        Ok(enc)
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        self.tokenizer.decode(ids)
    }

    /// Map a byte span onto the covering token span. Returns the span and
    /// whether it had to be expanded to token boundaries.
    pub fn map_char_span(&self, enc: &Tokenized, char_start: usize, char_end: usize) -> Result<(TokenSpan, bool)> {
        if char_start >= char_end {
            return Err(KbError::InvalidArgument(format!(
                "empty char span {char_start}..{char_end}"
            )));
        }
        let mut start = None;
        let mut end = None;
        for (i, &(s, e)) in enc.offsets.iter().enumerate() {
            if e > char_start && s < char_end {
                if start.is_none() {
                    start = Some(i);
                }
                end = Some(i + 1);
            }
        }
        match (start, end) {
            (Some(start), Some(end)) => {
                let span = TokenSpan {
                    start,
                    end,
                    char_start: enc.offsets[start].0,
                    char_end: enc.offsets[end - 1].1,
                };
                let expanded = span.char_start != char_start || span.char_end != char_end;
                Ok((span, expanded))
            }
            _ => Err(KbError::InvalidArgument(format!(
                "char span {char_start}..{char_end} covers no tokens"
            ))),
        }
    }

    // ── Forward passes ──────────────────────────────────────────────────

    fn validate_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(KbError::InvalidArgument("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq {
            return Err(KbError::InvalidArgument(format!(
                "sequence length {} exceeds max_seq {}",
                tokens.len(),
                self.config.max_seq
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(KbError::InvalidArgument(format!(
                "token id {bad} out of vocabulary (size {})",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    pub(crate) fn push_params(&self, tape: &mut Tape, requires_grad: bool) -> Result<Vec<TensorId>> {
        self.params
            .iter()
            .map(|p| {
                if requires_grad {
                    tape.param(p.shape().to_vec(), p.values().to_vec())
                } else {
                    tape.constant(p.shape().to_vec(), p.values().to_vec())
                }
            })
            .collect()
    }

    /// Build the forward graph for one or more equal-length sequences packed
    /// row-wise. Replacement is only supported for a single sequence.
    pub(crate) fn build_graph(
        &self,
        tape: &mut Tape,
        pids: &[TensorId],
        sequences: &[&[u32]],
        replacement: Option<&ReplacementPlan>,
    ) -> Result<GraphTrace> {
        if sequences.is_empty() {
            return Err(KbError::InvalidArgument("no sequences".into()));
        }
        let n = sequences[0].len();
        for s in sequences {
            self.validate_tokens(s)?;
            if s.len() != n {
                return Err(KbError::InvalidArgument(
                    "packed sequences must share a length".into(),
                ));
            }
        }
        if replacement.is_some() && sequences.len() != 1 {
            return Err(KbError::InvalidArgument(
                "replacement requires a single sequence".into(),
            ));
        }
        if let Some(plan) = replacement {
            self.validate_plan(tape, plan, n)?;
        }

        let b = sequences.len();
        let flat_ids: Vec<usize> = sequences.iter().flat_map(|s| s.iter().map(|&t| t as usize)).collect();
        let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();

        let tok = tape.embedding_gather(pids[self.p_tok_emb()], flat_ids)?;
        let pos = tape.embedding_gather(pids[self.p_pos_emb()], pos_ids)?;
        let mut x = tape.add(tok, pos)?;

        // Causal mask shared by every layer/head: finite large negative so
        // masked scores underflow to exactly zero after softmax.
        let mut mask_data = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                mask_data[i * n + j] = -1e9;
            }
        }
        let mask = tape.constant(vec![n, n], mask_data)?;

        let mut residual = vec![x];
        let mut attn_out = Vec::with_capacity(self.config.n_layers);
        let mut mlp_out = Vec::with_capacity(self.config.n_layers);

        for layer in 1..=self.config.n_layers {
            let (next, attn_c, mlp_c) = self.block(tape, pids, layer, x, n, b, mask)?;
            x = next;
            if let Some(plan) = replacement {
                if plan.layer == layer {
                    for &(start, states) in &plan.spans {
                        x = tape.scatter_rows(x, states, start)?;
                    }
                }
            }
            residual.push(x);
            attn_out.push(attn_c);
            mlp_out.push(mlp_c);
        }

        let logits = self.head(tape, pids, x)?;
        Ok(GraphTrace { logits, residual, attn_out, mlp_out })
    }

    fn validate_plan(&self, tape: &Tape, plan: &ReplacementPlan, n: usize) -> Result<()> {
        if plan.layer == 0 || plan.layer > self.config.n_layers {
            return Err(KbError::InvalidArgument(format!(
                "replacement layer {} outside 1..={}",
                plan.layer, self.config.n_layers
            )));
        }
        let mut seen: Vec<(usize, usize)> = Vec::new();
        for &(start, states) in &plan.spans {
            let shape = tape.shape(states);
            if shape.len() != 2 || shape[1] != self.config.d_model {
                return Err(KbError::ShapeMismatch {
                    op: "forward_with_replacement",
                    detail: format!("states shape {shape:?}, want (*, {})", self.config.d_model),
                });
            }
            let end = start + shape[0];
            if end > n {
                return Err(KbError::ShapeMismatch {
                    op: "forward_with_replacement",
                    detail: format!("span {start}..{end} outside sequence of {n}"),
                });
            }
            if seen.iter().any(|&(s, e)| start < e && s < end) {
                return Err(KbError::InvalidArgument(format!(
                    "overlapping replacement spans at {start}..{end}"
                )));
            }
            seen.push((start, end));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        tape: &mut Tape,
        pids: &[TensorId],
        layer: usize,
        x: TensorId,
        n: usize,
        b: usize,
        mask: TensorId,
    ) -> Result<(TensorId, TensorId, TensorId)> {
        let p = |slot: usize| pids[self.p_layer(layer, slot)];
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let ln1 = tape.layer_norm(x, p(0), p(1))?;
        let q = self.linear(tape, ln1, p(2), p(3))?;
        let k = self.linear(tape, ln1, p(4), p(5))?;
        let v = self.linear(tape, ln1, p(6), p(7))?;

        let mut seq_outs = Vec::with_capacity(b);
        for s in 0..b {
            let rows: Vec<usize> = (s * n..(s + 1) * n).collect();
            let (qs, ks, vs) = if b == 1 {
                (q, k, v)
            } else {
                (
                    tape.gather_rows(q, rows.clone())?,
                    tape.gather_rows(k, rows.clone())?,
                    tape.gather_rows(v, rows)?,
                )
            };
            let mut head_outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let (c0, c1) = (h * dh, (h + 1) * dh);
                let qh = tape.slice_cols(qs, c0, c1)?;
                let kh = tape.slice_cols(ks, c0, c1)?;
                let vh = tape.slice_cols(vs, c0, c1)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scaled = tape.scale(scores, scale)?;
                let masked = tape.add(scaled, mask)?;
                let probs = tape.softmax_rows(masked)?;
                head_outs.push(tape.matmul(probs, vh)?);
            }
            seq_outs.push(tape.concat_cols(&head_outs)?);
        }
        let merged = if b == 1 { seq_outs[0] } else { tape.concat_rows(&seq_outs)? };
        let attn_c = self.linear(tape, merged, p(8), p(9))?;
        let x1 = tape.add(x, attn_c)?;

        let ln2 = tape.layer_norm(x1, p(10), p(11))?;
        let h1 = self.linear(tape, ln2, p(12), p(13))?;
        let act = tape.gelu(h1)?;
        let mlp_c = self.linear(tape, act, p(14), p(15))?;
        let x2 = tape.add(x1, mlp_c)?;
        Ok((x2, attn_c, mlp_c))
    }

    fn linear(&self, tape: &mut Tape, x: TensorId, w: TensorId, bias: TensorId) -> Result<TensorId> {
        let m = tape.matmul(x, w)?;
        tape.add(m, bias)
    }

    fn head(&self, tape: &mut Tape, pids: &[TensorId], x: TensorId) -> Result<TensorId> {
        let lnf = tape.layer_norm(x, pids[self.p_lnf()], pids[self.p_lnf() + 1])?;
        tape.matmul(lnf, pids[self.p_unembed()])
    }

    /// Continue the stack from a residual stream exiting `from_layer`,
    /// returning the logits id. Used when the lower layers are frozen and
    /// precomputed.
    pub(crate) fn build_from_residual(
        &self,
        tape: &mut Tape,
        pids: &[TensorId],
        x: TensorId,
        from_layer: usize,
    ) -> Result<TensorId> {
        if from_layer > self.config.n_layers {
            return Err(KbError::InvalidArgument(format!(
                "from_layer {} outside 1..={}",
                from_layer, self.config.n_layers
            )));
        }
        let n = tape.shape(x)[0];
        let mut mask_data = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                mask_data[i * n + j] = -1e9;
            }
        }
        let mask = tape.constant(vec![n, n], mask_data)?;
        let mut cur = x;
        for layer in (from_layer + 1)..=self.config.n_layers {
            let (next, _, _) = self.block(tape, pids, layer, cur, n, 1, mask)?;
            cur = next;
        }
        self.head(tape, pids, cur)
    }

    fn extract_trace(&self, tape: &Tape, g: &GraphTrace, rows: usize) -> ForwardTrace {
        let mat = |id: TensorId| {
            let shape = tape.shape(id);
            Mat::new(shape[0], shape[1], tape.values(id).to_vec())
        };
        ForwardTrace {
            logits: Mat::new(rows, self.config.vocab_size, tape.values(g.logits).to_vec()),
            residual: g.residual.iter().map(|&id| mat(id)).collect(),
            attn_out: g.attn_out.iter().map(|&id| mat(id)).collect(),
            mlp_out: g.mlp_out.iter().map(|&id| mat(id)).collect(),
        }
    }

    /// Single forward pass capturing the full trace.
    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardTrace> {
        let mut session = self.session()?;
        session.forward(tokens)
    }

    /// Forward pass with `new_states` overwriting the residual stream rows of
    /// `span` as they exit `layer`.
    pub fn forward_with_replacement(
        &self,
        tokens: &[u32],
        layer: usize,
        span: &TokenSpan,
        new_states: &Mat,
    ) -> Result<ForwardTrace> {
        let mut session = self.session()?;
        session.forward_with_replacements(tokens, layer, &[(span.start, new_states)])
    }

    /// Long-lived inference context; model weights are copied onto the tape
    /// once and reused across calls.
    pub fn session(&self) -> Result<Session<'_>> {
        let mut tape = Tape::new();
        let pids = self.push_params(&mut tape, false)?;
        let mark = tape.len();
        Ok(Session { model: self, tape, pids, mark })
    }

    /// Greedy argmax decoding; ties break to the lowest token id. With a
    /// replacement, the overwritten knowledge block persists for every
    /// generated token (each step re-applies it at the same span, which is
    /// identical to caching the replaced states under causal masking).
    pub fn greedy_decode(
        &self,
        prompt: &str,
        max_new: usize,
        replacement: Option<(usize, &TokenSpan, &Mat)>,
    ) -> Result<String> {
        let enc = self.tokenize(prompt)?;
        let prompt_len = enc.ids.len();
        let spans: Vec<(usize, &Mat)> = replacement.iter().map(|&(_, s, m)| (s.start, m)).collect();
        let layer = replacement.map(|(l, _, _)| l);
        let mut session = self.session()?;
        let toks = session.greedy_extend(enc.ids, max_new, layer, &spans)?;
        if toks.len() == prompt_len {
            return Ok(String::new());
        }
        Ok(self.detokenize(&toks[prompt_len..]))
    }

    /// Knowledge block of the entity covering `char_span` in `prompt`: the
    /// token span plus the residual-stream rows exiting `layer` from an
    /// unreplaced forward pass.
    pub fn entity_kb(&self, prompt: &str, char_span: (usize, usize), layer: usize) -> Result<(TokenSpan, Mat)> {
        if layer == 0 || layer > self.config.n_layers {
            return Err(KbError::InvalidArgument(format!(
                "layer {} outside 1..={}",
                layer, self.config.n_layers
            )));
        }
        let enc = self.tokenize(prompt)?;
        let (span, _) = self.map_char_span(&enc, char_span.0, char_span.1)?;
        let trace = self.forward(&enc.ids)?;
        let resid = trace.residual_at(layer);
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(span.len() * d);
        for r in span.start..span.end {
            data.extend_from_slice(resid.row(r));
        }
        Ok((span, Mat::new(span.len(), d, data)))
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(self, path)
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<Self> {
        checkpoint::load(path)
    }

    /// Deterministic content hash over config, vocabulary, and parameters.
    pub fn content_hash(&self) -> String {
        checkpoint::content_hash(self)
    }

    /// Snap every parameter to its nearest f32-representable value, matching
    /// what a checkpoint round-trip would produce.
    pub(crate) fn snap_params_to_f32(&mut self) {
        for p in &mut self.params {
            p.snap_to_f32();
        }
    }
}

/// Reusable inference context over a frozen model.
pub struct Session<'m> {
    model: &'m MicroLm,
    tape: Tape,
    pids: Vec<TensorId>,
    mark: usize,
}

impl Session<'_> {
    pub fn forward(&mut self, tokens: &[u32]) -> Result<ForwardTrace> {
        self.run(tokens, None)
    }

    pub fn forward_with_replacements(
        &mut self,
        tokens: &[u32],
        layer: usize,
        spans: &[(usize, &Mat)],
    ) -> Result<ForwardTrace> {
        self.run(tokens, Some((layer, spans)))
    }

    fn run(&mut self, tokens: &[u32], replacement: Option<(usize, &[(usize, &Mat)])>) -> Result<ForwardTrace> {
        let result = self.run_inner(tokens, replacement);
        self.tape.truncate(self.mark);
        result
    }

    fn run_inner(
        &mut self,
        tokens: &[u32],
        replacement: Option<(usize, &[(usize, &Mat)])>,
    ) -> Result<ForwardTrace> {
        let plan = match replacement {
            None => None,
            Some((layer, spans)) => {
                let mut tape_spans = Vec::with_capacity(spans.len());
                for &(start, states) in spans {
                    let id = self
                        .tape
                        .constant(vec![states.rows, states.cols], states.data.clone())?;
                    tape_spans.push((start, id));
                }
                Some(ReplacementPlan { layer, spans: tape_spans })
            }
        };
        let g = self
            .model
            .build_graph(&mut self.tape, &self.pids, &[tokens], plan.as_ref())?;
        Ok(self.model.extract_trace(&self.tape, &g, tokens.len()))
    }

    /// Greedy continuation of `tokens`, re-applying any replacement each step.
    pub fn greedy_extend(
        &mut self,
        mut tokens: Vec<u32>,
        max_new: usize,
        layer: Option<usize>,
        spans: &[(usize, &Mat)],
    ) -> Result<Vec<u32>> {
        for _ in 0..max_new {
            if tokens.len() >= self.model.config.max_seq {
                break;
            }
            let trace = match layer {
                Some(l) if !spans.is_empty() => self.forward_with_replacements(&tokens, l, spans)?,
                _ => self.forward(&tokens)?,
            };
            tokens.push(trace.argmax_last());
        }
        Ok(tokens)
    }
}
