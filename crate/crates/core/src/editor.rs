//! Knowledge-block generator and replacer: the hypernetwork that maps an
//! entity's original hidden states to replacement states, and the bundle
//! that routes prompts through scope matching, replacement, and decoding.

use crate::error::{KbError, Result};
use crate::model::{ForwardTrace, MicroLm, TokenSpan};
use crate::scope::{MatchResult, ScopeIndex};
use crate::tensor::{DiffTensor, Mat, Tape, TensorId};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HypernetworkKind {
    Linear,
    Mlp,
}

/// Per-token map from original entity hidden state to replacement state at
/// one layer. Size is a function of the model width only, independent of how
/// many edits it encodes.
///
/// Both kinds start as the exact identity map: the linear kind as `I`, the
/// MLP kind as `x + W2 gelu(W1 x + b1) + b2` with `W2 = b2 = 0`.
#[derive(Debug, Clone)]
pub struct Hypernetwork {
    kind: HypernetworkKind,
    layer: usize,
    d_model: usize,
    hidden: usize,
    params: Vec<DiffTensor>,
}

impl Hypernetwork {
    pub fn new(kind: HypernetworkKind, layer: usize, d_model: usize, seed: u64) -> Self {
        match kind {
            HypernetworkKind::Linear => Self::identity_linear(layer, d_model),
            HypernetworkKind::Mlp => Self::new_mlp(layer, d_model, 4 * d_model, seed),
        }
    }

    /// Linear map initialized to the identity.
    pub fn identity_linear(layer: usize, d_model: usize) -> Self {
        let mut w = vec![0.0; d_model * d_model];
        for i in 0..d_model {
            w[i * d_model + i] = 1.0;
        }
        let params = vec![
            DiffTensor::new(vec![d_model, d_model], w, true).expect("shape"),
            DiffTensor::new(vec![d_model], vec![0.0; d_model], true).expect("shape"),
        ];
        Self { kind: HypernetworkKind::Linear, layer, d_model, hidden: 0, params }
    }

    fn new_mlp(layer: usize, d_model: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let w1: Vec<f64> = (0..d_model * hidden)
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen();
                std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        let mut params = vec![
            DiffTensor::new(vec![d_model, hidden], w1, true).expect("shape"),
            DiffTensor::new(vec![hidden], vec![0.0; hidden], true).expect("shape"),
            DiffTensor::new(vec![hidden, d_model], vec![0.0; hidden * d_model], true).expect("shape"),
            DiffTensor::new(vec![d_model], vec![0.0; d_model], true).expect("shape"),
        ];
        for p in &mut params {
            p.snap_to_f32();
        }
        Self { kind: HypernetworkKind::Mlp, layer, d_model, hidden, params }
    }

    pub fn kind(&self) -> HypernetworkKind {
        self.kind
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub(crate) fn params(&self) -> &[DiffTensor] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [DiffTensor] {
        &mut self.params
    }

    pub(crate) fn params_cloned(&self) -> Vec<DiffTensor> {
        self.params.clone()
    }

    pub(crate) fn snap_params_to_f32(&mut self) {
        for p in &mut self.params {
            p.snap_to_f32();
        }
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

    /// Row-wise application on a tape, using the given parameter ids.
    pub(crate) fn apply_on_tape(&self, tape: &mut Tape, ids: &[TensorId], x: TensorId) -> Result<TensorId> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.d_model {
            return Err(KbError::ShapeMismatch {
                op: "generate_kb",
                detail: format!("input shape {shape:?}, hypernetwork width {}", self.d_model),
            });
        }
        match self.kind {
            HypernetworkKind::Linear => {
                let m = tape.matmul(x, ids[0])?;
                tape.add(m, ids[1])
            }
            HypernetworkKind::Mlp => {
                let h1 = tape.matmul(x, ids[0])?;
                let h1 = tape.add(h1, ids[1])?;
                let act = tape.gelu(h1)?;
                let out = tape.matmul(act, ids[2])?;
                let out = tape.add(out, ids[3])?;
                tape.add(x, out)
            }
        }
    }

    /// Deterministic row-wise transform of an original knowledge block.
    pub fn generate_kb(&self, original: &Mat) -> Result<Mat> {
        let mut tape = Tape::new();
        let x = tape.constant(vec![original.rows, original.cols], original.data.clone())?;
        let ids = self.push_params(&mut tape, false)?;
        let out = self.apply_on_tape(&mut tape, &ids, x)?;
        Ok(Mat::new(original.rows, original.cols, tape.values(out).to_vec()))
    }

    fn param_layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        match self.kind {
            HypernetworkKind::Linear => vec![
                ("w", vec![self.d_model, self.d_model]),
                ("b", vec![self.d_model]),
            ],
            HypernetworkKind::Mlp => vec![
                ("w1", vec![self.d_model, self.hidden]),
                ("b1", vec![self.hidden]),
                ("w2", vec![self.hidden, self.d_model]),
                ("b2", vec![self.d_model]),
            ],
        }
    }
}

/// Deployed editor: base model, trained hypernetwork, and the edit scope.
#[derive(Debug)]
pub struct EditorBundle {
    model: Arc<MicroLm>,
    hypernetwork: Hypernetwork,
    scope: ScopeIndex,
}

impl EditorBundle {
    pub fn new(model: Arc<MicroLm>, hypernetwork: Hypernetwork, scope: ScopeIndex) -> Result<Self> {
        if hypernetwork.d_model != model.config().d_model {
            return Err(KbError::Bundle(format!(
                "hypernetwork width {} does not match model width {}",
                hypernetwork.d_model,
                model.config().d_model
            )));
        }
        if hypernetwork.layer == 0 || hypernetwork.layer > model.config().n_layers {
            return Err(KbError::Bundle(format!(
                "edit layer {} outside 1..={}",
                hypernetwork.layer,
                model.config().n_layers
            )));
        }
        Ok(Self { model, hypernetwork, scope })
    }

    pub fn base(&self) -> &MicroLm {
        &self.model
    }

    pub fn base_arc(&self) -> Arc<MicroLm> {
        Arc::clone(&self.model)
    }

    pub fn hypernetwork(&self) -> &Hypernetwork {
        &self.hypernetwork
    }

    pub fn scope(&self) -> &ScopeIndex {
        &self.scope
    }

    pub fn layer(&self) -> usize {
        self.hypernetwork.layer
    }

    /// Token spans and transformed knowledge blocks for every scope match in
    /// the prompt, from one base forward pass.
    fn replacement_spans(
        &self,
        prompt: &str,
        tokens: &[u32],
        matches: &[MatchResult],
    ) -> Result<Vec<(TokenSpan, Mat)>> {
        let enc = self.model.tokenize(prompt)?;
        let base = self.model.forward(tokens)?;
        let resid = base.residual_at(self.hypernetwork.layer);
        let d = self.model.config().d_model;
        let mut spans: Vec<(TokenSpan, Mat)> = Vec::with_capacity(matches.len());
        for m in matches {
            let (span, _) = self.model.map_char_span(&enc, m.char_start, m.char_end)?;
            if spans.iter().any(|(s, _)| span.start < s.end && s.start < span.end) {
                continue; // token-level overlap after boundary expansion
            }
            let mut data = Vec::with_capacity(span.len() * d);
            for r in span.start..span.end {
                data.extend_from_slice(resid.row(r));
            }
            let original = Mat::new(span.len(), d, data);
            let new_kb = self.hypernetwork.generate_kb(&original)?;
            spans.push((span, new_kb));
        }
        spans.sort_by_key(|(s, _)| s.start);
        Ok(spans)
    }

    /// Forward with edits applied when the prompt is in scope; the unreplaced
    /// base forward otherwise.
    pub fn edited_forward(&self, prompt: &str) -> Result<(ForwardTrace, Vec<MatchResult>)> {
        let matches = self.scope.match_prompt(prompt);
        let enc = self.model.tokenize(prompt)?;
        if matches.is_empty() {
            return Ok((self.model.forward(&enc.ids)?, matches));
        }
        let spans = self.replacement_spans(prompt, &enc.ids, &matches)?;
        let refs: Vec<(usize, &Mat)> = spans.iter().map(|(s, m)| (s.start, m)).collect();
        let mut session = self.model.session()?;
        let trace = session.forward_with_replacements(&enc.ids, self.hypernetwork.layer, &refs)?;
        Ok((trace, matches))
    }

    /// Greedy decoding under `edited_forward` semantics. Scope matching runs
    /// once on the prompt; replacements persist across generated tokens.
    pub fn edited_generate(&self, prompt: &str, max_new: usize) -> Result<String> {
        let matches = self.scope.match_prompt(prompt);
        let enc = self.model.tokenize(prompt)?;
        let prompt_len = enc.ids.len();
        let mut session = self.model.session()?;
        let toks = if matches.is_empty() {
            session.greedy_extend(enc.ids, max_new, None, &[])?
        } else {
            let spans = self.replacement_spans(prompt, &enc.ids, &matches)?;
            let refs: Vec<(usize, &Mat)> = spans.iter().map(|(s, m)| (s.start, m)).collect();
            session.greedy_extend(enc.ids, max_new, Some(self.hypernetwork.layer), &refs)?
        };
        if toks.len() == prompt_len {
            return Ok(String::new());
        }
        Ok(self.model.detokenize(&toks[prompt_len..]))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_bundle(self, path)
    }

    pub fn load(path: &Path, model: Arc<MicroLm>) -> Result<Self> {
        load_bundle(path, model)
    }
}

// ── Bundle file ─────────────────────────────────────────────────────────
//
// magic, version, manifest JSON (model hash, layer, kind, threshold, scope
// records, tensor manifest), then hypernetwork weights in the same raw
// little-endian f32 encoding checkpoints use.

const BUNDLE_MAGIC: &[u8; 8] = b"KBEDBNDL";
const BUNDLE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct BundleManifest {
    model_hash: String,
    layer: usize,
    kind: HypernetworkKind,
    d_model: usize,
    hidden: usize,
    threshold: f64,
    records: Vec<crate::scope::EditRecord>,
    tensors: Vec<TensorEntry>,
    weights_hash: String,
}

fn weights_hash(params: &[DiffTensor]) -> String {
    let mut h = Sha256::new();
    for p in params {
        for &v in p.values() {
            h.update((v as f32).to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn save_bundle(bundle: &EditorBundle, path: &Path) -> Result<()> {
    let h = &bundle.hypernetwork;
    let mut tensors = Vec::new();
    let mut offset = 0u64;
    for ((name, shape), p) in h.param_layout().iter().zip(&h.params) {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: shape.clone(),
            offset,
        });
        offset += (p.numel() * 4) as u64;
    }
    let manifest = BundleManifest {
        model_hash: bundle.model.content_hash(),
        layer: h.layer,
        kind: h.kind,
        d_model: h.d_model,
        hidden: h.hidden,
        threshold: bundle.scope.threshold(),
        records: bundle.scope.records().to_vec(),
        tensors,
        weights_hash: weights_hash(&h.params),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(BUNDLE_MAGIC)?;
    file.write_all(&BUNDLE_VERSION.to_le_bytes())?;
    file.write_all(&(manifest_bytes.len() as u32).to_le_bytes())?;
    file.write_all(&manifest_bytes)?;
    for p in &h.params {
        for &v in p.values() {
            file.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

fn load_bundle(path: &Path, model: Arc<MicroLm>) -> Result<EditorBundle> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| KbError::Bundle("truncated file while reading magic".into()))?;
    if &magic != BUNDLE_MAGIC {
        return Err(KbError::Bundle(format!(
            "bad magic: expected {BUNDLE_MAGIC:?}, found {magic:?}"
        )));
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word)
        .map_err(|_| KbError::Bundle("truncated file while reading version".into()))?;
    let version = u32::from_le_bytes(word);
    if version != BUNDLE_VERSION {
        return Err(KbError::Bundle(format!(
            "unsupported version: expected {BUNDLE_VERSION}, found {version}"
        )));
    }
    file.read_exact(&mut word)
        .map_err(|_| KbError::Bundle("truncated file while reading manifest length".into()))?;
    let len = u32::from_le_bytes(word) as usize;
    let mut manifest_bytes = vec![0u8; len];
    file.read_exact(&mut manifest_bytes)
        .map_err(|_| KbError::Bundle("truncated file while reading manifest".into()))?;
    let manifest: BundleManifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| KbError::Bundle(format!("unreadable manifest: {e}")))?;

    if manifest.d_model != model.config().d_model {
        return Err(KbError::Bundle(format!(
            "width mismatch: bundle built for d_model {}, model has {}",
            manifest.d_model,
            model.config().d_model
        )));
    }
    if manifest.layer == 0 || manifest.layer > model.config().n_layers {
        return Err(KbError::Bundle(format!(
            "layer mismatch: bundle edits layer {}, model has {} layers",
            manifest.layer,
            model.config().n_layers
        )));
    }
    let model_hash = model.content_hash();
    if manifest.model_hash != model_hash {
        return Err(KbError::Bundle(format!(
            "checkpoint mismatch: bundle references {}, model is {model_hash}",
            manifest.model_hash
        )));
    }

    let mut h = Hypernetwork {
        kind: manifest.kind,
        layer: manifest.layer,
        d_model: manifest.d_model,
        hidden: manifest.hidden,
        params: Vec::new(),
    };
    let layout = h.param_layout();
    if manifest.tensors.len() != layout.len() {
        return Err(KbError::Bundle(format!(
            "manifest lists {} tensors, kind implies {}",
            manifest.tensors.len(),
            layout.len()
        )));
    }
    for (entry, (name, shape)) in manifest.tensors.iter().zip(&layout) {
        if &entry.name != name || &entry.shape != shape {
            return Err(KbError::Bundle(format!(
                "tensor mismatch: expected {name} {shape:?}, found {} {:?}",
                entry.name, entry.shape
            )));
        }
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        file.read_exact(&mut bytes)
            .map_err(|_| KbError::Bundle(format!("truncated file while reading {name}")))?;
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        h.params.push(DiffTensor::new(shape.clone(), values, true)?);
    }
    if weights_hash(&h.params) != manifest.weights_hash {
        return Err(KbError::Bundle("weights hash mismatch".into()));
    }

    let scope = ScopeIndex::build_with_threshold(manifest.records, manifest.threshold)?;
    EditorBundle::new(model, h, scope)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Tokenizer};

    fn toy_model() -> Arc<MicroLm> {
        let words: Vec<String> = [
            "The", "birthplace", "of", "is", "occupation", "Baru", "Ketim", "Zola", "Marn",
            "Parvin", "Okava", "baker", "sailor", ".", "was", "born", "in",
        ]
        .map(String::from)
        .to_vec();
        let tok = Tokenizer::build(words).unwrap();
        let cfg = ModelConfig::new(2, 8, 2, tok.vocab_size(), 24);
        Arc::new(MicroLm::new(cfg, tok, 99).unwrap())
    }

    fn toy_records() -> Vec<crate::scope::EditRecord> {
        vec![crate::scope::EditRecord {
            subject: "Baru Ketim".into(),
            prompt: "The birthplace of Baru Ketim is".into(),
            target: "Okava".into(),
            rephrase_prompt: "Baru Ketim was born in".into(),
            locality_prompts: vec!["The occupation of Baru Ketim is".into()],
        }]
    }

    #[test]
    fn identity_linear_generates_identity() {
        let h = Hypernetwork::identity_linear(1, 8);
        let kb = Mat::new(2, 8, (0..16).map(|i| i as f64 * 0.5 - 3.0).collect());
        let out = h.generate_kb(&kb).unwrap();
        assert_eq!(out, kb);
    }

    #[test]
    fn fresh_mlp_generates_identity() {
        let h = Hypernetwork::new(HypernetworkKind::Mlp, 1, 8, 7);
        let kb = Mat::new(3, 8, (0..24).map(|i| (i as f64).sin()).collect());
        let out = h.generate_kb(&kb).unwrap();
        assert!(kb.max_abs_diff(&out) == 0.0);
    }

    #[test]
    fn zero_weights_bias_only_rows() {
        let mut h = Hypernetwork::identity_linear(1, 4);
        for v in h.params_mut()[0].values_mut() {
            *v = 0.0;
        }
        let bias = [0.5, -1.0, 2.0, 0.0];
        h.params_mut()[1].values_mut().copy_from_slice(&bias);
        let kb = Mat::new(2, 4, vec![1.0; 8]);
        let out = h.generate_kb(&kb).unwrap();
        for r in 0..2 {
            assert_eq!(out.row(r), &bias);
        }
    }

    #[test]
    fn width_mismatch_rejected() {
        let h = Hypernetwork::identity_linear(1, 8);
        let kb = Mat::new(1, 4, vec![0.0; 4]);
        assert!(h.generate_kb(&kb).is_err());
    }

    #[test]
    fn out_of_scope_is_bit_identical() {
        let model = toy_model();
        let scope = ScopeIndex::build(toy_records()).unwrap();
        let h = Hypernetwork::identity_linear(1, 8);
        let bundle = EditorBundle::new(Arc::clone(&model), h, scope).unwrap();

        let prompt = "The birthplace of Zola Marn is";
        let (trace, matches) = bundle.edited_forward(prompt).unwrap();
        assert!(matches.is_empty());
        let enc = model.tokenize(prompt).unwrap();
        let base = model.forward(&enc.ids).unwrap();
        assert_eq!(trace.logits.data, base.logits.data);

        let gen_edited = bundle.edited_generate(prompt, 4).unwrap();
        let gen_base = model.greedy_decode(prompt, 4, None).unwrap();
        assert_eq!(gen_edited, gen_base);
    }

    #[test]
    fn in_scope_identity_hypernetwork_is_transparent() {
        let model = toy_model();
        let scope = ScopeIndex::build(toy_records()).unwrap();
        let h = Hypernetwork::identity_linear(1, 8);
        let bundle = EditorBundle::new(Arc::clone(&model), h, scope).unwrap();

        let prompt = "The birthplace of Baru Ketim is";
        let (trace, matches) = bundle.edited_forward(prompt).unwrap();
        assert_eq!(matches.len(), 1);
        let enc = model.tokenize(prompt).unwrap();
        let base = model.forward(&enc.ids).unwrap();
        assert!(trace.logits.max_abs_diff(&base.logits) <= 1e-6);
    }

    #[test]
    fn empty_scope_bundle_is_base_model_everywhere() {
        let model = toy_model();
        let scope = ScopeIndex::build(vec![]).unwrap();
        let h = Hypernetwork::identity_linear(2, 8);
        let bundle = EditorBundle::new(Arc::clone(&model), h, scope).unwrap();
        for prompt in ["The birthplace of Baru Ketim is", "Zola Marn was born in"] {
            let gen_edited = bundle.edited_generate(prompt, 3).unwrap();
            let gen_base = model.greedy_decode(prompt, 3, None).unwrap();
            assert_eq!(gen_edited, gen_base);
        }
    }

    #[test]
    fn bundle_round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("edit.bundle");
        let model = toy_model();
        let scope = ScopeIndex::build(toy_records()).unwrap();
        let mut h = Hypernetwork::new(HypernetworkKind::Mlp, 1, 8, 3);
        // perturb so the bundle is not the identity
        for v in h.params_mut()[2].values_mut().iter_mut().step_by(7) {
            *v = 0.25;
        }
        h.snap_params_to_f32();
        let bundle = EditorBundle::new(Arc::clone(&model), h, scope).unwrap();
        bundle.save(&path).unwrap();
        let loaded = EditorBundle::load(&path, Arc::clone(&model)).unwrap();

        for prompt in [
            "The birthplace of Baru Ketim is",
            "Baru Ketim was born in",
            "The birthplace of Zola Marn is",
        ] {
            assert_eq!(
                bundle.edited_generate(prompt, 4).unwrap(),
                loaded.edited_generate(prompt, 4).unwrap()
            );
        }
    }

    #[test]
    fn bundle_wrong_model_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("edit.bundle");
        let model = toy_model();
        let scope = ScopeIndex::build(toy_records()).unwrap();
        let h = Hypernetwork::identity_linear(1, 8);
        EditorBundle::new(Arc::clone(&model), h, scope)
            .unwrap()
            .save(&path)
            .unwrap();

        // different width model
        let words: Vec<String> = ["x", "y"].map(String::from).to_vec();
        let tok = Tokenizer::build(words).unwrap();
        let cfg = ModelConfig::new(2, 4, 2, tok.vocab_size(), 8);
        let other = Arc::new(MicroLm::new(cfg, tok, 1).unwrap());
        let err = EditorBundle::load(&path, other).unwrap_err().to_string();
        assert!(err.contains("width mismatch"), "{err}");

        // same shape, different weights
        let model2 = {
            let words: Vec<String> = [
                "The", "birthplace", "of", "is", "occupation", "Baru", "Ketim", "Zola", "Marn",
                "Parvin", "Okava", "baker", "sailor", ".", "was", "born", "in",
            ]
            .map(String::from)
            .to_vec();
            let tok = Tokenizer::build(words).unwrap();
            let cfg = ModelConfig::new(2, 8, 2, tok.vocab_size(), 24);
            Arc::new(MicroLm::new(cfg, tok, 100).unwrap())
        };
        let err = EditorBundle::load(&path, model2).unwrap_err().to_string();
        assert!(err.contains("checkpoint mismatch"), "{err}");
    }
}
