//! Miniature decoder-only transformer with switchable low-rank adapters.
//!
//! The backbone (token/position embeddings, attention and FFN projections,
//! norms, output head) is frozen at initialization. Two LoRA adapter sets
//! ride on every linear projection: a reasoning adapter that processes
//! prompts and generates traces, and an embedding adapter that runs the
//! probe tokens. A third, frozen copy of the reasoning adapter can be
//! installed as the reference policy for RL. Switching adapters is pure
//! bookkeeping; no weights move.
//!
//! Layout choices that the rest of the pipeline leans on:
//! - pre-norm blocks with RMS normalization and a tanh FFN;
//! - learned absolute position embeddings for prompt/cot tokens;
//! - probe tokens carry **no** position embedding, so the same KV cache
//!   serves both extraction masks without positional inconsistency;
//! - LoRA starts at B = 0, so an untrained adapter is an exact no-op.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::rng::{Rng, Stream};
use crate::tensor::{no_grad, Tensor};
use crate::trace::Trace;
use crate::vocab;

pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_seq: usize,
    pub k_probes: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            vocab_size: vocab::VOCAB_SIZE,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ffn: 256,
            max_seq: 512,
            k_probes: 16,
            lora_rank: 8,
            lora_alpha: 16.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.k_probes == 0 {
            return Err(ModelError::BadConfig("k_probes must be at least 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid backbone config: {0}")]
    BadConfig(String),
    #[error("sequence of {len} tokens exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("unknown adapter name {0:?} (expected reasoning | embedding | reference-reasoning)")]
    UnknownAdapter(String),
    #[error("reference adapter requested but never installed")]
    NoReference,
    #[error("token id {0} out of vocabulary")]
    BadToken(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterKind {
    Reasoning,
    Embedding,
    /// Frozen copy of the reasoning adapter taken at RL start.
    ReferenceReasoning,
}

impl std::str::FromStr for AdapterKind {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reasoning" => Ok(AdapterKind::Reasoning),
            "embedding" => Ok(AdapterKind::Embedding),
            "reference-reasoning" => Ok(AdapterKind::ReferenceReasoning),
            other => Err(ModelError::UnknownAdapter(other.to_string())),
        }
    }
}

/// One low-rank adapter on one projection: `delta = (x @ a) @ b * alpha/r`.
#[derive(Debug, Clone)]
pub struct LoraPair {
    pub a: Tensor,
    pub b: Tensor,
}

#[derive(Debug)]
struct AdaptedLinear {
    weight: Tensor, // frozen [d_in, d_out]
    bias: Tensor,   // frozen [d_out]
    reasoning: LoraPair,
    embedding: LoraPair,
    reference: Option<LoraPair>,
}

impl AdaptedLinear {
    fn new(d_in: usize, d_out: usize, rank: usize, rng: &mut Rng) -> Self {
        let w_std = 1.0 / (d_in as f64).sqrt();
        let weight = Tensor::new(
            &[d_in, d_out],
            (0..d_in * d_out).map(|_| rng.next_gaussian() * w_std).collect(),
        );
        let bias = Tensor::new(&[d_out], vec![0.0; d_out]);
        let make_pair = |rng: &mut Rng| LoraPair {
            a: Tensor::param(
                &[d_in, rank],
                (0..d_in * rank).map(|_| rng.next_gaussian() * 0.02).collect(),
            ),
            b: Tensor::param(&[rank, d_out], vec![0.0; rank * d_out]),
        };
        let reasoning = make_pair(rng);
        let embedding = make_pair(rng);
        AdaptedLinear {
            weight,
            bias,
            reasoning,
            embedding,
            reference: None,
        }
    }

    fn pair(&self, kind: AdapterKind) -> Option<&LoraPair> {
        match kind {
            AdapterKind::Reasoning => Some(&self.reasoning),
            AdapterKind::Embedding => Some(&self.embedding),
            AdapterKind::ReferenceReasoning => self.reference.as_ref(),
        }
    }

    fn forward(&self, x: &Tensor, active: Option<AdapterKind>, lora_scale: f64) -> Tensor {
        let base = x.matmul(&self.weight).add_row(&self.bias);
        match active.and_then(|k| self.pair(k)) {
            Some(pair) => {
                let delta = x.matmul(&pair.a).matmul(&pair.b).scale(lora_scale);
                base.add(&delta)
            }
            None => base,
        }
    }

    /// Snapshot the reasoning adapter into the frozen reference slot.
    fn install_reference(&mut self) {
        self.reference = Some(LoraPair {
            a: Tensor::new(self.reasoning.a.shape(), self.reasoning.a.to_vec()),
            b: Tensor::new(self.reasoning.b.shape(), self.reasoning.b.to_vec()),
        });
    }
}

struct Layer {
    attn_norm: Tensor,
    wq: AdaptedLinear,
    wk: AdaptedLinear,
    wv: AdaptedLinear,
    wo: AdaptedLinear,
    ffn_norm: Tensor,
    w_up: AdaptedLinear,
    w_down: AdaptedLinear,
}

/// Which span of the context a cached position came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Prompt,
    Cot,
}

/// Per-layer keys and values for every processed position, plus a segment
/// label per position. With `detach` set, consumers see the cached entries
/// as constants and no gradient reaches their producers. Cloning shares
/// the underlying tensors, so forking a prompt cache per rollout is cheap.
#[derive(Clone)]
pub struct KVCache {
    keys: Vec<Tensor>,
    values: Vec<Tensor>,
    segments: Vec<Segment>,
    pub detach: bool,
}

impl KVCache {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn has_cot(&self) -> bool {
        self.segments.iter().any(|s| *s == Segment::Cot)
    }

    fn consume(&self, layer: usize) -> (Tensor, Tensor) {
        if self.detach {
            (self.keys[layer].detach(), self.values[layer].detach())
        } else {
            (self.keys[layer].clone(), self.values[layer].clone())
        }
    }
}

struct GateHead {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

/// Output of a reasoning pass over a full token sequence.
pub struct SequenceForward {
    /// Final-layer hidden states after the output norm, one row per token.
    pub hidden: Tensor,
    pub cache: KVCache,
    /// Hidden state at the last prompt position (the gate input).
    pub h_p: Tensor,
}

pub struct Model {
    pub cfg: BackboneConfig,
    tok_embed: Tensor,
    pos_embed: Tensor,
    layers: Vec<Layer>,
    final_norm: Tensor,
    unembed: Tensor,
    /// K learnable probe vectors whose pooled outputs form embeddings.
    probes: Tensor,
    gate: GateHead,
    active: Cell<Option<AdapterKind>>,
}

impl Model {
    pub fn new(cfg: BackboneConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = Rng::new(seed, Stream::Init);
        let d = cfg.d_model;
        let gauss = |rng: &mut Rng, n: usize, std: f64| -> Vec<f64> {
            (0..n).map(|_| rng.next_gaussian() * std).collect()
        };
        let tok_embed = Tensor::new(&[cfg.vocab_size, d], gauss(&mut rng, cfg.vocab_size * d, 0.02));
        let pos_embed = Tensor::new(&[cfg.max_seq, d], gauss(&mut rng, cfg.max_seq * d, 0.02));
        let layers = (0..cfg.n_layers)
            .map(|_| Layer {
                attn_norm: Tensor::new(&[d], vec![1.0; d]),
                wq: AdaptedLinear::new(d, d, cfg.lora_rank, &mut rng),
                wk: AdaptedLinear::new(d, d, cfg.lora_rank, &mut rng),
                wv: AdaptedLinear::new(d, d, cfg.lora_rank, &mut rng),
                wo: AdaptedLinear::new(d, d, cfg.lora_rank, &mut rng),
                ffn_norm: Tensor::new(&[d], vec![1.0; d]),
                w_up: AdaptedLinear::new(d, cfg.d_ffn, cfg.lora_rank, &mut rng),
                w_down: AdaptedLinear::new(cfg.d_ffn, d, cfg.lora_rank, &mut rng),
            })
            .collect();
        let final_norm = Tensor::new(&[d], vec![1.0; d]);
        let unembed = Tensor::new(
            &[d, cfg.vocab_size],
            gauss(&mut rng, d * cfg.vocab_size, 1.0 / (d as f64).sqrt()),
        );
        let probes = Tensor::param(&[cfg.k_probes, d], gauss(&mut rng, cfg.k_probes * d, 0.02));
        let gate = GateHead {
            w1: Tensor::param(&[d, d], gauss(&mut rng, d * d, 1.0 / (d as f64).sqrt())),
            b1: Tensor::param(&[d], vec![0.0; d]),
            // zero-initialized readout: the untrained gate sits at w = 0.5
            w2: Tensor::param(&[d, 1], vec![0.0; d]),
            b2: Tensor::param(&[1], vec![0.0]),
        };
        Ok(Model {
            cfg,
            tok_embed,
            pos_embed,
            layers,
            final_norm,
            unembed,
            probes,
            gate,
            active: Cell::new(None),
        })
    }

    fn lora_scale(&self) -> f64 {
        self.cfg.lora_alpha / self.cfg.lora_rank as f64
    }

    // ── Adapter switching ────────────────────────────────────────────

    pub fn set_active_adapter(&self, kind: AdapterKind) -> Result<(), ModelError> {
        if kind == AdapterKind::ReferenceReasoning && self.layers[0].wq.reference.is_none() {
            return Err(ModelError::NoReference);
        }
        self.active.set(Some(kind));
        Ok(())
    }

    /// Run on the raw frozen backbone (diagnostics; adapters untouched).
    pub fn clear_active_adapter(&self) {
        self.active.set(None);
    }

    pub fn active_adapter(&self) -> Option<AdapterKind> {
        self.active.get()
    }

    /// Snapshot the current reasoning adapter as the frozen reference
    /// policy. Call once at RL start.
    pub fn install_reference_adapter(&mut self) {
        for layer in &mut self.layers {
            for lin in [
                &mut layer.wq,
                &mut layer.wk,
                &mut layer.wv,
                &mut layer.wo,
                &mut layer.w_up,
                &mut layer.w_down,
            ] {
                lin.install_reference();
            }
        }
    }

    pub fn has_reference_adapter(&self) -> bool {
        self.layers[0].wq.reference.is_some()
    }

    pub fn probes(&self) -> &Tensor {
        &self.probes
    }

    // ── Forward passes ───────────────────────────────────────────────

    fn embed_positions(&self, tokens: &[usize], first_pos: usize) -> Result<Tensor, ModelError> {
        for &t in tokens {
            if t >= self.cfg.vocab_size {
                return Err(ModelError::BadToken(t));
            }
        }
        let tok = self.tok_embed.gather_rows(tokens);
        let pos: Vec<usize> = (first_pos..first_pos + tokens.len()).collect();
        Ok(tok.add(&self.pos_embed.gather_rows(&pos)))
    }

    /// One block: attention over `[context ; own positions]` plus FFN.
    /// `mask` has one row per input position and one column per attended
    /// position (context first, then the inputs themselves); `true` blocks.
    fn layer_block(
        &self,
        layer: &Layer,
        h: &Tensor,
        context: Option<(&Tensor, &Tensor)>,
        mask: Option<&[bool]>,
    ) -> (Tensor, Tensor, Tensor) {
        let active = self.active.get();
        let scale = self.lora_scale();
        let d = self.cfg.d_model;
        let dh = self.cfg.head_dim();
        let rows = h.shape()[0];

        let a_in = h.rms_norm(&layer.attn_norm, RMS_EPS);
        let q = layer.wq.forward(&a_in, active, scale);
        let k_new = layer.wk.forward(&a_in, active, scale);
        let v_new = layer.wv.forward(&a_in, active, scale);

        let (k_full, v_full) = match context {
            Some((ck, cv)) => (
                Tensor::concat_rows(&[ck.clone(), k_new.clone()]),
                Tensor::concat_rows(&[cv.clone(), v_new.clone()]),
            ),
            None => (k_new.clone(), v_new.clone()),
        };

        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.cfg.n_heads);
        for hd in 0..self.cfg.n_heads {
            let (c0, c1) = (hd * dh, (hd + 1) * dh);
            let q_h = q.slice_cols(c0, c1);
            let k_h = k_full.slice_cols(c0, c1);
            let v_h = v_full.slice_cols(c0, c1);
            let mut scores = q_h.matmul_nt(&k_h).scale(inv_sqrt);
            if let Some(m) = mask {
                debug_assert_eq!(m.len(), rows * k_full.shape()[0]);
                scores = scores.masked_fill(m, f64::NEG_INFINITY);
            }
            head_outs.push(scores.softmax_last().matmul(&v_h));
        }
        let attn = layer
            .wo
            .forward(&Tensor::concat_cols(&head_outs), active, scale);
        let h = h.add(&attn);

        let f_in = h.rms_norm(&layer.ffn_norm, RMS_EPS);
        let f = layer.w_down.forward(
            &layer.w_up.forward(&f_in, active, scale).tanh(),
            active,
            scale,
        );
        let _ = d;
        (h.add(&f), k_new, v_new)
    }

    /// Causal pass over a full token sequence. Positions before
    /// `prompt_len` are labeled prompt, the rest cot. Returns final hidden
    /// states, the KV cache covering every position, and the hidden state
    /// at the last prompt position.
    pub fn forward_sequence(
        &self,
        tokens: &[usize],
        prompt_len: usize,
    ) -> Result<SequenceForward, ModelError> {
        let t = tokens.len();
        assert!(
            prompt_len >= 1 && prompt_len <= t,
            "forward_sequence: prompt_len {prompt_len} out of range for {t} tokens"
        );
        if t > self.cfg.max_seq {
            return Err(ModelError::SequenceTooLong {
                len: t,
                max: self.cfg.max_seq,
            });
        }
        let mut h = self.embed_positions(tokens, 0)?;
        // causal: position i may not attend to j > i
        let mut causal = vec![false; t * t];
        for i in 0..t {
            for j in (i + 1)..t {
                causal[i * t + j] = true;
            }
        }
        let mut keys = Vec::with_capacity(self.cfg.n_layers);
        let mut values = Vec::with_capacity(self.cfg.n_layers);
        for layer in &self.layers {
            let (h_next, k, v) = self.layer_block(layer, &h, None, Some(&causal));
            keys.push(k);
            values.push(v);
            h = h_next;
        }
        let hidden = h.rms_norm(&self.final_norm, RMS_EPS);
        let h_p = hidden.slice_rows(prompt_len - 1, prompt_len);
        let mut segments = vec![Segment::Prompt; prompt_len];
        segments.extend(vec![Segment::Cot; t - prompt_len]);
        Ok(SequenceForward {
            hidden,
            cache: KVCache {
                keys,
                values,
                segments,
                detach: false,
            },
            h_p,
        })
    }

    /// Process one more token on top of an existing cache, appending its
    /// keys/values. Returns the post-norm hidden state for that position.
    pub fn forward_step(
        &self,
        token: usize,
        cache: &mut KVCache,
        segment: Segment,
    ) -> Result<Tensor, ModelError> {
        let pos = cache.len();
        if pos + 1 > self.cfg.max_seq {
            return Err(ModelError::SequenceTooLong {
                len: pos + 1,
                max: self.cfg.max_seq,
            });
        }
        let mut h = self.embed_positions(&[token], pos)?;
        for (l, layer) in self.layers.iter().enumerate() {
            let ctx = (cache.keys[l].clone(), cache.values[l].clone());
            let (h_next, k, v) = self.layer_block(layer, &h, Some((&ctx.0, &ctx.1)), None);
            cache.keys[l] = Tensor::concat_rows(&[ctx.0, k]);
            cache.values[l] = Tensor::concat_rows(&[ctx.1, v]);
            h = h_next;
        }
        cache.segments.push(segment);
        Ok(h.rms_norm(&self.final_norm, RMS_EPS))
    }

    /// Vocabulary logits for the given hidden rows.
    pub fn logits(&self, hidden: &Tensor) -> Tensor {
        hidden.matmul(&self.unembed)
    }

    /// Run the K probe vectors against a cache. Probes see each other in
    /// full (they are a set, not a sequence) plus the cached positions
    /// allowed by `admissible`; no position embedding is added. Does not
    /// grow the cache. Returns the post-norm probe hidden states `[K, d]`.
    pub fn probe_forward(&self, cache: &KVCache, admissible: &[bool]) -> Tensor {
        let s = cache.len();
        let k = self.cfg.k_probes;
        assert_eq!(
            admissible.len(),
            s,
            "probe_forward: admissible covers {} of {} cached positions",
            admissible.len(),
            s
        );
        // block-listed cache columns, shared by every probe row
        let cols = s + k;
        let mut mask = vec![false; k * cols];
        for (j, &adm) in admissible.iter().enumerate() {
            if !adm {
                for row in 0..k {
                    mask[row * cols + j] = true;
                }
            }
        }
        let mut h = self.probes.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let (ck, cv) = cache.consume(l);
            let (h_next, _, _) = self.layer_block(layer, &h, Some((&ck, &cv)), Some(&mask));
            h = h_next;
        }
        h.rms_norm(&self.final_norm, RMS_EPS)
    }

    // ── Gate ─────────────────────────────────────────────────────────

    /// Routing-gate logit for a `[1, d]` hidden state. The input is
    /// detached first: the routing loss trains only the gate head.
    pub fn gate_logit(&self, h_p: &Tensor) -> Tensor {
        let x = h_p.detach();
        x.matmul(&self.gate.w1)
            .add_row(&self.gate.b1)
            .tanh()
            .matmul(&self.gate.w2)
            .add_row(&self.gate.b2)
    }

    /// Gate score `w` in [0, 1]; the routing decision is `w >= 0.5`.
    pub fn gate_score(&self, h_p: &Tensor) -> f64 {
        let logit = no_grad(|| self.gate_logit(h_p));
        sigmoid(logit.item())
    }

    // ── Generation ───────────────────────────────────────────────────

    /// Autoregressively extend the cache with cot-labeled tokens, starting
    /// from the hidden state of the last existing position. Stops after
    /// emitting the closing answer tag, at `max_len` tokens, or when the
    /// position table runs out. Temperature 0 is greedy argmax with
    /// lowest-id tie-break.
    pub fn generate_trace(
        &self,
        cache: &mut KVCache,
        last_hidden: &Tensor,
        max_len: usize,
        temperature: f64,
        rng: &mut Rng,
    ) -> Trace {
        assert!(max_len >= 1, "generate_trace: max_len must be at least 1");
        no_grad(|| {
            let mut ids = Vec::new();
            let mut hidden = last_hidden.clone();
            while ids.len() < max_len && cache.len() < self.cfg.max_seq {
                let logits = self.logits(&hidden);
                let next = sample_token(&logits.to_vec(), temperature, rng);
                ids.push(next);
                if next == vocab::ANSWER_CLOSE {
                    break;
                }
                hidden = self
                    .forward_step(next, cache, Segment::Cot)
                    .expect("bounded by max_seq");
            }
            // the stop token joins the cache too so m_full covers the trace
            if ids.last() == Some(&vocab::ANSWER_CLOSE) && cache.len() < self.cfg.max_seq {
                let _ = self.forward_step(vocab::ANSWER_CLOSE, cache, Segment::Cot);
            }
            Trace::from_token_ids(ids)
        })
    }

    // ── Parameter access ─────────────────────────────────────────────

    /// Every parameter in stable order, frozen backbone included.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = vec![
            ("backbone.tok_embed".into(), self.tok_embed.clone()),
            ("backbone.pos_embed".into(), self.pos_embed.clone()),
            ("backbone.unembed".into(), self.unembed.clone()),
            ("backbone.final_norm".into(), self.final_norm.clone()),
            ("probes.z".into(), self.probes.clone()),
            ("gate.w1".into(), self.gate.w1.clone()),
            ("gate.b1".into(), self.gate.b1.clone()),
            ("gate.w2".into(), self.gate.w2.clone()),
            ("gate.b2".into(), self.gate.b2.clone()),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("backbone.layer{i}.attn_norm"), layer.attn_norm.clone()));
            out.push((format!("backbone.layer{i}.ffn_norm"), layer.ffn_norm.clone()));
            for (pname, lin) in [
                ("wq", &layer.wq),
                ("wk", &layer.wk),
                ("wv", &layer.wv),
                ("wo", &layer.wo),
                ("w_up", &layer.w_up),
                ("w_down", &layer.w_down),
            ] {
                out.push((format!("backbone.layer{i}.{pname}.weight"), lin.weight.clone()));
                out.push((format!("backbone.layer{i}.{pname}.bias"), lin.bias.clone()));
                out.push((format!("adapter.reasoning.layer{i}.{pname}.a"), lin.reasoning.a.clone()));
                out.push((format!("adapter.reasoning.layer{i}.{pname}.b"), lin.reasoning.b.clone()));
                out.push((format!("adapter.embedding.layer{i}.{pname}.a"), lin.embedding.a.clone()));
                out.push((format!("adapter.embedding.layer{i}.{pname}.b"), lin.embedding.b.clone()));
                if let Some(r) = &lin.reference {
                    out.push((format!("adapter.reference.layer{i}.{pname}.a"), r.a.clone()));
                    out.push((format!("adapter.reference.layer{i}.{pname}.b"), r.b.clone()));
                }
            }
        }
        out
    }

    /// Parameters by name prefix (adapter.reasoning, adapter.embedding, ...).
    pub fn params_with_prefix(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.named_params()
            .into_iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .collect()
    }

    /// Stage-1 trainable set: both adapters, the probes, and the gate.
    pub fn sft_params(&self) -> Vec<(String, Tensor)> {
        self.named_params()
            .into_iter()
            .filter(|(n, _)| {
                n.starts_with("adapter.reasoning")
                    || n.starts_with("adapter.embedding")
                    || n.starts_with("probes")
                    || n.starts_with("gate")
            })
            .collect()
    }

    /// Stage-2 trainable set: the reasoning adapter acting as the policy.
    pub fn policy_params(&self) -> Vec<(String, Tensor)> {
        self.params_with_prefix("adapter.reasoning")
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.named_params() {
            p.zero_grad();
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sample_token(logits: &[f64], temperature: f64, rng: &mut Rng) -> usize {
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let inv = 1.0 / temperature;
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&l| ((l - m) * inv).exp()).collect();
    rng.sample_weighted(&weights)
}
