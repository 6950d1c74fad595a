//! Embedding extraction from a shared KV cache under two attention masks,
//! plus the three inference modes.
//!
//! One reasoning pass over prompt(+trace) builds a cache; the probe tokens
//! then run under the embedding adapter against that cache twice: once
//! seeing only prompt positions (the base embedding) and once seeing the
//! full sequence (the cot-enhanced embedding). Because probes carry no
//! position embedding and masked columns contribute exact zeros, the base
//! extraction is bitwise identical to encoding the prompt with no trace in
//! the cache at all.

use crate::model::{AdapterKind, KVCache, Model, ModelError, Segment};
use crate::rng::Rng;
use crate::tensor::{no_grad, Tensor};
use crate::trace::Trace;
use crate::world::RetrievalPair;

/// Which of the two extraction masks to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// Probes attend to prompt positions and each other only.
    Prompt,
    /// Probes attend to prompt, cot, and each other.
    Full,
}

impl MaskKind {
    /// Admissible cached positions under this mask.
    pub fn admissible(self, segments: &[Segment]) -> Vec<bool> {
        segments
            .iter()
            .map(|s| match self {
                MaskKind::Prompt => *s == Segment::Prompt,
                MaskKind::Full => true,
            })
            .collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("full mask requested but the cache holds no cot entries")]
    NoCotInCache,
    #[error("sequence of {total} tokens plus {k} probes exceeds max_seq {max}")]
    TooLongWithProbes { total: usize, k: usize, max: usize },
}

/// A token sequence split into prompt and optional cot spans, checked
/// against the model's capacity including probe room.
#[derive(Debug, Clone)]
pub struct SegmentedSequence {
    pub prompt_ids: Vec<usize>,
    pub cot_ids: Vec<usize>,
    pub k_probes: usize,
}

impl SegmentedSequence {
    pub fn new(
        prompt_ids: Vec<usize>,
        cot_ids: Vec<usize>,
        model: &Model,
    ) -> Result<Self, EmbedError> {
        assert!(!prompt_ids.is_empty(), "segmented sequence: empty prompt");
        let total = prompt_ids.len() + cot_ids.len();
        let k = model.cfg.k_probes;
        if total + k > model.cfg.max_seq {
            return Err(EmbedError::TooLongWithProbes {
                total,
                k,
                max: model.cfg.max_seq,
            });
        }
        Ok(SegmentedSequence {
            prompt_ids,
            cot_ids,
            k_probes: k,
        })
    }

    pub fn total_len(&self) -> usize {
        self.prompt_ids.len() + self.cot_ids.len()
    }
}

/// Pool the probe outputs over a cache into a unit-norm `[1, d]` tensor.
/// The cache must have its detach flag set; embeddings never backpropagate
/// into the reasoning pass that built the cache.
pub fn extract_embedding_tensor(
    model: &Model,
    cache: &KVCache,
    mask: MaskKind,
) -> Result<Tensor, EmbedError> {
    assert!(cache.detach, "extract_embedding: cache detach flag must be set");
    if mask == MaskKind::Full && !cache.has_cot() {
        return Err(EmbedError::NoCotInCache);
    }
    let previous = model.active_adapter();
    model.set_active_adapter(AdapterKind::Embedding)?;
    let admissible = mask.admissible(cache.segments());
    let probe_out = model.probe_forward(cache, &admissible);
    let pooled = probe_out.mean_rows();
    let d = pooled.numel();
    let unit = pooled.reshape(&[1, d]).l2_normalize_last();
    match previous {
        Some(k) => model.set_active_adapter(k)?,
        None => model.clear_active_adapter(),
    }
    Ok(unit)
}

/// Inference modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode {
    Base,
    Cot,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceMode {
    Base,
    Cot,
}

/// A finished, unit-norm embedding.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub source_mode: SourceMode,
    pub trace_tokens: usize,
}

impl Embedding {
    pub fn cosine(&self, other: &Embedding) -> f64 {
        dot(&self.vector, &other.vector)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy)]
pub struct RouteDecision {
    pub w: f64,
    pub chose_cot: bool,
}

/// Result of encoding one item at inference time.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub embedding: Embedding,
    pub route: Option<RouteDecision>,
    pub trace: Trace,
}

/// Knobs for the generation step of the cot path.
#[derive(Debug, Clone, Copy)]
pub struct GenerationLimits {
    pub max_len: usize,
    pub temperature: f64,
}

/// Encode one item under the requested mode. Runs entirely without
/// gradients. Base: prompt-only extraction; cot: generate a trace first and
/// extract under the full mask; adaptive: the gate score on the last prompt
/// hidden state decides (cot at w >= 0.5).
pub fn encode(
    model: &Model,
    item_ids: &[usize],
    mode: EncodeMode,
    limits: GenerationLimits,
    rng: &mut Rng,
) -> Result<Encoded, EmbedError> {
    no_grad(|| {
        model.set_active_adapter(AdapterKind::Reasoning)?;
        let fwd = model.forward_sequence(item_ids, item_ids.len())?;
        let mut cache = fwd.cache;
        let route = match mode {
            EncodeMode::Adaptive => {
                let w = model.gate_score(&fwd.h_p);
                Some(RouteDecision {
                    w,
                    chose_cot: w >= 0.5,
                })
            }
            _ => None,
        };
        let take_cot = match mode {
            EncodeMode::Base => false,
            EncodeMode::Cot => true,
            EncodeMode::Adaptive => route.expect("adaptive sets route").chose_cot,
        };
        if take_cot {
            model.set_active_adapter(AdapterKind::Reasoning)?;
            let trace =
                model.generate_trace(&mut cache, &fwd.h_p, limits.max_len, limits.temperature, rng);
            cache.detach = true;
            // degenerate: generation exhausted the position table before
            // caching anything; fall back to the prompt mask
            let mask = if cache.has_cot() { MaskKind::Full } else { MaskKind::Prompt };
            let vector = extract_embedding_tensor(model, &cache, mask)?.to_vec();
            Ok(Encoded {
                embedding: Embedding {
                    vector,
                    source_mode: SourceMode::Cot,
                    trace_tokens: trace.token_count(),
                },
                route,
                trace,
            })
        } else {
            cache.detach = true;
            let vector = extract_embedding_tensor(model, &cache, MaskKind::Prompt)?.to_vec();
            Ok(Encoded {
                embedding: Embedding {
                    vector,
                    source_mode: SourceMode::Base,
                    trace_tokens: 0,
                },
                route,
                trace: Trace::empty(),
            })
        }
    })
}

/// Differentiable forward of one training side: a single reasoning pass
/// over prompt + annotated trace, both embeddings from the shared detached
/// cache, next-token logits over the trace span, and the gate logit.
pub struct SideForward {
    pub h_base: Tensor,
    pub h_cot: Tensor,
    pub gate_logit: Tensor,
    pub w: f64,
    /// Logits predicting each trace token, `[T_trace, vocab]`; absent when
    /// the annotated trace is empty.
    pub ntp_logits: Option<Tensor>,
    pub trace_targets: Vec<usize>,
}

pub fn encode_training_side(
    model: &Model,
    prompt_ids: &[usize],
    trace: &Trace,
) -> Result<SideForward, EmbedError> {
    let seq = SegmentedSequence::new(prompt_ids.to_vec(), trace.token_ids.clone(), model)?;
    model.set_active_adapter(AdapterKind::Reasoning)?;
    let mut tokens = seq.prompt_ids.clone();
    tokens.extend_from_slice(&seq.cot_ids);
    let p = seq.prompt_ids.len();
    let mut fwd = model.forward_sequence(&tokens, p)?;

    let t_trace = seq.cot_ids.len();
    let ntp_logits = if t_trace > 0 {
        // the hidden state at position p-1+t predicts trace token t
        let rows = fwd.hidden.slice_rows(p - 1, p - 1 + t_trace);
        Some(model.logits(&rows))
    } else {
        None
    };

    fwd.cache.detach = true;
    let h_base = extract_embedding_tensor(model, &fwd.cache, MaskKind::Prompt)?;
    let h_cot = if t_trace > 0 {
        extract_embedding_tensor(model, &fwd.cache, MaskKind::Full)?
    } else {
        // identical admissible sets; reuse the tensor so equality is exact
        h_base.clone()
    };
    let gate_logit = model.gate_logit(&fwd.h_p);
    let w = sigmoid(gate_logit.item());
    Ok(SideForward {
        h_base,
        h_cot,
        gate_logit,
        w,
        ntp_logits,
        trace_targets: seq.cot_ids,
    })
}

/// Both sides of a training pair through the shared-cache pipeline.
/// Missing annotations are treated as empty traces.
pub fn encode_training_pair(
    model: &Model,
    pair: &RetrievalPair,
) -> Result<(SideForward, SideForward), EmbedError> {
    let empty = Trace::empty();
    let query = encode_training_side(
        model,
        &pair.query_ids,
        pair.trace_query.as_ref().unwrap_or(&empty),
    )?;
    let target = encode_training_side(
        model,
        &pair.target_ids,
        pair.trace_target.as_ref().unwrap_or(&empty),
    )?;
    Ok((query, target))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
