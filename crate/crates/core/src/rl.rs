//! Embedding-guided reinforcement learning for the reasoning policy.
//!
//! The embedding adapter, probes, and gate are frozen for the whole stage,
//! so a fixed (query, trace) pair always embeds to the same vector and the
//! reward landscape never shifts under the policy. Target embeddings are
//! pre-computed once into a global cache; the gap reward scores a rollout
//! by how far the resulting query embedding separates the positive target
//! from a softmax-weighted pool of sampled negatives, and a binary format
//! reward keeps generations on the structured grammar. Updates are
//! group-relative: G rollouts per query, advantages normalized within the
//! group, clipped token-level importance ratios, and an exact KL penalty
//! against the frozen reference adapter.

use serde::{Deserialize, Serialize};

use crate::embed::{dot, extract_embedding_tensor, MaskKind};
use crate::model::{AdapterKind, Model};
use crate::rng::{Rng, Stream};
use crate::tensor::{no_grad, Tensor};
use crate::trace::{matches_grammar, Trace};
use crate::world::{Corpus, Difficulty, RetrievalPair};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RlHyper {
    /// Rollouts per query (G).
    pub group_size: usize,
    /// KL penalty coefficient against the reference policy.
    pub kl_beta: f64,
    /// Clipping range for importance ratios.
    pub clip_eps: f64,
    /// Softmax temperature weighting negative cosines in the gap reward.
    pub tau_r: f64,
    /// Negatives sampled from the global cache per reward evaluation.
    pub n_negatives: usize,
    /// Generation budget per rollout.
    pub max_gen: usize,
    pub sample_temperature: f64,
}

impl Default for RlHyper {
    fn default() -> Self {
        RlHyper {
            group_size: 8,
            kl_beta: 0.1,
            clip_eps: 0.2,
            tau_r: 0.1,
            n_negatives: 256,
            max_gen: 64,
            sample_temperature: 1.0,
        }
    }
}

impl RlHyper {
    pub fn validate(&self) -> Result<(), String> {
        if self.group_size < 2 {
            return Err(format!("group_size must be at least 2, got {}", self.group_size));
        }
        if !(0.0..1.0).contains(&self.clip_eps) || self.clip_eps == 0.0 {
            return Err(format!("clip_eps must lie in (0,1), got {}", self.clip_eps));
        }
        if self.tau_r <= 0.0 {
            return Err(format!("tau_r must be positive, got {}", self.tau_r));
        }
        if self.n_negatives < 1 {
            return Err("n_negatives must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RlError {
    #[error(transparent)]
    Embed(#[from] crate::embed::EmbedError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("duplicate target id {0:?} while building the global cache")]
    DuplicateTarget(String),
    #[error("target id {0:?} missing from the global cache")]
    MissingTarget(String),
    #[error("global cache needs at least 2 entries, got {0}")]
    CacheTooSmall(usize),
    #[error("cannot filter an empty dataset")]
    EmptyDataset,
    #[error("in-batch negatives need at least 2 queries per step")]
    BatchTooSmall,
}

// ── Global embedding cache ───────────────────────────────────────────

/// Pre-computed target embeddings, built once from a frozen checkpoint and
/// immutable afterwards.
#[derive(Debug, Clone)]
pub struct GlobalCache {
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

impl GlobalCache {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, idx: usize) -> &[f64] {
        &self.vectors[idx]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }
}

/// Encode every distinct target once: full mask over its annotated trace
/// when one is present and non-empty, prompt mask otherwise.
pub fn build_cache(model: &Model, corpus: &Corpus) -> Result<GlobalCache, RlError> {
    let mut ids: Vec<String> = Vec::with_capacity(corpus.targets.len());
    let mut vectors = Vec::with_capacity(corpus.targets.len());
    for doc in &corpus.targets {
        if ids.iter().any(|i| i == &doc.id) {
            return Err(RlError::DuplicateTarget(doc.id.clone()));
        }
        // first pair carrying this target supplies the annotation
        let trace = corpus
            .pairs
            .iter()
            .find(|p| p.target_id == doc.id && p.trace_target.is_some())
            .and_then(|p| p.trace_target.clone())
            .unwrap_or_else(Trace::empty);
        let vector = no_grad(|| -> Result<Vec<f64>, RlError> {
            model.set_active_adapter(AdapterKind::Reasoning)?;
            let mut tokens = doc.token_ids.clone();
            tokens.extend_from_slice(&trace.token_ids);
            let mut fwd = model.forward_sequence(&tokens, doc.token_ids.len())?;
            fwd.cache.detach = true;
            let mask = if trace.token_count() > 0 { MaskKind::Full } else { MaskKind::Prompt };
            Ok(extract_embedding_tensor(model, &fwd.cache, mask)?.to_vec())
        })?;
        ids.push(doc.id.clone());
        vectors.push(vector);
    }
    Ok(GlobalCache { ids, vectors })
}

// ── Rewards ──────────────────────────────────────────────────────────

/// Where the gap reward draws its negatives from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    /// Sample from the whole pre-computed cache.
    GlobalCache,
    /// Use only the other queries' positives within the step batch.
    InBatch,
}

#[derive(Debug, Clone, Copy)]
pub struct RewardRecord {
    pub r_gap: f64,
    pub r_fmt: f64,
    pub total: f64,
}

/// Cosine to the positive minus a softmax-weighted expectation of cosines
/// to sampled negatives (temperature `tau_r` up-weights hard negatives).
/// Negatives are drawn from `pool` without replacement; the positive is
/// never in the pool.
fn gap_reward_over_pool(
    h_q: &[f64],
    positive_idx: usize,
    pool: &[usize],
    cache: &GlobalCache,
    hyper: &RlHyper,
    rng: &mut Rng,
) -> f64 {
    let take = hyper.n_negatives.min(pool.len());
    let sampled: Vec<usize> = if take == pool.len() {
        pool.to_vec()
    } else {
        rng.sample_indices(pool.len(), take)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    };
    let cos_pos = dot(h_q, cache.vector(positive_idx));
    let cos_neg: Vec<f64> = sampled.iter().map(|&i| dot(h_q, cache.vector(i))).collect();
    let m = cos_neg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = cos_neg.iter().map(|c| ((c - m) / hyper.tau_r).exp()).collect();
    let z: f64 = weights.iter().sum();
    let expectation: f64 = cos_neg
        .iter()
        .zip(&weights)
        .map(|(c, w)| c * w / z)
        .sum();
    cos_pos - expectation
}

/// Gap reward against the global cache.
pub fn gap_reward(
    h_q: &[f64],
    positive_id: &str,
    cache: &GlobalCache,
    hyper: &RlHyper,
    rng: &mut Rng,
) -> Result<f64, RlError> {
    if cache.len() < 2 {
        return Err(RlError::CacheTooSmall(cache.len()));
    }
    let positive_idx = cache
        .index_of(positive_id)
        .ok_or_else(|| RlError::MissingTarget(positive_id.to_string()))?;
    let pool: Vec<usize> = (0..cache.len()).filter(|&i| i != positive_idx).collect();
    Ok(gap_reward_over_pool(h_q, positive_idx, &pool, cache, hyper, rng))
}

/// 1 iff the text matches `<think>...</think><answer>...</answer>`.
pub fn format_reward(text: &str) -> f64 {
    if matches_grammar(text) {
        1.0
    } else {
        0.0
    }
}

/// Group-normalized advantages with population standard deviation. A
/// spread below 1e-8 (reward ties) zeroes the whole group.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    let g = rewards.len();
    assert!(g >= 2, "group_advantages: need at least 2 rewards, got {g}");
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g as f64;
    let std = var.sqrt();
    if std < 1e-8 {
        return vec![0.0; g];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

// ── GRPO loss ────────────────────────────────────────────────────────

/// One sampled trace with everything the objective needs.
pub struct Rollout {
    pub trace: Trace,
    /// Per-token log-probs of the chosen tokens under the live policy
    /// (differentiable), length = trace tokens.
    pub log_probs_new: Tensor,
    /// Same tokens under the sampling-time policy (constants).
    pub log_probs_old: Vec<f64>,
    /// Exact per-token KL(policy || reference) over the full next-token
    /// distributions (differentiable through the policy).
    pub kl_per_token: Tensor,
    pub reward: RewardRecord,
    pub advantage: f64,
}

pub struct RolloutGroup {
    pub qid: String,
    pub rollouts: Vec<Rollout>,
}

/// Negated clipped-surrogate objective with KL regularization: per-token
/// ratios against the old policy, token-mean per rollout, group mean, minus
/// beta times the exact KL.
pub fn grpo_loss(group: &RolloutGroup, hyper: &RlHyper) -> Tensor {
    let g = group.rollouts.len();
    assert!(g >= 1, "grpo_loss: empty group");
    let mut per_rollout: Vec<Tensor> = Vec::with_capacity(g);
    for r in &group.rollouts {
        let t = r.trace.token_count();
        assert_eq!(
            r.log_probs_new.numel(),
            t,
            "grpo_loss: {} log-probs for a {t}-token trace",
            r.log_probs_new.numel()
        );
        assert_eq!(r.log_probs_old.len(), t, "grpo_loss: old log-prob length mismatch");
        let old = Tensor::new(&[t], r.log_probs_old.clone());
        let ratio = r.log_probs_new.sub(&old).exp();
        let clipped = ratio.clamp(1.0 - hyper.clip_eps, 1.0 + hyper.clip_eps);
        let surrogate = ratio
            .scale(r.advantage)
            .minimum(&clipped.scale(r.advantage))
            .mean_all();
        let kl = r.kl_per_token.mean_all();
        per_rollout.push(surrogate.sub(&kl.scale(hyper.kl_beta)));
    }
    let mut acc = per_rollout[0].clone();
    for p in &per_rollout[1..] {
        acc = acc.add(p);
    }
    acc.scale(1.0 / g as f64).neg()
}

// ── Differentiable policy pass ───────────────────────────────────────

/// Teacher-forced pass of prompt+trace under the live policy plus a frozen
/// reference pass, producing the differentiable pieces of a [`Rollout`].
pub fn policy_log_probs(
    model: &Model,
    prompt_ids: &[usize],
    trace: &Trace,
) -> Result<(Tensor, Tensor, f64), RlError> {
    let t = trace.token_count();
    assert!(t > 0, "policy_log_probs: empty trace");
    let mut tokens = prompt_ids.to_vec();
    tokens.extend_from_slice(&trace.token_ids);
    let p = prompt_ids.len();

    model.set_active_adapter(AdapterKind::Reasoning)?;
    let fwd = model.forward_sequence(&tokens, p)?;
    let rows = fwd.hidden.slice_rows(p - 1, p - 1 + t);
    let lp_full = model.logits(&rows).log_softmax_last();

    // reference distributions are constants
    let ref_lp = no_grad(|| -> Result<Tensor, RlError> {
        model.set_active_adapter(AdapterKind::ReferenceReasoning)?;
        let fwd = model.forward_sequence(&tokens, p)?;
        let rows = fwd.hidden.slice_rows(p - 1, p - 1 + t);
        Ok(model.logits(&rows).log_softmax_last())
    })?;
    model.set_active_adapter(AdapterKind::Reasoning)?;

    let v = lp_full.shape()[1];
    let mut onehot = vec![0.0; t * v];
    for (row, &tok) in trace.token_ids.iter().enumerate() {
        onehot[row * v + tok] = 1.0;
    }
    let pick = Tensor::new(&[t, v], onehot);
    let chosen = lp_full.mul(&pick).sum_last();

    // exact KL(policy || reference) per position
    let kl = lp_full.exp().mul(&lp_full.sub(&ref_lp)).sum_last();

    // policy entropy per position (metric only)
    let entropy = no_grad(|| {
        let lp = lp_full.to_vec();
        let mut h = 0.0;
        for row in 0..t {
            for j in 0..v {
                let l = lp[row * v + j];
                h -= l.exp() * l;
            }
        }
        h / t as f64
    });
    Ok((chosen, kl, entropy))
}

// ── Variance filtering ───────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct DispersionRecord {
    pub qid: String,
    pub difficulty: Difficulty,
    pub dispersion: f64,
    pub kept: bool,
}

/// Per sample: roll out `n_rollouts` traces, embed each under the full
/// mask, and score 1 minus the mean pairwise cosine. Keep the most
/// dispersed `keep_fraction` of each difficulty stratum.
pub fn variance_filter(
    model: &Model,
    pairs: &[RetrievalPair],
    n_rollouts: usize,
    keep_fraction: f64,
    hyper: &RlHyper,
    rng: &mut Rng,
) -> Result<(Vec<RetrievalPair>, Vec<DispersionRecord>), RlError> {
    assert!(n_rollouts >= 2, "variance_filter: need at least 2 rollouts");
    assert!(
        keep_fraction > 0.0 && keep_fraction <= 1.0,
        "variance_filter: keep_fraction must lie in (0, 1]"
    );
    if pairs.is_empty() {
        return Err(RlError::EmptyDataset);
    }
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(pairs.len());
    for (idx, pair) in pairs.iter().enumerate() {
        let embeddings = no_grad(|| -> Result<Vec<Vec<f64>>, RlError> {
            model.set_active_adapter(AdapterKind::Reasoning)?;
            let fwd = model.forward_sequence(&pair.query_ids, pair.query_ids.len())?;
            let mut out = Vec::with_capacity(n_rollouts);
            for _ in 0..n_rollouts {
                let mut cache = fwd.cache.clone();
                model.set_active_adapter(AdapterKind::Reasoning)?;
                let _trace = model.generate_trace(
                    &mut cache,
                    &fwd.h_p,
                    hyper.max_gen,
                    hyper.sample_temperature,
                    rng,
                );
                cache.detach = true;
                let mask = if cache.has_cot() { MaskKind::Full } else { MaskKind::Prompt };
                out.push(extract_embedding_tensor(model, &cache, mask)?.to_vec());
            }
            Ok(out)
        })?;
        let mut cos_sum = 0.0;
        let mut count = 0;
        for i in 0..embeddings.len() {
            for j in (i + 1)..embeddings.len() {
                cos_sum += dot(&embeddings[i], &embeddings[j]);
                count += 1;
            }
        }
        scored.push((idx, 1.0 - cos_sum / count as f64));
    }

    let mut kept_flags = vec![false; pairs.len()];
    for difficulty in [Difficulty::Easy, Difficulty::Hard] {
        let mut stratum: Vec<(usize, f64)> = scored
            .iter()
            .copied()
            .filter(|&(i, _)| pairs[i].difficulty == difficulty)
            .collect();
        let keep = (stratum.len() as f64 * keep_fraction).floor() as usize;
        stratum.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for &(i, _) in stratum.iter().take(keep) {
            kept_flags[i] = true;
        }
    }
    let records: Vec<DispersionRecord> = scored
        .iter()
        .map(|&(i, d)| DispersionRecord {
            qid: pairs[i].qid.clone(),
            difficulty: pairs[i].difficulty,
            dispersion: d,
            kept: kept_flags[i],
        })
        .collect();
    let kept: Vec<RetrievalPair> = pairs
        .iter()
        .enumerate()
        .filter(|(i, _)| kept_flags[*i])
        .map(|(_, p)| p.clone())
        .collect();
    Ok((kept, records))
}

// ── RL training loop ─────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct RlRunConfig {
    pub steps: usize,
    pub queries_per_step: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub hyper: RlHyper,
    pub negative_source: NegativeSource,
    /// Rollouts per sample in the variance filter.
    pub n_rollouts: usize,
    pub keep_fraction: f64,
    /// Training pairs considered for the RL pool before filtering
    /// (0 = use every clean pair).
    pub pool_size: usize,
    pub seed: u64,
}

impl Default for RlRunConfig {
    fn default() -> Self {
        RlRunConfig {
            steps: 200,
            queries_per_step: 2,
            lr: 1e-4,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            hyper: RlHyper::default(),
            negative_source: NegativeSource::GlobalCache,
            n_rollouts: 8,
            keep_fraction: 0.5,
            pool_size: 0,
            seed: 0,
        }
    }
}

/// Embed a (prompt, trace) pair through the frozen reward pipeline: the
/// cache comes from the reference reasoning adapter when one is installed
/// (so the map from traces to embeddings never shifts while the policy
/// trains), and the probes run under the frozen embedding adapter.
pub fn reward_embedding(
    model: &Model,
    prompt_ids: &[usize],
    trace: &Trace,
) -> Result<Vec<f64>, RlError> {
    no_grad(|| {
        let encode_adapter = if model.has_reference_adapter() {
            AdapterKind::ReferenceReasoning
        } else {
            AdapterKind::Reasoning
        };
        model.set_active_adapter(encode_adapter)?;
        let mut tokens = prompt_ids.to_vec();
        tokens.extend_from_slice(&trace.token_ids);
        let mut fwd = model.forward_sequence(&tokens, prompt_ids.len())?;
        fwd.cache.detach = true;
        let mask = if fwd.cache.has_cot() { MaskKind::Full } else { MaskKind::Prompt };
        Ok(extract_embedding_tensor(model, &fwd.cache, mask)?.to_vec())
    })
}

/// Gap reward drawing negatives either from the whole cache or from the
/// step batch's other positives.
pub fn gap_reward_with_source(
    h_q: &[f64],
    positive_id: &str,
    cache: &GlobalCache,
    batch_positive_ids: &[String],
    source: NegativeSource,
    hyper: &RlHyper,
    rng: &mut Rng,
) -> Result<f64, RlError> {
    match source {
        NegativeSource::GlobalCache => gap_reward(h_q, positive_id, cache, hyper, rng),
        NegativeSource::InBatch => {
            let positive_idx = cache
                .index_of(positive_id)
                .ok_or_else(|| RlError::MissingTarget(positive_id.to_string()))?;
            let mut pool: Vec<usize> = Vec::new();
            for id in batch_positive_ids {
                let idx = cache
                    .index_of(id)
                    .ok_or_else(|| RlError::MissingTarget(id.clone()))?;
                if idx != positive_idx && !pool.contains(&idx) {
                    pool.push(idx);
                }
            }
            if pool.is_empty() {
                return Err(RlError::BatchTooSmall);
            }
            Ok(gap_reward_over_pool(h_q, positive_idx, &pool, cache, hyper, rng))
        }
    }
}

/// Sample G traces per query, score them against the frozen embedder,
/// normalize advantages within each group, and apply one policy update.
#[allow(clippy::too_many_arguments)]
pub fn rl_step(
    model: &Model,
    batch: &[&RetrievalPair],
    cache: &GlobalCache,
    cfg: &RlRunConfig,
    opt: &mut crate::optim::AdamW,
    rng_sampling: &mut Rng,
    rng_negatives: &mut Rng,
) -> Result<crate::train::RlStepRow, RlError> {
    let hyper = &cfg.hyper;
    let batch_positive_ids: Vec<String> = batch.iter().map(|p| p.target_id.clone()).collect();

    let mut groups: Vec<RolloutGroup> = Vec::with_capacity(batch.len());
    let mut gap_sum = 0.0;
    let mut fmt_sum = 0.0;
    let mut len_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut entropy_sum = 0.0;
    let mut n_rollouts = 0usize;

    for pair in batch {
        // sample the group from the live policy, then embed each rollout
        // through the frozen reward pipeline
        let sampled: Vec<(Trace, Vec<f64>)> = no_grad(|| -> Result<_, RlError> {
            model.set_active_adapter(AdapterKind::Reasoning)?;
            let fwd = model.forward_sequence(&pair.query_ids, pair.query_ids.len())?;
            let mut out = Vec::with_capacity(hyper.group_size);
            for _ in 0..hyper.group_size {
                let mut rollout_cache = fwd.cache.clone();
                model.set_active_adapter(AdapterKind::Reasoning)?;
                let trace = model.generate_trace(
                    &mut rollout_cache,
                    &fwd.h_p,
                    hyper.max_gen,
                    hyper.sample_temperature,
                    rng_sampling,
                );
                let h_q = reward_embedding(model, &pair.query_ids, &trace)?;
                out.push((trace, h_q));
            }
            Ok(out)
        })?;

        let mut rewards = Vec::with_capacity(hyper.group_size);
        for (trace, h_q) in &sampled {
            let r_gap = gap_reward_with_source(
                h_q,
                &pair.target_id,
                cache,
                &batch_positive_ids,
                cfg.negative_source,
                hyper,
                rng_negatives,
            )?;
            let r_fmt = format_reward(&trace.text);
            rewards.push(RewardRecord {
                r_gap,
                r_fmt,
                total: r_gap + r_fmt,
            });
        }
        let advantages = group_advantages(
            &rewards.iter().map(|r| r.total).collect::<Vec<f64>>(),
        );

        let mut rollouts = Vec::with_capacity(hyper.group_size);
        for ((trace, _), (reward, advantage)) in
            sampled.into_iter().zip(rewards.into_iter().zip(advantages))
        {
            let (lp_new, kl, entropy) = policy_log_probs(model, &pair.query_ids, &trace)?;
            gap_sum += reward.r_gap;
            fmt_sum += reward.r_fmt;
            len_sum += trace.token_count() as f64;
            kl_sum += kl.to_vec().iter().sum::<f64>() / trace.token_count() as f64;
            entropy_sum += entropy;
            n_rollouts += 1;
            rollouts.push(Rollout {
                trace,
                // refreshed every step: the sampling policy is the live one
                log_probs_old: lp_new.to_vec(),
                log_probs_new: lp_new,
                kl_per_token: kl,
                reward,
                advantage,
            });
        }
        groups.push(RolloutGroup {
            qid: pair.qid.clone(),
            rollouts,
        });
    }

    let mut loss = grpo_loss(&groups[0], hyper);
    for g in &groups[1..] {
        loss = loss.add(&grpo_loss(g, hyper));
    }
    let loss = loss.scale(1.0 / groups.len() as f64);
    loss.backward();
    opt.step();

    let n = n_rollouts as f64;
    Ok(crate::train::RlStepRow {
        step: 0,
        mean_gap_reward: gap_sum / n,
        mean_fmt_reward: fmt_sum / n,
        mean_len: len_sum / n,
        kl: kl_sum / n,
        entropy: entropy_sum / n,
    })
}

/// Outcome of a full Stage-2 run.
pub struct RlRun {
    pub rows: Vec<crate::train::RlStepRow>,
    pub cache: GlobalCache,
    pub filter_records: Vec<DispersionRecord>,
    pub pool_len: usize,
}

/// Full Stage-2 run: freeze the reference policy, build the global cache,
/// variance-filter the pool, then take `steps` policy updates.
pub fn train_rl(
    model: &mut Model,
    corpus: &Corpus,
    train_idx: &[usize],
    cfg: &RlRunConfig,
) -> Result<RlRun, RlError> {
    cfg.hyper
        .validate()
        .map_err(crate::model::ModelError::BadConfig)?;
    if cfg.negative_source == NegativeSource::InBatch && cfg.queries_per_step < 2 {
        return Err(RlError::BatchTooSmall);
    }
    model.install_reference_adapter();
    let cache = build_cache(model, corpus)?;

    let clean: Vec<&RetrievalPair> = train_idx
        .iter()
        .map(|&i| &corpus.pairs[i])
        .filter(|p| p.clean)
        .collect();
    if clean.is_empty() {
        return Err(RlError::EmptyDataset);
    }
    for p in &clean {
        if cache.index_of(&p.target_id).is_none() {
            return Err(RlError::MissingTarget(p.target_id.clone()));
        }
    }

    let mut pool_rng = Rng::new(cfg.seed, Stream::Batching);
    let mut candidates: Vec<RetrievalPair> = clean.into_iter().cloned().collect();
    pool_rng.shuffle(&mut candidates);
    if cfg.pool_size > 0 && candidates.len() > cfg.pool_size {
        candidates.truncate(cfg.pool_size);
    }
    let mut filter_rng = Rng::new(cfg.seed, Stream::Sampling);
    let (pool, filter_records) = variance_filter(
        model,
        &candidates,
        cfg.n_rollouts,
        cfg.keep_fraction,
        &cfg.hyper,
        &mut filter_rng,
    )?;
    let pool = if pool.is_empty() { candidates } else { pool };

    let mut opt = crate::optim::AdamW::new(
        crate::optim::AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            max_grad_norm: cfg.grad_clip,
            ..crate::optim::AdamWConfig::default()
        },
        model.policy_params(),
    );
    let mut rng_sampling = Rng::with_stream_id(cfg.seed, Stream::Sampling as u64 + 1000);
    let mut rng_negatives = Rng::new(cfg.seed, Stream::Negatives);
    let mut rows = Vec::with_capacity(cfg.steps);
    let mut cursor = 0usize;
    for step in 0..cfg.steps {
        let mut batch: Vec<&RetrievalPair> = Vec::with_capacity(cfg.queries_per_step);
        for _ in 0..cfg.queries_per_step.min(pool.len()) {
            batch.push(&pool[cursor % pool.len()]);
            cursor += 1;
        }
        let mut row = rl_step(
            model,
            &batch,
            &cache,
            cfg,
            &mut opt,
            &mut rng_sampling,
            &mut rng_negatives,
        )?;
        row.step = step;
        rows.push(row);
    }
    Ok(RlRun {
        rows,
        pool_len: pool.len(),
        cache,
        filter_records,
    })
}

/// Mean gap and format reward of greedy traces on held-out queries,
/// scored against a fixed cache with freshly seeded negative draws so two
/// calls are directly comparable.
pub fn heldout_reward(
    model: &Model,
    corpus: &Corpus,
    eval_idx: &[usize],
    cache: &GlobalCache,
    hyper: &RlHyper,
    seed: u64,
) -> Result<(f64, f64), RlError> {
    let mut rng_negatives = Rng::new(seed, Stream::Negatives);
    let mut rng_sampling = Rng::new(seed, Stream::Sampling);
    let mut gap_sum = 0.0;
    let mut fmt_sum = 0.0;
    for &pi in eval_idx {
        let pair = &corpus.pairs[pi];
        let trace = no_grad(|| -> Result<_, RlError> {
            model.set_active_adapter(AdapterKind::Reasoning)?;
            let fwd = model.forward_sequence(&pair.query_ids, pair.query_ids.len())?;
            let mut rollout_cache = fwd.cache.clone();
            Ok(model.generate_trace(&mut rollout_cache, &fwd.h_p, hyper.max_gen, 0.0, &mut rng_sampling))
        })?;
        let h_q = reward_embedding(model, &pair.query_ids, &trace)?;
        gap_sum += gap_reward(&h_q, &pair.target_id, cache, hyper, &mut rng_negatives)?;
        fmt_sum += format_reward(&trace.text);
    }
    let n = eval_idx.len() as f64;
    Ok((gap_sum / n, fmt_sum / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BackboneConfig;
    use crate::rng::Stream;
    use crate::vocab;
    use crate::world::{annotate_and_filter, generate_corpus, JudgeAssignment, WorldSpec};

    fn tiny_model(seed: u64) -> Model {
        Model::new(
            BackboneConfig {
                d_model: 16,
                n_layers: 2,
                n_heads: 2,
                d_ffn: 32,
                max_seq: 96,
                k_probes: 4,
                lora_rank: 2,
                lora_alpha: 4.0,
                ..BackboneConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    fn tiny_world(seed: u64) -> (Corpus, WorldSpec) {
        let spec = WorldSpec {
            n_attributes: 12,
            n_targets: 8,
            n_easy: 6,
            n_hard: 6,
            hard_rule_depth: 1,
            teacher_noise: 0.0,
            seed,
        };
        let mut corpus = generate_corpus(&spec).unwrap();
        annotate_and_filter(&mut corpus, &spec, JudgeAssignment::default());
        (corpus, spec)
    }

    fn unit(mut v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v {
            *x /= n;
        }
        v
    }

    fn hand_cache(rows: Vec<Vec<f64>>) -> GlobalCache {
        GlobalCache {
            ids: (0..rows.len()).map(|i| format!("t{i:05}")).collect(),
            vectors: rows.into_iter().map(unit).collect(),
        }
    }

    #[test]
    fn cache_has_one_unit_row_per_target() {
        let model = tiny_model(1);
        let (corpus, _) = tiny_world(1);
        let cache = build_cache(&model, &corpus).unwrap();
        assert_eq!(cache.len(), corpus.targets.len());
        for i in 0..cache.len() {
            let norm: f64 = cache.vector(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cache_rebuild_is_bitwise_identical() {
        let model = tiny_model(2);
        let (corpus, _) = tiny_world(2);
        let a = build_cache(&model, &corpus).unwrap();
        let b = build_cache(&model, &corpus).unwrap();
        for i in 0..a.len() {
            let (x, y) = (a.vector(i), b.vector(i));
            assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn duplicate_target_ids_rejected() {
        let model = tiny_model(3);
        let (mut corpus, _) = tiny_world(3);
        let dup = corpus.targets[0].clone();
        corpus.targets.push(dup);
        assert!(matches!(
            build_cache(&model, &corpus),
            Err(RlError::DuplicateTarget(_))
        ));
    }

    #[test]
    fn single_negative_reduces_to_plain_difference() {
        let cache = hand_cache(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let hyper = RlHyper {
            n_negatives: 1,
            ..RlHyper::default()
        };
        let h_q = unit(vec![3.0, 4.0]);
        let mut rng = Rng::new(0, Stream::Negatives);
        let r = gap_reward(&h_q, "t00000", &cache, &hyper, &mut rng).unwrap();
        assert!((r - (0.6 - 0.8)).abs() < 1e-12, "r = {r}");
    }

    #[test]
    fn reward_extremes_hit_one() {
        // query equal to its positive, negatives orthogonal
        let cache = hand_cache(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let hyper = RlHyper {
            n_negatives: 8,
            ..RlHyper::default()
        };
        let h_q = vec![1.0, 0.0, 0.0];
        let mut rng = Rng::new(1, Stream::Negatives);
        let r = gap_reward(&h_q, "t00000", &cache, &hyper, &mut rng).unwrap();
        assert!((r - 1.0).abs() < 1e-12, "r = {r}");
    }

    #[test]
    fn equal_cosine_negatives_weight_evenly() {
        // two negatives at the same cosine: expectation is their mean
        let cache = hand_cache(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let hyper = RlHyper {
            n_negatives: 2,
            tau_r: 0.1,
            ..RlHyper::default()
        };
        let h_q = unit(vec![1.0, 1.0, 1.0]);
        let mut rng = Rng::new(2, Stream::Negatives);
        let r = gap_reward(&h_q, "t00000", &cache, &hyper, &mut rng).unwrap();
        let c = 1.0 / 3.0f64.sqrt();
        assert!((r - (c - c)).abs() < 1e-12, "r = {r}");
    }

    #[test]
    fn missing_positive_is_an_error() {
        let cache = hand_cache(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let mut rng = Rng::new(0, Stream::Negatives);
        assert!(matches!(
            gap_reward(&[1.0, 0.0], "nope", &cache, &RlHyper::default(), &mut rng),
            Err(RlError::MissingTarget(_))
        ));
    }

    #[test]
    fn large_tau_approaches_uniform_expectation() {
        let cache = hand_cache(vec![
            vec![1.0, 0.0],
            unit(vec![1.0, 1.0]),
            unit(vec![1.0, -1.0]),
            vec![0.0, 1.0],
        ]);
        let h_q = vec![1.0, 0.0];
        let negs = [unit(vec![1.0, 1.0]), unit(vec![1.0, -1.0]), vec![0.0, 1.0]];
        let uniform_mean: f64 = negs.iter().map(|n| dot(&h_q, n)).sum::<f64>() / 3.0;
        let hyper = RlHyper {
            n_negatives: 3,
            tau_r: 1e6,
            ..RlHyper::default()
        };
        let mut rng = Rng::new(3, Stream::Negatives);
        let r = gap_reward(&h_q, "t00000", &cache, &hyper, &mut rng).unwrap();
        assert!((r - (1.0 - uniform_mean)).abs() < 1e-6, "r = {r}");
    }

    #[test]
    fn format_reward_binary_on_grammar() {
        assert_eq!(format_reward("<think>a</think><answer>b</answer>"), 1.0);
        assert_eq!(format_reward("<answer>b</answer>"), 0.0);
        assert_eq!(format_reward("<think></think><answer>x</answer>"), 1.0);
    }

    #[test]
    fn advantages_normalize_and_sum_to_zero() {
        let adv = group_advantages(&[0.0, 1.0]);
        assert!((adv[0] + 1.0).abs() < 1e-12 && (adv[1] - 1.0).abs() < 1e-12);
        let adv = group_advantages(&[0.3, 0.3, 0.3, 0.3]);
        assert!(adv.iter().all(|a| *a == 0.0));
        let adv = group_advantages(&[0.1, 0.7, -0.3, 0.4]);
        assert!(adv.iter().sum::<f64>().abs() < 1e-12);
    }

    fn fixed_rollout(lp: Vec<f64>, old: Vec<f64>, kl: Vec<f64>, advantage: f64) -> Rollout {
        let t = lp.len();
        let ids = vec![vocab::attr_token(0); t];
        Rollout {
            trace: Trace::from_token_ids(ids),
            log_probs_new: Tensor::param(&[t], lp),
            log_probs_old: old,
            kl_per_token: Tensor::new(&[t], kl),
            reward: RewardRecord { r_gap: 0.0, r_fmt: 0.0, total: 0.0 },
            advantage,
        }
    }

    #[test]
    fn identical_policies_give_zero_loss() {
        let lp = vec![-1.0, -2.0];
        let rollouts = vec![
            fixed_rollout(lp.clone(), lp.clone(), vec![0.0, 0.0], 1.0),
            fixed_rollout(lp.clone(), lp.clone(), vec![0.0, 0.0], -1.0),
        ];
        let group = RolloutGroup { qid: "q".into(), rollouts };
        let loss = grpo_loss(&group, &RlHyper::default());
        assert!(loss.item().abs() < 1e-12, "loss = {}", loss.item());
    }

    #[test]
    fn zero_advantages_leave_only_the_kl_term() {
        let rollouts = vec![
            fixed_rollout(vec![-1.0], vec![-1.5], vec![0.25], 0.0),
            fixed_rollout(vec![-1.0], vec![-0.5], vec![0.75], 0.0),
        ];
        let group = RolloutGroup { qid: "q".into(), rollouts };
        let hyper = RlHyper { kl_beta: 0.1, ..RlHyper::default() };
        let loss = grpo_loss(&group, &hyper);
        assert!((loss.item() - 0.1 * 0.5).abs() < 1e-12, "loss = {}", loss.item());
    }

    #[test]
    fn clip_caps_the_surrogate() {
        // ratio 2 with advantage 1 and eps 0.2: min(2, 1.2) = 1.2
        let lp_new = vec![2.0f64.ln()];
        let rollouts = vec![
            fixed_rollout(lp_new, vec![0.0], vec![0.0], 1.0),
            fixed_rollout(vec![0.0], vec![0.0], vec![0.0], 0.0),
        ];
        let group = RolloutGroup { qid: "q".into(), rollouts };
        let hyper = RlHyper { clip_eps: 0.2, kl_beta: 0.0, ..RlHyper::default() };
        let loss = grpo_loss(&group, &hyper);
        assert!((loss.item() + 1.2 / 2.0).abs() < 1e-12, "loss = {}", loss.item());
    }

    #[test]
    fn all_equal_rewards_make_the_surrogate_update_exactly_zero() {
        let model = tiny_model(4);
        let mut model = model;
        model.install_reference_adapter();
        let prompt = vec![vocab::QUERY_MARK, vocab::attr_token(1)];
        let trace = Trace::from_parts(&[], &[vocab::attr_token(2)]);
        let advantages = group_advantages(&[0.7, 0.7]);
        let mut rollouts = Vec::new();
        for &adv in &advantages {
            let (lp, kl, _) = policy_log_probs(&model, &prompt, &trace).unwrap();
            rollouts.push(Rollout {
                trace: trace.clone(),
                log_probs_old: lp.to_vec(),
                log_probs_new: lp,
                kl_per_token: kl,
                reward: RewardRecord { r_gap: 0.7, r_fmt: 0.0, total: 0.7 },
                advantage: adv,
            });
        }
        let group = RolloutGroup { qid: "q".into(), rollouts };
        // beta = 0 isolates the surrogate term
        let hyper = RlHyper { kl_beta: 0.0, ..RlHyper::default() };
        model.zero_grads();
        grpo_loss(&group, &hyper).backward();
        for (name, p) in model.policy_params() {
            if let Some(g) = p.grad() {
                assert!(g.iter().all(|x| *x == 0.0), "{name} has nonzero surrogate gradient");
            }
        }
    }

    #[test]
    fn exact_kl_is_nonnegative_and_zero_against_self() {
        let mut model = tiny_model(5);
        model.install_reference_adapter();
        let prompt = vec![vocab::QUERY_MARK, vocab::attr_token(3)];
        let trace = Trace::from_parts(&[vocab::attr_token(1)], &[vocab::attr_token(2)]);
        let (_, kl, _) = policy_log_probs(&model, &prompt, &trace).unwrap();
        for v in kl.to_vec() {
            assert!(v.abs() < 1e-12, "kl vs identical reference = {v}");
        }
        // perturb the policy and the kl goes positive
        for (_, p) in model.params_with_prefix("adapter.reasoning") {
            let mut rng = Rng::new(6, Stream::Init);
            let bump: Vec<f64> = p.to_vec().iter().map(|x| x + 0.3 * rng.next_gaussian()).collect();
            p.set_data(&bump);
        }
        let (_, kl, _) = policy_log_probs(&model, &prompt, &trace).unwrap();
        for v in kl.to_vec() {
            assert!(v >= -1e-12, "exact kl must be non-negative, got {v}");
        }
        assert!(kl.to_vec().iter().sum::<f64>() > 0.0);
    }

    #[test]
    fn grpo_gradient_matches_finite_differences() {
        // tiny instance: check d(loss)/d(log_probs_new)
        let lp = Tensor::param(&[3], vec![-1.0, -0.5, -2.0]);
        let old = vec![-0.9, -0.6, -1.8];
        let make_group = |lp: &Tensor| {
            let r1 = Rollout {
                trace: Trace::from_token_ids(vec![vocab::attr_token(0); 3]),
                log_probs_new: lp.clone(),
                log_probs_old: old.clone(),
                kl_per_token: lp.mul(lp).scale(0.05),
                reward: RewardRecord { r_gap: 0.4, r_fmt: 1.0, total: 1.4 },
                advantage: 1.0,
            };
            let r2 = Rollout {
                trace: Trace::from_token_ids(vec![vocab::attr_token(0); 3]),
                log_probs_new: lp.scale(0.5),
                log_probs_old: old.clone(),
                kl_per_token: Tensor::new(&[3], vec![0.1, 0.2, 0.3]),
                reward: RewardRecord { r_gap: -0.4, r_fmt: 0.0, total: -0.4 },
                advantage: -1.0,
            };
            RolloutGroup { qid: "q".into(), rollouts: vec![r1, r2] }
        };
        let hyper = RlHyper { clip_eps: 0.5, kl_beta: 0.1, ..RlHyper::default() };
        let err = crate::tensor::check_gradient(
            |t| grpo_loss(&make_group(t), &hyper),
            &lp,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn rewards_stay_in_their_documented_ranges() {
        let model = tiny_model(7);
        let (corpus, _) = tiny_world(7);
        let cache = build_cache(&model, &corpus).unwrap();
        let hyper = RlHyper { n_negatives: 4, ..RlHyper::default() };
        let mut rng = Rng::new(11, Stream::Negatives);
        for pair in corpus.pairs.iter().take(6) {
            let bank_row = cache.index_of(&pair.target_id).unwrap();
            let h_q = cache.vector(bank_row).to_vec(); // any unit vector works
            let r = gap_reward(&h_q, &pair.target_id, &cache, &hyper, &mut rng).unwrap();
            assert!((-2.0..=2.0).contains(&r), "gap reward {r} out of range");
        }
    }

    #[test]
    fn variance_filter_halves_strata_and_orders_by_dispersion() {
        let model = tiny_model(8);
        let (corpus, _) = tiny_world(8);
        let pairs: Vec<RetrievalPair> = corpus.pairs.clone();
        let hyper = RlHyper { max_gen: 10, ..RlHyper::default() };
        let mut rng = Rng::new(9, Stream::Sampling);
        let (kept, records) = variance_filter(&model, &pairs, 4, 0.5, &hyper, &mut rng).unwrap();
        let easy_total = pairs.iter().filter(|p| p.difficulty == Difficulty::Easy).count();
        let hard_total = pairs.len() - easy_total;
        let easy_kept = kept.iter().filter(|p| p.difficulty == Difficulty::Easy).count();
        let hard_kept = kept.len() - easy_kept;
        assert_eq!(easy_kept, easy_total / 2);
        assert_eq!(hard_kept, hard_total / 2);
        // kept dispersion never falls below discarded within a stratum
        for d in [Difficulty::Easy, Difficulty::Hard] {
            let min_kept = records
                .iter()
                .filter(|r| r.kept && r.difficulty == d)
                .map(|r| r.dispersion)
                .fold(f64::INFINITY, f64::min);
            let max_dropped = records
                .iter()
                .filter(|r| !r.kept && r.difficulty == d)
                .map(|r| r.dispersion)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(min_kept >= max_dropped, "{d}: kept {min_kept} < dropped {max_dropped}");
        }
    }

    #[test]
    fn keep_fraction_one_is_identity() {
        let model = tiny_model(9);
        let (corpus, _) = tiny_world(9);
        let hyper = RlHyper { max_gen: 8, ..RlHyper::default() };
        let mut rng = Rng::new(10, Stream::Sampling);
        let (kept, _) = variance_filter(&model, &corpus.pairs, 2, 1.0, &hyper, &mut rng).unwrap();
        assert_eq!(kept.len(), corpus.pairs.len());
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let model = tiny_model(10);
        let hyper = RlHyper::default();
        let mut rng = Rng::new(0, Stream::Sampling);
        assert!(matches!(
            variance_filter(&model, &[], 2, 0.5, &hyper, &mut rng),
            Err(RlError::EmptyDataset)
        ));
    }

    fn small_rl_cfg(steps: usize, seed: u64) -> RlRunConfig {
        RlRunConfig {
            steps,
            queries_per_step: 2,
            lr: 1e-3,
            weight_decay: 0.0,
            grad_clip: 1.0,
            hyper: RlHyper {
                group_size: 3,
                max_gen: 10,
                n_negatives: 4,
                ..RlHyper::default()
            },
            negative_source: NegativeSource::GlobalCache,
            n_rollouts: 2,
            keep_fraction: 1.0,
            pool_size: 4,
            seed,
        }
    }

    #[test]
    fn frozen_components_are_bitwise_unchanged_by_rl() {
        let mut model = tiny_model(20);
        let (corpus, _) = tiny_world(20);
        let idx: Vec<usize> = (0..corpus.pairs.len()).collect();
        let frozen_prefixes = ["backbone", "adapter.embedding", "probes", "gate"];
        let before: Vec<(String, Vec<f64>)> = frozen_prefixes
            .iter()
            .flat_map(|p| model.params_with_prefix(p))
            .map(|(n, t)| (n, t.to_vec()))
            .collect();
        train_rl(&mut model, &corpus, &idx, &small_rl_cfg(2, 20)).unwrap();
        let after: Vec<(String, Vec<f64>)> = frozen_prefixes
            .iter()
            .flat_map(|p| model.params_with_prefix(p))
            .map(|(n, t)| (n, t.to_vec()))
            .collect();
        for ((name, a), (_, b)) in before.iter().zip(&after) {
            assert!(
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
                "{name} changed during RL"
            );
        }
        // reference equals the pre-RL policy, and the live policy moved
        let reference: Vec<Vec<f64>> = model
            .params_with_prefix("adapter.reference")
            .iter()
            .map(|(_, p)| p.to_vec())
            .collect();
        let policy: Vec<Vec<f64>> = model
            .params_with_prefix("adapter.reasoning")
            .iter()
            .map(|(_, p)| p.to_vec())
            .collect();
        assert_ne!(reference, policy);
    }

    #[test]
    fn zero_learning_rate_reports_metrics_but_moves_nothing() {
        let mut model = tiny_model(21);
        let (corpus, _) = tiny_world(21);
        let idx: Vec<usize> = (0..corpus.pairs.len()).collect();
        let before: Vec<Vec<f64>> = model
            .params_with_prefix("adapter.reasoning")
            .iter()
            .map(|(_, p)| p.to_vec())
            .collect();
        let cfg = RlRunConfig {
            lr: 0.0,
            weight_decay: 0.0,
            ..small_rl_cfg(2, 21)
        };
        let run = train_rl(&mut model, &corpus, &idx, &cfg).unwrap();
        assert_eq!(run.rows.len(), 2);
        for row in &run.rows {
            assert!(row.mean_len > 0.0);
            assert!(row.kl.is_finite() && row.entropy.is_finite());
        }
        let after: Vec<Vec<f64>> = model
            .params_with_prefix("adapter.reasoning")
            .iter()
            .map(|(_, p)| p.to_vec())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn in_batch_negatives_need_a_real_batch() {
        let mut model = tiny_model(22);
        let (corpus, _) = tiny_world(22);
        let idx: Vec<usize> = (0..corpus.pairs.len()).collect();
        let cfg = RlRunConfig {
            queries_per_step: 1,
            negative_source: NegativeSource::InBatch,
            ..small_rl_cfg(1, 22)
        };
        assert!(matches!(
            train_rl(&mut model, &corpus, &idx, &cfg),
            Err(RlError::BatchTooSmall)
        ));
    }

    #[test]
    fn stationary_rewards_for_a_fixed_query_trace_pair() {
        let mut model = tiny_model(23);
        let (corpus, _) = tiny_world(23);
        let idx: Vec<usize> = (0..corpus.pairs.len()).collect();
        let pair = corpus.pairs[0].clone();
        let trace = pair.trace_query.clone().unwrap();
        let cache_before = build_cache(&model, &corpus).unwrap();

        let embed_fixed =
            |model: &Model| reward_embedding(model, &pair.query_ids, &trace).unwrap();
        let h_before = embed_fixed(&model);
        train_rl(&mut model, &corpus, &idx, &small_rl_cfg(2, 23)).unwrap();
        let h_after = embed_fixed(&model);
        // the policy changed, but a fixed (query, trace) pair still embeds
        // identically: the reward environment is stationary
        assert!(h_before
            .iter()
            .zip(&h_after)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        let hyper = small_rl_cfg(1, 23).hyper;
        let mut rng_a = Rng::new(5, Stream::Negatives);
        let mut rng_b = Rng::new(5, Stream::Negatives);
        let r_before =
            gap_reward(&h_before, &pair.target_id, &cache_before, &hyper, &mut rng_a).unwrap();
        let r_after =
            gap_reward(&h_after, &pair.target_id, &cache_before, &hyper, &mut rng_b).unwrap();
        assert_eq!(r_before.to_bits(), r_after.to_bits());
    }
}
