//! Retrieval evaluation across inference modes.
//!
//! For each mode the whole target collection is encoded once into an
//! index, every held-out query is encoded and ranked against it by cosine,
//! and Hit@1 / NDCG@5 (binary relevance, one gold per query) are averaged
//! overall and per difficulty stratum. Reasoning-token counts and gate
//! trigger rates are tallied over every encoded item, queries and targets
//! alike. Oracle mode re-uses the other modes' per-sample outcomes and
//! takes the best, an exact upper bound over the evaluated strategies.

use serde::Serialize;

use crate::embed::{dot, encode, EncodeMode, Encoded, GenerationLimits, RouteDecision};
use crate::model::Model;
use crate::rng::{Rng, Stream};
use crate::world::{Corpus, Difficulty};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Base,
    Cot,
    Adaptive,
    Oracle,
}

impl std::str::FromStr for EvalMode {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "base" => Ok(EvalMode::Base),
            "cot" => Ok(EvalMode::Cot),
            "adaptive" => Ok(EvalMode::Adaptive),
            "oracle" => Ok(EvalMode::Oracle),
            other => Err(EvalError::UnknownMode(other.to_string())),
        }
    }
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EvalMode::Base => "base",
            EvalMode::Cot => "cot",
            EvalMode::Adaptive => "adaptive",
            EvalMode::Oracle => "oracle",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("unknown eval mode {0:?} (expected base | cot | adaptive | oracle)")]
    UnknownMode(String),
    #[error(transparent)]
    Embed(#[from] crate::embed::EmbedError),
    #[error("no eval pairs supplied")]
    EmptySplit,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub max_gen: usize,
    /// Trace-generation temperature; 0 keeps evaluation fully greedy.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            max_gen: 64,
            temperature: 0.0,
            seed: 0,
        }
    }
}

// ── Ranking metrics ──────────────────────────────────────────────────

/// 1-based rank of `gold` under descending score, ties broken by ascending
/// index (stable target order).
pub fn rank_of_gold(scores: &[f64], gold: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores must be comparable")
            .then(a.cmp(&b))
    });
    order.iter().position(|&i| i == gold).expect("gold index present") + 1
}

pub fn hit_at_1(rank: usize) -> f64 {
    if rank == 1 {
        1.0
    } else {
        0.0
    }
}

/// Binary-relevance NDCG@5 with a single gold: ideal DCG is 1, so the
/// score is the discounted gain of the gold's rank, 0 beyond rank 5.
pub fn ndcg_at_5(rank: usize) -> f64 {
    if rank <= 5 {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

// ── Reports ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct StratumReport {
    pub stratum: Difficulty,
    pub n: usize,
    pub hit_at_1: f64,
    pub ndcg_at_5: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModeReport {
    pub mode: EvalMode,
    pub hit_at_1: f64,
    pub ndcg_at_5: f64,
    /// Mean generated reasoning tokens per encoded item (queries and
    /// targets both count; oracle charges for both encodings it reuses).
    pub mean_reasoning_tokens: f64,
    pub trigger_rate_query: Option<f64>,
    pub trigger_rate_target: Option<f64>,
    pub per_stratum: Vec<StratumReport>,
    pub n_encoded: usize,
    pub n_triggered: usize,
    pub total_reasoning_tokens: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub modes: Vec<ModeReport>,
}

impl EvalReport {
    pub fn mode(&self, m: EvalMode) -> Option<&ModeReport> {
        self.modes.iter().find(|r| r.mode == m)
    }
}

/// Per-item gate decisions from an adaptive evaluation, for route
/// statistics.
#[derive(Debug, Clone, Default)]
pub struct RouteArtifacts {
    /// One entry per eval pair: (pair index, decision, trace tokens).
    pub query_routes: Vec<(usize, RouteDecision, usize)>,
    /// One entry per target in index order: (target index, decision,
    /// trace tokens).
    pub target_routes: Vec<(usize, RouteDecision, usize)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RouteStatRow {
    pub side: String,
    pub stratum: String,
    pub n: usize,
    pub triggered: usize,
    pub trigger_rate: f64,
}

// ── Evaluation ───────────────────────────────────────────────────────

struct IndexEncoding {
    vectors: Vec<Vec<f64>>,
    tokens: Vec<usize>,
    routes: Vec<Option<RouteDecision>>,
}

struct PerSample {
    hit: Vec<f64>,
    ndcg: Vec<f64>,
}

fn concrete_mode(m: EvalMode) -> EncodeMode {
    match m {
        EvalMode::Base => EncodeMode::Base,
        EvalMode::Cot => EncodeMode::Cot,
        EvalMode::Adaptive => EncodeMode::Adaptive,
        EvalMode::Oracle => unreachable!("oracle has no encoder"),
    }
}

fn encode_index(
    model: &Model,
    corpus: &Corpus,
    mode: EvalMode,
    opts: &EvalOptions,
) -> Result<IndexEncoding, EvalError> {
    let limits = GenerationLimits {
        max_len: opts.max_gen,
        temperature: opts.temperature,
    };
    let mut rng = Rng::with_stream_id(opts.seed, Stream::Sampling as u64 + 100);
    let mut vectors = Vec::with_capacity(corpus.targets.len());
    let mut tokens = Vec::with_capacity(corpus.targets.len());
    let mut routes = Vec::with_capacity(corpus.targets.len());
    for doc in &corpus.targets {
        let out: Encoded = encode(model, &doc.token_ids, concrete_mode(mode), limits, &mut rng)?;
        vectors.push(out.embedding.vector);
        tokens.push(out.embedding.trace_tokens);
        routes.push(out.route);
    }
    Ok(IndexEncoding {
        vectors,
        tokens,
        routes,
    })
}

/// Evaluate the requested modes over the eval split. Returns the report
/// plus the adaptive route decisions (empty unless adaptive ran).
pub fn evaluate(
    model: &Model,
    corpus: &Corpus,
    eval_idx: &[usize],
    modes: &[EvalMode],
    opts: &EvalOptions,
) -> Result<(EvalReport, RouteArtifacts), EvalError> {
    if eval_idx.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let want_oracle = modes.contains(&EvalMode::Oracle);
    // oracle re-uses base and cot outcomes, so force them when needed
    let mut concrete: Vec<EvalMode> = Vec::new();
    for m in [EvalMode::Base, EvalMode::Cot, EvalMode::Adaptive] {
        if modes.contains(&m) || (want_oracle && m != EvalMode::Adaptive) {
            concrete.push(m);
        }
    }

    let target_index = corpus.target_index();
    let limits = GenerationLimits {
        max_len: opts.max_gen,
        temperature: opts.temperature,
    };

    let mut artifacts = RouteArtifacts::default();
    let mut reports: Vec<ModeReport> = Vec::new();
    let mut per_sample: Vec<(EvalMode, PerSample)> = Vec::new();

    for &mode in &concrete {
        let index = encode_index(model, corpus, mode, opts)?;
        let mut rng = Rng::new(opts.seed, Stream::Sampling);
        let mut hits = Vec::with_capacity(eval_idx.len());
        let mut ndcgs = Vec::with_capacity(eval_idx.len());
        let mut total_tokens: usize = index.tokens.iter().sum();
        let mut n_triggered = index
            .routes
            .iter()
            .filter(|r| r.map(|d| d.chose_cot).unwrap_or(false))
            .count();
        let mut query_triggered = 0usize;
        let mut strata: Vec<(Difficulty, Vec<f64>, Vec<f64>)> = vec![
            (Difficulty::Easy, Vec::new(), Vec::new()),
            (Difficulty::Hard, Vec::new(), Vec::new()),
        ];
        for &pi in eval_idx {
            let pair = &corpus.pairs[pi];
            let out = encode(model, &pair.query_ids, concrete_mode(mode), limits, &mut rng)?;
            total_tokens += out.embedding.trace_tokens;
            if let Some(route) = out.route {
                if route.chose_cot {
                    n_triggered += 1;
                    query_triggered += 1;
                }
                if mode == EvalMode::Adaptive {
                    artifacts
                        .query_routes
                        .push((pi, route, out.embedding.trace_tokens));
                }
            }
            let scores: Vec<f64> = index
                .vectors
                .iter()
                .map(|t| dot(&out.embedding.vector, t))
                .collect();
            let gold = target_index[pair.target_id.as_str()];
            let rank = rank_of_gold(&scores, gold);
            let (h, n) = (hit_at_1(rank), ndcg_at_5(rank));
            hits.push(h);
            ndcgs.push(n);
            let slot = strata
                .iter_mut()
                .find(|(d, _, _)| *d == pair.difficulty)
                .expect("both strata present");
            slot.1.push(h);
            slot.2.push(n);
        }
        if mode == EvalMode::Adaptive {
            for (ti, route) in index.routes.iter().enumerate() {
                if let Some(r) = route {
                    artifacts.target_routes.push((ti, *r, index.tokens[ti]));
                }
            }
        }
        let n_encoded = corpus.targets.len() + eval_idx.len();
        let target_triggered = n_triggered - query_triggered;
        reports.push(ModeReport {
            mode,
            hit_at_1: mean(&hits),
            ndcg_at_5: mean(&ndcgs),
            mean_reasoning_tokens: total_tokens as f64 / n_encoded as f64,
            trigger_rate_query: (mode == EvalMode::Adaptive)
                .then(|| query_triggered as f64 / eval_idx.len() as f64),
            trigger_rate_target: (mode == EvalMode::Adaptive)
                .then(|| target_triggered as f64 / corpus.targets.len() as f64),
            per_stratum: strata
                .into_iter()
                .filter(|(_, h, _)| !h.is_empty())
                .map(|(d, h, n)| StratumReport {
                    stratum: d,
                    n: h.len(),
                    hit_at_1: mean(&h),
                    ndcg_at_5: mean(&n),
                })
                .collect(),
            n_encoded,
            n_triggered,
            total_reasoning_tokens: total_tokens,
        });
        per_sample.push((mode, PerSample { hit: hits, ndcg: ndcgs }));
    }

    if want_oracle {
        // per-sample best outcome across every evaluated strategy
        let n = eval_idx.len();
        let mut hit = vec![f64::NEG_INFINITY; n];
        let mut ndcg = vec![f64::NEG_INFINITY; n];
        for (_, ps) in &per_sample {
            for i in 0..n {
                hit[i] = hit[i].max(ps.hit[i]);
                ndcg[i] = ndcg[i].max(ps.ndcg[i]);
            }
        }
        let mut strata: Vec<(Difficulty, Vec<f64>, Vec<f64>)> = vec![
            (Difficulty::Easy, Vec::new(), Vec::new()),
            (Difficulty::Hard, Vec::new(), Vec::new()),
        ];
        for (j, &pi) in eval_idx.iter().enumerate() {
            let slot = strata
                .iter_mut()
                .find(|(d, _, _)| *d == corpus.pairs[pi].difficulty)
                .expect("both strata present");
            slot.1.push(hit[j]);
            slot.2.push(ndcg[j]);
        }
        // the oracle consults every computed encoding, so it pays for all
        let total_tokens: usize = reports
            .iter()
            .filter(|r| r.mode != EvalMode::Adaptive)
            .map(|r| r.total_reasoning_tokens)
            .sum();
        let n_encoded = reports[0].n_encoded;
        reports.push(ModeReport {
            mode: EvalMode::Oracle,
            hit_at_1: mean(&hit),
            ndcg_at_5: mean(&ndcg),
            mean_reasoning_tokens: total_tokens as f64 / n_encoded as f64,
            trigger_rate_query: None,
            trigger_rate_target: None,
            per_stratum: strata
                .into_iter()
                .filter(|(_, h, _)| !h.is_empty())
                .map(|(d, h, n)| StratumReport {
                    stratum: d,
                    n: h.len(),
                    hit_at_1: mean(&h),
                    ndcg_at_5: mean(&n),
                })
                .collect(),
            n_encoded,
            n_triggered: 0,
            total_reasoning_tokens: total_tokens,
        });
    }

    // order the report as requested
    let mut ordered = Vec::new();
    for m in modes {
        if let Some(pos) = reports.iter().position(|r| r.mode == *m) {
            ordered.push(reports[pos].clone());
        }
    }
    Ok((EvalReport { modes: ordered }, artifacts))
}

/// Per-side, per-stratum trigger rates from an adaptive evaluation.
pub fn route_stats(
    corpus: &Corpus,
    eval_idx: &[usize],
    artifacts: &RouteArtifacts,
) -> Vec<RouteStatRow> {
    let mut rows = Vec::new();
    for d in [Difficulty::Easy, Difficulty::Hard] {
        let of_stratum: Vec<&(usize, RouteDecision, usize)> = artifacts
            .query_routes
            .iter()
            .filter(|(pi, _, _)| corpus.pairs[*pi].difficulty == d)
            .collect();
        let triggered = of_stratum.iter().filter(|(_, r, _)| r.chose_cot).count();
        if !of_stratum.is_empty() {
            rows.push(RouteStatRow {
                side: "query".into(),
                stratum: d.to_string(),
                n: of_stratum.len(),
                triggered,
                trigger_rate: triggered as f64 / of_stratum.len() as f64,
            });
        }
    }
    // target side: count per eval pair, bucketed by the pair's difficulty
    let by_target: std::collections::BTreeMap<usize, bool> = artifacts
        .target_routes
        .iter()
        .map(|(ti, r, _)| (*ti, r.chose_cot))
        .collect();
    let target_index = corpus.target_index();
    for d in [Difficulty::Easy, Difficulty::Hard] {
        let mut n = 0;
        let mut triggered = 0;
        for &pi in eval_idx {
            let pair = &corpus.pairs[pi];
            if pair.difficulty != d {
                continue;
            }
            let ti = target_index[pair.target_id.as_str()];
            if let Some(&chose) = by_target.get(&ti) {
                n += 1;
                triggered += chose as usize;
            }
        }
        if n > 0 {
            rows.push(RouteStatRow {
                side: "target".into(),
                stratum: d.to_string(),
                n,
                triggered,
                trigger_rate: triggered as f64 / n as f64,
            });
        }
    }
    // overall per side
    let q_n = artifacts.query_routes.len();
    if q_n > 0 {
        let q_t = artifacts.query_routes.iter().filter(|(_, r, _)| r.chose_cot).count();
        rows.push(RouteStatRow {
            side: "query".into(),
            stratum: "all".into(),
            n: q_n,
            triggered: q_t,
            trigger_rate: q_t as f64 / q_n as f64,
        });
    }
    let t_n = artifacts.target_routes.len();
    if t_n > 0 {
        let t_t = artifacts.target_routes.iter().filter(|(_, r, _)| r.chose_cot).count();
        rows.push(RouteStatRow {
            side: "target".into(),
            stratum: "all".into(),
            n: t_n,
            triggered: t_t,
            trigger_rate: t_t as f64 / t_n as f64,
        });
    }
    rows
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}
