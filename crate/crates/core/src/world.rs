//! Synthetic retrieval world with exactly checkable ground truth.
//!
//! Targets are documents naming a small set of attribute tokens. Easy
//! queries name a target's attributes directly, so no reasoning is needed
//! to match them. Hard queries encode each attribute as a modular rewrite
//! chain (`[op2] [op1] [a5]` resolves to `a8`): matching them from surface
//! tokens alone requires carrying out the rewrites, which is what the
//! reasoning trace spells out step by step. A rule-based teacher writes
//! those traces (optionally corrupting answers to exercise filtering) and a
//! rule-based judge validates them in strict, hallucination-only, or skip
//! mode.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::rng::{Rng, Stream};
use crate::trace::Trace;
use crate::vocab;

/// Split a trace rendering into its think/answer contents under the shared
/// structured-trace grammar (the same grammar the format reward scores).
pub use crate::trace::split_structured as parse_trace;

/// Attributes per target document. Fixed so target sets stay comparable.
pub const ATTRS_PER_TARGET: usize = 3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldSpec {
    /// Size of the attribute vocabulary `a0..a{n-1}`.
    pub n_attributes: usize,
    pub n_targets: usize,
    pub n_easy: usize,
    pub n_hard: usize,
    /// Rewrite-chain length of hard query clauses.
    pub hard_rule_depth: usize,
    /// Probability that the teacher corrupts a trace's answer.
    pub teacher_noise: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            n_attributes: 64,
            n_targets: 128,
            n_easy: 192,
            n_hard: 192,
            hard_rule_depth: 2,
            teacher_noise: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

impl std::fmt::Display for Difficulty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Difficulty::Easy => write!(f, "easy"),
            Difficulty::Hard => write!(f, "hard"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TargetDoc {
    pub id: String,
    pub token_ids: Vec<usize>,
    /// Sorted attribute indices.
    pub attrs: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct RetrievalPair {
    pub qid: String,
    pub query_ids: Vec<usize>,
    pub target_id: String,
    pub target_ids: Vec<usize>,
    pub trace_query: Option<Trace>,
    pub trace_target: Option<Trace>,
    pub difficulty: Difficulty,
    pub clean: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub targets: Vec<TargetDoc>,
    pub pairs: Vec<RetrievalPair>,
}

impl Corpus {
    pub fn target_index(&self) -> BTreeMap<&str, usize> {
        self.targets
            .iter()
            .enumerate()
            .map(|(i, t)| (t.id.as_str(), i))
            .collect()
    }

    pub fn clean_pairs(&self) -> impl Iterator<Item = &RetrievalPair> {
        self.pairs.iter().filter(|p| p.clean)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error("world needs at least 2 targets, got {0}")]
    TooFewTargets(usize),
    #[error("{requested} targets exceed the {available} representable distinct attribute sets")]
    TooManyTargets { requested: usize, available: u128 },
    #[error("attribute vocabulary {0} exceeds the {max} reserved token slots", max = vocab::MAX_ATTRIBUTES)]
    TooManyAttributes(usize),
    #[error("hard_rule_depth must be at least 1")]
    ZeroDepth,
    #[error("teacher_noise {0} is not a probability")]
    BadNoise(f64),
}

fn choose3(n: usize) -> u128 {
    if n < ATTRS_PER_TARGET {
        return 0;
    }
    let n = n as u128;
    n * (n - 1) * (n - 2) / 6
}

impl WorldSpec {
    fn validate(&self) -> Result<(), WorldError> {
        if self.n_attributes > vocab::MAX_ATTRIBUTES {
            return Err(WorldError::TooManyAttributes(self.n_attributes));
        }
        if self.n_targets < 2 {
            return Err(WorldError::TooFewTargets(self.n_targets));
        }
        let available = choose3(self.n_attributes);
        if self.n_targets as u128 > available {
            return Err(WorldError::TooManyTargets {
                requested: self.n_targets,
                available,
            });
        }
        if self.hard_rule_depth == 0 {
            return Err(WorldError::ZeroDepth);
        }
        if !(0.0..=1.0).contains(&self.teacher_noise) {
            return Err(WorldError::BadNoise(self.teacher_noise));
        }
        Ok(())
    }
}

// ── Generation ───────────────────────────────────────────────────────

/// Generate targets and query/target pairs. Deterministic under the spec's
/// seed. Every target is referenced by at least one pair whenever the
/// query count allows it, so the retrieval index can be rebuilt from the
/// pair records alone.
pub fn generate_corpus(spec: &WorldSpec) -> Result<Corpus, WorldError> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed, Stream::Data);

    // distinct attribute sets
    let mut seen: std::collections::HashSet<[usize; ATTRS_PER_TARGET]> =
        std::collections::HashSet::new();
    let mut targets = Vec::with_capacity(spec.n_targets);
    while targets.len() < spec.n_targets {
        let mut attrs = [0usize; ATTRS_PER_TARGET];
        loop {
            for a in attrs.iter_mut() {
                *a = rng.next_below(spec.n_attributes);
            }
            attrs.sort_unstable();
            if attrs.windows(2).all(|w| w[0] != w[1]) && seen.insert(attrs) {
                break;
            }
        }
        let id = format!("t{:05}", targets.len());
        let mut token_ids = vec![vocab::TARGET_MARK];
        token_ids.extend(attrs.iter().map(|&a| vocab::attr_token(a)));
        targets.push(TargetDoc {
            id,
            token_ids,
            attrs: attrs.to_vec(),
        });
    }

    // target assignment: cover every target once, then draw freely
    let n_queries = spec.n_easy + spec.n_hard;
    let mut assignment: Vec<usize> = (0..spec.n_targets.min(n_queries)).collect();
    while assignment.len() < n_queries {
        assignment.push(rng.next_below(spec.n_targets));
    }
    rng.shuffle(&mut assignment);

    let mut pairs = Vec::with_capacity(n_queries);
    for (qi, &ti) in assignment.iter().enumerate() {
        let difficulty = if qi < spec.n_easy {
            Difficulty::Easy
        } else {
            Difficulty::Hard
        };
        let target = &targets[ti];
        let mut attrs = target.attrs.clone();
        rng.shuffle(&mut attrs);
        let mut query_ids = vec![vocab::QUERY_MARK];
        match difficulty {
            Difficulty::Easy => {
                query_ids.extend(attrs.iter().map(|&a| vocab::attr_token(a)));
            }
            Difficulty::Hard => {
                for (ci, &a) in attrs.iter().enumerate() {
                    if ci > 0 {
                        query_ids.push(vocab::SEP);
                    }
                    let shifts: Vec<usize> = (0..spec.hard_rule_depth)
                        .map(|_| 1 + rng.next_below(vocab::N_OPS))
                        .collect();
                    let total: usize = shifts.iter().sum();
                    let start = (a + spec.n_attributes - total % spec.n_attributes)
                        % spec.n_attributes;
                    query_ids.extend(shifts.iter().map(|&k| vocab::op_token(k)));
                    query_ids.push(vocab::attr_token(start));
                }
            }
        }
        pairs.push(RetrievalPair {
            qid: format!("q{:06}", qi),
            query_ids,
            target_id: target.id.clone(),
            target_ids: target.token_ids.clone(),
            trace_query: None,
            trace_target: None,
            difficulty,
            clean: true,
        });
    }
    rng.shuffle(&mut pairs);
    Ok(Corpus { targets, pairs })
}

// ── Rule resolution ──────────────────────────────────────────────────

/// Resolve a query's attribute set by carrying out its rewrite chains.
/// Each attribute token closes the pending run of operators and resolves to
/// the shifted index; easy queries have no operators and resolve to the
/// attributes they name.
pub fn resolve_query(query_ids: &[usize], n_attributes: usize) -> Vec<usize> {
    let mut resolved = Vec::new();
    let mut pending: Vec<usize> = Vec::new();
    for &t in query_ids {
        if let Some(k) = vocab::op_shift(t) {
            pending.push(k);
        } else if let Some(a) = vocab::attr_index(t) {
            let total: usize = pending.iter().sum();
            resolved.push((a + total) % n_attributes);
            pending.clear();
        } else {
            pending.clear();
        }
    }
    resolved.sort_unstable();
    resolved.dedup();
    resolved
}

/// Indices of every target whose attribute set equals the query's resolved
/// set. Exhaustive scan; the ground-truth oracle for the whole world.
pub fn brute_force_matches(corpus: &Corpus, query_ids: &[usize], n_attributes: usize) -> Vec<usize> {
    let resolved = resolve_query(query_ids, n_attributes);
    corpus
        .targets
        .iter()
        .enumerate()
        .filter(|(_, t)| t.attrs == resolved)
        .map(|(i, _)| i)
        .collect()
}

// ── Teacher ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Query,
    Target,
}

/// Write the structured trace for one side of a pair. The teacher sees only
/// that side's tokens plus the world's rewrite rules — never the paired
/// counterpart. Easy sides get an empty think block; hard query sides get
/// one resolution step per rewrite. With probability `teacher_noise` one
/// answer attribute is swapped for a wrong one.
pub fn rule_teacher(
    pair: &RetrievalPair,
    side: Side,
    n_attributes: usize,
    noise: f64,
    noise_rng: &mut Rng,
) -> Trace {
    let (think, mut answer) = match side {
        Side::Target => {
            let attrs: Vec<usize> = pair
                .target_ids
                .iter()
                .filter_map(|&t| vocab::attr_index(t))
                .collect();
            (Vec::new(), attrs)
        }
        Side::Query => {
            let mut think = Vec::new();
            let mut answer = Vec::new();
            let mut pending: Vec<usize> = Vec::new(); // operator shifts in reading order
            for &t in &pair.query_ids {
                if vocab::is_op(t) {
                    pending.push(vocab::op_shift(t).unwrap());
                } else if let Some(a) = vocab::attr_index(t) {
                    let mut idx = a;
                    // innermost operator (nearest the attribute) applies first
                    for &k in pending.iter().rev() {
                        if !think.is_empty() {
                            think.push(vocab::SEP);
                        }
                        let next = (idx + k) % n_attributes;
                        think.push(vocab::op_token(k));
                        think.push(vocab::attr_token(idx));
                        think.push(vocab::attr_token(next));
                        idx = next;
                    }
                    pending.clear();
                    answer.push(idx);
                } else {
                    pending.clear();
                }
            }
            (think, answer)
        }
    };

    if noise > 0.0 && !answer.is_empty() && noise_rng.next_f64() < noise {
        let victim = noise_rng.next_below(answer.len());
        loop {
            let wrong = noise_rng.next_below(n_attributes);
            if !answer.contains(&wrong) {
                answer[victim] = wrong;
                break;
            }
        }
    }

    let answer_tokens: Vec<usize> = answer.iter().map(|&a| vocab::attr_token(a)).collect();
    Trace::from_parts(&think, &answer_tokens)
}

// ── Judge ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeMode {
    /// Answer set must equal the resolved gold attribute set.
    Strict,
    /// Answer must be well-formed attribute tokens with at least one
    /// gold-relevant token; no exact matching required.
    HallucinationOnly,
    /// Always passes.
    Skip,
}

/// Validate one side's trace. Empty traces are clean under every mode.
pub fn rule_judge(
    pair: &RetrievalPair,
    side: Side,
    trace: &Trace,
    mode: JudgeMode,
    n_attributes: usize,
) -> (bool, String) {
    if mode == JudgeMode::Skip {
        return (true, "skipped".to_string());
    }
    if trace.token_count() == 0 {
        return (true, "empty trace is clean by default".to_string());
    }
    if !trace.well_formed {
        return (false, "malformed".to_string());
    }
    let gold = match side {
        Side::Query => resolve_query(&pair.query_ids, n_attributes),
        Side::Target => pair
            .target_ids
            .iter()
            .filter_map(|&t| vocab::attr_index(t))
            .collect(),
    };
    let mut answer: Vec<usize> = trace
        .answer_tokens()
        .iter()
        .filter_map(|&t| vocab::attr_index(t))
        .collect();
    if answer.len() != trace.answer_tokens().len() {
        return (false, "answer contains non-attribute tokens".to_string());
    }
    answer.sort_unstable();
    answer.dedup();
    match mode {
        JudgeMode::Strict => {
            if answer == gold {
                (true, "answer matches resolved gold".to_string())
            } else {
                (false, "answer set differs from resolved gold".to_string())
            }
        }
        JudgeMode::HallucinationOnly => {
            if answer.iter().any(|a| gold.contains(a)) {
                (true, "answer is relevant".to_string())
            } else {
                (false, "no gold-relevant token in answer".to_string())
            }
        }
        JudgeMode::Skip => unreachable!(),
    }
}

/// Per-stratum, per-side validation modes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct JudgeAssignment {
    pub easy_query: JudgeMode,
    pub easy_target: JudgeMode,
    pub hard_query: JudgeMode,
    pub hard_target: JudgeMode,
}

impl Default for JudgeAssignment {
    /// Hard queries have a well-defined resolved answer, so they get strict
    /// checking (their targets are skipped); easy retrieval pairs get
    /// hallucination-only checking on both sides.
    fn default() -> Self {
        JudgeAssignment {
            easy_query: JudgeMode::HallucinationOnly,
            easy_target: JudgeMode::HallucinationOnly,
            hard_query: JudgeMode::Strict,
            hard_target: JudgeMode::Skip,
        }
    }
}

impl JudgeAssignment {
    fn for_pair(&self, difficulty: Difficulty) -> (JudgeMode, JudgeMode) {
        match difficulty {
            Difficulty::Easy => (self.easy_query, self.easy_target),
            Difficulty::Hard => (self.hard_query, self.hard_target),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct FilterStats {
    pub easy_total: usize,
    pub easy_clean: usize,
    pub hard_total: usize,
    pub hard_clean: usize,
}

impl FilterStats {
    pub fn clean_rate(&self, d: Difficulty) -> f64 {
        let (c, t) = match d {
            Difficulty::Easy => (self.easy_clean, self.easy_total),
            Difficulty::Hard => (self.hard_clean, self.hard_total),
        };
        if t == 0 {
            1.0
        } else {
            c as f64 / t as f64
        }
    }

    pub fn overall_rate(&self) -> f64 {
        let t = self.easy_total + self.hard_total;
        if t == 0 {
            1.0
        } else {
            (self.easy_clean + self.hard_clean) as f64 / t as f64
        }
    }
}

/// Annotate both sides of every pair with teacher traces, judge them, and
/// set each pair's `clean` flag (a pair is clean when all non-skipped sides
/// pass). Returns per-stratum statistics.
pub fn annotate_and_filter(
    corpus: &mut Corpus,
    spec: &WorldSpec,
    assignment: JudgeAssignment,
) -> FilterStats {
    let mut noise_rng = Rng::new(spec.seed, Stream::TeacherNoise);
    let mut stats = FilterStats::default();
    for pair in &mut corpus.pairs {
        let tq = rule_teacher(pair, Side::Query, spec.n_attributes, spec.teacher_noise, &mut noise_rng);
        let tt = rule_teacher(pair, Side::Target, spec.n_attributes, spec.teacher_noise, &mut noise_rng);
        let (qm, tm) = assignment.for_pair(pair.difficulty);
        let (q_ok, _) = rule_judge(pair, Side::Query, &tq, qm, spec.n_attributes);
        let (t_ok, _) = rule_judge(pair, Side::Target, &tt, tm, spec.n_attributes);
        pair.trace_query = Some(tq);
        pair.trace_target = Some(tt);
        pair.clean = q_ok && t_ok;
        match pair.difficulty {
            Difficulty::Easy => {
                stats.easy_total += 1;
                stats.easy_clean += pair.clean as usize;
            }
            Difficulty::Hard => {
                stats.hard_total += 1;
                stats.hard_clean += pair.clean as usize;
            }
        }
    }
    stats
}

// ── Dataset file ─────────────────────────────────────────────────────

pub const DATASET_SCHEMA: &str = "routembed-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    schema: String,
    version: u32,
    n_attributes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct PairRecord {
    qid: String,
    query_ids: Vec<usize>,
    target_id: String,
    target_ids: Vec<usize>,
    trace_query: Option<String>,
    trace_target: Option<String>,
    difficulty: Difficulty,
    clean: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("missing schema header line")]
    MissingHeader,
    #[error("unsupported schema {schema:?} version {version}")]
    BadSchema { schema: String, version: u32 },
    #[error("line {line}: {source}")]
    Trace {
        line: usize,
        source: crate::trace::TraceParseError,
    },
}

/// Write the corpus as one JSON record per line under a schema header.
pub fn write_dataset(
    corpus: &Corpus,
    n_attributes: usize,
    w: &mut impl Write,
) -> Result<(), DatasetIoError> {
    let header = DatasetHeader {
        schema: DATASET_SCHEMA.to_string(),
        version: DATASET_VERSION,
        n_attributes,
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for pair in &corpus.pairs {
        let rec = PairRecord {
            qid: pair.qid.clone(),
            query_ids: pair.query_ids.clone(),
            target_id: pair.target_id.clone(),
            target_ids: pair.target_ids.clone(),
            trace_query: pair.trace_query.as_ref().map(|t| t.text.clone()),
            trace_target: pair.trace_target.as_ref().map(|t| t.text.clone()),
            difficulty: pair.difficulty,
            clean: pair.clean,
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
    }
    Ok(())
}

/// Read a dataset file back, rebuilding the target index from the pair
/// records (first appearance order).
pub fn read_dataset(r: impl BufRead) -> Result<(Corpus, usize), DatasetIoError> {
    let mut lines = r.lines().enumerate();
    let (_, first) = lines.next().ok_or(DatasetIoError::MissingHeader)?;
    let header: DatasetHeader = serde_json::from_str(&first?)
        .map_err(|source| DatasetIoError::Json { line: 1, source })?;
    if header.schema != DATASET_SCHEMA || header.version != DATASET_VERSION {
        return Err(DatasetIoError::BadSchema {
            schema: header.schema,
            version: header.version,
        });
    }
    let mut corpus = Corpus::default();
    let mut seen_targets: std::collections::HashSet<String> = std::collections::HashSet::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(&line)
            .map_err(|source| DatasetIoError::Json { line: i + 1, source })?;
        let parse = |text: &Option<String>| -> Result<Option<Trace>, DatasetIoError> {
            text.as_deref()
                .map(|t| Trace::from_text(t).map_err(|source| DatasetIoError::Trace { line: i + 1, source }))
                .transpose()
        };
        if seen_targets.insert(rec.target_id.clone()) {
            corpus.targets.push(TargetDoc {
                id: rec.target_id.clone(),
                token_ids: rec.target_ids.clone(),
                attrs: rec
                    .target_ids
                    .iter()
                    .filter_map(|&t| vocab::attr_index(t))
                    .collect(),
            });
        }
        corpus.pairs.push(RetrievalPair {
            trace_query: parse(&rec.trace_query)?,
            trace_target: parse(&rec.trace_target)?,
            qid: rec.qid,
            query_ids: rec.query_ids,
            target_id: rec.target_id,
            target_ids: rec.target_ids,
            difficulty: rec.difficulty,
            clean: rec.clean,
        });
    }
    corpus.targets.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((corpus, header.n_attributes))
}

/// Stratified train/eval split: within each stratum the last
/// `eval_fraction` of pairs (in corpus order) go to eval.
pub fn split_pairs(corpus: &Corpus, eval_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    assert!((0.0..1.0).contains(&eval_fraction), "eval_fraction out of range");
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for difficulty in [Difficulty::Easy, Difficulty::Hard] {
        let stratum: Vec<usize> = corpus
            .pairs
            .iter()
            .enumerate()
            .filter(|(_, p)| p.difficulty == difficulty)
            .map(|(i, _)| i)
            .collect();
        let n_eval = (stratum.len() as f64 * eval_fraction).round() as usize;
        let cut = stratum.len() - n_eval;
        train.extend_from_slice(&stratum[..cut]);
        eval.extend_from_slice(&stratum[cut..]);
    }
    train.sort_unstable();
    eval.sort_unstable();
    (train, eval)
}
