//! Fixed symbol table for the synthetic world.
//!
//! Token ids are stable across runs and independent of the world's
//! parameters, so checkpoints stay portable between corpora: specials at
//! the bottom, rewrite-operator tokens at 16, attribute tokens from 64 up.
//! The table is sized 512 regardless of how many attributes a particular
//! world actually uses.

pub const VOCAB_SIZE: usize = 512;

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const THINK_OPEN: usize = 2;
pub const THINK_CLOSE: usize = 3;
pub const ANSWER_OPEN: usize = 4;
pub const ANSWER_CLOSE: usize = 5;
pub const QUERY_MARK: usize = 6;
pub const TARGET_MARK: usize = 7;
pub const SEP: usize = 8;

/// First rewrite-operator token id; operator `k` shifts an attribute index
/// by `k` (1-based, modular).
pub const OP_BASE: usize = 16;
/// Number of distinct rewrite operators.
pub const N_OPS: usize = 4;

/// First attribute token id.
pub const ATTR_BASE: usize = 64;
/// Largest attribute vocabulary a world may request.
pub const MAX_ATTRIBUTES: usize = VOCAB_SIZE - ATTR_BASE;

pub fn op_token(k: usize) -> usize {
    assert!((1..=N_OPS).contains(&k), "op_token: operator {k} out of range");
    OP_BASE + (k - 1)
}

pub fn attr_token(idx: usize) -> usize {
    assert!(idx < MAX_ATTRIBUTES, "attr_token: attribute {idx} out of range");
    ATTR_BASE + idx
}

pub fn is_attr(id: usize) -> bool {
    (ATTR_BASE..ATTR_BASE + MAX_ATTRIBUTES).contains(&id)
}

pub fn is_op(id: usize) -> bool {
    (OP_BASE..OP_BASE + N_OPS).contains(&id)
}

pub fn attr_index(id: usize) -> Option<usize> {
    is_attr(id).then(|| id - ATTR_BASE)
}

pub fn op_shift(id: usize) -> Option<usize> {
    is_op(id).then(|| id - OP_BASE + 1)
}

/// Printable name of a token. Tag tokens render as their literal tags; all
/// other tokens render as bracketed words.
pub fn token_name(id: usize) -> String {
    match id {
        PAD => "[pad]".to_string(),
        EOS => "[eos]".to_string(),
        THINK_OPEN => "<think>".to_string(),
        THINK_CLOSE => "</think>".to_string(),
        ANSWER_OPEN => "<answer>".to_string(),
        ANSWER_CLOSE => "</answer>".to_string(),
        QUERY_MARK => "[qry]".to_string(),
        TARGET_MARK => "[tgt]".to_string(),
        SEP => "[sep]".to_string(),
        id if is_op(id) => format!("[op{}]", op_shift(id).unwrap()),
        id if is_attr(id) => format!("[a{}]", attr_index(id).unwrap()),
        id => format!("[rsv{id}]"),
    }
}

/// Inverse of [`token_name`] for non-tag word tokens.
pub fn token_from_name(word: &str) -> Option<usize> {
    match word {
        "[pad]" => Some(PAD),
        "[eos]" => Some(EOS),
        "[qry]" => Some(QUERY_MARK),
        "[tgt]" => Some(TARGET_MARK),
        "[sep]" => Some(SEP),
        _ => {
            let inner = word.strip_prefix('[')?.strip_suffix(']')?;
            if let Some(n) = inner.strip_prefix("op") {
                let k: usize = n.parse().ok()?;
                (1..=N_OPS).contains(&k).then(|| op_token(k))
            } else if let Some(n) = inner.strip_prefix('a') {
                let idx: usize = n.parse().ok()?;
                (idx < MAX_ATTRIBUTES).then(|| attr_token(idx))
            } else if let Some(n) = inner.strip_prefix("rsv") {
                let id: usize = n.parse().ok()?;
                (id < VOCAB_SIZE).then_some(id)
            } else {
                None
            }
        }
    }
}
