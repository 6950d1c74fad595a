//! Core library: a miniature decoder-only transformer with two low-rank
//! adapters (reasoning + embedding) on a frozen backbone, probe-token
//! embedding extraction from a shared KV cache under two attention masks,
//! a learned routing gate that decides per input whether to generate a
//! reasoning trace, joint supervised training, and embedding-guided
//! reinforcement learning — exercised on a synthetic, exactly-checkable
//! retrieval world.

pub mod checkpoint;
pub mod config;
pub mod embed;
pub mod eval;
pub mod loss;
pub mod model;
pub mod optim;
pub mod rl;
pub mod rng;
pub mod tensor;
pub mod trace;
pub mod train;
pub mod vocab;
pub mod world;

pub use config::RunConfig;
pub use embed::{encode, EncodeMode, Encoded, Embedding, RouteDecision};
pub use eval::{evaluate, EvalMode, EvalReport};
pub use loss::SftHyper;
pub use model::{AdapterKind, BackboneConfig, KVCache, Model};
pub use rl::{GlobalCache, NegativeSource, RlHyper, RlRunConfig};
pub use rng::{Rng, Stream};
pub use tensor::{check_gradient, no_grad, Tensor};
pub use trace::Trace;
pub use world::{Corpus, RetrievalPair, WorldSpec};
