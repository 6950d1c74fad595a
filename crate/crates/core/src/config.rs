//! Run configuration: every knob of the pipeline in one flat
//! `key = value` text file. Unknown keys are rejected; every key has a
//! default, so an empty file is a valid config. One `seed` drives the
//! world, initialization, training, and evaluation streams.

use std::path::{Path, PathBuf};

use crate::loss::SftHyper;
use crate::model::BackboneConfig;
use crate::rl::{NegativeSource, RlHyper, RlRunConfig};
use crate::train::SftConfig;
use crate::world::WorldSpec;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldSpec,
    pub backbone: BackboneConfig,
    pub sft: SftConfig,
    pub rl: RlRunConfig,
    pub eval_frac: f64,
    pub eval_max_gen: usize,
    pub eval_temperature: f64,
    pub dataset_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            world: WorldSpec::default(),
            backbone: BackboneConfig::default(),
            sft: SftConfig::default(),
            rl: RlRunConfig::default(),
            eval_frac: 0.2,
            eval_max_gen: 64,
            eval_temperature: 0.0,
            dataset_path: PathBuf::from("dataset.jsonl"),
            checkpoint_path: PathBuf::from("sft_checkpoint.json"),
            out_dir: PathBuf::from("."),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: cannot parse {value:?} for key {key:?}: {why}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
        why: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let Some((key, value)) = stripped.split_once('=') else {
                return Err(ConfigError::Malformed {
                    line,
                    text: raw.to_string(),
                });
            };
            cfg.set(line, key.trim(), value.trim())?;
        }
        cfg.finish()?;
        Ok(cfg)
    }

    /// Propagate the master seed into every stage and validate.
    fn finish(&mut self) -> Result<(), ConfigError> {
        self.world.seed = self.seed;
        self.sft.seed = self.seed;
        self.rl.seed = self.seed;
        self.backbone
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.sft
            .hyper
            .validate()
            .map_err(ConfigError::Invalid)?;
        self.rl.hyper.validate().map_err(ConfigError::Invalid)?;
        if !(0.0..1.0).contains(&self.eval_frac) || self.eval_frac == 0.0 {
            return Err(ConfigError::Invalid(format!(
                "eval_frac must lie in (0,1), got {}",
                self.eval_frac
            )));
        }
        Ok(())
    }

    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.world.seed = seed;
        self.sft.seed = seed;
        self.rl.seed = seed;
    }

    fn set(&mut self, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        macro_rules! parse {
            ($ty:ty) => {
                value.parse::<$ty>().map_err(|e| ConfigError::BadValue {
                    line,
                    key: key.to_string(),
                    value: value.to_string(),
                    why: e.to_string(),
                })?
            };
        }
        match key {
            "seed" => self.seed = parse!(u64),
            // synthetic world
            "world_attributes" => self.world.n_attributes = parse!(usize),
            "world_targets" => self.world.n_targets = parse!(usize),
            "world_easy" => self.world.n_easy = parse!(usize),
            "world_hard" => self.world.n_hard = parse!(usize),
            "world_depth" => self.world.hard_rule_depth = parse!(usize),
            "world_noise" => self.world.teacher_noise = parse!(f64),
            // backbone
            "d_model" => self.backbone.d_model = parse!(usize),
            "n_layers" => self.backbone.n_layers = parse!(usize),
            "n_heads" => self.backbone.n_heads = parse!(usize),
            "d_ffn" => self.backbone.d_ffn = parse!(usize),
            "max_seq" => self.backbone.max_seq = parse!(usize),
            "k_probes" => self.backbone.k_probes = parse!(usize),
            "lora_rank" => self.backbone.lora_rank = parse!(usize),
            "lora_alpha" => self.backbone.lora_alpha = parse!(f64),
            // stage-1 objective
            "tau" => self.sft.hyper.tau = parse!(f64),
            "lambda_base" => self.sft.hyper.lambda_base = parse!(f64),
            "lambda_cot" => self.sft.hyper.lambda_cot = parse!(f64),
            "lambda_route" => self.sft.hyper.lambda_route = parse!(f64),
            "delta" => self.sft.hyper.delta = parse!(f64),
            "tau_g" => self.sft.hyper.tau_g = parse!(f64),
            // stage-1 schedule
            "batch_size" => self.sft.batch_size = parse!(usize),
            "sft_steps" => self.sft.steps = parse!(usize),
            "learning_rate_sft" => self.sft.lr = parse!(f64),
            "weight_decay" => {
                let wd = parse!(f64);
                self.sft.weight_decay = wd;
                self.rl.weight_decay = wd;
            }
            "grad_clip" => {
                let gc = parse!(f64);
                self.sft.grad_clip = gc;
                self.rl.grad_clip = gc;
            }
            // stage-2
            "rl_steps" => self.rl.steps = parse!(usize),
            "learning_rate_rl" => self.rl.lr = parse!(f64),
            "group_size" => self.rl.hyper.group_size = parse!(usize),
            "kl_beta" => self.rl.hyper.kl_beta = parse!(f64),
            "clip_eps" => self.rl.hyper.clip_eps = parse!(f64),
            "tau_r" => self.rl.hyper.tau_r = parse!(f64),
            "n_negatives" => self.rl.hyper.n_negatives = parse!(usize),
            "max_gen" => self.rl.hyper.max_gen = parse!(usize),
            "sample_temperature" => self.rl.hyper.sample_temperature = parse!(f64),
            "rl_queries_per_step" => self.rl.queries_per_step = parse!(usize),
            "rl_pool_size" => self.rl.pool_size = parse!(usize),
            "n_rollouts" => self.rl.n_rollouts = parse!(usize),
            "keep_fraction" => self.rl.keep_fraction = parse!(f64),
            "rl_negative_source" => {
                self.rl.negative_source = match value {
                    "cache" => NegativeSource::GlobalCache,
                    "in_batch" => NegativeSource::InBatch,
                    other => {
                        return Err(ConfigError::BadValue {
                            line,
                            key: key.to_string(),
                            value: other.to_string(),
                            why: "expected cache | in_batch".to_string(),
                        })
                    }
                }
            }
            // evaluation
            "eval_frac" => self.eval_frac = parse!(f64),
            "eval_max_gen" => self.eval_max_gen = parse!(usize),
            "eval_temperature" => self.eval_temperature = parse!(f64),
            // paths
            "dataset_path" => self.dataset_path = PathBuf::from(value),
            "checkpoint_path" => self.checkpoint_path = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }
}

// keep these in one place so defaults stay consistent with RunConfig
impl RunConfig {
    pub fn sft_hyper(&self) -> &SftHyper {
        &self.sft.hyper
    }

    pub fn rl_hyper(&self) -> &RlHyper {
        &self.rl.hyper
    }
}
