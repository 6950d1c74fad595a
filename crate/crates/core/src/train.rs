//! Stage-1 supervised training loop and the metrics CSV writers.
//!
//! Each step draws a minibatch of clean annotated pairs, runs both sides
//! through the shared-cache forward, and optimizes the weighted total of
//! next-token prediction, both contrastive terms, and the routing BCE.
//! Only the two adapters, the probes, and the gate ever receive updates;
//! the backbone stays frozen.

use std::io::Write;

use crate::embed::{encode_training_pair, SideForward};
use crate::loss::{infonce, ntp_loss, positive_margin, routing_loss, routing_target, sft_total, SftHyper};
use crate::model::Model;
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{Rng, Stream};
use crate::tensor::Tensor;
use crate::world::Corpus;

#[derive(Debug, Clone)]
pub struct SftConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub hyper: SftHyper,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            steps: 1500,
            batch_size: 32,
            lr: 3e-3,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            hyper: SftHyper::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("no clean training pairs available")]
    EmptyDataset,
    #[error(transparent)]
    Embed(#[from] crate::embed::EmbedError),
    #[error("bad hyperparameters: {0}")]
    BadHyper(String),
}

#[derive(Debug, Clone, Serialize)]
pub struct SftStepRow {
    pub step: usize,
    pub ntp: f64,
    pub cl_base: f64,
    pub cl_cot: f64,
    pub route: f64,
    pub total: f64,
}

use serde::Serialize;

/// Cycles through a shuffled index list, reshuffling at each epoch end.
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: Rng,
}

impl BatchSampler {
    pub fn new(indices: Vec<usize>, seed: u64) -> Self {
        let mut rng = Rng::new(seed, Stream::Batching);
        let mut order = indices;
        rng.shuffle(&mut order);
        BatchSampler {
            order,
            cursor: 0,
            rng,
        }
    }

    pub fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(n);
        for _ in 0..n.min(self.order.len()) {
            if self.cursor == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }
}

fn stack_rows(rows: &[&Tensor]) -> Tensor {
    let owned: Vec<Tensor> = rows.iter().map(|t| (*t).clone()).collect();
    Tensor::concat_rows(&owned)
}

/// One optimization step over an already-encoded batch of side pairs.
/// Returns the loss components. Exposed separately from the loop so tests
/// can drive single steps.
pub fn sft_step(
    sides: &[(SideForward, SideForward)],
    hyper: &SftHyper,
    opt: &mut AdamW,
) -> SftStepRow {
    let b = sides.len();
    assert!(b >= 1, "sft_step: empty batch");

    let ntp_inputs: Vec<(Tensor, Vec<usize>)> = sides
        .iter()
        .flat_map(|(q, t)| [q, t])
        .filter_map(|s| s.ntp_logits.clone().map(|l| (l, s.trace_targets.clone())))
        .collect();
    let (ntp, _) = ntp_loss(&ntp_inputs);

    let q_base = stack_rows(&sides.iter().map(|(q, _)| &q.h_base).collect::<Vec<_>>());
    let q_cot = stack_rows(&sides.iter().map(|(q, _)| &q.h_cot).collect::<Vec<_>>());
    let t_base = stack_rows(&sides.iter().map(|(_, t)| &t.h_base).collect::<Vec<_>>());
    let t_cot = stack_rows(&sides.iter().map(|(_, t)| &t.h_cot).collect::<Vec<_>>());

    let cl_base = infonce(&q_base, &t_base, hyper.tau);
    let cl_cot = infonce(&q_cot, &t_cot, hyper.tau);

    // routing targets are constants derived from the in-batch margins
    let rows_of = |t: &Tensor| -> Vec<Vec<f64>> {
        let d = t.shape()[1];
        let v = t.to_vec();
        (0..t.shape()[0]).map(|i| v[i * d..(i + 1) * d].to_vec()).collect()
    };
    let (qb, qc, tb, tc) = (rows_of(&q_base), rows_of(&q_cot), rows_of(&t_base), rows_of(&t_cot));
    let mut route_terms: Vec<Tensor> = Vec::with_capacity(2 * b);
    for i in 0..b {
        let m_base_q = positive_margin(i, &qb[i], &tb);
        let m_cot_q = positive_margin(i, &qc[i], &tc);
        let w_hat_q = routing_target(m_cot_q, m_base_q, hyper.delta, hyper.tau_g);
        route_terms.push(routing_loss(&sides[i].0.gate_logit, w_hat_q));

        let m_base_t = positive_margin(i, &tb[i], &qb);
        let m_cot_t = positive_margin(i, &tc[i], &qc);
        let w_hat_t = routing_target(m_cot_t, m_base_t, hyper.delta, hyper.tau_g);
        route_terms.push(routing_loss(&sides[i].1.gate_logit, w_hat_t));
    }
    let mut route = route_terms[0].clone();
    for t in &route_terms[1..] {
        route = route.add(t);
    }
    // query and target contributions averaged
    let route = route.scale(1.0 / (2 * b) as f64);

    let total = sft_total(&ntp, &cl_base, &cl_cot, &route, hyper);
    let row = SftStepRow {
        step: 0,
        ntp: ntp.item(),
        cl_base: cl_base.item(),
        cl_cot: cl_cot.item(),
        route: route.item(),
        total: total.item(),
    };
    total.backward();
    opt.step();
    row
}

/// Full Stage-1 run over the clean subset of the training split.
pub fn train_sft(
    model: &Model,
    corpus: &Corpus,
    train_idx: &[usize],
    cfg: &SftConfig,
) -> Result<Vec<SftStepRow>, TrainError> {
    cfg.hyper.validate().map_err(TrainError::BadHyper)?;
    let clean: Vec<usize> = train_idx
        .iter()
        .copied()
        .filter(|&i| corpus.pairs[i].clean)
        .collect();
    if clean.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            max_grad_norm: cfg.grad_clip,
            ..AdamWConfig::default()
        },
        model.sft_params(),
    );
    let mut sampler = BatchSampler::new(clean, cfg.seed);
    let mut rows = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sampler.next_batch(cfg.batch_size);
        let mut sides = Vec::with_capacity(batch.len());
        for &pi in &batch {
            sides.push(encode_training_pair(model, &corpus.pairs[pi])?);
        }
        let mut row = sft_step(&sides, &cfg.hyper, &mut opt);
        row.step = step;
        rows.push(row);
    }
    Ok(rows)
}

// ── Metrics CSV ──────────────────────────────────────────────────────

pub fn write_sft_csv(rows: &[SftStepRow], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "step,ntp,cl_base,cl_cot,route,total")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.step, r.ntp, r.cl_base, r.cl_cot, r.route, r.total
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct RlStepRow {
    pub step: usize,
    pub mean_gap_reward: f64,
    pub mean_fmt_reward: f64,
    pub mean_len: f64,
    pub kl: f64,
    pub entropy: f64,
}

pub fn write_rl_csv(rows: &[RlStepRow], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "step,mean_gap_reward,mean_fmt_reward,mean_len,kl,entropy")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.step, r.mean_gap_reward, r.mean_fmt_reward, r.mean_len, r.kl, r.entropy
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BackboneConfig;
    use crate::world::{annotate_and_filter, generate_corpus, JudgeAssignment, WorldSpec};

    fn setup(seed: u64) -> (Model, Corpus) {
        let spec = WorldSpec {
            n_attributes: 12,
            n_targets: 8,
            n_easy: 8,
            n_hard: 8,
            hard_rule_depth: 1,
            teacher_noise: 0.0,
            seed,
        };
        let mut corpus = generate_corpus(&spec).unwrap();
        annotate_and_filter(&mut corpus, &spec, JudgeAssignment::default());
        let model = Model::new(
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
        .unwrap();
        (model, corpus)
    }

    fn small_cfg(steps: usize, seed: u64) -> SftConfig {
        SftConfig {
            steps,
            batch_size: 4,
            lr: 1e-2,
            weight_decay: 0.0,
            grad_clip: 1.0,
            hyper: SftHyper { tau: 0.1, ..SftHyper::default() },
            seed,
        }
    }

    #[test]
    fn zero_steps_change_nothing() {
        let (model, corpus) = setup(1);
        let before: Vec<Vec<f64>> = model.named_params().iter().map(|(_, p)| p.to_vec()).collect();
        let idx: Vec<usize> = (0..corpus.pairs.len()).collect();
        let rows = train_sft(&model, &corpus, &idx, &small_cfg(0, 1)).unwrap();
        assert!(rows.is_empty());
        let after: Vec<Vec<f64>> = model.named_params().iter().map(|(_, p)| p.to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn backbone_is_bitwise_frozen_through_training() {
        let (model, corpus) = setup(2);
        let before: Vec<(String, Vec<f64>)> = model
            .params_with_prefix("backbone")
            .into_iter()
            .map(|(n, p)| (n, p.to_vec()))
            .collect();
        let idx: Vec<usize> = (0..corpus.pairs.len()).collect();
        train_sft(&model, &corpus, &idx, &small_cfg(3, 2)).unwrap();
        for ((name, old), (_, p)) in before.iter().zip(model.params_with_prefix("backbone")) {
            let new = p.to_vec();
            assert!(
                old.iter().zip(&new).all(|(a, b)| a.to_bits() == b.to_bits()),
                "{name} changed during training"
            );
        }
    }

    #[test]
    fn adapters_actually_move() {
        let (model, corpus) = setup(3);
        let before: Vec<Vec<f64>> = model.sft_params().iter().map(|(_, p)| p.to_vec()).collect();
        let idx: Vec<usize> = (0..corpus.pairs.len()).collect();
        train_sft(&model, &corpus, &idx, &small_cfg(2, 3)).unwrap();
        let after: Vec<Vec<f64>> = model.sft_params().iter().map(|(_, p)| p.to_vec()).collect();
        assert_ne!(before, after);
    }

    #[test]
    fn identical_config_and_seed_reproduce_metrics_exactly() {
        let run = |seed| {
            let (model, corpus) = setup(seed);
            let idx: Vec<usize> = (0..corpus.pairs.len()).collect();
            let rows = train_sft(&model, &corpus, &idx, &small_cfg(3, seed)).unwrap();
            let mut buf = Vec::new();
            write_sft_csv(&rows, &mut buf).unwrap();
            buf
        };
        assert_eq!(run(4), run(4));
    }

    #[test]
    fn all_dirty_pairs_is_an_error() {
        let (model, mut corpus) = setup(5);
        for p in &mut corpus.pairs {
            p.clean = false;
        }
        let idx: Vec<usize> = (0..corpus.pairs.len()).collect();
        assert!(matches!(
            train_sft(&model, &corpus, &idx, &small_cfg(1, 5)),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn sampler_cycles_without_repeats_within_an_epoch() {
        let mut s = BatchSampler::new((0..10).collect(), 7);
        let mut seen: Vec<usize> = Vec::new();
        seen.extend(s.next_batch(4));
        seen.extend(s.next_batch(4));
        seen.extend(s.next_batch(2));
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
