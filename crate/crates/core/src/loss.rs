//! Stage-1 objectives: next-token prediction over annotated traces,
//! in-batch contrastive loss on both embedding variants, the margin-derived
//! soft routing target, and the routing BCE, combined into one weighted
//! total.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SftHyper {
    /// Contrastive temperature.
    pub tau: f64,
    pub lambda_base: f64,
    pub lambda_cot: f64,
    pub lambda_route: f64,
    /// Margin offset in the routing target.
    pub delta: f64,
    /// Routing-target temperature.
    pub tau_g: f64,
}

impl Default for SftHyper {
    fn default() -> Self {
        SftHyper {
            tau: 0.02,
            lambda_base: 1.0,
            lambda_cot: 1.0,
            lambda_route: 1.0,
            delta: 0.0,
            tau_g: 0.1,
        }
    }
}

impl SftHyper {
    pub fn validate(&self) -> Result<(), String> {
        if self.tau <= 0.0 {
            return Err(format!("tau must be positive, got {}", self.tau));
        }
        if self.tau_g <= 0.0 {
            return Err(format!("tau_g must be positive, got {}", self.tau_g));
        }
        for (name, l) in [
            ("lambda_base", self.lambda_base),
            ("lambda_cot", self.lambda_cot),
            ("lambda_route", self.lambda_route),
        ] {
            if l < 0.0 {
                return Err(format!("{name} must be non-negative, got {l}"));
            }
        }
        Ok(())
    }
}

/// Token-level cross-entropy over annotated trace positions, averaged by
/// the total trace-token count across the batch. Returns the scalar loss
/// and that token count; a batch with zero trace tokens yields exactly 0.
pub fn ntp_loss(per_sample: &[(Tensor, Vec<usize>)]) -> (Tensor, usize) {
    let mut total_tokens = 0;
    let mut pieces: Vec<Tensor> = Vec::new();
    for (logits, targets) in per_sample {
        if targets.is_empty() {
            continue;
        }
        let (t, v) = match logits.shape() {
            [t, v] => (*t, *v),
            other => panic!("ntp_loss: logits must be 2-d, got {other:?}"),
        };
        assert_eq!(
            t,
            targets.len(),
            "ntp_loss: {t} logit rows for {} targets",
            targets.len()
        );
        total_tokens += t;
        // sum of -log p(target) via a one-hot pick
        let mut onehot = vec![0.0; t * v];
        for (row, &tok) in targets.iter().enumerate() {
            assert!(tok < v, "ntp_loss: target {tok} outside vocab {v}");
            onehot[row * v + tok] = 1.0;
        }
        let pick = Tensor::new(&[t, v], onehot);
        pieces.push(logits.log_softmax_last().mul(&pick).sum_all().neg());
    }
    if total_tokens == 0 {
        return (Tensor::scalar(0.0), 0);
    }
    let mut acc = pieces[0].clone();
    for p in &pieces[1..] {
        acc = acc.add(p);
    }
    (acc.scale(1.0 / total_tokens as f64), total_tokens)
}

/// One-directional in-batch contrastive loss: each query scores every
/// target at temperature `tau`; row `i`'s positive is target `i`. Rows must
/// be unit-norm so the dot products are cosines.
pub fn infonce(queries: &Tensor, targets: &Tensor, tau: f64) -> Tensor {
    let b = queries.shape()[0];
    assert!(b >= 1, "infonce: empty batch");
    assert_eq!(
        queries.shape(),
        targets.shape(),
        "infonce: shape mismatch {:?} vs {:?}",
        queries.shape(),
        targets.shape()
    );
    assert!(tau > 0.0, "infonce: tau must be positive");
    queries
        .matmul_nt(targets)
        .scale(1.0 / tau)
        .log_softmax_last()
        .diag()
        .mean_all()
        .neg()
}

/// Cosine to the matched positive minus the best other cosine in the bank.
/// With a single-row bank the "best negative" falls back to -1, the cosine
/// floor, so the margin stays defined.
pub fn positive_margin(i: usize, own: &[f64], bank: &[Vec<f64>]) -> f64 {
    assert!(i < bank.len(), "positive_margin: index {i} outside bank of {}", bank.len());
    let cos = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let positive = cos(own, &bank[i]);
    let best_negative = bank
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, row)| cos(own, row))
        .fold(f64::NEG_INFINITY, f64::max);
    let best_negative = if best_negative.is_finite() { best_negative } else { -1.0 };
    positive - best_negative
}

/// Soft routing target: how much better the cot-enhanced margin is than the
/// base margin, squashed at temperature `tau_g` after the offset `delta`.
pub fn routing_target(m_cot: f64, m_base: f64, delta: f64, tau_g: f64) -> f64 {
    assert!(tau_g > 0.0, "routing_target: tau_g must be positive");
    stable_sigmoid((m_cot - m_base - delta) / tau_g)
}

/// Binary cross-entropy between the gate output and a constant routing
/// target, computed from the logit:
/// `BCE(sigmoid(l), w_hat) = w_hat*softplus(-l) + (1-w_hat)*softplus(l)`.
/// No gradient flows into the margins that produced `w_hat`.
pub fn routing_loss(gate_logit: &Tensor, w_hat: f64) -> Tensor {
    assert_eq!(
        gate_logit.numel(),
        1,
        "routing_loss: gate logit must be scalar, got shape {:?}",
        gate_logit.shape()
    );
    let l = gate_logit.reshape(&[1]);
    l.neg()
        .softplus()
        .scale(w_hat)
        .add(&l.softplus().scale(1.0 - w_hat))
}

/// Weighted Stage-1 total.
pub fn sft_total(
    ntp: &Tensor,
    contrastive_base: &Tensor,
    contrastive_cot: &Tensor,
    route: &Tensor,
    hyper: &SftHyper,
) -> Tensor {
    ntp.add(&contrastive_base.scale(hyper.lambda_base))
        .add(&contrastive_cot.scale(hyper.lambda_cot))
        .add(&route.scale(hyper.lambda_route))
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Rng, Stream};
    use crate::tensor::check_gradient;
    use proptest::prelude::*;

    #[test]
    fn uniform_logits_cost_log_vocab() {
        let v = 11;
        let logits = Tensor::param(&[3, v], vec![0.25; 3 * v]);
        let (loss, n) = ntp_loss(&[(logits, vec![1, 5, 10])]);
        assert_eq!(n, 3);
        assert!((loss.item() - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_cost_nothing() {
        let mut data = vec![0.0; 2 * 8];
        data[3] = 50.0;
        data[8 + 6] = 50.0;
        let logits = Tensor::param(&[2, 8], data);
        let (loss, _) = ntp_loss(&[(logits, vec![3, 6])]);
        assert!(loss.item() < 1e-12, "loss {}", loss.item());
    }

    #[test]
    fn batch_normalizes_by_total_token_count() {
        // lengths 1 and 3: denominator 4
        let l1 = Tensor::param(&[1, 4], vec![0.0; 4]);
        let l2 = Tensor::param(&[3, 4], vec![0.0; 12]);
        let (loss, n) = ntp_loss(&[(l1, vec![0]), (l2, vec![1, 2, 3])]);
        assert_eq!(n, 4);
        // 4 uniform tokens, each ln 4, divided by 4
        assert!((loss.item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_trace_tokens_flagged() {
        let (loss, n) = ntp_loss(&[]);
        assert_eq!(n, 0);
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn single_pair_batch_has_zero_contrastive_loss() {
        let q = Tensor::param(&[1, 4], vec![1.0, 0.0, 0.0, 0.0]);
        let t = Tensor::param(&[1, 4], vec![0.0, 1.0, 0.0, 0.0]);
        assert!(infonce(&q, &t, 0.5).item().abs() < 1e-15);
    }

    #[test]
    fn identity_cosine_matrix_at_unit_temperature() {
        let q = Tensor::param(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let t = Tensor::param(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let expected = (1.0 + (-1.0f64).exp()).ln(); // evaluated by hand
        assert!((infonce(&q, &t, 1.0).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn sharp_temperature_separates_fully() {
        // cosine +1 on the diagonal, -1 off it
        let q = Tensor::param(&[2, 1], vec![1.0, -1.0]);
        let t = Tensor::param(&[2, 1], vec![1.0, -1.0]);
        assert!(infonce(&q, &t, 0.02).item() < 1e-10);
    }

    #[test]
    #[should_panic(expected = "infonce: empty batch")]
    fn empty_batch_is_an_error() {
        let q = Tensor::zeros(&[0, 4]);
        let t = Tensor::zeros(&[0, 4]);
        let _ = infonce(&q, &t, 1.0);
    }

    #[test]
    fn margin_is_positive_minus_best_negative() {
        let own = vec![1.0, 0.0];
        let bank = vec![
            vec![0.9, (1.0f64 - 0.81).sqrt()],
            vec![0.7, (1.0f64 - 0.49).sqrt()],
        ];
        let m = positive_margin(0, &own, &bank);
        assert!((m - 0.2).abs() < 1e-12, "margin {m}");
    }

    #[test]
    fn margin_extremes() {
        let own = vec![1.0, 0.0];
        // own equals its positive, negatives orthogonal
        let bank = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!((positive_margin(0, &own, &bank) - 1.0).abs() < 1e-12);
        // duplicate of the positive among the negatives ties the max
        let bank = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        assert!(positive_margin(0, &own, &bank).abs() < 1e-12);
        // single-row bank falls back to the -1 floor
        let bank = vec![vec![1.0, 0.0]];
        assert!((positive_margin(0, &own, &bank) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn routing_target_midpoint_and_saturation() {
        assert_eq!(routing_target(0.25, 0.125, 0.125, 0.1), 0.5);
        assert!(routing_target(2.0, -2.0, 0.0, 0.1) > 0.999);
        let a = routing_target(0.1, 0.0, 0.0, 0.1);
        let b = routing_target(0.2, 0.0, 0.0, 0.1);
        assert!(b > a, "not increasing in the margin difference");
    }

    #[test]
    fn routing_loss_at_half_is_ln_two() {
        let logit = Tensor::param(&[1], vec![0.0]);
        let loss = routing_loss(&logit, 0.5);
        assert!((loss.item() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn routing_loss_vanishes_when_gate_matches_saturated_target() {
        let logit = Tensor::param(&[1], vec![40.0]);
        assert!(routing_loss(&logit, 1.0).item() < 1e-12);
    }

    #[test]
    fn sft_total_is_the_weighted_sum() {
        let parts: Vec<Tensor> = [0.5, 0.2, 0.3, 0.7].iter().map(|&v| Tensor::scalar(v)).collect();
        let unit = SftHyper {
            lambda_base: 1.0,
            lambda_cot: 1.0,
            lambda_route: 1.0,
            ..SftHyper::default()
        };
        let total = sft_total(&parts[0], &parts[1], &parts[2], &parts[3], &unit);
        assert!((total.item() - 1.7).abs() < 1e-12);
        let zeroed = SftHyper {
            lambda_base: 0.0,
            lambda_cot: 0.0,
            lambda_route: 0.0,
            ..SftHyper::default()
        };
        let only_ntp = sft_total(&parts[0], &parts[1], &parts[2], &parts[3], &zeroed);
        assert_eq!(only_ntp.item(), 0.5);
    }

    #[test]
    fn infonce_gradient_matches_finite_differences() {
        let mut rng = Rng::new(21, Stream::Init);
        let raw_q = Tensor::param(&[4, 8], (0..32).map(|_| rng.next_gaussian()).collect());
        let raw_t = Tensor::new(&[4, 8], (0..32).map(|_| rng.next_gaussian()).collect());
        let err = check_gradient(
            |q| {
                infonce(
                    &q.l2_normalize_last(),
                    &raw_t.l2_normalize_last(),
                    0.2,
                )
            },
            &raw_q,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn routing_bce_gradient_matches_finite_differences() {
        let mut rng = Rng::new(22, Stream::Init);
        for _ in 0..10 {
            let logit = Tensor::param(&[1], vec![rng.next_gaussian() * 2.0]);
            let w_hat = rng.next_f64() * 0.98 + 0.01;
            let err = check_gradient(|l| routing_loss(l, w_hat), &logit, 1e-5).unwrap();
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn ntp_gradient_matches_finite_differences() {
        let mut rng = Rng::new(23, Stream::Init);
        let logits = Tensor::param(&[3, 6], (0..18).map(|_| rng.next_gaussian()).collect());
        let err = check_gradient(
            |l| ntp_loss(&[(l.clone(), vec![2, 0, 5])]).0,
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn contrastive_loss_strictly_improves_with_the_positive_cosine() {
        // raising cos(q_i, t_i) with everything else fixed lowers the loss
        let make = |diag: f64| {
            let q = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
            let mut t_data = vec![diag, (1.0 - diag * diag).sqrt(), 0.0, 1.0];
            // keep the off-diagonal cosines fixed at t[1] = e2: cos(q0,t1)=0
            t_data[2] = 0.0;
            t_data[3] = 1.0;
            let t = Tensor::new(&[2, 2], t_data);
            infonce(&q, &t, 0.5).item()
        };
        assert!(make(0.9) < make(0.5));
        assert!(make(0.5) < make(0.1));
    }

    proptest! {
        #[test]
        fn routing_target_is_antisymmetric_around_delta(
            x in -3.0f64..3.0,
            delta in -0.5f64..0.5,
            tau_g in 0.01f64..1.0,
        ) {
            let up = routing_target(delta + x, 0.0, delta, tau_g);
            let down = routing_target(delta - x, 0.0, delta, tau_g);
            prop_assert!((up + down - 1.0).abs() < 1e-12);
        }

        #[test]
        fn infonce_is_invariant_under_common_permutation(seed in 0u64..500) {
            let mut rng = Rng::new(seed, Stream::Init);
            let n = 5usize;
            let d = 6usize;
            let raw: Vec<f64> = (0..2 * n * d).map(|_| rng.next_gaussian()).collect();
            let q = Tensor::new(&[n, d], raw[..n * d].to_vec()).l2_normalize_last();
            let t = Tensor::new(&[n, d], raw[n * d..].to_vec()).l2_normalize_last();
            let base = infonce(&q, &t, 0.1).item();
            // rotate both sides by the same offset
            let rotate = |m: &Tensor, by: usize| {
                let rows: Vec<Tensor> = (0..n).map(|i| m.slice_rows((i + by) % n, (i + by) % n + 1)).collect();
                Tensor::concat_rows(&rows)
            };
            let rotated = infonce(&rotate(&q, 2), &rotate(&t, 2), 0.1).item();
            prop_assert!((base - rotated).abs() < 1e-9);
        }
    }
}
