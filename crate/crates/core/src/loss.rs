//! Classification losses over logits, each with its gradient.

use serde::{Deserialize, Serialize};

use crate::nn::{log_softmax, softmax};

/// `-log softmax(logits)[target]`, max-subtracted.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    -log_softmax(logits)[target]
}

/// Loss and `d loss / d logits`.
pub fn cross_entropy_grad(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let lp = log_softmax(logits);
    let grad = lp
        .iter()
        .enumerate()
        .map(|(k, l)| l.exp() - if k == target { 1.0 } else { 0.0 })
        .collect();
    (-lp[target], grad)
}

/// `-α (1 - p_t)^γ ln p_t` with `p_t = softmax(logits)[target]`.
pub fn focal_loss(logits: &[f64], target: usize, gamma: f64, alpha: f64) -> f64 {
    focal_from_log_pt(log_softmax(logits)[target], gamma, alpha)
}

fn focal_from_log_pt(log_pt: f64, gamma: f64, alpha: f64) -> f64 {
    let one_minus = -log_pt.exp_m1();
    -alpha * one_minus.powf(gamma) * log_pt
}

pub fn focal_grad(logits: &[f64], target: usize, gamma: f64, alpha: f64) -> (f64, Vec<f64>) {
    let lp = log_softmax(logits);
    let log_pt = lp[target];
    let pt = log_pt.exp();
    let one_minus = -log_pt.exp_m1();
    let loss = focal_from_log_pt(log_pt, gamma, alpha);
    // dL/dp_t, then chain through dp_t/dz_k = p_t (δ_tk - p_k)
    let modulating = one_minus.powf(gamma);
    let d_mod = if gamma == 0.0 {
        0.0
    } else if one_minus == 0.0 {
        if gamma >= 1.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        gamma * one_minus.powf(gamma - 1.0)
    };
    let dl_dpt = -alpha * (-d_mod * log_pt + modulating / pt);
    let grad = lp
        .iter()
        .enumerate()
        .map(|(k, l)| {
            let delta = if k == target { 1.0 } else { 0.0 };
            dl_dpt * pt * (delta - l.exp())
        })
        .collect();
    (loss, grad)
}

/// Weights `w_k ∝ 1 / fraction_k` over foreground predicates, normalized to
/// mean 1 over the foreground; background (index 0) fixed at 1. Zero counts
/// are clamped to 1.
pub fn class_weights_inverse_fraction(counts: &[usize]) -> Vec<f64> {
    let fg = &counts[1..];
    let total: f64 = fg.iter().map(|&c| c.max(1) as f64).sum();
    let raw: Vec<f64> = fg.iter().map(|&c| total / c.max(1) as f64).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    std::iter::once(1.0)
        .chain(raw.into_iter().map(|w| w / mean))
        .collect()
}

/// The loss applied to the fused predicate logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredicateLoss {
    CrossEntropy,
    Focal { gamma: f64, alpha: f64 },
    Weighted { weights: Vec<f64> },
}

impl PredicateLoss {
    pub fn value(&self, logits: &[f64], target: usize) -> f64 {
        match self {
            PredicateLoss::CrossEntropy => cross_entropy(logits, target),
            PredicateLoss::Focal { gamma, alpha } => focal_loss(logits, target, *gamma, *alpha),
            PredicateLoss::Weighted { weights } => weights[target] * cross_entropy(logits, target),
        }
    }

    pub fn value_and_grad(&self, logits: &[f64], target: usize) -> (f64, Vec<f64>) {
        match self {
            PredicateLoss::CrossEntropy => cross_entropy_grad(logits, target),
            PredicateLoss::Focal { gamma, alpha } => focal_grad(logits, target, *gamma, *alpha),
            PredicateLoss::Weighted { weights } => {
                let w = weights[target];
                let (l, g) = cross_entropy_grad(logits, target);
                (w * l, g.into_iter().map(|v| w * v).collect())
            }
        }
    }
}

/// Probabilities, exposed for callers that score with the same softmax.
pub fn probabilities(logits: &[f64]) -> Vec<f64> {
    softmax(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cross_entropy_cases() {
        assert!((cross_entropy(&[0.0, 0.0], 0) - 2f64.ln()).abs() < 1e-15);
        let big = cross_entropy(&[1000.0, 0.0], 0);
        assert!(big.is_finite() && big.abs() < 1e-300);
        // direct evaluation oracle
        let e = std::f64::consts::E;
        let want = -((e.powi(3)) / (e + e * e + e.powi(3))).ln();
        assert!((cross_entropy(&[1.0, 2.0, 3.0], 2) - want).abs() < 1e-14);
        assert!((want - 0.4076).abs() < 1e-4);
    }

    #[test]
    fn focal_cases() {
        let l = [0.3, -1.2, 2.0];
        assert!((focal_loss(&l, 1, 0.0, 1.0) - cross_entropy(&l, 1)).abs() < 1e-15);
        // p_t = 1 - 1e-9: two classes with logit gap ln((1-ε)/ε)
        let eps: f64 = 1e-9;
        let gap = ((1.0 - eps) / eps).ln();
        assert!(focal_loss(&[gap, 0.0], 0, 2.0, 0.25) < 1e-15);
        // p_t = 0.25 with four equal logits
        let f = focal_loss(&[0.0; 4], 2, 2.0, 0.25);
        let want = 0.25 * 0.75f64.powi(2) * -(0.25f64.ln());
        assert!((f - want).abs() < 1e-15);
        assert!((f - 0.19495).abs() < 1e-5);
    }

    #[test]
    fn inverse_fraction_weights() {
        assert_eq!(
            class_weights_inverse_fraction(&[100, 10, 10]),
            vec![1.0, 1.0, 1.0]
        );
        let w = class_weights_inverse_fraction(&[7, 30, 10]);
        assert!((w[1] - 0.5).abs() < 1e-15 && (w[2] - 1.5).abs() < 1e-15);
        assert_eq!(w[0], 1.0);
        let clamped = class_weights_inverse_fraction(&[0, 4, 0]);
        assert!(clamped.iter().all(|v| v.is_finite()));
    }

    fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn focal_reduces_to_ce(l in prop::collection::vec(-20.0f64..20.0, 2..8), t in 0usize..8) {
            let t = t % l.len();
            prop_assert!((focal_loss(&l, t, 0.0, 1.0) - cross_entropy(&l, t)).abs() < 1e-12);
        }

        #[test]
        fn loss_gradients_match_differences(l in prop::collection::vec(-4.0f64..4.0, 2..6), t in 0usize..6) {
            let t = t % l.len();
            let weights: Vec<f64> = (0..l.len()).map(|k| 0.5 + k as f64).collect();
            for loss in [
                PredicateLoss::CrossEntropy,
                PredicateLoss::Focal { gamma: 2.0, alpha: 0.25 },
                PredicateLoss::Weighted { weights },
            ] {
                let (v, g) = loss.value_and_grad(&l, t);
                prop_assert!((v - loss.value(&l, t)).abs() < 1e-14);
                let n = fd_grad(|x| loss.value(x, t), &l);
                for (a, b) in g.iter().zip(&n) {
                    prop_assert!((a - b).abs() < 1e-6 * (1.0 + a.abs()));
                }
            }
        }

        #[test]
        fn equal_weights_equal_plain_ce(l in prop::collection::vec(-10.0f64..10.0, 3..6), t in 0usize..6) {
            let t = t % l.len();
            let counts = vec![50usize; l.len()];
            let w = PredicateLoss::Weighted { weights: class_weights_inverse_fraction(&counts) };
            prop_assert_eq!(w.value(&l, t), cross_entropy(&l, t));
        }
    }
}
