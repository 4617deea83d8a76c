//! Scalar training objectives.
//!
//! The total objective is
//!
//! ```text
//! L = L_task + L_load + R_intra + R_inter
//! ```
//!
//! with
//!   * `L_task`  mean cross-entropy over the batch
//!   * `L_load`  alpha * N * sum_i h_i * P_i, where `h_i` is the batch
//!     fraction of tokens dispatched to expert i (a hard indicator mean)
//!     and `P_i` the batch mean gate probability
//!   * `R_inter` lambda_inter * ||pi_tilde||^2, mean over tokens
//!   * `R_intra` -lambda_intra * ||pi||^2, mean over tokens
//!
//! `h` is piecewise constant in the parameters, so the load loss is trained
//! through `P` only. The regularizer entry points below are per-token; batch
//! aggregation in the harness averages them.

use crate::error::{Error, Result};
use crate::numerics::{ensure_finite, l2sq};
use crate::router::RoutingOutput;

/// Batch dispatch statistics: hard load fractions and mean gate mass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    /// `h_i`: fraction of tokens that selected expert i. Sums to the number
    /// of selections per token.
    pub h: Vec<f64>,
    /// `P_i`: batch mean of the gate probability of expert i.
    pub p: Vec<f64>,
    pub token_count: usize,
}

impl BatchStats {
    pub fn from_outputs(outputs: &[RoutingOutput], num_experts: usize) -> Result<BatchStats> {
        if outputs.is_empty() {
            return Err(Error::EmptyInput {
                what: "batch routing outputs",
            });
        }
        let mut h = vec![0.0; num_experts];
        let mut p = vec![0.0; num_experts];
        for out in outputs {
            if out.pi.len() != num_experts {
                return Err(Error::DimMismatch {
                    what: "routing output width",
                    expected: num_experts,
                    got: out.pi.len(),
                });
            }
            for &e in &out.selected {
                h[e] += 1.0;
            }
            for (acc, &pi) in p.iter_mut().zip(&out.pi) {
                *acc += pi;
            }
        }
        let b = outputs.len() as f64;
        for v in h.iter_mut().chain(p.iter_mut()) {
            *v /= b;
        }
        Ok(BatchStats {
            h,
            p,
            token_count: outputs.len(),
        })
    }
}

/// Mean cross-entropy of the class logits against the labels, natural log.
pub fn task_loss(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::EmptyInput { what: "task logits" });
    }
    if logits.len() != labels.len() {
        return Err(Error::DimMismatch {
            what: "task labels",
            expected: logits.len(),
            got: labels.len(),
        });
    }
    let mut total = 0.0;
    for (z, &label) in logits.iter().zip(labels) {
        total += cross_entropy(z, label)?;
    }
    Ok(total / logits.len() as f64)
}

/// `-ln softmax(z)[label]` via the log-sum-exp form.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::EmptyInput {
            what: "class logits",
        });
    }
    ensure_finite("class logits", logits)?;
    if label >= logits.len() {
        return Err(Error::DimMismatch {
            what: "class label",
            expected: logits.len(),
            got: label,
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// `alpha * N * sum_i h_i * P_i`.
pub fn load_balance_loss(stats: &BatchStats, alpha: f64, num_experts: usize) -> Result<f64> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::InvalidConfig {
            reason: format!("load coefficient must be finite and nonnegative, got {alpha}"),
        });
    }
    if stats.h.len() != num_experts || stats.p.len() != num_experts {
        return Err(Error::DimMismatch {
            what: "batch stats width",
            expected: num_experts,
            got: stats.h.len(),
        });
    }
    ensure_finite("batch stats h", &stats.h)?;
    ensure_finite("batch stats p", &stats.p)?;
    let dot: f64 = stats.h.iter().zip(&stats.p).map(|(&h, &p)| h * p).sum();
    Ok(alpha * num_experts as f64 * dot)
}

/// Inter-group concentration penalty for one token: `lambda * ||pi_tilde||^2`.
pub fn inter_regularizer(pi_tilde: &[f64], lambda: f64) -> Result<f64> {
    check_lambda("lambda_inter", lambda)?;
    ensure_finite("inter_regularizer pi_tilde", pi_tilde)?;
    Ok(lambda * l2sq(pi_tilde))
}

/// Intra-group sharpening bonus for one token: `-lambda * ||pi||^2`.
pub fn intra_regularizer(pi: &[f64], lambda: f64) -> Result<f64> {
    check_lambda("lambda_intra", lambda)?;
    ensure_finite("intra_regularizer pi", pi)?;
    Ok(-lambda * l2sq(pi))
}

fn check_lambda(name: &'static str, lambda: f64) -> Result<()> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::InvalidConfig {
            reason: format!("{name} must be finite and nonnegative, got {lambda}"),
        });
    }
    Ok(())
}

/// Plain sum of the four terms.
pub fn total_objective(task: f64, load: f64, intra: f64, inter: f64) -> Result<f64> {
    let total = task + load + intra + inter;
    if !total.is_finite() {
        return Err(Error::NonFinite {
            what: "total objective",
        });
    }
    Ok(total)
}

/// Constrained form of the same objective:
///
/// ```text
/// task + load + lambda_inter * ||pi_tilde||^2 + lambda_intra * (1 - ||pi||^2)
/// ```
///
/// For any token it exceeds `total_objective` by exactly `lambda_intra`,
/// since `||pi||^2` enters both and the shift constant is all that differs.
pub fn lagrangian_form(
    task: f64,
    load: f64,
    pi: &[f64],
    pi_tilde: &[f64],
    lambda_intra: f64,
    lambda_inter: f64,
) -> Result<f64> {
    check_lambda("lambda_intra", lambda_intra)?;
    check_lambda("lambda_inter", lambda_inter)?;
    ensure_finite("lagrangian pi", pi)?;
    ensure_finite("lagrangian pi_tilde", pi_tilde)?;
    let value = task + load + lambda_inter * l2sq(pi_tilde) + lambda_intra * (1.0 - l2sq(pi));
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: "lagrangian objective",
        });
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::router::RoutingOutput;

    fn output(pi: Vec<f64>, selected: Vec<usize>) -> RoutingOutput {
        let mut pi_tilde = vec![0.0; pi.len()];
        for &e in &selected {
            pi_tilde[e] = pi[e];
        }
        RoutingOutput {
            pi,
            pi_tilde,
            selected,
            group_mass: vec![1.0],
        }
    }

    #[test]
    fn task_loss_matches_log_probability() {
        // Two classes with p(correct) = 0.8 for both tokens.
        let logits = vec![
            vec![0.8f64.ln(), 0.2f64.ln()],
            vec![0.8f64.ln(), 0.2f64.ln()],
        ];
        let loss = task_loss(&logits, &[0, 0]).unwrap();
        assert!((loss + 0.8f64.ln()).abs() <= 1e-12);
    }

    #[test]
    fn task_loss_uniform_prediction_is_log_class_count() {
        for c in [2usize, 5, 11] {
            let logits = vec![vec![0.7; c]];
            let loss = task_loss(&logits, &[c - 1]).unwrap();
            assert!((loss - (c as f64).ln()).abs() <= 1e-12);
        }
    }

    #[test]
    fn task_loss_rejects_bad_input() {
        assert!(task_loss(&[], &[]).is_err());
        assert!(task_loss(&[vec![0.0, 1.0]], &[2]).is_err());
        assert!(task_loss(&[vec![0.0, 1.0]], &[0, 1]).is_err());
        assert!(task_loss(&[vec![f64::NAN, 1.0]], &[0]).is_err());
    }

    #[test]
    fn batch_stats_worked_example() {
        // Token one selects expert 0 with pi [0.8, 0.2], token two selects
        // expert 0 with pi [0.6, 0.4]: h = [1, 0], P = [0.7, 0.3].
        let outputs = vec![
            output(vec![0.8, 0.2], vec![0]),
            output(vec![0.6, 0.4], vec![0]),
        ];
        let stats = BatchStats::from_outputs(&outputs, 2).unwrap();
        assert_eq!(stats.h, vec![1.0, 0.0]);
        assert!((stats.p[0] - 0.7).abs() <= 1e-12);
        assert!((stats.p[1] - 0.3).abs() <= 1e-12);

        let load = load_balance_loss(&stats, 0.01, 2).unwrap();
        assert!((load - 0.014).abs() <= 1e-12);
    }

    #[test]
    fn batch_stats_selection_mass_sums_to_k() {
        let outputs = vec![
            output(vec![0.25, 0.25, 0.25, 0.25], vec![0, 2]),
            output(vec![0.4, 0.3, 0.2, 0.1], vec![0, 1]),
        ];
        let stats = BatchStats::from_outputs(&outputs, 4).unwrap();
        assert!((stats.h.iter().sum::<f64>() - 2.0).abs() <= 1e-12);
        assert!(stats.h.iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert!((stats.p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn perfect_balance_matches_uniform_limit() {
        // h uniform at K/N and P uniform at 1/N gives alpha * K exactly.
        let n = 8;
        let k = 2.0;
        let stats = BatchStats {
            h: vec![k / n as f64; n],
            p: vec![1.0 / n as f64; n],
            token_count: 4,
        };
        let load = load_balance_loss(&stats, 0.01, n).unwrap();
        assert!((load - 0.01 * k).abs() <= 1e-12);
    }

    #[test]
    fn regularizer_worked_examples() {
        let inter = inter_regularizer(&[0.4, 0.0, 0.3, 0.0], 0.05).unwrap();
        assert!((inter - 0.0125).abs() <= 1e-12);
        let intra = intra_regularizer(&[0.4, 0.1, 0.3, 0.2], 0.1).unwrap();
        assert!((intra + 0.03).abs() <= 1e-12);
        assert_eq!(inter_regularizer(&[0.4, 0.3], 0.0).unwrap(), 0.0);
        assert_eq!(intra_regularizer(&[0.4, 0.3], 0.0).unwrap(), 0.0);
        assert!(inter_regularizer(&[0.4], -0.1).is_err());
        assert!(intra_regularizer(&[0.4], f64::NAN).is_err());
    }

    #[test]
    fn total_and_lagrangian_differ_by_lambda_intra() {
        let pi = [0.4, 0.1, 0.3, 0.2];
        let pi_tilde = [0.4, 0.0, 0.3, 0.0];
        let task = 1.0;
        let load = 0.014;
        let intra = intra_regularizer(&pi, 0.1).unwrap();
        let inter = inter_regularizer(&pi_tilde, 0.05).unwrap();
        let total = total_objective(task, load, intra, inter).unwrap();
        assert!((total - 0.9965).abs() <= 1e-12);
        let lagr = lagrangian_form(task, load, &pi, &pi_tilde, 0.1, 0.05).unwrap();
        assert!((lagr - 1.0965).abs() <= 1e-12);
        assert!((lagr - total - 0.1).abs() <= 1e-12);
    }

    #[test]
    fn total_objective_rejects_non_finite_sum() {
        assert!(total_objective(f64::MAX, f64::MAX, 0.0, 0.0).is_err());
        assert!(total_objective(f64::NAN, 0.0, 0.0, 0.0).is_err());
    }
}
