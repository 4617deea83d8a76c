//! Balance, diversity, and specialization diagnostics.
//!
//! Everything here is a pure function of routing outputs or parameters, so
//! the training loop can log a consistent snapshot per step and the
//! property suites can cross-check closed forms against direct evaluation.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::moe::ExpertParams;
use crate::numerics::{check_simplex, dot, ensure_finite, l2sq};
use crate::router::RoutingOutput;

/// Population coefficient of variation `sigma / mu` of a nonnegative load
/// vector. Requires a strictly positive total.
pub fn coefficient_of_variation(loads: &[f64]) -> Result<f64> {
    ensure_finite("load vector", loads)?;
    if loads.is_empty() {
        return Err(Error::EmptyInput { what: "load vector" });
    }
    if loads.iter().any(|&v| v < 0.0) {
        return Err(Error::NonPositive {
            what: "load vector entry",
            value: *loads.iter().find(|&&v| v < 0.0).unwrap(),
        });
    }
    let total: f64 = loads.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroMass { what: "load vector" });
    }
    let n = loads.len() as f64;
    let mean = total / n;
    let var = loads.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

/// Difference between `CV(loads)^2` and `M * ||normalized loads||^2 - 1`.
///
/// The two sides agree identically, so this gap should sit at rounding
/// error; it is exposed so the property suite can measure it directly.
pub fn cv_l2_identity_gap(loads: &[f64]) -> Result<f64> {
    let cv = coefficient_of_variation(loads)?;
    let total: f64 = loads.iter().sum();
    let normalized: Vec<f64> = loads.iter().map(|&v| v / total).collect();
    let m = loads.len() as f64;
    Ok(cv * cv - (m * l2sq(&normalized) - 1.0))
}

/// Pairwise co-assignment mass `sum_{i != j} pi_i pi_j = 1 - ||pi||^2`.
pub fn overlap(pi: &[f64]) -> Result<f64> {
    check_simplex("overlap probabilities", pi)?;
    Ok(1.0 - l2sq(pi))
}

/// Collision entropy of the expert assignment given the token,
/// `H2(E | X) = -ln E_x ||pi(x)||^2`.
pub fn collision_entropy_conditional(batch_pi: &[Vec<f64>]) -> Result<f64> {
    Ok(-mean_squared_norm(batch_pi)?.ln())
}

/// Collision mutual information between tokens and experts,
/// `I2 = ln( E_x ||pi(x)||^2 / ||mean pi||^2 )`.
///
/// Zero when routing ignores the token; grows as tokens commit to
/// distinct experts while the marginal stays spread out.
pub fn collision_mutual_information(batch_pi: &[Vec<f64>]) -> Result<f64> {
    let mean_sq = mean_squared_norm(batch_pi)?;
    let n = batch_pi[0].len();
    let count = batch_pi.len() as f64;
    let mut marginal = vec![0.0; n];
    for pi in batch_pi {
        for (m, &p) in marginal.iter_mut().zip(pi) {
            *m += p / count;
        }
    }
    let marginal_sq = l2sq(&marginal);
    if marginal_sq <= 0.0 {
        return Err(Error::ZeroMass {
            what: "marginal routing distribution",
        });
    }
    Ok((mean_sq / marginal_sq).ln())
}

/// Mean number of groups per token that received nonzero routing mass.
pub fn group_coverage(outputs: &[RoutingOutput], num_groups: usize) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::EmptyInput { what: "routing outputs" });
    }
    let mut total = 0usize;
    for out in outputs {
        if out.group_mass.len() != num_groups {
            return Err(Error::DimMismatch {
                what: "group mass vector",
                expected: num_groups,
                got: out.group_mass.len(),
            });
        }
        total += out.group_mass.iter().filter(|&&r| r > 0.0).count();
    }
    Ok(total as f64 / outputs.len() as f64)
}

/// Mean and population standard deviation of pairwise cosine similarity
/// between flattened expert parameter vectors. Experts with vanishing
/// parameter norm are excluded (a warning is printed); at least two live
/// experts are required.
pub fn parameter_cosine(experts: &[ExpertParams]) -> Result<(f64, f64)> {
    let mut flats = Vec::with_capacity(experts.len());
    for (e, theta) in experts.iter().enumerate() {
        let mut flat = Vec::new();
        theta.flatten_into(&mut flat);
        ensure_finite("expert parameters", &flat)?;
        let norm = l2sq(&flat).sqrt();
        if norm < 1e-12 {
            eprintln!("warning: expert {e} has zero parameter norm, skipping in cosine stats");
            continue;
        }
        flats.push((flat, norm));
    }
    if flats.len() < 2 {
        return Err(Error::EmptyInput {
            what: "expert pairs with nonzero norm",
        });
    }
    let mut cosines = Vec::new();
    for i in 0..flats.len() {
        for j in (i + 1)..flats.len() {
            let (fi, ni) = &flats[i];
            let (fj, nj) = &flats[j];
            cosines.push(dot(fi, fj) / (ni * nj));
        }
    }
    Ok(mean_std(&cosines))
}

/// Functional similarity: cosine between expert outputs on shared probe
/// inputs, pooled over every (pair, probe) combination.
pub fn expert_similarity(experts: &[ExpertParams], probes: &[Vec<f64>]) -> Result<(f64, f64)> {
    if experts.len() < 2 {
        return Err(Error::EmptyInput { what: "expert pair" });
    }
    if probes.is_empty() {
        return Err(Error::EmptyInput { what: "probe inputs" });
    }
    let mut cosines = Vec::new();
    for probe in probes {
        let outputs: Vec<Vec<f64>> = experts
            .iter()
            .map(|theta| crate::moe::expert_forward(probe, theta))
            .collect::<Result<_>>()?;
        for i in 0..outputs.len() {
            for j in (i + 1)..outputs.len() {
                let ni = l2sq(&outputs[i]).sqrt();
                let nj = l2sq(&outputs[j]).sqrt();
                if ni < 1e-12 || nj < 1e-12 {
                    continue;
                }
                cosines.push(dot(&outputs[i], &outputs[j]) / (ni * nj));
            }
        }
    }
    if cosines.is_empty() {
        return Err(Error::ZeroMass {
            what: "expert outputs on probes",
        });
    }
    Ok(mean_std(&cosines))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One row of the per-step training log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSnapshot {
    pub step: usize,
    pub expert_cv: f64,
    pub group_cv: f64,
    pub coverage_mean: f64,
    pub collision_h2: f64,
    pub collision_mi: f64,
    pub mean_overlap: f64,
    pub task_loss: f64,
    pub total_loss: f64,
}

impl MetricsSnapshot {
    pub const CSV_HEADER: &'static str =
        "step,expert_cv,group_cv,coverage_mean,collision_h2,collision_mi,mean_overlap,task_loss,total_loss";

    pub fn to_csv_row(&self) -> String {
        let mut row = String::new();
        write!(
            row,
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.expert_cv,
            self.group_cv,
            self.coverage_mean,
            self.collision_h2,
            self.collision_mi,
            self.mean_overlap,
            self.task_loss,
            self.total_loss
        )
        .expect("writing to a String cannot fail");
        row
    }
}

/// `E_x ||pi(x)||^2` over a batch of routing distributions.
pub(crate) fn mean_squared_norm(batch_pi: &[Vec<f64>]) -> Result<f64> {
    if batch_pi.is_empty() {
        return Err(Error::EmptyInput {
            what: "routing distribution batch",
        });
    }
    let n = batch_pi[0].len();
    let mut acc = 0.0;
    for pi in batch_pi {
        if pi.len() != n {
            return Err(Error::DimMismatch {
                what: "routing distribution batch",
                expected: n,
                got: pi.len(),
            });
        }
        check_simplex("batch routing distribution", pi)?;
        acc += l2sq(pi);
    }
    Ok(acc / batch_pi.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::router::{flat_topk, grouped_topk, GroupPartition, RouterConfig};
    use proptest::prelude::*;

    #[test]
    fn cv_of_skewed_load_is_sqrt_half() {
        let cv = coefficient_of_variation(&[2.0, 1.0, 1.0, 0.0]).unwrap();
        assert!((cv - 0.5f64.sqrt()).abs() <= 1e-12);
    }

    #[test]
    fn cv_of_uniform_load_is_zero() {
        assert_eq!(coefficient_of_variation(&[3.0, 3.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn cv_rejects_degenerate_inputs() {
        assert!(coefficient_of_variation(&[]).is_err());
        assert!(coefficient_of_variation(&[0.0, 0.0]).is_err());
        assert!(coefficient_of_variation(&[1.0, -0.5]).is_err());
        assert!(coefficient_of_variation(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn cv_identity_gap_is_tiny_on_exact_cases() {
        assert!(cv_l2_identity_gap(&[2.0, 1.0, 1.0, 0.0]).unwrap().abs() <= 1e-15);
        assert!(cv_l2_identity_gap(&[1.0, 2.0, 3.0, 4.0]).unwrap().abs() <= 1e-15);
    }

    #[test]
    fn overlap_matches_closed_form() {
        assert!((overlap(&[0.5, 0.5]).unwrap() - 0.5).abs() <= 1e-15);
        let quarter = overlap(&[0.25, 0.25, 0.25, 0.25]).unwrap();
        assert!((quarter - 0.75).abs() <= 1e-15);
        assert_eq!(overlap(&[1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn conditional_collision_entropy_averages_norms() {
        // Squared norms 0.3 and 0.5, mean 0.4.
        let batch = vec![vec![0.4, 0.3, 0.2, 0.1], vec![0.5, 0.5, 0.0, 0.0]];
        let h2 = collision_entropy_conditional(&batch).unwrap();
        assert!((h2 + 0.4f64.ln()).abs() <= 1e-12);
    }

    #[test]
    fn mutual_information_of_alternating_one_hots_is_ln_two() {
        let batch = vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ];
        let mi = collision_mutual_information(&batch).unwrap();
        assert!((mi - 2.0f64.ln()).abs() <= 1e-12);
    }

    #[test]
    fn mutual_information_of_token_independent_routing_is_zero() {
        let batch = vec![vec![0.4, 0.3, 0.2, 0.1]; 5];
        let mi = collision_mutual_information(&batch).unwrap();
        assert!(mi.abs() <= 1e-12);
    }

    #[test]
    fn mutual_information_is_nonnegative_on_random_batches() {
        let mut rng = crate::numerics::Rng::new(31);
        for _ in 0..200 {
            let batch: Vec<Vec<f64>> = (0..8).map(|_| rng.simplex(5)).collect();
            let mi = collision_mutual_information(&batch).unwrap();
            assert!(mi >= -1e-12, "mi = {mi}");
        }
    }

    #[test]
    fn coverage_counts_groups_with_mass() {
        let partition = GroupPartition::contiguous(4, 2).unwrap();
        let cfg = RouterConfig::grouped_uniform(4, 2, 1).unwrap();
        let grouped = grouped_topk(&[0.4, 0.3, 0.2, 0.1], &cfg).unwrap();
        assert_eq!(group_coverage(&[grouped], 2).unwrap(), 2.0);

        // A flat Top-2 pick can land both slots in one group.
        let flat = flat_topk(&[0.5, 0.3, 0.1, 0.1], 2).unwrap();
        let mass = crate::router::group_mass(&flat, &partition).unwrap();
        let one_sided = RoutingOutput {
            group_mass: mass,
            ..flat
        };
        assert_eq!(group_coverage(&[one_sided], 2).unwrap(), 1.0);
    }

    #[test]
    fn coverage_validates_shape() {
        let cfg = RouterConfig::grouped_uniform(4, 2, 1).unwrap();
        let out = grouped_topk(&[0.4, 0.3, 0.2, 0.1], &cfg).unwrap();
        assert!(group_coverage(&[out], 3).is_err());
        assert!(group_coverage(&[], 2).is_err());
    }

    #[test]
    fn parameter_cosine_handles_aligned_and_opposed_experts() {
        let mut rng = crate::numerics::Rng::new(7);
        let a = ExpertParams::init(3, 4, &mut rng);
        let mut b = a.clone();
        for v in b.w1.data_mut() {
            *v = -*v;
        }
        for v in b.b1.iter_mut() {
            *v = -*v;
        }
        for v in b.w2.data_mut() {
            *v = -*v;
        }
        for v in b.b2.iter_mut() {
            *v = -*v;
        }
        let (mean, std) = parameter_cosine(&[a.clone(), a.clone()]).unwrap();
        assert!((mean - 1.0).abs() <= 1e-12 && std <= 1e-12);
        let (mean, _) = parameter_cosine(&[a.clone(), b]).unwrap();
        assert!((mean + 1.0).abs() <= 1e-12);
        assert!(parameter_cosine(&[a]).is_err());
    }

    #[test]
    fn expert_similarity_detects_identical_experts() {
        let mut rng = crate::numerics::Rng::new(15);
        let a = ExpertParams::init(3, 4, &mut rng);
        let probes = vec![vec![0.3, -0.2, 0.9], vec![-0.5, 0.4, 0.1]];
        let (mean, std) = expert_similarity(&[a.clone(), a.clone()], &probes).unwrap();
        assert!((mean - 1.0).abs() <= 1e-12);
        assert!(std <= 1e-12);
        let b = ExpertParams::init(3, 4, &mut rng);
        let (mixed, _) = expert_similarity(&[a, b], &probes).unwrap();
        assert!(mixed.abs() < 1.0);
    }

    #[test]
    fn snapshot_csv_row_matches_header_arity() {
        let snap = MetricsSnapshot {
            step: 3,
            expert_cv: 0.5,
            group_cv: 0.25,
            coverage_mean: 2.0,
            collision_h2: 1.1,
            collision_mi: 0.2,
            mean_overlap: 0.6,
            task_loss: 1.9,
            total_loss: 2.0,
        };
        let row = snap.to_csv_row();
        assert_eq!(
            row.split(',').count(),
            MetricsSnapshot::CSV_HEADER.split(',').count()
        );
        assert!(row.starts_with("3,0.5,0.25,2,"));
    }

    proptest! {
        #[test]
        fn cv_is_scale_invariant(seed in 0u64..1000, scale_pow in -3i32..4) {
            let mut rng = crate::numerics::Rng::new(seed);
            let loads: Vec<f64> = (0..6).map(|_| rng.uniform() + 0.01).collect();
            // Power-of-two scaling is exact in binary floating point.
            let scale = (2.0f64).powi(scale_pow);
            let scaled: Vec<f64> = loads.iter().map(|&v| v * scale).collect();
            let a = coefficient_of_variation(&loads).unwrap();
            let b = coefficient_of_variation(&scaled).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn cv_identity_holds_on_random_loads(seed in 0u64..1000) {
            let mut rng = crate::numerics::Rng::new(seed);
            let loads: Vec<f64> = (0..8).map(|_| rng.uniform() * 3.0).collect();
            if loads.iter().sum::<f64>() > 0.0 {
                prop_assert!(cv_l2_identity_gap(&loads).unwrap().abs() <= 1e-12);
            }
        }

        #[test]
        fn overlap_stays_in_unit_interval(seed in 0u64..1000, n in 2usize..10) {
            let mut rng = crate::numerics::Rng::new(seed);
            let pi = rng.simplex(n);
            let v = overlap(&pi).unwrap();
            prop_assert!(v >= -1e-12 && v <= 1.0 - 1.0 / n as f64 + 1e-12);
        }
    }
}
