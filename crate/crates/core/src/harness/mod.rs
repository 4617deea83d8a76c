//! Training harness: synthetic runs, baseline comparisons, and the
//! balance-versus-specialization sweep.
//!
//! Every run is a pure function of its configuration. The random stream is
//! consumed in a fixed order (parameter init, then batch indices) that does
//! not depend on the routing variant, so two variants with the same seed
//! see identical data and identical initial parameters.

pub mod data;
pub mod model;
pub mod optim;
pub mod record;

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{
    coefficient_of_variation, collision_entropy_conditional, collision_mutual_information,
    group_coverage, overlap, MetricsSnapshot,
};
use crate::numerics::Rng;
use crate::router::{
    lossfree_bias_update, EmaState, RoutingVariant, LOSSFREE_BIAS_STEP,
};

use data::generate_synthetic;
use model::{batch_accuracy, batch_eval, batch_gradients, BatchEval, ModelDims, ModelParams, TermWeights};
use optim::Adam;
use record::{RunRecord, RunSummary};

/// Runs one full training job described by `cfg`.
///
/// Divergence (a non-finite objective or gradient) is reported as
/// [`Error::Diverged`] with the step that produced it.
pub fn train(cfg: &ExperimentConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let rcfg = cfg.router_config()?;
    let dataset = generate_synthetic(&cfg.dataset_spec())?;
    if dataset.num_classes > cfg.num_classes {
        return Err(Error::InvalidConfig {
            reason: format!(
                "dataset has {} classes but the head only has {}",
                dataset.num_classes, cfg.num_classes
            ),
        });
    }
    let dims = ModelDims {
        dim: cfg.dim,
        d_ff: cfg.d_ff,
        num_experts: cfg.num_experts,
        num_classes: cfg.num_classes,
    };

    let mut rng = Rng::new(cfg.seed);
    let mut params = ModelParams::init(dims, &mut rng);
    let mut flat = params.to_flat();
    let mut adam = Adam::new(flat.len(), cfg.learning_rate, cfg.beta1, cfg.beta2)?;
    let mut ema = EmaState::new(cfg.num_experts);

    let as_diverged = |step: usize| {
        move |e: Error| match e {
            Error::NonFinite { .. } => Error::Diverged { step },
            other => other,
        }
    };

    let mut snapshots = Vec::with_capacity(cfg.steps);
    let mut activation_counts = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let indices: Vec<usize> =
            (0..cfg.batch_size).map(|_| rng.index(dataset.len())).collect();
        let batch: Vec<(&[f64], usize)> = indices
            .iter()
            .map(|&i| (dataset.points[i].as_slice(), dataset.labels[i]))
            .collect();

        let (eval, grads) = batch_gradients(&params, &rcfg, &ema, &batch, TermWeights::ONES)
            .map_err(as_diverged(step))?;

        snapshots.push(snapshot_from_eval(step, &eval, cfg.num_groups)?);
        activation_counts.push(count_activations(&eval, cfg.num_experts));

        adam.step(&mut flat, &grads.to_flat()).map_err(as_diverged(step))?;
        params = ModelParams::from_flat(dims, &flat)?;

        // The running logit mean always tracks the batch, whichever variant
        // is routing; only the corrected variant reads it back.
        ema.update(&eval.mean_logits, cfg.ema_decay)?;
        if cfg.variant == RoutingVariant::FlatLossfreeBias {
            lossfree_bias_update(&mut ema, &eval.stats.h, cfg.flat_k, LOSSFREE_BIAS_STEP);
        }
    }

    // Final measurement over the whole dataset with frozen state.
    let full: Vec<(&[f64], usize)> = dataset
        .points
        .iter()
        .zip(&dataset.labels)
        .map(|(p, &l)| (p.as_slice(), l))
        .collect();
    let eval = batch_eval(&params, &rcfg, &ema, &full, TermWeights::ONES)
        .map_err(as_diverged(cfg.steps))?;
    let final_snapshot = snapshot_from_eval(cfg.steps, &eval, cfg.num_groups)?;
    let accuracy = batch_accuracy(&params, &rcfg, &ema, &full)?;
    let summary = RunSummary {
        final_task_loss: final_snapshot.task_loss,
        final_total_loss: final_snapshot.total_loss,
        final_expert_cv: final_snapshot.expert_cv,
        final_group_cv: final_snapshot.group_cv,
        final_coverage: final_snapshot.coverage_mean,
        final_h2: final_snapshot.collision_h2,
        final_i2: final_snapshot.collision_mi,
        final_overlap: final_snapshot.mean_overlap,
        final_accuracy: accuracy,
        steps_completed: cfg.steps,
        batch_size: cfg.batch_size,
    };
    Ok(RunRecord {
        config: cfg.clone(),
        snapshots,
        activation_counts,
        summary,
        final_params: flat,
    })
}

fn snapshot_from_eval(step: usize, eval: &BatchEval, num_groups: usize) -> Result<MetricsSnapshot> {
    let batch = eval.outputs.len() as f64;
    let mut group_loads = vec![0.0; num_groups];
    let mut mean_overlap = 0.0;
    let mut pis = Vec::with_capacity(eval.outputs.len());
    for out in &eval.outputs {
        for (acc, &r) in group_loads.iter_mut().zip(&out.group_mass) {
            *acc += r / batch;
        }
        mean_overlap += overlap(&out.pi)? / batch;
        pis.push(out.pi.clone());
    }
    Ok(MetricsSnapshot {
        step,
        expert_cv: coefficient_of_variation(&eval.stats.h)?,
        group_cv: coefficient_of_variation(&group_loads)?,
        coverage_mean: group_coverage(&eval.outputs, num_groups)?,
        collision_h2: collision_entropy_conditional(&pis)?,
        collision_mi: collision_mutual_information(&pis)?,
        mean_overlap,
        task_loss: eval.task,
        total_loss: eval.total,
    })
}

fn count_activations(eval: &BatchEval, num_experts: usize) -> Vec<usize> {
    let mut counts = vec![0usize; num_experts];
    for out in &eval.outputs {
        for &e in &out.selected {
            counts[e] += 1;
        }
    }
    counts
}

/// One row of the four-way baseline comparison.
#[derive(Debug, Clone)]
pub struct ComparisonRow {
    pub variant: RoutingVariant,
    /// `ok` or `diverged@step`.
    pub status: String,
    pub summary: Option<RunSummary>,
}

#[derive(Debug, Clone)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub const CSV_HEADER: &'static str = "variant,status,final_task_loss,final_expert_cv,final_group_cv,final_coverage,final_i2,final_accuracy";

    pub fn to_csv(&self) -> String {
        let mut text = String::from(Self::CSV_HEADER);
        text.push('\n');
        for row in &self.rows {
            let _ = write!(text, "{},{}", row.variant, row.status);
            match &row.summary {
                Some(s) => {
                    let _ = writeln!(
                        text,
                        ",{},{},{},{},{},{}",
                        s.final_task_loss,
                        s.final_expert_cv,
                        s.final_group_cv,
                        s.final_coverage,
                        s.final_i2,
                        s.final_accuracy
                    );
                }
                None => {
                    let _ = writeln!(text, ",,,,,,");
                }
            }
        }
        text
    }
}

/// Applies each variant's canonical objective settings to a shared base
/// configuration: the plain routers keep the balance loss but drop the two
/// norm penalties and the logit correction, the biased flat router
/// additionally trains loss-free (no balance loss), and the corrected
/// grouped router keeps everything.
pub fn variant_config(base: &ExperimentConfig, variant: RoutingVariant) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.variant = variant;
    match variant {
        RoutingVariant::HiMoe => {}
        RoutingVariant::Flat | RoutingVariant::Grouped => {
            cfg.tau = 0.0;
            cfg.lambda_intra = 0.0;
            cfg.lambda_inter = 0.0;
        }
        RoutingVariant::FlatLossfreeBias => {
            cfg.tau = 0.0;
            cfg.lambda_intra = 0.0;
            cfg.lambda_inter = 0.0;
            cfg.alpha = 0.0;
        }
    }
    cfg
}

/// Trains all four variants from the same seed and data.
pub fn compare_baselines(base: &ExperimentConfig) -> Result<ComparisonTable> {
    let mut rows = Vec::with_capacity(RoutingVariant::ALL.len());
    for variant in RoutingVariant::ALL {
        let cfg = variant_config(base, variant);
        match train(&cfg) {
            Ok(record) => rows.push(ComparisonRow {
                variant,
                status: "ok".to_string(),
                summary: Some(record.summary),
            }),
            Err(Error::Diverged { step }) => rows.push(ComparisonRow {
                variant,
                status: format!("diverged@{step}"),
                summary: None,
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(ComparisonTable { rows })
}

/// One cell of the penalty sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub lambda_intra: f64,
    pub lambda_inter: f64,
    pub summary: RunSummary,
}

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub const CSV_HEADER: &'static str =
        "lambda_intra,lambda_inter,final_task_loss,final_expert_cv,final_i2,final_overlap";

    pub fn to_csv(&self) -> String {
        let mut text = String::from(Self::CSV_HEADER);
        text.push('\n');
        for row in &self.rows {
            let _ = writeln!(
                text,
                "{},{},{},{},{},{}",
                row.lambda_intra,
                row.lambda_inter,
                row.summary.final_task_loss,
                row.summary.final_expert_cv,
                row.summary.final_i2,
                row.summary.final_overlap
            );
        }
        text
    }
}

/// Trains the base configuration across the full `lambda_intra` x
/// `lambda_inter` grid, at most `threads` runs in parallel. Rows come back
/// in grid order (outer loop over `lambda_intra`) regardless of thread
/// scheduling; the first failure in grid order is reported.
pub fn pareto_sweep(
    base: &ExperimentConfig,
    lambda_intra: &[f64],
    lambda_inter: &[f64],
    threads: usize,
) -> Result<SweepTable> {
    if lambda_intra.is_empty() || lambda_inter.is_empty() {
        return Err(Error::EmptyInput { what: "sweep grid" });
    }
    let mut grid = Vec::new();
    for &li in lambda_intra {
        for &le in lambda_inter {
            let mut cfg = base.clone();
            cfg.lambda_intra = li;
            cfg.lambda_inter = le;
            cfg.validate()?;
            grid.push(cfg);
        }
    }

    let threads = threads.max(1).min(grid.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunSummary>>>> = Mutex::new(vec![None; grid.len()]);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= grid.len() {
                    break;
                }
                let outcome = train(&grid[i]).map(|r| r.summary);
                results.lock().expect("sweep worker poisoned the results lock")[i] = Some(outcome);
            });
        }
    });

    let results = results.into_inner().expect("sweep workers finished");
    let mut rows = Vec::with_capacity(grid.len());
    for (cfg, outcome) in grid.iter().zip(results) {
        let summary = outcome.expect("every grid cell was claimed by a worker")?;
        rows.push(SweepRow {
            lambda_intra: cfg.lambda_intra,
            lambda_inter: cfg.lambda_inter,
            summary,
        });
    }
    Ok(SweepTable { rows })
}
