//! The desk-scale model: one residual MoE layer feeding a linear
//! classifier, with a single flat parameter vector view for the optimizer
//! and for finite-difference certification.

use crate::error::{Error, Result};
use crate::moe::{accumulate_backward, LayerGradients, MoEParams};
use crate::numerics::{softmax, Matrix, Rng};
use crate::objectives::{cross_entropy, load_balance_loss, BatchStats};
use crate::router::{route_frozen, EmaState, RouterConfig, RoutingOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub dim: usize,
    pub d_ff: usize,
    pub num_experts: usize,
    pub num_classes: usize,
}

impl ModelDims {
    pub fn param_count(&self) -> usize {
        MoEParams::param_count(self.dim, self.d_ff, self.num_experts)
            + self.dim * self.num_classes
            + self.num_classes
    }
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub moe: MoEParams,
    /// `dim x num_classes`.
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
}

impl ModelParams {
    /// Draw order: router, experts in index order, classifier head.
    pub fn init(dims: ModelDims, rng: &mut Rng) -> ModelParams {
        let moe = MoEParams::init(dims.dim, dims.d_ff, dims.num_experts, rng);
        let head_w = crate::moe::init_matrix(dims.dim, dims.num_classes, rng);
        ModelParams {
            moe,
            head_w,
            head_b: vec![0.0; dims.num_classes],
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            dim: self.moe.dim(),
            d_ff: self.moe.d_ff(),
            num_experts: self.moe.num_experts(),
            num_classes: self.head_b.len(),
        }
    }

    /// Flat layout: router, per-expert (w1, b1, w2, b2), head weights,
    /// head bias. `from_flat` inverts it.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.dims().param_count());
        self.moe.flatten_into(&mut flat);
        flat.extend_from_slice(self.head_w.data());
        flat.extend_from_slice(&self.head_b);
        flat
    }

    pub fn from_flat(dims: ModelDims, flat: &[f64]) -> Result<ModelParams> {
        if flat.len() != dims.param_count() {
            return Err(Error::DimMismatch {
                what: "flattened model parameters",
                expected: dims.param_count(),
                got: flat.len(),
            });
        }
        let moe_len = MoEParams::param_count(dims.dim, dims.d_ff, dims.num_experts);
        let moe = MoEParams::from_flat(dims.dim, dims.d_ff, dims.num_experts, &flat[..moe_len])?;
        let head_len = dims.dim * dims.num_classes;
        let head_w = Matrix::new(
            dims.dim,
            dims.num_classes,
            flat[moe_len..moe_len + head_len].to_vec(),
        )?;
        let head_b = flat[moe_len + head_len..].to_vec();
        Ok(ModelParams { moe, head_w, head_b })
    }
}

/// Gradients in the same layout as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub moe: LayerGradients,
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
}

impl ModelGradients {
    pub fn zeros(dims: ModelDims) -> ModelGradients {
        ModelGradients {
            moe: LayerGradients::zeros(dims.dim, dims.d_ff, dims.num_experts),
            head_w: Matrix::zeros(dims.dim, dims.num_classes),
            head_b: vec![0.0; dims.num_classes],
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        self.moe.flatten_into(&mut flat);
        flat.extend_from_slice(self.head_w.data());
        flat.extend_from_slice(&self.head_b);
        flat
    }
}

/// Multipliers on the four loss terms. The training loop uses all ones;
/// gradient certification isolates one term at a time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermWeights {
    pub task: f64,
    pub load: f64,
    pub intra: f64,
    pub inter: f64,
}

impl TermWeights {
    pub const ONES: TermWeights = TermWeights {
        task: 1.0,
        load: 1.0,
        intra: 1.0,
        inter: 1.0,
    };

    pub fn only_task() -> TermWeights {
        TermWeights { task: 1.0, load: 0.0, intra: 0.0, inter: 0.0 }
    }

    pub fn only_load() -> TermWeights {
        TermWeights { task: 0.0, load: 1.0, intra: 0.0, inter: 0.0 }
    }

    pub fn only_intra() -> TermWeights {
        TermWeights { task: 0.0, load: 0.0, intra: 1.0, inter: 0.0 }
    }

    pub fn only_inter() -> TermWeights {
        TermWeights { task: 0.0, load: 0.0, intra: 0.0, inter: 1.0 }
    }
}

/// Everything measured on one batch with the routing state frozen.
#[derive(Debug, Clone)]
pub struct BatchEval {
    pub outputs: Vec<RoutingOutput>,
    /// Mean cross entropy.
    pub task: f64,
    /// Balance penalty on mean hard and soft usage.
    pub load: f64,
    /// Mean per-token sharpening term (enters with its negative sign).
    pub intra: f64,
    /// Mean per-token kept-mass penalty.
    pub inter: f64,
    /// Weighted sum of the four terms.
    pub total: f64,
    pub stats: BatchStats,
    /// Batch mean of the raw router logits, for the running-mean update.
    pub mean_logits: Vec<f64>,
}

fn eval_internal(
    params: &ModelParams,
    rcfg: &RouterConfig,
    ema: &EmaState,
    batch: &[(&[f64], usize)],
    weights: TermWeights,
) -> Result<(BatchEval, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput { what: "training batch" });
    }
    let n = params.moe.num_experts();
    let b = batch.len() as f64;

    let mut outputs = Vec::with_capacity(batch.len());
    let mut ys = Vec::with_capacity(batch.len());
    let mut mean_logits = vec![0.0; n];
    let mut task = 0.0;
    let mut intra = 0.0;
    let mut inter = 0.0;
    for &(x, label) in batch {
        if label >= params.head_b.len() {
            return Err(Error::InvalidConfig {
                reason: format!(
                    "label {label} out of range for {} classes",
                    params.head_b.len()
                ),
            });
        }
        let logits = params.moe.router.vecmat(x);
        for (acc, &g) in mean_logits.iter_mut().zip(&logits) {
            *acc += g / b;
        }
        let routing = route_frozen(&logits, ema, rcfg)?;
        let mut y = x.to_vec();
        for &e in &routing.selected {
            let f = crate::moe::expert_forward(x, &params.moe.experts[e])?;
            let w = routing.pi_tilde[e];
            for (yi, fi) in y.iter_mut().zip(&f) {
                *yi += w * fi;
            }
        }
        let mut class_logits = params.head_w.vecmat(&y);
        for (z, &bb) in class_logits.iter_mut().zip(&params.head_b) {
            *z += bb;
        }
        task += cross_entropy(&class_logits, label)? / b;
        intra += -rcfg.lambda_intra * crate::numerics::l2_norm_squared(&routing.pi)? / b;
        inter += rcfg.lambda_inter * crate::numerics::l2_norm_squared(&routing.pi_tilde)? / b;
        outputs.push(routing);
        ys.push(y);
    }
    let stats = BatchStats::from_outputs(&outputs, n)?;
    let load = load_balance_loss(&stats, rcfg.load_coeff, n)?;
    let total =
        weights.task * task + weights.load * load + weights.intra * intra + weights.inter * inter;
    if !total.is_finite() {
        return Err(Error::NonFinite { what: "batch objective" });
    }
    Ok((
        BatchEval {
            outputs,
            task,
            load,
            intra,
            inter,
            total,
            stats,
            mean_logits,
        },
        ys,
    ))
}

/// Forward pass over a batch with frozen routing state.
pub fn batch_eval(
    params: &ModelParams,
    rcfg: &RouterConfig,
    ema: &EmaState,
    batch: &[(&[f64], usize)],
    weights: TermWeights,
) -> Result<BatchEval> {
    Ok(eval_internal(params, rcfg, ema, batch, weights)?.0)
}

/// Forward and backward over a batch. The gradient covers every term in
/// `weights`: cross entropy through the head and the layer, and the
/// balance and norm penalties through their direct gate paths. Hard
/// selections and the frozen logit mean are treated as constants.
pub fn batch_gradients(
    params: &ModelParams,
    rcfg: &RouterConfig,
    ema: &EmaState,
    batch: &[(&[f64], usize)],
    weights: TermWeights,
) -> Result<(BatchEval, ModelGradients)> {
    let (eval, ys) = eval_internal(params, rcfg, ema, batch, weights)?;
    let dims = params.dims();
    let mut grads = ModelGradients::zeros(dims);
    let n = dims.num_experts;
    let b = batch.len() as f64;

    for (i, &(x, label)) in batch.iter().enumerate() {
        let y = &ys[i];
        let routing = &eval.outputs[i];

        let mut class_logits = params.head_w.vecmat(y);
        for (z, &bb) in class_logits.iter_mut().zip(&params.head_b) {
            *z += bb;
        }
        let probs = softmax(&class_logits, 1.0)?;
        let mut dz = probs;
        dz[label] -= 1.0;
        for v in dz.iter_mut() {
            *v *= weights.task / b;
        }
        grads.head_w.add_outer(y, &dz, 1.0);
        for (g, &d) in grads.head_b.iter_mut().zip(&dz) {
            *g += d;
        }
        let dy = params.head_w.matvec(&dz);

        let mut d_pi_extra = vec![0.0; n];
        for e in 0..n {
            d_pi_extra[e] = (weights.inter * rcfg.lambda_inter * 2.0 * routing.pi_tilde[e]
                - weights.intra * rcfg.lambda_intra * 2.0 * routing.pi[e]
                + weights.load * rcfg.load_coeff * n as f64 * eval.stats.h[e])
                / b;
        }
        accumulate_backward(x, &dy, &d_pi_extra, &params.moe, rcfg, routing, &mut grads.moe)?;
    }
    Ok((eval, grads))
}

/// Fraction of `batch` classified correctly by the full pipeline.
pub fn batch_accuracy(
    params: &ModelParams,
    rcfg: &RouterConfig,
    ema: &EmaState,
    batch: &[(&[f64], usize)],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput { what: "evaluation batch" });
    }
    let mut correct = 0usize;
    for &(x, label) in batch {
        let logits = params.moe.router.vecmat(x);
        let routing = route_frozen(&logits, ema, rcfg)?;
        let mut y = x.to_vec();
        for &e in &routing.selected {
            let f = crate::moe::expert_forward(x, &params.moe.experts[e])?;
            for (yi, fi) in y.iter_mut().zip(&f) {
                *yi += routing.pi_tilde[e] * fi;
            }
        }
        let mut class_logits = params.head_w.vecmat(&y);
        for (z, &bb) in class_logits.iter_mut().zip(&params.head_b) {
            *z += bb;
        }
        let best = class_logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(i, _)| i)
            .unwrap();
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_gradient;

    fn tiny() -> (ModelDims, ModelParams, RouterConfig, EmaState) {
        let dims = ModelDims {
            dim: 5,
            d_ff: 6,
            num_experts: 4,
            num_classes: 3,
        };
        let mut rng = Rng::new(11);
        let params = ModelParams::init(dims, &mut rng);
        let cfg = RouterConfig::grouped_uniform(4, 2, 1).unwrap();
        (dims, params, cfg, EmaState::new(4))
    }

    fn tiny_batch() -> Vec<(Vec<f64>, usize)> {
        let mut rng = Rng::new(99);
        (0..6)
            .map(|i| {
                let x: Vec<f64> = (0..5).map(|_| rng.normal() * 0.8).collect();
                (x, i % 3)
            })
            .collect()
    }

    fn as_refs(batch: &[(Vec<f64>, usize)]) -> Vec<(&[f64], usize)> {
        batch.iter().map(|(x, l)| (x.as_slice(), *l)).collect()
    }

    #[test]
    fn flat_round_trip_preserves_the_model() {
        let (dims, params, _, _) = tiny();
        let flat = params.to_flat();
        assert_eq!(flat.len(), dims.param_count());
        let back = ModelParams::from_flat(dims, &flat).unwrap();
        assert_eq!(back, params);
        assert!(ModelParams::from_flat(dims, &flat[..flat.len() - 1]).is_err());
    }

    #[test]
    fn gradient_layout_matches_parameter_layout() {
        let (dims, _, _, _) = tiny();
        let grads = ModelGradients::zeros(dims);
        assert_eq!(grads.to_flat().len(), dims.param_count());
    }

    #[test]
    fn eval_terms_have_expected_signs() {
        let (_, params, cfg, ema) = tiny();
        let mut cfg = cfg;
        cfg.lambda_intra = 0.1;
        cfg.lambda_inter = 0.05;
        cfg.load_coeff = 0.01;
        let batch = tiny_batch();
        let eval = batch_eval(&params, &cfg, &ema, &as_refs(&batch), TermWeights::ONES).unwrap();
        assert!(eval.task > 0.0);
        assert!(eval.load > 0.0);
        assert!(eval.intra < 0.0);
        assert!(eval.inter > 0.0);
        assert!(
            (eval.total - (eval.task + eval.load + eval.intra + eval.inter)).abs() <= 1e-15
        );
    }

    #[test]
    fn term_weights_isolate_terms() {
        let (_, params, mut cfg, ema) = tiny();
        cfg.lambda_intra = 0.1;
        cfg.lambda_inter = 0.05;
        cfg.load_coeff = 0.01;
        let batch = tiny_batch();
        let refs = as_refs(&batch);
        let full = batch_eval(&params, &cfg, &ema, &refs, TermWeights::ONES).unwrap();
        let only_task = batch_eval(&params, &cfg, &ema, &refs, TermWeights::only_task()).unwrap();
        assert_eq!(only_task.total, full.task);
        let only_load = batch_eval(&params, &cfg, &ema, &refs, TermWeights::only_load()).unwrap();
        assert_eq!(only_load.total, full.load);
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        let (dims, params, mut cfg, ema) = tiny();
        cfg.lambda_intra = 0.1;
        cfg.lambda_inter = 0.05;
        cfg.load_coeff = 0.01;
        let batch = tiny_batch();
        let refs = as_refs(&batch);
        let (_, grads) = batch_gradients(&params, &cfg, &ema, &refs, TermWeights::ONES).unwrap();
        let analytic = grads.to_flat();

        let base = params.to_flat();
        let f = |flat: &[f64]| {
            let p = ModelParams::from_flat(dims, flat).unwrap();
            batch_eval(&p, &cfg, &ema, &refs, TermWeights::ONES)
                .unwrap()
                .total
        };
        let fd = finite_difference_gradient(f, &base, 1e-5).unwrap();
        let mut worst = 0.0f64;
        for (a, g) in analytic.iter().zip(&fd) {
            let scale = a.abs().max(g.abs()).max(1e-6);
            worst = worst.max((a - g).abs() / scale);
        }
        assert!(worst <= 1e-6, "worst relative gradient error {worst:e}");
    }

    #[test]
    fn labels_out_of_range_are_rejected() {
        let (_, params, cfg, ema) = tiny();
        let x = vec![0.1; 5];
        let batch = [(x.as_slice(), 7usize)];
        assert!(batch_eval(&params, &cfg, &ema, &batch, TermWeights::ONES).is_err());
        assert!(batch_eval(&params, &cfg, &ema, &[], TermWeights::ONES).is_err());
    }

    #[test]
    fn accuracy_is_a_fraction() {
        let (_, params, cfg, ema) = tiny();
        let batch = tiny_batch();
        let acc = batch_accuracy(&params, &cfg, &ema, &as_refs(&batch)).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn mean_logits_average_raw_router_outputs() {
        let (_, params, cfg, ema) = tiny();
        let batch = tiny_batch();
        let refs = as_refs(&batch);
        let eval = batch_eval(&params, &cfg, &ema, &refs, TermWeights::ONES).unwrap();
        let mut expect = vec![0.0; 4];
        for (x, _) in &refs {
            let logits = params.moe.router.vecmat(x);
            for (acc, &g) in expect.iter_mut().zip(&logits) {
                *acc += g / refs.len() as f64;
            }
        }
        for (a, b) in eval.mean_logits.iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-15);
        }
    }
}
