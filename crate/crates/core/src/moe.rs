//! Grouped mixture-of-experts residual layer.
//!
//! Each expert is a two-layer MLP with a smooth GELU nonlinearity; the layer
//! output is `y = x + sum_i pi_tilde_i f_i(x)` over the selected experts
//! only. The backward pass treats the Top-K mask as a constant: gradients
//! flow through the kept gate probabilities and the selected expert
//! parameters, and the blocks of unselected experts stay exactly zero.
//!
//! The activation is the tanh form of GELU,
//!
//! ```text
//! gelu(x) = 0.5 x (1 + tanh(c (x + a x^3)))    c = sqrt(2/pi), a = 0.044715
//! ```
//!
//! chosen smooth so central differences certify the analytic gradients
//! without kink artifacts.

use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{check_simplex, dot, ensure_finite, l2sq, softmax, Matrix, Rng};
use crate::router::{route_frozen, EmaState, RouterConfig, RoutingOutput};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// One expert: `f(x) = gelu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    /// `dim x d_ff`.
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// `d_ff x dim`.
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl ExpertParams {
    /// Weights uniform in `+-1/sqrt(fan_in)`, biases zero. Draw order is
    /// w1 row-major then w2 row-major.
    pub fn init(dim: usize, d_ff: usize, rng: &mut Rng) -> ExpertParams {
        ExpertParams {
            w1: init_matrix(dim, d_ff, rng),
            b1: vec![0.0; d_ff],
            w2: init_matrix(d_ff, dim, rng),
            b2: vec![0.0; dim],
        }
    }

    pub fn param_count(dim: usize, d_ff: usize) -> usize {
        dim * d_ff + d_ff + d_ff * dim + dim
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.w1.data());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.data());
        out.extend_from_slice(&self.b2);
    }
}

pub(crate) fn init_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let gain = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.range(-gain, gain)).collect();
    Matrix::new(rows, cols, data).expect("init dimensions are consistent")
}

/// Router weights plus the expert bank.
#[derive(Debug, Clone, PartialEq)]
pub struct MoEParams {
    /// `dim x num_experts`, logits are `x W`.
    pub router: Matrix,
    pub experts: Vec<ExpertParams>,
}

impl MoEParams {
    /// Draw order: router row-major, then experts in index order.
    pub fn init(dim: usize, d_ff: usize, num_experts: usize, rng: &mut Rng) -> MoEParams {
        MoEParams {
            router: init_matrix(dim, num_experts, rng),
            experts: (0..num_experts)
                .map(|_| ExpertParams::init(dim, d_ff, rng))
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.router.rows()
    }

    pub fn num_experts(&self) -> usize {
        self.router.cols()
    }

    pub fn d_ff(&self) -> usize {
        self.experts.first().map_or(0, |e| e.w1.cols())
    }

    pub fn param_count(dim: usize, d_ff: usize, num_experts: usize) -> usize {
        dim * num_experts + num_experts * ExpertParams::param_count(dim, d_ff)
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.router.data());
        for e in &self.experts {
            e.flatten_into(out);
        }
    }

    /// Inverse of `flatten_into` for the given shape.
    pub fn from_flat(dim: usize, d_ff: usize, num_experts: usize, flat: &[f64]) -> Result<MoEParams> {
        let expected = MoEParams::param_count(dim, d_ff, num_experts);
        if flat.len() != expected {
            return Err(Error::DimMismatch {
                what: "flattened moe parameters",
                expected,
                got: flat.len(),
            });
        }
        let mut at = 0usize;
        let mut take = |n: usize| {
            let s = flat[at..at + n].to_vec();
            at += n;
            s
        };
        let router = Matrix::new(dim, num_experts, take(dim * num_experts))?;
        let mut experts = Vec::with_capacity(num_experts);
        for _ in 0..num_experts {
            experts.push(ExpertParams {
                w1: Matrix::new(dim, d_ff, take(dim * d_ff))?,
                b1: take(d_ff),
                w2: Matrix::new(d_ff, dim, take(d_ff * dim))?,
                b2: take(dim),
            });
        }
        Ok(MoEParams { router, experts })
    }
}

/// Gradient accumulator matching one expert's shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertGradients {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl ExpertGradients {
    pub fn zeros(dim: usize, d_ff: usize) -> ExpertGradients {
        ExpertGradients {
            w1: Matrix::zeros(dim, d_ff),
            b1: vec![0.0; d_ff],
            w2: Matrix::zeros(d_ff, dim),
            b2: vec![0.0; dim],
        }
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.w1.data());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.data());
        out.extend_from_slice(&self.b2);
    }

    pub fn is_zero(&self) -> bool {
        self.w1.data().iter().all(|&v| v == 0.0)
            && self.b1.iter().all(|&v| v == 0.0)
            && self.w2.data().iter().all(|&v| v == 0.0)
            && self.b2.iter().all(|&v| v == 0.0)
    }
}

/// Gradients of a scalar loss with respect to every layer parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub d_router: Matrix,
    pub d_experts: Vec<ExpertGradients>,
}

impl LayerGradients {
    pub fn zeros(dim: usize, d_ff: usize, num_experts: usize) -> LayerGradients {
        LayerGradients {
            d_router: Matrix::zeros(dim, num_experts),
            d_experts: (0..num_experts)
                .map(|_| ExpertGradients::zeros(dim, d_ff))
                .collect(),
        }
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.d_router.data());
        for e in &self.d_experts {
            e.flatten_into(out);
        }
    }
}

/// Expert MLP forward pass.
pub fn expert_forward(x: &[f64], theta: &ExpertParams) -> Result<Vec<f64>> {
    ensure_finite("expert input", x)?;
    if x.len() != theta.w1.rows() {
        return Err(Error::DimMismatch {
            what: "expert input",
            expected: theta.w1.rows(),
            got: x.len(),
        });
    }
    let (out, _, _) = expert_forward_cached(x, theta);
    Ok(out)
}

/// Forward pass that keeps the pre-activation and hidden vectors for backward.
fn expert_forward_cached(x: &[f64], theta: &ExpertParams) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut pre = theta.w1.vecmat(x);
    for (p, &b) in pre.iter_mut().zip(&theta.b1) {
        *p += b;
    }
    let hidden: Vec<f64> = pre.iter().map(|&p| gelu(p)).collect();
    let mut out = theta.w2.vecmat(&hidden);
    for (o, &b) in out.iter_mut().zip(&theta.b2) {
        *o += b;
    }
    (out, hidden, pre)
}

/// Accumulate expert parameter gradients for upstream `d_out` at input `x`.
fn expert_backward_into(
    x: &[f64],
    pre: &[f64],
    hidden: &[f64],
    d_out: &[f64],
    theta: &ExpertParams,
    grads: &mut ExpertGradients,
) {
    grads.w2.add_outer(hidden, d_out, 1.0);
    for (g, &d) in grads.b2.iter_mut().zip(d_out) {
        *g += d;
    }
    let d_hidden = theta.w2.matvec(d_out);
    let d_pre: Vec<f64> = d_hidden
        .iter()
        .zip(pre)
        .map(|(&dh, &p)| dh * gelu_prime(p))
        .collect();
    grads.w1.add_outer(x, &d_pre, 1.0);
    for (g, &d) in grads.b1.iter_mut().zip(&d_pre) {
        *g += d;
    }
}

/// Residual MoE layer forward: routes `x`, evaluates only the selected
/// experts, and returns `x + sum pi_tilde_i f_i(x)` with the dispatch.
pub fn moe_forward(
    x: &[f64],
    params: &MoEParams,
    cfg: &RouterConfig,
    state: &EmaState,
) -> Result<(Vec<f64>, RoutingOutput)> {
    ensure_finite("moe input", x)?;
    if x.len() != params.dim() {
        return Err(Error::DimMismatch {
            what: "moe input",
            expected: params.dim(),
            got: x.len(),
        });
    }
    let logits = params.router.vecmat(x);
    let routing = route_frozen(&logits, state, cfg)?;
    let mut y = x.to_vec();
    for &e in &routing.selected {
        let (f, _, _) = expert_forward_cached(x, &params.experts[e]);
        let w = routing.pi_tilde[e];
        for (yi, fi) in y.iter_mut().zip(&f) {
            *yi += w * fi;
        }
    }
    Ok((y, routing))
}

fn check_routing_pair(params: &MoEParams, cfg: &RouterConfig, routing: &RoutingOutput) {
    debug_assert_eq!(routing.pi.len(), params.num_experts());
    debug_assert_eq!(params.num_experts(), cfg.num_experts);
    debug_assert!(routing.selected.iter().all(|&e| e < routing.pi.len()));
    for (e, &pt) in routing.pi_tilde.iter().enumerate() {
        if routing.selected.contains(&e) {
            debug_assert_eq!(pt, routing.pi[e], "pi_tilde must equal pi on the selection");
        } else {
            debug_assert_eq!(pt, 0.0, "pi_tilde must vanish off the selection");
        }
    }
}

/// Backward pass for a scalar loss received through the layer output.
///
/// `upstream` is `dL/dy`. Additional direct gradients with respect to the
/// gate probabilities (regularizers, load loss) enter through
/// [`moe_backward_with`]. The Top-K mask is constant: unselected experts
/// receive exactly zero gradient and the gate path flows through the kept
/// probabilities only.
pub fn moe_backward(
    x: &[f64],
    upstream: &[f64],
    params: &MoEParams,
    cfg: &RouterConfig,
    routing: &RoutingOutput,
) -> Result<LayerGradients> {
    let zeros = vec![0.0; params.num_experts()];
    moe_backward_with(x, upstream, &zeros, params, cfg, routing)
}

/// Backward pass with an extra direct gradient `d_pi_extra = dL/dpi`.
pub fn moe_backward_with(
    x: &[f64],
    upstream: &[f64],
    d_pi_extra: &[f64],
    params: &MoEParams,
    cfg: &RouterConfig,
    routing: &RoutingOutput,
) -> Result<LayerGradients> {
    let mut grads = LayerGradients::zeros(params.dim(), params.d_ff(), params.num_experts());
    accumulate_backward(x, upstream, d_pi_extra, params, cfg, routing, &mut grads)?;
    Ok(grads)
}

/// Shared accumulation core so batch loops avoid per-token allocations.
pub(crate) fn accumulate_backward(
    x: &[f64],
    upstream: &[f64],
    d_pi_extra: &[f64],
    params: &MoEParams,
    cfg: &RouterConfig,
    routing: &RoutingOutput,
    grads: &mut LayerGradients,
) -> Result<()> {
    ensure_finite("moe backward input", x)?;
    ensure_finite("moe backward upstream", upstream)?;
    ensure_finite("moe backward gate gradient", d_pi_extra)?;
    if x.len() != params.dim() {
        return Err(Error::DimMismatch {
            what: "moe backward input",
            expected: params.dim(),
            got: x.len(),
        });
    }
    if upstream.len() != params.dim() {
        return Err(Error::DimMismatch {
            what: "moe backward upstream",
            expected: params.dim(),
            got: upstream.len(),
        });
    }
    if d_pi_extra.len() != params.num_experts() {
        return Err(Error::DimMismatch {
            what: "moe backward gate gradient",
            expected: params.num_experts(),
            got: d_pi_extra.len(),
        });
    }
    check_routing_pair(params, cfg, routing);

    let mut d_pi = d_pi_extra.to_vec();
    for &e in &routing.selected {
        let theta = &params.experts[e];
        let (f, hidden, pre) = expert_forward_cached(x, theta);
        d_pi[e] += dot(upstream, &f);
        let w = routing.pi_tilde[e];
        let d_out: Vec<f64> = upstream.iter().map(|&u| w * u).collect();
        expert_backward_into(x, &pre, &hidden, &d_out, theta, &mut grads.d_experts[e]);
    }

    // Softmax backward through the tempered, bias-corrected logits. The EMA
    // mean is frozen state, so dg = dz / T.
    let s: f64 = routing.pi.iter().zip(&d_pi).map(|(&p, &d)| p * d).sum();
    let dg: Vec<f64> = routing
        .pi
        .iter()
        .zip(&d_pi)
        .map(|(&p, &d)| p * (d - s) / cfg.temperature)
        .collect();
    grads.d_router.add_outer(x, &dg, 1.0);
    Ok(())
}

/// Interference between expert updates for one token.
///
/// The shared scalar loss is the quadratic layer objective `0.5 ||y||^2` on
/// the dense soft mixture `y = x + sum_i pi_i f_i(x)`. Every expert's
/// gradient `g_i` is taken with its routing weight factored out (the update
/// an expert would receive per unit of gate mass), then clipped to norm at
/// most `clip`. Returns
///
/// ```text
/// C = sum_{i != j} |<pi_i g_i, pi_j g_j>|      and its bound
/// B = clip^2 (1 - ||pi||^2)
/// ```
pub fn expert_gradient_coupling(
    x: &[f64],
    params: &MoEParams,
    cfg: &RouterConfig,
    clip: f64,
) -> Result<(f64, f64)> {
    ensure_finite("coupling input", x)?;
    if x.len() != params.dim() {
        return Err(Error::DimMismatch {
            what: "coupling input",
            expected: params.dim(),
            got: x.len(),
        });
    }
    let logits = params.router.vecmat(x);
    let pi = softmax(&logits, cfg.temperature)?;

    let mut caches = Vec::with_capacity(params.experts.len());
    let mut y = x.to_vec();
    for (e, theta) in params.experts.iter().enumerate() {
        let (f, hidden, pre) = expert_forward_cached(x, theta);
        for (yi, fi) in y.iter_mut().zip(&f) {
            *yi += pi[e] * fi;
        }
        caches.push((f, hidden, pre));
    }

    let mut grads = Vec::with_capacity(params.experts.len());
    for (theta, (_, hidden, pre)) in params.experts.iter().zip(&caches) {
        let mut g = ExpertGradients::zeros(params.dim(), params.d_ff());
        expert_backward_into(x, pre, hidden, &y, theta, &mut g);
        let mut flat = Vec::with_capacity(ExpertParams::param_count(params.dim(), params.d_ff()));
        g.flatten_into(&mut flat);
        grads.push(flat);
    }
    coupling_from_gradients(&pi, &grads, clip)
}

/// Coupling sum and bound from explicit per-expert gradient vectors.
pub fn coupling_from_gradients(
    pi: &[f64],
    grads: &[Vec<f64>],
    clip: f64,
) -> Result<(f64, f64)> {
    check_simplex("coupling probabilities", pi)?;
    if grads.len() != pi.len() {
        return Err(Error::DimMismatch {
            what: "coupling gradients",
            expected: pi.len(),
            got: grads.len(),
        });
    }
    if !clip.is_finite() || clip <= 0.0 {
        return Err(Error::NonPositive {
            what: "coupling clip norm",
            value: clip,
        });
    }
    let mut clipped: Vec<Vec<f64>> = Vec::with_capacity(grads.len());
    for g in grads {
        ensure_finite("coupling gradient", g)?;
        let norm = l2sq(g).sqrt();
        if norm > clip {
            clipped.push(g.iter().map(|&v| v * clip / norm).collect());
        } else {
            clipped.push(g.clone());
        }
    }
    let mut coupling = 0.0;
    for i in 0..clipped.len() {
        for j in (i + 1)..clipped.len() {
            coupling += 2.0 * pi[i] * pi[j] * dot(&clipped[i], &clipped[j]).abs();
        }
    }
    let bound = clip * clip * (1.0 - l2sq(pi));
    Ok((coupling, bound))
}

/// Header metadata stored alongside the parameter blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub num_groups: u64,
    pub seed: u64,
}

const CHECKPOINT_MAGIC: &[u8; 12] = b"HIMOE-CKPT-1";

/// Writes `params` to a flat binary container: magic, then little-endian
/// u64 header fields (dim, d_ff, num_experts, num_groups, seed), then every
/// parameter block row-major in declared order as little-endian f64. The
/// encoding round-trips bit for bit.
pub fn write_checkpoint(path: &Path, params: &MoEParams, meta: CheckpointMeta) -> Result<()> {
    let mut flat = Vec::new();
    params.flatten_into(&mut flat);
    let mut bytes = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 40 + flat.len() * 8);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [
        params.dim() as u64,
        params.d_ff() as u64,
        params.num_experts() as u64,
        meta.num_groups,
        meta.seed,
    ] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for v in &flat {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint(path: &Path) -> Result<(MoEParams, CheckpointMeta)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Io {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < CHECKPOINT_MAGIC.len() + 40 {
        return Err(bad("truncated checkpoint header"));
    }
    if &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(bad("not a parameter checkpoint (bad magic)"));
    }
    let mut at = CHECKPOINT_MAGIC.len();
    let mut read_u64 = || {
        let v = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        at += 8;
        v
    };
    let dim = read_u64() as usize;
    let d_ff = read_u64() as usize;
    let num_experts = read_u64() as usize;
    let num_groups = read_u64();
    let seed = read_u64();
    let expected = MoEParams::param_count(dim, d_ff, num_experts);
    let body = &bytes[CHECKPOINT_MAGIC.len() + 40..];
    if body.len() != expected * 8 {
        return Err(bad("checkpoint body length does not match header shape"));
    }
    let flat: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = MoEParams::from_flat(dim, d_ff, num_experts, &flat)?;
    Ok((params, CheckpointMeta { num_groups, seed }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_gradient;
    use crate::router::RoutingVariant;

    fn desk_params(seed: u64) -> (MoEParams, RouterConfig, EmaState) {
        let cfg = RouterConfig::grouped_uniform(4, 2, 1).unwrap();
        let mut rng = Rng::new(seed);
        let params = MoEParams::init(6, 8, 4, &mut rng);
        let state = EmaState::new(4);
        (params, cfg, state)
    }

    #[test]
    fn gelu_prime_matches_finite_differences() {
        for x in [-3.0, -1.0, -0.1, 0.0, 0.4, 1.0, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((gelu_prime(x) - fd).abs() <= 1e-8, "x = {x}");
        }
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn expert_forward_shapes_and_determinism() {
        let mut rng = Rng::new(9);
        let theta = ExpertParams::init(3, 5, &mut rng);
        let x = [0.3, -0.7, 1.1];
        let a = expert_forward(&x, &theta).unwrap();
        let b = expert_forward(&x, &theta).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert!(expert_forward(&[1.0, 2.0], &theta).is_err());
        assert!(expert_forward(&[f64::NAN, 0.0, 0.0], &theta).is_err());
    }

    #[test]
    fn zero_weights_give_zero_expert_output() {
        let theta = ExpertParams {
            w1: Matrix::zeros(2, 3),
            b1: vec![0.0; 3],
            w2: Matrix::zeros(3, 2),
            b2: vec![0.0; 2],
        };
        assert_eq!(expert_forward(&[1.0, -2.0], &theta).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn moe_forward_mixes_only_selected_experts() {
        let (params, cfg, state) = desk_params(4);
        let x = [0.2, -0.4, 0.9, 0.0, 0.3, -0.8];
        let (y, routing) = moe_forward(&x, &params, &cfg, &state).unwrap();
        assert_eq!(routing.selected.len(), 2);
        let mut expect = x.to_vec();
        for &e in &routing.selected {
            let f = expert_forward(&x, &params.experts[e]).unwrap();
            for (acc, fi) in expect.iter_mut().zip(&f) {
                *acc += routing.pi_tilde[e] * fi;
            }
        }
        for (a, b) in y.iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn moe_backward_zero_upstream_gives_zero_gradients() {
        let (params, cfg, state) = desk_params(5);
        let x = [0.1, 0.5, -0.3, 0.8, -0.2, 0.0];
        let (_, routing) = moe_forward(&x, &params, &cfg, &state).unwrap();
        let grads = moe_backward(&x, &[0.0; 6], &params, &cfg, &routing).unwrap();
        assert!(grads.d_router.data().iter().all(|&v| v == 0.0));
        assert!(grads.d_experts.iter().all(ExpertGradients::is_zero));
    }

    #[test]
    fn moe_backward_leaves_unselected_experts_untouched() {
        let (params, cfg, state) = desk_params(6);
        let x = [0.4, -0.1, 0.2, 0.7, -0.5, 0.3];
        let (_, routing) = moe_forward(&x, &params, &cfg, &state).unwrap();
        let upstream = [0.3, -1.0, 0.2, 0.0, 0.5, 0.1];
        let grads = moe_backward(&x, &upstream, &params, &cfg, &routing).unwrap();
        for e in 0..4 {
            if routing.selected.contains(&e) {
                assert!(!grads.d_experts[e].is_zero(), "selected expert {e} must train");
            } else {
                assert!(grads.d_experts[e].is_zero(), "unselected expert {e} must not");
            }
        }
    }

    #[test]
    fn moe_backward_matches_finite_differences_on_router() {
        // Scalar probe loss <w, y(theta)>; perturb only router weights so the
        // selection margin keeps central differences on the smooth piece.
        let (params, cfg, state) = desk_params(12);
        let x = [0.25, -0.4, 0.55, 0.15, -0.3, 0.6];
        let w = [0.7, -0.2, 0.4, 0.1, -0.6, 0.3];
        let (_, routing) = moe_forward(&x, &params, &cfg, &state).unwrap();
        let grads = moe_backward(&x, &w, &params, &cfg, &routing).unwrap();

        let base = params.clone();
        let f = |rw: &[f64]| {
            let mut p = base.clone();
            p.router = Matrix::new(p.router.rows(), p.router.cols(), rw.to_vec()).unwrap();
            let (y, _) = moe_forward(&x, &p, &cfg, &state).unwrap();
            dot(&w, &y)
        };
        let fd = finite_difference_gradient(f, params.router.data(), 1e-5).unwrap();
        for (a, b) in grads.d_router.data().iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-7 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn coupling_aligned_gradients_meet_the_bound() {
        let g = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let (c, b) = coupling_from_gradients(&[0.5, 0.5], &g, 1.0).unwrap();
        assert!((c - 0.5).abs() <= 1e-15);
        assert!((b - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn coupling_orthogonal_gradients_vanish() {
        let g = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let (c, b) = coupling_from_gradients(&[0.5, 0.5], &g, 1.0).unwrap();
        assert_eq!(c, 0.0);
        assert!(b > 0.0);
    }

    #[test]
    fn coupling_one_hot_routing_vanishes_with_its_bound() {
        let g = vec![vec![2.0, 0.0], vec![2.0, 0.0]];
        let (c, b) = coupling_from_gradients(&[1.0, 0.0], &g, 1.0).unwrap();
        assert_eq!(c, 0.0);
        assert!(b.abs() <= 1e-12);
    }

    #[test]
    fn coupling_clips_oversized_gradients() {
        let g = vec![vec![10.0, 0.0], vec![10.0, 0.0]];
        let (c, _) = coupling_from_gradients(&[0.5, 0.5], &g, 1.0).unwrap();
        assert!((c - 0.5).abs() <= 1e-12);
        assert!(coupling_from_gradients(&[0.5, 0.5], &g, 0.0).is_err());
        assert!(coupling_from_gradients(&[0.6, 0.6], &g, 1.0).is_err());
    }

    #[test]
    fn coupling_respects_bound_on_real_layers() {
        for seed in 0..20 {
            let (params, cfg, _) = desk_params(seed);
            let mut rng = Rng::new(seed + 1000);
            let x: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let (c, b) = expert_gradient_coupling(&x, &params, &cfg, 1.0).unwrap();
            assert!(c <= b + 1e-10, "seed {seed}: coupling {c} exceeds bound {b}");
        }
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("layer.ckpt");
        let (params, _, _) = desk_params(77);
        let meta = CheckpointMeta {
            num_groups: 2,
            seed: 77,
        };
        write_checkpoint(&path, &params, meta).unwrap();
        let (loaded, loaded_meta) = read_checkpoint(&path).unwrap();
        assert_eq!(loaded_meta, meta);
        let (mut a, mut b) = (Vec::new(), Vec::new());
        params.flatten_into(&mut a);
        loaded.flatten_into(&mut b);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("layer.ckpt");
        let (params, _, _) = desk_params(3);
        write_checkpoint(&path, &params, CheckpointMeta { num_groups: 2, seed: 3 }).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_checkpoint(&path).is_err());
        std::fs::write(&path, b"HIMOE-CKPT-1").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }

    #[test]
    fn flatten_round_trip_preserves_parameters() {
        let (params, _, _) = desk_params(21);
        let mut flat = Vec::new();
        params.flatten_into(&mut flat);
        assert_eq!(flat.len(), MoEParams::param_count(6, 8, 4));
        let back = MoEParams::from_flat(6, 8, 4, &flat).unwrap();
        assert_eq!(back, params);
        assert!(MoEParams::from_flat(6, 8, 4, &flat[1..]).is_err());
    }

    #[test]
    fn hi_moe_routing_flows_through_backward() {
        // Nonzero EMA state shifts probabilities; the backward formula is
        // unchanged because the EMA is constant inside a batch.
        let (params, mut cfg, mut state) = desk_params(14);
        cfg.variant = RoutingVariant::HiMoe;
        cfg.bias_strength = 0.5;
        state.g_bar = vec![0.3, -0.2, 0.4, 0.1];
        let x = [0.2, 0.1, -0.6, 0.4, 0.5, -0.2];
        let (y, routing) = moe_forward(&x, &params, &cfg, &state).unwrap();
        assert_eq!(y.len(), 6);
        let grads =
            moe_backward(&x, &[0.1, 0.2, -0.3, 0.0, 0.4, -0.1], &params, &cfg, &routing).unwrap();
        assert!(grads.d_router.data().iter().any(|&v| v != 0.0));
    }
}
