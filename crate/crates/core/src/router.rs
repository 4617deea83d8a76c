//! Routing: bias-corrected gate probabilities, flat and group-local Top-K
//! selection, and the per-group mass vector induced by a selection.
//!
//! Selection happens after the softmax. The kept probabilities are not
//! renormalized: `pi_tilde` equals `pi` on selected experts and zero
//! elsewhere. Ties in a Top-K comparison resolve to the lowest expert index,
//! so routing is a pure function of its inputs.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{check_simplex, ensure_finite, softmax};

/// Step size for the selection-bias update of the loss-free variant.
pub const LOSSFREE_BIAS_STEP: f64 = 1e-3;

/// Disjoint, covering, non-empty expert groups.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPartition {
    groups: Vec<Vec<usize>>,
    member_group: Vec<usize>,
}

impl GroupPartition {
    pub fn new(groups: Vec<Vec<usize>>, num_experts: usize) -> Result<GroupPartition> {
        if groups.is_empty() {
            return Err(Error::InvalidPartition {
                reason: "no groups".into(),
            });
        }
        let mut member_group = vec![usize::MAX; num_experts];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::InvalidPartition {
                    reason: format!("group {g} is empty"),
                });
            }
            for &e in members {
                if e >= num_experts {
                    return Err(Error::InvalidPartition {
                        reason: format!("expert {e} out of range for {num_experts} experts"),
                    });
                }
                if member_group[e] != usize::MAX {
                    return Err(Error::InvalidPartition {
                        reason: format!("expert {e} appears in more than one group"),
                    });
                }
                member_group[e] = g;
            }
        }
        if let Some(e) = member_group.iter().position(|&g| g == usize::MAX) {
            return Err(Error::InvalidPartition {
                reason: format!("expert {e} belongs to no group"),
            });
        }
        Ok(GroupPartition {
            groups,
            member_group,
        })
    }

    /// Equal-size contiguous groups; `num_experts` must divide evenly.
    pub fn contiguous(num_experts: usize, num_groups: usize) -> Result<GroupPartition> {
        if num_groups == 0 || num_experts == 0 || num_experts % num_groups != 0 {
            return Err(Error::InvalidPartition {
                reason: format!(
                    "cannot split {num_experts} experts into {num_groups} equal groups"
                ),
            });
        }
        let size = num_experts / num_groups;
        let groups = (0..num_groups)
            .map(|g| (g * size..(g + 1) * size).collect())
            .collect();
        GroupPartition::new(groups, num_experts)
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn num_experts(&self) -> usize {
        self.member_group.len()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn group_of(&self, expert: usize) -> usize {
        self.member_group[expert]
    }

    /// Size of the largest group.
    pub fn s_max(&self) -> usize {
        self.groups.iter().map(Vec::len).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingVariant {
    /// Softmax then global Top-K.
    Flat,
    /// Softmax for probabilities; selection ranks logits plus a per-expert
    /// bias that is nudged against overloaded experts between batches.
    FlatLossfreeBias,
    /// Softmax then Top-K within each group.
    Grouped,
    /// Bias-corrected softmax (EMA-centered logits) then group-local Top-K;
    /// the corrected probabilities drive both gating and selection.
    HiMoe,
}

impl RoutingVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            RoutingVariant::Flat => "flat",
            RoutingVariant::FlatLossfreeBias => "flat_lossfree_bias",
            RoutingVariant::Grouped => "grouped",
            RoutingVariant::HiMoe => "hi_moe",
        }
    }

    pub fn parse(s: &str) -> Result<RoutingVariant> {
        match s {
            "flat" => Ok(RoutingVariant::Flat),
            "flat_lossfree_bias" => Ok(RoutingVariant::FlatLossfreeBias),
            "grouped" => Ok(RoutingVariant::Grouped),
            "hi_moe" => Ok(RoutingVariant::HiMoe),
            other => Err(Error::InvalidConfig {
                reason: format!(
                    "unknown variant `{other}` (expected flat, flat_lossfree_bias, grouped, hi_moe)"
                ),
            }),
        }
    }

    pub const ALL: [RoutingVariant; 4] = [
        RoutingVariant::Flat,
        RoutingVariant::FlatLossfreeBias,
        RoutingVariant::Grouped,
        RoutingVariant::HiMoe,
    ];
}

impl std::fmt::Display for RoutingVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Static routing configuration shared by dispatch, objectives, and training.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterConfig {
    pub num_experts: usize,
    pub partition: GroupPartition,
    /// Experts kept per group by the grouped variants.
    pub k_per_group: Vec<usize>,
    /// Experts kept in total by the flat variants.
    pub flat_k: usize,
    pub temperature: f64,
    /// EMA subtraction strength (tau). Zero recovers the plain softmax.
    pub bias_strength: f64,
    /// EMA decay (beta) for the running mean of the logits.
    pub ema_decay: f64,
    /// Load-balancing coefficient (alpha).
    pub load_coeff: f64,
    pub lambda_intra: f64,
    pub lambda_inter: f64,
    pub variant: RoutingVariant,
}

impl RouterConfig {
    /// Grouped config with uniform `k` per group and neutral scalar knobs.
    pub fn grouped_uniform(
        num_experts: usize,
        num_groups: usize,
        k: usize,
    ) -> Result<RouterConfig> {
        let partition = GroupPartition::contiguous(num_experts, num_groups)?;
        let cfg = RouterConfig {
            num_experts,
            k_per_group: vec![k; num_groups],
            flat_k: k * num_groups,
            partition,
            temperature: 1.0,
            bias_strength: 0.0,
            ema_decay: 0.9,
            load_coeff: 0.0,
            lambda_intra: 0.0,
            lambda_inter: 0.0,
            variant: RoutingVariant::Grouped,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(Error::InvalidConfig { reason });
        if self.num_experts == 0 {
            return fail("num_experts must be at least 1".into());
        }
        if self.partition.num_experts() != self.num_experts {
            return fail(format!(
                "partition covers {} experts, config has {}",
                self.partition.num_experts(),
                self.num_experts
            ));
        }
        if self.k_per_group.len() != self.partition.num_groups() {
            return fail(format!(
                "k_per_group has {} entries for {} groups",
                self.k_per_group.len(),
                self.partition.num_groups()
            ));
        }
        for (m, (&k, members)) in self
            .k_per_group
            .iter()
            .zip(self.partition.groups())
            .enumerate()
        {
            if k == 0 || k > members.len() {
                return fail(format!(
                    "group {m}: k={k} outside 1..={}",
                    members.len()
                ));
            }
        }
        if self.flat_k == 0 || self.flat_k > self.num_experts {
            return fail(format!(
                "flat_k={} outside 1..={}",
                self.flat_k, self.num_experts
            ));
        }
        let total: usize = self.k_per_group.iter().sum();
        if total != self.flat_k {
            return fail(format!(
                "sum of k_per_group ({total}) must equal flat_k ({})",
                self.flat_k
            ));
        }
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return fail(format!("temperature must be positive, got {}", self.temperature));
        }
        if !self.ema_decay.is_finite() || !(0.0..1.0).contains(&self.ema_decay) {
            return fail(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay));
        }
        for (name, v) in [
            ("bias_strength", self.bias_strength),
            ("load_coeff", self.load_coeff),
            ("lambda_intra", self.lambda_intra),
            ("lambda_inter", self.lambda_inter),
        ] {
            if !v.is_finite() || v < 0.0 {
                return fail(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        Ok(())
    }

    /// Experts every token dispatches to (equal for flat and grouped modes).
    pub fn selections_per_token(&self) -> usize {
        self.flat_k
    }
}

/// Mutable routing state carried across batches.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    /// Running mean of router logits (g-bar), initialized to zero.
    pub g_bar: Vec<f64>,
    /// Per-expert selection bias for the loss-free variant.
    pub bias: Vec<f64>,
}

impl EmaState {
    pub fn new(num_experts: usize) -> EmaState {
        EmaState {
            g_bar: vec![0.0; num_experts],
            bias: vec![0.0; num_experts],
        }
    }

    /// `g_bar <- beta * g_bar + (1 - beta) * logits`.
    pub fn update(&mut self, logits: &[f64], beta: f64) -> Result<()> {
        ensure_finite("ema update logits", logits)?;
        if !beta.is_finite() || !(0.0..1.0).contains(&beta) {
            return Err(Error::InvalidConfig {
                reason: format!("ema_decay must lie in [0, 1), got {beta}"),
            });
        }
        if logits.len() != self.g_bar.len() {
            return Err(Error::DimMismatch {
                what: "ema update logits",
                expected: self.g_bar.len(),
                got: logits.len(),
            });
        }
        for (g, &z) in self.g_bar.iter_mut().zip(logits) {
            *g = beta * *g + (1.0 - beta) * z;
        }
        Ok(())
    }
}

/// One token's dispatch decision.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingOutput {
    /// Gate probabilities before selection.
    pub pi: Vec<f64>,
    /// `pi` masked to the selected experts, not renormalized.
    pub pi_tilde: Vec<f64>,
    /// Selected expert indices, ascending.
    pub selected: Vec<usize>,
    /// Fraction of kept mass per group. `flat_topk` alone has no partition
    /// and reports the trivial single group; `route` fills in the configured
    /// partition.
    pub group_mass: Vec<f64>,
}

/// Indices of the `k` largest scores among `candidates`, ties to the lowest
/// index, returned ascending.
fn topk_by_score(scores: &[f64], candidates: &[usize], k: usize) -> Vec<usize> {
    debug_assert!(k <= candidates.len());
    let mut order: Vec<usize> = candidates.to_vec();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores must be finite")
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order.sort_unstable();
    order
}

fn masked_output(pi: &[f64], selected: Vec<usize>) -> RoutingOutput {
    let mut pi_tilde = vec![0.0; pi.len()];
    for &i in &selected {
        pi_tilde[i] = pi[i];
    }
    RoutingOutput {
        pi: pi.to_vec(),
        pi_tilde,
        selected,
        group_mass: vec![1.0],
    }
}

/// Global Top-K selection over `pi`.
pub fn flat_topk(pi: &[f64], k: usize) -> Result<RoutingOutput> {
    check_simplex("flat_topk probabilities", pi)?;
    if k == 0 || k > pi.len() {
        return Err(Error::InvalidConfig {
            reason: format!("flat_topk: k={k} outside 1..={}", pi.len()),
        });
    }
    let all: Vec<usize> = (0..pi.len()).collect();
    Ok(masked_output(pi, topk_by_score(pi, &all, k)))
}

/// Top-K(m) selection inside each group of `cfg.partition`.
pub fn grouped_topk(pi: &[f64], cfg: &RouterConfig) -> Result<RoutingOutput> {
    check_simplex("grouped_topk probabilities", pi)?;
    if pi.len() != cfg.num_experts {
        return Err(Error::DimMismatch {
            what: "grouped_topk probabilities",
            expected: cfg.num_experts,
            got: pi.len(),
        });
    }
    cfg.validate()?;
    let mut selected = Vec::with_capacity(cfg.flat_k);
    for (members, &k) in cfg.partition.groups().iter().zip(&cfg.k_per_group) {
        selected.extend(topk_by_score(pi, members, k));
    }
    selected.sort_unstable();
    let mut out = masked_output(pi, selected);
    out.group_mass = group_mass(&out, &cfg.partition)?;
    Ok(out)
}

/// Kept mass per group, normalized: `r_g = sum_{e in G_g} pi_tilde_e / sum pi_tilde`.
pub fn group_mass(output: &RoutingOutput, partition: &GroupPartition) -> Result<Vec<f64>> {
    if output.pi_tilde.len() != partition.num_experts() {
        return Err(Error::DimMismatch {
            what: "group_mass pi_tilde",
            expected: partition.num_experts(),
            got: output.pi_tilde.len(),
        });
    }
    ensure_finite("group_mass pi_tilde", &output.pi_tilde)?;
    let total: f64 = output.pi_tilde.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroMass {
            what: "group_mass pi_tilde",
        });
    }
    let mut r = vec![0.0; partition.num_groups()];
    for (e, &p) in output.pi_tilde.iter().enumerate() {
        r[partition.group_of(e)] += p;
    }
    for v in &mut r {
        *v /= total;
    }
    Ok(r)
}

/// Bias-corrected gate probabilities `softmax((g - tau * g_bar) / T)`.
///
/// With `tau = 0` the subtraction is exact and the result equals the plain
/// tempered softmax of `g` bit for bit.
fn corrected_probabilities(
    logits: &[f64],
    g_bar: &[f64],
    tau: f64,
    temperature: f64,
) -> Result<Vec<f64>> {
    ensure_finite("router logits", logits)?;
    ensure_finite("router ema", g_bar)?;
    if logits.len() != g_bar.len() {
        return Err(Error::DimMismatch {
            what: "router logits vs ema",
            expected: g_bar.len(),
            got: logits.len(),
        });
    }
    let centered: Vec<f64> = logits
        .iter()
        .zip(g_bar)
        .map(|(&g, &m)| g - tau * m)
        .collect();
    softmax(&centered, temperature)
}

/// Bias-corrected probabilities plus the EMA state advanced by these logits.
pub fn bias_corrected_probabilities(
    logits: &[f64],
    state: &EmaState,
    cfg: &RouterConfig,
) -> Result<(Vec<f64>, EmaState)> {
    let pi = corrected_probabilities(logits, &state.g_bar, cfg.bias_strength, cfg.temperature)?;
    let mut updated = state.clone();
    updated.update(logits, cfg.ema_decay)?;
    Ok((pi, updated))
}

/// Dispatch one token under the configured variant with a frozen EMA state.
///
/// Training updates the EMA once per batch from the batch-mean logits; every
/// token in a batch therefore routes against the same snapshot.
pub fn route_frozen(
    logits: &[f64],
    state: &EmaState,
    cfg: &RouterConfig,
) -> Result<RoutingOutput> {
    if logits.len() != cfg.num_experts {
        return Err(Error::DimMismatch {
            what: "route logits",
            expected: cfg.num_experts,
            got: logits.len(),
        });
    }
    match cfg.variant {
        RoutingVariant::Grouped => {
            let pi = corrected_probabilities(logits, &state.g_bar, 0.0, cfg.temperature)?;
            grouped_topk(&pi, cfg)
        }
        RoutingVariant::HiMoe => {
            let pi = corrected_probabilities(
                logits,
                &state.g_bar,
                cfg.bias_strength,
                cfg.temperature,
            )?;
            grouped_topk(&pi, cfg)
        }
        RoutingVariant::Flat => {
            let pi = corrected_probabilities(logits, &state.g_bar, 0.0, cfg.temperature)?;
            let mut out = flat_topk(&pi, cfg.flat_k)?;
            out.group_mass = group_mass(&out, &cfg.partition)?;
            Ok(out)
        }
        RoutingVariant::FlatLossfreeBias => {
            let pi = corrected_probabilities(logits, &state.g_bar, 0.0, cfg.temperature)?;
            ensure_finite("lossfree selection bias", &state.bias)?;
            if state.bias.len() != cfg.num_experts {
                return Err(Error::DimMismatch {
                    what: "lossfree selection bias",
                    expected: cfg.num_experts,
                    got: state.bias.len(),
                });
            }
            let scores: Vec<f64> = logits.iter().zip(&state.bias).map(|(&g, &b)| g + b).collect();
            let all: Vec<usize> = (0..cfg.num_experts).collect();
            let selected = topk_by_score(&scores, &all, cfg.flat_k);
            let mut out = masked_output(&pi, selected);
            out.group_mass = group_mass(&out, &cfg.partition)?;
            Ok(out)
        }
    }
}

/// Dispatch one token and advance the EMA with this token's logits.
pub fn route(
    logits: &[f64],
    state: &EmaState,
    cfg: &RouterConfig,
) -> Result<(RoutingOutput, EmaState)> {
    let out = route_frozen(logits, state, cfg)?;
    let mut updated = state.clone();
    updated.update(logits, cfg.ema_decay)?;
    Ok((out, updated))
}

/// Per-batch bias nudge of the loss-free variant:
/// `b_i <- b_i - eta * sign(h_i - K/N)` where `h` is the batch dispatch
/// fraction per expert. Experts exactly on target are left alone.
pub fn lossfree_bias_update(state: &mut EmaState, h: &[f64], flat_k: usize, eta: f64) {
    assert_eq!(h.len(), state.bias.len(), "lossfree_bias_update: length mismatch");
    let target = flat_k as f64 / h.len() as f64;
    for (b, &hi) in state.bias.iter_mut().zip(h) {
        let d = hi - target;
        let sign = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        *b -= eta * sign;
    }
}
