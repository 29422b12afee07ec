//! Continual-learning safeguards applied as gradient transforms.
//!
//! - [`EwcAnchor`]: elastic weight consolidation. Adds the gradient of
//!   `λ Σ_k F_k (θ_k − θ*_k)²` to the actor gradient, pulling parameters that
//!   mattered for priority handling back toward their stage-one values.
//! - [`GemMemory`]: gradient episodic memory with a single retained task.
//!   Each step the reference gradient over the whole memory is recomputed at
//!   the current parameters; a conflicting update gradient is projected onto
//!   the closest gradient that no longer conflicts.

use serde::{Deserialize, Serialize};

use crate::agent::{
    accumulate_actor_grad, accumulate_critic_grad, actor_grad, Batch, GradientTransform, NetKind,
};
use crate::error::{Error, Result};
use crate::nn::{dot, estimate_fisher, GradientVector, Network, ParamVector};

/// Squared reference-gradient norm below which projection is skipped.
pub const DEGENERATE_NORM_SQ: f64 = 1e-18;

/// Upper bound on rounding corrections in [`gem_project`].
const MAX_NUDGES: usize = 64;

/// Rows per forward pass when sweeping a large memory.
const MEMORY_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct EwcAnchor {
    pub anchor_params: ParamVector,
    pub fisher: Vec<f64>,
    pub weight: f64,
}

impl EwcAnchor {
    pub fn new(anchor_params: ParamVector, fisher: Vec<f64>, weight: f64) -> Result<Self> {
        if anchor_params.len() != fisher.len() {
            return Err(Error::contract("anchor and Fisher vectors differ in length"));
        }
        if fisher.iter().any(|f| !(*f >= 0.0)) {
            return Err(Error::contract("Fisher information must be non-negative"));
        }
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(Error::contract("EWC weight must be a non-negative real"));
        }
        Ok(Self { anchor_params, fisher, weight })
    }

    /// `λ Σ_k F_k (θ_k − θ*_k)²`.
    pub fn penalty(&self, params: &[f64]) -> f64 {
        self.weight
            * params
                .iter()
                .zip(self.anchor_params.iter())
                .zip(&self.fisher)
                .map(|((p, a), f)| f * (p - a) * (p - a))
                .sum::<f64>()
    }
}

/// Snapshots the actor and estimates its Fisher information from
/// per-batch actor-objective gradients on priority data.
pub fn build_ewc_anchor(
    actor: &Network,
    critic: &Network,
    prio_batches: &[Batch],
    weight: f64,
) -> Result<EwcAnchor> {
    if prio_batches.is_empty() {
        return Err(Error::contract("EWC anchor needs at least one batch"));
    }
    let grads = prio_batches
        .iter()
        .map(|b| actor_grad(actor, critic, b.view()).map(|(_, g)| g))
        .collect::<Result<Vec<_>>>()?;
    let fisher = estimate_fisher(&grads)?;
    EwcAnchor::new(actor.params.clone(), fisher, weight)
}

/// `grad + 2λ F ⊙ (θ − θ*)`.
pub fn ewc_transform(anchor: &EwcAnchor, params: &[f64], grad: &mut [f64]) -> Result<()> {
    let n = anchor.anchor_params.len();
    if params.len() != n || grad.len() != n {
        return Err(Error::contract(format!(
            "EWC anchor has {n} parameters, got params {} and grad {}",
            params.len(),
            grad.len()
        )));
    }
    let two_lambda = 2.0 * anchor.weight;
    for (((g, p), a), f) in grad
        .iter_mut()
        .zip(params)
        .zip(anchor.anchor_params.iter())
        .zip(&anchor.fisher)
    {
        *g += two_lambda * f * (p - a);
    }
    Ok(())
}

impl GradientTransform for EwcAnchor {
    fn apply(
        &self,
        target: NetKind,
        actor: &Network,
        _critic: &Network,
        grad: &mut GradientVector,
    ) -> Result<()> {
        match target {
            NetKind::Actor => ewc_transform(self, &actor.params, grad),
            NetKind::Critic => Ok(()),
        }
    }
}

/// Retained stage-one transitions, frozen for stage two.
#[derive(Debug, Clone, PartialEq)]
pub struct GemMemory {
    samples: Batch,
}

impl GemMemory {
    pub fn new(samples: Batch) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::contract("GEM memory must hold at least one sample"));
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &Batch {
        &self.samples
    }
}

/// Objective gradient averaged over the whole memory at the current parameters.
pub fn gem_reference_grad(
    kind: NetKind,
    actor: &Network,
    critic: &Network,
    memory: &GemMemory,
) -> Result<GradientVector> {
    let n = memory.len();
    let scale = 1.0 / n as f64;
    let len = match kind {
        NetKind::Actor => actor.params.len(),
        NetKind::Critic => critic.params.len(),
    };
    let mut grad = GradientVector::zeros(len);
    for start in (0..n).step_by(MEMORY_CHUNK) {
        let rows = memory.samples.rows(start, (start + MEMORY_CHUNK).min(n));
        match kind {
            NetKind::Actor => accumulate_actor_grad(actor, critic, rows, scale, &mut grad)?,
            NetKind::Critic => accumulate_critic_grad(critic, rows, scale, &mut grad)?,
        };
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    pub projected_grad: GradientVector,
    pub v_opt: f64,
    pub was_projected: bool,
}

/// Closed-form minimizer of `½ v² ‖g_prio‖² + ⟨g_curr, g_prio⟩ v` over `v ≥ 0`.
pub fn gem_multiplier(g_prio: &[f64], g_curr: &[f64]) -> f64 {
    let norm_sq = dot(g_prio, g_prio);
    let inner = dot(g_curr, g_prio);
    if norm_sq < DEGENERATE_NORM_SQ || inner >= 0.0 {
        0.0
    } else {
        -inner / norm_sq
    }
}

fn combine(g_prio: &[f64], g_curr: &[f64], v: f64) -> Vec<f64> {
    g_prio.iter().zip(g_curr).map(|(p, c)| p * v + c).collect()
}

/// Passes `g_curr` through when it does not conflict with `g_prio`,
/// otherwise returns `g_prio · v_opt + g_curr`.
///
/// When rounding leaves the reconstructed gradient a hair on the wrong side
/// of the constraint, `v_opt` is nudged up (by a few ulps) until
/// `⟨g_prio, g̃⟩ ≥ 0` holds exactly, so projecting twice is a no-op.
pub fn gem_project(g_prio: &GradientVector, g_curr: &GradientVector) -> Result<ProjectionResult> {
    if g_prio.len() != g_curr.len() {
        return Err(Error::contract(format!(
            "gradient lengths differ: {} vs {}",
            g_prio.len(),
            g_curr.len()
        )));
    }
    let mut v_opt = gem_multiplier(g_prio, g_curr);
    if v_opt == 0.0 {
        return Ok(ProjectionResult {
            projected_grad: g_curr.clone(),
            v_opt: 0.0,
            was_projected: false,
        });
    }
    let norm_sq = g_prio.norm_sq();
    let mut projected = combine(g_prio, g_curr, v_opt);
    for _ in 0..MAX_NUDGES {
        let residual = dot(g_prio, &projected);
        if residual >= 0.0 {
            break;
        }
        v_opt = (v_opt - residual / norm_sq).next_up();
        projected = combine(g_prio, g_curr, v_opt);
    }
    Ok(ProjectionResult {
        projected_grad: GradientVector(projected),
        v_opt,
        was_projected: true,
    })
}

/// Reference gradient followed by projection.
pub fn gem_transform(
    memory: &GemMemory,
    kind: NetKind,
    actor: &Network,
    critic: &Network,
    grad: &mut GradientVector,
) -> Result<bool> {
    let g_prio = gem_reference_grad(kind, actor, critic, memory)?;
    let result = gem_project(&g_prio, grad)?;
    if result.was_projected {
        *grad = result.projected_grad;
    }
    Ok(result.was_projected)
}

impl GradientTransform for GemMemory {
    fn apply(
        &self,
        target: NetKind,
        actor: &Network,
        critic: &Network,
        grad: &mut GradientVector,
    ) -> Result<()> {
        gem_transform(self, target, actor, critic, grad).map(|_| ())
    }
}

/// The transform a trained variant carries into later training.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Safeguard {
    #[default]
    None,
    Ewc(EwcAnchor),
    Gem(GemMemory),
}

impl Safeguard {
    pub fn as_transform(&self) -> Option<&dyn GradientTransform> {
        match self {
            Safeguard::None => None,
            Safeguard::Ewc(a) => Some(a),
            Safeguard::Gem(m) => Some(m),
        }
    }
}

/// Which safeguard a variant installs, before its data exists.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SafeguardKind {
    Ewc { weight: f64 },
    Gem { memory_size: usize },
}
