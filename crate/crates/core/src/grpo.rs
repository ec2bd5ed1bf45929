//! Group Relative Policy Optimization on the tabular toy policy: rollout
//! groups, mean-baseline advantages, the clipped sequence-level
//! surrogate, a non-negative KL estimator against a frozen reference
//! policy, and the training loop.
//!
//! Per iteration the old policy is frozen, G candidate outputs per query
//! are sampled from it, scored by the environment, and one ascent step
//! is taken on the group objective. The reference policy stays fixed at
//! the initial policy for the whole run.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{GradTable, PolicyError, SymbolId, ToyPolicy};
use crate::scoring::RewardWeights;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("environment failure for query {query_index}: {message}")]
    Environment { query_index: usize, message: String },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("group-shape-mismatch")]
    GroupShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    /// Candidate outputs per query (G).
    pub group_size: usize,
    /// Clipping threshold ε of the surrogate ratio.
    pub clip_epsilon: f64,
    /// KL coefficient β.
    pub kl_beta: f64,
    /// Rollout sampling temperature.
    pub temperature: f64,
    pub weights: RewardWeights,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Queries per iteration, taken round-robin from the environment.
    pub batch_size: usize,
    /// Rollout length cap.
    pub max_len: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 16,
            clip_epsilon: 0.2,
            kl_beta: 0.04,
            temperature: 0.9,
            weights: RewardWeights::default(),
            learning_rate: 0.5,
            iterations: 500,
            batch_size: 8,
            max_len: 16,
        }
    }
}

/// One query's rollout: G sampled outputs with their rewards and the
/// log-probabilities under the frozen old and reference policies.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub query: Vec<SymbolId>,
    pub outputs: Vec<Vec<SymbolId>>,
    pub rewards: Vec<f64>,
    pub old_logp: Vec<f64>,
    pub ref_logp: Vec<f64>,
}

impl RolloutGroup {
    pub fn group_size(&self) -> usize {
        self.outputs.len()
    }

    fn check(&self) -> Result<(), GrpoError> {
        let g = self.outputs.len();
        if g == 0
            || self.rewards.len() != g
            || self.old_logp.len() != g
            || self.ref_logp.len() != g
            || self.rewards.iter().any(|r| !r.is_finite())
        {
            return Err(GrpoError::GroupShape);
        }
        Ok(())
    }
}

/// A_i = R_i − mean(R), with a compensated mean so the advantages sum to
/// zero to machine precision.
pub fn advantages(rewards: &[f64]) -> Vec<f64> {
    let mut sum = 0.0;
    let mut carry = 0.0;
    for &r in rewards {
        let y = r - carry;
        let t = sum + y;
        carry = (t - sum) - y;
        sum = t;
    }
    let mean = sum / rewards.len() as f64;
    rewards.iter().map(|r| r - mean).collect()
}

/// min(r·A, clip(r, 1−ε, 1+ε)·A) with r = exp(new_logp − old_logp).
pub fn surrogate_term(new_logp: f64, old_logp: f64, advantage: f64, epsilon: f64) -> f64 {
    let ratio = (new_logp - old_logp).exp();
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    (ratio * advantage).min(clipped * advantage)
}

/// Non-negative per-sample KL estimator k(δ) = exp(δ) − δ − 1 with
/// δ = ref_logp − new_logp. Zero iff the log-probabilities agree.
pub fn kl_term(new_logp: f64, ref_logp: f64) -> f64 {
    let delta = ref_logp - new_logp;
    delta.exp() - delta - 1.0
}

/// Per-group statistics produced alongside the objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GroupStats {
    pub mean_reward: f64,
    pub mean_kl: f64,
    /// Fraction of group members whose surrogate selected the clipped
    /// constant branch (zero gradient).
    pub clip_fraction: f64,
}

/// J = (1/G) Σ_i [min(r_i A_i, clip(r_i) A_i) − β k_i] and its exact
/// gradient through the policy log-probabilities. Terms where the min
/// selects the clipped constant branch contribute zero surrogate
/// gradient.
pub fn grpo_objective(
    group: &RolloutGroup,
    policy: &ToyPolicy,
    config: &GrpoConfig,
) -> Result<(f64, GradTable, GroupStats), GrpoError> {
    group.check()?;
    let g = group.group_size() as f64;
    let adv = advantages(&group.rewards);
    let epsilon = config.clip_epsilon;

    let mut objective = 0.0;
    let mut grad = GradTable::new();
    let mut stats = GroupStats::default();
    for i in 0..group.group_size() {
        let new_logp = policy.log_prob(&group.query, &group.outputs[i])?;
        let logp_grad = policy.log_prob_grad(&group.query, &group.outputs[i])?;

        let ratio = (new_logp - group.old_logp[i]).exp();
        let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
        let unclipped_value = ratio * adv[i];
        let clipped_value = clipped * adv[i];
        let surrogate = unclipped_value.min(clipped_value);
        let surrogate_coeff = if unclipped_value <= clipped_value {
            ratio * adv[i]
        } else {
            stats.clip_fraction += 1.0 / g;
            0.0
        };

        let delta = group.ref_logp[i] - new_logp;
        let kl = delta.exp() - delta - 1.0;
        let kl_coeff = delta.exp() - 1.0; // d(−k)/d(new_logp)

        objective += (surrogate - config.kl_beta * kl) / g;
        grad.add_scaled(&logp_grad, (surrogate_coeff + config.kl_beta * kl_coeff) / g);
        stats.mean_reward += group.rewards[i] / g;
        stats.mean_kl += kl / g;
    }
    Ok((objective, grad, stats))
}

/// A task the trainer optimizes against: a fixed query set and a reward
/// for any (query, output) pair.
pub trait Environment {
    fn queries(&self) -> Vec<Vec<SymbolId>>;
    fn reward(&self, query: &[SymbolId], output: &[SymbolId]) -> Result<f64, String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub loss: f64,
}

/// GRPO training loop. `policy` seeds π_θ, π_old, and the frozen π_ref.
pub fn grpo_train<E: Environment, R: Rng + ?Sized>(
    policy: &ToyPolicy,
    environment: &E,
    config: &GrpoConfig,
    rng: &mut R,
) -> Result<(ToyPolicy, Vec<IterationLog>), GrpoError> {
    let reference = policy.clone();
    let mut current = policy.clone();
    let queries = environment.queries();
    let mut log = Vec::with_capacity(config.iterations);
    let batch_size = config.batch_size.max(1).min(queries.len().max(1));
    let mut cursor = 0usize;

    for iteration in 0..config.iterations {
        let old = current.clone();
        let mut grad = GradTable::new();
        let mut objective = 0.0;
        let mut stats = GroupStats::default();

        for _ in 0..batch_size {
            let query_index = cursor;
            cursor = (cursor + 1) % queries.len().max(1);
            let query = &queries[query_index];

            let mut outputs = Vec::with_capacity(config.group_size);
            let mut rewards = Vec::with_capacity(config.group_size);
            let mut old_logp = Vec::with_capacity(config.group_size);
            let mut ref_logp = Vec::with_capacity(config.group_size);
            for _ in 0..config.group_size {
                let output = old.sample_sequence(query, config.temperature, config.max_len, rng);
                let reward = environment
                    .reward(query, &output)
                    .map_err(|message| GrpoError::Environment { query_index, message })?;
                old_logp.push(old.log_prob(query, &output)?);
                ref_logp.push(reference.log_prob(query, &output)?);
                outputs.push(output);
                rewards.push(reward);
            }
            let group = RolloutGroup {
                query: query.clone(),
                outputs,
                rewards,
                old_logp,
                ref_logp,
            };
            let (j, group_grad, group_stats) = grpo_objective(&group, &current, config)?;
            objective += j / batch_size as f64;
            grad.add_scaled(&group_grad, 1.0 / batch_size as f64);
            stats.mean_reward += group_stats.mean_reward / batch_size as f64;
            stats.mean_kl += group_stats.mean_kl / batch_size as f64;
            stats.clip_fraction += group_stats.clip_fraction / batch_size as f64;
        }

        current.apply_step(&grad, config.learning_rate);
        log.push(IterationLog {
            iteration,
            mean_reward: stats.mean_reward,
            mean_kl: stats.mean_kl,
            clip_fraction: stats.clip_fraction,
            loss: -objective,
        });
    }
    Ok((current, log))
}
