//! Group-relative clipped objective with a KL anchor, composite rewards and
//! the online reweighting filter.
//!
//! Every decision in a rollout is attributed to the agent that emitted it.
//! Only trainable agents' decisions enter the objective, each normalized by
//! that agent's decision count in the rollout, so frozen agents contribute
//! neither value nor gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{kl_divergence, TabularPolicy};
use crate::rng;

/// Weights of `R = alpha * R_form + beta * (lambda1 * R_act + lambda2 * R_info)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.9,
            lambda1: 0.2,
            lambda2: 0.8,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
        ] {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Domain(format!("reward weight {name} = {w} not in [0, 1]")));
            }
        }
        Ok(())
    }
}

pub fn composite_reward(
    format_ok: f64,
    action_type_score: f64,
    param_score: f64,
    weights: &RewardWeights,
) -> Result<f64> {
    for (name, x) in [
        ("format", format_ok),
        ("action type", action_type_score),
        ("parameter", param_score),
    ] {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::Domain(format!("{name} score {x} not in [0, 1]")));
        }
    }
    weights.validate()?;
    let accuracy = weights.lambda1 * action_type_score + weights.lambda2 * param_score;
    Ok(weights.alpha * format_ok + weights.beta * accuracy)
}

/// Standardized rewards of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageBatch {
    pub advantages: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Zero spread: all advantages are zero.
    pub degenerate: bool,
}

/// `A_k = (R_k - mean) / std` with the population standard deviation. A group
/// with zero spread gets all-zero advantages.
pub fn normalized_advantage(rewards: &[f64]) -> Result<AdvantageBatch> {
    if rewards.len() < 2 {
        return Err(Error::Domain(format!(
            "a group needs at least 2 rollouts, got {}",
            rewards.len()
        )));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::Numeric("non-finite reward".into()));
    }
    let k = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / k;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / k;
    let std = var.sqrt();
    // Spread below round-off of the mean counts as none.
    let degenerate = std <= 1e-12 * mean.abs().max(1.0);
    let advantages = if degenerate {
        vec![0.0; rewards.len()]
    } else {
        rewards.iter().map(|r| (r - mean) / std).collect()
    };
    Ok(AdvantageBatch {
        advantages,
        mean,
        std: if degenerate { 0.0 } else { std },
        degenerate,
    })
}

/// Keep a group iff `lower < mean reward < upper`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReweightRule {
    pub lower: f64,
    pub upper: f64,
}

impl Default for ReweightRule {
    fn default() -> Self {
        Self {
            lower: 0.1,
            upper: 1.0,
        }
    }
}

impl ReweightRule {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower < upper) {
            return Err(Error::Domain(format!("reweight band ({lower}, {upper}) is empty")));
        }
        Ok(Self { lower, upper })
    }

    /// The narrower (0.2, 0.8) band used for binary-reward reasoning tasks.
    pub fn mid_band() -> Self {
        Self {
            lower: 0.2,
            upper: 0.8,
        }
    }

    pub fn keeps(&self, mean_reward: f64) -> bool {
        self.lower < mean_reward && mean_reward < self.upper
    }
}

/// One decision inside a rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    /// Emitting agent; the indicator of this decision is 1 for it, 0 for all others.
    pub agent: usize,
    pub state: usize,
    pub action: usize,
    pub old_log_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub decisions: Vec<Decision>,
    pub reward: f64,
}

/// `K` rollouts sampled for the same input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub input_id: usize,
    pub rollouts: Vec<Rollout>,
}

impl RolloutGroup {
    pub fn mean_reward(&self) -> f64 {
        self.rollouts.iter().map(|r| r.reward).sum::<f64>() / self.rollouts.len().max(1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rollouts.len() < 2 {
            return Err(Error::Domain(format!(
                "group {} has {} rollouts, need at least 2",
                self.input_id,
                self.rollouts.len()
            )));
        }
        if let Some(d) = self
            .rollouts
            .iter()
            .flat_map(|r| &r.decisions)
            .find(|d| !d.old_log_prob.is_finite())
        {
            return Err(Error::Numeric(format!(
                "group {}: non-finite old log-probability {}",
                self.input_id, d.old_log_prob
            )));
        }
        Ok(())
    }
}

/// Result of filtering a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ReweightOutcome {
    pub batch: Vec<RolloutGroup>,
    pub n_filtered: usize,
    pub n_refilled: usize,
    /// No group survived; the step must be skipped.
    pub skipped: bool,
}

/// Drops groups outside the rule and refills to the original size by uniform
/// resampling with replacement from the survivors.
pub fn reweight_batch(groups: Vec<RolloutGroup>, rule: &ReweightRule, seed: u64) -> ReweightOutcome {
    let size = groups.len();
    let kept: Vec<RolloutGroup> = groups
        .into_iter()
        .filter(|g| rule.keeps(g.mean_reward()))
        .collect();
    let n_filtered = size - kept.len();
    if kept.is_empty() {
        return ReweightOutcome {
            batch: Vec::new(),
            n_filtered,
            n_refilled: 0,
            skipped: true,
        };
    }
    let mut rng = rng::rng_from_seed(seed);
    let mut batch = kept.clone();
    for _ in 0..n_filtered {
        batch.push(kept[rng.gen_range(0..kept.len())].clone());
    }
    ReweightOutcome {
        batch,
        n_filtered,
        n_refilled: n_filtered,
        skipped: false,
    }
}

pub fn importance_ratio(new_log_prob: f64, old_log_prob: f64) -> Result<f64> {
    if !new_log_prob.is_finite() || !old_log_prob.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite log-probability ({new_log_prob}, {old_log_prob})"
        )));
    }
    Ok((new_log_prob - old_log_prob).exp())
}

/// `min(v A, clip(v, 1 - eps, 1 + eps) A)`.
pub fn clipped_term(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoHyperparams {
    pub clip_epsilon: f64,
    pub kl_coef: f64,
    pub learning_rate: f64,
    /// Rollouts per group (`K`).
    pub rollouts: usize,
    /// Outer iterations (`M`); the reference policy is refreshed at each.
    pub iterations: usize,
    /// Steps per iteration (`B`). Zero means one pass over the inputs.
    pub steps: usize,
    /// Groups per step.
    pub batch_size: usize,
}

impl Default for GrpoHyperparams {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            kl_coef: 0.04,
            learning_rate: 0.5,
            rollouts: 8,
            iterations: 1,
            steps: 0,
            batch_size: 16,
        }
    }
}

impl GrpoHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::Domain(format!("clip epsilon {} not in (0, 1)", self.clip_epsilon)));
        }
        if !(self.kl_coef >= 0.0) {
            return Err(Error::Domain(format!("KL coefficient {} is negative", self.kl_coef)));
        }
        if self.rollouts < 2 {
            return Err(Error::Domain(format!("rollouts K = {} < 2", self.rollouts)));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Domain(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Domain("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Objective value, per-agent gradients and diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveEval {
    pub objective: f64,
    /// One gradient per policy passed in; zero for non-trainable agents.
    pub gradients: Vec<Vec<f64>>,
    pub mean_kl_ref: f64,
    pub clip_fraction: f64,
    pub n_decisions: usize,
}

/// Evaluates the batch objective
///
/// ```text
/// mean_groups 1/K sum_k sum_{j trainable} sum_l I_j(k,l) / n_j(k)
///     * (clip(v_kl, A_k) - lambda * KL(pi_j(.|s_kl) || ref_j(.|s_kl)))
/// ```
///
/// and its exact gradient with respect to the logits of each trainable agent.
/// `policies[j]` and `refs[j]` belong to agent `j`.
pub fn objective_multi(
    groups: &[RolloutGroup],
    policies: &[&TabularPolicy],
    refs: &[&TabularPolicy],
    trainable: &[bool],
    hyper: &GrpoHyperparams,
) -> Result<ObjectiveEval> {
    if policies.len() != refs.len() || policies.len() != trainable.len() {
        return Err(Error::Domain("policies, references and mask differ in length".into()));
    }
    let n_agents = policies.len();
    let mut gradients: Vec<Vec<f64>> = policies
        .iter()
        .map(|p| vec![0.0; p.logits().len()])
        .collect();
    if groups.is_empty() {
        return Ok(ObjectiveEval {
            objective: 0.0,
            gradients,
            mean_kl_ref: 0.0,
            clip_fraction: 0.0,
            n_decisions: 0,
        });
    }
    let eps = hyper.clip_epsilon;
    let lambda = hyper.kl_coef;
    let mut objective = 0.0;
    let mut kl_sum = 0.0;
    let mut n_clipped = 0usize;
    let mut n_decisions = 0usize;
    let group_weight = 1.0 / groups.len() as f64;
    for group in groups {
        group.validate()?;
        let rewards: Vec<f64> = group.rollouts.iter().map(|r| r.reward).collect();
        let adv = normalized_advantage(&rewards)?;
        let k = group.rollouts.len() as f64;
        for (rollout, &a_k) in group.rollouts.iter().zip(&adv.advantages) {
            let mut counts = vec![0usize; n_agents];
            for d in &rollout.decisions {
                if d.agent >= n_agents {
                    return Err(Error::Domain(format!("decision by unknown agent {}", d.agent)));
                }
                counts[d.agent] += 1;
            }
            for d in &rollout.decisions {
                let j = d.agent;
                if !trainable[j] {
                    continue;
                }
                let policy = policies[j];
                let log_probs = policy.log_probs(d.state);
                let probs: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
                let ref_probs = refs[j].probs(d.state);
                let w = group_weight / (k * counts[j] as f64);
                let v = importance_ratio(log_probs[d.action], d.old_log_prob)?;
                let unclipped = v * a_k;
                let clipped = v.clamp(1.0 - eps, 1.0 + eps) * a_k;
                let kl = kl_divergence(&probs, &ref_probs);
                objective += w * (unclipped.min(clipped) - lambda * kl);
                kl_sum += kl;
                n_decisions += 1;
                if v < 1.0 - eps || v > 1.0 + eps {
                    n_clipped += 1;
                }
                let row = d.state * policy.n_actions();
                let grad = &mut gradients[j][row..row + policy.n_actions()];
                if unclipped <= clipped {
                    for (c, g) in grad.iter_mut().enumerate() {
                        let indicator = if c == d.action { 1.0 } else { 0.0 };
                        *g += w * a_k * v * (indicator - probs[c]);
                    }
                }
                if lambda != 0.0 {
                    for (c, g) in grad.iter_mut().enumerate() {
                        let dkl = probs[c] * (log_probs[c] - ref_probs[c].ln() - kl);
                        *g -= w * lambda * dkl;
                    }
                }
            }
        }
    }
    let denom = n_decisions.max(1) as f64;
    Ok(ObjectiveEval {
        objective,
        gradients,
        mean_kl_ref: kl_sum / denom,
        clip_fraction: n_clipped as f64 / denom,
        n_decisions,
    })
}

/// Objective restricted to `active_agent`: every other agent is frozen.
/// Returns the objective and the gradient with respect to the active logits.
pub fn grpo_objective(
    groups: &[RolloutGroup],
    active_agent: usize,
    policy: &TabularPolicy,
    ref_policy: &TabularPolicy,
    hyper: &GrpoHyperparams,
) -> Result<(f64, Vec<f64>)> {
    let eval = single_agent_eval(groups, active_agent, policy, ref_policy, hyper)?;
    Ok((eval.objective, eval.gradients.into_iter().nth(active_agent).unwrap_or_default()))
}

fn single_agent_eval(
    groups: &[RolloutGroup],
    active_agent: usize,
    policy: &TabularPolicy,
    ref_policy: &TabularPolicy,
    hyper: &GrpoHyperparams,
) -> Result<ObjectiveEval> {
    if policy.agent_id != active_agent || ref_policy.agent_id != active_agent {
        return Err(Error::Domain(format!(
            "policy of agent {} passed for active agent {active_agent}",
            policy.agent_id
        )));
    }
    // Placeholder policies for the frozen slots are never read: masked
    // decisions skip every policy lookup.
    let n = groups
        .iter()
        .flat_map(|g| &g.rollouts)
        .flat_map(|r| &r.decisions)
        .map(|d| d.agent + 1)
        .max()
        .unwrap_or(0)
        .max(active_agent + 1);
    let placeholder = TabularPolicy::uniform(usize::MAX, 1, 1);
    let mut policies = vec![&placeholder; n];
    let mut refs = vec![&placeholder; n];
    let mut mask = vec![false; n];
    policies[active_agent] = policy;
    refs[active_agent] = ref_policy;
    mask[active_agent] = true;
    objective_multi(groups, &policies, &refs, &mask, hyper)
}

/// Per-step diagnostics, one CSV row each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iteration: usize,
    pub step: usize,
    pub agent: usize,
    /// Batch objective after the update.
    pub objective: f64,
    pub mean_kl_ref: f64,
    pub clip_fraction: f64,
    pub n_filtered: usize,
    pub n_refilled: usize,
    pub skipped: bool,
    /// Mean reward of the sampled rollouts before filtering.
    #[serde(default)]
    pub mean_reward: f64,
}

impl StepMetrics {
    pub const CSV_HEADER: [&'static str; 10] = [
        "iteration",
        "step",
        "agent",
        "objective",
        "mean_kl_ref",
        "clip_fraction",
        "n_filtered",
        "n_refilled",
        "skipped",
        "mean_reward",
    ];

    pub fn skipped(iteration: usize, step: usize, agent: usize, n_filtered: usize) -> Self {
        Self {
            iteration,
            step,
            agent,
            objective: 0.0,
            mean_kl_ref: 0.0,
            clip_fraction: 0.0,
            n_filtered,
            n_refilled: 0,
            skipped: true,
            mean_reward: 0.0,
        }
    }
}

/// Outcome of one ascent step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub policy: TabularPolicy,
    pub objective_before: f64,
    pub objective_after: f64,
    pub mean_kl_ref: f64,
    pub clip_fraction: f64,
    pub learning_rate: f64,
    /// Number of learning-rate halvings needed.
    pub halvings: usize,
    pub skipped: bool,
}

/// One plain gradient-ascent step on the active agent's logits with step
/// size `hyper.learning_rate`. An empty batch is a skipped step.
pub fn grpo_step(
    policy: &TabularPolicy,
    batch: &[RolloutGroup],
    ref_policy: &TabularPolicy,
    hyper: &GrpoHyperparams,
) -> Result<StepOutcome> {
    step_with_halving(policy, batch, ref_policy, hyper, 0)
}

/// Like [`grpo_step`], but halves the step size (at most `max_halvings`
/// times) while the batch objective would decrease. If every attempt
/// decreases it, the policy is left unchanged.
pub fn step_with_halving(
    policy: &TabularPolicy,
    batch: &[RolloutGroup],
    ref_policy: &TabularPolicy,
    hyper: &GrpoHyperparams,
    max_halvings: usize,
) -> Result<StepOutcome> {
    let agent = policy.agent_id;
    if batch.is_empty() {
        return Ok(StepOutcome {
            policy: policy.clone(),
            objective_before: 0.0,
            objective_after: 0.0,
            mean_kl_ref: 0.0,
            clip_fraction: 0.0,
            learning_rate: hyper.learning_rate,
            halvings: 0,
            skipped: true,
        });
    }
    let before = single_agent_eval(batch, agent, policy, ref_policy, hyper)?;
    let grad = &before.gradients[agent];
    let mut lr = hyper.learning_rate;
    let unchanged = |before: &ObjectiveEval, halvings| StepOutcome {
        policy: policy.clone(),
        objective_before: before.objective,
        objective_after: before.objective,
        mean_kl_ref: before.mean_kl_ref,
        clip_fraction: before.clip_fraction,
        learning_rate: 0.0,
        halvings,
        skipped: false,
    };
    if grad.iter().all(|g| *g == 0.0) {
        return Ok(unchanged(&before, 0));
    }
    for halvings in 0..=max_halvings {
        let mut candidate = policy.clone();
        for (z, g) in candidate.logits_mut().iter_mut().zip(grad) {
            *z += lr * g;
        }
        let after = single_agent_eval(batch, agent, &candidate, ref_policy, hyper)?;
        if max_halvings == 0 || after.objective >= before.objective {
            return Ok(StepOutcome {
                policy: candidate,
                objective_before: before.objective,
                objective_after: after.objective,
                mean_kl_ref: after.mean_kl_ref,
                clip_fraction: after.clip_fraction,
                learning_rate: lr,
                halvings,
                skipped: false,
            });
        }
        lr *= 0.5;
    }
    Ok(unchanged(&before, max_halvings))
}

/// Outcome of one ascent step on several agents at once.
#[derive(Debug, Clone)]
pub struct MultiStepOutcome {
    pub policies: Vec<TabularPolicy>,
    pub objective_before: f64,
    pub objective_after: f64,
    pub mean_kl_ref: f64,
    pub clip_fraction: f64,
    pub learning_rate: f64,
    pub halvings: usize,
    pub skipped: bool,
}

/// Joint ascent step: every agent flagged in `trainable` moves along its own
/// gradient with a shared step size, halved while the objective decreases.
pub fn step_multi_with_halving(
    policies: &[TabularPolicy],
    batch: &[RolloutGroup],
    refs: &[TabularPolicy],
    trainable: &[bool],
    hyper: &GrpoHyperparams,
    max_halvings: usize,
) -> Result<MultiStepOutcome> {
    let eval = |ps: &[TabularPolicy]| {
        let p: Vec<&TabularPolicy> = ps.iter().collect();
        let r: Vec<&TabularPolicy> = refs.iter().collect();
        objective_multi(batch, &p, &r, trainable, hyper)
    };
    let before = eval(policies)?;
    let unchanged = |lr, halvings, skipped| MultiStepOutcome {
        policies: policies.to_vec(),
        objective_before: before.objective,
        objective_after: before.objective,
        mean_kl_ref: before.mean_kl_ref,
        clip_fraction: before.clip_fraction,
        learning_rate: lr,
        halvings,
        skipped,
    };
    if batch.is_empty() {
        return Ok(unchanged(hyper.learning_rate, 0, true));
    }
    if before.gradients.iter().flatten().all(|g| *g == 0.0) {
        return Ok(unchanged(0.0, 0, false));
    }
    let mut lr = hyper.learning_rate;
    for halvings in 0..=max_halvings {
        let candidate: Vec<TabularPolicy> = policies
            .iter()
            .zip(&before.gradients)
            .map(|(p, g)| {
                let mut c = p.clone();
                for (z, gz) in c.logits_mut().iter_mut().zip(g) {
                    *z += lr * gz;
                }
                c
            })
            .collect();
        let after = eval(&candidate)?;
        if max_halvings == 0 || after.objective >= before.objective {
            return Ok(MultiStepOutcome {
                policies: candidate,
                objective_before: before.objective,
                objective_after: after.objective,
                mean_kl_ref: after.mean_kl_ref,
                clip_fraction: after.clip_fraction,
                learning_rate: lr,
                halvings,
                skipped: false,
            });
        }
        lr *= 0.5;
    }
    Ok(unchanged(0.0, max_halvings, false))
}
