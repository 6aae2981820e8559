//! Group-relative policy optimization over categorical policies.
//!
//! Each prompt is answered `group_size` times by the current policy. Rewards
//! are normalized within the group (mean/population-std), so a group whose
//! rollouts all earn the same reward contributes no surrogate gradient. The
//! trainer ascends
//!
//! ```text
//! mean[min(r·A, clip(r, 1-ε, 1+ε)·A)] − β · mean[KL(π(·|o) ‖ π_ref(·|o))]
//! ```
//!
//! with one plain gradient step per call.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::eval::JudgmentLabel;
use crate::{Error, Result};

/// Normalizes rewards within one group: `(r − mean) / (std + std_epsilon)`
/// with the population standard deviation. All-equal rewards give exact zeros.
pub fn compute_advantages(rewards: &[f64], std_epsilon: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::DegenerateGroup(rewards.len()));
    }
    let first = rewards[0];
    if rewards.iter().all(|&r| r == first) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + std_epsilon;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// Clipped surrogate `min(ratio·A, clamp(ratio, 1−ε, 1+ε)·A)`.
pub fn surrogate_term(ratio: f64, advantage: f64, clip_epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
    (ratio * advantage).min(clipped * advantage)
}

/// Derivative of [`surrogate_term`] with respect to the ratio.
fn surrogate_ratio_derivative(ratio: f64, advantage: f64, clip_epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
    if ratio * advantage <= clipped * advantage || clipped == ratio {
        advantage
    } else {
        0.0
    }
}

/// Exact `KL(p ‖ q) = Σ p_i ln(p_i / q_i)` with `0 · ln(0/q) = 0`.
pub fn kl_categorical(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::SupportMismatch(p.len(), q.len()));
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi <= 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Err(Error::UnboundedKl(i));
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl.max(0.0))
}

/// A parametric categorical policy. Parameters live outside the policy so
/// that current and reference snapshots can share one implementation.
pub trait Policy {
    type Observation;

    fn num_params(&self) -> usize;

    fn action_distribution(&self, obs: &Self::Observation, params: &[f64]) -> Vec<f64>;

    fn log_prob(&self, action: usize, obs: &Self::Observation, params: &[f64]) -> f64 {
        self.action_distribution(obs, params)[action].ln()
    }

    fn grad_log_prob(&self, action: usize, obs: &Self::Observation, params: &[f64]) -> Vec<f64>;

    fn sample<R: Rng + ?Sized>(&self, obs: &Self::Observation, params: &[f64], rng: &mut R) -> usize {
        let dist = self.action_distribution(obs, params);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, p) in dist.iter().enumerate() {
            acc += p;
            if u < acc {
                return a;
            }
        }
        dist.len() - 1
    }

    /// Gradient of `KL(π_params(·|obs) ‖ π_ref(·|obs))` with respect to `params`.
    ///
    /// Uses `∇KL = Σ_a π_a ∇ln π_a · ln(π_a / q_a)`, which holds because
    /// `Σ_a ∇π_a = 0`.
    fn grad_kl(&self, obs: &Self::Observation, params: &[f64], ref_params: &[f64]) -> Vec<f64> {
        let p = self.action_distribution(obs, params);
        let q = self.action_distribution(obs, ref_params);
        let mut grad = vec![0.0; self.num_params()];
        for (a, (&pa, &qa)) in p.iter().zip(&q).enumerate() {
            if pa <= 0.0 {
                continue;
            }
            let w = pa * (pa / qa).ln();
            for (g, d) in grad.iter_mut().zip(self.grad_log_prob(a, obs, params)) {
                *g += w * d;
            }
        }
        grad
    }
}

/// Result of executing one action in an environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub response_text: String,
    pub reward: f64,
    pub label: JudgmentLabel,
    pub attempted: bool,
}

/// Turns sampled actions into responses and rewards.
pub trait RolloutEnv {
    type Prompt;
    type Observation;

    fn prompt_id(&self, prompt: &Self::Prompt) -> String;

    fn observe(&self, prompt: &Self::Prompt) -> Self::Observation;

    fn execute<R: Rng + ?Sized>(
        &self,
        prompt: &Self::Prompt,
        action: usize,
        rollout_id: &str,
        rng: &mut R,
    ) -> Result<Outcome>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub prompt_id: String,
    pub group_id: String,
    pub action: usize,
    pub response_text: String,
    pub reward: f64,
    pub old_log_prob: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub prompt_id: String,
    pub rollouts: Vec<Rollout>,
}

impl RolloutGroup {
    pub fn new(prompt_id: String, rollouts: Vec<Rollout>) -> Result<Self> {
        if rollouts.len() < 2 {
            return Err(Error::DegenerateGroup(rollouts.len()));
        }
        if rollouts.iter().any(|r| r.prompt_id != prompt_id) {
            return Err(Error::Invalid(format!(
                "rollout group {prompt_id} mixes prompts"
            )));
        }
        Ok(Self { prompt_id, rollouts })
    }

    /// Fills each rollout's advantage from the group's rewards.
    pub fn assign_advantages(&mut self, std_epsilon: f64) -> Result<()> {
        let rewards: Vec<f64> = self.rollouts.iter().map(|r| r.reward).collect();
        for (r, a) in self.rollouts.iter_mut().zip(compute_advantages(&rewards, std_epsilon)?) {
            r.advantage = a;
        }
        Ok(())
    }

    pub fn is_zero_variance(&self) -> bool {
        let first = self.rollouts[0].reward;
        self.rollouts.iter().all(|r| r.reward == first)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefRefresh {
    Never,
    #[default]
    PerStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_coef: f64,
    pub std_epsilon: f64,
    pub learning_rate: f64,
    /// Overrides every stage's step count when set.
    pub steps_per_stage: Option<usize>,
    pub prompts_per_step: usize,
    /// Set from the run's master seed, never read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub ref_refresh: RefRefresh,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_epsilon: 0.2,
            kl_coef: 0.04,
            std_epsilon: 1e-8,
            learning_rate: 0.1,
            steps_per_stage: None,
            prompts_per_step: 16,
            seed: 0,
            ref_refresh: RefRefresh::PerStage,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |f: &str| format!("{prefix}.{f}");
        if self.group_size < 2 {
            return Err(Error::config(field("group_size"), "must be >= 2"));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::config(field("clip_epsilon"), "must lie in (0, 1)"));
        }
        if !(self.kl_coef >= 0.0 && self.kl_coef.is_finite()) {
            return Err(Error::config(field("kl_coef"), "must be >= 0"));
        }
        if !(self.std_epsilon >= 0.0 && self.std_epsilon.is_finite()) {
            return Err(Error::config(field("std_epsilon"), "must be >= 0"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(field("learning_rate"), "must be > 0"));
        }
        if self.prompts_per_step < 1 {
            return Err(Error::config(field("prompts_per_step"), "must be >= 1"));
        }
        Ok(())
    }
}

/// Per-step training statistics; one JSONL line of the training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub mean_reward: f64,
    pub attempt_rate: f64,
    pub abstain_rate: f64,
    pub perfect_rate: f64,
    pub missing_rate: f64,
    pub incorrect_rate: f64,
    /// Mean |∂/∂θ| of the full objective (surrogate minus KL penalty).
    pub mean_abs_gradient: f64,
    /// Mean |∂/∂θ| of the surrogate term alone.
    pub mean_abs_surrogate_gradient: f64,
    pub mean_kl: f64,
    pub zero_variance_groups: f64,
}

/// One ascent step: sample `group_size` rollouts per prompt, normalize
/// rewards per group, and move `params` along the objective gradient.
///
/// Rollouts are generated and reduced in prompt-then-rollout order, so the
/// result depends only on the inputs and the RNG state.
pub fn train_step<P, E, R>(
    policy: &P,
    params: &[f64],
    ref_params: &[f64],
    prompts: &[E::Prompt],
    env: &E,
    cfg: &TrainerConfig,
    rng: &mut R,
) -> Result<(Vec<f64>, StepStats)>
where
    P: Policy,
    E: RolloutEnv<Observation = P::Observation>,
    R: Rng + ?Sized,
{
    if prompts.is_empty() {
        return Err(Error::Invalid("train_step needs at least one prompt".into()));
    }
    let dim = policy.num_params();
    let g = cfg.group_size;
    let mut surrogate_grad = vec![0.0; dim];
    let mut kl_grad = vec![0.0; dim];
    let mut kl_sum = 0.0;
    let mut reward_sum = 0.0;
    let mut attempts = 0usize;
    let mut label_counts = [0usize; 3];
    let mut zero_var = 0usize;

    for (pi, prompt) in prompts.iter().enumerate() {
        let obs = env.observe(prompt);
        let prompt_id = env.prompt_id(prompt);
        let group_id = format!("s{pi}");
        let mut rollouts = Vec::with_capacity(g);
        for k in 0..g {
            let action = policy.sample(&obs, params, rng);
            let rollout_id = format!("{group_id}/{prompt_id}/{k}");
            let outcome = env.execute(prompt, action, &rollout_id, rng)?;
            if outcome.attempted {
                attempts += 1;
            }
            match outcome.label {
                JudgmentLabel::Perfect | JudgmentLabel::Acceptable => label_counts[0] += 1,
                JudgmentLabel::Missing => label_counts[1] += 1,
                JudgmentLabel::Incorrect => label_counts[2] += 1,
            }
            reward_sum += outcome.reward;
            rollouts.push(Rollout {
                prompt_id: prompt_id.clone(),
                group_id: group_id.clone(),
                action,
                response_text: outcome.response_text,
                reward: outcome.reward,
                old_log_prob: policy.log_prob(action, &obs, params),
                advantage: 0.0,
            });
        }
        let mut group = RolloutGroup::new(prompt_id, rollouts)?;
        if group.is_zero_variance() {
            zero_var += 1;
        }
        group.assign_advantages(cfg.std_epsilon)?;

        for r in &group.rollouts {
            if r.advantage == 0.0 {
                continue;
            }
            let ratio = (policy.log_prob(r.action, &obs, params) - r.old_log_prob).exp();
            let d = surrogate_ratio_derivative(ratio, r.advantage, cfg.clip_epsilon) * ratio;
            if d == 0.0 {
                continue;
            }
            for (acc, gl) in surrogate_grad.iter_mut().zip(policy.grad_log_prob(r.action, &obs, params)) {
                *acc += d * gl;
            }
        }

        if cfg.kl_coef > 0.0 {
            let p = policy.action_distribution(&obs, params);
            let q = policy.action_distribution(&obs, ref_params);
            kl_sum += kl_categorical(&p, &q)?;
            for (acc, gk) in kl_grad.iter_mut().zip(policy.grad_kl(&obs, params, ref_params)) {
                *acc += gk;
            }
        }
    }

    let n_prompts = prompts.len() as f64;
    let n_rollouts = n_prompts * g as f64;
    let mut grad = Vec::with_capacity(dim);
    let mut surr_abs = 0.0;
    let mut total_abs = 0.0;
    for (s, k) in surrogate_grad.iter().zip(&kl_grad) {
        let s = s / n_rollouts;
        let total = s - cfg.kl_coef * k / n_prompts;
        surr_abs += s.abs();
        total_abs += total.abs();
        grad.push(total);
    }
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient {
            step: 0,
            dump: format!("params={params:?} ref={ref_params:?} grad={grad:?}"),
        });
    }
    let new_params: Vec<f64> = params
        .iter()
        .zip(&grad)
        .map(|(p, g)| p + cfg.learning_rate * g)
        .collect();

    let stats = StepStats {
        mean_reward: reward_sum / n_rollouts,
        attempt_rate: attempts as f64 / n_rollouts,
        abstain_rate: 1.0 - attempts as f64 / n_rollouts,
        perfect_rate: label_counts[0] as f64 / n_rollouts,
        missing_rate: label_counts[1] as f64 / n_rollouts,
        incorrect_rate: label_counts[2] as f64 / n_rollouts,
        mean_abs_gradient: total_abs / dim as f64,
        mean_abs_surrogate_gradient: surr_abs / dim as f64,
        mean_kl: if cfg.kl_coef > 0.0 { kl_sum / n_prompts } else { 0.0 },
        zero_variance_groups: zero_var as f64 / n_prompts,
    };
    Ok((new_params, stats))
}
