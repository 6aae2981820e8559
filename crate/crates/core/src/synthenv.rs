//! Synthetic abstention QA environment.
//!
//! Each question has a latent competence `p` (probability that an attempted
//! answer is judged Perfect) and an observable feature
//! `x = logit(p) + N(0, obs_noise²)`. A [`ThresholdPolicy`] attempts with
//! probability `σ(w·x + b)`; attempts produce a well-formed structured answer
//! and abstentions a structured refusal. Rewards go through the regular
//! reward path ([`crate::rewards::composite_reward`] with the built-in judge).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::curriculum::{DifficultyLabel, Sample};
use crate::eval::{BuiltinJudge, EvalConfig, JudgmentLabel};
use crate::grpo::{Outcome, Policy, RolloutEnv};
use crate::rewards::{composite_reward, format_structured, RewardConfig};
use crate::{Error, Result};

const COMPETENCE_CLAMP: f64 = 1e-6;
/// Offset mixed into the master seed for the held-out pool.
const HELDOUT_SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

pub const ABSTAIN: usize = 0;
pub const ATTEMPT: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticQuestion {
    pub id: String,
    pub competence: f64,
    pub feature: f64,
    pub ground_truth: String,
    pub pool: DifficultyLabel,
}

impl SyntheticQuestion {
    pub fn new(id: impl Into<String>, competence: f64, feature: f64, pool: DifficultyLabel) -> Self {
        let id = id.into();
        Self {
            ground_truth: format!("ans-{id}"),
            id,
            competence,
            feature,
            pool,
        }
    }

    /// Question with a noise-free feature `logit(p)`.
    pub fn noiseless(id: impl Into<String>, competence: f64, pool: DifficultyLabel) -> Self {
        Self::new(id, competence, logit(competence), pool)
    }

    pub fn decoy(&self) -> String {
        format!("decoy-{}", self.id)
    }

    pub fn to_sample(&self) -> Sample {
        Sample {
            id: self.id.clone(),
            question: format!("synthetic question {}", self.id),
            ground_truth: self.ground_truth.clone(),
            difficulty: Some(self.pool),
            competence: Some(self.competence),
            feature: Some(self.feature),
        }
    }

    pub fn from_sample(sample: &Sample) -> Result<Self> {
        let missing = |f: &str| Error::Invalid(format!("sample {} lacks `{f}`", sample.id));
        let competence = sample.competence.ok_or_else(|| missing("competence"))?;
        if !(0.0..=1.0).contains(&competence) {
            return Err(Error::Invalid(format!(
                "sample {} has competence {competence} outside [0, 1]",
                sample.id
            )));
        }
        let feature = sample.feature.unwrap_or_else(|| logit(competence));
        if !feature.is_finite() {
            return Err(Error::Invalid(format!("sample {} has a non-finite feature", sample.id)));
        }
        Ok(Self {
            id: sample.id.clone(),
            competence,
            feature,
            ground_truth: sample.ground_truth.clone(),
            pool: sample.difficulty.ok_or_else(|| missing("difficulty"))?,
        })
    }
}

/// `ln(p / (1 − p))` with `p` clamped to `[1e-6, 1 − 1e-6]`.
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(COMPETENCE_CLAMP, 1.0 - COMPETENCE_CLAMP);
    (p / (1.0 - p)).ln()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaParams {
    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub easy_competence: BetaParams,
    pub hard_competence: BetaParams,
    pub obs_noise: f64,
    pub easy_pool_size: usize,
    pub hard_pool_size: usize,
    pub heldout_easy_size: usize,
    pub heldout_hard_size: usize,
    /// Set from the run's master seed, never read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            easy_competence: BetaParams { alpha: 8.0, beta: 2.0 },
            hard_competence: BetaParams { alpha: 2.0, beta: 8.0 },
            obs_noise: 0.5,
            easy_pool_size: 1300,
            hard_pool_size: 2600,
            heldout_easy_size: 1000,
            heldout_hard_size: 2000,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |f: &str| format!("{prefix}.{f}");
        for (name, b) in [("easy_competence", self.easy_competence), ("hard_competence", self.hard_competence)] {
            if !(b.alpha > 0.0 && b.beta > 0.0 && b.alpha.is_finite() && b.beta.is_finite()) {
                return Err(Error::config(field(name), "alpha and beta must be positive"));
            }
        }
        if !(self.obs_noise >= 0.0 && self.obs_noise.is_finite()) {
            return Err(Error::config(field("obs_noise"), "must be >= 0"));
        }
        for (name, n) in [
            ("easy_pool_size", self.easy_pool_size),
            ("hard_pool_size", self.hard_pool_size),
            ("heldout_easy_size", self.heldout_easy_size),
            ("heldout_hard_size", self.heldout_hard_size),
        ] {
            if n < 1 {
                return Err(Error::config(field(name), "must be >= 1"));
            }
        }
        Ok(())
    }
}

fn draw_pool<R: Rng>(
    prefix: &str,
    tag: DifficultyLabel,
    dist: BetaParams,
    n: usize,
    obs_noise: f64,
    rng: &mut R,
) -> Vec<SyntheticQuestion> {
    let beta = Beta::new(dist.alpha, dist.beta).expect("validated beta parameters");
    let noise = Normal::new(0.0, obs_noise).expect("validated noise");
    (0..n)
        .map(|i| {
            let p = beta.sample(rng);
            let eps = if obs_noise > 0.0 { noise.sample(rng) } else { 0.0 };
            SyntheticQuestion::new(format!("{prefix}{i:05}"), p, logit(p) + eps, tag)
        })
        .collect()
}

/// Training pools (easy, hard), deterministic in `cfg.seed`.
pub fn generate_pools(cfg: &EnvConfig) -> (Vec<SyntheticQuestion>, Vec<SyntheticQuestion>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let easy = draw_pool("e", DifficultyLabel::Easy, cfg.easy_competence, cfg.easy_pool_size, cfg.obs_noise, &mut rng);
    let hard = draw_pool("h", DifficultyLabel::Hard, cfg.hard_competence, cfg.hard_pool_size, cfg.obs_noise, &mut rng);
    (easy, hard)
}

/// Held-out evaluation pool drawn from an independent stream; ids never
/// collide with the training pools.
pub fn generate_heldout(cfg: &EnvConfig) -> Vec<SyntheticQuestion> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ HELDOUT_SEED_MIX);
    let mut pool = draw_pool("te", DifficultyLabel::Easy, cfg.easy_competence, cfg.heldout_easy_size, cfg.obs_noise, &mut rng);
    pool.extend(draw_pool("th", DifficultyLabel::Hard, cfg.hard_competence, cfg.heldout_hard_size, cfg.obs_noise, &mut rng));
    pool
}

/// Attempt/abstain policy with attempt probability `σ(w·x + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdPolicy {
    pub w: f64,
    pub b: f64,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        Self { w: 0.0, b: 0.0 }
    }
}

impl ThresholdPolicy {
    pub fn new(w: f64, b: f64) -> Self {
        Self { w, b }
    }

    pub fn from_params(params: &[f64]) -> Self {
        Self { w: params[0], b: params[1] }
    }

    pub fn params(&self) -> Vec<f64> {
        vec![self.w, self.b]
    }

    pub fn attempt_probability(&self, feature: f64) -> f64 {
        sigmoid(self.w * feature + self.b)
    }
}

/// The [`ThresholdPolicy`] family as a two-action categorical policy over
/// parameters `[w, b]`. Action 0 abstains, action 1 attempts.
#[derive(Debug, Clone, Copy, Default)]
pub struct AttemptPolicy;

impl Policy for AttemptPolicy {
    type Observation = f64;

    fn num_params(&self) -> usize {
        2
    }

    fn action_distribution(&self, x: &f64, params: &[f64]) -> Vec<f64> {
        let z = params[0] * x + params[1];
        vec![sigmoid(-z), sigmoid(z)]
    }

    fn log_prob(&self, action: usize, x: &f64, params: &[f64]) -> f64 {
        let z = params[0] * x + params[1];
        if action == ATTEMPT {
            -softplus(-z)
        } else {
            -softplus(z)
        }
    }

    fn grad_log_prob(&self, action: usize, x: &f64, params: &[f64]) -> Vec<f64> {
        let z = params[0] * x + params[1];
        let dz = if action == ATTEMPT { sigmoid(-z) } else { -sigmoid(z) };
        vec![dz * x, dz]
    }
}

/// Reference responses used by the environment.
pub const REFUSAL_ANSWER: &str = "I don't know";

/// Environment that scores synthetic rollouts through the reward module.
#[derive(Debug, Clone, Default)]
pub struct SyntheticEnv {
    pub reward: RewardConfig,
    judge: BuiltinJudge,
}

impl SyntheticEnv {
    pub fn new(reward: RewardConfig, eval: EvalConfig) -> Self {
        Self {
            reward,
            judge: BuiltinJudge::new(eval),
        }
    }
}

impl RolloutEnv for SyntheticEnv {
    type Prompt = SyntheticQuestion;
    type Observation = f64;

    fn prompt_id(&self, q: &SyntheticQuestion) -> String {
        q.id.clone()
    }

    fn observe(&self, q: &SyntheticQuestion) -> f64 {
        q.feature
    }

    fn execute<R: Rng + ?Sized>(
        &self,
        q: &SyntheticQuestion,
        action: usize,
        rollout_id: &str,
        rng: &mut R,
    ) -> Result<Outcome> {
        let attempted = action == ATTEMPT;
        let response_text = if attempted {
            let correct = rng.random::<f64>() < q.competence;
            let answer = if correct { q.ground_truth.clone() } else { q.decoy() };
            format_structured("recalled an answer", &answer)
        } else {
            format_structured("not confident enough to answer", REFUSAL_ANSWER)
        };
        let question = format!("synthetic question {}", q.id);
        let (reward, label) = composite_reward(
            &response_text,
            &question,
            &q.ground_truth,
            &self.judge,
            &self.reward,
            rollout_id,
        )?;
        Ok(Outcome {
            response_text,
            reward: reward.total,
            label,
            attempted,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRollout {
    pub action: usize,
    pub response_text: String,
    pub label: JudgmentLabel,
}

/// Samples one attempt/abstain decision and its judged outcome.
pub fn rollout<R: Rng + ?Sized>(
    question: &SyntheticQuestion,
    policy: &ThresholdPolicy,
    rng: &mut R,
) -> SyntheticRollout {
    let action = AttemptPolicy.sample(&question.feature, &policy.params(), rng);
    let outcome = SyntheticEnv::default()
        .execute(question, action, &question.id, rng)
        .expect("built-in judge cannot fail");
    SyntheticRollout {
        action,
        response_text: outcome.response_text,
        label: outcome.label,
    }
}

/// Exact expected truthfulness `(1/N) Σ σ(w·x + b)(2p − 1)`.
pub fn expected_policy_truthfulness(policy: &ThresholdPolicy, pool: &[SyntheticQuestion]) -> f64 {
    if pool.is_empty() {
        return 0.0;
    }
    pool.iter()
        .map(|q| policy.attempt_probability(q.feature) * (2.0 * q.competence - 1.0))
        .sum::<f64>()
        / pool.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdOracle {
    /// Centre of the first run of grid thresholds attaining the best value.
    pub threshold: f64,
    pub value: f64,
    /// `Σ max(0, 2p − 1) / N`: the value of a policy that sees `p` itself.
    pub informed_upper_bound: f64,
}

/// Grid search over deterministic policies "attempt iff x ≥ t".
///
/// The grid spans the observed feature range at `resolution`, plus one point
/// above the maximum (attempt nothing, value 0).
pub fn oracle_threshold_truthfulness(pool: &[SyntheticQuestion], resolution: f64) -> Result<ThresholdOracle> {
    if pool.is_empty() {
        return Err(Error::Invalid("oracle needs a non-empty pool".into()));
    }
    if resolution.is_nan() || resolution <= 0.0 {
        return Err(Error::Invalid("grid resolution must be positive".into()));
    }
    let n = pool.len() as f64;
    let mut sorted: Vec<(f64, f64)> = pool.iter().map(|q| (q.feature, 2.0 * q.competence - 1.0)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // suffix[i] = Σ_{j ≥ i} (2p_j − 1)
    let mut suffix = vec![0.0; sorted.len() + 1];
    for i in (0..sorted.len()).rev() {
        suffix[i] = suffix[i + 1] + sorted[i].1;
    }
    let lo = sorted[0].0;
    let hi = sorted[sorted.len() - 1].0;
    let steps = ((hi - lo) / resolution).ceil() as usize + 1;

    let mut best = f64::NEG_INFINITY;
    let mut run: Option<(f64, f64)> = None;
    let mut run_open = false;
    for k in 0..=steps {
        let t = lo + k as f64 * resolution;
        let idx = sorted.partition_point(|(x, _)| *x < t);
        let value = suffix[idx] / n;
        if value > best + 1e-15 {
            best = value;
            run = Some((t, t));
            run_open = true;
        } else if run_open && (value - best).abs() <= 1e-15 {
            if let Some((start, _)) = run {
                run = Some((start, t));
            }
        } else {
            run_open = false;
        }
    }
    let (start, end) = run.expect("grid has at least one point");
    let informed = pool.iter().map(|q| (2.0 * q.competence - 1.0).max(0.0)).sum::<f64>() / n;
    Ok(ThresholdOracle {
        threshold: 0.5 * (start + end),
        value: best,
        informed_upper_bound: informed,
    })
}
