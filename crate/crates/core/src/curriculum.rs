//! Easy/hard difficulty labeling and the staged easy→hard training schedule.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::{aggregate_metrics, Conversation, EvalConfig, Judge, JudgeRequest, JudgmentLabel, MetricsReport, Turn};
use crate::grpo::{train_step, Policy, RefRefresh, RolloutEnv, StepStats, TrainerConfig};
use crate::jsonl::read_jsonl;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DifficultyLabel {
    Easy,
    Hard,
}

/// One pool record. Synthetic samples also carry `competence` and `feature`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    pub question: String,
    pub ground_truth: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<DifficultyLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub competence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<f64>,
}

/// Produces the reference model's response to a sample.
pub trait ReferenceAnswerer {
    fn answer(&self, sample: &Sample) -> Result<String>;
}

#[derive(Debug, Clone, Deserialize)]
struct FixtureAnswer {
    id: String,
    response: String,
}

/// Precomputed reference responses keyed by sample id.
#[derive(Debug, Clone, Default)]
pub struct FixtureAnswerer {
    answers: HashMap<String, String>,
}

impl FixtureAnswerer {
    pub fn new(answers: HashMap<String, String>) -> Self {
        Self { answers }
    }

    /// Loads `{id, response}` JSONL records.
    pub fn load(path: &Path) -> Result<Self> {
        let records: Vec<FixtureAnswer> = read_jsonl(path)?;
        Ok(Self::new(records.into_iter().map(|r| (r.id, r.response)).collect()))
    }
}

impl ReferenceAnswerer for FixtureAnswerer {
    fn answer(&self, sample: &Sample) -> Result<String> {
        self.answers.get(&sample.id).cloned().ok_or_else(|| {
            Error::Invalid(format!(
                "reference answerer unavailable: no fixture response for sample {}",
                sample.id
            ))
        })
    }
}

/// Answers a synthetic sample correctly with probability equal to its
/// competence. Each sample gets its own stream derived from the seed and
/// the sample id, so labels do not depend on iteration order.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticOracleAnswerer {
    pub seed: u64,
}

impl ReferenceAnswerer for SyntheticOracleAnswerer {
    fn answer(&self, sample: &Sample) -> Result<String> {
        let p = sample.competence.ok_or_else(|| {
            Error::Invalid(format!("sample {} has no competence for the synthetic oracle", sample.id))
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(sample.id.as_bytes()));
        if rng.random::<f64>() < p {
            Ok(sample.ground_truth.clone())
        } else {
            Ok(format!("decoy-{}", sample.id))
        }
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Easy iff the judge rates the reference response Perfect.
pub fn label_difficulty(sample: &Sample, answerer: &dyn ReferenceAnswerer, judge: &dyn Judge) -> Result<DifficultyLabel> {
    let response = answerer.answer(sample)?;
    let label = judge.judge(&JudgeRequest {
        question: sample.question.clone(),
        ground_truth: sample.ground_truth.clone(),
        response,
    })?;
    Ok(if label == JudgmentLabel::Perfect {
        DifficultyLabel::Easy
    } else {
        DifficultyLabel::Hard
    })
}

/// Labels every sample and splits them into (easy, hard) pools.
pub fn label_pool(
    samples: &[Sample],
    answerer: &dyn ReferenceAnswerer,
    judge: &dyn Judge,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if samples.is_empty() {
        return Err(Error::Invalid("no samples to label".into()));
    }
    let mut easy = Vec::new();
    let mut hard = Vec::new();
    for s in samples {
        let label = label_difficulty(s, answerer, judge)?;
        let mut labeled = s.clone();
        labeled.difficulty = Some(label);
        match label {
            DifficultyLabel::Easy => easy.push(labeled),
            DifficultyLabel::Hard => hard.push(labeled),
        }
    }
    Ok((easy, hard))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: String,
    pub easy_parts: u32,
    pub hard_parts: u32,
    pub steps: usize,
}

impl StageConfig {
    pub fn new(name: impl Into<String>, easy_parts: u32, hard_parts: u32, steps: usize) -> Self {
        Self {
            name: name.into(),
            easy_parts,
            hard_parts,
            steps,
        }
    }

    pub fn easy_fraction(&self) -> f64 {
        self.easy_parts as f64 / (self.easy_parts + self.hard_parts) as f64
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.easy_parts + self.hard_parts < 1 {
            return Err(Error::config(format!("{prefix}.easy_parts"), "easy_parts + hard_parts must be >= 1"));
        }
        if self.steps < 1 {
            return Err(Error::config(format!("{prefix}.steps"), "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub stages: Vec<StageConfig>,
}

impl Default for Schedule {
    /// Easy only, then 1:1, then the 1:2 easy:hard mix.
    fn default() -> Self {
        Self::with_steps(200)
    }
}

impl Schedule {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            stages: vec![
                StageConfig::new("stage1", 1, 0, steps),
                StageConfig::new("stage2", 1, 1, steps),
                StageConfig::new("stage3", 1, 2, steps),
            ],
        }
    }

    pub fn single(stage: StageConfig) -> Self {
        Self { stages: vec![stage] }
    }

    pub fn reversed(&self) -> Self {
        Self {
            stages: self.stages.iter().rev().cloned().collect(),
        }
    }

    pub fn total_steps(&self) -> usize {
        self.stages.iter().map(|s| s.steps).sum()
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config(format!("{prefix}.stages"), "schedule must have at least one stage"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.validate(&format!("{prefix}.stages[{i}]"))?;
        }
        Ok(())
    }
}

/// Draws `batch_size` items: each slot picks the easy pool with probability
/// `easy_parts / (easy_parts + hard_parts)`, then a uniform item (with
/// replacement) from the chosen pool.
pub fn stage_sampler<T: Clone, R: Rng + ?Sized>(
    easy: &[T],
    hard: &[T],
    stage: &StageConfig,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<T>> {
    if stage.easy_parts + stage.hard_parts == 0 {
        return Err(Error::Invalid(format!("stage {} has no mixing weight", stage.name)));
    }
    if stage.easy_parts > 0 && easy.is_empty() {
        return Err(Error::EmptyPool("easy"));
    }
    if stage.hard_parts > 0 && hard.is_empty() {
        return Err(Error::EmptyPool("hard"));
    }
    let frac = stage.easy_fraction();
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let from_easy = if stage.hard_parts == 0 {
            true
        } else if stage.easy_parts == 0 {
            false
        } else {
            rng.random::<f64>() < frac
        };
        let pool = if from_easy { easy } else { hard };
        out.push(pool[rng.random_range(0..pool.len())].clone());
    }
    Ok(out)
}

/// Monte-Carlo evaluation: `rollouts_per_prompt` judged single-turn rollouts
/// per prompt, aggregated with [`aggregate_metrics`].
pub fn monte_carlo_metrics<P, E, R>(
    policy: &P,
    params: &[f64],
    env: &E,
    prompts: &[E::Prompt],
    rollouts_per_prompt: usize,
    eval: &EvalConfig,
    rng: &mut R,
) -> Result<MetricsReport>
where
    P: Policy,
    E: RolloutEnv<Observation = P::Observation>,
    R: Rng + ?Sized,
{
    let mut items = Vec::with_capacity(prompts.len() * rollouts_per_prompt);
    for prompt in prompts {
        let obs = env.observe(prompt);
        let id = env.prompt_id(prompt);
        for k in 0..rollouts_per_prompt {
            let action = policy.sample(&obs, params, rng);
            let rid = format!("eval/{id}/{k}");
            let outcome = env.execute(prompt, action, &rid, rng)?;
            items.push(Conversation::new(
                rid,
                vec![Turn {
                    question_id: id.clone(),
                    response: outcome.response_text,
                    label: outcome.label,
                }],
            ));
        }
    }
    aggregate_metrics(&items, eval)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub rollouts_per_prompt: usize,
    pub eval: EvalConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            rollouts_per_prompt: 4,
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSnapshot {
    pub name: String,
    pub steps: usize,
    pub metrics: MetricsReport,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub stage: String,
    pub step: usize,
    #[serde(flatten)]
    pub stats: StepStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleOutcome {
    pub initial: StageSnapshot,
    pub stages: Vec<StageSnapshot>,
    pub trace: Vec<TraceRecord>,
}

impl ScheduleOutcome {
    pub fn final_params(&self) -> &[f64] {
        self.stages.last().map(|s| s.params.as_slice()).unwrap_or(&self.initial.params)
    }
}

/// Pools handed to [`run_schedule`].
pub struct Pools<'a, T> {
    pub easy: &'a [T],
    pub hard: &'a [T],
    pub eval: &'a [T],
}

/// Runs every stage in order, carrying parameters across stages.
///
/// Training draws from one RNG seeded with `trainer.seed`; each evaluation
/// uses its own stream derived from the seed and stage index, so snapshots
/// never perturb the training trajectory.
pub fn run_schedule<P, E>(
    policy: &P,
    env: &E,
    init_params: &[f64],
    pools: Pools<'_, E::Prompt>,
    schedule: &Schedule,
    trainer: &TrainerConfig,
    eval: &EvalOptions,
) -> Result<ScheduleOutcome>
where
    P: Policy,
    E: RolloutEnv<Observation = P::Observation>,
    E::Prompt: Clone,
{
    if init_params.len() != policy.num_params() {
        return Err(Error::Invalid(format!(
            "policy expects {} parameters, got {}",
            policy.num_params(),
            init_params.len()
        )));
    }
    let train_ids: HashSet<String> = pools.easy.iter().chain(pools.hard).map(|p| env.prompt_id(p)).collect();
    if let Some(p) = pools.eval.iter().find(|p| train_ids.contains(&env.prompt_id(p))) {
        return Err(Error::Invalid(format!(
            "evaluation prompt {} also appears in a training pool",
            env.prompt_id(p)
        )));
    }
    if pools.eval.is_empty() {
        return Err(Error::EmptyPool("evaluation"));
    }

    let evaluate = |params: &[f64], index: u64| -> Result<MetricsReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(trainer.seed ^ 0x5EED_E7A1 ^ index.wrapping_mul(0x9E37_79B9));
        monte_carlo_metrics(policy, params, env, pools.eval, eval.rollouts_per_prompt, &eval.eval, &mut rng)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(trainer.seed);
    let mut params = init_params.to_vec();
    let mut ref_params = init_params.to_vec();
    let initial = StageSnapshot {
        name: "initial".into(),
        steps: 0,
        metrics: evaluate(&params, 0)?,
        params: params.clone(),
    };
    let mut stages = Vec::with_capacity(schedule.stages.len());
    let mut trace = Vec::new();
    let mut global_step = 0usize;
    for (si, stage) in schedule.stages.iter().enumerate() {
        if trainer.ref_refresh == RefRefresh::PerStage {
            ref_params = params.clone();
        }
        let steps = trainer.steps_per_stage.unwrap_or(stage.steps);
        for _ in 0..steps {
            let prompts = stage_sampler(pools.easy, pools.hard, stage, trainer.prompts_per_step, &mut rng)?;
            let (next, stats) = train_step(policy, &params, &ref_params, &prompts, env, trainer, &mut rng)
                .map_err(|e| match e {
                    Error::NonFiniteGradient { dump, .. } => Error::NonFiniteGradient {
                        step: global_step as u64,
                        dump: format!("stage {}: {dump}", stage.name),
                    },
                    other => other,
                })?;
            params = next;
            trace.push(TraceRecord {
                stage: stage.name.clone(),
                step: global_step,
                stats,
            });
            global_step += 1;
        }
        stages.push(StageSnapshot {
            name: stage.name.clone(),
            steps,
            metrics: evaluate(&params, si as u64 + 1)?,
            params: params.clone(),
        });
    }
    Ok(ScheduleOutcome { initial, stages, trace })
}
