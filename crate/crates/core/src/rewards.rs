//! Structured response parsing and the composite format + answer reward.

use serde::{Deserialize, Serialize};

use crate::eval::{Judge, JudgeRequest, JudgmentLabel};
use crate::{Error, Result};

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";
const TAGS: [&str; 4] = [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE];

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StructuredResponse {
    pub think: String,
    pub answer: String,
    pub well_formed: bool,
}

/// Parses `<think>…</think><answer>…</answer>`. Only whitespace may appear
/// outside the two blocks; each block must occur exactly once.
pub fn parse_structured_response(text: &str) -> StructuredResponse {
    try_parse(text).unwrap_or_default()
}

fn try_parse(text: &str) -> Option<StructuredResponse> {
    let rest = text.trim().strip_prefix(THINK_OPEN)?;
    let close = rest.find(THINK_CLOSE)?;
    let think = &rest[..close];
    let rest = rest[close + THINK_CLOSE.len()..].trim_start();
    let inner = rest.strip_prefix(ANSWER_OPEN)?.strip_suffix(ANSWER_CLOSE)?;
    if contains_tag(think) || contains_tag(inner) {
        return None;
    }
    Some(StructuredResponse {
        think: think.to_string(),
        answer: inner.to_string(),
        well_formed: true,
    })
}

fn contains_tag(s: &str) -> bool {
    TAGS.iter().any(|t| s.contains(t))
}

/// Wraps a reasoning trace and an answer in the structured format.
pub fn format_structured(think: &str, answer: &str) -> String {
    format!("{THINK_OPEN}{think}{THINK_CLOSE}{ANSWER_OPEN}{answer}{ANSWER_CLOSE}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub format_weight: f64,
    pub answer_weight: f64,
    pub acceptable_reward: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            format_weight: 0.5,
            answer_weight: 1.0,
            acceptable_reward: 0.5,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(self.format_weight >= 0.0 && self.format_weight.is_finite()) {
            return Err(Error::config(format!("{prefix}.format_weight"), "must be >= 0"));
        }
        if !(self.answer_weight > 0.0 && self.answer_weight.is_finite()) {
            return Err(Error::config(format!("{prefix}.answer_weight"), "must be > 0"));
        }
        if !self.acceptable_reward.is_finite() {
            return Err(Error::config(
                format!("{prefix}.acceptable_reward"),
                "must be finite",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format_reward: f64,
    pub answer_reward: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn new(format_reward: f64, answer_reward: f64, cfg: &RewardConfig) -> Self {
        Self {
            format_reward,
            answer_reward,
            total: cfg.format_weight * format_reward + cfg.answer_weight * answer_reward,
        }
    }
}

pub fn format_reward(text: &str) -> f64 {
    if parse_structured_response(text).well_formed {
        1.0
    } else {
        0.0
    }
}

pub fn answer_reward(label: JudgmentLabel, cfg: &RewardConfig) -> f64 {
    match label {
        JudgmentLabel::Perfect => 1.0,
        JudgmentLabel::Acceptable => cfg.acceptable_reward,
        JudgmentLabel::Missing => 0.0,
        JudgmentLabel::Incorrect => -1.0,
    }
}

/// Scores one rollout. The answer block is judged when the response is well
/// formed; otherwise the raw text is judged, so abstaining by breaking the
/// format earns no special treatment.
pub fn composite_reward(
    text: &str,
    question: &str,
    ground_truth: &str,
    judge: &dyn Judge,
    cfg: &RewardConfig,
    rollout_id: &str,
) -> Result<(RewardBreakdown, JudgmentLabel)> {
    let parsed = parse_structured_response(text);
    let judged = if parsed.well_formed { parsed.answer.as_str() } else { text };
    let label = judge
        .judge(&JudgeRequest {
            question: question.to_string(),
            ground_truth: ground_truth.to_string(),
            response: judged.to_string(),
        })
        .map_err(|e| Error::service(format!("rollout {rollout_id}"), e.to_string()))?;
    let fmt = if parsed.well_formed { 1.0 } else { 0.0 };
    Ok((RewardBreakdown::new(fmt, answer_reward(label, cfg), cfg), label))
}
