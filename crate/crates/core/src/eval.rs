//! Judgment labels, per-turn scoring, multi-turn termination and aggregate
//! truthfulness metrics.
//!
//! Every turn is judged into one of four labels. Scores are +1 for
//! [`JudgmentLabel::Perfect`], `acceptable_score` for
//! [`JudgmentLabel::Acceptable`], 0 for [`JudgmentLabel::Missing`] and −1 for
//! [`JudgmentLabel::Incorrect`]. In a multi-turn conversation, once
//! `termination_run_length` consecutive turns are Incorrect, every later turn
//! counts as Missing.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgmentLabel {
    #[serde(alias = "Perfect")]
    Perfect,
    #[serde(alias = "Acceptable")]
    Acceptable,
    #[serde(alias = "Missing")]
    Missing,
    #[serde(alias = "Incorrect")]
    Incorrect,
}

impl JudgmentLabel {
    pub const ALL: [JudgmentLabel; 4] = [
        JudgmentLabel::Perfect,
        JudgmentLabel::Acceptable,
        JudgmentLabel::Missing,
        JudgmentLabel::Incorrect,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            JudgmentLabel::Perfect => "perfect",
            JudgmentLabel::Acceptable => "acceptable",
            JudgmentLabel::Missing => "missing",
            JudgmentLabel::Incorrect => "incorrect",
        }
    }
}

impl fmt::Display for JudgmentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for JudgmentLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "perfect" => Ok(JudgmentLabel::Perfect),
            "acceptable" => Ok(JudgmentLabel::Acceptable),
            "missing" => Ok(JudgmentLabel::Missing),
            "incorrect" => Ok(JudgmentLabel::Incorrect),
            other => Err(Error::Invalid(format!("unknown judgment label `{other}`"))),
        }
    }
}

/// How per-turn scores are reduced to one truthfulness number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Mean over turns within each conversation, then mean over conversations.
    #[default]
    Macro,
    /// Mean over all effective turns, ignoring conversation boundaries.
    Micro,
}

/// How the built-in judge compares a response with the gold answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    #[default]
    Substring,
    Exact,
}

pub fn default_refusal_patterns() -> Vec<String> {
    ["i don't know", "i'm sorry", "cannot answer", "unable to answer", "i do not know"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub acceptable_score: f64,
    pub termination_run_length: usize,
    pub refusal_patterns: Vec<String>,
    pub multi_turn_aggregation: Aggregation,
    pub match_mode: MatchMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            acceptable_score: 0.5,
            termination_run_length: 2,
            refusal_patterns: default_refusal_patterns(),
            multi_turn_aggregation: Aggregation::Macro,
            match_mode: MatchMode::Substring,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.termination_run_length < 1 {
            return Err(Error::config(
                format!("{prefix}.termination_run_length"),
                "must be >= 1",
            ));
        }
        if !(0.0..=1.0).contains(&self.acceptable_score) {
            return Err(Error::config(
                format!("{prefix}.acceptable_score"),
                "must lie in [0, 1]",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub question_id: String,
    pub response: String,
    pub label: JudgmentLabel,
}

/// A judged conversation. Single-turn items are conversations of length one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub conversation_id: String,
    turns: Vec<Turn>,
}

impl Conversation {
    pub fn new(conversation_id: impl Into<String>, turns: Vec<Turn>) -> Self {
        Self {
            conversation_id: conversation_id.into(),
            turns,
        }
    }

    /// Conversation built from bare labels; question ids are the turn indices.
    pub fn from_labels(conversation_id: impl Into<String>, labels: &[JudgmentLabel]) -> Self {
        let turns = labels
            .iter()
            .enumerate()
            .map(|(i, &label)| Turn {
                question_id: i.to_string(),
                response: String::new(),
                label,
            })
            .collect();
        Self::new(conversation_id, turns)
    }

    pub fn single(conversation_id: impl Into<String>, label: JudgmentLabel) -> Self {
        Self::from_labels(conversation_id, &[label])
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn labels(&self) -> Vec<JudgmentLabel> {
        self.turns.iter().map(|t| t.label).collect()
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub acceptable: f64,
    pub missing: f64,
    pub hallucination: f64,
    pub truthfulness: f64,
    pub n_items: usize,
    pub n_turns: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationScore {
    pub conversation_id: String,
    pub turns: usize,
    pub score: f64,
}

/// Aggregate metrics together with the per-conversation scores they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: MetricsReport,
    pub conversations: Vec<ConversationScore>,
}

pub fn score_label(label: JudgmentLabel, cfg: &EvalConfig) -> f64 {
    match label {
        JudgmentLabel::Perfect => 1.0,
        JudgmentLabel::Acceptable => cfg.acceptable_score,
        JudgmentLabel::Missing => 0.0,
        JudgmentLabel::Incorrect => -1.0,
    }
}

/// Replaces every label after the first run of `termination_run_length`
/// consecutive Incorrect labels with Missing. The run itself is kept.
pub fn apply_termination(labels: &[JudgmentLabel], cfg: &EvalConfig) -> Vec<JudgmentLabel> {
    let run_needed = cfg.termination_run_length.max(1);
    let mut out = Vec::with_capacity(labels.len());
    let mut run = 0usize;
    let mut terminated = false;
    for &label in labels {
        if terminated {
            out.push(JudgmentLabel::Missing);
            continue;
        }
        out.push(label);
        if label == JudgmentLabel::Incorrect {
            run += 1;
            if run >= run_needed {
                terminated = true;
            }
        } else {
            run = 0;
        }
    }
    out
}

pub fn conversation_score(conv: &Conversation, cfg: &EvalConfig) -> Result<f64> {
    if conv.is_empty() {
        return Err(Error::EmptyConversation);
    }
    let effective = apply_termination(&conv.labels(), cfg);
    let total: f64 = effective.iter().map(|&l| score_label(l, cfg)).sum();
    Ok(total / effective.len() as f64)
}

pub fn aggregate_metrics(items: &[Conversation], cfg: &EvalConfig) -> Result<MetricsReport> {
    Ok(evaluate(items, cfg)?.metrics)
}

/// Computes the aggregate report plus per-conversation scores.
///
/// Label fractions are taken over all effective (post-termination) turns.
/// Truthfulness follows `cfg.multi_turn_aggregation`.
pub fn evaluate(items: &[Conversation], cfg: &EvalConfig) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::Invalid("no conversations to aggregate".into()));
    }
    let mut counts = [0usize; 4];
    let mut turn_score_sum = 0.0;
    let mut conversations = Vec::with_capacity(items.len());
    for conv in items {
        if conv.is_empty() {
            return Err(Error::EmptyConversation);
        }
        let effective = apply_termination(&conv.labels(), cfg);
        let mut sum = 0.0;
        for &label in &effective {
            counts[label_index(label)] += 1;
            sum += score_label(label, cfg);
        }
        turn_score_sum += sum;
        conversations.push(ConversationScore {
            conversation_id: conv.conversation_id.clone(),
            turns: effective.len(),
            score: sum / effective.len() as f64,
        });
    }
    let n_turns: usize = counts.iter().sum();
    let frac = |l: JudgmentLabel| counts[label_index(l)] as f64 / n_turns as f64;
    let truthfulness = match cfg.multi_turn_aggregation {
        Aggregation::Macro => {
            conversations.iter().map(|c| c.score).sum::<f64>() / conversations.len() as f64
        }
        Aggregation::Micro => turn_score_sum / n_turns as f64,
    };
    Ok(EvalReport {
        metrics: MetricsReport {
            accuracy: frac(JudgmentLabel::Perfect),
            acceptable: frac(JudgmentLabel::Acceptable),
            missing: frac(JudgmentLabel::Missing),
            hallucination: frac(JudgmentLabel::Incorrect),
            truthfulness,
            n_items: items.len(),
            n_turns,
        },
        conversations,
    })
}

fn label_index(label: JudgmentLabel) -> usize {
    match label {
        JudgmentLabel::Perfect => 0,
        JudgmentLabel::Acceptable => 1,
        JudgmentLabel::Missing => 2,
        JudgmentLabel::Incorrect => 3,
    }
}

/// Lowercases, unifies curly apostrophes, collapses whitespace and strips
/// terminal punctuation.
pub fn normalize_text(text: &str) -> String {
    let lowered = text.to_lowercase().replace(['\u{2019}', '\u{2018}'], "'");
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_end_matches(['.', '!', '?', ',', ';', ':'])
        .trim_end()
        .to_string()
}

/// String-matching judge. Never emits [`JudgmentLabel::Acceptable`].
pub fn judge(response: &str, ground_truth: &str, cfg: &EvalConfig) -> JudgmentLabel {
    let resp = normalize_text(response);
    let gold = normalize_text(ground_truth);
    let refused = cfg
        .refusal_patterns
        .iter()
        .map(|p| normalize_text(p))
        .any(|p| !p.is_empty() && resp.contains(&p));
    if refused {
        return JudgmentLabel::Missing;
    }
    let matched = match cfg.match_mode {
        MatchMode::Exact => resp == gold,
        MatchMode::Substring => !gold.is_empty() && resp.contains(&gold),
    };
    if matched {
        JudgmentLabel::Perfect
    } else {
        JudgmentLabel::Incorrect
    }
}

/// One item handed to a judge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub question: String,
    pub ground_truth: String,
    pub response: String,
}

/// Judging backend: the built-in string matcher or an external service.
pub trait Judge: Send + Sync {
    fn judge(&self, request: &JudgeRequest) -> Result<JudgmentLabel>;
}

#[derive(Debug, Clone, Default)]
pub struct BuiltinJudge {
    pub cfg: EvalConfig,
}

impl BuiltinJudge {
    pub fn new(cfg: EvalConfig) -> Self {
        Self { cfg }
    }
}

impl Judge for BuiltinJudge {
    fn judge(&self, request: &JudgeRequest) -> Result<JudgmentLabel> {
        Ok(judge(&request.response, &request.ground_truth, &self.cfg))
    }
}
