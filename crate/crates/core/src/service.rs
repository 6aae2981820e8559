//! Blocking HTTP clients for the external judge, embedder, reranker and
//! reference answerer.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::curriculum::{ReferenceAnswerer, Sample};
use crate::eval::{Judge, JudgeRequest, JudgmentLabel};
use crate::retrieval::{Embedder, Reranker};
use crate::{Error, Result};

/// Endpoint settings. Any URL left unset means the built-in implementation
/// is used instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub judge_url: Option<String>,
    pub embed_url: Option<String>,
    pub rerank_url: Option<String>,
    pub answer_url: Option<String>,
    pub timeout_secs: u64,
    pub retries: u32,
    /// Name of the environment variable holding a bearer token.
    pub token_env: String,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            judge_url: None,
            embed_url: None,
            rerank_url: None,
            answer_url: None,
            timeout_secs: 30,
            retries: 2,
            token_env: "TRUTHQA_API_TOKEN".into(),
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.timeout_secs == 0 {
            return Err(Error::config(format!("{prefix}.timeout_secs"), "must be >= 1"));
        }
        for (name, url) in [
            ("judge_url", &self.judge_url),
            ("embed_url", &self.embed_url),
            ("rerank_url", &self.rerank_url),
            ("answer_url", &self.answer_url),
        ] {
            if let Some(u) = url {
                if !(u.starts_with("http://") || u.starts_with("https://")) {
                    return Err(Error::config(format!("{prefix}.{name}"), "must be an http(s) URL"));
                }
            }
        }
        Ok(())
    }

    /// Fills unset URLs from `TRUTHQA_JUDGE_URL`, `TRUTHQA_EMBED_URL`,
    /// `TRUTHQA_RERANK_URL` and `TRUTHQA_ANSWER_URL`.
    pub fn with_env_overrides(mut self) -> Self {
        for (var, slot) in [
            ("TRUTHQA_JUDGE_URL", &mut self.judge_url),
            ("TRUTHQA_EMBED_URL", &mut self.embed_url),
            ("TRUTHQA_RERANK_URL", &mut self.rerank_url),
            ("TRUTHQA_ANSWER_URL", &mut self.answer_url),
        ] {
            if slot.is_none() {
                *slot = std::env::var(var).ok().filter(|v| !v.is_empty());
            }
        }
        self
    }
}

#[derive(Debug, Clone)]
pub struct HttpClient {
    agent: ureq::Agent,
    url: String,
    token: Option<String>,
    retries: u32,
}

impl HttpClient {
    pub fn new(url: &str, cfg: &ServiceConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .build()
            .into();
        Self {
            agent,
            url: url.to_string(),
            token: std::env::var(&cfg.token_env).ok().filter(|t| !t.is_empty()),
            retries: cfg.retries,
        }
    }

    /// POSTs `body` as JSON and decodes the JSON reply, retrying transport
    /// and status errors with exponential backoff.
    pub fn post<B: Serialize, T: DeserializeOwned>(&self, context: &str, body: &B) -> Result<T> {
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(100 << attempt.min(6)));
                log::debug!("{context}: retry {attempt} after {last}");
            }
            let mut req = self.agent.post(&self.url);
            if let Some(t) = &self.token {
                req = req.header("Authorization", &format!("Bearer {t}"));
            }
            match req.send_json(body) {
                Ok(mut resp) => {
                    return resp
                        .body_mut()
                        .read_json::<T>()
                        .map_err(|e| Error::service(context, format!("{}: malformed reply: {e}", self.url)));
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(Error::service(context, format!("{}: {last}", self.url)))
    }
}

#[derive(Deserialize)]
struct LabelReply {
    label: JudgmentLabel,
}

/// Sends `{question, ground_truth, response}` and expects `{label}`.
#[derive(Debug, Clone)]
pub struct HttpJudge(pub HttpClient);

impl Judge for HttpJudge {
    fn judge(&self, req: &JudgeRequest) -> Result<JudgmentLabel> {
        let reply: LabelReply = self.0.post("judge", req)?;
        Ok(reply.label)
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedReply {
    vectors: Vec<Vec<f64>>,
}

/// `{texts}` → `{vectors}`.
#[derive(Debug, Clone)]
pub struct HttpEmbedder(pub HttpClient);

impl Embedder for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let reply: EmbedReply = self.0.post("embedder", &EmbedRequest { texts })?;
        if reply.vectors.len() != texts.len() {
            return Err(Error::service(
                "embedder",
                format!("expected {} vectors, got {}", texts.len(), reply.vectors.len()),
            ));
        }
        Ok(reply.vectors)
    }
}

#[derive(Serialize)]
struct RerankRequest<'a> {
    query: &'a str,
    candidates: &'a [String],
}

#[derive(Deserialize)]
struct RerankReply {
    scores: Vec<f64>,
}

/// `{query, candidates}` → `{scores}`.
#[derive(Debug, Clone)]
pub struct HttpReranker(pub HttpClient);

impl Reranker for HttpReranker {
    fn score(&self, query: &str, candidates: &[String]) -> Result<Vec<f64>> {
        let reply: RerankReply = self.0.post("reranker", &RerankRequest { query, candidates })?;
        Ok(reply.scores)
    }
}

#[derive(Serialize)]
struct AnswerRequest<'a> {
    id: &'a str,
    question: &'a str,
}

#[derive(Deserialize)]
struct AnswerReply {
    response: String,
}

/// `{id, question}` → `{response}`.
#[derive(Debug, Clone)]
pub struct HttpAnswerer(pub HttpClient);

impl ReferenceAnswerer for HttpAnswerer {
    fn answer(&self, sample: &Sample) -> Result<String> {
        let reply: AnswerReply = self.0.post(
            &format!("reference answerer, sample {}", sample.id),
            &AnswerRequest {
                id: &sample.id,
                question: &sample.question,
            },
        )?;
        Ok(reply.response)
    }
}
