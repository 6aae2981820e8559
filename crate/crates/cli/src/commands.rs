use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use truthqa_core::config::RunConfig;
use truthqa_core::curriculum::{
    label_pool, run_schedule, EvalOptions, FixtureAnswerer, Pools, ReferenceAnswerer, Sample, Schedule, StageConfig,
    StageSnapshot, SyntheticOracleAnswerer, TraceRecord,
};
use truthqa_core::eval::{evaluate, BuiltinJudge, Conversation, Judge, JudgeRequest, JudgmentLabel, Turn};
use truthqa_core::ingest::SearchFixture;
use truthqa_core::jsonl::{read_jsonl, read_jsonl_numbered, write_file, write_json_pretty, write_jsonl};
use truthqa_core::pipeline::{build_corpus, retrieve, run_query, QueryRun};
use truthqa_core::retrieval::{
    Chunk, ChunkKind, Embedder, HashedTrigramEmbedder, JaccardReranker, LexicalIndex, Reranker,
};
use truthqa_core::service::{HttpAnswerer, HttpClient, HttpEmbedder, HttpJudge, HttpReranker};
use truthqa_core::synthenv::{
    generate_heldout, generate_pools, oracle_threshold_truthfulness, AttemptPolicy, SyntheticEnv, SyntheticQuestion,
    ThresholdOracle,
};
use truthqa_core::Error;

use crate::{Cli, Command, Variant};

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    cfg.services = cfg.services.clone().with_env_overrides();
    cfg.validate()?;
    let ctx = Ctx { cfg, strict: cli.strict };
    match cli.command {
        Command::Ingest { fixtures } => ctx.ingest(fixtures.as_deref()),
        Command::Retrieve { query, all, k, corpus } => {
            if all {
                ctx.retrieve_all(k)
            } else {
                ctx.retrieve(query.as_deref().unwrap_or_default(), k, corpus.as_deref())
            }
        }
        Command::Label => ctx.label(),
        Command::Train { variant, steps_per_stage } => ctx.train(variant, steps_per_stage),
        Command::Eval { responses } => ctx.eval(&responses),
        Command::Report { run } => ctx.report(run.as_deref()),
    }
}

struct Ctx {
    cfg: RunConfig,
    strict: bool,
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

impl Ctx {
    fn out(&self, rel: &str) -> PathBuf {
        self.cfg.output.dir.join(rel)
    }

    fn client(&self, url: &str) -> HttpClient {
        HttpClient::new(url, &self.cfg.services)
    }

    fn judge(&self) -> Box<dyn Judge> {
        match &self.cfg.services.judge_url {
            Some(u) => Box::new(HttpJudge(self.client(u))),
            None => Box::new(BuiltinJudge::new(self.cfg.eval.clone())),
        }
    }

    fn embedder(&self) -> Box<dyn Embedder> {
        match &self.cfg.services.embed_url {
            Some(u) => Box::new(HttpEmbedder(self.client(u))),
            None => Box::new(HashedTrigramEmbedder::default()),
        }
    }

    fn reranker(&self) -> Box<dyn Reranker> {
        match &self.cfg.services.rerank_url {
            Some(u) => Box::new(HttpReranker(self.client(u))),
            None => Box::new(JaccardReranker),
        }
    }

    fn fixture(&self, dir: Option<&Path>) -> Result<SearchFixture> {
        let (queries, pool) = match dir {
            Some(d) => (d.join("queries.jsonl"), d.join("hard_negatives.jsonl")),
            None => {
                let f = &self.cfg.fixtures;
                match (&f.search_queries, &f.hard_negatives) {
                    (Some(q), Some(p)) => (q.clone(), p.clone()),
                    _ => {
                        return Err(Error::config(
                            "fixtures.search_queries",
                            "search_queries and hard_negatives must be set (or pass --fixtures)",
                        )
                        .into())
                    }
                }
            }
        };
        let fixture = SearchFixture::load(&queries, &pool)?;
        if fixture.is_empty() {
            return Err(Error::data(&queries, 0, "fixture has no queries").into());
        }
        Ok(fixture)
    }

    fn ingest(&self, dir: Option<&Path>) -> Result<()> {
        let fixture = self.fixture(dir)?;
        let chunks = build_corpus(&fixture, &self.cfg.search, &self.cfg.segment, self.cfg.seed)?;
        let index = LexicalIndex::build(&chunks)?;
        write_jsonl(&self.out("corpus/chunks.jsonl"), &chunks)?;
        index.save(&self.out("corpus/index.json"))?;
        let mut pages: Vec<&str> = chunks.iter().map(|c| c.source_url.as_str()).collect();
        pages.dedup();
        let summary = IngestSummary {
            queries: fixture.len(),
            pages: pages.len(),
            chunks: chunks.len(),
            body_chunks: chunks.iter().filter(|c| c.kind == ChunkKind::Body).count(),
            summary_chunks: chunks.iter().filter(|c| c.kind == ChunkKind::Summary).count(),
        };
        write_json_pretty(&self.out("corpus/summary.json"), &summary)?;
        print_json(&summary)
    }

    fn retrieve(&self, query: &str, k: Option<usize>, corpus: Option<&Path>) -> Result<()> {
        let dir = corpus.map(Path::to_path_buf).unwrap_or_else(|| self.out("corpus"));
        let chunks: Vec<Chunk> =
            read_jsonl(&dir.join("chunks.jsonl")).with_context(|| format!("no corpus in {}; run `truthqa ingest` first", dir.display()))?;
        let index = LexicalIndex::load(&dir.join("index.json"))?;
        let mut rcfg = self.cfg.retrieval.clone();
        if let Some(k) = k {
            rcfg.final_k = k;
            rcfg.coarse_m = rcfg.coarse_m.max(k);
        }
        rcfg.validate("retrieval")?;
        let results = retrieve(query, &chunks, &index, &*self.embedder(), &*self.reranker(), &rcfg, self.strict)?;
        for r in &results {
            print_json(r)?;
        }
        Ok(())
    }

    fn retrieve_all(&self, k: Option<usize>) -> Result<()> {
        let fixture = self.fixture(None)?;
        let mut rcfg = self.cfg.retrieval.clone();
        if let Some(k) = k {
            rcfg.final_k = k;
            rcfg.coarse_m = rcfg.coarse_m.max(k);
        }
        rcfg.validate("retrieval")?;
        let (embedder, reranker) = (self.embedder(), self.reranker());
        let mut runs: Vec<QueryRun> = Vec::new();
        for rec in fixture.queries.values() {
            runs.push(run_query(
                &rec.query,
                &fixture,
                &self.cfg.search,
                &self.cfg.segment,
                &rcfg,
                &*embedder,
                &*reranker,
                self.strict,
                self.cfg.seed,
            )?);
        }
        let judged: Vec<bool> = runs.iter().filter_map(|r| r.hit).collect();
        let summary = RetrievalSummary {
            queries: runs.len(),
            with_answer: judged.len(),
            hits: judged.iter().filter(|&&h| h).count(),
            hit_rate: if judged.is_empty() {
                0.0
            } else {
                judged.iter().filter(|&&h| h).count() as f64 / judged.len() as f64
            },
            k: rcfg.final_k,
        };
        write_jsonl(&self.out("retrieval/runs.jsonl"), &runs)?;
        write_json_pretty(&self.out("retrieval/summary.json"), &summary)?;
        print_json(&summary)
    }

    fn label(&self) -> Result<()> {
        let samples: Vec<Sample> = match &self.cfg.fixtures.samples {
            Some(p) => read_jsonl(p)?,
            None => {
                let (e, h) = generate_pools(&self.cfg.env);
                e.iter().chain(&h).map(SyntheticQuestion::to_sample).collect()
            }
        };
        if samples.is_empty() {
            return Err(Error::Invalid("no samples to label".into()).into());
        }
        let answerer: Box<dyn ReferenceAnswerer> = match (&self.cfg.services.answer_url, &self.cfg.fixtures.reference_answers) {
            (Some(u), _) => Box::new(HttpAnswerer(self.client(u))),
            (None, Some(p)) => Box::new(FixtureAnswerer::load(p)?),
            (None, None) => Box::new(SyntheticOracleAnswerer { seed: self.cfg.seed }),
        };
        let (easy, hard) = label_pool(&samples, &*answerer, &*self.judge())?;
        write_jsonl(&self.out("pools/easy.jsonl"), &easy)?;
        write_jsonl(&self.out("pools/hard.jsonl"), &hard)?;
        let summary = LabelSummary {
            total: samples.len(),
            easy: easy.len(),
            hard: hard.len(),
        };
        write_json_pretty(&self.out("pools/summary.json"), &summary)?;
        print_json(&summary)
    }

    fn pools(&self) -> Result<(Vec<SyntheticQuestion>, Vec<SyntheticQuestion>, Vec<SyntheticQuestion>)> {
        let f = &self.cfg.fixtures;
        match (&f.easy_pool, &f.hard_pool, &f.eval_pool) {
            (Some(e), Some(h), Some(t)) => Ok((load_pool(e)?, load_pool(h)?, load_pool(t)?)),
            _ => {
                let (e, h) = generate_pools(&self.cfg.env);
                Ok((e, h, generate_heldout(&self.cfg.env)))
            }
        }
    }

    fn train(&self, variant: Variant, steps_per_stage: Option<usize>) -> Result<()> {
        let (easy, hard, heldout) = self.pools()?;
        let schedule = match variant {
            Variant::Curriculum => self.cfg.schedule.clone(),
            Variant::Reversed => self.cfg.schedule.reversed(),
            Variant::Mixed => {
                let last = self.cfg.schedule.stages.last().expect("validated schedule is non-empty");
                Schedule::single(StageConfig::new("mixed", last.easy_parts, last.hard_parts, self.cfg.schedule.total_steps()))
            }
        };
        let mut trainer = self.cfg.trainer.clone();
        if steps_per_stage.is_some() {
            trainer.steps_per_stage = steps_per_stage;
        }
        let env = SyntheticEnv::new(self.cfg.reward.clone(), self.cfg.eval.clone());
        let eval = EvalOptions {
            rollouts_per_prompt: self.cfg.evaluation.rollouts_per_prompt,
            eval: self.cfg.eval.clone(),
        };
        let outcome = run_schedule(
            &AttemptPolicy,
            &env,
            &self.cfg.policy.params(),
            Pools { easy: &easy, hard: &hard, eval: &heldout },
            &schedule,
            &trainer,
            &eval,
        )?;
        let oracle = oracle_threshold_truthfulness(&heldout, 1e-3)?;
        let final_params = outcome.final_params().to_vec();
        let stages = StagesFile {
            variant: variant.name().into(),
            seed: self.cfg.seed,
            oracle,
            initial: outcome.initial,
            stages: outcome.stages,
        };
        write_json_pretty(&self.out("train/stages.json"), &stages)?;
        write_jsonl(&self.out("train/trace.jsonl"), &outcome.trace)?;
        write_json_pretty(
            &self.out("train/params.json"),
            &BTreeMap::from([("w", final_params[0]), ("b", final_params[1])]),
        )?;
        for s in std::iter::once(&stages.initial).chain(&stages.stages) {
            print_json(&StageLine { stage: &s.name, steps: s.steps, metrics: &s.metrics })?;
        }
        Ok(())
    }

    fn eval(&self, responses: &Path) -> Result<()> {
        let records: Vec<(usize, ResponseRecord)> = read_jsonl_numbered(responses)?;
        if records.is_empty() {
            return Err(Error::data(responses, 0, "responses file is empty").into());
        }
        let judge = self.judge();
        let mut order: Vec<String> = Vec::new();
        let mut convs: HashMap<String, BTreeMap<usize, Turn>> = HashMap::new();
        for (line, r) in records {
            let label = match (r.label, &r.response, &r.ground_truth) {
                (Some(l), _, _) => l,
                (None, Some(resp), Some(gt)) => judge
                    .judge(&JudgeRequest {
                        question: r.question.clone().unwrap_or_default(),
                        ground_truth: gt.clone(),
                        response: resp.clone(),
                    })
                    .with_context(|| format!("{}:{line}: judging conversation {}", responses.display(), r.conversation_id))?,
                _ => {
                    return Err(Error::data(responses, line, "record needs `label` or both `response` and `ground_truth`").into())
                }
            };
            let turns = convs.entry(r.conversation_id.clone()).or_insert_with(|| {
                order.push(r.conversation_id.clone());
                BTreeMap::new()
            });
            let turn = Turn {
                question_id: r.question_id.clone().unwrap_or_else(|| r.turn.to_string()),
                response: r.response.clone().unwrap_or_default(),
                label,
            };
            if turns.insert(r.turn, turn).is_some() {
                return Err(Error::data(
                    responses,
                    line,
                    format!("duplicate turn {} in conversation {}", r.turn, r.conversation_id),
                )
                .into());
            }
        }
        let items: Vec<Conversation> = order
            .iter()
            .map(|id| Conversation::new(id.clone(), convs.remove(id).unwrap_or_default().into_values().collect()))
            .collect();
        let report = evaluate(&items, &self.cfg.eval)?;
        write_json_pretty(&self.out("eval/report.json"), &report)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(&report.metrics)?;
        write_file(&self.out("eval/report.csv"), &w.into_inner()?)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        for c in &report.conversations {
            w.serialize(c)?;
        }
        write_file(&self.out("eval/conversations.csv"), &w.into_inner()?)?;
        print_json(&report.metrics)
    }

    fn report(&self, run: Option<&Path>) -> Result<()> {
        let dir = run.map(Path::to_path_buf).unwrap_or_else(|| self.cfg.output.dir.clone());
        let stages_path = dir.join("train/stages.json");
        let trace_path = dir.join("train/trace.jsonl");
        if !stages_path.exists() {
            return Err(Error::data(&stages_path, 0, "no training run found; run `truthqa train` first").into());
        }
        let bytes = std::fs::read(&stages_path).map_err(|e| Error::io(&stages_path, e))?;
        let stages: StagesFile =
            serde_json::from_slice(&bytes).map_err(|e| Error::data(&stages_path, e.line(), e.to_string()))?;
        let trace: Vec<TraceRecord> = read_jsonl(&trace_path)?;

        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &trace {
            w.serialize(StepRow {
                step: r.step,
                stage: &r.stage,
                mean_reward: r.stats.mean_reward,
                attempt_rate: r.stats.attempt_rate,
                missing_rate: r.stats.missing_rate,
                incorrect_rate: r.stats.incorrect_rate,
                mean_abs_gradient: r.stats.mean_abs_gradient,
                mean_abs_surrogate_gradient: r.stats.mean_abs_surrogate_gradient,
                mean_kl: r.stats.mean_kl,
                zero_variance_groups: r.stats.zero_variance_groups,
            })?;
        }
        let steps_csv = w.into_inner()?;
        let mut w = csv::Writer::from_writer(Vec::new());
        let snaps: Vec<&StageSnapshot> = std::iter::once(&stages.initial).chain(&stages.stages).collect();
        for s in &snaps {
            w.serialize(StageRow {
                stage: &s.name,
                steps: s.steps,
                accuracy: s.metrics.accuracy,
                missing: s.metrics.missing,
                hallucination: s.metrics.hallucination,
                truthfulness: s.metrics.truthfulness,
                w: s.params[0],
                b: s.params[1],
            })?;
        }
        let stages_csv = w.into_inner()?;
        let truth: Vec<f64> = stages.stages.iter().map(|s| s.metrics.truthfulness).collect();
        let summary = ReportSummary {
            variant: stages.variant.clone(),
            steps: trace.len(),
            stage_names: stages.stages.iter().map(|s| s.name.clone()).collect(),
            truthfulness: truth.clone(),
            missing: stages.stages.iter().map(|s| s.metrics.missing).collect(),
            hallucination: stages.stages.iter().map(|s| s.metrics.hallucination).collect(),
            truthfulness_increasing: truth.windows(2).all(|w| w[1] > w[0]),
            oracle_value: stages.oracle.value,
            final_fraction_of_oracle: truth.last().map(|t| t / stages.oracle.value).unwrap_or(0.0),
        };
        let out = self.out("report");
        write_file(&out.join("steps.csv"), &steps_csv)?;
        write_file(&out.join("stages.csv"), &stages_csv)?;
        write_json_pretty(&out.join("summary.json"), &summary)?;
        print_json(&summary)
    }
}

fn load_pool(path: &Path) -> Result<Vec<SyntheticQuestion>> {
    let records: Vec<(usize, Sample)> = read_jsonl_numbered(path)?;
    if records.is_empty() {
        bail!(Error::data(path, 0, "pool is empty"));
    }
    records
        .iter()
        .map(|(line, s)| SyntheticQuestion::from_sample(s).map_err(|e| Error::data(path, *line, e.to_string()).into()))
        .collect()
}

#[derive(Serialize)]
struct IngestSummary {
    queries: usize,
    pages: usize,
    chunks: usize,
    body_chunks: usize,
    summary_chunks: usize,
}

#[derive(Serialize)]
struct RetrievalSummary {
    queries: usize,
    with_answer: usize,
    hits: usize,
    hit_rate: f64,
    k: usize,
}

#[derive(Serialize)]
struct LabelSummary {
    total: usize,
    easy: usize,
    hard: usize,
}

#[derive(Serialize, Deserialize)]
struct StagesFile {
    variant: String,
    seed: u64,
    oracle: ThresholdOracle,
    initial: StageSnapshot,
    stages: Vec<StageSnapshot>,
}

#[derive(Serialize)]
struct StageLine<'a> {
    stage: &'a str,
    steps: usize,
    #[serde(flatten)]
    metrics: &'a truthqa_core::eval::MetricsReport,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ResponseRecord {
    conversation_id: String,
    #[serde(default)]
    turn: usize,
    #[serde(default)]
    question_id: Option<String>,
    #[serde(default)]
    question: Option<String>,
    #[serde(default)]
    response: Option<String>,
    #[serde(default)]
    ground_truth: Option<String>,
    #[serde(default)]
    label: Option<JudgmentLabel>,
}

#[derive(Serialize)]
struct StepRow<'a> {
    step: usize,
    stage: &'a str,
    mean_reward: f64,
    attempt_rate: f64,
    missing_rate: f64,
    incorrect_rate: f64,
    mean_abs_gradient: f64,
    mean_abs_surrogate_gradient: f64,
    mean_kl: f64,
    zero_variance_groups: f64,
}

#[derive(Serialize)]
struct StageRow<'a> {
    stage: &'a str,
    steps: usize,
    accuracy: f64,
    missing: f64,
    hallucination: f64,
    truthfulness: f64,
    w: f64,
    b: f64,
}

#[derive(Serialize)]
struct ReportSummary {
    variant: String,
    steps: usize,
    stage_names: Vec<String>,
    truthfulness: Vec<f64>,
    missing: Vec<f64>,
    hallucination: Vec<f64>,
    truthfulness_increasing: bool,
    oracle_value: f64,
    final_fraction_of_oracle: f64,
}
