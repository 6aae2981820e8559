//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use truthqa_core::eval::{
    aggregate_metrics, apply_termination, conversation_score, Aggregation, Conversation, EvalConfig, JudgmentLabel,
};
use truthqa_core::grpo::{compute_advantages, kl_categorical, surrogate_term, train_step, Outcome, Policy, RolloutEnv, TrainerConfig};
use truthqa_core::retrieval::{
    bm25_score, fuse_scores, tfidf_cosine, Bm25Params, Chunk, ChunkKind, FusionWeights, LexicalIndex, ScoredChunk,
};
use truthqa_core::synthenv::{generate_pools, AttemptPolicy, EnvConfig, SyntheticEnv, SyntheticQuestion};

type Check = Result<String, String>;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config() -> PathBuf {
    root().join("configs/default.toml")
}

fn truthqa(out: &Path, args: &[&str]) -> Result<String, String> {
    let output = Command::new(env!("CARGO_BIN_EXE_truthqa"))
        .arg("--config")
        .arg(config())
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !output.status.success() {
        return Err(format!("truthqa {args:?} failed: {}", String::from_utf8_lossy(&output.stderr)));
    }
    Ok(String::from_utf8_lossy(&output.stdout).into_owned())
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn read_trace(path: &Path) -> Result<Vec<Value>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    text.lines().map(|l| serde_json::from_str(l).map_err(|e| e.to_string())).collect()
}

fn within(start: Instant, budget: Duration) -> Result<(), String> {
    let took = start.elapsed();
    if took > budget {
        Err(format!("took {took:.1?}, budget {budget:?}"))
    } else {
        Ok(())
    }
}

fn metric(stage: &Value, name: &str) -> f64 {
    stage["metrics"][name].as_f64().unwrap_or(f64::NAN)
}

fn single_turn(perfect: usize, missing: usize, incorrect: usize) -> Vec<Conversation> {
    let mut items = Vec::new();
    for (label, n) in [
        (JudgmentLabel::Perfect, perfect),
        (JudgmentLabel::Missing, missing),
        (JudgmentLabel::Incorrect, incorrect),
    ] {
        for _ in 0..n {
            items.push(Conversation::single(format!("q{}", items.len()), label));
        }
    }
    items
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let cfg = EvalConfig::default();
    let mut got = Vec::new();
    for ((p, m, i), want) in [((197, 85, 718), -0.520), ((262, 237, 501), -0.238)] {
        let t = aggregate_metrics(&single_turn(p, m, i), &cfg).map_err(|e| e.to_string())?.truthfulness;
        if (t - want).abs() > 0.002 {
            return Err(format!("truthfulness {t:.4} vs {want}"));
        }
        got.push(format!("{t:.3}"));
    }
    within(start, Duration::from_secs(1))?;
    Ok(format!("truthfulness {} vs -0.520 / -0.238", got.join(" / ")))
}

fn labels(s: &str) -> Vec<JudgmentLabel> {
    s.split_whitespace()
        .map(|t| match t {
            "P" => JudgmentLabel::Perfect,
            "A" => JudgmentLabel::Acceptable,
            "M" => JudgmentLabel::Missing,
            _ => JudgmentLabel::Incorrect,
        })
        .collect()
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let text = std::fs::read_to_string(root().join("fixtures/eval/termination_cases.jsonl")).map_err(|e| e.to_string())?;
    let cases: Vec<Value> = text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).unwrap()).collect();
    let mut alt_documented = 0;
    for c in &cases {
        let cfg = EvalConfig {
            termination_run_length: c["run_length"].as_u64().unwrap_or(2) as usize,
            ..EvalConfig::default()
        };
        let input = labels(c["labels"].as_str().unwrap_or_default());
        let want = labels(c["effective"].as_str().unwrap_or_default());
        if apply_termination(&input, &cfg) != want {
            return Err(format!("case {:?}: wrong effective labels", c["name"]));
        }
        let score = conversation_score(&Conversation::from_labels("c", &input), &cfg).map_err(|e| e.to_string())?;
        if (score - c["score"].as_f64().unwrap_or(f64::NAN)).abs() > 1e-12 {
            return Err(format!("case {:?}: score {score}", c["name"]));
        }
        if c.get("alt_effective").is_some() {
            alt_documented += 1;
        }
    }
    if cases.len() < 20 || !cases.iter().any(|c| c["labels"] == "P I I P" && c["score"] == -0.25) {
        return Err(format!("suite has {} cases or lacks the [P,I,I,P] case", cases.len()));
    }
    let agg = read_json(&root().join("fixtures/eval/aggregation_cases.json"))?;
    let items: Vec<Conversation> = agg["conversations"]
        .as_array()
        .ok_or("aggregation fixture malformed")?
        .iter()
        .enumerate()
        .map(|(i, s)| Conversation::from_labels(format!("c{i}"), &labels(s.as_str().unwrap_or_default())))
        .collect();
    let macro_t = aggregate_metrics(&items, &EvalConfig::default()).map_err(|e| e.to_string())?.truthfulness;
    let micro_cfg = EvalConfig { multi_turn_aggregation: Aggregation::Micro, ..EvalConfig::default() };
    let micro_t = aggregate_metrics(&items, &micro_cfg).map_err(|e| e.to_string())?.truthfulness;
    if (macro_t - agg["macro"].as_f64().unwrap_or(f64::NAN)).abs() > 1e-12
        || (micro_t - agg["micro"].as_f64().unwrap_or(f64::NAN)).abs() > 1e-12
    {
        return Err(format!("aggregation readings: macro {macro_t}, micro {micro_t}"));
    }
    if alt_documented == 0 {
        return Err("alternative trigger reading not documented".into());
    }
    within(start, Duration::from_secs(1))?;
    Ok(format!(
        "{} sequences exact; trigger-pair reading documented in {alt_documented}; macro {macro_t} vs micro {micro_t}",
        cases.len()
    ))
}

struct Recording {
    inner: SyntheticEnv,
    log: RefCell<Vec<(f64, usize, f64)>>,
}

impl RolloutEnv for Recording {
    type Prompt = SyntheticQuestion;
    type Observation = f64;

    fn prompt_id(&self, q: &SyntheticQuestion) -> String {
        self.inner.prompt_id(q)
    }

    fn observe(&self, q: &SyntheticQuestion) -> f64 {
        self.inner.observe(q)
    }

    fn execute<R: Rng + ?Sized>(&self, q: &SyntheticQuestion, action: usize, id: &str, rng: &mut R) -> truthqa_core::Result<Outcome> {
        let out = self.inner.execute(q, action, id, rng)?;
        self.log.borrow_mut().push((q.feature, action, out.reward));
        Ok(out)
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn criterion_3() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_mean: f64 = 0.0;
    let mut worst_std: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..33);
        let rewards: Vec<f64> = (0..n).map(|_| [-1.0, -0.5, 0.0, 0.5, 1.0, 1.5][rng.random_range(0..6)]).collect();
        let adv = compute_advantages(&rewards, 1e-8).map_err(|e| e.to_string())?;
        if rewards.iter().all(|&r| r == rewards[0]) {
            if adv.iter().any(|&a| a != 0.0) {
                return Err("zero-variance group gave non-zero advantages".into());
            }
            continue;
        }
        let mean = adv.iter().sum::<f64>() / n as f64;
        let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        worst_mean = worst_mean.max(mean.abs());
        worst_std = worst_std.max((std - 1.0).abs());
    }
    if worst_mean > 1e-9 || worst_std > 1e-6 {
        return Err(format!("advantage mean err {worst_mean:e}, std err {worst_std:e}"));
    }
    if compute_advantages(&[0.1; 8], 1e-8).map_err(|e| e.to_string())? != vec![0.0; 8] {
        return Err("constant 0.1 group not exactly zero".into());
    }

    let (easy, hard) = generate_pools(&EnvConfig::default());
    let pool: Vec<SyntheticQuestion> = easy.into_iter().take(50).chain(hard.into_iter().take(50)).collect();
    let mut worst_grad: f64 = 0.0;
    for point in 0..100u64 {
        let params = vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let reference = vec![params[0] + rng.random_range(-1.0..1.0), params[1] + rng.random_range(-1.0..1.0)];
        let cfg = TrainerConfig {
            group_size: rng.random_range(2..9),
            kl_coef: [0.0, 0.04, 0.5][point as usize % 3],
            learning_rate: 1.0,
            ..TrainerConfig::default()
        };
        let prompts: Vec<SyntheticQuestion> =
            (0..rng.random_range(1..6)).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect();
        let env = Recording { inner: SyntheticEnv::default(), log: RefCell::new(Vec::new()) };
        let (new_params, _) = train_step(&AttemptPolicy, &params, &reference, &prompts, &env, &cfg, &mut ChaCha8Rng::seed_from_u64(point))
            .map_err(|e| e.to_string())?;
        let mut terms = Vec::new();
        for group in env.log.into_inner().chunks(cfg.group_size) {
            let rewards: Vec<f64> = group.iter().map(|r| r.2).collect();
            for ((x, a, _), adv) in group.iter().zip(compute_advantages(&rewards, cfg.std_epsilon).map_err(|e| e.to_string())?) {
                terms.push((*x, *a, AttemptPolicy.log_prob(*a, x, &params), adv));
            }
        }
        let objective = |p: &[f64]| {
            let s = terms
                .iter()
                .map(|(x, a, old, adv)| surrogate_term((AttemptPolicy.log_prob(*a, x, p) - old).exp(), *adv, cfg.clip_epsilon))
                .sum::<f64>()
                / terms.len() as f64;
            let kl = prompts
                .iter()
                .map(|q| {
                    kl_categorical(
                        &AttemptPolicy.action_distribution(&q.feature, p),
                        &AttemptPolicy.action_distribution(&q.feature, &reference),
                    )
                    .unwrap_or(f64::NAN)
                })
                .sum::<f64>()
                / prompts.len() as f64;
            s - cfg.kl_coef * kl
        };
        for i in 0..2 {
            let h = 1e-6;
            let (mut hi, mut lo) = (params.clone(), params.clone());
            hi[i] += h;
            lo[i] -= h;
            let numeric = (objective(&hi) - objective(&lo)) / (2.0 * h);
            let analytic = (new_params[i] - params[i]) / cfg.learning_rate;
            worst_grad = worst_grad.max(rel_err(analytic, numeric));
        }
    }
    if worst_grad >= 1e-4 {
        return Err(format!("worst gradient relative error {worst_grad:e}"));
    }
    within(start, Duration::from_secs(5))?;
    Ok(format!(
        "advantage mean err {worst_mean:.1e}, std err {worst_std:.1e}; gradient rel err {worst_grad:.1e} over 100 points"
    ))
}

struct TrainRun {
    stages: Value,
    trace: Vec<Value>,
    elapsed: Duration,
}

fn train(out: &Path, variant: &str) -> Result<TrainRun, String> {
    let start = Instant::now();
    truthqa(out, &["train", "--variant", variant])?;
    Ok(TrainRun {
        stages: read_json(&out.join("train/stages.json"))?,
        trace: read_trace(&out.join("train/trace.jsonl"))?,
        elapsed: start.elapsed(),
    })
}

fn final_stage(run: &TrainRun) -> &Value {
    run.stages["stages"].as_array().and_then(|s| s.last()).unwrap_or(&Value::Null)
}

fn criterion_4(reversed: &Result<TrainRun, String>) -> Check {
    let run = reversed.as_ref().map_err(Clone::clone)?;
    let missing = metric(final_stage(run), "missing");
    let grads: Vec<f64> = run.trace.iter().map(|r| r["mean_abs_surrogate_gradient"].as_f64().unwrap_or(f64::NAN)).collect();
    let peak = grads.iter().cloned().fold(0.0, f64::max);
    let tail_n = (grads.len() / 10).max(1);
    let tail = grads[grads.len() - tail_n..].iter().sum::<f64>() / tail_n as f64;
    let detail = format!(
        "final missing {missing:.3} (need >= 0.8); tail/peak surrogate gradient {:.3} (need < 0.1); {:.1?}",
        tail / peak,
        run.elapsed
    );
    if missing >= 0.8 && tail < 0.1 * peak && run.elapsed < Duration::from_secs(120) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_5(curriculum: &Result<TrainRun, String>, mixed: &Result<TrainRun, String>) -> Check {
    let c = curriculum.as_ref().map_err(Clone::clone)?;
    let m = mixed.as_ref().map_err(Clone::clone)?;
    let tc = metric(final_stage(c), "truthfulness");
    let tm = metric(final_stage(m), "truthfulness");
    let oracle = c.stages["oracle"]["value"].as_f64().unwrap_or(f64::NAN);
    let detail = format!(
        "curriculum {tc:.4} vs no-curriculum {tm:.4}: gap {:.4} (need >= 0.1); {:.1}% of oracle {oracle:.4} (need >= 85%); {:.1?}",
        tc - tm,
        100.0 * tc / oracle,
        c.elapsed + m.elapsed
    );
    if tc - tm >= 0.1 && tc >= 0.85 * oracle && c.elapsed + m.elapsed < Duration::from_secs(240) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_6(curriculum: &Result<TrainRun, String>) -> Check {
    let run = curriculum.as_ref().map_err(Clone::clone)?;
    let stages = run.stages["stages"].as_array().ok_or("no stages")?;
    if stages.len() != 3 {
        return Err(format!("expected 3 stage snapshots, got {}", stages.len()));
    }
    let m: Vec<f64> = stages.iter().map(|s| metric(s, "missing")).collect();
    let h: Vec<f64> = stages.iter().map(|s| metric(s, "hallucination")).collect();
    let t: Vec<f64> = stages.iter().map(|s| metric(s, "truthfulness")).collect();
    let detail = format!(
        "missing {:.3}->{:.3}->{:.3}; hallucination {:.3}->{:.3}->{:.3}; truthfulness {:.3}->{:.3}->{:.3}",
        m[0], m[1], m[2], h[0], h[1], h[2], t[0], t[1], t[2]
    );
    if m[0] < m[1] && m[1] < m[2] && h[0] > h[2] && t[2] > t[1] && t[1] > t[0] {
        Ok(detail)
    } else {
        Err(detail)
    }
}

const VOCAB: &[&str] = &["alpha", "beta", "gamma", "delta", "river", "bridge", "k7", "2011", "lake", "orrin"];

fn brute_bm25(docs: &[Vec<&str>], doc: usize, query: &[String], p: &Bm25Params) -> f64 {
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(|d| d.len()).sum::<usize>() as f64 / n;
    let terms: BTreeSet<&str> = query.iter().map(String::as_str).collect();
    terms
        .into_iter()
        .map(|t| {
            let tf = docs[doc].iter().filter(|w| **w == t).count() as f64;
            let df = docs.iter().filter(|d| d.contains(&t)).count() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            idf * tf * (p.k1 + 1.0) / (tf + p.k1 * (1.0 - p.b + p.b * docs[doc].len() as f64 / avgdl))
        })
        .sum()
}

fn brute_tfidf(docs: &[Vec<&str>], doc: usize, query: &[String]) -> f64 {
    let n = docs.len() as f64;
    let df = |t: &str| docs.iter().filter(|d| d.contains(&t)).count() as f64;
    let vector = |tokens: &[&str]| -> BTreeMap<String, f64> {
        let mut tf: BTreeMap<String, f64> = BTreeMap::new();
        for t in tokens.iter().filter(|t| df(t) > 0.0) {
            *tf.entry(t.to_string()).or_insert(0.0) += 1.0;
        }
        tf.into_iter().map(|(t, c)| {
            let w = (1.0 + c.ln()) * (1.0 + n / df(&t)).ln();
            (t, w)
        }).collect()
    };
    let q = vector(&query.iter().map(String::as_str).collect::<Vec<_>>());
    let d = vector(&docs[doc]);
    let dot: f64 = q.iter().map(|(t, w)| w * d.get(t).copied().unwrap_or(0.0)).sum();
    let norm = |v: &BTreeMap<String, f64>| v.values().map(|w| w * w).sum::<f64>().sqrt();
    if norm(&q) == 0.0 || norm(&d) == 0.0 {
        0.0
    } else {
        dot / (norm(&q) * norm(&d))
    }
}

fn fused_order(rows: &[(f64, f64, f64)]) -> Vec<String> {
    let chunks = rows.iter().enumerate().map(|(i, &(b, t, e))| ScoredChunk::new(format!("c{i:02}"), b, t, e)).collect();
    fuse_scores(chunks, &FusionWeights::default()).into_iter().map(|c| c.chunk_id).collect()
}

fn criterion_7() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    let params = Bm25Params::default();
    for _ in 0..100 {
        let docs: Vec<Vec<&str>> = (0..rng.random_range(1..9))
            .map(|_| (0..rng.random_range(1..14)).map(|_| VOCAB[rng.random_range(0..VOCAB.len())]).collect())
            .collect();
        let query: Vec<String> = (0..rng.random_range(1..6)).map(|_| VOCAB[rng.random_range(0..VOCAB.len())].to_string()).collect();
        let chunks: Vec<Chunk> = docs
            .iter()
            .enumerate()
            .map(|(i, d)| Chunk::new(format!("d{i}"), "https://example.org", ChunkKind::Body, d.join(" ")).unwrap())
            .collect();
        let index = LexicalIndex::build(&chunks).map_err(|e| e.to_string())?;
        for i in 0..docs.len() {
            let id = format!("d{i}");
            let b = bm25_score(&query, &id, &index, &params).map_err(|e| e.to_string())?;
            let t = tfidf_cosine(&query, &id, &index).map_err(|e| e.to_string())?;
            worst = worst.max((b - brute_bm25(&docs, i, &query, &params)).abs());
            worst = worst.max((t - brute_tfidf(&docs, i, &query)).abs());
        }
    }
    if worst > 1e-9 {
        return Err(format!("max deviation from brute force {worst:e}"));
    }
    for trial in 0..100 {
        let rows: Vec<(f64, f64, f64)> = (0..rng.random_range(1..30))
            .map(|_| (rng.random_range(0.0..20.0), rng.random_range(0.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let a = 10f64.powf(rng.random_range(-3.0..3.0));
        let c = rng.random_range(-100.0..100.0);
        let which = trial % 3;
        let scaled: Vec<(f64, f64, f64)> = rows
            .iter()
            .map(|&(b, t, e)| match which {
                0 => (a * b + c, t, e),
                1 => (b, a * t + c, e),
                _ => (b, t, a * e + c),
            })
            .collect();
        if fused_order(&rows) != fused_order(&scaled) {
            return Err(format!("fusion order changed under rescaling of scorer {which}"));
        }
    }
    within(start, Duration::from_secs(10))?;
    Ok(format!("max deviation {worst:.1e} over 100 corpora; fusion order invariant in 100 rescalings"))
}

fn criterion_8(dir: &Path) -> Check {
    let start = Instant::now();
    let cfg = std::fs::read_to_string(config()).map_err(|e| e.to_string())?;
    if !cfg.contains("hard_negative_rate = 0.5") {
        return Err("shipped config does not use hard-negative rate 0.5".into());
    }
    truthqa(dir, &["retrieve", "--all", "--k", "5"])?;
    let summary = read_json(&dir.join("retrieval/summary.json"))?;
    let queries = summary["queries"].as_u64().unwrap_or(0);
    let rate = summary["hit_rate"].as_f64().unwrap_or(0.0);
    let took = start.elapsed();
    let detail = format!("{} of {queries} queries hit in top-5 ({:.1}%); {took:.1?}", summary["hits"], 100.0 * rate);
    if queries >= 30 && summary["with_answer"].as_u64() == Some(queries) && rate >= 0.9 && took < Duration::from_secs(30) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn same_tree(a: &Path, b: &Path) -> Result<usize, String> {
    let mut files = 0;
    for entry in std::fs::read_dir(a).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        let other = b.join(entry.file_name());
        if entry.file_type().map_err(|e| e.to_string())?.is_dir() {
            files += same_tree(&entry.path(), &other)?;
        } else {
            let x = std::fs::read(entry.path()).map_err(|e| e.to_string())?;
            let y = std::fs::read(&other).map_err(|e| format!("{}: {e}", other.display()))?;
            if x != y {
                return Err(format!("{} differs", entry.path().display()));
            }
            files += 1;
        }
    }
    Ok(files)
}

fn criterion_9(first_train: &Path, scratch: &Path) -> Check {
    let second = scratch.join("train-again");
    train(&second, "curriculum")?;
    let train_files = same_tree(&first_train.join("train"), &second.join("train"))?;
    let responses = root().join("fixtures/eval/responses.jsonl");
    let responses = responses.to_str().ok_or("non-utf8 path")?;
    let (e1, e2) = (scratch.join("eval-1"), scratch.join("eval-2"));
    truthqa(&e1, &["eval", "--responses", responses])?;
    truthqa(&e2, &["eval", "--responses", responses])?;
    let eval_files = same_tree(&e1.join("eval"), &e2.join("eval"))?;
    Ok(format!("{train_files} train files and {eval_files} eval files byte-identical across reruns"))
}

fn main() {
    let scratch = tempfile::tempdir().expect("temp dir");
    let dir = |name: &str| scratch.path().join(name);

    let curriculum = train(&dir("curriculum"), "curriculum");
    let reversed = train(&dir("reversed"), "reversed");
    let mixed = train(&dir("mixed"), "mixed");

    let results: Vec<(u8, &str, Check)> = vec![
        (1, "scoring identity", criterion_1()),
        (2, "multi-turn termination suite", criterion_2()),
        (3, "GRPO numerics", criterion_3()),
        (4, "abstention collapse (reversed schedule)", criterion_4(&reversed)),
        (5, "curriculum benefit", criterion_5(&curriculum, &mixed)),
        (6, "stage trend", criterion_6(&curriculum)),
        (7, "retrieval oracle equivalence", criterion_7()),
        (8, "end-to-end retrieval fixture", criterion_8(&dir("retrieval"))),
        (9, "determinism", criterion_9(&dir("curriculum"), scratch.path())),
    ];
    let mut failed = 0;
    for (n, name, result) in &results {
        match result {
            Ok(detail) => println!("PASS criterion {n} ({name}): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
