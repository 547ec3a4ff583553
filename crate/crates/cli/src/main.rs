use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use kvchain::bench::{report_render, time_chain, TimingPlan};
use kvchain::chain::{run_chain_fthss, run_chain_text, ChainOutput, ChainSpec, ChainTrace, InputProvider};
use kvchain::model::{ModelConfig, ModelWeights};
use kvchain::tasks::{gen_compress_qa, gen_copy_corpus, gen_multi_round, gen_pretrain_corpus, load_jsonl, save_jsonl, SyntheticExample};
use kvchain::trainer::{
    continue_fthss, pretrain_with_warmup, subsample, train_fthss_multi_round, train_fthss_single_round_offline,
    train_fthss_single_round_online, train_standard_prompt, write_log, PromptParams, TrainConfig,
};
use kvchain::{MaskPolicy, Scalar};

const OUT_ENV: &str = "KVCHAIN_OUT";

#[derive(Parser)]
#[command(name = "kvchain", about = "Prompt-tuned model chains over a shared KV cache")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Defaults to `$KVCHAIN_OUT/<command>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    mode: Option<String>,
    #[arg(long, global = true, value_enum)]
    mask_foreign_prompts: Option<Toggle>,
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Train base weights on the synthetic pretraining corpus.
    Pretrain,
    /// Write a task dataset as JSONL.
    Gen,
    /// Tune prompts: standard, fthss-offline, fthss-online, fthss-multiround, continue.
    Train,
    /// Run a chain: text or fthss.
    Run,
    /// Cost and latency sweep over intermediate lengths.
    Bench,
    /// Cross-module invariant suites.
    Verify,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Pretrain => "pretrain",
            Command::Gen => "gen",
            Command::Train => "train",
            Command::Run => "run",
            Command::Bench => "bench",
            Command::Verify => "verify",
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "lowercase")]
enum Toggle {
    On,
    Off,
}

#[derive(ValueEnum, Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "lowercase")]
enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case")]
enum Task {
    #[default]
    CompressQa,
    MultiRound,
}

/// Every field a command may read. Unused fields are carried through to the
/// resolved config unchanged.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    seed: u64,
    out: Option<PathBuf>,
    mode: Option<String>,
    mask_foreign_prompts: bool,
    precision: Precision,
    model: ModelConfig,
    train: TrainConfig,
    // pretrain
    pretrain: TrainConfig,
    corpus_docs: usize,
    warmup_docs: usize,
    warmup_steps: usize,
    // gen
    task: Task,
    n: usize,
    n_facts: usize,
    n_distractors: usize,
    hops: usize,
    // train / run / bench
    base: Option<PathBuf>,
    data: Option<PathBuf>,
    prompts: Vec<PathBuf>,
    model_id: u8,
    continue_fraction: f64,
    rounds: usize,
    max_tokens: usize,
    retrieve: bool,
    lengths: Vec<usize>,
    trials: usize,
    decode_tokens: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            mode: None,
            mask_foreign_prompts: true,
            precision: Precision::F32,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            pretrain: TrainConfig {
                lr: 2e-3,
                steps: 3000,
                ..TrainConfig::default()
            },
            corpus_docs: 60_000,
            warmup_docs: 20_000,
            warmup_steps: 600,
            task: Task::CompressQa,
            n: 2048,
            n_facts: 3,
            n_distractors: 6,
            hops: 2,
            base: None,
            data: None,
            prompts: Vec::new(),
            model_id: 0,
            continue_fraction: 0.1,
            rounds: 1,
            max_tokens: 8,
            retrieve: false,
            lengths: vec![25, 50, 100, 180],
            trials: 10,
            decode_tokens: 8,
        }
    }
}

/// Failure kinds with their exit codes.
#[derive(Debug)]
enum Failure {
    Missing(PathBuf),
    Config(String),
    Verify(Vec<String>),
    Other(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Missing(_) => 2,
            Failure::Config(_) => 3,
            Failure::Verify(_) => 4,
            Failure::Other(_) => 1,
        }
    }

    fn record(&self) -> Value {
        match self {
            Failure::Missing(p) => serde_json::json!({"error": "missing_file", "path": p}),
            Failure::Config(m) => serde_json::json!({"error": "config", "message": m}),
            Failure::Verify(s) => serde_json::json!({"error": "verify_failed", "suites": s}),
            Failure::Other(e) => serde_json::json!({"error": "runtime", "message": format!("{e:#}")}),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn resolve(cmd: Command, common: &Common) -> Result<RunConfig, Failure> {
    let mut rc = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|_| Failure::Missing(p.clone()))?;
            serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        rc.seed = s;
    }
    if let Some(o) = &common.out {
        rc.out = Some(o.clone());
    }
    if let Some(m) = &common.mode {
        rc.mode = Some(m.clone());
    }
    if let Some(t) = common.mask_foreign_prompts {
        rc.mask_foreign_prompts = t == Toggle::On;
    }
    if let Some(p) = common.precision {
        rc.precision = p;
    }
    rc.train.seed = rc.seed;
    rc.train.mask_foreign_prompts = rc.mask_foreign_prompts;
    rc.pretrain.seed = rc.seed;
    if rc.out.is_none() {
        let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        rc.out = Some(root.join(cmd.name()));
    }
    for p in rc.base.iter().chain(&rc.data).chain(&rc.prompts) {
        if !p.exists() {
            return Err(Failure::Missing(p.clone()));
        }
    }
    Ok(rc)
}

fn out_dir(rc: &RunConfig) -> Result<PathBuf> {
    let dir = rc.out.clone().expect("resolved");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn require<'a>(p: &'a Option<PathBuf>, field: &str) -> Result<&'a Path, Failure> {
    p.as_deref().ok_or_else(|| Failure::Config(format!("`{field}` is required")))
}

fn mode<'a>(rc: &'a RunConfig, allowed: &[&'a str]) -> Result<&'a str, Failure> {
    let m = rc.mode.as_deref().unwrap_or(allowed[0]);
    if allowed.contains(&m) {
        Ok(m)
    } else {
        Err(Failure::Config(format!("mode `{m}` not one of {allowed:?}")))
    }
}

fn load_data(rc: &RunConfig) -> Result<Vec<SyntheticExample>, Failure> {
    let p = require(&rc.data, "data")?;
    Ok(load_jsonl(p).with_context(|| format!("reading {}", p.display()))?)
}

fn load_prompts<T: Scalar>(rc: &RunConfig) -> Result<Vec<PromptParams<T>>> {
    rc.prompts
        .iter()
        .map(|p| Ok(PromptParams::load(p).with_context(|| format!("reading {}", p.display()))?.0))
        .collect()
}

fn cmd_pretrain<T: Scalar>(rc: &RunConfig, dir: &Path) -> Result<Value, Failure> {
    let corpus = gen_pretrain_corpus(rc.seed + 1, rc.corpus_docs);
    let warmup = gen_copy_corpus(rc.seed + 1, rc.warmup_docs);
    let (w, log) = pretrain_with_warmup::<T>(&rc.model, &warmup, rc.warmup_steps, &corpus, &rc.pretrain)
        .context("pretraining")?;
    w.save(&dir.join("base.kvw")).context("saving weights")?;
    write_log(&dir.join("log.jsonl"), &log).context("writing log")?;
    Ok(serde_json::json!({"checkpoint": dir.join("base.kvw"), "final_loss": log.last().map(|e| e.loss)}))
}

fn cmd_gen(rc: &RunConfig, dir: &Path) -> Result<Value, Failure> {
    let data = match rc.task {
        Task::CompressQa => gen_compress_qa(rc.seed, rc.n, rc.n_facts, rc.n_distractors),
        Task::MultiRound => gen_multi_round(rc.seed, rc.n, rc.hops),
    }
    .context("generating task")?;
    let path = dir.join("data.jsonl");
    save_jsonl(&path, &data).context("writing dataset")?;
    Ok(serde_json::json!({"dataset": path, "n": data.len()}))
}

fn cmd_train<T: Scalar>(rc: &RunConfig, dir: &Path) -> Result<Value, Failure> {
    let m = mode(rc, &["standard", "fthss-offline", "fthss-online", "fthss-multiround", "continue"])?;
    let base = ModelWeights::<T>::load(require(&rc.base, "base")?).context("loading base")?;
    let data = load_data(rc)?;
    let prompts = load_prompts::<T>(rc)?;
    let refs: Vec<&PromptParams<T>> = prompts.iter().collect();
    let tc = &rc.train;
    let (trained, log) = match m {
        "standard" => {
            let (p, l) = train_standard_prompt(&base, &data, rc.model_id, tc).context("training")?;
            (vec![p], l)
        }
        "fthss-online" => {
            let (p, l) = train_fthss_single_round_online(&base, &refs, &data, tc).context("training")?;
            (vec![p], l)
        }
        "fthss-offline" => {
            let (p, l) = train_fthss_single_round_offline(&base, &refs, &data, tc, &dir.join("caches")).context("training")?;
            (vec![p], l)
        }
        "fthss-multiround" => train_fthss_multi_round(&base, &data, tc).context("training")?,
        _ => {
            let (standard, upstream) = refs
                .split_last()
                .ok_or_else(|| Failure::Config("continue needs the standard prompt last in `prompts`".into()))?;
            let n = ((data.len() as f64) * rc.continue_fraction).round() as usize;
            let small = subsample(&data, n, rc.seed);
            let (p, l) = continue_fthss(&base, upstream, standard, &small, tc).context("training")?;
            (vec![p], l)
        }
    };
    let mut written = Vec::new();
    for p in &trained {
        let path = dir.join(format!("prompt_{}.kvp", p.model_id));
        p.save(&path, &base.config).context("saving prompt")?;
        written.push(path);
    }
    write_log(&dir.join("log.jsonl"), &log).context("writing log")?;
    Ok(serde_json::json!({"prompts": written, "final_loss": log.last().map(|e| e.loss)}))
}

fn spec_for<'a, T: Scalar>(rc: &RunConfig, prompts: &'a [PromptParams<T>]) -> Result<ChainSpec<'a, T>, Failure> {
    if prompts.is_empty() {
        return Err(Failure::Config("`prompts` must list at least one checkpoint".into()));
    }
    let refs: Vec<&PromptParams<T>> = prompts.iter().collect();
    let mut spec = ChainSpec::new(&refs, rc.rounds, rc.max_tokens);
    spec.policy = MaskPolicy {
        mask_foreign_prompts: rc.mask_foreign_prompts,
    };
    if rc.retrieve {
        for m in spec.models.iter_mut().skip(1) {
            m.input = InputProvider::Retrieve(Vec::new());
        }
    }
    spec.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(spec)
}

#[derive(Serialize)]
struct OutputRow<'a> {
    id: u64,
    answer: Vec<u32>,
    gold: &'a [u32],
    outputs: &'a [ChainOutput],
}

#[derive(Serialize)]
struct TraceRow<'a> {
    id: u64,
    trace: &'a ChainTrace,
}

fn cmd_run<T: Scalar>(rc: &RunConfig, dir: &Path) -> Result<Value, Failure> {
    let m = mode(rc, &["text", "fthss"])?;
    let base = ModelWeights::<T>::load(require(&rc.base, "base")?).context("loading base")?;
    let data = load_data(rc)?;
    let prompts = load_prompts::<T>(rc)?;
    let spec = spec_for(rc, &prompts)?;
    let mut outputs = Vec::new();
    let mut traces = Vec::new();
    let mut correct = 0usize;
    for ex in &data {
        let s = spec.with_table(&ex.table);
        let run = if m == "text" { run_chain_text(&base, &s, ex.shared()) } else { run_chain_fthss(&base, &s, ex.shared()) }
            .context("running chain")?;
        correct += usize::from(run.final_answer() == ex.answer);
        outputs.push((ex.id, run.final_answer(), ex.answer.as_slice(), run.outputs));
        traces.push((ex.id, run.trace));
    }
    let rows: Vec<OutputRow> = outputs
        .iter()
        .map(|(id, a, g, o)| OutputRow {
            id: *id,
            answer: a.clone(),
            gold: g,
            outputs: o,
        })
        .collect();
    let trows: Vec<TraceRow> = traces.iter().map(|(id, t)| TraceRow { id: *id, trace: t }).collect();
    save_jsonl(&dir.join("outputs.jsonl"), &rows).context("writing outputs")?;
    save_jsonl(&dir.join("trace.jsonl"), &trows).context("writing trace")?;
    let em = correct as f64 / data.len().max(1) as f64;
    let prefill: usize = traces.iter().map(|(_, t)| t.prefill_tokens()).sum();
    Ok(serde_json::json!({"mode": m, "n": data.len(), "exact_match": em, "prefill_tokens": prefill}))
}

fn cmd_bench<T: Scalar>(rc: &RunConfig, dir: &Path) -> Result<Value, Failure> {
    let base = ModelWeights::<T>::load(require(&rc.base, "base")?).context("loading base")?;
    let data = load_data(rc)?;
    let ex = data.first().ok_or_else(|| Failure::Config("dataset is empty".into()))?;
    let prompts = load_prompts::<T>(rc)?;
    let spec = spec_for(rc, &prompts)?;
    let plan = TimingPlan {
        lengths: rc.lengths.clone(),
        trials: rc.trials,
        decode_tokens: rc.decode_tokens,
        seed: rc.seed,
    };
    let report = time_chain(&base, &spec, ex.shared(), &plan).context("timing")?;
    let path = dir.join("costs.csv");
    fs::write(&path, report_render(&report).context("rendering csv")?).context("writing csv")?;
    Ok(serde_json::json!({"report": path, "rows": report.rows.len()}))
}

fn cmd_verify(rc: &RunConfig, dir: &Path) -> Result<Value, Failure> {
    let results = kvchain::verify::run_all(rc.seed).context("running suites")?;
    write_json(&dir.join("verify.json"), &results)?;
    for r in &results {
        println!(
            "{} {:<22} worst {:.3e} threshold {:.1e} ({:.2}s)",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.worst,
            r.threshold,
            r.seconds
        );
    }
    let failed: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| r.name.clone()).collect();
    if !failed.is_empty() {
        return Err(Failure::Verify(failed));
    }
    Ok(serde_json::json!({"suites": results.len(), "passed": results.len()}))
}

fn dispatch<T: Scalar>(cmd: Command, rc: &RunConfig, dir: &Path) -> Result<Value, Failure> {
    match cmd {
        Command::Pretrain => cmd_pretrain::<T>(rc, dir),
        Command::Gen => cmd_gen(rc, dir),
        Command::Train => cmd_train::<T>(rc, dir),
        Command::Run => cmd_run::<T>(rc, dir),
        Command::Bench => cmd_bench::<T>(rc, dir),
        Command::Verify => cmd_verify(rc, dir),
    }
}

fn execute(cli: &Cli) -> Result<Value, Failure> {
    let rc = resolve(cli.command, &cli.common)?;
    let dir = out_dir(&rc)?;
    write_json(&dir.join("config.json"), &rc)?;
    match rc.precision {
        Precision::F32 => dispatch::<f32>(cli.command, &rc, &dir),
        Precision::F64 => dispatch::<f64>(cli.command, &rc, &dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{}", f.record());
            ExitCode::from(f.code())
        }
    }
}
