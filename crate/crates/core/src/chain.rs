//! Chain inference: text-passing baseline and the shared-cache runtime.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{MaskPolicy, ModelId, SegmentRole};
use crate::model::{argmax, decode_step, prefill, KvCache, ModelError, ModelWeights};
use crate::tasks::{eval_exact_match, vocab, SyntheticExample, TaskError};
use crate::tensor::{Scalar, Tensor};
use crate::trainer::PromptParams;

#[derive(Debug, Error)]
pub enum ChainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("invalid chain spec: {0}")]
    Spec(String),
}

/// Where a model's unique input comes from on each activation.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum InputProvider {
    #[default]
    None,
    Fixed(Vec<u32>),
    /// Looks up the key named by the previous output's last token.
    Retrieve(Vec<(u32, u32)>),
}

impl InputProvider {
    fn provide(&self, previous: Option<&[u32]>) -> Vec<u32> {
        match self {
            InputProvider::None => Vec::new(),
            InputProvider::Fixed(x) => x.clone(),
            InputProvider::Retrieve(table) => {
                let key = previous.and_then(|p| p.last().copied()).unwrap_or(vocab::NOT_FOUND);
                let v = table.iter().find(|(k, _)| *k == key).map_or(vocab::NOT_FOUND, |&(_, v)| v);
                vec![key, v]
            }
        }
    }
}

#[derive(Debug)]
pub struct ChainModel<'a, T> {
    pub prompt: &'a PromptParams<T>,
    pub input: InputProvider,
    pub max_tokens: usize,
}

impl<T> Clone for ChainModel<'_, T> {
    fn clone(&self) -> Self {
        Self {
            prompt: self.prompt,
            input: self.input.clone(),
            max_tokens: self.max_tokens,
        }
    }
}

impl<T> Clone for ChainSpec<'_, T> {
    fn clone(&self) -> Self {
        Self {
            models: self.models.clone(),
            rounds: self.rounds,
            stop: self.stop,
            policy: self.policy,
        }
    }
}

impl<T> ChainModel<'_, T> {
    pub fn id(&self) -> ModelId {
        self.prompt.model_id
    }
}

#[derive(Debug)]
pub struct ChainSpec<'a, T> {
    pub models: Vec<ChainModel<'a, T>>,
    pub rounds: usize,
    pub stop: u32,
    pub policy: MaskPolicy,
}

impl<'a, T> ChainSpec<'a, T> {
    pub fn new(prompts: &[&'a PromptParams<T>], rounds: usize, max_tokens: usize) -> Self {
        Self {
            models: prompts
                .iter()
                .map(|&prompt| ChainModel {
                    prompt,
                    input: InputProvider::None,
                    max_tokens,
                })
                .collect(),
            rounds,
            stop: vocab::STOP,
            policy: MaskPolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ChainError> {
        if self.rounds == 0 {
            return Err(ChainError::Spec("rounds must be >= 1".into()));
        }
        for (i, m) in self.models.iter().enumerate() {
            if m.max_tokens == 0 {
                return Err(ChainError::Spec(format!("model {} has max_tokens 0", m.id())));
            }
            if self.models[..i].iter().any(|o| o.id() == m.id()) {
                return Err(ChainError::Spec(format!("duplicate model id {}", m.id())));
            }
        }
        Ok(())
    }

    /// Same spec with every retrieving model reading `table`.
    pub fn with_table(&self, table: &[(u32, u32)]) -> Self {
        let mut s = self.clone();
        for m in &mut s.models {
            if let InputProvider::Retrieve(t) = &mut m.input {
                *t = table.to_vec();
            }
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub model: ModelId,
    pub round: usize,
    pub prefilled: usize,
    /// Decode steps, the begin-of-output token included.
    pub decoded: usize,
    pub cache_before: usize,
    pub cache_after: usize,
    /// Tokens of earlier outputs re-prefilled as text in this step.
    pub reprefilled_outputs: usize,
    /// Shared-content tokens prefilled in this step.
    pub shared_prefilled: usize,
    pub wall_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub steps: Vec<TraceStep>,
    /// Caches alive at the end of the run.
    pub n_caches: usize,
    pub peak_kv_bytes: usize,
}

impl ChainTrace {
    pub fn prefill_tokens(&self) -> usize {
        self.steps.iter().map(|s| s.prefilled).sum()
    }

    pub fn prefill_by_model(&self) -> BTreeMap<ModelId, usize> {
        let mut m = BTreeMap::new();
        for s in &self.steps {
            *m.entry(s.model).or_default() += s.prefilled;
        }
        m
    }

    pub fn wall_s(&self) -> f64 {
        self.steps.iter().map(|s| s.wall_s).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainOutput {
    pub model: ModelId,
    pub round: usize,
    pub tokens: Vec<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainRun {
    pub outputs: Vec<ChainOutput>,
    pub trace: ChainTrace,
}

impl ChainRun {
    pub fn final_answer(&self) -> Vec<u32> {
        self.outputs.last().map(|o| o.tokens.clone()).unwrap_or_default()
    }
}

fn stack<T: Scalar>(rows: &[Tensor<T>]) -> Result<Tensor<T>, ModelError> {
    let refs: Vec<&Tensor<T>> = rows.iter().collect();
    Ok(Tensor::concat_rows(&refs)?)
}

/// Appends rows at consecutive positions after the cache's last entry.
struct Feed<T> {
    rows: Vec<Tensor<T>>,
    roles: Vec<SegmentRole>,
}

impl<T: Scalar> Feed<T> {
    fn new() -> Self {
        Self {
            rows: Vec::new(),
            roles: Vec::new(),
        }
    }

    fn tokens(&mut self, base: &ModelWeights<T>, ids: &[u32], role: SegmentRole) -> Result<(), ModelError> {
        if !ids.is_empty() {
            self.rows.push(base.embed_tokens(ids)?);
            self.roles.extend(std::iter::repeat_n(role, ids.len()));
        }
        Ok(())
    }

    fn prompt(&mut self, p: &PromptParams<T>) {
        self.rows.push(p.embeddings.clone());
        self.roles.extend(std::iter::repeat_n(SegmentRole::Prompt(p.model_id), p.n_tokens()));
    }

    fn len(&self) -> usize {
        self.roles.len()
    }

    fn run(self, base: &ModelWeights<T>, cache: &mut KvCache<T>, policy: MaskPolicy) -> Result<(), ModelError> {
        if self.roles.is_empty() {
            return Ok(());
        }
        let start = cache.next_position();
        let positions: Vec<u32> = (0..self.roles.len() as u32).map(|i| start + i).collect();
        prefill(base, &stack(&self.rows)?, &self.roles, &positions, cache, policy)?;
        Ok(())
    }
}

/// Greedy decode from the begin-of-output token; every emitted token is
/// fed back so the cache holds `[START y...]`. Returns `(y, steps)`.
fn greedy_decode<T: Scalar>(
    base: &ModelWeights<T>,
    cache: &mut KvCache<T>,
    m: ModelId,
    max_tokens: usize,
    stop: u32,
    policy: MaskPolicy,
) -> Result<(Vec<u32>, usize), ModelError> {
    let mut out = Vec::new();
    let mut fed = vocab::START;
    let mut steps = 0;
    loop {
        let e = base.embed_tokens(&[fed])?;
        let pos = cache.next_position();
        let step = decode_step(base, &e, pos, SegmentRole::Output(m), cache, policy)?;
        steps += 1;
        if out.len() == max_tokens {
            break;
        }
        let y = argmax(step.logits.row(0));
        if y == stop {
            break;
        }
        out.push(y);
        fed = y;
    }
    Ok((out, steps))
}

struct Activation {
    model: usize,
    round: usize,
}

fn schedule(n_models: usize, rounds: usize) -> Vec<Activation> {
    (0..rounds)
        .flat_map(|round| (0..n_models).map(move |model| Activation { model, round }))
        .collect()
}

/// Baseline: each activation prefills its context as text. Single-round
/// chains build a fresh cache per model from shared content, the previous
/// output, prompt and input; multi-round chains keep one cache per model
/// seeded with its prompt and the shared content.
pub fn run_chain_text<T: Scalar>(
    base: &ModelWeights<T>,
    spec: &ChainSpec<'_, T>,
    shared: &[u32],
) -> Result<ChainRun, ChainError> {
    spec.validate()?;
    let mut run = ChainRun::default();
    let policy = spec.policy;
    let multi = spec.rounds > 1;
    let mut caches: Vec<Option<KvCache<T>>> = vec![None; spec.models.len()];
    // index into run.outputs each model has consumed
    let mut seen = vec![0usize; spec.models.len()];
    let mut peak = 0;
    for act in schedule(spec.models.len(), spec.rounds) {
        let cm = &spec.models[act.model];
        let m = cm.id();
        let t0 = Instant::now();
        let previous = run.outputs.last().map(|o| o.tokens.as_slice());
        let input = cm.input.provide(previous);
        let mut feed = Feed::new();
        let mut reprefilled = 0;
        let mut shared_n = 0;
        let cache = if multi {
            let slot = &mut caches[act.model];
            if slot.is_none() {
                feed.prompt(cm.prompt);
                feed.tokens(base, shared, SegmentRole::SharedContent)?;
                shared_n = shared.len();
            }
            for o in &run.outputs[seen[act.model]..] {
                if o.model != m {
                    feed.tokens(base, &o.tokens, SegmentRole::UniqueInput(m))?;
                    reprefilled += o.tokens.len();
                }
            }
            slot.get_or_insert_with(|| KvCache::new(&base.config))
        } else {
            feed.tokens(base, shared, SegmentRole::SharedContent)?;
            shared_n = shared.len();
            if let Some(p) = previous {
                feed.tokens(base, p, SegmentRole::UniqueInput(m))?;
                reprefilled = p.len();
            }
            feed.prompt(cm.prompt);
            caches[act.model] = Some(KvCache::new(&base.config));
            caches[act.model].as_mut().expect("just set")
        };
        feed.tokens(base, &input, SegmentRole::UniqueInput(m))?;
        let cache_before = cache.len();
        let prefilled = feed.len();
        feed.run(base, cache, policy)?;
        let (y, decoded) = greedy_decode(base, cache, m, cm.max_tokens, spec.stop, policy)?;
        let cache_after = cache.len();
        let live: usize = if multi {
            caches.iter().flatten().map(KvCache::kv_bytes).sum()
        } else {
            caches[act.model].as_ref().map_or(0, KvCache::kv_bytes)
        };
        peak = peak.max(live);
        if !multi {
            caches[act.model] = None;
        }
        seen[act.model] = run.outputs.len() + 1;
        run.outputs.push(ChainOutput {
            model: m,
            round: act.round,
            tokens: y,
        });
        run.trace.steps.push(TraceStep {
            model: m,
            round: act.round,
            prefilled,
            decoded,
            cache_before,
            cache_after,
            reprefilled_outputs: reprefilled,
            shared_prefilled: shared_n,
            wall_s: t0.elapsed().as_secs_f64(),
        });
    }
    run.trace.n_caches = caches.iter().flatten().count();
    run.trace.peak_kv_bytes = peak;
    Ok(run)
}

/// Shared-cache runtime: one cache for the whole chain. Single-round chains
/// prefill shared content once and then each model's prompt and input after
/// the previous output; multi-round chains place every prompt ahead of the
/// shared content and afterwards only append inputs and outputs.
pub fn run_chain_fthss<T: Scalar>(
    base: &ModelWeights<T>,
    spec: &ChainSpec<'_, T>,
    shared: &[u32],
) -> Result<ChainRun, ChainError> {
    spec.validate()?;
    let mut run = ChainRun::default();
    let policy = spec.policy;
    let multi = spec.rounds > 1;
    let mut cache = KvCache::new(&base.config);
    let mut first = true;
    for act in schedule(spec.models.len(), spec.rounds) {
        let cm = &spec.models[act.model];
        let m = cm.id();
        let t0 = Instant::now();
        let previous = run.outputs.last().map(|o| o.tokens.as_slice());
        let input = cm.input.provide(previous);
        let mut feed = Feed::new();
        let mut shared_n = 0;
        if multi {
            if first {
                for other in &spec.models {
                    feed.prompt(other.prompt);
                }
                feed.tokens(base, shared, SegmentRole::SharedContent)?;
                shared_n = shared.len();
            }
        } else {
            if first {
                feed.tokens(base, shared, SegmentRole::SharedContent)?;
                shared_n = shared.len();
            }
            feed.prompt(cm.prompt);
        }
        first = false;
        feed.tokens(base, &input, SegmentRole::UniqueInput(m))?;
        let cache_before = cache.len();
        let prefilled = feed.len();
        feed.run(base, &mut cache, policy)?;
        let (y, decoded) = greedy_decode(base, &mut cache, m, cm.max_tokens, spec.stop, policy)?;
        run.outputs.push(ChainOutput {
            model: m,
            round: act.round,
            tokens: y,
        });
        run.trace.steps.push(TraceStep {
            model: m,
            round: act.round,
            prefilled,
            decoded,
            cache_before,
            cache_after: cache.len(),
            reprefilled_outputs: 0,
            shared_prefilled: shared_n,
            wall_s: t0.elapsed().as_secs_f64(),
        });
    }
    run.trace.n_caches = usize::from(!run.outputs.is_empty());
    run.trace.peak_kv_bytes = cache.kv_bytes();
    Ok(run)
}

/// Runs one prompt-tuned model standalone on a text context, the way the
/// baseline chain invokes it in a single round.
pub fn run_standalone<T: Scalar>(
    base: &ModelWeights<T>,
    prompt: &PromptParams<T>,
    shared: &[u32],
    upstream: Option<&[u32]>,
    input: &[u32],
    max_tokens: usize,
    policy: MaskPolicy,
) -> Result<Vec<u32>, ChainError> {
    let m = prompt.model_id;
    let mut cache = KvCache::new(&base.config);
    let mut feed = Feed::new();
    feed.tokens(base, shared, SegmentRole::SharedContent)?;
    if let Some(u) = upstream {
        feed.tokens(base, u, SegmentRole::UniqueInput(m))?;
    }
    feed.prompt(prompt);
    feed.tokens(base, input, SegmentRole::UniqueInput(m))?;
    feed.run(base, &mut cache, policy)?;
    Ok(greedy_decode(base, &mut cache, m, max_tokens, vocab::STOP, policy)?.0)
}

/// Per-example outcome of a paired run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedRecord {
    pub id: u64,
    pub text: Vec<ChainOutput>,
    pub fthss: Vec<ChainOutput>,
    pub text_prefill: usize,
    pub fthss_prefill: usize,
    /// `|Shared| + Σ|Y_i|` over outputs re-prefilled by the baseline.
    pub reused_tokens: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    pub n: usize,
    pub em_text: f64,
    pub em_fthss: f64,
    /// `em_fthss - em_text`.
    pub em_delta: f64,
    pub prefill_text: BTreeMap<ModelId, usize>,
    pub prefill_fthss: BTreeMap<ModelId, usize>,
    pub prefill_savings: usize,
    pub wall_text_s: f64,
    pub wall_fthss_s: f64,
    pub records: Vec<PairedRecord>,
}

/// Runs both chains over `data` and scores final answers by exact match.
pub fn compare_chains<T: Scalar>(
    base: &ModelWeights<T>,
    text_spec: &ChainSpec<'_, T>,
    fthss_spec: &ChainSpec<'_, T>,
    data: &[SyntheticExample],
) -> Result<ChainReport, ChainError> {
    let mut report = ChainReport {
        n: data.len(),
        ..Default::default()
    };
    if data.is_empty() {
        return Ok(report);
    }
    let mut golds = Vec::new();
    let mut pt = Vec::new();
    let mut pf = Vec::new();
    for ex in data {
        let t = run_chain_text(base, &text_spec.with_table(&ex.table), ex.shared())?;
        let f = run_chain_fthss(base, &fthss_spec.with_table(&ex.table), ex.shared())?;
        golds.push(ex.answer.clone());
        pt.push(t.final_answer());
        pf.push(f.final_answer());
        for (acc, tr) in [(&mut report.prefill_text, &t.trace), (&mut report.prefill_fthss, &f.trace)] {
            for (m, n) in tr.prefill_by_model() {
                *acc.entry(m).or_default() += n;
            }
        }
        report.wall_text_s += t.trace.wall_s();
        report.wall_fthss_s += f.trace.wall_s();
        report.records.push(PairedRecord {
            id: ex.id,
            text_prefill: t.trace.prefill_tokens(),
            fthss_prefill: f.trace.prefill_tokens(),
            reused_tokens: reused_tokens(&t.trace),
            text: t.outputs,
            fthss: f.outputs,
        });
    }
    report.em_text = eval_exact_match(&pt, &golds)?;
    report.em_fthss = eval_exact_match(&pf, &golds)?;
    report.em_delta = report.em_fthss - report.em_text;
    report.prefill_savings = report.records.iter().map(|r| r.text_prefill - r.fthss_prefill).sum();
    Ok(report)
}

/// Tokens the baseline prefills that the shared cache reuses: repeated
/// shared content plus every re-prefilled output.
pub fn reused_tokens(text_trace: &ChainTrace) -> usize {
    let shared_once = text_trace.steps.iter().map(|s| s.shared_prefilled).max().unwrap_or(0);
    let shared_total: usize = text_trace.steps.iter().map(|s| s.shared_prefilled).sum();
    let outputs: usize = text_trace.steps.iter().map(|s| s.reprefilled_outputs).sum();
    shared_total - shared_once + outputs
}
