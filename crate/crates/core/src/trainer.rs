//! Training regimes: base pretraining, standard prompt tuning, shared-state
//! chain tuning (offline, online, multi-round), continuation and gradient checks.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::layout::{visible_with, MaskPolicy, ModelId, SegmentLayout, SegmentRole};
use crate::model::{
    embed_pieces, forward_graph, prefill, read_header, write_atomic, write_f32s, KvCache, ModelConfig, ModelError,
    ModelWeights, Piece, Reader, WeightVars, PROMPT_MAGIC,
};
use crate::tasks::{vocab, SyntheticExample, TaskError, TrainDoc};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("upstream prompt for model {0} has not been trained")]
    UntrainedUpstream(ModelId),
    #[error("no prompt for model {0}")]
    MissingPrompt(ModelId),
    #[error("loss diverged at step {0}")]
    Divergence(usize),
    #[error("missing cache file {0}")]
    MissingCache(PathBuf),
    #[error("example {0} lacks the segments this regime needs")]
    MissingRound(u64),
    #[error("empty training set")]
    Empty,
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Pretrain,
    Standard,
    FthssOffline,
    FthssOnline,
    FthssMultiround,
    Continue,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Pretrain => "pretrain",
            TrainMode::Standard => "standard",
            TrainMode::FthssOffline => "fthss-offline",
            TrainMode::FthssOnline => "fthss-online",
            TrainMode::FthssMultiround => "fthss-multiround",
            TrainMode::Continue => "continue",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub warmup_frac: f64,
    pub seed: u64,
    pub n_prompt_tokens: usize,
    pub clip_norm: f64,
    pub mask_foreign_prompts: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 300,
            batch_size: 16,
            warmup_frac: 0.05,
            seed: 0,
            n_prompt_tokens: 10,
            clip_norm: 1.0,
            mask_foreign_prompts: true,
        }
    }
}

impl TrainConfig {
    pub fn policy(&self) -> MaskPolicy {
        MaskPolicy {
            mask_foreign_prompts: self.mask_foreign_prompts,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.n_prompt_tokens == 0 || !(self.clip_norm > 0.0) {
            return Err(TrainError::Config("lr, batch_size, n_prompt_tokens and clip_norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(TrainError::Config("warmup_frac must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Linear warmup, then linear decay to zero.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = ((self.steps as f64 * self.warmup_frac).ceil() as usize).max(1);
        if step < warm {
            return self.lr * (step + 1) as f64 / warm as f64;
        }
        let rest = (self.steps - warm).max(1) as f64;
        self.lr * (1.0 - (step - warm) as f64 / rest).max(0.0)
    }
}

/// Learnable continuous prompt for one model.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptParams<T> {
    pub model_id: ModelId,
    pub embeddings: Tensor<T>,
    /// Set once the prompt has been through a training run.
    pub trained: bool,
}

impl<T: Scalar> PromptParams<T> {
    /// Small Gaussian initialization, sigma 0.02.
    pub fn init(model_id: ModelId, n_tokens: usize, d_model: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9 + model_id as u64));
        let dist = Normal::new(0.0, 0.02).expect("valid sigma");
        let data = (0..n_tokens * d_model).map(|_| T::of(dist.sample(&mut rng))).collect();
        Self {
            model_id,
            embeddings: Tensor::new(vec![n_tokens, d_model], data).expect("shape"),
            trained: false,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn cast<U: Scalar>(&self) -> PromptParams<U> {
        PromptParams {
            model_id: self.model_id,
            embeddings: self.embeddings.cast(),
            trained: self.trained,
        }
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update([self.model_id]);
        for &x in self.embeddings.data() {
            h.update(x.as_f64().to_le_bytes());
        }
        h.finalize().into()
    }

    pub fn save(&self, path: &Path, config: &ModelConfig) -> Result<(), TrainError> {
        let mut buf = Vec::new();
        crate::model::write_header(
            &mut buf,
            PROMPT_MAGIC,
            config,
            &[self.model_id as u64, self.n_tokens() as u64, self.trained as u64],
        );
        write_f32s(&mut buf, self.embeddings.data());
        write_atomic(path, &buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, ModelConfig), TrainError> {
        let bytes = fs::read(path)?;
        let mut r = Reader::new(&bytes);
        let (config, extra) = read_header(&mut r, PROMPT_MAGIC, 3)?;
        let n = extra[1] as usize;
        let data = r.f32s(n * config.d_model)?.into_iter().map(|x| T::of(x as f64)).collect();
        r.finish()?;
        Ok((
            Self {
                model_id: extra[0] as ModelId,
                embeddings: Tensor::new(vec![n, config.d_model], data)?,
                trained: extra[2] != 0,
            },
            config,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub mode: String,
}

pub fn write_log(path: &Path, log: &[LogEntry]) -> Result<(), TrainError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for e in log {
        writeln!(f, "{}", serde_json::to_string(e).expect("log entry serializes"))?;
    }
    f.flush()?;
    Ok(())
}

/// Token run or a model's prompt block.
#[derive(Clone, Debug, PartialEq)]
pub enum Content {
    Tokens(Vec<u32>),
    Prompt(ModelId, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Part {
    pub role: SegmentRole,
    pub content: Content,
    /// Next-token targets for output parts.
    pub targets: Option<Vec<u32>>,
}

impl Part {
    fn len(&self) -> usize {
        match &self.content {
            Content::Tokens(t) => t.len(),
            Content::Prompt(_, n) => *n,
        }
    }
}

/// A role-labeled training sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSeq {
    pub start_position: u32,
    pub parts: Vec<Part>,
}

impl TrainSeq {
    pub fn new(start_position: u32) -> Self {
        Self {
            start_position,
            parts: Vec::new(),
        }
    }

    pub fn tokens(&mut self, role: SegmentRole, toks: &[u32]) -> &mut Self {
        if !toks.is_empty() {
            self.parts.push(Part {
                role,
                content: Content::Tokens(toks.to_vec()),
                targets: None,
            });
        }
        self
    }

    pub fn prompt(&mut self, m: ModelId, n: usize) -> &mut Self {
        self.parts.push(Part {
            role: SegmentRole::Prompt(m),
            content: Content::Prompt(m, n),
            targets: None,
        });
        self
    }

    /// `[START y...]` fed, `[y... STOP]` scored.
    pub fn output(&mut self, m: ModelId, y: &[u32]) -> &mut Self {
        let mut fed = vec![vocab::START];
        fed.extend_from_slice(y);
        let mut targets = y.to_vec();
        targets.push(vocab::STOP);
        self.parts.push(Part {
            role: SegmentRole::Output(m),
            content: Content::Tokens(fed),
            targets: Some(targets),
        });
        self
    }

    pub fn len(&self) -> usize {
        self.parts.iter().map(Part::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layout(&self) -> SegmentLayout {
        let mut l = SegmentLayout::new(self.start_position);
        for p in &self.parts {
            l.push(p.role, p.len());
        }
        l
    }

    pub fn roles(&self) -> Vec<SegmentRole> {
        self.layout().roles()
    }

    pub fn positions(&self) -> Vec<u32> {
        crate::layout::assign_positions(&self.layout())
    }

    /// Per-token targets; non-output positions hold STOP and are unscored.
    pub fn targets(&self) -> Vec<u32> {
        let mut t = Vec::with_capacity(self.len());
        for p in &self.parts {
            match &p.targets {
                Some(x) => t.extend_from_slice(x),
                None => t.extend(std::iter::repeat_n(vocab::STOP, p.len())),
            }
        }
        t
    }

    pub fn loss_mask(&self, m: ModelId) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.len());
        for p in &self.parts {
            let on = p.targets.is_some() && p.role == SegmentRole::Output(m);
            mask.extend(std::iter::repeat_n(on, p.len()));
        }
        mask
    }

    /// Splits before part `at`; the tail continues the head's positions.
    pub fn split(&self, at: usize) -> (TrainSeq, TrainSeq) {
        let head = TrainSeq {
            start_position: self.start_position,
            parts: self.parts[..at].to_vec(),
        };
        let tail = TrainSeq {
            start_position: self.start_position + head.len() as u32,
            parts: self.parts[at..].to_vec(),
        };
        (head, tail)
    }
}

fn invocation_order(ex: &SyntheticExample) -> Vec<ModelId> {
    let mut order = Vec::new();
    for inv in ex.invocations() {
        if !order.contains(&inv.model) {
            order.push(inv.model);
        }
    }
    order
}

/// Text-passing layout for model `m`: shared content, the previous model's
/// output as text, then prompt, unique input and output.
pub fn standard_seq(ex: &SyntheticExample, m: ModelId, n_prompt: usize) -> Result<TrainSeq, TrainError> {
    let inv = ex.invocations();
    let k = inv.iter().position(|i| i.model == m).ok_or(TrainError::MissingRound(ex.id))?;
    let mut s = TrainSeq::new(0);
    s.tokens(SegmentRole::SharedContent, ex.shared());
    if k > 0 {
        s.tokens(SegmentRole::UniqueInput(m), &inv[k - 1].output);
    }
    s.prompt(m, n_prompt).tokens(SegmentRole::UniqueInput(m), &inv[k].input).output(m, &inv[k].output);
    Ok(s)
}

/// Single model answering straight from the shared content.
pub fn direct_seq(ex: &SyntheticExample, m: ModelId, n_prompt: usize) -> TrainSeq {
    let mut s = TrainSeq::new(0);
    s.tokens(SegmentRole::SharedContent, ex.shared()).prompt(m, n_prompt).output(m, &ex.answer);
    s
}

/// Combined single-round layout up to and including model `m`:
/// shared, then prompt, input and output for every model in chain order.
pub fn fthss_seq(ex: &SyntheticExample, m: ModelId, n_prompt: usize) -> Result<TrainSeq, TrainError> {
    let inv = ex.invocations();
    let k = inv.iter().position(|i| i.model == m).ok_or(TrainError::MissingRound(ex.id))?;
    let mut s = TrainSeq::new(0);
    s.tokens(SegmentRole::SharedContent, ex.shared());
    for i in &inv[..=k] {
        s.prompt(i.model, n_prompt)
            .tokens(SegmentRole::UniqueInput(i.model), &i.input)
            .output(i.model, &i.output);
    }
    Ok(s)
}

/// Multi-round layout with every prompt at the front, then shared content
/// and all rounds in order.
pub fn multi_round_fthss_seq(ex: &SyntheticExample, n_prompt: usize) -> Result<TrainSeq, TrainError> {
    let inv = ex.invocations();
    if inv.is_empty() {
        return Err(TrainError::MissingRound(ex.id));
    }
    let mut s = TrainSeq::new(0);
    for m in invocation_order(ex) {
        s.prompt(m, n_prompt);
    }
    s.tokens(SegmentRole::SharedContent, ex.shared());
    for i in &inv {
        s.tokens(SegmentRole::UniqueInput(i.model), &i.input).output(i.model, &i.output);
    }
    Ok(s)
}

/// Multi-round text-passing view of model `m`: own prompt, shared content,
/// then foreign outputs as plain text interleaved with own inputs and outputs.
pub fn multi_round_text_seq(ex: &SyntheticExample, m: ModelId, n_prompt: usize) -> Result<TrainSeq, TrainError> {
    let inv = ex.invocations();
    if !inv.iter().any(|i| i.model == m) {
        return Err(TrainError::MissingRound(ex.id));
    }
    let mut s = TrainSeq::new(0);
    s.prompt(m, n_prompt).tokens(SegmentRole::SharedContent, ex.shared());
    for i in &inv {
        if i.model == m {
            s.tokens(SegmentRole::UniqueInput(m), &i.input).output(m, &i.output);
        } else {
            s.tokens(SegmentRole::UniqueInput(m), &i.output);
        }
    }
    Ok(s)
}

/// Builds the graph for `seq` and returns the summed loss of `trained` models.
#[allow(clippy::too_many_arguments)]
pub fn seq_loss<T: Scalar>(
    g: &mut Graph<T>,
    wv: &WeightVars,
    config: &ModelConfig,
    seq: &TrainSeq,
    prompts: &BTreeMap<ModelId, Var>,
    trained: &[ModelId],
    past: Option<&KvCache<T>>,
    policy: MaskPolicy,
) -> Result<Var, TrainError> {
    let mut pieces = Vec::new();
    for p in &seq.parts {
        match &p.content {
            Content::Tokens(t) => pieces.push(Piece::Tokens(t)),
            Content::Prompt(m, _) => pieces.push(Piece::Embeddings(*prompts.get(m).ok_or(TrainError::MissingPrompt(*m))?)),
        }
    }
    let x = embed_pieces(g, wv, &pieces)?;
    let out = forward_graph(g, wv, config, x, &seq.positions(), &seq.roles(), past, policy)?;
    let targets = seq.targets();
    let mut total: Option<Var> = None;
    for &m in trained {
        let l = g.cross_entropy(out.logits, &targets, &seq.loss_mask(m))?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    total.ok_or(TrainError::Empty)
}

struct Adam<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    fn new(params: &[Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>], lr: f64) {
        let (b1, b2, eps) = (T::of(0.9), T::of(0.999), T::of(1e-8));
        self.t += 1;
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let lr = T::of(lr);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = b1 * m[j] + (T::one() - b1) * g;
                v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *x -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Example pool drawn from starting at `from_step`.
#[derive(Clone, Copy, Debug)]
struct Pool {
    from_step: usize,
    n: usize,
}

/// Shared optimization loop. `example_loss` builds one example's loss from
/// the bound parameter vars and `(pool, index)`; gradients are summed over
/// the batch in order.
fn train_loop<T: Scalar>(
    tc: &TrainConfig,
    pools: &[Pool],
    mut params: Vec<Tensor<T>>,
    mode: TrainMode,
    mut example_loss: impl FnMut(&mut Graph<T>, &[Var], usize, usize) -> Result<Var, TrainError>,
) -> Result<(Vec<Tensor<T>>, Vec<LogEntry>), TrainError> {
    tc.validate()?;
    if tc.steps > 0 && pools.iter().any(|p| p.n == 0 && p.from_step < tc.steps) {
        return Err(TrainError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut pool = 0;
    let mut adam = Adam::new(&params);
    let mut log = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        while pool + 1 < pools.len() && pools[pool + 1].from_step <= step {
            pool += 1;
            order.clear();
            cursor = 0;
        }
        let mut grads: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        let mut loss_sum = 0.0;
        let shared: Vec<Arc<Tensor<T>>> = params.iter().map(|p| Arc::new(p.clone())).collect();
        for _ in 0..tc.batch_size {
            if cursor == order.len() {
                order = (0..pools[pool].n).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            let mut g = Graph::new();
            let vars: Vec<Var> = shared.iter().map(|p| g.param_shared(Arc::clone(p))).collect();
            let loss = example_loss(&mut g, &vars, pool, idx)?;
            g.backward(loss)?;
            loss_sum += g.value(loss).data()[0].as_f64();
            for (acc, &v) in grads.iter_mut().zip(&vars) {
                if let Some(gr) = g.grad(v) {
                    for (a, &x) in acc.iter_mut().zip(gr) {
                        *a += x;
                    }
                }
            }
        }
        let inv_b = T::of(1.0 / tc.batch_size as f64);
        let mut sq = 0.0;
        for gr in grads.iter_mut() {
            for x in gr.iter_mut() {
                *x *= inv_b;
                sq += x.as_f64() * x.as_f64();
            }
        }
        let norm = sq.sqrt();
        let loss = loss_sum / tc.batch_size as f64;
        if !loss.is_finite() || !norm.is_finite() {
            return Err(TrainError::Divergence(step));
        }
        if norm > tc.clip_norm {
            let s = T::of(tc.clip_norm / norm);
            for gr in grads.iter_mut() {
                for x in gr.iter_mut() {
                    *x *= s;
                }
            }
        }
        adam.step(&mut params, &grads, tc.lr_at(step));
        log.push(LogEntry {
            step,
            loss,
            grad_norm: norm,
            mode: mode.name().to_string(),
        });
    }
    Ok((params, log))
}

/// Trains every base weight on next-token loss over the scored doc positions.
pub fn pretrain_base<T: Scalar>(
    config: &ModelConfig,
    corpus: &[TrainDoc],
    tc: &TrainConfig,
) -> Result<(ModelWeights<T>, Vec<LogEntry>), TrainError> {
    let init = ModelWeights::<T>::init(config, tc.seed)?;
    continue_pretrain(&init, corpus, tc)
}

/// Further base training from existing weights.
pub fn continue_pretrain<T: Scalar>(
    init: &ModelWeights<T>,
    corpus: &[TrainDoc],
    tc: &TrainConfig,
) -> Result<(ModelWeights<T>, Vec<LogEntry>), TrainError> {
    staged_pretrain(init, &[], 0, corpus, tc)
}

/// Base pretraining that draws from `warmup` for the first `warmup_steps`
/// steps and from `corpus` afterwards, under one optimizer and schedule.
pub fn pretrain_with_warmup<T: Scalar>(
    config: &ModelConfig,
    warmup: &[TrainDoc],
    warmup_steps: usize,
    corpus: &[TrainDoc],
    tc: &TrainConfig,
) -> Result<(ModelWeights<T>, Vec<LogEntry>), TrainError> {
    let init = ModelWeights::<T>::init(config, tc.seed)?;
    staged_pretrain(&init, warmup, warmup_steps, corpus, tc)
}

fn staged_pretrain<T: Scalar>(
    init: &ModelWeights<T>,
    warmup: &[TrainDoc],
    warmup_steps: usize,
    corpus: &[TrainDoc],
    tc: &TrainConfig,
) -> Result<(ModelWeights<T>, Vec<LogEntry>), TrainError> {
    if corpus.is_empty() || (warmup_steps > 0 && warmup.is_empty()) {
        return Err(TrainError::Empty);
    }
    let config = init.config.clone();
    let params: Vec<Tensor<T>> = init.tensors().iter().map(|t| (**t).clone()).collect();
    let mut pools = Vec::new();
    if warmup_steps > 0 {
        pools.push(Pool {
            from_step: 0,
            n: warmup.len(),
        });
    }
    pools.push(Pool {
        from_step: warmup_steps,
        n: corpus.len(),
    });
    let docs: [&[TrainDoc]; 2] = if warmup_steps > 0 { [warmup, corpus] } else { [corpus, corpus] };
    let (params, log) = train_loop(tc, &pools, params, TrainMode::Pretrain, |g, vars, pool, i| {
        let wv = WeightVars::from_vars(vars.to_vec());
        doc_loss(g, &wv, &config, &docs[pool][i])
    })?;
    Ok((ModelWeights::from_tensors(&config, params)?, log))
}

fn doc_loss<T: Scalar>(g: &mut Graph<T>, wv: &WeightVars, config: &ModelConfig, doc: &TrainDoc) -> Result<Var, TrainError> {
    let inputs = doc.inputs();
    let x = embed_pieces(g, wv, &[Piece::Tokens(inputs)])?;
    let positions: Vec<u32> = (0..inputs.len() as u32).collect();
    let roles = vec![SegmentRole::Output(0); inputs.len()];
    let out = forward_graph(g, wv, config, x, &positions, &roles, None, MaskPolicy::default())?;
    Ok(g.cross_entropy(out.logits, doc.targets(), &doc.loss)?)
}

/// Mean scored next-token loss of `docs`.
pub fn eval_doc_loss<T: Scalar>(weights: &ModelWeights<T>, docs: &[TrainDoc]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for d in docs {
        let mut g = Graph::new();
        let wv = WeightVars::bind(&mut g, weights, false);
        let l = doc_loss(&mut g, &wv, &weights.config, d)?;
        total += g.value(l).data()[0].as_f64();
    }
    Ok(total / docs.len().max(1) as f64)
}

/// Generic prompt-tuning run over prebuilt sequences.
fn tune_prompts<T: Scalar>(
    base: &ModelWeights<T>,
    trainable: Vec<PromptParams<T>>,
    frozen: &[&PromptParams<T>],
    n_examples: usize,
    tc: &TrainConfig,
    mode: TrainMode,
    mut seq_for: impl FnMut(usize) -> Result<(TrainSeq, Option<Arc<KvCache<T>>>), TrainError>,
) -> Result<(Vec<PromptParams<T>>, Vec<LogEntry>), TrainError> {
    let ids: Vec<ModelId> = trainable.iter().map(|p| p.model_id).collect();
    let params: Vec<Tensor<T>> = trainable.iter().map(|p| p.embeddings.clone()).collect();
    let frozen_t: Vec<(ModelId, Arc<Tensor<T>>)> =
        frozen.iter().map(|p| (p.model_id, Arc::new(p.embeddings.clone()))).collect();
    let policy = tc.policy();
    let pools = [Pool {
        from_step: 0,
        n: n_examples,
    }];
    let (params, log) = train_loop(tc, &pools, params, mode, |g, vars, _, i| {
        let wv = WeightVars::bind(g, base, false);
        let mut prompts = BTreeMap::new();
        for (m, t) in &frozen_t {
            prompts.insert(*m, g.shared(Arc::clone(t)));
        }
        for (m, &v) in ids.iter().zip(vars) {
            prompts.insert(*m, v);
        }
        let (seq, past) = seq_for(i)?;
        seq_loss(g, &wv, &base.config, &seq, &prompts, &ids, past.as_deref(), policy)
    })?;
    let out = trainable
        .into_iter()
        .zip(params)
        .map(|(p, e)| PromptParams {
            model_id: p.model_id,
            embeddings: e,
            trained: tc.steps > 0 || p.trained,
        })
        .collect();
    Ok((out, log))
}

fn check_upstream<T>(p: &PromptParams<T>) -> Result<(), TrainError> {
    if !p.trained {
        return Err(TrainError::UntrainedUpstream(p.model_id));
    }
    Ok(())
}

/// Prompt tuning of model `m` in the text-passing layout.
pub fn train_standard_prompt<T: Scalar>(
    base: &ModelWeights<T>,
    data: &[SyntheticExample],
    m: ModelId,
    tc: &TrainConfig,
) -> Result<(PromptParams<T>, Vec<LogEntry>), TrainError> {
    let init = PromptParams::init(m, tc.n_prompt_tokens, base.config.d_model, tc.seed);
    let seqs: Vec<TrainSeq> = data
        .iter()
        .map(|ex| standard_seq(ex, m, tc.n_prompt_tokens))
        .collect::<Result<_, _>>()?;
    let (mut p, log) = tune_prompts(base, vec![init], &[], seqs.len(), tc, TrainMode::Standard, |i| {
        Ok((seqs[i].clone(), None))
    })?;
    Ok((p.remove(0), log))
}

/// Prompt tuning of a lone model mapping shared content straight to the answer.
pub fn train_direct_prompt<T: Scalar>(
    base: &ModelWeights<T>,
    data: &[SyntheticExample],
    m: ModelId,
    tc: &TrainConfig,
) -> Result<(PromptParams<T>, Vec<LogEntry>), TrainError> {
    let init = PromptParams::init(m, tc.n_prompt_tokens, base.config.d_model, tc.seed);
    let seqs: Vec<TrainSeq> = data.iter().map(|ex| direct_seq(ex, m, tc.n_prompt_tokens)).collect();
    let (mut p, log) = tune_prompts(base, vec![init], &[], seqs.len(), tc, TrainMode::Standard, |i| {
        Ok((seqs[i].clone(), None))
    })?;
    Ok((p.remove(0), log))
}

/// Online shared-state tuning of the last model in chain order, recomputing
/// upstream states inside one masked combined pass.
pub fn train_fthss_single_round_online<T: Scalar>(
    base: &ModelWeights<T>,
    upstream: &[&PromptParams<T>],
    data: &[SyntheticExample],
    tc: &TrainConfig,
) -> Result<(PromptParams<T>, Vec<LogEntry>), TrainError> {
    let m = next_model(upstream);
    let init = PromptParams::init(m, tc.n_prompt_tokens, base.config.d_model, tc.seed);
    fthss_online_from(base, upstream, init, data, tc, TrainMode::FthssOnline)
}

fn next_model<T>(upstream: &[&PromptParams<T>]) -> ModelId {
    upstream.iter().map(|p| p.model_id + 1).max().unwrap_or(0)
}

fn fthss_online_from<T: Scalar>(
    base: &ModelWeights<T>,
    upstream: &[&PromptParams<T>],
    init: PromptParams<T>,
    data: &[SyntheticExample],
    tc: &TrainConfig,
    mode: TrainMode,
) -> Result<(PromptParams<T>, Vec<LogEntry>), TrainError> {
    for p in upstream {
        check_upstream(p)?;
        if p.n_tokens() != tc.n_prompt_tokens {
            return Err(TrainError::Config("upstream prompt length differs from n_prompt_tokens".into()));
        }
    }
    let m = init.model_id;
    let seqs: Vec<TrainSeq> = data
        .iter()
        .map(|ex| fthss_seq(ex, m, tc.n_prompt_tokens))
        .collect::<Result<_, _>>()?;
    let (mut p, log) = tune_prompts(base, vec![init], upstream, seqs.len(), tc, mode, |i| Ok((seqs[i].clone(), None)))?;
    Ok((p.remove(0), log))
}

/// Hash tying an offline cache to the base weights, upstream prompts and mask policy.
pub fn cache_key<T: Scalar>(base: &ModelWeights<T>, upstream: &[&PromptParams<T>], policy: MaskPolicy) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(base.digest());
    for p in upstream {
        h.update(p.digest());
    }
    h.update([policy.mask_foreign_prompts as u8]);
    h.finalize().into()
}

pub fn cache_path(dir: &Path, ex: &SyntheticExample, key: &[u8; 32]) -> PathBuf {
    let tag: String = key[..6].iter().map(|b| format!("{b:02x}")).collect();
    dir.join(format!("ex{:06}-{tag}.kv", ex.id))
}

/// Offline stage 1: prefill each example's upstream side and store the entries
/// the downstream model can see. Returns the cache key.
pub fn materialize_upstream_caches<T: Scalar>(
    base: &ModelWeights<T>,
    upstream: &[&PromptParams<T>],
    data: &[SyntheticExample],
    n_prompt: usize,
    policy: MaskPolicy,
    dir: &Path,
) -> Result<[u8; 32], TrainError> {
    for p in upstream {
        check_upstream(p)?;
    }
    let m = next_model(upstream);
    let key = cache_key(base, upstream, policy);
    fs::create_dir_all(dir)?;
    for ex in data {
        let seq = fthss_seq(ex, m, n_prompt)?;
        let split = downstream_start(&seq, m)?;
        let (head, _) = seq.split(split);
        let cache = prefill_seq(base, &head, upstream, policy)?;
        let visible = cache.filter(|r| visible_with(SegmentRole::Output(m), r, policy));
        visible.save(&cache_path(dir, ex, &key), &key)?;
    }
    Ok(key)
}

fn downstream_start(seq: &TrainSeq, m: ModelId) -> Result<usize, TrainError> {
    seq.parts
        .iter()
        .position(|p| p.role == SegmentRole::Prompt(m))
        .ok_or(TrainError::MissingPrompt(m))
}

/// Prefills a prompt-bearing sequence into a fresh cache.
pub fn prefill_seq<T: Scalar>(
    base: &ModelWeights<T>,
    seq: &TrainSeq,
    prompts: &[&PromptParams<T>],
    policy: MaskPolicy,
) -> Result<KvCache<T>, TrainError> {
    let mut rows = Vec::new();
    for p in &seq.parts {
        match &p.content {
            Content::Tokens(t) => rows.push(base.embed_tokens(t)?),
            Content::Prompt(m, _) => rows.push(
                prompts
                    .iter()
                    .find(|q| q.model_id == *m)
                    .ok_or(TrainError::MissingPrompt(*m))?
                    .embeddings
                    .clone(),
            ),
        }
    }
    let refs: Vec<&Tensor<T>> = rows.iter().collect();
    let x = Tensor::concat_rows(&refs)?;
    let mut cache = KvCache::new(&base.config);
    prefill(base, &x, &seq.roles(), &seq.positions(), &mut cache, policy)?;
    Ok(cache)
}

/// Offline shared-state tuning: stage 1 writes upstream caches to `dir`,
/// stage 2 trains the downstream prompt over the reloaded caches.
pub fn train_fthss_single_round_offline<T: Scalar>(
    base: &ModelWeights<T>,
    upstream: &[&PromptParams<T>],
    data: &[SyntheticExample],
    tc: &TrainConfig,
    dir: &Path,
) -> Result<(PromptParams<T>, Vec<LogEntry>), TrainError> {
    let key = materialize_upstream_caches(base, upstream, data, tc.n_prompt_tokens, tc.policy(), dir)?;
    train_fthss_from_caches(base, upstream, data, tc, dir, &key)
}

/// Offline stage 2 alone, over caches written earlier.
pub fn train_fthss_from_caches<T: Scalar>(
    base: &ModelWeights<T>,
    upstream: &[&PromptParams<T>],
    data: &[SyntheticExample],
    tc: &TrainConfig,
    dir: &Path,
    key: &[u8; 32],
) -> Result<(PromptParams<T>, Vec<LogEntry>), TrainError> {
    let m = next_model(upstream);
    let init = PromptParams::init(m, tc.n_prompt_tokens, base.config.d_model, tc.seed);
    let mut tails = Vec::with_capacity(data.len());
    for ex in data {
        let seq = fthss_seq(ex, m, tc.n_prompt_tokens)?;
        let (_, tail) = seq.split(downstream_start(&seq, m)?);
        let path = cache_path(dir, ex, key);
        if !path.exists() {
            return Err(TrainError::MissingCache(path));
        }
        tails.push((tail, path));
    }
    let (mut p, log) = tune_prompts(base, vec![init], &[], tails.len(), tc, TrainMode::FthssOffline, |i| {
        let cache = KvCache::load(&tails[i].1, Some(key))?;
        Ok((tails[i].0.clone(), Some(Arc::new(cache))))
    })?;
    Ok((p.remove(0), log))
}

/// Joint multi-round tuning of every model's prompt on the front-prompt layout.
pub fn train_fthss_multi_round<T: Scalar>(
    base: &ModelWeights<T>,
    data: &[SyntheticExample],
    tc: &TrainConfig,
) -> Result<(Vec<PromptParams<T>>, Vec<LogEntry>), TrainError> {
    let first = data.first().ok_or(TrainError::Empty)?;
    let models = invocation_order(first);
    let seqs: Vec<TrainSeq> = data
        .iter()
        .map(|ex| {
            let inv = ex.invocations();
            if models.iter().any(|m| !inv.iter().any(|i| i.model == *m)) {
                return Err(TrainError::MissingRound(ex.id));
            }
            multi_round_fthss_seq(ex, tc.n_prompt_tokens)
        })
        .collect::<Result<_, _>>()?;
    let inits = models
        .iter()
        .map(|&m| PromptParams::init(m, tc.n_prompt_tokens, base.config.d_model, tc.seed))
        .collect();
    tune_prompts(base, inits, &[], seqs.len(), tc, TrainMode::FthssMultiround, |i| Ok((seqs[i].clone(), None)))
}

/// Multi-round text-passing tuning of model `m` (the baseline chain).
pub fn train_multi_round_text<T: Scalar>(
    base: &ModelWeights<T>,
    data: &[SyntheticExample],
    m: ModelId,
    tc: &TrainConfig,
) -> Result<(PromptParams<T>, Vec<LogEntry>), TrainError> {
    let init = PromptParams::init(m, tc.n_prompt_tokens, base.config.d_model, tc.seed);
    let seqs: Vec<TrainSeq> = data
        .iter()
        .map(|ex| multi_round_text_seq(ex, m, tc.n_prompt_tokens))
        .collect::<Result<_, _>>()?;
    let (mut p, log) = tune_prompts(base, vec![init], &[], seqs.len(), tc, TrainMode::Standard, |i| {
        Ok((seqs[i].clone(), None))
    })?;
    Ok((p.remove(0), log))
}

/// Online shared-state tuning that starts from a standard checkpoint.
pub fn continue_fthss<T: Scalar>(
    base: &ModelWeights<T>,
    upstream: &[&PromptParams<T>],
    standard: &PromptParams<T>,
    small_data: &[SyntheticExample],
    tc: &TrainConfig,
) -> Result<(PromptParams<T>, Vec<LogEntry>), TrainError> {
    check_upstream(standard)?;
    if small_data.is_empty() {
        return Ok((standard.clone(), Vec::new()));
    }
    fthss_online_from(base, upstream, standard.clone(), small_data, tc, TrainMode::Continue)
}

/// Central-difference check of `loss` at `x` over `n_coords` sampled
/// coordinates; returns the largest relative error.
pub fn grad_check(
    loss: impl Fn(&Tensor<f64>) -> Result<(f64, Vec<f64>), TrainError>,
    x: &Tensor<f64>,
    step: f64,
    n_coords: usize,
    seed: u64,
) -> Result<f64, TrainError> {
    let (_, analytic) = loss(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..x.numel()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(n_coords.max(1));
    let mut worst: f64 = 0.0;
    for &i in &idx {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (loss(&plus)?.0 - loss(&minus)?.0) / (2.0 * step);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Loss and prompt gradient of one example's online objective for the last
/// model in chain order.
pub fn fthss_online_loss_and_grad<T: Scalar>(
    base: &ModelWeights<T>,
    upstream: &[&PromptParams<T>],
    prompt: &Tensor<T>,
    ex: &SyntheticExample,
    policy: MaskPolicy,
) -> Result<(f64, Vec<T>), TrainError> {
    let m = next_model(upstream);
    let seq = fthss_seq(ex, m, prompt.rows())?;
    let mut g = Graph::new();
    let wv = WeightVars::bind(&mut g, base, false);
    let mut prompts = BTreeMap::new();
    for p in upstream {
        prompts.insert(p.model_id, g.constant(p.embeddings.clone()));
    }
    let pv = g.param(prompt.clone());
    prompts.insert(m, pv);
    let l = seq_loss(&mut g, &wv, &base.config, &seq, &prompts, &[m], None, policy)?;
    g.backward(l)?;
    let upstream_grads: Vec<bool> = upstream.iter().map(|p| g.grad(prompts[&p.model_id]).is_some()).collect();
    debug_assert!(upstream_grads.iter().all(|b| !b));
    Ok((g.value(l).data()[0].as_f64(), g.grad(pv).map(<[T]>::to_vec).unwrap_or_default()))
}

/// Random data subset helper for continuation runs.
pub fn subsample<T: Clone>(data: &[T], n: usize, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(n);
    idx.sort_unstable();
    idx.into_iter().map(|i| data[i].clone()).collect()
}
