//! Cost accounting (prefill tokens, attention FLOPs, KV bytes) and
//! wall-clock timing of the downstream model.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{ChainError, ChainSpec, ChainTrace, TraceStep};
use crate::layout::{MaskPolicy, ModelId, SegmentRole};
use crate::model::{argmax, decode_step, prefill, KvCache, ModelConfig, ModelError, ModelWeights};
use crate::tasks::vocab;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid bench setup: {0}")]
    Setup(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheMode {
    Baseline,
    Fthss,
}

/// Bytes of K and V over `positions` entries; the baseline keeps one copy
/// per model.
pub fn kv_bytes(
    layers: usize,
    kv_heads: usize,
    head_dim: usize,
    positions: usize,
    bytes_per_scalar: usize,
    n_models: usize,
    mode: CacheMode,
) -> usize {
    let c = 2 * layers * kv_heads * head_dim * positions * bytes_per_scalar;
    match mode {
        CacheMode::Baseline => n_models * c,
        CacheMode::Fthss => c,
    }
}

/// Score plus value FLOPs of one attention call.
pub fn attention_core_flops(q_len: usize, kv_len: usize, heads: usize, head_dim: usize, layers: usize) -> f64 {
    2.0 * (2.0 * q_len as f64 * kv_len as f64 * head_dim as f64) * heads as f64 * layers as f64
}

/// Q, K, V and output projection FLOPs for `q_len` rows.
fn projection_flops(q_len: usize, config: &ModelConfig) -> f64 {
    let d = config.d_model as f64;
    4.0 * 2.0 * q_len as f64 * d * d * config.n_layers as f64
}

/// One step's attention FLOPs: the prefill call, then each decode step
/// against the growing cache.
pub fn step_flops(config: &ModelConfig, s: &TraceStep) -> f64 {
    let (h, hd, l) = (config.n_heads, config.head_dim, config.n_layers);
    let mut f = 0.0;
    let mut kv = s.cache_before;
    if s.prefilled > 0 {
        kv += s.prefilled;
        f += attention_core_flops(s.prefilled, kv, h, hd, l) + projection_flops(s.prefilled, config);
    }
    for _ in 0..s.decoded {
        kv += 1;
        f += attention_core_flops(1, kv, h, hd, l) + projection_flops(1, config);
    }
    f
}

pub fn attention_flops(config: &ModelConfig, trace: &ChainTrace) -> f64 {
    trace.steps.iter().map(|s| step_flops(config, s)).sum()
}

pub fn count_prefill_tokens(trace: &ChainTrace) -> BTreeMap<ModelId, usize> {
    trace.prefill_by_model()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub mode: CacheMode,
    pub intermediate_tokens: usize,
    pub prefill_tokens: usize,
    pub attn_flops: f64,
    pub kv_bytes: usize,
    pub mean_s: f64,
    pub std_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn rows_for(&self, mode: CacheMode) -> Vec<&CostRow> {
        let mut r: Vec<&CostRow> = self.rows.iter().filter(|r| r.mode == mode).collect();
        r.sort_by_key(|r| r.intermediate_tokens);
        r
    }

    /// `(length, baseline − fthss FLOPs)` over lengths present in both modes.
    pub fn flop_savings(&self) -> Vec<(f64, f64)> {
        let fth: BTreeMap<usize, f64> = self
            .rows_for(CacheMode::Fthss)
            .iter()
            .map(|r| (r.intermediate_tokens, r.attn_flops))
            .collect();
        self.rows_for(CacheMode::Baseline)
            .iter()
            .filter_map(|b| fth.get(&b.intermediate_tokens).map(|f| (b.intermediate_tokens as f64, b.attn_flops - f)))
            .collect()
    }
}

pub fn report_render(report: &CostReport) -> Result<String, BenchError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(["mode", "intermediate_tokens", "prefill_tokens", "attn_flops", "kv_bytes", "mean_s", "std_s"])?;
    for r in &report.rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| BenchError::Setup(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn report_parse(text: &str) -> Result<CostReport, BenchError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let rows = r.deserialize().collect::<Result<Vec<CostRow>, _>>()?;
    Ok(CostReport { rows })
}

/// Least-squares `y ≈ c0 + c1·x + c2·x²`; returns the coefficients and R².
pub fn fit_quadratic(points: &[(f64, f64)]) -> ([f64; 3], f64) {
    let n = points.len();
    let a = DMatrix::from_fn(n, 3, |i, j| points[i].0.powi(j as i32));
    let y = DVector::from_iterator(n, points.iter().map(|p| p.1));
    let svd = a.clone().svd(true, true);
    let c = svd.solve(&y, 1e-12).unwrap_or_else(|_| DVector::zeros(3));
    let fit = &a * &c;
    let mean = y.mean();
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(fit.iter()).map(|(v, f)| (v - f).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    ([c[0], c[1], c[2]], r2)
}

/// Timing setup for the downstream model of a two-model chain.
#[derive(Clone, Debug)]
pub struct TimingPlan {
    pub lengths: Vec<usize>,
    pub trials: usize,
    pub decode_tokens: usize,
    pub seed: u64,
}

/// `(mean, sample σ)`.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() > 1 {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, v.sqrt())
}

fn stack<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>, ModelError> {
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Ok(Tensor::concat_rows(&refs)?)
}

fn positions_after(cache: &KvCache<impl Scalar>, n: usize) -> Vec<u32> {
    let s = cache.next_position();
    (0..n as u32).map(|i| s + i).collect()
}

/// Fixed-length greedy continuation; the stop token is not honored so every
/// trial does the same work.
fn decode_fixed<T: Scalar>(
    base: &ModelWeights<T>,
    cache: &mut KvCache<T>,
    m: ModelId,
    n: usize,
    policy: MaskPolicy,
) -> Result<(), ModelError> {
    let mut fed = vocab::START;
    for _ in 0..n {
        let e = base.embed_tokens(&[fed])?;
        let pos = cache.next_position();
        let out = decode_step(base, &e, pos, SegmentRole::Output(m), cache, policy)?;
        fed = argmax(out.logits.row(0));
    }
    Ok(())
}

/// Model B's step in both runtimes for one intermediate `y`:
/// baseline prefills `Shared + y + P_B` into a fresh cache, the shared-cache
/// runtime prefills `P_B` over `[Shared, P_A, START y]`.
struct BStep<T> {
    baseline_rows: Tensor<T>,
    baseline_roles: Vec<SegmentRole>,
    fthss_cache: KvCache<T>,
    prompt_rows: Tensor<T>,
    prompt_roles: Vec<SegmentRole>,
}

fn build_b_step<T: Scalar>(
    base: &ModelWeights<T>,
    spec: &ChainSpec<'_, T>,
    shared: &[u32],
    y: &[u32],
) -> Result<BStep<T>, BenchError> {
    let (pa, pb) = (spec.models[0].prompt, spec.models[1].prompt);
    let (a, b) = (pa.model_id, pb.model_id);
    let baseline_rows = stack(&[base.embed_tokens(shared)?, base.embed_tokens(y)?, pb.embeddings.clone()])?;
    let mut baseline_roles = vec![SegmentRole::SharedContent; shared.len()];
    baseline_roles.extend(std::iter::repeat_n(SegmentRole::UniqueInput(b), y.len()));
    baseline_roles.extend(std::iter::repeat_n(SegmentRole::Prompt(b), pb.n_tokens()));

    let mut out_a = vec![vocab::START];
    out_a.extend_from_slice(y);
    let rows = stack(&[base.embed_tokens(shared)?, pa.embeddings.clone(), base.embed_tokens(&out_a)?])?;
    let mut roles = vec![SegmentRole::SharedContent; shared.len()];
    roles.extend(std::iter::repeat_n(SegmentRole::Prompt(a), pa.n_tokens()));
    roles.extend(std::iter::repeat_n(SegmentRole::Output(a), out_a.len()));
    let mut fthss_cache = KvCache::new(&base.config);
    let pos: Vec<u32> = (0..roles.len() as u32).collect();
    prefill(base, &rows, &roles, &pos, &mut fthss_cache, spec.policy)?;
    Ok(BStep {
        baseline_rows,
        baseline_roles,
        fthss_cache,
        prompt_rows: pb.embeddings.clone(),
        prompt_roles: vec![SegmentRole::Prompt(b); pb.n_tokens()],
    })
}

/// Wall-clock and cost rows for model B over intermediate lengths, in both
/// runtimes. One warmup run per configuration is discarded.
pub fn time_chain<T: Scalar>(
    base: &ModelWeights<T>,
    spec: &ChainSpec<'_, T>,
    shared: &[u32],
    plan: &TimingPlan,
) -> Result<CostReport, BenchError> {
    if spec.models.len() != 2 {
        return Err(BenchError::Setup("timing needs a two-model chain".into()));
    }
    if plan.trials < 3 || plan.decode_tokens == 0 {
        return Err(BenchError::Setup("need trials >= 3 and decode_tokens >= 1".into()));
    }
    let b = spec.models[1].prompt.model_id;
    let config = &base.config;
    let width = std::mem::size_of::<T>();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut report = CostReport::default();
    for &len in &plan.lengths {
        let y: Vec<u32> = (0..len).map(|_| rng.random_range(vocab::FIRST_SYMBOL..vocab::SIZE as u32)).collect();
        let st = build_b_step(base, spec, shared, &y)?;
        let run_baseline = || -> Result<usize, ModelError> {
            let mut cache = KvCache::new(config);
            let pos = positions_after(&cache, st.baseline_roles.len());
            prefill(base, &st.baseline_rows, &st.baseline_roles, &pos, &mut cache, spec.policy)?;
            decode_fixed(base, &mut cache, b, plan.decode_tokens, spec.policy)?;
            Ok(cache.len())
        };
        let run_fthss = |mut cache: KvCache<T>| -> Result<usize, ModelError> {
            let pos = positions_after(&cache, st.prompt_roles.len());
            prefill(base, &st.prompt_rows, &st.prompt_roles, &pos, &mut cache, spec.policy)?;
            decode_fixed(base, &mut cache, b, plan.decode_tokens, spec.policy)?;
            Ok(cache.len())
        };
        let mut tb = Vec::new();
        let mut tf = Vec::new();
        let mut final_b = 0;
        let mut final_f = 0;
        for trial in 0..=plan.trials {
            let t0 = Instant::now();
            final_b = run_baseline()?;
            let eb = t0.elapsed().as_secs_f64();
            let cache = st.fthss_cache.clone();
            let t0 = Instant::now();
            final_f = run_fthss(cache)?;
            let ef = t0.elapsed().as_secs_f64();
            if trial > 0 {
                tb.push(eb);
                tf.push(ef);
            }
        }
        let step_b = TraceStep {
            model: b,
            round: 0,
            prefilled: st.baseline_roles.len(),
            decoded: plan.decode_tokens,
            cache_before: 0,
            cache_after: final_b,
            reprefilled_outputs: len,
            shared_prefilled: shared.len(),
            wall_s: 0.0,
        };
        let step_f = TraceStep {
            model: b,
            round: 0,
            prefilled: st.prompt_roles.len(),
            decoded: plan.decode_tokens,
            cache_before: st.fthss_cache.len(),
            cache_after: final_f,
            reprefilled_outputs: 0,
            shared_prefilled: 0,
            wall_s: 0.0,
        };
        let kv = |n| kv_bytes(config.n_layers, config.n_heads, config.head_dim, n, width, 1, CacheMode::Fthss);
        let (mb, sb) = mean_std(&tb);
        let (mf, sf) = mean_std(&tf);
        report.rows.push(CostRow {
            mode: CacheMode::Baseline,
            intermediate_tokens: len,
            prefill_tokens: step_b.prefilled,
            attn_flops: step_flops(config, &step_b),
            kv_bytes: kv(final_b),
            mean_s: mb,
            std_s: sb,
        });
        report.rows.push(CostRow {
            mode: CacheMode::Fthss,
            intermediate_tokens: len,
            prefill_tokens: step_f.prefilled,
            attn_flops: step_flops(config, &step_f),
            kv_bytes: kv(final_f),
            mean_s: mf,
            std_s: sf,
        });
    }
    Ok(report)
}
