//! Cross-module oracle suites: each returns its measured worst case next to
//! the threshold it was held to.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::layout::{
    assign_positions, build_mask_with, visible_with, MaskPolicy, SegmentLayout, SegmentRole,
};
use crate::model::{decode_step, forward_full, prefill, KvCache, ModelConfig, ModelWeights};
use crate::rope::{rope_freqs, score_shift_invariance_check};
use crate::tasks::{gen_compress_qa, SyntheticExample};
use crate::tensor::{Scalar, Tensor};
use crate::trainer::{
    fthss_online_loss_and_grad, fthss_seq, grad_check, prefill_seq, train_fthss_single_round_offline,
    train_fthss_single_round_online, train_standard_prompt, LogEntry, PromptParams, TrainConfig, TrainError,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub worst: f64,
    pub threshold: f64,
    pub detail: String,
    pub seconds: f64,
}

fn result(name: &str, worst: f64, threshold: f64, detail: String, t0: Instant) -> SuiteResult {
    SuiteResult {
        name: name.into(),
        passed: worst <= threshold,
        worst,
        threshold,
        detail,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

/// Small model used by the numeric suites.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        head_dim: 8,
        ffn_dim: 32,
        vocab_size: 64,
        max_seq: 96,
        ..ModelConfig::default()
    }
}

/// Random weights with matrices scaled up so attention is far from uniform.
pub fn sharp_weights<T: Scalar>(config: &ModelConfig, seed: u64, scale: f64) -> ModelWeights<T> {
    let w = ModelWeights::<T>::init(config, seed).expect("valid config");
    let scaled = w
        .tensors()
        .iter()
        .map(|t| {
            let mut t = (**t).clone();
            if t.shape().len() == 2 {
                t.data_mut().iter_mut().for_each(|x| *x *= T::of(scale));
            }
            t
        })
        .collect();
    ModelWeights::from_tensors(config, scaled).expect("same shapes")
}

fn random_role(rng: &mut impl Rng) -> SegmentRole {
    let m = rng.random_range(0..3u8);
    match rng.random_range(0..4) {
        0 => SegmentRole::SharedContent,
        1 => SegmentRole::Prompt(m),
        2 => SegmentRole::UniqueInput(m),
        _ => SegmentRole::Output(m),
    }
}

fn random_layout(rng: &mut impl Rng, max_tokens: usize) -> SegmentLayout {
    let mut l = SegmentLayout::new(rng.random_range(0..4));
    let target = rng.random_range(1..=max_tokens);
    while l.total_len() < target {
        let n = rng.random_range(1..=(target - l.total_len()).min(4));
        l.push(random_role(rng), n);
    }
    l
}

/// Mask equals per-pair enumeration; prompts are isolated; leading shared
/// content sees only shared content.
pub fn mask_suite(seed: u64, n_layouts: usize, max_tokens: usize) -> SuiteResult {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0usize;
    for _ in 0..n_layouts {
        let l = random_layout(&mut rng, max_tokens);
        let roles = l.roles();
        for policy in [MaskPolicy::default(), MaskPolicy { mask_foreign_prompts: false }] {
            let mask = build_mask_with(&l, policy);
            let leading_shared = roles.iter().take_while(|r| **r == SegmentRole::SharedContent).count();
            for (i, &q) in roles.iter().enumerate() {
                for (j, &k) in roles.iter().enumerate() {
                    let brute = j <= i && visible_with(q, k, policy);
                    if mask.get(i, j) != brute {
                        violations += 1;
                    }
                    if let SegmentRole::Prompt(o) = k {
                        let seen = mask.get(i, j);
                        let allowed = j <= i && q.model().is_some_and(|m| m == o || !policy.mask_foreign_prompts);
                        if seen && !allowed {
                            violations += 1;
                        }
                    }
                    if i < leading_shared && mask.get(i, j) && roles[j] != SegmentRole::SharedContent {
                        violations += 1;
                    }
                }
            }
        }
    }
    result(
        "mask-brute-force",
        violations as f64,
        0.0,
        format!("{n_layouts} layouts of <= {max_tokens} tokens, both policies"),
        t0,
    )
}

/// RoPE scores depend only on the offset.
pub fn rope_suite<T: Scalar>(seed: u64, n: usize, head_dim: usize, threshold: f64) -> SuiteResult {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = rope_freqs::<T>(head_dim, 10000.0).expect("even head dim");
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let q: Vec<T> = (0..head_dim).map(|_| T::of(rng.random_range(-1.0..1.0))).collect();
        let k: Vec<T> = (0..head_dim).map(|_| T::of(rng.random_range(-1.0..1.0))).collect();
        let m = rng.random_range(0..256);
        let nn = rng.random_range(0..256);
        let s = rng.random_range(0..256);
        worst = worst.max(score_shift_invariance_check(&q, &k, m, nn, s, &f));
    }
    result(&format!("rope-shift-{}", T::NAME), worst, threshold, format!("{n} tuples, head_dim {head_dim}"), t0)
}

fn random_embeddings<T: Scalar>(rng: &mut impl Rng, t: usize, d: usize) -> Tensor<T> {
    Tensor::new(vec![t, d], (0..t * d).map(|_| T::of(rng.random_range(-1.0..1.0))).collect()).expect("shape")
}

fn max_diff<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).fold(0.0, f64::max)
}

/// Logits under positions shifted by the layout length match the originals.
pub fn position_shift_suite<T: Scalar>(seed: u64, n: usize, weights: &ModelWeights<T>, threshold: f64) -> SuiteResult {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = weights.config.d_model;
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let l = rng.random_range(1..=weights.config.max_seq / 2 - 1);
        let layout = SegmentLayout::new(0).with(SegmentRole::Output(0), l + 1);
        let x = random_embeddings::<T>(&mut rng, l + 1, d);
        let a: Vec<u32> = (0..=l as u32).collect();
        let b: Vec<u32> = (l as u32 + 1..=2 * l as u32 + 1).collect();
        let ya = forward_full(weights, &x, &layout, &a, MaskPolicy::default()).expect("forward");
        let yb = forward_full(weights, &x, &layout, &b, MaskPolicy::default()).expect("forward");
        worst = worst.max(max_diff(ya.logits.data(), yb.logits.data()));
    }
    result("position-continuation", worst, threshold, format!("{n} lengths"), t0)
}

/// Prefill of a random split then per-token decode equals one full pass.
pub fn cache_suite<T: Scalar>(seed: u64, n: usize, max_tokens: usize, weights: &ModelWeights<T>, threshold: f64) -> SuiteResult {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = weights.config.d_model;
    let mut worst: f64 = 0.0;
    let mut failures = 0usize;
    for _ in 0..n {
        let layout = random_layout(&mut rng, max_tokens.min(weights.config.max_seq - 4));
        let roles = layout.roles();
        let t = roles.len();
        let x = random_embeddings::<T>(&mut rng, t, d);
        let pos = assign_positions(&layout);
        let full = forward_full(weights, &x, &layout, &pos, MaskPolicy::default()).expect("forward");
        let split = rng.random_range(1..=t);
        let mut cache = KvCache::new(&weights.config);
        let p = prefill(weights, &x.slice_rows(0, split), &roles[..split], &pos[..split], &mut cache, MaskPolicy::default());
        let Ok(p) = p else {
            failures += 1;
            continue;
        };
        worst = worst.max(max_diff(p.logits.data(), &full.logits.data()[..split * weights.config.vocab_size]));
        for i in split..t {
            let s = decode_step(weights, &x.slice_rows(i, 1), pos[i], roles[i], &mut cache, MaskPolicy::default());
            match s {
                Ok(s) => worst = worst.max(max_diff(s.logits.data(), full.logits.row(i))),
                Err(_) => failures += 1,
            }
        }
    }
    let worst = if failures > 0 { f64::INFINITY } else { worst };
    result("cache-equivalence", worst, threshold, format!("{n} layouts of <= {max_tokens} tokens"), t0)
}

/// Central differences of the online objective wrt the downstream prompt.
pub fn grad_suite(seed: u64, coords: usize, threshold: f64) -> Result<SuiteResult, TrainError> {
    let t0 = Instant::now();
    let config = tiny_config();
    let base = sharp_weights::<f64>(&config, seed, 4.0);
    let data = gen_compress_qa(seed, 1, 2, 2)?;
    let mut pa = PromptParams::<f64>::init(0, 3, config.d_model, seed);
    pa.trained = true;
    let pb = PromptParams::<f64>::init(1, 3, config.d_model, seed + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = Tensor::new(
        pb.embeddings.shape().to_vec(),
        pb.embeddings.data().iter().map(|x| x + rng.random_range(-0.5..0.5)).collect(),
    )?;
    let ex = &data[0];
    let worst = grad_check(
        |p| fthss_online_loss_and_grad(&base, &[&pa], p, ex, MaskPolicy::default()),
        &start,
        1e-5,
        coords,
        seed,
    )?;
    Ok(result("grad-check", worst, threshold, format!("{coords} coordinates, step 1e-5, f64"), t0))
}

/// Inside the combined pass, upstream rows equal a standalone upstream pass.
pub fn upstream_states_suite<T: Scalar>(
    base: &ModelWeights<T>,
    pa: &PromptParams<T>,
    pb: &PromptParams<T>,
    data: &[SyntheticExample],
    threshold: f64,
) -> Result<SuiteResult, TrainError> {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    let policy = MaskPolicy::default();
    for ex in data {
        let seq = fthss_seq(ex, pb.model_id, pb.n_tokens())?;
        let split = seq
            .parts
            .iter()
            .position(|p| p.role == SegmentRole::Prompt(pb.model_id))
            .expect("downstream prompt present");
        let (head, _) = seq.split(split);
        let full = prefill_seq(base, &seq, &[pa, pb], policy)?;
        let alone = prefill_seq(base, &head, &[pa], policy)?;
        let n = alone.len() * base.config.d_model;
        for l in 0..base.config.n_layers {
            worst = worst.max(max_diff(&full.keys(l)[..n], alone.keys(l)));
            worst = worst.max(max_diff(&full.values(l)[..n], alone.values(l)));
        }
    }
    Ok(result("upstream-states", worst, threshold, format!("{} examples, K and V per layer", data.len()), t0))
}

/// Per-step losses and final parameters of offline and online training.
pub struct ModeComparison<T> {
    pub offline: (PromptParams<T>, Vec<LogEntry>),
    pub online: (PromptParams<T>, Vec<LogEntry>),
}

impl<T: Scalar> ModeComparison<T> {
    pub fn max_loss_gap(&self) -> f64 {
        self.offline
            .1
            .iter()
            .zip(&self.online.1)
            .map(|(a, b)| (a.loss - b.loss).abs())
            .fold(0.0, f64::max)
    }

    pub fn bitwise(&self) -> bool {
        self.offline.1.len() == self.online.1.len()
            && self.offline.1.iter().zip(&self.online.1).all(|(a, b)| a.loss.to_bits() == b.loss.to_bits())
            && self.offline.0.embeddings.bitwise_eq(&self.online.0.embeddings)
    }
}

pub fn compare_training_modes<T: Scalar>(
    base: &ModelWeights<T>,
    pa: &PromptParams<T>,
    data: &[SyntheticExample],
    tc: &TrainConfig,
    dir: &std::path::Path,
) -> Result<ModeComparison<T>, TrainError> {
    Ok(ModeComparison {
        offline: train_fthss_single_round_offline(base, &[pa], data, tc, dir)?,
        online: train_fthss_single_round_online(base, &[pa], data, tc)?,
    })
}

/// Offline and online training agree step for step on a tiny model.
pub fn offline_online_suite(seed: u64, steps: usize) -> Result<SuiteResult, TrainError> {
    let t0 = Instant::now();
    let config = tiny_config();
    let base = sharp_weights::<f32>(&config, seed, 1.0);
    let data = gen_compress_qa(seed, 16, 2, 2)?;
    let tc = TrainConfig {
        steps,
        batch_size: 4,
        n_prompt_tokens: 3,
        seed,
        ..TrainConfig::default()
    };
    let (pa, _) = train_standard_prompt(&base, &data, 0, &TrainConfig { steps: 2, ..tc.clone() })?;
    let dir = tempdir_in_target(seed)?;
    let cmp = compare_training_modes(&base, &pa, &data, &tc, &dir)?;
    let _ = std::fs::remove_dir_all(&dir);
    let worst = if cmp.bitwise() { 0.0 } else { cmp.max_loss_gap().max(f64::MIN_POSITIVE) };
    Ok(result("offline-online", worst, 0.0, format!("{steps} steps, losses and parameters bitwise"), t0))
}

fn tempdir_in_target(seed: u64) -> std::io::Result<std::path::PathBuf> {
    let dir = std::env::temp_dir().join(format!("kvchain-verify-{}-{seed}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Every suite with its default size.
pub fn run_all(seed: u64) -> Result<Vec<SuiteResult>, TrainError> {
    let w32 = sharp_weights::<f32>(&tiny_config(), seed, 4.0);
    Ok(vec![
        mask_suite(seed, 500, 12),
        rope_suite::<f32>(seed, 1000, 16, 1e-5),
        rope_suite::<f64>(seed, 1000, 16, 1e-10),
        position_shift_suite(seed, 10, &w32, 1e-5),
        cache_suite(seed, 50, 64, &w32, 1e-5),
        grad_suite(seed, 32, 1e-4)?,
        offline_online_suite(seed, 10)?,
    ])
}
