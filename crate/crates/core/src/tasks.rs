//! Seeded symbolic task families, metrics and the base pretraining corpus.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{ModelId, SegmentRole};

pub mod vocab {
    pub const STOP: u32 = 0;
    pub const START: u32 = 1;
    pub const Q: u32 = 2;
    pub const SEP: u32 = 3;
    pub const SEMI: u32 = 5;
    pub const LOOKUP: u32 = 6;
    pub const NOT_FOUND: u32 = 7;
    pub const TAG_EXTRACT: u32 = 8;
    pub const TAG_READ: u32 = 9;
    pub const TAG_PLAN: u32 = 10;
    pub const FIRST_SYMBOL: u32 = 12;
    pub const SIZE: usize = 64;

    pub fn is_symbol(t: u32) -> bool {
        (FIRST_SYMBOL..SIZE as u32).contains(&t)
    }

    pub fn n_symbols() -> usize {
        SIZE - FIRST_SYMBOL as usize
    }
}

use vocab::*;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("{0} predictions for {1} references")]
    LengthMismatch(usize, usize),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSegment {
    pub role: SegmentRole,
    pub tokens: Vec<u32>,
}

/// One example with role-labeled gold segments in chain order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticExample {
    pub id: u64,
    pub segments: Vec<LabeledSegment>,
    pub answer: Vec<u32>,
    /// Retrieval table for multi-round tasks, `(key, value)`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub table: Vec<(u32, u32)>,
}

/// One model activation: optional unique input and gold output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Invocation {
    pub model: ModelId,
    pub input: Vec<u32>,
    pub output: Vec<u32>,
}

impl SyntheticExample {
    pub fn shared(&self) -> &[u32] {
        self.segments
            .iter()
            .find(|s| s.role == SegmentRole::SharedContent)
            .map_or(&[], |s| &s.tokens)
    }

    /// Gold activations in chain order; an input binds to the next output of the same model.
    pub fn invocations(&self) -> Vec<Invocation> {
        let mut out = Vec::new();
        let mut pending: HashMap<ModelId, Vec<u32>> = HashMap::new();
        for s in &self.segments {
            match s.role {
                SegmentRole::UniqueInput(m) => {
                    pending.insert(m, s.tokens.clone());
                }
                SegmentRole::Output(m) => out.push(Invocation {
                    model: m,
                    input: pending.remove(&m).unwrap_or_default(),
                    output: s.tokens.clone(),
                }),
                _ => {}
            }
        }
        out
    }

    pub fn outputs_of(&self, m: ModelId) -> Vec<&[u32]> {
        self.segments
            .iter()
            .filter(|s| s.role == SegmentRole::Output(m))
            .map(|s| s.tokens.as_slice())
            .collect()
    }

    /// Simulated retrieval: `[k v]`, or `[k NOT_FOUND]` for unknown keys.
    pub fn retrieve(&self, key: u32) -> Vec<u32> {
        let v = self.table.iter().find(|(k, _)| *k == key).map_or(NOT_FOUND, |&(_, v)| v);
        vec![key, v]
    }
}

fn example_rng(seed: u64, stream: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(i as u128 * 4096);
    rng
}

fn distinct_symbols(rng: &mut impl Rng, n: usize, exclude: &[u32]) -> Vec<u32> {
    let mut pool: Vec<u32> = (FIRST_SYMBOL..SIZE as u32).filter(|s| !exclude.contains(s)).collect();
    pool.shuffle(rng);
    pool.truncate(n);
    pool
}

fn random_symbol(rng: &mut impl Rng) -> u32 {
    rng.random_range(FIRST_SYMBOL..SIZE as u32)
}

/// `[Q qk SEP k1 v1 ; k2 v2 ; ...]`.
fn render_question(qk: u32, facts: &[(u32, u32)]) -> Vec<u32> {
    let mut s = vec![Q, qk, SEP];
    for (i, &(k, v)) in facts.iter().enumerate() {
        if i > 0 {
            s.push(SEMI);
        }
        s.extend([k, v]);
    }
    s
}

/// Facts with distinct keys; the first belongs to `qk`, and no other fact mentions `qk`.
fn question_facts(rng: &mut impl Rng, n: usize) -> (u32, Vec<(u32, u32)>) {
    let keys = distinct_symbols(rng, n, &[]);
    let qk = keys[0];
    let facts = keys
        .iter()
        .map(|&k| {
            let mut v = random_symbol(rng);
            while v == qk {
                v = random_symbol(rng);
            }
            (k, v)
        })
        .collect();
    (qk, facts)
}

/// Question plus shuffled fact list; model 0 compresses to the matching
/// fact, model 1 answers with its value. `n_facts` counts candidate facts
/// drawn for the question and `n_distractors` further unrelated facts; only
/// the one keyed by the question matters.
pub fn gen_compress_qa(
    seed: u64,
    n: usize,
    n_facts: usize,
    n_distractors: usize,
) -> Result<Vec<SyntheticExample>, TaskError> {
    if n_facts == 0 {
        return Err(TaskError::Param("n_facts must be >= 1".into()));
    }
    let total = n_facts + n_distractors;
    if total > vocab::n_symbols() {
        return Err(TaskError::Param(format!("{total} facts exceed the symbol pool")));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = example_rng(seed, 1, i);
            let (qk, mut facts) = question_facts(&mut rng, total);
            let gold = facts[0];
            facts.shuffle(&mut rng);
            SyntheticExample {
                id: i as u64,
                segments: vec![
                    LabeledSegment {
                        role: SegmentRole::SharedContent,
                        tokens: render_question(qk, &facts),
                    },
                    LabeledSegment {
                        role: SegmentRole::Output(0),
                        tokens: vec![gold.0, gold.1],
                    },
                    LabeledSegment {
                        role: SegmentRole::Output(1),
                        tokens: vec![gold.1],
                    },
                ],
                answer: vec![gold.1],
                table: Vec::new(),
            }
        })
        .collect())
}

/// Rule-based answer for a compress-QA shared input.
pub fn oracle_compress_answer(shared: &[u32]) -> Option<Vec<u32>> {
    if shared.len() < 3 || shared[0] != Q || shared[2] != SEP {
        return None;
    }
    let qk = shared[1];
    shared[3..]
        .split(|&t| t == SEMI)
        .find(|f| f.len() == 2 && f[0] == qk)
        .map(|f| vec![f[1]])
}

/// Chained lookups `k1 -> k2 -> ... -> answer`, one plan/answer round per hop.
pub fn gen_multi_round(seed: u64, n: usize, hops: usize) -> Result<Vec<SyntheticExample>, TaskError> {
    gen_multi_round_with(seed, n, hops, seed, 6)
}

/// Like [`gen_multi_round`] with the distractor table drawn from its own seed.
pub fn gen_multi_round_with(
    seed: u64,
    n: usize,
    hops: usize,
    distractor_seed: u64,
    n_distractors: usize,
) -> Result<Vec<SyntheticExample>, TaskError> {
    if hops < 2 {
        return Err(TaskError::Param("hops must be >= 2".into()));
    }
    if hops + 1 + n_distractors > vocab::n_symbols() {
        return Err(TaskError::Param("table exceeds the symbol pool".into()));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = example_rng(seed, 2, i);
            let chain = distinct_symbols(&mut rng, hops + 1, &[]);
            let mut drng = example_rng(distractor_seed, 3, i);
            let dkeys = distinct_symbols(&mut drng, n_distractors, &chain);
            let mut table: Vec<(u32, u32)> = chain.windows(2).map(|w| (w[0], w[1])).collect();
            table.extend(dkeys.iter().map(|&k| (k, random_symbol(&mut drng))));
            table.shuffle(&mut drng);
            let mut segments = vec![LabeledSegment {
                role: SegmentRole::SharedContent,
                tokens: vec![Q, chain[0], SEP],
            }];
            for r in 0..hops {
                segments.push(LabeledSegment {
                    role: SegmentRole::Output(0),
                    tokens: vec![LOOKUP, chain[r]],
                });
                segments.push(LabeledSegment {
                    role: SegmentRole::UniqueInput(1),
                    tokens: vec![chain[r], chain[r + 1]],
                });
                segments.push(LabeledSegment {
                    role: SegmentRole::Output(1),
                    tokens: vec![chain[r + 1]],
                });
            }
            SyntheticExample {
                id: i as u64,
                segments,
                answer: vec![chain[hops]],
                table,
            }
        })
        .collect())
}

/// Follows the gold plans through the retrieval table.
pub fn oracle_table_walk(ex: &SyntheticExample) -> Option<Vec<u32>> {
    let mut last = None;
    for plan in ex.outputs_of(0) {
        if plan.len() != 2 || plan[0] != LOOKUP {
            return None;
        }
        let fact = ex.retrieve(plan[1]);
        if fact[1] == NOT_FOUND {
            return None;
        }
        last = Some(fact[1]);
    }
    last.map(|v| vec![v])
}

pub fn eval_exact_match(preds: &[Vec<u32>], golds: &[Vec<u32>]) -> Result<f64, TaskError> {
    if preds.len() != golds.len() {
        return Err(TaskError::LengthMismatch(preds.len(), golds.len()));
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

pub fn eval_token_f1(preds: &[Vec<u32>], golds: &[Vec<u32>]) -> Result<f64, TaskError> {
    if preds.len() != golds.len() {
        return Err(TaskError::LengthMismatch(preds.len(), golds.len()));
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let f1 = |p: &[u32], g: &[u32]| -> f64 {
        if p.is_empty() && g.is_empty() {
            return 1.0;
        }
        let mut counts: HashMap<u32, i64> = HashMap::new();
        for &t in g {
            *counts.entry(t).or_default() += 1;
        }
        let mut common = 0;
        for &t in p {
            if let Some(c) = counts.get_mut(&t) {
                if *c > 0 {
                    *c -= 1;
                    common += 1;
                }
            }
        }
        if common == 0 {
            return 0.0;
        }
        let prec = common as f64 / p.len() as f64;
        let rec = common as f64 / g.len() as f64;
        2.0 * prec * rec / (prec + rec)
    };
    Ok(preds.iter().zip(golds).map(|(p, g)| f1(p, g)).sum::<f64>() / preds.len() as f64)
}

pub fn save_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), TaskError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        let line = serde_json::to_string(r).map_err(|source| TaskError::Json { line: 0, source })?;
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, TaskError> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| TaskError::Json { line: i + 1, source })?);
    }
    Ok(out)
}

/// Next-token training sequence with a loss mask over target positions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainDoc {
    pub tokens: Vec<u32>,
    /// `loss[i]` marks whether `tokens[i + 1]` is scored.
    pub loss: Vec<bool>,
}

impl TrainDoc {
    /// `context ++ [START] ++ target ++ [STOP]`, scoring target and STOP.
    pub fn new(context: Vec<u32>, target: &[u32]) -> Self {
        let mut tokens = context;
        let first = tokens.len();
        tokens.push(START);
        tokens.extend_from_slice(target);
        tokens.push(STOP);
        let loss = (0..tokens.len() - 1).map(|i| i >= first).collect();
        Self { tokens, loss }
    }

    pub fn inputs(&self) -> &[u32] {
        &self.tokens[..self.tokens.len() - 1]
    }

    pub fn targets(&self) -> &[u32] {
        &self.tokens[1..]
    }
}

/// Inserts `tag` at a random segment boundary of `parts`, or just before START.
fn place_tag(rng: &mut impl Rng, parts: Vec<Vec<u32>>, tag: u32) -> Vec<u32> {
    let n = parts.len();
    let slot = match rng.random_range(0..4) {
        0 => 0,
        1 | 2 => n,
        _ => rng.random_range(0..=n),
    };
    let mut out = Vec::new();
    for (i, p) in parts.into_iter().enumerate() {
        if i == slot {
            out.push(tag);
        }
        out.extend(p);
    }
    if slot == n {
        out.push(tag);
    }
    out
}

fn question_parts(qk: u32, facts: &[(u32, u32)]) -> Vec<Vec<u32>> {
    let mut parts = vec![vec![Q, qk, SEP]];
    for (i, &(k, v)) in facts.iter().enumerate() {
        let mut p = if i > 0 { vec![SEMI] } else { Vec::new() };
        p.extend([k, v]);
        parts.push(p);
    }
    parts
}

fn extract_doc(rng: &mut impl Rng) -> TrainDoc {
    let n = rng.random_range(1..=9);
    let (qk, mut facts) = question_facts(rng, n);
    let gold = facts[0];
    facts.shuffle(rng);
    let ctx = place_tag(rng, question_parts(qk, &facts), TAG_EXTRACT);
    TrainDoc::new(ctx, &[gold.0, gold.1])
}

fn read_doc(rng: &mut impl Rng) -> TrainDoc {
    let n = rng.random_range(1..=9);
    let (qk, facts) = question_facts(rng, n);
    let mut parts = question_parts(qk, &facts);
    let mut last = facts[facts.len() - 1].1;
    if rng.random_bool(0.7) {
        // a trailing fact, as left by an upstream compressor
        let k = if rng.random_bool(0.5) { qk } else { random_symbol(rng) };
        let v = random_symbol(rng);
        let mut p = if rng.random_bool(0.5) { vec![START] } else { Vec::new() };
        p.extend([k, v]);
        parts.push(p);
        last = v;
    }
    TrainDoc::new(place_tag(rng, parts, TAG_READ), &[last])
}

/// Fact list followed by several lookups `k v`; separators and looked-up
/// values are scored.
fn recall_doc(rng: &mut impl Rng) -> TrainDoc {
    let n = rng.random_range(2..=9);
    let (_, facts) = question_facts(rng, n);
    let mut tokens = Vec::new();
    // scored[i]: whether tokens[i] is predictable from its prefix
    let mut scored = Vec::new();
    for (i, &(k, v)) in facts.iter().enumerate() {
        if i > 0 {
            tokens.push(SEMI);
            scored.push(true);
        }
        tokens.extend([k, v]);
        scored.extend([false, false]);
    }
    tokens.push(SEP);
    scored.push(true);
    for q in 0..rng.random_range(2..=6) {
        if q > 0 {
            tokens.push(SEMI);
            scored.push(true);
        }
        let (k, v) = facts[rng.random_range(0..n)];
        tokens.extend([k, v]);
        scored.extend([false, true]);
    }
    TrainDoc {
        loss: scored[1..].to_vec(),
        tokens,
    }
}

/// Random symbol run repeated after SEP; the repeat is scored.
fn copy_doc(rng: &mut impl Rng) -> TrainDoc {
    let n = rng.random_range(6..=16);
    let run: Vec<u32> = (0..n).map(|_| random_symbol(rng)).collect();
    let mut tokens = run.clone();
    tokens.push(SEP);
    tokens.extend(&run);
    let loss = (1..tokens.len()).map(|i| i > n + 1).collect();
    TrainDoc { tokens, loss }
}

/// Histories of plan/answer rounds seen from either model's side.
fn round_doc(rng: &mut impl Rng, planner: bool) -> TrainDoc {
    let hops = rng.random_range(2..=4);
    let chain = distinct_symbols(rng, hops + 1, &[]);
    let mut parts = vec![vec![Q, chain[0], SEP]];
    let done = if planner {
        rng.random_range(0..hops)
    } else {
        rng.random_range(1..=hops)
    };
    // whether each side's outputs carry START in this history
    let own_start = true;
    let foreign_start = rng.random_bool(0.5);
    let show_facts = !planner || rng.random_bool(0.5);
    for r in 0..done {
        let (a_start, b_start) = if planner {
            (own_start, foreign_start)
        } else {
            (foreign_start, own_start)
        };
        let mut plan = if a_start { vec![START] } else { Vec::new() };
        plan.extend([LOOKUP, chain[r]]);
        parts.push(plan);
        if show_facts {
            parts.push(vec![chain[r], chain[r + 1]]);
        }
        let last_round = !planner && r + 1 == done;
        if !last_round {
            let mut ans = if b_start { vec![START] } else { Vec::new() };
            ans.push(chain[r + 1]);
            parts.push(ans);
        }
    }
    let (tag, target) = if planner {
        (TAG_PLAN, vec![LOOKUP, chain[done]])
    } else {
        (TAG_READ, vec![chain[done]])
    };
    TrainDoc::new(place_tag(rng, parts, tag), &target)
}

/// Repeated symbol runs that bootstrap copying before the skill mix.
pub fn gen_copy_corpus(seed: u64, n: usize) -> Vec<TrainDoc> {
    (0..n)
        .map(|i| copy_doc(&mut example_rng(seed, 5, i)))
        .collect()
}

/// Tagged skill documents for base pretraining.
pub fn gen_pretrain_corpus(seed: u64, n: usize) -> Vec<TrainDoc> {
    (0..n)
        .map(|i| {
            let mut rng = example_rng(seed, 4, i);
            match i % 6 {
                0 => extract_doc(&mut rng),
                1 => read_doc(&mut rng),
                2 => round_doc(&mut rng, true),
                3 => round_doc(&mut rng, false),
                4 => recall_doc(&mut rng),
                _ => copy_doc(&mut rng),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compress_qa_is_deterministic_and_solvable() {
        let a = gen_compress_qa(7, 50, 1, 6).unwrap();
        assert_eq!(a, gen_compress_qa(7, 50, 1, 6).unwrap());
        assert_ne!(a, gen_compress_qa(8, 50, 1, 6).unwrap());
        for ex in &a {
            assert_eq!(oracle_compress_answer(ex.shared()).unwrap(), ex.answer);
            let qk = ex.shared()[1];
            let facts: Vec<&[u32]> = ex.shared()[3..].split(|&t| t == SEMI).collect();
            assert_eq!(facts.len(), 7);
            // distractors never mention the question key
            assert_eq!(facts.iter().filter(|f| f.contains(&qk)).count(), 1);
            assert_eq!(ex.shared().len(), 23);
            assert_eq!(ex.outputs_of(0)[0], &[qk, ex.answer[0]]);
        }
    }

    #[test]
    fn no_distractors_means_output_is_the_fact() {
        for ex in gen_compress_qa(1, 10, 1, 0).unwrap() {
            assert_eq!(&ex.shared()[3..], ex.outputs_of(0)[0]);
        }
    }

    #[test]
    fn multi_round_structure() {
        let data = gen_multi_round(3, 40, 2).unwrap();
        for ex in &data {
            let inv = ex.invocations();
            assert_eq!(inv.iter().filter(|i| i.model == 0).count(), 2);
            assert_eq!(inv.iter().filter(|i| i.model == 1).count(), 2);
            assert_eq!(oracle_table_walk(ex).unwrap(), ex.answer);
            assert_eq!(inv[1].input, ex.retrieve(inv[0].output[1]));
        }
        assert!(gen_multi_round(3, 1, 1).is_err());
        let other = gen_multi_round_with(3, 40, 2, 99, 6).unwrap();
        for (a, b) in data.iter().zip(&other) {
            assert_eq!(a.answer, b.answer);
            assert_eq!(a.segments, b.segments);
        }
    }

    #[test]
    fn metrics_examples() {
        let a = vec![vec![1, 2]];
        assert_eq!(eval_exact_match(&a, &a).unwrap(), 1.0);
        assert_eq!(eval_token_f1(&a, &a).unwrap(), 1.0);
        let b = vec![vec![3, 4]];
        assert_eq!(eval_exact_match(&a, &b).unwrap(), 0.0);
        assert_eq!(eval_token_f1(&a, &b).unwrap(), 0.0);
        assert!((eval_token_f1(&[vec![10, 11]], &[vec![11, 12]]).unwrap() - 0.5).abs() < 1e-12);
        assert!(eval_exact_match(&a, &[]).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let data = gen_multi_round(1, 5, 2).unwrap();
        save_jsonl(&p, &data).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"role\":\"input:1\""));
        let back: Vec<SyntheticExample> = load_jsonl(&p).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn pretrain_docs_are_well_formed() {
        let docs = gen_pretrain_corpus(0, 400);
        assert_eq!(docs, gen_pretrain_corpus(0, 400));
        for (i, d) in docs.iter().enumerate() {
            assert_eq!(d.loss.len(), d.tokens.len() - 1);
            assert!(d.loss.iter().any(|&b| b));
            if i % 6 >= 4 {
                continue;
            }
            assert_eq!(*d.tokens.last().unwrap(), STOP);
            let tags = d.tokens.iter().filter(|&&t| (TAG_EXTRACT..=TAG_PLAN).contains(&t)).count();
            assert_eq!(tags, 1);
            assert!(d.tokens.len() <= 64);
        }
    }
}
