//! End-to-end acceptance run. All criteria execute sequentially inside one
//! test so wall-clock measurements are not shared with other test threads.
//! Each criterion prints one `PASS`/`FAIL` line straight to stdout.

use std::io::Write;
use std::time::Instant;

use kvchain::bench::{fit_quadratic, time_chain, CacheMode, CostReport, TimingPlan};
use kvchain::chain::{compare_chains, ChainReport, ChainSpec, InputProvider};
use kvchain::model::{ModelConfig, ModelWeights};
use kvchain::tasks::{eval_exact_match, gen_compress_qa, gen_copy_corpus, gen_multi_round, gen_pretrain_corpus, SyntheticExample};
use kvchain::trainer::{
    continue_fthss, fthss_online_loss_and_grad, grad_check, pretrain_with_warmup, subsample,
    train_direct_prompt, train_fthss_multi_round, train_fthss_single_round_offline,
    train_fthss_single_round_online, train_multi_round_text, train_standard_prompt, PromptParams, TrainConfig,
};
use kvchain::verify::{cache_suite, mask_suite, position_shift_suite, rope_suite, sharp_weights, upstream_states_suite};
use kvchain::MaskPolicy;

const RUNTIME_RNG_SEED: u64 = 0;

// Tolerances.
const ROPE_TOL_F32: f64 = 1e-5;
const ROPE_TOL_F64: f64 = 1e-10;
const POSITION_TOL: f64 = 1e-5;
const CACHE_TOL: f64 = 1e-5;
const MODE_LOSS_TOL: f64 = 1e-6;
const UPSTREAM_STATE_TOL: f64 = 1e-6;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;
const GRAD_COORDS: usize = 32;
const EM_GAP_POINTS: f64 = 0.05;
const CHAIN_OVER_SINGLE_POINTS: f64 = 0.10;
const FLOP_FIT_R2: f64 = 0.99;
const RECOVERY_FRACTION: f64 = 0.5;

// Sizes.
const ROPE_TUPLES: usize = 1000;
const CACHE_LAYOUTS: usize = 100;
const CACHE_MAX_TOKENS: usize = 64;
const MASK_LAYOUTS: usize = 500;
const MASK_MAX_TOKENS: usize = 12;
const MODE_STEPS: usize = 50;
const N_TRAIN: usize = 2048;
const N_TEST: usize = 256;
const N_FACTS: usize = 3;
const N_DISTRACTORS: usize = 6;
const HOPS: usize = 2;
const CONTINUE_STEPS: usize = 100;
const TIMING_LENGTHS: [usize; 4] = [25, 50, 100, 180];
const TIMING_TRIALS: usize = 10;

// Runtime limits, seconds.
const LIMIT_1: f64 = 5.0;
const LIMIT_2: f64 = 10.0;
const LIMIT_3: f64 = 60.0;
const LIMIT_4: f64 = 30.0;
const LIMIT_5: f64 = 300.0;
const LIMIT_6: f64 = 300.0;
const LIMIT_7: f64 = 1800.0;
const LIMIT_8: f64 = 1800.0;
const LIMIT_9: f64 = 300.0;
const LIMIT_10: f64 = 600.0;
const LIMIT_11: f64 = 1800.0;

struct Line {
    id: usize,
    passed: bool,
    text: String,
}

#[derive(Default)]
struct Board {
    lines: Vec<Line>,
}

impl Board {
    fn record(&mut self, id: usize, name: &str, ok: bool, secs: f64, limit: f64, detail: String) {
        let passed = ok && secs < limit;
        let text = format!(
            "criterion {id:>2} {:<4} {name}: {detail}; runtime {secs:.1}s (limit {limit:.0}s)",
            if passed { "PASS" } else { "FAIL" }
        );
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{text}");
        let _ = out.flush();
        self.lines.push(Line { id, passed, text });
    }

    fn error(&mut self, id: usize, name: &str, err: impl std::fmt::Display) {
        self.record(id, name, false, 0.0, f64::INFINITY, format!("error: {err}"));
    }
}

fn em(preds: &[Vec<u32>], data: &[SyntheticExample]) -> f64 {
    let golds: Vec<Vec<u32>> = data.iter().map(|e| e.answer.clone()).collect();
    eval_exact_match(preds, &golds).unwrap()
}

struct Base {
    weights: ModelWeights<f32>,
    secs: f64,
}

fn pretrain() -> Base {
    let t0 = Instant::now();
    let config = ModelConfig::default();
    let corpus = gen_pretrain_corpus(1, 60_000);
    let warmup = gen_copy_corpus(1, 20_000);
    let tc = TrainConfig {
        lr: 2e-3,
        steps: 3000,
        batch_size: 16,
        seed: 0,
        ..TrainConfig::default()
    };
    let (weights, _) = pretrain_with_warmup::<f32>(&config, &warmup, 600, &corpus, &tc).unwrap();
    Base {
        weights,
        secs: t0.elapsed().as_secs_f64(),
    }
}

struct SingleRound {
    train: Vec<SyntheticExample>,
    test: Vec<SyntheticExample>,
    pa: PromptParams<f32>,
    pb_standard: PromptParams<f32>,
    pb_fthss: PromptParams<f32>,
    report: ChainReport,
    unadapted_em: f64,
}

fn single_round(base: &ModelWeights<f32>, tc: &TrainConfig, board: &mut Board, base_secs: f64) -> Option<SingleRound> {
    let t0 = Instant::now();
    let train = gen_compress_qa(RUNTIME_RNG_SEED, N_TRAIN, N_FACTS, N_DISTRACTORS).unwrap();
    let test = gen_compress_qa(RUNTIME_RNG_SEED + 1, N_TEST, N_FACTS, N_DISTRACTORS).unwrap();
    let (pa, _) = train_standard_prompt(base, &train, 0, tc).unwrap();
    let (pb_standard, _) = train_standard_prompt(base, &train, 1, tc).unwrap();
    let (pb_fthss, _) = train_fthss_single_round_online(base, &[&pa], &train, tc).unwrap();
    let (single, _) = train_direct_prompt(base, &train, 0, tc).unwrap();

    let text_spec = ChainSpec::new(&[&pa, &pb_standard], 1, 8);
    let report = compare_chains(base, &text_spec, &ChainSpec::new(&[&pa, &pb_fthss], 1, 8), &test).unwrap();
    let unadapted = compare_chains(base, &text_spec, &ChainSpec::new(&[&pa, &pb_standard], 1, 8), &test).unwrap();
    let single_preds: Vec<Vec<u32>> = test
        .iter()
        .map(|ex| kvchain::chain::run_standalone(base, &single, ex.shared(), None, &[], 8, MaskPolicy::default()).unwrap())
        .collect();
    let em_single = em(&single_preds, &test);
    let secs = t0.elapsed().as_secs_f64() + base_secs;
    let ok = (report.em_fthss - report.em_text).abs() <= EM_GAP_POINTS
        && report.em_text >= em_single + CHAIN_OVER_SINGLE_POINTS
        && report.em_fthss >= em_single + CHAIN_OVER_SINGLE_POINTS;
    board.record(
        7,
        "single-round comparability",
        ok,
        secs,
        LIMIT_7,
        format!(
            "EM text {:.3}, shared-state {:.3}, |gap| {:.3} <= {EM_GAP_POINTS}; single model {:.3}, margin >= {CHAIN_OVER_SINGLE_POINTS}",
            report.em_text,
            report.em_fthss,
            (report.em_fthss - report.em_text).abs(),
            em_single
        ),
    );
    Some(SingleRound {
        train,
        test,
        pa,
        pb_standard,
        pb_fthss,
        unadapted_em: unadapted.em_fthss,
        report,
    })
}

/// `|Shared|·(n_models - 1) + Σ|Y_i|` over outputs a later activation of
/// another model reads.
fn expected_savings(shared: usize, n_models: usize, outputs: &[kvchain::chain::ChainOutput]) -> usize {
    let consumed: usize = outputs
        .iter()
        .enumerate()
        .filter(|(i, o)| outputs[i + 1..].iter().any(|later| later.model != o.model))
        .map(|(_, o)| o.tokens.len())
        .sum();
    shared * (n_models - 1) + consumed
}

fn savings_identity(reports: &[(&ChainReport, &[SyntheticExample], usize)]) -> (usize, usize) {
    let mut checked = 0;
    let mut bad = 0;
    for (report, data, n_models) in reports {
        for (rec, ex) in report.records.iter().zip(data.iter()) {
            checked += 1;
            let diff = rec.text_prefill as i64 - rec.fthss_prefill as i64;
            let expect = expected_savings(ex.shared().len(), *n_models, &rec.text) as i64;
            if diff != expect || rec.reused_tokens as i64 != expect {
                bad += 1;
            }
        }
    }
    (checked, bad)
}

fn multi_round(base: &ModelWeights<f32>, tc: &TrainConfig, board: &mut Board) -> Option<(ChainReport, Vec<SyntheticExample>)> {
    let t0 = Instant::now();
    let train = gen_multi_round(RUNTIME_RNG_SEED, N_TRAIN, HOPS).unwrap();
    let test = gen_multi_round(RUNTIME_RNG_SEED + 1, N_TEST, HOPS).unwrap();
    let (joint, _) = train_fthss_multi_round(base, &train, tc).unwrap();
    let (ta, _) = train_multi_round_text(base, &train, 0, tc).unwrap();
    let (tb, _) = train_multi_round_text(base, &train, 1, tc).unwrap();
    let mut text_spec = ChainSpec::new(&[&ta, &tb], HOPS, 4);
    text_spec.models[1].input = InputProvider::Retrieve(Vec::new());
    let mut fthss_spec = ChainSpec::new(&[&joint[0], &joint[1]], HOPS, 4);
    fthss_spec.models[1].input = InputProvider::Retrieve(Vec::new());
    let report = compare_chains(base, &text_spec, &fthss_spec, &test).unwrap();

    // Cache counts straight from fresh traces.
    let ex = &test[0];
    let t = kvchain::chain::run_chain_text(base, &text_spec.with_table(&ex.table), ex.shared()).unwrap();
    let f = kvchain::chain::run_chain_fthss(base, &fthss_spec.with_table(&ex.table), ex.shared()).unwrap();
    let caches_ok = t.trace.n_caches == 2 && f.trace.n_caches == 1;
    let gap = (report.em_fthss - report.em_text).abs();
    board.record(
        8,
        "multi-round comparability",
        gap <= EM_GAP_POINTS && caches_ok,
        t0.elapsed().as_secs_f64(),
        LIMIT_8,
        format!(
            "hops {HOPS}: EM text {:.3}, shared-state {:.3}, |gap| {gap:.3} <= {EM_GAP_POINTS}; caches baseline {} shared-state {}",
            report.em_text, report.em_fthss, t.trace.n_caches, f.trace.n_caches
        ),
    );
    Some((report, test))
}

#[test]
fn acceptance_criteria() {
    let mut board = Board::default();

    // 1
    let t0 = Instant::now();
    let r32 = rope_suite::<f32>(11, ROPE_TUPLES, 16, ROPE_TOL_F32);
    let r64 = rope_suite::<f64>(11, ROPE_TUPLES, 16, ROPE_TOL_F64);
    board.record(
        1,
        "rope relative position",
        r32.passed && r64.passed,
        t0.elapsed().as_secs_f64(),
        LIMIT_1,
        format!("f32 {:.2e} <= {ROPE_TOL_F32:.0e}, f64 {:.2e} <= {ROPE_TOL_F64:.0e} over {ROPE_TUPLES} tuples", r32.worst, r64.worst),
    );

    let config = ModelConfig::default();
    let random_base = sharp_weights::<f32>(&config, 12, 2.0);

    // 2
    let t0 = Instant::now();
    let r = position_shift_suite(13, 10, &random_base, POSITION_TOL);
    board.record(2, "position continuation", r.passed, t0.elapsed().as_secs_f64(), LIMIT_2, format!("max logit diff {:.2e} <= {POSITION_TOL:.0e}", r.worst));

    // 3
    let t0 = Instant::now();
    let r = cache_suite(14, CACHE_LAYOUTS, CACHE_MAX_TOKENS, &random_base, CACHE_TOL);
    board.record(
        3,
        "cache correctness",
        r.passed,
        t0.elapsed().as_secs_f64(),
        LIMIT_3,
        format!("max logit diff {:.2e} <= {CACHE_TOL:.0e} over {CACHE_LAYOUTS} layouts", r.worst),
    );

    // 4
    let t0 = Instant::now();
    let r = mask_suite(15, MASK_LAYOUTS, MASK_MAX_TOKENS);
    board.record(4, "mask oracle", r.passed, t0.elapsed().as_secs_f64(), LIMIT_4, format!("{} violations over {MASK_LAYOUTS} layouts", r.worst));

    let base = pretrain();
    let tc = TrainConfig::default();

    let sr = single_round(&base.weights, &tc, &mut board, base.secs);

    // 5
    if let Some(sr) = &sr {
        let t0 = Instant::now();
        let mode_tc = TrainConfig {
            steps: MODE_STEPS,
            ..tc.clone()
        };
        let dir = tempfile::tempdir().unwrap();
        let data = &sr.train[..256];
        let off = train_fthss_single_round_offline(&base.weights, &[&sr.pa], data, &mode_tc, dir.path());
        let on = train_fthss_single_round_online(&base.weights, &[&sr.pa], data, &mode_tc);
        match (off, on) {
            (Ok((p_off, l_off)), Ok((p_on, l_on))) => {
                let gap = l_off.iter().zip(&l_on).map(|(a, b)| (a.loss - b.loss).abs()).fold(0.0, f64::max);
                let bitwise = l_off.len() == l_on.len()
                    && l_off.iter().zip(&l_on).all(|(a, b)| a.loss.to_bits() == b.loss.to_bits())
                    && p_off.embeddings.bitwise_eq(&p_on.embeddings);
                let states = upstream_states_suite(&base.weights, &sr.pa, &sr.pb_fthss, &sr.test[..16], UPSTREAM_STATE_TOL).unwrap();
                board.record(
                    5,
                    "offline/online equivalence",
                    l_off.len() == MODE_STEPS && gap <= MODE_LOSS_TOL && states.passed,
                    t0.elapsed().as_secs_f64(),
                    LIMIT_5,
                    format!(
                        "{MODE_STEPS} steps, max loss gap {gap:.2e} <= {MODE_LOSS_TOL:.0e} (bitwise {bitwise}); upstream K/V diff {:.2e} <= {UPSTREAM_STATE_TOL:.0e}",
                        states.worst
                    ),
                );
            }
            (a, b) => board.error(5, "offline/online equivalence", format!("{:?} {:?}", a.err(), b.err())),
        }

        // 6
        let t0 = Instant::now();
        let base64 = base.weights.cast::<f64>();
        let pa64 = sr.pa.cast::<f64>();
        let start = PromptParams::<f64>::init(1, tc.n_prompt_tokens, config.d_model, 16).embeddings;
        let ex = &sr.test[0];
        let worst = grad_check(
            |p| fthss_online_loss_and_grad(&base64, &[&pa64], p, ex, MaskPolicy::default()),
            &start,
            GRAD_STEP,
            GRAD_COORDS,
            17,
        );
        match worst {
            Ok(w) => board.record(
                6,
                "gradient integrity",
                w <= GRAD_REL_TOL,
                t0.elapsed().as_secs_f64(),
                LIMIT_6,
                format!("max rel err {w:.2e} <= {GRAD_REL_TOL:.0e} over {GRAD_COORDS} coordinates, f64, step {GRAD_STEP:.0e}"),
            ),
            Err(e) => board.error(6, "gradient integrity", e),
        }
    }

    // 11
    if let Some(sr) = &sr {
        let t0 = Instant::now();
        let small = subsample(&sr.train, sr.train.len() / 10, 18);
        let cont_tc = TrainConfig {
            steps: CONTINUE_STEPS,
            ..tc.clone()
        };
        let (pc, _) = continue_fthss(&base.weights, &[&sr.pa], &sr.pb_standard, &small, &cont_tc).unwrap();
        let text_spec = ChainSpec::new(&[&sr.pa, &sr.pb_standard], 1, 8);
        let cont = compare_chains(&base.weights, &text_spec, &ChainSpec::new(&[&sr.pa, &pc], 1, 8), &sr.test).unwrap();
        let full = sr.report.em_fthss;
        let gap = full - sr.unadapted_em;
        let recovered = if gap > 0.0 { (cont.em_fthss - sr.unadapted_em) / gap } else { f64::NAN };
        board.record(
            11,
            "small-sample continuation",
            gap > 0.0 && recovered >= RECOVERY_FRACTION,
            t0.elapsed().as_secs_f64(),
            LIMIT_11,
            format!(
                "{} examples: unadapted {:.3}, continued {:.3}, full {full:.3}; recovered {recovered:.2} >= {RECOVERY_FRACTION}",
                small.len(),
                sr.unadapted_em,
                cont.em_fthss
            ),
        );
    }

    let mr = multi_round(&base.weights, &tc, &mut board);

    // 9 and 10 share one timing sweep.
    if let Some(sr) = &sr {
        let t0 = Instant::now();
        let mut reports: Vec<(&ChainReport, &[SyntheticExample], usize)> = vec![(&sr.report, &sr.test, 2)];
        if let Some((r, d)) = &mr {
            reports.push((r, d, 2));
        }
        let (checked, bad) = savings_identity(&reports);
        let spec = ChainSpec::new(&[&sr.pa, &sr.pb_fthss], 1, 8);
        let plan = TimingPlan {
            lengths: TIMING_LENGTHS.to_vec(),
            trials: TIMING_TRIALS,
            decode_tokens: 8,
            seed: 19,
        };
        let identity_secs = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let timing: CostReport = time_chain(&base.weights, &spec, sr.test[0].shared(), &plan).unwrap();
        let timing_secs = t1.elapsed().as_secs_f64();
        let savings = timing.flop_savings();
        let (_, r2) = fit_quadratic(&savings);
        board.record(
            9,
            "prefill savings identity",
            bad == 0 && checked > 0 && savings.len() >= 4 && r2 >= FLOP_FIT_R2,
            identity_secs + timing_secs,
            LIMIT_9,
            format!(
                "{bad} of {checked} traces off the identity; FLOP savings quadratic fit over {} lengths R2 {r2:.5} >= {FLOP_FIT_R2}",
                savings.len()
            ),
        );

        let baseline: Vec<f64> = timing.rows_for(CacheMode::Baseline).iter().map(|r| r.mean_s).collect();
        let shared: Vec<f64> = timing.rows_for(CacheMode::Fthss).iter().map(|r| r.mean_s).collect();
        let increasing = baseline.windows(2).all(|w| w[1] > w[0]);
        let at_max = shared.last().zip(baseline.last()).is_some_and(|(f, b)| f <= b);
        let fmt = |v: &[f64]| v.iter().map(|s| format!("{:.2}ms", s * 1e3)).collect::<Vec<_>>().join(" ");
        board.record(
            10,
            "latency trend",
            increasing && at_max && TIMING_TRIALS >= 10,
            timing_secs,
            LIMIT_10,
            format!(
                "lengths {TIMING_LENGTHS:?}, {TIMING_TRIALS} trials: baseline {}; shared-state {}",
                fmt(&baseline),
                fmt(&shared)
            ),
        );
    }

    board.lines.sort_by_key(|l| l.id);
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "---- acceptance summary ----");
    for l in &board.lines {
        let _ = writeln!(out, "{}", l.text);
    }
    let _ = out.flush();
    let ids: Vec<usize> = board.lines.iter().map(|l| l.id).collect();
    assert_eq!(ids, (1..=11).collect::<Vec<_>>(), "every criterion reports once");
    let failed: Vec<usize> = board.lines.iter().filter(|l| !l.passed).map(|l| l.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
