use kvchain::bench::{
    attention_flops, fit_quadratic, kv_bytes, report_parse, report_render, time_chain, CacheMode, TimingPlan,
};
use kvchain::chain::{run_chain_fthss, run_chain_text, ChainSpec};
use kvchain::tasks::gen_compress_qa;
use kvchain::trainer::PromptParams;
use kvchain::verify::{sharp_weights, tiny_config};
use proptest::prelude::*;

fn prompts() -> Vec<PromptParams<f32>> {
    (0..2u8)
        .map(|m| {
            let mut p = PromptParams::init(m, 3, tiny_config().d_model, m as u64);
            p.trained = true;
            p
        })
        .collect()
}

fn plan(lengths: Vec<usize>) -> TimingPlan {
    TimingPlan {
        lengths,
        trials: 3,
        decode_tokens: 2,
        seed: 0,
    }
}

#[test]
fn sweep_rows_and_savings() {
    let b = sharp_weights::<f32>(&tiny_config(), 1, 1.0);
    let ps = prompts();
    let spec = ChainSpec::new(&[&ps[0], &ps[1]], 1, 4);
    let shared = gen_compress_qa(0, 1, 1, 2).unwrap()[0].shared().to_vec();
    let report = time_chain(&b, &spec, &shared, &plan(vec![4, 8, 16, 32])).unwrap();
    assert_eq!(report.rows.len(), 8);
    for (base, fth) in report.rows_for(CacheMode::Baseline).iter().zip(report.rows_for(CacheMode::Fthss)) {
        assert_eq!(base.intermediate_tokens, fth.intermediate_tokens);
        assert_eq!(base.prefill_tokens - fth.prefill_tokens, shared.len() + base.intermediate_tokens);
        assert!(fth.attn_flops < base.attn_flops);
        assert!(base.mean_s > 0.0 && fth.mean_s > 0.0);
    }
    let savings = report.flop_savings();
    assert_eq!(savings.len(), 4);
    assert!(savings.windows(2).all(|w| w[1].1 > w[0].1));
    let (_, r2) = fit_quadratic(&savings);
    assert!(r2 >= 0.99, "{r2}");
    let back = report_parse(&report_render(&report).unwrap()).unwrap();
    assert_eq!(back, report);
}

#[test]
fn timing_needs_two_models_and_enough_trials() {
    let b = sharp_weights::<f32>(&tiny_config(), 1, 1.0);
    let ps = prompts();
    let one = ChainSpec::new(&[&ps[0]], 1, 4);
    assert!(time_chain(&b, &one, &[5, 6], &plan(vec![4])).is_err());
    let two = ChainSpec::new(&[&ps[0], &ps[1]], 1, 4);
    let few = TimingPlan { trials: 1, ..plan(vec![4]) };
    assert!(time_chain(&b, &two, &[5, 6], &few).is_err());
}

#[test]
fn trace_flops_favor_the_shared_cache() {
    let b = sharp_weights::<f32>(&tiny_config(), 1, 1.0);
    let ps = prompts();
    let spec = ChainSpec::new(&[&ps[0], &ps[1]], 1, 4);
    let shared = gen_compress_qa(0, 1, 1, 4).unwrap()[0].shared().to_vec();
    let t = run_chain_text(&b, &spec, &shared).unwrap();
    let f = run_chain_fthss(&b, &spec, &shared).unwrap();
    assert!(attention_flops(&b.config, &f.trace) < attention_flops(&b.config, &t.trace));
}

proptest! {
    #[test]
    fn baseline_memory_is_n_times_shared(
        layers in 1usize..8, heads in 1usize..8, hd in 1usize..64, pos in 0usize..2000, bytes in 1usize..9, n in 1usize..6,
    ) {
        let one = kv_bytes(layers, heads, hd, pos, bytes, n, CacheMode::Fthss);
        prop_assert_eq!(one, 2 * layers * heads * hd * pos * bytes);
        prop_assert_eq!(kv_bytes(layers, heads, hd, pos, bytes, n, CacheMode::Baseline), n * one);
    }

    #[test]
    fn exact_quadratics_fit_perfectly(a in -5.0f64..5.0, b in -5.0f64..5.0, c in 0.1f64..5.0) {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0, 16.0].iter().map(|&x| (x, a + b * x + c * x * x)).collect();
        let (coef, r2) = fit_quadratic(&pts);
        prop_assert!((coef[2] - c).abs() < 1e-6);
        prop_assert!(r2 > 0.999_999);
    }
}
