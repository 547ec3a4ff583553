use kvchain::model::ModelWeights;
use kvchain::tasks::{gen_compress_qa, gen_multi_round, SyntheticExample};
use kvchain::trainer::{
    cache_key, continue_fthss, fthss_online_loss_and_grad, grad_check, materialize_upstream_caches,
    train_fthss_from_caches, train_fthss_multi_round, train_fthss_single_round_online, train_standard_prompt,
    PromptParams, TrainConfig, TrainError,
};
use kvchain::verify::{compare_training_modes, sharp_weights, tiny_config};
use kvchain::{MaskPolicy, Tensor};
use proptest::prelude::*;

fn base() -> ModelWeights<f32> {
    sharp_weights(&tiny_config(), 3, 1.0)
}

fn tc(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 4,
        n_prompt_tokens: 3,
        ..TrainConfig::default()
    }
}

fn data(n: usize) -> Vec<SyntheticExample> {
    gen_compress_qa(5, n, 1, 2).unwrap()
}

fn trained_a(b: &ModelWeights<f32>, d: &[SyntheticExample]) -> PromptParams<f32> {
    train_standard_prompt(b, d, 0, &tc(2)).unwrap().0
}

#[test]
fn base_weights_stay_frozen() {
    let b = base();
    let before = b.clone();
    let d = data(8);
    let pa = trained_a(&b, &d);
    train_fthss_single_round_online(&b, &[&pa], &d, &tc(3)).unwrap();
    assert!(b.bitwise_eq(&before));
}

#[test]
fn training_marks_prompt_trained_and_moves_it() {
    let b = base();
    let d = data(8);
    let (p, log) = train_standard_prompt(&b, &d, 1, &tc(3)).unwrap();
    assert!(p.trained);
    assert_eq!(p.model_id, 1);
    assert_eq!(log.len(), 3);
    let init = PromptParams::<f32>::init(1, 3, b.config.d_model, 0);
    assert!(!p.embeddings.bitwise_eq(&init.embeddings));
}

#[test]
fn offline_and_online_agree_bitwise_under_both_policies() {
    let b = base();
    let d = data(8);
    let pa = trained_a(&b, &d);
    for mask in [true, false] {
        let t = TrainConfig {
            mask_foreign_prompts: mask,
            ..tc(6)
        };
        let dir = tempfile::tempdir().unwrap();
        let cmp = compare_training_modes(&b, &pa, &d, &t, dir.path()).unwrap();
        assert!(cmp.bitwise(), "mask {mask}: gap {}", cmp.max_loss_gap());
    }
}

#[test]
fn policy_toggle_changes_the_objective() {
    let b = base();
    let d = data(2);
    let pa = trained_a(&b, &d);
    let pb = PromptParams::<f32>::init(1, 3, b.config.d_model, 9).embeddings;
    let on = fthss_online_loss_and_grad(&b, &[&pa], &pb, &d[0], MaskPolicy::default()).unwrap();
    let off = fthss_online_loss_and_grad(&b, &[&pa], &pb, &d[0], MaskPolicy { mask_foreign_prompts: false }).unwrap();
    assert_ne!(on.0, off.0);
}

#[test]
fn untrained_upstream_is_rejected() {
    let b = base();
    let d = data(4);
    let raw = PromptParams::<f32>::init(0, 3, b.config.d_model, 0);
    let err = train_fthss_single_round_online(&b, &[&raw], &d, &tc(1)).unwrap_err();
    assert!(matches!(err, TrainError::UntrainedUpstream(0)));
    let dir = tempfile::tempdir().unwrap();
    let err = materialize_upstream_caches(&b, &[&raw], &d, 3, MaskPolicy::default(), dir.path()).unwrap_err();
    assert!(matches!(err, TrainError::UntrainedUpstream(0)));
}

#[test]
fn stale_cache_key_is_rejected() {
    let b = base();
    let d = data(4);
    let pa = trained_a(&b, &d);
    let dir = tempfile::tempdir().unwrap();
    let key = materialize_upstream_caches(&b, &[&pa], &d, 3, MaskPolicy::default(), dir.path()).unwrap();
    assert_eq!(key, cache_key(&b, &[&pa], MaskPolicy::default()));
    let mut other = key;
    other[0] ^= 1;
    assert!(train_fthss_from_caches(&b, &[&pa], &d, &tc(1), dir.path(), &other).is_err());
    assert!(train_fthss_from_caches(&b, &[&pa], &d, &tc(1), dir.path(), &key).is_ok());
}

#[test]
fn continuation_requires_a_trained_start_and_keeps_it_without_data() {
    let b = base();
    let d = data(4);
    let pa = trained_a(&b, &d);
    let raw = PromptParams::<f32>::init(1, 3, b.config.d_model, 0);
    assert!(matches!(continue_fthss(&b, &[&pa], &raw, &d, &tc(1)), Err(TrainError::UntrainedUpstream(1))));
    let std_b = train_standard_prompt(&b, &d, 1, &tc(2)).unwrap().0;
    let (same, log) = continue_fthss(&b, &[&pa], &std_b, &[], &tc(5)).unwrap();
    assert!(log.is_empty());
    assert!(same.embeddings.bitwise_eq(&std_b.embeddings));
    let (moved, log) = continue_fthss(&b, &[&pa], &std_b, &d, &tc(2)).unwrap();
    assert_eq!(log.len(), 2);
    assert!(!moved.embeddings.bitwise_eq(&std_b.embeddings));
}

#[test]
fn online_gradient_matches_finite_differences() {
    let b = base().cast::<f64>();
    let d = data(1);
    let pa = trained_a(&base(), &d).cast::<f64>();
    let start = PromptParams::<f64>::init(1, 3, b.config.d_model, 4).embeddings;
    let worst = grad_check(
        |p| fthss_online_loss_and_grad(&b, &[&pa], p, &d[0], MaskPolicy::default()),
        &start,
        1e-5,
        32,
        1,
    )
    .unwrap();
    assert!(worst <= 1e-4, "{worst}");
}

#[test]
fn overfits_a_single_example() {
    let b = sharp_weights::<f32>(&tiny_config(), 3, 20.0);
    let d = data(1);
    let t = TrainConfig {
        steps: 200,
        batch_size: 1,
        lr: 1e-1,
        n_prompt_tokens: 8,
        ..tc(200)
    };
    let (_, log) = train_standard_prompt(&b, &d, 0, &t).unwrap();
    let first = log.first().unwrap().loss;
    let last = log.last().unwrap().loss;
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn same_seed_same_run() {
    let b = base();
    let d = data(8);
    let (p1, l1) = train_standard_prompt(&b, &d, 0, &tc(4)).unwrap();
    let (p2, l2) = train_standard_prompt(&b, &d, 0, &tc(4)).unwrap();
    assert!(p1.embeddings.bitwise_eq(&p2.embeddings));
    assert_eq!(l1, l2);
}

#[test]
fn prompt_checkpoint_round_trip() {
    let b = base();
    let d = data(4);
    let p = trained_a(&b, &d);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.kvp");
    p.save(&path, &b.config).unwrap();
    let (q, config) = PromptParams::<f32>::load(&path).unwrap();
    assert_eq!(config, b.config);
    assert_eq!(q, p);
    std::fs::write(&path, b"junk").unwrap();
    assert!(PromptParams::<f32>::load(&path).is_err());
}

#[test]
fn multi_round_trains_every_model() {
    let b = base();
    let d = gen_multi_round(2, 6, 2).unwrap();
    let (ps, log) = train_fthss_multi_round(&b, &d, &tc(2)).unwrap();
    assert_eq!(ps.iter().map(|p| p.model_id).collect::<Vec<_>>(), vec![0, 1]);
    assert!(ps.iter().all(|p| p.trained));
    assert_eq!(log.len(), 2);
}

#[test]
fn empty_data_is_an_error() {
    let b = base();
    assert!(train_standard_prompt(&b, &[], 0, &tc(1)).is_err());
}

proptest! {
    #[test]
    fn lr_schedule_warms_up_then_decays(steps in 2usize..400, frac in 0.0f64..0.5) {
        let t = TrainConfig { steps, warmup_frac: frac, ..TrainConfig::default() };
        let lrs: Vec<f64> = (0..steps).map(|s| t.lr_at(s)).collect();
        let peak = lrs.iter().cloned().fold(0.0, f64::max);
        prop_assert!(peak <= t.lr + 1e-15);
        let top = lrs.iter().position(|&x| x == peak).unwrap();
        prop_assert!(lrs[..=top].windows(2).all(|w| w[1] >= w[0]));
        prop_assert!(lrs[top..].windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(lrs.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn prompt_cast_round_trip(seed in 0u64..1000, n in 1usize..6) {
        let p = PromptParams::<f32>::init(2, n, 8, seed);
        let back: PromptParams<f32> = p.cast::<f64>().cast();
        prop_assert_eq!(&back, &p);
        let t: &Tensor<f32> = &p.embeddings;
        prop_assert_eq!(t.shape(), &[n, 8][..]);
    }
}
