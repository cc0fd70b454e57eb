mod common;

use common::{gradient_check, random_model, random_sequence, rng};
use dtpp::ctx_attention::EncoderConfig;

#[test]
fn gradient_matches_finite_differences_small_config() {
    let mut r = rng(7);
    let mut cfg = EncoderConfig::new(3, 2, 4);
    cfg.d_qk = 4;
    let model = random_model(&mut r, cfg, 0.5);
    let batch = vec![random_sequence(&mut r, 5, 3), random_sequence(&mut r, 5, 3)];
    let (err, worst) = gradient_check(&model, &batch, 1e-5, 1e-6);
    assert!(err <= 1e-4, "max relative error {err:e} at {worst}");
}

#[test]
fn gradient_matches_finite_differences_multi_head() {
    let mut r = rng(8);
    let mut cfg = EncoderConfig::new(2, 1, 4);
    cfg.n_heads = 2;
    cfg.d_qk = 6;
    let model = random_model(&mut r, cfg, 0.8);
    let batch = vec![random_sequence(&mut r, 6, 2)];
    let (err, worst) = gradient_check(&model, &batch, 1e-5, 1e-6);
    assert!(err <= 1e-4, "max relative error {err:e} at {worst}");
}
