//! Gradient fidelity against finite differences, and optimizer fidelity
//! against an independent AdamW.

use kbedit_core::tensor::{adamw_step, AdamState, DiffTensor};
use kbedit_core::testkit;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

#[test]
fn composite_loss_gradients_match_finite_differences() {
    for seed in 0..3u64 {
        let (model, records) = testkit::random_grad_check_instance(seed).unwrap();
        let err =
            testkit::composite_loss_grad_error(&model, &records, 1, 1.0, seed ^ 7, 1e-5).unwrap();
        assert!(err <= 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn composite_loss_gradients_match_at_layer_two() {
    let (model, records) = testkit::random_grad_check_instance(99).unwrap();
    let err = testkit::composite_loss_grad_error(&model, &records, 2, 1.0, 5, 1e-5).unwrap();
    assert!(err <= 1e-4, "relative error {err}");
}

#[test]
fn pretraining_gradients_match_sampled_finite_differences() {
    let (model, _) = testkit::random_grad_check_instance(7).unwrap();
    let tokens = model.tokenize("The birthplace of Baru Ketim is Parvin .").unwrap().ids;
    let err = testkit::pretrain_grad_error_sampled(&model, &tokens, 3, 1e-5, 11).unwrap();
    assert!(err <= 1e-4, "relative error {err}");
}

#[test]
fn adamw_matches_reference_on_random_sequences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 12;
    let init: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let mut params = vec![DiffTensor::new(vec![n], init.clone(), true).unwrap()];
    let mut state = AdamState::new(&params);
    let mut reference = testkit::ReferenceAdamW::new(n);
    let mut w_ref = init;

    for step in 0..50 {
        let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let lr = 1e-3 * (50 - step) as f64 / 50.0;
        let wd = 0.01;
        reference.step(&mut w_ref, &g, lr, wd);
        params[0].grad_mut().copy_from_slice(&g);
        adamw_step(&mut params, &mut state, lr, wd).unwrap();
        for (a, b) in params[0].values().iter().zip(&w_ref) {
            assert!((a - b).abs() <= 1e-14, "step {step}: {a} vs {b}");
        }
    }
}
