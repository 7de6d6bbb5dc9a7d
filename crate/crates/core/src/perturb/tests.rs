use super::*;
use crate::model::tests::toy_model;
use crate::model::HookPoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_spec() -> SweepSpec {
    SweepSpec {
        steps: 20,
        probe: HookPoint::resid_pre(1),
        read: HookPoint::resid_post(1),
        ..SweepSpec::default()
    }
}

fn random_activation(d: usize, seed: u64) -> Activation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Activation::from_vec((0..d).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect())
}

#[test]
fn step_zero_is_base_bitwise_in_both_modes() {
    let base = random_activation(16, 0);
    let target = random_activation(16, 1);
    for mode in [StepMode::Absolute, StepMode::Relative] {
        let spec = SweepSpec { mode, ..toy_spec() };
        let p = perturbed_point(&base, &target, &spec, 0).unwrap();
        assert_eq!(p, base);
    }
}

#[test]
fn relative_final_step_is_target_bitwise() {
    let base = random_activation(16, 2);
    let target = random_activation(16, 3);
    let spec = SweepSpec {
        mode: StepMode::Relative,
        ..toy_spec()
    };
    let p = perturbed_point(&base, &target, &spec, spec.steps).unwrap();
    assert_eq!(p, target);
}

#[test]
fn absolute_step_arithmetic_reaches_target() {
    // distance 40, step size 0.5: step 80 lands exactly on the target
    let d = 16;
    let base = Activation::from_vec(vec![0.0; d]);
    let mut values = vec![0.0f32; d];
    values[0] = 40.0;
    let target = Activation::from_vec(values);
    let spec = SweepSpec {
        mode: StepMode::Absolute,
        steps: 100,
        step_size: 0.5,
        ..toy_spec()
    };
    let p = perturbed_point(&base, &target, &spec, 80).unwrap();
    let rel = p.l2_distance(&target) / target.norm();
    assert!(rel <= 1e-5, "relative miss {rel}");
    assert!((p.l2_distance(&base) - 40.0).abs() < 1e-3);
}

#[test]
fn zero_direction_is_rejected_in_absolute_mode() {
    let base = random_activation(8, 4);
    let spec = SweepSpec {
        mode: StepMode::Absolute,
        ..toy_spec()
    };
    assert!(matches!(
        perturbed_point(&base, &base, &spec, 1),
        Err(Error::ZeroDirection)
    ));
}

#[test]
fn distance_from_base_strictly_increases() {
    let base = random_activation(24, 5);
    let target = random_activation(24, 6);
    for mode in [StepMode::Absolute, StepMode::Relative] {
        let spec = SweepSpec { mode, ..toy_spec() };
        let mut prev = -1.0f64;
        for n in 0..=spec.steps {
            let p = perturbed_point(&base, &target, &spec, n).unwrap();
            let d = p.l2_distance(&base);
            assert!(d > prev, "mode {mode:?}, step {n}: {d} <= {prev}");
            prev = d;
        }
    }
}

#[test]
fn absolute_and_relative_agree_when_lengths_match() {
    let base = random_activation(16, 7);
    let target = random_activation(16, 8);
    let dist = base.l2_distance(&target) as f32;
    let steps = 50;
    let abs = SweepSpec {
        mode: StepMode::Absolute,
        steps,
        step_size: dist / steps as f32,
        ..toy_spec()
    };
    let rel = SweepSpec {
        mode: StepMode::Relative,
        steps,
        ..toy_spec()
    };
    for n in [0, 10, 25, 50] {
        let a = perturbed_point(&base, &target, &abs, n).unwrap();
        let r = perturbed_point(&base, &target, &rel, n).unwrap();
        let err = a.l2_distance(&r) / target.norm().max(1.0);
        assert!(err <= 1e-5, "step {n}: {err}");
    }
}

#[test]
fn step_index_out_of_range() {
    let base = random_activation(8, 9);
    let target = random_activation(8, 10);
    let spec = toy_spec();
    assert!(matches!(
        perturbed_point(&base, &target, &spec, spec.steps + 1),
        Err(Error::BadParameter(_))
    ));
}

#[test]
fn invalid_specs_rejected() {
    let spec = SweepSpec {
        steps: 0,
        ..toy_spec()
    };
    assert!(spec.validate().is_err());
    let spec = SweepSpec {
        mode: StepMode::Absolute,
        step_size: 0.0,
        ..toy_spec()
    };
    assert!(spec.validate().is_err());
}

// ---------------------------------------------------------------------------
// Sweeps through the toy model
// ---------------------------------------------------------------------------

#[test]
fn sweep_toward_base_is_identically_zero() {
    let model = toy_model(40);
    let tokens = [1, 2, 3, 4, 5];
    let spec = SweepSpec {
        mode: StepMode::Relative,
        ..toy_spec()
    };
    let base = model
        .forward(&tokens, None, &[spec.probe])
        .unwrap()
        .captured[&spec.probe]
        .clone();
    let curve = run_sweep(&model, &tokens, &base, &base, &spec, ReadoutSpec::default()).unwrap();
    assert!(curve.l2.iter().all(|&v| v == 0.0));
    assert_eq!(curve.base_target_distance, 0.0);
}

#[test]
fn first_step_readout_is_exactly_zero() {
    let model = toy_model(41);
    let tokens = [7, 3, 9, 1];
    for mode in [StepMode::Absolute, StepMode::Relative] {
        let spec = SweepSpec { mode, ..toy_spec() };
        let base = model
            .forward(&tokens, None, &[spec.probe])
            .unwrap()
            .captured[&spec.probe]
            .clone();
        let target = random_activation(model.config().d_model, 42);
        let curve = run_sweep(
            &model,
            &tokens,
            &base,
            &target,
            &spec,
            ReadoutSpec::with_kl(),
        )
        .unwrap();
        assert_eq!(curve.l2[0], 0.0);
        assert_eq!(curve.kl.as_ref().unwrap()[0], 0.0);
        assert_eq!(curve.l2.len(), spec.steps + 1);
    }
}

#[test]
fn kl_readout_is_nonnegative_and_finite() {
    let model = toy_model(43);
    let tokens = [2, 3, 5, 7, 11];
    let spec = toy_spec();
    let base = model
        .forward(&tokens, None, &[spec.probe])
        .unwrap()
        .captured[&spec.probe]
        .clone();
    let target = random_activation(model.config().d_model, 44);
    for direction in [
        KlDirection::BaseFromPerturbed,
        KlDirection::PerturbedFromBase,
    ] {
        let readouts = ReadoutSpec {
            kl: true,
            kl_direction: direction,
        };
        let curve = run_sweep(&model, &tokens, &base, &target, &spec, readouts).unwrap();
        for &v in curve.kl.as_ref().unwrap() {
            assert!(v >= 0.0 && v.is_finite());
        }
    }
}

#[test]
fn sweep_perturbs_the_readout_eventually() {
    let model = toy_model(45);
    let tokens = [1, 2, 3];
    let spec = toy_spec();
    let base = model
        .forward(&tokens, None, &[spec.probe])
        .unwrap()
        .captured[&spec.probe]
        .clone();
    let mut shifted = base.values().clone();
    for v in shifted.iter_mut() {
        *v += 2.0;
    }
    let target = Activation::new(shifted);
    let curve = run_sweep(
        &model,
        &tokens,
        &base,
        &target,
        &spec,
        ReadoutSpec::default(),
    )
    .unwrap();
    assert!(curve.l2.last().unwrap() > &0.0);
}

#[test]
fn plateau_sweep_from_target_is_zero() {
    let model = toy_model(46);
    let tokens = [4, 4, 4, 4];
    let spec = SweepSpec {
        mode: StepMode::Relative,
        ..toy_spec()
    };
    let start = random_activation(model.config().d_model, 47);
    let curve = plateau_sweep(
        &model,
        &tokens,
        &start,
        &start,
        &spec,
        ReadoutSpec::default(),
    )
    .unwrap();
    assert!(curve.l2.iter().all(|&v| v == 0.0));
}

#[test]
fn plateau_sweep_zero_at_synthetic_start_and_deterministic() {
    let model = toy_model(48);
    let tokens = [9, 9, 1, 2];
    let spec = toy_spec();
    let start = random_activation(model.config().d_model, 49);
    let target = random_activation(model.config().d_model, 50);
    let a = plateau_sweep(
        &model,
        &tokens,
        &start,
        &target,
        &spec,
        ReadoutSpec::with_kl(),
    )
    .unwrap();
    let b = plateau_sweep(
        &model,
        &tokens,
        &start,
        &target,
        &spec,
        ReadoutSpec::with_kl(),
    )
    .unwrap();
    assert_eq!(a.l2[0], 0.0);
    assert_eq!(a.l2, b.l2);
    assert_eq!(a.kl, b.kl);
}

#[test]
fn final_ln_readout_flag_changes_the_curve() {
    let model = toy_model(51);
    let tokens = [3, 1, 4];
    let spec = toy_spec();
    let base = model
        .forward(&tokens, None, &[spec.probe])
        .unwrap()
        .captured[&spec.probe]
        .clone();
    let target = random_activation(model.config().d_model, 52);
    let raw = run_sweep(
        &model,
        &tokens,
        &base,
        &target,
        &spec,
        ReadoutSpec::default(),
    )
    .unwrap();
    let ln_spec = SweepSpec {
        read_after_final_ln: true,
        ..spec
    };
    let normed = run_sweep(
        &model,
        &tokens,
        &base,
        &target,
        &ln_spec,
        ReadoutSpec::default(),
    )
    .unwrap();
    assert_eq!(normed.l2[0], 0.0);
    assert!(normed.l2.iter().all(|v| v.is_finite()));
    assert_ne!(raw.l2, normed.l2);
}

#[test]
fn sweeps_match_unresumed_forward() {
    // the resume-at-probe fast path must be invisible in the results
    let model = toy_model(53);
    let tokens = [5, 6, 7, 8, 9];
    let spec = toy_spec();
    let base = model
        .forward(&tokens, None, &[spec.probe])
        .unwrap()
        .captured[&spec.probe]
        .clone();
    let target = random_activation(model.config().d_model, 54);
    let curve = run_sweep(
        &model,
        &tokens,
        &base,
        &target,
        &spec,
        ReadoutSpec::default(),
    )
    .unwrap();

    let reference =
        model.forward(&tokens, None, &[spec.read]).unwrap().captured[&spec.read].clone();
    for n in [0usize, 7, spec.steps] {
        let point = perturbed_point(&base, &target, &spec, n).unwrap();
        let patch = PatchSpec::new(spec.probe, point);
        let read = model
            .forward(&tokens, Some(&patch), &[spec.read])
            .unwrap()
            .captured[&spec.read]
            .clone();
        assert_eq!(curve.l2[n], reference.l2_distance(&read));
    }
}
