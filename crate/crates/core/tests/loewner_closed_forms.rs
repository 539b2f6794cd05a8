use isosle_core::algebra::{c, Complex};
use isosle_core::loewner::driving::{DrivingKind, DrivingSpec};
use isosle_core::loewner::{run_trajectory, LoewnerState, StepControl};

fn end_state_with(spec: &DrivingSpec, lambda: &[Complex], s: &[Complex], control: &StepControl) -> LoewnerState {
    run_trajectory(spec, lambda, s, control).unwrap().pop().unwrap()
}

fn end_state(spec: &DrivingSpec, lambda: &[Complex], s: &[Complex]) -> LoewnerState {
    end_state_with(spec, lambda, s, &StepControl::default())
}

#[test]
fn birkhoff_value_at_unit_time() {
    let st = end_state(&DrivingSpec::zero(1e-4, 1.0), &[c(2.0, 0.0)], &[c(1.0, 0.0)]);
    assert!((st.t - 1.0).abs() < 1e-12);
    let expected = 2.0 / 8f64.sqrt();
    assert!((st.birkhoff[0] - c(expected, 0.0)).norm() < 1e-8, "{}", st.birkhoff[0]);
}

#[test]
fn rank_two_birkhoff_is_gprime_squared() {
    let st = end_state(&DrivingSpec::zero(1e-4, 1.0), &[c(2.0, 0.0)], &[c(1.0, 0.0)]);
    let v = st.evolve_birkhoff_general(0, 2, c(1.0, 0.0)).unwrap();
    assert!((v - c(0.5, 0.0)).norm() < 1e-8, "{v}");
    let w = st.birkhoff_via_gprime(0, 2, c(1.0, 0.0)).unwrap();
    assert!((v - w).norm() < 1e-8);
}

#[test]
fn geometric_derivatives_match_square_root_map() {
    let st = end_state(&DrivingSpec::zero(1e-4, 1.0), &[c(2.0, 0.0)], &[c(1.0, 0.0)]);
    // g(z) = √(z² + 4t): Λ = √8, g′ = λ/Λ, 𝒜 = g″/g′ = 4t/(λΛ²), 𝒮 = −6t(λ² + t)/(λΛ²)².
    assert!((st.lambda_t[0] - c(8f64.sqrt(), 0.0)).norm() < 1e-7);
    assert!((st.gprime[0] - c(0.70710678, 0.0)).norm() < 1e-7);
    assert!((st.preschwarz[0] - c(0.25, 0.0)).norm() < 1e-7);
    assert!((st.schwarz[0] - c(-0.28125, 0.0)).norm() < 1e-7);
}

#[test]
fn exponential_and_power_forms_agree_on_brownian_paths() {
    let lam = [c(1.0, 1.0), c(-0.5, 2.0)];
    let s = [c(1.0, 0.0), c(0.3, -0.7)];
    // Seed 7 passes within 0.016 of the first puncture.
    let control = StepControl { refine_ratio: 2e-3, ..StepControl::default() };
    for seed in 0..10 {
        let spec = DrivingSpec::brownian(4.0, 1e-4, 1.0, seed).frozen().unwrap();
        assert!(matches!(spec.kind, DrivingKind::Table { .. }));
        let st = end_state_with(&spec, &lam, &s, &control);
        for i in 0..2 {
            for k in 1..=3 {
                let a = st.evolve_birkhoff_general(i, k, s[i]).unwrap();
                let b = st.birkhoff_via_gprime(i, k, s[i]).unwrap();
                assert!((a - b).norm() < 1e-8 * a.norm().max(1.0), "seed {seed} i {i} k {k}: {a} vs {b}");
            }
            assert!((st.birkhoff[i] - st.birkhoff_via_gprime(i, 1, s[i]).unwrap()).norm() < 1e-8);
        }
    }
}

#[test]
fn frozen_path_reproduces_brownian_trajectory() {
    let spec = DrivingSpec::brownian(4.0, 1e-3, 0.2, 9);
    let a = end_state(&spec, &[c(1.0, 1.0)], &[c(1.0, 0.0)]);
    let b = end_state(&spec.frozen().unwrap(), &[c(1.0, 1.0)], &[c(1.0, 0.0)]);
    assert!((a.z - b.z).abs() < 1e-12);
    assert!((a.lambda_t[0] - b.lambda_t[0]).norm() < 1e-6);
}

#[test]
fn imaginary_part_of_puncture_decreases() {
    let states = run_trajectory(
        &DrivingSpec::brownian(4.0, 1e-3, 0.5, 3),
        &[c(0.5, 1.0)],
        &[c(1.0, 0.0)],
        &StepControl::default(),
    )
    .unwrap();
    for w in states.windows(2) {
        assert!(w[1].lambda_t[0].im <= w[0].lambda_t[0].im + 1e-15);
    }
}
