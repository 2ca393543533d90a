mod common;

use predcal::calibration::{coverage_at, make_replicates, BootstrapReplicate, FittedModel, Slot};
use predcal::design::{build_design_matrices, futmat_from_json, futmat_to_json, FutureDesign};
use predcal::fitting::{fit_quasi_poisson, fit_random_intercepts};
use predcal::intervals::Support;
use predcal::{Alternative, RandomStream};
use proptest::prelude::*;

use common::*;

fn arb_slot() -> impl Strategy<Value = Slot> {
    (-50.0f64..50.0, 0.01f64..10.0, -80.0f64..80.0, prop::bool::ANY).prop_map(|(center, se, observed, clamp)| Slot {
        center,
        se,
        observed: if clamp { observed.abs() } else { observed },
        support: if clamp { Support::NONNEGATIVE } else { Support::REAL_LINE },
    })
}

fn arb_replicates() -> impl Strategy<Value = Vec<BootstrapReplicate>> {
    prop::collection::vec(
        prop::collection::vec(arb_slot(), 1..5).prop_map(|slots| BootstrapReplicate { slots }),
        1..60,
    )
}

fn arb_alternative() -> impl Strategy<Value = Alternative> {
    prop_oneof![Just(Alternative::Both), Just(Alternative::Lower), Just(Alternative::Upper)]
}

proptest! {
    #[test]
    fn coverage_is_monotone_in_delta(
        reps in arb_replicates(),
        alt in arb_alternative(),
        d1 in 0.0f64..12.0,
        step in 0.0f64..5.0,
    ) {
        prop_assert!(coverage_at(&reps, d1, alt) <= coverage_at(&reps, d1 + step, alt));
    }

    #[test]
    fn joint_coverage_never_exceeds_any_slot(reps in arb_replicates(), delta in 0.0f64..8.0) {
        let joint = coverage_at(&reps, delta, Alternative::Both);
        let first: Vec<BootstrapReplicate> = reps
            .iter()
            .map(|r| BootstrapReplicate { slots: vec![r.slots[0]] })
            .collect();
        prop_assert!(joint <= coverage_at(&first, delta, Alternative::Both));
    }

    #[test]
    fn one_sided_covers_at_least_two_sided(reps in arb_replicates(), delta in 0.0f64..8.0) {
        let both = coverage_at(&reps, delta, Alternative::Both);
        prop_assert!(both <= coverage_at(&reps, delta, Alternative::Lower));
        prop_assert!(both <= coverage_at(&reps, delta, Alternative::Upper));
    }
}

fn c2_fit() -> FittedModel {
    let spec = c2_spec();
    FittedModel::Lmm(fit_random_intercepts(&mixed("c2_dat1.csv", &spec), &spec).unwrap())
}

#[test]
fn futvec_of_all_rows_equals_the_historical_matrices() {
    let spec = c2_spec();
    let dm = build_design_matrices(&mixed("c2_dat1.csv", &spec), &spec).unwrap();
    let explicit = futmat_from_json(&futmat_to_json(&dm)).unwrap();
    let model = c2_fit();
    let stream = RandomStream::new(42);
    let rows = FutureDesign::RowSubset((1..=dm.n_rows()).collect());
    let a = make_replicates(&model, &rows, 150, &stream).unwrap();
    let b = make_replicates(&model, &FutureDesign::ExplicitMatrices(explicit), 150, &stream).unwrap();
    assert_eq!(a, b);
}

#[test]
fn replicates_do_not_depend_on_the_thread_count() {
    let model = c2_fit();
    let future = FutureDesign::RowSubset(vec![2, 5, 9]);
    let stream = RandomStream::new(9);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| make_replicates(&model, &future, 120, &stream).unwrap())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn quasi_poisson_bootstrap_is_centred_on_the_fit() {
    let fit = fit_quasi_poisson(&counts("qp_dat1.csv")).unwrap();
    let reps = make_replicates(
        &FittedModel::QuasiPoisson(fit.clone()),
        &FutureDesign::CountRepeats(2),
        4000,
        &RandomStream::new(3),
    )
    .unwrap();
    let centers: Vec<f64> = reps.iter().map(|r| r.slots[0].center).collect();
    let mean = centers.iter().sum::<f64>() / centers.len() as f64;
    // Var(λ̂*) ≈ φλ/H.
    let mc_se = (fit.phi_hat * fit.lambda_hat / 10.0 / centers.len() as f64).sqrt();
    assert!((mean - fit.lambda_hat).abs() < 4.0 * mc_se, "{mean}");
    // Both slots of a replicate share the refit.
    assert!(reps.iter().all(|r| r.slots[0].center == r.slots[1].center && r.slots[0].se == r.slots[1].se));
    assert!(reps.iter().all(|r| r.slots[0].se > 0.0));
}

#[test]
fn future_larger_than_history_is_rejected() {
    let err = make_replicates(&c2_fit(), &FutureDesign::Unstructured(28), 100, &RandomStream::new(1)).unwrap_err();
    assert!(matches!(err, predcal::Error::TaskMismatch(_)), "{err}");
}
