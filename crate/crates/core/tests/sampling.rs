use predcal::sampling::{
    floor_phi, sample_beta_binomial, sample_binomial, sample_quasi_binomial, sample_quasi_poisson, BetaMixing,
    GammaMixing,
};
use predcal::RandomStream;
use proptest::prelude::*;

proptest! {
    #[test]
    fn binomial_draws_stay_within_cluster_sizes(
        sizes in prop::collection::vec(5u64..200, 1..30),
        prob in 0.01f64..0.99,
        rho in 0.001f64..0.9,
        seed in any::<u64>(),
    ) {
        let mut rng = RandomStream::new(seed);
        let bb = sample_beta_binomial(&sizes, prob, rho, &mut rng).unwrap();
        let qb = sample_quasi_binomial(&sizes, prob, 1.0 + rho * 3.0, &mut rng).unwrap();
        let b = sample_binomial(&sizes, prob, &mut rng).unwrap();
        for (i, &n) in sizes.iter().enumerate() {
            prop_assert!(bb[i] <= n && qb[i] <= n && b[i] <= n);
        }
    }

    #[test]
    fn same_stream_same_draws(seed in any::<u64>(), lambda in 0.5f64..500.0, phi in 1.01f64..20.0) {
        let a = sample_quasi_poisson(20, lambda, phi, &mut RandomStream::new(seed)).unwrap();
        let b = sample_quasi_poisson(20, lambda, phi, &mut RandomStream::new(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn quasi_binomial_mixing_reproduces_the_dispersion(
        prob in 0.01f64..0.99,
        size in 3u64..500,
        frac in 0.01f64..0.99,
    ) {
        // For Beta(a, b) mixing, Var = nπ(1-π)[1 + (n-1)ρ] with ρ = 1/(a+b+1).
        let phi = 1.0 + frac * (size as f64 - 1.0) * 0.999;
        prop_assume!(phi < size as f64);
        let mix = BetaMixing::quasi_binomial(prob, phi, size).unwrap();
        prop_assert!((mix.a / (mix.a + mix.b) - prob).abs() < 1e-9);
        let implied = 1.0 + (size as f64 - 1.0) * mix.rho();
        prop_assert!((implied - phi).abs() < 1e-8 * phi);
    }

    #[test]
    fn gamma_mixing_mean_and_variance(lambda in 0.1f64..1e4, phi in 1.001f64..50.0) {
        let g = GammaMixing::quasi_poisson(lambda, phi).unwrap();
        let mean = g.shape / g.rate;
        let var = g.shape / (g.rate * g.rate);
        prop_assert!((mean - lambda).abs() < 1e-9 * lambda);
        // Poisson-gamma: λ + Var(mean) = φλ.
        prop_assert!((lambda + var - phi * lambda).abs() < 1e-8 * phi * lambda);
    }
}

#[test]
fn dispersion_floor() {
    assert_eq!(floor_phi(0.4), floor_phi(1.0));
    assert_eq!(floor_phi(3.0), 3.0);
}

#[test]
fn out_of_range_parameters() {
    let mut rng = RandomStream::new(1);
    assert!(sample_quasi_poisson(5, -1.0, 2.0, &mut rng).is_err());
    assert!(sample_beta_binomial(&[10], 1.5, 0.1, &mut rng).is_err());
    assert!(sample_quasi_binomial(&[10], 0.5, 10.0, &mut rng).is_err());
}
