use gpcdl::bench::metrics::dict_error;
use gpcdl::bench::sim::{gen_gaussian_dataset, SimSpec, TemplateGen};
use gpcdl::kernel::{matern_cov, matern_psd};
use gpcdl::spectral::wiener_gains;
use gpcdl::{KernelSpec, Smoothness};
use proptest::prelude::*;

fn vector(k: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-5.0f64..5.0, k).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dictionary_error_is_symmetric_and_sign_blind((a, b) in (2usize..20).prop_flat_map(|k| (vector(k), vector(k)))) {
        let e = dict_error(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        prop_assert!((e - dict_error(&b, &a).unwrap()).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        prop_assert!((e - dict_error(&neg, &b).unwrap()).abs() < 1e-12);
        let scaled: Vec<f64> = a.iter().map(|v| 3.7 * v).collect();
        prop_assert!((e - dict_error(&scaled, &b).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn gains_lie_in_unit_interval_and_grow_with_snr(
        l in 0.5f64..200.0,
        snr in 1e-3f64..1e3,
        nu in prop_oneof![Just(Smoothness::Half), Just(Smoothness::ThreeHalves), Just(Smoothness::FiveHalves)],
    ) {
        let spec = KernelSpec::new(nu, 1.0, l, 1.0).unwrap();
        let omegas: Vec<f64> = (0..33).map(|i| std::f64::consts::PI * i as f64 / 32.0).collect();
        let psd = matern_psd(&spec, &omegas).unwrap();
        let g = wiener_gains(&psd, snr).unwrap();
        let g2 = wiener_gains(&psd, 2.0 * snr).unwrap();
        for i in 0..g.len() {
            prop_assert!(g[i] > 0.0 && g[i] < 1.0);
            prop_assert!(g2[i] >= g[i]);
            if i > 0 {
                prop_assert!(g[i] <= g[i - 1] + 1e-15);
            }
        }
    }

    #[test]
    fn covariances_factor_for_any_lengthscale(l in 1e-3f64..1e3, k in 1usize..80) {
        let cov = matern_cov(&KernelSpec::matern32(2.0, l).unwrap(), k).unwrap();
        prop_assert!(cov.factor().is_ok());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn simulation_is_a_pure_function_of_its_spec(seed in 0u64..1000, j in 1usize..4) {
        let sim = SimSpec {
            num_samples: 300,
            events_per_template: 2,
            templates: vec![TemplateGen::GaussianBump, TemplateGen::Sigmoid],
            ..SimSpec::two_template(j, 5.0, seed)
        };
        let a = gen_gaussian_dataset(&sim).unwrap();
        let b = gen_gaussian_dataset(&sim).unwrap();
        prop_assert_eq!(&a.trials, &b.trials);
        prop_assert_eq!(&a.truth.codes, &b.truth.codes);
        let other = gen_gaussian_dataset(&SimSpec { seed: seed + 1, ..sim }).unwrap();
        prop_assert!(other.trials != a.trials);
    }
}
