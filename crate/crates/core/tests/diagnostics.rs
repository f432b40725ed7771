use proptest::prelude::*;
use qbsde::diagnostics::*;
use qbsde::solver::{quadratic_oracle, Expectation};
use qbsde::*;

fn small_probe() -> ProbeConfig {
    ProbeConfig { t_points: 3, y_points: 17, z_points: 17, random_pairs: 200, ..Default::default() }
}

#[test]
fn bounded_terminal_respects_the_bounded_above_estimate() {
    let gen = example_generator("3.1.i", 1, 1.0).unwrap();
    let env = Envelope { alpha_under: TimeCoefficient::constant(0.0), ..gen.envelope.clone() };
    let term: TerminalSpec = "sin(1,-1)".parse().unwrap();
    let ens = BrownianEnsemble::simulate(TimeGrid::new(1.0, 20).unwrap(), 5000, 1, 41, false).unwrap();
    let sol = solve_backward(&gen, &term, &ens, &SolverConfig::default()).unwrap();
    let spec = MomentSpec::new(2.0, 2.0, gen.gamma()).unwrap();
    let r = moment_diagnostics(&sol, &spec, &env, Some(0.0)).unwrap();
    let b = r.iter().find(|b| b.quantity == BoundQuantity::BoundedAbove).unwrap();
    assert!(b.satisfied && b.slack.unwrap() > 0.0);
    let mut csv = Vec::new();
    write_bound_csv(&r, &mut csv).unwrap();
    assert!(String::from_utf8(csv).unwrap().starts_with("quantity,exponent,empirical_value"));
}

#[test]
fn larger_alpha_bar_never_lowers_sup_a() {
    let gen = example_generator("pure_quadratic", 1, 1.0).unwrap();
    let ens = BrownianEnsemble::simulate(TimeGrid::new(1.0, 10).unwrap(), 2000, 1, 42, false).unwrap();
    let sol = solve_backward(&gen, &"sin".parse().unwrap(), &ens, &SolverConfig::default()).unwrap();
    let low = gen.envelope.clone();
    let high = Envelope { alpha_bar: TimeCoefficient::function("1+t", |t| 1.0 + t), ..low.clone() };
    let (a, _) = sup_processes(&sol, &low);
    let (b, _) = sup_processes(&sol, &high);
    assert!(a.iter().zip(&b).all(|(x, y)| y >= x));
}

#[test]
fn comparison_reproduces_oracle_ordering() {
    let gen = example_generator("pure_quadratic", 1, 1.0).unwrap();
    let ens = BrownianEnsemble::simulate(TimeGrid::new(1.0, 20).unwrap(), 20_000, 1, 43, false).unwrap();
    let term: TerminalSpec = "sin".parse().unwrap();
    let cfg = ComparisonConfig { probe: small_probe(), ..Default::default() };
    for c in [0.2, 0.5] {
        let lower = term.shifted(-c);
        let a = quadratic_oracle(1.0, &term, 1.0, Expectation::Quadrature).unwrap().mean;
        let b = quadratic_oracle(1.0, &lower, 1.0, Expectation::Quadrature).unwrap().mean;
        assert!(b <= a);
        let r = comparison_experiment(&gen, &gen, &term, &lower, &ens, &[], &cfg).unwrap();
        assert!(r.strictly_ordered && r.violation_fraction == 0.0);
    }
}

#[test]
fn ladder_probe_orders_levels() {
    let gen = example_generator("pure_quadratic", 1, 1.0).unwrap();
    let p = ladder_probe(&gen, &[1, 2, 4], &small_probe(), &Default::default()).unwrap();
    assert_eq!(p.order_violations, 0);
    assert!(p.lipschitz_ok);
}

#[test]
fn comparison_refuses_drivers_without_a_lower_bound() {
    // -g = y^2 is not bounded by alpha_bar + phi(|y|) + gamma|z| with phi = 0.
    let gen = GeneratorSpec::new("neg_sq", 1, 1.0, Envelope::new(0.0, 0.0, 0.0, 1.0, Growth::zero()), |_, y, _| -y * y).unwrap();
    assert!(!lower_bound_probe(&gen, &small_probe()).passed);
    let ens = BrownianEnsemble::simulate(TimeGrid::new(1.0, 5).unwrap(), 100, 1, 44, false).unwrap();
    let term = TerminalSpec::constant(0.0);
    let cfg = ComparisonConfig { probe: small_probe(), ..Default::default() };
    let e = comparison_experiment(&gen, &gen, &term, &term, &ens, &[], &cfg).unwrap_err();
    assert!(matches!(e, Error::MisconfiguredComparison(_)));
}

proptest! {
    #[test]
    fn psi_factorises(s in 0.0f64..2.0, x in 0.0f64..3.0, kappa in 0.0f64..2.0, lambda in 0.1f64..3.0, c in 0.0f64..2.0) {
        let l = TimeCoefficient::constant(c);
        let full = log_psi(s, x, &l, kappa, lambda).unwrap();
        let base = log_psi(s, 0.0, &l, kappa, lambda).unwrap();
        prop_assert!((full - (lambda * (kappa * s).exp() * x + base)).abs() <= 1e-12 * (1.0 + full.abs()));
    }

    #[test]
    fn psi_trapezoid_agrees_with_closed_form(s in 0.01f64..2.0, kappa in 0.0f64..2.0, c in 0.0f64..2.0) {
        let exact = log_psi(s, 0.0, &TimeCoefficient::constant(c), kappa, 1.0).unwrap();
        let numeric = log_psi(s, 0.0, &TimeCoefficient::function("c", move |_| c), kappa, 1.0).unwrap();
        prop_assert!((exact - numeric).abs() <= 1e-8 * (1.0 + exact.abs()));
    }

    #[test]
    fn fenchel_helper_never_negative(x in -10.0f64..10.0, y in 1e-12f64..1e3) {
        prop_assert!(fenchel_slack(x, y) >= 0.0);
    }
}
