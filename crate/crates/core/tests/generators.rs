use proptest::prelude::*;
use qbsde::generators::{inf_convolution_with, InfConvolutionConfig};
use qbsde::*;

fn families(gen: &GeneratorSpec, probe: &ProbeConfig) -> Vec<AssumptionReport> {
    check_assumptions(gen, &AssumptionFamily::ALL, probe).unwrap()
}

fn passed(reports: &[AssumptionReport], fam: AssumptionFamily) -> bool {
    reports.iter().find(|r| r.family == fam).unwrap().passed
}

fn coarse() -> ProbeConfig {
    ProbeConfig { t_points: 4, y_points: 65, z_points: 33, random_pairs: 2000, ..Default::default() }
}

#[test]
fn example_i_claims() {
    use AssumptionFamily::*;
    let r = families(&example_generator("3.1.i", 1, 1.0).unwrap(), &coarse());
    for fam in [EX1, EX2, EX3, UN1a, UN1b, UN2] {
        assert!(passed(&r, fam), "{fam:?}");
    }
    assert!(!passed(&r, LipschitzYProbe));
    assert!(!passed(&r, UN3));
}

#[test]
fn example_ii_claims() {
    use AssumptionFamily::*;
    let r = families(&example_generator("3.1.ii", 1, 1.0).unwrap(), &coarse());
    for fam in [EX1, EX2, EX3, UN1a, UN1b] {
        assert!(passed(&r, fam), "{fam:?}");
    }
    assert!(!passed(&r, UN2));
    assert!(!passed(&r, LipschitzYProbe));
}

#[test]
fn example_iii_cubic_growth_misses_ex3_for_negative_y() {
    use AssumptionFamily::*;
    let gen = example_generator("3.1.iii", 1, 1.0).unwrap();
    let r = families(&gen, &coarse());
    assert!(passed(&r, UN1a) && passed(&r, UN1b) && passed(&r, EX1) && passed(&r, EX2));
    let ex3 = r.iter().find(|x| x.family == EX3).unwrap();
    assert!(!ex3.passed);
    // |(y-1)^3| > 2 + |y|^3 first happens just below y = -0.264.
    assert!(ex3.witnesses.iter().all(|w| w.y < -0.26));
    assert!(!gen.envelope_issues().is_empty());
}

#[test]
fn example_iii_with_shifted_cube_growth_passes_its_families() {
    use AssumptionFamily::*;
    let gen = example_generator("3.1.iii", 1, 1.0).unwrap();
    let env = Envelope { phi: Growth::new("(1+u)^3-1", |u: f64| (1.0 + u).powi(3) - 1.0), ..gen.envelope.clone() };
    let gen = gen.with_envelope(env);
    let r = families(&gen, &coarse());
    for fam in [EX1, EX2, EX3, UN1a, UN1b, UN2Prime] {
        assert!(passed(&r, fam), "{fam:?}");
    }
    assert!(!passed(&r, LipschitzYProbe));
    assert!(gen.envelope_issues().is_empty());
}

#[test]
fn lipschitz_probe_fails_for_every_tested_constant() {
    for id in ["3.1.i", "3.1.ii", "3.1.iii"] {
        let gen = example_generator(id, 1, 1.0).unwrap();
        for l in [1.0, 10.0, 100.0, 1000.0] {
            let probe = ProbeConfig { lipschitz_l: l, ..coarse() };
            let r = check_assumptions(&gen, &[AssumptionFamily::LipschitzYProbe], &probe).unwrap();
            assert!(!r[0].passed, "{id} L={l}");
        }
    }
}

#[test]
fn joint_convexity_implies_convexity_in_z() {
    let probe = coarse();
    for id in ["zero", "pure_quadratic(2)", "affine(1,1)", "abs_y(1)", "linear(1)", "3.1.i", "3.1.ii", "3.1.iii"] {
        let gen = example_generator(id, 1, 1.0).unwrap();
        let r = check_assumptions(&gen, &[AssumptionFamily::UN3, AssumptionFamily::UN1b], &probe).unwrap();
        let (un1b, un3) = (r.iter().find(|x| x.family == AssumptionFamily::UN1b).unwrap(), r.iter().find(|x| x.family == AssumptionFamily::UN3).unwrap());
        assert!(!un3.passed || un1b.passed, "{id}");
    }
}

#[test]
fn assumption_reports_repeat_exactly() {
    let gen = example_generator("3.1.ii", 1, 1.0).unwrap();
    let probe = ProbeConfig { seed: 99, ..coarse() };
    let a = families(&gen, &probe);
    let b = families(&gen, &probe);
    let (mut ca, mut cb) = (Vec::new(), Vec::new());
    generators::write_assumption_csv(&a, &mut ca).unwrap();
    generators::write_assumption_csv(&b, &mut cb).unwrap();
    assert_eq!(ca, cb);
}

fn ladder_gens() -> (GeneratorSpec, Vec<GeneratorSpec>) {
    let g = example_generator("pure_quadratic", 1, 1.0).unwrap();
    let cfg = InfConvolutionConfig::default();
    let ladder = [1, 2, 3, 5].iter().map(|&n| inf_convolution_with(&g, n, &cfg).unwrap()).collect();
    (g, ladder)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn inf_convolution_is_below_and_increasing(z in -9.0f64..9.0, y in -5.0f64..5.0, t in 0.0f64..1.0) {
        let (g, ladder) = ladder_gens();
        let mut prev = f64::NEG_INFINITY;
        for gn in &ladder {
            let v = gn.eval(t, y, &[z]);
            prop_assert!(v >= prev);
            prev = v;
        }
        prop_assert!(prev <= g.eval(t, y, &[z]));
    }

    #[test]
    fn inf_convolution_is_lipschitz_in_z(z1 in -9.0f64..9.0, z2 in -9.0f64..9.0, y in -3.0f64..3.0) {
        let (g, ladder) = ladder_gens();
        for (gn, n) in ladder.iter().zip([1.0, 2.0, 3.0, 5.0]) {
            let lhs = (gn.eval(0.5, y, &[z1]) - gn.eval(0.5, y, &[z2])).abs();
            prop_assert!(lhs <= (n + g.gamma()) * (z1 - z2).abs() + 1e-7);
        }
    }

    #[test]
    fn evaluate_agrees_with_raw_driver(y in -10.0f64..10.0, z in -10.0f64..10.0) {
        let gen = example_generator("3.1.i", 1, 1.0).unwrap();
        prop_assert_eq!(evaluate(&gen, 0.3, y, &[z]).unwrap(), gen.eval(0.3, y, &[z]));
    }
}
