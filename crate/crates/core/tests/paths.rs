use proptest::prelude::*;
use qbsde::paths::*;
use qbsde::*;

fn ens(n: usize, m: usize, seed: u64) -> BrownianEnsemble {
    BrownianEnsemble::simulate(TimeGrid::new(1.0, m).unwrap(), n, 1, seed, false).unwrap()
}

#[test]
fn weights_are_martingales_at_every_node() {
    let e = ens(20_000, 20, 5);
    let q = ControlArray::constant(e.n_paths, 20, &[0.7]);
    let w = doleans_exponential(&q, &e).unwrap();
    for m in 0..=20 {
        let v: Vec<f64> = (0..e.n_paths).map(|i| w.value(i, m)).collect();
        let est = Estimate::from_samples(&v);
        assert!((est.mean - 1.0).abs() <= 5.0 * est.std_error.max(1e-15), "m={m} {est:?}");
    }
}

#[test]
fn relative_entropy_identity_for_constant_controls() {
    let e = ens(50_000, 20, 6);
    for q0 in [0.5, 1.0] {
        let q = ControlArray::constant(e.n_paths, 20, &[q0]);
        let w = doleans_exponential(&q, &e).unwrap();
        let s: Vec<f64> = (0..e.n_paths).map(|i| w.terminal(i) * w.log_value(i, 20)).collect();
        let est = Estimate::from_samples(&s);
        assert!((est.mean - 0.5 * q0 * q0).abs() <= 5.0 * est.std_error, "q={q0} {est:?}");
    }
}

#[test]
fn saved_ensembles_reload_identically() {
    let e = ens(300, 7, 1);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ens.bin");
    e.save(&p).unwrap();
    let back = BrownianEnsemble::load(&p).unwrap();
    assert_eq!(back.increments(), e.increments());
    assert_eq!(back.seed, e.seed);
}

#[test]
fn truncated_file_is_rejected() {
    let e = ens(50, 4, 1);
    let mut buf = Vec::new();
    e.write_to(&mut buf).unwrap();
    buf.truncate(buf.len() - 3);
    assert!(matches!(BrownianEnsemble::read_from(&buf[..]), Err(Error::MalformedEnsemble(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn same_seed_gives_identical_ensembles(seed in any::<u64>(), n in 1usize..200, m in 1usize..12, d in 1usize..3) {
        let g = TimeGrid::new(0.5, m).unwrap();
        let a = BrownianEnsemble::simulate(g, n, d, seed, false).unwrap();
        let b = BrownianEnsemble::simulate(g, n, d, seed, false).unwrap();
        prop_assert_eq!(a.increments(), b.increments());
    }

    #[test]
    fn positions_are_cumulative_increments(seed in any::<u64>(), m in 1usize..10) {
        let e = ens(16, m, seed);
        for i in 0..16 {
            let s: f64 = (0..m).map(|k| e.increment(i, k)[0]).sum();
            prop_assert!((e.terminal_positions()[i] - s).abs() < 1e-12);
        }
    }
}
