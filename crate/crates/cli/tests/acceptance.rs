//! Acceptance criteria 1-12. Every criterion runs, prints one PASS/FAIL
//! line, and the test fails if any criterion does.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use qbsde::conjugate::Extended;
use qbsde::diagnostics::{comparison_experiment, ladder_probe, pointwise_psi_quadrature, ComparisonConfig};
use qbsde::paths::{doleans_exponential, ControlArray};
use qbsde::solver::{quadratic_oracle, Expectation};
use qbsde::stats::linspace;
use qbsde::*;
use qbsde_cli::catalog::find;
use qbsde_cli::runner::run;

type Criterion = (u32, &'static str, fn() -> Outcome, u64);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn gen(id: &str) -> GeneratorSpec {
    example_generator(id, 1, 1.0).unwrap()
}

fn ensemble(paths: usize, steps: usize, seed: u64) -> BrownianEnsemble {
    BrownianEnsemble::simulate(TimeGrid::new(1.0, steps).unwrap(), paths, 1, seed, false).unwrap()
}

fn solve(g: &GeneratorSpec, term: &TerminalSpec, ens: &BrownianEnsemble) -> SolutionField {
    solve_backward(g, term, ens, &SolverConfig::default()).unwrap()
}

fn oracle(gamma: f64, term: &TerminalSpec) -> f64 {
    quadratic_oracle(gamma, term, 1.0, Expectation::Quadrature).unwrap().mean
}

fn c1() -> Outcome {
    let term: TerminalSpec = "sin".parse().unwrap();
    let sol = solve(&gen("pure_quadratic(1)"), &term, &ensemble(200_000, 50, 1));
    let gap = sol.y0().mean - oracle(1.0, &term);
    outcome(gap.abs() <= 1e-2, format!("Y_0 = {:.6}, |gap| = {:.2e} (tol 1e-2)", sol.y0().mean, gap.abs()))
}

fn c2() -> Outcome {
    let sol = solve(&gen("linear(1)"), &"bm_sq".parse().unwrap(), &ensemble(200_000, 50, 1));
    let gap = sol.y0().mean - (-1.0f64).exp();
    outcome(gap.abs() <= 1.5e-2, format!("Y_0 = {:.6}, |gap| = {:.2e} (tol 1.5e-2)", sol.y0().mean, gap.abs()))
}

fn c3() -> Outcome {
    let mut worst: f64 = 0.0;
    for gamma in [0.5, 1.0, 2.0] {
        let g = gen(&format!("pure_quadratic({gamma})"));
        for q in linspace(-10.0, 10.0, 401) {
            let v = conjugate_z(&g, 0.0, 0.0, &[q]).unwrap();
            worst = worst.max((v - q * q / (2.0 * gamma)).abs());
        }
    }
    outcome(worst <= 1e-6, format!("max error {worst:.2e} over 3 x 401 points (tol 1e-6)"))
}

fn c4() -> Outcome {
    let g = gen("abs_y(1)");
    let mut bad = Vec::new();
    let mut count = 0;
    for r in linspace(-3.0, 3.0, 601) {
        let outside = r.abs() > 1.0;
        let inside = r.abs() <= 0.99 + 1e-12;
        if !outside && !inside {
            continue;
        }
        for q in linspace(-4.0, 4.0, 9) {
            count += 1;
            let v = conjugate_yz(&g, 0.0, r, &[q]).unwrap();
            if (outside && v != Extended::PosInfinity) || (inside && !v.is_finite()) {
                bad.push((r, q));
            }
        }
    }
    outcome(bad.is_empty(), format!("{} of {count} (r, q) points misclassified {:?}", bad.len(), bad.iter().take(3).collect::<Vec<_>>()))
}

fn c5() -> Outcome {
    use AssumptionFamily::*;
    let claims: [(&str, &[AssumptionFamily]); 3] = [
        ("3.1.i", &[EX1, EX2, EX3, UN1a, UN1b, UN2]),
        ("3.1.ii", &[EX1, EX2, EX3, UN1a, UN1b]),
        ("3.1.iii", &[EX1, EX2, EX3, UN1a, UN1b, UN2Prime]),
    ];
    let mut ok = true;
    let mut notes = Vec::new();
    for (id, claimed) in claims {
        let g = gen(id);
        let reports = check_assumptions(&g, claimed, &ProbeConfig::default()).unwrap();
        let failed: Vec<_> = reports.iter().filter(|r| !r.passed).map(|r| r.family.as_str()).collect();
        let mut lip_ok = true;
        for l in [1.0, 10.0, 100.0, 1000.0] {
            let probe = ProbeConfig { lipschitz_l: l, ..Default::default() };
            let r = check_assumptions(&g, &[LipschitzYProbe], &probe).unwrap();
            lip_ok &= !r[0].passed;
        }
        ok &= failed.is_empty() && lip_ok;
        notes.push(format!("{id}: claimed failing {failed:?}, Lipschitz probe fails up to 1e3: {lip_ok}"));
    }
    outcome(ok, notes.join("; "))
}

fn c6() -> Outcome {
    let g = gen("pure_quadratic(1)");
    let term: TerminalSpec = "sin".parse().unwrap();
    let ens = ensemble(100_000, 50, 1);
    let sol = solve(&g, &term, &ens);
    let family = ControlFamily { mode: DualMode::Joint, constants: linspace(-2.0, 2.0, 21), kappas: linspace(0.0, 2.0, 21) };
    let s = dual_search(&g, &term, &ens, &sol, &family, &SolverConfig::default(), &DualConfig::default()).unwrap();
    let evaluated = s.rows.iter().filter(|r| r.evaluation.is_some()).count();
    let weak = s.weak_duality_holds(3.0);
    let Some(x) = s.extracted_row() else {
        return outcome(false, "extracted control was skipped".into());
    };
    let strong = x.evaluation.is_some() && x.gap.abs() <= 2e-2;
    outcome(
        weak && strong,
        format!(
            "weak duality over {evaluated}/{} members: {weak}; extracted gap {:.2e} (tol 2e-2)",
            s.rows.len(),
            x.gap
        ),
    )
}

fn c7() -> Outcome {
    let g = gen("pure_quadratic(1)");
    let term: TerminalSpec = "sin".parse().unwrap();
    let lower = term.shifted(-0.5);
    let ens = ensemble(200_000, 50, 1);
    let r = comparison_experiment(&g, &g, &term, &lower, &ens, &[], &ComparisonConfig::default()).unwrap();
    let gap = (r.y0.mean - oracle(1.0, &term)).abs();
    let gap_prime = (r.y0_prime.mean - oracle(1.0, &lower)).abs();
    let beyond = r.difference > 3.0 * r.difference_se;
    outcome(
        beyond && gap <= 1e-2 && gap_prime <= 1e-2,
        format!(
            "Y_0 - Y'_0 = {:.4} ({:.1} SE); oracle gaps {gap:.2e}, {gap_prime:.2e} (tol 1e-2); violation fraction {}",
            r.difference,
            r.difference / r.difference_se,
            r.violation_fraction
        ),
    )
}

fn c8() -> Outcome {
    let g = gen("pure_quadratic(1)");
    let levels = [1, 2, 4, 8];
    let p = ladder_probe(&g, &levels, &ProbeConfig::default(), &Default::default()).unwrap();
    let term: TerminalSpec = "sin(3)".parse().unwrap();
    let ens = ensemble(100_000, 50, 1);
    let r = comparison_experiment(&g, &g, &term, &term, &ens, &levels, &ComparisonConfig::default()).unwrap();
    let rungs: Vec<String> = r.ladder.iter().map(|l| format!("{:.5}", l.y0.mean)).collect();
    let ok = r.ladder_non_increasing && p.order_violations == 0 && p.lipschitz_ok;
    outcome(
        ok,
        format!(
            "Y^n_0 (n = 1,2,4,8,inf) = [{}], non-increasing {}; order violations {}/{}; max Lipschitz {:?} vs {:?}",
            rungs.join(", "),
            r.ladder_non_increasing,
            p.order_violations,
            p.order_points,
            p.max_lipschitz,
            p.lipschitz_bound
        ),
    )
}

fn c9() -> Outcome {
    let g = gen("pure_quadratic(1)");
    let ens = ensemble(100_000, 50, 1);
    let sol = solve(&g, &"sin".parse().unwrap(), &ens);
    let dt = ens.grid.dt();
    let controls = [
        ("q = 1", ControlArray::constant(ens.n_paths, ens.grid.steps, &[1.0])),
        ("q = Z", ControlProcess::feedback("q=Z", &sol, 1.0).q),
    ];
    let mut ok = true;
    let mut notes = Vec::new();
    for (id, q) in &controls {
        let w = doleans_exponential(q, &ens).unwrap();
        let keep: Vec<usize> = (0..w.n_paths).filter(|&i| !w.is_excluded(i)).collect();
        let m_t: Vec<f64> = keep.iter().map(|&i| w.terminal(i)).collect();
        let diff: Vec<f64> =
            keep.iter().map(|&i| w.terminal(i) * (w.log_value(i, w.steps) - 0.5 * q.energy(i, dt))).collect();
        let (mean, gap) = (Estimate::from_samples(&m_t), Estimate::from_samples(&diff));
        let a = (mean.mean - 1.0).abs() <= 5.0 * mean.std_error;
        let b = gap.mean.abs() <= 5.0 * gap.std_error;
        ok &= a && b;
        notes.push(format!(
            "{id}: E[M_T] - 1 = {:.1} SE, entropy gap = {:.1} SE, excluded {}",
            (mean.mean - 1.0) / mean.std_error,
            gap.mean / gap.std_error,
            w.n_paths - keep.len()
        ));
    }
    outcome(ok, notes.join("; "))
}

fn c10() -> Outcome {
    let g = gen("pure_quadratic(1)");
    let term: TerminalSpec = "sin".parse().unwrap();
    let y0 = oracle(1.0, &term);
    let env = &g.envelope;
    assert!(env.beta == 0.0 && env.alpha_under.as_constant() == Some(0.0));
    let r = pointwise_psi_quadrature(y0, &term, env, 1.0, 2.0).unwrap();
    outcome(
        r.satisfied,
        format!("exp(2 Y_0^+) = {:.6} <= E[psi] = {:.6}, slack {:.6}", r.empirical_value, r.bound_value.unwrap(), r.slack.unwrap()),
    )
}

fn c11() -> Outcome {
    let g = gen("3.1.i");
    let term: TerminalSpec = "sin(1,-1)".parse().unwrap();
    let cfg = SolverConfig {
        picard: solver::PicardConfig { theta: 0.5, ..Default::default() },
        ..Default::default()
    };
    let ens = ensemble(200_000, 50, 1);
    let coarse = match solve_backward(&g, &term, &ens, &cfg) {
        Ok(s) => s,
        Err(e) => return outcome(false, format!("M = 50 solve failed: {e}")),
    };
    let fine = match solve_backward(&g, &term, &ens.refine(), &cfg) {
        Ok(s) => s,
        Err(e) => return outcome(false, format!("M = 100 solve failed: {e}")),
    };
    let change = fine.y0().mean - coarse.y0().mean;
    let se = coarse.y0().std_error;
    let refined = change.abs() < 2.0 * se;
    let xs = ens.terminal_positions();
    let consistent = (0..ens.n_paths).all(|i| coarse.y(i, 50) == term.eval(&xs[i..i + 1]));
    let ccfg = ComparisonConfig { solver: cfg.clone(), ..Default::default() };
    let cmp = comparison_experiment(&g, &g, &term, &term.shifted(-0.1), &ens, &[], &ccfg).unwrap();
    let ordered = cmp.strictly_ordered && cmp.violation_fraction <= 0.01;
    outcome(
        refined && consistent && ordered,
        format!(
            "Y_0 = {:.6}, refinement change {:.2e} vs 2 SE = {:.2e}; bisections {} / {}; terminal consistent {consistent}; \
             shifted terminal lower by {:.1} SE, violation fraction {}",
            coarse.y0().mean,
            change.abs(),
            2.0 * se,
            coarse.bisections(),
            fine.bisections(),
            cmp.difference / cmp.difference_se,
            cmp.violation_fraction
        ),
    )
}

fn csv_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn c12() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();
    let mut ok = true;
    for id in ["determinism", "example-3-1-i-assumptions", "joint-conjugate-domain", "psi-pointwise-bound"] {
        let cfg = find(id).unwrap().config();
        let (a, b) = (tmp.path().join(format!("{id}-a")), tmp.path().join(format!("{id}-b")));
        let (ma, ra) = run(&cfg, &a);
        let (mb, rb) = run(&cfg, &b);
        if ra.is_err() || rb.is_err() {
            ok = false;
            notes.push(format!("{id}: run failed"));
            continue;
        }
        let (fa, fb) = (csv_bytes(&a), csv_bytes(&b));
        let hashes = |m: &qbsde_cli::runner::RunManifest| -> Vec<(String, String)> {
            m.outputs.iter().map(|o| (o.file.clone(), o.sha256.clone())).collect()
        };
        let same = !fa.is_empty() && fa == fb && hashes(&ma) == hashes(&mb);
        ok &= same;
        notes.push(format!("{id}: {} CSVs identical {same}", fa.len()));
    }
    outcome(ok, notes.join("; "))
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 12] = [
        (1, "quadratic oracle", c1, 60),
        (2, "linear oracle", c2, 60),
        (3, "conjugate identity", c3, 5),
        (4, "joint effective domain", c4, 10),
        (5, "assumption families of the examples", c5, 30),
        (6, "dual gap", c6, 180),
        (7, "comparison", c7, 120),
        (8, "inf-convolution ladder", c8, 240),
        (9, "weight machinery", c9, 60),
        (10, "pointwise a-priori bound", c10, 10),
        (11, "monotone non-Lipschitz solve", c11, 180),
        (12, "determinism", c12, u64::MAX),
    ];
    let mut failed = Vec::new();
    for (k, name, f, limit) in criteria {
        let t0 = Instant::now();
        let o = f();
        let took = t0.elapsed();
        let in_time = took <= Duration::from_secs(limit);
        let passed = o.passed && in_time;
        let budget = if limit == u64::MAX { String::new() } else { format!(" (budget {limit} s)") };
        println!(
            "criterion {k:>2} {}: {name}: {} [{:.1} s{budget}]",
            if passed { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64()
        );
        if !passed {
            failed.push(k);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
