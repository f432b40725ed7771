//! Stage execution, output inventory and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use qbsde::conjugate::{ConjugateConfig, ConjugateGrid, ConjugateKind, Extended};
use qbsde::diagnostics::{
    comparison_experiment, default_pbar_probes, ladder_probe, moment_diagnostics, pointwise_psi_quadrature, write_bound_csv, BoundReport,
    ComparisonConfig, MomentSpec,
};
use qbsde::dual::{dual_search, ControlFamily, ControlProcess, DualConfig};
use qbsde::generators::{write_assumption_csv, InfConvolutionConfig};
use qbsde::paths::{doleans_exponential, ControlArray, WeightProcess};
use qbsde::solver::{linear_oracle, quadratic_oracle, Expectation};
use qbsde::stats::linspace;
use qbsde::{
    check_assumptions, example_generator, AssumptionFamily, BrownianEnsemble, Estimate, GeneratorSpec, ProbeConfig,
    SolutionField, TerminalSpec, TimeGrid,
};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ConjugateKindName, Diagnostic, ExperimentConfig, Resolved};
use crate::CliError;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, Serialize, serde::Deserialize)]
pub struct StageTiming {
    pub name: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize, serde::Deserialize)]
pub struct OutputFile {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Serialize, serde::Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize, serde::Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub message: String,
}

#[derive(Clone, Debug, Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub name: Option<String>,
    pub config_hash: String,
    pub tool_version: String,
    pub wall_clock_seconds: f64,
    pub stages: Vec<StageTiming>,
    pub outputs: Vec<OutputFile>,
    pub metrics: BTreeMap<String, f64>,
    pub checks: Vec<CheckResult>,
    pub failure: Option<StageFailure>,
}

impl RunManifest {
    pub fn checks_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let p = dir.join("manifest.json");
        let text = fs::read_to_string(&p).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    dir: PathBuf,
    manifest: RunManifest,
    /// Per-check inputs gathered while running.
    facts: BTreeMap<String, f64>,
    assumption_results: Vec<(AssumptionFamily, bool)>,
    bounds: Vec<BoundReport>,
}

impl Run<'_> {
    fn metric(&mut self, key: &str, v: f64) {
        self.manifest.metrics.insert(key.to_string(), v);
    }

    fn fact(&mut self, key: &str, v: f64) {
        self.facts.insert(key.to_string(), v);
    }

    fn record(&mut self, file: &str) -> Result<(), CliError> {
        let bytes = fs::read(self.dir.join(file)).map_err(|e| CliError::io(file, e))?;
        self.manifest.outputs.push(OutputFile { file: file.to_string(), sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 });
        Ok(())
    }

    fn write_with<F>(&mut self, file: &str, f: F) -> Result<(), CliError>
    where
        F: FnOnce(BufWriter<fs::File>) -> qbsde::Result<()>,
    {
        let handle = fs::File::create(self.dir.join(file)).map_err(|e| CliError::io(file, e))?;
        f(BufWriter::new(handle)).map_err(|e| CliError::Stage { stage: file.to_string(), message: e.to_string() })?;
        self.record(file)
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T, CliError>) -> Result<T, CliError> {
        let t0 = Instant::now();
        let out = f(self).map_err(|e| match e {
            CliError::Stage { message, .. } => CliError::Stage { stage: name.to_string(), message },
            CliError::Io(m) => CliError::Stage { stage: name.to_string(), message: m },
            other => other,
        });
        self.manifest.stages.push(StageTiming { name: name.to_string(), seconds: t0.elapsed().as_secs_f64() });
        out
    }
}

fn core<T>(r: qbsde::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| CliError::Stage { stage: String::new(), message: e.to_string() })
}

/// Closed-form `Y_0` when the generator has one.
fn oracle(gen: &GeneratorSpec, term: &TerminalSpec, ens: Option<&BrownianEnsemble>) -> Option<qbsde::Result<Estimate>> {
    let how = match (gen.dim, ens) {
        (1, _) => Expectation::Quadrature,
        (_, Some(e)) => Expectation::MonteCarlo(e),
        _ => return None,
    };
    let name = gen.name();
    if name.starts_with("pure_quadratic") {
        Some(quadratic_oracle(gen.gamma(), term, gen.horizon, how))
    } else if name.starts_with("linear") {
        Some(linear_oracle(gen.beta(), term, gen.horizon, how))
    } else {
        None
    }
}

fn range(r: [f64; 3]) -> Vec<f64> {
    linspace(r[0], r[1], r[2] as usize)
}

/// Executes every stage the config asks for and writes outputs plus
/// `manifest.json` into `out`. A stage error stops the run; the manifest
/// still lists the files written so far.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> (RunManifest, Result<(), CliError>) {
    let t0 = Instant::now();
    let mut r = Run {
        cfg,
        dir: out.to_path_buf(),
        manifest: RunManifest {
            name: cfg.name.clone(),
            config_hash: sha256_hex(cfg.canonical_json().as_bytes()),
            tool_version: TOOL_VERSION.to_string(),
            wall_clock_seconds: 0.0,
            stages: Vec::new(),
            outputs: Vec::new(),
            metrics: BTreeMap::new(),
            checks: Vec::new(),
            failure: None,
        },
        facts: BTreeMap::new(),
        assumption_results: Vec::new(),
        bounds: Vec::new(),
    };
    let result = match cfg.validate() {
        Err(e) => Err(e),
        Ok(resolved) => fs::create_dir_all(out)
            .map_err(|e| CliError::io(&out.display().to_string(), e))
            .and_then(|_| execute(&mut r, &resolved)),
    };
    if let Err(CliError::Stage { stage, message }) = &result {
        r.manifest.failure = Some(StageFailure { stage: stage.clone(), message: message.clone() });
    }
    if result.is_ok() {
        evaluate_checks(&mut r);
    }
    r.manifest.wall_clock_seconds = t0.elapsed().as_secs_f64();
    if out.is_dir() {
        if let Ok(text) = serde_json::to_string_pretty(&r.manifest) {
            let _ = fs::write(out.join("manifest.json"), text);
        }
    }
    (r.manifest, result)
}

fn execute(r: &mut Run, res: &Resolved) -> Result<(), CliError> {
    let cfg = r.cfg;
    let gen = &res.gen;
    let diag = &cfg.diagnostics;
    let wants = |d: Diagnostic| diag.requested.contains(&d);

    let ens = match (&cfg.ensemble, &cfg.grid) {
        (Some(e), Some(g)) => Some(r.stage("simulate", |r| {
            let grid = core(TimeGrid::new(g.horizon, g.steps))?;
            let ens = core(BrownianEnsemble::simulate(grid, e.paths, e.dim, e.seed.unwrap_or_default(), e.antithetic))?;
            if r.cfg.output.save_ensemble {
                core(ens.save(r.dir.join("ensemble.bin")))?;
                r.record("ensemble.bin")?;
            }
            Ok(ens)
        })?),
        _ => None,
    };
    let solver = cfg.solver.to_solver();

    let sol = match (&ens, &res.term) {
        (Some(ens), Some(term)) => Some(r.stage("solve", |r| {
            let sol = core(qbsde::solve_backward(gen, term, ens, &solver))?;
            r.write_with("solution.csv", |w| sol.write_summary_csv(w))?;
            if r.cfg.output.save_solution {
                core(sol.save_binary(r.dir.join("solution.bin")))?;
                r.record("solution.bin")?;
            }
            let y0 = sol.y0();
            r.metric("y0", y0.mean);
            r.metric("y0_std_error", y0.std_error);
            r.metric("bisections", sol.bisections() as f64);
            r.metric("max_picard_iters", sol.picard_iters_used().into_iter().max().unwrap_or(0) as f64);
            Ok(sol)
        })?),
        _ => None,
    };

    if let (Some(d), Some(ens), Some(sol), Some(term)) = (&cfg.dual, &ens, &sol, &res.term) {
        r.stage("dual", |r| {
            let family = ControlFamily { mode: d.mode, constants: range(d.constants), kappas: range(d.kappas) };
            let s = core(dual_search(gen, term, ens, sol, &family, &solver, &DualConfig::default()))?;
            r.write_with("dual.csv", |w| s.write_csv(w))?;
            r.metric("dual_best_gap", s.gap);
            r.fact("weak_duality", f64::from(u8::from(s.weak_duality_holds(3.0))));
            if let Some(x) = s.extracted_row() {
                r.metric("dual_extracted_gap", x.gap);
                r.metric("dual_extracted_se", x.combined_se);
            }
            Ok(())
        })?;
    }

    if !diag.requested.is_empty() {
        r.stage("diagnostics", |r| {
            if wants(Diagnostic::OracleCheck) {
                if let (Some(term), Some(sol)) = (&res.term, &sol) {
                    match oracle(gen, term, ens.as_ref()) {
                        Some(o) => {
                            let o = core(o)?;
                            r.metric("oracle", o.mean);
                            r.metric("oracle_gap", sol.y0().mean - o.mean);
                        }
                        None => {
                            return Err(CliError::Stage {
                                stage: String::new(),
                                message: format!("no closed-form oracle for `{}` in d = {}", gen.name(), gen.dim),
                            });
                        }
                    }
                }
            }
            if wants(Diagnostic::Assumptions) {
                let probe = ProbeConfig { lipschitz_l: diag.lipschitz_l, ..Default::default() };
                let reports = core(check_assumptions(gen, &AssumptionFamily::ALL, &probe))?;
                r.write_with("assumptions.csv", |w| write_assumption_csv(&reports, w))?;
                r.assumption_results = reports.iter().map(|x| (x.family, x.passed)).collect();
            }
            if wants(Diagnostic::Moments) {
                if let (Some(sol), Some(term)) = (&sol, &res.term) {
                    moments(r, gen, term, sol)?;
                }
            }
            if wants(Diagnostic::ConjugateGrid) {
                conjugates(r, gen)?;
            }
            if wants(Diagnostic::Weights) {
                if let (Some(ens), Some(sol)) = (&ens, &sol) {
                    weights(r, ens, sol)?;
                }
            }
            if wants(Diagnostic::Refinement) {
                if let (Some(ens), Some(sol), Some(term)) = (&ens, &sol, &res.term) {
                    let fine = core(qbsde::solve_backward(gen, term, &ens.refine(), &solver))?;
                    let (a, b) = (sol.y0(), fine.y0());
                    r.metric("refined_y0", b.mean);
                    r.metric("refinement_change", b.mean - a.mean);
                    r.metric("refinement_se", a.std_error.max(b.std_error));
                    r.metric("refined_bisections", fine.bisections() as f64);
                }
            }
            if wants(Diagnostic::LadderProbe) {
                let p = core(ladder_probe(gen, &diag.ladder_levels, &ProbeConfig::default(), &InfConvolutionConfig::default()))?;
                r.metric("ladder_order_violations", p.order_violations as f64);
                for (n, l) in p.levels.iter().zip(&p.max_lipschitz) {
                    r.metric(&format!("ladder_lipschitz_n{n}"), *l);
                }
                r.fact("ladder_probe", f64::from(u8::from(p.order_violations == 0 && p.lipschitz_ok)));
            }
            Ok(())
        })?;
    }

    if let (Some(c), Some(ens), Some(term)) = (&cfg.compare, &ens, &res.term) {
        r.stage("compare", |r| {
            let gen_prime = match &c.generator_prime {
                Some(id) => core(example_generator(id, gen.dim, gen.horizon))?,
                None => gen.clone(),
            };
            let term_prime: TerminalSpec = match &c.terminal_prime {
                Some(id) => core(id.parse())?,
                None => term.clone(),
            };
            let ccfg = ComparisonConfig { solver: solver.clone(), ..Default::default() };
            let rep = core(comparison_experiment(gen, &gen_prime, term, &term_prime, ens, &c.n_levels, &ccfg))?;
            r.write_with("comparison.csv", |w| rep.write_csv(w))?;
            r.metric("y0_prime", rep.y0_prime.mean);
            r.metric("comparison_difference", rep.difference);
            r.metric("comparison_difference_se", rep.difference_se);
            r.metric("violation_fraction", rep.violation_fraction);
            r.fact("strict_comparison", f64::from(u8::from(rep.strictly_ordered)));
            r.fact("ladder_non_increasing", f64::from(u8::from(rep.ladder_non_increasing)));
            if let Some(conv) = rep.ladder_converges {
                r.fact("ladder_converges", f64::from(u8::from(conv)));
            }
            if let Some(o) = oracle(&gen_prime, &term_prime, Some(ens)) {
                let o = core(o)?;
                r.metric("prime_oracle_gap", rep.y0_prime.mean - o.mean);
            }
            Ok(())
        })?;
    }
    write_metrics(r)
}

fn moments(r: &mut Run, gen: &GeneratorSpec, term: &TerminalSpec, sol: &SolutionField) -> Result<(), CliError> {
    let diag = &r.cfg.diagnostics;
    let gamma = gen.gamma();
    let p = diag.p.unwrap_or(2.0 * gamma);
    let pbars = if diag.p_bar.is_empty() { default_pbar_probes(gamma).to_vec() } else { diag.p_bar.clone() };
    let upper = r.cfg.terminal.as_ref().and_then(|t| t.upper_bound);
    let mut all = Vec::new();
    for (k, pb) in pbars.iter().enumerate() {
        let spec = MomentSpec::new(p, *pb, gamma).map_err(|e| CliError::Validation(e.to_string()))?;
        let reports = core(moment_diagnostics(sol, &spec, &gen.envelope, upper))?;
        // A_beta only depends on p, and the bounded-above check on neither.
        all.extend(reports.into_iter().filter(|b| {
            k == 0 || !matches!(
                b.quantity,
                qbsde::diagnostics::BoundQuantity::ABetaSupMoment | qbsde::diagnostics::BoundQuantity::BoundedAbove
            )
        }));
    }
    // With a closed-form Y_0 both sides of the pointwise bound are quadratures.
    if gen.dim == 1 {
        if let Some(o) = oracle(gen, term, None) {
            let y0 = core(o)?.mean;
            for pb in &pbars {
                all.push(core(pointwise_psi_quadrature(y0, term, &gen.envelope, gen.horizon, *pb))?);
            }
        }
    }
    r.write_with("bounds.csv", |w| write_bound_csv(&all, w))?;
    r.bounds = all;
    Ok(())
}

fn conjugates(r: &mut Run, gen: &GeneratorSpec) -> Result<(), CliError> {
    let diag = &r.cfg.diagnostics;
    let kind = match diag.conjugate_kind {
        ConjugateKindName::ZOnly => ConjugateKind::ZOnly,
        ConjugateKindName::Joint => ConjugateKind::Joint,
    };
    let qs: Vec<Vec<f64>> = range(diag.q_range)
        .into_iter()
        .map(|q| {
            let mut v = vec![0.0; gen.dim];
            v[0] = q;
            v
        })
        .collect();
    let axis = range(diag.axis_range);
    let grid = core(ConjugateGrid::tabulate(gen, kind, &[0.0], &axis, &qs, &ConjugateConfig::default()))?;
    r.write_with("conjugate.csv", |w| grid.write_csv(w))?;
    r.metric("conjugate_convexity_violations", grid.convexity_violations().len() as f64);
    if kind == ConjugateKind::ZOnly && gen.name().starts_with("pure_quadratic") {
        let gamma = gen.gamma();
        let mut err: f64 = 0.0;
        for ai in 0..axis.len() {
            for (qi, q) in qs.iter().enumerate() {
                let exact = q[0] * q[0] / (2.0 * gamma);
                err = err.max((grid.value(0, ai, qi).value() - exact).abs());
            }
        }
        r.metric("conjugate_max_error", err);
    }
    if kind == ConjugateKind::Joint {
        let beta = gen.beta();
        let mut mismatches = 0usize;
        for (ai, &rv) in axis.iter().enumerate() {
            for qi in 0..qs.len() {
                let finite = matches!(grid.value(0, ai, qi), Extended::Finite(_));
                if (rv.abs() > beta && finite) || (rv.abs() <= beta - 0.01 && !finite) {
                    mismatches += 1;
                }
            }
        }
        r.metric("joint_domain_mismatches", mismatches as f64);
    }
    Ok(())
}

struct WeightRow {
    control: String,
    mean: Estimate,
    gap: Estimate,
    entropy: f64,
    half_energy: f64,
}

fn weight_row(id: &str, q: &ControlArray, w: &WeightProcess, dt: f64) -> WeightRow {
    let idx: Vec<usize> = (0..w.n_paths).filter(|&i| !w.is_excluded(i)).collect();
    let m = w.steps;
    let mt: Vec<f64> = idx.iter().map(|&i| w.terminal(i)).collect();
    let ent: Vec<f64> = idx.iter().map(|&i| w.terminal(i) * w.log_value(i, m)).collect();
    let half: Vec<f64> = idx.iter().map(|&i| w.terminal(i) * 0.5 * q.energy(i, dt)).collect();
    let diff: Vec<f64> = ent.iter().zip(&half).map(|(a, b)| a - b).collect();
    WeightRow {
        control: id.to_string(),
        mean: Estimate::from_samples(&mt),
        gap: Estimate::from_samples(&diff),
        entropy: Estimate::from_samples(&ent).mean,
        half_energy: Estimate::from_samples(&half).mean,
    }
}

fn weights(r: &mut Run, ens: &BrownianEnsemble, sol: &SolutionField) -> Result<(), CliError> {
    let dt = ens.grid.dt();
    let mut one = vec![0.0; ens.dim];
    one[0] = 1.0;
    let constant = ControlArray::constant(ens.n_paths, ens.grid.steps, &one);
    let feedback = ControlProcess::feedback("q=Z", sol, 1.0).q;
    let mut rows = Vec::new();
    for (id, q) in [("q=1", &constant), ("q=Z", &feedback)] {
        let w = core(doleans_exponential(q, ens))?;
        rows.push(weight_row(id, q, &w, dt));
    }
    let k = r.cfg.checks.weights_se_multiple.unwrap_or(5.0);
    let ok = rows.iter().all(|x| (x.mean.mean - 1.0).abs() <= k * x.mean.std_error && x.gap.mean.abs() <= k * x.gap.std_error);
    r.fact("weights", f64::from(u8::from(ok)));
    r.write_with("weights.csv", |out| {
        let mut w = csv_writer(out);
        w.write_record(["control", "weight_mean", "weight_std_error", "entropy", "half_energy", "identity_gap", "identity_gap_std_error"])?;
        for x in &rows {
            w.write_record([
                x.control.clone(),
                format!("{}", x.mean.mean),
                format!("{}", x.mean.std_error),
                format!("{}", x.entropy),
                format!("{}", x.half_energy),
                format!("{}", x.gap.mean),
                format!("{}", x.gap.std_error),
            ])?;
        }
        w.flush()?;
        Ok(())
    })
}

fn csv_writer<W: std::io::Write>(out: W) -> csv::Writer<W> {
    csv::Writer::from_writer(out)
}

fn write_metrics(r: &mut Run) -> Result<(), CliError> {
    let metrics: Vec<(String, f64)> = r.manifest.metrics.iter().map(|(k, v)| (k.clone(), *v)).collect();
    r.write_with("metrics.csv", |out| {
        let mut w = csv_writer(out);
        w.write_record(["metric", "value"])?;
        for (k, v) in &metrics {
            w.write_record([k.clone(), format!("{v}")])?;
        }
        w.flush()?;
        Ok(())
    })
}

fn evaluate_checks(r: &mut Run) {
    let c = r.cfg.checks.clone();
    let metric = |r: &Run, k: &str| r.manifest.metrics.get(k).copied();
    let fact = |r: &Run, k: &str| r.facts.get(k).map(|v| *v != 0.0);
    let mut out = Vec::new();
    let mut push = |name: &str, passed: bool, detail: String| out.push(CheckResult { name: name.into(), passed, detail });

    let mut bound = |name: &str, key: &str, max: Option<f64>| {
        if let Some(max) = max {
            match metric(r, key) {
                Some(v) => push(name, v.abs() <= max, format!("|{key}| = {:e} vs {max:e}", v.abs())),
                None => push(name, false, format!("{key} was not computed")),
            }
        }
    };
    bound("oracle_gap", "oracle_gap", c.oracle_gap_max);
    bound("prime_oracle_gap", "prime_oracle_gap", c.prime_oracle_gap_max);
    bound("dual_extracted_gap", "dual_extracted_gap", c.dual_extracted_gap_max);
    bound("violation_fraction", "violation_fraction", c.violation_fraction_max);
    bound("conjugate_error", "conjugate_max_error", c.conjugate_error_max);

    let mut flag = |name: &str, want: Option<bool>| {
        if let Some(want) = want {
            match fact(r, name) {
                Some(v) => push(name, v == want, format!("{name} = {v}")),
                None => push(name, false, format!("{name} was not computed")),
            }
        }
    };
    flag("weak_duality", c.weak_duality);
    flag("strict_comparison", c.strict_comparison);
    flag("ladder_non_increasing", c.ladder_non_increasing);
    flag("ladder_converges", c.ladder_converges);
    flag("ladder_probe", c.ladder_probe);
    if c.weights_se_multiple.is_some() {
        flag("weights", Some(true));
    }

    if let Some(want) = c.joint_domain {
        let v = metric(r, "joint_domain_mismatches");
        push("joint_domain", v.is_some_and(|m| (m == 0.0) == want), format!("mismatches = {v:?}"));
    }
    if let Some(k) = c.refinement_se_multiple {
        match (metric(r, "refinement_change"), metric(r, "refinement_se")) {
            (Some(d), Some(se)) => push("refinement", d.abs() < k * se, format!("|change| = {:e} vs {k} SE = {:e}", d.abs(), k * se)),
            _ => push("refinement", false, "refinement was not run".into()),
        }
    }
    if c.no_picard_failures == Some(true) {
        push("no_picard_failures", metric(r, "y0").is_some(), "solve completed".into());
    }
    if let Some(want) = c.bounds_satisfied {
        let all = !r.bounds.is_empty() && r.bounds.iter().all(|b| b.satisfied);
        push("bounds_satisfied", all == want, format!("{} reports", r.bounds.len()));
    }
    for (list, want) in [(&c.assumptions_pass, true), (&c.assumptions_fail, false)] {
        for fam in list {
            let f: AssumptionFamily = fam.parse().expect("validated");
            let got = r.assumption_results.iter().find(|x| x.0 == f).map(|x| x.1);
            push(&format!("assumption_{fam}"), got == Some(want), format!("passed = {got:?}, expected {want}"));
        }
    }
    r.manifest.checks = out;
}
