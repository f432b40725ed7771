//! A-priori exponential-moment checks on numerical solutions, and the
//! comparison experiment with its inf-convolution ladder.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

pub use crate::conjugate::{fenchel_inequality_holds, fenchel_slack, Extended};
use crate::error::{Error, Result};
use crate::generators::{
    check_assumptions, inf_convolution_with, AssumptionFamily, Envelope, GeneratorSpec, InfConvolutionConfig,
    ProbeConfig, TimeCoefficient,
};
use crate::paths::BrownianEnsemble;
use crate::quadrature;
use crate::solver::{solve_backward, SolutionField, SolverConfig, TerminalSpec};
use crate::stats::{self, Estimate};

/// Largest exponent whose `exp` is finite.
pub const EXP_OVERFLOW: f64 = 709.78;

/// Share of the sample mass above which the top 0.1% of paths mark an
/// exponential-moment estimate as saturated.
const SATURATION_SHARE: f64 = 0.5;

fn weighted_integral(l: &TimeCoefficient, kappa: f64, s: f64) -> f64 {
    match l.as_constant() {
        Some(c) if kappa == 0.0 => c * s,
        Some(c) => c * (kappa * s).exp_m1() / kappa,
        None => quadrature::trapezoid(|r| l.value(r) * (kappa * r).exp(), 0.0, s, 1e-10),
    }
}

/// `ln psi(s, x; l, kappa, lambda)`.
pub fn log_psi(s: f64, x: f64, l: &TimeCoefficient, kappa: f64, lambda: f64) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::invalid(format!("psi needs x >= 0, got {x}")));
    }
    if !(lambda > 0.0) {
        return Err(Error::invalid(format!("psi needs lambda > 0, got {lambda}")));
    }
    if !(kappa >= 0.0) || !(s >= 0.0) {
        return Err(Error::invalid("psi needs nonnegative s and kappa"));
    }
    Ok(lambda * ((kappa * s).exp() * x + weighted_integral(l, kappa, s)))
}

/// `psi(s, x; l, kappa, lambda) = exp(lambda e^{kappa s} x + lambda int_0^s l(r) e^{kappa r} dr)`.
pub fn psi(s: f64, x: f64, l: &TimeCoefficient, kappa: f64, lambda: f64) -> Result<Extended> {
    let e = log_psi(s, x, l, kappa, lambda)?;
    Ok(if e > EXP_OVERFLOW { Extended::PosInfinity } else { Extended::Finite(e.exp()) })
}

/// Exponents `p` (negative part) and `p_bar` (positive part), both above gamma.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MomentSpec {
    pub p: f64,
    pub p_bar: f64,
}

impl MomentSpec {
    pub fn new(p: f64, p_bar: f64, gamma: f64) -> Result<Self> {
        let spec = MomentSpec { p, p_bar };
        spec.validate(gamma)?;
        Ok(spec)
    }

    pub fn validate(&self, gamma: f64) -> Result<()> {
        if !(self.p > gamma) || !(self.p_bar > gamma) {
            return Err(Error::invalid(format!(
                "moment exponents must exceed gamma={gamma}: p={}, p_bar={}",
                self.p, self.p_bar
            )));
        }
        Ok(())
    }
}

/// Finite stand-in for "every p_bar > gamma".
pub fn default_pbar_probes(gamma: f64) -> [f64; 3] {
    [1.1 * gamma, 2.0 * gamma, 4.0 * gamma]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum BoundQuantity {
    #[serde(rename = "A_beta_sup_moment")]
    ABetaSupMoment,
    #[serde(rename = "Abar_beta_sup_moment")]
    AbarBetaSupMoment,
    #[serde(rename = "pointwise_psi")]
    PointwisePsi,
    #[serde(rename = "bounded_above")]
    BoundedAbove,
}

impl BoundQuantity {
    pub fn as_str(self) -> &'static str {
        match self {
            BoundQuantity::ABetaSupMoment => "A_beta_sup_moment",
            BoundQuantity::AbarBetaSupMoment => "Abar_beta_sup_moment",
            BoundQuantity::PointwisePsi => "pointwise_psi",
            BoundQuantity::BoundedAbove => "bounded_above",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundReport {
    pub quantity: BoundQuantity,
    /// The exponent the quantity was computed with.
    pub exponent: f64,
    pub empirical_value: f64,
    pub bound_value: Option<f64>,
    pub satisfied: bool,
    pub std_error: f64,
    /// The top 0.1% of paths carry more than half of the sample mass.
    pub saturated: bool,
    /// `bound - empirical` when there is a bound.
    pub slack: Option<f64>,
}

/// `E[exp(l_i)]` from per-path exponents, with the saturation flag.
fn exp_moment(logs: &[f64]) -> (Estimate, bool) {
    let n = logs.len();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if n == 0 || max.is_nan() {
        return (Estimate { mean: f64::NAN, std_error: f64::NAN }, true);
    }
    let scaled: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let e = Estimate::from_samples(&scaled);
    let scale = max.exp();
    let est = Estimate { mean: e.mean * scale, std_error: e.std_error * scale };

    let mut sorted = scaled;
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top = n.div_ceil(1000).max(1);
    let total = stats::sum(&sorted);
    let head = stats::sum(&sorted[..top]);
    let saturated = !(head <= SATURATION_SHARE * total) || !est.mean.is_finite();
    (est, saturated)
}

fn moment_report(quantity: BoundQuantity, exponent: f64, logs: &[f64]) -> BoundReport {
    let (e, saturated) = exp_moment(logs);
    BoundReport {
        quantity,
        exponent,
        empirical_value: e.mean,
        bound_value: None,
        satisfied: e.mean.is_finite(),
        std_error: e.std_error,
        saturated,
        slack: None,
    }
}

fn cumulative_integrals(c: &TimeCoefficient, nodes: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(nodes.len());
    let mut acc = 0.0;
    out.push(0.0);
    for w in nodes.windows(2) {
        acc += c.integral(w[0], w[1]);
        out.push(acc);
    }
    out
}

/// Per-path `max_m A_beta(t_m)` and `max_m Abar_beta(t_m)`, with
/// `A_beta(t) = e^{beta t}(Y_t^- + int_0^t alpha_bar)` and
/// `Abar_beta(t) = e^{beta t}(Y_t^+ + int_0^t alpha_under)`.
pub fn sup_processes(sol: &SolutionField, env: &Envelope) -> (Vec<f64>, Vec<f64>) {
    let nodes = sol.grid.nodes();
    let m_last = sol.grid.steps;
    let over = cumulative_integrals(&env.alpha_bar, &nodes);
    let under = cumulative_integrals(&env.alpha_under, &nodes);
    let disc: Vec<f64> = nodes.iter().map(|t| (env.beta * t).exp()).collect();
    (0..sol.n_paths)
        .into_par_iter()
        .map(|i| {
            let (mut a, mut abar) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for m in 0..=m_last {
                let y = sol.y(i, m);
                a = a.max(disc[m] * ((-y).max(0.0) + over[m]));
                abar = abar.max(disc[m] * (y.max(0.0) + under[m]));
            }
            (a, abar)
        })
        .unzip()
}

/// Moment reports for a solved equation: `E[exp(p sup A_beta)]`,
/// `E[exp(p_bar sup Abar_beta)]`, the pointwise check
/// `exp(p_bar Y_0^+) <= E[psi(T, xi^+; alpha_under, beta, p_bar)]` and,
/// when `xi <= upper_bound` and `alpha_under = 0`, the bounded-above estimate
/// `Y_t <= exp(2 gamma e^{beta T} M) / (2 gamma)`.
pub fn moment_diagnostics(
    sol: &SolutionField,
    spec: &MomentSpec,
    env: &Envelope,
    upper_bound: Option<f64>,
) -> Result<Vec<BoundReport>> {
    spec.validate(env.gamma)?;
    let m_last = sol.grid.steps;
    let n = sol.n_paths;
    let beta = env.beta;
    let (sup_a, sup_abar) = sup_processes(sol, env);
    let a_logs: Vec<f64> = sup_a.iter().map(|s| spec.p * s).collect();
    let abar_logs: Vec<f64> = sup_abar.iter().map(|s| spec.p_bar * s).collect();

    let mut out = vec![
        moment_report(BoundQuantity::ABetaSupMoment, spec.p, &a_logs),
        moment_report(BoundQuantity::AbarBetaSupMoment, spec.p_bar, &abar_logs),
    ];

    let horizon = sol.grid.horizon;
    let base = log_psi(horizon, 0.0, &env.alpha_under, beta, spec.p_bar)?;
    let grow = spec.p_bar * (beta * horizon).exp();
    let psi_logs: Vec<f64> = (0..n).map(|i| base + grow * sol.y(i, m_last).max(0.0)).collect();
    let (rhs, saturated) = exp_moment(&psi_logs);
    let lhs = (spec.p_bar * sol.y0().mean.max(0.0)).exp();
    out.push(BoundReport {
        quantity: BoundQuantity::PointwisePsi,
        exponent: spec.p_bar,
        empirical_value: lhs,
        bound_value: Some(rhs.mean),
        satisfied: lhs <= rhs.mean + 5.0 * rhs.std_error,
        std_error: rhs.std_error,
        saturated,
        slack: Some(rhs.mean - lhs),
    });

    if let (Some(m), Some(0.0)) = (upper_bound, env.alpha_under.as_constant()) {
        let two_g = 2.0 * env.gamma;
        let bound = (two_g * (beta * horizon).exp() * m).exp() / two_g;
        let max_y = (0..=m_last)
            .flat_map(|k| sol.y_at(k).iter().copied())
            .fold(f64::NEG_INFINITY, f64::max);
        out.push(BoundReport {
            quantity: BoundQuantity::BoundedAbove,
            exponent: two_g,
            empirical_value: max_y,
            bound_value: Some(bound),
            satisfied: max_y <= bound,
            std_error: 0.0,
            saturated: false,
            slack: Some(bound - max_y),
        });
    }
    Ok(out)
}

/// Pointwise check with both sides by quadrature in `B_T`, d = 1:
/// `exp(p_bar y0^+)` against `E[psi(T, h(B_T)^+; alpha_under, beta, p_bar)]`.
pub fn pointwise_psi_quadrature(
    y0: f64,
    term: &TerminalSpec,
    env: &Envelope,
    horizon: f64,
    p_bar: f64,
) -> Result<BoundReport> {
    let base = log_psi(horizon, 0.0, &env.alpha_under, env.beta, p_bar)?;
    let grow = p_bar * (env.beta * horizon).exp();
    let rhs = quadrature::normal_expectation(horizon.sqrt(), |x| (base + grow * term.eval(&[x]).max(0.0)).exp());
    if !(rhs.is_finite() && rhs > 0.0) {
        return Err(Error::QuadratureUnderflow);
    }
    let lhs = (p_bar * y0.max(0.0)).exp();
    Ok(BoundReport {
        quantity: BoundQuantity::PointwisePsi,
        exponent: p_bar,
        empirical_value: lhs,
        bound_value: Some(rhs),
        satisfied: lhs <= rhs,
        std_error: 0.0,
        saturated: false,
        slack: Some(rhs - lhs),
    })
}

pub fn write_bound_csv<W: Write>(reports: &[BoundReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "quantity",
        "exponent",
        "empirical_value",
        "bound_value",
        "satisfied",
        "std_error",
        "saturated",
        "slack",
    ])?;
    for r in reports {
        w.write_record([
            r.quantity.as_str().to_string(),
            format!("{}", r.exponent),
            format!("{}", r.empirical_value),
            r.bound_value.map(|v| format!("{v}")).unwrap_or_default(),
            r.satisfied.to_string(),
            format!("{}", r.std_error),
            r.saturated.to_string(),
            r.slack.map(|v| format!("{v}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Hypothesis probes

/// Scan of `-g(t,y,z) <= alpha_bar(t) + phi(|y|) + gamma |z|`.
#[derive(Clone, Debug, Serialize)]
pub struct LowerBoundProbe {
    pub passed: bool,
    pub worst_margin: f64,
    pub probe_count: usize,
    /// `(t, y, z)` of the largest margin.
    pub worst_point: Option<(f64, f64, Vec<f64>)>,
}

pub fn lower_bound_probe(gen: &GeneratorSpec, probe: &ProbeConfig) -> LowerBoundProbe {
    let ts = probe.t_grid(gen.horizon);
    let ys = probe.y_grid();
    let zs = probe.z_set(gen.dim);
    let env = &gen.envelope;
    let per_t: Vec<(bool, f64, Option<(f64, f64, Vec<f64>)>)> = ts
        .par_iter()
        .map(|&t| {
            let ab = env.alpha_bar.value(t);
            let mut failed = false;
            let mut worst = (f64::NEG_INFINITY, None);
            for z in &zs {
                let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                for &y in &ys {
                    let lhs = -gen.eval(t, y, z);
                    let rhs = ab + env.phi.eval(y.abs()) + env.gamma * zn;
                    let margin = lhs - rhs;
                    failed |= !(margin <= 1e-9 * (1.0 + lhs.abs() + rhs.abs()));
                    if margin > worst.0 || margin.is_nan() {
                        worst = (margin, Some((t, y, z.clone())));
                    }
                }
            }
            (failed, worst.0, worst.1)
        })
        .collect();
    let mut out = LowerBoundProbe {
        passed: true,
        worst_margin: f64::NEG_INFINITY,
        probe_count: ts.len() * ys.len() * zs.len(),
        worst_point: None,
    };
    for (failed, margin, point) in per_t {
        out.passed &= !failed;
        if margin > out.worst_margin || margin.is_nan() {
            out.worst_margin = margin;
            out.worst_point = point;
        }
    }
    out
}

/// Pointwise ordering and Lipschitz constants of the `g_n` ladder.
#[derive(Clone, Debug, Serialize)]
pub struct LadderProbe {
    pub levels: Vec<u32>,
    /// Grid points where `g_{n_k} <= g_{n_{k+1}} <= g` fails.
    pub order_violations: usize,
    pub order_points: usize,
    /// Largest difference quotient in z per level.
    pub max_lipschitz: Vec<f64>,
    /// `n + gamma` per level.
    pub lipschitz_bound: Vec<f64>,
    pub lipschitz_ok: bool,
}

pub fn ladder_probe(
    gen: &GeneratorSpec,
    n_levels: &[u32],
    probe: &ProbeConfig,
    cfg: &InfConvolutionConfig,
) -> Result<LadderProbe> {
    let mut levels = n_levels.to_vec();
    levels.sort_unstable();
    levels.dedup();
    let gens = levels.iter().map(|&n| inf_convolution_with(gen, n, cfg)).collect::<Result<Vec<_>>>()?;

    let ts = probe.t_grid(gen.horizon);
    let ys = probe.y_grid();
    let zs = probe.z_set(gen.dim);
    let order_violations: usize = ts
        .par_iter()
        .map(|&t| {
            let mut bad = 0;
            for z in &zs {
                for &y in &ys {
                    let mut prev = f64::NEG_INFINITY;
                    let mut ok = true;
                    for g in gens.iter().chain(std::iter::once(gen)) {
                        let v = g.eval(t, y, z);
                        ok &= v >= prev;
                        prev = v;
                    }
                    bad += usize::from(!ok);
                }
            }
            bad
        })
        .sum();

    let gamma = gen.envelope.gamma;
    let mut max_lipschitz = Vec::with_capacity(gens.len());
    for (k, g) in gens.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(probe.seed ^ (0x1ad0 + k as u64));
        let pairs: Vec<(f64, f64, Vec<f64>, Vec<f64>)> = (0..probe.random_pairs)
            .map(|_| {
                let t = rng.random_range(0.0..=gen.horizon);
                let y = rng.random_range(-probe.y_max..=probe.y_max);
                let z: Vec<f64> = (0..gen.dim).map(|_| rng.random_range(-probe.z_max..=probe.z_max)).collect();
                let z2: Vec<f64> = (0..gen.dim).map(|_| rng.random_range(-probe.z_max..=probe.z_max)).collect();
                (t, y, z, z2)
            })
            .collect();
        let worst = pairs
            .par_iter()
            .map(|(t, y, z, z2)| {
                let dz = z.iter().zip(z2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                if dz < 1e-3 {
                    return 0.0;
                }
                (g.eval(*t, *y, z) - g.eval(*t, *y, z2)).abs() / dz
            })
            .reduce(|| 0.0, f64::max);
        max_lipschitz.push(worst);
    }
    let lipschitz_bound: Vec<f64> = levels.iter().map(|&n| n as f64 + gamma).collect();
    let lipschitz_ok = max_lipschitz.iter().zip(&lipschitz_bound).all(|(l, b)| *l <= b + 1e-6);
    Ok(LadderProbe {
        levels,
        order_violations,
        order_points: ts.len() * ys.len() * zs.len(),
        max_lipschitz,
        lipschitz_bound,
        lipschitz_ok,
    })
}

// ---------------------------------------------------------------------------
// Comparison experiment

#[derive(Clone, Debug)]
pub struct ComparisonConfig {
    pub solver: SolverConfig,
    pub probe: ProbeConfig,
    pub inf_conv: InfConvolutionConfig,
    /// Standard errors a difference must exceed to count.
    pub se_multiple: f64,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        ComparisonConfig {
            solver: SolverConfig::default(),
            probe: ProbeConfig::default(),
            inf_conv: InfConvolutionConfig::default(),
            se_multiple: 3.0,
        }
    }
}

/// One row of the ladder table; `n = None` is the limit equation itself.
#[derive(Clone, Debug, Serialize)]
pub struct LadderRow {
    pub n: Option<u32>,
    pub y0: Estimate,
    /// For the limit row: share of points with `Y' > Y + k SE`. For level
    /// `n`: share with `Y > Y^n + k SE`.
    pub violation_fraction: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparisonReport {
    pub y0: Estimate,
    pub y0_prime: Estimate,
    /// `Y_0 - Y'_0`.
    pub difference: f64,
    /// `sqrt(se^2 + se'^2)`.
    pub difference_se: f64,
    pub strictly_ordered: bool,
    pub violation_fraction: f64,
    pub points: usize,
    /// Points where `g' >= g` was checked along `(Y', Z')`.
    pub hypothesis_points: usize,
    pub ladder: Vec<LadderRow>,
    /// `Y^{n_1}_0 >= ... >= Y^{n_k}_0 >= Y_0` with each increment below k SE.
    pub ladder_non_increasing: bool,
    /// `|Y^{n_k}_0 - Y_0| < |Y^{n_1}_0 - Y_0|`; needs two levels.
    pub ladder_converges: Option<bool>,
}

impl ComparisonReport {
    /// Columns `n, Y_n_0, std_error, violation_fraction`; the limit row has
    /// `n = inf`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["n", "Y_n_0", "std_error", "violation_fraction"])?;
        for r in &self.ladder {
            w.write_record([
                r.n.map(|n| n.to_string()).unwrap_or_else(|| "inf".into()),
                format!("{}", r.y0.mean),
                format!("{}", r.y0.std_error),
                format!("{}", r.violation_fraction),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Share of `(path, step)` points with `upper - lower > k * pooled SE`,
/// where the pooled SE at step `m` combines the per-step standard errors.
fn violation_fraction(upper: &SolutionField, lower: &SolutionField, k: f64) -> (f64, usize) {
    let n = upper.n_paths;
    let steps = upper.grid.steps;
    let mut bad = 0usize;
    for m in 0..=steps {
        let (a, b) = (upper.y_at(m), lower.y_at(m));
        let var = Estimate::std_dev(a).powi(2) + Estimate::std_dev(b).powi(2);
        let se = (var / n as f64).sqrt();
        bad += a.iter().zip(b).filter(|(x, y)| **x > **y + k * se).count();
    }
    let points = n * (steps + 1);
    (bad as f64 / points as f64, points)
}

fn check_hypotheses(gen: &GeneratorSpec, probe: &ProbeConfig) -> Result<()> {
    use AssumptionFamily::*;
    let reports = check_assumptions(gen, &[EX1, EX2, EX3, UN1a, UN1b, UN2], probe)?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.family.as_str()).collect();
    if !failed.is_empty() {
        return Err(Error::MisconfiguredComparison(format!(
            "{} fails {}",
            gen.name(),
            failed.join(", ")
        )));
    }
    let lb = lower_bound_probe(gen, probe);
    if !lb.passed {
        return Err(Error::MisconfiguredComparison(format!(
            "{} fails the lower bound -alpha_bar - phi(|y|) - gamma|z| at {:?}",
            gen.name(),
            lb.worst_point
        )));
    }
    Ok(())
}

/// Solves `(g, xi)` and `(g', xi')` on one ensemble and measures how often
/// `Y' > Y`; then solves `(g_n, xi)` for each ladder level.
#[allow(clippy::too_many_arguments)]
pub fn comparison_experiment(
    gen: &GeneratorSpec,
    gen_prime: &GeneratorSpec,
    term: &TerminalSpec,
    term_prime: &TerminalSpec,
    ens: &BrownianEnsemble,
    n_levels: &[u32],
    cfg: &ComparisonConfig,
) -> Result<ComparisonReport> {
    check_hypotheses(gen, &cfg.probe)?;
    let d = ens.dim;
    let terminal = ens.terminal_positions();
    if let Some(b) = terminal.chunks(d).find(|b| term_prime.eval(b) > term.eval(b)) {
        return Err(Error::MisconfiguredComparison(format!(
            "{} exceeds {} at B_T = {b:?}",
            term_prime.id(),
            term.id()
        )));
    }

    let sol_prime = solve_backward(gen_prime, term_prime, ens, &cfg.solver)?;
    let nodes = ens.grid.nodes();
    let hypothesis_failure = (0..ens.grid.steps).find_map(|m| {
        let t = nodes[m];
        (0..ens.n_paths).find_map(|i| {
            let (y, z) = (sol_prime.y(i, m), sol_prime.z(i, m));
            let (gp, g) = (gen_prime.eval(t, y, z), gen.eval(t, y, z));
            (!(gp >= g - 1e-12 * (1.0 + g.abs()))).then_some((i, m, gp, g))
        })
    });
    if let Some((i, m, gp, g)) = hypothesis_failure {
        return Err(Error::MisconfiguredComparison(format!(
            "g' = {gp} < g = {g} along (Y', Z') on path {i}, step {m}"
        )));
    }
    let sol = solve_backward(gen, term, ens, &cfg.solver)?;

    let k = cfg.se_multiple;
    let (y0, y0_prime) = (sol.y0(), sol_prime.y0());
    let difference = y0.mean - y0_prime.mean;
    let difference_se = y0.std_error.hypot(y0_prime.std_error);
    let (frac, points) = violation_fraction(&sol_prime, &sol, k);

    let mut levels = n_levels.to_vec();
    levels.sort_unstable();
    levels.dedup();
    let mut ladder = Vec::with_capacity(levels.len() + 1);
    for &n in &levels {
        let g_n = inf_convolution_with(gen, n, &cfg.inf_conv)?;
        let sol_n = solve_backward(&g_n, term, ens, &cfg.solver)?;
        let (f, _) = violation_fraction(&sol, &sol_n, k);
        ladder.push(LadderRow { n: Some(n), y0: sol_n.y0(), violation_fraction: f });
    }
    ladder.push(LadderRow { n: None, y0, violation_fraction: frac });

    let ladder_non_increasing = ladder
        .windows(2)
        .all(|w| w[1].y0.mean - w[0].y0.mean <= k * w[0].y0.std_error.hypot(w[1].y0.std_error));
    let ladder_converges = (levels.len() >= 2).then(|| {
        let first = (ladder[0].y0.mean - y0.mean).abs();
        let last = (ladder[levels.len() - 1].y0.mean - y0.mean).abs();
        last < first
    });

    Ok(ComparisonReport {
        y0,
        y0_prime,
        difference,
        difference_se,
        strictly_ordered: difference > k * difference_se,
        violation_fraction: frac,
        points,
        hypothesis_points: ens.n_paths * ens.grid.steps,
        ladder,
        ladder_non_increasing,
        ladder_converges,
    })
}
