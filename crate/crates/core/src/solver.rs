//! Backward regression Monte Carlo for `Y_t = xi - int g ds + int Z dB`
//! with Markovian terminal values `xi = h(B_T)`, plus closed-form oracles.
//!
//! One step of the scheme on `[t_m, t_{m+1}]`:
//!
//! ```text
//! Z_m = -E[(Y_{m+1} - Yhat_m) dB_m | B_m] / dt,   Yhat_m = E[Y_{m+1} | B_m]
//! Y_m = Yhat_m - dt g(t_m, Y_m, Z_m)             (implicit in y)
//! ```
//!
//! With this sign convention `Y_{m+1} - Y_m = g dt - Z dB`, so `Z` is minus
//! the regression slope of `Y_{m+1}` on the increment.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::{norm, parse_call, GeneratorSpec};
use crate::paths::{write_header, BrownianEnsemble, TimeGrid};
use crate::quadrature;
use crate::regression::{dot, Basis, BasisConfig, Projection};
use crate::stats::{self, Estimate};

type TerminalFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// Terminal value `xi = h(B_T)`.
///
/// Ids: `const(c)`, `sin`, `sin(a)`, `sin(a,c)` for `a sin(B^1_T) + c`,
/// `bm`, `bm(a)` for `a B^1_T`, and `bm_sq` for `|B_T|^2`.
#[derive(Clone)]
pub struct TerminalSpec {
    id: String,
    h: Arc<TerminalFn>,
    /// A bound `xi <= M` when one is known.
    pub upper_bound: Option<f64>,
    pub moment_tags: Vec<String>,
}

impl fmt::Debug for TerminalSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TerminalSpec")
            .field("id", &self.id)
            .field("upper_bound", &self.upper_bound)
            .finish()
    }
}

impl TerminalSpec {
    pub fn new(id: impl Into<String>, h: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        TerminalSpec { id: id.into(), h: Arc::new(h), upper_bound: None, moment_tags: Vec::new() }
    }

    pub fn with_upper_bound(mut self, m: f64) -> Self {
        self.upper_bound = Some(m);
        self
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.moment_tags.push(tag.into());
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    #[inline]
    pub fn eval(&self, b: &[f64]) -> f64 {
        (self.h)(b)
    }

    /// `h + c`.
    pub fn shifted(&self, c: f64) -> TerminalSpec {
        let h = self.h.clone();
        TerminalSpec {
            id: format!("{}{:+}", self.id, c),
            h: Arc::new(move |b| h(b) + c),
            upper_bound: self.upper_bound.map(|m| m + c),
            moment_tags: self.moment_tags.clone(),
        }
    }

    pub fn constant(c: f64) -> TerminalSpec {
        TerminalSpec::new(format!("const({c})"), move |_| c)
            .with_upper_bound(c)
            .with_tag("xi bounded")
    }
}

impl FromStr for TerminalSpec {
    type Err = Error;

    fn from_str(id: &str) -> Result<Self> {
        let unknown = || Error::UnknownTerminal(id.to_string());
        let (name, args) = parse_call(id).ok_or_else(unknown)?;
        let spec = match (name.as_str(), args.as_slice()) {
            ("const", [c]) => TerminalSpec::constant(*c),
            ("sin", []) => sin_terminal(id, 1.0, 0.0),
            ("sin", [a]) => sin_terminal(id, *a, 0.0),
            ("sin", [a, c]) => sin_terminal(id, *a, *c),
            ("bm", []) => TerminalSpec::new(id, |b| b[0]).with_tag("xi+ all exp-moments"),
            ("bm", [a]) => {
                let a = *a;
                TerminalSpec::new(id, move |b| a * b[0]).with_tag("xi+ all exp-moments")
            }
            ("bm_sq", []) => TerminalSpec::new(id, |b| b.iter().map(|v| v * v).sum())
                .with_tag("xi- bounded")
                .with_tag("xi+ exp-moments below 1/(2T)"),
            _ => return Err(unknown()),
        };
        if args.iter().any(|v| !v.is_finite()) {
            return Err(unknown());
        }
        Ok(spec)
    }
}

fn sin_terminal(id: &str, a: f64, c: f64) -> TerminalSpec {
    TerminalSpec::new(id, move |b| a * b[0].sin() + c)
        .with_upper_bound(a.abs() + c)
        .with_tag("xi bounded")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PicardConfig {
    pub tol: f64,
    pub max_iters: usize,
    pub damping: f64,
    /// Undamped iterations before damping engages.
    pub damping_after: usize,
    /// Weight of the implicit driver term; 1 is implicit Euler, 0.5 the
    /// trapezoidal rule.
    pub theta: f64,
}

impl Default for PicardConfig {
    fn default() -> Self {
        PicardConfig { tol: 1e-10, max_iters: 50, damping: 0.5, damping_after: 20, theta: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub basis: BasisConfig,
    pub picard: PicardConfig,
    /// `|z|` is clamped to this level before the driver is evaluated.
    pub truncation: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { basis: BasisConfig::default(), picard: PicardConfig::default(), truncation: 50.0 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let p = &self.picard;
        if p.max_iters == 0 || !(p.tol > 0.0) {
            return Err(Error::invalid("Picard needs max_iters >= 1 and tol > 0"));
        }
        if !(p.damping > 0.0 && p.damping <= 1.0) {
            return Err(Error::invalid("Picard damping must lie in (0, 1]"));
        }
        if !(p.theta > 0.0 && p.theta <= 1.0) {
            return Err(Error::invalid("theta must lie in (0, 1]"));
        }
        if !(self.truncation > 0.0) {
            return Err(Error::invalid("truncation level must be positive"));
        }
        Ok(())
    }
}

/// Outcome of one scalar implicit solve `y + c G(y) = rhs`.
#[derive(Clone, Copy, Debug)]
pub struct StepSolve {
    pub y: f64,
    pub iters: usize,
    pub bisected: bool,
    /// The fixed-point residual increased at least once.
    pub non_monotone: bool,
}

/// Solves `y + c G(y) = rhs` by Picard iteration `y <- rhs - c G(y)` with
/// late damping, falling back to bisection from the bracket
/// `rhs -+ width` (expanded as needed) when the iteration stalls.
/// Returns the last residual on failure.
pub fn implicit_step<G: Fn(f64) -> f64>(
    g: G,
    rhs: f64,
    c: f64,
    width: f64,
    cfg: &PicardConfig,
) -> std::result::Result<StepSolve, f64> {
    let mut y = rhs;
    let mut prev = f64::INFINITY;
    let mut non_monotone = false;
    let mut last = f64::INFINITY;
    for it in 1..=cfg.max_iters {
        let fy = rhs - c * g(y);
        if !fy.is_finite() {
            break;
        }
        let res = (fy - y).abs();
        last = res;
        if res > prev {
            non_monotone = true;
        }
        prev = res;
        if res <= cfg.tol * (1.0 + y.abs()) {
            return Ok(StepSolve { y: fy, iters: it, bisected: false, non_monotone });
        }
        y = if it > cfg.damping_after { y + cfg.damping * (fy - y) } else { fy };
    }
    let h = |y: f64| y + c * g(y) - rhs;
    let w = if width.is_finite() && width > 0.0 { width } else { 1.0 };
    let (mut lo, mut hi) = (rhs - w, rhs + w);
    let mut step = w;
    let mut k = 0;
    while !(h(lo) <= 0.0) && k < 60 {
        step *= 2.0;
        lo = rhs - step;
        k += 1;
    }
    step = w;
    k = 0;
    while !(h(hi) >= 0.0) && k < 60 {
        step *= 2.0;
        hi = rhs + step;
        k += 1;
    }
    if !(h(lo) <= 0.0 && h(hi) >= 0.0) {
        return Err(last);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= 1e-13 * (1.0 + mid.abs()) {
            break;
        }
        let v = h(mid);
        if !v.is_finite() {
            return Err(last);
        }
        if v <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let y = 0.5 * (lo + hi);
    let fy = rhs - c * g(y);
    Ok(StepSolve { y, iters: cfg.max_iters, bisected: true, non_monotone: non_monotone || (fy - y).abs() > 1e-6 * (1.0 + y.abs()) })
}

#[derive(Clone, Debug, Serialize)]
pub struct StepReport {
    pub t: f64,
    pub mean_y: f64,
    pub std_y: f64,
    pub mean_abs_z: f64,
    pub picard_iters: usize,
    pub picard_mean: f64,
    pub bisections: usize,
    pub non_monotone: usize,
    pub trunc_fraction: f64,
    pub regression_residual: f64,
}

/// Per-path samples of `(Y, Z)` and the per-step regression coefficients.
#[derive(Clone, Debug)]
pub struct SolutionField {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub dim: usize,
    pub seed: u64,
    pub basis: BasisConfig,
    pub truncation_level: f64,
    /// `[m][path]`, `m = 0..=M`.
    y: Vec<Vec<f64>>,
    /// `[m][path * d + k]`, `m = 0..M`.
    z: Vec<Vec<f64>>,
    /// Coefficients of `Y_m` on the step-`m` basis, `m = 0..M`.
    pub y_regression: Vec<Vec<f64>>,
    /// Coefficients of each component of `Z_m`.
    pub z_regression: Vec<Vec<Vec<f64>>>,
    pub steps: Vec<StepReport>,
    y0: Estimate,
}

impl SolutionField {
    #[inline]
    pub fn y(&self, path: usize, m: usize) -> f64 {
        self.y[m][path]
    }

    #[inline]
    pub fn z(&self, path: usize, m: usize) -> &[f64] {
        &self.z[m][path * self.dim..(path + 1) * self.dim]
    }

    /// `Y_{t_m}` for every path.
    pub fn y_at(&self, m: usize) -> &[f64] {
        &self.y[m]
    }

    /// `Z_{t_m}` for every path, `[path][component]`.
    pub fn z_at(&self, m: usize) -> &[f64] {
        &self.z[m]
    }

    pub fn picard_iters_used(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.picard_iters).collect()
    }

    /// `Y_0` with standard error `std(xi - sum_m g_m dt) / sqrt(N)`.
    pub fn y0(&self) -> Estimate {
        self.y0
    }

    /// Total bisection fallbacks over all steps.
    pub fn bisections(&self) -> usize {
        self.steps.iter().map(|s| s.bisections).sum()
    }

    fn features_at(&self, m: usize, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.dim {
            return Err(Error::invalid("position has the wrong dimension"));
        }
        let basis = step_basis(&self.basis, self.dim, m)?;
        let mut f = vec![0.0; basis.len()];
        let s = self.grid.node(m).sqrt();
        let x: Vec<f64> = b.iter().map(|v| if m == 0 { 0.0 } else { v / s }).collect();
        basis.features(&x, &mut f);
        Ok(f)
    }

    /// Regression estimate of `Y_{t_m}` at position `B_{t_m} = b`, `m < M`.
    pub fn eval_y(&self, m: usize, b: &[f64]) -> Result<f64> {
        let c = self.y_regression.get(m).ok_or_else(|| Error::invalid("no Y regression at this step"))?;
        Ok(dot(c, &self.features_at(m, b)?))
    }

    /// Regression estimate of `Z_{t_m}` (clamped to the truncation level).
    pub fn eval_z(&self, m: usize, b: &[f64]) -> Result<Vec<f64>> {
        let cs = self.z_regression.get(m).ok_or_else(|| Error::invalid("no Z regression at this step"))?;
        let f = self.features_at(m, b)?;
        let mut z: Vec<f64> = cs.iter().map(|c| dot(c, &f)).collect();
        clamp_norm(&mut z, self.truncation_level);
        Ok(z)
    }

    /// Columns: t, mean_Y, std_Y, mean_|Z|, picard_iters, trunc_fraction,
    /// regression_residual.
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "mean_Y", "std_Y", "mean_|Z|", "picard_iters", "trunc_fraction", "regression_residual"])?;
        for s in &self.steps {
            w.write_record([
                format!("{}", s.t),
                format!("{}", s.mean_y),
                format!("{}", s.std_y),
                format!("{}", s.mean_abs_z),
                format!("{}", s.picard_iters),
                format!("{}", s.trunc_fraction),
                format!("{}", s.regression_residual),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Ensemble header, then `Y` as `[path][m]` and `Z` as
    /// `[path][m][component]`, all little-endian f64.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        let m = self.grid.steps;
        write_header(&mut out, self.n_paths, m, self.dim, self.seed, self.grid.horizon)?;
        let mut buf = Vec::with_capacity((m + 1) * 8);
        for i in 0..self.n_paths {
            buf.clear();
            for col in &self.y {
                buf.extend_from_slice(&col[i].to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        for i in 0..self.n_paths {
            for step in 0..m {
                for v in self.z(i, step) {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn save_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_binary(f)
    }
}

pub(crate) fn step_basis(cfg: &BasisConfig, dim: usize, m: usize) -> Result<Basis> {
    if m == 0 {
        Ok(Basis::constant(dim))
    } else {
        Basis::new(cfg, dim)
    }
}

/// Scales `z` onto the ball of radius `level`; returns whether it did.
#[inline]
pub(crate) fn clamp_norm(z: &mut [f64], level: f64) -> bool {
    let n = norm(z);
    if n > level {
        let s = level / n;
        z.iter_mut().for_each(|v| *v *= s);
        true
    } else {
        false
    }
}

/// Standardised features of all positions at step `m`, row-major.
pub(crate) fn feature_matrix(basis: &Basis, pos: &[f64], dim: usize, t: f64) -> Vec<f64> {
    let w = basis.len();
    let n = pos.len() / dim;
    let mut feats = vec![0.0; n * w];
    let s = if t > 0.0 { 1.0 / t.sqrt() } else { 0.0 };
    feats.par_chunks_mut(w).enumerate().for_each(|(i, row)| {
        let mut x = [0.0; 8];
        let mut big;
        let xs: &mut [f64] = if dim <= 8 {
            &mut x[..dim]
        } else {
            big = vec![0.0; dim];
            &mut big
        };
        for (k, v) in xs.iter_mut().enumerate() {
            *v = pos[i * dim + k] * s;
        }
        basis.features(xs, row);
    });
    feats
}

pub(crate) fn bracket_width(gen: &GeneratorSpec, t: f64, rhs: f64, z: &[f64], c: f64) -> f64 {
    let env = &gen.envelope;
    let zz: f64 = z.iter().map(|v| v * v).sum();
    2.0 * c * (env.alpha_bar.value(t) + env.phi.eval(rhs.abs()) + 0.5 * env.gamma * zz) + 1.0
}

/// Backward regression solve on the given ensemble.
pub fn solve_backward(
    gen: &GeneratorSpec,
    term: &TerminalSpec,
    ens: &BrownianEnsemble,
    cfg: &SolverConfig,
) -> Result<SolutionField> {
    cfg.validate()?;
    if gen.dim != ens.dim {
        return Err(Error::invalid(format!("generator has d={}, ensemble has d={}", gen.dim, ens.dim)));
    }
    if (gen.horizon - ens.grid.horizon).abs() > 1e-12 * gen.horizon {
        return Err(Error::invalid("generator and ensemble horizons differ"));
    }
    let (n, d, steps) = (ens.n_paths, ens.dim, ens.grid.steps);
    let dt = ens.grid.dt();
    let mut pos = ens.terminal_positions();
    let xi: Vec<f64> = (0..n).map(|i| term.eval(&pos[i * d..(i + 1) * d])).collect();
    if let Some(i) = xi.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("terminal value not finite on path {i}")));
    }
    let mut y_cols = vec![Vec::new(); steps + 1];
    let mut z_cols = vec![Vec::new(); steps];
    let mut y_reg = vec![Vec::new(); steps];
    let mut z_reg = vec![Vec::new(); steps];
    let mut reports = Vec::with_capacity(steps + 1);
    y_cols[steps] = xi.clone();
    // Running sum of g dt along each path, and g at the later node.
    let mut g_sum = vec![0.0; n];
    let mut g_next = vec![0.0; n];
    let picard = &cfg.picard;
    for m in (0..steps).rev() {
        let t = ens.grid.node(m);
        pos.par_chunks_mut(d).enumerate().for_each(|(i, b)| {
            for (bk, dk) in b.iter_mut().zip(ens.increment(i, m)) {
                *bk -= dk;
            }
        });
        let basis = step_basis(&cfg.basis, d, m)?;
        let w = basis.len();
        let feats = feature_matrix(&basis, &pos, d, t);
        let proj = Projection::fit(&feats, w, m)?;
        let theta = if m + 1 == steps { 1.0 } else { picard.theta };
        let next = &y_cols[m + 1];
        let coefs = proj.solve(&feats, 2, |i, out| {
            out[0] = next[i];
            out[1] = next[i] - (1.0 - theta) * dt * g_next[i];
        });
        let fitted: Vec<f64> = feats.par_chunks(w).map(|f| dot(&coefs[0], f)).collect();
        let z_coef = proj.solve(&feats, d, |i, out| {
            let r = next[i] - fitted[i];
            for (k, o) in out.iter_mut().enumerate() {
                *o = -r * ens.increment(i, m)[k] / dt;
            }
        });
        let residual = (stats::sum_by(n, |i| (next[i] - fitted[i]).powi(2)) / n as f64).sqrt();
        let c = theta * dt;
        let solved: Vec<std::result::Result<(f64, Vec<f64>, bool, StepSolve), f64>> = feats
            .par_chunks(w)
            .map(|f| {
                let rhs = dot(&coefs[1], f);
                let mut z: Vec<f64> = z_coef.iter().map(|cz| dot(cz, f)).collect();
                let truncated = clamp_norm(&mut z, cfg.truncation);
                let width = bracket_width(gen, t, rhs, &z, c);
                let s = implicit_step(|y| gen.eval(t, y, &z), rhs, c, width, picard)?;
                Ok((s.y, z, truncated, s))
            })
            .collect();
        let mut ys = Vec::with_capacity(n);
        let mut zs = Vec::with_capacity(n * d);
        let (mut max_it, mut bis, mut nonmono, mut trunc) = (0usize, 0usize, 0usize, 0usize);
        let mut iters = Vec::with_capacity(n);
        for r in solved {
            let (y, z, tr, s) = r.map_err(|residual| Error::PicardDivergence { step: m, residual })?;
            ys.push(y);
            zs.extend_from_slice(&z);
            trunc += tr as usize;
            max_it = max_it.max(s.iters);
            bis += s.bisected as usize;
            nonmono += s.non_monotone as usize;
            iters.push(s.iters as f64);
        }
        for i in 0..n {
            let g = gen.eval(t, ys[i], &zs[i * d..(i + 1) * d]);
            if !g.is_finite() {
                return Err(Error::NonFiniteDriver { t, y: ys[i], z: zs[i * d..(i + 1) * d].to_vec(), value: g });
            }
            g_sum[i] += (1.0 - theta) * dt * g_next[i] + theta * dt * g;
            g_next[i] = g;
        }
        y_reg[m] = proj.solve(&feats, 1, |i, out| out[0] = ys[i]).pop().unwrap();
        z_reg[m] = z_coef;
        let abs_z: Vec<f64> = zs.chunks(d).map(norm).collect();
        let est = Estimate::from_samples(&ys);
        reports.push(StepReport {
            t,
            mean_y: est.mean,
            std_y: Estimate::std_dev(&ys),
            mean_abs_z: stats::sum(&abs_z) / n as f64,
            picard_iters: max_it,
            picard_mean: stats::sum(&iters) / n as f64,
            bisections: bis,
            non_monotone: nonmono,
            trunc_fraction: trunc as f64 / n as f64,
            regression_residual: residual,
        });
        y_cols[m] = ys;
        z_cols[m] = zs;
    }
    reports.reverse();
    let terminal = Estimate::from_samples(&xi);
    reports.push(StepReport {
        t: ens.grid.node(steps),
        mean_y: terminal.mean,
        std_y: Estimate::std_dev(&xi),
        mean_abs_z: f64::NAN,
        picard_iters: 0,
        picard_mean: 0.0,
        bisections: 0,
        non_monotone: 0,
        trunc_fraction: 0.0,
        regression_residual: 0.0,
    });
    let pathwise: Vec<f64> = (0..n).map(|i| xi[i] - g_sum[i]).collect();
    let y0 = Estimate { mean: y_cols[0][0], std_error: Estimate::std_dev(&pathwise) / (n as f64).sqrt() };
    Ok(SolutionField {
        grid: ens.grid,
        n_paths: n,
        dim: d,
        seed: ens.seed,
        basis: cfg.basis.clone(),
        truncation_level: cfg.truncation,
        y: y_cols,
        z: z_cols,
        y_regression: y_reg,
        z_regression: z_reg,
        steps: reports,
        y0,
    })
}

// ---------------------------------------------------------------------------
// Oracles

/// How an oracle computes `E[h(B_T)]`-type expectations.
#[derive(Clone, Copy, Debug)]
pub enum Expectation<'a> {
    /// 64-point Gauss-Hermite in `B^1_T`, d = 1.
    Quadrature,
    MonteCarlo(&'a BrownianEnsemble),
}

fn log_mean_exp(logs: &[f64], log_weights: Option<&[f64]>) -> f64 {
    let terms: Vec<f64> = match log_weights {
        Some(lw) => logs.iter().zip(lw).map(|(a, b)| a + b).collect(),
        None => logs.to_vec(),
    };
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s = stats::sum_by(terms.len(), |i| (terms[i] - max).exp());
    let norm = if log_weights.is_some() { 1.0 } else { terms.len() as f64 };
    max + (s / norm).ln()
}

/// `Y_0 = -(1/gamma) ln E[exp(-gamma xi)]` for `g = gamma/2 |z|^2`.
pub fn quadratic_oracle(gamma: f64, term: &TerminalSpec, horizon: f64, how: Expectation) -> Result<Estimate> {
    if !(gamma > 0.0) {
        return Err(Error::invalid("gamma must be positive"));
    }
    match how {
        Expectation::Quadrature => {
            let rule = quadrature::normal_rule();
            let sd = horizon.sqrt();
            let logs: Vec<f64> = rule.iter().map(|(x, _)| -gamma * term.eval(&[sd * x])).collect();
            let lw: Vec<f64> = rule.iter().map(|(_, p)| p.ln()).collect();
            let l = log_mean_exp(&logs, Some(&lw));
            if !l.is_finite() {
                return Err(Error::QuadratureUnderflow);
            }
            Ok(Estimate { mean: -l / gamma, std_error: 0.0 })
        }
        Expectation::MonteCarlo(ens) => {
            let d = ens.dim;
            let pos = ens.terminal_positions();
            let logs: Vec<f64> = pos.chunks(d).map(|b| -gamma * term.eval(b)).collect();
            let l = log_mean_exp(&logs, None);
            if !l.is_finite() {
                return Err(Error::QuadratureUnderflow);
            }
            // Delta method on the mean of exp(logs - l).
            let scaled: Vec<f64> = logs.iter().map(|v| (v - l).exp()).collect();
            let se = Estimate::from_samples(&scaled).std_error;
            Ok(Estimate { mean: -l / gamma, std_error: se / gamma })
        }
    }
}

/// `Y_0 = e^{-beta T} E[xi]` for `g = beta y`.
pub fn linear_oracle(beta: f64, term: &TerminalSpec, horizon: f64, how: Expectation) -> Result<Estimate> {
    let disc = (-beta * horizon).exp();
    match how {
        Expectation::Quadrature => {
            let sd = horizon.sqrt();
            let v = quadrature::normal_expectation(sd, |x| term.eval(&[x]));
            Ok(Estimate { mean: disc * v, std_error: 0.0 })
        }
        Expectation::MonteCarlo(ens) => {
            let d = ens.dim;
            let pos = ens.terminal_positions();
            let vals: Vec<f64> = pos.chunks(d).map(|b| term.eval(b)).collect();
            let e = Estimate::from_samples(&vals);
            Ok(Estimate { mean: disc * e.mean, std_error: disc * e.std_error })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::example_generator;

    fn ens(n: usize, m: usize, seed: u64) -> BrownianEnsemble {
        BrownianEnsemble::simulate(TimeGrid::new(1.0, m).unwrap(), n, 1, seed, false).unwrap()
    }

    #[test]
    fn terminal_ids() {
        let s: TerminalSpec = "sin(3)".parse().unwrap();
        assert!((s.eval(&[0.5]) - 3.0 * 0.5f64.sin()).abs() < 1e-15);
        assert_eq!(s.upper_bound, Some(3.0));
        let s: TerminalSpec = "sin(1,-0.5)".parse().unwrap();
        assert_eq!(s.upper_bound, Some(0.5));
        let s: TerminalSpec = "bm_sq".parse().unwrap();
        assert_eq!(s.eval(&[3.0]), 9.0);
        assert!("cos".parse::<TerminalSpec>().is_err());
        assert!("sin(1,2,3)".parse::<TerminalSpec>().is_err());
    }

    #[test]
    fn implicit_step_solves_monotone_equation() {
        // y + 0.1 sqrt(y) = 1
        let s = implicit_step(|y: f64| y.max(0.0).sqrt(), 1.0, 0.1, 1.0, &PicardConfig::default()).unwrap();
        assert!((s.y + 0.1 * s.y.sqrt() - 1.0).abs() < 1e-10);
        // a map that is not a contraction: y + 3 y = 4 has root 1
        let s = implicit_step(|y| y, 4.0, 3.0, 1.0, &PicardConfig::default()).unwrap();
        assert!(s.bisected && (s.y - 1.0).abs() < 1e-10);
    }

    #[test]
    fn zero_driver_constant_terminal() {
        let g = example_generator("zero", 1, 1.0).unwrap();
        let e = ens(2000, 10, 1);
        let sol = solve_backward(&g, &TerminalSpec::constant(2.5), &e, &SolverConfig::default()).unwrap();
        for m in 0..=10 {
            for i in (0..2000).step_by(97) {
                assert!((sol.y(i, m) - 2.5).abs() < 1e-12);
                if m < 10 {
                    assert!(sol.z(i, m)[0].abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn terminal_consistency() {
        let g = example_generator("pure_quadratic(1)", 1, 1.0).unwrap();
        let e = ens(3000, 8, 2);
        let term: TerminalSpec = "sin".parse().unwrap();
        let sol = solve_backward(&g, &term, &e, &SolverConfig::default()).unwrap();
        let bt = e.terminal_positions();
        for (i, b) in bt.iter().enumerate() {
            assert_eq!(sol.y(i, 8), term.eval(&[*b]));
        }
    }

    #[test]
    fn oracle_examples() {
        let sin: TerminalSpec = "sin".parse().unwrap();
        let c = TerminalSpec::constant(0.7);
        for gamma in [0.5, 1.0, 3.0] {
            let v = quadratic_oracle(gamma, &c, 1.0, Expectation::Quadrature).unwrap().mean;
            assert!((v - 0.7).abs() < 1e-14);
            let y = quadratic_oracle(gamma, &sin, 1.0, Expectation::Quadrature).unwrap().mean;
            assert!(y <= 0.0);
        }
        let small = quadratic_oracle(1e-4, &sin, 1.0, Expectation::Quadrature).unwrap().mean;
        assert!(small.abs() < 1e-3);
        let sq: TerminalSpec = "bm_sq".parse().unwrap();
        let l = linear_oracle(2.0, &sq, 1.0, Expectation::Quadrature).unwrap().mean;
        assert!((l - (-2f64).exp()).abs() < 1e-12);
        let one = linear_oracle(1.0, &TerminalSpec::constant(1.0), 1.0, Expectation::Quadrature).unwrap().mean;
        assert!((one - (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn eval_matches_samples() {
        let g = example_generator("pure_quadratic(1)", 1, 1.0).unwrap();
        let e = ens(4000, 6, 3);
        let sol = solve_backward(&g, &"sin".parse().unwrap(), &e, &SolverConfig::default()).unwrap();
        let pos = e.positions_at(3);
        for i in (0..4000).step_by(501) {
            assert!((sol.eval_y(3, &[pos[i]]).unwrap() - sol.y(i, 3)).abs() < 1e-2);
            assert!((sol.eval_z(3, &[pos[i]]).unwrap()[0] - sol.z(i, 3)[0]).abs() < 1e-10);
        }
        assert!(sol.eval_y(6, &[0.0]).is_err());
    }

    #[test]
    fn summary_csv_shape() {
        let g = example_generator("zero", 1, 1.0).unwrap();
        let e = ens(500, 4, 4);
        let sol = solve_backward(&g, &"bm".parse().unwrap(), &e, &SolverConfig::default()).unwrap();
        let mut buf = Vec::new();
        sol.write_summary_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
        let mut bin = Vec::new();
        sol.write_binary(&mut bin).unwrap();
        assert_eq!(bin.len(), 40 + 8 * (500 * 5 + 500 * 4));
    }
}
