//! Dual control representation of `Y_0`.
//!
//! For a control `(r, q)` with `Q = E(q) . P`, the joint dual value is
//!
//! ```text
//! Y^{r,q}_0 = E^Q[ e^{-int_0^T r} xi + int_0^T e^{-int_0^s r} f(s, r_s, q_s) ds ]
//! ```
//!
//! and `Y_0` is its infimum over admissible controls. The z-only variant
//! solves `Y^q_t = xi + int_t^T f(s, Y^q_s, q_s) ds - int_t^T Z dB^q` under
//! `Q`. All time integrals are left-endpoint sums on the grid.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conjugate::{
    conjugate_yz_with, conjugate_z_with, subgradient_yz_local, subgradient_z_with, ConjugateConfig, ConjugateKind,
    ConjugateTable, Extended,
};
use crate::error::{Error, Result};
use crate::generators::GeneratorSpec;
use crate::paths::{doleans_exponential, reweight_expectation, BrownianEnsemble, ControlArray, WeightProcess};
use crate::regression::{dot, Projection};
use crate::solver::{feature_matrix, implicit_step, step_basis, SolutionField, SolverConfig, TerminalSpec};
use crate::stats::{self, Estimate};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualMode {
    /// Controls `q` only, conjugate in `z`.
    ZOnly,
    /// Controls `(r, q)`, joint conjugate in `(y, z)`.
    Joint,
}

/// Per-path, per-step control values.
#[derive(Clone, Debug)]
pub struct ControlProcess {
    pub id: String,
    /// Discount rates `[path][step]`; `None` means `r = 0` (z-only).
    pub r: Option<Vec<f64>>,
    pub q: ControlArray,
    /// Values at step `m` use information up to `t_m` only.
    pub adapted: bool,
    /// Values at step `m` are functions of `B_{t_m}` alone.
    pub markov: bool,
    pub feedback_rule: Option<String>,
    /// Largest Fenchel residual certified during extraction.
    pub fenchel_residual: Option<f64>,
}

impl ControlProcess {
    pub fn constant(id: impl Into<String>, ens: &BrownianEnsemble, q: &[f64], r: Option<f64>) -> Self {
        let (n, m) = (ens.n_paths, ens.grid.steps);
        ControlProcess {
            id: id.into(),
            r: r.map(|r| vec![r; n * m]),
            q: ControlArray::constant(n, m, q),
            adapted: true,
            markov: true,
            feedback_rule: None,
            fenchel_residual: None,
        }
    }

    /// `q = kappa Z` along a solution, with `r = 0`.
    pub fn feedback(id: impl Into<String>, sol: &SolutionField, kappa: f64) -> Self {
        let (n, m, d) = (sol.n_paths, sol.grid.steps, sol.dim);
        let mut data = vec![0.0; n * m * d];
        data.par_chunks_mut(m * d).enumerate().for_each(|(i, row)| {
            for step in 0..m {
                for (o, z) in row[step * d..(step + 1) * d].iter_mut().zip(sol.z(i, step)) {
                    *o = kappa * z;
                }
            }
        });
        ControlProcess {
            id: id.into(),
            r: None,
            q: ControlArray::new(n, m, d, data).expect("shape"),
            adapted: true,
            markov: true,
            feedback_rule: Some(format!("q = {} Z", tidy(kappa))),
            fenchel_residual: None,
        }
    }

    #[inline]
    pub fn r_at(&self, path: usize, step: usize) -> f64 {
        self.r.as_ref().map_or(0.0, |r| r[path * self.q.steps + step])
    }

    /// `|r| <= beta` (to 1e-6), finite entries, adaptedness flag set.
    pub fn validate(&self, beta: f64, ens: &BrownianEnsemble) -> Result<()> {
        if self.q.n_paths != ens.n_paths || self.q.steps != ens.grid.steps || self.q.dim != ens.dim {
            return Err(Error::invalid(format!("control `{}` does not match the ensemble", self.id)));
        }
        if !self.adapted {
            return Err(Error::invalid(format!("control `{}` is not adapted", self.id)));
        }
        let steps = self.q.steps;
        for i in 0..self.q.n_paths {
            for m in 0..steps {
                if self.q.at(i, m).iter().any(|v| !v.is_finite()) {
                    return Err(Error::InadmissibleControl { path: i, step: m, reason: "q not finite".into() });
                }
                let r = self.r_at(i, m);
                if !r.is_finite() || r.abs() > beta + 1e-6 {
                    return Err(Error::InadmissibleControl {
                        path: i,
                        step: m,
                        reason: format!("|r| = {} exceeds beta = {beta}", r.abs()),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct AdmissibilityFlags {
    /// `E[M_T]` within 5 standard errors of 1.
    pub weight_normalized: bool,
    pub finite_entropy: bool,
    /// `E^Q[int |f(s, r_s, q_s)| ds]` (or `f(s, Y^q_s, q_s)` in z-only mode)
    /// finite.
    pub finite_f_integral: bool,
    /// `E^Q[int |f(s, 0, q_s)| ds]` finite.
    pub finite_f0_integral: bool,
    pub finite_xi: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct DualEvaluation {
    pub control_id: String,
    pub mode: DualMode,
    pub value: f64,
    pub std_error: f64,
    /// `E[M_T ln M_T]`.
    pub entropy: Estimate,
    /// `E^Q[int |q|^2 ds] / 2`.
    pub half_energy: Estimate,
    /// `E[M_T (ln M_T - int |q|^2 ds / 2)]`, zero in expectation.
    pub entropy_identity_gap: Estimate,
    pub f_integral: Estimate,
    pub f0_integral: Estimate,
    pub xi_abs: Estimate,
    pub weight_mean: Estimate,
    pub effective_sample_size: f64,
    pub paths_excluded: usize,
    pub flags: AdmissibilityFlags,
    pub admissible: bool,
    /// Largest conjugate-table interpolation error seen at probe points.
    pub interpolation_error: f64,
}

#[derive(Clone, Debug)]
pub struct DualConfig {
    pub conjugate: ConjugateConfig,
    /// Use interpolated conjugate tables (d = 1, time-homogeneous drivers).
    pub use_tables: bool,
    pub q_step: f64,
    pub r_points: usize,
    pub y_points: usize,
}

impl Default for DualConfig {
    fn default() -> Self {
        DualConfig { conjugate: ConjugateConfig::default(), use_tables: true, q_step: 0.01, r_points: 41, y_points: 401 }
    }
}

/// Conjugate evaluation for a batch of controls: interpolated tables where
/// possible, exact suprema otherwise.
pub struct DualEvaluator<'a> {
    gen: &'a GeneratorSpec,
    cfg: DualConfig,
    joint: Option<ConjugateTable>,
    at_zero: Option<ConjugateTable>,
    z_only: Option<ConjugateTable>,
}

impl<'a> DualEvaluator<'a> {
    pub fn new(gen: &'a GeneratorSpec, cfg: DualConfig) -> Self {
        DualEvaluator { gen, cfg, joint: None, at_zero: None, z_only: None }
    }

    fn tables_enabled(&self) -> bool {
        self.cfg.use_tables && self.gen.dim == 1 && self.gen.time_homogeneous
    }

    fn q_range(&self, lo: f64, hi: f64) -> (f64, f64) {
        let pad = 2.0 * self.cfg.q_step;
        (lo - pad, hi + pad)
    }

    fn covers(t: &Option<ConjugateTable>, a: f64, q: (f64, f64)) -> bool {
        t.as_ref().is_some_and(|t| t.lookup(a, q.0).is_some() && t.lookup(a, q.1).is_some())
    }

    /// Tabulates `f(r, q)` and `f(0, q)` for `q` in `[lo, hi]`.
    pub fn prepare_joint(&mut self, lo: f64, hi: f64) -> Result<()> {
        if !self.tables_enabled() {
            return Ok(());
        }
        let qr = self.q_range(lo, hi);
        let beta = self.gen.beta();
        if !Self::covers(&self.joint, -beta, qr) || !Self::covers(&self.joint, beta, qr) {
            self.joint = Some(ConjugateTable::build(
                self.gen,
                ConjugateKind::Joint,
                0.0,
                (-beta, beta),
                self.cfg.r_points,
                qr,
                self.cfg.q_step,
                &self.cfg.conjugate,
            )?);
        }
        self.prepare_zero(lo, hi)
    }

    fn prepare_zero(&mut self, lo: f64, hi: f64) -> Result<()> {
        let qr = self.q_range(lo, hi);
        if self.tables_enabled() && !Self::covers(&self.at_zero, 0.0, qr) {
            self.at_zero = Some(ConjugateTable::build(
                self.gen,
                ConjugateKind::ZOnly,
                0.0,
                (0.0, 0.0),
                1,
                qr,
                self.cfg.q_step,
                &self.cfg.conjugate,
            )?);
        }
        Ok(())
    }

    /// Tabulates `f(y, q)` over `y` in `[y_lo, y_hi]` and `f(0, q)`.
    pub fn prepare_z(&mut self, y_lo: f64, y_hi: f64, lo: f64, hi: f64) -> Result<()> {
        if !self.tables_enabled() {
            return Ok(());
        }
        let qr = self.q_range(lo, hi);
        if !Self::covers(&self.z_only, y_lo, qr) || !Self::covers(&self.z_only, y_hi, qr) {
            self.z_only = Some(ConjugateTable::build(
                self.gen,
                ConjugateKind::ZOnly,
                0.0,
                (y_lo, y_hi),
                self.cfg.y_points,
                qr,
                self.cfg.q_step,
                &self.cfg.conjugate,
            )?);
        }
        self.prepare_zero(lo, hi)
    }

    pub fn interpolation_error(&self) -> f64 {
        [&self.joint, &self.at_zero, &self.z_only]
            .iter()
            .filter_map(|t| t.as_ref().map(|t| t.interpolation_error))
            .fold(0.0, f64::max)
    }

    pub fn joint_value(&self, t: f64, r: f64, q: &[f64]) -> Result<Extended> {
        if let (Some(tab), 1) = (&self.joint, q.len()) {
            if let Some(v) = tab.lookup(r, q[0]) {
                return Ok(Extended::Finite(v));
            }
        }
        Ok(conjugate_yz_with(self.gen, t, r, q, &self.cfg.conjugate, None)?.value)
    }

    pub fn z_value(&self, t: f64, y: f64, q: &[f64]) -> Result<f64> {
        if q.len() == 1 {
            let tab = if y == 0.0 { self.at_zero.as_ref().or(self.z_only.as_ref()) } else { self.z_only.as_ref() };
            if let Some(v) = tab.and_then(|tab| tab.lookup(y, q[0])) {
                return Ok(v);
            }
        }
        Ok(conjugate_z_with(self.gen, t, y, q, &self.cfg.conjugate, None)?.value)
    }

    /// See [`evaluate_control_joint`].
    pub fn evaluate_joint(&mut self, ctrl: &ControlProcess, term: &TerminalSpec, ens: &BrownianEnsemble) -> Result<DualEvaluation> {
        ctrl.validate(self.gen.beta(), ens)?;
        let (lo, hi) = ctrl.q.min_max();
        self.prepare_joint(lo, hi)?;
        let w = doleans_exponential(&ctrl.q, ens)?;
        let (n, steps, d) = (ens.n_paths, ens.grid.steps, ens.dim);
        let dt = ens.grid.dt();
        let pos = ens.terminal_positions();
        let this = &*self;
        let per_path: Vec<Result<[f64; 4]>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut disc: f64 = 0.0;
                let (mut acc, mut abs_f, mut abs_f0) = (0.0, 0.0, 0.0);
                for m in 0..steps {
                    let t = ens.grid.node(m);
                    let (r, q) = (ctrl.r_at(i, m), ctrl.q.at(i, m));
                    let f = match this.joint_value(t, r, q)? {
                        Extended::Finite(v) => v,
                        Extended::PosInfinity => {
                            return Err(Error::InadmissibleControl {
                                path: i,
                                step: m,
                                reason: format!("joint conjugate is +inf at r={r}, q={q:?}"),
                            })
                        }
                    };
                    acc += (-disc).exp() * f * dt;
                    abs_f += f.abs() * dt;
                    abs_f0 += this.z_value(t, 0.0, q)?.abs() * dt;
                    disc += r * dt;
                }
                let xi = term.eval(&pos[i * d..(i + 1) * d]);
                Ok([(-disc).exp() * xi + acc, abs_f, abs_f0, xi.abs()])
            })
            .collect();
        let rows = collect_rows(per_path)?;
        finish(self, ctrl, DualMode::Joint, &w, ens, &rows, None)
    }

    /// See [`evaluate_control_z`].
    pub fn evaluate_z(
        &mut self,
        ctrl: &ControlProcess,
        term: &TerminalSpec,
        ens: &BrownianEnsemble,
        solver: &SolverConfig,
    ) -> Result<DualEvaluation> {
        solver.validate()?;
        ctrl.validate(self.gen.beta(), ens)?;
        if !ctrl.markov {
            return Err(Error::invalid(format!(
                "control `{}` is not Markov in B; the regression scheme needs q_m = q(t_m, B_m)",
                ctrl.id
            )));
        }
        let (n, steps, d) = (ens.n_paths, ens.grid.steps, ens.dim);
        let dt = ens.grid.dt();
        let mut pos = ens.terminal_positions();
        let xi: Vec<f64> = pos.chunks(d).map(|b| term.eval(b)).collect();
        let (xlo, xhi) = xi.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let pad = 0.5 * (xhi - xlo) + 1.0;
        let (qlo, qhi) = ctrl.q.min_max();
        self.prepare_z(xlo - pad, xhi + pad, qlo, qhi)?;
        let w = doleans_exponential(&ctrl.q, ens)?;
        let mut y_next = xi.clone();
        let mut f_sum = vec![0.0; n];
        let mut abs_f = vec![0.0; n];
        let mut abs_f0 = vec![0.0; n];
        let this = &*self;
        for m in (0..steps).rev() {
            let t = ens.grid.node(m);
            pos.par_chunks_mut(d).enumerate().for_each(|(i, b)| {
                for (bk, dk) in b.iter_mut().zip(ens.increment(i, m)) {
                    *bk -= dk;
                }
            });
            let basis = step_basis(&solver.basis, d, m)?;
            let width = basis.len();
            let feats = feature_matrix(&basis, &pos, d, t);
            let proj = Projection::fit(&feats, width, m)?;
            // One-step likelihood ratio turns E^Q[. | F_m] into E[rho . | F_m].
            let coef = proj
                .solve(&feats, 1, |i, out| {
                    let q = ctrl.q.at(i, m);
                    let db = ens.increment(i, m);
                    let qdb: f64 = q.iter().zip(db).map(|(a, b)| a * b).sum();
                    let qq: f64 = q.iter().map(|a| a * a).sum();
                    out[0] = (qdb - 0.5 * qq * dt).exp() * y_next[i];
                })
                .pop()
                .unwrap();
            let solved: Vec<Result<(f64, f64, f64)>> = feats
                .par_chunks(width)
                .enumerate()
                .map(|(i, f)| {
                    let rhs = dot(&coef, f);
                    let q = ctrl.q.at(i, m);
                    let failure = std::cell::Cell::new(None);
                    let neg_f = |y: f64| match this.z_value(t, y, q) {
                        Ok(v) => -v,
                        Err(e) => {
                            let prev = failure.take();
                            failure.set(prev.or(Some(e.to_string())));
                            f64::NAN
                        }
                    };
                    let w0 = 2.0 * dt * neg_f(rhs).abs() + 1.0;
                    let s = implicit_step(neg_f, rhs, dt, w0, &solver.picard).map_err(|residual| {
                        match failure.take() {
                            Some(reason) => Error::InadmissibleControl { path: i, step: m, reason },
                            None => Error::PicardDivergence { step: m, residual },
                        }
                    })?;
                    let fy = this.z_value(t, s.y, q).map_err(|e| Error::AtPoint { path: i, step: m, source: Box::new(e) })?;
                    let f0 = this.z_value(t, 0.0, q).map_err(|e| Error::AtPoint { path: i, step: m, source: Box::new(e) })?;
                    Ok((s.y, fy, f0))
                })
                .collect();
            let mut ys = Vec::with_capacity(n);
            for (i, r) in solved.into_iter().enumerate() {
                let (y, fy, f0) = r?;
                ys.push(y);
                f_sum[i] += fy * dt;
                abs_f[i] += fy.abs() * dt;
                abs_f0[i] += f0.abs() * dt;
            }
            y_next = ys;
        }
        let value = y_next[0];
        let rows: Vec<[f64; 4]> = (0..n).map(|i| [xi[i] + f_sum[i], abs_f[i], abs_f0[i], xi[i].abs()]).collect();
        finish(self, ctrl, DualMode::ZOnly, &w, ens, &rows, Some(value))
    }
}

fn collect_rows(per_path: Vec<Result<[f64; 4]>>) -> Result<Vec<[f64; 4]>> {
    per_path.into_iter().collect()
}

/// Reweights the per-path rows `[X, int|f|, int|f(0,.)|, |xi|]` and fills
/// the admissibility flags. `value` overrides the mean of `X`.
fn finish(
    ev: &DualEvaluator,
    ctrl: &ControlProcess,
    mode: DualMode,
    w: &WeightProcess,
    ens: &BrownianEnsemble,
    rows: &[[f64; 4]],
    value: Option<f64>,
) -> Result<DualEvaluation> {
    let n = ens.n_paths;
    let steps = ens.grid.steps;
    let dt = ens.grid.dt();
    let col = |k: usize| -> Vec<f64> { rows.iter().map(|r| r[k]).collect() };
    let x = reweight_expectation(&col(0), w, steps)?;
    let f_int = reweight_expectation(&col(1), w, steps)?;
    let f0_int = reweight_expectation(&col(2), w, steps)?;
    let xi_abs = reweight_expectation(&col(3), w, steps)?;
    let ones = vec![1.0; n];
    let wm = reweight_expectation(&ones, w, steps)?;
    let logm: Vec<f64> = (0..n).map(|i| w.log_value(i, steps)).collect();
    let half: Vec<f64> = (0..n).map(|i| 0.5 * ctrl.q.energy(i, dt)).collect();
    let gap: Vec<f64> = (0..n).map(|i| logm[i] - half[i]).collect();
    let entropy = reweight_expectation(&logm, w, steps)?.estimate;
    let half_energy = reweight_expectation(&half, w, steps)?.estimate;
    let identity = reweight_expectation(&gap, w, steps)?.estimate;
    let finite = |e: &Estimate| e.mean.is_finite() && e.std_error.is_finite();
    let flags = AdmissibilityFlags {
        weight_normalized: (wm.mean() - 1.0).abs() <= 5.0 * wm.std_error() + 1e-12,
        finite_entropy: finite(&entropy),
        finite_f_integral: finite(&f_int.estimate),
        finite_f0_integral: finite(&f0_int.estimate),
        finite_xi: finite(&xi_abs.estimate),
    };
    let binding = match mode {
        DualMode::Joint => flags.finite_f_integral,
        DualMode::ZOnly => flags.finite_f0_integral,
    };
    let admissible = flags.weight_normalized && flags.finite_entropy && flags.finite_xi && binding && w.excluded.is_empty();
    Ok(DualEvaluation {
        control_id: ctrl.id.clone(),
        mode,
        value: value.unwrap_or(x.mean()),
        std_error: x.std_error(),
        entropy,
        half_energy,
        entropy_identity_gap: identity,
        f_integral: f_int.estimate,
        f0_integral: f0_int.estimate,
        xi_abs: xi_abs.estimate,
        weight_mean: wm.estimate,
        effective_sample_size: wm.effective_sample_size,
        paths_excluded: w.excluded.len(),
        flags,
        admissible,
        interpolation_error: ev.interpolation_error(),
    })
}

/// Joint dual value `Y^{r,q}_0` of a control under `Q = E(q) . P`.
pub fn evaluate_control_joint(
    gen: &GeneratorSpec,
    ctrl: &ControlProcess,
    term: &TerminalSpec,
    ens: &BrownianEnsemble,
    cfg: &DualConfig,
) -> Result<DualEvaluation> {
    DualEvaluator::new(gen, cfg.clone()).evaluate_joint(ctrl, term, ens)
}

/// Z-only dual value `Y^q_0`, by backward regression under `Q`. The
/// control must be Markov in `B`.
pub fn evaluate_control_z(
    gen: &GeneratorSpec,
    ctrl: &ControlProcess,
    term: &TerminalSpec,
    ens: &BrownianEnsemble,
    solver: &SolverConfig,
    cfg: &DualConfig,
) -> Result<DualEvaluation> {
    DualEvaluator::new(gen, cfg.clone()).evaluate_z(ctrl, term, ens, solver)
}

/// Subgradient control along a solution: `q in d_z g(t, Y, Z)` or
/// `(r, q) in d_(y,z) g(t, Y, Z)` at every path and step.
pub fn extract_optimal_control(
    gen: &GeneratorSpec,
    sol: &SolutionField,
    mode: DualMode,
    cfg: &ConjugateConfig,
) -> Result<ControlProcess> {
    let (n, steps, d) = (sol.n_paths, sol.grid.steps, sol.dim);
    let per_path: Vec<Result<(Vec<f64>, Vec<f64>, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut q = Vec::with_capacity(steps * d);
            let mut r = Vec::with_capacity(steps);
            let mut worst: f64 = 0.0;
            for m in 0..steps {
                let t = sol.grid.node(m);
                let (y, z) = (sol.y(i, m), sol.z(i, m));
                let at = |e: Error| Error::AtPoint { path: i, step: m, source: Box::new(e) };
                match mode {
                    DualMode::ZOnly => {
                        let s = subgradient_z_with(gen, t, y, z, cfg).map_err(at)?;
                        worst = worst.max(s.residual);
                        q.extend_from_slice(&s.q);
                    }
                    DualMode::Joint => {
                        let s = subgradient_yz_local(gen, t, y, z, cfg).map_err(at)?;
                        worst = worst.max(s.residual);
                        q.extend_from_slice(&s.q);
                        r.push(s.r);
                    }
                }
            }
            Ok((q, r, worst))
        })
        .collect();
    let mut q = Vec::with_capacity(n * steps * d);
    let mut r = Vec::with_capacity(n * steps);
    let mut worst: f64 = 0.0;
    for p in per_path {
        let (qi, ri, w) = p?;
        q.extend(qi);
        r.extend(ri);
        worst = worst.max(w);
    }
    let (id, rule) = match mode {
        DualMode::ZOnly => ("extracted", "q in d_z g(t, Y, Z)"),
        DualMode::Joint => ("extracted", "(r, q) in d_(y,z) g(t, Y, Z)"),
    };
    Ok(ControlProcess {
        id: id.into(),
        r: (mode == DualMode::Joint).then_some(r),
        q: ControlArray::new(n, steps, d, q)?,
        adapted: true,
        markov: true,
        feedback_rule: Some(rule.into()),
        fenchel_residual: Some(worst),
    })
}

/// Finite control family searched by [`dual_search`]. The extracted
/// subgradient control is always included.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ControlFamily {
    pub mode: DualMode,
    /// Constant `q` values (first component; others zero), with `r = 0`.
    pub constants: Vec<f64>,
    /// Feedback gains `kappa` for `q = kappa Z`, with `r = 0`.
    pub kappas: Vec<f64>,
}

impl Default for ControlFamily {
    fn default() -> Self {
        ControlFamily { mode: DualMode::Joint, constants: stats::linspace(-2.0, 2.0, 21), kappas: stats::linspace(0.0, 2.0, 21) }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DualRow {
    pub control_id: String,
    pub evaluation: Option<DualEvaluation>,
    /// `value - Y_0`.
    pub gap: f64,
    /// `sqrt(se_value^2 + se_Y0^2)`.
    pub combined_se: f64,
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DualSearch {
    pub y0: Estimate,
    pub rows: Vec<DualRow>,
    /// Index of the smallest admissible value.
    pub best: Option<usize>,
    /// `best value - Y_0`.
    pub gap: f64,
    pub extracted: Option<usize>,
}

impl DualSearch {
    pub fn best_row(&self) -> Option<&DualRow> {
        self.best.map(|b| &self.rows[b])
    }

    pub fn extracted_row(&self) -> Option<&DualRow> {
        self.extracted.map(|b| &self.rows[b])
    }

    /// Every evaluated member satisfies `value >= Y_0 - k * combined_se`.
    pub fn weak_duality_holds(&self, k: f64) -> bool {
        self.rows.iter().filter(|r| r.evaluation.is_some()).all(|r| r.gap >= -k * r.combined_se)
    }

    /// Columns: control_id, value, std_error, entropy, f_integral,
    /// admissible, gap.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["control_id", "value", "std_error", "entropy", "f_integral", "admissible", "gap"])?;
        for r in &self.rows {
            match &r.evaluation {
                Some(e) => w.write_record([
                    r.control_id.clone(),
                    format!("{}", e.value),
                    format!("{}", e.std_error),
                    format!("{}", e.entropy.mean),
                    format!("{}", e.f_integral.mean),
                    format!("{}", e.admissible),
                    format!("{}", r.gap),
                ])?,
                None => w.write_record([r.control_id.as_str(), "NaN", "NaN", "NaN", "NaN", "false", "NaN"])?,
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Evaluates every member of `family` plus the extracted subgradient
/// control and reports the smallest admissible value against `Y_0`.
pub fn dual_search(
    gen: &GeneratorSpec,
    term: &TerminalSpec,
    ens: &BrownianEnsemble,
    sol: &SolutionField,
    family: &ControlFamily,
    solver: &SolverConfig,
    cfg: &DualConfig,
) -> Result<DualSearch> {
    let y0 = sol.y0();
    let d = ens.dim;
    let mut members: Vec<Result<ControlProcess>> = Vec::new();
    for &c in &family.constants {
        let mut q = vec![0.0; d];
        q[0] = c;
        let r = (family.mode == DualMode::Joint).then_some(0.0);
        members.push(Ok(ControlProcess::constant(format!("const(q={})", tidy(c)), ens, &q, r)));
    }
    for &k in &family.kappas {
        let mut ctrl = ControlProcess::feedback(format!("feedback(kappa={})", tidy(k)), sol, k);
        if family.mode == DualMode::Joint {
            ctrl.r = Some(vec![0.0; ens.n_paths * ens.grid.steps]);
        }
        members.push(Ok(ctrl));
    }
    members.push(extract_optimal_control(gen, sol, family.mode, &cfg.conjugate));
    let mut ev = DualEvaluator::new(gen, cfg.clone());
    // One table for the whole family.
    let (lo, hi) = members
        .iter()
        .filter_map(|m| m.as_ref().ok())
        .map(|m| m.q.min_max())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (l, h)| (a.min(l), b.max(h)));
    if lo.is_finite() && family.mode == DualMode::Joint {
        ev.prepare_joint(lo, hi)?;
    }
    let last = members.len() - 1;
    let mut rows = Vec::with_capacity(members.len());
    for (k, member) in members.into_iter().enumerate() {
        let (id, result) = match member {
            Ok(ctrl) => {
                let e = match family.mode {
                    DualMode::Joint => ev.evaluate_joint(&ctrl, term, ens),
                    DualMode::ZOnly => ev.evaluate_z(&ctrl, term, ens, solver),
                };
                (ctrl.id, e)
            }
            Err(e) => (if k == last { "extracted".into() } else { format!("member-{k}") }, Err(e)),
        };
        match result {
            Ok(e) => {
                let combined = (e.std_error.powi(2) + y0.std_error.powi(2)).sqrt();
                let gap = e.value - y0.mean;
                let skipped = (!e.admissible).then(|| "admissibility flags failed".to_string());
                rows.push(DualRow { control_id: id, evaluation: Some(e), gap, combined_se: combined, skipped });
            }
            Err(err) => rows.push(DualRow {
                control_id: id,
                evaluation: None,
                gap: f64::NAN,
                combined_se: f64::NAN,
                skipped: Some(err.to_string()),
            }),
        }
    }
    let best = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.evaluation.as_ref().is_some_and(|e| e.admissible))
        .min_by(|a, b| a.1.gap.total_cmp(&b.1.gap))
        .map(|(i, _)| i);
    let extracted = rows.iter().position(|r| r.control_id == "extracted" && r.evaluation.is_some());
    let gap = best.map_or(f64::NAN, |b| rows[b].gap);
    Ok(DualSearch { y0, rows, best, gap, extracted })
}

/// Parameter value for ids, with grid round-off removed.
fn tidy(v: f64) -> f64 {
    let r = (v * 1e12).round() / 1e12;
    if r == 0.0 { 0.0 } else { r }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::example_generator;
    use crate::paths::TimeGrid;
    use crate::solver::solve_backward;

    fn ens(n: usize, m: usize, seed: u64) -> BrownianEnsemble {
        BrownianEnsemble::simulate(TimeGrid::new(1.0, m).unwrap(), n, 1, seed, false).unwrap()
    }

    #[test]
    fn constant_control_on_zero_terminal() {
        let g = example_generator("pure_quadratic(1)", 1, 1.0).unwrap();
        let e = ens(20_000, 10, 5);
        let c = ControlProcess::constant("c", &e, &[0.8], Some(0.0));
        let v = evaluate_control_joint(&g, &c, &TerminalSpec::constant(0.0), &e, &DualConfig::default()).unwrap();
        assert!((v.value - 0.32).abs() <= 3.0 * v.std_error, "{v:?}");
        assert!(v.admissible);
    }

    #[test]
    fn r_outside_box_is_inadmissible() {
        let g = example_generator("abs_y(1)", 1, 1.0).unwrap();
        let e = ens(100, 4, 6);
        let c = ControlProcess::constant("c", &e, &[0.0], Some(1.5));
        let err = evaluate_control_joint(&g, &c, &TerminalSpec::constant(0.0), &e, &DualConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InadmissibleControl { .. }));
    }

    #[test]
    fn z_only_ode_reduction() {
        let g = example_generator("3.1.iii", 1, 1.0).unwrap();
        let e = ens(200, 200, 7);
        let q0 = ControlProcess::constant("zero", &e, &[0.0], None);
        let solver = SolverConfig::default();
        let one = evaluate_control_z(&g, &q0, &TerminalSpec::constant(1.0), &e, &solver, &DualConfig::default()).unwrap();
        assert!((one.value - 1.0).abs() < 1e-9);
        // Y' = sqrt(Y - 1) backwards from Y_T = 2: Y_0 = 1 + 1/4.
        let two = evaluate_control_z(&g, &q0, &TerminalSpec::constant(2.0), &e, &solver, &DualConfig::default()).unwrap();
        assert!((two.value - 1.25).abs() < 5e-3, "{}", two.value);
    }

    #[test]
    fn extraction_on_affine_driver() {
        let g = example_generator("affine(1,1)", 1, 1.0).unwrap();
        let e = ens(2000, 5, 8);
        let sol = solve_backward(&g, &"sin".parse().unwrap(), &e, &SolverConfig::default()).unwrap();
        let c = extract_optimal_control(&g, &sol, DualMode::Joint, &ConjugateConfig::default()).unwrap();
        for i in (0..2000).step_by(199) {
            for m in 0..5 {
                assert!((c.r_at(i, m) - 1.0).abs() < 1e-6);
                assert!((c.q.at(i, m)[0] - sol.z(i, m)[0]).abs() < 1e-6);
            }
        }
        assert!(c.fenchel_residual.unwrap() <= 1e-6);
    }

    #[test]
    fn non_markov_control_is_rejected_for_z_mode() {
        let g = example_generator("pure_quadratic(1)", 1, 1.0).unwrap();
        let e = ens(50, 4, 9);
        let mut c = ControlProcess::constant("c", &e, &[0.0], None);
        c.markov = false;
        assert!(evaluate_control_z(&g, &c, &TerminalSpec::constant(0.0), &e, &SolverConfig::default(), &DualConfig::default()).is_err());
    }
}
