//! Legendre-Fenchel transforms of a driver in `z` and jointly in `(y, z)`,
//! subgradient extraction, and tabulated conjugates.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::generators::{norm, GeneratorSpec};
use crate::optimize::{golden_min, grid_golden_min};

/// A value in `R U {+inf}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Extended {
    Finite(f64),
    PosInfinity,
}

impl Extended {
    pub fn is_finite(self) -> bool {
        matches!(self, Extended::Finite(_))
    }

    /// The finite value, or `f64::INFINITY`.
    pub fn value(self) -> f64 {
        match self {
            Extended::Finite(v) => v,
            Extended::PosInfinity => f64::INFINITY,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConjugateConfig {
    /// Padding added to `|q|/gamma` when sizing the z box.
    pub z_pad: f64,
    pub coarse_points: usize,
    /// Golden-section tolerance; `None` picks 1e-8 for d = 1, 1e-6 otherwise.
    pub refine_tol: Option<f64>,
    pub max_doublings: u32,
    /// Half-width `Y0` of the innermost y box of the joint supremum.
    pub y_box: f64,
    /// Growth of the running supremum between nested y boxes that counts
    /// as divergence.
    pub infinity_jump: f64,
    /// Allowed Fenchel-equality residual of an extracted subgradient.
    pub fenchel_tol: f64,
}

impl Default for ConjugateConfig {
    fn default() -> Self {
        ConjugateConfig {
            z_pad: 1.0,
            coarse_points: 33,
            refine_tol: None,
            max_doublings: 2,
            y_box: 1000.0,
            infinity_jump: 1.0,
            fenchel_tol: 1e-6,
        }
    }
}

impl ConjugateConfig {
    pub fn refine_tol_for(&self, dim: usize) -> f64 {
        self.refine_tol.unwrap_or(if dim == 1 { 1e-8 } else { 1e-6 })
    }
}

#[derive(Clone, Debug)]
pub struct SupZ {
    pub value: f64,
    pub argmax: Vec<f64>,
    /// Half-width of the final z box.
    pub radius: f64,
}

/// `f(t, y, q) = sup_z (q.z - g(t, y, z))`.
pub fn conjugate_z(gen: &GeneratorSpec, t: f64, y: f64, q: &[f64]) -> Result<f64> {
    Ok(conjugate_z_with(gen, t, y, q, &ConjugateConfig::default(), None)?.value)
}

/// As [`conjugate_z`]; `hint` is an extra candidate maximiser, which makes
/// the result never smaller than `q.hint - g(t, y, hint)`.
pub fn conjugate_z_with(
    gen: &GeneratorSpec,
    t: f64,
    y: f64,
    q: &[f64],
    cfg: &ConjugateConfig,
    hint: Option<&[f64]>,
) -> Result<SupZ> {
    if q.len() != gen.dim {
        return Err(Error::invalid(format!("q has length {}, expected {}", q.len(), gen.dim)));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("q must be finite"));
    }
    let gamma = gen.envelope.gamma;
    let mut radius = norm(q) / gamma + cfg.z_pad;
    if let Some(h) = hint {
        radius = radius.max(h.iter().fold(0.0f64, |a, v| a.max(v.abs())) + cfg.z_pad);
    }
    let tol = cfg.refine_tol_for(gen.dim);
    let mut found = None;
    for _ in 0..=cfg.max_doublings {
        let (v, arg, boundary) = if gen.dim == 1 {
            sup_z_1d(gen, t, y, q[0], radius, cfg.coarse_points, tol)
        } else {
            sup_z_nd(gen, t, y, q, radius, cfg.coarse_points, tol, hint)
        };
        if !boundary {
            found = Some((v, arg));
            break;
        }
        radius *= 2.0;
    }
    let (mut value, mut argmax) = found.ok_or_else(|| Error::UnboundedConjugate { t, y, q: q.to_vec() })?;
    if let Some(h) = hint {
        let hv = dot(q, h) - gen.eval(t, y, h);
        if hv > value {
            value = hv;
            argmax = h.to_vec();
        }
    }
    if !value.is_finite() {
        return Err(Error::NonFiniteDriver { t, y, z: argmax, value });
    }
    Ok(SupZ { value, argmax, radius })
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sup_z_1d(gen: &GeneratorSpec, t: f64, y: f64, q: f64, radius: f64, points: usize, tol: f64) -> (f64, Vec<f64>, bool) {
    let mut z1 = [0.0];
    let m = grid_golden_min(
        |z| {
            z1[0] = z;
            -(q * z - gen.eval(t, y, &z1))
        },
        -radius,
        radius,
        points,
        tol,
    );
    (-m.value, vec![m.x], m.at_boundary)
}

#[allow(clippy::too_many_arguments)]
fn sup_z_nd(
    gen: &GeneratorSpec,
    t: f64,
    y: f64,
    q: &[f64],
    radius: f64,
    points: usize,
    tol: f64,
    hint: Option<&[f64]>,
) -> (f64, Vec<f64>, bool) {
    let d = q.len();
    let gamma = gen.envelope.gamma;
    let mut z: Vec<f64> = match hint {
        Some(h) => h.iter().map(|v| v.clamp(-radius, radius)).collect(),
        None => q.iter().map(|v| (v / gamma).clamp(-radius, radius)).collect(),
    };
    let obj = |z: &[f64]| dot(q, z) - gen.eval(t, y, z);
    let mut best = obj(&z);
    let mut boundary = vec![false; d];
    for sweep in 0..60 {
        let before = best;
        for k in 0..d {
            let mut trial = z.clone();
            let m = grid_golden_min(
                |x| {
                    trial[k] = x;
                    -obj(&trial)
                },
                -radius,
                radius,
                if sweep == 0 { points } else { 9 },
                tol,
            );
            boundary[k] = m.at_boundary;
            if -m.value >= best {
                best = -m.value;
                z[k] = m.x;
            }
        }
        if best - before <= tol * (1.0 + best.abs()) && sweep > 0 {
            break;
        }
    }
    (best, z, boundary.iter().any(|&b| b))
}

#[derive(Clone, Debug)]
pub struct JointSup {
    pub value: Extended,
    /// Supremum over each nested y box `[-2^k Y0, 2^k Y0]`, `k = 0, 1, 2`.
    pub box_sups: [f64; 3],
    pub argmax_y: f64,
}

/// `f(t, r, q) = sup_{y, z} (r y + q.z - g(t, y, z))`, or `+inf`.
pub fn conjugate_yz(gen: &GeneratorSpec, t: f64, r: f64, q: &[f64]) -> Result<Extended> {
    Ok(conjugate_yz_with(gen, t, r, q, &ConjugateConfig::default(), None)?.value)
}

pub fn conjugate_yz_with(
    gen: &GeneratorSpec,
    t: f64,
    r: f64,
    q: &[f64],
    cfg: &ConjugateConfig,
    hint: Option<(f64, &[f64])>,
) -> Result<JointSup> {
    if !r.is_finite() {
        return Err(Error::invalid("r must be finite"));
    }
    let tol = cfg.refine_tol_for(gen.dim);
    // Inner supremum in z; an unbounded inner problem makes the whole
    // conjugate infinite.
    let inner = |y: f64, h: Option<&[f64]>| -> Result<Option<f64>> {
        match conjugate_z_with(gen, t, y, q, cfg, h) {
            Ok(s) => Ok(Some(r * y + s.value)),
            Err(Error::UnboundedConjugate { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let mut sups = [f64::NEG_INFINITY; 3];
    let mut arg = 0.0;
    for (k, s) in sups.iter_mut().enumerate() {
        let half = cfg.y_box * (1u64 << k) as f64;
        let mut infinite = false;
        let mut failure = None;
        let m = grid_golden_min(
            |y| match inner(y, None) {
                Ok(Some(v)) => -v,
                Ok(None) => {
                    infinite = true;
                    f64::NEG_INFINITY
                }
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            },
            -half,
            half,
            cfg.coarse_points,
            tol * half.max(1.0),
        );
        if let Some(e) = failure {
            return Err(e);
        }
        if infinite {
            return Ok(JointSup { value: Extended::PosInfinity, box_sups: [f64::INFINITY; 3], argmax_y: m.x });
        }
        *s = -m.value;
        arg = m.x;
    }
    let mut best = sups[2];
    if let Some((hy, hz)) = hint {
        if let Some(v) = inner(hy, Some(hz))? {
            if v > best {
                best = v;
                arg = hy;
            }
        }
    }
    let grows = sups[1] - sups[0] > cfg.infinity_jump && sups[2] - sups[1] > cfg.infinity_jump;
    let value = if grows { Extended::PosInfinity } else { Extended::Finite(best) };
    Ok(JointSup { value, box_sups: sups, argmax_y: arg })
}

#[derive(Clone, Debug, Serialize)]
pub struct Subgradient {
    pub q: Vec<f64>,
    /// `f(q) - (q.z - g)`, nonnegative by construction.
    pub residual: f64,
}

/// An element of `d_z g(t, y, z)`.
pub fn subgradient_z(gen: &GeneratorSpec, t: f64, y: f64, z: &[f64]) -> Result<Vec<f64>> {
    Ok(subgradient_z_with(gen, t, y, z, &ConjugateConfig::default())?.q)
}

fn z_residual(gen: &GeneratorSpec, t: f64, y: f64, z: &[f64], g: f64, q: &[f64], cfg: &ConjugateConfig) -> Result<f64> {
    let f = conjugate_z_with(gen, t, y, q, cfg, Some(z))?.value;
    Ok((f - (dot(q, z) - g)).max(0.0))
}

/// Central differences first; at kinks the one-sided quotients, then a
/// golden search on the Fenchel residual between them.
pub fn subgradient_z_with(gen: &GeneratorSpec, t: f64, y: f64, z: &[f64], cfg: &ConjugateConfig) -> Result<Subgradient> {
    if z.len() != gen.dim {
        return Err(Error::invalid(format!("z has length {}, expected {}", z.len(), gen.dim)));
    }
    let d = z.len();
    let h = 1e-6 * (1.0 + norm(z));
    let g = gen.eval(t, y, z);
    if !g.is_finite() {
        return Err(Error::NonFiniteDriver { t, y, z: z.to_vec(), value: g });
    }
    let mut fwd = vec![0.0; d];
    let mut bwd = vec![0.0; d];
    let mut e = z.to_vec();
    for k in 0..d {
        e[k] = z[k] + h;
        let gp = gen.eval(t, y, &e);
        e[k] = z[k] - h;
        let gm = gen.eval(t, y, &e);
        e[k] = z[k];
        fwd[k] = (gp - g) / h;
        bwd[k] = (g - gm) / h;
    }
    let central: Vec<f64> = fwd.iter().zip(&bwd).map(|(a, b)| 0.5 * (a + b)).collect();
    let tol = cfg.fenchel_tol;
    let res_c = z_residual(gen, t, y, z, g, &central, cfg)?;
    if res_c <= tol {
        return Ok(Subgradient { q: central, residual: res_c });
    }
    // One-sided choices per coordinate.
    let mut best = (central.clone(), res_c);
    let mut second = best.clone();
    for mask in 0..(1u32 << d) {
        let cand: Vec<f64> = (0..d).map(|k| if mask >> k & 1 == 1 { fwd[k] } else { bwd[k] }).collect();
        let res = z_residual(gen, t, y, z, g, &cand, cfg)?;
        if res < best.1 {
            second = std::mem::replace(&mut best, (cand, res));
        } else if res < second.1 || second.0 == best.0 {
            second = (cand, res);
        }
    }
    if best.1 <= tol {
        return Ok(Subgradient { q: best.0, residual: best.1 });
    }
    let (a, b) = (fwd.clone(), bwd.clone());
    let mix = |lam: f64| -> Vec<f64> { a.iter().zip(&b).map(|(x, y)| lam * x + (1.0 - lam) * y).collect() };
    let mut err = None;
    let (lam, res) = golden_min(
        |lam| match z_residual(gen, t, y, z, g, &mix(lam), cfg) {
            Ok(r) => r,
            Err(e) => {
                err.get_or_insert(e);
                f64::INFINITY
            }
        },
        0.0,
        1.0,
        1e-10,
    );
    if res <= tol {
        return Ok(Subgradient { q: mix(lam), residual: res });
    }
    if let Some(e) = err {
        return Err(e);
    }
    Err(Error::SubgradientExtraction { t, y, z: z.to_vec(), residual: best.1.min(res) })
}

#[derive(Clone, Debug, Serialize)]
pub struct JointSubgradient {
    pub r: f64,
    pub q: Vec<f64>,
    pub residual: f64,
}

/// An element `(r, q)` of `d_{(y,z)} g(t, y, z)`, certified by the joint
/// Fenchel equality.
pub fn subgradient_yz(gen: &GeneratorSpec, t: f64, y: f64, z: &[f64]) -> Result<(f64, Vec<f64>)> {
    let s = subgradient_yz_with(gen, t, y, z, &ConjugateConfig::default())?;
    Ok((s.r, s.q))
}

fn y_quotients(gen: &GeneratorSpec, t: f64, y: f64, z: &[f64]) -> (f64, f64, f64) {
    let h = 1e-6 * (1.0 + y.abs());
    let g = gen.eval(t, y, z);
    let fwd = (gen.eval(t, y + h, z) - g) / h;
    let bwd = (g - gen.eval(t, y - h, z)) / h;
    (0.5 * (fwd + bwd), fwd, bwd)
}

fn clamp_r(r: f64, beta: f64) -> f64 {
    if r.abs() > beta && r.abs() <= beta + 1e-6 {
        r.clamp(-beta, beta)
    } else {
        r
    }
}

pub fn subgradient_yz_with(gen: &GeneratorSpec, t: f64, y: f64, z: &[f64], cfg: &ConjugateConfig) -> Result<JointSubgradient> {
    let sz = subgradient_z_with(gen, t, y, z, cfg)?;
    let q = sz.q;
    let g = gen.eval(t, y, z);
    let beta = gen.envelope.beta;
    let residual = |r: f64| -> Result<f64> {
        let f = conjugate_yz_with(gen, t, r, &q, cfg, Some((y, z)))?.value.value();
        Ok((f - (r * y + dot(&q, z) - g)).max(0.0))
    };
    let (rc, rf, rb) = y_quotients(gen, t, y, z);
    let mut best = (clamp_r(rc, beta), f64::INFINITY);
    for r in [rc, rf, rb] {
        let r = clamp_r(r, beta);
        let res = residual(r)?;
        if res < best.1 {
            best = (r, res);
        }
        if res <= cfg.fenchel_tol {
            return Ok(JointSubgradient { r, q, residual: res });
        }
    }
    let (lo, hi) = (clamp_r(rb.min(rf), beta), clamp_r(rb.max(rf), beta));
    let mut err = None;
    let (r, res) = golden_min(
        |r| match residual(r) {
            Ok(v) => v,
            Err(e) => {
                err.get_or_insert(e);
                f64::INFINITY
            }
        },
        lo,
        hi,
        1e-10,
    );
    if res <= cfg.fenchel_tol {
        return Ok(JointSubgradient { r, q, residual: res });
    }
    if let Some(e) = err {
        return Err(e);
    }
    Err(Error::SubgradientExtraction { t, y, z: z.to_vec(), residual: best.1.min(res) })
}

/// Joint subgradient certified locally, for bulk extraction along a
/// solution.
///
/// The z part is certified exactly by the z-conjugate. For the y part,
/// `F(y') = r y' + f(t, y', q)` is concave when `g` is jointly convex, so
/// `F(y +- delta) <= F(y)` makes `y` a global maximiser; the residual is
/// the z residual plus any increase of `F` at `y +- delta`.
pub fn subgradient_yz_local(
    gen: &GeneratorSpec,
    t: f64,
    y: f64,
    z: &[f64],
    cfg: &ConjugateConfig,
) -> Result<JointSubgradient> {
    let sz = subgradient_z_with(gen, t, y, z, cfg)?;
    let q = sz.q;
    let beta = gen.envelope.beta;
    let delta = 1e-3 * (1.0 + y.abs());
    let f_at = |yy: f64| -> Result<f64> { Ok(conjugate_z_with(gen, t, yy, &q, cfg, Some(z))?.value) };
    let (f0, fp, fm) = (sz.residual + dot(&q, z) - gen.eval(t, y, z), f_at(y + delta)?, f_at(y - delta)?);
    let local = |r: f64| -> f64 {
        let base = r * y + f0;
        sz.residual + (r * (y + delta) + fp - base).max(0.0).max(r * (y - delta) + fm - base)
    };
    let (rc, rf, rb) = y_quotients(gen, t, y, z);
    let mut best = (clamp_r(rc, beta), f64::INFINITY);
    for r in [rc, rf, rb] {
        let r = clamp_r(r, beta);
        let res = local(r);
        if res < best.1 {
            best = (r, res);
        }
        if res <= cfg.fenchel_tol {
            return Ok(JointSubgradient { r, q, residual: res });
        }
    }
    let (lo, hi) = (clamp_r(rb.min(rf), beta), clamp_r(rb.max(rf), beta));
    let (r, res) = golden_min(local, lo, hi, 1e-12);
    if res <= cfg.fenchel_tol {
        return Ok(JointSubgradient { r, q, residual: res });
    }
    Err(Error::SubgradientExtraction { t, y, z: z.to_vec(), residual: best.1.min(res) })
}

// ---------------------------------------------------------------------------
// Tabulation

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ConjugateKind {
    ZOnly,
    Joint,
}

/// Conjugate values on a `(t, a, q)` grid where `a` is `y` (z-only) or `r`
/// (joint).
#[derive(Clone, Debug)]
pub struct ConjugateGrid {
    pub kind: ConjugateKind,
    pub times: Vec<f64>,
    pub first_axis: Vec<f64>,
    pub q_points: Vec<Vec<f64>>,
    values: Vec<Extended>,
    /// Largest z box used by any entry.
    pub sup_box_z: f64,
    /// Outermost y box of the joint supremum.
    pub sup_box_y: Option<f64>,
    pub refine_tol: f64,
}

impl ConjugateGrid {
    pub fn tabulate(
        gen: &GeneratorSpec,
        kind: ConjugateKind,
        times: &[f64],
        first_axis: &[f64],
        q_points: &[Vec<f64>],
        cfg: &ConjugateConfig,
    ) -> Result<Self> {
        if times.is_empty() || first_axis.is_empty() || q_points.is_empty() {
            return Err(Error::invalid("empty conjugate grid"));
        }
        let (na, nq) = (first_axis.len(), q_points.len());
        let total = times.len() * na * nq;
        let entries: Vec<Result<(Extended, f64)>> = (0..total)
            .into_par_iter()
            .map(|idx| {
                let (ti, rest) = (idx / (na * nq), idx % (na * nq));
                let (ai, qi) = (rest / nq, rest % nq);
                let (t, a, q) = (times[ti], first_axis[ai], &q_points[qi]);
                match kind {
                    ConjugateKind::ZOnly => {
                        let s = conjugate_z_with(gen, t, a, q, cfg, None)?;
                        Ok((Extended::Finite(s.value), s.radius))
                    }
                    ConjugateKind::Joint => {
                        let s = conjugate_yz_with(gen, t, a, q, cfg, None)?;
                        Ok((s.value, 0.0))
                    }
                }
            })
            .collect();
        let mut values = Vec::with_capacity(total);
        let mut zbox: f64 = 0.0;
        for e in entries {
            let (v, r) = e?;
            values.push(v);
            zbox = zbox.max(r);
        }
        if kind == ConjugateKind::Joint {
            let qmax = q_points.iter().map(|q| norm(q)).fold(0.0, f64::max);
            zbox = qmax / gen.envelope.gamma + cfg.z_pad;
        }
        Ok(ConjugateGrid {
            kind,
            times: times.to_vec(),
            first_axis: first_axis.to_vec(),
            q_points: q_points.to_vec(),
            values,
            sup_box_z: zbox,
            sup_box_y: (kind == ConjugateKind::Joint).then_some(4.0 * cfg.y_box),
            refine_tol: cfg.refine_tol_for(gen.dim),
        })
    }

    #[inline]
    pub fn value(&self, ti: usize, ai: usize, qi: usize) -> Extended {
        let (na, nq) = (self.first_axis.len(), self.q_points.len());
        self.values[(ti * na + ai) * nq + qi]
    }

    pub fn values(&self) -> &[Extended] {
        &self.values
    }

    /// Midpoint convexity along every q line of finite entries (d = 1) or
    /// consecutive q triples (d > 1). Returns the violating `(t, a, q)`
    /// index triples.
    pub fn convexity_violations(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        let nq = self.q_points.len();
        for ti in 0..self.times.len() {
            for ai in 0..self.first_axis.len() {
                for qi in 1..nq.saturating_sub(1) {
                    let (a, m, b) = (self.value(ti, ai, qi - 1), self.value(ti, ai, qi), self.value(ti, ai, qi + 1));
                    let (Extended::Finite(a), Extended::Finite(m), Extended::Finite(b)) = (a, m, b) else {
                        continue;
                    };
                    let mid: Vec<f64> = self.q_points[qi - 1]
                        .iter()
                        .zip(&self.q_points[qi + 1])
                        .map(|(x, y)| 0.5 * (x + y))
                        .collect();
                    if mid.iter().zip(&self.q_points[qi]).any(|(x, y)| (x - y).abs() > 1e-12 * (1.0 + x.abs())) {
                        continue;
                    }
                    let tol = 1e-9 * (1.0 + a.abs() + b.abs()) + 2.0 * self.refine_tol;
                    if m > 0.5 * (a + b) + tol {
                        out.push((ti, ai, qi));
                    }
                }
            }
        }
        out
    }

    /// CSV columns: t, y_or_r, q (or q0..q{d-1}), value, is_infinite.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let d = self.q_points[0].len();
        let mut header = vec!["t".to_string(), "y_or_r".to_string()];
        if d == 1 {
            header.push("q".into());
        } else {
            header.extend((0..d).map(|k| format!("q{k}")));
        }
        header.push("value".into());
        header.push("is_infinite".into());
        w.write_record(&header)?;
        for (ti, t) in self.times.iter().enumerate() {
            for (ai, a) in self.first_axis.iter().enumerate() {
                for (qi, q) in self.q_points.iter().enumerate() {
                    let v = self.value(ti, ai, qi);
                    let mut rec = vec![format!("{t}"), format!("{a}")];
                    rec.extend(q.iter().map(|x| format!("{x}")));
                    match v {
                        Extended::Finite(x) => {
                            rec.push(format!("{x}"));
                            rec.push("false".into());
                        }
                        Extended::PosInfinity => {
                            rec.push("inf".into());
                            rec.push("true".into());
                        }
                    }
                    w.write_record(&rec)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Uniformly spaced table of a scalar conjugate over `(a, q)` for d = 1,
/// with bilinear interpolation. Used to evaluate conjugates in bulk along
/// Monte Carlo paths.
#[derive(Clone, Debug)]
pub struct ConjugateTable {
    pub kind: ConjugateKind,
    a_lo: f64,
    a_step: f64,
    na: usize,
    q_lo: f64,
    q_step: f64,
    nq: usize,
    values: Vec<f64>,
    /// Largest gap between the table and the exact conjugate seen at cell
    /// midpoints during construction.
    pub interpolation_error: f64,
}

impl ConjugateTable {
    /// Tabulates at time `t` over `a in [a_lo, a_hi]` (`na` nodes, or a single
    /// node when `a_lo == a_hi`) and `q in [q_lo, q_hi]` with spacing at
    /// most `q_step`. Entries equal to `+inf` are stored as infinity.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        gen: &GeneratorSpec,
        kind: ConjugateKind,
        t: f64,
        a_range: (f64, f64),
        na: usize,
        q_range: (f64, f64),
        q_step: f64,
        cfg: &ConjugateConfig,
    ) -> Result<Self> {
        if gen.dim != 1 {
            return Err(Error::invalid("conjugate tables support d = 1 only"));
        }
        let (a_lo, a_hi) = a_range;
        let na = if a_hi > a_lo { na.max(2) } else { 1 };
        let a_step = if na > 1 { (a_hi - a_lo) / (na - 1) as f64 } else { 1.0 };
        let (q_lo, q_hi) = q_range;
        let nq = (((q_hi - q_lo) / q_step).ceil() as usize + 1).max(2);
        let q_step = (q_hi - q_lo).max(1e-12) / (nq - 1) as f64;
        let exact = |a: f64, q: f64| -> Result<f64> {
            Ok(match kind {
                ConjugateKind::ZOnly => conjugate_z_with(gen, t, a, &[q], cfg, None)?.value,
                ConjugateKind::Joint => conjugate_yz_with(gen, t, a, &[q], cfg, None)?.value.value(),
            })
        };
        let values: Vec<Result<f64>> = (0..na * nq)
            .into_par_iter()
            .map(|idx| exact(a_lo + a_step * (idx / nq) as f64, q_lo + q_step * (idx % nq) as f64))
            .collect();
        let values: Vec<f64> = values.into_iter().collect::<Result<_>>()?;
        let mut table = ConjugateTable {
            kind,
            a_lo,
            a_step,
            na,
            q_lo,
            q_step,
            nq,
            values,
            interpolation_error: 0.0,
        };
        // Probe a spread of cell midpoints.
        let probes = 16usize;
        let mut worst: f64 = 0.0;
        for k in 0..probes {
            let ai = (k * 7) % table.na.max(1);
            let qi = (k * (table.nq - 1)) / probes;
            let a = if table.na > 1 { a_lo + a_step * (ai.min(table.na - 2) as f64 + 0.5) } else { a_lo };
            let q = q_lo + q_step * (qi as f64 + 0.5);
            let e = exact(a, q)?;
            if let Some(v) = table.lookup(a, q) {
                if e.is_finite() {
                    worst = worst.max((v - e).abs());
                }
            }
        }
        table.interpolation_error = worst;
        Ok(table)
    }

    /// Bilinear interpolation; `None` outside the table or next to an
    /// infinite entry.
    #[inline]
    pub fn lookup(&self, a: f64, q: f64) -> Option<f64> {
        let fq = (q - self.q_lo) / self.q_step;
        if !(fq >= -1e-9 && fq <= (self.nq - 1) as f64 + 1e-9) {
            return None;
        }
        let qi = (fq.floor().max(0.0) as usize).min(self.nq - 2);
        let wq = (fq - qi as f64).clamp(0.0, 1.0);
        let row = |ai: usize| -> f64 {
            let base = ai * self.nq + qi;
            (1.0 - wq) * self.values[base] + wq * self.values[base + 1]
        };
        let v = if self.na == 1 {
            if (a - self.a_lo).abs() > 1e-9 {
                return None;
            }
            row(0)
        } else {
            let fa = (a - self.a_lo) / self.a_step;
            if !(fa >= -1e-9 && fa <= (self.na - 1) as f64 + 1e-9) {
                return None;
            }
            let ai = (fa.floor().max(0.0) as usize).min(self.na - 2);
            let wa = (fa - ai as f64).clamp(0.0, 1.0);
            (1.0 - wa) * row(ai) + wa * row(ai + 1)
        };
        v.is_finite().then_some(v)
    }
}

// ---------------------------------------------------------------------------
// Fenchel's inequality

/// `exp(x) + y (ln y - 1) - x y` for `y > 0`, computed as
/// `y (expm1(u) - u)` with `u = x - ln y` so that it is never negative.
pub fn fenchel_slack(x: f64, y: f64) -> f64 {
    assert!(y > 0.0, "Fenchel's inequality needs y > 0");
    let u = x - y.ln();
    y * (u.exp_m1() - u)
}

/// `x y <= exp(x) + y (ln y - 1)`.
pub fn fenchel_inequality_holds(x: f64, y: f64) -> bool {
    fenchel_slack(x, y) >= 0.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::{example_generator, Envelope, Growth};

    fn quad(gamma: f64) -> GeneratorSpec {
        example_generator(&format!("pure_quadratic({gamma})"), 1, 1.0).unwrap()
    }

    #[test]
    fn quadratic_conjugate_values() {
        assert!((conjugate_z(&quad(2.0), 0.0, 0.0, &[4.0]).unwrap() - 4.0).abs() < 1e-10);
        assert!(conjugate_z(&quad(1.0), 0.0, 0.0, &[0.0]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn example_i_conjugate_matches_brute_force() {
        let g = example_generator("3.1.i", 1, 1.0).unwrap();
        let f = conjugate_z(&g, 0.0, 1.0, &[3.0]).unwrap();
        let brute = (0..=200_000)
            .map(|k| -10.0 + 20.0 * k as f64 / 200_000.0)
            .map(|z| 3.0 * z - g.eval(0.0, 1.0, &[z]))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((brute - 3.5).abs() < 1e-6);
        assert!((f - 3.5).abs() < 1e-10);
    }

    #[test]
    fn linear_growth_in_z_is_unbounded_beyond_slope() {
        let env = Envelope::new(0.0, 0.0, 0.0, 1.0, Growth::zero());
        let g = GeneratorSpec::new("abs", 1, 1.0, env, |_, _, z| 2.0 * z[0].abs()).unwrap();
        assert!(conjugate_z(&g, 0.0, 0.0, &[1.5]).unwrap().abs() < 1e-12);
        assert!(matches!(conjugate_z(&g, 0.0, 0.0, &[3.0]), Err(Error::UnboundedConjugate { .. })));
    }

    #[test]
    fn joint_conjugate_examples() {
        let g = quad(1.0);
        assert!((conjugate_yz(&g, 0.0, 0.0, &[1.0]).unwrap().value() - 0.5).abs() < 1e-10);
        assert_eq!(conjugate_yz(&g, 0.0, 0.1, &[1.0]).unwrap(), Extended::PosInfinity);
        let a = example_generator("abs_y(1)", 1, 1.0).unwrap();
        assert_eq!(conjugate_yz(&a, 0.0, 2.0, &[0.0]).unwrap(), Extended::PosInfinity);
        let v = conjugate_yz(&a, 0.0, 0.5, &[2.0]).unwrap();
        assert!((v.value() - 2.0).abs() < 1e-9, "{v:?}");
    }

    #[test]
    fn subgradient_examples() {
        let g2 = example_generator("pure_quadratic(1)", 2, 1.0).unwrap();
        let q = subgradient_z(&g2, 0.0, 0.0, &[2.0, -1.0]).unwrap();
        assert!((q[0] - 2.0).abs() < 1e-6 && (q[1] + 1.0).abs() < 1e-6);
        let q0 = subgradient_z(&quad(1.0), 0.0, 0.0, &[0.0]).unwrap();
        assert!(q0[0].abs() < 1e-9);
        let g3 = example_generator("3.1.iii", 1, 1.0).unwrap();
        for (y, z) in [(-2.0, 0.7), (0.5, -3.0), (4.0, 1.5)] {
            let q = subgradient_z(&g3, 0.0, y, &[z]).unwrap();
            assert!((q[0] - z).abs() < 1e-6);
        }
    }

    #[test]
    fn subgradient_at_a_z_kink() {
        let env = Envelope::new(0.0, 0.0, 0.0, 1.0, Growth::zero());
        let g = GeneratorSpec::new("kink", 1, 1.0, env, |_, _, z| z[0].abs() + 0.5 * z[0] * z[0]).unwrap();
        let s = subgradient_z_with(&g, 0.0, 0.0, &[0.0], &ConjugateConfig::default()).unwrap();
        assert!(s.q[0].abs() <= 1.0 + 1e-6);
        assert!(s.residual <= 1e-6);
    }

    #[test]
    fn joint_subgradient_examples() {
        let g = example_generator("affine(1,1)", 1, 1.0).unwrap();
        let (r, q) = subgradient_yz(&g, 0.0, 5.0, &[3.0]).unwrap();
        assert!((r - 1.0).abs() < 1e-6 && (q[0] - 3.0).abs() < 1e-6);
        let (r, q) = subgradient_yz(&quad(1.0), 0.0, -2.0, &[0.4]).unwrap();
        assert!(r.abs() < 1e-9 && (q[0] - 0.4).abs() < 1e-6);
        let a = example_generator("abs_y(1)", 1, 1.0).unwrap();
        let s = subgradient_yz_with(&a, 0.0, 0.0, &[1.0], &ConjugateConfig::default()).unwrap();
        assert!(s.r.abs() <= 1.0 + 1e-6);
        let f = conjugate_yz(&a, 0.0, s.r, &s.q).unwrap().value();
        assert!((f - (s.q[0] * 1.0 - a.eval(0.0, 0.0, &[1.0]))).abs() <= 1e-6);
    }

    #[test]
    fn local_joint_certificate_agrees_with_exact() {
        let a = example_generator("abs_y(1)", 1, 1.0).unwrap();
        for (y, z) in [(0.0, 1.0), (2.0, -0.5), (-3.0, 0.25)] {
            let loc = subgradient_yz_local(&a, 0.0, y, &[z], &ConjugateConfig::default()).unwrap();
            let ex = subgradient_yz(&a, 0.0, y, &[z]).unwrap();
            assert!((loc.r - ex.0).abs() < 1e-6 || y == 0.0);
            assert!((loc.q[0] - ex.1[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn grid_csv_and_convexity() {
        let g = example_generator("abs_y(1)", 1, 1.0).unwrap();
        let qs: Vec<Vec<f64>> = crate::stats::linspace(-2.0, 2.0, 9).into_iter().map(|q| vec![q]).collect();
        let grid = ConjugateGrid::tabulate(&g, ConjugateKind::Joint, &[0.0], &[-2.0, 0.0, 0.99, 2.0], &qs, &ConjugateConfig::default())
            .unwrap();
        assert!(grid.convexity_violations().is_empty());
        assert_eq!(grid.value(0, 0, 0), Extended::PosInfinity);
        assert!(grid.value(0, 2, 4).is_finite());
        let mut buf = Vec::new();
        grid.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,y_or_r,q,value,is_infinite\n"));
        assert_eq!(text.lines().count(), 1 + 4 * 9);
    }

    #[test]
    fn table_interpolates_quadratic() {
        let g = quad(1.0);
        let t = ConjugateTable::build(&g, ConjugateKind::Joint, 0.0, (0.0, 0.0), 1, (-3.0, 3.0), 0.01, &ConjugateConfig::default())
            .unwrap();
        for q in [-2.999, -1.234, 0.0, 0.5, 2.71] {
            let v = t.lookup(0.0, q).unwrap();
            assert!((v - 0.5 * q * q).abs() < 2e-5);
        }
        assert!(t.lookup(0.0, 3.5).is_none());
        assert!(t.lookup(0.1, 1.0).is_none());
        assert!(t.interpolation_error < 2e-5);
    }

    #[test]
    fn fenchel_helper() {
        assert!(fenchel_inequality_holds(0.0, 1.0));
        assert_eq!(fenchel_slack(0.0, 1.0), 0.0);
        assert!((fenchel_slack(2.0, 1.0) - (2f64.exp() - 1.0 - 2.0)).abs() < 1e-12);
    }
}
