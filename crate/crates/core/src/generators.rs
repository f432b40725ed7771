//! Drivers `g(t, y, z)`, their growth envelopes, sampled assumption checks and
//! the Lipschitz inf-convolution regularisation.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::optimize::golden_min;
use crate::quadrature::trapezoid;
use crate::stats::linspace;

pub type DriverFn = dyn Fn(f64, f64, &[f64]) -> f64 + Send + Sync;
pub type ScalarFn = dyn Fn(f64) -> f64 + Send + Sync;

/// A deterministic nonnegative coefficient `t -> alpha(t)`.
#[derive(Clone)]
pub struct TimeCoefficient {
    label: String,
    kind: CoefKind,
}

#[derive(Clone)]
enum CoefKind {
    Constant(f64),
    Function(Arc<ScalarFn>),
}

impl TimeCoefficient {
    pub fn constant(c: f64) -> Self {
        TimeCoefficient { label: format!("{c}"), kind: CoefKind::Constant(c) }
    }

    pub fn function(label: impl Into<String>, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        TimeCoefficient { label: label.into(), kind: CoefKind::Function(Arc::new(f)) }
    }

    #[inline]
    pub fn value(&self, t: f64) -> f64 {
        match &self.kind {
            CoefKind::Constant(c) => *c,
            CoefKind::Function(f) => f(t),
        }
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self.kind {
            CoefKind::Constant(c) => Some(c),
            CoefKind::Function(_) => None,
        }
    }

    /// `int_a^b alpha(t) dt`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        match &self.kind {
            CoefKind::Constant(c) => c * (b - a),
            CoefKind::Function(f) => trapezoid(|t| f(t), a, b, 1e-10),
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

impl fmt::Debug for TimeCoefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TimeCoefficient({})", self.label)
    }
}

/// The growth function `phi` of the envelope.
#[derive(Clone)]
pub struct Growth {
    label: String,
    f: Arc<ScalarFn>,
}

impl Growth {
    pub fn new(label: impl Into<String>, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Growth { label: label.into(), f: Arc::new(f) }
    }

    pub fn zero() -> Self {
        Growth::new("0", |_| 0.0)
    }

    pub fn linear(c: f64) -> Self {
        Growth::new(format!("{c}*u"), move |u| c * u)
    }

    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        (self.f)(u)
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

impl fmt::Debug for Growth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Growth({})", self.label)
    }
}

/// Declared constants `(alpha_bar, alpha_under, beta, gamma, phi)`.
#[derive(Clone, Debug)]
pub struct Envelope {
    pub alpha_bar: TimeCoefficient,
    pub alpha_under: TimeCoefficient,
    pub beta: f64,
    pub gamma: f64,
    pub phi: Growth,
}

impl Envelope {
    pub fn new(alpha_bar: f64, alpha_under: f64, beta: f64, gamma: f64, phi: Growth) -> Self {
        Envelope {
            alpha_bar: TimeCoefficient::constant(alpha_bar),
            alpha_under: TimeCoefficient::constant(alpha_under),
            beta,
            gamma,
            phi,
        }
    }
}

#[derive(Clone)]
pub struct GeneratorSpec {
    name: String,
    driver: Arc<DriverFn>,
    pub envelope: Envelope,
    pub horizon: f64,
    pub dim: usize,
    /// The driver does not depend on `t`; lets callers tabulate once.
    pub time_homogeneous: bool,
}

impl fmt::Debug for GeneratorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneratorSpec")
            .field("name", &self.name)
            .field("envelope", &self.envelope)
            .field("horizon", &self.horizon)
            .field("dim", &self.dim)
            .finish()
    }
}

impl GeneratorSpec {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        horizon: f64,
        envelope: Envelope,
        driver: impl Fn(f64, f64, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be at least 1"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
        }
        if !(envelope.beta >= 0.0) {
            return Err(Error::invalid(format!("beta must be nonnegative, got {}", envelope.beta)));
        }
        if !(envelope.gamma > 0.0) {
            return Err(Error::invalid(format!("gamma must be positive, got {}", envelope.gamma)));
        }
        Ok(GeneratorSpec {
            name: name.into(),
            driver: Arc::new(driver),
            envelope,
            horizon,
            dim,
            time_homogeneous: false,
        })
    }

    pub fn time_homogeneous(mut self, yes: bool) -> Self {
        self.time_homogeneous = yes;
        self
    }

    pub fn with_envelope(mut self, envelope: Envelope) -> Self {
        self.envelope = envelope;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn beta(&self) -> f64 {
        self.envelope.beta
    }

    pub fn gamma(&self) -> f64 {
        self.envelope.gamma
    }

    /// Raw driver evaluation without argument checks.
    #[inline]
    pub fn eval(&self, t: f64, y: f64, z: &[f64]) -> f64 {
        (self.driver)(t, y, z)
    }

    pub fn evaluate(&self, t: f64, y: f64, z: &[f64]) -> Result<f64> {
        let eps = 1e-12 * self.horizon;
        if !(t >= -eps && t <= self.horizon + eps) {
            return Err(Error::invalid(format!("t={t} outside [0, {}]", self.horizon)));
        }
        if z.len() != self.dim {
            return Err(Error::invalid(format!("z has length {}, expected {}", z.len(), self.dim)));
        }
        let value = self.eval(t, y, z);
        if !value.is_finite() {
            return Err(Error::NonFiniteDriver { t, y, z: z.to_vec(), value });
        }
        Ok(value)
    }

    /// Envelope invariants that fail on a sample of arguments: `phi(0) = 0`,
    /// `phi` nondecreasing, coefficients nonnegative and integrable.
    pub fn envelope_issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        let env = &self.envelope;
        let phi0 = env.phi.eval(0.0);
        if phi0 != 0.0 {
            out.push(format!("phi(0) = {phi0}, expected 0"));
        }
        let us = linspace(0.0, 50.0, 501);
        for w in us.windows(2) {
            let (a, b) = (env.phi.eval(w[0]), env.phi.eval(w[1]));
            if b < a || !a.is_finite() {
                out.push(format!("phi not nondecreasing near u={}", w[0]));
                break;
            }
        }
        for (name, c) in [("alpha_bar", &env.alpha_bar), ("alpha_under", &env.alpha_under)] {
            if linspace(0.0, self.horizon, 65).iter().any(|&t| !(c.value(t) >= 0.0)) {
                out.push(format!("{name} negative or non-finite on [0, T]"));
            }
            if !c.integral(0.0, self.horizon).is_finite() {
                out.push(format!("{name} not integrable on [0, T]"));
            }
        }
        out
    }
}

pub fn evaluate(gen: &GeneratorSpec, t: f64, y: f64, z: &[f64]) -> Result<f64> {
    gen.evaluate(t, y, z)
}

#[inline]
fn half_sq(z: &[f64]) -> f64 {
    0.5 * z.iter().map(|v| v * v).sum::<f64>()
}

#[inline]
pub(crate) fn norm(z: &[f64]) -> f64 {
    z.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Splits `name(a, b)` into the name and its numeric arguments.
pub(crate) fn parse_call(id: &str) -> Option<(String, Vec<f64>)> {
    let id = id.trim();
    match id.find('(') {
        None => Some((id.to_string(), Vec::new())),
        Some(open) => {
            let close = id.rfind(')')?;
            if close < open || close != id.len() - 1 {
                return None;
            }
            let name = id[..open].trim().to_string();
            let inner = id[open + 1..close].trim();
            if inner.is_empty() {
                return Some((name, Vec::new()));
            }
            let args: std::result::Result<Vec<f64>, _> = inner
                .split(',')
                .map(|s| {
                    let s = s.trim();
                    let s = s.split_once('=').map(|(_, v)| v.trim()).unwrap_or(s);
                    s.parse::<f64>()
                })
                .collect();
            Some((name, args.ok()?))
        }
    }
}

/// Built-in drivers.
///
/// Accepted ids: `3.1.i`, `3.1.ii`, `3.1.iii`, `pure_quadratic(gamma)`,
/// `linear(beta)`, `affine(beta, gamma)`, `abs_y(beta)`, `zero`.
pub fn example_generator(id: &str, dim: usize, horizon: f64) -> Result<GeneratorSpec> {
    let unknown = || Error::UnknownGenerator(id.to_string());
    let (name, args) = parse_call(id).ok_or_else(unknown)?;
    let arg = |k: usize| -> Result<f64> { args.get(k).copied().ok_or_else(unknown) };
    let spec = match name.as_str() {
        "3.1.i" | "example-3-1-i" => {
            let phi = Growth::new("u^2+sqrt(u)", |u: f64| u * u + u.sqrt());
            GeneratorSpec::new(id, dim, horizon, Envelope::new(1.0, 1.0, 1.0, 1.0, phi), |_, y, z| {
                let h = if y >= 0.0 { y.sqrt() } else { -y * y };
                h + half_sq(z)
            })?
        }
        "3.1.ii" | "example-3-1-ii" => {
            let phi = Growth::new("e^u+cbrt(u)+u^3", |u: f64| u.exp() + u.cbrt() + u.powi(3));
            GeneratorSpec::new(id, dim, horizon, Envelope::new(2.0, 2.0, 1.0, 1.0, phi), |_, y, z| {
                let h = if y >= 0.0 { y.exp() } else { y.cbrt() + y.powi(3) + 1.0 };
                h + half_sq(z)
            })?
        }
        "3.1.iii" | "example-3-1-iii" => {
            let phi = Growth::new("1+u^3", |u: f64| 1.0 + u.powi(3));
            GeneratorSpec::new(id, dim, horizon, Envelope::new(1.0, 1.0, 1.0, 1.0, phi), |_, y, z| {
                let h = if y >= 1.0 { (y - 1.0).sqrt() } else { (y - 1.0).powi(3) };
                h + half_sq(z)
            })?
        }
        "pure_quadratic" => {
            let gamma = if args.is_empty() { 1.0 } else { arg(0)? };
            if !(gamma > 0.0) {
                return Err(Error::invalid(format!("pure_quadratic needs gamma > 0, got {gamma}")));
            }
            GeneratorSpec::new(
                id,
                dim,
                horizon,
                Envelope::new(0.0, 0.0, 0.0, gamma, Growth::zero()),
                move |_, _, z| gamma * half_sq(z),
            )?
        }
        "linear" => {
            let beta = arg(0)?;
            if !(beta >= 0.0) {
                return Err(Error::invalid(format!("linear needs beta >= 0, got {beta}")));
            }
            GeneratorSpec::new(
                id,
                dim,
                horizon,
                Envelope::new(0.0, 0.0, beta, 1.0, Growth::linear(beta)),
                move |_, y, _| beta * y,
            )?
        }
        "affine" => {
            let (beta, gamma) = (arg(0)?, arg(1)?);
            if !(beta >= 0.0 && gamma > 0.0) {
                return Err(Error::invalid("affine needs beta >= 0 and gamma > 0"));
            }
            GeneratorSpec::new(
                id,
                dim,
                horizon,
                Envelope::new(0.0, 0.0, beta, gamma, Growth::linear(beta)),
                move |_, y, z| beta * y + gamma * half_sq(z),
            )?
        }
        "abs_y" => {
            let beta = arg(0)?;
            if !(beta >= 0.0) {
                return Err(Error::invalid(format!("abs_y needs beta >= 0, got {beta}")));
            }
            GeneratorSpec::new(
                id,
                dim,
                horizon,
                Envelope::new(0.0, 0.0, beta, 1.0, Growth::linear(beta)),
                move |_, y, z| beta * y.abs() + half_sq(z),
            )?
        }
        "zero" => GeneratorSpec::new(
            id,
            dim,
            horizon,
            Envelope::new(0.0, 0.0, 0.0, 1.0, Growth::zero()),
            |_, _, _| 0.0,
        )?,
        _ => return Err(unknown()),
    };
    Ok(spec.time_homogeneous(true))
}

// ---------------------------------------------------------------------------
// Assumption probes

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum AssumptionFamily {
    EX1,
    EX2,
    EX3,
    UN1a,
    UN1b,
    UN2,
    UN2Prime,
    UN3,
    LipschitzYProbe,
}

impl AssumptionFamily {
    pub const ALL: [AssumptionFamily; 9] = [
        AssumptionFamily::EX1,
        AssumptionFamily::EX2,
        AssumptionFamily::EX3,
        AssumptionFamily::UN1a,
        AssumptionFamily::UN1b,
        AssumptionFamily::UN2,
        AssumptionFamily::UN2Prime,
        AssumptionFamily::UN3,
        AssumptionFamily::LipschitzYProbe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AssumptionFamily::EX1 => "EX1",
            AssumptionFamily::EX2 => "EX2",
            AssumptionFamily::EX3 => "EX3",
            AssumptionFamily::UN1a => "UN1a",
            AssumptionFamily::UN1b => "UN1b",
            AssumptionFamily::UN2 => "UN2",
            AssumptionFamily::UN2Prime => "UN2prime",
            AssumptionFamily::UN3 => "UN3",
            AssumptionFamily::LipschitzYProbe => "LIPSCHITZ_Y_PROBE",
        }
    }

    fn is_pointwise(self) -> bool {
        matches!(
            self,
            AssumptionFamily::EX1
                | AssumptionFamily::EX2
                | AssumptionFamily::EX3
                | AssumptionFamily::UN2
                | AssumptionFamily::UN2Prime
        )
    }
}

impl fmt::Display for AssumptionFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AssumptionFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_uppercase().replace(['\'', '-'], "_");
        Ok(match key.as_str() {
            "EX1" => AssumptionFamily::EX1,
            "EX2" => AssumptionFamily::EX2,
            "EX3" => AssumptionFamily::EX3,
            "UN1A" => AssumptionFamily::UN1a,
            "UN1B" => AssumptionFamily::UN1b,
            "UN2" => AssumptionFamily::UN2,
            "UN2PRIME" | "UN2_" => AssumptionFamily::UN2Prime,
            "UN3" => AssumptionFamily::UN3,
            "LIPSCHITZ_Y_PROBE" | "LIPSCHITZ" => AssumptionFamily::LipschitzYProbe,
            _ => return Err(Error::invalid(format!("unknown assumption family `{s}`"))),
        })
    }
}

#[derive(Clone, Debug)]
pub struct ProbeConfig {
    pub t_points: usize,
    pub y_points: usize,
    /// Points per z axis. For `d > 1` the product grid is replaced by
    /// `max_z_grid` seeded uniform samples when it would be larger.
    pub z_points: usize,
    pub y_max: f64,
    pub z_max: f64,
    pub random_pairs: usize,
    pub seed: u64,
    /// Constant `L` for `LIPSCHITZ_Y_PROBE`.
    pub lipschitz_l: f64,
    /// Extra y values added to the grid and used as centres of the
    /// Lipschitz probe.
    pub y_focus: Vec<f64>,
    pub max_z_grid: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            t_points: 64,
            y_points: 129,
            z_points: 129,
            y_max: 8.0,
            z_max: 8.0,
            random_pairs: 10_000,
            seed: 0x5eed,
            lipschitz_l: 1e3,
            y_focus: vec![0.0, 1.0, -1.0],
            max_z_grid: 4096,
        }
    }
}

impl ProbeConfig {
    fn validate(&self) -> Result<()> {
        if self.t_points == 0 || self.y_points == 0 || self.z_points == 0 {
            return Err(Error::invalid("empty probe grid"));
        }
        if !(self.y_max > 0.0) || !(self.z_max > 0.0) {
            return Err(Error::invalid("probe box bounds must be positive"));
        }
        Ok(())
    }

    pub(crate) fn t_grid(&self, horizon: f64) -> Vec<f64> {
        linspace(0.0, horizon, self.t_points)
    }

    pub(crate) fn y_grid(&self) -> Vec<f64> {
        let mut ys = linspace(-self.y_max, self.y_max, self.y_points);
        for &f in &self.y_focus {
            if !ys.contains(&f) {
                ys.push(f);
            }
        }
        ys.sort_by(f64::total_cmp);
        ys
    }

    pub(crate) fn z_set(&self, dim: usize) -> Vec<Vec<f64>> {
        let axis = linspace(-self.z_max, self.z_max, self.z_points);
        if dim == 1 {
            return axis.into_iter().map(|v| vec![v]).collect();
        }
        let total = (self.z_points as f64).powi(dim as i32);
        if total <= self.max_z_grid as f64 {
            let mut out: Vec<Vec<f64>> = vec![Vec::new()];
            for _ in 0..dim {
                out = out
                    .into_iter()
                    .flat_map(|p| {
                        axis.iter().map(move |&v| {
                            let mut q = p.clone();
                            q.push(v);
                            q
                        })
                    })
                    .collect();
            }
            return out;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x7a5e7);
        let mut out: Vec<Vec<f64>> = vec![vec![0.0; dim]];
        for k in 0..dim {
            for &v in &[-self.z_max, self.z_max] {
                let mut e = vec![0.0; dim];
                e[k] = v;
                out.push(e);
            }
        }
        while out.len() < self.max_z_grid {
            out.push((0..dim).map(|_| rng.random_range(-self.z_max..=self.z_max)).collect());
        }
        out
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Witness {
    pub t: f64,
    pub y: f64,
    pub z: Vec<f64>,
    pub y2: Option<f64>,
    pub z2: Option<Vec<f64>>,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    #[serde(skip)]
    score: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AssumptionReport {
    pub family: AssumptionFamily,
    pub passed: bool,
    pub worst_margin: f64,
    /// Worst probe points, most violating first.
    pub witnesses: Vec<Witness>,
    pub probe_count: usize,
    /// Largest `|dg|/|dy|` seen; only for `LIPSCHITZ_Y_PROBE`.
    pub max_ratio: Option<f64>,
}

const KEEP_WITNESSES: usize = 5;

#[derive(Clone, Debug, Default)]
struct Tracker {
    worst: Vec<Witness>,
    worst_margin: f64,
    failed: bool,
    count: usize,
    max_ratio: f64,
}

impl Tracker {
    fn new() -> Self {
        Tracker { worst_margin: f64::NEG_INFINITY, ..Default::default() }
    }

    fn offer(&mut self, w: Witness) {
        self.count += 1;
        let violated = !(w.margin <= tolerance(w.lhs, w.rhs));
        self.failed |= violated;
        if w.margin > self.worst_margin || w.margin.is_nan() {
            self.worst_margin = w.margin;
        }
        if self.worst.len() < KEEP_WITNESSES || w.score > self.worst.last().unwrap().score {
            let pos = self.worst.partition_point(|x| x.score >= w.score);
            self.worst.insert(pos, w);
            self.worst.truncate(KEEP_WITNESSES);
        }
    }

    fn merge(&mut self, other: Tracker) {
        let count = self.count + other.count;
        for w in other.worst {
            self.offer(w);
        }
        self.count = count;
        self.failed |= other.failed;
        if other.worst_margin > self.worst_margin {
            self.worst_margin = other.worst_margin;
        }
        self.max_ratio = self.max_ratio.max(other.max_ratio);
    }

    fn into_report(self, family: AssumptionFamily) -> AssumptionReport {
        AssumptionReport {
            family,
            passed: !self.failed,
            worst_margin: self.worst_margin,
            witnesses: self.worst,
            probe_count: self.count,
            max_ratio: (family == AssumptionFamily::LipschitzYProbe).then_some(self.max_ratio),
        }
    }
}

#[inline]
fn tolerance(lhs: f64, rhs: f64) -> f64 {
    1e-9 * (1.0 + lhs.abs() + rhs.abs())
}

fn witness(t: f64, y: f64, z: &[f64], lhs: f64, rhs: f64) -> Witness {
    let margin = lhs - rhs;
    let score = if margin.is_nan() { f64::INFINITY } else { margin - tolerance(lhs, rhs) };
    Witness { t, y, z: z.to_vec(), y2: None, z2: None, lhs, rhs, margin, score }
}

fn pair_witness(t: f64, a: (f64, &[f64]), b: (f64, &[f64]), lhs: f64, rhs: f64) -> Witness {
    let mut w = witness(t, a.0, a.1, lhs, rhs);
    w.y2 = Some(b.0);
    w.z2 = Some(b.1.to_vec());
    w
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Samples the requested assumption families on the probe grid.
///
/// Every family yields one report. Margins are `lhs - rhs` of the tested
/// inequality; a point fails when its margin exceeds
/// `1e-9 * (1 + |lhs| + |rhs|)`.
pub fn check_assumptions(
    gen: &GeneratorSpec,
    families: &[AssumptionFamily],
    probe: &ProbeConfig,
) -> Result<Vec<AssumptionReport>> {
    probe.validate()?;
    let mut wanted: Vec<AssumptionFamily> = families.to_vec();
    wanted.sort();
    wanted.dedup();

    let pointwise: Vec<AssumptionFamily> = wanted.iter().copied().filter(|f| f.is_pointwise()).collect();
    let mut trackers: std::collections::BTreeMap<AssumptionFamily, Tracker> =
        wanted.iter().map(|&f| (f, Tracker::new())).collect();

    if !pointwise.is_empty() {
        for (fam, tr) in pointwise_scan(gen, &pointwise, probe) {
            trackers.insert(fam, tr);
        }
    }
    for &fam in &wanted {
        let tr = match fam {
            AssumptionFamily::UN1a => Some(scan_un1a(gen, probe)),
            AssumptionFamily::UN1b => Some(scan_convexity(gen, probe, false)),
            AssumptionFamily::UN3 => Some(scan_convexity(gen, probe, true)),
            AssumptionFamily::LipschitzYProbe => Some(scan_lipschitz(gen, probe)),
            _ => None,
        };
        if let Some(tr) = tr {
            trackers.insert(fam, tr);
        }
    }
    Ok(wanted
        .iter()
        .map(|&f| trackers.remove(&f).unwrap().into_report(f))
        .collect())
}

fn pointwise_scan(
    gen: &GeneratorSpec,
    families: &[AssumptionFamily],
    probe: &ProbeConfig,
) -> Vec<(AssumptionFamily, Tracker)> {
    let ts = probe.t_grid(gen.horizon);
    let ys = probe.y_grid();
    let zs = probe.z_set(gen.dim);
    let env = &gen.envelope;
    let (beta, gamma) = (env.beta, env.gamma);
    let per_t: Vec<Vec<Tracker>> = ts
        .par_iter()
        .map(|&t| {
            let mut tr: Vec<Tracker> = families.iter().map(|_| Tracker::new()).collect();
            let (ab, au) = (env.alpha_bar.value(t), env.alpha_under.value(t));
            for z in &zs {
                let q = 0.5 * gamma * z.iter().map(|v| v * v).sum::<f64>();
                let g0 = gen.eval(t, 0.0, z);
                for &y in &ys {
                    let g = gen.eval(t, y, z);
                    let u = y.abs();
                    for (k, fam) in families.iter().enumerate() {
                        let (lhs, rhs) = match fam {
                            AssumptionFamily::EX1 => {
                                (if y > 0.0 { -g } else { 0.0 }, au + beta * u + q)
                            }
                            AssumptionFamily::EX2 => {
                                (if y <= 0.0 { g } else { 0.0 }, ab + beta * u + q)
                            }
                            AssumptionFamily::EX3 => (g.abs(), ab + env.phi.eval(u) + q),
                            AssumptionFamily::UN2 => {
                                (if y > 0.0 { g } else { 0.0 }, ab + beta * u + q)
                            }
                            AssumptionFamily::UN2Prime => {
                                let d = g - g0;
                                let one = (if y > 0.0 { d } else { 0.0 }) - (ab + beta * u);
                                let two = d.abs() - (ab + env.phi.eval(u));
                                if one >= two || two.is_nan() && one.is_nan() {
                                    (if y > 0.0 { d } else { 0.0 }, ab + beta * u)
                                } else {
                                    (d.abs(), ab + env.phi.eval(u))
                                }
                            }
                            _ => unreachable!(),
                        };
                        tr[k].offer(witness(t, y, z, lhs, rhs));
                    }
                }
            }
            tr
        })
        .collect();
    let mut total: Vec<Tracker> = families.iter().map(|_| Tracker::new()).collect();
    for row in per_t {
        for (acc, tr) in total.iter_mut().zip(row) {
            acc.merge(tr);
        }
    }
    families.iter().copied().zip(total).collect()
}

fn random_z(rng: &mut ChaCha8Rng, dim: usize, zmax: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-zmax..=zmax)).collect()
}

fn reduce(parts: Vec<Tracker>) -> Tracker {
    let mut acc = Tracker::new();
    for p in parts {
        acc.merge(p);
    }
    acc
}

fn scan_un1a(gen: &GeneratorSpec, probe: &ProbeConfig) -> Tracker {
    let beta = gen.envelope.beta;
    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed ^ 0x0001);
    let mut pairs: Vec<(f64, f64, f64, Vec<f64>)> = (0..probe.random_pairs)
        .map(|_| {
            let t = rng.random_range(0.0..=gen.horizon);
            let y1 = rng.random_range(-probe.y_max..=probe.y_max);
            let y2 = rng.random_range(-probe.y_max..=probe.y_max);
            (t, y1, y2, random_z(&mut rng, gen.dim, probe.z_max))
        })
        .collect();
    // Neighbouring grid values and close pairs around the focus points.
    let ys = probe.y_grid();
    let ts = linspace(0.0, gen.horizon, probe.t_points.min(5));
    let zs: Vec<Vec<f64>> = sub_sample(&probe.z_set(gen.dim), 9);
    for &t in &ts {
        for z in &zs {
            for w in ys.windows(2) {
                pairs.push((t, w[1], w[0], z.clone()));
            }
            for &c in &probe.y_focus {
                for k in 1..=12 {
                    let d = 10f64.powi(-k);
                    pairs.push((t, c + d, c, z.clone()));
                    pairs.push((t, c, c - d, z.clone()));
                }
            }
        }
    }
    let parts: Vec<Tracker> = pairs
        .par_chunks(256)
        .map(|chunk| {
            let mut tr = Tracker::new();
            for (t, y1, y2, z) in chunk {
                let (g1, g2) = (gen.eval(*t, *y1, z), gen.eval(*t, *y2, z));
                let lhs = -sgn(y1 - y2) * (g1 - g2);
                let rhs = beta * (y1 - y2).abs();
                tr.offer(pair_witness(*t, (*y1, z), (*y2, z), lhs, rhs));
            }
            tr
        })
        .collect();
    reduce(parts)
}

fn sub_sample<T: Clone>(v: &[T], k: usize) -> Vec<T> {
    if v.len() <= k {
        return v.to_vec();
    }
    (0..k).map(|i| v[i * (v.len() - 1) / (k - 1)].clone()).collect()
}

/// Midpoint convexity in z (`joint = false`) or in (y, z) (`joint = true`).
fn scan_convexity(gen: &GeneratorSpec, probe: &ProbeConfig, joint: bool) -> Tracker {
    let salt = if joint { 0x0003 } else { 0x0002 };
    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed ^ salt);
    type Pt = (f64, Vec<f64>);
    let mut pairs: Vec<(f64, Pt, Pt)> = (0..probe.random_pairs)
        .map(|_| {
            let t = rng.random_range(0.0..=gen.horizon);
            let y1 = rng.random_range(-probe.y_max..=probe.y_max);
            let y2 = if joint { rng.random_range(-probe.y_max..=probe.y_max) } else { y1 };
            let z1 = random_z(&mut rng, gen.dim, probe.z_max);
            let z2 = random_z(&mut rng, gen.dim, probe.z_max);
            (t, (y1, z1), (y2, z2))
        })
        .collect();
    // Grid lines: consecutive-but-one nodes, so the midpoint is a grid node.
    let ys = probe.y_grid();
    let ts = linspace(0.0, gen.horizon, probe.t_points.min(5));
    let zs = probe.z_set(gen.dim);
    let zline: Vec<Vec<f64>> = if gen.dim == 1 { zs.clone() } else { sub_sample(&zs, 65) };
    let ysub = sub_sample(&ys, 17);
    for &t in &ts {
        for &y in &ysub {
            for w in zline.windows(3) {
                pairs.push((t, (y, w[0].clone()), (y, w[2].clone())));
            }
        }
        if joint {
            let zsub = sub_sample(&zline, 17);
            for z in &zsub {
                for w in ys.windows(3) {
                    pairs.push((t, (w[0], z.clone()), (w[2], z.clone())));
                }
            }
            for (k, w) in ys.windows(3).enumerate() {
                let z = &zline[k % zline.len()];
                let z2: Vec<f64> = z.iter().map(|v| -v).collect();
                pairs.push((t, (w[0], z.clone()), (w[2], z2)));
            }
        }
    }
    let parts: Vec<Tracker> = pairs
        .par_chunks(256)
        .map(|chunk| {
            let mut tr = Tracker::new();
            for (t, a, b) in chunk {
                let ga = gen.eval(*t, a.0, &a.1);
                let gb = gen.eval(*t, b.0, &b.1);
                let zm: Vec<f64> = a.1.iter().zip(&b.1).map(|(u, v)| 0.5 * (u + v)).collect();
                let gm = gen.eval(*t, 0.5 * (a.0 + b.0), &zm);
                let lhs = gm;
                let rhs = 0.5 * (ga + gb);
                let margin = lhs - rhs;
                let tol = 1e-9 * (1.0 + ga.abs() + gb.abs());
                let mut w = pair_witness(*t, (a.0, &a.1), (b.0, &b.1), lhs, rhs);
                w.score = if margin.is_nan() { f64::INFINITY } else { margin - tol };
                tr.offer_raw(w, margin, margin > tol || margin.is_nan());
            }
            tr
        })
        .collect();
    reduce(parts)
}

impl Tracker {
    /// Records a witness whose pass/fail verdict was decided by the caller.
    fn offer_raw(&mut self, mut w: Witness, margin: f64, violated: bool) {
        self.count += 1;
        self.failed |= violated;
        w.margin = margin;
        if margin > self.worst_margin || margin.is_nan() {
            self.worst_margin = margin;
        }
        if self.worst.len() < KEEP_WITNESSES || w.score > self.worst.last().unwrap().score {
            let pos = self.worst.partition_point(|x| x.score >= w.score);
            self.worst.insert(pos, w);
            self.worst.truncate(KEEP_WITNESSES);
        }
    }
}

fn scan_lipschitz(gen: &GeneratorSpec, probe: &ProbeConfig) -> Tracker {
    let l = probe.lipschitz_l;
    let mut centres = probe.y_grid();
    centres.extend(probe.y_focus.iter().copied());
    centres.sort_by(f64::total_cmp);
    centres.dedup();
    let zs: Vec<Vec<f64>> = {
        let mut v = vec![vec![0.0; gen.dim]];
        v.extend(sub_sample(&probe.z_set(gen.dim), 5));
        v
    };
    let t = 0.0;
    let mut pairs: Vec<(f64, f64, Vec<f64>)> = Vec::new();
    for z in &zs {
        for &c in &centres {
            for k in 1..=12 {
                let d = 10f64.powi(-k);
                pairs.push((c + d, c, z.clone()));
                pairs.push((c, c - d, z.clone()));
            }
        }
    }
    let parts: Vec<Tracker> = pairs
        .par_chunks(256)
        .map(|chunk| {
            let mut tr = Tracker::new();
            for (y1, y2, z) in chunk {
                let dy = (y1 - y2).abs();
                if dy == 0.0 {
                    continue;
                }
                let dg = (gen.eval(t, *y1, z) - gen.eval(t, *y2, z)).abs();
                tr.max_ratio = tr.max_ratio.max(dg / dy);
                let lhs = dg;
                let rhs = l * dy;
                let margin = lhs - rhs;
                let tol = 1e-9 * rhs;
                let mut w = pair_witness(t, (*y1, z), (*y2, z), lhs, rhs);
                w.score = if margin.is_nan() { f64::INFINITY } else { (dg / dy - l) / l };
                tr.offer_raw(w, margin, margin > tol || margin.is_nan());
            }
            tr
        })
        .collect();
    reduce(parts)
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(";")
}

/// CSV columns: family, passed, worst_margin, witness_t, witness_y,
/// witness_z, witness_y2, witness_z2, probe_count, max_ratio.
pub fn write_assumption_csv<W: Write>(reports: &[AssumptionReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "family",
        "passed",
        "worst_margin",
        "witness_t",
        "witness_y",
        "witness_z",
        "witness_y2",
        "witness_z2",
        "probe_count",
        "max_ratio",
    ])?;
    for r in reports {
        let top = r.witnesses.first();
        w.write_record([
            r.family.as_str().to_string(),
            r.passed.to_string(),
            format!("{}", r.worst_margin),
            top.map(|x| format!("{}", x.t)).unwrap_or_default(),
            top.map(|x| format!("{}", x.y)).unwrap_or_default(),
            top.map(|x| fmt_vec(&x.z)).unwrap_or_default(),
            top.and_then(|x| x.y2).map(|v| format!("{v}")).unwrap_or_default(),
            top.and_then(|x| x.z2.as_deref().map(fmt_vec)).unwrap_or_default(),
            r.probe_count.to_string(),
            r.max_ratio.map(|v| format!("{v}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Inf-convolution

#[derive(Clone, Debug)]
pub struct InfConvolutionConfig {
    /// Half-width of the z box the regularised driver is meant for; the v
    /// search box is this plus `n + gamma`.
    pub z_max: f64,
    pub grid_points: usize,
    pub tol: f64,
    pub guard_y_max: f64,
}

impl Default for InfConvolutionConfig {
    fn default() -> Self {
        InfConvolutionConfig { z_max: 10.0, grid_points: 33, tol: 1e-8, guard_y_max: 8.0 }
    }
}

/// `g_n(t, y, z) = inf_v g(t, y, v) + (n + gamma)|z - v|`.
pub fn inf_convolution(gen: &GeneratorSpec, n: u32) -> Result<GeneratorSpec> {
    inf_convolution_with(gen, n, &InfConvolutionConfig::default())
}

pub fn inf_convolution_with(gen: &GeneratorSpec, n: u32, cfg: &InfConvolutionConfig) -> Result<GeneratorSpec> {
    if n == 0 {
        return Err(Error::invalid("inf-convolution order must be positive"));
    }
    if gen.dim > 3 {
        return Err(Error::invalid("inf-convolution refinement supports d <= 3"));
    }
    let lip = n as f64 + gen.envelope.gamma;
    let radius = cfg.z_max + lip;
    guard_inf_convolution(gen, lip, radius, cfg)?;
    let base = gen.clone();
    let (points, tol) = (cfg.grid_points.max(3), cfg.tol);
    let dim = gen.dim;
    let name = format!("inf_conv({}, n={n})", gen.name());
    let spec = GeneratorSpec::new(name, dim, gen.horizon, gen.envelope.clone(), move |t, y, z| {
        if dim == 1 {
            inf_conv_1d(&base, t, y, z[0], lip, radius, points, tol)
        } else {
            inf_conv_nd(&base, t, y, z, lip, radius, points, tol)
        }
    })?;
    Ok(spec.time_homogeneous(gen.time_homogeneous))
}

/// Rejects drivers whose inf-convolution objective still decreases outward
/// at the edge of the search box: there the infimum escapes to -inf.
fn guard_inf_convolution(gen: &GeneratorSpec, lip: f64, radius: f64, cfg: &InfConvolutionConfig) -> Result<()> {
    let ts = [0.0, 0.5 * gen.horizon, gen.horizon];
    let ys = linspace(-cfg.guard_y_max, cfg.guard_y_max, 9);
    let zero = vec![0.0; gen.dim];
    for &t in &ts {
        for &y in &ys {
            for k in 0..gen.dim {
                for s in [-1.0, 1.0] {
                    let obj = |r: f64| {
                        let mut v = zero.clone();
                        v[k] = s * r;
                        gen.eval(t, y, &v) + lip * r
                    };
                    let (near, far) = (obj(radius), obj(2.0 * radius));
                    if !(far >= near - 1e-9 * (1.0 + near.abs())) {
                        return Err(Error::InfConvolutionUnbounded { lipschitz: lip, t, y });
                    }
                }
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn inf_conv_1d(g: &GeneratorSpec, t: f64, y: f64, z: f64, lip: f64, radius: f64, points: usize, tol: f64) -> f64 {
    let mut v1 = [0.0];
    let mut obj = |v: f64| {
        v1[0] = v;
        g.eval(t, y, &v1) + lip * (z - v).abs()
    };
    let at_z = obj(z);
    let lo = (-radius).min(z);
    let hi = radius.max(z);
    let h = (hi - lo) / (points - 1) as f64;
    let mut best = (0usize, f64::INFINITY);
    for k in 0..points {
        let v = if k == points - 1 { hi } else { lo + h * k as f64 };
        let val = obj(v);
        if val < best.1 {
            best = (k, val);
        }
    }
    let node = if best.0 == points - 1 { hi } else { lo + h * best.0 as f64 };
    let a = (node - h).max(lo);
    let b = (node + h).min(hi);
    let (_, refined) = golden_min(&mut obj, a, b, tol);
    at_z.min(best.1).min(refined)
}

#[allow(clippy::too_many_arguments)]
fn inf_conv_nd(g: &GeneratorSpec, t: f64, y: f64, z: &[f64], lip: f64, radius: f64, points: usize, tol: f64) -> f64 {
    let d = z.len();
    let obj = |v: &[f64]| {
        let dist = z.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        g.eval(t, y, v) + lip * dist
    };
    let at_z = obj(z);
    let lo: Vec<f64> = z.iter().map(|&c| (-radius).min(c)).collect();
    let hi: Vec<f64> = z.iter().map(|&c| radius.max(c)).collect();
    let h: Vec<f64> = (0..d).map(|k| (hi[k] - lo[k]) / (points - 1) as f64).collect();
    // Coarse product grid.
    let mut idx = vec![0usize; d];
    let mut v = vec![0.0; d];
    let mut best_v = z.to_vec();
    let mut best = at_z;
    loop {
        for k in 0..d {
            v[k] = lo[k] + h[k] * idx[k] as f64;
        }
        let val = obj(&v);
        if val < best {
            best = val;
            best_v.copy_from_slice(&v);
        }
        let mut k = 0;
        loop {
            idx[k] += 1;
            if idx[k] < points {
                break;
            }
            idx[k] = 0;
            k += 1;
            if k == d {
                break;
            }
        }
        if k == d {
            break;
        }
    }
    // Coordinate-wise golden refinement.
    let mut width: Vec<f64> = h.clone();
    for _sweep in 0..30 {
        let before = best;
        for k in 0..d {
            let centre = best_v[k];
            let mut trial = best_v.clone();
            let (x, val) = golden_min(
                |x| {
                    trial[k] = x;
                    obj(&trial)
                },
                centre - width[k],
                centre + width[k],
                tol,
            );
            if val < best {
                best = val;
                best_v[k] = x;
            }
            width[k] = (width[k] * 0.5).max(tol * 10.0);
        }
        if before - best < 1e-14 * (1.0 + best.abs()) && width.iter().all(|&w| w <= 4.0 * tol * 10.0) {
            break;
        }
    }
    at_z.min(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evaluate_examples() {
        let g = example_generator("3.1.i", 1, 1.0).unwrap();
        assert_eq!(g.evaluate(0.0, 4.0, &[0.0]).unwrap(), 2.0);
        assert_eq!(g.evaluate(0.0, -2.0, &[0.0]).unwrap(), -4.0);
        let q = example_generator("pure_quadratic(1)", 2, 1.0).unwrap();
        assert_eq!(q.evaluate(0.5, 0.0, &[3.0, 4.0]).unwrap(), 12.5);
    }

    #[test]
    fn evaluate_rejects_bad_arguments() {
        let q = example_generator("pure_quadratic(1)", 2, 1.0).unwrap();
        assert!(q.evaluate(0.0, 0.0, &[1.0]).is_err());
        assert!(q.evaluate(1.5, 0.0, &[1.0, 0.0]).is_err());
        let bad = GeneratorSpec::new("log", 1, 1.0, Envelope::new(0.0, 0.0, 0.0, 1.0, Growth::zero()), |_, y, _| {
            y.ln()
        })
        .unwrap();
        match bad.evaluate(0.0, -1.0, &[0.0]) {
            Err(Error::NonFiniteDriver { y, .. }) => assert_eq!(y, -1.0),
            other => panic!("expected driver error, got {other:?}"),
        }
    }

    #[test]
    fn example_ii_envelope() {
        let g = example_generator("3.1.ii", 1, 1.0).unwrap();
        let e = &g.envelope;
        assert_eq!(e.alpha_bar.as_constant(), Some(2.0));
        assert_eq!(e.alpha_under.as_constant(), Some(2.0));
        assert_eq!((e.beta, e.gamma), (1.0, 1.0));
        let u: f64 = 2.0;
        assert!((e.phi.eval(u) - (u.exp() + u.cbrt() + 8.0)).abs() < 1e-12);
        assert_eq!(g.eval(0.0, 0.0, &[0.0]), 1.0);
        assert!((g.eval(0.0, -1.0, &[2.0]) - (-1.0 - 1.0 + 1.0 + 2.0)).abs() < 1e-15);
    }

    #[test]
    fn canonical_envelopes() {
        let q = example_generator("pure_quadratic(1)", 1, 1.0).unwrap();
        assert_eq!((q.beta(), q.gamma()), (0.0, 1.0));
        assert!(q.envelope_issues().is_empty());
        let l = example_generator("linear(1)", 1, 1.0).unwrap();
        assert_eq!(l.beta(), 1.0);
        assert_eq!(l.eval(0.0, 3.0, &[5.0]), 3.0);
        assert_eq!(l.envelope.phi.eval(2.0), 2.0);
        assert!(matches!(example_generator("nope", 1, 1.0), Err(Error::UnknownGenerator(_))));
        assert!(example_generator("pure_quadratic(-1)", 1, 1.0).is_err());
    }

    #[test]
    fn parse_call_forms() {
        assert_eq!(parse_call("affine(1, 2)"), Some(("affine".into(), vec![1.0, 2.0])));
        assert_eq!(parse_call("pure_quadratic(gamma=0.5)"), Some(("pure_quadratic".into(), vec![0.5])));
        assert_eq!(parse_call("zero"), Some(("zero".into(), vec![])));
        assert_eq!(parse_call("bad(1"), None);
    }

    fn small_probe() -> ProbeConfig {
        ProbeConfig { t_points: 4, y_points: 33, z_points: 33, random_pairs: 2000, ..Default::default() }
    }

    #[test]
    fn zero_driver_passes_every_family() {
        let g = example_generator("zero", 1, 1.0).unwrap();
        let reps = check_assumptions(&g, &AssumptionFamily::ALL, &small_probe()).unwrap();
        assert_eq!(reps.len(), 9);
        for r in &reps {
            assert!(r.passed, "{} failed: {:?}", r.family, r.witnesses.first());
        }
    }

    #[test]
    fn empty_probe_is_rejected() {
        let g = example_generator("zero", 1, 1.0).unwrap();
        let p = ProbeConfig { y_points: 0, ..Default::default() };
        assert!(check_assumptions(&g, &[AssumptionFamily::EX1], &p).is_err());
        let p = ProbeConfig { z_max: 0.0, ..Default::default() };
        assert!(check_assumptions(&g, &[AssumptionFamily::EX1], &p).is_err());
    }

    #[test]
    fn failing_family_has_witness() {
        // -y^2 is concave, so joint convexity must fail.
        let g = example_generator("3.1.i", 1, 1.0).unwrap();
        let r = &check_assumptions(&g, &[AssumptionFamily::UN3], &small_probe()).unwrap()[0];
        assert!(!r.passed);
        assert!(!r.witnesses.is_empty());
        assert!(r.worst_margin > 0.0);
    }

    #[test]
    fn reports_are_deterministic() {
        let g = example_generator("3.1.ii", 1, 1.0).unwrap();
        let a = check_assumptions(&g, &AssumptionFamily::ALL, &small_probe()).unwrap();
        let b = check_assumptions(&g, &AssumptionFamily::ALL, &small_probe()).unwrap();
        let mut ca = Vec::new();
        let mut cb = Vec::new();
        write_assumption_csv(&a, &mut ca).unwrap();
        write_assumption_csv(&b, &mut cb).unwrap();
        assert_eq!(ca, cb);
    }

    #[test]
    fn inf_convolution_closed_form() {
        // Oracle: brute-force minimisation on a fine v grid.
        let g = example_generator("pure_quadratic(1)", 1, 1.0).unwrap();
        let g1 = inf_convolution(&g, 1).unwrap();
        for &z in &[-7.5, -3.0, -2.0, -1.3, 0.0, 0.4, 2.0, 2.5, 6.0] {
            let brute = (0..=400_000)
                .map(|k| -20.0 + 40.0 * k as f64 / 400_000.0)
                .map(|v: f64| 0.5 * v * v + 2.0 * (z - v).abs())
                .fold(f64::INFINITY, f64::min);
            let closed = if f64::abs(z) <= 2.0 { 0.5 * z * z } else { 2.0 * f64::abs(z) - 2.0 };
            assert!((brute - closed).abs() < 1e-6);
            let got = g1.eval(0.0, 0.0, &[z]);
            assert!((got - closed).abs() < 1e-10, "z={z}: {got} vs {closed}");
        }
    }

    #[test]
    fn inf_convolution_of_lipschitz_driver_is_identity() {
        let env = Envelope::new(0.0, 0.0, 0.0, 1.0, Growth::zero());
        let g = GeneratorSpec::new("abs", 1, 1.0, env, |_, _, z| 1.5 * z[0].abs()).unwrap();
        let g1 = inf_convolution(&g, 1).unwrap();
        for &z in &[-4.0, -0.3, 0.0, 1.0, 9.0] {
            assert_eq!(g1.eval(0.0, 0.0, &[z]), g.eval(0.0, 0.0, &[z]));
        }
    }

    #[test]
    fn inf_convolution_guard_detects_divergence() {
        let env = Envelope::new(0.0, 0.0, 0.0, 1.0, Growth::zero());
        let g = GeneratorSpec::new("steep", 1, 1.0, env, |_, _, z| -5.0 * z[0].abs()).unwrap();
        assert!(matches!(inf_convolution(&g, 1), Err(Error::InfConvolutionUnbounded { .. })));
    }

    #[test]
    fn inf_convolution_two_dimensional() {
        let g = example_generator("pure_quadratic(1)", 2, 1.0).unwrap();
        let g1 = inf_convolution(&g, 1).unwrap();
        // Radial closed form with L = 2.
        for z in [[0.5, -0.5], [3.0, 4.0], [-1.0, 2.5]] {
            let r = norm(&z);
            let closed = if r <= 2.0 { 0.5 * r * r } else { 2.0 * r - 2.0 };
            let got = g1.eval(0.0, 0.0, &z);
            assert!(got <= 0.5 * r * r);
            assert!((got - closed).abs() < 1e-6, "{z:?}: {got} vs {closed}");
        }
    }
}
