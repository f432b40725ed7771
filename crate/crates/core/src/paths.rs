//! Brownian ensembles, Doleans-Dade weights and reweighted expectations.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::stats::{self, Estimate};

/// Uniform grid `t_m = m T / M`, `m = 0..=M`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::invalid("grid needs at least one step"));
        }
        Ok(TimeGrid { horizon, steps })
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    #[inline]
    pub fn node(&self, m: usize) -> f64 {
        if m >= self.steps {
            self.horizon
        } else {
            self.horizon * m as f64 / self.steps as f64
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|m| self.node(m)).collect()
    }

    pub fn refined(&self) -> TimeGrid {
        TimeGrid { horizon: self.horizon, steps: 2 * self.steps }
    }
}

/// `N` paths of `d`-dimensional Brownian increments on a [`TimeGrid`].
///
/// Path `i` draws from its own ChaCha8 stream, so the ensemble does not
/// depend on the number of workers. With antithetic pairing, path `2k+1`
/// is the negation of path `2k` and both share stream `k`.
#[derive(Clone, Debug)]
pub struct BrownianEnsemble {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub dim: usize,
    pub seed: u64,
    pub antithetic: bool,
    /// Number of Brownian-bridge refinements applied since simulation.
    pub refinements: u32,
    increments: Vec<f64>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn refine_seed(seed: u64, level: u32) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(level as u64 + 1)
}

impl BrownianEnsemble {
    pub fn simulate(grid: TimeGrid, n_paths: usize, dim: usize, seed: u64, antithetic: bool) -> Result<Self> {
        if n_paths == 0 || dim == 0 {
            return Err(Error::invalid("ensemble needs N >= 1 and d >= 1"));
        }
        let width = grid.steps * dim;
        let sd = grid.dt().sqrt();
        let mut increments = vec![0.0; n_paths * width];
        increments.par_chunks_mut(width).enumerate().for_each(|(i, row)| {
            let (stream, flip) = if antithetic { ((i / 2) as u64, i % 2 == 1) } else { (i as u64, false) };
            let mut rng = stream_rng(seed, stream);
            let sign = if flip { -1.0 } else { 1.0 };
            for v in row.iter_mut() {
                let x: f64 = StandardNormal.sample(&mut rng);
                *v = sign * sd * x;
            }
        });
        Ok(BrownianEnsemble { grid, n_paths, dim, seed, antithetic, refinements: 0, increments })
    }

    /// Builds an ensemble from raw increments laid out path-major
    /// (`[path][step][component]`).
    pub fn from_increments(grid: TimeGrid, n_paths: usize, dim: usize, seed: u64, increments: Vec<f64>) -> Result<Self> {
        if increments.len() != n_paths * grid.steps * dim {
            return Err(Error::invalid("increment array has the wrong length"));
        }
        Ok(BrownianEnsemble { grid, n_paths, dim, seed, antithetic: false, refinements: 0, increments })
    }

    #[inline]
    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * self.grid.steps + step) * self.dim;
        &self.increments[o..o + self.dim]
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// `B_{t_m}` for every path, laid out `[path][component]`.
    pub fn positions_at(&self, m: usize) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; self.n_paths * d];
        out.par_chunks_mut(d).enumerate().for_each(|(i, b)| {
            for s in 0..m.min(self.grid.steps) {
                for (bk, dk) in b.iter_mut().zip(self.increment(i, s)) {
                    *bk += dk;
                }
            }
        });
        out
    }

    pub fn terminal_positions(&self) -> Vec<f64> {
        self.positions_at(self.grid.steps)
    }

    /// Halves every step by sampling the Brownian bridge midpoint.
    /// The coarse increments are sums of consecutive fine ones, so runs on
    /// the two grids share their terminal values.
    pub fn refine(&self) -> BrownianEnsemble {
        let grid = self.grid.refined();
        let d = self.dim;
        let steps = self.grid.steps;
        let half_sd = 0.5 * self.grid.dt().sqrt();
        let seed = refine_seed(self.seed, self.refinements);
        let antithetic = self.antithetic;
        let mut fine = vec![0.0; self.n_paths * grid.steps * d];
        fine.par_chunks_mut(grid.steps * d).enumerate().for_each(|(i, row)| {
            let (stream, flip) = if antithetic { ((i / 2) as u64, i % 2 == 1) } else { (i as u64, false) };
            let mut rng = stream_rng(seed, stream);
            let sign = if flip { -1.0 } else { 1.0 };
            for m in 0..steps {
                let coarse = self.increment(i, m);
                for k in 0..d {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    let first = 0.5 * coarse[k] + sign * half_sd * x;
                    row[(2 * m) * d + k] = first;
                    row[(2 * m + 1) * d + k] = coarse[k] - first;
                }
            }
        });
        BrownianEnsemble {
            grid,
            n_paths: self.n_paths,
            dim: d,
            seed: self.seed,
            antithetic,
            refinements: self.refinements + 1,
            increments: fine,
        }
    }

    /// Per-component `(mean, variance)` of all increments.
    pub fn increment_moments(&self) -> Vec<(f64, f64)> {
        let d = self.dim;
        let count = self.n_paths * self.grid.steps;
        (0..d)
            .map(|k| {
                let mean = stats::sum_by(count, |j| self.increments[j * d + k]) / count as f64;
                let var = stats::sum_by(count, |j| (self.increments[j * d + k] - mean).powi(2)) / (count - 1).max(1) as f64;
                (mean, var)
            })
            .collect()
    }

    /// Header `(N, M, d, seed)` as little-endian u64, then `T` as f64, then
    /// the increments as little-endian f64 in path-major order.
    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = BufWriter::new(out);
        write_header(&mut w, self.n_paths, self.grid.steps, self.dim, self.seed, self.grid.horizon)?;
        for v in &self.increments {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut r = BufReader::new(input);
        let (n, m, d, seed, horizon) = read_header(&mut r)?;
        let grid = TimeGrid::new(horizon, m).map_err(|e| Error::MalformedEnsemble(e.to_string()))?;
        let len = n
            .checked_mul(m)
            .and_then(|x| x.checked_mul(d))
            .ok_or_else(|| Error::MalformedEnsemble("dimensions overflow".into()))?;
        let increments = read_f64s(&mut r, len)?;
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::MalformedEnsemble("trailing bytes after increments".into()));
        }
        Ok(BrownianEnsemble { grid, n_paths: n, dim: d, seed, antithetic: false, refinements: 0, increments })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(File::open(path)?)
    }
}

pub(crate) fn write_header<W: Write>(w: &mut W, n: usize, m: usize, d: usize, seed: u64, horizon: f64) -> Result<()> {
    for v in [n as u64, m as u64, d as u64, seed] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&horizon.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_header<R: Read>(r: &mut R) -> Result<(usize, usize, usize, u64, f64)> {
    let mut buf = [0u8; 8];
    let mut next = |r: &mut R| -> Result<[u8; 8]> {
        r.read_exact(&mut buf)
            .map_err(|_| Error::MalformedEnsemble("truncated header".into()))?;
        Ok(buf)
    };
    let n = u64::from_le_bytes(next(r)?) as usize;
    let m = u64::from_le_bytes(next(r)?) as usize;
    let d = u64::from_le_bytes(next(r)?) as usize;
    let seed = u64::from_le_bytes(next(r)?);
    let horizon = f64::from_le_bytes(next(r)?);
    if n == 0 || m == 0 || d == 0 {
        return Err(Error::MalformedEnsemble(format!("bad dimensions N={n}, M={m}, d={d}")));
    }
    Ok((n, m, d, seed, horizon))
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, len: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(len);
    let mut buf = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut buf)
            .map_err(|_| Error::MalformedEnsemble("truncated payload".into()))?;
        out.push(f64::from_le_bytes(buf));
    }
    Ok(out)
}

/// Per-path, per-step covectors, laid out `[path][step][component]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlArray {
    pub n_paths: usize,
    pub steps: usize,
    pub dim: usize,
    data: Vec<f64>,
}

impl ControlArray {
    pub fn new(n_paths: usize, steps: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_paths * steps * dim {
            return Err(Error::invalid("control array has the wrong length"));
        }
        Ok(ControlArray { n_paths, steps, dim, data })
    }

    pub fn constant(n_paths: usize, steps: usize, value: &[f64]) -> Self {
        let dim = value.len();
        let mut data = Vec::with_capacity(n_paths * steps * dim);
        for _ in 0..n_paths * steps {
            data.extend_from_slice(value);
        }
        ControlArray { n_paths, steps, dim, data }
    }

    pub fn zeros_like(ens: &BrownianEnsemble) -> Self {
        ControlArray::constant(ens.n_paths, ens.grid.steps, &vec![0.0; ens.dim])
    }

    #[inline]
    pub fn at(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * self.steps + step) * self.dim;
        &self.data[o..o + self.dim]
    }

    #[inline]
    pub fn at_mut(&mut self, path: usize, step: usize) -> &mut [f64] {
        let o = (path * self.steps + step) * self.dim;
        &mut self.data[o..o + self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// `sum_m |q_m|^2 dt` along one path.
    pub fn energy(&self, path: usize, dt: f64) -> f64 {
        let o = path * self.steps * self.dim;
        self.data[o..o + self.steps * self.dim].iter().map(|v| v * v).sum::<f64>() * dt
    }
}

/// `M_{t_m} = E(q)_{t_m}` on every path.
#[derive(Clone, Debug)]
pub struct WeightProcess {
    pub n_paths: usize,
    pub steps: usize,
    /// `[path][m]`, `m = 0..=M`.
    values: Vec<f64>,
    log_values: Vec<f64>,
    /// Paths whose log-weight overflowed; excluded from reweighting.
    pub excluded: Vec<usize>,
}

/// Above this log-weight the exponential is treated as overflowed.
const LOG_WEIGHT_LIMIT: f64 = 700.0;

impl WeightProcess {
    #[inline]
    pub fn value(&self, path: usize, m: usize) -> f64 {
        self.values[path * (self.steps + 1) + m]
    }

    #[inline]
    pub fn log_value(&self, path: usize, m: usize) -> f64 {
        self.log_values[path * (self.steps + 1) + m]
    }

    pub fn terminal(&self, path: usize) -> f64 {
        self.value(path, self.steps)
    }

    pub fn is_excluded(&self, path: usize) -> bool {
        self.excluded.binary_search(&path).is_ok()
    }
}

/// `M_{t_{m+1}} = M_{t_m} exp(q_m . dB_m - |q_m|^2 dt / 2)`, `M_0 = 1`,
/// accumulated in log space.
pub fn doleans_exponential(q: &ControlArray, ens: &BrownianEnsemble) -> Result<WeightProcess> {
    if q.n_paths != ens.n_paths || q.steps != ens.grid.steps || q.dim != ens.dim {
        return Err(Error::invalid("control array does not match the ensemble"));
    }
    let steps = ens.grid.steps;
    let dt = ens.grid.dt();
    let width = steps + 1;
    let mut log_values = vec![0.0; ens.n_paths * width];
    log_values.par_chunks_mut(width).enumerate().for_each(|(i, row)| {
        let mut l = 0.0;
        row[0] = 0.0;
        for m in 0..steps {
            let qm = q.at(i, m);
            let db = ens.increment(i, m);
            let dot: f64 = qm.iter().zip(db).map(|(a, b)| a * b).sum();
            let sq: f64 = qm.iter().map(|a| a * a).sum();
            l += dot - 0.5 * sq * dt;
            row[m + 1] = l;
        }
    });
    let excluded: Vec<usize> = (0..ens.n_paths)
        .filter(|&i| {
            log_values[i * width..(i + 1) * width]
                .iter()
                .any(|&l| !(l <= LOG_WEIGHT_LIMIT))
        })
        .collect();
    let values = log_values.par_iter().map(|&l| l.exp()).collect();
    Ok(WeightProcess { n_paths: ens.n_paths, steps, values, log_values, excluded })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Reweighted {
    pub estimate: Estimate,
    /// `(sum w)^2 / sum w^2`.
    pub effective_sample_size: f64,
    pub paths_used: usize,
    pub paths_excluded: usize,
    /// Effective sample size below 1% of the paths used.
    pub ill_conditioned: bool,
}

impl Reweighted {
    pub fn mean(&self) -> f64 {
        self.estimate.mean
    }

    pub fn std_error(&self) -> f64 {
        self.estimate.std_error
    }
}

/// `E^Q[X] ~ sum_i w_i X_i / N` with `w = M_{t_at}`.
pub fn reweight_expectation(x: &[f64], w: &WeightProcess, at: usize) -> Result<Reweighted> {
    if x.len() != w.n_paths {
        return Err(Error::invalid("sample and weight arrays differ in length"));
    }
    if at > w.steps {
        return Err(Error::invalid(format!("time index {at} beyond the grid")));
    }
    let used: Vec<usize> = (0..w.n_paths).filter(|&i| !w.is_excluded(i)).collect();
    let products: Vec<f64> = used.iter().map(|&i| w.value(i, at) * x[i]).collect();
    let sw = stats::sum_by(used.len(), |k| w.value(used[k], at));
    let sw2 = stats::sum_by(used.len(), |k| w.value(used[k], at).powi(2));
    let ess = if sw2 > 0.0 { sw * sw / sw2 } else { 0.0 };
    Ok(Reweighted {
        estimate: Estimate::from_samples(&products),
        effective_sample_size: ess,
        paths_used: used.len(),
        paths_excluded: w.excluded.len(),
        ill_conditioned: ess < 0.01 * used.len() as f64,
    })
}
