//! Regression bases on Brownian positions and least squares with a shared
//! Gram matrix.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    /// Normalised probabilists' Hermite polynomials, total degree.
    Hermite,
    /// Piecewise-linear hat functions on a uniform knot grid.
    Hat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisConfig {
    pub kind: BasisKind,
    pub degree: usize,
    pub hat_knots: usize,
    /// Knots span `[-hat_range, hat_range]` in standardised units.
    pub hat_range: f64,
    /// Hermite features are evaluated at positions clamped to this many
    /// standard deviations, so fitted values stay flat in the tails.
    #[serde(default = "default_clamp")]
    pub input_clamp: Option<f64>,
}

fn default_clamp() -> Option<f64> {
    Some(3.0)
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig { kind: BasisKind::Hermite, degree: 6, hat_knots: 33, hat_range: 4.0, input_clamp: default_clamp() }
    }
}

/// Feature map `x -> phi(x)` for standardised positions `x = B_t / sqrt(t)`.
#[derive(Clone, Debug)]
pub struct Basis {
    kind: BasisKind,
    dim: usize,
    /// Hermite multi-indices (total degree).
    exponents: Vec<Vec<usize>>,
    knots: Vec<f64>,
    clamp: Option<f64>,
    /// Only the constant function.
    constant: bool,
}

fn multi_indices(dim: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = vec![0; dim];
    fn rec(k: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == cur.len() {
            out.push(cur.clone());
            return;
        }
        for e in 0..=left {
            cur[k] = e;
            rec(k + 1, left - e, cur, out);
        }
        cur[k] = 0;
    }
    rec(0, degree, &mut cur, &mut out);
    out.sort_by_key(|e| (e.iter().sum::<usize>(), std::cmp::Reverse(e.clone())));
    out
}

/// `He_k(x) / sqrt(k!)` for `k = 0..=n`.
fn hermite_normalised(x: f64, n: usize, out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    if n == 0 {
        return;
    }
    out.push(x);
    // h_{k+1} = (x h_k - sqrt(k) h_{k-1}) / sqrt(k+1)
    for k in 1..n {
        let next = (x * out[k] - (k as f64).sqrt() * out[k - 1]) / ((k + 1) as f64).sqrt();
        out.push(next);
    }
}

impl Basis {
    pub fn new(cfg: &BasisConfig, dim: usize) -> Result<Self> {
        if cfg.degree == 0 && cfg.kind == BasisKind::Hermite {
            return Err(Error::invalid("basis degree must be at least 1"));
        }
        if cfg.kind == BasisKind::Hat && (cfg.hat_knots < 3 || !(cfg.hat_range > 0.0)) {
            return Err(Error::invalid("hat basis needs at least 3 knots and a positive range"));
        }
        if cfg.input_clamp.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::invalid("input clamp must be positive"));
        }
        Ok(Basis {
            kind: cfg.kind,
            clamp: cfg.input_clamp,
            dim,
            exponents: multi_indices(dim, cfg.degree),
            knots: stats::linspace(-cfg.hat_range, cfg.hat_range, cfg.hat_knots),
            constant: false,
        })
    }

    pub fn constant(dim: usize) -> Self {
        Basis { kind: BasisKind::Hermite, dim, exponents: vec![vec![0; dim]], knots: Vec::new(), clamp: None, constant: true }
    }

    pub fn len(&self) -> usize {
        if self.constant {
            return 1;
        }
        match self.kind {
            BasisKind::Hermite => self.exponents.len(),
            // Shared constant plus the interior and end hats of each axis
            // minus one per extra axis (the hats sum to one).
            BasisKind::Hat => 1 + self.dim * (self.knots.len() - 1),
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Writes the features of standardised position `x` into `out`.
    pub fn features(&self, x: &[f64], out: &mut [f64]) {
        if self.constant {
            out[0] = 1.0;
            return;
        }
        match self.kind {
            BasisKind::Hermite => {
                let deg = self.exponents.last().map(|e| e.iter().sum()).unwrap_or(0);
                let mut per_axis = Vec::with_capacity(self.dim);
                let mut buf = Vec::with_capacity(deg + 1);
                for &xk in x {
                    let xk = self.clamp.map_or(xk, |c| xk.clamp(-c, c));
                    hermite_normalised(xk, deg, &mut buf);
                    per_axis.push(buf.clone());
                }
                for (o, e) in out.iter_mut().zip(&self.exponents) {
                    *o = e.iter().enumerate().map(|(k, &p)| per_axis[k][p]).product();
                }
            }
            BasisKind::Hat => {
                out.iter_mut().for_each(|v| *v = 0.0);
                out[0] = 1.0;
                let n = self.knots.len();
                let (lo, hi) = (self.knots[0], self.knots[n - 1]);
                let h = (hi - lo) / (n - 1) as f64;
                for (k, &xk) in x.iter().enumerate() {
                    let c = xk.clamp(lo, hi);
                    let f = ((c - lo) / h).min((n - 1) as f64);
                    let i = (f.floor() as usize).min(n - 2);
                    let w = f - i as f64;
                    // Hat j of axis k sits at column 1 + k(n-1) + (j-1); hat 0
                    // is dropped because it is the constant minus the rest.
                    let base = 1 + k * (n - 1);
                    if i >= 1 {
                        out[base + i - 1] += 1.0 - w;
                    }
                    out[base + i] += w;
                }
            }
        }
    }
}

/// Least-squares projection onto a basis with a factorised Gram matrix.
pub struct Projection {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    pub width: usize,
}

impl Projection {
    /// `features` holds `n` rows of `width` entries. Fails when the
    /// smallest-to-largest eigenvalue ratio of the Gram matrix is below
    /// `1e-12`.
    pub fn fit(features: &[f64], width: usize, step: usize) -> Result<Self> {
        let n = features.len() / width;
        let tri = width * (width + 1) / 2;
        let acc = stats::sum_vec_by(n, tri, |i, acc| {
            let row = &features[i * width..(i + 1) * width];
            let mut p = 0;
            for a in 0..width {
                let ra = row[a];
                for rb in &row[a..] {
                    acc[p] += ra * rb;
                    p += 1;
                }
            }
        });
        let mut gram = DMatrix::zeros(width, width);
        let mut p = 0;
        for a in 0..width {
            for b in a..width {
                let v = acc[p] / n as f64;
                gram[(a, b)] = v;
                gram[(b, a)] = v;
                p += 1;
            }
        }
        let eig = gram.clone().symmetric_eigenvalues();
        let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &v| (l.min(v), h.max(v.abs())));
        if !(hi > 0.0) || lo / hi < 1e-12 {
            return Err(Error::RankDeficient { step });
        }
        let chol = gram.cholesky().ok_or(Error::RankDeficient { step })?;
        Ok(Projection { chol, width })
    }

    /// Coefficients of the projection of `k` targets; `target(i, out)`
    /// writes the `k` target values of row `i`.
    pub fn solve<F>(&self, features: &[f64], k: usize, target: F) -> Vec<Vec<f64>>
    where
        F: Fn(usize, &mut [f64]) + Sync,
    {
        let w = self.width;
        let n = features.len() / w;
        let acc = stats::sum_vec_by(n, w * k, |i, acc| {
            let row = &features[i * w..(i + 1) * w];
            let mut t = [0.0; 8];
            let mut big;
            let tv: &mut [f64] = if k <= 8 {
                &mut t[..k]
            } else {
                big = vec![0.0; k];
                &mut big
            };
            target(i, tv);
            for (j, &y) in tv.iter().enumerate() {
                for (a, &ra) in row.iter().enumerate() {
                    acc[j * w + a] += ra * y;
                }
            }
        });
        (0..k)
            .map(|j| {
                let b = DVector::from_iterator(w, acc[j * w..(j + 1) * w].iter().map(|v| v / n as f64));
                self.chol.solve(&b).iter().copied().collect()
            })
            .collect()
    }
}

#[inline]
pub fn dot(coef: &[f64], features: &[f64]) -> f64 {
    coef.iter().zip(features).map(|(a, b)| a * b).sum()
}
