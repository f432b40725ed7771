//! Gauss-Hermite nodes and a doubling trapezoid rule.

use std::sync::OnceLock;

pub const GH_POINTS: usize = 64;

/// Nodes and weights for `int exp(-x^2) f(x) dx`, computed by Newton
/// iteration on the orthonormal Hermite recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    const PIM4: f64 = 0.751_125_544_464_942_5;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-0.166_67),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

fn gh64() -> &'static (Vec<f64>, Vec<f64>) {
    static CELL: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    CELL.get_or_init(|| gauss_hermite(GH_POINTS))
}

/// Standard-normal nodes `s_i` and probabilities `p_i` with
/// `E[h(X)] ~ sum p_i h(s_i)`.
pub fn normal_rule() -> Vec<(f64, f64)> {
    let (x, w) = gh64();
    let s = std::f64::consts::PI.sqrt();
    x.iter()
        .zip(w)
        .map(|(&xi, &wi)| (std::f64::consts::SQRT_2 * xi, wi / s))
        .collect()
}

/// `E[h(sigma * X)]` for standard normal `X`.
pub fn normal_expectation<F: Fn(f64) -> f64>(sigma: f64, h: F) -> f64 {
    normal_rule().iter().map(|&(s, p)| p * h(sigma * s)).sum()
}

/// Trapezoid rule on `[a, b]`, halving the step until successive estimates
/// agree to `rel_tol`.
pub fn trapezoid<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let mut n = 1usize;
    let mut h = b - a;
    let mut est = 0.5 * h * (f(a) + f(b));
    for _ in 0..24 {
        let mid: f64 = (0..n).map(|k| f(a + h * (k as f64 + 0.5))).sum();
        let next = 0.5 * est + 0.5 * h * mid;
        n *= 2;
        h *= 0.5;
        if (next - est).abs() <= rel_tol * next.abs() || (next - est).abs() < 1e-300 {
            return next;
        }
        est = next;
    }
    est
}
