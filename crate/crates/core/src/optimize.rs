//! One-dimensional minimisers used by the conjugate and inf-convolution code.

const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Golden-section search for a minimum of `f` on `[a, b]`.
///
/// Returns the best point seen and its value. `tol` is an absolute
/// tolerance on the bracket width.
pub fn golden_min<F: FnMut(f64) -> f64>(mut f: F, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    let mut iters = 0;
    while (b - a).abs() > tol && iters < 200 {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
        iters += 1;
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GridMin {
    pub x: f64,
    pub value: f64,
    /// The coarse minimum sat on an endpoint of the search interval.
    pub at_boundary: bool,
}

/// Coarse grid of `points` nodes on `[lo, hi]`, then golden-section search in
/// the two cells around the best node.
pub fn grid_golden_min<F: FnMut(f64) -> f64>(
    mut f: F,
    lo: f64,
    hi: f64,
    points: usize,
    tol: f64,
) -> GridMin {
    let points = points.max(3);
    let h = (hi - lo) / (points - 1) as f64;
    let mut best = (0usize, f64::INFINITY);
    for k in 0..points {
        let x = if k == points - 1 { hi } else { lo + h * k as f64 };
        let v = f(x);
        if v < best.1 || (best.1.is_nan() && !v.is_nan()) {
            best = (k, v);
        }
    }
    let k = best.0;
    let node = if k == points - 1 { hi } else { lo + h * k as f64 };
    let a = if k == 0 { lo } else { node - h };
    let b = if k == points - 1 { hi } else { node + h };
    let (x, v) = golden_min(&mut f, a, b, tol);
    let (x, value) = if v < best.1 { (x, v) } else { (node, best.1) };
    GridMin { x, value, at_boundary: k == 0 || k == points - 1 }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_finds_parabola_vertex() {
        let (x, v) = golden_min(|x| (x - 0.3).powi(2) + 1.0, -2.0, 2.0, 1e-10);
        // A smooth minimum is only located to about sqrt(eps).
        assert!((x - 0.3).abs() < 1e-7);
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn grid_golden_handles_kink() {
        let m = grid_golden_min(|x| (x - 0.123).abs(), -5.0, 5.0, 33, 1e-10);
        assert!((m.x - 0.123).abs() < 1e-8);
        assert!(!m.at_boundary);
    }

    #[test]
    fn grid_golden_flags_boundary() {
        let m = grid_golden_min(|x| -x, -1.0, 1.0, 33, 1e-10);
        assert!(m.at_boundary);
        assert_eq!(m.x, 1.0);
    }
}
