//! Log-space helpers and the finite-window convergence heuristic shared by
//! the regime classifier and the flux criterion.

/// Minimum per-site decay rate of log-terms for a tail to count as geometric.
/// A rate of 0.02 means terms shrink by at least about 2% per site.
pub const MIN_DECAY_RATE: f64 = 0.02;

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `1 / (1 + e^{-x})`.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln Σ e^{x_i}`; `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Least-squares slope of `ys` against `0, 1, 2, ...`.
pub fn slope(ys: &[f64]) -> f64 {
    let n = ys.len();
    if n < 2 {
        return 0.0;
    }
    let nf = n as f64;
    let mean_x = (nf - 1.0) / 2.0;
    let mean_y = ys.iter().sum::<f64>() / nf;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mean_x;
        sxy += dx * (y - mean_y);
        sxx += dx * dx;
    }
    sxy / sxx
}

/// Judge whether a series with the given log-terms, listed from the inside of
/// the window outward, converges: the outermost `tail_len` log-terms must fall
/// off at least linearly with slope `MIN_DECAY_RATE`.
pub fn tail_is_geometric(log_terms_outward: &[f64], tail_len: usize) -> bool {
    let n = log_terms_outward.len();
    let tail_len = tail_len.min(n);
    if tail_len < 2 {
        return false;
    }
    let tail = &log_terms_outward[n - tail_len..];
    if tail.iter().all(|t| *t == f64::NEG_INFINITY) {
        return true;
    }
    slope(tail) <= -MIN_DECAY_RATE
}
