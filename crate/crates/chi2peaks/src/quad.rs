//! Gauss-Legendre quadrature and the oscillatory k-integrator used for the
//! spectral kernel integrals.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::harmonics::spherical_jl;

/// Nodes and weights of an n-point Gauss-Legendre rule on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// Builds the rule by Newton iteration on P_n.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            // Tricomi-style initial guess for the i-th root.
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                let (p, dp) = legendre_and_derivative(n, x);
                let dx = p / dp;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            let (_, dp) = legendre_and_derivative(n, x);
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            weights[i] = w;
            nodes[n - 1 - i] = x;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        GaussLegendre { nodes, weights }
    }

    /// Cached lookup; rules are immutable once built.
    pub fn cached(n: usize) -> &'static GaussLegendre {
        static CACHE: OnceLock<Mutex<HashMap<usize, &'static GaussLegendre>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut map = cache.lock().unwrap();
        map.entry(n)
            .or_insert_with(|| Box::leak(Box::new(GaussLegendre::new(n))))
    }

    /// Integrates f over [a, b].
    pub fn integrate<F: Fn(f64) -> f64>(&self, a: f64, b: f64, f: F) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut sum = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            sum += w * f(mid + half * x);
        }
        sum * half
    }
}

/// Returns (P_n(x), P_n'(x)).
fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// First zero of j_l(x) at or after x0, found by scan and bisection.
pub fn jl_zero_after(l: usize, x0: f64) -> f64 {
    // j_l is identically suppressed below its first oscillation; start scanning
    // no earlier than the turning-point estimate.
    let lf = l as f64;
    let turn = if l == 0 { 0.1 } else { lf + 0.5 };
    let mut a = x0.max(turn * 0.5).max(1e-8);
    let mut fa = spherical_jl(l, a);
    let step = 0.5;
    let mut b = a + step;
    let mut guard = 0usize;
    loop {
        let fb = spherical_jl(l, b);
        if fa == 0.0 {
            return a;
        }
        if fa * fb < 0.0 {
            break;
        }
        a = b;
        fa = fb;
        b += step;
        guard += 1;
        assert!(guard < 2_000_000, "failed to bracket a j_l zero");
    }
    // Bisection to ~1e-13 relative.
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let fm = spherical_jl(l, m);
        if fa * fm <= 0.0 {
            b = m;
        } else {
            a = m;
            fa = fm;
        }
        if (b - a) < 1e-13 * b.max(1.0) {
            break;
        }
    }
    0.5 * (a + b)
}

/// Integrates f(k) over [k_lo, k_hi] (k_hi may be f64::INFINITY), splitting the
/// domain at consecutive zeros of j_l(k * r_osc) and applying Gauss-Legendre on
/// each sub-interval. Panels are additionally capped at `max_step` so that
/// smooth structure (e.g. an exponential tail) stays resolved when the
/// oscillation period is long. Consecutive negligible contributions terminate
/// the sum; pass `r_osc = 0` for non-oscillatory integrands.
pub fn integrate_oscillatory<F: Fn(f64) -> f64>(
    f: F,
    l: usize,
    r_osc: f64,
    k_lo: f64,
    k_hi: f64,
    max_step: f64,
    abs_tol: f64,
    context: &str,
) -> Result<f64> {
    assert!(max_step > 0.0);
    let rule = GaussLegendre::cached(16);
    let mut total = 0.0;
    let mut a = k_lo;
    let mut small_streak = 0usize;
    let max_intervals = 400_000usize;
    let mut last = 0.0f64;
    for i in 0..max_intervals {
        let mut b = if r_osc > 0.0 {
            let zero = jl_zero_after(l, (a + 1e-12 / r_osc) * r_osc);
            let z = zero / r_osc;
            if z <= a {
                a + std::f64::consts::PI / r_osc
            } else {
                z
            }
        } else {
            f64::INFINITY
        };
        b = b.min(a + max_step);
        let finite_end = b >= k_hi;
        if finite_end {
            b = k_hi;
        }
        let piece = rule.integrate(a, b, &f);
        total += piece;
        last = piece.abs();
        if finite_end {
            return Ok(total);
        }
        // j_l(k r) is negligible below its turning point k ~ l / r, so tiny
        // leading panels must not trigger tail termination.
        let past_support = r_osc <= 0.0 || b * r_osc >= l as f64;
        if last <= abs_tol && past_support {
            small_streak += 1;
            if small_streak >= 4 {
                return Ok(total);
            }
        } else if last > abs_tol {
            small_streak = 0;
        }
        a = b;
        if i + 1 == max_intervals {
            return Err(Error::QuadratureNonConvergence {
                context: context.to_string(),
                achieved: last,
                requested: abs_tol,
            });
        }
    }
    Err(Error::QuadratureNonConvergence {
        context: context.to_string(),
        achieved: last,
        requested: abs_tol,
    })
}
