//! Real spherical harmonics, Legendre polynomials, spherical Bessel functions
//! and the Legendre projection used throughout the mode statistics.
//!
//! Real harmonics use the cos/sin combination convention without the
//! Condon-Shortley phase:
//!   Y_{l0}  = sqrt((2l+1)/4pi) P_l(cos theta)
//!   Y_{lm}  = sqrt(2) N_{l|m|} P_l^{|m|}(cos theta) cos(|m| phi)   for m > 0
//!   Y_{l,-m}= sqrt(2) N_{l|m|} P_l^{|m|}(cos theta) sin(|m| phi)   for m < 0
//! with N the orthonormalizing factor and P_l^m the unsigned associated
//! Legendre functions. Phi-field assembly is bit-for-bit reproducible across
//! implementations that follow the same convention.

use crate::error::{Error, Result};
use crate::quad::GaussLegendre;

/// A direction on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitVector {
    pub theta: f64,
    pub phi: f64,
}

impl UnitVector {
    pub fn from_angles(theta: f64, phi: f64) -> Self {
        UnitVector { theta, phi }
    }

    /// Builds from Cartesian components, normalizing; errors on a zero vector
    /// or a norm further than 1e-6 from unity.
    pub fn from_cartesian(x: f64, y: f64, z: f64) -> Result<Self> {
        let norm = (x * x + y * y + z * z).sqrt();
        if norm < 1e-300 {
            return Err(Error::Domain("zero direction vector".into()));
        }
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!(
                "direction vector norm {norm} too far from 1"
            )));
        }
        let z = z / norm;
        Ok(UnitVector {
            theta: z.clamp(-1.0, 1.0).acos(),
            phi: y.atan2(x).rem_euclid(2.0 * std::f64::consts::PI),
        })
    }

    pub fn to_cartesian(&self) -> [f64; 3] {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        [st * cp, st * sp, ct]
    }

    pub fn dot(&self, other: &UnitVector) -> f64 {
        let a = self.to_cartesian();
        let b = other.to_cartesian();
        (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0)
    }
}

/// Legendre polynomial P_l(u) by upward recurrence.
pub fn legendre_p(l: usize, u: f64) -> f64 {
    match l {
        0 => 1.0,
        1 => u,
        _ => {
            let mut p0 = 1.0;
            let mut p1 = u;
            for k in 2..=l {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * u * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            p1
        }
    }
}

/// Spherical Bessel function of the first kind, j_l(x) for x >= 0.
///
/// Upward recurrence for x > l (stable there), downward Miller recurrence
/// normalized against j_0 otherwise. j_l(0) = delta_{l0}.
pub fn spherical_jl(l: usize, x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    if x == 0.0 {
        return if l == 0 { 1.0 } else { 0.0 };
    }
    let j0 = x.sin() / x;
    if l == 0 {
        return j0;
    }
    let j1 = x.sin() / (x * x) - x.cos() / x;
    if l == 1 {
        return j1;
    }
    if x > l as f64 {
        let mut jm = j0;
        let mut jc = j1;
        for k in 1..l {
            let jn = (2.0 * k as f64 + 1.0) / x * jc - jm;
            jm = jc;
            jc = jn;
        }
        jc
    } else {
        // Downward recurrence from a safely high starting order.
        let start = l + 20 + (x as usize);
        let mut jp = 0.0f64;
        let mut jc = 1e-280f64;
        let mut out = 0.0f64;
        for k in (1..=start).rev() {
            let jm = (2.0 * k as f64 + 1.0) / x * jc - jp;
            jp = jc;
            jc = jm;
            if k - 1 == l {
                out = jc;
            }
            if jc.abs() > 1e280 {
                jc *= 1e-280;
                jp *= 1e-280;
                out *= 1e-280;
            }
        }
        out * (j0 / jc)
    }
}

/// Orthonormalized associated Legendre values N_{lm} P_l^m(cos theta) without
/// the Condon-Shortley phase, for a single (l, m), m >= 0.
fn normalized_assoc_legendre(l: usize, m: usize, ct: f64, st: f64) -> f64 {
    debug_assert!(m <= l);
    let four_pi = 4.0 * std::f64::consts::PI;
    // P-bar_{mm}
    let mut pmm = (1.0 / four_pi).sqrt();
    for k in 1..=m {
        let kf = k as f64;
        pmm *= st * ((2.0 * kf + 1.0) / (2.0 * kf)).sqrt();
    }
    if l == m {
        return pmm;
    }
    // P-bar_{m+1,m}
    let mut p_prev = pmm;
    let mut p_curr = ct * ((2 * m + 3) as f64).sqrt() * pmm;
    if l == m + 1 {
        return p_curr;
    }
    for ll in (m + 2)..=l {
        let lf = ll as f64;
        let mf = m as f64;
        let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
        let b = (((lf - 1.0) * (lf - 1.0) - mf * mf) / (4.0 * (lf - 1.0) * (lf - 1.0) - 1.0))
            .sqrt();
        let p_next = a * (ct * p_curr - b * p_prev);
        p_prev = p_curr;
        p_curr = p_next;
    }
    p_curr
}

/// Real spherical harmonic Y_{lm}(n); errors for |m| > l.
pub fn real_ylm(l: usize, m: i64, n: &UnitVector) -> Result<f64> {
    let ma = m.unsigned_abs() as usize;
    if ma > l {
        return Err(Error::Domain(format!("|m| = {ma} exceeds l = {l}")));
    }
    let (st, ct) = n.theta.sin_cos();
    let p = normalized_assoc_legendre(l, ma, ct, st);
    Ok(if m == 0 {
        p
    } else if m > 0 {
        std::f64::consts::SQRT_2 * p * (ma as f64 * n.phi).cos()
    } else {
        std::f64::consts::SQRT_2 * p * (ma as f64 * n.phi).sin()
    })
}

/// Gauss-Legendre evaluation of int_{-1}^{1} P_l(u) f(u) du with order
/// max(64, 4l).
pub fn legendre_project<F: Fn(f64) -> f64>(f: F, l: usize) -> f64 {
    let order = (4 * l).max(64);
    let rule = GaussLegendre::cached(order);
    let mut sum = 0.0;
    for (u, w) in rule.nodes.iter().zip(&rule.weights) {
        sum += w * legendre_p(l, *u) * f(*u);
    }
    sum
}

/// Product angular quadrature grid: Gauss-Legendre in cos(theta) times a
/// uniform trapezoid in phi. Exact for integrands band-limited below the grid
/// order. Returns (direction, weight) pairs with weights summing to 4 pi.
pub fn angular_quadrature(order: usize) -> Vec<(UnitVector, f64)> {
    let n_theta = order;
    let n_phi = 2 * order;
    let rule = GaussLegendre::cached(n_theta);
    let dphi = 2.0 * std::f64::consts::PI / n_phi as f64;
    let mut out = Vec::with_capacity(n_theta * n_phi);
    for (ct, w) in rule.nodes.iter().zip(&rule.weights) {
        let theta = ct.clamp(-1.0, 1.0).acos();
        for j in 0..n_phi {
            let phi = j as f64 * dphi;
            out.push((UnitVector::from_angles(theta, phi), w * dphi));
        }
    }
    out
}
