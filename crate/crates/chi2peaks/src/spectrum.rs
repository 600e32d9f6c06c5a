//! Isotropic power spectra and their spectral moments.
//!
//! A spectrum describes the two-point statistics of a single Gaussian
//! component field through `P(k)`; all radial kernels derive from weighted
//! k-integrals of it. Three families are supported:
//!
//! * `Monochromatic`: all power at a single wavenumber `k0` (a delta line,
//!   described by its total variance, not a density),
//! * `ExponentialFamily`: `P(k) = A k^m exp(-k / scale)`,
//! * `Tabulated`: piecewise-linear density on a strictly increasing k-grid,
//!   zero outside the tabulated range.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad::{integrate_oscillatory, GaussLegendre};

/// Low-order spectral moments `sigma_n^2 = 4 pi int k^{2n+2} P(k) dk`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SpectralMoments {
    pub sigma0_sq: f64,
    pub sigma1_sq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PowerSpectrum {
    /// All power concentrated at `k0`; `sigma0_sq` is the total field variance.
    Monochromatic { k0: f64, sigma0_sq: f64 },
    /// `P(k) = amplitude * k^power * exp(-k / scale)`.
    ExponentialFamily { amplitude: f64, power: f64, scale: f64 },
    /// Piecewise-linear density over `k`, zero outside the tabulated range.
    Tabulated { k: Vec<f64>, p: Vec<f64> },
}

impl PowerSpectrum {
    pub fn monochromatic(k0: f64, sigma0_sq: f64) -> Result<Self> {
        if !(k0 > 0.0 && k0.is_finite() && sigma0_sq > 0.0 && sigma0_sq.is_finite()) {
            return Err(Error::InvalidSpectrum(
                "monochromatic spectrum requires k0 > 0 and sigma0_sq > 0".into(),
            ));
        }
        Ok(Self::Monochromatic { k0, sigma0_sq })
    }

    pub fn exponential_family(amplitude: f64, power: f64, scale: f64) -> Result<Self> {
        if !(amplitude > 0.0 && amplitude.is_finite() && scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidSpectrum(
                "exponential-family spectrum requires amplitude > 0 and scale > 0".into(),
            ));
        }
        if !(power.is_finite()) {
            return Err(Error::InvalidSpectrum("spectral power must be finite".into()));
        }
        if power <= -3.0 {
            return Err(Error::NonIntegrableSpectrum(format!(
                "k^{power} divergence at k = 0 makes sigma_0^2 infinite"
            )));
        }
        Ok(Self::ExponentialFamily { amplitude, power, scale })
    }

    /// Exponential spectrum with `power = 0` normalized to unit field variance.
    pub fn exponential_unit_variance(scale: f64) -> Result<Self> {
        Self::exponential_family(1.0 / (8.0 * PI * scale.powi(3)), 0.0, scale)
    }

    pub fn tabulated(k: Vec<f64>, p: Vec<f64>) -> Result<Self> {
        if k.len() < 2 || k.len() != p.len() {
            return Err(Error::InvalidSpectrum(
                "tabulated spectrum needs at least two (k, P) rows of equal length".into(),
            ));
        }
        if k[0] < 0.0 {
            return Err(Error::InvalidSpectrum("tabulated wavenumbers must be >= 0".into()));
        }
        for w in k.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::InvalidSpectrum(
                    "tabulated wavenumbers must be strictly increasing".into(),
                ));
            }
        }
        if p.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
            return Err(Error::InvalidSpectrum(
                "tabulated power values must be finite and non-negative".into(),
            ));
        }
        if p.iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidSpectrum("tabulated spectrum is identically zero".into()));
        }
        Ok(Self::Tabulated { k, p })
    }

    /// Loads a two-column `k,P` CSV. A single non-numeric header line is
    /// allowed; rows must have strictly increasing k.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut ks = Vec::new();
        let mut ps = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split(',').map(str::trim);
            let (a, b) = match (cols.next(), cols.next()) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(Error::InvalidSpectrum(format!(
                        "line {}: expected two comma-separated columns",
                        idx + 1
                    )))
                }
            };
            match (a.parse::<f64>(), b.parse::<f64>()) {
                (Ok(k), Ok(p)) => {
                    ks.push(k);
                    ps.push(p);
                }
                _ if ks.is_empty() => continue, // header line
                _ => {
                    return Err(Error::InvalidSpectrum(format!(
                        "line {}: could not parse '{line}' as numbers",
                        idx + 1
                    )))
                }
            }
        }
        Self::tabulated(ks, ps)
    }

    /// Spectral density at `k`. Meaningless for a monochromatic line (which
    /// carries its power in a delta function); returns 0 there.
    pub fn density(&self, k: f64) -> f64 {
        match self {
            Self::Monochromatic { .. } => 0.0,
            Self::ExponentialFamily { amplitude, power, scale } => {
                if k < 0.0 {
                    0.0
                } else if k == 0.0 {
                    if *power == 0.0 {
                        *amplitude
                    } else if *power > 0.0 {
                        0.0
                    } else {
                        f64::INFINITY
                    }
                } else {
                    amplitude * k.powf(*power) * (-k / scale).exp()
                }
            }
            Self::Tabulated { k: ks, p } => {
                if k < ks[0] || k > *ks.last().unwrap() {
                    return 0.0;
                }
                let j = match ks.binary_search_by(|v| v.partial_cmp(&k).unwrap()) {
                    Ok(j) => return p[j],
                    Err(j) => j - 1,
                };
                let t = (k - ks[j]) / (ks[j + 1] - ks[j]);
                p[j] + t * (p[j + 1] - p[j])
            }
        }
    }

    /// Support of the density: `(k_lo, k_hi)`; `k_hi` may be infinite.
    pub fn support(&self) -> (f64, f64) {
        match self {
            Self::Monochromatic { k0, .. } => (*k0, *k0),
            Self::ExponentialFamily { .. } => (0.0, f64::INFINITY),
            Self::Tabulated { k, .. } => (k[0], *k.last().unwrap()),
        }
    }

    /// `sigma_n^2 = 4 pi int k^{2n+2} P(k) dk`.
    pub fn moment(&self, n: usize) -> Result<f64> {
        match self {
            Self::Monochromatic { k0, sigma0_sq } => Ok(sigma0_sq * k0.powi(2 * n as i32)),
            Self::ExponentialFamily { amplitude, power, scale } => {
                let order = 2.0 * n as f64 + power + 3.0;
                Ok(4.0 * PI * amplitude * gamma(order) * scale.powf(order))
            }
            Self::Tabulated { k, p } => {
                // Piecewise polynomial of degree 2n+3 per segment; GL-16 is
                // exact through degree 31, i.e. through n = 14.
                let rule = GaussLegendre::cached(16);
                let mut total = 0.0;
                for j in 0..k.len() - 1 {
                    let (k0, k1, p0, p1) = (k[j], k[j + 1], p[j], p[j + 1]);
                    total += rule.integrate(k0, k1, |x| {
                        let t = (x - k0) / (k1 - k0);
                        x.powi(2 * n as i32 + 2) * (p0 + t * (p1 - p0))
                    });
                }
                Ok(4.0 * PI * total)
            }
        }
    }

    pub fn moments(&self) -> Result<SpectralMoments> {
        Ok(SpectralMoments {
            sigma0_sq: self.moment(0)?,
            sigma1_sq: self.moment(1)?,
        })
    }

    /// `4 pi int_0^x k^2 P(k) dk`, the variance carried below wavenumber `x`.
    pub fn cumulative_variance(&self, x: f64) -> Result<f64> {
        match self {
            Self::Monochromatic { k0, sigma0_sq } => {
                Ok(if x >= *k0 { *sigma0_sq } else { 0.0 })
            }
            Self::ExponentialFamily { scale, .. } => {
                if x <= 0.0 {
                    return Ok(0.0);
                }
                let v = integrate_oscillatory(
                    |k| k * k * self.density(k),
                    0,
                    0.0,
                    0.0,
                    x,
                    scale / 2.0,
                    0.0,
                    "cumulative spectral variance",
                )?;
                Ok(4.0 * PI * v)
            }
            Self::Tabulated { k, p } => {
                let rule = GaussLegendre::cached(16);
                let mut total = 0.0;
                for j in 0..k.len() - 1 {
                    if x <= k[j] {
                        break;
                    }
                    let hi = x.min(k[j + 1]);
                    let (k0, k1, p0, p1) = (k[j], k[j + 1], p[j], p[j + 1]);
                    total += rule.integrate(k0, hi, |v| {
                        let t = (v - k0) / (k1 - k0);
                        v * v * (p0 + t * (p1 - p0))
                    });
                }
                Ok(4.0 * PI * total)
            }
        }
    }

    /// Smallest wavenumber below which `fraction` of the field variance lies.
    /// Monochromatic spectra return `k0` for any fraction.
    pub fn effective_kmax(&self, fraction: f64) -> Result<f64> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::Domain(format!(
                "effective_kmax fraction must lie in (0, 1), got {fraction}"
            )));
        }
        let (k_lo, k_hi) = self.support();
        if let Self::Monochromatic { k0, .. } = self {
            return Ok(*k0);
        }
        let target = fraction * self.moment(0)?;
        let mut lo = k_lo;
        let mut hi = if k_hi.is_finite() {
            k_hi
        } else {
            let Self::ExponentialFamily { scale, .. } = self else { unreachable!() };
            let mut hi = *scale;
            while self.cumulative_variance(hi)? < target {
                hi *= 2.0;
                if hi > 1e12 * scale {
                    return Err(Error::NonIntegrableSpectrum(
                        "cumulative variance never reaches the requested fraction".into(),
                    ));
                }
            }
            hi
        };
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cumulative_variance(mid)? < target {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-13 * hi.max(1.0) {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Canonical text form of the parameters, used to key the kernel cache.
    pub fn content_key(&self) -> String {
        match self {
            Self::Monochromatic { k0, sigma0_sq } => {
                format!("mono;{k0:.17e};{sigma0_sq:.17e}")
            }
            Self::ExponentialFamily { amplitude, power, scale } => {
                format!("expfam;{amplitude:.17e};{power:.17e};{scale:.17e}")
            }
            Self::Tabulated { k, p } => {
                let mut s = String::from("tab");
                for (a, b) in k.iter().zip(p) {
                    s.push_str(&format!(";{a:.17e},{b:.17e}"));
                }
                s
            }
        }
    }
}

/// Gamma function for positive argument (Lanczos approximation, g = 7).
pub fn gamma(x: f64) -> f64 {
    assert!(x > 0.0, "gamma requires a positive argument");
    const G: f64 = 7.0;
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection keeps the approximation in its accurate range.
        return PI / ((PI * x).sin() * gamma(1.0 - x));
    }
    let x = x - 1.0;
    let mut a = COEFFS[0];
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    (2.0 * PI).sqrt() * t.powf(x + 0.5) * (-t).exp() * a
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gamma_matches_factorials_and_half_integers() {
        assert_relative_eq!(gamma(1.0), 1.0, max_relative = 1e-13);
        assert_relative_eq!(gamma(5.0), 24.0, max_relative = 1e-13);
        assert_relative_eq!(gamma(0.5), PI.sqrt(), max_relative = 1e-13);
        assert_relative_eq!(gamma(7.5), 1871.254_305_797_788_3, max_relative = 1e-12);
    }

    #[test]
    fn monochromatic_moments_scale_as_k0_powers() {
        let s = PowerSpectrum::monochromatic(8.0, 1.0).unwrap();
        assert_eq!(s.moment(0).unwrap(), 1.0);
        assert_eq!(s.moment(1).unwrap(), 64.0);
        assert_eq!(s.moment(2).unwrap(), 4096.0);
    }

    #[test]
    fn exponential_unit_variance_moments() {
        let s = PowerSpectrum::exponential_unit_variance(8.0).unwrap();
        assert_relative_eq!(s.moment(0).unwrap(), 1.0, max_relative = 1e-12);
        // sigma_1^2 = 12 * scale^2 for the unit-variance member.
        assert_relative_eq!(s.moment(1).unwrap(), 768.0, max_relative = 1e-12);
    }

    #[test]
    fn tabulated_moments_match_closed_form() {
        // P = 1 on [1, 2]: sigma_0^2 = 4 pi (2^3 - 1) / 3.
        let s = PowerSpectrum::tabulated(vec![1.0, 1.5, 2.0], vec![1.0, 1.0, 1.0]).unwrap();
        assert_relative_eq!(s.moment(0).unwrap(), 4.0 * PI * 7.0 / 3.0, max_relative = 1e-13);
        assert_relative_eq!(s.moment(1).unwrap(), 4.0 * PI * 31.0 / 5.0, max_relative = 1e-13);
    }

    #[test]
    fn effective_kmax_matches_incomplete_gamma_oracle() {
        // For P ~ exp(-k/s), the cumulative variance fraction below x is the
        // regularized incomplete gamma P(3, x/s) = 1 - e^-t (1 + t + t^2/2).
        let scale = 8.0;
        let s = PowerSpectrum::exponential_unit_variance(scale).unwrap();
        let reg = |t: f64| 1.0 - (-t).exp() * (1.0 + t + 0.5 * t * t);
        let (mut lo, mut hi) = (0.0, 60.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if reg(mid) < 0.95 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let expected = scale * 0.5 * (lo + hi);
        let got = s.effective_kmax(0.95).unwrap();
        assert_relative_eq!(got, expected, max_relative = 1e-8);
        // Spot check the overall magnitude: ~50.4 for scale = 8.
        assert!((got - 50.4).abs() < 0.1, "effective kmax {got}");
    }

    #[test]
    fn effective_kmax_is_monotone_in_fraction() {
        let s = PowerSpectrum::exponential_unit_variance(2.0).unwrap();
        let mut prev = 0.0;
        for i in 1..20 {
            let f = i as f64 / 20.0;
            let k = s.effective_kmax(f).unwrap();
            assert!(k >= prev, "effective_kmax must be monotone in fraction");
            prev = k;
        }
    }

    #[test]
    fn monochromatic_effective_kmax_is_the_line() {
        let s = PowerSpectrum::monochromatic(8.0, 2.5).unwrap();
        assert_eq!(s.effective_kmax(0.5).unwrap(), 8.0);
        assert_eq!(s.effective_kmax(0.99).unwrap(), 8.0);
    }

    #[test]
    fn invalid_spectra_are_rejected() {
        assert!(PowerSpectrum::monochromatic(0.0, 1.0).is_err());
        assert!(PowerSpectrum::monochromatic(1.0, -1.0).is_err());
        assert!(PowerSpectrum::exponential_family(1.0, -3.0, 1.0).is_err());
        assert!(PowerSpectrum::exponential_family(-1.0, 0.0, 1.0).is_err());
        assert!(PowerSpectrum::tabulated(vec![1.0, 1.0], vec![1.0, 1.0]).is_err());
        assert!(PowerSpectrum::tabulated(vec![1.0, 2.0], vec![0.0, 0.0]).is_err());
        let s = PowerSpectrum::exponential_unit_variance(1.0).unwrap();
        assert!(s.effective_kmax(1.0).is_err());
    }

    #[test]
    fn csv_round_trip_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.csv");
        std::fs::write(&path, "k,P\n0.5, 1.0\n1.0, 2.0\n2.0, 0.5\n").unwrap();
        let s = PowerSpectrum::from_csv(&path).unwrap();
        assert_eq!(s.density(1.0), 2.0);
        assert_eq!(s.density(3.0), 0.0);
        assert_relative_eq!(s.density(0.75), 1.5, max_relative = 1e-15);
    }
}
