//! Far-field spatial coherence of extended sources.
//!
//! The degree of spatial coherence between two detectors at baseline `x`
//! and distance `L` from a quasi-monochromatic source is the normalized
//! Fourier transform of the near-field intensity at spatial frequency
//! `k = 2 pi x / (lambda L)`. For profiles that vary only along the baseline
//! this is a 1-D transform of the marginal.

use std::f64::consts::PI;

use thiserror::Error;

use super::quadrature::adaptive_simpson;

#[derive(Debug, Error, PartialEq)]
pub enum VczError {
    #[error("near-field profile has zero total intensity")]
    ZeroIntensity,
    #[error("invalid optical parameter: {0}")]
    InvalidParameter(String),
}

/// `sin(z) / z` with the removable singularity at zero filled in.
pub fn sinc(z: f64) -> f64 {
    if z.abs() < 1e-4 {
        let z2 = z * z;
        1.0 - z2 / 6.0 + z2 * z2 / 120.0
    } else {
        z.sin() / z
    }
}

/// Fresnel-like parameter `w x / (lambda L)`.
pub fn fresnel_number(width: f64, baseline: f64, wavelength: f64, distance: f64) -> f64 {
    width * baseline / (wavelength * distance)
}

/// Temporal factor `exp(-pi tau^2 / tau_c^2)` of the intensity correlation.
pub fn temporal_factor(tau: f64, coherence_time: f64) -> f64 {
    (-PI * tau * tau / (coherence_time * coherence_time)).exp()
}

/// Unpolarized single-mode thermal light from a uniform source of width `w`:
/// `1 + sinc^2(pi FN) exp(-pi tau^2 / tau_c^2) / 2`.
pub fn g2_uniform(fresnel: f64, tau: f64, coherence_time: f64) -> f64 {
    let s = sinc(PI * fresnel);
    1.0 + 0.5 * s * s * temporal_factor(tau, coherence_time)
}

/// Signed spatial coherence of the profile `1 + gamma cos(Omega x)` on
/// `|x| <= w / 2`, with `beta = Omega w / 2`.
pub fn cosine_visibility(fresnel: f64, gamma: f64, beta: f64) -> f64 {
    let a = PI * fresnel;
    let num = sinc(a) + 0.5 * gamma * sinc(a + beta) + 0.5 * gamma * sinc(a - beta);
    num / (1.0 + gamma * sinc(beta))
}

/// Closed form for the cosine-modulated near field; `omega` in rad per unit
/// length, `width` the source width `w`.
pub fn g2_cosine_profile(fresnel: f64, gamma: f64, omega: f64, width: f64, tau: f64, coherence_time: f64) -> f64 {
    let v = cosine_visibility(fresnel, gamma, 0.5 * omega * width);
    1.0 + 0.5 * v * v * temporal_factor(tau, coherence_time)
}

/// Number of photon modes `(pi w x / (lambda L))^2 / 16` seen by a detector pair.
pub fn mode_count(width: f64, baseline: f64, wavelength: f64, distance: f64) -> f64 {
    let f = PI * fresnel_number(width, baseline, wavelength, distance);
    f * f / 16.0
}

/// Near-field intensity, marginalized onto the baseline direction.
pub trait NearField {
    /// Marginal intensity at transverse position `x`; must be non-negative.
    fn marginal(&self, x: f64) -> f64;
    /// Interval outside which the marginal vanishes.
    fn support(&self) -> (f64, f64);
    /// Points inside the support where the marginal is not smooth.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }
}

/// Uniform emitter of width `w` centred on the axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformSlab {
    pub width: f64,
}

impl NearField for UniformSlab {
    fn marginal(&self, _x: f64) -> f64 {
        1.0
    }

    fn support(&self) -> (f64, f64) {
        (-0.5 * self.width, 0.5 * self.width)
    }
}

/// Emitter of width `w` with the modulated profile `1 + gamma cos(Omega x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineModulated {
    pub width: f64,
    pub gamma: f64,
    pub omega: f64,
}

impl NearField for CosineModulated {
    fn marginal(&self, x: f64) -> f64 {
        1.0 + self.gamma * (self.omega * x).cos()
    }

    fn support(&self) -> (f64, f64) {
        (-0.5 * self.width, 0.5 * self.width)
    }
}

const QUAD_TOL: f64 = 1e-9;

/// Complex degree of spatial coherence `(re, im)` at baseline `x`.
pub fn vcz_visibility<P: NearField + ?Sized>(
    profile: &P,
    baseline: f64,
    wavelength: f64,
    distance: f64,
) -> Result<(f64, f64), VczError> {
    if !(wavelength > 0.0 && distance > 0.0) {
        return Err(VczError::InvalidParameter(format!(
            "wavelength {wavelength} and distance {distance} must be positive"
        )));
    }
    let k = 2.0 * PI * baseline / (wavelength * distance);
    let (a, b) = profile.support();
    let mut edges = vec![a];
    edges.extend(profile.breakpoints().into_iter().filter(|&p| p > a && p < b));
    edges.push(b);
    let integrate = |f: &dyn Fn(f64) -> f64| -> f64 {
        edges.windows(2).map(|e| adaptive_simpson(f, e[0], e[1], QUAD_TOL)).sum()
    };
    let total = integrate(&|x| profile.marginal(x));
    if total.abs() <= f64::MIN_POSITIVE || !total.is_finite() {
        return Err(VczError::ZeroIntensity);
    }
    let re = integrate(&|x| profile.marginal(x) * (k * x).cos());
    let im = -integrate(&|x| profile.marginal(x) * (k * x).sin());
    Ok((re / total, im / total))
}

/// Unpolarized thermal intensity correlation from a numerically transformed
/// near field.
pub fn g2_vcz<P: NearField + ?Sized>(
    profile: &P,
    baseline: f64,
    tau: f64,
    wavelength: f64,
    distance: f64,
    coherence_time: f64,
) -> Result<f64, VczError> {
    let (re, im) = vcz_visibility(profile, baseline, wavelength, distance)?;
    Ok(1.0 + 0.5 * (re * re + im * im) * temporal_factor(tau, coherence_time))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinc_is_continuous_at_zero() {
        assert_eq!(sinc(0.0), 1.0);
        for z in [1e-5, 9.9e-5, 1.01e-4, 1e-3] {
            assert!((sinc(z) - z.sin() / z).abs() < 1e-15);
        }
        assert!(sinc(PI).abs() < 1e-15);
    }

    #[test]
    fn uniform_limits() {
        assert_eq!(g2_uniform(0.0, 0.0, 1e-9), 1.5);
        assert!((g2_uniform(1.0, 0.0, 1e-9) - 1.0).abs() < 1e-15);
        assert!((g2_cosine_profile(0.7, 0.0, 9.0, 1.0, 0.0, 1.0) - g2_uniform(0.7, 0.0, 1.0)).abs() < 1e-15);
        assert!((g2_cosine_profile(0.3, -0.3, 2.8 * PI, 1.0, 1e3, 1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_baseline_is_fully_coherent() {
        let p = CosineModulated {
            width: 200e-6,
            gamma: -0.3,
            omega: 2.8 * PI / 200e-6,
        };
        let g = g2_vcz(&p, 0.0, 0.0, 546e-9, 0.02, 1e-12).unwrap();
        assert!((g - 1.5).abs() < 1e-12);
    }

    #[test]
    fn mode_count_arithmetic() {
        let q = mode_count(200e-6, 100e-6, 546e-9, 0.02);
        assert!((fresnel_number(200e-6, 100e-6, 546e-9, 0.02) - 1.8315).abs() < 1e-3);
        assert!((q - 2.0689).abs() < 1e-3, "{q}");
        assert_eq!(mode_count(200e-6, 0.0, 546e-9, 0.02), 0.0);
        // q = 1 exactly when FN = 4 / pi.
        let x = 4.0 / PI * 546e-9 * 0.02 / 200e-6;
        assert!((mode_count(200e-6, x, 546e-9, 0.02) - 1.0).abs() < 1e-12);
    }

    struct Dark;
    impl NearField for Dark {
        fn marginal(&self, _x: f64) -> f64 {
            0.0
        }
        fn support(&self) -> (f64, f64) {
            (-1.0, 1.0)
        }
    }

    #[test]
    fn zero_intensity_is_an_error() {
        assert_eq!(g2_vcz(&Dark, 1.0, 0.0, 1.0, 1.0, 1.0), Err(VczError::ZeroIntensity));
    }
}
