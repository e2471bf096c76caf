//! Scalar special functions: error function, normal CDF/PDF and quantile.
//!
//! The quantile (inverse normal CDF) backs the sparse-layer gate and must be
//! accurate enough that finite-difference checks of its graph op pass at
//! 1e-5 relative error, so the rational approximation is polished with two
//! Halley steps against a high-accuracy CDF.

const SQRT_2: f64 = std::f64::consts::SQRT_2;
/// sqrt(2*pi)
pub const SQRT_2PI_F: f64 = 2.5066282746310005;
const SQRT_2PI: f64 = SQRT_2PI_F;

/// erf via power series for small |x|, continued fraction for the tail.
pub fn erf(x: f64) -> f64 {
    if x < 0.0 {
        return -erf(-x);
    }
    if x < 2.5 {
        erf_series(x)
    } else {
        1.0 - erfc_cf(x)
    }
}

pub fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < 2.5 {
        1.0 - erf_series(x)
    } else {
        erfc_cf(x)
    }
}

fn erf_series(x: f64) -> f64 {
    // erf(x) = 2/sqrt(pi) * sum_n (-1)^n x^(2n+1) / (n! (2n+1))
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 1.0;
    loop {
        term *= -x2 / n;
        let contrib = term / (2.0 * n + 1.0);
        sum += contrib;
        if contrib.abs() < 1e-18 * sum.abs().max(1e-300) {
            break;
        }
        n += 1.0;
        if n > 200.0 {
            break;
        }
    }
    (2.0 / std::f64::consts::PI.sqrt()) * sum
}

/// Continued fraction for erfc(x), x >= ~2 (modified Lentz).
fn erfc_cf(x: f64) -> f64 {
    let tiny = 1e-300;
    let mut f = tiny;
    let mut c = f;
    let mut d = 0.0;
    // erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + 1/2/(x + 1/(x + 3/2/(x + ...))))
    for i in 0..200 {
        let a = if i == 0 { 1.0 } else { i as f64 / 2.0 };
        let b = x;
        d = b + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-17 {
            break;
        }
    }
    (-x * x).exp() / std::f64::consts::PI.sqrt() * f
}

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / SQRT_2PI
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

/// Inverse standard-normal CDF on (0, 1).
///
/// Returns -inf / +inf at exactly 0 / 1 and NaN outside [0, 1]; callers that
/// need a strict domain check do it themselves.
pub fn normal_inv_cdf(p: f64) -> f64 {
    if p <= 0.0 {
        return if p == 0.0 {
            f64::NEG_INFINITY
        } else {
            f64::NAN
        };
    }
    if p >= 1.0 {
        return if p == 1.0 { f64::INFINITY } else { f64::NAN };
    }
    let mut z = acklam(p);
    // Two Halley refinements push the rational approximation to full
    // double precision.
    for _ in 0..2 {
        let e = normal_cdf(z) - p;
        let u = e * SQRT_2PI * (0.5 * z * z).exp();
        z -= u / (1.0 + 0.5 * z * u);
    }
    z
}

/// Acklam's rational approximation, |relative error| < 1.15e-9.
fn acklam(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.38357751867269e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_known_values() {
        assert!((erf(1.0) - 0.8427007929497149).abs() < 1e-14);
        assert!((erf(2.0) - 0.9953222650189527).abs() < 1e-14);
        assert!((erf(-1.0) + 0.8427007929497149).abs() < 1e-14);
        assert!((erfc(3.0) - 2.209049699858544e-05).abs() < 1e-18);
    }

    #[test]
    fn cdf_known_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.959963984540054) - 0.975).abs() < 1e-13);
        assert!((normal_cdf(-1.0) - 0.15865525393145705).abs() < 1e-14);
    }

    #[test]
    fn quantile_round_trip() {
        for &p in &[
            1e-8,
            1e-4,
            0.02,
            0.1,
            0.3,
            0.5,
            0.7,
            0.9,
            0.975,
            0.9999,
            1.0 - 1e-9,
        ] {
            let z = normal_inv_cdf(p);
            assert!(
                (normal_cdf(z) - p).abs() < 1e-12 * p.max(1e-3),
                "p={p} z={z} back={}",
                normal_cdf(z)
            );
        }
        assert_eq!(normal_inv_cdf(0.5), 0.0);
        assert!((normal_inv_cdf(0.975) - 1.959963984540054).abs() < 1e-11);
        assert!(normal_inv_cdf(0.0).is_infinite());
        assert!(normal_inv_cdf(1.0).is_infinite());
    }
}
