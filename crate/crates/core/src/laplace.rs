//! Zero-mean Laplace density with scale `s`, `p(x) = exp(-|x|/s) / (2s)`,
//! integrated over unit-width bins centred on the residual.

use std::f64::consts::LN_2;

/// Cumulative distribution function of Laplace(0, `scale`).
pub fn cdf(x: f64, scale: f64) -> f64 {
    if x < 0.0 {
        0.5 * (x / scale).exp()
    } else {
        1.0 - 0.5 * (-x / scale).exp()
    }
}

/// Peak of the density, reached at the mean.
pub fn peak_density(scale: f64) -> f64 {
    0.5 / scale
}

/// Probability mass of the bin `[v - 0.5, v + 0.5]`.
pub fn bin_mass(v: f64, scale: f64) -> f64 {
    bin_ln_mass(v, scale).exp()
}

fn bin_ln_mass(v: f64, scale: f64) -> f64 {
    let a = v.abs();
    if a >= 0.5 {
        (0.5f64).ln() - (a - 0.5) / scale + (-(-1.0 / scale).exp_m1()).ln()
    } else {
        let e1 = (-(0.5 + a) / scale).exp();
        let e2 = (-(0.5 - a) / scale).exp();
        (-0.5 * (e1 + e2)).ln_1p()
    }
}

/// Bits needed for a value `v` away from the mean: `-log2 P(bin)`.
pub fn bin_bits(v: f64, scale: f64) -> f64 {
    -bin_ln_mass(v, scale) / LN_2
}

/// `(bits, d bits / d v, d bits / d scale)`.
pub fn bin_bits_with_grad(v: f64, scale: f64) -> (f64, f64, f64) {
    let a = v.abs();
    let sign = if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    };
    let s2 = scale * scale;
    if a >= 0.5 {
        let bits = bin_bits(v, scale);
        let d_a = 1.0 / (scale * LN_2);
        let d_ln_s = (a - 0.5) / s2 - (1.0 / s2) / (1.0 / scale).exp_m1();
        (bits, sign * d_a, -d_ln_s / LN_2)
    } else {
        let e1 = (-(0.5 + a) / scale).exp();
        let e2 = (-(0.5 - a) / scale).exp();
        let half = 0.5 * (e1 + e2);
        let p = 1.0 - half;
        let bits = -(-half).ln_1p() / LN_2;
        let dp_da = 0.5 / scale * (e1 - e2);
        let dp_ds = -0.5 * (e1 * (0.5 + a) + e2 * (0.5 - a)) / s2;
        let k = -1.0 / (p * LN_2);
        (bits, sign * k * dp_da, k * dp_ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_residual_unit_scale() {
        // -log2(1 - e^-0.5)
        let expected = -(1.0 - (-0.5f64).exp()).log2();
        assert!((bin_bits(0.0, 1.0) - expected).abs() < 1e-12);
        assert!((bin_bits(0.0, 1.0) - 1.3457).abs() < 1e-4);
    }

    #[test]
    fn mass_matches_cdf_difference() {
        for &s in &[0.11, 0.5, 1.0, 3.7, 40.0] {
            for k in -6..=6 {
                let v = k as f64 * 0.37;
                let direct = cdf(v + 0.5, s) - cdf(v - 0.5, s);
                assert!((bin_mass(v, s) - direct).abs() < 1e-12, "s={s} v={v}");
            }
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let h = 1e-6;
        for &s in &[0.11, 0.3, 1.0, 5.0] {
            for &v in &[-2.3, -0.7, -0.2, 0.0, 0.1, 0.45, 0.55, 1.9, 7.0] {
                let (_, dv, ds) = bin_bits_with_grad(v, s);
                let fd_v = (bin_bits(v + h, s) - bin_bits(v - h, s)) / (2.0 * h);
                let fd_s = (bin_bits(v, s + h) - bin_bits(v, s - h)) / (2.0 * h);
                assert!((dv - fd_v).abs() < 1e-5 * (1.0 + fd_v.abs()), "dv s={s} v={v}");
                assert!((ds - fd_s).abs() < 1e-5 * (1.0 + fd_s.abs()), "ds s={s} v={v}");
            }
        }
    }

    #[test]
    fn bits_non_decreasing_in_magnitude() {
        for &s in &[0.11, 1.0, 9.0] {
            let mut prev = -1.0;
            for k in 0..=10 {
                let b = bin_bits(k as f64, s);
                assert!(b >= prev);
                prev = b;
            }
        }
    }
}
