//! Modified Bessel functions and divergences between the fitted
//! distributions.

use std::f64::consts::PI;

const SERIES_LIMIT: f64 = 40.0;

/// Power series of `I_nu(x)` for nu in {0, 1}.
fn bessel_series(nu: u32, x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = if nu == 0 { 1.0 } else { 0.5 * x };
    let mut sum = term;
    let mut m = 0.0;
    loop {
        m += 1.0;
        term *= q / (m * (m + nu as f64));
        sum += term;
        if term < sum * 1e-17 {
            return sum;
        }
    }
}

/// `I_nu(x) * sqrt(2 pi x) * exp(-x)` from the large-argument expansion.
fn bessel_asymptotic_scaled(nu: u32, x: f64) -> f64 {
    let mu = 4.0 * (nu * nu) as f64;
    let mut term = 1.0;
    let mut sum = 1.0;
    for j in 1..30 {
        let jf = j as f64;
        let odd = 2.0 * jf - 1.0;
        let next = -term * (mu - odd * odd) / (jf * 8.0 * x);
        if next.abs() > term.abs() {
            break;
        }
        term = next;
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    sum
}

/// Natural log of the modified Bessel function `I_0`.
pub fn ln_bessel_i0(x: f64) -> f64 {
    let x = x.abs();
    if x < SERIES_LIMIT {
        bessel_series(0, x).ln()
    } else {
        x - 0.5 * (2.0 * PI * x).ln() + bessel_asymptotic_scaled(0, x).ln()
    }
}

/// Mean resultant length of a von Mises distribution: `I_1(x) / I_0(x)`.
pub fn bessel_ratio(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let sign = x.signum();
    let x = x.abs();
    let r = if x < SERIES_LIMIT {
        bessel_series(1, x) / bessel_series(0, x)
    } else {
        bessel_asymptotic_scaled(1, x) / bessel_asymptotic_scaled(0, x)
    };
    sign * r
}

/// Largest concentration returned by [`concentration_from_resultant`].
pub const MAX_CONCENTRATION: f64 = 1e6;

/// Inverts [`bessel_ratio`]: the von Mises concentration whose mean
/// resultant length is `r`.
pub fn concentration_from_resultant(r: f64) -> f64 {
    if r <= 0.0 {
        return 0.0;
    }
    if r >= bessel_ratio(MAX_CONCENTRATION) {
        return MAX_CONCENTRATION;
    }
    // Best & Fisher starting point, then Newton on A(k) = r.
    let mut k = if r < 0.53 {
        2.0 * r + r.powi(3) + 5.0 * r.powi(5) / 6.0
    } else if r < 0.85 {
        -0.4 + 1.39 * r + 0.43 / (1.0 - r)
    } else {
        1.0 / (r.powi(3) - 4.0 * r * r + 3.0 * r)
    };
    for _ in 0..50 {
        let a = bessel_ratio(k);
        let slope = 1.0 - a / k - a * a;
        if slope <= 0.0 {
            break;
        }
        let next = (k - (a - r) / slope).clamp(0.5 * k, 2.0 * k);
        if (next - k).abs() <= 1e-14 * k {
            k = next;
            break;
        }
        k = next;
    }
    k.min(MAX_CONCENTRATION)
}

/// KL divergence between von Mises distributions `VM(mu1, k1) || VM(mu2, k2)`.
pub fn von_mises_kl(mu1: f64, k1: f64, mu2: f64, k2: f64) -> f64 {
    let a1 = bessel_ratio(k1);
    (ln_bessel_i0(k2) - ln_bessel_i0(k1) + a1 * (k1 - k2 * (mu1 - mu2).cos())).max(0.0)
}

/// `E[ln(1 - u^a)]` for `u ~ Beta(1, k)`, by composite Simpson in `v = 1 - u`.
fn expected_log_one_minus_power(a: f64, k: usize) -> f64 {
    const PANELS: usize = 4000;
    let kf = k as f64;
    let f = |v: f64| {
        if v <= 0.0 {
            return 0.0;
        }
        let u = 1.0 - v;
        let inner = if u <= 0.0 { 0.0 } else { (a * u.ln()).exp() };
        kf * v.powi(k as i32 - 1) * (-inner).ln_1p()
    };
    let h = 1.0 / PANELS as f64;
    let mut s = f(0.0) + f(1.0);
    for i in 1..PANELS {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(i as f64 * h);
    }
    s * h / 3.0
}

fn harmonic(k: usize) -> f64 {
    (1..=k).map(|i| 1.0 / i as f64).sum()
}

/// KL divergence between the neighbor-distance-ratio densities
/// `g(r; k, d) = k d r^(d-1) (1 - r^d)^(k-1)` at `d1` and `d2`.
pub fn distance_ratio_kl(k: usize, d1: f64, d2: f64) -> f64 {
    let e_log_r = -harmonic(k) / d1;
    let self_term = expected_log_one_minus_power(1.0, k);
    let cross = expected_log_one_minus_power(d2 / d1, k);
    ((d1 / d2).ln() + (d1 - d2) * e_log_r + (k as f64 - 1.0) * (self_term - cross)).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bessel_reference_values() {
        // I0(1), I0(10), I1(1) / I0(1).
        assert!((ln_bessel_i0(1.0) - 1.266_065_877_752_008_4_f64.ln()).abs() < 1e-14);
        assert!((ln_bessel_i0(10.0) - 2815.716_628_466_254_f64.ln()).abs() < 1e-13);
        assert!((bessel_ratio(1.0) - 0.565_159_103_992_485_f64 / 1.266_065_877_752_008_4).abs() < 1e-14);
        assert_eq!(ln_bessel_i0(0.0), 0.0);
    }

    #[test]
    fn series_and_expansion_agree_at_the_switch() {
        let below = bessel_series(0, SERIES_LIMIT).ln();
        let above = SERIES_LIMIT - 0.5 * (2.0 * PI * SERIES_LIMIT).ln()
            + bessel_asymptotic_scaled(0, SERIES_LIMIT).ln();
        assert!((below - above).abs() < 1e-12);
        let r_below = bessel_series(1, SERIES_LIMIT) / bessel_series(0, SERIES_LIMIT);
        let r_above = bessel_asymptotic_scaled(1, SERIES_LIMIT) / bessel_asymptotic_scaled(0, SERIES_LIMIT);
        assert!((r_below - r_above).abs() < 1e-13);
    }

    #[test]
    fn concentration_inverts_ratio() {
        for k in [0.01, 0.3, 1.0, 2.5, 7.0, 40.0, 300.0, 5000.0] {
            let back = concentration_from_resultant(bessel_ratio(k));
            assert!((back - k).abs() < 1e-8 * k, "{k} -> {back}");
        }
    }

    #[test]
    fn von_mises_kl_matches_quadrature() {
        let (m1, k1, m2, k2) = (0.4, 2.0, 1.1, 0.7);
        let logpdf = |t: f64, m: f64, k: f64| k * (t - m).cos() - (2.0 * PI).ln() - ln_bessel_i0(k);
        let n = 20_000;
        let h = 2.0 * PI / n as f64;
        let numeric: f64 = (0..n)
            .map(|i| {
                let t = -PI + (i as f64 + 0.5) * h;
                let lp = logpdf(t, m1, k1);
                lp.exp() * (lp - logpdf(t, m2, k2)) * h
            })
            .sum();
        assert!((von_mises_kl(m1, k1, m2, k2) - numeric).abs() < 1e-10);
        assert_eq!(von_mises_kl(0.3, 4.0, 0.3, 4.0), 0.0);
    }

    #[test]
    fn distance_kl_matches_monte_carlo() {
        let (k, d1, d2) = (10, 3.0, 4.5);
        assert!(distance_ratio_kl(k, d1, d1).abs() < 1e-15);
        let logg = |r: f64, d: f64| (k as f64).ln() + d.ln() + (d - 1.0) * r.ln() + (k as f64 - 1.0) * (1.0 - r.powf(d)).ln();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 400_000;
        let mut acc = 0.0;
        for _ in 0..n {
            // Inverse CDF: F(r) = 1 - (1 - r^d)^k.
            let p: f64 = rng.random();
            let r = (1.0 - (1.0 - p).powf(1.0 / k as f64)).powf(1.0 / d1);
            acc += logg(r, d1) - logg(r, d2);
        }
        let mc = acc / n as f64;
        let exact = distance_ratio_kl(k, d1, d2);
        assert!((exact - mc).abs() < 5e-3, "{exact} vs {mc}");
    }
}
