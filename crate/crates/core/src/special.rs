//! Exponentially scaled modified Bessel functions `Ĩ_ν(z) = e^{−z} I_ν(z)` of real
//! order, log-Gamma and Gaussian absolute moments.

use std::f64::consts::PI;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma, ln_gamma};

use crate::error::{Error, Result};

/// Orders at or above this use the uniform (Debye) expansion.
const DEBYE_MIN_NU: f64 = 25.0;
const DEBYE_TERMS: usize = 14;
/// Past this argument the power series is not attempted as a fallback.
const SERIES_FALLBACK_MAX_Z: f64 = 500.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BesselAccuracy {
    pub rel_tol: f64,
    pub series_switch_z: f64,
    pub max_terms: usize,
}

impl Default for BesselAccuracy {
    fn default() -> Self {
        BesselAccuracy {
            rel_tol: 1e-14,
            series_switch_z: 30.0,
            max_terms: 600,
        }
    }
}

impl BesselAccuracy {
    pub fn validate(&self) -> Result<()> {
        if !(1e-15..=1e-6).contains(&self.rel_tol) {
            return Err(Error::invalid("bessel rel_tol must lie in [1e-15, 1e-6]"));
        }
        if self.max_terms < 50 {
            return Err(Error::invalid("bessel max_terms must be ≥ 50"));
        }
        if !(self.series_switch_z > 0.0) {
            return Err(Error::invalid("series_switch_z must be positive"));
        }
        Ok(())
    }
}

/// `e^{−z} I_ν(z)` for `ν ≥ 0`, `z ≥ 0`.
///
/// Regimes: uniform expansion for `ν ≥ 25`; ascending series for
/// `z ≤ series_switch_z`; Hankel expansion beyond, falling back to the series when
/// the expansion stalls at moderate `z`.
pub fn bessel_i_scaled(nu: f64, z: f64, acc: &BesselAccuracy) -> Result<f64> {
    if !(nu >= 0.0 && nu.is_finite()) {
        return Err(Error::invalid(format!("bessel order must be ≥ 0, got {nu}")));
    }
    if !(z >= 0.0) || z.is_nan() {
        return Err(Error::invalid(format!("bessel argument must be ≥ 0, got {z}")));
    }
    if z == 0.0 {
        return Ok(if nu == 0.0 { 1.0 } else { 0.0 });
    }
    if z.is_infinite() {
        return Ok(0.0);
    }
    if nu >= DEBYE_MIN_NU {
        return debye(nu, z, acc);
    }
    if z <= acc.series_switch_z.max(nu) {
        return series(nu, z, acc);
    }
    match hankel(nu, z, acc) {
        Some(v) => Ok(v),
        None if z <= SERIES_FALLBACK_MAX_Z => series(nu, z, acc),
        None => Err(Error::NonConvergent {
            what: "bessel asymptotic expansion",
            terms: acc.max_terms,
        }),
    }
}

fn series(nu: f64, z: f64, acc: &BesselAccuracy) -> Result<f64> {
    let half = 0.5 * z;
    let mut t = (half.powf(nu) / gamma(nu + 1.0)) * (-z).exp();
    if !(t.is_normal()) {
        t = (nu * half.ln() - ln_gamma(nu + 1.0) - z).exp();
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    let q = half * half;
    let mut sum = t;
    for m in 1..acc.max_terms {
        let mf = m as f64;
        t *= q / (mf * (nu + mf));
        sum += t;
        if t <= 0.25 * acc.rel_tol * sum && mf > half {
            return Ok(sum);
        }
    }
    Err(Error::NonConvergent {
        what: "bessel power series",
        terms: acc.max_terms,
    })
}

fn hankel(nu: f64, z: f64, acc: &BesselAccuracy) -> Option<f64> {
    let mu = 4.0 * nu * nu;
    let mut t = 1.0f64;
    let mut sum = 1.0;
    let mut largest = 1.0f64;
    for k in 1..acc.max_terms {
        let j = (2 * k - 1) as f64;
        let next = -t * (mu - j * j) / (8.0 * k as f64 * z);
        if next.abs() > t.abs() && j * j > mu {
            return None;
        }
        t = next;
        sum += t;
        largest = largest.max(t.abs());
        if t.abs() <= 0.25 * acc.rel_tol * sum.abs() {
            // alternating terms far above the sum leave only rounding noise
            if largest * f64::EPSILON > 0.25 * acc.rel_tol * sum.abs() {
                return None;
            }
            return Some(sum / (2.0 * PI * z).sqrt());
        }
    }
    None
}

/// Coefficients (ascending powers of `p`) of the Debye polynomials `u_0 … u_{n−1}`.
fn debye_polys() -> &'static [Vec<f64>] {
    static POLYS: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    POLYS.get_or_init(|| {
        let mut out = vec![vec![1.0]];
        for k in 0..DEBYE_TERMS - 1 {
            let u = &out[k];
            let mut next = vec![0.0; u.len() + 3];
            // ½ p²(1 − p²) u'
            for (i, &c) in u.iter().enumerate().skip(1) {
                let d = i as f64 * c * 0.5;
                next[i + 1] += d;
                next[i + 3] -= d;
            }
            // ⅛ ∫₀^p (1 − 5t²) u
            for (i, &c) in u.iter().enumerate() {
                next[i + 1] += c / (8.0 * (i + 1) as f64);
                next[i + 3] -= 5.0 * c / (8.0 * (i + 3) as f64);
            }
            out.push(next);
        }
        out
    })
}

fn poly_eval(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &a| acc * x + a)
}

fn debye(nu: f64, z: f64, acc: &BesselAccuracy) -> Result<f64> {
    let x = z / nu;
    let s = x.hypot(1.0);
    let p = 1.0 / s;
    let expo = nu * (1.0 / (s + x) + (x / (1.0 + s)).ln());
    let pre = expo.exp() / ((2.0 * PI * nu).sqrt() * s.sqrt());
    if pre == 0.0 {
        return Ok(0.0);
    }
    let mut sum = 1.0;
    let mut nu_pow = 1.0;
    for u in debye_polys().iter().skip(1) {
        nu_pow /= nu;
        let term = poly_eval(u, p) * nu_pow;
        sum += term;
        if term.abs() <= 0.25 * acc.rel_tol * sum.abs() {
            return Ok(pre * sum);
        }
    }
    Err(Error::NonConvergent {
        what: "bessel uniform expansion",
        terms: DEBYE_TERMS,
    })
}

/// `ln Γ(x)` for `x > 0`.
pub fn gamma_ln(x: f64) -> Result<f64> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::invalid(format!("gamma_ln needs x > 0, got {x}")));
    }
    if x == 1.0 || x == 2.0 {
        return Ok(0.0);
    }
    Ok(ln_gamma(x))
}

/// `E|Z|^p` for a standard normal `Z`.
pub fn gaussian_abs_moment(p: f64) -> Result<f64> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::invalid(format!("gaussian_abs_moment needs p ≥ 1, got {p}")));
    }
    if p == 2.0 {
        return Ok(1.0);
    }
    Ok((0.5 * p * std::f64::consts::LN_2 + gamma_ln(0.5 * (p + 1.0))? - 0.5 * PI.ln()).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn ib(nu: f64, z: f64) -> f64 {
        bessel_i_scaled(nu, z, &BesselAccuracy::default()).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    // 40-digit reference values
    const REFERENCE: &[(f64, f64, f64)] = &[
        (0.0, 0.5, 0.64503527044915006811),
        (0.0, 5.0, 0.18354081260932835307),
        (0.0, 100.0, 0.039944379299096682648),
        (0.5, 1.0, 0.34495131388824462599),
        (1.0, 1e-3, 0.00049950031235422134737),
        (1.0, 10.0, 0.12126268138445551872),
        (2.0 / 3.0, 0.3, 0.23481299942882759907),
        (2.0 / 3.0, 45.0, 0.059341000074811119991),
        (2.0, 29.9, 0.068450933098719714313),
        (2.0, 30.1, 0.068252539689133079409),
        (4.0 / 3.0, 1000.0, 0.012606024507060658155),
        (7.5, 40.0, 0.031111606246628228349),
        (10.0, 35.0, 0.016046187995072186166),
        (24.0, 31.0, 8.7634230781534465324e-6),
        (24.9, 200.0, 0.005979796080132125393),
        (26.0, 10.0, 4.1725303415034070468e-13),
        (25.0, 20.0, 4.924946522021892805431e-8),
        (25.0, 30.0, 3.171541707614191783000e-6),
        (25.0, 100.0, 0.001756199879504869342707),
        (30.0, 1.0, 1.302109498378591443656e-42),
        (50.0, 49.0, 2.244843922977840218295e-12),
        (25.0, 1e4, 0.003866723524801096855345),
        (40.0, 40.0, 4.067946460873373253e-10),
        (100.0, 3.0, 2.217750194481013507e-142),
        (150.0, 500.0, 3.4827041544206012125e-12),
        (333.3, 1e4, 0.000015443778984803643972),
        (2.0, 1e6, 0.00039894153238498418272),
        (0.5, 1e3, 0.012615662610100800241),
        (1.5, 1e-6, 2.6596125430626107646e-10),
        (12.0, 1e-2, 5.0461595540113013773e-37),
    ];

    #[test]
    fn matches_reference_values() {
        for &(nu, z, want) in REFERENCE {
            let got = ib(nu, z);
            assert!(rel(got, want) < 5e-13, "ν={nu} z={z}: {got} vs {want}");
        }
    }

    #[test]
    fn zero_argument() {
        assert_eq!(ib(0.0, 0.0), 1.0);
        assert_eq!(ib(0.7, 0.0), 0.0);
        assert_eq!(ib(30.0, 0.0), 0.0);
    }

    #[test]
    fn rejects_bad_input() {
        let acc = BesselAccuracy::default();
        assert!(bessel_i_scaled(-1.0, 1.0, &acc).is_err());
        assert!(bessel_i_scaled(1.0, -1.0, &acc).is_err());
        assert!(bessel_i_scaled(1.0, f64::NAN, &acc).is_err());
        let bad = BesselAccuracy { rel_tol: 1e-3, ..acc };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn nonconvergent_when_term_cap_too_small() {
        let acc = BesselAccuracy {
            max_terms: 5,
            ..Default::default()
        };
        assert!(matches!(
            bessel_i_scaled(0.3, 25.0, &acc),
            Err(Error::NonConvergent { .. })
        ));
    }

    #[test]
    fn half_integer_closed_forms() {
        let mut z: f64 = 1e-6;
        while z <= 1e3 {
            let e2 = (-2.0 * z).exp_m1();
            // e^{-z} sinh z = -(e^{-2z} - 1)/2
            let sh = -0.5 * e2;
            let ch = 0.5 * (1.0 + (-2.0 * z).exp());
            let c = (2.0 / (PI * z)).sqrt();
            let half = c * sh;
            let three_half = c * (ch - sh / z);
            assert!(rel(ib(0.5, z), half) < 1e-13, "z={z}");
            // the closed form itself cancels for small z
            if z > 1e-2 {
                assert!(rel(ib(1.5, z), three_half) < 1e-11, "z={z}");
            }
            z *= 1.7;
        }
    }

    #[test]
    fn decreasing_in_order() {
        for &z in &[0.1, 0.5, 1.0, 3.0, 10.0, 29.0, 31.0, 60.0, 100.0] {
            let mut prev = ib(0.0, z);
            for i in 1..=40 {
                let v = ib(0.25 * i as f64, z);
                assert!(v < prev, "z={z} ν={}", 0.25 * i as f64);
                prev = v;
            }
        }
    }

    #[test]
    fn recurrence_residual() {
        for &nu in &[1.0, 1.3, 2.5, 7.0, 24.5, 25.2, 40.0] {
            for &z in &[0.2, 3.0, 20.0, 29.5, 35.0, 150.0, 800.0] {
                let lhs = ib(nu - 1.0, z) - ib(nu + 1.0, z);
                let rhs = 2.0 * nu / z * ib(nu, z);
                if rhs > 1e-280 {
                    assert!(rel(lhs, rhs) < 1e-8, "ν={nu} z={z}: {lhs} vs {rhs}");
                }
            }
        }
    }

    #[test]
    fn gamma_ln_values() {
        assert_eq!(gamma_ln(1.0).unwrap(), 0.0);
        assert_eq!(gamma_ln(2.0).unwrap(), 0.0);
        for (x, want) in [
            (0.5, 0.57236494292470008707),
            (3.7, 1.4280723266653881292),
            (10.25, 13.368023671476046295),
            (1e-3, 6.9071788853838536617),
            (150.5, 602.51395487058541195),
        ] {
            assert!(rel(gamma_ln(x).unwrap(), want) < 1e-12, "x={x}");
        }
        assert!(gamma_ln(0.0).is_err());
        assert!(gamma_ln(-2.5).is_err());
    }

    #[test]
    fn gaussian_moments() {
        assert!((gaussian_abs_moment(2.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((gaussian_abs_moment(4.0).unwrap() - 3.0).abs() < 1e-13);
        assert!((gaussian_abs_moment(1.0).unwrap() - 0.7978845608028654).abs() < 1e-14);
        assert!(gaussian_abs_moment(0.5).is_err());
    }

    #[test]
    fn gaussian_moments_against_sampling() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let zs: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        for p in [1.0, 2.0, 3.0, 4.0, 5.5] {
            let xs: Vec<f64> = zs.iter().map(|z: &f64| z.abs().powf(p)).collect();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let se = (var / n).sqrt();
            let exact = gaussian_abs_moment(p).unwrap();
            assert!((mean - exact).abs() <= 3.0 * se, "p={p}: {mean} vs {exact} (se {se})");
        }
    }

    proptest::proptest! {
        #[test]
        fn bounded_by_one_and_positive(nu in 0.0f64..80.0, lz in -3.0f64..4.0) {
            let v = ib(nu, 10f64.powf(lz));
            proptest::prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn continuous_across_regime_switches(nu in 0.0f64..24.0, dz in -1e-12f64..1e-12) {
            let a = ib(nu, 30.0 + dz);
            let b = ib(nu, 30.0);
            proptest::prop_assert!(rel(a, b) < 1e-10);
            let c = ib(24.999_999_999, 20.0);
            let d = ib(25.0, 20.0);
            proptest::prop_assert!(rel(c, d) < 1e-8);
        }
    }
}
