//! Dirichlet heat kernel of the wedge via its angular eigenfunction series.
//!
//! `G(t,x,y) = (κ₀t)^{−1} e^{−(r−ρ)²/4t} Σ_{k≥1} Ĩ_{kα}(rρ/2t) sin(kαϑ) sin(kαφ)`, `α = π/κ₀`.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{distance, polar_to_cart, AngularDomain, GridSpec, PolarGrid, PolarPoint};
use crate::quadrature::{compensated_sum, Kahan};
use crate::special::{bessel_i_scaled, BesselAccuracy};

/// Natural log of the smallest positive normal double.
const LN_TINY: f64 = -708.0;
/// `e^{−40}` is below double rounding relative to the free kernel.
const SHORT_TIME_MARGIN: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub domain: AngularDomain,
    #[serde(default = "KernelConfig::default_tol")]
    pub series_rel_tol: f64,
    #[serde(default = "KernelConfig::default_terms")]
    pub max_series_terms: usize,
    #[serde(default)]
    pub bessel_acc: BesselAccuracy,
    /// Use the free kernel when the boundary is provably invisible at working precision.
    #[serde(default = "KernelConfig::default_shortcut")]
    pub short_time_shortcut: bool,
}

impl KernelConfig {
    fn default_tol() -> f64 {
        1e-14
    }
    fn default_terms() -> usize {
        5000
    }
    fn default_shortcut() -> bool {
        true
    }

    pub fn new(domain: AngularDomain) -> Self {
        KernelConfig {
            domain,
            series_rel_tol: Self::default_tol(),
            max_series_terms: Self::default_terms(),
            bessel_acc: BesselAccuracy::default(),
            short_time_shortcut: true,
        }
    }

    /// Same configuration evaluating the series everywhere.
    pub fn series_only(mut self) -> Self {
        self.short_time_shortcut = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(1e-14..=1e-6).contains(&self.series_rel_tol) {
            return Err(Error::invalid("series_rel_tol must lie in [1e-14, 1e-6]"));
        }
        if self.max_series_terms < 20 {
            return Err(Error::invalid("max_series_terms must be ≥ 20"));
        }
        self.bessel_acc.validate()
    }
}

/// A kernel value with an estimate of its absolute error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelValue {
    pub value: f64,
    /// Truncation tail plus accumulated rounding, in absolute terms.
    pub error: f64,
    pub terms: usize,
}

impl KernelValue {
    fn zero() -> Self {
        KernelValue {
            value: 0.0,
            error: 0.0,
            terms: 0,
        }
    }

    /// The value exceeds its error estimate by at least `factor`.
    pub fn resolved(&self, factor: f64) -> bool {
        self.value > factor * self.error
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::invalid(format!("time must be positive, got {t}")));
    }
    Ok(())
}

fn check_point(domain: &AngularDomain, p: &PolarPoint) -> Result<()> {
    PolarPoint::in_domain(domain, p.r, p.theta).map(|_| ())
}

fn on_boundary(domain: &AngularDomain, p: &PolarPoint) -> bool {
    p.r == 0.0 || p.theta == 0.0 || p.theta == domain.kappa0()
}

/// Euclidean distance from `p` to the two boundary rays.
pub fn dist_to_boundary(domain: &AngularDomain, p: PolarPoint) -> f64 {
    let to_ray = |a: f64| {
        if a >= std::f64::consts::FRAC_PI_2 {
            p.r
        } else {
            p.r * a.sin()
        }
    };
    to_ray(p.theta).min(to_ray(domain.kappa0() - p.theta))
}

/// Tracks the stopping rule shared by point and ring evaluation.
struct Truncation {
    tol: f64,
    term_tol: f64,
    prev_b: f64,
    abs_sum: f64,
    quiet: u32,
}

impl Truncation {
    fn new(tol: f64, bessel_tol: f64) -> Self {
        Truncation {
            tol,
            term_tol: bessel_tol + 8.0 * f64::EPSILON,
            prev_b: f64::INFINITY,
            abs_sum: 0.0,
            quiet: 0,
        }
    }

    /// Feeds the next Bessel magnitude; returns the tail bound once three
    /// consecutive terms are negligible against `scale`.
    fn step(&mut self, b: f64, scale: f64) -> Option<f64> {
        self.abs_sum += b;
        let ratio = if self.prev_b.is_finite() && self.prev_b > 0.0 {
            b / self.prev_b
        } else {
            0.0
        };
        self.prev_b = b;
        let tail = if ratio < 1.0 {
            b * ratio / (1.0 - ratio)
        } else {
            f64::INFINITY
        };
        let floor = self.tol * scale.max(f64::EPSILON * self.abs_sum);
        if b + tail <= floor || b == 0.0 {
            self.quiet += 1;
        } else {
            self.quiet = 0;
        }
        (self.quiet >= 3).then_some(tail)
    }

    fn rounding(&self) -> f64 {
        self.term_tol * self.abs_sum
    }
}

/// `G(t, x, y)`.
pub fn heat_kernel(cfg: &KernelConfig, t: f64, x: PolarPoint, y: PolarPoint) -> Result<f64> {
    heat_kernel_detailed(cfg, t, x, y).map(|v| v.value)
}

/// `G(t, x, y)` with truncation/rounding error estimate.
pub fn heat_kernel_detailed(
    cfg: &KernelConfig,
    t: f64,
    x: PolarPoint,
    y: PolarPoint,
) -> Result<KernelValue> {
    check_time(t)?;
    let d = &cfg.domain;
    check_point(d, &x)?;
    check_point(d, &y)?;
    if on_boundary(d, &x) || on_boundary(d, &y) {
        return Ok(KernelValue::zero());
    }
    let dist = distance(x, y);
    // G never exceeds the free kernel
    if -dist * dist / (4.0 * t) - (4.0 * PI * t).ln() < LN_TINY {
        return Ok(KernelValue::zero());
    }
    if cfg.short_time_shortcut {
        // 0 ≤ K − G ≤ (4πt)^{-1} e^{−d²/4t} with d the larger boundary distance
        let db = dist_to_boundary(d, x).max(dist_to_boundary(d, y));
        let gap = (db * db - dist * dist) / (4.0 * t);
        if gap > SHORT_TIME_MARGIN {
            let k = free_kernel(t, dist);
            return Ok(KernelValue {
                value: k,
                error: k * (-gap).exp(),
                terms: 0,
            });
        }
    }
    let dr = x.r - y.r;
    let pre = (-dr * dr / (4.0 * t)).exp() / (d.kappa0() * t);
    let z = x.r * y.r / (2.0 * t);
    let alpha = d.critical_exponent();
    let mut sum = Kahan::default();
    let mut trunc = Truncation::new(cfg.series_rel_tol, cfg.bessel_acc.rel_tol);
    for k in 1..=cfg.max_series_terms {
        let kf = k as f64;
        let b = bessel_i_scaled(kf * alpha, z, &cfg.bessel_acc)?;
        sum.add(b * ((kf * alpha * x.theta).sin() * (kf * alpha * y.theta).sin()));
        if let Some(tail) = trunc.step(b, sum.sum().abs()) {
            return Ok(KernelValue {
                value: pre * sum.sum(),
                error: pre * (tail + trunc.rounding()),
                terms: k,
            });
        }
    }
    Err(Error::NonConvergent {
        what: "heat kernel series",
        terms: cfg.max_series_terms,
    })
}

/// `G(t, x, (ρ, φ_j))` for all `φ_j` on one circle, sharing the Bessel values.
///
/// Accuracy is relative to the largest entry of the ring.
pub fn heat_kernel_ring(
    cfg: &KernelConfig,
    t: f64,
    x: PolarPoint,
    rho: f64,
    phis: &[f64],
) -> Result<Vec<f64>> {
    check_time(t)?;
    let d = &cfg.domain;
    check_point(d, &x)?;
    let mut out = vec![0.0; phis.len()];
    if on_boundary(d, &x) || rho <= 0.0 {
        return Ok(out);
    }
    let dr = x.r - rho;
    let ln_pre = -dr * dr / (4.0 * t) - (d.kappa0() * t).ln();
    if ln_pre < LN_TINY {
        return Ok(out);
    }
    if cfg.short_time_shortcut {
        let db = dist_to_boundary(d, x);
        if (db * db - dr * dr) / (4.0 * t) > SHORT_TIME_MARGIN {
            for (o, &phi) in out.iter_mut().zip(phis) {
                let y = PolarPoint::new(rho, phi);
                if !on_boundary(d, &y) {
                    *o = free_kernel(t, distance(x, y));
                }
            }
            return Ok(out);
        }
    }
    let pre = ln_pre.exp();
    let z = x.r * rho / (2.0 * t);
    let alpha = d.critical_exponent();

    // sin(kαφ) by the three-term recurrence
    let two_cos: Vec<f64> = phis.iter().map(|&p| 2.0 * (alpha * p).cos()).collect();
    let mut s_prev = vec![0.0; phis.len()];
    let mut s_cur: Vec<f64> = phis.iter().map(|&p| (alpha * p).sin()).collect();
    let mut sums = vec![Kahan::default(); phis.len()];
    let mut trunc = Truncation::new(cfg.series_rel_tol, cfg.bessel_acc.rel_tol);
    let mut done = false;
    for k in 1..=cfg.max_series_terms {
        let kf = k as f64;
        let b = bessel_i_scaled(kf * alpha, z, &cfg.bessel_acc)?;
        let c = b * (kf * alpha * x.theta).sin();
        let mut scale = 0.0f64;
        for j in 0..phis.len() {
            sums[j].add(c * s_cur[j]);
            scale = scale.max(sums[j].sum().abs());
            let next = two_cos[j] * s_cur[j] - s_prev[j];
            s_prev[j] = s_cur[j];
            s_cur[j] = next;
        }
        if trunc.step(b, scale).is_some() {
            done = true;
            break;
        }
    }
    if !done {
        return Err(Error::NonConvergent {
            what: "heat kernel ring series",
            terms: cfg.max_series_terms,
        });
    }
    for (j, (o, s)) in out.iter_mut().zip(&sums).enumerate() {
        *o = if on_boundary(d, &PolarPoint::new(rho, phis[j])) {
            0.0
        } else {
            pre * s.sum()
        };
    }
    Ok(out)
}

/// `K(t, z) = (4πt)^{−1} e^{−|z|²/4t}`.
pub fn free_kernel(t: f64, dist: f64) -> f64 {
    (-dist * dist / (4.0 * t)).exp() / (4.0 * PI * t)
}

/// Closed-form kernels from reflections, for `κ₀ = π` and `κ₀ = π/2`.
pub fn image_kernel_oracle(kappa0: f64, t: f64, x: PolarPoint, y: PolarPoint) -> Result<f64> {
    check_time(t)?;
    let half_plane = ((kappa0 - PI) / PI).abs() < 1e-12;
    let quadrant = ((kappa0 - PI / 2.0) / PI).abs() < 1e-12;
    if !(half_plane || quadrant) {
        return Err(Error::invalid(format!(
            "image oracle only covers κ₀ = π and π/2, got {kappa0}"
        )));
    }
    let (x1, x2) = polar_to_cart(x);
    let (y1, y2) = polar_to_cart(y);
    let base = free_kernel(t, distance(x, y));
    // K(x−y) − K(x−ȳ) = K(x−y)(1 − e^{−x₂y₂/t})
    let f2 = -(-x2 * y2 / t).exp_m1();
    if half_plane {
        Ok(base * f2)
    } else {
        Ok(base * f2 * -(-x1 * y1 / t).exp_m1())
    }
}

/// `∫ G(t, x, y) dy` over the grid's part of the wedge.
pub fn kernel_mass(cfg: &KernelConfig, t: f64, x: PolarPoint, quad: &GridSpec) -> Result<f64> {
    let grid = PolarGrid::new(&cfg.domain, quad)?;
    integrate_against_kernel(cfg, t, x, &grid, |_, _| 1.0)
}

/// `∫ G(t, x, y) h(ρ, j) dy` where `j` indexes the grid angles.
pub fn integrate_against_kernel<H>(
    cfg: &KernelConfig,
    t: f64,
    x: PolarPoint,
    grid: &PolarGrid,
    h: H,
) -> Result<f64>
where
    H: Fn(usize, usize) -> f64 + Sync,
{
    let per_radius: Result<Vec<f64>> = (0..grid.n_radii())
        .into_par_iter()
        .map(|i| {
            let rho = grid.radii()[i];
            let ring = heat_kernel_ring(cfg, t, x, rho, grid.angles())?;
            let s = compensated_sum(
                ring.iter()
                    .zip(grid.angular_weights())
                    .enumerate()
                    .map(|(j, (g, w))| g * w * h(i, j)),
            );
            Ok(s * rho * grid.radial_weights()[i])
        })
        .collect();
    let v = compensated_sum(per_radius?);
    if !v.is_finite() {
        return Err(Error::NonFinite("kernel integral".into()));
    }
    Ok(v)
}

/// Radial window `[lo, hi]` outside which `G(t, x, ·)` is below `e^{−spread}` of its peak
/// scale; `lo` is clipped at `floor`.
pub fn radial_window(r: f64, t: f64, spread: f64, floor: f64) -> (f64, f64) {
    let w = (4.0 * spread * t).sqrt();
    ((r - w).max(floor), r + w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(kappa0: f64) -> KernelConfig {
        KernelConfig::new(AngularDomain::new(kappa0).unwrap())
    }

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn half_plane_example() {
        let c = cfg(PI);
        let p = PolarPoint::new(1.0, PI / 2.0);
        let g = heat_kernel(&c, 1.0, p, p).unwrap();
        assert!(rel(g, 0.050302555783788087539) < 1e-13, "{g}");
        let o = image_kernel_oracle(PI, 1.0, p, p).unwrap();
        assert!(rel(o, 0.050302555783788087539) < 1e-14);
    }

    #[test]
    fn boundary_and_vertex_give_zero() {
        for k in [0.7, PI, 4.0] {
            let c = cfg(k);
            let y = PolarPoint::new(0.8, 0.3);
            assert_eq!(heat_kernel(&c, 1.0, PolarPoint::new(1.0, 0.0), y).unwrap(), 0.0);
            assert_eq!(heat_kernel(&c, 1.0, PolarPoint::new(1.0, k), y).unwrap(), 0.0);
            assert_eq!(heat_kernel(&c, 1.0, PolarPoint::new(0.0, 0.2), y).unwrap(), 0.0);
        }
        let o = image_kernel_oracle(PI, 0.3, PolarPoint::new(1.0, 0.0), PolarPoint::new(1.0, 1.0));
        assert_eq!(o.unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let c = cfg(1.0);
        let p = PolarPoint::new(1.0, 0.5);
        assert!(heat_kernel(&c, 0.0, p, p).is_err());
        assert!(heat_kernel(&c, 1.0, PolarPoint::new(1.0, 1.5), p).is_err());
        assert!(image_kernel_oracle(1.0, 1.0, p, p).is_err());
        let mut bad = c;
        bad.max_series_terms = 5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn quadrant_matches_images() {
        let c = cfg(PI / 2.0);
        for &(r, th, rho, ph) in &[
            (1.0, 0.3, 0.7, 1.2),
            (0.2, 0.1, 0.5, 0.9),
            (2.0, 0.8, 2.3, 0.7),
            (0.05, 1.5, 0.9, 0.01),
        ] {
            let (x, y) = (PolarPoint::new(r, th), PolarPoint::new(rho, ph));
            let g = heat_kernel(&c, 0.5, x, y).unwrap();
            let o = image_kernel_oracle(PI / 2.0, 0.5, x, y).unwrap();
            assert!(rel(g, o) < 1e-10, "{g} vs {o}");
        }
    }

    #[test]
    fn ring_matches_pointwise() {
        let c = cfg(3.0 * PI / 2.0);
        let x = PolarPoint::new(0.9, 2.0);
        let phis: Vec<f64> = (1..20).map(|j| j as f64 * c.domain.kappa0() / 20.0).collect();
        let ring = heat_kernel_ring(&c, 0.4, x, 1.1, &phis).unwrap();
        let max = ring.iter().cloned().fold(0.0, f64::max);
        for (g, &p) in ring.iter().zip(&phis) {
            let v = heat_kernel(&c, 0.4, x, PolarPoint::new(1.1, p)).unwrap();
            assert!((g - v).abs() < 1e-12 * max);
        }
    }

    #[test]
    fn truncation_cap_is_reported() {
        let mut c = cfg(PI).series_only();
        c.max_series_terms = 20;
        let p = PolarPoint::new(10.0, 1.0);
        let e = heat_kernel(&c, 1e-2, p, p);
        assert!(matches!(e, Err(Error::NonConvergent { .. })));
    }

    #[test]
    fn short_time_shortcut_agrees_with_series() {
        let c = cfg(PI / 2.0);
        let x = PolarPoint::new(1.0, 0.7);
        let y = PolarPoint::new(1.02, 0.71);
        for t in [1e-3, 2e-3] {
            let a = heat_kernel_detailed(&c, t, x, y).unwrap();
            let b = heat_kernel_detailed(&c.series_only(), t, x, y).unwrap();
            assert_eq!(a.terms, 0);
            assert!(b.terms > 0);
            assert!(rel(a.value, b.value) < 1e-13);
        }
        // tiny time, deep interior: series alone would exceed the term cap
        let v = heat_kernel(&c, 1e-9, x, y).unwrap();
        assert_eq!(v, free_kernel(1e-9, distance(x, y)));
        assert!(heat_kernel(&c.series_only(), 1e-9, x, PolarPoint::new(1.0, 0.70001)).is_err());
    }

    #[test]
    fn boundary_distance() {
        let d = AngularDomain::new(3.0 * PI / 2.0).unwrap();
        assert!((dist_to_boundary(&d, PolarPoint::new(2.0, 0.3)) - 2.0 * 0.3f64.sin()).abs() < 1e-15);
        assert_eq!(dist_to_boundary(&d, PolarPoint::new(2.0, 3.0 * PI / 4.0)), 2.0);
        let q = AngularDomain::new(PI / 2.0).unwrap();
        let v = dist_to_boundary(&q, PolarPoint::new(1.0, PI / 4.0));
        assert!((v - (PI / 4.0).sin()).abs() < 1e-15);
    }

    #[test]
    fn far_apart_underflows_to_zero() {
        let c = cfg(PI);
        let v = heat_kernel(&c, 1e-3, PolarPoint::new(1.0, 0.5), PolarPoint::new(9.0, 2.5));
        assert_eq!(v.unwrap(), 0.0);
    }

    #[test]
    fn half_plane_mass() {
        let c = cfg(PI);
        let x = PolarPoint::new(1.0, PI / 2.0);
        let quad = GridSpec::new(1e-6, 16.0, 96, 48).with_grading(1.0).with_points(4);
        let m = kernel_mass(&c, 1.0, x, &quad).unwrap();
        assert!((m - 0.52049987781304653768).abs() < 1e-6, "{m}");
    }

    proptest::proptest! {
        #[test]
        fn symmetric_and_nonnegative(
            kappa0 in 0.3f64..6.2, lt in -2.0f64..1.0,
            lr in -2.0f64..1.0, lrho in -2.0f64..1.0, a in 0.01f64..0.99, b in 0.01f64..0.99,
        ) {
            let c = cfg(kappa0);
            let x = PolarPoint::new(10f64.powf(lr), a * kappa0);
            let y = PolarPoint::new(10f64.powf(lrho), b * kappa0);
            let t = 10f64.powf(lt);
            let g1 = heat_kernel_detailed(&c, t, x, y).unwrap();
            let g2 = heat_kernel(&c, t, y, x).unwrap();
            proptest::prop_assert!((g1.value - g2).abs() <= 1e-12 * g1.value.max(1e-300));
            proptest::prop_assert!(g1.value >= -1e-12);
            proptest::prop_assert!(g1.value <= free_kernel(t, distance(x, y)) + g1.error + 1e-300);
        }

        #[test]
        fn dilation_invariance(lr in -2.0f64..1.0, a in 0.05f64..0.95, la in -1.2f64..1.2) {
            let c = cfg(1.3 * PI);
            let x = PolarPoint::new(10f64.powf(lr), a * c.domain.kappa0());
            let y = PolarPoint::new(0.6, 1.0);
            let s = 10f64.powf(la);
            let g = heat_kernel(&c, 0.7, x, y).unwrap();
            let gs = heat_kernel(&c, s * s * 0.7, PolarPoint::new(s * x.r, x.theta), PolarPoint::new(s * y.r, y.theta)).unwrap();
            proptest::prop_assert!(rel(s * s * gs, g) < 1e-12);
        }
    }
}
