//! Weight-parameter arithmetic and vertex-weighted `L_p` / first-order Sobolev norms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AngularDomain, PolarGrid};
use crate::quadrature::Kahan;

/// Integrability exponent `p` and weight exponent `θ`; the measure is `|x|^{θ−2} dx`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightParams {
    pub p: f64,
    pub theta: f64,
}

impl WeightParams {
    /// Deterministic context: `p > 1`.
    pub fn new(p: f64, theta: f64) -> Result<Self> {
        check_p(p)?;
        if !theta.is_finite() {
            return Err(Error::invalid("theta must be finite"));
        }
        Ok(WeightParams { p, theta })
    }

    /// Stochastic context: `p ≥ 2`.
    pub fn stochastic(p: f64, theta: f64) -> Result<Self> {
        if !(p >= 2.0) {
            return Err(Error::invalid(format!("stochastic estimates need p ≥ 2, got {p}")));
        }
        Self::new(p, theta)
    }

    pub fn derived(&self) -> DerivedParams {
        let p_dual = self.p / (self.p - 1.0);
        DerivedParams {
            mu: 1.0 + (self.theta - 2.0) / self.p,
            p_dual,
            theta_dual: p_dual * (2.0 - self.theta / self.p),
        }
    }

    /// `(p′, θ′)` with `1/p + 1/p′ = 1` and `θ/p + θ′/p′ = 2`.
    pub fn dual(&self) -> WeightParams {
        let d = self.derived();
        WeightParams {
            p: d.p_dual,
            theta: d.theta_dual,
        }
    }

    /// Whether `θ` lies in the open admissible interval for `domain`.
    pub fn is_admissible(&self, domain: &AngularDomain) -> bool {
        theta_admissible_range(self.p, domain)
            .map(|r| r.contains(self.theta))
            .unwrap_or(false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedParams {
    pub mu: f64,
    pub p_dual: f64,
    pub theta_dual: f64,
}

/// An open interval `(lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpenInterval {
    pub lo: f64,
    pub hi: f64,
}

impl OpenInterval {
    pub fn contains(&self, v: f64) -> bool {
        self.lo < v && v < self.hi
    }
}

fn check_p(p: f64) -> Result<()> {
    if !(p > 1.0 && p.is_finite()) {
        return Err(Error::invalid(format!("p must exceed 1, got {p}")));
    }
    Ok(())
}

/// `(p(1 − π/κ₀), p(1 + π/κ₀))`.
pub fn theta_admissible_range(p: f64, domain: &AngularDomain) -> Result<OpenInterval> {
    check_p(p)?;
    let a = domain.critical_exponent();
    Ok(OpenInterval {
        lo: p * (1.0 - a),
        hi: p * (1.0 + a),
    })
}

/// `(2(1 − 1/p) − π/κ₀, 2(1 − 1/p) + π/κ₀)`, the image of the θ-range under `θ ↦ μ`.
pub fn mu_range(p: f64, domain: &AngularDomain) -> Result<OpenInterval> {
    check_p(p)?;
    let a = domain.critical_exponent();
    let c = 2.0 * (1.0 - 1.0 / p);
    Ok(OpenInterval { lo: c - a, hi: c + a })
}

/// `p(1 − π/κ₀)`.
pub fn grisvard_lower_bound(p: f64, domain: &AngularDomain) -> Result<f64> {
    check_p(p)?;
    Ok(p * (1.0 - domain.critical_exponent()))
}

/// Evaluates both forms of the lower-bound condition,
/// `1 + (2 − θ)/p < 2/p + π/κ₀` and `θ > p(1 − π/κ₀)`.
pub fn grisvard_conditions(p: f64, theta: f64, domain: &AngularDomain) -> Result<(bool, bool)> {
    let a = domain.critical_exponent();
    let embedding = 1.0 + (2.0 - theta) / p < 2.0 / p + a;
    Ok((embedding, theta > grisvard_lower_bound(p, domain)?))
}

/// `∫₀^{κ₀} |sin(πϑ/κ₀)|^p dϑ = κ₀ Γ((p+1)/2) / (√π Γ(p/2+1))`.
pub fn sine_power_integral(kappa0: f64, p: f64) -> Result<f64> {
    use crate::special::gamma_ln;
    let l = gamma_ln(0.5 * (p + 1.0))? - gamma_ln(0.5 * p + 1.0)? - 0.5 * std::f64::consts::PI.ln();
    Ok(kappa0 * l.exp())
}

fn check_len(values: &[f64], grid: &PolarGrid) -> Result<()> {
    if values.len() != grid.len() {
        return Err(Error::invalid(format!(
            "field has {} values for a grid of {} nodes",
            values.len(),
            grid.len()
        )));
    }
    Ok(())
}

/// `∫ |v|^p |x|^{θ−2} dx` over the grid (no `1/p` root).
pub fn weighted_lp_integral(values: &[f64], params: &WeightParams, grid: &PolarGrid) -> Result<f64> {
    check_len(values, grid)?;
    let mut acc = Kahan::default();
    for (v, node) in values.iter().zip(grid.nodes()) {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("field at r={}", node.point.r)));
        }
        if *v != 0.0 {
            acc.add(v.abs().powf(params.p) * node.point.r.powf(params.theta - 2.0) * node.weight);
        }
    }
    Ok(acc.sum())
}

/// `‖v‖_{L_{p,θ}} = (∫ |v|^p |x|^{θ−2} dx)^{1/p}`.
pub fn weighted_lp_norm(values: &[f64], params: &WeightParams, grid: &PolarGrid) -> Result<f64> {
    Ok(weighted_lp_integral(values, params, grid)?.powf(1.0 / params.p))
}

/// Samples `f` at every grid node (radius-major).
pub fn sample_on_grid<F: Fn(f64, f64) -> f64>(grid: &PolarGrid, f: F) -> Vec<f64> {
    grid.nodes().map(|n| f(n.point.r, n.point.theta)).collect()
}

/// How the first-order term combines the two Cartesian derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientNorm {
    /// `‖r ∂₁f‖ + ‖r ∂₂f‖`.
    #[default]
    ComponentSum,
    /// `‖r |∇f|‖`.
    Euclidean,
}

/// Cartesian gradient `(∂₁f, ∂₂f)` at every node.
pub enum Gradient<'a> {
    Analytic(&'a [(f64, f64)]),
    FiniteDifference,
}

/// Derivative at `x` of the quadratic through three points.
fn lagrange3_deriv(xs: [f64; 3], fs: [f64; 3], x: f64) -> f64 {
    let [x0, x1, x2] = xs;
    let [f0, f1, f2] = fs;
    f0 * ((x - x1) + (x - x2)) / ((x0 - x1) * (x0 - x2))
        + f1 * ((x - x0) + (x - x2)) / ((x1 - x0) * (x1 - x2))
        + f2 * ((x - x0) + (x - x1)) / ((x2 - x0) * (x2 - x1))
}

fn deriv_along(xs: &[f64], fs: &[f64], i: usize) -> f64 {
    let n = xs.len();
    let c = i.clamp(1, n - 2);
    lagrange3_deriv(
        [xs[c - 1], xs[c], xs[c + 1]],
        [fs[c - 1], fs[c], fs[c + 1]],
        xs[i],
    )
}

/// Second-order polar finite differences mapped to Cartesian components.
pub fn fd_gradient(values: &[f64], grid: &PolarGrid) -> Result<Vec<(f64, f64)>> {
    check_len(values, grid)?;
    let (nr, na) = (grid.n_radii(), grid.n_angles());
    if nr < 3 || na < 3 {
        return Err(Error::invalid("finite differences need ≥ 3 nodes per direction"));
    }
    let radii = grid.radii();
    let angles = grid.angles();
    let mut out = Vec::with_capacity(values.len());
    let mut column = vec![0.0; nr];
    let mut d_r = vec![0.0; values.len()];
    for j in 0..na {
        for i in 0..nr {
            column[i] = values[i * na + j];
        }
        for i in 0..nr {
            d_r[i * na + j] = deriv_along(radii, &column, i);
        }
    }
    for i in 0..nr {
        let row = &values[i * na..(i + 1) * na];
        let r = radii[i];
        for j in 0..na {
            let d_th = deriv_along(angles, row, j) / r;
            let (s, c) = angles[j].sin_cos();
            let dr = d_r[i * na + j];
            out.push((c * dr - s * d_th, s * dr + c * d_th));
        }
    }
    Ok(out)
}

/// `‖f‖_{L_{p,θ}} + ‖ρ_o ∇f‖_{L_{p,θ}}`, the gradient term combined per `mode`.
pub fn k1_norm(
    values: &[f64],
    gradient: Gradient<'_>,
    params: &WeightParams,
    grid: &PolarGrid,
    mode: GradientNorm,
) -> Result<f64> {
    let owned;
    let grad = match gradient {
        Gradient::Analytic(g) => {
            if g.len() != values.len() {
                return Err(Error::invalid("gradient length differs from field length"));
            }
            g
        }
        Gradient::FiniteDifference => {
            owned = fd_gradient(values, grid)?;
            &owned[..]
        }
    };
    let radii: Vec<f64> = grid.nodes().map(|n| n.point.r).collect();
    let zeroth = weighted_lp_norm(values, params, grid)?;
    let first = match mode {
        GradientNorm::ComponentSum => {
            let g1: Vec<f64> = grad.iter().zip(&radii).map(|(g, r)| r * g.0).collect();
            let g2: Vec<f64> = grad.iter().zip(&radii).map(|(g, r)| r * g.1).collect();
            weighted_lp_norm(&g1, params, grid)? + weighted_lp_norm(&g2, params, grid)?
        }
        GradientNorm::Euclidean => {
            let g: Vec<f64> = grad.iter().zip(&radii).map(|(g, r)| r * g.0.hypot(g.1)).collect();
            weighted_lp_norm(&g, params, grid)?
        }
    };
    Ok(zeroth + first)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GridSpec;
    use crate::quadrature::GaussLegendre;
    use std::f64::consts::PI;

    fn dom(k: f64) -> AngularDomain {
        AngularDomain::new(k).unwrap()
    }

    #[test]
    fn admissible_range_examples() {
        let r = theta_admissible_range(2.0, &dom(PI)).unwrap();
        assert_eq!((r.lo, r.hi), (0.0, 4.0));
        let r = theta_admissible_range(2.0, &AngularDomain::slit()).unwrap();
        assert_eq!((r.lo, r.hi), (1.0, 3.0));
        let r = theta_admissible_range(3.0, &dom(PI / 2.0)).unwrap();
        assert_eq!((r.lo, r.hi), (-3.0, 9.0));
        assert!(theta_admissible_range(1.0, &dom(PI)).is_err());
    }

    #[test]
    fn mu_range_examples() {
        let r = mu_range(2.0, &dom(PI)).unwrap();
        assert_eq!((r.lo, r.hi), (0.0, 2.0));
        let r = mu_range(2.0, &AngularDomain::slit()).unwrap();
        assert_eq!((r.lo, r.hi), (0.5, 1.5));
    }

    #[test]
    fn grisvard_examples() {
        assert_eq!(grisvard_lower_bound(2.0, &dom(PI)).unwrap(), 0.0);
        assert_eq!(grisvard_lower_bound(2.0, &AngularDomain::slit()).unwrap(), 1.0);
        assert!(grisvard_lower_bound(2.0, &dom(2.0)).unwrap() < 0.0);
    }

    #[test]
    fn sine_power_closed_form() {
        let gl = GaussLegendre::new(40);
        for (k, p) in [(PI, 2.0), (1.3, 3.0), (5.0, 4.5)] {
            let q = gl.integrate(0.0, k, |t| (PI * t / k).sin().powf(p));
            assert!((sine_power_integral(k, p).unwrap() - q).abs() < 1e-12);
        }
        assert!((sine_power_integral(2.0 * PI, 2.0).unwrap() - PI).abs() < 1e-14);
    }

    #[test]
    fn radial_power_norm() {
        let k = 2.5;
        let d = dom(k);
        let delta = 1e-2;
        let grid = PolarGrid::new(&d, &GridSpec::new(delta, 1.0, 64, 4).with_points(4)).unwrap();
        let params = WeightParams::new(3.0, 0.7).unwrap();
        for a in [0.5, 1.0, -0.1] {
            let v = sample_on_grid(&grid, |r, _| r.powf(a));
            let e = a * params.p + params.theta;
            let exact = (k * (1.0 - delta.powf(e)) / e).powf(1.0 / params.p);
            let got = weighted_lp_norm(&v, &params, &grid).unwrap();
            assert!(((got - exact) / exact).abs() < 1e-10, "a={a}");
            let scaled: Vec<f64> = v.iter().map(|x| -3.0 * x).collect();
            let s = weighted_lp_norm(&scaled, &params, &grid).unwrap();
            assert!((s - 3.0 * got).abs() < 1e-12 * got);
        }
        let zero = vec![0.0; grid.len()];
        assert_eq!(weighted_lp_norm(&zero, &params, &grid).unwrap(), 0.0);
        assert!(weighted_lp_norm(&zero[1..], &params, &grid).is_err());
    }

    fn harmonic_case(kappa0: f64, n: usize, pts: usize) -> (PolarGrid, Vec<f64>, Vec<(f64, f64)>) {
        let d = dom(kappa0);
        let a = d.critical_exponent();
        let spec = GridSpec::new(1e-2, 1.0, n, n).with_grading(1.0).with_points(pts);
        let grid = PolarGrid::new(&d, &spec).unwrap();
        let f = sample_on_grid(&grid, |r, t| r.powf(a) * (a * t).sin());
        let g = grid
            .nodes()
            .map(|nd| {
                let (r, t) = (nd.point.r, nd.point.theta);
                let m = a * r.powf(a - 1.0);
                (m * ((a - 1.0) * t).sin(), m * ((a - 1.0) * t).cos())
            })
            .collect();
        (grid, f, g)
    }

    #[test]
    fn k1_of_harmonic_profile() {
        let kappa0 = 3.0 * PI / 4.0;
        let a = PI / kappa0;
        let params = WeightParams::new(2.0, 1.5).unwrap();
        let (grid, f, g) = harmonic_case(kappa0, 64, 4);
        let e = a * params.p + params.theta;
        let radial = (1.0 - 1e-2f64.powf(e)) / e;
        let gl = GaussLegendre::new(64);
        let ang = |h: &dyn Fn(f64) -> f64| gl.integrate(0.0, kappa0, |t| h(t).abs().powf(params.p));
        let n0 = (radial * sine_power_integral(kappa0, params.p).unwrap()).powf(0.5);
        let n1 = (radial * a.powi(2) * ang(&|t| ((a - 1.0) * t).sin())).sqrt();
        let n2 = (radial * a.powi(2) * ang(&|t| ((a - 1.0) * t).cos())).sqrt();
        let got = k1_norm(&f, Gradient::Analytic(&g), &params, &grid, GradientNorm::ComponentSum).unwrap();
        assert!(((got - (n0 + n1 + n2)) / got).abs() < 1e-9);
        let eu = k1_norm(&f, Gradient::Analytic(&g), &params, &grid, GradientNorm::Euclidean).unwrap();
        let n_eu = (radial * a * a * kappa0).sqrt();
        assert!(((eu - (n0 + n_eu)) / eu).abs() < 1e-9);
    }

    #[test]
    fn fd_gradient_is_second_order() {
        let kappa0 = 1.2 * PI;
        let params = WeightParams::new(2.0, 2.0).unwrap();
        let err = |n| {
            let (grid, f, g) = harmonic_case(kappa0, n, 1);
            let fd = k1_norm(&f, Gradient::FiniteDifference, &params, &grid, GradientNorm::ComponentSum).unwrap();
            let an = k1_norm(&f, Gradient::Analytic(&g), &params, &grid, GradientNorm::ComponentSum).unwrap();
            ((fd - an) / an).abs()
        };
        let (e1, e2) = (err(80), err(160));
        let order = (e1 / e2).log2();
        assert!(order > 1.7, "order {order} ({e1} -> {e2})");
        assert!(e2 < 1e-3);
    }

    #[test]
    fn zero_field_norms() {
        let (grid, _, _) = harmonic_case(1.0, 8, 1);
        let z = vec![0.0; grid.len()];
        let params = WeightParams::new(2.5, 1.0).unwrap();
        assert_eq!(k1_norm(&z, Gradient::FiniteDifference, &params, &grid, GradientNorm::default()).unwrap(), 0.0);
    }

    proptest::proptest! {
        #[test]
        fn duality_is_an_involution(p in 1.05f64..20.0, theta in -30.0f64..30.0) {
            let w = WeightParams::new(p, theta).unwrap();
            let d = w.derived();
            proptest::prop_assert!((1.0 / p + 1.0 / d.p_dual - 1.0).abs() < 1e-14);
            proptest::prop_assert!((theta / p + d.theta_dual / d.p_dual - 2.0).abs() < 1e-12 * (1.0 + theta.abs()));
            let back = w.dual().dual();
            proptest::prop_assert!((back.p - p).abs() < 1e-12 * p);
            proptest::prop_assert!((back.theta - theta).abs() < 1e-11 * (1.0 + theta.abs()));
        }

        #[test]
        fn center_admissible_iff_mu_condition(p in 1.01f64..50.0, k in 0.01f64..6.28) {
            let d = dom(k);
            proptest::prop_assert!(WeightParams::new(p, 2.0).unwrap().derived().mu == 1.0);
            let inside = theta_admissible_range(p, &d).unwrap().contains(2.0);
            let gap = (1.0 - 2.0 / p).abs() - d.critical_exponent();
            proptest::prop_assume!(gap.abs() > 1e-12);
            proptest::prop_assert_eq!(inside, gap < 0.0);
        }

        #[test]
        fn center_admissible_for_moderate_p(p in 2.0f64..4.0, k in 0.01f64..6.28) {
            proptest::prop_assert!(theta_admissible_range(p, &dom(k)).unwrap().contains(2.0));
        }

        #[test]
        fn range_shrinks_with_angle(p in 1.01f64..10.0, k1 in 0.01f64..6.2, dk in 0.001f64..0.08) {
            let a = theta_admissible_range(p, &dom(k1)).unwrap();
            let b = theta_admissible_range(p, &dom(k1 + dk)).unwrap();
            proptest::prop_assert!(b.lo > a.lo && b.hi < a.hi);
        }

        #[test]
        fn mu_maps_theta_range(p in 1.01f64..10.0, k in 0.1f64..6.2) {
            let d = dom(k);
            let t = theta_admissible_range(p, &d).unwrap();
            let m = mu_range(p, &d).unwrap();
            let lo = WeightParams::new(p, t.lo).unwrap().derived().mu;
            let hi = WeightParams::new(p, t.hi).unwrap().derived().mu;
            proptest::prop_assert!((lo - m.lo).abs() < 1e-12 && (hi - m.hi).abs() < 1e-12);
        }

        #[test]
        fn grisvard_forms_agree(p in 1.01f64..10.0, k in 0.1f64..6.2, theta in -20.0f64..20.0) {
            let d = dom(k);
            let lb = grisvard_lower_bound(p, &d).unwrap();
            proptest::prop_assume!((theta - lb).abs() > 1e-9);
            let (a, b) = grisvard_conditions(p, theta, &d).unwrap();
            proptest::prop_assert_eq!(a, b);
        }
    }
}
