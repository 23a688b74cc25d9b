//! Weighted area integrals over the wedge and one-dimensional rules for
//! integrands with an integrable endpoint singularity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AngularDomain, GridSpec, PolarGrid, PolarPoint};

/// Gauss–Legendre rule on `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    /// `n`-point rule via Newton iteration on `P_n`.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Legendre order must be positive");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let nf = n as f64;
        for i in 0..n.div_ceil(2) {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        GaussLegendre { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes and weights mapped to `[a, b]`, in increasing node order.
    pub fn map_to(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&x, &w)| (mid + half * x, half * w))
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let mut acc = Kahan::default();
        for (x, w) in self.map_to(a, b) {
            acc.add(w * f(x));
        }
        acc.sum()
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
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
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Neumaier-compensated running sum. Order of `add` calls fixes the result.
#[derive(Debug, Clone, Copy, Default)]
pub struct Kahan {
    sum: f64,
    comp: f64,
}

impl Kahan {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn sum(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Compensated sum of a sequence, in iteration order.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let mut k = Kahan::default();
    for x in it {
        k.add(x);
    }
    k.sum()
}

/// `Σ_nodes f(node) · r^weight_exponent · cell_weight` over a prepared grid.
pub fn integrate_on_grid<F>(grid: &PolarGrid, f: F, weight_exponent: f64) -> Result<f64>
where
    F: Fn(&PolarPoint) -> f64,
{
    let mut acc = Kahan::default();
    for node in grid.nodes() {
        let v = f(&node.point);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "integrand at r={}, ϑ={}",
                node.point.r, node.point.theta
            )));
        }
        acc.add(v * node.point.r.powf(weight_exponent) * node.weight);
    }
    Ok(acc.sum())
}

/// `∫_D f(x) |x|^weight_exponent dx` restricted to the grid's annular sector.
pub fn integrate_polar_weighted<F>(
    domain: &AngularDomain,
    grid: &GridSpec,
    f: F,
    weight_exponent: f64,
) -> Result<f64>
where
    F: Fn(&PolarPoint) -> f64,
{
    let grid = PolarGrid::new(domain, grid)?;
    integrate_on_grid(&grid, f, weight_exponent)
}

/// Dyadic panel layout for `∫_0^T h(s) ds` with an integrable singularity at `s = T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeQuadSpec {
    pub n_panels: usize,
    pub points_per_panel: usize,
    pub refinement_ratio: f64,
}

impl Default for TimeQuadSpec {
    fn default() -> Self {
        TimeQuadSpec {
            n_panels: 24,
            points_per_panel: 8,
            refinement_ratio: 0.5,
        }
    }
}

impl TimeQuadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_panels < 2 || self.points_per_panel < 2 {
            return Err(Error::invalid("time quadrature needs ≥ 2 panels and ≥ 2 points"));
        }
        if !(self.refinement_ratio > 0.0 && self.refinement_ratio < 1.0) {
            return Err(Error::invalid("refinement_ratio must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Nodes `u` and weights for `∫_0^L F(u) du` where `F` may be singular at `u = 0`.
    ///
    /// Panels are `[L ρ^{j+1}, L ρ^j]` for `j < n_panels − 1`; the innermost panel
    /// `[0, L ρ^{n−1}]` is mapped through `u = h w⁴`, which turns `u^a` into the
    /// smooth `w^{4a+3}` for `a ≥ −3/4`.
    pub fn graded_rule(&self, length: f64) -> Vec<(f64, f64)> {
        let gl = GaussLegendre::new(self.points_per_panel);
        let mut out = Vec::with_capacity(self.n_panels * self.points_per_panel);
        let mut hi = length;
        for _ in 0..self.n_panels - 1 {
            let lo = hi * self.refinement_ratio;
            out.extend(gl.map_to(lo, hi));
            hi = lo;
        }
        for (w, wt) in gl.map_to(0.0, 1.0) {
            let w2 = w * w;
            out.push((hi * w2 * w2, wt * 4.0 * hi * w2 * w));
        }
        out
    }
}

/// `∫_0^{t_end} h(s) ds` with panels accumulating at `s = t_end`.
pub fn integrate_time_singular<F>(spec: &TimeQuadSpec, t_end: f64, mut h: F) -> Result<f64>
where
    F: FnMut(f64) -> f64,
{
    spec.validate()?;
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::invalid("t_end must be positive"));
    }
    let mut acc = Kahan::default();
    for (u, w) in spec.graded_rule(t_end) {
        let v = h(t_end - u);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("time integrand at s={}", t_end - u)));
        }
        acc.add(w * v);
    }
    Ok(acc.sum())
}

/// Composite Gauss–Legendre rule over the partition given by `breaks`.
pub fn composite_rule(breaks: &[f64], gl: &GaussLegendre) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(breaks.len().saturating_sub(1) * gl.len());
    for w in breaks.windows(2) {
        if w[1] > w[0] {
            out.extend(gl.map_to(w[0], w[1]));
        }
    }
    out
}

/// Aitken Δ² extrapolation of three values taken at a geometric sequence of inner
/// cutoffs; returns `None` when the differences do not contract.
pub fn aitken_limit(v1: f64, v2: f64, v3: f64) -> Option<f64> {
    let d1 = v2 - v1;
    let d2 = v3 - v2;
    let denom = d2 - d1;
    if denom == 0.0 || !denom.is_finite() {
        return if d2 == 0.0 { Some(v3) } else { None };
    }
    if (d2 / d1).abs() >= 1.0 {
        return None;
    }
    Some(v3 - d2 * d2 / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn gauss_legendre_is_exact_for_polynomials() {
        for n in 1..=20 {
            let gl = GaussLegendre::new(n);
            let w: f64 = gl.weights.iter().sum();
            assert!((w - 2.0).abs() < 1e-13, "n={n}");
            // degree 2n-1 monomial on [0,1]
            let d = 2 * n - 1;
            let v = gl.integrate(0.0, 1.0, |x| x.powi(d as i32));
            assert!((v - 1.0 / (d as f64 + 1.0)).abs() < 1e-13, "n={n}: {v}");
        }
    }

    #[test]
    fn polar_area_and_zero() {
        let d = AngularDomain::new(2.2).unwrap();
        let spec = GridSpec::new(0.5, 3.0, 16, 8);
        let a = integrate_polar_weighted(&d, &spec, |_| 1.0, 0.0).unwrap();
        let exact = (9.0 - 0.25) * 2.2 / 2.0;
        assert!(((a - exact) / exact).abs() < 1e-10);
        assert_eq!(integrate_polar_weighted(&d, &spec, |_| 0.0, 1.3).unwrap(), 0.0);
    }

    #[test]
    fn radial_power_weight_closed_form() {
        // ∫_δ^1 r^{θ-2} r dr · κ₀ = κ₀ (1 - δ^θ)/θ
        let kappa0 = 1.9;
        let d = AngularDomain::new(kappa0).unwrap();
        let delta = 1e-3;
        for theta in [0.3, 1.0, 2.5] {
            let spec = GridSpec::new(delta, 1.0, 256, 4).with_grading(3.0);
            let v = integrate_polar_weighted(&d, &spec, |_| 1.0, theta - 2.0).unwrap();
            let exact = kappa0 * (1.0 - delta.powf(theta)) / theta;
            assert!(((v - exact) / exact).abs() < 2e-4, "θ={theta}: {v} vs {exact}");
            let spec_gl = spec.with_points(4);
            let v4 = integrate_polar_weighted(&d, &spec_gl, |_| 1.0, theta - 2.0).unwrap();
            assert!(((v4 - exact) / exact).abs() < 1e-10);
        }
    }

    #[test]
    fn refinement_shrinks_midpoint_error() {
        let d = AngularDomain::new(PI).unwrap();
        let exact = PI * (1.0 - 1e-2f64.powf(0.5)) / 0.5;
        let err = |n| {
            let spec = GridSpec::new(1e-2, 1.0, n, 4);
            (integrate_polar_weighted(&d, &spec, |_| 1.0, -1.5).unwrap() - exact).abs()
        };
        let (e1, e2) = (err(64), err(128));
        assert!(e2 < e1 / 3.0, "{e1} -> {e2}");
    }

    #[test]
    fn non_finite_integrand_is_reported() {
        let d = AngularDomain::new(1.0).unwrap();
        let spec = GridSpec::new(0.1, 1.0, 4, 4);
        let e = integrate_polar_weighted(&d, &spec, |p| 1.0 / (p.r - p.r), 0.0);
        assert!(matches!(e, Err(Error::NonFinite(_))));
    }

    #[test]
    fn time_rule_examples() {
        let spec = TimeQuadSpec::default();
        let one = integrate_time_singular(&spec, 2.0, |_| 1.0).unwrap();
        assert!((one - 2.0).abs() < 1e-12);
        let lin = integrate_time_singular(&spec, 1.0, |s| s).unwrap();
        assert!((lin - 0.5).abs() < 1e-12);
        let sing = integrate_time_singular(&spec, 1.0, |s| (1.0 - s).powf(-0.5)).unwrap();
        assert!((sing - 2.0).abs() < 1e-6 * 2.0, "{sing}");
    }

    #[test]
    fn time_rule_power_singularities() {
        let spec = TimeQuadSpec::default();
        for a in [-0.75, -0.6, -0.5, -0.3, 0.0, 0.5, 1.7] {
            let t_end = 1.7;
            let v = integrate_time_singular(&spec, t_end, |s| (t_end - s).powf(a)).unwrap();
            let exact = t_end.powf(a + 1.0) / (a + 1.0);
            assert!(((v - exact) / exact).abs() < 1e-6, "a={a}: {v} vs {exact}");
        }
    }

    #[test]
    fn time_rule_rejects_bad_spec() {
        let mut spec = TimeQuadSpec::default();
        spec.refinement_ratio = 1.0;
        assert!(integrate_time_singular(&spec, 1.0, |_| 1.0).is_err());
        assert!(integrate_time_singular(&TimeQuadSpec::default(), 0.0, |_| 1.0).is_err());
    }

    #[test]
    fn aitken_recovers_geometric_limit() {
        let f = |d: f64| 3.0 - 2.0 * d.powf(0.7);
        let l = aitken_limit(f(1e-2), f(1e-3), f(1e-4)).unwrap();
        assert!((l - 3.0).abs() < 1e-12);
        assert!(aitken_limit(1.0, 2.0, 4.0).is_none());
    }

    proptest::proptest! {
        #[test]
        fn time_rule_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, k in 0.1f64..4.0) {
            let spec = TimeQuadSpec::default();
            let f = |s: f64| (k * s).sin();
            let g = |s: f64| (1.0 - s).powf(-0.5);
            let lhs = integrate_time_singular(&spec, 1.0, |s| a * f(s) + b * g(s)).unwrap();
            let rhs = a * integrate_time_singular(&spec, 1.0, f).unwrap()
                + b * integrate_time_singular(&spec, 1.0, g).unwrap();
            proptest::prop_assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
        }

        #[test]
        fn polar_rule_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let d = AngularDomain::new(2.0).unwrap();
            let spec = GridSpec::new(0.1, 2.0, 16, 6);
            let f = |p: &PolarPoint| p.r * p.theta.sin();
            let g = |p: &PolarPoint| (p.r * 3.0).cos();
            let lhs = integrate_polar_weighted(&d, &spec, |p| a * f(p) + b * g(p), -0.5).unwrap();
            let rhs = a * integrate_polar_weighted(&d, &spec, f, -0.5).unwrap()
                + b * integrate_polar_weighted(&d, &spec, g, -0.5).unwrap();
            proptest::prop_assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
        }
    }
}
