//! Heat convolutions on the wedge.
//!
//! Separable data `c·a(s)·R(r)·sin(nαϑ)` stays separable under the semigroup, so
//! `v` and `Var w` reduce to one radial Hankel-type integral per time node (the
//! fast path). A generic 2D quadrature against the series kernel is kept as an
//! independent oracle, together with a Monte Carlo sampler of `w`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::WeightParams;
use crate::geometry::{polar_to_cart, AngularDomain, PolarGrid, PolarPoint};
use crate::kernel::{dist_to_boundary, integrate_against_kernel, KernelConfig};
use crate::quadrature::{compensated_sum, GaussLegendre, Kahan, TimeQuadSpec};
use crate::special::{bessel_i_scaled, gaussian_abs_moment, BesselAccuracy};

/// `e^{−1/x}` for `x > 0`, else 0.
fn flat_exp(x: f64) -> f64 {
    if x > 0.0 {
        (-1.0 / x).exp()
    } else {
        0.0
    }
}

/// C^∞ step: 0 for `s ≤ 0`, 1 for `s ≥ 1`.
pub fn smooth_step(s: f64) -> f64 {
    let a = flat_exp(s);
    let b = flat_exp(1.0 - s);
    a / (a + b)
}

/// Radial factor of a separable field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RadialProfile {
    /// `r^γ χ(r)` with `χ` a smooth step from 1 at `r_flat` down to 0 at `r_cut`;
    /// the indicator of `r < r_cut` when `r_flat == r_cut`.
    PowerCutoff { gamma: f64, r_flat: f64, r_cut: f64 },
    /// `exp(1 − 1/(1 − s²))`, `s = (r − center)/width`.
    Bump { center: f64, width: f64 },
}

impl RadialProfile {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RadialProfile::PowerCutoff { gamma, r_flat, r_cut } => {
                if !(gamma.is_finite() && gamma > -2.0) {
                    return Err(Error::invalid(format!("radial power must exceed −2, got {gamma}")));
                }
                if !(r_flat > 0.0 && r_flat <= r_cut && r_cut.is_finite()) {
                    return Err(Error::invalid("need 0 < r_flat ≤ r_cut < ∞"));
                }
            }
            RadialProfile::Bump { center, width } => {
                if !(width > 0.0 && center >= width && center.is_finite()) {
                    return Err(Error::invalid("bump needs width > 0 and center ≥ width"));
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, r: f64) -> f64 {
        match *self {
            RadialProfile::PowerCutoff { gamma, r_flat, r_cut } => {
                if r >= r_cut {
                    0.0
                } else if r <= r_flat {
                    r.powf(gamma)
                } else {
                    r.powf(gamma) * (1.0 - smooth_step((r - r_flat) / (r_cut - r_flat)))
                }
            }
            RadialProfile::Bump { center, width } => {
                let s = (r - center) / width;
                if s.abs() >= 1.0 {
                    0.0
                } else {
                    (1.0 - 1.0 / (1.0 - s * s)).exp()
                }
            }
        }
    }

    /// Closed radial interval outside which the profile vanishes.
    pub fn support(&self) -> (f64, f64) {
        match *self {
            RadialProfile::PowerCutoff { r_cut, .. } => (0.0, r_cut),
            RadialProfile::Bump { center, width } => (center - width, center + width),
        }
    }

    /// Interior points where the profile is not analytic.
    fn kinks(&self) -> Vec<f64> {
        match *self {
            RadialProfile::PowerCutoff { r_flat, r_cut, .. } if r_flat < r_cut => vec![r_flat],
            _ => Vec::new(),
        }
    }

    /// Length over which the profile changes shape (infinite for a pure power).
    fn feature_length(&self) -> f64 {
        match *self {
            RadialProfile::PowerCutoff { r_flat, r_cut, .. } if r_flat < r_cut => r_cut - r_flat,
            RadialProfile::PowerCutoff { .. } => f64::INFINITY,
            RadialProfile::Bump { width, .. } => 2.0 * width,
        }
    }

    fn is_bounded(&self) -> bool {
        !matches!(*self, RadialProfile::PowerCutoff { gamma, .. } if gamma < 0.0)
    }
}

/// Piecewise-constant amplitude `a(s)`: `amplitudes[i]` on `[switch_{i−1}, switch_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    #[serde(default)]
    pub switch_times: Vec<f64>,
    pub amplitudes: Vec<f64>,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::constant(1.0)
    }
}

impl Schedule {
    pub fn constant(a: f64) -> Self {
        Schedule {
            switch_times: Vec::new(),
            amplitudes: vec![a],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.amplitudes.len() != self.switch_times.len() + 1 {
            return Err(Error::invalid("schedule needs one more amplitude than switch times"));
        }
        if self.amplitudes.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid("schedule amplitudes must be finite"));
        }
        let ok = self.switch_times.iter().all(|s| *s > 0.0 && s.is_finite())
            && self.switch_times.windows(2).all(|w| w[1] > w[0]);
        if !ok {
            return Err(Error::invalid("switch times must be positive and increasing"));
        }
        Ok(())
    }

    pub fn amplitude(&self, s: f64) -> f64 {
        self.amplitudes[self.switch_times.partition_point(|&x| x <= s)]
    }

    /// `(s_lo, s_hi, a)` pieces covering `[0, t]`.
    pub fn pieces(&self, t: f64) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::new();
        let mut lo = 0.0;
        for (i, &sw) in self.switch_times.iter().enumerate() {
            if sw >= t {
                break;
            }
            out.push((lo, sw, self.amplitudes[i]));
            lo = sw;
        }
        out.push((lo, t, self.amplitude(lo)));
        out
    }
}

fn one() -> u32 {
    1
}

/// `c · a(s) · R(r) · sin(nαϑ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparableTerm {
    #[serde(default = "one")]
    pub angular_mode: u32,
    pub coefficient: f64,
    pub radial: RadialProfile,
    #[serde(default)]
    pub schedule: Schedule,
}

impl SeparableTerm {
    pub fn new(angular_mode: u32, coefficient: f64, radial: RadialProfile) -> Self {
        SeparableTerm {
            angular_mode,
            coefficient,
            radial,
            schedule: Schedule::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.angular_mode == 0 {
            return Err(Error::invalid("angular mode starts at 1"));
        }
        if !self.coefficient.is_finite() {
            return Err(Error::invalid("coefficient must be finite"));
        }
        self.radial.validate()?;
        self.schedule.validate()
    }

    /// Bessel order `nα` of the mode.
    pub fn order(&self, domain: &AngularDomain) -> f64 {
        self.angular_mode as f64 * domain.critical_exponent()
    }

    pub fn angular(&self, domain: &AngularDomain, theta: f64) -> f64 {
        (self.order(domain) * theta).sin()
    }

    pub fn spatial(&self, domain: &AngularDomain, r: f64, theta: f64) -> f64 {
        self.coefficient * self.radial.eval(r) * self.angular(domain, theta)
    }

    pub fn eval(&self, domain: &AngularDomain, s: f64, r: f64, theta: f64) -> f64 {
        self.schedule.amplitude(s) * self.spatial(domain, r, theta)
    }
}

/// Finitely many deterministic noise modes `g^k`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub modes: Vec<SeparableTerm>,
}

impl NoiseSpec {
    pub fn zero() -> Self {
        NoiseSpec::default()
    }

    pub fn validate(&self) -> Result<()> {
        for m in &self.modes {
            m.validate()?;
            if !m.radial.is_bounded() {
                return Err(Error::invalid("noise modes must be bounded (γ ≥ 0)"));
            }
        }
        Ok(())
    }

    /// `|g(s, x)|_{ℓ₂}²`.
    pub fn norm_sq(&self, domain: &AngularDomain, s: f64, r: f64, theta: f64) -> f64 {
        compensated_sum(self.modes.iter().map(|m| m.eval(domain, s, r, theta).powi(2)))
    }

    /// Returns a copy with every coefficient multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        let mut out = self.clone();
        for m in &mut out.modes {
            m.coefficient *= k;
        }
        out
    }
}

/// Scalar forcing `f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceSpec {
    Separable { terms: Vec<SeparableTerm> },
    /// `f = Δh`, `h(x) = φ(|x − c|²/a²)`, `φ(u) = e^{1 − 1/(1−u)}`; time independent.
    LaplacianBump {
        center_r: f64,
        center_theta: f64,
        radius: f64,
    },
}

/// Polar box containing the support of a field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupportBox {
    pub r_lo: f64,
    pub r_hi: f64,
    pub theta_lo: f64,
    pub theta_hi: f64,
}

impl SourceSpec {
    pub fn zero() -> Self {
        SourceSpec::Separable { terms: Vec::new() }
    }

    pub fn validate(&self, domain: &AngularDomain) -> Result<()> {
        match self {
            SourceSpec::Separable { terms } => terms.iter().try_for_each(|t| t.validate()),
            &SourceSpec::LaplacianBump {
                center_r,
                center_theta,
                radius,
            } => {
                if !(radius > 0.0) || !domain.is_interior_angle(center_theta) || !(center_r > 0.0) {
                    return Err(Error::invalid("bump needs radius > 0 and an interior center"));
                }
                let c = PolarPoint::new(center_r, center_theta);
                if dist_to_boundary(domain, c) <= radius {
                    return Err(Error::invalid("bump support must stay inside the wedge"));
                }
                Ok(())
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, SourceSpec::Separable { terms } if terms.iter().all(|t| t.coefficient == 0.0))
    }

    pub fn eval(&self, domain: &AngularDomain, s: f64, r: f64, theta: f64) -> f64 {
        match self {
            SourceSpec::Separable { terms } => {
                compensated_sum(terms.iter().map(|t| t.eval(domain, s, r, theta)))
            }
            SourceSpec::LaplacianBump { .. } => self.bump_parts(r, theta).map_or(0.0, |(_, l)| l),
        }
    }

    /// `h` for the bump source (`None` for separable sources).
    pub fn potential(&self, r: f64, theta: f64) -> Option<f64> {
        match self {
            SourceSpec::LaplacianBump { .. } => Some(self.bump_parts(r, theta).map_or(0.0, |(h, _)| h)),
            _ => None,
        }
    }

    fn bump_parts(&self, r: f64, theta: f64) -> Option<(f64, f64)> {
        let &SourceSpec::LaplacianBump {
            center_r,
            center_theta,
            radius,
        } = self
        else {
            return None;
        };
        let (x1, x2) = polar_to_cart(PolarPoint::new(r, theta));
        let (c1, c2) = polar_to_cart(PolarPoint::new(center_r, center_theta));
        let s = ((x1 - c1).powi(2) + (x2 - c2).powi(2)) / (radius * radius);
        if s >= 1.0 {
            return None;
        }
        // ψ(s) = φ(s/a²); Δψ = 4ψ' + 4sψ'' in 2D, written in u = s/a²
        let m = 1.0 - s;
        let phi = (1.0 - 1.0 / m).exp();
        let g1 = -1.0 / (m * m);
        let g2 = -2.0 / (m * m * m);
        let d1 = phi * g1;
        let d2 = phi * (g1 * g1 + g2);
        let lap = 4.0 * (d1 + s * d2) / (radius * radius);
        Some((phi, lap))
    }

    /// Times where `f` may jump.
    pub fn switch_times(&self) -> Vec<f64> {
        match self {
            SourceSpec::Separable { terms } => merged_switches(terms),
            SourceSpec::LaplacianBump { .. } => Vec::new(),
        }
    }

    pub fn support(&self, domain: &AngularDomain) -> SupportBox {
        match *self {
            SourceSpec::Separable { ref terms } => terms_support(domain, terms),
            SourceSpec::LaplacianBump {
                center_r,
                center_theta,
                radius,
            } => {
                let half = (radius / center_r).min(1.0).asin();
                SupportBox {
                    r_lo: center_r - radius,
                    r_hi: center_r + radius,
                    theta_lo: (center_theta - half).max(0.0),
                    theta_hi: (center_theta + half).min(domain.kappa0()),
                }
            }
        }
    }
}

fn merged_switches(terms: &[SeparableTerm]) -> Vec<f64> {
    let mut s: Vec<f64> = terms
        .iter()
        .flat_map(|t| t.schedule.switch_times.iter().copied())
        .collect();
    s.sort_by(f64::total_cmp);
    s.dedup();
    s
}

fn terms_support(domain: &AngularDomain, terms: &[SeparableTerm]) -> SupportBox {
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for t in terms {
        let (a, b) = t.radial.support();
        lo = lo.min(a);
        hi = hi.max(b);
    }
    SupportBox {
        r_lo: if lo.is_finite() { lo } else { 0.0 },
        r_hi: hi,
        theta_lo: 0.0,
        theta_hi: domain.kappa0(),
    }
}

/// Resolution of the separable path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeparableQuad {
    /// Radial window half-width, in units of `√(2τ)`.
    pub window_sigmas: f64,
    /// Radial panel width, in units of `√(2τ)`.
    pub panel_sigmas: f64,
    pub points: usize,
    /// Panels per transition layer of the profile.
    pub feature_panels: usize,
    /// Geometric panels toward the vertex when the window reaches it.
    pub vertex_panels: usize,
    /// Dyadic layout of the `τ` axis; the innermost panel ends at `T·ratio^{n−1}`.
    pub time: TimeQuadSpec,
}

impl Default for SeparableQuad {
    fn default() -> Self {
        SeparableQuad {
            window_sigmas: 9.0,
            panel_sigmas: 1.0,
            points: 8,
            feature_panels: 8,
            vertex_panels: 12,
            time: TimeQuadSpec {
                n_panels: 48,
                points_per_panel: 8,
                refinement_ratio: 0.5,
            },
        }
    }
}

impl SeparableQuad {
    pub fn validate(&self) -> Result<()> {
        self.time.validate()?;
        if !(self.window_sigmas >= 4.0 && self.panel_sigmas > 0.0) {
            return Err(Error::invalid("window must span ≥ 4 widths, panels positive"));
        }
        if self.points < 2 || self.points > 32 || self.feature_panels == 0 {
            return Err(Error::invalid("points per panel must be in 2..=32"));
        }
        Ok(())
    }

    /// Every resolution parameter doubled.
    pub fn refined(&self) -> Self {
        SeparableQuad {
            window_sigmas: self.window_sigmas,
            panel_sigmas: self.panel_sigmas / 2.0,
            points: self.points,
            feature_panels: self.feature_panels * 2,
            vertex_panels: self.vertex_panels * 2,
            time: TimeQuadSpec {
                n_panels: self.time.n_panels * 2,
                points_per_panel: self.time.points_per_panel,
                refinement_ratio: self.time.refinement_ratio.sqrt(),
            },
        }
    }
}

struct RadialEngine<'a> {
    nu: f64,
    profile: &'a RadialProfile,
    q: &'a SeparableQuad,
    gl: GaussLegendre,
    acc: &'a BesselAccuracy,
}

impl RadialEngine<'_> {
    /// `S_τ(r) = (2τ)^{−1} ∫ e^{−(r−ρ)²/4τ} Ĩ_ν(rρ/2τ) R(ρ) ρ dρ`, so that
    /// `e^{τΔ}[R sin(νφ)] = S_τ sin(νϑ)`.
    fn apply(&self, tau: f64, r: f64) -> Result<f64> {
        if r == 0.0 {
            return Ok(0.0);
        }
        let sigma = (2.0 * tau).sqrt();
        let w = self.q.window_sigmas * sigma;
        let (s_lo, s_hi) = self.profile.support();
        let lo = (r - w).max(s_lo);
        let hi = (r + w).min(s_hi);
        if lo >= hi {
            return Ok(0.0);
        }
        let pw = (self.q.panel_sigmas * sigma).min(self.profile.feature_length() / self.q.feature_panels as f64);
        let mut cuts = vec![lo];
        if lo == 0.0 {
            let h = pw.min(hi);
            let mut inner: Vec<f64> = (1..=self.q.vertex_panels)
                .map(|j| h * 0.25f64.powi(j as i32))
                .collect();
            inner.reverse();
            cuts.extend(inner);
            cuts.push(h);
        }
        cuts.extend(self.profile.kinks().into_iter().filter(|&k| k > lo && k < hi));
        cuts.push(hi);
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let mut acc = Kahan::default();
        for seg in cuts.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            if b <= a {
                continue;
            }
            let n = ((b - a) / pw).ceil().max(1.0) as usize;
            let step = (b - a) / n as f64;
            for i in 0..n {
                let pa = a + i as f64 * step;
                let pb = if i + 1 == n { b } else { pa + step };
                for (rho, wt) in self.gl.map_to(pa, pb) {
                    let rv = self.profile.eval(rho);
                    if rv == 0.0 {
                        continue;
                    }
                    let d = r - rho;
                    let bes = bessel_i_scaled(self.nu, r * rho / (2.0 * tau), self.acc)?;
                    acc.add(wt * (-d * d / (4.0 * tau)).exp() * bes * rv * rho);
                }
            }
        }
        let v = acc.sum() / (2.0 * tau);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("radial semigroup at r={r}, τ={tau}")));
        }
        Ok(v)
    }
}

/// `S_τ` of one profile at one radius; see the module notes.
pub fn radial_semigroup(
    cfg: &KernelConfig,
    nu: f64,
    profile: &RadialProfile,
    tau: f64,
    r: f64,
    q: &SeparableQuad,
) -> Result<f64> {
    if !(tau > 0.0 && tau.is_finite() && r >= 0.0 && nu > 0.0) {
        return Err(Error::invalid("radial semigroup needs τ > 0, r ≥ 0, ν > 0"));
    }
    let e = RadialEngine {
        nu,
        profile,
        q,
        gl: GaussLegendre::new(q.points),
        acc: &cfg.bessel_acc,
    };
    e.apply(tau, r)
}

/// `c^k Σ_pieces a^k ∫ S_τ(r)^k dτ` over `τ ∈ [t − s_hi, t − s_lo]`, for every `t`.
fn mode_time_integrals(
    cfg: &KernelConfig,
    term: &SeparableTerm,
    r: f64,
    times: &[f64],
    q: &SeparableQuad,
    power: i32,
) -> Result<Vec<f64>> {
    let eng = RadialEngine {
        nu: term.order(&cfg.domain),
        profile: &term.radial,
        q,
        gl: GaussLegendre::new(q.points),
        acc: &cfg.bessel_acc,
    };
    let pieces: Vec<Vec<(f64, f64, f64)>> = times.iter().map(|&t| term.schedule.pieces(t)).collect();
    let mut queries: Vec<f64> = Vec::new();
    for (t, ps) in times.iter().zip(&pieces) {
        for &(lo, hi, _) in ps {
            queries.push(t - hi);
            queries.push(t - lo);
        }
    }
    queries.sort_by(f64::total_cmp);
    queries.dedup();
    let t_max = *queries.last().unwrap_or(&0.0);
    let mut breaks: Vec<f64> = Vec::new();
    if t_max > 0.0 {
        let mut b = t_max;
        for _ in 0..q.time.n_panels {
            breaks.push(b);
            b *= q.time.refinement_ratio;
        }
    }
    breaks.push(0.0);
    breaks.extend(queries.iter().copied());
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();

    let gl = GaussLegendre::new(q.time.points_per_panel);
    let mut cumulative = vec![0.0; queries.len()];
    let mut acc = Kahan::default();
    let mut qi = 0;
    for (k, &b) in breaks.iter().enumerate() {
        if k > 0 {
            let a = breaks[k - 1];
            for (tau, w) in gl.map_to(a, b) {
                acc.add(w * eng.apply(tau, r)?.powi(power));
            }
        }
        while qi < queries.len() && queries[qi] <= b {
            cumulative[qi] = acc.sum();
            qi += 1;
        }
    }
    let at = |u: f64| cumulative[queries.partition_point(|&x| x < u)];
    let scale = term.coefficient.powi(power);
    Ok(times
        .iter()
        .zip(&pieces)
        .map(|(t, ps)| {
            scale
                * compensated_sum(ps.iter().map(|&(lo, hi, a)| a.powi(power) * (at(t - lo) - at(t - hi))))
        })
        .collect())
}

/// Values of a scalar field on `times × grid`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField {
    pub times: Vec<f64>,
    pub grid: PolarGrid,
    /// `values[i_t * grid.len() + node]`.
    pub values: Vec<f64>,
}

/// `Var w(t, x)` on a grid.
pub type VarianceField = SpaceTimeField;

impl SpaceTimeField {
    pub fn at_time(&self, i_t: usize) -> &[f64] {
        let n = self.grid.len();
        &self.values[i_t * n..(i_t + 1) * n]
    }

    /// Same field on the sub-grid of radii `≥ r_cut`.
    pub fn restrict_min_radius(&self, r_cut: f64) -> SpaceTimeField {
        let i0 = self.grid.first_radius_at_least(r_cut);
        let na = self.grid.n_angles();
        let n = self.grid.len();
        let grid = self.grid.restrict_min_radius(r_cut);
        let values = (0..self.times.len())
            .flat_map(|t| self.values[t * n + i0 * na..(t + 1) * n].iter().copied())
            .collect();
        SpaceTimeField {
            times: self.times.clone(),
            grid,
            values,
        }
    }
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.is_empty() || times.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
        return Err(Error::invalid("times must be positive and finite"));
    }
    Ok(())
}

/// Assembles `Σ_k ang_k(ϑ)^power · radial_k(t, r)` with the radial parts computed per radius.
fn separable_field(
    cfg: &KernelConfig,
    terms: &[SeparableTerm],
    times: &[f64],
    grid: &PolarGrid,
    q: &SeparableQuad,
    power: i32,
) -> Result<SpaceTimeField> {
    cfg.validate()?;
    q.validate()?;
    check_times(times)?;
    if grid.domain() != &cfg.domain {
        return Err(Error::invalid("grid and kernel use different domains"));
    }
    let per_radius: Vec<Vec<Vec<f64>>> = grid
        .radii()
        .par_iter()
        .map(|&r| {
            terms
                .iter()
                .map(|t| mode_time_integrals(cfg, t, r, times, q, power))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let angular: Vec<Vec<f64>> = terms
        .iter()
        .map(|t| grid.angles().iter().map(|&a| t.angular(&cfg.domain, a).powi(power)).collect())
        .collect();
    let (nr, na) = (grid.n_radii(), grid.n_angles());
    let mut values = vec![0.0; times.len() * nr * na];
    for it in 0..times.len() {
        for ir in 0..nr {
            for ia in 0..na {
                let mut s = 0.0;
                for k in 0..terms.len() {
                    s += angular[k][ia] * per_radius[ir][k][it];
                }
                values[(it * nr + ir) * na + ia] = s;
            }
        }
    }
    Ok(SpaceTimeField {
        times: times.to_vec(),
        grid: grid.clone(),
        values,
    })
}

/// `Var w(t,x) = Σ_k ∫₀^t (e^{(t−s)Δ} g^k(s))(x)² ds` on `times × grid`.
pub fn variance_field(
    cfg: &KernelConfig,
    noise: &NoiseSpec,
    times: &[f64],
    grid: &PolarGrid,
    q: &SeparableQuad,
) -> Result<VarianceField> {
    noise.validate()?;
    separable_field(cfg, &noise.modes, times, grid, q, 2)
}

/// `v(t,x) = ∫₀^t (e^{(t−s)Δ} f(s))(x) ds` on `times × grid`, separable sources only.
pub fn det_field(
    cfg: &KernelConfig,
    src: &SourceSpec,
    times: &[f64],
    grid: &PolarGrid,
    q: &SeparableQuad,
) -> Result<SpaceTimeField> {
    src.validate(&cfg.domain)?;
    match src {
        SourceSpec::Separable { terms } => separable_field(cfg, terms, times, grid, q, 1),
        _ => Err(Error::invalid("the separable path needs a separable source")),
    }
}

fn check_weights(field: &SpaceTimeField, time_weights: &[f64]) -> Result<()> {
    if time_weights.len() != field.times.len() {
        return Err(Error::invalid("one time weight per field time required"));
    }
    Ok(())
}

/// `Σ_t w_t ∫ |F(t,x)|^e |x|^{wexp} dx`.
fn weighted_field_integral(field: &SpaceTimeField, time_weights: &[f64], e: f64, wexp: f64) -> Result<f64> {
    check_weights(field, time_weights)?;
    let g = &field.grid;
    let na = g.n_angles();
    let mut total = Kahan::default();
    for (it, wt) in time_weights.iter().enumerate() {
        let vals = field.at_time(it);
        let mut acc = Kahan::default();
        for (ir, &r) in g.radii().iter().enumerate() {
            let rw = r * g.radial_weights()[ir] * r.powf(wexp);
            for ia in 0..na {
                let v = vals[ir * na + ia];
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("field at r={r}")));
                }
                if v != 0.0 {
                    acc.add(v.abs().powf(e) * rw * g.angular_weights()[ia]);
                }
            }
        }
        total.add(wt * acc.sum());
    }
    Ok(total.sum())
}

/// `E|Z|^p Σ_t w_t ∫ Var^{p/2} |x|^{−p} |x|^{θ−2} dx`.
pub fn lhs_weighted_moment(var: &VarianceField, params: &WeightParams, time_weights: &[f64]) -> Result<f64> {
    if params.p < 2.0 {
        return Err(Error::invalid(format!("stochastic moments need p ≥ 2, got {}", params.p)));
    }
    let m = gaussian_abs_moment(params.p)?;
    Ok(m * weighted_field_integral(var, time_weights, params.p / 2.0, params.theta - 2.0 - params.p)?)
}

/// `Σ_t w_t ∫ |v|^p |x|^{−p} |x|^{θ−2} dx`.
pub fn det_lhs(v: &SpaceTimeField, params: &WeightParams, time_weights: &[f64]) -> Result<f64> {
    weighted_field_integral(v, time_weights, params.p, params.theta - 2.0 - params.p)
}

/// `Σ_t w_t ∫ F(t,x) |x|^{e} dx` for a pointwise functional `F`.
fn rule_integral<F>(grid: &PolarGrid, time_rule: &[(f64, f64)], e: f64, f: F) -> Result<f64>
where
    F: Fn(f64, f64, f64) -> f64,
{
    let mut total = Kahan::default();
    for &(t, wt) in time_rule {
        let mut acc = Kahan::default();
        for node in grid.nodes() {
            let v = f(t, node.point.r, node.point.theta);
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("integrand at r={}", node.point.r)));
            }
            if v != 0.0 {
                acc.add(v * node.point.r.powf(e) * node.weight);
            }
        }
        total.add(wt * acc.sum());
    }
    Ok(total.sum())
}

/// `Σ_t w_t ∫ |g(t,x)|_{ℓ₂}^p |x|^{θ−2} dx`.
pub fn rhs_g_norm(noise: &NoiseSpec, params: &WeightParams, grid: &PolarGrid, time_rule: &[(f64, f64)]) -> Result<f64> {
    noise.validate()?;
    let d = *grid.domain();
    rule_integral(grid, time_rule, params.theta - 2.0, |t, r, a| {
        noise.norm_sq(&d, t, r, a).powf(params.p / 2.0)
    })
}

/// `Σ_t w_t ∫ ||x| f|^p |x|^{θ−2} dx`.
pub fn det_rhs(src: &SourceSpec, params: &WeightParams, grid: &PolarGrid, time_rule: &[(f64, f64)]) -> Result<f64> {
    let d = *grid.domain();
    src.validate(&d)?;
    rule_integral(grid, time_rule, params.theta - 2.0, |t, r, a| {
        (r * src.eval(&d, t, r, a)).abs().powf(params.p)
    })
}

/// Resolution of the generic 2D oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleQuad {
    /// Window half-width around `x`, in units of `√(2τ)`.
    pub window_sigmas: f64,
    pub radial_cells: usize,
    pub angular_cells: usize,
    pub points: usize,
    pub time: TimeQuadSpec,
}

impl Default for OracleQuad {
    fn default() -> Self {
        OracleQuad {
            window_sigmas: 8.0,
            radial_cells: 32,
            angular_cells: 64,
            points: 4,
            time: TimeQuadSpec::default(),
        }
    }
}

impl OracleQuad {
    pub fn refined(&self) -> Self {
        OracleQuad {
            window_sigmas: self.window_sigmas,
            radial_cells: self.radial_cells * 2,
            angular_cells: self.angular_cells * 2,
            points: self.points,
            time: TimeQuadSpec {
                n_panels: self.time.n_panels * 2,
                points_per_panel: self.time.points_per_panel,
                refinement_ratio: self.time.refinement_ratio.sqrt(),
            },
        }
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| if i == n { b } else { a + (b - a) * i as f64 / n as f64 }).collect()
}

/// `∫_D G(τ, x, y) f(y) dy` on a window grid around `x`.
pub fn apply_kernel_2d<F>(
    cfg: &KernelConfig,
    tau: f64,
    x: PolarPoint,
    f: F,
    supp: SupportBox,
    q: &OracleQuad,
) -> Result<f64>
where
    F: Fn(f64, f64) -> f64 + Sync,
{
    let w = q.window_sigmas * (2.0 * tau).sqrt();
    let r_lo = (x.r - w).max(supp.r_lo);
    let r_hi = (x.r + w).min(supp.r_hi);
    let (mut a_lo, mut a_hi) = (supp.theta_lo, supp.theta_hi);
    if x.r > w {
        let half = (w / x.r).asin();
        a_lo = a_lo.max(x.theta - half);
        a_hi = a_hi.min(x.theta + half);
    }
    if r_lo >= r_hi || a_lo >= a_hi {
        return Ok(0.0);
    }
    let mut rb = linspace(r_lo, r_hi, q.radial_cells);
    if r_lo == 0.0 {
        let h = rb[1];
        let inner: Vec<f64> = (1..=10).rev().map(|j| h * 0.5f64.powi(j)).collect();
        rb.splice(1..1, inner);
    }
    let ab = linspace(a_lo, a_hi, q.angular_cells);
    let grid = PolarGrid::from_breaks(&cfg.domain, &rb, &ab, q.points)?;
    let (radii, angles) = (grid.radii(), grid.angles());
    integrate_against_kernel(cfg, tau, x, &grid, |i, j| f(radii[i], angles[j]))
}

/// `∫₀^t P(τ) dτ` with `P` smooth except at `τ = t − s_k` and integrably singular at 0.
fn integrate_tau<P>(spec: &TimeQuadSpec, t: f64, switches: &[f64], mut p: P) -> Result<f64>
where
    P: FnMut(f64) -> Result<f64>,
{
    spec.validate()?;
    let mut breaks = vec![0.0];
    breaks.extend(switches.iter().rev().filter(|&&s| s > 0.0 && s < t).map(|s| t - s));
    breaks.push(t);
    let mut acc = Kahan::default();
    for seg in breaks.windows(2) {
        for (u, w) in spec.graded_rule(seg[1] - seg[0]) {
            let v = p(seg[0] + u)?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("time integrand at τ={}", seg[0] + u)));
            }
            acc.add(w * v);
        }
    }
    Ok(acc.sum())
}

/// `v(t,x) = ∫₀^t ∫_D G(t−s,x,y) f(s,y) dy ds` by nested quadrature against the series kernel.
pub fn det_convolve(cfg: &KernelConfig, src: &SourceSpec, t: f64, x: PolarPoint, q: &OracleQuad) -> Result<f64> {
    let d = cfg.domain;
    src.validate(&d)?;
    check_times(&[t])?;
    if src.is_zero() {
        return Ok(0.0);
    }
    let supp = src.support(&d);
    integrate_tau(&q.time, t, &src.switch_times(), |tau| {
        let s = t - tau;
        apply_kernel_2d(cfg, tau, x, |r, a| src.eval(&d, s, r, a), supp, q)
    })
}

/// `(e^{tΔ} h)(x)` for a time-independent field supported in `supp`.
pub fn semigroup_2d<F>(cfg: &KernelConfig, t: f64, x: PolarPoint, h: F, supp: SupportBox, q: &OracleQuad) -> Result<f64>
where
    F: Fn(f64, f64) -> f64 + Sync,
{
    apply_kernel_2d(cfg, t, x, h, supp, q)
}

/// `Var w(t,x)` by nested 2D quadrature (independent of the separable path).
pub fn variance_oracle(cfg: &KernelConfig, noise: &NoiseSpec, t: f64, x: PolarPoint, q: &OracleQuad) -> Result<f64> {
    let d = cfg.domain;
    noise.validate()?;
    check_times(&[t])?;
    let mut acc = Kahan::default();
    for m in &noise.modes {
        let supp = terms_support(&d, std::slice::from_ref(m));
        let v = integrate_tau(&q.time, t, &m.schedule.switch_times, |tau| {
            let s = t - tau;
            let h = apply_kernel_2d(cfg, tau, x, |r, a| m.eval(&d, s, r, a), supp, q)?;
            Ok(h * h)
        })?;
        acc.add(v);
    }
    Ok(acc.sum())
}

/// Sample moments of `w(t, x)` at one probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeMoments {
    pub r: f64,
    pub theta: f64,
    /// `Σ_i q_i Σ_k h_k(τ_i)²` of the discretised integral.
    pub model_variance: f64,
    pub sample_variance: f64,
    pub variance_se: f64,
    pub mean_abs_p: f64,
    pub abs_p_se: f64,
    pub kurtosis: f64,
    pub kurtosis_se: f64,
}

/// Monte Carlo draws of `w(t,x) = Σ_k ∫₀^t h_k(s,x) dW^k_s` at several probes.
///
/// `h_k` is tabulated on the graded time rule of `q.time`; path `i` uses the
/// ChaCha8 stream `(seed, i)`, so results do not depend on thread count.
pub fn mc_sample_w(
    cfg: &KernelConfig,
    noise: &NoiseSpec,
    t: f64,
    probes: &[PolarPoint],
    n_paths: usize,
    seed: u64,
    p: f64,
    q: &SeparableQuad,
) -> Result<Vec<ProbeMoments>> {
    noise.validate()?;
    check_times(&[t])?;
    if n_paths < 100 {
        return Err(Error::invalid("Monte Carlo needs at least 100 paths"));
    }
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::invalid("moment order must be ≥ 1"));
    }
    let d = cfg.domain;
    let switches = merged_switches(&noise.modes);
    let mut nodes: Vec<(f64, f64)> = Vec::new();
    let mut breaks = vec![0.0];
    breaks.extend(switches.iter().rev().filter(|&&s| s > 0.0 && s < t).map(|s| t - s));
    breaks.push(t);
    for seg in breaks.windows(2) {
        nodes.extend(q.time.graded_rule(seg[1] - seg[0]).into_iter().map(|(u, w)| (seg[0] + u, w)));
    }
    // loadings[probe][k * n_nodes + i] = h_k(τ_i) √q_i
    let loadings: Vec<Vec<f64>> = probes
        .iter()
        .map(|x| {
            let mut out = Vec::with_capacity(noise.modes.len() * nodes.len());
            for m in &noise.modes {
                let ang = m.coefficient * m.angular(&d, x.theta);
                for &(tau, w) in &nodes {
                    let s = radial_semigroup(cfg, m.order(&d), &m.radial, tau, x.r, q)?;
                    out.push(m.schedule.amplitude(t - tau) * ang * s * w.sqrt());
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let n_xi = noise.modes.len() * nodes.len();
    let draws: Vec<Vec<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(path as u64);
            let xi: Vec<f64> = (0..n_xi).map(|_| StandardNormal.sample(&mut rng)).collect();
            loadings
                .iter()
                .map(|l| compensated_sum(l.iter().zip(&xi).map(|(a, b)| a * b)))
                .collect()
        })
        .collect();
    let n = n_paths as f64;
    Ok(probes
        .iter()
        .enumerate()
        .map(|(j, x)| {
            let mut m2 = Kahan::default();
            let mut m4 = Kahan::default();
            let mut mp = Kahan::default();
            let mut mp2 = Kahan::default();
            for dr in &draws {
                let w = dr[j];
                let w2 = w * w;
                let wp = w.abs().powf(p);
                m2.add(w2);
                m4.add(w2 * w2);
                mp.add(wp);
                mp2.add(wp * wp);
            }
            let (m2, m4, mp, mp2) = (m2.sum() / n, m4.sum() / n, mp.sum() / n, mp2.sum() / n);
            let model = compensated_sum(loadings[j].iter().map(|a| a * a));
            let kurt = if m2 > 0.0 { m4 / (m2 * m2) } else { f64::NAN };
            ProbeMoments {
                r: x.r,
                theta: x.theta,
                model_variance: model,
                sample_variance: m2,
                variance_se: ((m4 - m2 * m2).max(0.0) / n).sqrt(),
                mean_abs_p: mp,
                abs_p_se: ((mp2 - mp * mp).max(0.0) / n).sqrt(),
                kurtosis: kurt,
                kurtosis_se: (24.0 / n).sqrt(),
            }
        })
        .collect())
}

/// `E ∫₀^T ∫_{δ<|x|<ε} ||x|^{−1} u|^p |x|^{θ−2} dx dt` for `u = r^α sin(αϑ) β_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterexampleSpec {
    pub domain: AngularDomain,
    pub t_final: f64,
    pub p: f64,
    pub theta: f64,
    pub epsilon: f64,
    pub delta_sequence: Vec<f64>,
}

impl CounterexampleSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return Err(Error::invalid("T must be positive"));
        }
        if !(self.p >= 2.0 && self.p.is_finite() && self.theta.is_finite()) {
            return Err(Error::invalid("need p ≥ 2 and finite θ"));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::invalid("epsilon must lie in (0, 1]"));
        }
        let ds = &self.delta_sequence;
        if ds.iter().any(|d| !(*d > 0.0)) || ds.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("delta_sequence must be positive and strictly decreasing"));
        }
        Ok(())
    }

    /// `q = (α − 1)p + θ`.
    pub fn exponent_q(&self) -> f64 {
        (self.domain.critical_exponent() - 1.0) * self.p + self.theta
    }

    /// `E|Z|^p · ∫₀^T t^{p/2} dt · ∫₀^{κ₀} |sin αϑ|^p dϑ`, the last two by quadrature.
    pub fn prefactor(&self) -> Result<f64> {
        let spec = TimeQuadSpec::default();
        let time = compensated_sum(spec.graded_rule(self.t_final).into_iter().map(|(u, w)| w * u.powf(self.p / 2.0)));
        let a = self.domain.critical_exponent();
        let k = self.domain.kappa0();
        let gl = GaussLegendre::new(16);
        let breaks = linspace(0.0, k, 16);
        let ang = compensated_sum(
            breaks
                .windows(2)
                .flat_map(|c| gl.map_to(c[0], c[1]).collect::<Vec<_>>())
                .map(|(x, w)| w * (a * x).sin().abs().powf(self.p)),
        );
        Ok(gaussian_abs_moment(self.p)? * time * ang)
    }
}

/// `∫_δ^ε r^{q−1} dr`, stable through `q → 0`.
pub fn radial_power_integral(q: f64, delta: f64, epsilon: f64) -> f64 {
    let l = (epsilon / delta).ln();
    if q == 0.0 {
        return l;
    }
    // ε^q (1 − (δ/ε)^q) / q
    epsilon.powf(q) * -(-q * l).exp_m1() / q
}

/// Counterexample moment restricted to `δ < |x| < ε`.
pub fn counterexample_integral(spec: &CounterexampleSpec, delta: f64) -> Result<f64> {
    spec.validate()?;
    if !(delta > 0.0 && delta < spec.epsilon) {
        return Err(Error::invalid(format!("delta must lie in (0, ε), got {delta}")));
    }
    let v = spec.prefactor()? * radial_power_integral(spec.exponent_q(), delta, spec.epsilon);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("counterexample integral at δ={delta}")));
    }
    Ok(v)
}

/// `r^α sin(αϑ)`.
pub fn counterexample_profile(domain: &AngularDomain, r: f64, theta: f64) -> f64 {
    let a = domain.critical_exponent();
    r.powf(a) * (a * theta).sin()
}
