//! Numerical checks of kernel identities, the Kozlov bound, the vertex decay
//! rate, and the auxiliary integrals used in the weighted estimate.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::WeightParams;
use crate::geometry::{distance, polar_to_cart, AngularDomain, PolarGrid, PolarPoint};
use crate::kernel::{heat_kernel, heat_kernel_ring, KernelConfig};
use crate::quadrature::{compensated_sum, GaussLegendre, Kahan};

/// Values below this count as underflow in ratio checks.
pub const UNDERFLOW: f64 = 1e-250;

/// Relative residual of an identity, with an underflow marker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub residual: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub underflow: bool,
}

fn residual(lhs: f64, rhs: f64) -> Residual {
    if lhs.abs() < 1e-300 && rhs.abs() < 1e-300 {
        return Residual { residual: 0.0, lhs, rhs, underflow: true };
    }
    Residual {
        residual: ((lhs - rhs) / rhs).abs(),
        lhs,
        rhs,
        underflow: false,
    }
}

/// Layout of the spatial quadrature in the Chapman–Kolmogorov check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CkQuad {
    /// Window half-width around each point, in units of `√(2t)`.
    pub window_sigmas: f64,
    /// Cells per `√(2 min(t, s))` in both directions.
    pub cells_per_sigma: f64,
    pub points: usize,
    pub max_cells: usize,
}

impl Default for CkQuad {
    fn default() -> Self {
        CkQuad {
            window_sigmas: 9.0,
            cells_per_sigma: 2.0,
            points: 4,
            max_cells: 4000,
        }
    }
}

fn uniform_breaks(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| if i == n { b } else { a + (b - a) * i as f64 / n as f64 }).collect()
}

/// `|∫ G(t,x,z) G(s,z,y) dz − G(t+s,x,y)| / G(t+s,x,y)`.
pub fn check_chapman_kolmogorov(
    cfg: &KernelConfig,
    t: f64,
    s: f64,
    x: PolarPoint,
    y: PolarPoint,
    quad: &CkQuad,
) -> Result<Residual> {
    if !(t > 0.0 && s > 0.0 && t.is_finite() && s.is_finite()) {
        return Err(Error::invalid("t and s must be positive"));
    }
    let rhs = heat_kernel(cfg, t + s, x, y)?;
    let wt = quad.window_sigmas * (2.0 * t).sqrt();
    let ws = quad.window_sigmas * (2.0 * s).sqrt();
    let r_lo = (x.r - wt).max(y.r - ws).max(0.0);
    let r_hi = (x.r + wt).min(y.r + ws);
    if r_lo >= r_hi {
        return Ok(residual(0.0, rhs));
    }
    let h = (2.0 * t.min(s)).sqrt() / quad.cells_per_sigma;
    let nr = ((r_hi - r_lo) / h).ceil() as usize;
    let k0 = cfg.domain.kappa0();
    let na = (k0 * r_hi / h).ceil() as usize;
    if nr.max(na) > quad.max_cells {
        return Err(Error::invalid(format!("Chapman–Kolmogorov grid needs {} cells", nr.max(na))));
    }
    let grid = PolarGrid::from_breaks(
        &cfg.domain,
        &uniform_breaks(r_lo, r_hi, nr.max(1)),
        &uniform_breaks(0.0, k0, na.max(4)),
        quad.points,
    )?;
    let per_radius: Vec<f64> = (0..grid.n_radii())
        .into_par_iter()
        .map(|i| {
            let rho = grid.radii()[i];
            let a = heat_kernel_ring(cfg, t, x, rho, grid.angles())?;
            let b = heat_kernel_ring(cfg, s, y, rho, grid.angles())?;
            let ring = compensated_sum(a.iter().zip(&b).zip(grid.angular_weights()).map(|((u, v), w)| u * v * w));
            Ok(ring * rho * grid.radial_weights()[i])
        })
        .collect::<Result<_>>()?;
    Ok(residual(compensated_sum(per_radius), rhs))
}

/// `|a² G(a²t, ax, ay) − G(t,x,y)| / G(t,x,y)`.
pub fn check_dilation(cfg: &KernelConfig, a: f64, t: f64, x: PolarPoint, y: PolarPoint) -> Result<Residual> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(Error::invalid("dilation factor must be positive"));
    }
    let base = heat_kernel(cfg, t, x, y)?;
    let scaled = a * a * heat_kernel(cfg, a * a * t, PolarPoint::new(a * x.r, x.theta), PolarPoint::new(a * y.r, y.theta))?;
    Ok(residual(scaled, base))
}

/// `|G(t,x,y) − G(t,y,x)| / G(t,x,y)`.
pub fn check_symmetry(cfg: &KernelConfig, t: f64, x: PolarPoint, y: PolarPoint) -> Result<Residual> {
    Ok(residual(heat_kernel(cfg, t, y, x)?, heat_kernel(cfg, t, x, y)?))
}

/// One `(t, x, y)` sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSample {
    pub t: f64,
    pub x: PolarPoint,
    pub y: PolarPoint,
}

/// Log-spaced values `10^{lo} … 10^{hi}` (`n ≥ 2`).
pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (n - 1) as f64)).collect()
}

/// Sample layout for the bound fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CloudSpec {
    /// `log10` range of `t`.
    pub log_t: (f64, f64),
    pub n_t: usize,
    /// `log10` range of `|x|`.
    pub log_r: (f64, f64),
    pub n_r: usize,
    /// `ϑ_x` as fractions of `κ₀`.
    pub x_angles: Vec<f64>,
    /// `|y|` as multiples of `√t`.
    pub y_scales: Vec<f64>,
    /// `ϑ_y` as fractions of `κ₀`.
    pub y_angles: Vec<f64>,
}

impl Default for CloudSpec {
    fn default() -> Self {
        CloudSpec {
            log_t: (-4.0, 2.0),
            n_t: 7,
            log_r: (-6.0, 2.0),
            n_r: 33,
            x_angles: vec![0.1, 0.5, 0.8],
            y_scales: vec![0.01, 0.3, 1.0, 3.0],
            y_angles: vec![0.3, 0.6],
        }
    }
}

impl CloudSpec {
    pub fn samples(&self, domain: &AngularDomain) -> Result<Vec<KernelSample>> {
        let frac_ok = |v: &[f64]| v.iter().all(|f| *f > 0.0 && *f < 1.0) && !v.is_empty();
        if self.n_t < 2 || self.n_r < 2 || !frac_ok(&self.x_angles) || !frac_ok(&self.y_angles) {
            return Err(Error::invalid("cloud needs ≥ 2 times and radii and interior angle fractions"));
        }
        if self.y_scales.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("y scales must be positive"));
        }
        let k = domain.kappa0();
        let mut out = Vec::new();
        for t in log_space(self.log_t.0, self.log_t.1, self.n_t) {
            for r in log_space(self.log_r.0, self.log_r.1, self.n_r) {
                for fx in &self.x_angles {
                    for sy in &self.y_scales {
                        for fy in &self.y_angles {
                            out.push(KernelSample {
                                t,
                                x: PolarPoint::new(r, fx * k),
                                y: PolarPoint::new(sy * t.sqrt(), fy * k),
                            });
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// `R_{x,t} = |x| / (|x| + |y| + √t)`.
pub fn kozlov_r(t: f64, x: PolarPoint, y: PolarPoint) -> f64 {
    x.r / (x.r + y.r + t.sqrt())
}

/// Outcome of the bound fit at one `σ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreenBoundFit {
    pub lambda: f64,
    pub sigma: f64,
    pub sup_ratio: f64,
    pub sample_size: usize,
    /// Per-decade maxima of the ratio over `R_{x,t}`, ascending.
    pub profile: Vec<ProfileBin>,
    pub underflow_excluded: usize,
    pub unresolved_excluded: usize,
    /// Max ratio per octave of `|x−y|/√t` (octave 0 holds everything below 2).
    pub far_profile: Vec<(f64, f64)>,
    /// Smallest-decade max over the max two decades up.
    pub vertex_growth: f64,
    pub stable: bool,
}

/// One decade `[10^d, 10^{d+1})` of `R_{x,t}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileBin {
    pub decade: f64,
    pub max_ratio: f64,
    /// `R_{x,t}` of the maximising sample.
    pub r_at_max: f64,
}

/// Bound fit over a σ grid: the fit at the largest stable σ, or `None` (unbounded).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreenBoundScan {
    pub fits: Vec<GreenBoundFit>,
    pub chosen: Option<usize>,
}

impl GreenBoundScan {
    pub fn best(&self) -> Option<&GreenBoundFit> {
        self.chosen.map(|i| &self.fits[i])
    }
}

struct Evaluated {
    t: f64,
    dist2: f64,
    g: f64,
    rx: f64,
    ry: f64,
}

/// Ratio `|G| t e^{σ|x−y|²/t} / (R_x^λ R_y^λ)` over a sample cloud, per σ.
///
/// Samples with `G` underflowed to 0, or with numerator and denominator both
/// below [`UNDERFLOW`], are skipped, as are kernel evaluations that exceed the
/// series cap; both are counted. A σ is stable when the two smallest `R_{x,t}`
/// decades agree within `stability_factor` and the two outermost `|x−y|/√t`
/// octaves stay within `stability_factor` of the maximum over the others.
pub fn fit_green_bound(
    cfg: &KernelConfig,
    lambda: f64,
    cloud: &[KernelSample],
    sigma_grid: &[f64],
    stability_factor: f64,
) -> Result<GreenBoundScan> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid("λ must be ≥ 0"));
    }
    if sigma_grid.is_empty() || sigma_grid.iter().any(|s| !(*s > 0.0 && *s <= 0.25)) {
        return Err(Error::invalid("σ must lie in (0, 1/4]"));
    }
    let evaluated: Vec<Option<Evaluated>> = cloud
        .par_iter()
        .map(|s| match heat_kernel(cfg, s.t, s.x, s.y) {
            Ok(g) => Ok(Some(Evaluated {
                t: s.t,
                dist2: distance(s.x, s.y).powi(2),
                g: g.abs(),
                rx: kozlov_r(s.t, s.x, s.y),
                ry: kozlov_r(s.t, s.y, s.x),
            })),
            Err(Error::NonConvergent { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let unresolved = evaluated.iter().filter(|e| e.is_none()).count();
    let mut fits = Vec::new();
    for &sigma in sigma_grid {
        let mut sup: f64 = 0.0;
        let mut n = 0;
        let mut under = 0;
        let mut decades: std::collections::BTreeMap<i32, (f64, f64)> = Default::default();
        let mut far: std::collections::BTreeMap<i32, f64> = Default::default();
        for e in evaluated.iter().flatten() {
            // log-space to keep e^{σ d²/t} from overflowing
            let ln_den = lambda * (e.rx.ln() + e.ry.ln());
            let ln_num = if e.g > 0.0 { e.g.ln() + e.t.ln() + sigma * e.dist2 / e.t } else { f64::NEG_INFINITY };
            let tiny = UNDERFLOW.ln();
            if e.g == 0.0 || (ln_num < tiny && ln_den < tiny) {
                under += 1;
                continue;
            }
            let ratio = (ln_num - ln_den).exp();
            n += 1;
            sup = sup.max(ratio);
            let far_bin = (e.dist2 / e.t).sqrt().max(1.0).log2().floor() as i32;
            let f = far.entry(far_bin).or_insert(0.0);
            *f = f.max(ratio);
            let dec = e.rx.log10().floor() as i32;
            let m = decades.entry(dec).or_insert((0.0, e.rx));
            if ratio > m.0 {
                *m = (ratio, e.rx);
            }
        }
        let profile: Vec<ProfileBin> = decades
            .iter()
            .map(|(d, m)| ProfileBin { decade: 10f64.powi(*d), max_ratio: m.0, r_at_max: m.1 })
            .collect();
        let growth = if profile.len() >= 3 { profile[0].max_ratio / profile[2].max_ratio } else { f64::NAN };
        let vertex_stable = profile.len() >= 2 && {
            let q = profile[0].max_ratio / profile[1].max_ratio;
            q < stability_factor && q > 1.0 / stability_factor
        };
        // the two outermost |x−y|/√t octaves must not dominate the rest
        let far_max: Vec<f64> = far.values().copied().collect();
        let far_stable = far_max.len() >= 3 && {
            let k = far_max.len() - 2;
            let inner = far_max[..k].iter().cloned().fold(0.0, f64::max);
            far_max[k..].iter().all(|m| *m <= stability_factor * inner)
        };
        let stable = sup.is_finite() && vertex_stable && far_stable;
        fits.push(GreenBoundFit {
            lambda,
            sigma,
            sup_ratio: sup,
            sample_size: n,
            profile,
            underflow_excluded: under,
            unresolved_excluded: unresolved,
            far_profile: far.iter().map(|(k, m)| (2f64.powi(*k), *m)).collect(),
            vertex_growth: growth,
            stable,
        });
    }
    let chosen = (0..fits.len())
        .filter(|&i| fits[i].stable)
        .max_by(|&a, &b| fits[a].sigma.total_cmp(&fits[b].sigma));
    Ok(GreenBoundScan { fits, chosen })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Fitted slope of the smallest `decades` entries of a ratio profile.
pub fn profile_vertex_slope(fit: &GreenBoundFit, decades: usize) -> Option<f64> {
    if fit.profile.len() < decades.max(2) {
        return None;
    }
    let pts: Vec<(f64, f64)> = fit.profile[..decades].iter().map(|b| (b.r_at_max, b.max_ratio)).collect();
    Some(log_log_slope(&pts))
}

/// Slope of `ln G(t, (r, κ₀/2), y0)` against `ln r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub slope: f64,
    pub underflow: bool,
}

pub fn vertex_decay_exponent(cfg: &KernelConfig, t: f64, y0: PolarPoint, r_samples: &[f64]) -> Result<DecayFit> {
    if r_samples.len() < 2 || r_samples.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::invalid("need ≥ 2 positive radii"));
    }
    let lo = r_samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = r_samples.iter().cloned().fold(0.0, f64::max);
    if hi / lo < 1e3 {
        return Err(Error::invalid("radii must span at least three decades"));
    }
    if hi > 1e-2 * y0.r.min(t.sqrt()) {
        return Err(Error::invalid("radii must be far below |y0| and √t"));
    }
    let theta = cfg.domain.kappa0() / 2.0;
    let pts: Vec<(f64, f64)> = r_samples
        .iter()
        .map(|&r| Ok((r, heat_kernel(cfg, t, PolarPoint::new(r, theta), y0)?)))
        .collect::<Result<_>>()?;
    let underflow = pts.iter().any(|p| p.1 < UNDERFLOW);
    let good: Vec<(f64, f64)> = pts.into_iter().filter(|p| p.1 > 0.0).collect();
    if good.len() < 2 {
        return Ok(DecayFit { slope: f64::NAN, underflow: true });
    }
    Ok(DecayFit { slope: log_log_slope(&good), underflow })
}

/// Hölder split used in the weighted estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProofIntegralParams {
    pub p: f64,
    pub lambda: f64,
    pub mu: f64,
    pub alpha: f64,
    pub beta: f64,
    /// `αp − 2`.
    pub b: f64,
    /// `−b` when `b < 0`.
    pub beta_prime: Option<f64>,
}

impl ProofIntegralParams {
    /// Picks `α, β` at the midpoints of `(0, μ+λ−2/p′)` and `(0, −μ+λ+2/p′)`.
    pub fn from_weights(params: &WeightParams, lambda: f64) -> Result<Self> {
        if params.p < 2.0 {
            return Err(Error::invalid("the split needs p ≥ 2"));
        }
        if !(lambda > 0.0) {
            return Err(Error::invalid("λ must be positive"));
        }
        let mu = params.derived().mu;
        let pd = params.p / (params.p - 1.0);
        let a_hi = mu + lambda - 2.0 / pd;
        let b_hi = -mu + lambda + 2.0 / pd;
        if !(a_hi > 0.0 && b_hi > 0.0) {
            return Err(Error::invalid(format!(
                "no admissible split: α range (0, {a_hi}), β range (0, {b_hi})"
            )));
        }
        let alpha = a_hi / 2.0;
        let beta = b_hi / 2.0;
        let out = ProofIntegralParams {
            p: params.p,
            lambda,
            mu,
            alpha,
            beta,
            b: alpha * params.p - 2.0,
            beta_prime: (alpha * params.p - 2.0 < 0.0).then(|| 2.0 - alpha * params.p),
        };
        if !out.satisfies_split() {
            return Err(Error::invalid("constructed split violates its inequalities"));
        }
        Ok(out)
    }

    /// Both split inequalities, evaluated.
    pub fn satisfies_split(&self) -> bool {
        let pd = self.p / (self.p - 1.0);
        0.0 < self.alpha
            && self.alpha < self.mu + self.lambda - 2.0 / pd
            && 0.0 < self.beta
            && self.beta < -self.mu + self.lambda + 2.0 / pd
    }

    /// `βp + 2`, the exponent of the time tail.
    pub fn time_exponent(&self) -> f64 {
        self.beta * self.p + 2.0
    }
}

/// Quadrature for `I_b(c, x) = ∫_{R²} e^{−|z|²} (|x−cz| / (|x|+|x−cz|+c))^b dz`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupIntegralQuad {
    /// Gaussian extent beyond the centre offset.
    pub radius: f64,
    pub radial_panels: usize,
    /// Geometric panels (ratio 1/4) toward the singular point.
    pub graded_panels: usize,
    pub angular_cells: usize,
    pub points: usize,
}

impl Default for SupIntegralQuad {
    fn default() -> Self {
        SupIntegralQuad {
            radius: 8.0,
            radial_panels: 32,
            graded_panels: 24,
            angular_cells: 32,
            points: 8,
        }
    }
}

impl SupIntegralQuad {
    pub fn refined(&self) -> Self {
        SupIntegralQuad {
            radius: self.radius,
            radial_panels: self.radial_panels * 2,
            graded_panels: self.graded_panels * 2,
            angular_cells: self.angular_cells * 2,
            points: self.points,
        }
    }
}

fn sup_integrand(b: f64, c: f64, x: (f64, f64), z: (f64, f64), d: Option<f64>) -> f64 {
    let g = (-(z.0 * z.0 + z.1 * z.1)).exp();
    if b == 0.0 {
        return g;
    }
    let d = d.unwrap_or_else(|| (x.0 - c * z.0).hypot(x.1 - c * z.1));
    let nx = x.0.hypot(x.1);
    g * (d / (nx + d + c)).powf(b)
}

/// `I_b(c, x)` over `|z − z₀| ≥ inner`, polar around `z₀ = x/c` (or the origin when
/// `|x/c| > 6`), so the only singularity sits at the polar centre.
pub fn sup_integral_b(b: f64, c: f64, x: (f64, f64), inner: f64, quad: &SupIntegralQuad) -> Result<f64> {
    if !(c > 0.0 && c.is_finite() && b.is_finite()) {
        return Err(Error::invalid("c must be positive and b finite"));
    }
    let z0 = (x.0 / c, x.1 / c);
    let centred = z0.0.hypot(z0.1) <= 6.0;
    let centre = if centred { z0 } else { (0.0, 0.0) };
    let outer = centre.0.hypot(centre.1) + quad.radius;
    let gl = GaussLegendre::new(quad.points);
    let mut breaks = vec![inner];
    let h = outer / quad.radial_panels as f64;
    let mut g = h;
    let mut graded = Vec::new();
    for _ in 0..quad.graded_panels {
        g *= 0.25;
        if g > inner {
            graded.push(g);
        }
    }
    graded.reverse();
    breaks.extend(graded);
    breaks.extend((1..=quad.radial_panels).map(|i| h * i as f64).filter(|&v| v > inner));
    breaks.dedup();
    let ab = uniform_breaks(0.0, 2.0 * PI, quad.angular_cells);
    let angles: Vec<(f64, f64)> = ab.windows(2).flat_map(|w| gl.map_to(w[0], w[1]).collect::<Vec<_>>()).collect();
    let mut acc = Kahan::default();
    for w in breaks.windows(2) {
        for (rho, wr) in gl.map_to(w[0], w[1]) {
            let ring = compensated_sum(angles.iter().map(|&(phi, wa)| {
                let z = (centre.0 + rho * phi.cos(), centre.1 + rho * phi.sin());
                // |x − cz| = cρ exactly around z₀
                wa * sup_integrand(b, c, x, z, centred.then_some(c * rho))
            }));
            acc.add(ring * rho * wr);
        }
    }
    let v = acc.sum();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("sup integral at c={c}")));
    }
    Ok(v)
}

/// Maximum of `I_b` over a sample grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupIntegral {
    pub max: f64,
    pub argmax_c: f64,
    pub argmax_x: (f64, f64),
}

/// `max_{c, x} I_b(c, x)`; for `b ≤ −2` every sample contains the non-integrable
/// point `z = x/c`, reported as [`Error::NonFinite`].
pub fn verify_sup_integral_b(
    b: f64,
    c_samples: &[f64],
    x_samples: &[(f64, f64)],
    quad: &SupIntegralQuad,
) -> Result<SupIntegral> {
    if b <= -2.0 {
        return Err(Error::NonFinite(format!(
            "integrand ~ |z − x/c|^{b} is not integrable (expected divergence)"
        )));
    }
    if c_samples.is_empty() || x_samples.is_empty() {
        return Err(Error::invalid("need at least one sample"));
    }
    let pairs: Vec<(f64, (f64, f64))> = c_samples.iter().flat_map(|&c| x_samples.iter().map(move |&x| (c, x))).collect();
    let vals: Vec<f64> = pairs
        .par_iter()
        .map(|&(c, x)| sup_integral_b(b, c, x, 0.0, quad))
        .collect::<Result<_>>()?;
    let (i, max) = vals
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    Ok(SupIntegral {
        max,
        argmax_c: pairs[i].0,
        argmax_x: pairs[i].1,
    })
}

/// `I_b` restricted to `|z − x/c| ≥ ε` for shrinking `ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerRefinement {
    pub cutoffs: Vec<f64>,
    pub values: Vec<f64>,
    /// `ln(V_last/V_prev) / ln(ε_prev/ε_last)`.
    pub slope: f64,
    pub divergent: bool,
}

/// Detects non-integrability at `z = x/c`: divergent when the last log-slope exceeds 0.05.
pub fn inner_refinement_study(b: f64, c: f64, x: (f64, f64), cutoffs: &[f64], quad: &SupIntegralQuad) -> Result<InnerRefinement> {
    if cutoffs.len() < 2 || cutoffs.windows(2).any(|w| w[1] >= w[0]) || cutoffs[cutoffs.len() - 1] <= 0.0 {
        return Err(Error::invalid("cutoffs must be positive and decreasing"));
    }
    if x.0.hypot(x.1) / c > 6.0 {
        return Err(Error::invalid("refinement study needs |x/c| ≤ 6"));
    }
    let values: Vec<f64> = cutoffs.iter().map(|&e| sup_integral_b(b, c, x, e, quad)).collect::<Result<_>>()?;
    let n = values.len();
    let slope = (values[n - 1] / values[n - 2]).ln() / (cutoffs[n - 2] / cutoffs[n - 1]).ln();
    Ok(InnerRefinement {
        cutoffs: cutoffs.to_vec(),
        values,
        slope,
        divergent: slope > 0.05,
    })
}

/// `∫₀^∞ (1+√τ)^{−e} dτ` by quadrature, with the closed form `2/((e−1)(e−2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeTail {
    pub quadrature: f64,
    pub closed_form: f64,
}

pub fn verify_time_tail_integral(exponent: f64) -> Result<TimeTail> {
    if !(exponent > 2.0 && exponent.is_finite()) {
        return Err(Error::invalid(format!("the tail integral diverges for exponent {exponent} ≤ 2")));
    }
    // τ = u², 1 + u = e^y:  2 ∫₀^∞ (1 − e^{−y}) e^{−(e−2) y} dy
    let k = exponent - 2.0;
    let f = |y: f64| -(-y).exp_m1() * (-k * y).exp();
    let y_max = 45.0 / k.min(1.0);
    let gl = GaussLegendre::new(20);
    let mut breaks = vec![0.0, 1e-3];
    while *breaks.last().unwrap() < y_max {
        let next = (breaks.last().unwrap() * 2.0).min(y_max);
        breaks.push(next);
    }
    let body = compensated_sum(breaks.windows(2).map(|w| gl.integrate(w[0], w[1], f)));
    // exact remainder past y_max
    let tail = (-k * y_max).exp() / k - (-(k + 1.0) * y_max).exp() / (k + 1.0);
    Ok(TimeTail {
        quadrature: 2.0 * (body + tail),
        closed_form: 2.0 / ((exponent - 1.0) * (exponent - 2.0)),
    })
}

/// Cartesian coordinates of a polar point, re-exported for sample construction.
pub fn cartesian(p: PolarPoint) -> (f64, f64) {
    polar_to_cart(p)
}
