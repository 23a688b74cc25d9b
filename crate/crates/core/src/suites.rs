//! Kernel identity suites, proof-integral checks and Monte Carlo consistency,
//! each packaged as an [`ExperimentReport`].

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::convolution::{mc_sample_w, variance_field, NoiseSpec, SeparableQuad};
use crate::error::{Error, Result};
use crate::experiments::{vertex_profile, ExperimentReport, Table, Versioned, SCHEMA_VERSION};
use crate::geometry::{polar_to_cart, AngularDomain, GridSpec, PolarGrid, PolarPoint};
use crate::kernel::{heat_kernel, image_kernel_oracle, kernel_mass, KernelConfig};
use crate::special::gaussian_abs_moment;
use crate::verify::{
    check_chapman_kolmogorov, check_dilation, check_symmetry, inner_refinement_study, log_space,
    verify_sup_integral_b, verify_time_tail_integral, vertex_decay_exponent, CkQuad, KernelSample, SupIntegralQuad,
};

/// `erf(1/2)`: mass left at `t = 1` for a point at distance 1 from a half-plane wall.
pub const HALF_PLANE_MASS: f64 = 0.520_499_877_813_046_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSuite {
    Symmetry,
    Scaling,
    Ck,
    Images,
    Mass,
    Decay,
}

impl KernelSuite {
    pub const ALL: [KernelSuite; 6] = [
        KernelSuite::Symmetry,
        KernelSuite::Scaling,
        KernelSuite::Ck,
        KernelSuite::Images,
        KernelSuite::Mass,
        KernelSuite::Decay,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            KernelSuite::Symmetry => "symmetry",
            KernelSuite::Scaling => "scaling",
            KernelSuite::Ck => "ck",
            KernelSuite::Images => "images",
            KernelSuite::Mass => "mass",
            KernelSuite::Decay => "decay",
        }
    }
}

impl std::str::FromStr for KernelSuite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        KernelSuite::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown suite {s}")))
    }
}

/// Random `(t, x, y)` with `t, |x|, |y|` log-uniform in `[1e-3, 10]` and `|x − y| ≤ 3√t`.
pub fn oracle_cloud(domain: &AngularDomain, n: usize, seed: u64) -> Vec<KernelSample> {
    let k = domain.kappa0();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let t = 10f64.powf(rng.random_range(-3.0..1.0));
            let x = PolarPoint::new(10f64.powf(rng.random_range(-3.0..1.0)), rng.random_range(0.02..0.98) * k);
            let (x1, x2) = polar_to_cart(x);
            let y = loop {
                let s = rng.random_range(0.0..3.0) * t.sqrt();
                let a = rng.random_range(0.0..2.0 * PI);
                let y = PolarPoint::from_cartesian(x1 + s * a.cos(), x2 + s * a.sin());
                if (1e-3..=10.0).contains(&y.r) && y.theta > 0.0 && y.theta < k {
                    break y;
                }
            };
            KernelSample { t, x, y }
        })
        .collect()
}

/// Tolerances of the kernel suites.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteTolerances {
    pub identity: f64,
    pub ck: f64,
    pub images: f64,
    pub mass: f64,
    pub decay: f64,
}

impl Default for SuiteTolerances {
    fn default() -> Self {
        SuiteTolerances {
            identity: 1e-12,
            ck: 1e-4,
            images: 1e-8,
            mass: 1e-6,
            decay: 0.02,
        }
    }
}

#[derive(Serialize)]
struct SuiteConfig {
    kappa0_over_pi: f64,
    suite: KernelSuite,
    seed: u64,
    tolerances: SuiteTolerances,
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().cloned().fold(0.0, f64::max)
}

/// Runs one kernel suite; `images` needs `κ₀ ∈ {π, π/2}`.
pub fn kernel_suite(kappa0_over_pi: f64, suite: KernelSuite, seed: u64) -> Result<ExperimentReport> {
    let domain = AngularDomain::from_multiple_of_pi(kappa0_over_pi)?;
    let cfg = KernelConfig::new(domain);
    let tol = SuiteTolerances::default();
    let mut report = ExperimentReport::new(
        &format!("kernel_{}", suite.name()),
        &SuiteConfig { kappa0_over_pi, suite, seed, tolerances: tol },
    )?;
    let k = domain.kappa0();
    match suite {
        KernelSuite::Symmetry | KernelSuite::Scaling => {
            let cloud = oracle_cloud(&domain, 200, seed);
            let mut table = Table::new("residuals", &["t", "x_r", "x_theta", "y_r", "y_theta", "a", "residual"]);
            let factors: &[f64] = if suite == KernelSuite::Symmetry { &[1.0] } else { &[2.0, 0.0625, 10.0] };
            let mut res = Vec::new();
            for s in &cloud {
                for &a in factors {
                    let r = if suite == KernelSuite::Symmetry {
                        check_symmetry(&cfg, s.t, s.x, s.y)?
                    } else {
                        check_dilation(&cfg, a, s.t, s.x, s.y)?
                    };
                    table.push(&[s.t, s.x.r, s.x.theta, s.y.r, s.y.theta, a, r.residual]);
                    res.push(r.residual);
                }
            }
            let m = max_of(&res);
            report.verdict(suite.name(), m <= tol.identity, format!("max residual {m:.3e} (≤ {:e})", tol.identity));
            report.tables.push(table);
        }
        KernelSuite::Ck => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut table = Table::new("residuals", &["t", "s", "x_r", "x_theta", "y_r", "y_theta", "lhs", "rhs", "residual", "underflow"]);
            let mut res = Vec::new();
            for _ in 0..20 {
                let t = rng.random_range(0.2..1.0);
                let s = rng.random_range(0.2..1.0);
                let x = PolarPoint::new(rng.random_range(0.3..2.0), rng.random_range(0.1..0.9) * k);
                let y = PolarPoint::new(rng.random_range(0.3..2.0), rng.random_range(0.1..0.9) * k);
                let r = check_chapman_kolmogorov(&cfg, t, s, x, y, &CkQuad::default())?;
                table.push(&[t, s, x.r, x.theta, y.r, y.theta, r.lhs, r.rhs, r.residual, if r.underflow { 1.0 } else { 0.0 }]);
                res.push(r.residual);
            }
            let m = max_of(&res);
            report.verdict("chapman-kolmogorov", m <= tol.ck, format!("max residual {m:.3e} (≤ {:e})", tol.ck));
            report.tables.push(table);
        }
        KernelSuite::Images => {
            let exact = [1.0, 0.5].iter().any(|m| (kappa0_over_pi - m).abs() < 1e-12);
            if !exact {
                return Err(Error::invalid("the image oracle exists for κ₀ = π and π/2 only"));
            }
            let series = cfg.clone().series_only();
            let mut table = Table::new("comparison", &["t", "x_r", "x_theta", "y_r", "y_theta", "series", "oracle", "rel_error"]);
            let mut res = Vec::new();
            for s in oracle_cloud(&domain, 200, seed) {
                let g = heat_kernel(&series, s.t, s.x, s.y)?;
                let o = image_kernel_oracle(k, s.t, s.x, s.y)?;
                let e = if o == 0.0 && g == 0.0 { 0.0 } else { ((g - o) / o).abs() };
                table.push(&[s.t, s.x.r, s.x.theta, s.y.r, s.y.theta, g, o, e]);
                res.push(e);
            }
            let m = max_of(&res);
            report.verdict("series vs images", m <= tol.images, format!("max relative error {m:.3e} (≤ {:e})", tol.images));
            report.tables.push(table);
        }
        KernelSuite::Mass => {
            let quad = GridSpec::new(1e-6, 16.0, 96, 48).with_grading(1.0).with_points(4);
            let mut table = Table::new("mass", &["t", "x_r", "x_theta", "mass"]);
            let mut ok = true;
            for (t, fr) in [(0.1, 0.5), (1.0, 0.5), (1.0, 0.2), (4.0, 0.5)] {
                let x = PolarPoint::new(1.0, fr * k);
                let m = kernel_mass(&cfg, t, x, &quad)?;
                ok &= (0.0..=1.0 + tol.mass).contains(&m);
                table.push(&[t, x.r, x.theta, m]);
            }
            report.verdict("mass in [0, 1]", ok, format!("all masses within [0, 1 + {:e}]", tol.mass));
            if (kappa0_over_pi - 1.0).abs() < 1e-12 {
                let m = kernel_mass(&cfg, 1.0, PolarPoint::new(1.0, PI / 2.0), &quad)?;
                let e = (m - HALF_PLANE_MASS).abs();
                report.verdict("half-plane erf(1/2)", e <= tol.mass, format!("mass {m:.10} error {e:.3e}"));
            }
            report.tables.push(table);
        }
        KernelSuite::Decay => {
            let f = vertex_decay_exponent(&cfg, 1.0, PolarPoint::new(1.0, k / 2.0), &log_space(-6.0, -3.0, 7))?;
            let a = domain.critical_exponent();
            let mut table = Table::new("decay", &["slope", "expected", "underflow"]);
            table.push(&[f.slope, a, if f.underflow { 1.0 } else { 0.0 }]);
            let e = (f.slope - a).abs();
            report.verdict("vertex decay slope", e <= tol.decay, format!("slope {:.6} vs π/κ₀ = {a:.6}", f.slope));
            report.tables.push(table);
        }
    }
    Ok(report)
}

#[derive(Serialize)]
struct ProofConfig {
    b: f64,
    exponent: f64,
    c_samples: Vec<f64>,
    x_samples: Vec<(f64, f64)>,
    quad: SupIntegralQuad,
}

/// Default `c` samples for the sup over `(c, x)`.
pub fn default_c_samples() -> Vec<f64> {
    log_space(-2.0, 2.0, 5)
}

/// Default `x` samples for the sup over `(c, x)`.
pub fn default_x_samples() -> Vec<(f64, f64)> {
    vec![(0.0, 0.0), (0.1, 0.0), (0.5, 0.5), (1.0, 0.0), (3.0, -1.0), (10.0, 0.0)]
}

/// Sup integral `I_b` (with refinement and, for `b ≤ −2`, a divergence study)
/// and the time-tail integral at `exponent`.
pub fn proof_integrals_report(b: f64, exponent: f64) -> Result<ExperimentReport> {
    let cs = default_c_samples();
    let xs = default_x_samples();
    let q = SupIntegralQuad::default();
    let mut report = ExperimentReport::new(
        "proof_integrals",
        &ProofConfig { b, exponent, c_samples: cs.clone(), x_samples: xs.clone(), quad: q },
    )?;
    let mut sup = Table::new("sup_integral", &["b", "refinement", "max", "argmax_c", "argmax_x1", "argmax_x2"]);
    if b > -2.0 {
        let coarse = verify_sup_integral_b(b, &cs, &xs, &q)?;
        let fine = verify_sup_integral_b(b, &cs, &xs, &q.refined())?;
        for (lvl, s) in [(0.0, coarse), (1.0, fine)] {
            sup.push(&[b, lvl, s.max, s.argmax_c, s.argmax_x.0, s.argmax_x.1]);
        }
        let change = ((fine.max - coarse.max) / fine.max).abs();
        report.verdict(
            "sup bounded and refinement-stable",
            fine.max.is_finite() && change <= 1e-6,
            format!("sup {:.12} (change {change:.2e} under refinement)", fine.max),
        );
        if b == 0.0 {
            let e = (fine.max - PI).abs();
            report.verdict("gaussian integral = π", e <= 1e-10, format!("{:.12}, error {e:.2e}", fine.max));
        }
    } else {
        let study = inner_refinement_study(b, 1.0, (0.0, 0.0), &log_space(-2.0, -8.0, 4), &q)?;
        let mut t = Table::new("inner_refinement", &["cutoff", "value"]);
        for (c, v) in study.cutoffs.iter().zip(&study.values) {
            t.push(&[*c, *v]);
        }
        report.tables.push(t);
        report.verdict(
            "divergence detected",
            study.divergent,
            format!("growth exponent {:.4} vs −(b + 2) = {:.4}", study.slope, -(b + 2.0)),
        );
    }
    report.tables.push(sup);
    let tail = verify_time_tail_integral(exponent)?;
    let mut tt = Table::new("time_tail", &["exponent", "quadrature", "closed_form"]);
    tt.push(&[exponent, tail.quadrature, tail.closed_form]);
    report.tables.push(tt);
    let e = ((tail.quadrature - tail.closed_form) / tail.closed_form).abs();
    report.verdict("time tail matches closed form", e <= 1e-10, format!("{:.12} vs {:.12}", tail.quadrature, tail.closed_form));
    Ok(report)
}

/// Monte Carlo cross-check of the Gaussian moment formula.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    #[serde(default = "one")]
    pub schema_version: u32,
    pub kappa0_over_pi: f64,
    pub t: f64,
    pub p: f64,
    /// `(r, ϑ/κ₀)` pairs.
    pub probes: Vec<(f64, f64)>,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    #[serde(default = "paths")]
    pub n_paths: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub quad: SeparableQuad,
}

fn one() -> u32 {
    SCHEMA_VERSION
}

fn paths() -> usize {
    10_000
}

impl Versioned for McConfig {
    fn schema_version(&self) -> u32 {
        self.schema_version
    }
}

impl McConfig {
    pub fn new(kappa0_over_pi: f64, t: f64, p: f64, probes: Vec<(f64, f64)>) -> Self {
        McConfig {
            schema_version: SCHEMA_VERSION,
            kappa0_over_pi,
            t,
            p,
            probes,
            noise: None,
            n_paths: paths(),
            seed: 0,
            quad: SeparableQuad::default(),
        }
    }
}

/// `Var w(t, x)` at one point through the separable path.
fn variance_at(cfg: &KernelConfig, noise: &NoiseSpec, t: f64, x: PolarPoint, q: &SeparableQuad) -> Result<f64> {
    // one-node grid: a single midpoint rule cell around x
    let h = 1e-3 * x.r.min(x.theta).min(cfg.domain.kappa0() - x.theta);
    let g = PolarGrid::from_breaks(&cfg.domain, &[x.r - h, x.r + h], &[x.theta - h, x.theta + h], 1)?;
    Ok(variance_field(cfg, noise, &[t], &g, q)?.values[0])
}

/// Sample `E|w|^p` and kurtosis against `E|Z|^p Var^{p/2}` and 3.
pub fn mc_report(config: &McConfig) -> Result<ExperimentReport> {
    let domain = AngularDomain::from_multiple_of_pi(config.kappa0_over_pi)?;
    let cfg = KernelConfig::new(domain);
    let noise = config
        .noise
        .clone()
        .unwrap_or_else(|| NoiseSpec { modes: vec![vertex_profile(domain.critical_exponent())] });
    if config.probes.iter().any(|(r, f)| !(*r > 0.0 && *f > 0.0 && *f < 1.0)) {
        return Err(Error::invalid("probes need r > 0 and angle fraction in (0, 1)"));
    }
    let probes: Vec<PolarPoint> = config.probes.iter().map(|(r, f)| PolarPoint::new(*r, f * domain.kappa0())).collect();
    let moments = mc_sample_w(&cfg, &noise, config.t, &probes, config.n_paths, config.seed, config.p, &config.quad)?;
    let ez = gaussian_abs_moment(config.p)?;
    let mut report = ExperimentReport::new("mc", config)?;
    let mut table = Table::new(
        "moments",
        &["r", "theta", "variance", "model_variance", "analytic_abs_p", "mean_abs_p", "abs_p_se", "z_score", "kurtosis", "kurtosis_se"],
    );
    let mut worst_z: f64 = 0.0;
    let mut worst_k: f64 = 0.0;
    for (x, m) in probes.iter().zip(&moments) {
        let var = variance_at(&cfg, &noise, config.t, *x, &config.quad)?;
        let analytic = ez * var.powf(config.p / 2.0);
        let z = (m.mean_abs_p - analytic) / m.abs_p_se;
        let kz = (m.kurtosis - 3.0) / m.kurtosis_se;
        worst_z = worst_z.max(z.abs());
        worst_k = worst_k.max(kz.abs());
        table.push(&[x.r, x.theta, var, m.model_variance, analytic, m.mean_abs_p, m.abs_p_se, z, m.kurtosis, m.kurtosis_se]);
    }
    report.tables.push(table);
    report.verdict("E|w|^p within 3 SE", worst_z <= 3.0, format!("max |z| = {worst_z:.3}"));
    report.verdict("kurtosis 3 within 5 SE", worst_k <= 5.0, format!("max |z| = {worst_k:.3}"));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_roundtrip() {
        for s in KernelSuite::ALL {
            assert_eq!(s.name().parse::<KernelSuite>().unwrap(), s);
        }
        assert!("nope".parse::<KernelSuite>().is_err());
    }

    #[test]
    fn cloud_is_seeded_and_inside() {
        let d = AngularDomain::new(1.5 * PI).unwrap();
        let a = oracle_cloud(&d, 50, 3);
        assert_eq!(a, oracle_cloud(&d, 50, 3));
        assert!(a.iter().all(|s| s.y.theta > 0.0 && s.y.theta < d.kappa0() && s.x.r >= 1e-3));
    }

    #[test]
    fn images_suite_rejects_other_angles() {
        assert!(kernel_suite(1.5, KernelSuite::Images, 0).is_err());
    }

    #[test]
    fn decay_and_symmetry_suites_pass() {
        assert!(kernel_suite(1.5, KernelSuite::Decay, 0).unwrap().passed());
        assert!(kernel_suite(0.5, KernelSuite::Symmetry, 0).unwrap().passed());
    }

    #[test]
    fn proof_report_b_zero() {
        let r = proof_integrals_report(0.0, 4.0).unwrap();
        assert!(r.passed(), "{:?}", r.verdicts);
        let r = proof_integrals_report(-2.5, 3.0).unwrap();
        assert!(r.passed(), "{:?}", r.verdicts);
    }

    #[test]
    fn point_variance_matches_field() {
        let d = AngularDomain::new(PI).unwrap();
        let cfg = KernelConfig::new(d);
        let noise = NoiseSpec { modes: vec![vertex_profile(1.0)] };
        let q = SeparableQuad::default();
        let x = PolarPoint::new(0.2, 1.0);
        let v = variance_at(&cfg, &noise, 0.5, x, &q).unwrap();
        let g = PolarGrid::from_breaks(&d, &[0.1, 0.3], &[0.5, 1.5], 1).unwrap();
        let w = variance_field(&cfg, &noise, &[0.5], &g, &q).unwrap().values[0];
        assert_eq!(v, w);
    }
}
