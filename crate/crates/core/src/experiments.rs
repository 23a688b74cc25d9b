//! Experiment drivers and report persistence.
//!
//! Every driver takes a JSON-deserialisable config and returns an
//! [`ExperimentReport`] holding that config, numeric tables and verdicts.
//! Reports carry no wall-clock data unless `SOURCE_DATE_EPOCH` is set, so the
//! same config always produces byte-identical files.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::convolution::{
    counterexample_integral, det_field, det_rhs, lhs_weighted_moment, rhs_g_norm, variance_field, CounterexampleSpec,
    NoiseSpec, RadialProfile, SeparableQuad, SeparableTerm, SourceSpec, SpaceTimeField,
};
use crate::error::{Error, Result};
use crate::fields::{k1_norm, theta_admissible_range, weighted_lp_integral, Gradient, GradientNorm, WeightParams};
use crate::geometry::{AngularDomain, PolarGrid, PolarPoint};
use crate::kernel::KernelConfig;
use crate::quadrature::{compensated_sum, TimeQuadSpec};
use crate::special::gaussian_abs_moment;
use crate::verify::{
    fit_green_bound, log_log_slope, log_space, profile_vertex_slope, vertex_decay_exponent, CloudSpec,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Rectangular numeric table; `None` marks a flagged (undefined) entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Table {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// Non-finite values become `None`.
    pub fn push(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row.iter().map(|v| v.is_finite().then_some(*v)).collect());
    }

    pub fn column(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub criterion: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub kind: String,
    pub tool_version: String,
    /// Seconds since the epoch from `SOURCE_DATE_EPOCH`, else 0.
    pub timestamp: u64,
    pub config: serde_json::Value,
    pub tables: Vec<Table>,
    pub verdicts: Vec<Verdict>,
}

impl ExperimentReport {
    pub(crate) fn new<C: Serialize>(kind: &str, config: &C) -> Result<Self> {
        Ok(ExperimentReport {
            schema_version: SCHEMA_VERSION,
            kind: kind.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            timestamp: std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.parse().ok()).unwrap_or(0),
            config: serde_json::to_value(config).map_err(|e| Error::invalid(e.to_string()))?,
            tables: Vec::new(),
            verdicts: Vec::new(),
        })
    }

    pub(crate) fn verdict(&mut self, criterion: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.verdicts.push(Verdict {
            criterion: criterion.into(),
            passed,
            detail: detail.into(),
        });
    }

    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    /// First 16 hex digits of the SHA-256 of the embedded config.
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.config).expect("config is valid JSON");
        hex::encode(Sha256::digest(bytes))[..16].to_string()
    }

    /// Long format: `table,row,column,value`, empty value for flagged entries.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("table,row,column,value\n");
        for t in &self.tables {
            for (i, row) in t.rows.iter().enumerate() {
                for (c, v) in t.columns.iter().zip(row) {
                    let v = v.map(|x| format!("{x:e}")).unwrap_or_default();
                    out.push_str(&format!("{},{},{},{}\n", t.name, i, c, v));
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: ExperimentReport = serde_json::from_str(s).map_err(|e| Error::invalid(e.to_string()))?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid(format!("unsupported schema_version {}", r.schema_version)));
        }
        Ok(r)
    }

    /// Writes `<kind>_<hash>.json` and `.csv` into `dir`, each via temp file + rename.
    pub fn write(&self, dir: &Path) -> std::io::Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let stem = format!("{}_{}", self.kind, self.config_hash());
        let json = dir.join(format!("{stem}.json"));
        let csv = dir.join(format!("{stem}.csv"));
        write_atomic(&json, self.to_json().as_bytes())?;
        write_atomic(&csv, self.to_csv().as_bytes())?;
        Ok((json, csv))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("report");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

/// Parses a config, checking `schema_version`.
pub fn parse_config<C: serde::de::DeserializeOwned + Versioned>(json: &str) -> Result<C> {
    let c: C = serde_json::from_str(json).map_err(|e| Error::invalid(format!("config: {e}")))?;
    if c.schema_version() != SCHEMA_VERSION {
        return Err(Error::invalid(format!("unsupported schema_version {}", c.schema_version())));
    }
    Ok(c)
}

pub trait Versioned {
    fn schema_version(&self) -> u32;
}

fn one_schema() -> u32 {
    SCHEMA_VERSION
}

fn domain_of(kappa0_over_pi: f64) -> Result<AngularDomain> {
    AngularDomain::from_multiple_of_pi(kappa0_over_pi)
}

/// Spatial grid for the estimate scans: geometric cells per decade between
/// `r_min` and `r_max`, uniform cells across each profile transition layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentGrid {
    pub r_min: f64,
    pub r_max: f64,
    pub cells_per_decade: usize,
    pub feature_cells: usize,
    pub angular_cells: usize,
    pub points: usize,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        ExperimentGrid {
            r_min: 1e-4,
            r_max: 40.0,
            cells_per_decade: 4,
            feature_cells: 8,
            angular_cells: 4,
            points: 4,
        }
    }
}

impl ExperimentGrid {
    pub fn refined(&self) -> Self {
        ExperimentGrid {
            cells_per_decade: self.cells_per_decade * 2,
            feature_cells: self.feature_cells * 2,
            angular_cells: self.angular_cells * 2,
            ..*self
        }
    }

    /// Builds the grid; `r_min · 10^k` are always cell boundaries.
    pub fn build(&self, domain: &AngularDomain, features: &[(f64, f64)]) -> Result<PolarGrid> {
        if !(self.r_min > 0.0 && self.r_max > self.r_min) || self.cells_per_decade == 0 || self.angular_cells == 0 {
            return Err(Error::invalid("grid needs 0 < r_min < r_max and positive cell counts"));
        }
        let decades = (self.r_max / self.r_min).log10();
        let n = (decades * self.cells_per_decade as f64).ceil() as usize;
        let mut breaks: Vec<f64> = (0..=n)
            .map(|i| self.r_min * 10f64.powf(i as f64 / self.cells_per_decade as f64))
            .filter(|&r| r < self.r_max)
            .collect();
        breaks.push(self.r_max);
        for &(a, b) in features {
            if !(a < b) || b <= self.r_min || a >= self.r_max {
                continue;
            }
            let (a, b) = (a.max(self.r_min), b.min(self.r_max));
            breaks.retain(|&r| r <= a || r >= b);
            breaks.extend((0..=self.feature_cells).map(|i| a + (b - a) * i as f64 / self.feature_cells as f64));
        }
        breaks.sort_by(f64::total_cmp);
        breaks.dedup_by(|x, y| (*x - *y).abs() <= 1e-14 * y.abs());
        let k = domain.kappa0();
        let ab: Vec<f64> = (0..=self.angular_cells)
            .map(|i| if i == self.angular_cells { k } else { k * i as f64 / self.angular_cells as f64 })
            .collect();
        PolarGrid::from_breaks(domain, &breaks, &ab, self.points)
    }
}

fn profile_features(p: &RadialProfile) -> Option<(f64, f64)> {
    match *p {
        RadialProfile::PowerCutoff { r_flat, r_cut, .. } if r_flat < r_cut => Some((r_flat, r_cut)),
        RadialProfile::Bump { center, width } => Some((center - width, center + width)),
        _ => None,
    }
}

fn term_features(terms: &[SeparableTerm]) -> Vec<(f64, f64)> {
    terms.iter().filter_map(|t| profile_features(&t.radial)).collect()
}

/// `r^γ sin(αϑ)` cut off smoothly between 0.125 and 0.25.
pub fn vertex_profile(gamma: f64) -> SeparableTerm {
    SeparableTerm::new(
        1,
        1.0,
        RadialProfile::PowerCutoff {
            gamma,
            r_flat: 0.125,
            r_cut: 0.25,
        },
    )
}

/// `(p, θ)` pair in a scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightCase {
    pub p: f64,
    pub theta: f64,
}

/// Thresholds for the ratio protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RatioThresholds {
    /// Largest coefficient of variation across δ counted as stable.
    pub stable_cv: f64,
    /// Smallest growth from the largest to the smallest δ counted as divergent.
    pub growth: f64,
}

impl Default for RatioThresholds {
    fn default() -> Self {
        RatioThresholds {
            stable_cv: 0.1,
            growth: 10.0,
        }
    }
}

fn default_deltas() -> Vec<f64> {
    vec![1e-2, 1e-3, 1e-4]
}

fn default_t() -> f64 {
    1.0
}

fn ratio_time() -> TimeQuadSpec {
    TimeQuadSpec {
        n_panels: 16,
        points_per_panel: 4,
        refinement_ratio: 0.5,
    }
}

/// Coefficient of variation (population standard deviation over mean).
pub fn coefficient_of_variation(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    var.sqrt() / m.abs()
}

fn check_deltas(deltas: &[f64], grid: &ExperimentGrid) -> Result<()> {
    if deltas.len() < 2 || deltas.windows(2).any(|w| w[1] >= w[0]) || deltas[deltas.len() - 1] < grid.r_min {
        return Err(Error::invalid("deltas must decrease and stay ≥ grid r_min"));
    }
    Ok(())
}

/// Classifies a ratio sequence over decreasing δ and appends the verdict.
fn ratio_verdict(
    report: &mut ExperimentReport,
    label: &str,
    ratios: &[f64],
    params: &WeightParams,
    domain: &AngularDomain,
    th: &RatioThresholds,
) -> Result<()> {
    if ratios.iter().any(|r| !r.is_finite()) {
        report.verdict(format!("{label}: defined"), true, "0/0 flagged, excluded from verdicts");
        return Ok(());
    }
    let range = theta_admissible_range(params.p, domain)?;
    if range.contains(params.theta) {
        let cv = coefficient_of_variation(ratios);
        report.verdict(format!("{label}: stable"), cv <= th.stable_cv, format!("cv={cv:.4e} (≤ {})", th.stable_cv));
    } else if params.theta <= range.lo {
        let g = ratios[ratios.len() - 1] / ratios[0];
        report.verdict(format!("{label}: growing"), g >= th.growth, format!("growth={g:.4e} (≥ {})", th.growth));
    }
    Ok(())
}

/// Time rule on `(0, T]` plus the nodes and weights split out.
fn time_rule(spec: &TimeQuadSpec, t: f64) -> Result<(Vec<(f64, f64)>, Vec<f64>, Vec<f64>)> {
    spec.validate()?;
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::invalid("T must be positive"));
    }
    let rule = spec.graded_rule(t);
    let times = rule.iter().map(|r| r.0).collect();
    let weights = rule.iter().map(|r| r.1).collect();
    Ok((rule, times, weights))
}

/// Stochastic ratio scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StochRatioConfig {
    #[serde(default = "one_schema")]
    pub schema_version: u32,
    pub kappa0_over_pi: f64,
    #[serde(default = "default_t")]
    pub t_final: f64,
    pub cases: Vec<WeightCase>,
    /// Defaults to the single vertex mode `r^α sin(αϑ)` with cutoff.
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
    #[serde(default)]
    pub grid: ExperimentGrid,
    #[serde(default = "ratio_time")]
    pub time: TimeQuadSpec,
    #[serde(default)]
    pub quad: SeparableQuad,
    #[serde(default)]
    pub thresholds: RatioThresholds,
}

impl Versioned for StochRatioConfig {
    fn schema_version(&self) -> u32 {
        self.schema_version
    }
}

impl StochRatioConfig {
    pub fn new(kappa0_over_pi: f64, cases: Vec<WeightCase>) -> Self {
        StochRatioConfig {
            schema_version: SCHEMA_VERSION,
            kappa0_over_pi,
            t_final: 1.0,
            cases,
            noise: None,
            deltas: default_deltas(),
            grid: ExperimentGrid::default(),
            time: ratio_time(),
            quad: SeparableQuad::default(),
            thresholds: RatioThresholds::default(),
        }
    }
}

/// `lhs_weighted_moment / rhs_g_norm` per case and inner cutoff δ.
pub fn main_estimate_ratio_scan(config: &StochRatioConfig) -> Result<ExperimentReport> {
    let domain = domain_of(config.kappa0_over_pi)?;
    let cfg = KernelConfig::new(domain);
    let noise = config
        .noise
        .clone()
        .unwrap_or_else(|| NoiseSpec { modes: vec![vertex_profile(domain.critical_exponent())] });
    noise.validate()?;
    check_deltas(&config.deltas, &config.grid)?;
    let grid = config.grid.build(&domain, &term_features(&noise.modes))?;
    let (rule, times, weights) = time_rule(&config.time, config.t_final)?;
    let var = variance_field(&cfg, &noise, &times, &grid, &config.quad)?;
    let mut report = ExperimentReport::new("stoch_ratio", config)?;
    let mut table = Table::new("ratios", &["p", "theta", "delta", "lhs", "rhs", "ratio"]);
    for case in &config.cases {
        let params = WeightParams::stochastic(case.p, case.theta)?;
        let mut ratios = Vec::new();
        for &d in &config.deltas {
            let lhs = lhs_weighted_moment(&var.restrict_min_radius(d), &params, &weights)?;
            let rhs = rhs_g_norm(&noise, &params, &grid.restrict_min_radius(d), &rule)?;
            let ratio = if rhs == 0.0 { f64::NAN } else { lhs / rhs };
            table.push(&[case.p, case.theta, d, lhs, rhs, ratio]);
            ratios.push(ratio);
        }
        ratio_verdict(&mut report, &format!("p={} θ={}", case.p, case.theta), &ratios, &params, &domain, &config.thresholds)?;
    }
    report.tables.push(table);
    Ok(report)
}

/// Deterministic ratio scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetRatioConfig {
    #[serde(default = "one_schema")]
    pub schema_version: u32,
    pub kappa0_over_pi: f64,
    #[serde(default = "default_t")]
    pub t_final: f64,
    pub cases: Vec<WeightCase>,
    /// Defaults to `r^γ sin(αϑ)` with cutoff, `γ = max(α − 1, 0)`.
    #[serde(default)]
    pub source: Option<SourceSpec>,
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
    #[serde(default)]
    pub grid: ExperimentGrid,
    #[serde(default = "ratio_time")]
    pub time: TimeQuadSpec,
    #[serde(default)]
    pub quad: SeparableQuad,
    #[serde(default)]
    pub thresholds: RatioThresholds,
}

impl Versioned for DetRatioConfig {
    fn schema_version(&self) -> u32 {
        self.schema_version
    }
}

impl DetRatioConfig {
    pub fn new(kappa0_over_pi: f64, cases: Vec<WeightCase>) -> Self {
        DetRatioConfig {
            schema_version: SCHEMA_VERSION,
            kappa0_over_pi,
            t_final: 1.0,
            cases,
            source: None,
            deltas: default_deltas(),
            grid: ExperimentGrid::default(),
            time: ratio_time(),
            quad: SeparableQuad::default(),
            thresholds: RatioThresholds::default(),
        }
    }
}

fn default_source(domain: &AngularDomain) -> SourceSpec {
    SourceSpec::Separable {
        terms: vec![vertex_profile((domain.critical_exponent() - 1.0).max(0.0))],
    }
}

fn source_terms(src: &SourceSpec) -> Result<&[SeparableTerm]> {
    match src {
        SourceSpec::Separable { terms } => Ok(terms),
        _ => Err(Error::invalid("scans need a separable source")),
    }
}

/// `det_lhs / det_rhs` per case and δ; the right side carries `|x|^{+1}` on `f`.
pub fn det_estimate_ratio_scan(config: &DetRatioConfig) -> Result<ExperimentReport> {
    let domain = domain_of(config.kappa0_over_pi)?;
    let cfg = KernelConfig::new(domain);
    let src = config.source.clone().unwrap_or_else(|| default_source(&domain));
    src.validate(&domain)?;
    check_deltas(&config.deltas, &config.grid)?;
    let grid = config.grid.build(&domain, &term_features(source_terms(&src)?))?;
    let (rule, times, weights) = time_rule(&config.time, config.t_final)?;
    let v = det_field(&cfg, &src, &times, &grid, &config.quad)?;
    let mut report = ExperimentReport::new("det_ratio", config)?;
    let mut table = Table::new("ratios", &["p", "theta", "delta", "lhs", "rhs", "ratio"]);
    for case in &config.cases {
        let params = WeightParams::new(case.p, case.theta)?;
        let mut ratios = Vec::new();
        for &d in &config.deltas {
            let lhs = crate::convolution::det_lhs(&v.restrict_min_radius(d), &params, &weights)?;
            let rhs = det_rhs(&src, &params, &grid.restrict_min_radius(d), &rule)?;
            let ratio = if rhs == 0.0 { f64::NAN } else { lhs / rhs };
            table.push(&[case.p, case.theta, d, lhs, rhs, ratio]);
            ratios.push(ratio);
        }
        ratio_verdict(&mut report, &format!("p={} θ={}", case.p, case.theta), &ratios, &params, &domain, &config.thresholds)?;
    }
    report.tables.push(table);
    Ok(report)
}

/// Sharpness scan over θ for the counterexample moment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharpnessConfig {
    #[serde(default = "one_schema")]
    pub schema_version: u32,
    pub kappa0_over_pi: f64,
    pub p: f64,
    #[serde(default = "default_t")]
    pub t_final: f64,
    #[serde(default = "default_t")]
    pub epsilon: f64,
    /// Defaults to `p(1 − π/κ₀) + 0.1 k`, `k = −5..=5`.
    #[serde(default)]
    pub theta_grid: Option<Vec<f64>>,
    /// Defaults to `10^{−20j}`, `j = 1..=15`.
    #[serde(default)]
    pub delta_sequence: Option<Vec<f64>>,
    /// Relative change at the last δ below which a θ counts as convergent.
    #[serde(default = "cauchy_default")]
    pub cauchy_tol: f64,
    #[serde(default = "slope_default")]
    pub slope_tol: f64,
}

fn cauchy_default() -> f64 {
    0.01
}

fn slope_default() -> f64 {
    0.05
}

impl Versioned for SharpnessConfig {
    fn schema_version(&self) -> u32 {
        self.schema_version
    }
}

impl SharpnessConfig {
    pub fn new(kappa0_over_pi: f64, p: f64) -> Self {
        SharpnessConfig {
            schema_version: SCHEMA_VERSION,
            kappa0_over_pi,
            p,
            t_final: 1.0,
            epsilon: 1.0,
            theta_grid: None,
            delta_sequence: None,
            cauchy_tol: cauchy_default(),
            slope_tol: slope_default(),
        }
    }

    pub fn threshold(&self) -> Result<f64> {
        crate::fields::grisvard_lower_bound(self.p, &domain_of(self.kappa0_over_pi)?)
    }

    pub fn thetas(&self) -> Result<Vec<f64>> {
        match &self.theta_grid {
            Some(g) => Ok(g.clone()),
            None => {
                let c = self.threshold()?;
                Ok((-5..=5).map(|k| c + 0.1 * k as f64).collect())
            }
        }
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.delta_sequence
            .clone()
            .unwrap_or_else(|| (1..=15).map(|j| 10f64.powi(-20 * j)).collect())
    }
}

/// Per-θ classification from a δ-indexed sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Convergent,
    Divergent,
    Unclassified,
}

/// Last relative change and the last log-log growth exponent against `1/δ`.
pub fn classify_sequence(deltas: &[f64], values: &[f64], cauchy_tol: f64) -> (Classification, f64, f64) {
    let n = values.len();
    let change = ((values[n - 1] - values[n - 2]) / values[n - 1]).abs();
    let slope = -log_log_slope(&[(deltas[n - 2], values[n - 2]), (deltas[n - 1], values[n - 1])]);
    let monotone = values.windows(2).all(|w| w[1] >= w[0]);
    let class = if change <= cauchy_tol {
        Classification::Convergent
    } else if monotone {
        Classification::Divergent
    } else {
        Classification::Unclassified
    };
    (class, change, slope)
}

pub fn sharpness_scan(config: &SharpnessConfig) -> Result<ExperimentReport> {
    let domain = domain_of(config.kappa0_over_pi)?;
    let thetas = config.thetas()?;
    if thetas.len() < 2 || thetas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("θ grid must be strictly increasing"));
    }
    let deltas = config.deltas();
    if deltas.len() < 2 {
        return Err(Error::invalid("need at least two δ values"));
    }
    let threshold = config.threshold()?;
    let mut report = ExperimentReport::new("sharpness", config)?;
    let mut values = Table::new("values", &["theta", "delta", "integral"]);
    let mut classes = Table::new("classification", &["theta", "q", "divergent", "last_change", "slope"]);
    let mut verdict_classes = Vec::new();
    let mut slope_ok = true;
    let mut slope_detail = String::new();
    for &theta in &thetas {
        let spec = CounterexampleSpec {
            domain,
            t_final: config.t_final,
            p: config.p,
            theta,
            epsilon: config.epsilon,
            delta_sequence: deltas.clone(),
        };
        let vals: Vec<f64> = deltas.iter().map(|&d| counterexample_integral(&spec, d)).collect::<Result<_>>()?;
        for (d, v) in deltas.iter().zip(&vals) {
            values.push(&[theta, *d, *v]);
        }
        let q = spec.exponent_q();
        let (class, change, slope) = classify_sequence(&deltas, &vals, config.cauchy_tol);
        if class == Classification::Divergent && (slope + q).abs() > config.slope_tol {
            slope_ok = false;
            slope_detail.push_str(&format!("θ={theta}: slope {slope:.4} vs {:.4}; ", -q));
        }
        let div = match class {
            Classification::Divergent => 1.0,
            Classification::Convergent => 0.0,
            Classification::Unclassified => f64::NAN,
        };
        classes.push(&[theta, q, div, change, slope]);
        verdict_classes.push(class);
    }
    // divergent block followed by convergent block, threshold in [last divergent, first convergent)
    let split = verdict_classes.iter().position(|c| *c != Classification::Divergent).unwrap_or(thetas.len());
    let clean = split > 0
        && split < thetas.len()
        && verdict_classes[split..].iter().all(|c| *c == Classification::Convergent);
    let bracketed = clean && thetas[split - 1] <= threshold + 1e-12 && threshold < thetas[split];
    let detail = if clean {
        format!("boundary between θ={} and θ={}, threshold {threshold}", thetas[split - 1], thetas[split])
    } else {
        format!("no clean divergent/convergent split, threshold {threshold}")
    };
    report.verdict("threshold bracketed", bracketed, detail);
    report.verdict(
        "divergence slopes",
        slope_ok,
        if slope_ok { format!("all within {}", config.slope_tol) } else { slope_detail },
    );
    report.tables.push(values);
    report.tables.push(classes);
    Ok(report)
}

/// Norm inequality for `u = v + w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolutionNormConfig {
    #[serde(default = "one_schema")]
    pub schema_version: u32,
    pub kappa0_over_pi: f64,
    pub p: f64,
    pub theta: f64,
    #[serde(default = "default_t")]
    pub t_final: f64,
    pub source: SourceSpec,
    pub noise: NoiseSpec,
    #[serde(default)]
    pub grid: ExperimentGrid,
    #[serde(default = "ratio_time")]
    pub time: TimeQuadSpec,
    #[serde(default)]
    pub quad: SeparableQuad,
    #[serde(default = "refine_tol")]
    pub refinement_tol: f64,
}

fn refine_tol() -> f64 {
    0.15
}

impl Versioned for SolutionNormConfig {
    fn schema_version(&self) -> u32 {
        self.schema_version
    }
}

impl SolutionNormConfig {
    /// Vertex-concentrated `f` and `g` at unit scale.
    pub fn new(kappa0_over_pi: f64, p: f64, theta: f64) -> Result<Self> {
        let d = domain_of(kappa0_over_pi)?;
        Ok(SolutionNormConfig {
            schema_version: SCHEMA_VERSION,
            kappa0_over_pi,
            p,
            theta,
            t_final: 1.0,
            source: default_source(&d),
            noise: NoiseSpec { modes: vec![vertex_profile(d.critical_exponent())] },
            grid: ExperimentGrid::default(),
            time: ratio_time(),
            quad: SeparableQuad::default(),
            refinement_tol: refine_tol(),
        })
    }
}

/// Both sides of the norm inequality at one resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormSides {
    /// `(Σ w_t ‖v_t‖^p_{K¹_{p,θ−p}})^{1/p}`.
    pub v_k1: f64,
    /// `(E ∫∫ |w|^p |x|^{θ−p−2})^{1/p}`.
    pub w_k0: f64,
    /// `‖f‖_{L_{p,θ+p}}`.
    pub f_norm: f64,
    /// `‖g‖_{L_{p,θ}}`.
    pub g_norm: f64,
}

impl NormSides {
    pub fn lhs(&self) -> f64 {
        self.v_k1 + self.w_k0
    }
    pub fn rhs(&self) -> f64 {
        self.f_norm + self.g_norm
    }
    pub fn ratio(&self) -> f64 {
        if self.rhs() == 0.0 {
            f64::NAN
        } else {
            self.lhs() / self.rhs()
        }
    }
}

/// Evaluates [`NormSides`] on one grid.
pub fn solution_norm_sides(config: &SolutionNormConfig, grid_spec: &ExperimentGrid) -> Result<NormSides> {
    let domain = domain_of(config.kappa0_over_pi)?;
    let cfg = KernelConfig::new(domain);
    let params = WeightParams::stochastic(config.p, config.theta)?;
    let shifted = WeightParams::new(config.p, config.theta - config.p)?;
    config.source.validate(&domain)?;
    config.noise.validate()?;
    let mut features = term_features(source_terms(&config.source)?);
    features.extend(term_features(&config.noise.modes));
    let grid = grid_spec.build(&domain, &features)?;
    let (rule, times, weights) = time_rule(&config.time, config.t_final)?;
    let p = config.p;
    let v_k1 = if config.source.is_zero() {
        0.0
    } else {
        let v = det_field(&cfg, &config.source, &times, &grid, &config.quad)?;
        let per_t: Vec<f64> = (0..times.len())
            .map(|i| k1_norm(v.at_time(i), Gradient::FiniteDifference, &shifted, &grid, GradientNorm::ComponentSum))
            .collect::<Result<_>>()?;
        compensated_sum(per_t.iter().zip(&weights).map(|(n, w)| w * n.powf(p))).powf(1.0 / p)
    };
    let w_k0 = if config.noise.modes.is_empty() {
        0.0
    } else {
        let var = variance_field(&cfg, &config.noise, &times, &grid, &config.quad)?;
        lhs_weighted_moment(&var, &params, &weights)?.powf(1.0 / p)
    };
    let f_norm = if config.source.is_zero() { 0.0 } else { det_rhs(&config.source, &params, &grid, &rule)?.powf(1.0 / p) };
    let g_norm = if config.noise.modes.is_empty() { 0.0 } else { rhs_g_norm(&config.noise, &params, &grid, &rule)?.powf(1.0 / p) };
    Ok(NormSides { v_k1, w_k0, f_norm, g_norm })
}

/// `E‖w‖^p_{L_{p,θ−p}}` through `E|w|^p = E|Z|^p Var^{p/2}`, node by node.
pub fn w_moment_via_lp(var: &SpaceTimeField, params: &WeightParams, time_weights: &[f64]) -> Result<f64> {
    let m = gaussian_abs_moment(params.p)?;
    let shifted = WeightParams::new(params.p, params.theta - params.p)?;
    let mut parts = Vec::with_capacity(time_weights.len());
    for (i, w) in time_weights.iter().enumerate() {
        let abs_w: Vec<f64> = var.at_time(i).iter().map(|v| (m * v.powf(params.p / 2.0)).powf(1.0 / params.p)).collect();
        parts.push(w * weighted_lp_integral(&abs_w, &shifted, &var.grid)?);
    }
    Ok(compensated_sum(parts))
}

pub fn solution_norm_check(config: &SolutionNormConfig) -> Result<ExperimentReport> {
    let domain = domain_of(config.kappa0_over_pi)?;
    let range = theta_admissible_range(config.p, &domain)?;
    if !range.contains(config.theta) {
        return Err(Error::invalid(format!("θ={} outside the admissible range ({}, {})", config.theta, range.lo, range.hi)));
    }
    let coarse = solution_norm_sides(config, &config.grid)?;
    let fine = solution_norm_sides(config, &config.grid.refined())?;
    let mut report = ExperimentReport::new("solution_norm", config)?;
    let mut table = Table::new("sides", &["refinement", "v_k1", "w_k0", "f_norm", "g_norm", "lhs", "rhs", "ratio"]);
    for (lvl, s) in [(0.0, coarse), (1.0, fine)] {
        table.push(&[lvl, s.v_k1, s.w_k0, s.f_norm, s.g_norm, s.lhs(), s.rhs(), s.ratio()]);
    }
    report.tables.push(table);
    let (a, b) = (coarse.ratio(), fine.ratio());
    if a.is_nan() && b.is_nan() && coarse.lhs() == 0.0 && fine.lhs() == 0.0 {
        report.verdict("ratio defined", true, "f = g = 0, all norms 0");
    } else {
        let change = ((b - a) / b).abs();
        report.verdict(
            "ratio finite and refinement-stable",
            a.is_finite() && b.is_finite() && change <= config.refinement_tol,
            format!("coarse {a:.6e}, fine {b:.6e}, change {change:.3e}"),
        );
    }
    Ok(report)
}

/// Kozlov bound fit and vertex decay for one `(κ₀, λ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundConfig {
    #[serde(default = "one_schema")]
    pub schema_version: u32,
    pub kappa0_over_pi: f64,
    pub lambda: f64,
    #[serde(default = "sigma_grid")]
    pub sigma_grid: Vec<f64>,
    #[serde(default)]
    pub cloud: CloudSpec,
    /// Adjacent smallest decades within this factor count as stable.
    #[serde(default = "two")]
    pub stability_factor: f64,
    /// Required smallest-decade over two-decades-up growth when `λ > π/κ₀`.
    #[serde(default = "five")]
    pub growth_factor: f64,
    #[serde(default = "decay_tol")]
    pub decay_tol: f64,
}

fn sigma_grid() -> Vec<f64> {
    vec![0.05, 0.1, 0.15, 0.2, 0.25]
}
fn two() -> f64 {
    2.0
}
fn five() -> f64 {
    5.0
}
fn decay_tol() -> f64 {
    0.02
}

impl Versioned for BoundConfig {
    fn schema_version(&self) -> u32 {
        self.schema_version
    }
}

impl BoundConfig {
    pub fn new(kappa0_over_pi: f64, lambda: f64) -> Self {
        BoundConfig {
            schema_version: SCHEMA_VERSION,
            kappa0_over_pi,
            lambda,
            sigma_grid: sigma_grid(),
            cloud: CloudSpec::default(),
            stability_factor: two(),
            growth_factor: five(),
            decay_tol: decay_tol(),
        }
    }
}

pub fn green_bound_report(config: &BoundConfig) -> Result<ExperimentReport> {
    let domain = domain_of(config.kappa0_over_pi)?;
    let cfg = KernelConfig::new(domain);
    let alpha = domain.critical_exponent();
    let cloud = config.cloud.samples(&domain)?;
    let scan = fit_green_bound(&cfg, config.lambda, &cloud, &config.sigma_grid, config.stability_factor)?;
    let decay = vertex_decay_exponent(&cfg, 1.0, PolarPoint::new(1.0, domain.kappa0() / 2.0), &log_space(-6.0, -3.0, 7))?;
    let mut report = ExperimentReport::new("green_bound", config)?;
    let mut fits = Table::new(
        "fits",
        &["sigma", "sup_ratio", "sample_size", "underflow_excluded", "unresolved_excluded", "vertex_growth", "stable", "vertex_slope"],
    );
    let mut profile = Table::new("profile", &["sigma", "decade", "r_at_max", "max_ratio", "reference_slope"]);
    let mut far = Table::new("far_profile", &["sigma", "octave", "max_ratio"]);
    for f in &scan.fits {
        let slope = profile_vertex_slope(f, 3).unwrap_or(f64::NAN);
        fits.push(&[
            f.sigma,
            f.sup_ratio,
            f.sample_size as f64,
            f.underflow_excluded as f64,
            f.unresolved_excluded as f64,
            f.vertex_growth,
            if f.stable { 1.0 } else { 0.0 },
            slope,
        ]);
        for (o, m) in &f.far_profile {
            far.push(&[f.sigma, *o, *m]);
        }
        for b in &f.profile {
            profile.push(&[f.sigma, b.decade, b.r_at_max, b.max_ratio, alpha - config.lambda]);
        }
    }
    let mut dec = Table::new("decay", &["slope", "expected", "underflow"]);
    dec.push(&[decay.slope, alpha, if decay.underflow { 1.0 } else { 0.0 }]);
    report.tables.extend([fits, profile, far, dec]);
    if config.lambda < alpha {
        let detail = match scan.best() {
            Some(b) => format!("largest stable σ={}, sup ratio {:.4e}", b.sigma, b.sup_ratio),
            None => "unbounded: no σ stabilizes".into(),
        };
        report.verdict("bounded and decade-stable", scan.best().is_some(), detail);
    } else {
        let g = scan.fits.first().map(|f| f.vertex_growth).unwrap_or(f64::NAN);
        report.verdict(
            "vertex growth",
            g >= config.growth_factor,
            format!("smallest decade / two decades up = {g:.4e} (≥ {})", config.growth_factor),
        );
    }
    let ok = (decay.slope - alpha).abs() <= config.decay_tol;
    report.verdict("vertex decay slope", ok, format!("slope {:.5} vs {alpha:.5}", decay.slope));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_keeps_decades_and_features() {
        let d = AngularDomain::slit();
        let g = ExperimentGrid::default();
        let grid = g.build(&d, &[(0.125, 0.25)]).unwrap();
        for delta in [1e-2, 1e-3, 1e-4] {
            let i = grid.first_radius_at_least(delta);
            assert!(i > 0 || delta == 1e-4);
            assert!(grid.radii()[i] > delta);
            // no node straddles a decade boundary: the previous node belongs to a lower cell
            if i > 0 {
                assert!(grid.radii()[i - 1] < delta);
            }
        }
        let inside = grid.radii().iter().filter(|r| **r > 0.125 && **r < 0.25).count();
        assert_eq!(inside, g.feature_cells * g.points);
        assert!(g.build(&d, &[]).is_ok());
        assert!(ExperimentGrid { r_min: 0.0, ..g }.build(&d, &[]).is_err());
    }

    #[test]
    fn cv_examples() {
        assert_eq!(coefficient_of_variation(&[2.0, 2.0, 2.0]), 0.0);
        assert!((coefficient_of_variation(&[1.0, 3.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sharpness_slit_example() {
        let mut c = SharpnessConfig::new(2.0, 2.0);
        c.theta_grid = Some(vec![0.5, 0.9, 1.0, 1.1, 1.5]);
        let r = sharpness_scan(&c).unwrap();
        let div = r.table("classification").unwrap().column("divergent").unwrap();
        assert_eq!(div, vec![Some(1.0), Some(1.0), Some(1.0), Some(0.0), Some(0.0)]);
        assert!(r.passed(), "{:?}", r.verdicts);
    }

    #[test]
    fn sharpness_default_grids() {
        for (k, p) in [(2.0, 2.0), (1.5, 2.0), (0.5, 4.0), (1.0, 2.0)] {
            let r = sharpness_scan(&SharpnessConfig::new(k, p)).unwrap();
            assert!(r.passed(), "{k} {p}: {:?}", r.verdicts);
        }
    }

    #[test]
    fn sharpness_fast_convergence_far_above() {
        let mut c = SharpnessConfig::new(1.0, 2.0);
        c.theta_grid = Some(vec![2.0, 3.0]);
        c.delta_sequence = Some(vec![1e-1, 1e-2, 1e-3]);
        let r = sharpness_scan(&c).unwrap();
        let v = r.table("values").unwrap().column("integral").unwrap();
        // θ = 2 gives q = 2 on the half-plane: (1 − δ²)/2 · prefactor
        assert!(((v[2].unwrap() - v[1].unwrap()) / v[2].unwrap()).abs() < 1e-3);
        assert!(((v[5].unwrap() - v[4].unwrap()) / v[5].unwrap()).abs() < 1e-6);
    }

    #[test]
    fn report_roundtrip_and_csv() {
        let mut c = SharpnessConfig::new(2.0, 2.0);
        c.theta_grid = Some(vec![0.5, 1.5]);
        let r = sharpness_scan(&c).unwrap();
        let back = ExperimentReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        let csv = r.to_csv();
        assert!(csv.starts_with("table,row,column,value\n"));
        assert_eq!(csv.lines().filter(|l| l.starts_with("classification,")).count(), 2 * 5);
        let dir = tempfile::tempdir().unwrap();
        let (j, k) = r.write(dir.path()).unwrap();
        let (j2, _) = sharpness_scan(&c).unwrap().write(dir.path()).unwrap();
        assert_eq!(j, j2);
        assert!(j.file_name().unwrap().to_str().unwrap().starts_with("sharpness_"));
        assert_eq!(std::fs::read_to_string(&k).unwrap(), csv);
        let mut bad = serde_json::to_value(&r).unwrap();
        bad["schema_version"] = 7.into();
        assert!(ExperimentReport::from_json(&bad.to_string()).is_err());
    }

    #[test]
    fn config_rejects_unknown_keys_and_versions() {
        let ok = r#"{"schema_version":1,"kappa0_over_pi":2,"p":2}"#;
        assert!(parse_config::<SharpnessConfig>(ok).is_ok());
        let typo = r#"{"schema_version":1,"kappa0_over_pi":2,"p":2,"thetta_grid":[1]}"#;
        assert!(parse_config::<SharpnessConfig>(typo).is_err());
        let v = r#"{"schema_version":2,"kappa0_over_pi":2,"p":2}"#;
        assert!(parse_config::<SharpnessConfig>(v).is_err());
    }

    fn light_grid() -> ExperimentGrid {
        ExperimentGrid {
            r_max: 20.0,
            cells_per_decade: 3,
            feature_cells: 6,
            angular_cells: 2,
            points: 3,
            ..Default::default()
        }
    }

    fn light_time() -> TimeQuadSpec {
        TimeQuadSpec {
            n_panels: 8,
            points_per_panel: 3,
            refinement_ratio: 0.5,
        }
    }

    #[test]
    fn zero_noise_is_flagged() {
        let mut c = StochRatioConfig::new(2.0, vec![WeightCase { p: 2.0, theta: 2.0 }]);
        c.noise = Some(NoiseSpec::zero());
        c.grid = light_grid();
        c.time = light_time();
        let r = main_estimate_ratio_scan(&c).unwrap();
        assert!(r.table("ratios").unwrap().column("ratio").unwrap().iter().all(|v| v.is_none()));
        assert!(r.passed());
        assert!(r.verdicts[0].detail.contains("flagged"));
    }

    #[test]
    fn solution_norm_homogeneity_and_identity() {
        let mut c = SolutionNormConfig::new(1.0, 2.0, 2.0).unwrap();
        c.grid = light_grid();
        c.time = light_time();
        let a = solution_norm_sides(&c, &c.grid).unwrap();
        let mut c2 = c.clone();
        if let SourceSpec::Separable { terms } = &mut c2.source {
            terms[0].coefficient *= 2.0;
        }
        c2.noise = c.noise.scaled(2.0);
        let b = solution_norm_sides(&c2, &c2.grid).unwrap();
        assert!((b.lhs() / a.lhs() - 2.0).abs() < 1e-12);
        assert!((b.ratio() / a.ratio() - 1.0).abs() < 1e-12);

        let d = AngularDomain::new(PI_).unwrap();
        let grid = c.grid.build(&d, &[(0.125, 0.25)]).unwrap();
        let (_, times, weights) = time_rule(&c.time, 1.0).unwrap();
        let var = variance_field(&KernelConfig::new(d), &c.noise, &times, &grid, &SeparableQuad::default()).unwrap();
        let params = WeightParams::new(2.0, 2.0).unwrap();
        let x = lhs_weighted_moment(&var, &params, &weights).unwrap();
        let y = w_moment_via_lp(&var, &params, &weights).unwrap();
        assert!(((x - y) / x).abs() < 1e-12);

        let mut z = c.clone();
        z.source = SourceSpec::zero();
        z.noise = NoiseSpec::zero();
        let s = solution_norm_sides(&z, &z.grid).unwrap();
        assert_eq!((s.lhs(), s.rhs()), (0.0, 0.0));
    }

    const PI_: f64 = std::f64::consts::PI;
}
