//! The angular domain `{ (r cos ϑ, r sin ϑ) : r > 0, 0 < ϑ < κ₀ }`, polar points,
//! and graded tensor-product polar grids used by every area quadrature.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::quadrature::GaussLegendre;

/// Planar wedge with opening angle `kappa0` and vertex at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AngularDomainRepr", into = "AngularDomainRepr")]
pub struct AngularDomain {
    kappa0: f64,
    critical_exponent: f64,
}

#[derive(Serialize, Deserialize)]
struct AngularDomainRepr {
    kappa0: f64,
}

impl TryFrom<AngularDomainRepr> for AngularDomain {
    type Error = Error;
    fn try_from(r: AngularDomainRepr) -> Result<Self> {
        if r.kappa0 == 2.0 * PI {
            Ok(AngularDomain::slit())
        } else {
            AngularDomain::new(r.kappa0)
        }
    }
}

impl From<AngularDomain> for AngularDomainRepr {
    fn from(d: AngularDomain) -> Self {
        AngularDomainRepr { kappa0: d.kappa0 }
    }
}

impl AngularDomain {
    /// Wedge of opening `kappa0` radians; both endpoints of `(0, 2π)` are rejected.
    pub fn new(kappa0: f64) -> Result<Self> {
        if !(kappa0.is_finite() && kappa0 > 0.0 && kappa0 < 2.0 * PI) {
            return Err(Error::invalid(format!(
                "opening angle must lie in (0, 2π), got {kappa0}"
            )));
        }
        Ok(AngularDomain {
            kappa0,
            critical_exponent: PI / kappa0,
        })
    }

    /// The plane slit along the positive axis, i.e. the limiting angle κ₀ = 2π.
    ///
    /// [`AngularDomain::new`] refuses this endpoint; it is only reachable through
    /// this constructor so that the crack case is always an explicit choice.
    pub fn slit() -> Self {
        AngularDomain {
            kappa0: 2.0 * PI,
            critical_exponent: 0.5,
        }
    }

    /// Wedge of opening `m·π`. `m = 2` maps to [`AngularDomain::slit`].
    pub fn from_multiple_of_pi(m: f64) -> Result<Self> {
        if m == 2.0 {
            return Ok(Self::slit());
        }
        let d = Self::new(m * PI)?;
        Ok(AngularDomain {
            kappa0: d.kappa0,
            critical_exponent: 1.0 / m,
        })
    }

    pub fn kappa0(&self) -> f64 {
        self.kappa0
    }

    /// `π/κ₀`, the vanishing rate of Dirichlet solutions at the vertex.
    pub fn critical_exponent(&self) -> f64 {
        self.critical_exponent
    }

    /// Whether `theta` lies in the open angular interval.
    pub fn is_interior_angle(&self, theta: f64) -> bool {
        theta > 0.0 && theta < self.kappa0
    }
}

/// A point in polar coordinates `(r, ϑ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarPoint {
    pub r: f64,
    pub theta: f64,
}

impl PolarPoint {
    pub fn new(r: f64, theta: f64) -> Self {
        PolarPoint { r, theta }
    }

    /// Checked constructor: `r ≥ 0` and `0 ≤ ϑ ≤ κ₀`.
    pub fn in_domain(domain: &AngularDomain, r: f64, theta: f64) -> Result<Self> {
        if !(r >= 0.0 && r.is_finite()) {
            return Err(Error::invalid(format!("radius must be ≥ 0, got {r}")));
        }
        if !(0.0..=domain.kappa0()).contains(&theta) {
            return Err(Error::invalid(format!(
                "angle {theta} outside [0, {}]",
                domain.kappa0()
            )));
        }
        Ok(PolarPoint { r, theta })
    }

    pub fn from_cartesian(x1: f64, x2: f64) -> Self {
        let mut theta = x2.atan2(x1);
        if theta < 0.0 {
            theta += 2.0 * PI;
        }
        PolarPoint {
            r: x1.hypot(x2),
            theta,
        }
    }
}

/// `(r cos ϑ, r sin ϑ)`.
pub fn polar_to_cart(pt: PolarPoint) -> (f64, f64) {
    let (s, c) = pt.theta.sin_cos();
    (pt.r * c, pt.r * s)
}

/// Distance to the vertex, `ρ_o(x) = |x|`.
pub fn dist_to_vertex(pt: PolarPoint) -> f64 {
    pt.r
}

/// Euclidean distance between two polar points.
pub fn distance(a: PolarPoint, b: PolarPoint) -> f64 {
    // |a-b|² = r² + ρ² - 2rρ cos(ϑ-φ), written to avoid cancellation for nearby points
    let dr = a.r - b.r;
    let s = (0.5 * (a.theta - b.theta)).sin();
    (dr * dr + 4.0 * a.r * b.r * s * s).sqrt()
}

/// Graded polar grid description.
///
/// Radial cell boundaries are `r_j = r_min + (r_max − r_min)(j/n_radial)^grading_exponent`
/// and the angle range `(0, κ₀)` is split into `n_angular` uniform panels. Each cell
/// carries `points_per_cell` Gauss–Legendre nodes per direction; the default of one
/// node is the cell midpoint rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub r_min: f64,
    pub r_max: f64,
    pub n_radial: usize,
    #[serde(default = "GridSpec::default_grading")]
    pub grading_exponent: f64,
    pub n_angular: usize,
    #[serde(default = "GridSpec::default_points")]
    pub points_per_cell: usize,
}

impl GridSpec {
    fn default_grading() -> f64 {
        3.0
    }
    fn default_points() -> usize {
        1
    }

    pub fn new(r_min: f64, r_max: f64, n_radial: usize, n_angular: usize) -> Self {
        GridSpec {
            r_min,
            r_max,
            n_radial,
            grading_exponent: Self::default_grading(),
            n_angular,
            points_per_cell: 1,
        }
    }

    pub fn with_grading(mut self, g: f64) -> Self {
        self.grading_exponent = g;
        self
    }

    pub fn with_points(mut self, p: usize) -> Self {
        self.points_per_cell = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r_min > 0.0 && self.r_min < self.r_max && self.r_max.is_finite()) {
            return Err(Error::invalid(format!(
                "grid radii must satisfy 0 < r_min < r_max, got [{}, {}]",
                self.r_min, self.r_max
            )));
        }
        if self.n_radial < 2 || self.n_angular < 2 {
            return Err(Error::invalid("grid needs n_radial ≥ 2 and n_angular ≥ 2"));
        }
        if !(self.grading_exponent >= 1.0) {
            return Err(Error::invalid("grading_exponent must be ≥ 1"));
        }
        if self.points_per_cell == 0 || self.points_per_cell > 32 {
            return Err(Error::invalid("points_per_cell must be in 1..=32"));
        }
        Ok(())
    }

    /// Cell boundaries `r_0 < r_1 < … < r_n`.
    pub fn radial_breaks(&self) -> Vec<f64> {
        let n = self.n_radial as f64;
        let span = self.r_max - self.r_min;
        let mut out: Vec<f64> = (0..=self.n_radial)
            .map(|j| self.r_min + span * (j as f64 / n).powf(self.grading_exponent))
            .collect();
        out[self.n_radial] = self.r_max;
        out
    }
}

/// One quadrature node of a polar grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridNode {
    pub point: PolarPoint,
    /// Area weight: `r · w_r · w_ϑ`.
    pub weight: f64,
}

/// Tensor-product polar quadrature grid.
///
/// Nodes are stored radius-major: node `i_r * n_theta + i_a` sits at
/// `(radii[i_r], angles[i_a])`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarGrid {
    domain: AngularDomain,
    radii: Vec<f64>,
    radial_weights: Vec<f64>,
    angles: Vec<f64>,
    angular_weights: Vec<f64>,
}

impl PolarGrid {
    pub fn new(domain: &AngularDomain, spec: &GridSpec) -> Result<Self> {
        Self::from_bands(domain, std::slice::from_ref(spec))
    }

    /// Concatenates several contiguous radial bands sharing one angular layout.
    ///
    /// Band `i + 1` must start where band `i` ends. Angular settings are taken
    /// from the first band.
    pub fn from_bands(domain: &AngularDomain, bands: &[GridSpec]) -> Result<Self> {
        if bands.is_empty() {
            return Err(Error::invalid("grid needs at least one band"));
        }
        for band in bands {
            band.validate()?;
        }
        for w in bands.windows(2) {
            if ((w[1].r_min - w[0].r_max) / w[0].r_max).abs() > 1e-12 {
                return Err(Error::invalid("grid bands must be contiguous"));
            }
        }
        Ok(Self::from_bands_unchecked(domain, bands))
    }

    fn from_bands_unchecked(domain: &AngularDomain, bands: &[GridSpec]) -> Self {
        let first = &bands[0];
        let mut radii = Vec::new();
        let mut radial_weights = Vec::new();
        let mut prev_end: Option<f64> = None;
        for band in bands {
            if let Some(end) = prev_end {
                assert!(
                    ((band.r_min - end) / end).abs() <= 1e-12,
                    "grid bands must be contiguous"
                );
            }
            prev_end = Some(band.r_max);
            let gl = GaussLegendre::new(band.points_per_cell);
            let breaks = band.radial_breaks();
            for w in breaks.windows(2) {
                for (x, wt) in gl.map_to(w[0], w[1]) {
                    radii.push(x);
                    radial_weights.push(wt);
                }
            }
        }
        let gl = GaussLegendre::new(first.points_per_cell);
        let h = domain.kappa0() / first.n_angular as f64;
        let mut angles = Vec::new();
        let mut angular_weights = Vec::new();
        for j in 0..first.n_angular {
            let a = j as f64 * h;
            for (x, wt) in gl.map_to(a, a + h) {
                angles.push(x);
                angular_weights.push(wt);
            }
        }
        PolarGrid {
            domain: *domain,
            radii,
            radial_weights,
            angles,
            angular_weights,
        }
    }

    /// Tensor grid from explicit radial and angular cell boundaries, `points` Gauss
    /// nodes per cell and direction. Angular breaks must lie in `[0, κ₀]`.
    pub fn from_breaks(
        domain: &AngularDomain,
        r_breaks: &[f64],
        theta_breaks: &[f64],
        points: usize,
    ) -> Result<Self> {
        let increasing = |b: &[f64]| b.len() >= 2 && b.windows(2).all(|w| w[1] > w[0]);
        if !increasing(r_breaks) || !increasing(theta_breaks) {
            return Err(Error::invalid("cell boundaries must be strictly increasing"));
        }
        if r_breaks[0] < 0.0 || theta_breaks[0] < 0.0 || theta_breaks[theta_breaks.len() - 1] > domain.kappa0() {
            return Err(Error::invalid("cell boundaries leave the wedge"));
        }
        if points == 0 || points > 32 {
            return Err(Error::invalid("points per cell must be in 1..=32"));
        }
        let gl = GaussLegendre::new(points);
        let expand = |b: &[f64]| {
            let mut x = Vec::new();
            let mut w = Vec::new();
            for c in b.windows(2) {
                for (n, wt) in gl.map_to(c[0], c[1]) {
                    x.push(n);
                    w.push(wt);
                }
            }
            (x, w)
        };
        let (radii, radial_weights) = expand(r_breaks);
        let (angles, angular_weights) = expand(theta_breaks);
        Ok(PolarGrid {
            domain: *domain,
            radii,
            radial_weights,
            angles,
            angular_weights,
        })
    }

    /// Decade-aligned bands `[lo, 10 lo], [10 lo, 100 lo], …` up to `r_max`, each with
    /// `cells_per_band` cells of the given grading.
    pub fn decade_bands(
        domain: &AngularDomain,
        r_lo: f64,
        r_max: f64,
        cells_per_band: usize,
        n_angular: usize,
        points_per_cell: usize,
    ) -> Result<Self> {
        let mut bands = Vec::new();
        let mut lo = r_lo;
        while lo < r_max * (1.0 - 1e-12) {
            let hi = (lo * 10.0).min(r_max);
            bands.push(GridSpec {
                r_min: lo,
                r_max: hi,
                n_radial: cells_per_band,
                grading_exponent: 1.0,
                n_angular,
                points_per_cell,
            });
            lo = hi;
        }
        Self::from_bands(domain, &bands)
    }

    pub fn domain(&self) -> &AngularDomain {
        &self.domain
    }
    pub fn radii(&self) -> &[f64] {
        &self.radii
    }
    pub fn radial_weights(&self) -> &[f64] {
        &self.radial_weights
    }
    pub fn angles(&self) -> &[f64] {
        &self.angles
    }
    pub fn angular_weights(&self) -> &[f64] {
        &self.angular_weights
    }
    pub fn n_radii(&self) -> usize {
        self.radii.len()
    }
    pub fn n_angles(&self) -> usize {
        self.angles.len()
    }
    pub fn len(&self) -> usize {
        self.radii.len() * self.angles.len()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn node(&self, index: usize) -> GridNode {
        let na = self.angles.len();
        let (i, j) = (index / na, index % na);
        let r = self.radii[i];
        GridNode {
            point: PolarPoint::new(r, self.angles[j]),
            weight: r * self.radial_weights[i] * self.angular_weights[j],
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = GridNode> + '_ {
        (0..self.len()).map(move |i| self.node(i))
    }

    /// Sub-grid keeping only radii `≥ r_cut` (used to drop inner bands).
    pub fn restrict_min_radius(&self, r_cut: f64) -> PolarGrid {
        let keep: Vec<usize> = (0..self.radii.len())
            .filter(|&i| self.radii[i] >= r_cut)
            .collect();
        PolarGrid {
            domain: self.domain,
            radii: keep.iter().map(|&i| self.radii[i]).collect(),
            radial_weights: keep.iter().map(|&i| self.radial_weights[i]).collect(),
            angles: self.angles.clone(),
            angular_weights: self.angular_weights.clone(),
        }
    }

    /// Index of the first radius `≥ r_cut`.
    pub fn first_radius_at_least(&self, r_cut: f64) -> usize {
        self.radii.partition_point(|&r| r < r_cut)
    }
}

/// All nodes of the graded grid with their polar cell-area weights.
pub fn graded_polar_grid(domain: &AngularDomain, spec: &GridSpec) -> Result<Vec<GridNode>> {
    Ok(PolarGrid::new(domain, spec)?.nodes().collect())
}
