//! Shared fixtures for the criterion benches.

use wedgeheat::convolution::NoiseSpec;
use wedgeheat::experiments::{vertex_profile, ExperimentGrid};
use wedgeheat::{AngularDomain, KernelConfig, PolarGrid, PolarPoint};

pub fn reflex_config() -> KernelConfig {
    KernelConfig::new(AngularDomain::from_multiple_of_pi(1.5).expect("valid angle"))
}

/// `(label, t, x, y)` covering the small-, mid- and large-argument Bessel regimes.
pub fn kernel_points(cfg: &KernelConfig) -> Vec<(&'static str, f64, PolarPoint, PolarPoint)> {
    let k = cfg.domain.kappa0();
    vec![
        ("near_vertex", 1.0, PolarPoint::new(1e-3, 0.5 * k), PolarPoint::new(0.5, 0.3 * k)),
        ("diffusive", 1.0, PolarPoint::new(1.0, 0.5 * k), PolarPoint::new(1.2, 0.4 * k)),
        ("short_time", 1e-3, PolarPoint::new(1.0, 0.02 * k), PolarPoint::new(1.01, 0.03 * k)),
    ]
}

pub fn vertex_noise(cfg: &KernelConfig) -> NoiseSpec {
    NoiseSpec { modes: vec![vertex_profile(cfg.domain.critical_exponent())] }
}

pub fn small_grid(cfg: &KernelConfig) -> PolarGrid {
    ExperimentGrid {
        r_max: 10.0,
        cells_per_decade: 2,
        feature_cells: 4,
        angular_cells: 2,
        points: 2,
        ..Default::default()
    }
    .build(&cfg.domain, &[(0.125, 0.25)])
    .expect("valid grid")
}
