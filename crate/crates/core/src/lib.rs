//! Dirichlet heat kernel on planar wedges, weighted `L_p` norms of heat
//! convolutions, and numerical checks of the associated corner estimates.

pub mod convolution;
pub mod error;
pub mod experiments;
pub mod fields;
pub mod geometry;
pub mod kernel;
pub mod quadrature;
pub mod special;
pub mod suites;
pub mod verify;

pub use error::{Error, Result};
pub use geometry::{AngularDomain, GridNode, GridSpec, PolarGrid, PolarPoint};
pub use quadrature::TimeQuadSpec;
pub use special::BesselAccuracy;
pub use kernel::{heat_kernel, KernelConfig};
pub use fields::{DerivedParams, WeightParams};
pub use convolution::{CounterexampleSpec, NoiseSpec, SourceSpec, VarianceField};
