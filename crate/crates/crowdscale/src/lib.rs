//! Multiscale pedestrian-flow models driven by time-to-interaction avoidance.
//!
//! Pedestrians steer by minimizing a heading potential built from the distance
//! they can walk before their closest encounter (the "distance to interaction").
//! The same avoidance rule is expressed at four levels of description, all in
//! this crate, so the levels can be run on one scenario and compared:
//!
//! * [`ibm`] — individual-based models: a discrete-time heading argmin and a
//!   continuous stochastic heading relaxation.
//! * [`kinetic`] — a mean-field phase-space density f(x, theta, a) evolved by a
//!   transport + heading drift-diffusion splitting.
//! * [`fluid`] — second-order moment closures: monokinetic (|U| = 1) and
//!   von Mises-Fisher (|U| < 1) with its anisotropic flux tensor.
//! * [`hydro`] — a first-order model where the local velocity law solves a
//!   fixed-point problem between the heading distribution and the
//!   distance-to-interaction profile.
//!
//! Supporting modules: [`geometry`] (pairwise encounter kinematics),
//! [`special`] (modified Bessel functions and circular statistics),
//! [`kernels`] (precomputed local interaction kernels with on-disk tables),
//! and [`scenario`]/[`run`]/[`compare`] (the harness behind the `crowdscale`
//! binary).
//!
//! Run `cargo run --example <name>` for worked demonstrations of each piece;
//! the `examples/` directory is the intended entry point into the API.

pub mod error;
pub mod fluid;
pub mod geometry;
pub mod grid;
pub mod hydro;
pub mod ibm;
pub mod kernels;
pub mod kinetic;
pub mod scenario;
pub mod special;
pub mod vec2;

pub use error::{Error, Result};
pub use geometry::CutoffParams;
pub use vec2::Vec2;

/// Shared physical parameters used by every model level.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelParams {
    /// Walking speed (m/s). All pedestrians move at this speed.
    pub c: f64,
    /// Interaction cutoffs: body radius `r`, DTI floor `ell`, DTI ceiling `big_l`.
    pub cut: CutoffParams,
    /// Stiffness of the heading potential (1/m^2 so the potential is O(1)).
    pub k: f64,
    /// Angular noise intensity (rad^2/s).
    pub d: f64,
    /// Vision-cone cosine threshold, in [-1, 1). -1 means full surround vision.
    pub kappa: f64,
    /// Interaction-radius scale: delta = big_c / sqrt(local density).
    pub big_c: f64,
}

impl ModelParams {
    /// Documented defaults used by the harness when a scenario omits values.
    pub fn defaults() -> Self {
        ModelParams {
            c: 1.0,
            cut: CutoffParams { r: 0.4, ell: 0.4, big_l: 4.0 },
            k: 1.0 / 16.0,
            d: 0.1,
            kappa: 0.0,
            big_c: 5.0,
        }
    }

    /// Concentration of the free-walking equilibrium heading distribution.
    pub fn free_walk_beta(&self) -> f64 {
        self.k * self.cut.big_l * self.cut.big_l / self.d
    }
}
