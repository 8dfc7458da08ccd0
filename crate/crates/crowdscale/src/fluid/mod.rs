//! Macroscopic crowd models on the spatial grid alone.
//!
//! Two closures of the heading distribution are provided:
//!
//! * [`mono`]: every pedestrian of a group at a point shares one exact
//!   heading. The state is a density and a unit direction field per group;
//!   crossings concentrate density without bound, which the stepper reports
//!   as an error when a ceiling is exceeded.
//! * [`vmf`]: the headings at a point follow a circular exponential
//!   distribution whose concentration is slaved to the mean speed. The state
//!   is a density and a momentum field per group with mean speed strictly
//!   below the walking speed; noise damps momentum and steering enters as a
//!   distribution-averaged torque.

pub mod mono;
pub mod vmf;

use crate::error::{Error, Result};
use crate::grid::SpatialGrid;

/// Densities below this are treated as vacuum: no interactions are sourced
/// from such cells and no mean heading is reconstructed in them.
pub const VACUUM_RHO: f64 = 1e-12;

/// Advective CFL ceiling for the explicit fluid steps.
pub(crate) const CFL_LIMIT: f64 = 0.9;

pub(crate) fn check_advective_cfl(c: f64, dt: f64, space: &SpatialGrid) -> Result<()> {
    let h = space.dx().min(space.dy());
    if c * dt > CFL_LIMIT * h {
        return Err(Error::CflViolation {
            constraint: format!(
                "explicit fluid step needs c*dt <= {CFL_LIMIT}*min(dx, dy): c={c}, dt={dt}, min(dx, dy)={h:.6}"
            ),
        });
    }
    Ok(())
}
