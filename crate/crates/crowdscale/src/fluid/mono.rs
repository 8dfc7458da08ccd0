//! Single-heading (pressureless) fluid model.
//!
//! Each group carries an areal density and a unit heading field. Density
//! obeys a conservative continuity equation at walking speed along the
//! heading; the heading field is advected with itself and rotated by the
//! steering force evaluated at the cell's exact heading. Because all mass at
//! a point moves identically, converging flows focus density without bound;
//! the stepper halts with an error once a configured ceiling is crossed.

use super::{check_advective_cfl, VACUUM_RHO};
use crate::error::{Error, Result};
use crate::grid::SpatialGrid;
use crate::kernels::KernelTable;
use crate::vec2::Vec2;
use crate::ModelParams;

/// Density and unit-heading fields, one pair per group, flattened as
/// `[group][cell]` with the cell index `iy * nx + ix`.
#[derive(Debug, Clone, PartialEq)]
pub struct MonoState {
    pub space: SpatialGrid,
    /// Unit target direction of each group.
    pub targets: Vec<Vec2>,
    pub rho: Vec<f64>,
    pub u: Vec<Vec2>,
}

impl MonoState {
    /// Empty state: zero density, headings at the group target.
    pub fn new(space: SpatialGrid, targets: Vec<Vec2>) -> Self {
        assert!(!targets.is_empty(), "need at least one group");
        let targets: Vec<Vec2> = targets
            .into_iter()
            .map(|t| t.normalized().expect("target direction must be nonzero"))
            .collect();
        let ncells = space.n_cells();
        let mut u = Vec::with_capacity(targets.len() * ncells);
        for t in &targets {
            u.extend(std::iter::repeat(*t).take(ncells));
        }
        let rho = vec![0.0; targets.len() * ncells];
        MonoState { space, targets, rho, u }
    }

    #[inline]
    pub fn n_groups(&self) -> usize {
        self.targets.len()
    }

    #[inline]
    pub fn idx(&self, b: usize, iy: usize, ix: usize) -> usize {
        b * self.space.n_cells() + iy * self.space.nx + ix
    }

    /// Fill density and heading from closures of (group, cell center).
    pub fn assign(
        &mut self,
        rho: impl Fn(usize, Vec2) -> f64,
        heading: impl Fn(usize, Vec2) -> Vec2,
    ) {
        for b in 0..self.n_groups() {
            for iy in 0..self.space.ny {
                for ix in 0..self.space.nx {
                    let x = self.space.center(ix, iy);
                    let i = self.idx(b, iy, ix);
                    self.rho[i] = rho(b, x);
                    self.u[i] = heading(b, x).normalized().expect("heading must be nonzero");
                }
            }
        }
    }

    /// Total pedestrian count.
    pub fn total_mass(&self) -> f64 {
        self.rho.iter().sum::<f64>() * self.space.cell_area()
    }

    /// Largest density over groups and cells.
    pub fn max_density(&self) -> f64 {
        let ncells = self.space.n_cells();
        let mut per_cell = vec![0.0; ncells];
        for b in 0..self.n_groups() {
            for cell in 0..ncells {
                per_cell[cell] += self.rho[b * ncells + cell];
            }
        }
        per_cell.into_iter().fold(0.0, f64::max)
    }
}

/// How the distance-to-interaction is closed for the single-heading model.
pub enum MonoClosure<'a> {
    /// No interactions: full preferred displacement everywhere.
    Free,
    /// Vision-cone kernel table; the local heading distribution is the
    /// mixture of the groups' point headings weighted by their densities.
    Cone(&'a KernelTable),
}

/// Extra knobs of the single-heading stepper.
#[derive(Debug, Clone, Copy)]
pub struct MonoParams {
    /// Density above which the run is declared focused (a crossing formed)
    /// and the stepper returns an error.
    pub rho_ceiling: f64,
    /// Step for the centered finite difference of the heading potential.
    pub dtheta_fd: f64,
}

impl MonoParams {
    pub fn new(rho_ceiling: f64) -> Self {
        MonoParams { rho_ceiling, dtheta_fd: 2.0 * std::f64::consts::PI / 256.0 }
    }
}

/// Steering force (heading rotation rate) per group and cell, evaluated by a
/// centered difference of the heading potential about the current heading.
fn heading_forces(
    state: &MonoState,
    params: &ModelParams,
    mp: &MonoParams,
    closure: &MonoClosure,
) -> Result<Vec<f64>> {
    if let MonoClosure::Cone(table) = closure {
        if !table.cut.approx_eq(&params.cut) {
            return Err(Error::InvalidParams(format!(
                "kernel table cutoffs (ell={}, L={}, R={}) do not match the model (ell={}, L={}, R={})",
                table.cut.ell, table.cut.big_l, table.cut.r,
                params.cut.ell, params.cut.big_l, params.cut.r
            )));
        }
        if (table.kappa - params.kappa).abs() > 1e-9 {
            return Err(Error::InvalidParams(format!(
                "kernel table built for cone cosine {} but the model uses {}",
                table.kappa, params.kappa
            )));
        }
    }

    let nb = state.n_groups();
    let ncells = state.space.n_cells();
    let h = mp.dtheta_fd;
    let big_l = params.cut.big_l;
    let inv_floor = 1.0 / big_l;
    let half_k = 0.5 * params.k;

    let mut forces = vec![0.0; nb * ncells];
    for cell in 0..ncells {
        let total: f64 = (0..nb).map(|b| state.rho[b * ncells + cell]).sum();
        for b in 0..nb {
            let axis = state.u[b * ncells + cell];
            let target = state.targets[b];
            let mut phi = [0.0; 2];
            for (side, sign) in [(0usize, -1.0), (1usize, 1.0)] {
                let w = axis.rotated(sign * h);
                let mut inv = inv_floor;
                if let MonoClosure::Cone(table) = closure {
                    if total > VACUUM_RHO {
                        let mut acc = 0.0;
                        for bp in 0..nb {
                            let rho_p = state.rho[bp * ncells + cell];
                            if rho_p <= 0.0 {
                                continue;
                            }
                            let rel = state.u[bp * ncells + cell] - w;
                            let s = rel.norm();
                            if s > 1e-12 {
                                acc += rho_p * table.eval(axis.dot(rel) / s, s.min(2.0))?;
                            }
                        }
                        inv = (acc / total).max(inv_floor);
                    }
                }
                let d = 1.0 / inv;
                phi[side] = half_k * (d * d - 2.0 * d * big_l * w.dot(target) + big_l * big_l);
            }
            forces[b * ncells + cell] = -(phi[1] - phi[0]) / (2.0 * h);
        }
    }
    Ok(forces)
}

/// One explicit step of length `dt`, starting at time `t`.
///
/// Density moves by donor-cell fluxes with face velocities averaged from the
/// adjacent headings; headings are self-advected upwind and rotated by the
/// steering force, then renormalized to unit length. Fails with a
/// focusing error when the updated density exceeds the configured ceiling.
pub fn step_mono(
    state: &mut MonoState,
    params: &ModelParams,
    mp: &MonoParams,
    closure: &MonoClosure,
    dt: f64,
    t: f64,
) -> Result<()> {
    check_advective_cfl(params.c, dt, &state.space)?;
    let forces = heading_forces(state, params, mp, closure)?;

    let (nx, ny) = (state.space.nx, state.space.ny);
    let ncells = state.space.n_cells();
    let (dx, dy) = (state.space.dx(), state.space.dy());
    let c = params.c;

    let rho0 = state.rho.clone();
    let u0 = state.u.clone();

    for b in 0..state.n_groups() {
        let base = b * ncells;
        let rho_b = &rho0[base..base + ncells];
        let u_b = &u0[base..base + ncells];

        // Face fluxes: fluxx[cell] through the right face, fluxy[cell]
        // through the top face.
        let mut fluxx = vec![0.0; ncells];
        let mut fluxy = vec![0.0; ncells];
        for iy in 0..ny {
            for ix in 0..nx {
                let cell = iy * nx + ix;
                let right = iy * nx + (ix + 1) % nx;
                let top = ((iy + 1) % ny) * nx + ix;
                let vx = 0.5 * c * (u_b[cell].x + u_b[right].x);
                fluxx[cell] = vx * if vx >= 0.0 { rho_b[cell] } else { rho_b[right] };
                let vy = 0.5 * c * (u_b[cell].y + u_b[top].y);
                fluxy[cell] = vy * if vy >= 0.0 { rho_b[cell] } else { rho_b[top] };
            }
        }

        for iy in 0..ny {
            for ix in 0..nx {
                let cell = iy * nx + ix;
                let left = iy * nx + (ix + nx - 1) % nx;
                let bottom = ((iy + ny - 1) % ny) * nx + ix;
                state.rho[base + cell] = rho_b[cell]
                    - dt / dx * (fluxx[cell] - fluxx[left])
                    - dt / dy * (fluxy[cell] - fluxy[bottom]);

                // Heading: upwind self-advection plus rotation by the force.
                let u = u_b[cell];
                let (vx, vy) = (c * u.x, c * u.y);
                let right = iy * nx + (ix + 1) % nx;
                let top = ((iy + 1) % ny) * nx + ix;
                let dudx = if vx >= 0.0 {
                    (u - u_b[left]) / dx
                } else {
                    (u_b[right] - u) / dx
                };
                let dudy = if vy >= 0.0 {
                    (u - u_b[bottom]) / dy
                } else {
                    (u_b[top] - u) / dy
                };
                let star =
                    u - (dudx * vx + dudy * vy) * dt + u.perp() * (forces[base + cell] * dt);
                state.u[base + cell] = star.normalized().unwrap_or(u);
            }
        }
    }

    let max_rho = state.max_density();
    if max_rho > mp.rho_ceiling {
        return Err(Error::CausticFormed { t: t + dt, max_rho, ceiling: mp.rho_ceiling });
    }
    Ok(())
}
