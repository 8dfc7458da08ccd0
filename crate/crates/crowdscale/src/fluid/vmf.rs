//! Circular-equilibrium fluid model.
//!
//! Each group carries a density and a momentum field; the heading
//! distribution at a point is the circular exponential family member whose
//! mean direction and mean resultant length match the momentum. The second
//! heading moment then closes the momentum flux, angular noise damps
//! momentum at rate `d`, and steering enters as the distribution average of
//! the heading torque, evaluated by parts so that the discrete source
//! balances the damping exactly on the free-walk equilibrium.

use super::{check_advective_cfl, VACUUM_RHO};
use crate::error::{Error, Result};
use crate::grid::{AngleGrid, SpatialGrid};
use crate::kernels::VmfKernelTable;
use crate::special::{bessel_i_scaled, beta_of_speed, vmf_density, VmfParams};
use crate::vec2::Vec2;
use crate::ModelParams;

/// Mean speeds are kept strictly inside the unit disk; the excess is clamped
/// and counted in the step diagnostics.
const U_MAX: f64 = 1.0 - 1e-9;

/// Density and momentum fields, one pair per group, flattened as
/// `[group][cell]` with the cell index `iy * nx + ix`. Momentum is measured
/// in units of the walking speed, so the mean heading vector `mom / rho` has
/// norm below 1.
#[derive(Debug, Clone, PartialEq)]
pub struct VmfState {
    pub space: SpatialGrid,
    /// Unit target direction of each group.
    pub targets: Vec<Vec2>,
    pub rho: Vec<f64>,
    pub mom: Vec<Vec2>,
}

impl VmfState {
    pub fn new(space: SpatialGrid, targets: Vec<Vec2>) -> Self {
        assert!(!targets.is_empty(), "need at least one group");
        let targets: Vec<Vec2> = targets
            .into_iter()
            .map(|t| t.normalized().expect("target direction must be nonzero"))
            .collect();
        let len = targets.len() * space.n_cells();
        VmfState { space, targets, rho: vec![0.0; len], mom: vec![Vec2::ZERO; len] }
    }

    #[inline]
    pub fn n_groups(&self) -> usize {
        self.targets.len()
    }

    #[inline]
    pub fn idx(&self, b: usize, iy: usize, ix: usize) -> usize {
        b * self.space.n_cells() + iy * self.space.nx + ix
    }

    /// Fill density and mean heading vector from closures of (group, cell
    /// center); the momentum is their product.
    pub fn assign(
        &mut self,
        rho: impl Fn(usize, Vec2) -> f64,
        mean_heading: impl Fn(usize, Vec2) -> Vec2,
    ) {
        for b in 0..self.n_groups() {
            for iy in 0..self.space.ny {
                for ix in 0..self.space.nx {
                    let x = self.space.center(ix, iy);
                    let i = self.idx(b, iy, ix);
                    let r = rho(b, x);
                    self.rho[i] = r;
                    self.mom[i] = mean_heading(b, x) * r;
                }
            }
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.rho.iter().sum::<f64>() * self.space.cell_area()
    }

    pub fn total_momentum(&self) -> Vec2 {
        self.mom.iter().fold(Vec2::ZERO, |acc, m| acc + *m) * self.space.cell_area()
    }

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

/// How the distance-to-interaction is closed for this model.
pub enum VmfClosure<'a> {
    /// No interactions.
    Free,
    /// Full-surround kernel premixed over the circular equilibrium family,
    /// looked up by the angle to each group's mean direction and its mean
    /// resultant length. Requires full-surround vision (cone cosine -1).
    Table(&'a VmfKernelTable),
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Copy, Default)]
pub struct VmfDiagnostics {
    /// Cells (per group) whose mean speed had to be clamped inside the unit
    /// disk during primitive recovery.
    pub clamp_count: usize,
    pub max_rho: f64,
}

/// Distribution average of the heading torque `-dPhi/dtheta` against the
/// circular equilibrium with parameters `p`, written by parts so only the
/// potential itself is sampled:
/// sum_j Phi_j M_j [beta Omega - u_j (1 + beta u_j . Omega)] dtheta.
pub fn mean_turning_moment(phi: &[f64], grid: &AngleGrid, p: &VmfParams) -> Vec2 {
    debug_assert_eq!(phi.len(), grid.len());
    let mut acc = Vec2::ZERO;
    for (j, &phi_j) in phi.iter().enumerate() {
        let u = grid.unit(j);
        let m = vmf_density(u, p);
        let w = p.omega * p.beta - u * (1.0 + p.beta * u.dot(p.omega));
        acc += w * (phi_j * m);
    }
    acc * grid.dtheta()
}

struct Prim {
    /// Mean heading vector (norm < 1); zero in vacuum.
    u: Vec2,
    beta: f64,
    /// Second-moment ratio of the circular equilibrium at `beta`.
    r2: f64,
}

impl Prim {
    fn stress(&self, rho: f64) -> (f64, f64, f64) {
        let n2 = self.u.norm2();
        let h = if n2 < 1e-8 { 0.5 } else { self.r2 / n2 };
        let iso = 0.5 * (1.0 - self.r2);
        (
            rho * (iso + h * self.u.x * self.u.x),
            rho * (h * self.u.x * self.u.y),
            rho * (iso + h * self.u.y * self.u.y),
        )
    }
}

/// One explicit step of length `dt`: central fluxes with full-speed
/// dissipation for density and momentum, then explicit torque and damping
/// sources. Returns per-step diagnostics.
pub fn step_vmf(
    state: &mut VmfState,
    params: &ModelParams,
    grid: &AngleGrid,
    closure: &VmfClosure,
    dt: f64,
) -> Result<VmfDiagnostics> {
    check_advective_cfl(params.c, dt, &state.space)?;
    if let VmfClosure::Table(table) = closure {
        if !table.cut.approx_eq(&params.cut) {
            return Err(Error::InvalidParams(format!(
                "premixed kernel table cutoffs (ell={}, L={}, R={}) do not match the model (ell={}, L={}, R={})",
                table.cut.ell, table.cut.big_l, table.cut.r,
                params.cut.ell, params.cut.big_l, params.cut.r
            )));
        }
        if params.kappa > -1.0 + 1e-9 {
            return Err(Error::InvalidParams(format!(
                "the premixed closure assumes full-surround vision (cone cosine -1), model uses {}",
                params.kappa
            )));
        }
    }

    let nb = state.n_groups();
    let (nx, ny) = (state.space.nx, state.space.ny);
    let ncells = state.space.n_cells();
    let (dx, dy) = (state.space.dx(), state.space.dy());
    let c = params.c;
    let big_l = params.cut.big_l;
    let inv_floor = 1.0 / big_l;
    let half_k = 0.5 * params.k;
    let n_theta = grid.len();

    let mut diag = VmfDiagnostics::default();

    // Primitive recovery.
    let mut prims: Vec<Prim> = Vec::with_capacity(nb * ncells);
    for i in 0..nb * ncells {
        let rho = state.rho[i];
        if rho < VACUUM_RHO {
            prims.push(Prim { u: Vec2::ZERO, beta: 0.0, r2: 0.0 });
            continue;
        }
        let mut u = state.mom[i] / rho;
        let n = u.norm();
        if n > U_MAX {
            u = u * (U_MAX / n);
            diag.clamp_count += 1;
        }
        let beta = beta_of_speed(u.norm())?;
        let r2 = bessel_i_scaled(2, beta) / bessel_i_scaled(0, beta);
        prims.push(Prim { u, beta, r2 });
    }

    // Sources: distribution-averaged torque minus damping, per group & cell.
    let mut sources = vec![Vec2::ZERO; nb * ncells];
    let mut inv_dti = vec![inv_floor; n_theta];
    let mut phi = vec![0.0; n_theta];
    for cell in 0..ncells {
        let total: f64 = (0..nb).map(|b| state.rho[b * ncells + cell]).sum();
        if let VmfClosure::Table(table) = closure {
            if total > VACUUM_RHO {
                for (j, inv) in inv_dti.iter_mut().enumerate() {
                    let theta = grid.theta(j);
                    let mut acc = 0.0;
                    for b in 0..nb {
                        let rho_b = state.rho[b * ncells + cell];
                        if rho_b <= 0.0 {
                            continue;
                        }
                        let p = &prims[b * ncells + cell];
                        let mean_angle =
                            if p.u.norm2() > 0.0 { p.u.angle() } else { 0.0 };
                        acc += rho_b * table.eval(theta - mean_angle, p.u.norm());
                    }
                    *inv = (acc / total).max(inv_floor);
                }
            } else {
                inv_dti.iter_mut().for_each(|v| *v = inv_floor);
            }
        }
        for b in 0..nb {
            let i = b * ncells + cell;
            let rho_b = state.rho[i];
            if rho_b < VACUUM_RHO {
                continue;
            }
            let target = state.targets[b];
            for j in 0..n_theta {
                let d_j = 1.0 / inv_dti[j];
                let cw = grid.unit(j).dot(target);
                phi[j] = half_k * (d_j * d_j - 2.0 * d_j * big_l * cw + big_l * big_l);
            }
            let p = &prims[i];
            let omega = p.u.normalized().unwrap_or(Vec2::new(1.0, 0.0));
            let torque =
                mean_turning_moment(&phi, grid, &VmfParams { omega, beta: p.beta });
            sources[i] = torque * rho_b - state.mom[i] * params.d;
        }
    }

    // Central fluxes with full-speed dissipation on all conserved fields.
    let rho0 = state.rho.clone();
    let mom0 = state.mom.clone();
    for b in 0..nb {
        let base = b * ncells;
        let mut fx = vec![(0.0, Vec2::ZERO); ncells];
        let mut fy = vec![(0.0, Vec2::ZERO); ncells];
        for iy in 0..ny {
            for ix in 0..nx {
                let cell = iy * nx + ix;
                let right = iy * nx + (ix + 1) % nx;
                let top = ((iy + 1) % ny) * nx + ix;

                let (sl_xx, sl_xy, sl_yy) = prims[base + cell].stress(rho0[base + cell]);
                let (sr_xx, sr_xy, _) = prims[base + right].stress(rho0[base + right]);
                let (_, st_xy, st_yy) = prims[base + top].stress(rho0[base + top]);

                let f_l = (c * mom0[base + cell].x, Vec2::new(c * sl_xx, c * sl_xy));
                let f_r = (c * mom0[base + right].x, Vec2::new(c * sr_xx, c * sr_xy));
                fx[cell] = (
                    0.5 * (f_l.0 + f_r.0) - 0.5 * c * (rho0[base + right] - rho0[base + cell]),
                    (f_l.1 + f_r.1) * 0.5
                        - (mom0[base + right] - mom0[base + cell]) * (0.5 * c),
                );

                let g_b = (c * mom0[base + cell].y, Vec2::new(c * sl_xy, c * sl_yy));
                let g_t = (c * mom0[base + top].y, Vec2::new(c * st_xy, c * st_yy));
                fy[cell] = (
                    0.5 * (g_b.0 + g_t.0) - 0.5 * c * (rho0[base + top] - rho0[base + cell]),
                    (g_b.1 + g_t.1) * 0.5 - (mom0[base + top] - mom0[base + cell]) * (0.5 * c),
                );
            }
        }
        for iy in 0..ny {
            for ix in 0..nx {
                let cell = iy * nx + ix;
                let left = iy * nx + (ix + nx - 1) % nx;
                let bottom = ((iy + ny - 1) % ny) * nx + ix;
                state.rho[base + cell] = rho0[base + cell]
                    - dt / dx * (fx[cell].0 - fx[left].0)
                    - dt / dy * (fy[cell].0 - fy[bottom].0);
                state.mom[base + cell] = mom0[base + cell]
                    - (fx[cell].1 - fx[left].1) * (dt / dx)
                    - (fy[cell].1 - fy[bottom].1) * (dt / dy)
                    + sources[base + cell] * dt;
            }
        }
    }

    diag.max_rho = state.max_density();
    Ok(diag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::PeriodicBox;
    use crate::kernels::IsoKernelTable;
    use crate::special::order_parameter;
    use std::f64::consts::PI;

    fn grid_n(n: usize, extent: f64) -> SpatialGrid {
        SpatialGrid::new(n, n, PeriodicBox::new(extent, extent))
    }

    #[test]
    fn by_parts_torque_matches_direct_quadrature() {
        let grid = AngleGrid::new(256);
        let phi: Vec<f64> =
            (0..256).map(|j| {
                let t = grid.theta(j);
                0.7 * (t + 0.3).sin() + 0.25 * (2.0 * t - 0.6).cos()
            }).collect();
        let p = VmfParams { omega: Vec2::from_angle(0.8), beta: 3.2 };

        // Direct form with the analytic derivative of the potential.
        let mut direct = Vec2::ZERO;
        for j in 0..256 {
            let t = grid.theta(j);
            let dphi = 0.7 * (t + 0.3).cos() - 0.5 * (2.0 * t - 0.6).sin();
            direct += grid.unit(j).perp() * (-dphi * vmf_density(grid.unit(j), &p));
        }
        direct = direct * grid.dtheta();

        let by_parts = mean_turning_moment(&phi, &grid, &p);
        assert!(
            (by_parts - direct).norm() < 1e-12,
            "by-parts {by_parts:?} vs direct {direct:?}"
        );
    }

    #[test]
    fn free_walk_torque_balances_damping_at_equilibrium() {
        let params = ModelParams::defaults();
        let beta = params.free_walk_beta();
        let grid = AngleGrid::new(128);
        let target = Vec2::from_angle(0.9);
        let kl2 = params.k * params.cut.big_l * params.cut.big_l;
        let phi: Vec<f64> =
            (0..128).map(|j| kl2 * (1.0 - grid.unit(j).dot(target))).collect();
        let torque = mean_turning_moment(&phi, &grid, &VmfParams { omega: target, beta });
        let expect = target * (params.d * order_parameter(beta));
        assert!(
            (torque - expect).norm() < 1e-12,
            "equilibrium torque {torque:?} vs {expect:?}"
        );
    }

    #[test]
    fn uniform_equilibrium_state_is_steady() {
        let params = ModelParams::defaults();
        let beta = params.free_walk_beta();
        let u_eq = order_parameter(beta);
        let target = Vec2::from_angle(0.9);
        let mut state = VmfState::new(grid_n(8, 8.0), vec![target]);
        state.assign(|_, _| 0.6, |_, _| target * u_eq);
        let grid = AngleGrid::new(128);
        let rho0 = state.rho.clone();
        let mom0 = state.mom.clone();
        for _ in 0..100 {
            let d = step_vmf(&mut state, &params, &grid, &VmfClosure::Free, 0.1).unwrap();
            assert_eq!(d.clamp_count, 0);
        }
        for (a, b) in state.rho.iter().zip(rho0.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in state.mom.iter().zip(mom0.iter()) {
            assert!((*a - *b).norm() < 1e-10, "momentum drifted: {a:?} vs {b:?}");
        }
    }

    #[test]
    fn misaligned_momentum_damps_at_the_noise_rate() {
        let mut params = ModelParams::defaults();
        params.k = 0.0; // no steering: pure exponential damping
        let mut state = VmfState::new(grid_n(4, 4.0), vec![Vec2::new(1.0, 0.0)]);
        let u0 = Vec2::from_angle(0.3) * 0.4;
        state.assign(|_, _| 1.0, |_, _| u0);
        let grid = AngleGrid::new(64);
        let dt = 0.01;
        let steps = 500;
        for _ in 0..steps {
            step_vmf(&mut state, &params, &grid, &VmfClosure::Free, dt).unwrap();
        }
        // Uniform fields: the update is exactly m *= (1 - d dt) per step.
        let expect = u0 * (1.0 - params.d * dt).powi(steps);
        assert!((state.mom[0] - expect).norm() < 1e-13);
        // The discrete decay rate approximates the noise intensity.
        let t = dt * steps as f64;
        let rate = -(state.mom[0].norm() / u0.norm()).ln() / t;
        assert!(
            (rate - params.d).abs() < 0.01 * params.d,
            "fitted damping rate {rate} vs noise {d}",
            d = params.d
        );
    }

    #[test]
    fn fluxes_conserve_mass_and_momentum_without_sources() {
        let mut params = ModelParams::defaults();
        params.k = 0.0;
        params.d = 0.0;
        let mut state = VmfState::new(grid_n(12, 6.0), vec![Vec2::new(1.0, 0.0)]);
        state.assign(
            |_, x| {
                // Smooth bumps plus a genuine vacuum pocket.
                let s = (2.0 * PI * x.x / 6.0).sin() * (2.0 * PI * x.y / 6.0).cos();
                if x.x > 4.5 && x.y > 4.5 {
                    0.0
                } else {
                    1.0 + 0.4 * s
                }
            },
            |_, x| Vec2::from_angle(0.9 * (2.0 * PI * x.y / 6.0).sin()) * 0.7,
        );
        let grid = AngleGrid::new(32);
        let mass0 = state.total_mass();
        let mom0 = state.total_momentum();
        for _ in 0..50 {
            step_vmf(&mut state, &params, &grid, &VmfClosure::Free, 0.05).unwrap();
        }
        assert!((state.total_mass() - mass0).abs() < 1e-12 * mass0);
        assert!((state.total_momentum() - mom0).norm() < 1e-12 * mom0.norm().max(1.0));
        assert!(state.rho.iter().all(|r| r.is_finite()));
        assert!(state.mom.iter().all(|m| m.x.is_finite() && m.y.is_finite()));
    }

    #[test]
    fn overspeed_momentum_is_clamped_and_counted() {
        let params = ModelParams::defaults();
        let mut state = VmfState::new(grid_n(4, 4.0), vec![Vec2::new(1.0, 0.0)]);
        state.assign(|_, _| 1.0, |_, _| Vec2::new(1.2, 0.0));
        let grid = AngleGrid::new(32);
        let d = step_vmf(&mut state, &params, &grid, &VmfClosure::Free, 0.05).unwrap();
        assert_eq!(d.clamp_count, state.space.n_cells());
        assert!(state.mom.iter().all(|m| m.x.is_finite() && m.y.is_finite()));
    }

    /// Two uniform counterflowing streams. Any transverse deviation raises
    /// the relative speed against *both* streams, so the premixed kernel
    /// makes the distance to interaction peak along the traffic axis and the
    /// effective heading well sharpens: the order parameter settles above
    /// the free-walk value, symmetrically for the two groups.
    #[test]
    fn opposing_streams_sharpen_alignment() {
        let mut params = ModelParams::defaults();
        params.kappa = -1.0;
        params.cut.big_l = 12.0;
        let beta = params.free_walk_beta();
        let u_eq = order_parameter(beta);

        let iso = IsoKernelTable::build(2.0, &params.cut, 97).unwrap();
        let betas = [0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0];
        let table = VmfKernelTable::build(&iso, &betas, 65, 128).unwrap();

        let mut state = VmfState::new(
            grid_n(4, 4.0),
            vec![Vec2::new(1.0, 0.0), Vec2::new(-1.0, 0.0)],
        );
        state.assign(|_, _| 1.0, |b, _| state_heading(b) * u_eq);
        fn state_heading(b: usize) -> Vec2 {
            if b == 0 {
                Vec2::new(1.0, 0.0)
            } else {
                Vec2::new(-1.0, 0.0)
            }
        }
        let grid = AngleGrid::new(128);
        for _ in 0..40 {
            step_vmf(&mut state, &params, &grid, &VmfClosure::Table(&table), 0.05).unwrap();
        }
        let ncells = state.space.n_cells();
        let u0 = state.mom[0] / state.rho[0];
        let u1 = state.mom[ncells] / state.rho[ncells];
        assert!(
            u0.x > u_eq + 1e-3,
            "oncoming traffic should sharpen alignment: {} vs free {u_eq}",
            u0.x
        );
        assert!(u0.x < 1.0, "order parameter left the unit disk: {}", u0.x);
        assert!((u0.x + u1.x).abs() < 1e-10, "head-on symmetry broken");
        assert!(u0.y.abs() < 1e-10 && u1.y.abs() < 1e-10);
    }
}
