//! First-order (hydrodynamic) model.
//!
//! Density is the only evolved field. At every cell and instant the crowd is
//! assumed to have already settled the heading game: each group's heading
//! distribution is the Gibbs distribution of its steering potential, and the
//! distance-to-interaction profile entering that potential is generated by
//! the very mixture of those distributions. This self-consistency problem is
//! solved pointwise by a fixed-point iteration with secant-adapted
//! relaxation, and the resulting mean headings advect the group densities.
//!
//! The closure assumes full-surround vision (cone cosine -1), which makes
//! the interaction kernel a function of relative speed alone and lets one
//! isotropic kernel family serve every heading pair.

use crate::error::{Error, Result};
use crate::fluid::{check_advective_cfl, VACUUM_RHO};
use crate::grid::{AngleGrid, SpatialGrid};
use crate::kernels::IsoKernelFamily;
use crate::vec2::Vec2;
use crate::ModelParams;

/// Controls for the pointwise self-consistency iteration.
#[derive(Debug, Clone, Copy)]
pub struct FixedPointOptions {
    /// Iteration cap; exceeding it returns [`Error::FixedPointStalled`].
    pub max_iter: usize,
    /// Convergence threshold on max |D_new - D|, relative to the DTI ceiling.
    pub tol: f64,
    /// Relaxation factor of the first update; later factors are set by
    /// residual extrapolation.
    pub damping: f64,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        FixedPointOptions { max_iter: 500, tol: 1e-8, damping: 0.5 }
    }
}

/// How the distance-to-interaction profile is generated.
pub enum HydroClosure<'a> {
    /// No interactions: the profile sits at the ceiling everywhere.
    Free,
    /// Isotropic kernels looked up at the density-dependent neighborhood
    /// radius delta = big_c / sqrt(total density), interpolated in radius.
    Family(&'a IsoKernelFamily),
}

/// Group densities on a periodic grid plus the cached distance-to-interaction
/// profiles that warm-start the next solve. Density is flattened as
/// `[group][cell]` with cell index `iy * nx + ix`.
#[derive(Debug, Clone)]
pub struct HydroState {
    pub space: SpatialGrid,
    /// Unit target direction of each group.
    pub targets: Vec<Vec2>,
    pub rho: Vec<f64>,
    /// Heading resolution used by the velocity law.
    pub grid: AngleGrid,
    /// `[cell][theta]` cached profiles; nonpositive entries mean "no cache".
    warm: Vec<f64>,
}

impl HydroState {
    pub fn new(space: SpatialGrid, targets: Vec<Vec2>, n_theta: usize) -> Self {
        assert!(!targets.is_empty(), "need at least one group");
        let targets: Vec<Vec2> = targets
            .into_iter()
            .map(|t| t.normalized().expect("target direction must be nonzero"))
            .collect();
        let rho = vec![0.0; targets.len() * space.n_cells()];
        let warm = vec![0.0; space.n_cells() * n_theta];
        HydroState { space, targets, rho, grid: AngleGrid::new(n_theta), warm }
    }

    #[inline]
    pub fn n_groups(&self) -> usize {
        self.targets.len()
    }

    #[inline]
    pub fn idx(&self, b: usize, iy: usize, ix: usize) -> usize {
        b * self.space.n_cells() + iy * self.space.nx + ix
    }

    /// Fill the densities from a closure of (group, cell center).
    pub fn assign(&mut self, rho: impl Fn(usize, Vec2) -> f64) {
        for b in 0..self.n_groups() {
            for iy in 0..self.space.ny {
                for ix in 0..self.space.nx {
                    let i = self.idx(b, iy, ix);
                    self.rho[i] = rho(b, self.space.center(ix, iy));
                }
            }
        }
        // Cached profiles belong to the old density field.
        self.warm.fill(0.0);
    }

    pub fn total_mass(&self) -> f64 {
        self.rho.iter().sum::<f64>() * self.space.cell_area()
    }

    pub fn max_density(&self) -> f64 {
        let ncells = self.space.n_cells();
        (0..ncells)
            .map(|c| (0..self.n_groups()).map(|b| self.rho[b * ncells + c]).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Distance-to-interaction profile cached at a cell by the last solve.
    pub fn dti_profile(&self, iy: usize, ix: usize) -> &[f64] {
        let n = self.grid.len();
        let cell = iy * self.space.nx + ix;
        &self.warm[cell * n..(cell + 1) * n]
    }
}

/// Velocities produced by one solve, with per-cell iteration diagnostics.
#[derive(Debug, Clone)]
pub struct HydroSolution {
    /// Mean heading vector per `[group][cell]`; the advection velocity is
    /// this times the walking speed.
    pub velocity: Vec<Vec2>,
    pub fp_iters: Vec<u32>,
    pub fp_residual: Vec<f64>,
}

/// Gibbs heading distribution induced by a distance-to-interaction profile:
/// M(theta) proportional to exp(-Phi(theta)/d) with the steering potential
/// Phi = k/2 |D(theta) u(theta) - L a|^2, normalized to unit mass on the
/// circle.
pub fn heading_distribution(
    dti: &[f64],
    target: Vec2,
    params: &ModelParams,
    grid: &AngleGrid,
) -> Vec<f64> {
    debug_assert_eq!(dti.len(), grid.len());
    let big_l = params.cut.big_l;
    let half_k = 0.5 * params.k;
    let mut phi: Vec<f64> = dti
        .iter()
        .enumerate()
        .map(|(j, &d)| {
            half_k * (d * d - 2.0 * d * big_l * grid.unit(j).dot(target) + big_l * big_l)
        })
        .collect();
    let phi_min = phi.iter().copied().fold(f64::INFINITY, f64::min);
    for p in phi.iter_mut() {
        *p = (-(*p - phi_min) / params.d).exp();
    }
    let z = grid.integrate(&phi);
    for p in phi.iter_mut() {
        *p /= z;
    }
    phi
}

/// Mean heading vector of a group facing `target` against the profile `dti`.
pub fn equilibrium_velocity(
    dti: &[f64],
    target: Vec2,
    params: &ModelParams,
    grid: &AngleGrid,
) -> Vec2 {
    grid.first_moment(&heading_distribution(dti, target, params, grid))
}

/// Solve the pointwise self-consistency problem at one location.
///
/// `rhos` holds the group densities there; `dti` enters as the warm start
/// (nonpositive or oversized entries are reset to the ceiling) and leaves
/// holding the converged profile. Returns (iterations, final residual).
/// Below vacuum density the profile is the ceiling exactly, with no
/// iteration.
pub fn fixed_point_dti(
    rhos: &[f64],
    targets: &[Vec2],
    params: &ModelParams,
    grid: &AngleGrid,
    family: &IsoKernelFamily,
    dti: &mut [f64],
    opts: &FixedPointOptions,
) -> Result<(u32, f64)> {
    debug_assert_eq!(rhos.len(), targets.len());
    debug_assert_eq!(dti.len(), grid.len());
    let n = grid.len();
    let big_l = params.cut.big_l;
    let total: f64 = rhos.iter().sum();
    if total < VACUUM_RHO {
        dti.fill(big_l);
        return Ok((0, 0.0));
    }

    // Kernel row over heading differences at this density's radius. The
    // family clamps radii outside its tabulated range.
    let delta_f = params.big_c / total.sqrt();
    let k_row: Vec<f64> = (0..n)
        .map(|m| family.eval(delta_f, 2.0 * (0.5 * m as f64 * grid.dtheta()).sin().abs()))
        .collect();

    for w in dti.iter_mut() {
        if !(*w > 0.0 && *w <= big_l) {
            *w = big_l;
        }
    }

    // Picard iteration with dynamic relaxation: the factor for each update
    // after the first comes from a secant estimate along the residual
    // (Irons-Tuck / Aitken), which collapses the slowly contracting mode the
    // plain damped iteration crawls along when the distributions are sharp.
    let inv_floor = 1.0 / big_l;
    let d_floor = params.cut.ell;
    let mut omega = opts.damping;
    let mut history: Vec<f64> = Vec::new();
    let mut mix = vec![0.0; n];
    let mut resid = vec![0.0; n];
    let mut resid_prev = vec![0.0; n];
    let mut last_res = f64::INFINITY;
    for it in 1..=opts.max_iter {
        mix.fill(0.0);
        for (b, &rho_b) in rhos.iter().enumerate() {
            if rho_b <= 0.0 {
                continue;
            }
            let m = heading_distribution(dti, targets[b], params, grid);
            for (mx, m_j) in mix.iter_mut().zip(m) {
                *mx += rho_b * m_j;
            }
        }
        for (j, r) in resid.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (m, mix_m) in mix.iter().enumerate() {
                acc += k_row[(j + n - m) % n] * mix_m;
            }
            let inv = (acc * grid.dtheta() / total).max(inv_floor);
            *r = 1.0 / inv - dti[j];
        }
        let res = resid.iter().fold(0.0, |a: f64, r| a.max(r.abs()));
        history.push(res);
        last_res = res;
        if res < opts.tol * big_l {
            for (w, r) in dti.iter_mut().zip(&resid) {
                *w += r;
            }
            return Ok((it as u32, res));
        }
        if it > 1 {
            let mut num = 0.0;
            let mut den = 0.0;
            for (r, rp) in resid.iter().zip(&resid_prev) {
                let dr = r - rp;
                num += rp * dr;
                den += dr * dr;
            }
            if den > 0.0 {
                omega = (-omega * num / den).clamp(1.0 / 64.0, 32.0);
            }
        }
        for (w, r) in dti.iter_mut().zip(&resid) {
            *w = (*w + omega * r).clamp(d_floor, big_l);
        }
        resid_prev.copy_from_slice(&resid);
    }
    let tail_start = history.len().saturating_sub(8);
    Err(Error::FixedPointStalled {
        iters: opts.max_iter,
        residual: last_res,
        history: history[tail_start..].to_vec(),
    })
}

fn validate_closure(params: &ModelParams, closure: &HydroClosure) -> Result<()> {
    if let HydroClosure::Family(family) = closure {
        if !family.cut.approx_eq(&params.cut) {
            return Err(Error::InvalidParams(format!(
                "kernel family cutoffs (ell={}, L={}, R={}) do not match the model (ell={}, L={}, R={})",
                family.cut.ell, family.cut.big_l, family.cut.r,
                params.cut.ell, params.cut.big_l, params.cut.r
            )));
        }
        if params.kappa > -1.0 + 1e-9 {
            return Err(Error::InvalidParams(format!(
                "the first-order closure assumes full-surround vision (cone cosine -1), model uses {}",
                params.kappa
            )));
        }
    }
    Ok(())
}

/// Solve the velocity law at every cell, warm-starting from the profiles of
/// the previous call and caching the converged ones in the state.
pub fn solve_velocities(
    state: &mut HydroState,
    params: &ModelParams,
    closure: &HydroClosure,
    opts: &FixedPointOptions,
) -> Result<HydroSolution> {
    validate_closure(params, closure)?;
    let nb = state.n_groups();
    let ncells = state.space.n_cells();
    let n = state.grid.len();
    let mut sol = HydroSolution {
        velocity: vec![Vec2::ZERO; nb * ncells],
        fp_iters: vec![0; ncells],
        fp_residual: vec![0.0; ncells],
    };
    let mut rhos = vec![0.0; nb];
    for cell in 0..ncells {
        let dti = &mut state.warm[cell * n..(cell + 1) * n];
        match closure {
            HydroClosure::Free => dti.fill(params.cut.big_l),
            HydroClosure::Family(family) => {
                for (b, r) in rhos.iter_mut().enumerate() {
                    *r = state.rho[b * ncells + cell];
                }
                let (iters, res) = fixed_point_dti(
                    &rhos,
                    &state.targets,
                    params,
                    &state.grid,
                    family,
                    dti,
                    opts,
                )?;
                sol.fp_iters[cell] = iters;
                sol.fp_residual[cell] = res;
            }
        }
        for (b, &target) in state.targets.iter().enumerate() {
            sol.velocity[b * ncells + cell] =
                equilibrium_velocity(dti, target, params, &state.grid);
        }
    }
    Ok(sol)
}

/// One explicit step: solve the velocity law, then advect each group's
/// density with donor-cell fluxes through the resulting mean velocities.
/// Returns the solution used, for diagnostics and output.
pub fn step_hydro(
    state: &mut HydroState,
    params: &ModelParams,
    closure: &HydroClosure,
    opts: &FixedPointOptions,
    dt: f64,
) -> Result<HydroSolution> {
    let sol = solve_velocities(state, params, closure, opts)?;
    advect_density(state, &sol.velocity, params.c, dt)?;
    Ok(sol)
}

/// Donor-cell transport of the group densities through given mean heading
/// vectors (`[group][cell]`, as produced by [`solve_velocities`]), conserving
/// mass exactly on the periodic grid.
pub fn advect_density(
    state: &mut HydroState,
    velocity: &[Vec2],
    c: f64,
    dt: f64,
) -> Result<()> {
    check_advective_cfl(c, dt, &state.space)?;
    let nb = state.n_groups();
    let (nx, ny) = (state.space.nx, state.space.ny);
    let ncells = state.space.n_cells();
    debug_assert_eq!(velocity.len(), nb * ncells);
    let (dx, dy) = (state.space.dx(), state.space.dy());
    for b in 0..nb {
        let base = b * ncells;
        let rho0 = state.rho[base..base + ncells].to_vec();
        let u = &velocity[base..base + ncells];
        let mut fluxx = vec![0.0; ncells];
        let mut fluxy = vec![0.0; ncells];
        for iy in 0..ny {
            for ix in 0..nx {
                let cell = iy * nx + ix;
                let right = iy * nx + (ix + 1) % nx;
                let top = ((iy + 1) % ny) * nx + ix;
                let vx = 0.5 * c * (u[cell].x + u[right].x);
                fluxx[cell] = if vx > 0.0 { vx * rho0[cell] } else { vx * rho0[right] };
                let vy = 0.5 * c * (u[cell].y + u[top].y);
                fluxy[cell] = if vy > 0.0 { vy * rho0[cell] } else { vy * rho0[top] };
            }
        }
        for iy in 0..ny {
            for ix in 0..nx {
                let cell = iy * nx + ix;
                let left = iy * nx + (ix + nx - 1) % nx;
                let bottom = ((iy + ny - 1) % ny) * nx + ix;
                state.rho[base + cell] = rho0[cell]
                    - dt / dx * (fluxx[cell] - fluxx[left])
                    - dt / dy * (fluxy[cell] - fluxy[bottom]);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::PeriodicBox;
    use crate::special::order_parameter;

    fn space_n(n: usize, extent: f64) -> SpatialGrid {
        SpatialGrid::new(n, n, PeriodicBox::new(extent, extent))
    }

    fn opposing_params() -> ModelParams {
        let mut params = ModelParams::defaults();
        params.kappa = -1.0;
        params.cut.big_l = 12.0;
        params
    }

    fn family_for(params: &ModelParams) -> IsoKernelFamily {
        IsoKernelFamily::build(&params.cut, 0.5, 8.0, 17, 65).unwrap()
    }

    #[test]
    fn free_closure_gives_the_free_walk_velocity() {
        let params = ModelParams::defaults();
        let targets = vec![Vec2::from_angle(0.7), Vec2::from_angle(-2.1)];
        let mut state = HydroState::new(space_n(3, 3.0), targets.clone(), 128);
        state.assign(|_, _| 1.0);
        let sol =
            solve_velocities(&mut state, &params, &HydroClosure::Free, &Default::default())
                .unwrap();
        let u_eq = order_parameter(params.free_walk_beta());
        for b in 0..2 {
            for cell in 0..state.space.n_cells() {
                let v = sol.velocity[b * state.space.n_cells() + cell];
                assert!((v - targets[b] * u_eq).norm() < 1e-12, "{v:?}");
            }
        }
        assert!(state.dti_profile(0, 0).iter().all(|&d| d == params.cut.big_l));
    }

    #[test]
    fn vacuum_solve_is_exactly_the_free_one() {
        let params = opposing_params();
        let family = family_for(&params);
        let grid = AngleGrid::new(128);
        let targets = [Vec2::new(1.0, 0.0), Vec2::new(-1.0, 0.0)];
        let mut dti = vec![0.0; 128];
        let (iters, res) = fixed_point_dti(
            &[1e-13, 1e-13],
            &targets,
            &params,
            &grid,
            &family,
            &mut dti,
            &Default::default(),
        )
        .unwrap();
        assert_eq!(iters, 0);
        assert_eq!(res, 0.0);
        assert!(dti.iter().all(|&d| d == params.cut.big_l));
        let v = equilibrium_velocity(&dti, targets[0], &params, &grid);
        let u_eq = order_parameter(params.free_walk_beta());
        assert!((v - targets[0] * u_eq).norm() < 1e-12);
    }

    /// Two equal counterflowing streams at one location: walking along the
    /// traffic axis (either way) meets only head-on or overtaking traffic,
    /// while any transverse heading raises the relative speed against both
    /// streams. The converged profile therefore has two lobes, peaked along
    /// the axis, everywhere below the ceiling, and the resulting alignment
    /// is sharper than free walking.
    #[test]
    fn opposing_streams_carve_a_two_lobe_profile() {
        let params = opposing_params();
        let family = family_for(&params);
        let n = 128;
        let grid = AngleGrid::new(n);
        let targets = [Vec2::new(1.0, 0.0), Vec2::new(-1.0, 0.0)];
        let mut dti = vec![0.0; n];
        let (iters, res) = fixed_point_dti(
            &[8.0, 8.0],
            &targets,
            &params,
            &grid,
            &family,
            &mut dti,
            &Default::default(),
        )
        .unwrap();
        assert!(iters >= 2, "engaged solve should iterate, got {iters}");
        assert!(res < 1e-8 * params.cut.big_l);

        let big_l = params.cut.big_l;
        let max_d = dti.iter().copied().fold(0.0, f64::max);
        assert!(max_d < big_l - 1.0, "profile should be engaged, max {max_d}");
        // Lobes along the axis, trough transverse.
        assert!((dti[0] - dti[n / 2]).abs() < 1e-9);
        assert!(dti[n / 4] < dti[0] - 0.5, "no trough: {} vs {}", dti[n / 4], dti[0]);
        for j in 0..n {
            assert!((dti[j] - dti[(n - j) % n]).abs() < 1e-9, "mirror broken at {j}");
            assert!((dti[j] - dti[(j + n / 2) % n]).abs() < 1e-9, "half-turn broken at {j}");
        }

        let v0 = equilibrium_velocity(&dti, targets[0], &params, &grid);
        let v1 = equilibrium_velocity(&dti, targets[1], &params, &grid);
        assert!((v0.x + v1.x).abs() < 1e-12 && v0.y.abs() < 1e-12 && v1.y.abs() < 1e-12);
        let u_eq = order_parameter(params.free_walk_beta());
        assert!(
            v0.x > u_eq + 1e-4,
            "counterflow should sharpen alignment: {} vs free {u_eq}",
            v0.x
        );
        assert!(v0.x < 1.0);
    }

    #[test]
    fn solve_is_equivariant_under_on_grid_rotations() {
        let params = opposing_params();
        let family = family_for(&params);
        let n = 128;
        let grid = AngleGrid::new(n);
        let shift = 16usize;
        let phi = shift as f64 * grid.dtheta();
        let base_targets = [Vec2::from_angle(0.0), Vec2::from_angle(2.3)];
        let rot_targets: Vec<Vec2> = base_targets
            .iter()
            .map(|t| Vec2::from_angle(t.angle() + phi))
            .collect();
        let rhos = [6.4, 11.2];
        let opts = FixedPointOptions::default();
        let mut d0 = vec![0.0; n];
        let mut d1 = vec![0.0; n];
        fixed_point_dti(&rhos, &base_targets, &params, &grid, &family, &mut d0, &opts)
            .unwrap();
        fixed_point_dti(&rhos, &rot_targets, &params, &grid, &family, &mut d1, &opts)
            .unwrap();
        for j in 0..n {
            let a = d0[j];
            let b = d1[(j + shift) % n];
            assert!((a - b).abs() < 1e-8, "rotation equivariance broken at {j}: {a} vs {b}");
        }
    }

    #[test]
    fn warm_start_certifies_in_one_iteration() {
        let params = opposing_params();
        let family = family_for(&params);
        let grid = AngleGrid::new(96);
        let targets = [Vec2::new(1.0, 0.0), Vec2::new(-1.0, 0.0)];
        let opts = FixedPointOptions::default();
        let mut dti = vec![0.0; 96];
        let (cold, _) =
            fixed_point_dti(&[8.0, 8.0], &targets, &params, &grid, &family, &mut dti, &opts)
                .unwrap();
        let (warm, _) =
            fixed_point_dti(&[8.0, 8.0], &targets, &params, &grid, &family, &mut dti, &opts)
                .unwrap();
        assert!(cold > 2, "cold solve converged suspiciously fast: {cold}");
        assert!(warm <= 2, "warm start did not certify quickly: {warm}");
    }

    #[test]
    fn stalled_iteration_reports_its_residual_history() {
        let params = opposing_params();
        let family = family_for(&params);
        let grid = AngleGrid::new(64);
        let targets = [Vec2::new(1.0, 0.0), Vec2::new(-1.0, 0.0)];
        let opts = FixedPointOptions { max_iter: 1, ..Default::default() };
        let mut dti = vec![0.0; 64];
        let err = fixed_point_dti(
            &[8.0, 8.0],
            &targets,
            &params,
            &grid,
            &family,
            &mut dti,
            &opts,
        )
        .unwrap_err();
        match err {
            Error::FixedPointStalled { iters, history, .. } => {
                assert_eq!(iters, 1);
                assert_eq!(history.len(), 1);
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn step_conserves_mass_and_keeps_density_finite() {
        let params = opposing_params();
        let family = family_for(&params);
        let mut state = HydroState::new(
            space_n(12, 6.0),
            vec![Vec2::new(1.0, 0.0), Vec2::new(-1.0, 0.0)],
            64,
        );
        state.assign(|b, x| {
            let s = (std::f64::consts::TAU * x.y / 6.0).sin();
            4.8 + 2.4 * s * if b == 0 { 1.0 } else { -1.0 } + 0.8 * x.x / 6.0
        });
        let mass0 = state.total_mass();
        let opts = FixedPointOptions::default();
        let mut max_iters = 0u32;
        for _ in 0..10 {
            let sol =
                step_hydro(&mut state, &params, &HydroClosure::Family(&family), &opts, 0.2)
                    .unwrap();
            max_iters = max_iters.max(sol.fp_iters.iter().copied().max().unwrap());
        }
        assert!((state.total_mass() - mass0).abs() < 1e-12 * mass0);
        assert!(state.rho.iter().all(|r| r.is_finite()));
        assert!(max_iters > 1, "closure never engaged");
    }

    #[test]
    fn uniform_free_state_is_steady_under_stepping() {
        let params = ModelParams::defaults();
        let mut state =
            HydroState::new(space_n(6, 6.0), vec![Vec2::from_angle(0.4)], 64);
        state.assign(|_, _| 0.7);
        for _ in 0..5 {
            step_hydro(&mut state, &params, &HydroClosure::Free, &Default::default(), 0.4)
                .unwrap();
        }
        assert!(state.rho.iter().all(|&r| (r - 0.7).abs() < 1e-13));
    }
}
