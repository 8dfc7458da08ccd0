//! Individual-based models: walkers steering by distance-to-interaction.
//!
//! Two time-stepping rules share the same avoidance logic:
//!
//! * **Discrete**: at every step of length `c dt`, each walker tests a fan of
//!   candidate headings inside its vision cone and picks the one whose
//!   achievable step (capped by the nearest encounter) lands closest to the
//!   ideal step toward its target. Deterministic, synchronous, coarse steps.
//! * **Continuous**: headings evolve by a stochastic relaxation
//!   `d theta = F dt + sqrt(2 d dt) dW`, where `F = -dPhi/dtheta` is the
//!   gradient of a heading potential built from the average inverse distance
//!   to interaction over the neighbors currently in the vision region.
//!
//! Neighborhood radii adapt to the local crowd density (`delta = C / sqrt(density)`),
//! so the continuous model bridges toward the mean-field description.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{binary_encounter, elementary_dti_inverse, EncounterInput};
use crate::grid::PeriodicBox;
use crate::vec2::Vec2;
use crate::ModelParams;

/// One walker: position, heading angle, and unit target direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Walker {
    pub pos: Vec2,
    pub theta: f64,
    pub target: Vec2,
}

impl Walker {
    pub fn heading(&self) -> Vec2 {
        Vec2::from_angle(self.theta)
    }
}

/// Parameters shared by both individual-based steppers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IbmParams {
    pub model: ModelParams,
    pub domain: PeriodicBox,
    /// Time step (s). The discrete stepper requires c dt > r.
    pub dt: f64,
    /// Number of candidate headings for the discrete argmin; rounded up to an
    /// odd count so the current heading is always a candidate.
    pub n_test: usize,
    /// Finite-difference half-step for the continuous heading force.
    pub dtheta_fd: f64,
    /// Radius of the local-density estimate that sets the adaptive
    /// neighborhood size.
    pub r0_density: f64,
    /// Cap on the adaptive neighborhood radius (defaults to the largest
    /// unambiguous distance in the periodic box).
    pub delta_max: f64,
}

impl IbmParams {
    pub fn new(model: ModelParams, domain: PeriodicBox, dt: f64) -> Self {
        IbmParams {
            model,
            domain,
            dt,
            n_test: 65,
            dtheta_fd: std::f64::consts::TAU / 256.0,
            r0_density: 2.0 * model.cut.big_l,
            delta_max: domain.max_radius(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.cut.validate()?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParams(format!("time step must be positive, got {}", self.dt)));
        }
        if !(self.model.c > 0.0) {
            return Err(Error::InvalidParams(format!("speed must be positive, got {}", self.model.c)));
        }
        if !(-1.0..1.0).contains(&self.model.kappa) {
            return Err(Error::InvalidParams(format!(
                "vision cosine must lie in [-1, 1), got {}",
                self.model.kappa
            )));
        }
        if self.n_test < 3 {
            return Err(Error::InvalidParams(format!(
                "need at least 3 candidate headings, got {}",
                self.n_test
            )));
        }
        if !(self.dtheta_fd > 0.0 && self.dtheta_fd < std::f64::consts::FRAC_PI_4) {
            return Err(Error::InvalidParams(format!(
                "force finite-difference step must lie in (0, pi/4), got {}",
                self.dtheta_fd
            )));
        }
        if !(self.r0_density > 0.0 && self.delta_max > 0.0) {
            return Err(Error::InvalidParams(
                "density radius and neighborhood cap must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Extra constraint for the discrete stepper: one step must clear the
    /// interaction radius, otherwise walkers can tunnel into permanent overlap.
    pub fn validate_discrete(&self) -> Result<()> {
        self.validate()?;
        let step = self.model.c * self.dt;
        if step <= self.model.cut.r {
            return Err(Error::CflViolation {
                constraint: format!(
                    "discrete step c dt = {step} must exceed the interaction radius r = {}",
                    self.model.cut.r
                ),
            });
        }
        Ok(())
    }
}

/// One independent random stream per walker, so results do not depend on how
/// work is scheduled across threads and ensembles can be grown without
/// reshuffling existing members.
pub struct CrowdRng {
    streams: Vec<ChaCha8Rng>,
}

impl CrowdRng {
    pub fn new(seed: u64, n: usize) -> Self {
        let streams = (0..n)
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(i as u64);
                r
            })
            .collect();
        CrowdRng { streams }
    }

    pub fn len(&self) -> usize {
        self.streams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }

    /// Standard normal draw from walker i's stream.
    pub fn normal(&mut self, i: usize) -> f64 {
        StandardNormal.sample(&mut self.streams[i])
    }
}

/// Uniform-bin spatial index over the periodic box for neighbor candidate
/// queries. Bins are at least as large as the requested cell size, so a
/// radius-`cell` query never needs more than the 3x3 block.
pub struct NeighborGrid {
    domain: PeriodicBox,
    nx: usize,
    ny: usize,
    cell_x: f64,
    cell_y: f64,
    bins: Vec<Vec<usize>>,
}

impl NeighborGrid {
    pub fn build(domain: &PeriodicBox, cell: f64, positions: &[Vec2]) -> Self {
        let nx = ((domain.lx / cell).floor() as usize).max(1);
        let ny = ((domain.ly / cell).floor() as usize).max(1);
        let cell_x = domain.lx / nx as f64;
        let cell_y = domain.ly / ny as f64;
        let mut bins = vec![Vec::new(); nx * ny];
        for (i, &p) in positions.iter().enumerate() {
            let w = domain.wrap(p);
            let ix = ((w.x / cell_x) as usize).min(nx - 1);
            let iy = ((w.y / cell_y) as usize).min(ny - 1);
            bins[iy * nx + ix].push(i);
        }
        NeighborGrid { domain: *domain, nx, ny, cell_x, cell_y, bins }
    }

    /// Visit every index whose bin intersects the disk of `radius` around
    /// `center`. Callers must still apply the exact distance test.
    pub fn visit_candidates(&self, center: Vec2, radius: f64, mut f: impl FnMut(usize)) {
        let w = self.domain.wrap(center);
        let ix = ((w.x / self.cell_x) as usize).min(self.nx - 1);
        let iy = ((w.y / self.cell_y) as usize).min(self.ny - 1);
        let kx = (radius / self.cell_x).ceil() as usize;
        let ky = (radius / self.cell_y).ceil() as usize;
        let (span_x, start_x) = if 2 * kx + 1 >= self.nx {
            (self.nx, 0)
        } else {
            (2 * kx + 1, (ix + self.nx - kx) % self.nx)
        };
        let (span_y, start_y) = if 2 * ky + 1 >= self.ny {
            (self.ny, 0)
        } else {
            (2 * ky + 1, (iy + self.ny - ky) % self.ny)
        };
        for dy in 0..span_y {
            let cy = (start_y + dy) % self.ny;
            for dx in 0..span_x {
                let cx = (start_x + dx) % self.nx;
                for &j in &self.bins[cy * self.nx + cx] {
                    f(j);
                }
            }
        }
    }
}

/// Candidate heading offsets for the discrete argmin, enumerated center-out
/// (0, +h, -h, +2h, ...). With a strict-improvement argmin this realizes the
/// tie-break "smallest angular deviation first", and a mirrored configuration
/// with a unique minimizer picks the mirrored heading.
fn candidate_offsets(n_test: usize, alpha: f64) -> Vec<f64> {
    let m = (n_test.max(3) - 1).div_ceil(2);
    let h = alpha / m as f64;
    let mut out = Vec::with_capacity(2 * m + 1);
    out.push(0.0);
    for k in 1..=m {
        out.push(k as f64 * h);
        out.push(-(k as f64) * h);
    }
    out
}

/// Synchronous discrete update: advance all positions one step, then re-aim
/// every walker by the argmin rule. Deterministic; permutation-equivariant.
pub fn step_discrete(walkers: &mut [Walker], p: &IbmParams) {
    let c = p.model.c;
    let step_len = c * p.dt;
    let kappa = p.model.kappa;
    let alpha = kappa.clamp(-1.0, 1.0).acos();
    let offsets = candidate_offsets(p.n_test, alpha);

    for w in walkers.iter_mut() {
        w.pos = p.domain.wrap(w.pos + (c * p.dt) * Vec2::from_angle(w.theta));
    }
    let snapshot: Vec<Walker> = walkers.to_vec();

    let new_thetas: Vec<f64> = (0..snapshot.len())
        .into_par_iter()
        .map(|i| {
            let wi = snapshot[i];
            let ui = Vec2::from_angle(wi.theta);
            // Vision-cone partners; the discrete rule has no range limit.
            let mut partners: Vec<(Vec2, Vec2)> = Vec::new();
            for (j, wj) in snapshot.iter().enumerate() {
                if j == i {
                    continue;
                }
                let off = p.domain.min_image(wj.pos - wi.pos);
                let dist = off.norm();
                if dist > 0.0 && off.dot(ui) >= kappa * dist {
                    partners.push((off, c * Vec2::from_angle(wj.theta)));
                }
            }
            let mut best_offset = 0.0;
            let mut best_value = f64::INFINITY;
            for &off_angle in &offsets {
                let w_unit = Vec2::from_angle(wi.theta + off_angle);
                // Walkable distance this step: capped by the nearest
                // encounter among cone partners, and by the step itself.
                let mut reach = step_len;
                for &(xi, vj) in &partners {
                    let enc = binary_encounter(
                        &EncounterInput { x_i: Vec2::ZERO, v_i: c * w_unit, x_j: xi, v_j: vj },
                        p.model.cut.r,
                    );
                    if enc.dti < reach {
                        reach = enc.dti;
                    }
                }
                let value = (reach * w_unit - step_len * wi.target).norm2();
                if value < best_value {
                    best_value = value;
                    best_offset = off_angle;
                }
            }
            wi.theta + best_offset
        })
        .collect();

    for (w, th) in walkers.iter_mut().zip(new_thetas) {
        w.theta = th;
    }
}

/// Adaptive neighborhood radius per walker: C / sqrt(local density), with the
/// density estimated by counting companions within `r0_density`. Isolated
/// walkers get the cap (they see nobody regardless).
pub fn adaptive_radii(walkers: &[Walker], p: &IbmParams) -> Vec<f64> {
    let n = walkers.len();
    if p.model.big_c == 0.0 {
        return vec![0.0; n];
    }
    let positions: Vec<Vec2> = walkers.iter().map(|w| w.pos).collect();
    let grid = NeighborGrid::build(&p.domain, p.r0_density, &positions);
    let r0 = p.r0_density;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut count = 0usize;
            grid.visit_candidates(positions[i], r0, |j| {
                if j != i && p.domain.min_image(positions[j] - positions[i]).norm() <= r0 {
                    count += 1;
                }
            });
            if count == 0 {
                p.delta_max
            } else {
                let density = count as f64 / (std::f64::consts::PI * r0 * r0);
                (p.model.big_c / density.sqrt()).min(p.delta_max)
            }
        })
        .collect()
}

/// Heading force -dPhi/dtheta for every walker, by central finite difference
/// of the avoidance potential
/// Phi(w) = (k/2) |D(w) w - L a|^2,
/// 1/D(w) = max(mean of elementary inverse DTI over cone members, 1/L).
/// Cone members that pose no constraint still count in the mean (their
/// inverse is 0), so crowd size dilutes single encounters.
pub fn heading_forces(walkers: &[Walker], p: &IbmParams) -> Vec<f64> {
    let n = walkers.len();
    let cut = p.model.cut;
    let big_l = cut.big_l;
    let k = p.model.k;
    let kappa = p.model.kappa;
    let radii = adaptive_radii(walkers, p);
    let positions: Vec<Vec2> = walkers.iter().map(|w| w.pos).collect();
    let interacting = p.model.big_c > 0.0 && n > 1;
    let grid = interacting.then(|| NeighborGrid::build(&p.domain, p.r0_density, &positions));

    (0..n)
        .into_par_iter()
        .map(|i| {
            let wi = walkers[i];
            let ui = Vec2::from_angle(wi.theta);
            let mut members: Vec<(Vec2, Vec2)> = Vec::new();
            if let Some(grid) = &grid {
                let delta = radii[i];
                grid.visit_candidates(wi.pos, delta, |j| {
                    if j == i {
                        return;
                    }
                    let off = p.domain.min_image(positions[j] - wi.pos);
                    let dist = off.norm();
                    if dist > 0.0 && dist <= delta && off.dot(ui) >= kappa * dist {
                        members.push((off, Vec2::from_angle(walkers[j].theta)));
                    }
                });
            }
            let phi = |w_theta: f64| {
                let w_unit = Vec2::from_angle(w_theta);
                let inv = if members.is_empty() {
                    1.0 / big_l
                } else {
                    let mut acc = 0.0;
                    for &(off, uj) in &members {
                        acc += elementary_dti_inverse(off, uj - w_unit, &cut);
                    }
                    (acc / members.len() as f64).max(1.0 / big_l)
                };
                let d = 1.0 / inv;
                0.5 * k * (d * w_unit - big_l * wi.target).norm2()
            };
            let fd = p.dtheta_fd;
            -(phi(wi.theta + fd) - phi(wi.theta - fd)) / (2.0 * fd)
        })
        .collect()
}

/// Euler-Maruyama update of the continuous model: headings drift along the
/// avoidance force and diffuse with intensity d; positions advance along the
/// pre-update headings. Errors if any deterministic heading increment reaches
/// pi/4, which signals an unresolved force (too large dt for the stiffness).
pub fn step_continuous(walkers: &mut [Walker], rng: &mut CrowdRng, p: &IbmParams) -> Result<()> {
    assert_eq!(rng.len(), walkers.len(), "one random stream per walker");
    let forces = heading_forces(walkers, p);
    for (i, f) in forces.iter().enumerate() {
        let dth = f * p.dt;
        if !dth.is_finite() || dth.abs() >= std::f64::consts::FRAC_PI_4 {
            return Err(Error::HeadingStepTooLarge { index: i, value: dth });
        }
    }
    let sigma = (2.0 * p.model.d * p.dt).sqrt();
    let step = p.model.c * p.dt;
    for (i, w) in walkers.iter_mut().enumerate() {
        let u = Vec2::from_angle(w.theta);
        w.pos = p.domain.wrap(w.pos + step * u);
        w.theta += forces[i] * p.dt + sigma * rng.normal(i);
    }
    Ok(())
}

/// Circular mean heading of a walker set (the ensemble order parameter).
pub fn mean_heading(walkers: &[Walker]) -> Vec2 {
    if walkers.is_empty() {
        return Vec2::ZERO;
    }
    let sum = walkers.iter().fold(Vec2::ZERO, |acc, w| acc + w.heading());
    sum / walkers.len() as f64
}
