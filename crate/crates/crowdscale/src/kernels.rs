//! Interaction kernels: the average of the elementary inverse interaction
//! distance over a circular-sector neighborhood (vision cone), as a function
//! of the relative velocity between a test heading and a neighbor heading.
//!
//! For a cone of half-angle alpha = arccos(kappa) and radius delta around the
//! walker's heading, the average over uniformly distributed neighbor offsets
//! has a closed-form radial integral, so only a one-dimensional angular
//! quadrature remains. The integrand is piecewise analytic with known kink
//! locations (capture-radius edge, saturation crossover, cone clipping), and
//! the quadrature splits at every kink and grades panels toward them, making
//! direct evaluation accurate to near machine precision.
//!
//! Tables sample the kernel on uniform (mu, s) grids - mu the cosine between
//! the cone axis and the relative velocity, s = |relative velocity| in [0, 2]
//! for unit-speed walkers - and interpolate bilinearly. A one-parameter family
//! of isotropic tables over a logarithmic radius grid supports closures whose
//! neighborhood radius depends on the local density. Von Mises-Fisher-averaged
//! variants pre-integrate the kernel against a heading distribution so fluid
//! closures can look up forces instead of convolving per cell.

use std::io::{Read, Write as IoWrite};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{elementary_dti_inverse, CutoffParams};
use crate::grid::AngleGrid;
use crate::special::{order_parameter, vmf_density, VmfParams};
use crate::vec2::Vec2;

const GL4_NODES: [f64; 4] = [
    -0.861_136_311_594_052_6,
    -0.339_981_043_584_856_3,
    0.339_981_043_584_856_3,
    0.861_136_311_594_052_6,
];
const GL4_WEIGHTS: [f64; 4] = [
    0.347_854_845_137_453_85,
    0.652_145_154_862_546_2,
    0.652_145_154_862_546_2,
    0.347_854_845_137_453_85,
];

/// Radial integral of the elementary inverse interaction distance along the
/// ray at angle `psi` measured from the direction opposite the relative
/// velocity (so approach corresponds to psi in (-pi/2, pi/2)):
/// int_0^rho_max min(s / (rho cos psi), 1/ell) rho drho, with the ray cut at
/// the capture-radius limit rho |sin psi| <= r.
fn radial_profile(psi: f64, s: f64, delta: f64, cut: &CutoffParams) -> f64 {
    let c = psi.cos();
    let b = psi.sin().abs();
    let rho_max = if b * delta > cut.r { cut.r / b } else { delta };
    // Below rho_cap the inverse distance saturates at 1/ell.
    let rho_cap = cut.ell * s / c; // c -> 0 gives +inf; handled by the min/branch
    let reach = rho_cap.min(rho_max);
    let saturated = reach * reach / (2.0 * cut.ell);
    let over = rho_max - rho_cap;
    if over > 0.0 {
        saturated + (s / c) * over
    } else {
        saturated
    }
}

/// Gauss-Legendre panels over [lo, hi], split at the integrand's kinks and
/// graded geometrically toward every breakpoint (the saturation crossover has
/// a boundary layer of width O(s) that uniform panels would miss).
fn piece_integral(lo: f64, hi: f64, s: f64, delta: f64, cut: &CutoffParams) -> f64 {
    if hi - lo <= 1e-15 {
        return 0.0;
    }
    let mut knots: Vec<f64> = vec![lo, hi, 0.0];
    if cut.r < delta {
        let k = (cut.r / delta).asin();
        knots.push(k);
        knots.push(-k);
    }
    let cap_at_rim = cut.ell * s / delta;
    if cap_at_rim < 1.0 {
        let k = cap_at_rim.acos();
        knots.push(k);
        knots.push(-k);
    }
    if s > 0.0 {
        let k = (cut.r / (cut.ell * s)).atan();
        knots.push(k);
        knots.push(-k);
    }
    knots.retain(|&k| k >= lo && k <= hi);
    knots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    knots.dedup_by(|a, b| (*a - *b).abs() < 1e-14);

    const GRADE: [f64; 9] = [0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 0.05, 0.15, 0.3];
    let mut total = 0.0;
    for pair in knots.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let len = b - a;
        if len <= 1e-14 {
            continue;
        }
        let mut brk: Vec<f64> = Vec::with_capacity(2 * GRADE.len() + 1);
        for &f in &GRADE {
            brk.push(a + len * f);
            brk.push(b - len * f);
        }
        brk.push(a + 0.5 * len);
        brk.sort_by(|x, y| x.partial_cmp(y).unwrap());
        brk.dedup_by(|x, y| (*x - *y).abs() < 1e-16);
        for panel in brk.windows(2) {
            let mid = 0.5 * (panel[0] + panel[1]);
            let half = 0.5 * (panel[1] - panel[0]);
            if half <= 0.0 {
                continue;
            }
            let mut acc = 0.0;
            for (x, w) in GL4_NODES.iter().zip(GL4_WEIGHTS) {
                acc += w * radial_profile(mid + half * x, s, delta, cut);
            }
            total += acc * half;
        }
    }
    total
}

/// Average inverse interaction distance over a vision cone of half-angle
/// arccos(kappa) and radius `delta`, for relative speed `s` whose direction
/// makes angle arccos(mu) with the cone axis. Walkers move at unit speed, so
/// s in [0, 2]. Zero relative velocity never constrains, giving 0 (the
/// encoding of "no interaction" for inverse distances).
pub fn kernel_value(kappa: f64, delta: f64, mu: f64, s: f64, cut: &CutoffParams) -> f64 {
    assert!(delta > 0.0, "cone radius must be positive, got {delta}");
    assert!(s >= 0.0, "relative speed must be nonnegative, got {s}");
    if s == 0.0 {
        return 0.0;
    }
    let alpha = kappa.clamp(-1.0, 1.0).acos();
    if alpha <= 0.0 {
        return 0.0;
    }
    // Work in the frame of the relative velocity: psi is the offset angle
    // measured from -rel, so the approach region is |psi| < pi/2 and the cone
    // axis sits at eta_p = pi - arccos(mu) from -rel.
    let eta_p = std::f64::consts::PI - mu.clamp(-1.0, 1.0).acos();
    let half_pi = std::f64::consts::FRAC_PI_2;
    let two_pi = std::f64::consts::TAU;
    let mut total = 0.0;
    // The cone arc enters the approach window in at most two segments: the
    // direct one and the one wrapping past +pi.
    let p1 = ((-alpha - eta_p).max(-half_pi), (alpha - eta_p).min(half_pi));
    let p2 = ((two_pi - alpha - eta_p).max(-half_pi), half_pi);
    for (lo, hi) in [p1, p2] {
        if hi > lo {
            total += piece_integral(lo, hi, s, delta, cut);
        }
    }
    total / (alpha * delta * delta)
}

/// Monte Carlo estimate of the same cone average, sampling offsets uniformly
/// by area and scoring the elementary inverse interaction distance directly.
/// Returns (mean, standard error). Shares no code with the quadrature path
/// beyond the elementary function itself, so it serves as an oracle.
pub fn kernel_mc_estimate(
    kappa: f64,
    delta: f64,
    mu: f64,
    s: f64,
    cut: &CutoffParams,
    n_samples: usize,
    seed: u64,
) -> (f64, f64) {
    assert!(n_samples >= 2);
    let alpha = kappa.clamp(-1.0, 1.0).acos();
    let eta = mu.clamp(-1.0, 1.0).acos();
    let rel = Vec2::new(s, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n_samples {
        let chi = eta + rng.gen_range(-alpha..=alpha);
        let rho = delta * rng.gen::<f64>().sqrt();
        let xi = rho * Vec2::from_angle(chi);
        let v = elementary_dti_inverse(xi, rel, cut);
        sum += v;
        sum_sq += v * v;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    (mean, (var / n).sqrt())
}

/// Metadata stored alongside a binary kernel table, as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelTableMeta {
    pub kind: String,
    pub kappa: f64,
    pub delta: f64,
    pub ell: f64,
    pub big_l: f64,
    pub r: f64,
    pub n_mu: usize,
    pub n_s: usize,
}

const KTAB_MAGIC: &[u8; 5] = b"KTAB1";

fn write_table(
    path: &Path,
    kappa: f64,
    delta: f64,
    cut: &CutoffParams,
    n_mu: usize,
    n_s: usize,
    values: &[f64],
) -> Result<()> {
    let mut buf = Vec::with_capacity(5 + 8 * 5 + 4 * 2 + 8 * values.len());
    buf.extend_from_slice(KTAB_MAGIC);
    for v in [kappa, delta, cut.ell, cut.big_l, cut.r] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(n_mu as u32).to_le_bytes());
    buf.extend_from_slice(&(n_s as u32).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    let meta = KernelTableMeta {
        kind: if n_mu == 1 { "iso".into() } else { "cone".into() },
        kappa,
        delta,
        ell: cut.ell,
        big_l: cut.big_l,
        r: cut.r,
        n_mu,
        n_s,
    };
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Config(format!("kernel table metadata: {e}")))?;
    std::fs::write(path.with_extension("json"), json)?;
    Ok(())
}

struct RawTable {
    kappa: f64,
    delta: f64,
    cut: CutoffParams,
    n_mu: usize,
    n_s: usize,
    values: Vec<f64>,
}

fn read_table(path: &Path) -> Result<RawTable> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fail = |msg: &str| Error::Config(format!("{}: {msg}", path.display()));
    if bytes.len() < 5 + 40 + 8 || &bytes[..5] != KTAB_MAGIC {
        return Err(fail("not a kernel table (bad magic or truncated header)"));
    }
    let f = |i: usize| f64::from_le_bytes(bytes[5 + 8 * i..13 + 8 * i].try_into().unwrap());
    let (kappa, delta) = (f(0), f(1));
    let cut = CutoffParams { ell: f(2), big_l: f(3), r: f(4) };
    let n_mu = u32::from_le_bytes(bytes[45..49].try_into().unwrap()) as usize;
    let n_s = u32::from_le_bytes(bytes[49..53].try_into().unwrap()) as usize;
    if n_mu == 0 || n_s < 2 || n_mu.saturating_mul(n_s) > 100_000_000 {
        return Err(fail("implausible grid dimensions"));
    }
    let need = 53 + 8 * n_mu * n_s;
    if bytes.len() != need {
        return Err(fail("value payload length does not match header"));
    }
    let values = bytes[53..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(RawTable { kappa, delta, cut, n_mu, n_s, values })
}

/// Kernel sampled on a uniform (mu, s) grid with bilinear interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelTable {
    pub kappa: f64,
    pub delta: f64,
    pub cut: CutoffParams,
    n_mu: usize,
    n_s: usize,
    values: Vec<f64>,
}

impl KernelTable {
    pub fn build(
        kappa: f64,
        delta: f64,
        cut: &CutoffParams,
        n_mu: usize,
        n_s: usize,
    ) -> Result<Self> {
        cut.validate()?;
        if !(-1.0..1.0).contains(&kappa) {
            return Err(Error::InvalidParams(format!(
                "cone cosine must lie in [-1, 1), got {kappa}"
            )));
        }
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::InvalidParams(format!("cone radius must be positive, got {delta}")));
        }
        if n_mu < 2 || n_s < 2 {
            return Err(Error::InvalidParams(format!(
                "kernel grid needs at least 2 points per axis, got {n_mu} x {n_s}"
            )));
        }
        let values: Vec<f64> = (0..n_mu * n_s)
            .into_par_iter()
            .map(|idx| {
                let (i, j) = (idx / n_s, idx % n_s);
                let mu = -1.0 + 2.0 * i as f64 / (n_mu - 1) as f64;
                let s = 2.0 * j as f64 / (n_s - 1) as f64;
                kernel_value(kappa, delta, mu, s, cut)
            })
            .collect();
        Ok(Self { kappa, delta, cut: *cut, n_mu, n_s, values })
    }

    pub fn n_mu(&self) -> usize {
        self.n_mu
    }

    pub fn n_s(&self) -> usize {
        self.n_s
    }

    /// Bilinear lookup; `mu` is clamped to [-1, 1] (it is a cosine, so any
    /// excursion is roundoff), `s` beyond 2 is an error since unit-speed
    /// headings cannot produce it.
    pub fn eval(&self, mu: f64, s: f64) -> Result<f64> {
        if !(0.0..=2.0 + 1e-9).contains(&s) {
            return Err(Error::KernelRange {
                what: format!("relative speed {s} outside [0, 2]"),
            });
        }
        if s == 0.0 {
            return Ok(0.0);
        }
        let s = s.min(2.0);
        let mu = mu.clamp(-1.0, 1.0);
        let fx = (mu + 1.0) * 0.5 * (self.n_mu - 1) as f64;
        let fy = s * 0.5 * (self.n_s - 1) as f64;
        let i = (fx as usize).min(self.n_mu - 2);
        let j = (fy as usize).min(self.n_s - 2);
        let (tx, ty) = (fx - i as f64, fy - j as f64);
        let at = |ii: usize, jj: usize| self.values[ii * self.n_s + jj];
        let v = (1.0 - tx) * ((1.0 - ty) * at(i, j) + ty * at(i, j + 1))
            + tx * ((1.0 - ty) * at(i + 1, j) + ty * at(i + 1, j + 1));
        Ok(v.clamp(0.0, 1.0 / self.cut.ell))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_table(path, self.kappa, self.delta, &self.cut, self.n_mu, self.n_s, &self.values)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = read_table(path)?;
        if raw.n_mu == 1 {
            return Err(Error::Config(format!(
                "{}: stores an isotropic table; load it as one",
                path.display()
            )));
        }
        raw.cut.validate()?;
        Ok(Self {
            kappa: raw.kappa,
            delta: raw.delta,
            cut: raw.cut,
            n_mu: raw.n_mu,
            n_s: raw.n_s,
            values: raw.values,
        })
    }

    pub fn meta(&self) -> KernelTableMeta {
        KernelTableMeta {
            kind: "cone".into(),
            kappa: self.kappa,
            delta: self.delta,
            ell: self.cut.ell,
            big_l: self.cut.big_l,
            r: self.cut.r,
            n_mu: self.n_mu,
            n_s: self.n_s,
        }
    }
}

/// Isotropic (full-disk neighborhood) kernel: one-dimensional in s.
#[derive(Debug, Clone, PartialEq)]
pub struct IsoKernelTable {
    pub delta: f64,
    pub cut: CutoffParams,
    n_s: usize,
    values: Vec<f64>,
}

impl IsoKernelTable {
    pub fn build(delta: f64, cut: &CutoffParams, n_s: usize) -> Result<Self> {
        cut.validate()?;
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::InvalidParams(format!("disk radius must be positive, got {delta}")));
        }
        if n_s < 2 {
            return Err(Error::InvalidParams(format!(
                "kernel grid needs at least 2 points, got {n_s}"
            )));
        }
        let values: Vec<f64> = (0..n_s)
            .into_par_iter()
            .map(|j| {
                let s = 2.0 * j as f64 / (n_s - 1) as f64;
                kernel_value(-1.0, delta, -1.0, s, cut)
            })
            .collect();
        Ok(Self { delta, cut: *cut, n_s, values })
    }

    pub fn n_s(&self) -> usize {
        self.n_s
    }

    pub fn eval(&self, s: f64) -> Result<f64> {
        if !(0.0..=2.0 + 1e-9).contains(&s) {
            return Err(Error::KernelRange {
                what: format!("relative speed {s} outside [0, 2]"),
            });
        }
        if s == 0.0 {
            return Ok(0.0);
        }
        let fy = s.min(2.0) * 0.5 * (self.n_s - 1) as f64;
        let j = (fy as usize).min(self.n_s - 2);
        let t = fy - j as f64;
        let v = (1.0 - t) * self.values[j] + t * self.values[j + 1];
        Ok(v.clamp(0.0, 1.0 / self.cut.ell))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_table(path, -1.0, self.delta, &self.cut, 1, self.n_s, &self.values)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = read_table(path)?;
        if raw.n_mu != 1 {
            return Err(Error::Config(format!(
                "{}: stores a cone table; load it as one",
                path.display()
            )));
        }
        raw.cut.validate()?;
        Ok(Self { delta: raw.delta, cut: raw.cut, n_s: raw.n_s, values: raw.values })
    }

    pub fn meta(&self) -> KernelTableMeta {
        KernelTableMeta {
            kind: "iso".into(),
            kappa: -1.0,
            delta: self.delta,
            ell: self.cut.ell,
            big_l: self.cut.big_l,
            r: self.cut.r,
            n_mu: 1,
            n_s: self.n_s,
        }
    }
}

/// Family of isotropic kernels over a logarithmic radius grid, interpolated
/// linearly in ln(delta). Used by closures whose neighborhood radius varies
/// with local density, where building one table per radius is impossible.
#[derive(Debug, Clone, PartialEq)]
pub struct IsoKernelFamily {
    pub cut: CutoffParams,
    deltas: Vec<f64>,
    tables: Vec<IsoKernelTable>,
}

impl IsoKernelFamily {
    pub fn build(
        cut: &CutoffParams,
        delta_min: f64,
        delta_max: f64,
        n_delta: usize,
        n_s: usize,
    ) -> Result<Self> {
        if !(delta_min > 0.0 && delta_max > delta_min) {
            return Err(Error::InvalidParams(format!(
                "radius range must satisfy 0 < min < max, got [{delta_min}, {delta_max}]"
            )));
        }
        if n_delta < 2 {
            return Err(Error::InvalidParams(format!(
                "radius family needs at least 2 members, got {n_delta}"
            )));
        }
        let log_lo = delta_min.ln();
        let log_hi = delta_max.ln();
        let deltas: Vec<f64> = (0..n_delta)
            .map(|i| (log_lo + (log_hi - log_lo) * i as f64 / (n_delta - 1) as f64).exp())
            .collect();
        let tables = deltas
            .iter()
            .map(|&d| IsoKernelTable::build(d, cut, n_s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cut: *cut, deltas, tables })
    }

    pub fn delta_range(&self) -> (f64, f64) {
        (self.deltas[0], *self.deltas.last().unwrap())
    }

    pub fn in_range(&self, delta: f64) -> bool {
        delta >= self.deltas[0] && delta <= *self.deltas.last().unwrap()
    }

    /// Kernel at arbitrary radius, with `delta` clamped to the family range
    /// (callers can count clamps via [`IsoKernelFamily::in_range`]) and `s`
    /// clamped to [0, 2].
    pub fn eval(&self, delta: f64, s: f64) -> f64 {
        let s = s.clamp(0.0, 2.0);
        if s == 0.0 {
            return 0.0;
        }
        let d = delta.clamp(self.deltas[0], *self.deltas.last().unwrap());
        let pos = self.deltas.partition_point(|&x| x <= d).min(self.deltas.len() - 1);
        let i = pos.saturating_sub(1).min(self.deltas.len() - 2);
        let (d0, d1) = (self.deltas[i], self.deltas[i + 1]);
        let t = ((d / d0).ln() / (d1 / d0).ln()).clamp(0.0, 1.0);
        let v0 = self.tables[i].eval(s).expect("s clamped to range");
        let v1 = self.tables[i + 1].eval(s).expect("s clamped to range");
        (1.0 - t) * v0 + t * v1
    }
}

fn validate_betas(betas: &[f64]) -> Result<()> {
    if betas.len() < 2 {
        return Err(Error::InvalidParams(format!(
            "concentration grid needs at least 2 points, got {}",
            betas.len()
        )));
    }
    if betas[0] < 0.0 || betas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParams(
            "concentration grid must be nonnegative and strictly increasing".into(),
        ));
    }
    Ok(())
}

fn speed_interp_index(u_grid: &[f64], u: f64) -> (usize, f64) {
    let u = u.clamp(u_grid[0], *u_grid.last().unwrap());
    let pos = u_grid.partition_point(|&x| x <= u).min(u_grid.len() - 1);
    let i = pos.saturating_sub(1).min(u_grid.len() - 2);
    let span = u_grid[i + 1] - u_grid[i];
    let t = if span > 0.0 { ((u - u_grid[i]) / span).clamp(0.0, 1.0) } else { 0.0 };
    (i, t)
}

/// Isotropic kernel pre-averaged against a von Mises-Fisher heading
/// distribution: value(psi, |U|) = int kernel(|v - w|) M(v) dv, where psi is
/// the angle from the test heading w to the distribution's mean direction
/// and the speed axis is the mean resultant length |U| = c1(beta).
#[derive(Debug, Clone, PartialEq)]
pub struct VmfKernelTable {
    pub delta: f64,
    pub cut: CutoffParams,
    psis: Vec<f64>,
    betas: Vec<f64>,
    u_grid: Vec<f64>,
    values: Vec<f64>, // [psi][beta]
}

impl VmfKernelTable {
    pub fn build(
        base: &IsoKernelTable,
        betas: &[f64],
        n_psi: usize,
        n_quad: usize,
    ) -> Result<Self> {
        validate_betas(betas)?;
        if n_psi < 2 {
            return Err(Error::InvalidParams(format!(
                "angle grid needs at least 2 points, got {n_psi}"
            )));
        }
        let grid = AngleGrid::new(n_quad);
        let w = Vec2::new(1.0, 0.0);
        let speeds: Vec<f64> = (0..grid.len()).map(|j| (grid.unit(j) - w).norm()).collect();
        let kernel_row: Vec<f64> = speeds
            .iter()
            .map(|&s| base.eval(s))
            .collect::<Result<Vec<_>>>()?;
        let psis: Vec<f64> = (0..n_psi)
            .map(|i| std::f64::consts::PI * i as f64 / (n_psi - 1) as f64)
            .collect();
        let (grid_ref, row_ref) = (&grid, &kernel_row);
        let values: Vec<f64> = psis
            .par_iter()
            .flat_map_iter(|&psi| {
                let omega = Vec2::from_angle(psi);
                betas.iter().map(move |&beta| {
                    let p = VmfParams { omega, beta };
                    let mut acc = 0.0;
                    for j in 0..grid_ref.len() {
                        acc += vmf_density(grid_ref.unit(j), &p) * row_ref[j];
                    }
                    acc * grid_ref.dtheta()
                })
            })
            .collect();
        let u_grid = betas.iter().map(|&b| order_parameter(b)).collect();
        Ok(Self { delta: base.delta, cut: base.cut, psis, betas: betas.to_vec(), u_grid, values, })
    }

    pub fn u_max(&self) -> f64 {
        *self.u_grid.last().unwrap()
    }

    pub fn in_range(&self, u: f64) -> bool {
        u >= self.u_grid[0] && u <= self.u_max()
    }

    /// Lookup at signed angle `psi` (folded by evenness) and mean speed `u`
    /// (clamped to the tabulated range).
    pub fn eval(&self, psi: f64, u: f64) -> f64 {
        let pi = std::f64::consts::PI;
        let folded = {
            let w = psi.rem_euclid(std::f64::consts::TAU);
            if w > pi {
                std::f64::consts::TAU - w
            } else {
                w
            }
        };
        let n_psi = self.psis.len();
        let fx = folded / pi * (n_psi - 1) as f64;
        let i = (fx as usize).min(n_psi - 2);
        let tx = fx - i as f64;
        let (j, ty) = speed_interp_index(&self.u_grid, u);
        let n_beta = self.betas.len();
        let at = |ii: usize, jj: usize| self.values[ii * n_beta + jj];
        (1.0 - tx) * ((1.0 - ty) * at(i, j) + ty * at(i, j + 1))
            + tx * ((1.0 - ty) * at(i + 1, j) + ty * at(i + 1, j + 1))
    }
}

/// Cone kernel pre-averaged against a von Mises-Fisher heading distribution,
/// for anisotropic neighborhoods: value(psi_w, psi_o, |U|) with psi_w the
/// angle from the cone axis to the test heading and psi_o the angle from the
/// cone axis to the distribution's mean direction. Both angle axes are
/// periodic.
#[derive(Debug, Clone, PartialEq)]
pub struct VmfConeKernelTable {
    pub kappa: f64,
    pub delta: f64,
    pub cut: CutoffParams,
    n_w: usize,
    n_o: usize,
    betas: Vec<f64>,
    u_grid: Vec<f64>,
    values: Vec<f64>, // [psi_w][psi_o][beta]
}

impl VmfConeKernelTable {
    pub fn build(
        base: &KernelTable,
        betas: &[f64],
        n_w: usize,
        n_o: usize,
        n_quad: usize,
    ) -> Result<Self> {
        validate_betas(betas)?;
        if n_w < 4 || n_o < 4 {
            return Err(Error::InvalidParams(format!(
                "periodic angle grids need at least 4 points, got {n_w} x {n_o}"
            )));
        }
        let grid = AngleGrid::new(n_quad);
        let axis = Vec2::new(1.0, 0.0);
        let n_beta = betas.len();
        let tau = std::f64::consts::TAU;
        let values: Vec<f64> = (0..n_w)
            .into_par_iter()
            .flat_map_iter(|iw| {
                let psi_w = -std::f64::consts::PI + tau * iw as f64 / n_w as f64;
                let w = Vec2::from_angle(psi_w);
                // Kernel row for this test heading, shared across all omega.
                let row: Vec<f64> = (0..grid.len())
                    .map(|j| {
                        let rel = grid.unit(j) - w;
                        let s = rel.norm();
                        if s == 0.0 {
                            0.0
                        } else {
                            base.eval(axis.dot(rel) / s, s).expect("s within [0, 2]")
                        }
                    })
                    .collect();
                let grid_ref = &grid;
                (0..n_o * n_beta).map(move |idx| {
                    let (io, ib) = (idx / n_beta, idx % n_beta);
                    let psi_o = -std::f64::consts::PI + tau * io as f64 / n_o as f64;
                    let p = VmfParams { omega: Vec2::from_angle(psi_o), beta: betas[ib] };
                    let mut acc = 0.0;
                    for j in 0..grid_ref.len() {
                        acc += vmf_density(grid_ref.unit(j), &p) * row[j];
                    }
                    acc * grid_ref.dtheta()
                })
            })
            .collect();
        let u_grid = betas.iter().map(|&b| order_parameter(b)).collect();
        Ok(Self {
            kappa: base.kappa,
            delta: base.delta,
            cut: base.cut,
            n_w,
            n_o,
            betas: betas.to_vec(),
            u_grid,
            values,
        })
    }

    fn angle_index(n: usize, psi: f64) -> (usize, usize, f64) {
        let tau = std::f64::consts::TAU;
        let t = (psi + std::f64::consts::PI).rem_euclid(tau) / tau * n as f64;
        let i0 = (t as usize).min(n - 1);
        ((i0) % n, (i0 + 1) % n, t - i0 as f64)
    }

    pub fn eval(&self, psi_w: f64, psi_o: f64, u: f64) -> f64 {
        let (w0, w1, tw) = Self::angle_index(self.n_w, psi_w);
        let (o0, o1, to) = Self::angle_index(self.n_o, psi_o);
        let (j, tu) = speed_interp_index(&self.u_grid, u);
        let n_beta = self.betas.len();
        let at = |iw: usize, io: usize, jj: usize| {
            self.values[(iw * self.n_o + io) * n_beta + jj]
        };
        let mut acc = 0.0;
        for (iw, fw) in [(w0, 1.0 - tw), (w1, tw)] {
            for (io, fo) in [(o0, 1.0 - to), (o1, to)] {
                for (jj, fu) in [(j, 1.0 - tu), (j + 1, tu)] {
                    acc += fw * fo * fu * at(iw, io, jj);
                }
            }
        }
        acc
    }
}
