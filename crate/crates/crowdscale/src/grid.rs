//! Uniform periodic grids: an angle grid on the circle and a spatial grid on a
//! periodic rectangle. Both carry precomputed tables used by the solvers.

use crate::vec2::Vec2;

/// Uniform grid of `n` angles theta_j = j * 2pi / n on [0, 2pi).
///
/// Sums of smooth periodic samples times `dtheta` are spectrally accurate
/// (rectangle rule == trapezoid rule on the circle), so this grid doubles as
/// the quadrature rule for all circular integrals in the crate.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleGrid {
    thetas: Vec<f64>,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl AngleGrid {
    pub fn new(n: usize) -> Self {
        assert!(n >= 4, "angle grid needs at least 4 nodes");
        let dtheta = 2.0 * std::f64::consts::PI / n as f64;
        let thetas: Vec<f64> = (0..n).map(|j| j as f64 * dtheta).collect();
        let cos = thetas.iter().map(|t| t.cos()).collect();
        let sin = thetas.iter().map(|t| t.sin()).collect();
        AngleGrid { thetas, cos, sin }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn dtheta(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.len() as f64
    }

    #[inline]
    pub fn theta(&self, j: usize) -> f64 {
        self.thetas[j]
    }

    #[inline]
    pub fn unit(&self, j: usize) -> Vec2 {
        Vec2 { x: self.cos[j], y: self.sin[j] }
    }

    #[inline]
    pub fn cos(&self, j: usize) -> f64 {
        self.cos[j]
    }

    #[inline]
    pub fn sin(&self, j: usize) -> f64 {
        self.sin[j]
    }

    /// Quadrature of samples over the circle: sum * dtheta.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.len());
        values.iter().sum::<f64>() * self.dtheta()
    }

    /// First moment of a density sampled on the grid: sum f(theta_j) u_j dtheta.
    pub fn first_moment(&self, values: &[f64]) -> Vec2 {
        debug_assert_eq!(values.len(), self.len());
        let mut m = Vec2::ZERO;
        for (j, v) in values.iter().enumerate() {
            m.x += v * self.cos[j];
            m.y += v * self.sin[j];
        }
        m * self.dtheta()
    }

    #[inline]
    pub fn wrap(&self, j: isize) -> usize {
        j.rem_euclid(self.len() as isize) as usize
    }
}

/// Periodic rectangle [0, lx) x [0, ly).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PeriodicBox {
    pub lx: f64,
    pub ly: f64,
}

impl PeriodicBox {
    pub fn new(lx: f64, ly: f64) -> Self {
        assert!(lx > 0.0 && ly > 0.0, "box extents must be positive, got {lx} x {ly}");
        PeriodicBox { lx, ly }
    }

    /// Wrap a position into the box.
    pub fn wrap(&self, p: Vec2) -> Vec2 {
        Vec2 { x: p.x.rem_euclid(self.lx), y: p.y.rem_euclid(self.ly) }
    }

    /// Minimal-image displacement (component-wise nearest copy).
    #[inline]
    pub fn min_image(&self, d: Vec2) -> Vec2 {
        let mut x = d.x.rem_euclid(self.lx);
        if x > 0.5 * self.lx {
            x -= self.lx;
        }
        let mut y = d.y.rem_euclid(self.ly);
        if y > 0.5 * self.ly {
            y -= self.ly;
        }
        Vec2 { x, y }
    }

    /// Largest radius at which minimal-image distances are unambiguous.
    pub fn max_radius(&self) -> f64 {
        0.5 * self.lx.min(self.ly)
    }
}

/// Uniform cell-centered grid over a periodic box.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    pub nx: usize,
    pub ny: usize,
    pub domain: PeriodicBox,
}

impl SpatialGrid {
    pub fn new(nx: usize, ny: usize, domain: PeriodicBox) -> Self {
        assert!(nx >= 1 && ny >= 1);
        assert!(domain.lx > 0.0 && domain.ly > 0.0);
        SpatialGrid { nx, ny, domain }
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        self.domain.lx / self.nx as f64
    }

    #[inline]
    pub fn dy(&self) -> f64 {
        self.domain.ly / self.ny as f64
    }

    #[inline]
    pub fn cell_area(&self) -> f64 {
        self.dx() * self.dy()
    }

    #[inline]
    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    /// Center of cell (ix, iy).
    #[inline]
    pub fn center(&self, ix: usize, iy: usize) -> Vec2 {
        Vec2 { x: (ix as f64 + 0.5) * self.dx(), y: (iy as f64 + 0.5) * self.dy() }
    }

    /// Flat index of cell (ix, iy), x fastest.
    #[inline]
    pub fn idx(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    /// Cell containing a (wrapped) position.
    pub fn cell_of(&self, p: Vec2) -> (usize, usize) {
        let w = self.domain.wrap(p);
        let ix = ((w.x / self.dx()) as usize).min(self.nx - 1);
        let iy = ((w.y / self.dy()) as usize).min(self.ny - 1);
        (ix, iy)
    }
}
