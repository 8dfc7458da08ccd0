//! Scenario configuration: a TOML description of the domain, the physical
//! parameters, the walker groups with their initial profiles and headings,
//! grid resolutions, per-model options, and output cadence. One scenario
//! file drives every model level, so cross-level comparisons always run on
//! identical setups.

use crate::error::{Error, Result};
use crate::geometry::CutoffParams;
use crate::grid::{PeriodicBox, SpatialGrid};
use crate::vec2::Vec2;
use crate::ModelParams;
use serde::{Deserialize, Serialize};
use std::path::Path;

fn d_one() -> f64 {
    1.0
}
fn d_r() -> f64 {
    0.4
}
fn d_ell() -> f64 {
    0.4
}
fn d_big_l() -> f64 {
    4.0
}
fn d_k() -> f64 {
    1.0 / 16.0
}
fn d_noise() -> f64 {
    0.1
}
fn d_kappa() -> f64 {
    0.0
}
fn d_big_c() -> f64 {
    5.0
}
fn d_dt() -> f64 {
    0.05
}
fn d_nx() -> usize {
    32
}
fn d_n_theta() -> usize {
    64
}
fn d_n_test() -> usize {
    65
}
fn d_count() -> usize {
    1000
}
fn d_every() -> usize {
    1
}
fn d_delta() -> f64 {
    2.0
}
fn d_refresh() -> usize {
    1
}
fn d_rho_ceiling() -> f64 {
    100.0
}
fn d_delta_min() -> f64 {
    0.5
}
fn d_delta_max() -> f64 {
    8.0
}
fn d_n_delta() -> usize {
    17
}
fn d_max_iter() -> usize {
    500
}
fn d_fp_tol() -> f64 {
    1e-8
}

/// Periodic rectangular domain.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    /// Extent in meters, `[lx, ly]`.
    pub size: [f64; 2],
}

/// Physical parameters plus the two time steps. Defaults document the
/// reference parameter set; the discrete-model step defaults to the time to
/// walk one interaction ceiling.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ParamsSpec {
    #[serde(default = "d_one")]
    pub c: f64,
    #[serde(default = "d_r")]
    pub r: f64,
    #[serde(default = "d_ell")]
    pub ell: f64,
    #[serde(default = "d_big_l")]
    pub big_l: f64,
    #[serde(default = "d_k")]
    pub k: f64,
    #[serde(default = "d_noise")]
    pub d: f64,
    #[serde(default = "d_kappa")]
    pub kappa: f64,
    #[serde(default = "d_big_c")]
    pub big_c: f64,
    /// Time step of the field models and the continuous walker model (s).
    #[serde(default = "d_dt")]
    pub dt: f64,
    /// Time step of the discrete walker model (s); must exceed r / c.
    #[serde(default)]
    pub dt_discrete: Option<f64>,
}

impl Default for ParamsSpec {
    fn default() -> Self {
        ParamsSpec {
            c: d_one(),
            r: d_r(),
            ell: d_ell(),
            big_l: d_big_l(),
            k: d_k(),
            d: d_noise(),
            kappa: d_kappa(),
            big_c: d_big_c(),
            dt: d_dt(),
            dt_discrete: None,
        }
    }
}

/// Grid resolutions: space, heading angle, and the candidate-heading count
/// of the discrete walker model. Target bins are implied by the group list.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default = "d_nx")]
    pub nx: usize,
    #[serde(default = "d_nx")]
    pub ny: usize,
    #[serde(default = "d_n_theta")]
    pub n_theta: usize,
    #[serde(default = "d_n_test")]
    pub n_test: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { nx: d_nx(), ny: d_nx(), n_theta: d_n_theta(), n_test: d_n_test() }
    }
}

/// Initial spatial density of one group.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProfileSpec {
    /// Constant density over the whole domain.
    Uniform { rho: f64 },
    /// Periodically wrapped Gaussian blob of the given total mass.
    Gaussian { center: [f64; 2], sigma: f64, mass: f64 },
    /// Constant density inside an axis-aligned box, zero outside.
    Block { min: [f64; 2], max: [f64; 2], rho: f64 },
}

impl ProfileSpec {
    /// Total mass of the profile on the given domain.
    pub fn mass(&self, domain: &PeriodicBox) -> f64 {
        match self {
            ProfileSpec::Uniform { rho } => rho * domain.lx * domain.ly,
            ProfileSpec::Gaussian { mass, .. } => *mass,
            ProfileSpec::Block { min, max, rho } => {
                rho * (max[0] - min[0]).max(0.0) * (max[1] - min[1]).max(0.0)
            }
        }
    }

    /// Density at a point, with Gaussians wrapped over the nearest periodic
    /// images (adequate while sigma is small against the domain).
    pub fn density(&self, x: Vec2, domain: &PeriodicBox) -> f64 {
        match self {
            ProfileSpec::Uniform { rho } => *rho,
            ProfileSpec::Gaussian { center, sigma, mass } => {
                let mut acc = 0.0;
                for wx in -1..=1 {
                    for wy in -1..=1 {
                        let dx = x.x - center[0] + wx as f64 * domain.lx;
                        let dy = x.y - center[1] + wy as f64 * domain.ly;
                        acc += (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                    }
                }
                mass * acc / (std::f64::consts::TAU * sigma * sigma)
            }
            ProfileSpec::Block { min, max, rho } => {
                let p = domain.wrap(x);
                if p.x >= min[0] && p.x < max[0] && p.y >= min[1] && p.y < max[1] {
                    *rho
                } else {
                    0.0
                }
            }
        }
    }
}

/// Initial heading law of one group.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum HeadingSpec {
    /// Everyone starts facing the group target.
    AtTarget,
    /// Everyone starts at a fixed angle (radians).
    Angle { value: f64 },
    /// Headings uniform on the circle.
    Isotropic,
    /// Headings drawn from the circular equilibrium around the target with
    /// the given concentration.
    Vmf { beta: f64 },
}

impl Default for HeadingSpec {
    fn default() -> Self {
        HeadingSpec::AtTarget
    }
}

/// One walker group: a target direction, how many walkers represent it in
/// the individual-based models, and its initial density and heading.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    /// Target direction, radians.
    pub target_angle: f64,
    /// Walker count for the individual-based models (field models ignore it).
    #[serde(default = "d_count")]
    pub count: usize,
    pub profile: ProfileSpec,
    #[serde(default)]
    pub heading: HeadingSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    /// Write output every this many steps (the initial and final states are
    /// always written).
    #[serde(default = "d_every")]
    pub every: usize,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec { every: d_every() }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum KineticForceChoice {
    Free,
    Local,
    Nonlocal,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct KineticModelSpec {
    #[serde(default = "d_kinetic_force")]
    pub force: KineticForceChoice,
    /// Neighborhood radius baked into the local kernel table.
    #[serde(default = "d_delta")]
    pub delta: f64,
    /// Rebuild the force field every this many steps.
    #[serde(default = "d_refresh")]
    pub refresh_every: usize,
}

fn d_kinetic_force() -> KineticForceChoice {
    KineticForceChoice::Local
}

impl Default for KineticModelSpec {
    fn default() -> Self {
        KineticModelSpec {
            force: d_kinetic_force(),
            delta: d_delta(),
            refresh_every: d_refresh(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum MonoClosureChoice {
    Free,
    Cone,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MonoModelSpec {
    #[serde(default = "d_mono_closure")]
    pub closure: MonoClosureChoice,
    #[serde(default = "d_delta")]
    pub delta: f64,
    /// Density above which the run halts with a caustic-formation error.
    #[serde(default = "d_rho_ceiling")]
    pub rho_ceiling: f64,
}

fn d_mono_closure() -> MonoClosureChoice {
    MonoClosureChoice::Cone
}

impl Default for MonoModelSpec {
    fn default() -> Self {
        MonoModelSpec {
            closure: d_mono_closure(),
            delta: d_delta(),
            rho_ceiling: d_rho_ceiling(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum VmfClosureChoice {
    Free,
    Table,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct VmfModelSpec {
    #[serde(default = "d_vmf_closure")]
    pub closure: VmfClosureChoice,
    #[serde(default = "d_delta")]
    pub delta: f64,
}

fn d_vmf_closure() -> VmfClosureChoice {
    VmfClosureChoice::Table
}

impl Default for VmfModelSpec {
    fn default() -> Self {
        VmfModelSpec { closure: d_vmf_closure(), delta: d_delta() }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum HydroClosureChoice {
    Free,
    Family,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct HydroModelSpec {
    #[serde(default = "d_hydro_closure")]
    pub closure: HydroClosureChoice,
    /// Radius range covered by the kernel family (clamped lookups outside).
    #[serde(default = "d_delta_min")]
    pub delta_min: f64,
    #[serde(default = "d_delta_max")]
    pub delta_max: f64,
    #[serde(default = "d_n_delta")]
    pub n_delta: usize,
    #[serde(default = "d_max_iter")]
    pub max_iter: usize,
    #[serde(default = "d_fp_tol")]
    pub tol: f64,
}

fn d_hydro_closure() -> HydroClosureChoice {
    HydroClosureChoice::Family
}

impl Default for HydroModelSpec {
    fn default() -> Self {
        HydroModelSpec {
            closure: d_hydro_closure(),
            delta_min: d_delta_min(),
            delta_max: d_delta_max(),
            n_delta: d_n_delta(),
            max_iter: d_max_iter(),
            tol: d_fp_tol(),
        }
    }
}

/// Per-model options, all optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelsSpec {
    #[serde(default)]
    pub kinetic: KineticModelSpec,
    #[serde(default, rename = "fluid-mono")]
    pub fluid_mono: MonoModelSpec,
    #[serde(default, rename = "fluid-vmf")]
    pub fluid_vmf: VmfModelSpec,
    #[serde(default)]
    pub hydro: HydroModelSpec,
}

/// A complete scenario description.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// End time of the run (s).
    pub t_end: f64,
    #[serde(default)]
    pub seed: u64,
    pub domain: DomainSpec,
    #[serde(default)]
    pub params: ParamsSpec,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub groups: Vec<GroupSpec>,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default)]
    pub models: ModelsSpec,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let sc: Scenario =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse error: {e}")))?;
        Ok(sc)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    /// Shared physical parameter block.
    pub fn model_params(&self) -> ModelParams {
        ModelParams {
            c: self.params.c,
            cut: CutoffParams {
                r: self.params.r,
                ell: self.params.ell,
                big_l: self.params.big_l,
            },
            k: self.params.k,
            d: self.params.d,
            kappa: self.params.kappa,
            big_c: self.params.big_c,
        }
    }

    pub fn domain(&self) -> PeriodicBox {
        PeriodicBox::new(self.domain.size[0], self.domain.size[1])
    }

    pub fn space(&self) -> SpatialGrid {
        SpatialGrid::new(self.grid.nx, self.grid.ny, self.domain())
    }

    pub fn targets(&self) -> Vec<Vec2> {
        self.groups.iter().map(|g| Vec2::from_angle(g.target_angle)).collect()
    }

    /// Step of the discrete walker model; defaults to the time needed to
    /// walk one interaction ceiling.
    pub fn dt_discrete(&self) -> f64 {
        self.params.dt_discrete.unwrap_or(self.params.big_l / self.params.c)
    }

    /// Check every documented invariant and report all violations at once.
    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        let mut bad: Vec<String> = Vec::new();
        let mut ensure = |ok: bool, msg: String| {
            if !ok {
                bad.push(msg);
            }
        };
        ensure(
            self.domain.size[0] > 0.0 && self.domain.size[1] > 0.0,
            format!("domain.size must be positive, got {:?}", self.domain.size),
        );
        ensure(self.t_end >= 0.0, format!("t_end must be >= 0, got {}", self.t_end));
        ensure(p.c > 0.0, format!("params.c must be > 0, got {}", p.c));
        ensure(
            p.ell > 0.0 && p.ell <= p.r && p.r < p.big_l,
            format!(
                "cutoffs must satisfy 0 < ell <= r < big_l, got ell = {}, r = {}, big_l = {}",
                p.ell, p.r, p.big_l
            ),
        );
        ensure(p.k >= 0.0, format!("params.k must be >= 0, got {}", p.k));
        ensure(p.d > 0.0, format!("params.d must be > 0, got {}", p.d));
        ensure(
            (-1.0..1.0).contains(&p.kappa),
            format!("params.kappa must lie in [-1, 1), got {}", p.kappa),
        );
        ensure(p.big_c > 1.0, format!("params.big_c must be > 1, got {}", p.big_c));
        ensure(p.dt > 0.0, format!("params.dt must be > 0, got {}", p.dt));
        let dtd = self.dt_discrete();
        ensure(dtd > 0.0, format!("params.dt_discrete must be > 0, got {dtd}"));
        ensure(
            p.c * dtd > p.r,
            format!(
                "discrete model needs r < c * dt_discrete, got r = {}, c * dt_discrete = {}",
                p.r,
                p.c * dtd
            ),
        );
        ensure(
            self.grid.nx >= 2 && self.grid.ny >= 2,
            format!("grid must be at least 2x2, got {}x{}", self.grid.nx, self.grid.ny),
        );
        ensure(
            self.grid.n_theta >= 4,
            format!("grid.n_theta must be >= 4, got {}", self.grid.n_theta),
        );
        ensure(
            self.grid.n_test >= 3,
            format!("grid.n_test must be >= 3, got {}", self.grid.n_test),
        );
        ensure(
            self.output.every >= 1,
            format!("output.every must be >= 1, got {}", self.output.every),
        );
        for (i, g) in self.groups.iter().enumerate() {
            ensure(g.count >= 1, format!("groups[{i}].count must be >= 1, got {}", g.count));
            match &g.profile {
                ProfileSpec::Uniform { rho } => {
                    ensure(*rho >= 0.0, format!("groups[{i}] uniform rho must be >= 0"));
                }
                ProfileSpec::Gaussian { sigma, mass, .. } => {
                    ensure(*sigma > 0.0, format!("groups[{i}] gaussian sigma must be > 0"));
                    ensure(*mass >= 0.0, format!("groups[{i}] gaussian mass must be >= 0"));
                }
                ProfileSpec::Block { min, max, rho } => {
                    ensure(
                        max[0] > min[0] && max[1] > min[1],
                        format!("groups[{i}] block must have max > min per axis"),
                    );
                    ensure(*rho >= 0.0, format!("groups[{i}] block rho must be >= 0"));
                }
            }
            if let HeadingSpec::Vmf { beta } = g.heading {
                ensure(beta >= 0.0, format!("groups[{i}] heading beta must be >= 0"));
            }
        }
        let m = &self.models;
        ensure(
            m.kinetic.delta > 0.0 && m.fluid_mono.delta > 0.0 && m.fluid_vmf.delta > 0.0,
            "model kernel radii (delta) must be > 0".to_string(),
        );
        ensure(
            m.kinetic.refresh_every >= 1,
            format!("models.kinetic.refresh_every must be >= 1, got {}", m.kinetic.refresh_every),
        );
        ensure(
            m.fluid_mono.rho_ceiling > 0.0,
            format!("models.fluid-mono.rho_ceiling must be > 0, got {}", m.fluid_mono.rho_ceiling),
        );
        ensure(
            m.hydro.delta_min > 0.0 && m.hydro.delta_max > m.hydro.delta_min,
            format!(
                "models.hydro radius range must satisfy 0 < delta_min < delta_max, got [{}, {}]",
                m.hydro.delta_min, m.hydro.delta_max
            ),
        );
        ensure(
            m.hydro.n_delta >= 2,
            format!("models.hydro.n_delta must be >= 2, got {}", m.hydro.n_delta),
        );
        ensure(
            m.hydro.max_iter >= 1,
            format!("models.hydro.max_iter must be >= 1, got {}", m.hydro.max_iter),
        );
        ensure(m.hydro.tol > 0.0, format!("models.hydro.tol must be > 0, got {}", m.hydro.tol));
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        t_end = 1.0
        [domain]
        size = [8.0, 8.0]
        [[groups]]
        target_angle = 0.0
        profile = { kind = "uniform", rho = 1.0 }
    "#;

    #[test]
    fn minimal_scenario_parses_with_documented_defaults() {
        let sc = Scenario::from_toml(MINIMAL).unwrap();
        sc.validate().unwrap();
        assert_eq!(sc.params.c, 1.0);
        assert_eq!(sc.params.big_l, 4.0);
        assert_eq!(sc.params.k, 1.0 / 16.0);
        assert_eq!(sc.grid.nx, 32);
        assert_eq!(sc.grid.n_theta, 64);
        assert_eq!(sc.dt_discrete(), 4.0);
        assert_eq!(sc.groups[0].heading, HeadingSpec::AtTarget);
        assert_eq!(sc.models.kinetic.force, KineticForceChoice::Local);
        let p = sc.model_params();
        assert_eq!(p.free_walk_beta(), 10.0);
    }

    #[test]
    fn round_trips_through_toml() {
        let sc = Scenario::from_toml(MINIMAL).unwrap();
        let text = sc.to_toml();
        let back = Scenario::from_toml(&text).unwrap();
        assert_eq!(sc, back);
    }

    #[test]
    fn validation_reports_every_violation_at_once() {
        let text = r#"
            t_end = -1.0
            [domain]
            size = [8.0, 8.0]
            [params]
            d = 0.0
            kappa = 1.5
            big_c = 0.5
            [[groups]]
            target_angle = 0.0
            count = 0
            profile = { kind = "gaussian", center = [1.0, 1.0], sigma = -0.1, mass = 2.0 }
        "#;
        let sc = Scenario::from_toml(text).unwrap();
        let msg = match sc.validate() {
            Err(Error::Config(m)) => m,
            other => panic!("expected config error, got {other:?}"),
        };
        for needle in ["t_end", "params.d", "kappa", "big_c", "count", "sigma"] {
            assert!(msg.contains(needle), "missing {needle} in: {msg}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"
            t_end = 1.0
            typo_key = 3
            [domain]
            size = [8.0, 8.0]
        "#;
        assert!(matches!(Scenario::from_toml(text), Err(Error::Config(_))));
    }

    #[test]
    fn zero_group_scenarios_are_valid() {
        let text = r#"
            t_end = 0.5
            [domain]
            size = [4.0, 4.0]
        "#;
        let sc = Scenario::from_toml(text).unwrap();
        sc.validate().unwrap();
        assert!(sc.groups.is_empty());
        assert!(sc.targets().is_empty());
    }

    #[test]
    fn profiles_report_mass_and_density_consistently() {
        let domain = PeriodicBox::new(8.0, 8.0);
        let uni = ProfileSpec::Uniform { rho: 0.5 };
        assert_eq!(uni.mass(&domain), 32.0);
        assert_eq!(uni.density(Vec2::new(1.0, 1.0), &domain), 0.5);

        let blk = ProfileSpec::Block { min: [1.0, 1.0], max: [3.0, 2.0], rho: 2.0 };
        assert_eq!(blk.mass(&domain), 4.0);
        assert_eq!(blk.density(Vec2::new(2.0, 1.5), &domain), 2.0);
        assert_eq!(blk.density(Vec2::new(0.5, 1.5), &domain), 0.0);
        // Wrapped coordinates land inside the box too.
        assert_eq!(blk.density(Vec2::new(10.0, 9.5), &domain), 2.0);

        let g = ProfileSpec::Gaussian { center: [4.0, 4.0], sigma: 0.5, mass: 3.0 };
        // Quadrature of the wrapped blob over a fine grid returns the mass.
        let n = 160;
        let mut acc = 0.0;
        for iy in 0..n {
            for ix in 0..n {
                let x = Vec2::new(
                    (ix as f64 + 0.5) * 8.0 / n as f64,
                    (iy as f64 + 0.5) * 8.0 / n as f64,
                );
                acc += g.density(x, &domain);
            }
        }
        acc *= (8.0 / n as f64) * (8.0 / n as f64);
        assert!((acc - 3.0).abs() < 1e-6, "gaussian mass {acc}");
    }
}
