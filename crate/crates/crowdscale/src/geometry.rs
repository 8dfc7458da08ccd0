//! Pairwise encounter kinematics for agents moving on straight lines.
//!
//! For two agents at positions x_i, x_j with velocities v_i, v_j, the time to
//! interaction is the time at which their straight-line motion minimizes the
//! mutual distance; the encounter counts only if they are approaching and the
//! minimal distance is within the interaction radius `r`. The distance to
//! interaction is that time scaled by the subject's own speed: how far agent i
//! can still walk before the encounter happens.

use crate::vec2::Vec2;

/// Interaction cutoffs shared by every model level.
///
/// `ell` is the floor of any distance-to-interaction (inverse values are
/// capped at 1/ell), `big_l` its ceiling (the horizon beyond which encounters
/// do not constrain walking), and `r` the interaction radius two trajectories
/// must come within for an encounter to count. Invariant: 0 < ell < big_l.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CutoffParams {
    pub ell: f64,
    pub big_l: f64,
    pub r: f64,
}

impl CutoffParams {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.ell > 0.0 && self.big_l > self.ell) {
            return Err(crate::Error::InvalidParams(format!(
                "need 0 < ell < big_l, got ell = {}, big_l = {}",
                self.ell, self.big_l
            )));
        }
        if !(self.r >= 0.0) {
            return Err(crate::Error::InvalidParams(format!("need r >= 0, got {}", self.r)));
        }
        Ok(())
    }

    /// True when another cutoff set matches up to floating-point slack. Used
    /// to verify that a precomputed kernel table belongs to the active model.
    pub fn approx_eq(&self, other: &CutoffParams) -> bool {
        let near = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0);
        near(self.ell, other.ell) && near(self.big_l, other.big_l) && near(self.r, other.r)
    }
}

/// One pairwise encounter: subject i against partner j.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncounterInput {
    pub x_i: Vec2,
    pub v_i: Vec2,
    pub x_j: Vec2,
    pub v_j: Vec2,
}

/// Encounter summary. `tti`/`dti` are +inf when the pair never interacts
/// (receding, minimal distance above the radius, or zero relative velocity).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncounterResult {
    /// Time to interaction (s).
    pub tti: f64,
    /// Distance to interaction: tti scaled by the subject's speed (m).
    pub dti: f64,
    /// Minimal distance the pair attains at any future time (m); for a pair
    /// that is not approaching this is the current separation.
    pub md: f64,
}

/// Closest-approach analysis of a straight-line pair.
///
/// Zero relative velocity means the distance never changes: no interaction,
/// and `md` reports the current separation.
pub fn binary_encounter(inp: &EncounterInput, r: f64) -> EncounterResult {
    let xi = inp.x_j - inp.x_i;
    let dv = inp.v_j - inp.v_i;
    let dv2 = dv.norm2();
    let along = xi.dot(dv);
    if dv2 == 0.0 || along >= 0.0 {
        // Distance is nondecreasing from now on.
        return EncounterResult { tti: f64::INFINITY, dti: f64::INFINITY, md: xi.norm() };
    }
    // Transverse miss distance via the cross product (Lagrange identity);
    // unlike |xi|^2 - (xi.dv)^2/|dv|^2 it does not cancel for near-collinear
    // geometry.
    let cross = xi.cross(dv);
    let md = cross.abs() / dv2.sqrt();
    if md <= r {
        let tti = along.abs() / dv2;
        EncounterResult { tti, dti: tti * inp.v_i.norm(), md }
    } else {
        EncounterResult { tti: f64::INFINITY, dti: f64::INFINITY, md }
    }
}

/// Inverse distance to interaction of one elementary pair, 1/m.
///
/// `xi` is the partner offset (x_j - x_i) and `rel` the relative velocity of
/// the partner against the subject's *test* direction (v_j - w). Returns
/// min(|rel|^2 / |xi . rel|, 1/ell) when the pair is approaching and the
/// transverse miss distance is within `r`; otherwise 0. The 0 encodes "no
/// constraint" (an infinite DTI): callers average inverses, where it
/// contributes nothing.
#[inline]
pub fn elementary_dti_inverse(xi: Vec2, rel: Vec2, cut: &CutoffParams) -> f64 {
    let rel2 = rel.norm2();
    if rel2 == 0.0 {
        return 0.0;
    }
    let along = xi.dot(rel);
    if along >= 0.0 {
        return 0.0;
    }
    // Cross-product form of the transverse miss distance; exact even for
    // near-collinear geometry.
    let cross = xi.cross(rel);
    if cross * cross > cut.r * cut.r * rel2 {
        return 0.0;
    }
    (rel2 / along.abs()).min(1.0 / cut.ell)
}

/// Membership test for the vision region: within `delta` of `center` and at a
/// direction whose cosine against `heading` is at least `kappa`. A point at
/// zero distance has no direction and is excluded.
#[inline]
pub fn in_vision_cone(center: Vec2, heading: Vec2, other: Vec2, kappa: f64, delta: f64) -> bool {
    let d = other - center;
    let dist = d.norm();
    if dist == 0.0 || dist > delta {
        return false;
    }
    d.dot(heading) >= kappa * dist
}
