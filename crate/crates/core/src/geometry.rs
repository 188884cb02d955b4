//! Planar geometry of small cells, mmW beams and straight-line trajectories.
//!
//! The SBS sits at `sbs_position`; a beam is the wedge between the rays at
//! polar angles `anchor_angle - beamwidth` (entry edge) and `anchor_angle`
//! (far edge). Distances are meters, angles radians, speeds m/s.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quad;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("trajectory never reaches the far beam edge")]
    NoIntersection,
    #[error("pose is {distance:.3e} m off the entry edge of the beam")]
    OffEntryEdge { distance: f64 },
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Wraps an angle into `[0, 2π)`.
pub fn normalize_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(TAU);
    if t >= TAU {
        0.0
    } else {
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64, speed: f64) -> Self {
        Self {
            x,
            y,
            heading: normalize_angle(heading),
            speed,
        }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn direction(&self) -> [f64; 2] {
        [self.heading.cos(), self.heading.sin()]
    }

    /// Position after `dt` seconds of straight-line motion.
    pub fn advanced(&self, dt: f64) -> Pose {
        let [dx, dy] = self.direction();
        Pose {
            x: self.x + dx * self.speed * dt,
            y: self.y + dy * self.speed * dt,
            ..*self
        }
    }
}

/// A line `a·x + b·y = c` with `(a, b)` a unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Line {
    /// The line through `origin` with direction angle `angle`.
    pub fn through(origin: [f64; 2], angle: f64) -> Self {
        let (a, b) = (-angle.sin(), angle.cos());
        Self {
            a,
            b,
            c: a * origin[0] + b * origin[1],
        }
    }

    pub fn signed_distance(&self, p: [f64; 2]) -> f64 {
        self.a * p[0] + self.b * p[1] - self.c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamGeometry {
    pub sbs_position: [f64; 2],
    pub n_beams: u32,
    pub beamwidth: f64,
    pub anchor_angle: f64,
}

impl BeamGeometry {
    pub fn new(sbs_position: [f64; 2], n_beams: u32, beamwidth: f64, anchor_angle: f64) -> Result<Self> {
        if n_beams == 0 {
            return Err(GeometryError::Domain("n_beams must be positive".into()));
        }
        if !(beamwidth > 0.0) || f64::from(n_beams) * beamwidth > TAU + 1e-12 {
            return Err(GeometryError::Domain(format!(
                "beamwidth {beamwidth} outside (0, 2π/{n_beams}]"
            )));
        }
        Ok(Self {
            sbs_position,
            n_beams,
            beamwidth,
            anchor_angle,
        })
    }

    /// The beam whose entry edge passes through `pose`, i.e. with
    /// `anchor_angle = polar angle of the pose + beamwidth`.
    pub fn from_entry_pose(sbs_position: [f64; 2], n_beams: u32, beamwidth: f64, pose: &Pose) -> Result<Self> {
        let dx = pose.x - sbs_position[0];
        let dy = pose.y - sbs_position[1];
        if dx == 0.0 && dy == 0.0 {
            return Err(GeometryError::Domain("pose coincides with the SBS".into()));
        }
        Self::new(sbs_position, n_beams, beamwidth, dy.atan2(dx) + beamwidth)
    }

    pub fn entry_angle(&self) -> f64 {
        self.anchor_angle - self.beamwidth
    }

    pub fn far_edge(&self) -> Line {
        Line::through(self.sbs_position, self.anchor_angle)
    }

    fn relative(&self, pose: &Pose) -> [f64; 2] {
        [pose.x - self.sbs_position[0], pose.y - self.sbs_position[1]]
    }

    /// Distance from the SBS to the pose.
    pub fn range(&self, pose: &Pose) -> f64 {
        let [x, y] = self.relative(pose);
        x.hypot(y)
    }

    /// Rejects poses that are not on the entry ray of this beam.
    pub fn check_entry_pose(&self, pose: &Pose) -> Result<()> {
        let p = self.relative(pose);
        let (c, s) = (self.entry_angle().cos(), self.entry_angle().sin());
        let along = p[0] * c + p[1] * s;
        let across = (-p[0] * s + p[1] * c).abs();
        let r = p[0].hypot(p[1]);
        if along <= 0.0 || across > 1e-9 * r.max(1.0) {
            return Err(GeometryError::OffEntryEdge {
                distance: if along <= 0.0 { r } else { across },
            });
        }
        Ok(())
    }

    /// Entry-edge angles of the `n_beams` equidistant sectors, the first one
    /// being this beam.
    pub fn sector_starts(&self) -> Vec<f64> {
        let step = TAU / f64::from(self.n_beams);
        (0..self.n_beams)
            .map(|i| normalize_angle(self.entry_angle() + step * f64::from(i)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellDisk {
    pub center: [f64; 2],
    pub radius: f64,
}

impl CellDisk {
    pub fn new(center: [f64; 2], radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(GeometryError::Domain(format!("cell radius {radius} must be positive")));
        }
        Ok(Self { center, radius })
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        (p[0] - self.center[0]).hypot(p[1] - self.center[1]) <= self.radius
    }

    /// Entry and exit travel distances of the straight path through the disk,
    /// or `None` if the path misses it. Entry may be negative when the pose
    /// is already inside.
    pub fn path_interval(&self, pose: &Pose) -> Option<(f64, f64)> {
        let [dx, dy] = pose.direction();
        let px = pose.x - self.center[0];
        let py = pose.y - self.center[1];
        let b = px * dx + py * dy;
        let c = px * px + py * py - self.radius * self.radius;
        let disc = b * b - c;
        if disc <= 0.0 {
            return None;
        }
        let root = disc.sqrt();
        let (t0, t1) = (-b - root, -b + root);
        if t1 <= 0.0 {
            None
        } else {
            Some((t0, t1))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChordSample {
    pub length: f64,
    pub entry_angle: f64,
}

/// Probability that a trajectory entering a cell with `n_beams` equidistant
/// beams of width `beamwidth` crosses mmW coverage.
///
/// `Nθ/2π + (1 − Nθ/2π)·(½(1 − 1/N) + θ/4π)`
pub fn beam_coverage_probability(n_beams: u32, beamwidth: f64) -> Result<f64> {
    if n_beams < 2 {
        return Err(GeometryError::Domain(format!("need at least 2 beams, got {n_beams}")));
    }
    let n = f64::from(n_beams);
    // slack admits 2π/N rounded to a few decimals
    if !(beamwidth > 0.0) || n * beamwidth > TAU * (1.0 + 1e-5) {
        return Err(GeometryError::Domain(format!(
            "beamwidth {beamwidth} outside (0, 2π/{n_beams}]"
        )));
    }
    let on_arc = (n * beamwidth / TAU).min(1.0);
    let p = on_arc + (1.0 - on_arc) * (0.5 * (1.0 - 1.0 / n) + beamwidth / (2.0 * TAU));
    Ok(p.clamp(0.0, 1.0))
}

/// Perpendicular distance from the pose to the far beam edge: the shortest
/// possible crossing of the beam.
///
/// Equal to `|x·tanθ0 − y| / sqrt(1 + tan²θ0)` away from the vertical edge,
/// evaluated here in line form so `θ0 = ±π/2` needs no special case.
pub fn min_exit_distance(pose: &Pose, beam: &BeamGeometry) -> f64 {
    beam.far_edge().signed_distance(pose.position()).abs()
}

/// Distance travelled along the heading until the far beam edge is reached,
/// `(y − x·tanθ0) / (tanθ0·cosθu − sinθu)`.
pub fn beam_traverse_distance(pose: &Pose, beam: &BeamGeometry) -> Result<f64> {
    let edge = beam.far_edge();
    let [dx, dy] = pose.direction();
    let closing = edge.a * dx + edge.b * dy;
    let offset = edge.signed_distance(pose.position());
    if closing.abs() < 1e-12 {
        return Err(GeometryError::NoIntersection);
    }
    let r = -offset / closing;
    if r < 0.0 {
        return Err(GeometryError::NoIntersection);
    }
    Ok(r.max(0.0))
}

fn clamped_acos(x: f64) -> f64 {
    x.clamp(-1.0, 1.0).acos()
}

/// CDF of the caching duration for a pose on the entry edge, headings uniform
/// over the `π − θk` window that reaches the far edge.
pub fn caching_duration_cdf(pose: &Pose, beam: &BeamGeometry, t0: f64) -> Result<f64> {
    if !(t0 >= 0.0) {
        return Err(GeometryError::Domain(format!("t0 = {t0} must be nonnegative")));
    }
    if !(pose.speed > 0.0) {
        return Err(GeometryError::Domain(format!("speed {} must be positive", pose.speed)));
    }
    if beam.beamwidth >= PI {
        return Err(GeometryError::Domain("beamwidth must be below π".into()));
    }
    beam.check_entry_pose(pose)?;
    Ok(cdf_from_distances(
        beam.range(pose),
        min_exit_distance(pose, beam),
        beam.beamwidth,
        pose.speed * t0,
    ))
}

/// `F` as a function of the reachable distance `reach = v·t0`.
pub(crate) fn cdf_from_distances(range: f64, r_min: f64, beamwidth: f64, reach: f64) -> f64 {
    if r_min > reach {
        return 0.0;
    }
    if reach == 0.0 {
        return 0.0;
    }
    let spread = clamped_acos(r_min / reach);
    let toward_sbs = clamped_acos(r_min / range);
    // equality falls on the single-intersection branch
    let second = if spread < toward_sbs { spread } else { toward_sbs };
    ((spread + second) / (PI - beamwidth)).clamp(0.0, 1.0)
}

/// Admissible heading window `[start, start + π − θk)` for a pose on the
/// entry edge.
pub fn admissible_headings(beam: &BeamGeometry) -> (f64, f64) {
    (beam.anchor_angle, PI - beam.beamwidth)
}

/// Mean distance covered inside the beam, `∫ (1 − F(r/v)) dr` over
/// `[0, horizon]`, i.e. `E[min(r_c, horizon)]`.
///
/// The untruncated mean diverges because headings close to the far edge
/// direction never leave the beam, so the path is cut at `horizon` meters
/// (typically the extent of the beam inside the cell).
pub fn expected_cache_traverse_distance(pose: &Pose, beam: &BeamGeometry, horizon: f64) -> Result<f64> {
    if !(horizon > 0.0) {
        return Err(GeometryError::Domain(format!("horizon {horizon} must be positive")));
    }
    if beam.beamwidth >= PI {
        return Err(GeometryError::Domain("beamwidth must be below π".into()));
    }
    beam.check_entry_pose(pose)?;
    let range = beam.range(pose);
    let r_min = min_exit_distance(pose, beam);
    if r_min >= horizon {
        return Ok(horizon);
    }
    let tail = |r: f64| 1.0 - cdf_from_distances(range, r_min, beam.beamwidth, r);
    let rest = quad::integrate(tail, r_min, horizon, 1e-10 * horizon, 60);
    Ok(r_min + rest.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HofProbability {
    pub probability: f64,
    /// Set when `v·t_mts > 2a`; the probability is then clamped to 1.
    pub saturated: bool,
}

/// Probability that a random chord of the cell is shorter than `v·t_mts`,
/// `(2/π)·arcsin(v·t_mts / 2a)`.
pub fn hof_probability(speed: f64, t_mts: f64, cell_radius: f64) -> Result<HofProbability> {
    if !(speed >= 0.0) || !(t_mts >= 0.0) {
        return Err(GeometryError::Domain(format!(
            "speed {speed} and t_mts {t_mts} must be nonnegative"
        )));
    }
    if !(cell_radius > 0.0) {
        return Err(GeometryError::Domain(format!("cell radius {cell_radius} must be positive")));
    }
    let ratio = speed * t_mts / (2.0 * cell_radius);
    if ratio > 1.0 {
        return Ok(HofProbability {
            probability: 1.0,
            saturated: true,
        });
    }
    Ok(HofProbability {
        probability: 2.0 / PI * ratio.asin(),
        saturated: false,
    })
}

/// Density of the chord length with one endpoint fixed and the other
/// uniform on the circle, `2 / (π·sqrt(4a² − d²))`.
pub fn chord_length_pdf(cell: &CellDisk, d: f64) -> Result<f64> {
    let diameter = 2.0 * cell.radius;
    if !(d >= 0.0) || d >= diameter {
        return Err(GeometryError::Domain(format!("chord length {d} outside [0, {diameter})")));
    }
    Ok(2.0 / (PI * (diameter * diameter - d * d).sqrt()))
}

/// Draws a chord with one endpoint at a uniform angle and the direction
/// uniform over the inward half-plane.
pub fn sample_chord<R: Rng + ?Sized>(cell: &CellDisk, rng: &mut R) -> ChordSample {
    let entry_angle = rng.random::<f64>() * TAU;
    let spread = rng.random::<f64>() * PI;
    ChordSample {
        length: 2.0 * cell.radius * spread.sin(),
        entry_angle,
    }
}

/// Index of the gap (between sector `i` and `i + 1`) that holds `angle`,
/// or `None` when the angle falls inside a beam sector.
pub(crate) fn gap_index(angle: f64, n_beams: u32, beamwidth: f64) -> Option<u32> {
    let step = TAU / f64::from(n_beams);
    let a = normalize_angle(angle);
    let sector = ((a / step).floor() as u32).min(n_beams - 1);
    let within = a - f64::from(sector) * step;
    if within < beamwidth {
        None
    } else {
        Some(sector)
    }
}

/// Whether a trajectory entering the cell boundary at `entry_angle` with
/// absolute `heading` crosses any beam sector of `n_beams` beams starting at
/// polar angle 0. Outward headings never cross.
pub fn trajectory_crosses_beam(n_beams: u32, beamwidth: f64, entry_angle: f64, heading: f64) -> bool {
    let gap = match gap_index(entry_angle, n_beams, beamwidth) {
        None => return true,
        Some(g) => g,
    };
    let (ex, ey) = (entry_angle.cos(), entry_angle.sin());
    let (dx, dy) = (heading.cos(), heading.sin());
    let inward = -(ex * dx + ey * dy);
    if inward <= 0.0 {
        return false;
    }
    let t = 2.0 * inward;
    let exit_angle = (ey + t * dy).atan2(ex + t * dx);
    gap_index(exit_angle, n_beams, beamwidth) != Some(gap)
}
