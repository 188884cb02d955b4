//! Link-level models: path loss, sectorized antenna gain, noise-limited
//! Shannon rate and the average rate collected while crossing a mmW beam.

use std::f64::consts::{LN_2, PI};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, BeamGeometry, GeometryError, Pose};
use crate::quad;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RadioError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("quadrature stopped at estimated error {achieved:.3e} (requested {requested:.3e})")]
    NotConverged { achieved: f64, requested: f64 },
}

pub type Result<T> = std::result::Result<T, RadioError>;

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    db_to_linear(dbm) * 1e-3
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub carrier_frequency: f64,
    pub wavelength: f64,
    pub reference_distance: f64,
    pub pathloss_exponent: f64,
    pub shadowing_std_db: f64,
    pub los: bool,
}

impl ChannelParams {
    pub fn new(
        carrier_frequency: f64,
        reference_distance: f64,
        pathloss_exponent: f64,
        shadowing_std_db: f64,
        los: bool,
    ) -> Result<Self> {
        if !(carrier_frequency > 0.0) || !(reference_distance > 0.0) || !(pathloss_exponent > 0.0) {
            return Err(RadioError::Domain(
                "carrier frequency, reference distance and exponent must be positive".into(),
            ));
        }
        if !(shadowing_std_db >= 0.0) {
            return Err(RadioError::Domain("shadowing std must be nonnegative".into()));
        }
        Ok(Self {
            carrier_frequency,
            wavelength: SPEED_OF_LIGHT / carrier_frequency,
            reference_distance,
            pathloss_exponent,
            shadowing_std_db,
            los,
        })
    }

    /// 73 GHz line-of-sight link, exponent 2.
    pub fn mmw_los() -> Self {
        Self::new(73e9, 1.0, 2.0, 5.2, true).expect("valid preset")
    }

    /// 73 GHz blocked link, exponent 3.5.
    pub fn mmw_nlos() -> Self {
        Self::new(73e9, 1.0, 3.5, 7.6, false).expect("valid preset")
    }

    /// Sub-6 GHz link used for association and RSS decisions.
    pub fn microwave() -> Self {
        Self::new(2e9, 1.0, 3.0, 8.0, true).expect("valid preset")
    }

    /// Free-space loss at the reference distance, `20·log10(4π·r0/λ)`.
    pub fn reference_loss_db(&self) -> f64 {
        20.0 * (4.0 * PI * self.reference_distance / self.wavelength).log10()
    }

    /// `(λ / 4π·r0)²·r0^α`
    pub fn beta(&self) -> f64 {
        (self.wavelength / (4.0 * PI * self.reference_distance)).powi(2)
            * self.reference_distance.powf(self.pathloss_exponent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AntennaPattern {
    pub main_lobe_gain: f64,
    pub side_lobe_gain: f64,
    pub main_beamwidth: f64,
}

impl AntennaPattern {
    pub fn new(main_lobe_gain: f64, side_lobe_gain: f64, main_beamwidth: f64) -> Result<Self> {
        if !(main_lobe_gain > side_lobe_gain) || !(main_beamwidth > 0.0) {
            return Err(RadioError::Domain(
                "need main lobe gain above side lobe gain and a positive beamwidth".into(),
            ));
        }
        Ok(Self {
            main_lobe_gain,
            side_lobe_gain,
            main_beamwidth,
        })
    }
}

impl Default for AntennaPattern {
    fn default() -> Self {
        Self {
            main_lobe_gain: 18.0,
            side_lobe_gain: -2.0,
            main_beamwidth: 10f64.to_radians(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    pub tx_power: f64,
    pub combined_gain: f64,
    pub bandwidth: f64,
    pub noise_psd: f64,
    pub beta: f64,
}

impl LinkBudget {
    pub fn new(tx_power_dbm: f64, combined_gain_db: f64, bandwidth: f64, noise_psd_dbm_hz: f64, params: &ChannelParams) -> Result<Self> {
        if !(bandwidth > 0.0) {
            return Err(RadioError::Domain("bandwidth must be positive".into()));
        }
        Ok(Self {
            tx_power: dbm_to_watts(tx_power_dbm),
            combined_gain: db_to_linear(combined_gain_db),
            bandwidth,
            noise_psd: dbm_to_watts(noise_psd_dbm_hz),
            beta: params.beta(),
        })
    }

    /// Both ends on their main lobes for LoS links; a blocked link keeps the
    /// SBS main lobe but reaches the MUE through a side lobe.
    pub fn for_channel(tx_power_dbm: f64, pattern: &AntennaPattern, bandwidth: f64, noise_psd_dbm_hz: f64, params: &ChannelParams) -> Result<Self> {
        let gain = if params.los {
            2.0 * pattern.main_lobe_gain
        } else {
            pattern.main_lobe_gain + pattern.side_lobe_gain
        };
        Self::new(tx_power_dbm, gain, bandwidth, noise_psd_dbm_hz, params)
    }

    /// SNR at one meter: `β·Pt·ψ / (w·N0)`.
    pub fn snr_at_unit_distance(&self) -> f64 {
        self.beta * self.tx_power * self.combined_gain / (self.bandwidth * self.noise_psd)
    }
}

/// `20·log10(4π·r0/λ) + 10·α·log10(r/r0) + χ`
pub fn path_loss_db(distance: f64, params: &ChannelParams, shadowing_db: Option<f64>) -> Result<f64> {
    if !(distance >= params.reference_distance) {
        return Err(RadioError::Domain(format!(
            "distance {distance} below reference distance {}",
            params.reference_distance
        )));
    }
    Ok(params.reference_loss_db()
        + 10.0 * params.pathloss_exponent * (distance / params.reference_distance).log10()
        + shadowing_db.unwrap_or(0.0))
}

/// Distance at which the received power `tx_power_dbm − L(r)` falls to
/// `threshold_dbm`, without shadowing. Returns the reference distance when
/// the threshold is already missed there.
pub fn coverage_radius(tx_power_dbm: f64, threshold_dbm: f64, params: &ChannelParams) -> f64 {
    let margin = tx_power_dbm - threshold_dbm - params.reference_loss_db();
    let r = params.reference_distance * 10f64.powf(margin / (10.0 * params.pathloss_exponent));
    r.max(params.reference_distance)
}

/// Sectorized gain: main lobe strictly inside `±θm`, side lobe elsewhere.
pub fn antenna_gain_db(azimuth: f64, pattern: &AntennaPattern) -> f64 {
    let wrapped = azimuth.sin().atan2(azimuth.cos());
    if wrapped.abs() < pattern.main_beamwidth {
        pattern.main_lobe_gain
    } else {
        pattern.side_lobe_gain
    }
}

/// `w·log2(1 + β·Pt·ψ·r^−α / (w·N0))` in bits/s.
pub fn instantaneous_rate(distance: f64, budget: &LinkBudget, params: &ChannelParams) -> Result<f64> {
    if !(distance >= params.reference_distance) {
        return Err(RadioError::Domain(format!(
            "distance {distance} below reference distance {}",
            params.reference_distance
        )));
    }
    let snr = budget.snr_at_unit_distance() * distance.powf(-params.pathloss_exponent);
    Ok(budget.bandwidth * snr.ln_1p() / LN_2)
}

/// Geometry of one beam crossing as seen from the SBS.
///
/// With `θ̂ = θu − θ0 + θk` the angle between the heading and the entry ray,
/// the path point seen at angle `θ` past the entry ray is at range
/// `r·sinθ̂ / sin(θ̂ − θ)`. The path average is
/// `δ2 · ∫ ln(1 + δ1·sin^α φ) / sin²φ dφ / ln 2` over `φ ∈ [θ̂ − θk, θ̂]`,
/// with `δ1 = β·Pt·ψ·(r·sinθ̂)^−α / (w·N0)` and `δ2 = w·r·sinθ̂·Pc / r_c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossingTerms {
    pub theta_hat: f64,
    pub beamwidth: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub exponent: f64,
    pub traverse: f64,
    pub coverage: f64,
}

impl CrossingTerms {
    pub fn new(pose: &Pose, beam: &BeamGeometry, budget: &LinkBudget, params: &ChannelParams) -> Result<Self> {
        beam.check_entry_pose(pose)?;
        let theta_k = beam.beamwidth;
        let theta_hat = geometry::normalize_angle(pose.heading - beam.anchor_angle + theta_k);
        if !(theta_hat.sin() > 0.0) || !(theta_hat - theta_k > 0.0) {
            return Err(RadioError::Geometry(GeometryError::NoIntersection));
        }
        let range = beam.range(pose);
        let foot = range * theta_hat.sin();
        let traverse = geometry::beam_traverse_distance(pose, beam)?;
        if !(traverse > 0.0) {
            return Err(RadioError::Geometry(GeometryError::NoIntersection));
        }
        let coverage = geometry::beam_coverage_probability(beam.n_beams, theta_k)?;
        let alpha = params.pathloss_exponent;
        Ok(Self {
            theta_hat,
            beamwidth: theta_k,
            delta1: budget.snr_at_unit_distance() * foot.powf(-alpha),
            delta2: budget.bandwidth * foot * coverage / traverse,
            exponent: alpha,
            traverse,
            coverage,
        })
    }

    fn integrand(&self, phi: f64) -> f64 {
        let s = phi.sin();
        (self.delta1 * s.powf(self.exponent)).ln_1p() / (s * s)
    }

    /// Antiderivative of the α = 2 integrand,
    /// `−cot φ·ln(1 + δ1 sin²φ) + 2√(1+δ1)·atan(√(1+δ1)·tan φ) − 2φ`,
    /// with the arctangent continued across `φ = π/2`.
    fn antiderivative_alpha2(&self, phi: f64) -> f64 {
        let (s, c) = phi.sin_cos();
        let k = (1.0 + self.delta1).sqrt();
        -(c / s) * (self.delta1 * s * s).ln_1p() + 2.0 * k * (k * s).atan2(c) - 2.0 * phi
    }

    pub fn closed_form(&self) -> Result<f64> {
        if self.exponent != 2.0 {
            return Err(RadioError::Domain(format!(
                "closed form needs exponent 2, got {}",
                self.exponent
            )));
        }
        let upper = self.antiderivative_alpha2(self.theta_hat);
        let lower = self.antiderivative_alpha2(self.theta_hat - self.beamwidth);
        Ok(self.delta2 * (upper - lower) / LN_2)
    }

    pub fn quadrature(&self, rel_tol: f64) -> Result<f64> {
        if !(rel_tol > 0.0) {
            return Err(RadioError::Domain("tolerance must be positive".into()));
        }
        let (lo, hi) = (self.theta_hat - self.beamwidth, self.theta_hat);
        let scale = self.beamwidth * self.integrand(0.5 * (lo + hi)).abs().max(f64::MIN_POSITIVE);
        let requested = rel_tol * scale;
        let q = quad::integrate(|phi| self.integrand(phi), lo, hi, requested, 60);
        if !q.converged {
            return Err(RadioError::NotConverged {
                achieved: q.error,
                requested,
            });
        }
        Ok(self.delta2 * q.value / LN_2)
    }
}

/// Average rate collected while crossing the beam, weighted by the
/// probability that the trajectory meets mmW coverage at all.
pub fn average_caching_rate(pose: &Pose, beam: &BeamGeometry, budget: &LinkBudget, params: &ChannelParams) -> Result<f64> {
    let terms = CrossingTerms::new(pose, beam, budget, params)?;
    if params.pathloss_exponent == 2.0 {
        terms.closed_form()
    } else {
        terms.quadrature(1e-10)
    }
}

/// The α-general quadrature evaluation of [`average_caching_rate`].
pub fn quadrature_rate(pose: &Pose, beam: &BeamGeometry, budget: &LinkBudget, params: &ChannelParams, tolerance: f64) -> Result<f64> {
    CrossingTerms::new(pose, beam, budget, params)?.quadrature(tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_loss_73ghz() {
        let l = path_loss_db(1.0, &ChannelParams::mmw_los(), None).unwrap();
        assert!((l - 69.7).abs() < 0.1, "{l}");
    }

    #[test]
    fn gain_wraps_azimuth() {
        let p = AntennaPattern::default();
        assert_eq!(antenna_gain_db(2.0 * PI - 0.01, &p), 18.0);
        assert_eq!(antenna_gain_db(PI, &p), -2.0);
    }

    #[test]
    fn coverage_radius_inverts_path_loss() {
        let mw = ChannelParams::microwave();
        let r = coverage_radius(20.0, -80.0, &mw);
        let rss = 20.0 - path_loss_db(r, &mw, None).unwrap();
        assert!((rss + 80.0).abs() < 1e-9);
    }
}
