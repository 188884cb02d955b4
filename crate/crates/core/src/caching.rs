//! Device-side cache accounting for cached video playback.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CacheError {
    #[error("invalid cache state: {0}")]
    Invalid(String),
}

/// Cache contents in segments. `segments` is fractional so playback can
/// drain continuously; read-outs floor it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacheState {
    pub segments: f64,
    pub segment_size_bits: f64,
    pub play_rate: f64,
    pub capacity: f64,
}

impl CacheState {
    pub fn new(segments: f64, segment_size_bits: f64, play_rate: f64, capacity: f64) -> Result<Self, CacheError> {
        if !(segment_size_bits > 0.0) || !(play_rate > 0.0) {
            return Err(CacheError::Invalid("segment size and play rate must be positive".into()));
        }
        if !(capacity >= 0.0) || !(segments >= 0.0) || segments > capacity {
            return Err(CacheError::Invalid(format!(
                "segments {segments} outside [0, {capacity}]"
            )));
        }
        Ok(Self {
            segments,
            segment_size_bits,
            play_rate,
            capacity,
        })
    }

    /// 1 Mbit segments played at 1000 segments/s, capacity 10^4.
    pub fn standard(segments: f64) -> Self {
        Self::new(segments, 1e6, 1e3, 1e4).expect("valid preset")
    }

    pub fn whole_segments(&self) -> u64 {
        self.segments.floor() as u64
    }

    /// Seconds of playback held, `Ω/Q`.
    pub fn playback_time(&self) -> f64 {
        self.segments / self.play_rate
    }

    /// Plays for `dt` seconds. Returns the new state and the stalled time.
    pub fn drain(&self, dt: f64) -> (CacheState, f64) {
        let wanted = self.play_rate * dt.max(0.0);
        let played = wanted.min(self.segments);
        let stalled = (wanted - played) / self.play_rate;
        (
            CacheState {
                segments: self.segments - played,
                ..*self
            },
            stalled,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyModel {
    pub energy_per_scan: f64,
    pub frame_duration: f64,
    pub scan_interval: f64,
}

impl EnergyModel {
    pub fn new(energy_per_scan: f64, frame_duration: f64, scan_interval: f64) -> Result<Self, CacheError> {
        if !(energy_per_scan > 0.0) || !(frame_duration > 0.0) || !(scan_interval > 0.0) {
            return Err(CacheError::Invalid("energy model fields must be positive".into()));
        }
        Ok(Self {
            energy_per_scan,
            frame_duration,
            scan_interval,
        })
    }
}

/// Adds `floor(rate·duration / B)` segments and clamps to capacity.
pub fn cache_fill(avg_rate: f64, duration: f64, state: &CacheState) -> CacheState {
    let burst = (avg_rate.max(0.0) * duration.max(0.0) / state.segment_size_bits).floor();
    let burst = burst.min(state.capacity);
    CacheState {
        segments: (state.segments + burst).min(state.capacity),
        ..*state
    }
}

/// Distance covered on cached playback, `(Ω/Q)·v`.
pub fn coast_distance(state: &CacheState, speed: f64) -> f64 {
    state.playback_time() * speed
}

/// Cells passed on cached content without a scan, `floor(E[d]/l)`.
pub fn skipped_sbs_count(expected_coast: f64, intercell_distance: f64) -> Result<u64, CacheError> {
    if !(intercell_distance > 0.0) {
        return Err(CacheError::Invalid("intercell distance must be positive".into()));
    }
    Ok((expected_coast.max(0.0) / intercell_distance).floor() as u64)
}

/// Scan energy over a frame, `E^s·T/T_s`.
pub fn scan_energy(model: &EnergyModel) -> f64 {
    model.energy_per_scan * model.frame_duration / model.scan_interval
}

/// Scan interval: muted down to `Ω/Q − ΔT` while the cache outlasts the
/// time-to-trigger, otherwise the periodic default.
pub fn next_scan_interval(state: &CacheState, ttt: f64, default_scan_interval: f64) -> f64 {
    (state.playback_time() - ttt).max(default_scan_interval)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drain_records_stall() {
        let s = CacheState::standard(500.0);
        let (after, stalled) = s.drain(1.0);
        assert_eq!(after.segments, 0.0);
        assert!((stalled - 0.5).abs() < 1e-12);
    }
}
