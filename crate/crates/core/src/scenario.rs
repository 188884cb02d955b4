//! Scenario generation and the experiment drivers.
//!
//! A scenario is a disk of SBSs placed by rejection sampling, each with a
//! transmit power, a µW cell radius and a random beam orientation. The
//! experiments run independent replications in parallel; replication `r` of
//! an experiment always draws from the same ChaCha stream, so outputs depend
//! only on the configuration and the seed.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::caching::{cache_fill, CacheState};
use crate::geometry::{hof_probability, normalize_angle, BeamGeometry, CellDisk, Pose};
use crate::handover::{self, AcceptAll, CellId, EventKind, HandoverConfig, HandoverEvent, HandoverState, Phase};
use crate::matching::{
    dynamic_match_in, proposals_to, realised_service, signaling_overhead, Game, GameInstance, MueSpec,
    PlayerId, SbsSpec, Service, Utilities,
};
use crate::radio::{average_caching_rate, coverage_radius, instantaneous_rate, path_loss_db, AntennaPattern, ChannelParams, LinkBudget};

/// Draws per SBS before placement gives up.
const PLACEMENT_ATTEMPTS: usize = 10_000;
/// Path sampling step of the single-user simulation, meters.
const PATH_STEP: f64 = 0.25;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("config error: {0}")]
    Config(String),
    #[error("could not place SBS {placed} of {requested} with {spacing} m spacing in a {radius} m disk")]
    Packing {
        placed: usize,
        requested: usize,
        spacing: f64,
        radius: f64,
    },
    #[error("unknown experiment `{0}`")]
    UnknownExperiment(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ScenarioError>;

fn model<E: fmt::Display>(e: E) -> ScenarioError {
    ScenarioError::Model(e.to_string())
}

/// Every tunable of a run. Field names double as config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub replications: usize,
    /// Radius of the deployment disk, m.
    pub area_radius: f64,
    pub n_sbs: usize,
    /// Minimum SBS spacing, m.
    pub min_intercell: f64,
    pub sbs_powers_dbm: Vec<f64>,
    pub n_mues: usize,
    /// MUE speed range, m/s.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Frame length T, s.
    pub frame: f64,

    /// mmW carrier, Hz.
    pub carrier_frequency: f64,
    /// mmW bandwidth w, Hz.
    pub bandwidth: f64,
    pub alpha_los: f64,
    pub alpha_nlos: f64,
    pub reference_distance: f64,
    pub shadowing_los_db: f64,
    pub shadowing_nlos_db: f64,
    pub main_lobe_gain_db: f64,
    pub side_lobe_gain_db: f64,
    pub n_beams: u32,
    pub beamwidth_deg: f64,
    pub noise_psd_dbm_hz: f64,
    /// Minimum time of stay, s.
    pub t_mts: f64,
    /// Play rate Q, segments/s.
    pub play_rate: f64,
    /// Segment size B, bits.
    pub segment_bits: f64,
    /// Cache capacity Ω_max, segments.
    pub cache_capacity: f64,
    /// Energy per inter-frequency scan E^s, J.
    pub energy_per_scan: f64,

    /// µW carrier used for RSS and cell radii, Hz.
    pub uw_carrier_frequency: f64,
    pub uw_alpha: f64,
    pub uw_shadowing_db: f64,
    /// Detection threshold defining the cell edge, dBm.
    pub rss_threshold_dbm: f64,
    /// Time-to-trigger ΔT, s.
    pub ttt: f64,
    pub hysteresis_db: f64,
    pub execution_delay: f64,
    pub filter_window: usize,
    /// Default scan interval T_s, s.
    pub scan_interval: f64,
    /// Simulation step of `simulate`, s.
    pub time_step: f64,

    /// Cache at the start of a single-user path, segments.
    pub single_user_cache: f64,
    pub single_user_speeds: Vec<f64>,
    /// Cache of MUEs entering the target cell, segments.
    pub initial_cache: f64,
    /// SBS quota U^th.
    pub quota: usize,
    /// MBS admission margin ε.
    pub epsilon: f64,
    /// Range of per-MUE HOF tolerances P^th.
    pub p_th_min: f64,
    pub p_th_max: f64,
    pub hof_users: usize,
    pub hof_speeds: Vec<f64>,
    pub trend_speeds: Vec<f64>,
    pub overhead_speeds: Vec<f64>,
    pub user_counts: Vec<usize>,
    pub rate_power_dbm: f64,
    pub rate_distances: Vec<f64>,
    pub rate_headings_deg: Vec<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let mut single_user_speeds: Vec<f64> = (1..=16).map(f64::from).collect();
        single_user_speeds.push(kmh_to_mps(60.0));
        Self {
            seed: 1,
            replications: 200,
            area_radius: 500.0,
            n_sbs: 50,
            min_intercell: 30.0,
            sbs_powers_dbm: vec![20.0, 27.0, 30.0],
            n_mues: 20,
            speed_min: 1.0,
            speed_max: 16.0,
            frame: 60.0,
            carrier_frequency: 73e9,
            bandwidth: 5e9,
            alpha_los: 2.0,
            alpha_nlos: 3.5,
            reference_distance: 1.0,
            shadowing_los_db: 5.2,
            shadowing_nlos_db: 7.6,
            main_lobe_gain_db: 18.0,
            side_lobe_gain_db: -2.0,
            n_beams: 3,
            beamwidth_deg: 10.0,
            noise_psd_dbm_hz: -174.0,
            t_mts: 1.0,
            play_rate: 1e3,
            segment_bits: 1e6,
            cache_capacity: 1e4,
            energy_per_scan: 3e-3,
            uw_carrier_frequency: 2e9,
            uw_alpha: 3.0,
            uw_shadowing_db: 8.0,
            rss_threshold_dbm: -80.0,
            ttt: 0.1,
            hysteresis_db: 3.0,
            execution_delay: 0.15,
            filter_window: 4,
            scan_interval: 1.0,
            time_step: 0.05,
            single_user_cache: 0.0,
            single_user_speeds,
            initial_cache: 1e4,
            quota: 10,
            epsilon: 0.05,
            p_th_min: 0.0,
            p_th_max: 0.025,
            hof_users: 20,
            hof_speeds: (1..=16).map(f64::from).collect(),
            trend_speeds: vec![8.0, 10.0, 12.0],
            overhead_speeds: vec![4.0, 8.0, 12.0],
            user_counts: vec![10, 20, 30, 40, 50],
            rate_power_dbm: 20.0,
            rate_distances: (1..=10).map(|i| 10.0 * f64::from(i)).collect(),
            rate_headings_deg: vec![30.0, 60.0, 90.0, 120.0, 150.0],
        }
    }
}

pub fn kmh_to_mps(kmh: f64) -> f64 {
    kmh / 3.6
}

/// Parses a speed with an explicit unit suffix: `16`, `16m/s`, `60km/h`.
/// A bare number is m/s.
pub fn parse_speed(text: &str) -> Result<f64> {
    let t = text.trim();
    let (num, factor) = if let Some(n) = t.strip_suffix("km/h").or_else(|| t.strip_suffix("kmh")) {
        (n, 1.0 / 3.6)
    } else if let Some(n) = t.strip_suffix("m/s").or_else(|| t.strip_suffix("mps")) {
        (n, 1.0)
    } else {
        (t, 1.0)
    };
    let v: f64 = num
        .trim()
        .parse()
        .map_err(|_| ScenarioError::Config(format!("bad speed `{text}`")))?;
    if !(v >= 0.0) || !v.is_finite() {
        return Err(ScenarioError::Config(format!("speed `{text}` must be nonnegative")));
    }
    Ok(v * factor)
}

impl ScenarioConfig {
    /// Parses a config file; unknown keys and type errors carry line numbers.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses a config file, then applies `key=value` overrides.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| ScenarioError::Config(e.to_string().trim_end().to_string()))?;
        let cfg = cfg.with_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides. Values are read as TOML, falling back
    /// to a bare string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut table = toml::Table::try_from(self).map_err(model)?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| ScenarioError::Config(format!("override `{item}` is not key=value")))?;
            let key = key.trim();
            let current = table
                .get(key)
                .ok_or_else(|| ScenarioError::Config(format!("unknown key `{key}` in override")))?;
            let value = parse_override(key, raw.trim(), current)?;
            table.insert(key.to_string(), value);
        }
        let text = toml::to_string(&table).map_err(model)?;
        let cfg: Self = toml::from_str(&text).map_err(|e| ScenarioError::Config(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(ScenarioError::Config(format!("key `{key}`: {why}")));
        let positive = [
            ("area_radius", self.area_radius),
            ("frame", self.frame),
            ("carrier_frequency", self.carrier_frequency),
            ("bandwidth", self.bandwidth),
            ("alpha_los", self.alpha_los),
            ("alpha_nlos", self.alpha_nlos),
            ("reference_distance", self.reference_distance),
            ("beamwidth_deg", self.beamwidth_deg),
            ("t_mts", self.t_mts),
            ("play_rate", self.play_rate),
            ("segment_bits", self.segment_bits),
            ("energy_per_scan", self.energy_per_scan),
            ("uw_carrier_frequency", self.uw_carrier_frequency),
            ("uw_alpha", self.uw_alpha),
            ("ttt", self.ttt),
            ("scan_interval", self.scan_interval),
            ("time_step", self.time_step),
        ];
        for (key, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return bad(key, "must be positive");
            }
        }
        if self.replications == 0 {
            return bad("replications", "must be at least 1");
        }
        if self.n_sbs == 0 {
            return bad("n_sbs", "must be at least 1");
        }
        if self.sbs_powers_dbm.is_empty() {
            return bad("sbs_powers_dbm", "needs at least one power");
        }
        if !(self.min_intercell >= 0.0) {
            return bad("min_intercell", "must be nonnegative");
        }
        if !(self.speed_min > 0.0 && self.speed_max >= self.speed_min) {
            return bad("speed_min", "need 0 < speed_min <= speed_max");
        }
        if self.n_beams < 2 {
            return bad("n_beams", "must be at least 2");
        }
        if self.beamwidth_deg.to_radians() * f64::from(self.n_beams) > 2.0 * PI + 1e-12 {
            return bad("beamwidth_deg", "beams overlap");
        }
        if !(self.cache_capacity >= 0.0) || !(self.initial_cache >= 0.0) || self.initial_cache > self.cache_capacity {
            return bad("initial_cache", "must lie in [0, cache_capacity]");
        }
        if !(self.single_user_cache >= 0.0) || self.single_user_cache > self.cache_capacity {
            return bad("single_user_cache", "must lie in [0, cache_capacity]");
        }
        if self.quota == 0 {
            return bad("quota", "must be at least 1");
        }
        if !(self.epsilon >= 0.0) {
            return bad("epsilon", "must be nonnegative");
        }
        if !(0.0 <= self.p_th_min && self.p_th_min <= self.p_th_max && self.p_th_max <= 1.0) {
            return bad("p_th_min", "need 0 <= p_th_min <= p_th_max <= 1");
        }
        if self.filter_window == 0 {
            return bad("filter_window", "must be at least 1");
        }
        for (key, list) in [
            ("single_user_speeds", &self.single_user_speeds),
            ("hof_speeds", &self.hof_speeds),
            ("trend_speeds", &self.trend_speeds),
            ("overhead_speeds", &self.overhead_speeds),
        ] {
            if list.is_empty() || list.iter().any(|v| !(*v > 0.0)) {
                return bad(key, "needs positive speeds");
            }
        }
        if self.user_counts.is_empty() || self.user_counts.contains(&0) || self.hof_users == 0 {
            return bad("user_counts", "needs positive user counts");
        }
        if self.rate_distances.iter().any(|d| !(*d > 0.0)) {
            return bad("rate_distances", "needs positive distances");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(model)
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn mmw_channel(&self, los: bool) -> Result<ChannelParams> {
        let (alpha, xi) = if los {
            (self.alpha_los, self.shadowing_los_db)
        } else {
            (self.alpha_nlos, self.shadowing_nlos_db)
        };
        ChannelParams::new(self.carrier_frequency, self.reference_distance, alpha, xi, los).map_err(model)
    }

    pub fn uw_channel(&self) -> Result<ChannelParams> {
        ChannelParams::new(self.uw_carrier_frequency, self.reference_distance, self.uw_alpha, self.uw_shadowing_db, true)
            .map_err(model)
    }

    pub fn antenna(&self) -> Result<AntennaPattern> {
        AntennaPattern::new(self.main_lobe_gain_db, self.side_lobe_gain_db, self.beamwidth_deg.to_radians()).map_err(model)
    }

    pub fn mmw_budget(&self, tx_power_dbm: f64, params: &ChannelParams) -> Result<LinkBudget> {
        LinkBudget::for_channel(tx_power_dbm, &self.antenna()?, self.bandwidth, self.noise_psd_dbm_hz, params).map_err(model)
    }

    pub fn empty_cache(&self) -> Result<CacheState> {
        CacheState::new(0.0, self.segment_bits, self.play_rate, self.cache_capacity).map_err(model)
    }

    pub fn handover_config(&self, n_sbs: usize) -> HandoverConfig {
        let mut hc = HandoverConfig::new(0..n_sbs, Some(n_sbs));
        hc.ttt = self.ttt;
        hc.hysteresis_db = self.hysteresis_db;
        hc.execution_delay = self.execution_delay;
        hc.window = self.filter_window;
        hc.detection_threshold_db = self.rss_threshold_dbm;
        hc.scan_interval = self.scan_interval;
        hc.t_mts = self.t_mts;
        hc
    }
}

fn parse_override(key: &str, raw: &str, current: &toml::Value) -> Result<toml::Value> {
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let value = match (current, parsed) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (toml::Value::Array(cur), toml::Value::Array(items)) if cur.first().is_some_and(toml::Value::is_float) => {
            toml::Value::Array(
                items
                    .into_iter()
                    .map(|v| match v {
                        toml::Value::Integer(i) => toml::Value::Float(i as f64),
                        other => other,
                    })
                    .collect(),
            )
        }
        (_, v) => v,
    };
    if std::mem::discriminant(current) != std::mem::discriminant(&value) {
        return Err(ScenarioError::Config(format!(
            "key `{key}`: expected {}, got `{raw}`",
            current.type_str()
        )));
    }
    Ok(value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmallCell {
    pub position: [f64; 2],
    pub power_dbm: f64,
    /// µW cell radius at the detection threshold, m.
    pub radius: f64,
    /// Start angle of the first mmW sector, rad.
    pub beam_anchor: f64,
}

impl SmallCell {
    pub fn disk(&self) -> CellDisk {
        CellDisk {
            center: self.position,
            radius: self.radius,
        }
    }
}

/// One drawn network with its MUEs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub area_radius: f64,
    pub sbss: Vec<SmallCell>,
    pub mues: Vec<Pose>,
}

impl Scenario {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(model)
    }

    /// SBS nearest to the area center.
    pub fn central_sbs(&self) -> usize {
        (0..self.sbss.len())
            .min_by(|&a, &b| {
                let (pa, pb) = (self.sbss[a].position, self.sbss[b].position);
                pa[0].hypot(pa[1]).total_cmp(&pb[0].hypot(pb[1])).then(a.cmp(&b))
            })
            .unwrap_or(0)
    }
}

fn uniform_in_disk<R: Rng + ?Sized>(rng: &mut R, radius: f64) -> [f64; 2] {
    let r = radius * rng.random::<f64>().sqrt();
    let a = rng.random_range(0.0..2.0 * PI);
    [r * a.cos(), r * a.sin()]
}

pub fn generate_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<Scenario> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uw = cfg.uw_channel()?;
    let sector = 2.0 * PI / f64::from(cfg.n_beams);
    let mut sbss: Vec<SmallCell> = Vec::with_capacity(cfg.n_sbs);
    for placed in 0..cfg.n_sbs {
        let spot = (0..PLACEMENT_ATTEMPTS)
            .map(|_| uniform_in_disk(&mut rng, cfg.area_radius))
            .find(|p| {
                sbss.iter()
                    .all(|s| (p[0] - s.position[0]).hypot(p[1] - s.position[1]) >= cfg.min_intercell)
            })
            .ok_or(ScenarioError::Packing {
                placed,
                requested: cfg.n_sbs,
                spacing: cfg.min_intercell,
                radius: cfg.area_radius,
            })?;
        let power_dbm = cfg.sbs_powers_dbm[rng.random_range(0..cfg.sbs_powers_dbm.len())];
        sbss.push(SmallCell {
            position: spot,
            power_dbm,
            radius: coverage_radius(power_dbm, cfg.rss_threshold_dbm, &uw),
            beam_anchor: rng.random_range(0.0..sector),
        });
    }
    let mues = (0..cfg.n_mues)
        .map(|_| {
            let [x, y] = uniform_in_disk(&mut rng, cfg.area_radius);
            let heading = rng.random_range(0.0..2.0 * PI);
            let speed = if cfg.speed_max > cfg.speed_min {
                rng.random_range(cfg.speed_min..cfg.speed_max)
            } else {
                cfg.speed_min
            };
            Pose::new(x, y, heading, speed)
        })
        .collect();
    Ok(Scenario {
        seed,
        area_radius: cfg.area_radius,
        sbss,
        mues,
    })
}

/// Which of the cell's sectors contains `p`, if any.
fn in_beam(cell: &SmallCell, p: [f64; 2], n_beams: u32, beamwidth: f64) -> bool {
    let phi = (p[1] - cell.position[1]).atan2(p[0] - cell.position[0]);
    let sector = 2.0 * PI / f64::from(n_beams);
    (phi - cell.beam_anchor).rem_euclid(sector) < beamwidth
}

/// µW received power from `cell` at distance `d`, no shadowing.
fn uw_rss(cell: &SmallCell, d: f64, uw: &ChannelParams) -> Result<f64> {
    Ok(cell.power_dbm - path_loss_db(d.max(uw.reference_distance), uw, None).map_err(model)?)
}

/// Distance from `p` along unit direction `dir` to the area edge.
fn exit_distance(p: [f64; 2], dir: [f64; 2], radius: f64) -> f64 {
    let b = p[0] * dir[0] + p[1] * dir[1];
    let c = p[0] * p[0] + p[1] * p[1] - radius * radius;
    (-b + (b * b - c).max(0.0).sqrt()).max(0.0)
}

/// A straight path sampled every [`PATH_STEP`] meters up to the area edge.
#[derive(Debug, Clone)]
pub struct SampledPath {
    /// Strongest in-range SBS at each sample.
    pub serving: Vec<Option<usize>>,
    /// mmW rate from the strongest SBS when inside one of its beams, bit/s.
    pub beam_rate: Vec<Option<f64>>,
    /// Index one past the end of the run each sample belongs to.
    pub run_end: Vec<usize>,
}

impl SampledPath {
    pub fn trace(cfg: &ScenarioConfig, scn: &Scenario, start: [f64; 2], heading: f64) -> Result<Self> {
        let uw = cfg.uw_channel()?;
        let los = cfg.mmw_channel(true)?;
        let budgets = scn
            .sbss
            .iter()
            .map(|c| cfg.mmw_budget(c.power_dbm, &los))
            .collect::<Result<Vec<_>>>()?;
        let dir = [heading.cos(), heading.sin()];
        let length = exit_distance(start, dir, scn.area_radius);
        let n = (length / PATH_STEP).floor() as usize + 1;
        let bw = cfg.beamwidth_deg.to_radians();
        let mut serving = Vec::with_capacity(n);
        let mut beam_rate = Vec::with_capacity(n);
        for i in 0..n {
            let s = i as f64 * PATH_STEP;
            let p = [start[0] + s * dir[0], start[1] + s * dir[1]];
            let mut best: Option<(usize, f64, f64)> = None;
            for (k, cell) in scn.sbss.iter().enumerate() {
                let d = (p[0] - cell.position[0]).hypot(p[1] - cell.position[1]);
                if d > cell.radius {
                    continue;
                }
                let rss = uw_rss(cell, d, &uw)?;
                if best.is_none_or(|(_, b, _)| rss > b) {
                    best = Some((k, rss, d));
                }
            }
            serving.push(best.map(|(k, _, _)| k));
            let rate = match best {
                Some((k, _, d)) if in_beam(&scn.sbss[k], p, cfg.n_beams, bw) => {
                    Some(instantaneous_rate(d.max(cfg.reference_distance), &budgets[k], &los).map_err(model)?)
                }
                _ => None,
            };
            beam_rate.push(rate);
        }
        let mut run_end = vec![n; n];
        for i in (0..n.saturating_sub(1)).rev() {
            run_end[i] = if serving[i + 1] == serving[i] { run_end[i + 1] } else { i + 1 };
        }
        Ok(Self {
            serving,
            beam_rate,
            run_end,
        })
    }
}

/// Handover attempts and failures of one MUE over one frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PathOutcome {
    pub handovers: usize,
    pub failures: usize,
    /// Cells crossed on cached playback.
    pub skipped: usize,
}

/// Walks a sampled path at `speed` for one frame. Every change of the
/// strongest SBS is a handover whose time of stay is the length of the new
/// run. With caching, beam crossings of the serving SBS fill the cache, and
/// the MUE coasts through a whole cell instead of handing over when its
/// cached playback lasts the cell's time of stay plus ΔT.
pub fn walk_path(cfg: &ScenarioConfig, path: &SampledPath, speed: f64, caching: bool) -> Result<PathOutcome> {
    let n = path.serving.len();
    let last = (((speed * cfg.frame) / PATH_STEP).floor() as usize).min(n.saturating_sub(1));
    let dt = PATH_STEP / speed;
    let mut cache = CacheState {
        segments: cfg.single_user_cache,
        ..cfg.empty_cache()?
    };
    let tos = |i: usize| {
        if path.run_end[i] >= n {
            f64::INFINITY
        } else {
            (path.run_end[i] - i) as f64 * dt
        }
    };
    let mut out = PathOutcome::default();
    let mut attached = path.serving[0].is_some();
    let mut i = 1;
    while i <= last {
        if path.serving[i] != path.serving[i - 1] {
            attached = false;
            if path.serving[i].is_some() {
                let stay = tos(i);
                if caching && cache.playback_time() >= stay + cfg.ttt {
                    cache = cache.drain(stay).0;
                    out.skipped += 1;
                    i = path.run_end[i];
                    continue;
                }
                out.handovers += 1;
                out.failures += usize::from(handover::hof_indicator(stay, cfg.t_mts));
                attached = true;
            }
        }
        if caching && attached {
            if let Some(rate) = path.beam_rate[i] {
                cache = cache_fill(rate, dt, &cache);
            }
        }
        i += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    HofVsSpeed,
    RateVsDistance,
    HofMultiuser,
    LoadVsUsers,
    EnergyVsUsers,
    OverheadVsUsers,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::HofVsSpeed,
        Experiment::RateVsDistance,
        Experiment::HofMultiuser,
        Experiment::LoadVsUsers,
        Experiment::EnergyVsUsers,
        Experiment::OverheadVsUsers,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::HofVsSpeed => "hof_vs_speed",
            Experiment::RateVsDistance => "rate_vs_distance",
            Experiment::HofMultiuser => "hof_multiuser",
            Experiment::LoadVsUsers => "load_vs_users",
            Experiment::EnergyVsUsers => "energy_vs_users",
            Experiment::OverheadVsUsers => "overhead_vs_users",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| ScenarioError::UnknownExperiment(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub name: String,
    pub columns: Vec<Column>,
    pub rows: Vec<Vec<f64>>,
    pub replication_count: usize,
    pub seed: u64,
    /// Wall-clock seconds; not written to the CSV.
    pub runtime: f64,
}

impl ExperimentResult {
    fn new(exp: Experiment, cfg: &ScenarioConfig, columns: &[(&str, &str)], replications: usize) -> Self {
        Self {
            name: exp.name().to_string(),
            columns: columns
                .iter()
                .map(|(n, u)| Column {
                    name: n.to_string(),
                    unit: u.to_string(),
                })
                .collect(),
            rows: Vec::new(),
            replication_count: replications,
            seed: cfg.seed,
            runtime: 0.0,
        }
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c.name == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    /// Rows where every `(column, value)` filter matches exactly.
    pub fn select(&self, filters: &[(&str, f64)]) -> Vec<&Vec<f64>> {
        let idx: Vec<(usize, f64)> = filters
            .iter()
            .filter_map(|(n, v)| self.columns.iter().position(|c| c.name == *n).map(|i| (i, *v)))
            .collect();
        self.rows
            .iter()
            .filter(|r| idx.iter().all(|(i, v)| r[*i] == *v))
            .collect()
    }

    /// Value of `column` in the single row matching `filters`.
    pub fn value(&self, column: &str, filters: &[(&str, f64)]) -> Option<f64> {
        let i = self.columns.iter().position(|c| c.name == column)?;
        match self.select(filters).as_slice() {
            [row] => Some(row[i]),
            _ => None,
        }
    }

    /// Header cells read `name [unit]`; seed and replication count are
    /// repeated on each row.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        let mut header: Vec<String> = self.columns.iter().map(|c| format!("{} [{}]", c.name, c.unit)).collect();
        header.push("seed".into());
        header.push("replications".into());
        w.write_record(&header).map_err(model)?;
        for row in &self.rows {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(self.seed.to_string());
            rec.push(self.replication_count.to_string());
            w.write_record(&rec).map_err(model)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_manifest<W: Write>(&self, cfg: &ScenarioConfig, mut sink: W) -> Result<()> {
        writeln!(sink, "experiment = \"{}\"", self.name)?;
        writeln!(sink, "seed = {}", self.seed)?;
        writeln!(sink, "replications = {}", self.replication_count)?;
        writeln!(sink, "config_sha256 = \"{}\"", cfg.hash()?)?;
        writeln!(sink, "mmcache_version = \"{}\"", env!("CARGO_PKG_VERSION"))?;
        writeln!(sink, "runtime_seconds = {:.3}", self.runtime)?;
        Ok(())
    }
}

/// Mean and 95% normal confidence half-width.
pub fn mean_ci(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

/// Generator for replication `rep` of stream `stream`.
pub fn replication_rng(seed: u64, stream: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 32) | rep as u64);
    rng
}

const STREAM_SINGLE_USER: u64 = 1;
const STREAM_MULTI_USER: u64 = 2;

/// One MUE crossing into the target cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entrant {
    /// Entry point and heading, unit speed.
    pub pose: Pose,
    pub p_th: f64,
    /// Distance to the next SBS entered, or to the area edge if none.
    pub first_leg: f64,
    pub next: Option<usize>,
    /// Distance from that entry to the one after, or to the area edge.
    pub second_leg: f64,
}

/// Earliest entry ahead of `from` into a disk not in `skip`.
fn next_entry(scn: &Scenario, pose: &Pose, from: f64, skip: &[usize]) -> Option<(usize, f64)> {
    scn.sbss
        .iter()
        .enumerate()
        .filter(|(k, _)| !skip.contains(k))
        .filter_map(|(k, c)| c.disk().path_interval(pose).map(|(t_in, _)| (k, t_in)))
        .filter(|&(_, t_in)| t_in > from + 1e-9)
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
}

/// Draws `users` MUEs entering `target` at uniform boundary points with
/// uniform inward headings.
pub fn draw_entrants<R: Rng + ?Sized>(cfg: &ScenarioConfig, scn: &Scenario, target: usize, users: usize, rng: &mut R) -> Vec<Entrant> {
    let cell = &scn.sbss[target];
    (0..users)
        .map(|_| {
            let phi = rng.random_range(0.0..2.0 * PI);
            let off = rng.random_range(-PI / 2.0..PI / 2.0);
            let p_th = if cfg.p_th_max > cfg.p_th_min {
                rng.random_range(cfg.p_th_min..cfg.p_th_max)
            } else {
                cfg.p_th_min
            };
            let x = cell.position[0] + cell.radius * phi.cos();
            let y = cell.position[1] + cell.radius * phi.sin();
            let pose = Pose::new(x, y, normalize_angle(phi + PI + off), 1.0);
            let edge = exit_distance([x, y], pose.direction(), scn.area_radius);
            let (next, first_leg, second_leg) = match next_entry(scn, &pose, 0.0, &[target]) {
                Some((j, d1)) => {
                    let d2 = next_entry(scn, &pose, d1, &[target, j])
                        .map(|(_, t)| t - d1)
                        .unwrap_or((edge - d1).max(0.0));
                    (Some(j), d1, d2)
                }
                None => (None, edge, 0.0),
            };
            Entrant {
                pose,
                p_th,
                first_leg: first_leg.max(1e-6),
                next,
                second_leg: second_leg.max(1e-6),
            }
        })
        .collect()
}

/// Per-replication observables of one multi-user game.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MultiUserOutcome {
    /// MUEs the target SBS serves in period 1.
    pub load: usize,
    pub proposals_target: usize,
    pub proposals_total: usize,
    /// MUEs on cached playback in period 1, hence without a scan.
    pub muted: usize,
    /// Expected share of MUEs with a HOF under the matching.
    pub hof_matched: f64,
    /// Expected share with a HOF when every MUE hands over to each cell it enters.
    pub hof_conventional: f64,
}

/// Builds the two-period game for MUEs entering `target` at `speed`.
///
/// Period 1 lasts until the next SBS is reached and period 2 until the one
/// after. The target's utility for an MUE is period-1 time minus cached
/// playback; the next SBS's is time to the second entry minus playback left
/// on arrival.
pub fn multiuser_game(cfg: &ScenarioConfig, scn: &Scenario, target: usize, entrants: &[Entrant], speed: f64) -> Result<(GameInstance, Utilities)> {
    let mut cells = vec![target];
    for e in entrants {
        if let Some(j) = e.next {
            if !cells.contains(&j) {
                cells.push(j);
            }
        }
    }
    let local: BTreeMap<usize, usize> = cells.iter().enumerate().map(|(i, &k)| (k, i)).collect();
    let sbss = cells
        .iter()
        .map(|&k| SbsSpec {
            cell: scn.sbss[k].disk(),
            quota: cfg.quota,
        })
        .collect();
    let mues = entrants
        .iter()
        .map(|e| MueSpec {
            pose: Pose { speed, ..e.pose },
            cache_segments: cfg.initial_cache,
            p_th: e.p_th,
            first_targets: vec![0],
            second_targets: e.next.map(|j| vec![local[&j]]).unwrap_or_default(),
            scan_interval: Some(e.first_leg / speed),
            period: Some(e.first_leg / speed),
            second_period: Some(e.second_leg / speed),
        })
        .collect();
    let mut inst = GameInstance::new(mues, sbss);
    inst.epsilon = cfg.epsilon;
    inst.t_mts = cfg.t_mts;
    inst.scan_interval = cfg.scan_interval;
    inst.play_rate = cfg.play_rate;
    let mut util = Utilities::compute(&inst).map_err(model)?;
    for (u, e) in entrants.iter().enumerate() {
        if let Some(j) = e.next {
            let arrival_left = (inst.playback(u) - e.first_leg / speed).max(0.0);
            util.gamma[u][local[&j]] = e.second_leg / speed - arrival_left;
        }
    }
    Ok((inst, util))
}

pub fn multiuser_round(cfg: &ScenarioConfig, scn: &Scenario, target: usize, entrants: &[Entrant], speed: f64) -> Result<MultiUserOutcome> {
    let (inst, util) = multiuser_game(cfg, scn, target, entrants, speed)?;
    let game = Game::with_utilities(&inst, util).map_err(model)?;
    let out = dynamic_match_in(&game);
    let hof = |k: usize| -> Result<f64> {
        Ok(hof_probability(speed, cfg.t_mts, inst.sbss[k].cell.radius).map_err(model)?.probability)
    };
    let mut res = MultiUserOutcome {
        load: out.matching.members(PlayerId::sbs(0), 1).len(),
        proposals_target: proposals_to(&out.trace, 0),
        proposals_total: signaling_overhead(&out.trace),
        ..Default::default()
    };
    let n = entrants.len().max(1) as f64;
    for u in 0..entrants.len() {
        let service = realised_service(&inst, &out.matching, u);
        if service[0] == Service::Cache {
            res.muted += 1;
        }
        let mut ok = 1.0;
        for s in service {
            if let Service::Sbs(k) = s {
                ok *= 1.0 - hof(k)?;
            }
        }
        res.hof_matched += (1.0 - ok) / n;
        let mut ok_conv = 1.0 - hof(0)?;
        if let Some(&j) = inst.mues[u].second_targets.first() {
            ok_conv *= 1.0 - hof(j)?;
        }
        res.hof_conventional += (1.0 - ok_conv) / n;
    }
    Ok(res)
}

/// Replication `rep` of the multi-user setting: a fresh network and the
/// largest needed set of entrants; smaller user counts take a prefix.
fn multiuser_draw(cfg: &ScenarioConfig, rep: usize, users: usize) -> Result<(Scenario, usize, Vec<Entrant>)> {
    let mut rng = replication_rng(cfg.seed, STREAM_MULTI_USER, rep);
    let scn = generate_scenario(cfg, rng.next_u64())?;
    let target = scn.central_sbs();
    let entrants = draw_entrants(cfg, &scn, target, users, &mut rng);
    Ok((scn, target, entrants))
}

fn replicate<T: Send, F>(cfg: &ScenarioConfig, f: F) -> Result<Vec<T>>
where
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    (0..cfg.replications).into_par_iter().map(f).collect()
}

fn hof_vs_speed(cfg: &ScenarioConfig) -> Result<ExperimentResult> {
    let speeds = &cfg.single_user_speeds;
    let per_rep = replicate(cfg, |rep| {
        let mut rng = replication_rng(cfg.seed, STREAM_SINGLE_USER, rep);
        let scn = generate_scenario(cfg, rng.next_u64())?;
        let start = uniform_in_disk(&mut rng, cfg.area_radius);
        let heading = rng.random_range(0.0..2.0 * PI);
        let path = SampledPath::trace(cfg, &scn, start, heading)?;
        speeds
            .iter()
            .map(|&v| Ok((walk_path(cfg, &path, v, false)?, walk_path(cfg, &path, v, true)?)))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut res = ExperimentResult::new(
        Experiment::HofVsSpeed,
        cfg,
        &[
            ("speed", "m/s"),
            ("speed_kmh", "km/h"),
            ("hof_no_cache", "failures/frame"),
            ("hof_no_cache_ci95", "failures/frame"),
            ("hof_cache", "failures/frame"),
            ("hof_cache_ci95", "failures/frame"),
            ("reduction", "fraction"),
            ("handovers_no_cache", "handovers/frame"),
            ("handovers_cache", "handovers/frame"),
        ],
        cfg.replications,
    );
    for (i, &v) in speeds.iter().enumerate() {
        let col = |f: &dyn Fn(&(PathOutcome, PathOutcome)) -> f64| per_rep.iter().map(|r| f(&r[i])).collect::<Vec<_>>();
        let (base, base_ci) = mean_ci(&col(&|r| r.0.failures as f64));
        let (cached, cached_ci) = mean_ci(&col(&|r| r.1.failures as f64));
        let (ho_base, _) = mean_ci(&col(&|r| r.0.handovers as f64));
        let (ho_cached, _) = mean_ci(&col(&|r| r.1.handovers as f64));
        let reduction = if base > 0.0 { 1.0 - cached / base } else { 0.0 };
        res.rows.push(vec![v, v * 3.6, base, base_ci, cached, cached_ci, reduction, ho_base, ho_cached]);
    }
    Ok(res)
}

/// Average caching rate for an MUE entering a beam at `distance` from the
/// SBS with heading `heading` (rad) relative to the entry edge.
pub fn caching_rate(cfg: &ScenarioConfig, distance: f64, heading: f64, los: bool) -> Result<f64> {
    let params = cfg.mmw_channel(los)?;
    let budget = cfg.mmw_budget(cfg.rate_power_dbm, &params)?;
    let pose = Pose::new(distance, 0.0, heading, 1.0);
    let beam = BeamGeometry::from_entry_pose([0.0, 0.0], cfg.n_beams, cfg.beamwidth_deg.to_radians(), &pose).map_err(model)?;
    average_caching_rate(&pose, &beam, &budget, &params).map_err(model)
}

fn rate_vs_distance(cfg: &ScenarioConfig) -> Result<ExperimentResult> {
    let mut res = ExperimentResult::new(
        Experiment::RateVsDistance,
        cfg,
        &[
            ("distance", "m"),
            ("heading", "deg"),
            ("rate_los", "Gbit/s"),
            ("rate_nlos", "Gbit/s"),
        ],
        1,
    );
    for &h in &cfg.rate_headings_deg {
        for &d in &cfg.rate_distances {
            let heading = h.to_radians();
            res.rows.push(vec![
                d,
                h,
                caching_rate(cfg, d, heading, true)? / 1e9,
                caching_rate(cfg, d, heading, false)? / 1e9,
            ]);
        }
    }
    Ok(res)
}

/// Runs every (users, speed) cell of a multi-user sweep over all replications.
fn multiuser_sweep(cfg: &ScenarioConfig, users: &[usize], speeds: &[f64]) -> Result<Vec<Vec<MultiUserOutcome>>> {
    let max_users = users.iter().copied().max().unwrap_or(0);
    let per_rep = replicate(cfg, |rep| {
        let (scn, target, entrants) = multiuser_draw(cfg, rep, max_users)?;
        let mut cells = Vec::with_capacity(users.len() * speeds.len());
        for &u in users {
            for &v in speeds {
                cells.push(multiuser_round(cfg, &scn, target, &entrants[..u], v)?);
            }
        }
        Ok(cells)
    })?;
    let n_cells = users.len() * speeds.len();
    Ok((0..n_cells).map(|c| per_rep.iter().map(|r| r[c]).collect()).collect())
}

fn hof_multiuser(cfg: &ScenarioConfig) -> Result<ExperimentResult> {
    let cells = multiuser_sweep(cfg, &[cfg.hof_users], &cfg.hof_speeds)?;
    let mut res = ExperimentResult::new(
        Experiment::HofMultiuser,
        cfg,
        &[
            ("users", "count"),
            ("speed", "m/s"),
            ("hof_conventional", "probability"),
            ("hof_conventional_ci95", "probability"),
            ("hof_matched", "probability"),
            ("hof_matched_ci95", "probability"),
        ],
        cfg.replications,
    );
    for (i, &v) in cfg.hof_speeds.iter().enumerate() {
        let (c, c_ci) = mean_ci(&cells[i].iter().map(|o| o.hof_conventional).collect::<Vec<_>>());
        let (m, m_ci) = mean_ci(&cells[i].iter().map(|o| o.hof_matched).collect::<Vec<_>>());
        res.rows.push(vec![cfg.hof_users as f64, v, c, c_ci, m, m_ci]);
    }
    Ok(res)
}

fn users_grid(cfg: &ScenarioConfig, exp: Experiment, speeds: &[f64]) -> Result<ExperimentResult> {
    let cells = multiuser_sweep(cfg, &cfg.user_counts, speeds)?;
    let columns: &[(&str, &str)] = match exp {
        Experiment::LoadVsUsers => &[
            ("users", "count"),
            ("speed", "m/s"),
            ("load", "MUEs"),
            ("load_ci95", "MUEs"),
        ],
        Experiment::EnergyVsUsers => &[
            ("users", "count"),
            ("speed", "m/s"),
            ("baseline_energy", "mJ"),
            ("saved_energy", "mJ"),
            ("saved_energy_ci95", "mJ"),
            ("savings", "percent"),
        ],
        _ => &[
            ("users", "count"),
            ("speed", "m/s"),
            ("proposals_target", "messages"),
            ("proposals_target_ci95", "messages"),
            ("proposals_total", "messages"),
        ],
    };
    let mut res = ExperimentResult::new(exp, cfg, columns, cfg.replications);
    let mut c = 0;
    for &u in &cfg.user_counts {
        for &v in speeds {
            let obs = &cells[c];
            c += 1;
            let pick = |f: &dyn Fn(&MultiUserOutcome) -> f64| obs.iter().map(f).collect::<Vec<_>>();
            let uf = u as f64;
            let row = match exp {
                Experiment::LoadVsUsers => {
                    let (m, ci) = mean_ci(&pick(&|o| o.load as f64));
                    vec![uf, v, m, ci]
                }
                Experiment::EnergyVsUsers => {
                    let e_mj = cfg.energy_per_scan * 1e3;
                    let baseline = uf * e_mj;
                    let (m, ci) = mean_ci(&pick(&|o| o.muted as f64 * e_mj));
                    vec![uf, v, baseline, m, ci, 100.0 * m / baseline]
                }
                _ => {
                    let (m, ci) = mean_ci(&pick(&|o| o.proposals_target as f64));
                    let (total, _) = mean_ci(&pick(&|o| o.proposals_total as f64));
                    vec![uf, v, m, ci, total]
                }
            };
            res.rows.push(row);
        }
    }
    Ok(res)
}

pub fn run_experiment(exp: Experiment, cfg: &ScenarioConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let started = Instant::now();
    let mut res = match exp {
        Experiment::HofVsSpeed => hof_vs_speed(cfg)?,
        Experiment::RateVsDistance => rate_vs_distance(cfg)?,
        Experiment::HofMultiuser => hof_multiuser(cfg)?,
        Experiment::LoadVsUsers => users_grid(cfg, exp, &cfg.trend_speeds)?,
        Experiment::EnergyVsUsers => users_grid(cfg, exp, &cfg.trend_speeds)?,
        Experiment::OverheadVsUsers => users_grid(cfg, exp, &cfg.overhead_speeds)?,
    };
    res.runtime = started.elapsed().as_secs_f64();
    Ok(res)
}

/// Output of the time-stepped handover simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub events: Vec<HandoverEvent>,
    pub summary: Vec<MueSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MueSummary {
    pub mue: usize,
    pub speed: f64,
    pub scans: usize,
    pub handovers: usize,
    pub failures: usize,
    /// Segments held at the end of the frame.
    pub cache_segments: f64,
}

/// Moves every MUE of the scenario in a straight line for one frame and
/// runs the handover state machine on noiseless µW RSS samples. With
/// `caching`, MUEs fill their cache while attached to an SBS inside one of
/// its beams and mute scans while the cache lasts.
pub fn simulate(cfg: &ScenarioConfig, seed: u64, caching: bool) -> Result<Simulation> {
    let scn = generate_scenario(cfg, seed)?;
    let uw = cfg.uw_channel()?;
    let los = cfg.mmw_channel(true)?;
    let budgets = scn
        .sbss
        .iter()
        .map(|c| cfg.mmw_budget(c.power_dbm, &los))
        .collect::<Result<Vec<_>>>()?;
    let mut hc = cfg.handover_config(scn.sbss.len());
    hc.caching = caching;
    let mbs: CellId = scn.sbss.len();
    let steps = (cfg.frame / cfg.time_step).round() as usize;
    let bw = cfg.beamwidth_deg.to_radians();
    let runs = scn
        .mues
        .par_iter()
        .enumerate()
        .map(|(u, start)| -> Result<(Vec<HandoverEvent>, MueSummary)> {
            let cache = caching.then(|| CacheState {
                segments: cfg.single_user_cache,
                ..cfg.empty_cache().expect("validated cache")
            });
            let mut state = HandoverState::new(u, cache);
            state.serving = Some(mbs);
            state.phase = Phase::MBSAttached;
            let mut events = Vec::new();
            let mut summary = MueSummary {
                mue: u,
                speed: start.speed,
                scans: 0,
                handovers: 0,
                failures: 0,
                cache_segments: 0.0,
            };
            for i in 0..steps {
                let pose = start.advanced(i as f64 * cfg.time_step);
                let p = pose.position();
                let mut meas = Vec::new();
                for (k, cell) in scn.sbss.iter().enumerate() {
                    let d = (p[0] - cell.position[0]).hypot(p[1] - cell.position[1]);
                    meas.push((k, uw_rss(cell, d, &uw)?));
                }
                if caching {
                    if let (Some(k), Some(c)) = (state.serving.filter(|&k| k < mbs), state.cache) {
                        let cell = &scn.sbss[k];
                        let d = (p[0] - cell.position[0]).hypot(p[1] - cell.position[1]);
                        if d <= cell.radius && in_beam(cell, p, cfg.n_beams, bw) {
                            let rate = instantaneous_rate(d.max(cfg.reference_distance), &budgets[k], &los).map_err(model)?;
                            state.cache = Some(cache_fill(rate, cfg.time_step, &c));
                        }
                    }
                }
                let (next, out) = handover::step(&state, &meas, cfg.time_step, &hc, &AcceptAll).map_err(model)?;
                for e in &out.events {
                    match e.kind {
                        EventKind::Scan => summary.scans += 1,
                        EventKind::HoComplete => summary.handovers += 1,
                        EventKind::Hof => summary.failures += 1,
                        _ => {}
                    }
                }
                events.extend(out.events);
                state = next;
            }
            summary.cache_segments = state.cache.map_or(0.0, |c| c.segments);
            Ok((events, summary))
        })
        .collect::<Result<Vec<_>>>()?;
    let (streams, summary): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    Ok(Simulation {
        events: handover::merge_events(streams),
        summary,
    })
}

pub fn write_summary_csv<W: Write>(summary: &[MueSummary], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for row in summary {
        w.serialize(row).map_err(model)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            replications: 4,
            ..Default::default()
        }
    }

    #[test]
    fn defaults_validate() {
        ScenarioConfig::default().validate().unwrap();
    }

    #[test]
    fn same_seed_same_snapshot() {
        let cfg = small();
        let a = generate_scenario(&cfg, 9).unwrap().to_toml().unwrap();
        let b = generate_scenario(&cfg, 9).unwrap().to_toml().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn default_packing_succeeds_and_respects_spacing() {
        let cfg = small();
        let scn = generate_scenario(&cfg, 3).unwrap();
        assert_eq!(scn.sbss.len(), 50);
        for (i, a) in scn.sbss.iter().enumerate() {
            assert!(a.position[0].hypot(a.position[1]) <= cfg.area_radius);
            for b in &scn.sbss[i + 1..] {
                let d = (a.position[0] - b.position[0]).hypot(a.position[1] - b.position[1]);
                assert!(d >= cfg.min_intercell);
            }
        }
    }

    #[test]
    fn infeasible_packing_fails() {
        let cfg = ScenarioConfig {
            n_sbs: 2,
            min_intercell: 1000.0,
            ..small()
        };
        assert!(matches!(generate_scenario(&cfg, 1), Err(ScenarioError::Packing { .. })));
    }

    #[test]
    fn radius_is_threshold_contour() {
        let cfg = small();
        let uw = cfg.uw_channel().unwrap();
        let scn = generate_scenario(&cfg, 5).unwrap();
        for c in &scn.sbss {
            assert!((uw_rss(c, c.radius, &uw).unwrap() - cfg.rss_threshold_dbm).abs() < 1e-9);
            let rounded = match c.power_dbm as i64 {
                20 => 112.0,
                27 => 193.0,
                _ => 242.0,
            };
            assert!((c.radius - rounded).abs() < 1.0, "{} dBm -> {}", c.power_dbm, c.radius);
        }
    }

    #[test]
    fn speed_units() {
        assert!((parse_speed("60km/h").unwrap() - 16.6667).abs() < 1e-3);
        assert_eq!(parse_speed("8m/s").unwrap(), 8.0);
        assert_eq!(parse_speed("8").unwrap(), 8.0);
        assert!(parse_speed("fast").is_err());
    }

    #[test]
    fn override_names_unknown_key() {
        let err = ScenarioConfig::default()
            .with_overrides(&["no_such_key=3".to_string()])
            .unwrap_err();
        assert!(err.to_string().contains("no_such_key"));
        let cfg = ScenarioConfig::default()
            .with_overrides(&["n_sbs=10".into(), "frame=30".into(), "trend_speeds=[8, 9]".into()])
            .unwrap();
        assert_eq!(cfg.n_sbs, 10);
        assert_eq!(cfg.frame, 30.0);
        assert_eq!(cfg.trend_speeds, vec![8.0, 9.0]);
    }

    #[test]
    fn config_error_has_line() {
        let err = ScenarioConfig::from_toml_str("seed = 3\nbogus = 1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus") && msg.contains('2'), "{msg}");
    }

    #[test]
    fn unknown_experiment() {
        assert!("no_such_experiment".parse::<Experiment>().is_err());
        for e in Experiment::ALL {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
        }
    }
}
