//! Per-MUE handover state machine: periodic scanning, time-to-trigger
//! averaging, trigger, execution, cache coasting and handover-failure records.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::caching::{next_scan_interval, CacheState};

pub type CellId = usize;

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HandoverError {
    #[error("invalid handover input: {0}")]
    Invalid(String),
    #[error("measurement for unknown base station {0}")]
    UnknownCell(CellId),
    #[error("event log: {0}")]
    Log(String),
}

pub type Result<T> = std::result::Result<T, HandoverError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandoverConfig {
    /// Time-to-trigger ΔT in seconds.
    pub ttt: f64,
    pub hysteresis_db: f64,
    pub execution_delay: f64,
    /// Moving-average length of the RSS filter.
    pub window: usize,
    pub detection_threshold_db: f64,
    /// Default scan interval T_s.
    pub scan_interval: f64,
    pub t_mts: f64,
    /// Mute scanning while the cache outlasts ΔT.
    pub caching: bool,
    pub mbs: Option<CellId>,
    /// Small cells the machine accepts measurements for.
    pub cells: BTreeSet<CellId>,
}

impl HandoverConfig {
    pub fn new(cells: impl IntoIterator<Item = CellId>, mbs: Option<CellId>) -> Self {
        Self {
            ttt: 0.1,
            hysteresis_db: 3.0,
            execution_delay: 0.15,
            window: 4,
            detection_threshold_db: -80.0,
            scan_interval: 1.0,
            t_mts: 1.0,
            caching: false,
            mbs,
            cells: cells.into_iter().collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("ttt", self.ttt),
            ("scan_interval", self.scan_interval),
            ("t_mts", self.t_mts),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(HandoverError::Invalid(format!("{name} must be positive")));
            }
        }
        if !(self.execution_delay >= 0.0) || !(self.hysteresis_db >= 0.0) {
            return Err(HandoverError::Invalid(
                "execution delay and hysteresis must be nonnegative".into(),
            ));
        }
        if self.window == 0 {
            return Err(HandoverError::Invalid("window must hold at least one sample".into()));
        }
        if let Some(m) = self.mbs {
            if self.cells.contains(&m) {
                return Err(HandoverError::Invalid(format!("MBS id {m} also listed as a small cell")));
            }
        }
        Ok(())
    }

    fn knows(&self, id: CellId) -> bool {
        self.cells.contains(&id) || self.mbs == Some(id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Idle,
    Scanning,
    TTTWait,
    Executing,
    Coasting,
    MBSAttached,
    SBSAttached,
}

/// Veto point for handover targets, e.g. the matching layer.
pub trait DecisionSource {
    fn approve(&self, mue: usize, cell: CellId) -> bool;
}

/// Approves every candidate (plain RSS-based handover).
#[derive(Debug, Clone, Copy, Default)]
pub struct AcceptAll;

impl DecisionSource for AcceptAll {
    fn approve(&self, _mue: usize, _cell: CellId) -> bool {
        true
    }
}

/// Restricts handovers to an allowed set of cells.
#[derive(Debug, Clone, Default)]
pub struct AllowList(pub BTreeSet<CellId>);

impl DecisionSource for AllowList {
    fn approve(&self, _mue: usize, cell: CellId) -> bool {
        self.0.contains(&cell)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandoverState {
    pub mue: usize,
    pub time: f64,
    pub phase: Phase,
    pub serving: Option<CellId>,
    pub candidate: Option<CellId>,
    pub ttt_elapsed: f64,
    /// Time spent in the serving cell since entering it.
    pub tos_elapsed: f64,
    pub rss_window: BTreeMap<CellId, VecDeque<f64>>,
    pub cache: Option<CacheState>,
    scan_timer: f64,
    exec_remaining: f64,
    /// Time each in-range cell was first detected.
    entered: BTreeMap<CellId, f64>,
    /// Cells that were a handover target during the current visit.
    targets: BTreeSet<CellId>,
}

impl HandoverState {
    pub fn new(mue: usize, cache: Option<CacheState>) -> Self {
        Self {
            mue,
            time: 0.0,
            phase: Phase::Idle,
            serving: None,
            candidate: None,
            ttt_elapsed: 0.0,
            tos_elapsed: 0.0,
            rss_window: BTreeMap::new(),
            cache,
            scan_timer: 0.0,
            exec_remaining: 0.0,
            entered: BTreeMap::new(),
            targets: BTreeSet::new(),
        }
    }

    fn filtered(&self, cell: CellId) -> Option<f64> {
        let w = self.rss_window.get(&cell)?;
        if w.is_empty() {
            return None;
        }
        Some(w.iter().sum::<f64>() / w.len() as f64)
    }

    fn serving_rss(&self, cfg: &HandoverConfig) -> f64 {
        match self.serving {
            Some(s) if cfg.cells.contains(&s) => self.filtered(s).unwrap_or(f64::NEG_INFINITY),
            _ => f64::NEG_INFINITY,
        }
    }

    fn beats_serving(&self, cell: CellId, cfg: &HandoverConfig) -> bool {
        match self.filtered(cell) {
            Some(rss) => {
                rss >= cfg.detection_threshold_db && rss > self.serving_rss(cfg) + cfg.hysteresis_db
            }
            None => false,
        }
    }

    fn can_coast(&self, cfg: &HandoverConfig) -> bool {
        cfg.caching && self.cache.is_some_and(|c| c.playback_time() > cfg.ttt)
    }

    /// Phase to return to when not in a handover procedure.
    fn resting_phase(&self, cfg: &HandoverConfig) -> Phase {
        match self.serving {
            Some(s) if cfg.cells.contains(&s) => Phase::SBSAttached,
            _ if self.can_coast(cfg) => Phase::Coasting,
            Some(_) => Phase::MBSAttached,
            None => Phase::Scanning,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Scan,
    TttStart,
    TttAbort,
    HoTrigger,
    HoComplete,
    CellExit,
    Hof,
    MbsFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandoverEvent {
    pub time: f64,
    pub mue: usize,
    #[serde(rename = "type")]
    pub kind: EventKind,
    pub cell: Option<CellId>,
    pub tos: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HofRecord {
    pub mue: usize,
    pub cell: CellId,
    pub tos: f64,
    pub failed: bool,
}

impl HofRecord {
    pub fn new(mue: usize, cell: CellId, tos: f64, t_mts: f64) -> Self {
        Self {
            mue,
            cell,
            tos,
            failed: hof_indicator(tos, t_mts) == 1,
        }
    }
}

/// 1 when the time of stay is strictly shorter than the minimum.
pub fn hof_indicator(tos: f64, t_mts: f64) -> u8 {
    u8::from(tos < t_mts)
}

/// Result of one step: the events emitted and the handover outcomes closed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepOutput {
    pub events: Vec<HandoverEvent>,
    pub records: Vec<HofRecord>,
}

/// Advances one MUE by `dt` using the RSS samples taken at the current time.
pub fn step(
    state: &HandoverState,
    measurements: &[(CellId, f64)],
    dt: f64,
    cfg: &HandoverConfig,
    policy: &dyn DecisionSource,
) -> Result<(HandoverState, StepOutput)> {
    if !(dt > 0.0) {
        return Err(HandoverError::Invalid("dt must be positive".into()));
    }
    if let Some(&(id, _)) = measurements.iter().find(|(id, _)| !cfg.knows(*id)) {
        return Err(HandoverError::UnknownCell(id));
    }
    let mut s = state.clone();
    let mut out = StepOutput::default();
    let now = s.time;
    let emit = |out: &mut StepOutput, kind, cell, tos| {
        out.events.push(HandoverEvent {
            time: now,
            mue: state.mue,
            kind,
            cell,
            tos,
        })
    };

    let in_range: BTreeMap<CellId, f64> = measurements
        .iter()
        .filter(|(id, rss)| cfg.cells.contains(id) && *rss >= cfg.detection_threshold_db)
        .copied()
        .collect();

    // Cell exits close the visit; handover targets yield a record.
    let exited: Vec<CellId> = s
        .entered
        .keys()
        .filter(|c| !in_range.contains_key(c))
        .copied()
        .collect();
    for cell in exited {
        let entry = s.entered.remove(&cell).unwrap_or(now);
        s.rss_window.remove(&cell);
        if s.targets.remove(&cell) {
            let rec = HofRecord::new(s.mue, cell, now - entry, cfg.t_mts);
            emit(&mut out, EventKind::CellExit, Some(cell), Some(rec.tos));
            if rec.failed {
                emit(&mut out, EventKind::Hof, Some(cell), Some(rec.tos));
            }
            out.records.push(rec);
        }
        if s.serving == Some(cell) {
            s.serving = cfg.mbs;
            s.tos_elapsed = 0.0;
            if cfg.mbs.is_some() && !s.can_coast(cfg) {
                emit(&mut out, EventKind::MbsFallback, cfg.mbs, None);
            }
            s.phase = s.resting_phase(cfg);
        }
        if s.candidate == Some(cell) {
            if s.phase == Phase::TTTWait {
                emit(&mut out, EventKind::TttAbort, Some(cell), None);
            }
            s.candidate = None;
            s.ttt_elapsed = 0.0;
            s.phase = s.resting_phase(cfg);
        }
    }
    for (&cell, &rss) in &in_range {
        s.entered.entry(cell).or_insert(now);
        let w = s.rss_window.entry(cell).or_default();
        w.push_back(rss);
        while w.len() > cfg.window {
            w.pop_front();
        }
    }

    if s.phase == Phase::Idle {
        s.phase = s.resting_phase(cfg);
    }

    // Periodic scan; muted while coasting on cached content.
    if s.phase != Phase::Coasting && s.scan_timer <= TIME_EPS {
        emit(&mut out, EventKind::Scan, None, None);
        s.scan_timer = match (&s.cache, cfg.caching) {
            (Some(c), true) => next_scan_interval(c, cfg.ttt, cfg.scan_interval),
            _ => cfg.scan_interval,
        };
        if !matches!(s.phase, Phase::TTTWait | Phase::Executing) {
            let best = in_range
                .keys()
                .filter(|&&c| Some(c) != s.serving && s.beats_serving(c, cfg))
                .filter(|&&c| policy.approve(s.mue, c))
                .max_by(|a, b| {
                    let (fa, fb) = (s.filtered(**a).unwrap(), s.filtered(**b).unwrap());
                    fa.total_cmp(&fb).then(b.cmp(a))
                })
                .copied();
            if let Some(c) = best {
                s.candidate = Some(c);
                s.ttt_elapsed = 0.0;
                s.phase = Phase::TTTWait;
                s.targets.insert(c);
                emit(&mut out, EventKind::TttStart, Some(c), None);
            }
        }
    }

    s.time = now + dt;
    s.scan_timer -= dt;
    if s.serving.is_some_and(|c| cfg.cells.contains(&c)) {
        s.tos_elapsed += dt;
    }
    let later = s.time;
    let emit_later = |out: &mut StepOutput, kind, cell, tos| {
        out.events.push(HandoverEvent {
            time: later,
            mue: state.mue,
            kind,
            cell,
            tos,
        })
    };

    match s.phase {
        Phase::TTTWait => {
            let c = s.candidate.expect("candidate set in TTT");
            if s.beats_serving(c, cfg) {
                s.ttt_elapsed = (s.ttt_elapsed + dt).min(cfg.ttt);
                if s.ttt_elapsed >= cfg.ttt - TIME_EPS {
                    s.ttt_elapsed = cfg.ttt;
                    s.phase = Phase::Executing;
                    s.exec_remaining = cfg.execution_delay;
                    emit_later(&mut out, EventKind::HoTrigger, Some(c), None);
                }
            } else {
                emit(&mut out, EventKind::TttAbort, Some(c), None);
                s.candidate = None;
                s.ttt_elapsed = 0.0;
                s.phase = s.resting_phase(cfg);
            }
        }
        Phase::Executing => s.exec_remaining -= dt,
        Phase::Coasting => {
            if let Some(c) = s.cache {
                s.cache = Some(c.drain(dt).0);
            }
            if !s.can_coast(cfg) {
                s.phase = s.resting_phase(cfg);
                s.scan_timer = 0.0;
            }
        }
        _ => {}
    }
    if s.phase == Phase::Executing && s.exec_remaining <= TIME_EPS {
        let c = s.candidate.take().expect("candidate set in execution");
        s.serving = Some(c);
        s.tos_elapsed = s.time - s.entered.get(&c).copied().unwrap_or(s.time);
        s.ttt_elapsed = 0.0;
        s.exec_remaining = 0.0;
        s.phase = Phase::SBSAttached;
        emit_later(&mut out, EventKind::HoComplete, Some(c), Some(s.tos_elapsed));
    }
    Ok((s, out))
}

/// Merges per-MUE event streams by time, keeping each MUE's own order.
pub fn merge_events(streams: Vec<Vec<HandoverEvent>>) -> Vec<HandoverEvent> {
    let mut all: Vec<HandoverEvent> = streams.into_iter().flatten().collect();
    all.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.mue.cmp(&b.mue)));
    all
}

/// Writes events as CSV with columns time, mue, type, cell, tos.
pub fn write_events_csv<W: Write>(events: &[HandoverEvent], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for e in events {
        w.serialize(e).map_err(|e| HandoverError::Log(e.to_string()))?;
    }
    w.flush().map_err(|e| HandoverError::Log(e.to_string()))
}
