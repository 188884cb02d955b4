//! Two-period handover matching between MUEs and base stations.
//!
//! MUEs rank two-period association plans (period-1 slot, period-2 slot),
//! small cells rank MUEs by how badly they need a handover, and the MBS takes
//! period-2 fallbacks subject to an HOF gate. [`deferred_acceptance`] solves
//! the single-period game; [`dynamic_match`] runs the two-stage plan-proposal
//! algorithm, and [`find_blocking_pairs`] scans a result for period-1 and
//! period-2 deviations.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{hof_probability, CellDisk, Pose};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatchingError {
    #[error("invalid game instance: {0}")]
    Invalid(String),
    #[error("inconsistent matching: {0}")]
    Inconsistent(String),
    #[error("serialization: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, MatchingError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PlayerKind {
    Mue,
    Sbs,
    Mbs,
}

/// A player. Indices are zero-based; display names are one-based (`u1`,
/// `k1`) and the MBS is `k0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PlayerId {
    pub kind: PlayerKind,
    pub index: usize,
}

impl PlayerId {
    pub fn mue(index: usize) -> Self {
        Self { kind: PlayerKind::Mue, index }
    }
    pub fn sbs(index: usize) -> Self {
        Self { kind: PlayerKind::Sbs, index }
    }
    pub fn mbs() -> Self {
        Self { kind: PlayerKind::Mbs, index: 0 }
    }
}

impl fmt::Display for PlayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            PlayerKind::Mue => write!(f, "u{}", self.index + 1),
            PlayerKind::Sbs => write!(f, "k{}", self.index + 1),
            PlayerKind::Mbs => write!(f, "k0"),
        }
    }
}

/// One period of a plan: matched to a partner, or on its own (cache for an
/// MUE, idle for a base station).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Slot {
    Own,
    Partner(PlayerId),
}

impl Slot {
    /// Small-cell index when the slot holds an SBS.
    pub fn sbs(self) -> Option<usize> {
        match self {
            Slot::Partner(p) if p.kind == PlayerKind::Sbs => Some(p.index),
            _ => None,
        }
    }

    pub fn is_mbs(self) -> bool {
        matches!(self, Slot::Partner(p) if p.kind == PlayerKind::Mbs)
    }
    fn label(self, owner: PlayerId) -> String {
        match self {
            Slot::Own => owner.to_string(),
            Slot::Partner(p) => p.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Plan {
    pub first: Slot,
    pub second: Slot,
}

impl Plan {
    pub fn new(first: Slot, second: Slot) -> Self {
        Self { first, second }
    }
    pub fn own() -> Self {
        Self::new(Slot::Own, Slot::Own)
    }
    pub fn slots(&self) -> [Slot; 2] {
        [self.first, self.second]
    }
    /// Plan written from `owner`'s side, e.g. `k1u1`.
    pub fn label(&self, owner: PlayerId) -> String {
        format!("{}{}", self.first.label(owner), self.second.label(owner))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceProfile {
    pub owner: PlayerId,
    pub ranked_plans: Vec<Plan>,
}

impl PreferenceProfile {
    /// Position in the ranking; unlisted plans rank below every listed one.
    pub fn rank(&self, plan: &Plan) -> usize {
        self.ranked_plans.iter().position(|p| p == plan).unwrap_or(usize::MAX)
    }
    pub fn prefers(&self, a: &Plan, b: &Plan) -> bool {
        self.rank(a) < self.rank(b)
    }
    pub fn labels(&self) -> Vec<String> {
        self.ranked_plans.iter().map(|p| p.label(self.owner)).collect()
    }
}

impl fmt::Display for PreferenceProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.owner, self.labels().join(", "))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MueSpec {
    pub pose: Pose,
    /// Cached segments Ω.
    pub cache_segments: f64,
    /// HOF tolerance P^th.
    pub p_th: f64,
    /// Small cells reachable in period 1.
    pub first_targets: Vec<usize>,
    /// Small cells reachable in period 2.
    pub second_targets: Vec<usize>,
    /// Per-MUE scan interval used by the small-cell utility.
    #[serde(default)]
    pub scan_interval: Option<f64>,
    /// Per-MUE period duration used for cache feasibility.
    #[serde(default)]
    pub period: Option<f64>,
    /// Period-2 duration when it differs from period 1.
    #[serde(default)]
    pub second_period: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbsSpec {
    pub cell: CellDisk,
    pub quota: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameInstance {
    pub mues: Vec<MueSpec>,
    pub sbss: Vec<SbsSpec>,
    /// MBS admission margin ε.
    pub epsilon: f64,
    pub t_mts: f64,
    /// Default scan interval T_s.
    pub scan_interval: f64,
    /// Default period duration for cache feasibility.
    pub period: f64,
    /// Segment play rate Q.
    pub play_rate: f64,
    /// Period payoff of an MBS slot.
    pub mbs_payoff: f64,
    /// Allow plans that hand over between two different small cells.
    pub cross_sbs: bool,
}

impl GameInstance {
    pub fn new(mues: Vec<MueSpec>, sbss: Vec<SbsSpec>) -> Self {
        Self {
            mues,
            sbss,
            epsilon: 0.05,
            t_mts: 1.0,
            scan_interval: 1.0,
            period: 1.0,
            play_rate: 1e3,
            mbs_payoff: 0.0,
            cross_sbs: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MatchingError::Invalid(m));
        if !(self.epsilon >= 0.0) {
            return bad("epsilon must be nonnegative".into());
        }
        for (name, v) in [
            ("t_mts", self.t_mts),
            ("scan_interval", self.scan_interval),
            ("period", self.period),
            ("play_rate", self.play_rate),
        ] {
            if !(v > 0.0) {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.mbs_payoff.is_finite() {
            return bad("mbs_payoff must be finite".into());
        }
        for (k, s) in self.sbss.iter().enumerate() {
            if s.quota == 0 {
                return bad(format!("k{} has zero quota", k + 1));
            }
        }
        for (u, m) in self.mues.iter().enumerate() {
            if !(0.0..=1.0).contains(&m.p_th) {
                return bad(format!("u{} threshold {} outside [0, 1]", u + 1, m.p_th));
            }
            if !(m.cache_segments >= 0.0) || !(m.pose.speed >= 0.0) {
                return bad(format!("u{} has negative cache or speed", u + 1));
            }
            for &k in m.first_targets.iter().chain(&m.second_targets) {
                if k >= self.sbss.len() {
                    return bad(format!("u{} targets unknown cell k{}", u + 1, k + 1));
                }
            }
            for v in [m.scan_interval, m.period, m.second_period].into_iter().flatten() {
                if !(v > 0.0) {
                    return bad(format!("u{} has a nonpositive interval", u + 1));
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| MatchingError::Serialization(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let inst: Self = toml::from_str(text).map_err(|e| MatchingError::Serialization(e.to_string()))?;
        inst.validate()?;
        Ok(inst)
    }

    /// Seconds of cached playback, Ω/Q.
    pub fn playback(&self, u: usize) -> f64 {
        self.mues[u].cache_segments / self.play_rate
    }

    pub fn mue_scan_interval(&self, u: usize) -> f64 {
        self.mues[u].scan_interval.unwrap_or(self.scan_interval)
    }

    pub fn mue_period(&self, u: usize) -> f64 {
        self.mues[u].period.unwrap_or(self.period)
    }

    pub fn mue_second_period(&self, u: usize) -> f64 {
        self.mues[u].second_period.unwrap_or_else(|| self.mue_period(u))
    }

    /// Whether the cache covers period `t` (0 or 1) given the period-1 slot.
    pub fn cache_covers(&self, u: usize, t: usize, first_own: bool) -> bool {
        let need = match (t, first_own) {
            (0, _) => self.mue_period(u),
            (_, true) => self.mue_period(u) + self.mue_second_period(u),
            (_, false) => self.mue_second_period(u),
        };
        self.playback(u) >= need
    }
}

/// MUE utility of a small cell: P^th minus the HOF probability.
pub fn mue_utility(u: usize, k: usize, inst: &GameInstance) -> Result<f64> {
    let m = &inst.mues[u];
    let hof = hof_probability(m.pose.speed, inst.t_mts, inst.sbss[k].cell.radius)
        .map_err(|e| MatchingError::Invalid(e.to_string()))?;
    Ok(m.p_th - hof.probability)
}

/// Small-cell utility of an MUE: T_s minus the cached playback time.
pub fn sbs_utility(u: usize, _k: usize, inst: &GameInstance) -> f64 {
    inst.mue_scan_interval(u) - inst.playback(u)
}

/// Utility tables indexed `[mue][sbs]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utilities {
    pub phi: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
}

impl Utilities {
    pub fn compute(inst: &GameInstance) -> Result<Self> {
        inst.validate()?;
        let (nu, nk) = (inst.mues.len(), inst.sbss.len());
        let mut phi = vec![vec![0.0; nk]; nu];
        let mut gamma = vec![vec![0.0; nk]; nu];
        for u in 0..nu {
            for k in 0..nk {
                phi[u][k] = mue_utility(u, k, inst)?;
                gamma[u][k] = sbs_utility(u, k, inst);
            }
        }
        Ok(Self { phi, gamma })
    }

    fn check_shape(&self, inst: &GameInstance) -> Result<()> {
        let (nu, nk) = (inst.mues.len(), inst.sbss.len());
        let ok = |t: &Vec<Vec<f64>>| t.len() == nu && t.iter().all(|r| r.len() == nk);
        if ok(&self.phi) && ok(&self.gamma) {
            Ok(())
        } else {
            Err(MatchingError::Invalid(format!("utility tables must be {nu}x{nk}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profiles {
    pub mues: Vec<PreferenceProfile>,
    pub sbss: Vec<PreferenceProfile>,
    pub mbs: PreferenceProfile,
}

/// Instance, utilities and profiles bundled for the algorithms.
#[derive(Debug, Clone)]
pub struct Game<'a> {
    pub inst: &'a GameInstance,
    pub util: Utilities,
    pub profiles: Profiles,
}

impl<'a> Game<'a> {
    pub fn new(inst: &'a GameInstance) -> Result<Self> {
        let util = Utilities::compute(inst)?;
        Self::with_utilities(inst, util)
    }

    pub fn with_utilities(inst: &'a GameInstance, util: Utilities) -> Result<Self> {
        inst.validate()?;
        util.check_shape(inst)?;
        let profiles = preferences_from(inst, &util);
        Ok(Self { inst, util, profiles })
    }

    fn phi(&self, u: usize, k: usize) -> f64 {
        self.util.phi[u][k]
    }

    fn gamma(&self, u: usize, k: usize) -> f64 {
        self.util.gamma[u][k]
    }

    /// MBS period-2 admission given the MUE's period-1 slot.
    pub fn mbs_admits(&self, u: usize, first: Slot) -> bool {
        mbs_gate(self.inst, &self.util, u, first)
    }

    fn sbs_key(&self, u: usize, k: usize) -> (OrdF64, std::cmp::Reverse<usize>) {
        (OrdF64(self.gamma(u, k)), std::cmp::Reverse(u))
    }
}

fn mbs_gate(inst: &GameInstance, util: &Utilities, u: usize, first: Slot) -> bool {
    match first {
        Slot::Partner(p) if p.kind == PlayerKind::Sbs => util.phi[u][p.index] < inst.epsilon,
        Slot::Own => !inst.mues[u].second_targets.iter().any(|&k| util.phi[u][k] >= 0.0),
        _ => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

fn sorted_unique(v: &[usize]) -> Vec<usize> {
    v.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
}

/// Period payoff sum of an MUE plan; `None` when a cache slot is infeasible.
fn plan_score(inst: &GameInstance, util: &Utilities, u: usize, plan: &Plan) -> Option<f64> {
    let mut score = 0.0;
    for (t, slot) in plan.slots().into_iter().enumerate() {
        score += match slot {
            Slot::Own => {
                if inst.cache_covers(u, t, plan.first == Slot::Own) {
                    0.0
                } else {
                    return None;
                }
            }
            Slot::Partner(p) if p.kind == PlayerKind::Sbs => util.phi[u][p.index],
            Slot::Partner(_) => inst.mbs_payoff,
        };
    }
    Some(score)
}

fn mue_plan_cmp(score: &[(Plan, f64)], a: usize, b: usize) -> Ordering {
    let (pa, sa) = score[a];
    let (pb, sb) = score[b];
    let sbs_slots = |p: &Plan| p.slots().iter().filter(|s| s.sbs().is_some()).count();
    let mbs_slots = |p: &Plan| p.slots().iter().filter(|s| s.is_mbs()).count();
    let first_sbs = |p: &Plan| p.slots().iter().position(|s| s.sbs().is_some()).unwrap_or(2);
    let indices = |p: &Plan| p.slots().map(|s| s.sbs().unwrap_or(usize::MAX));
    sb.total_cmp(&sa)
        .then(sbs_slots(&pb).cmp(&sbs_slots(&pa)))
        .then(first_sbs(&pa).cmp(&first_sbs(&pb)))
        .then(indices(&pa).cmp(&indices(&pb)))
        .then(mbs_slots(&pb).cmp(&mbs_slots(&pa)))
        .then(pa.cmp(&pb))
}

fn mue_profile(inst: &GameInstance, util: &Utilities, u: usize) -> PreferenceProfile {
    let m = &inst.mues[u];
    let c1 = sorted_unique(&m.first_targets);
    let c2 = sorted_unique(&m.second_targets);
    let sbs = |k| Slot::Partner(PlayerId::sbs(k));
    let mbs = Slot::Partner(PlayerId::mbs());
    let mut plans = Vec::new();
    for &k in &c1 {
        plans.push(Plan::new(sbs(k), Slot::Own));
        for &k2 in &c2 {
            if k2 == k || inst.cross_sbs {
                plans.push(Plan::new(sbs(k), sbs(k2)));
            }
        }
        if mbs_gate(inst, util, u, sbs(k)) {
            plans.push(Plan::new(sbs(k), mbs));
        }
    }
    for &k in &c2 {
        plans.push(Plan::new(Slot::Own, sbs(k)));
    }
    if mbs_gate(inst, util, u, Slot::Own) {
        plans.push(Plan::new(Slot::Own, mbs));
    }
    plans.push(Plan::own());

    let mut scored: Vec<(Plan, f64)> = plans
        .into_iter()
        .filter(|p| p.slots().iter().filter_map(|s| s.sbs()).all(|k| util.phi[u][k] >= 0.0))
        .filter_map(|p| match plan_score(inst, util, u, &p) {
            Some(s) => Some((p, s)),
            None if p == Plan::own() => Some((p, f64::NEG_INFINITY)),
            None => None,
        })
        .collect();
    scored.dedup();
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| mue_plan_cmp(&scored, a, b));
    let mut ranked = Vec::new();
    for i in order {
        ranked.push(scored[i].0);
        if scored[i].0 == Plan::own() {
            break;
        }
    }
    PreferenceProfile {
        owner: PlayerId::mue(u),
        ranked_plans: ranked,
    }
}

/// Builds all profiles from utilities computed for the instance.
pub fn build_preferences(inst: &GameInstance) -> Result<Profiles> {
    Ok(Game::new(inst)?.profiles)
}

/// Builds all profiles from externally supplied utility tables.
pub fn build_preferences_from(inst: &GameInstance, util: &Utilities) -> Result<Profiles> {
    inst.validate()?;
    util.check_shape(inst)?;
    Ok(preferences_from(inst, util))
}

fn preferences_from(inst: &GameInstance, util: &Utilities) -> Profiles {
    let mues: Vec<PreferenceProfile> = (0..inst.mues.len()).map(|u| mue_profile(inst, util, u)).collect();
    let mut sbs_plans: Vec<Vec<(Plan, usize, usize)>> = vec![Vec::new(); inst.sbss.len()];
    let mut mbs_plans: Vec<(Plan, usize)> = Vec::new();
    for (u, prof) in mues.iter().enumerate() {
        let me = Slot::Partner(PlayerId::mue(u));
        for plan in &prof.ranked_plans {
            let ks: BTreeSet<usize> = plan.slots().iter().filter_map(|s| s.sbs()).collect();
            for k in ks {
                if util.gamma[u][k] < 0.0 {
                    continue;
                }
                let side = |s: Slot| if s.sbs() == Some(k) { me } else { Slot::Own };
                let bp = Plan::new(side(plan.first), side(plan.second));
                let covered = bp.slots().iter().filter(|s| **s != Slot::Own).count();
                if !sbs_plans[k].iter().any(|(p, _, _)| *p == bp) {
                    sbs_plans[k].push((bp, u, covered));
                }
            }
            if plan.second.is_mbs() {
                let bp = Plan::new(Slot::Own, me);
                if !mbs_plans.iter().any(|(p, _)| *p == bp) {
                    mbs_plans.push((bp, u));
                }
            }
        }
    }
    let sbss = sbs_plans
        .into_iter()
        .enumerate()
        .map(|(k, mut plans)| {
            plans.sort_by(|a, b| {
                b.2.cmp(&a.2)
                    .then(util.gamma[b.1][k].total_cmp(&util.gamma[a.1][k]))
                    .then(a.1.cmp(&b.1))
                    .then(b.0.first.cmp(&a.0.first))
            });
            let mut ranked: Vec<Plan> = plans.into_iter().map(|p| p.0).collect();
            ranked.push(Plan::own());
            PreferenceProfile {
                owner: PlayerId::sbs(k),
                ranked_plans: ranked,
            }
        })
        .collect();
    mbs_plans.sort_by_key(|p| p.1);
    let mut ranked: Vec<Plan> = mbs_plans.into_iter().map(|p| p.0).collect();
    ranked.push(Plan::own());
    Profiles {
        mues,
        sbss,
        mbs: PreferenceProfile {
            owner: PlayerId::mbs(),
            ranked_plans: ranked,
        },
    }
}

/// Single-period outcome of an MUE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SingleSlot {
    Sbs(usize),
    Cache,
    Mbs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleMatching {
    pub assignment: Vec<SingleSlot>,
    pub proposals: usize,
}

impl SingleMatching {
    pub fn assigned(&self, k: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&u| self.assignment[u] == SingleSlot::Sbs(k))
            .collect()
    }
}

fn single_rank(game: &Game, u: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = sorted_unique(&game.inst.mues[u].first_targets)
        .into_iter()
        .filter(|&k| game.phi(u, k) >= 0.0)
        .collect();
    ks.sort_by(|&a, &b| game.phi(u, b).total_cmp(&game.phi(u, a)).then(a.cmp(&b)));
    ks
}

/// MUE-proposing deferred acceptance over first-period candidates. MUEs left
/// unmatched use the cache when Ω/Q ≥ T_s and the MBS otherwise.
pub fn deferred_acceptance(inst: &GameInstance) -> Result<SingleMatching> {
    Ok(deferred_acceptance_in(&Game::new(inst)?))
}

pub fn deferred_acceptance_in(game: &Game) -> SingleMatching {
    let inst = game.inst;
    let nu = inst.mues.len();
    let lists: Vec<Vec<usize>> = (0..nu).map(|u| single_rank(game, u)).collect();
    let mut next = vec![0usize; nu];
    let mut held: Vec<Vec<usize>> = vec![Vec::new(); inst.sbss.len()];
    let mut matched: Vec<Option<usize>> = vec![None; nu];
    let mut proposals = 0;
    loop {
        let mut incoming: Vec<Vec<usize>> = vec![Vec::new(); inst.sbss.len()];
        let mut any = false;
        for u in 0..nu {
            if matched[u].is_none() && next[u] < lists[u].len() {
                let k = lists[u][next[u]];
                next[u] += 1;
                incoming[k].push(u);
                proposals += 1;
                any = true;
            }
        }
        if !any {
            break;
        }
        for (k, new) in incoming.into_iter().enumerate() {
            if new.is_empty() {
                continue;
            }
            let mut pool: Vec<usize> = held[k].iter().copied().chain(new).collect();
            pool.sort_by_key(|&u| std::cmp::Reverse(game.sbs_key(u, k)));
            let keep: Vec<usize> = pool
                .iter()
                .copied()
                .filter(|&u| game.gamma(u, k) >= 0.0)
                .take(inst.sbss[k].quota)
                .collect();
            for &u in &pool {
                matched[u] = if keep.contains(&u) { Some(k) } else { None };
            }
            held[k] = keep;
        }
    }
    let assignment = (0..nu)
        .map(|u| match matched[u] {
            Some(k) => SingleSlot::Sbs(k),
            None if inst.playback(u) >= inst.mue_scan_interval(u) => SingleSlot::Cache,
            None => SingleSlot::Mbs,
        })
        .collect();
    SingleMatching { assignment, proposals }
}

/// Pairs `(u, k)` that block a single-period matching.
pub fn single_period_blocking_pairs(game: &Game, m: &SingleMatching) -> Vec<(usize, usize)> {
    let inst = game.inst;
    let mut out = Vec::new();
    for u in 0..inst.mues.len() {
        let list = single_rank(game, u);
        let current = match m.assignment[u] {
            SingleSlot::Sbs(k) => list.iter().position(|&x| x == k).unwrap_or(usize::MAX),
            _ => usize::MAX,
        };
        for (pos, &k) in list.iter().enumerate() {
            if pos >= current || game.gamma(u, k) < 0.0 {
                continue;
            }
            let members = m.assigned(k);
            let wants = members.len() < inst.sbss[k].quota
                || members.iter().any(|&w| game.sbs_key(u, k) > game.sbs_key(w, k));
            if wants {
                out.push((u, k));
            }
        }
    }
    out
}

/// Two-period matching: the slot of every MUE in each period.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DynamicMatching {
    pub mu1: Vec<Slot>,
    pub mu2: Vec<Slot>,
}

impl DynamicMatching {
    pub fn unmatched(n: usize) -> Self {
        Self {
            mu1: vec![Slot::Own; n],
            mu2: vec![Slot::Own; n],
        }
    }

    pub fn plan(&self, u: usize) -> Plan {
        Plan::new(self.mu1[u], self.mu2[u])
    }

    fn slot(&self, u: usize, period: usize) -> Slot {
        if period == 1 {
            self.mu1[u]
        } else {
            self.mu2[u]
        }
    }

    /// MUEs held by `bs` in `period` (1 or 2).
    pub fn members(&self, bs: PlayerId, period: usize) -> Vec<usize> {
        (0..self.mu1.len())
            .filter(|&u| self.slot(u, period) == Slot::Partner(bs))
            .collect()
    }

    /// Checks partner ids, MUE-only partners for MUEs and per-period quotas.
    pub fn validate(&self, inst: &GameInstance) -> Result<()> {
        let n = inst.mues.len();
        if self.mu1.len() != n || self.mu2.len() != n {
            return Err(MatchingError::Inconsistent(format!(
                "matching covers {} / {} MUEs, instance has {n}",
                self.mu1.len(),
                self.mu2.len()
            )));
        }
        for u in 0..n {
            for s in [self.mu1[u], self.mu2[u]] {
                if let Slot::Partner(p) = s {
                    let bad = match p.kind {
                        PlayerKind::Mue => true,
                        PlayerKind::Sbs => p.index >= inst.sbss.len(),
                        PlayerKind::Mbs => p.index != 0,
                    };
                    if bad {
                        return Err(MatchingError::Inconsistent(format!("u{} matched to invalid {p}", u + 1)));
                    }
                }
            }
        }
        for (k, s) in inst.sbss.iter().enumerate() {
            for t in [1, 2] {
                let load = self.members(PlayerId::sbs(k), t).len();
                if load > s.quota {
                    return Err(MatchingError::Inconsistent(format!(
                        "k{} holds {load} MUEs in period {t}, quota {}",
                        k + 1,
                        s.quota
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A proposal sent during [`dynamic_match`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalEvent {
    pub stage: u8,
    pub round: usize,
    pub mue: usize,
    pub bs: PlayerId,
    pub plan: Plan,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchOutcome {
    pub matching: DynamicMatching,
    /// Stage-1 (ex ante stable) matching.
    pub ex_ante: DynamicMatching,
    pub trace: Vec<ProposalEvent>,
}

/// Contract held by a small cell: MUE and covered periods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Contract {
    mue: usize,
    periods: [bool; 2],
}

impl Contract {
    fn span(&self) -> usize {
        self.periods.iter().filter(|p| **p).count()
    }
}

/// Small-cell choice over contracts: two-period contracts first, then by
/// utility and MUE index, subject to per-period quota and acceptability.
fn sbs_choose(game: &Game, k: usize, pool: &[Contract]) -> Vec<Contract> {
    let mut sorted: Vec<Contract> = pool.to_vec();
    sorted.sort_by(|a, b| {
        b.span()
            .cmp(&a.span())
            .then(game.sbs_key(b.mue, k).cmp(&game.sbs_key(a.mue, k)))
    });
    let quota = game.inst.sbss[k].quota;
    let mut load = [0usize; 2];
    let mut chosen = Vec::new();
    for c in sorted {
        if game.gamma(c.mue, k) < 0.0 {
            continue;
        }
        if (0..2).all(|t| !c.periods[t] || load[t] < quota) {
            for (l, &p) in load.iter_mut().zip(&c.periods) {
                *l += usize::from(p);
            }
            chosen.push(c);
        }
    }
    chosen
}

/// Stage-1 proposal target of a plan: the one small cell it uses and the
/// periods requested. Plans with the MBS are settled in stage 2.
fn stage1_contract(plan: &Plan, u: usize, cross: bool) -> Option<(usize, Contract)> {
    if plan.first.is_mbs() || plan.second.is_mbs() {
        return None;
    }
    match (plan.first.sbs(), plan.second.sbs()) {
        (Some(a), Some(b)) if a == b => Some((a, Contract { mue: u, periods: [true, true] })),
        (Some(a), Some(_)) if cross => Some((a, Contract { mue: u, periods: [true, false] })),
        (Some(a), None) => Some((a, Contract { mue: u, periods: [true, false] })),
        (None, Some(b)) => Some((b, Contract { mue: u, periods: [false, true] })),
        _ => None,
    }
}

fn contracts_of(m: &DynamicMatching, k: usize) -> Vec<Contract> {
    let me = Slot::Partner(PlayerId::sbs(k));
    (0..m.mu1.len())
        .filter_map(|u| {
            let periods = [m.mu1[u] == me, m.mu2[u] == me];
            (periods[0] || periods[1]).then_some(Contract { mue: u, periods })
        })
        .collect()
}

/// Two-stage dynamic matching. Stage 1 runs plan proposals to small cells
/// until no plan is rejected; stage 2 runs deferred acceptance in period 2
/// for MUEs left on cache, with full cells closed and the MBS gated.
pub fn dynamic_match(inst: &GameInstance) -> Result<MatchOutcome> {
    Ok(dynamic_match_in(&Game::new(inst)?))
}

pub fn dynamic_match_in(game: &Game) -> MatchOutcome {
    let inst = game.inst;
    let nu = inst.mues.len();
    let nk = inst.sbss.len();
    let mut trace = Vec::new();

    // Stage 1.
    let mut next = vec![0usize; nu];
    let mut done = vec![false; nu];
    let mut holding: Vec<Option<Plan>> = vec![None; nu];
    let mut held: Vec<Vec<Contract>> = vec![Vec::new(); nk];
    let mut refused: BTreeSet<(usize, usize, [bool; 2])> = BTreeSet::new();
    let mut round = 0;
    loop {
        round += 1;
        let mut incoming: Vec<Vec<(Contract, Plan, usize)>> = vec![Vec::new(); nk];
        let mut any = false;
        for u in 0..nu {
            if done[u] || holding[u].is_some() {
                continue;
            }
            let plans = &game.profiles.mues[u].ranked_plans;
            while next[u] < plans.len() {
                let plan = plans[next[u]];
                next[u] += 1;
                if plan == Plan::own() {
                    done[u] = true;
                    break;
                }
                if let Some((k, c)) = stage1_contract(&plan, u, inst.cross_sbs) {
                    if refused.contains(&(u, k, c.periods)) {
                        continue;
                    }
                    incoming[k].push((c, plan, trace.len()));
                    trace.push(ProposalEvent {
                        stage: 1,
                        round,
                        mue: u,
                        bs: PlayerId::sbs(k),
                        plan,
                        accepted: false,
                    });
                    any = true;
                    break;
                }
            }
            if next[u] >= plans.len() && holding[u].is_none() && !any_pending(&incoming, u) {
                done[u] = true;
            }
        }
        if !any {
            break;
        }
        for k in 0..nk {
            if incoming[k].is_empty() {
                continue;
            }
            let mut pool = held[k].clone();
            pool.extend(incoming[k].iter().map(|x| x.0));
            let chosen = sbs_choose(game, k, &pool);
            for (c, plan, ev) in &incoming[k] {
                if chosen.contains(c) {
                    trace[*ev].accepted = true;
                    holding[c.mue] = Some(*plan);
                } else {
                    refused.insert((c.mue, k, c.periods));
                }
            }
            for c in &held[k] {
                if !chosen.contains(c) {
                    holding[c.mue] = None;
                    refused.insert((c.mue, k, c.periods));
                }
            }
            held[k] = chosen;
        }
    }
    let mut m = DynamicMatching::unmatched(nu);
    for (u, held_plan) in holding.iter().enumerate() {
        if let Some(plan) = *held_plan {
            let (k, c) = stage1_contract(&plan, u, inst.cross_sbs).expect("held plan has a contract");
            let me = Slot::Partner(PlayerId::sbs(k));
            if c.periods[0] {
                m.mu1[u] = me;
            }
            if c.periods[1] {
                m.mu2[u] = me;
            }
        }
    }
    let ex_ante = m.clone();

    // Stage 2.
    let targets: Vec<Vec<PlayerId>> = (0..nu)
        .map(|u| {
            if m.mu2[u] != Slot::Own {
                return Vec::new();
            }
            let prof = &game.profiles.mues[u];
            let current = prof.rank(&m.plan(u));
            prof.ranked_plans
                .iter()
                .take(current.min(prof.ranked_plans.len()))
                .filter(|p| p.first == m.mu1[u])
                .filter_map(|p| match p.second {
                    Slot::Partner(b) => Some(b),
                    Slot::Own => None,
                })
                .collect()
        })
        .collect();
    let free: Vec<usize> = (0..nk)
        .map(|k| inst.sbss[k].quota.saturating_sub(m.members(PlayerId::sbs(k), 2).len()))
        .collect();
    let mut next2 = vec![0usize; nu];
    let mut got: Vec<Option<PlayerId>> = vec![None; nu];
    let mut held2: Vec<Vec<usize>> = vec![Vec::new(); nk];
    let mut round2 = 0;
    loop {
        round2 += 1;
        let mut incoming: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nk];
        let mut any = false;
        for u in 0..nu {
            while got[u].is_none() && next2[u] < targets[u].len() {
                let b = targets[u][next2[u]];
                next2[u] += 1;
                let plan = Plan::new(m.mu1[u], Slot::Partner(b));
                match b.kind {
                    PlayerKind::Mbs => {
                        let ok = game.mbs_admits(u, m.mu1[u]);
                        trace.push(ProposalEvent {
                            stage: 2,
                            round: round2,
                            mue: u,
                            bs: b,
                            plan,
                            accepted: ok,
                        });
                        if ok {
                            got[u] = Some(b);
                        }
                    }
                    PlayerKind::Sbs => {
                        if free[b.index] == 0 {
                            continue;
                        }
                        incoming[b.index].push((u, trace.len()));
                        trace.push(ProposalEvent {
                            stage: 2,
                            round: round2,
                            mue: u,
                            bs: b,
                            plan,
                            accepted: false,
                        });
                        any = true;
                        break;
                    }
                    PlayerKind::Mue => {}
                }
            }
        }
        if !any {
            break;
        }
        for k in 0..nk {
            if incoming[k].is_empty() {
                continue;
            }
            let mut pool: Vec<usize> = held2[k].clone();
            pool.extend(incoming[k].iter().map(|x| x.0));
            pool.sort_by_key(|&u| std::cmp::Reverse(game.sbs_key(u, k)));
            let keep: Vec<usize> = pool
                .iter()
                .copied()
                .filter(|&u| game.gamma(u, k) >= 0.0)
                .take(free[k])
                .collect();
            for &(u, ev) in &incoming[k] {
                trace[ev].accepted = keep.contains(&u);
            }
            for &u in &pool {
                got[u] = keep.contains(&u).then_some(PlayerId::sbs(k));
            }
            held2[k] = keep;
        }
    }
    for (u, b) in got.iter().enumerate() {
        if let Some(b) = *b {
            m.mu2[u] = Slot::Partner(b);
        }
    }
    MatchOutcome {
        matching: m,
        ex_ante,
        trace,
    }
}

fn any_pending(incoming: &[Vec<(Contract, Plan, usize)>], u: usize) -> bool {
    incoming.iter().flatten().any(|(c, _, _)| c.mue == u)
}

/// Which rule a violation breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clause {
    /// Pair deviation to a two-period plan with one small cell.
    BothPeriods,
    /// Pair deviation to a period-1-only plan.
    FirstOnly,
    /// Pair deviation to a period-2-only plan.
    SecondOnly,
    /// MUE holds a plan it ranks below staying on its own.
    MueIndividual,
    /// Base station holds an MUE it finds unacceptable.
    BsIndividual,
    /// MUE prefers keeping its period-1 slot and going alone in period 2.
    MueAlone,
    /// MUE and base station both gain from a period-2 match.
    PairMatch,
    /// MUE prefers going alone in period 2 and the base station prefers idling.
    PairRelease,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub period: u8,
    pub mue: Option<usize>,
    pub bs: Option<PlayerId>,
    pub clause: Clause,
}

/// Scans a matching for period-1 or period-2 deviations.
pub fn find_blocking_pairs(game: &Game, m: &DynamicMatching, period: u8) -> Vec<Violation> {
    match period {
        1 => period1_violations(game, m),
        _ => period2_violations(game, m),
    }
}

fn period1_violations(game: &Game, m: &DynamicMatching) -> Vec<Violation> {
    let inst = game.inst;
    let mut out = Vec::new();
    for u in 0..inst.mues.len() {
        let prof = &game.profiles.mues[u];
        let current = prof.rank(&m.plan(u));
        if current > prof.rank(&Plan::own()) {
            out.push(Violation {
                period: 1,
                mue: Some(u),
                bs: None,
                clause: Clause::MueIndividual,
            });
        }
        for (r, plan) in prof.ranked_plans.iter().enumerate().take(current.min(prof.ranked_plans.len())) {
            if plan.second.is_mbs() && plan.first == Slot::Own && game.mbs_admits(u, Slot::Own) {
                out.push(Violation {
                    period: 1,
                    mue: Some(u),
                    bs: Some(PlayerId::mbs()),
                    clause: Clause::SecondOnly,
                });
                continue;
            }
            let (Some((k, c)), true) = (stage1_contract(plan, u, false), r < current) else {
                continue;
            };
            let mut pool: Vec<Contract> = contracts_of(m, k).into_iter().filter(|x| x.mue != u).collect();
            pool.push(c);
            if sbs_choose(game, k, &pool).contains(&c) {
                let clause = match c.periods {
                    [true, true] => Clause::BothPeriods,
                    [true, false] => Clause::FirstOnly,
                    _ => Clause::SecondOnly,
                };
                out.push(Violation {
                    period: 1,
                    mue: Some(u),
                    bs: Some(PlayerId::sbs(k)),
                    clause,
                });
            }
        }
    }
    for k in 0..inst.sbss.len() {
        for c in contracts_of(m, k) {
            if game.gamma(c.mue, k) < 0.0 {
                out.push(Violation {
                    period: 1,
                    mue: Some(c.mue),
                    bs: Some(PlayerId::sbs(k)),
                    clause: Clause::BsIndividual,
                });
            }
        }
    }
    out
}

fn period2_admits(game: &Game, m: &DynamicMatching, b: PlayerId, u: usize) -> bool {
    match b.kind {
        PlayerKind::Mbs => game.mbs_admits(u, m.mu1[u]),
        PlayerKind::Sbs => {
            let members = m.members(b, 2);
            !members.contains(&u)
                && members.len() < game.inst.sbss[b.index].quota
                && game.gamma(u, b.index) >= 0.0
        }
        PlayerKind::Mue => false,
    }
}

fn period2_violations(game: &Game, m: &DynamicMatching) -> Vec<Violation> {
    let inst = game.inst;
    let mut out = Vec::new();
    let mut bss: Vec<PlayerId> = (0..inst.sbss.len()).map(PlayerId::sbs).collect();
    bss.push(PlayerId::mbs());
    let releases = |b: PlayerId| match b.kind {
        PlayerKind::Sbs => m.members(b, 2).iter().any(|&w| game.gamma(w, b.index) < 0.0),
        _ => false,
    };
    for u in 0..inst.mues.len() {
        let prof = &game.profiles.mues[u];
        let current = prof.rank(&m.plan(u));
        let alone = Plan::new(m.mu1[u], Slot::Own);
        let alone_better = prof.rank(&alone) < current;
        if alone_better {
            out.push(Violation {
                period: 2,
                mue: Some(u),
                bs: None,
                clause: Clause::MueAlone,
            });
        }
        for &b in &bss {
            let plan = Plan::new(m.mu1[u], Slot::Partner(b));
            if prof.rank(&plan) < current && period2_admits(game, m, b, u) {
                out.push(Violation {
                    period: 2,
                    mue: Some(u),
                    bs: Some(b),
                    clause: Clause::PairMatch,
                });
            }
            if alone_better && releases(b) {
                out.push(Violation {
                    period: 2,
                    mue: Some(u),
                    bs: Some(b),
                    clause: Clause::PairRelease,
                });
            }
        }
    }
    out
}

/// True when neither period has a violation.
pub fn is_dynamically_stable(game: &Game, m: &DynamicMatching) -> bool {
    find_blocking_pairs(game, m, 1).is_empty() && find_blocking_pairs(game, m, 2).is_empty()
}

/// Proposals sent to small cells over both stages.
pub fn signaling_overhead(trace: &[ProposalEvent]) -> usize {
    trace.iter().filter(|e| e.bs.kind == PlayerKind::Sbs).count()
}

/// Proposals received by one small cell.
pub fn proposals_to(trace: &[ProposalEvent], k: usize) -> usize {
    trace.iter().filter(|e| e.bs == PlayerId::sbs(k)).count()
}

/// How an MUE is actually served in one period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Service {
    Sbs(usize),
    Mbs,
    Cache,
    /// Matched to itself without enough cache; served by the MBS.
    MbsFallback,
}

pub fn realised_service(inst: &GameInstance, m: &DynamicMatching, u: usize) -> [Service; 2] {
    let first_own = m.mu1[u] == Slot::Own;
    let one = |slot: Slot, t: usize| match slot {
        Slot::Partner(p) if p.kind == PlayerKind::Sbs => Service::Sbs(p.index),
        Slot::Partner(_) => Service::Mbs,
        Slot::Own if inst.cache_covers(u, t, first_own) => Service::Cache,
        Slot::Own => Service::MbsFallback,
    };
    [one(m.mu1[u], 0), one(m.mu2[u], 1)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRow {
    pub mue: String,
    pub period1: String,
    pub period2: String,
    pub proposals_sent: usize,
}

pub fn match_rows(outcome: &MatchOutcome) -> Vec<MatchRow> {
    let m = &outcome.matching;
    (0..m.mu1.len())
        .map(|u| {
            let me = PlayerId::mue(u);
            MatchRow {
                mue: me.to_string(),
                period1: m.mu1[u].label(me),
                period2: m.mu2[u].label(me),
                proposals_sent: outcome.trace.iter().filter(|e| e.mue == u).count(),
            }
        })
        .collect()
}

/// Writes rows with columns mue, period1, period2, proposals_sent.
pub fn write_match_csv<W: Write>(outcome: &MatchOutcome, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for row in match_rows(outcome) {
        w.serialize(row).map_err(|e| MatchingError::Serialization(e.to_string()))?;
    }
    w.flush().map_err(|e| MatchingError::Serialization(e.to_string()))
}

/// The two-MUE, two-cell example with a gated MBS fallback for `u1`.
/// `phi_u1_k1` below ε puts the MBS in `u1`'s profile.
pub fn example_instance(phi_u1_k1: f64) -> (GameInstance, Utilities) {
    let cell = |x: f64| CellDisk::new([x, 0.0], 50.0).expect("valid cell");
    let mue = |segments: f64, first: Vec<usize>, second: Vec<usize>| MueSpec {
        pose: Pose::new(0.0, 0.0, 0.0, 5.0),
        cache_segments: segments,
        p_th: 0.1,
        first_targets: first,
        second_targets: second,
        scan_interval: None,
        period: None,
        second_period: None,
    };
    let mut inst = GameInstance::new(
        vec![mue(2000.0, vec![0], vec![]), mue(3000.0, vec![0], vec![1])],
        vec![
            SbsSpec { cell: cell(0.0), quota: 1 },
            SbsSpec { cell: cell(200.0), quota: 1 },
        ],
    );
    inst.scan_interval = 5.0;
    let util = Utilities {
        phi: vec![vec![phi_u1_k1, -1.0], vec![0.09, 0.07]],
        gamma: vec![vec![3.0, 3.0], vec![2.0, 2.0]],
    };
    (inst, util)
}
