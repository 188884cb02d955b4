//! Independent checkers: brute-force offloading ILP, Monte Carlo estimators
//! for beam geometry, and an exhaustive stability scan.

use std::f64::consts::{PI, TAU};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    admissible_headings, beam_coverage_probability, beam_traverse_distance, caching_duration_cdf, hof_probability,
    sample_chord, trajectory_crosses_beam, BeamGeometry, CellDisk, GeometryError, Pose,
};
use crate::handover::hof_indicator;
use crate::matching::{
    deferred_acceptance_in, dynamic_match_in, find_blocking_pairs, single_period_blocking_pairs, DynamicMatching, Game,
    GameInstance, MatchingError, MueSpec, SbsSpec, Slot, Violation,
};
use crate::radio::{AntennaPattern, ChannelParams, CrossingTerms, LinkBudget};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("enumeration needs {needed} assignments, budget is {budget}")]
    BudgetExceeded { needed: f64, budget: u64 },
    #[error("invalid oracle input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Matching(#[from] MatchingError),
}

pub type Result<T> = std::result::Result<T, OracleError>;

/// Samples per independent random stream; fixes results across thread counts.
const CHUNK: usize = 1 << 14;

fn chunk_rng(seed: u64, chunk: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk as u64);
    rng
}

/// Estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

/// Coverage probability by sampling entry points uniformly on the cell edge
/// and headings uniformly over the full circle; outward headings never cross
/// a beam.
pub fn mc_coverage_probability(n_beams: u32, beamwidth: f64, samples: usize, seed: u64) -> Result<Estimate> {
    if samples == 0 || n_beams == 0 || !(beamwidth >= 0.0) {
        return Err(OracleError::Invalid("need samples ≥ 1, n_beams ≥ 1, beamwidth ≥ 0".into()));
    }
    let chunks = samples.div_ceil(CHUNK);
    let hits: usize = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = chunk_rng(seed, c);
            let n = CHUNK.min(samples - c * CHUNK);
            (0..n)
                .filter(|_| {
                    let entry = rng.random::<f64>() * TAU;
                    let heading = rng.random::<f64>() * TAU;
                    trajectory_crosses_beam(n_beams, beamwidth, entry, heading)
                })
                .count()
        })
        .sum();
    let p = hits as f64 / samples as f64;
    Ok(Estimate {
        mean: p,
        stderr: (p * (1.0 - p) / samples as f64).sqrt(),
    })
}

/// Sorted sample set with its step CDF.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalCdf {
    pub samples: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn new(mut samples: Vec<f64>) -> Self {
        samples.sort_by(f64::total_cmp);
        Self { samples }
    }

    pub fn eval(&self, x: f64) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.partition_point(|&s| s <= x) as f64 / self.samples.len() as f64
    }

    /// Mean of the finite samples.
    pub fn finite_mean(&self) -> f64 {
        let finite: Vec<f64> = self.samples.iter().copied().filter(|s| s.is_finite()).collect();
        finite.iter().sum::<f64>() / finite.len().max(1) as f64
    }

    /// Kolmogorov–Smirnov distance to a continuous CDF.
    pub fn ks_distance(&self, cdf: impl Fn(f64) -> f64) -> f64 {
        let n = self.samples.len() as f64;
        self.samples
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }
}

/// Caching durations for headings uniform over the admissible window of a
/// pose on the beam's entry edge. Headings that never reach the far edge
/// yield `+∞`.
pub fn mc_caching_duration(pose: &Pose, beam: &BeamGeometry, samples: usize, seed: u64) -> Result<EmpiricalCdf> {
    beam.check_entry_pose(pose)?;
    if !(pose.speed > 0.0) || samples == 0 {
        return Err(OracleError::Invalid("need positive speed and samples ≥ 1".into()));
    }
    let (start, width) = admissible_headings(beam);
    let chunks = samples.div_ceil(CHUNK);
    let parts: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = chunk_rng(seed, c);
            let n = CHUNK.min(samples - c * CHUNK);
            (0..n)
                .map(|_| {
                    let heading = start + rng.random::<f64>() * width;
                    let p = Pose::new(pose.x, pose.y, heading, pose.speed);
                    match beam_traverse_distance(&p, beam) {
                        Ok(r) => r / pose.speed,
                        Err(_) => f64::INFINITY,
                    }
                })
                .collect()
        })
        .collect();
    Ok(EmpiricalCdf::new(parts.concat()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlpMue {
    pub speed: f64,
    pub cache_segments: f64,
    pub p_th: f64,
    pub scan_interval: f64,
    /// Small cells this MUE may be assigned to.
    pub allowed: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlpSbs {
    pub radius: f64,
    pub quota: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlpInstance {
    pub mues: Vec<IlpMue>,
    pub sbss: Vec<IlpSbs>,
    pub t_mts: f64,
    pub play_rate: f64,
    /// Largest number of assignments enumerated.
    pub budget: u64,
}

impl IlpInstance {
    /// Period-1 problem of a game: each MUE may use its first-period cells.
    pub fn from_game(inst: &GameInstance) -> Self {
        Self {
            mues: inst
                .mues
                .iter()
                .enumerate()
                .map(|(u, m)| IlpMue {
                    speed: m.pose.speed,
                    cache_segments: m.cache_segments,
                    p_th: m.p_th,
                    scan_interval: inst.mue_scan_interval(u),
                    allowed: m.first_targets.clone(),
                })
                .collect(),
            sbss: inst
                .sbss
                .iter()
                .map(|s| IlpSbs {
                    radius: s.cell.radius,
                    quota: s.quota,
                })
                .collect(),
            t_mts: inst.t_mts,
            play_rate: inst.play_rate,
            budget: 10_000_000,
        }
    }
}

/// Per-MUE decision of the offloading problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Choice {
    Sbs(usize),
    Mbs,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlpSolution {
    pub assignment: Vec<Choice>,
    /// MUEs on the MBS.
    pub objective: usize,
}

fn choice_code(c: Choice, k: usize) -> usize {
    match c {
        Choice::Sbs(i) => i,
        Choice::Mbs => k,
        Choice::None => k + 1,
    }
}

fn decode(mut idx: u64, u: usize, k: usize, out: &mut [Choice]) {
    let base = (k + 2) as u64;
    for slot in out.iter_mut().take(u).rev() {
        let d = (idx % base) as usize;
        idx /= base;
        *slot = match d {
            d if d < k => Choice::Sbs(d),
            d if d == k => Choice::Mbs,
            _ => Choice::None,
        };
    }
}

/// First violated constraint of an assignment, if any: HOF tolerance on the
/// assigned cell, cache coverage when on neither SBS nor MBS, the allowed
/// cell set, and small-cell quotas.
pub fn check_assignment(inst: &IlpInstance, assignment: &[Choice]) -> std::result::Result<(), String> {
    if assignment.len() != inst.mues.len() {
        return Err(format!("{} choices for {} MUEs", assignment.len(), inst.mues.len()));
    }
    let mut load = vec![0usize; inst.sbss.len()];
    for (u, (m, &c)) in inst.mues.iter().zip(assignment).enumerate() {
        match c {
            Choice::Sbs(k) => {
                let sbs = inst.sbss.get(k).ok_or(format!("u{} on unknown cell {k}", u + 1))?;
                if !m.allowed.contains(&k) {
                    return Err(format!("u{} cannot reach k{}", u + 1, k + 1));
                }
                let hof = hof_probability(m.speed, inst.t_mts, sbs.radius).map_err(|e| e.to_string())?;
                if hof.probability > m.p_th {
                    return Err(format!("u{} exceeds its HOF tolerance on k{}", u + 1, k + 1));
                }
                load[k] += 1;
            }
            Choice::None => {
                if m.cache_segments / inst.play_rate < m.scan_interval {
                    return Err(format!("u{} cache does not cover the scan interval", u + 1));
                }
            }
            Choice::Mbs => {}
        }
    }
    for (k, (&l, s)) in load.iter().zip(&inst.sbss).enumerate() {
        if l > s.quota {
            return Err(format!("k{} holds {l} MUEs, quota {}", k + 1, s.quota));
        }
    }
    Ok(())
}

/// Exhaustive search for the assignment with the fewest MBS MUEs; ties go to
/// the lexicographically smallest assignment (cells by index, then MBS, then
/// none).
pub fn solve_offload_bruteforce(inst: &IlpInstance) -> Result<IlpSolution> {
    let (u, k) = (inst.mues.len(), inst.sbss.len());
    let needed = ((k + 2) as f64).powi(u as i32);
    if needed > inst.budget as f64 {
        return Err(OracleError::BudgetExceeded {
            needed,
            budget: inst.budget,
        });
    }
    let total = needed as u64;
    let blocks = total.div_ceil(4096);
    let best = (0..blocks)
        .into_par_iter()
        .filter_map(|b| {
            let mut a = vec![Choice::None; u];
            (b * 4096..((b + 1) * 4096).min(total))
                .filter_map(|idx| {
                    decode(idx, u, k, &mut a);
                    check_assignment(inst, &a).ok()?;
                    Some((a.iter().filter(|c| **c == Choice::Mbs).count(), idx))
                })
                .min()
        })
        .min()
        .expect("all-MBS assignment is always feasible");
    let mut assignment = vec![Choice::None; u];
    decode(best.1, u, k, &mut assignment);
    Ok(IlpSolution {
        assignment,
        objective: best.0,
    })
}

/// Lexicographic rank of an assignment in the enumeration order.
pub fn assignment_index(assignment: &[Choice], k: usize) -> u64 {
    assignment
        .iter()
        .fold(0u64, |acc, &c| acc * (k + 2) as u64 + choice_code(c, k) as u64)
}

/// Period-1 decisions implied by a matching: a held cell, otherwise cache
/// when it covers the scan interval and the MBS when it does not.
pub fn assignment_from_matching(inst: &GameInstance, m: &DynamicMatching) -> Vec<Choice> {
    (0..inst.mues.len())
        .map(|u| match m.mu1[u] {
            Slot::Partner(p) if p.kind == crate::matching::PlayerKind::Sbs => Choice::Sbs(p.index),
            Slot::Partner(_) => Choice::Mbs,
            Slot::Own if inst.playback(u) >= inst.mue_scan_interval(u) => Choice::None,
            Slot::Own => Choice::Mbs,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockingReport {
    pub violations: Vec<Violation>,
}

impl BlockingReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn write_csv<W: std::io::Write>(&self, sink: W) -> std::result::Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["period", "mue", "bs", "clause"])?;
        for v in &self.violations {
            w.write_record([
                v.period.to_string(),
                v.mue.map(|u| format!("u{}", u + 1)).unwrap_or_default(),
                v.bs.map(|b| b.to_string()).unwrap_or_default(),
                format!("{:?}", v.clause),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

impl fmt::Display for BlockingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return writeln!(f, "no blocking pairs");
        }
        for v in &self.violations {
            let mue = v.mue.map(|u| format!("u{}", u + 1)).unwrap_or_else(|| "-".into());
            let bs = v.bs.map(|b| b.to_string()).unwrap_or_else(|| "-".into());
            writeln!(f, "period {}: {mue} with {bs} ({:?})", v.period, v.clause)?;
        }
        Ok(())
    }
}

/// All period-1 and period-2 violations of a matching, after checking
/// quotas and partner ids.
pub fn scan_all_blockings(game: &Game, m: &DynamicMatching) -> Result<BlockingReport> {
    m.validate(game.inst)?;
    let mut violations = find_blocking_pairs(game, m, 1);
    violations.extend(find_blocking_pairs(game, m, 2));
    Ok(BlockingReport { violations })
}

/// Share of chord-sampled cell crossings shorter than `speed·t_mts`.
pub fn mc_hof_frequency(speed: f64, t_mts: f64, radius: f64, samples: usize, seed: u64) -> Result<Estimate> {
    let cell = CellDisk::new([0.0, 0.0], radius)?;
    if samples == 0 || !(speed > 0.0) || !(t_mts >= 0.0) {
        return Err(OracleError::Invalid("need samples ≥ 1, positive speed, t_mts ≥ 0".into()));
    }
    let chunks = samples.div_ceil(CHUNK);
    let fails: usize = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = chunk_rng(seed, c);
            let n = CHUNK.min(samples - c * CHUNK);
            (0..n)
                .filter(|_| hof_indicator(sample_chord(&cell, &mut rng).length / speed, t_mts) == 1)
                .count()
        })
        .sum();
    let p = fails as f64 / samples as f64;
    Ok(Estimate {
        mean: p,
        stderr: (p * (1.0 - p) / samples as f64).sqrt(),
    })
}

/// Random small game: up to `max_mues` MUEs and `max_sbss` cells with random
/// quotas, caches, speeds, thresholds, reachable sets and intervals.
pub fn random_game_instance(seed: u64, max_mues: usize, max_sbss: usize) -> GameInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nk = rng.random_range(1..=max_sbss.max(1));
    let nu = rng.random_range(1..=max_mues.max(1));
    let sbss = (0..nk)
        .map(|i| SbsSpec {
            cell: CellDisk {
                center: [i as f64 * 100.0, 0.0],
                radius: rng.random_range(10.0..150.0),
            },
            quota: rng.random_range(1..=3),
        })
        .collect();
    let subset = |rng: &mut ChaCha8Rng| (0..nk).filter(|_| rng.random_bool(0.5)).collect::<Vec<_>>();
    let mues = (0..nu)
        .map(|_| MueSpec {
            pose: Pose::new(0.0, 0.0, 0.0, rng.random_range(0.5..16.0)),
            cache_segments: f64::from(rng.random_range(0..=10)) * 1000.0,
            p_th: rng.random_range(0.0..0.3),
            first_targets: subset(&mut rng),
            second_targets: subset(&mut rng),
            scan_interval: Some(f64::from(rng.random_range(1..=12))),
            period: Some(f64::from(rng.random_range(1..=5))),
            second_period: None,
        })
        .collect();
    let mut inst = GameInstance::new(mues, sbss);
    inst.epsilon = rng.random_range(0.0..0.1);
    inst
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Coverage,
    Cdf,
    Rate,
    Hof,
    Stability,
    Ilp,
}

impl Suite {
    pub const ALL: [Suite; 6] = [Suite::Coverage, Suite::Cdf, Suite::Rate, Suite::Hof, Suite::Stability, Suite::Ilp];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Coverage => "coverage",
            Suite::Cdf => "cdf",
            Suite::Rate => "rate",
            Suite::Hof => "hof",
            Suite::Stability => "stability",
            Suite::Ilp => "ilp",
        }
    }

    pub fn parse(name: &str) -> Option<Suite> {
        Suite::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// One verified quantity: `passed` when `error <= tolerance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub suite: String,
    pub case: String,
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn new(suite: Suite, case: String, error: f64, tolerance: f64) -> Self {
        Self {
            suite: suite.name().to_string(),
            case,
            error,
            tolerance,
            passed: error <= tolerance,
        }
    }
}

pub fn write_checks_csv<W: std::io::Write>(checks: &[Check], sink: W) -> std::result::Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(sink);
    for c in checks {
        w.serialize(c)?;
    }
    w.flush()?;
    Ok(())
}

const MC_SAMPLES: usize = 100_000;

/// Runs one oracle suite against the analytic results.
pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    match suite {
        Suite::Coverage => {
            for n in 2..=6u32 {
                for step in 1..=5 {
                    let theta = TAU / f64::from(n) * f64::from(step) / 5.0;
                    let exact = beam_coverage_probability(n, theta)?;
                    let mc = mc_coverage_probability(n, theta, MC_SAMPLES, seed)?;
                    out.push(Check::new(suite, format!("n={n} theta={theta:.4}"), (exact - mc.mean).abs(), 0.01));
                }
            }
        }
        Suite::Cdf => {
            let width = 10f64.to_radians();
            for r in [10.0, 20.0, 40.0] {
                let pose = Pose::new(r, 0.0, PI / 2.0, 16.0);
                let beam = BeamGeometry::from_entry_pose([0.0, 0.0], 3, width, &pose)?;
                let ecdf = mc_caching_duration(&pose, &beam, MC_SAMPLES, seed)?;
                let ks = ecdf.ks_distance(|t| caching_duration_cdf(&pose, &beam, t).unwrap_or(f64::NAN));
                out.push(Check::new(suite, format!("ks r={r}"), ks, 0.02));
            }
        }
        Suite::Rate => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = ChannelParams::mmw_los();
            let mut worst: f64 = 0.0;
            for _ in 0..1000 {
                let (pose, beam, budget) = random_crossing(&mut rng, &params)?;
                let terms = CrossingTerms::new(&pose, &beam, &budget, &params).map_err(|e| OracleError::Invalid(e.to_string()))?;
                let closed = terms.closed_form().map_err(|e| OracleError::Invalid(e.to_string()))?;
                let quad = terms.quadrature(1e-12).map_err(|e| OracleError::Invalid(e.to_string()))?;
                worst = worst.max((closed - quad).abs() / quad.abs());
            }
            out.push(Check::new(suite, "closed form vs quadrature, 1000 geometries".into(), worst, 1e-6));
        }
        Suite::Hof => {
            for v in [4.0, 8.0, 16.0] {
                let exact = hof_probability(v, 1.0, 30.0)?.probability;
                let mc = mc_hof_frequency(v, 1.0, 30.0, MC_SAMPLES, seed)?;
                out.push(Check::new(suite, format!("v={v} a=30"), (exact - mc.mean).abs(), 0.01));
            }
        }
        Suite::Stability => {
            let (mut da_blocks, mut dyn_blocks) = (0usize, 0usize);
            for i in 0..1000u64 {
                let inst = random_game_instance(seed.wrapping_mul(1000).wrapping_add(i), 8, 4);
                let game = Game::new(&inst)?;
                let da = deferred_acceptance_in(&game);
                da_blocks += single_period_blocking_pairs(&game, &da).len();
                let m = dynamic_match_in(&game);
                dyn_blocks += scan_all_blockings(&game, &m.matching)?.violations.len();
            }
            out.push(Check::new(suite, "single-period blocking pairs".into(), da_blocks as f64, 0.0));
            out.push(Check::new(suite, "two-period violations".into(), dyn_blocks as f64, 0.0));
        }
        Suite::Ilp => {
            let (mut infeasible, mut below_optimum) = (0usize, 0usize);
            for i in 0..500u64 {
                let inst = random_game_instance(seed.wrapping_mul(1000).wrapping_add(i), 6, 3);
                let game = Game::new(&inst)?;
                let m = dynamic_match_in(&game);
                let ilp = IlpInstance::from_game(&inst);
                let best = solve_offload_bruteforce(&ilp)?;
                let a = assignment_from_matching(&inst, &m.matching);
                if check_assignment(&ilp, &a).is_err() {
                    infeasible += 1;
                }
                if a.iter().filter(|c| **c == Choice::Mbs).count() < best.objective {
                    below_optimum += 1;
                }
            }
            out.push(Check::new(suite, "infeasible matchings".into(), infeasible as f64, 0.0));
            out.push(Check::new(suite, "matchings beating the optimum".into(), below_optimum as f64, 0.0));
        }
    }
    Ok(out)
}

/// Random entry-edge crossing with a valid heading and a random link budget.
pub fn random_crossing<R: Rng + ?Sized>(rng: &mut R, params: &ChannelParams) -> Result<(Pose, BeamGeometry, LinkBudget)> {
    let n = rng.random_range(2..=6u32);
    let width = rng.random_range(0.01..(TAU / f64::from(n)).min(PI / 2.0));
    let r = rng.random_range(5.0..150.0);
    let phi = rng.random_range(0.0..TAU);
    let rel = rng.random_range(width + 0.01..PI - 0.01);
    let heading = phi + rel;
    let pose = Pose::new(r * phi.cos(), r * phi.sin(), heading, rng.random_range(1.0..20.0));
    let beam = BeamGeometry::from_entry_pose([0.0, 0.0], n, width, &pose)?;
    let power = [20.0, 27.0, 30.0][rng.random_range(0..3)];
    let budget = LinkBudget::for_channel(power, &AntennaPattern::default(), 5e9, -174.0, params)
        .map_err(|e| OracleError::Invalid(e.to_string()))?;
    Ok((pose, beam, budget))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_roundtrip() {
        let a = [Choice::Sbs(1), Choice::None, Choice::Mbs];
        let idx = assignment_index(&a, 2);
        let mut b = [Choice::None; 3];
        decode(idx, 3, 2, &mut b);
        assert_eq!(a, b);
    }

    #[test]
    fn ecdf_steps() {
        let e = EmpiricalCdf::new(vec![3.0, 1.0, 2.0]);
        assert_eq!(e.eval(0.5), 0.0);
        assert!((e.eval(2.0) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(e.eval(5.0), 1.0);
    }
}
